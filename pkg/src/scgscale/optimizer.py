"""Momentum conditional-gradient iteration loops and trajectory logging.

The constrained variant mixes the iterate convexly with a radius-scaled LMO
direction, x <- (1 - beta) x + beta eta d; the unconstrained variant takes
additive steps x <- x + eta d. Both share the same momentum buffer update
m <- (1 - alpha) m + alpha g.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, replace
from typing import Optional, Union

import numpy as np

from .geometry import LayeredPoint, block_dual_norm, block_primal_norm, lmo_block
from . import problems

__all__ = [
    "ConstantBeta",
    "WarmdownBeta",
    "HorizonBeta",
    "BetaSchedule",
    "beta_at",
    "ScgConfig",
    "Stage",
    "StagePlan",
    "RunLog",
    "scg_step",
    "uscg_step",
    "run",
    "run_staged",
    "RUNLOG_CSV_HEADER",
]

_FLOAT_FMT = "{:.17g}"
_INVARIANT_SLACK = 1e-9


@dataclass(frozen=True)
class ConstantBeta:
    value: float

    def __post_init__(self):
        if not 0.0 < self.value <= 1.0:
            raise ValueError(f"constant beta must lie in (0, 1], got {self.value}")


@dataclass(frozen=True)
class WarmdownBeta:
    """Constant stepsize with a terminal linear decay.

    beta_k = gamma for k < total_steps - warmdown_steps, then decays linearly
    as gamma * (total_steps - k) / warmdown_steps over the warmdown tail.
    """

    gamma: float
    total_steps: int
    warmdown_steps: int

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if not 0 <= self.warmdown_steps <= self.total_steps:
            raise ValueError("warmdown_steps must lie in [0, total_steps]")

    @classmethod
    def default_tail(cls, gamma: float, total_steps: int) -> "WarmdownBeta":
        """Warmdown over the final 28% of the step budget."""
        return cls(gamma, total_steps, max(1, round(0.28 * total_steps)))


@dataclass(frozen=True)
class HorizonBeta:
    """Constant beta = c / iters; requires iters >= 2c."""

    c: float
    iters: int

    def __post_init__(self):
        if self.c <= 0:
            raise ValueError(f"c must be positive, got {self.c}")
        if self.iters < 2 * self.c:
            raise ValueError(
                f"iters must be at least 2c (got iters={self.iters}, c={self.c})"
            )

    @property
    def value(self) -> float:
        return self.c / self.iters


BetaSchedule = Union[ConstantBeta, WarmdownBeta, HorizonBeta]


def beta_at(schedule: BetaSchedule, k: int) -> float:
    if isinstance(schedule, ConstantBeta):
        return schedule.value
    if isinstance(schedule, HorizonBeta):
        return schedule.value
    if isinstance(schedule, WarmdownBeta):
        n, m = schedule.total_steps, schedule.warmdown_steps
        if k < n - m:
            return schedule.gamma
        return schedule.gamma * (n - k) / m
    raise TypeError(f"unknown beta schedule {schedule!r}")


def _constant_value(schedule: BetaSchedule) -> Optional[float]:
    if isinstance(schedule, ConstantBeta):
        return schedule.value
    if isinstance(schedule, HorizonBeta):
        return schedule.value
    return None


@dataclass(frozen=True)
class ScgConfig:
    """All optimizer hyperparameters for one run.

    radii overrides the per-block geometry radii when given (parallel to the
    block list). momentum_init selects the buffer seed: the first gradient
    sample (default) or zeros. check_invariants arms the per-step iterate
    bound checker whenever its preconditions hold.
    """

    alpha: float
    beta: BetaSchedule
    iters: int
    seed: int = 0
    radii: Optional[tuple[float, ...]] = None
    eval_every: int = 1
    store_gradients: bool = False
    momentum_init: str = "first_sample"
    check_invariants: bool = True

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.iters < 0:
            raise ValueError(f"iters must be nonnegative, got {self.iters}")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if self.momentum_init not in ("first_sample", "zeros"):
            raise ValueError(f"unknown momentum_init {self.momentum_init!r}")
        if self.radii is not None:
            object.__setattr__(self, "radii", tuple(float(r) for r in self.radii))
            if any(r <= 0 for r in self.radii):
                raise ValueError("all radii must be positive")


@dataclass(frozen=True)
class Stage:
    token_allotment: float
    B: float
    S: float
    beta: float
    alpha: float
    note: str = ""

    def __post_init__(self):
        if self.token_allotment <= 0:
            raise ValueError("token_allotment must be positive")
        if self.B < 1 or self.S < 1:
            raise ValueError("B and S must be >= 1")
        if not 0.0 < self.beta <= 1.0:
            raise ValueError(f"stage beta must lie in (0, 1], got {self.beta}")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"stage alpha must lie in (0, 1], got {self.alpha}")

    @property
    def iters(self) -> int:
        return int(self.token_allotment // (self.B * self.S))


@dataclass(frozen=True)
class StagePlan:
    stages: tuple[Stage, ...]

    def __post_init__(self):
        if not self.stages:
            raise ValueError("a stage plan needs at least one stage")
        object.__setattr__(self, "stages", tuple(self.stages))

    @property
    def total_tokens(self) -> float:
        return sum(s.token_allotment for s in self.stages)


RUNLOG_CSV_HEADER = ["k", "loss", "x_primal", "g_dual", "m_dual", "beta", "step_disp", "stage"]


@dataclass
class RunLog:
    """Per-iteration trajectory records plus the final state.

    Rows are recorded every ``eval_every`` steps: step index, exact loss and
    composite primal norm of the pre-update iterate, composite dual norms of
    the gradient sample and momentum buffer, the stepsize used, the composite
    primal norm of the step displacement, and the stage index.
    """

    k: np.ndarray
    loss: np.ndarray
    x_primal: np.ndarray
    g_dual: np.ndarray
    m_dual: np.ndarray
    beta: np.ndarray
    step_disp: np.ndarray
    stage: np.ndarray
    final_loss: float = math.nan
    final_x: Optional[LayeredPoint] = None
    invariant_violations: int = 0
    first_violation: Optional[str] = None
    checked_steps: int = 0
    gradients: Optional[list[LayeredPoint]] = None

    def __post_init__(self):
        n = len(self.k)
        for name in ("loss", "x_primal", "g_dual", "m_dual", "beta", "step_disp", "stage"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"column {name} has mismatched length")
        if n and not np.all(np.diff(self.k) > 0):
            raise ValueError("step indices must be strictly increasing")
        for name in ("loss", "x_primal", "g_dual", "m_dual", "step_disp"):
            col = getattr(self, name)
            if n and not (np.all(np.isfinite(col)) and np.all(col >= 0)):
                raise ValueError(f"column {name} must be finite and nonnegative")

    def __len__(self):
        return len(self.k)

    def to_csv(self, path_or_buf) -> None:
        if hasattr(path_or_buf, "write"):
            self._write(path_or_buf)
        else:
            with open(path_or_buf, "w", newline="") as fh:
                self._write(fh)

    def _write(self, fh) -> None:
        writer = csv.writer(fh)
        writer.writerow(RUNLOG_CSV_HEADER)
        for i in range(len(self)):
            writer.writerow(
                [int(self.k[i])]
                + [
                    _FLOAT_FMT.format(v)
                    for v in (
                        self.loss[i],
                        self.x_primal[i],
                        self.g_dual[i],
                        self.m_dual[i],
                        self.beta[i],
                        self.step_disp[i],
                    )
                ]
                + [int(self.stage[i])]
            )

    def to_csv_string(self) -> str:
        buf = io.StringIO()
        self._write(buf)
        return buf.getvalue()

    @classmethod
    def from_csv(cls, path_or_buf) -> "RunLog":
        if hasattr(path_or_buf, "read"):
            rows = list(csv.reader(path_or_buf))
        else:
            with open(path_or_buf, newline="") as fh:
                rows = list(csv.reader(fh))
        if not rows or rows[0] != RUNLOG_CSV_HEADER:
            raise ValueError(f"expected header {','.join(RUNLOG_CSV_HEADER)}")
        body = rows[1:]
        cols = {name: [] for name in RUNLOG_CSV_HEADER}
        for lineno, row in enumerate(body, start=2):
            if len(row) != len(RUNLOG_CSV_HEADER):
                raise ValueError(f"line {lineno}: expected {len(RUNLOG_CSV_HEADER)} fields")
            for name, val in zip(RUNLOG_CSV_HEADER, row):
                cols[name].append(val)
        return cls(
            k=np.array([int(v) for v in cols["k"]], dtype=int),
            loss=np.array([float(v) for v in cols["loss"]]),
            x_primal=np.array([float(v) for v in cols["x_primal"]]),
            g_dual=np.array([float(v) for v in cols["g_dual"]]),
            m_dual=np.array([float(v) for v in cols["m_dual"]]),
            beta=np.array([float(v) for v in cols["beta"]]),
            step_disp=np.array([float(v) for v in cols["step_disp"]]),
            stage=np.array([int(v) for v in cols["stage"]], dtype=int),
        )


def _resolve_radii(config_radii, geometry) -> list[float]:
    if config_radii is None:
        return [g.radius_eta for g in geometry]
    if len(config_radii) != len(geometry):
        raise ValueError("radii must be parallel to the block list")
    return list(config_radii)


def scg_step(x, m, g_sample, alpha, beta_k, radii, geometry, spectral_method="exact"):
    """One constrained step: returns (x', m') as new layered points.

    m' = (1 - alpha) m + alpha g; d = lmo(m'); per block,
    x' = (1 - beta_k) x + beta_k eta d.
    """
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    if not 0.0 <= beta_k <= 1.0:
        raise ValueError(f"beta_k must lie in [0, 1], got {beta_k}")
    radii = _resolve_radii(radii, geometry)
    m_new = [
        (1.0 - alpha) * mb + alpha * gb for mb, gb in zip(m.arrays, g_sample.arrays)
    ]
    x_new = []
    for xb, mb, eta, geom in zip(x.arrays, m_new, radii, geometry):
        d = lmo_block(mb, geom.kind, spectral_method)
        x_new.append((1.0 - beta_k) * xb + beta_k * eta * d)
    return (
        LayeredPoint.from_arrays(x.names, x_new),
        LayeredPoint.from_arrays(x.names, m_new),
    )


def uscg_step(x, m, g_sample, alpha, eta, radii=None, geometry=None, spectral_method="exact"):
    """One unconstrained step: additive update x' = x + eta d, no contraction.

    eta is a global step scale; per-block radii multiply it when given.
    """
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    if eta < 0:
        raise ValueError(f"eta must be nonnegative, got {eta}")
    if geometry is None:
        raise ValueError("geometry is required")
    scales = [eta] * len(geometry) if radii is None else [eta * r for r in radii]
    m_new = [
        (1.0 - alpha) * mb + alpha * gb for mb, gb in zip(m.arrays, g_sample.arrays)
    ]
    x_new = []
    for xb, mb, s, geom in zip(x.arrays, m_new, scales, geometry):
        d = lmo_block(mb, geom.kind, spectral_method)
        x_new.append(xb + s * d)
    return (
        LayeredPoint.from_arrays(x.names, x_new),
        LayeredPoint.from_arrays(x.names, m_new),
    )


@dataclass(frozen=True)
class _Segment:
    iters: int
    schedule: BetaSchedule
    alpha: float
    noise: "problems.NoiseModel"
    stage_index: int


def _run_segments(spec, segments, config, variant, x0, reset_momentum=False):
    geometry = spec.geometry
    names = spec.block_names
    radii = _resolve_radii(config.radii, geometry)
    kinds = [g.kind for g in geometry]
    n_blocks = len(geometry)

    if x0 is None:
        x = [np.zeros(g.shape) for g in geometry]
    else:
        if tuple(x0.names) != tuple(names):
            raise ValueError("x0 block names do not match the problem")
        x = [np.array(a, dtype=float, copy=True) for a in x0.arrays]
        for a, g in zip(x, geometry):
            if a.shape != g.shape:
                raise ValueError("x0 block shapes do not match the geometry")

    rng = np.random.default_rng(config.seed)
    m = None

    n_rows = sum(len(range(0, s.iters, config.eval_every)) for s in segments)
    col_k = np.empty(n_rows, dtype=int)
    col_stage = np.empty(n_rows, dtype=int)
    cols = {name: np.empty(n_rows) for name in ("loss", "x_primal", "g_dual", "m_dual", "beta", "step_disp")}
    grads: Optional[list[LayeredPoint]] = [] if config.store_gradients else None

    violations = 0
    first_violation = None
    checked = 0

    # kind codes for the inlined hot-loop update
    EUCLID, SIGN, SPECTRAL = 0, 1, 2
    codes = [
        EUCLID if g.kind.value == "euclidean" else SIGN if g.kind.value == "sign" else SPECTRAL
        for g in geometry
    ]
    scratch = [np.empty(g.shape) for g in geometry]

    row = 0
    k_global = 0
    is_scg = variant == "scg"
    for seg in segments:
        if reset_momentum and k_global > 0:
            m = None
        loss_fn, grad_fn = problems.compiled(spec)
        sigma_pc = problems.per_coordinate_sigma(spec, seg.noise)
        alpha = seg.alpha
        one_minus_alpha = 1.0 - alpha
        beta_const = _constant_value(seg.schedule)
        # The iterate-bound checker needs a constant stepsize with
        # beta = c/K, K >= 2c (i.e. beta <= 1/2) and 2||x0|| <= eta per block.
        check = (
            config.check_invariants
            and is_scg
            and beta_const is not None
            and beta_const <= 0.5
            and all(
                2.0 * block_primal_norm(xb, kind) <= eta
                for xb, kind, eta in zip(x, kinds, radii)
            )
        )
        contraction = 1.0  # (1 - beta)^k, tracked while the checker is armed
        for k_local in range(seg.iters):
            record = (k_local % config.eval_every) == 0
            if record:
                loss_k = loss_fn(x)
                x_primal_k = max(
                    block_primal_norm(xb, kind) for xb, kind in zip(x, kinds)
                )
            g = grad_fn(x)
            if sigma_pc > 0.0:
                for gb in g:
                    gb += sigma_pc * rng.standard_normal(gb.shape)
            if grads is not None:
                grads.append(LayeredPoint.from_arrays(names, [gb.copy() for gb in g]))
            if m is None:
                if config.momentum_init == "first_sample":
                    m = [gb.copy() for gb in g]
                else:
                    m = [alpha * gb for gb in g]
            else:
                for mb, gb in zip(m, g):
                    mb *= one_minus_alpha
                    mb += alpha * gb
            beta_k = beta_const if beta_const is not None else beta_at(seg.schedule, k_local)
            if beta_k > 1.0 or beta_k < 0.0:
                raise ValueError(f"schedule produced beta={beta_k} outside [0, 1]")
            if record:
                g_dual_k = sum(block_dual_norm(gb, kind) for gb, kind in zip(g, kinds))
                m_dual_k = sum(block_dual_norm(mb, kind) for mb, kind in zip(m, kinds))

            need_disp = record or check
            if need_disp:
                disp_blocks = [0.0] * n_blocks
                x_prev = [xb.copy() for xb in x]
            one_minus_beta = 1.0 - beta_k
            for i in range(n_blocks):
                mb = m[i]
                code = codes[i]
                if code == EUCLID:
                    nrm = math.sqrt(float(np.vdot(mb, mb)))
                    if is_scg:
                        x[i] *= one_minus_beta
                        if nrm > 0.0:
                            np.multiply(mb, beta_k * radii[i] / nrm, out=scratch[i])
                            x[i] -= scratch[i]
                    elif nrm > 0.0:
                        np.multiply(mb, radii[i] / nrm, out=scratch[i])
                        x[i] -= scratch[i]
                elif code == SIGN:
                    np.sign(mb, out=scratch[i])
                    if is_scg:
                        x[i] *= one_minus_beta
                        scratch[i] *= beta_k * radii[i]
                    else:
                        scratch[i] *= radii[i]
                    x[i] -= scratch[i]
                else:
                    d = lmo_block(mb, kinds[i])
                    if is_scg:
                        x[i] *= one_minus_beta
                        x[i] += (beta_k * radii[i]) * d
                    else:
                        x[i] += radii[i] * d
                if need_disp:
                    disp_blocks[i] = block_primal_norm(x[i] - x_prev[i], kinds[i])

            if check:
                checked += 1
                contraction *= 1.0 - beta_k  # now (1 - beta)^(k+1)
                for i in range(n_blocks):
                    eta = radii[i]
                    x_norm = block_primal_norm(x[i], kinds[i])
                    x_bound = eta * (1.0 - 0.5 * contraction) + _INVARIANT_SLACK
                    ok_norm = x_norm <= x_bound
                    ok_disp = disp_blocks[i] <= 2.0 * beta_k * eta + _INVARIANT_SLACK
                    if not (ok_norm and ok_disp):
                        violations += 1
                        if first_violation is None:
                            first_violation = (
                                f"step {k_global} block {names[i]}: "
                                f"|x|={x_norm:.6g} bound={x_bound:.6g} "
                                f"disp={disp_blocks[i]:.6g} disp_bound={2.0 * beta_k * eta:.6g}"
                            )

            if record:
                col_k[row] = k_global
                col_stage[row] = seg.stage_index
                cols["loss"][row] = loss_k
                cols["x_primal"][row] = x_primal_k
                cols["g_dual"][row] = g_dual_k
                cols["m_dual"][row] = m_dual_k
                cols["beta"][row] = beta_k
                cols["step_disp"][row] = max(disp_blocks)
                row += 1
            k_global += 1

    final_x = LayeredPoint.from_arrays(names, [a.copy() for a in x])
    loss_fn, _ = problems.compiled(spec)
    return RunLog(
        k=col_k,
        loss=cols["loss"],
        x_primal=cols["x_primal"],
        g_dual=cols["g_dual"],
        m_dual=cols["m_dual"],
        beta=cols["beta"],
        step_disp=cols["step_disp"],
        stage=col_stage,
        final_loss=float(loss_fn(x)),
        final_x=final_x,
        invariant_violations=violations,
        first_violation=first_violation,
        checked_steps=checked,
        gradients=grads,
    )


def run(spec, config: ScgConfig, variant: str = "scg", x0: Optional[LayeredPoint] = None) -> RunLog:
    """Execute the iteration for config.iters steps; deterministic given seed.

    The momentum buffer is seeded with the first gradient sample unless the
    config selects zero initialization.
    """
    if variant not in ("scg", "uscg"):
        raise ValueError(f"unknown variant {variant!r}")
    segments = [_Segment(config.iters, config.beta, config.alpha, spec.noise, 0)]
    return _run_segments(spec, segments, config, variant, x0)


def run_staged(
    spec,
    plan: StagePlan,
    base_config: ScgConfig,
    variant: str = "scg",
    x0: Optional[LayeredPoint] = None,
    reset_momentum: bool = False,
) -> RunLog:
    """Run the stages of a plan sequentially, carrying the iterate across
    boundaries.

    Each stage swaps in its own (B, S, beta, alpha); the momentum buffer is
    carried over unless reset_momentum is set. The random stream continues
    across boundaries, so equal consecutive stages concatenate exactly.
    """
    if variant not in ("scg", "uscg"):
        raise ValueError(f"unknown variant {variant!r}")
    segments = []
    for idx, stage in enumerate(plan.stages):
        iters = stage.iters
        if iters < 1:
            raise ValueError(
                f"stage {idx} allots {stage.token_allotment} tokens but needs "
                f"at least B*S = {stage.B * stage.S}"
            )
        noise = replace(spec.noise, B=stage.B, S=stage.S)
        segments.append(
            _Segment(iters, ConstantBeta(stage.beta), stage.alpha, noise, idx)
        )
    return _run_segments(spec, segments, base_config, variant, x0, reset_momentum)
