"""Constant estimation from trajectories and shifted power-law fitting.

The estimators mirror how the constants are measured in practice: smoothness
from the ratio of consecutive gradient-sample differences to iterate
displacements, the error-bound slope from a robust (Huber) linear regression
of dual gradient norm against loss, the norm-equivalence gain from
dual-vs-euclidean ratios of gradient-noise vectors, and the noise scale from
empirical minibatch-gradient variances at a fixed sample pool.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
from scipy.optimize import least_squares

from .geometry import block_dual_norm

__all__ = [
    "PowerLawTerm",
    "PowerLawModel",
    "FitTerm",
    "VarianceCurve",
    "HuberFit",
    "huber_line_fit",
    "estimate_mu",
    "smoothness_from_steps",
    "estimate_L",
    "estimate_rho",
    "estimate_variance",
    "fit_power_law",
    "bundled_constant_laws",
]


@dataclass(frozen=True)
class PowerLawTerm:
    name: str
    shift: float
    exponent: float


@dataclass(frozen=True)
class PowerLawModel:
    """value = C * prod over terms of (covariate + shift) ^ exponent."""

    coefficient: float
    terms: tuple[PowerLawTerm, ...]

    def __post_init__(self):
        if self.coefficient <= 0:
            raise ValueError("coefficient must be positive")
        object.__setattr__(self, "terms", tuple(self.terms))
        names = [t.name for t in self.terms]
        if len(set(names)) != len(names):
            raise ValueError("covariate names must be unique")

    def value(self, covariates: Mapping[str, float]) -> float:
        out = self.coefficient
        for t in self.terms:
            if t.name not in covariates:
                raise KeyError(f"missing covariate {t.name!r}")
            base = covariates[t.name] + t.shift
            if base <= 0:
                raise ValueError(
                    f"covariate {t.name!r} + shift = {base} is not positive"
                )
            out *= base**t.exponent
        return out

    def to_dict(self) -> dict:
        return {
            "C": self.coefficient,
            "terms": [
                {"name": t.name, "shift": t.shift, "exponent": t.exponent}
                for t in self.terms
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PowerLawModel":
        return cls(
            coefficient=float(d["C"]),
            terms=tuple(
                PowerLawTerm(t["name"], float(t["shift"]), float(t["exponent"]))
                for t in d["terms"]
            ),
        )


@dataclass(frozen=True)
class FitTerm:
    """One term of a power-law fit; None leaves the parameter free."""

    name: str
    shift: Optional[float] = None
    exponent: Optional[float] = None


@dataclass(frozen=True)
class VarianceCurve:
    """Measured gradient variance against batch scale, plus the fitted law."""

    points: tuple[tuple[float, float], ...]
    fitted: PowerLawModel

    def __post_init__(self):
        scales = [p[0] for p in self.points]
        if any(b >= a for a, b in zip(scales[1:], scales)):
            raise ValueError("scales must be strictly increasing")
        if any(p[1] <= 0 for p in self.points):
            raise ValueError("variances must be positive")


@dataclass(frozen=True)
class HuberFit:
    slope: float
    intercept: float
    n_points: int
    iterations: int


def huber_line_fit(
    x, y, delta: float = 1.345, max_iter: int = 200, tol: float = 1e-12
) -> HuberFit:
    """Robust line fit via iteratively reweighted least squares.

    Residuals are standardized by the median absolute deviation; points beyond
    delta standardized units get downweighted by delta * scale / |r|. With
    delta -> inf this reduces to ordinary least squares.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-D arrays of equal length")
    if len(x) < 2:
        raise ValueError("need at least 2 points")
    if np.ptp(x) == 0:
        raise ValueError("x values have zero spread")

    def weighted_fit(w):
        sw = np.sum(w)
        mx = np.sum(w * x) / sw
        my = np.sum(w * y) / sw
        sxx = np.sum(w * (x - mx) ** 2)
        if sxx <= 0:
            raise ValueError("degenerate weighted fit")
        slope = np.sum(w * (x - mx) * (y - my)) / sxx
        return slope, my - slope * mx

    slope, intercept = weighted_fit(np.ones_like(x))
    iterations = 0
    y_scale = max(float(np.max(np.abs(y))), 1e-300)
    for iterations in range(1, max_iter + 1):
        r = y - slope * x - intercept
        scale = 1.4826 * float(np.median(np.abs(r)))
        if scale < 1e-14 * y_scale or not math.isfinite(delta):
            break
        w = np.minimum(1.0, delta * scale / np.maximum(np.abs(r), 1e-300))
        new_slope, new_intercept = weighted_fit(w)
        if abs(new_slope - slope) <= tol * max(1.0, abs(slope)) and abs(
            new_intercept - intercept
        ) <= tol * max(1.0, abs(intercept)):
            slope, intercept = new_slope, new_intercept
            break
        slope, intercept = new_slope, new_intercept
    return HuberFit(float(slope), float(intercept), len(x), iterations)


def estimate_mu(
    losses,
    dual_grad_norms,
    loss_cap: float = 5.0,
    delta: float = 1.345,
) -> HuberFit:
    """Slope of dual gradient norm against loss over the low-loss samples.

    Only points with loss below loss_cap enter the regression; the intercept
    is fitted and reported, the slope is the estimate.
    """
    losses = np.asarray(losses, dtype=float)
    dual_grad_norms = np.asarray(dual_grad_norms, dtype=float)
    keep = losses < loss_cap
    if int(np.sum(keep)) < 2:
        raise ValueError(
            f"need at least 2 samples with loss below {loss_cap}, got {int(np.sum(keep))}"
        )
    x = losses[keep]
    if np.ptp(x) == 0:
        raise ValueError("loss values have zero spread below the cap")
    return huber_line_fit(x, dual_grad_norms[keep], delta=delta)


def smoothness_from_steps(
    grad_diff_duals,
    step_disps,
    window: int = 100,
    min_step: float = 1e-12,
) -> float:
    """Mean ratio of gradient-sample change to iterate displacement.

    Ratios are taken over the trailing window; steps with displacement below
    min_step are skipped.
    """
    diffs = np.asarray(grad_diff_duals, dtype=float)
    disps = np.asarray(step_disps, dtype=float)
    if diffs.shape != disps.shape or diffs.ndim != 1:
        raise ValueError("inputs must be 1-D arrays of equal length")
    if len(diffs) == 0:
        raise ValueError("need at least one consecutive step")
    tail_d = diffs[-window:]
    tail_s = disps[-window:]
    valid = tail_s >= min_step
    if not np.any(valid):
        raise ValueError("all steps in the window are degenerate")
    return float(np.mean(tail_d[valid] / tail_s[valid]))


def estimate_L(run_log, geometry, window: int = 100, min_step: float = 1e-12) -> float:
    """Smoothness estimate from a trajectory log that stored gradient samples."""
    if run_log.gradients is None or len(run_log.gradients) < 2:
        raise ValueError("run log must store gradients for at least 2 steps")
    if len(run_log.gradients) != len(run_log.step_disp):
        raise ValueError("smoothness estimation needs a log recorded at every step")
    kinds = [g.kind for g in geometry]
    grads = run_log.gradients
    diffs = []
    for prev, cur in zip(grads, grads[1:]):
        diffs.append(
            sum(
                block_dual_norm(cb - pb, kind)
                for cb, pb, kind in zip(cur.arrays, prev.arrays, kinds)
            )
        )
    # displacement ||x_k - x_{k-1}|| is the step recorded at row k-1
    disps = np.asarray(run_log.step_disp, dtype=float)[: len(diffs)]
    return smoothness_from_steps(diffs, disps, window=window, min_step=min_step)


def estimate_rho(pairs, geometry, window: int = 100) -> float:
    """Mean dual-vs-euclidean norm ratio of minibatch-vs-reference residuals.

    pairs is a sequence of (g_minibatch, g_reference) layered points; exactly
    equal pairs are skipped, and at least one usable pair must remain in the
    trailing window.
    """
    kinds = [g.kind for g in geometry]
    ratios = []
    for g_small, g_ref in pairs:
        if tuple(g_small.names) != tuple(g_ref.names):
            raise ValueError("pair block names do not match")
        diff = [a - b for a, b in zip(g_small.arrays, g_ref.arrays)]
        eucl = math.sqrt(sum(float(np.sum(d * d)) for d in diff))
        if eucl == 0.0:
            continue
        dual = sum(block_dual_norm(d, kind) for d, kind in zip(diff, kinds))
        ratios.append(dual / eucl)
    if not ratios:
        raise ValueError("all pairs are degenerate (minibatch equals reference)")
    tail = ratios[-window:]
    return float(np.mean(tail))


def estimate_variance(
    oracle: Callable,
    x,
    scales: Sequence[float],
    pool_size: int,
    seed: int = 0,
    fit_scale_name: str = "scale",
    per_coordinate: bool = False,
) -> VarianceCurve:
    """Empirical gradient variance across minibatch scales at a fixed point.

    For each scale B the oracle is called pool_size / B times (the pool must
    divide evenly, with at least two draws) with independent seed-derived
    generators, so results do not depend on evaluation order. The variance is
    the unbiased mean squared euclidean deviation from the sample mean,
    optionally normalized per coordinate. A one-term shifted power law is
    fitted to the resulting curve.
    """
    scales = [float(b) for b in scales]
    if any(b2 <= b1 for b1, b2 in zip(scales, scales[1:])):
        raise ValueError("scales must be strictly increasing")
    points = []
    for b_idx, b in enumerate(scales):
        if pool_size % int(b) != 0:
            raise ValueError(f"pool_size {pool_size} is not divisible by scale {b:g}")
        m = pool_size // int(b)
        if m < 2:
            raise ValueError(f"scale {b:g} leaves fewer than 2 draws in the pool")
        draws = np.stack(
            [
                np.asarray(oracle(x, b, np.random.default_rng([seed, b_idx, i])))
                for i in range(m)
            ]
        )
        mean = draws.mean(axis=0)
        dev = draws - mean
        var = float(np.sum(dev * dev) / (m - 1))
        if per_coordinate:
            var /= draws.shape[1]
        points.append((b, var))
    if any(v <= 0 for _, v in points):
        raise ValueError("degenerate variance data: a scale produced zero variance")
    fitted = fit_power_law(
        {fit_scale_name: np.array([p[0] for p in points])},
        np.array([p[1] for p in points]),
        [FitTerm(fit_scale_name)],
    )
    return VarianceCurve(points=tuple(points), fitted=fitted)


def fit_power_law(
    covariates: Mapping[str, Sequence[float]],
    values: Sequence[float],
    shape: Sequence[FitTerm],
    n_starts: int = 16,
    seed: int = 0,
) -> PowerLawModel:
    """Fit a shifted power law by robust least squares on log residuals.

    Minimizes sum of phi(r^2) with phi(z) = 2 (sqrt(1 + z) - 1) over the log
    coefficient and the free shifts and exponents, restarting from several
    initial points and keeping the best. Shifts are constrained so every
    covariate + shift stays positive on the data.
    """
    values = np.asarray(values, dtype=float)
    if np.any(values <= 0):
        raise ValueError("power-law fitting requires positive values")
    shape = list(shape)
    if not shape:
        raise ValueError("shape needs at least one term")
    cols = {}
    for term in shape:
        if term.name not in covariates:
            raise KeyError(f"missing covariate column {term.name!r}")
        col = np.asarray(covariates[term.name], dtype=float)
        if col.shape != values.shape:
            raise ValueError(f"covariate {term.name!r} length mismatch")
        cols[term.name] = col

    free_shift = [t.shift is None for t in shape]
    free_exp = [t.exponent is None for t in shape]
    n_free = 1 + sum(free_shift) + sum(free_exp)
    if len(values) < n_free:
        raise ValueError(
            f"need at least {n_free} observations for {n_free} free parameters"
        )
    for t in shape:
        if t.shift is not None and np.any(cols[t.name] + t.shift <= 0):
            raise ValueError(f"fixed shift for {t.name!r} makes a base non-positive")

    log_y = np.log(values)

    def unpack(params):
        idx = 1
        shifts, exps = [], []
        for t, fs in zip(shape, free_shift):
            if fs:
                shifts.append(params[idx])
                idx += 1
            else:
                shifts.append(t.shift)
        for t, fe in zip(shape, free_exp):
            if fe:
                exps.append(params[idx])
                idx += 1
            else:
                exps.append(t.exponent)
        return params[0], shifts, exps

    def residuals(params):
        log_c, shifts, exps = unpack(params)
        pred = np.full_like(log_y, log_c)
        for t, s, e in zip(shape, shifts, exps):
            base = cols[t.name] + s
            if np.any(base <= 0):
                return np.full_like(log_y, 1e6)
            pred = pred + e * np.log(base)
        return pred - log_y

    lo = [-np.inf]
    hi = [np.inf]
    shift_lb = {}
    for t, fs in zip(shape, free_shift):
        if fs:
            col_min = float(np.min(cols[t.name]))
            shift_lb[t.name] = -col_min + 1e-9 * max(1.0, abs(col_min))
            lo.append(shift_lb[t.name])
            hi.append(np.inf)
    for fe in free_exp:
        if fe:
            lo.append(-np.inf)
            hi.append(np.inf)

    rng = np.random.default_rng(seed)
    best = None
    mean_log_y = float(np.mean(log_y))
    for start in range(n_starts):
        p0 = [mean_log_y]
        for t, fs in zip(shape, free_shift):
            if fs:
                span = float(np.ptp(cols[t.name])) or 1.0
                if start == 0:
                    s0 = shift_lb[t.name] + 1e-3 * span
                else:
                    s0 = shift_lb[t.name] + rng.uniform(0.0, 1.0) * span
                p0.append(s0)
        for fe in free_exp:
            if fe:
                p0.append(0.0 if start == 0 else rng.uniform(-1.0, 1.0))
        try:
            res = least_squares(
                residuals, p0, loss="soft_l1", bounds=(lo, hi), max_nfev=20000
            )
        except Exception:
            continue
        if best is None or res.cost < best.cost:
            best = res
    if best is None:
        raise RuntimeError("power-law fit failed from every start")
    log_c, shifts, exps = unpack(best.x)
    return PowerLawModel(
        coefficient=float(np.exp(log_c)),
        terms=tuple(
            PowerLawTerm(t.name, float(s), float(e))
            for t, s, e in zip(shape, shifts, exps)
        ),
    )


def bundled_constant_laws() -> dict[str, PowerLawModel]:
    """Reference power-law fits of the optimization constants against
    transformer shape covariates (layers, embedding width, batch size),
    measured on instrumented small language-model training runs."""
    return {
        "mu": PowerLawModel(5.2, (PowerLawTerm("n_layer", 1.7, -0.2),)),
        "L": PowerLawModel(
            0.4,
            (PowerLawTerm("n_layer", 0.7, 0.2), PowerLawTerm("n_embd", 126.0, 0.35)),
        ),
        "rho": PowerLawModel(
            4.1,
            (
                PowerLawTerm("n_layer", -2.7, 0.25),
                PowerLawTerm("n_embd", -250.8, 0.3),
                PowerLawTerm("batch_size", -9.4, 0.1),
            ),
        ),
    }
