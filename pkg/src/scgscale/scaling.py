"""Closed-form calculators for batch/sequence/token budget scaling.

Everything here is pure arithmetic on problem constants: the parameter
prescription that guarantees a target error, the achievable-error law under a
fixed token budget with its three regimes, the critical batch-sequence scale
where the middle and iteration-starved regimes meet, hyperparameter transfer
across model sizes and token budgets, multi-stage restart planning, and the
square-root and nonconvex baseline rules.

Two constant modes are supported. "exact" evaluates the full prescriptions
with their numeric prefactors and exp(c) factors; "asymptotic" sets every
numeric prefactor and exp factor to 1, which is the right lens for regime
studies where only the powers of T and BS matter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

__all__ = [
    "ProblemConstants",
    "BudgetPoint",
    "TunedConfig",
    "Prescription",
    "ErrorLaw",
    "prescribe_params",
    "error_law",
    "critical_bs",
    "transfer_model_size",
    "transfer_token_budget",
    "plan_stages",
    "sqrt_rule",
    "nonconvex_rule",
    "round_scale",
]


@dataclass(frozen=True)
class ProblemConstants:
    """Constants entering the convergence analysis.

    L: smoothness in the composite norm. mu: error-bound slope linking the
    dual gradient norm to suboptimality. rho: dual-vs-euclidean norm gain.
    sigma_star: noise scale, with per-sample variance sigma_star^2 / (B S).
    delta0: initial suboptimality. c: the free constant in beta = c / K.
    """

    L: float
    mu: float
    rho: float
    sigma_star: float
    delta0: float = 1.0
    c: float = 1.0

    def __post_init__(self):
        for name in ("L", "mu", "rho", "delta0", "c"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.sigma_star < 0:
            raise ValueError(f"sigma_star must be nonnegative, got {self.sigma_star}")


@dataclass(frozen=True)
class BudgetPoint:
    """A (token budget, batch size, sequence length) operating point."""

    T: float
    B: float
    S: float

    def __post_init__(self):
        if self.B * self.S < 1:
            raise ValueError("B * S must be >= 1")
        if self.T < self.B * self.S:
            raise ValueError("token budget must cover at least one step")

    @property
    def K(self) -> int:
        return int(self.T // (self.B * self.S))


@dataclass(frozen=True)
class TunedConfig:
    """The tuned small-scale operating point used as a transfer base."""

    B0: float
    S0: float
    beta0: float
    alpha0: float
    T0: float

    def __post_init__(self):
        for name in ("B0", "S0", "alpha0", "T0"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.beta0 < 1.0:
            raise ValueError(f"beta0 must lie in (0, 1), got {self.beta0}")


@dataclass(frozen=True)
class Prescription:
    beta: float
    eta: float
    alpha: float
    iters: int


def _log_term(consts: ProblemConstants, eps: float) -> float:
    if not 0.0 < eps < 2.0 * consts.delta0:
        raise ValueError(
            f"target error must lie in (0, 2*delta0) = (0, {2.0 * consts.delta0}), got {eps}"
        )
    return math.log(2.0 * consts.delta0 / eps)


def prescribe_params(
    consts: ProblemConstants, eps: float, bs: float = 1.0, mode: str = "exact"
) -> Prescription:
    """Parameter prescription guaranteeing expected error at most eps.

    Uses the effective noise sigma = sigma_star / sqrt(bs). The returned
    iteration count is rounded up and beta = c / K is recomputed from it so
    the tuple is self-consistent.
    """
    if bs < 1:
        raise ValueError("bs must be >= 1")
    c, mu, L, rho = consts.c, consts.mu, consts.L, consts.rho
    sigma = consts.sigma_star / math.sqrt(bs)
    log_term = _log_term(consts, eps)
    if mode == "exact":
        e15 = math.exp(1.5 * c)
        eta = (2.0 * e15 / (mu * c)) * log_term
        if sigma == 0.0:
            alpha = 1.0
        else:
            alpha = min(1.0, (eps * mu) ** 2 / ((32.0 * rho * sigma) ** 2 * e15**2))
        inner = max(
            0.5,
            128.0 * L * e15**2 / (eps * mu**2),
            32.0 * rho * sigma * e15 / (eps * mu),
            128.0 * L * e15**4 * (32.0 * rho * sigma) ** 2 / (mu * (eps * mu) ** 3),
            (32.0 * rho * sigma * e15) ** 3 / (eps * mu) ** 3,
        )
        k_real = max(2.0 * c, inner * log_term)
    elif mode == "asymptotic":
        eta = log_term / mu
        if sigma == 0.0:
            alpha = 1.0
        else:
            alpha = min(1.0, (eps * mu) ** 2 / (rho * sigma) ** 2)
        inner = max(
            L / (eps * mu**2),
            rho * sigma / (eps * mu),
            L * (rho * sigma) ** 2 / (mu * (eps * mu) ** 3),
            (rho * sigma) ** 3 / (eps * mu) ** 3,
        )
        k_real = max(2.0 * c, inner)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    iters = max(1, math.ceil(k_real))
    return Prescription(beta=c / iters, eta=eta, alpha=alpha, iters=iters)


@dataclass(frozen=True)
class ErrorLaw:
    """Achievable error at a (T, B, S) point: the max of three terms.

    terms[0] grows linearly in BS (iteration starved), terms[1] is
    BS-independent (the T^(-1/3) middle regime), terms[2] decays with BS
    (noise dominated). regime labels which zone the point sits in: 1 for
    noise dominated, 2 for the flat middle, 3 for iteration starved.
    """

    eps: float
    terms: tuple[float, float, float]
    dominant_term: int
    regime: int


def error_law(T, B, S, consts: ProblemConstants, mode: str = "asymptotic") -> ErrorLaw:
    bs = B * S
    if bs < 1:
        raise ValueError("B * S must be >= 1")
    if T < bs:
        raise ValueError(f"token budget T={T} is below one step of BS={bs}")
    L, mu, rho, sigma_star, c = consts.L, consts.mu, consts.rho, consts.sigma_star, consts.c
    if mode == "exact":
        e15 = math.exp(1.5 * c)
        t1 = 128.0 * L * bs * e15**2 / (mu**2 * T)
        t2 = (128.0 * L * e15**4 * (32.0 * rho * sigma_star) ** 2 / (mu**4 * T)) ** (1.0 / 3.0)
        t3 = 32.0 * e15 * rho * sigma_star / (mu * (T**2 * bs) ** (1.0 / 6.0))
    elif mode == "asymptotic":
        t1 = L * bs / (mu**2 * T)
        t2 = (L * rho**2 * sigma_star**2 / (mu**4 * T)) ** (1.0 / 3.0)
        t3 = rho * sigma_star / (mu * (T**2 * bs) ** (1.0 / 6.0))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    # Tie-break toward the larger-batch regime so the regime label is
    # nondecreasing when sweeping BS upward.
    if t1 >= t2 and t1 >= t3:
        dominant, regime = 1, 3
    elif t2 >= t3:
        dominant, regime = 2, 2
    else:
        dominant, regime = 3, 1
    return ErrorLaw(eps=max(t1, t2, t3), terms=(t1, t2, t3), dominant_term=dominant, regime=regime)


def critical_bs(T: float, consts: ProblemConstants) -> float:
    """Batch-sequence scale where the flat and iteration-starved terms meet.

    BS* = (T mu rho sigma_star / L)^(2/3); the caller rounds as needed.
    """
    if T <= 0:
        raise ValueError("T must be positive")
    if consts.sigma_star <= 0:
        raise ValueError("critical scale needs a positive noise level")
    return (T * consts.mu * consts.rho * consts.sigma_star / consts.L) ** (2.0 / 3.0)


@dataclass(frozen=True)
class TransferResult:
    bs1: float
    beta1: float
    alpha1: float


def _ratio_factor(consts0: ProblemConstants, consts1: ProblemConstants) -> float:
    return (consts1.mu / consts0.mu) * (consts1.rho / consts0.rho) / (consts1.L / consts0.L)


def transfer_model_size(
    base: TunedConfig,
    consts0: ProblemConstants,
    consts1: ProblemConstants,
    T1: float,
    T0: Optional[float] = None,
) -> TransferResult:
    """Move a tuned operating point to a new model size and token budget.

    BS1 = B0 S0 ((T1/T0)(mu1/mu0)(rho1/rho0)/(L1/L0))^(2/3) and
    beta1 = beta0 (sqrt(T0/T1)(mu1/mu0)(rho1/rho0)/(L1/L0))^(2/3);
    the momentum parameter transfers unchanged.
    """
    T0 = base.T0 if T0 is None else T0
    if T0 <= 0 or T1 <= 0:
        raise ValueError("token budgets must be positive")
    ratios = _ratio_factor(consts0, consts1)
    bs1 = base.B0 * base.S0 * ((T1 / T0) * ratios) ** (2.0 / 3.0)
    beta1 = base.beta0 * (math.sqrt(T0 / T1) * ratios) ** (2.0 / 3.0)
    return TransferResult(bs1=bs1, beta1=beta1, alpha1=base.alpha0)


def transfer_token_budget(
    base: TunedConfig,
    rho_model,
    T1: float,
    damping: float = 0.5,
    tol: float = 1e-6,
    max_iter: int = 1000,
    batch_covariate: str = "batch_size",
    fixed_covariates: Optional[dict] = None,
) -> tuple[float, float]:
    """Rescale batch size for a larger token budget at fixed model size.

    The model stays the same so only the norm-equivalence constant moves, and
    it moves with the batch size itself: B1 = B0 ((T1/T0) rho(B1)/rho(B0))^(2/3)
    is solved as a damped fixed point (sequence length held fixed). rho_model
    is either a callable B -> rho or a power-law model evaluated at
    {batch_covariate: B, **fixed_covariates}. Returns (B1, beta1) with
    beta1 = beta0 (sqrt(T0/T1) rho(B1)/rho(B0))^(2/3).
    """
    if not 0.0 < damping <= 1.0:
        raise ValueError("damping must lie in (0, 1]")
    if callable(rho_model):
        rho_of_b = rho_model
    else:
        extra = dict(fixed_covariates or {})

        def rho_of_b(b: float) -> float:
            return rho_model.value({batch_covariate: b, **extra})

    rho0 = rho_of_b(base.B0)
    if rho0 <= 0:
        raise ValueError("rho at the base batch size must be positive")
    t_ratio = T1 / base.T0

    def step(b: float) -> float:
        return base.B0 * (t_ratio * rho_of_b(b) / rho0) ** (2.0 / 3.0)

    b = base.B0 * t_ratio ** (2.0 / 3.0)
    diverged = RuntimeError(
        f"token-budget fixed point did not converge within {max_iter} iterations"
    )
    for _ in range(max_iter):
        try:
            b_next = (1.0 - damping) * b + damping * step(b)
        except OverflowError:
            raise diverged
        if not math.isfinite(b_next) or b_next > 1e15 * max(base.B0, 1.0):
            raise diverged
        if abs(b_next - b) <= tol * max(abs(b_next), 1e-30):
            b = b_next
            break
        b = b_next
    else:
        raise diverged
    beta1 = base.beta0 * (math.sqrt(base.T0 / T1) * rho_of_b(b) / rho0) ** (2.0 / 3.0)
    return b, beta1


def sqrt_rule(base: TunedConfig, T1: float) -> tuple[float, float]:
    """Square-root baseline: BS1 = B0 S0 sqrt(T1/T0), beta1 = beta0 sqrt(T0/T1)."""
    if T1 <= 0:
        raise ValueError("T1 must be positive")
    factor = math.sqrt(T1 / base.T0)
    return base.B0 * base.S0 * factor, base.beta0 / factor


def nonconvex_rule(
    base: TunedConfig,
    consts0: ProblemConstants,
    consts1: ProblemConstants,
    D0: float,
    D1: float,
) -> float:
    """Batch scaling when only smoothness is assumed (gradient-norm metric).

    BS1 = B0 S0 sqrt((D1/D0)(rho1/rho0)^2 (L0/L1)).
    """
    if D0 <= 0 or D1 <= 0:
        raise ValueError("model sizes must be positive")
    return base.B0 * base.S0 * math.sqrt(
        (D1 / D0) * (consts1.rho / consts0.rho) ** 2 * (consts0.L / consts1.L)
    )


def plan_stages(
    base: TunedConfig,
    consts0: ProblemConstants,
    consts1: ProblemConstants,
    budgets: Sequence[float],
    split_s: Optional[float] = None,
):
    """Build a restart schedule over cumulative token budgets.

    budgets are the cumulative totals available by the end of each stage
    (strictly increasing; the first equals the initial allotment). The first
    stage keeps the tuned scale apart from the constant-ratio correction;
    each later stage re-derives (BS, beta) from the cumulative budget
    available by its end. The batch-sequence product is split with the
    sequence length held at split_s (default S0).
    """
    from .optimizer import Stage, StagePlan  # local import to avoid a cycle

    budgets = [float(t) for t in budgets]
    if not budgets or any(t <= 0 for t in budgets):
        raise ValueError("budgets must be positive")
    if any(b1 <= b0 for b0, b1 in zip(budgets, budgets[1:])):
        raise ValueError("budgets must be strictly increasing")
    s_fixed = base.S0 if split_s is None else split_s
    ratios = _ratio_factor(consts0, consts1)
    stages = []
    prev_total = 0.0
    for idx, total in enumerate(budgets):
        if idx == 0:
            bs = base.B0 * base.S0 * ratios ** (2.0 / 3.0)
            beta = base.beta0 * ratios ** (2.0 / 3.0)
            note = "initial stage: tuned scale corrected by constant ratios"
        else:
            res = transfer_model_size(base, consts0, consts1, T1=total)
            bs, beta = res.bs1, res.beta1
            note = f"restart with cumulative budget {total:g}"
        stages.append(
            Stage(
                token_allotment=total - prev_total,
                B=bs / s_fixed,
                S=s_fixed,
                beta=beta,
                alpha=base.alpha0,
                note=note,
            )
        )
        prev_total = total
    return StagePlan(tuple(stages))


def round_scale(value: float, policy: str = "none") -> float:
    """Round a batch-sequence scale or factor per an explicit policy."""
    if value <= 0:
        raise ValueError("value must be positive")
    if policy == "none":
        return value
    if policy == "pow2":
        return float(2.0 ** round(math.log2(value)))
    if policy == "mult32":
        return float(max(32, 32 * round(value / 32.0)))
    raise ValueError(f"unknown rounding policy {policy!r}")
