"""Synthetic stochastic objectives with controllable constants.

Two problem kinds: a layered quadratic whose smoothness, error-bound, and
norm-equivalence constants are analytic, and a logistic regression on
separable synthetic data whose constants must be estimated. Stochasticity is
additive isotropic Gaussian noise on the flattened gradient whose total
squared-norm variance is sigma_star^2 / (B * S), so batch size and sequence
length enter only through the noise scale and the token accounting
T = K * B * S is exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import (
    BlockGeometry,
    GeometryKind,
    LayeredPoint,
    block_primal_norm,
)
from .scaling import ProblemConstants

__all__ = [
    "NoiseModel",
    "LayeredQuadratic",
    "LogisticRegression",
    "ProblemSpec",
    "AnalyticConstants",
    "loss",
    "grad",
    "grad_sample",
    "known_constants",
    "per_coordinate_sigma",
    "compiled",
    "flat_grad_oracle",
    "spec_to_dict",
    "spec_from_dict",
]


@dataclass(frozen=True)
class NoiseModel:
    """Additive gradient-noise parameters.

    Per-sample noise has mean zero and total squared-Euclidean variance
    sigma_star^2 / (B * S). The optional shifts reproduce the empirically
    observed shifted power-law decay, variance = sigma_star^2 /
    ((B + b_shift) * (S + s_shift)); both default to the pure form.
    """

    sigma_star: float
    B: float = 1.0
    S: float = 1.0
    b_shift: float = 0.0
    s_shift: float = 0.0

    def __post_init__(self):
        if self.sigma_star < 0:
            raise ValueError("sigma_star must be nonnegative")
        if self.B < 1 or self.S < 1:
            raise ValueError("B and S must be >= 1")

    def variance(self) -> float:
        return self.sigma_star**2 / ((self.B + self.b_shift) * (self.S + self.s_shift))


@dataclass(frozen=True)
class LayeredQuadratic:
    """f(x) = sum_l (lambda_l / 2) ||x_l - theta_l||_2^2 with f* = 0.

    Every target must be primal-feasible for its block radius so the optimum
    is reachable under the constrained update.
    """

    kind = "layered_quadratic"

    geometry: tuple[BlockGeometry, ...]
    block_names: tuple[str, ...]
    curvatures: tuple[float, ...]
    targets: tuple[np.ndarray, ...]
    noise: NoiseModel

    def __post_init__(self):
        object.__setattr__(self, "geometry", tuple(self.geometry))
        object.__setattr__(self, "block_names", tuple(self.block_names))
        object.__setattr__(self, "curvatures", tuple(float(c) for c in self.curvatures))
        object.__setattr__(
            self, "targets", tuple(np.asarray(t, dtype=float) for t in self.targets)
        )
        n = len(self.geometry)
        if not (len(self.block_names) == len(self.curvatures) == len(self.targets) == n):
            raise ValueError("geometry, names, curvatures, and targets must be parallel")
        if len(set(self.block_names)) != n:
            raise ValueError("block names must be unique")
        if any(c <= 0 for c in self.curvatures):
            raise ValueError("curvatures must be positive")
        for name, t, g in zip(self.block_names, self.targets, self.geometry):
            if t.shape != g.shape:
                raise ValueError(f"target for block {name!r} has the wrong shape")
            if block_primal_norm(t, g.kind) > g.radius_eta:
                raise ValueError(
                    f"target for block {name!r} lies outside its radius ball; "
                    "the optimum would be unreachable"
                )

    @property
    def total_params(self) -> int:
        return sum(g.size for g in self.geometry)


@dataclass(frozen=True)
class LogisticRegression:
    """Mean logistic loss on synthetic linearly separable data.

    Features are rows of a fixed Gaussian design matrix (scaled to roughly
    unit row norm) and labels come from a planted separator, both generated
    deterministically from data_seed. margin_boost shifts every sample along
    the separator so all margins are at least that large; without it, near
    zero margin samples put a high floor under the constrained optimum.
    Constants are not analytic; use the estimation pipeline.
    """

    kind = "logistic_regression"

    geometry: tuple[BlockGeometry, ...]
    block_names: tuple[str, ...]
    n_samples: int
    dim: int
    data_seed: int
    noise: NoiseModel
    margin_boost: float = 0.0
    features: np.ndarray = field(init=False, repr=False, compare=False)
    labels: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "geometry", tuple(self.geometry))
        object.__setattr__(self, "block_names", tuple(self.block_names))
        if len(self.geometry) != 1 or len(self.block_names) != 1:
            raise ValueError("logistic regression uses a single weight block")
        g = self.geometry[0]
        if g.kind is not GeometryKind.EUCLIDEAN or g.shape != (self.dim,):
            raise ValueError("weight block must be euclidean with shape (dim,)")
        if self.n_samples < 1 or self.dim < 1:
            raise ValueError("n_samples and dim must be positive")
        if self.margin_boost < 0:
            raise ValueError("margin_boost must be nonnegative")
        rng = np.random.default_rng(self.data_seed)
        A = rng.standard_normal((self.n_samples, self.dim)) / math.sqrt(self.dim)
        w_true = rng.standard_normal(self.dim)
        w_true /= np.linalg.norm(w_true)
        margins = A @ w_true
        # Nudge near-zero margins so labels are unambiguous and the data is
        # strictly separable.
        margins = np.where(np.abs(margins) < 1e-3, np.sign(margins + 1e-12) * 1e-3, margins)
        y = np.sign(margins)
        if self.margin_boost > 0:
            A = A + np.outer(y * self.margin_boost, w_true)
        object.__setattr__(self, "features", A)
        object.__setattr__(self, "labels", y)

    @property
    def total_params(self) -> int:
        return self.dim


ProblemSpec = LayeredQuadratic | LogisticRegression


def per_coordinate_sigma(spec: ProblemSpec, noise: Optional[NoiseModel] = None) -> float:
    """Per-coordinate noise std so the total squared-norm variance matches."""
    nm = spec.noise if noise is None else noise
    var = nm.variance()
    return math.sqrt(var / spec.total_params) if var > 0 else 0.0


def _quadratic_loss_arrays(spec: LayeredQuadratic, arrays) -> float:
    total = 0.0
    for xb, lam, theta in zip(arrays, spec.curvatures, spec.targets):
        diff = xb - theta
        total += 0.5 * lam * float(np.sum(diff * diff))
    return total


def _quadratic_grad_arrays(spec: LayeredQuadratic, arrays):
    return [lam * (xb - theta) for xb, lam, theta in zip(arrays, spec.curvatures, spec.targets)]


def _logistic_margins(spec: LogisticRegression, w: np.ndarray) -> np.ndarray:
    return spec.labels * (spec.features @ w)


def _logistic_loss_arrays(spec: LogisticRegression, arrays) -> float:
    z = _logistic_margins(spec, arrays[0])
    return float(np.mean(np.logaddexp(0.0, -z)))


def _logistic_grad_arrays(spec: LogisticRegression, arrays):
    z = _logistic_margins(spec, arrays[0])
    s = 1.0 / (1.0 + np.exp(z))  # sigmoid(-z)
    coeff = -(spec.labels * s) / spec.n_samples
    return [spec.features.T @ coeff]


def compiled(spec: ProblemSpec):
    """Array-level (loss_fn, grad_fn) pair used by the iteration hot loop."""
    if isinstance(spec, LayeredQuadratic):
        return (
            lambda arrays: _quadratic_loss_arrays(spec, arrays),
            lambda arrays: _quadratic_grad_arrays(spec, arrays),
        )
    if isinstance(spec, LogisticRegression):
        return (
            lambda arrays: _logistic_loss_arrays(spec, arrays),
            lambda arrays: _logistic_grad_arrays(spec, arrays),
        )
    raise TypeError(f"unsupported problem kind {spec!r}")


def _check_point(spec: ProblemSpec, x: LayeredPoint) -> None:
    if tuple(x.names) != tuple(spec.block_names):
        raise ValueError("point block names do not match the problem")
    for a, g in zip(x.arrays, spec.geometry):
        if a.shape != g.shape:
            raise ValueError("point block shapes do not match the problem")


def loss(spec: ProblemSpec, x: LayeredPoint) -> float:
    """Exact objective value at x."""
    _check_point(spec, x)
    loss_fn, _ = compiled(spec)
    return loss_fn(x.arrays)


def grad(spec: ProblemSpec, x: LayeredPoint) -> LayeredPoint:
    """Exact gradient at x."""
    _check_point(spec, x)
    _, grad_fn = compiled(spec)
    return LayeredPoint.from_arrays(spec.block_names, grad_fn(x.arrays))


def grad_sample(
    spec: ProblemSpec,
    x: LayeredPoint,
    rng: np.random.Generator,
    noise: Optional[NoiseModel] = None,
) -> LayeredPoint:
    """Exact gradient plus zero-mean Gaussian noise with the modeled variance."""
    _check_point(spec, x)
    _, grad_fn = compiled(spec)
    g = grad_fn(x.arrays)
    sigma_pc = per_coordinate_sigma(spec, noise)
    if sigma_pc > 0.0:
        g = [gb + sigma_pc * rng.standard_normal(gb.shape) for gb in g]
    return LayeredPoint.from_arrays(spec.block_names, g)


def initial_point(spec: ProblemSpec) -> LayeredPoint:
    return LayeredPoint.zeros(spec.block_names, spec.geometry)


def flat_grad_oracle(spec: ProblemSpec):
    """Adapter for the variance estimator: oracle(x, B, rng) -> flat ndarray."""

    def oracle(x: LayeredPoint, B: float, rng: np.random.Generator) -> np.ndarray:
        nm = NoiseModel(
            spec.noise.sigma_star, B, spec.noise.S, spec.noise.b_shift, spec.noise.s_shift
        )
        return grad_sample(spec, x, rng, noise=nm).flatten()

    return oracle


@dataclass(frozen=True)
class AnalyticConstants:
    """Closed-form constants plus the sublevel region they are valid on."""

    constants: ProblemConstants
    f_max: float
    region: str


def _max_l2_distance(theta: np.ndarray, geom: BlockGeometry) -> float:
    """Max l2 distance from theta over the block's primal ball of radius eta."""
    eta = geom.radius_eta
    if geom.kind is GeometryKind.SIGN:
        return float(np.linalg.norm(np.abs(theta) + eta))
    if geom.kind is GeometryKind.SPECTRAL:
        return float(np.linalg.norm(theta)) + eta * math.sqrt(min(geom.shape))
    return float(np.linalg.norm(theta)) + eta


def known_constants(spec: ProblemSpec, x0: Optional[LayeredPoint] = None, c: float = 1.0) -> AnalyticConstants:
    """Analytic (L, mu, rho, sigma_star) for the layered quadratic.

    L sums the per-block curvature times the dual-vs-primal norm gain, which
    is tight for the composite norms. The error-bound slope is certified only
    on the sublevel set reachable from the radius ball: mu = sqrt(2 min
    lambda) / sqrt(f_max), where f_max is the largest objective value on the
    ball. rho is the exact dual-vs-euclidean gain of the composite norm.
    Logistic problems have no analytic constants and raise.
    """
    if isinstance(spec, LogisticRegression):
        raise ValueError(
            "constants for logistic regression are not analytic; "
            "estimate them from a trajectory instead"
        )
    if not isinstance(spec, LayeredQuadratic):
        raise TypeError(f"unsupported problem kind {spec!r}")
    L = sum(lam * g.lipschitz_gain() for lam, g in zip(spec.curvatures, spec.geometry))
    f_max = sum(
        0.5 * lam * _max_l2_distance(theta, g) ** 2
        for lam, theta, g in zip(spec.curvatures, spec.targets, spec.geometry)
    )
    mu = math.sqrt(2.0 * min(spec.curvatures)) / math.sqrt(f_max)
    rho = math.sqrt(sum(g.dual_gain() ** 2 for g in spec.geometry))
    x_start = initial_point(spec) if x0 is None else x0
    delta0 = loss(spec, x_start)
    if delta0 <= 0.0:
        raise ValueError(
            "the start point is already optimal (zero initial suboptimality); "
            "pass an x0 away from the targets"
        )
    consts = ProblemConstants(
        L=L,
        mu=mu,
        rho=rho,
        sigma_star=spec.noise.sigma_star,
        delta0=delta0,
        c=c,
    )
    return AnalyticConstants(
        constants=consts,
        f_max=f_max,
        region=f"sublevel set f <= {f_max:.6g} (objective values on the radius ball)",
    )


# -- JSON (de)serialization ---------------------------------------------------

def _geometry_to_dict(g: BlockGeometry) -> dict:
    return {"kind": g.kind.value, "shape": list(g.shape), "radius_eta": g.radius_eta}


def _noise_to_dict(nm: NoiseModel) -> dict:
    return {
        "sigma_star": nm.sigma_star,
        "B": nm.B,
        "S": nm.S,
        "b_shift": nm.b_shift,
        "s_shift": nm.s_shift,
    }


def spec_to_dict(spec: ProblemSpec) -> dict:
    if isinstance(spec, LayeredQuadratic):
        return {
            "kind": spec.kind,
            "blocks": [
                {
                    "name": name,
                    "geometry": _geometry_to_dict(g),
                    "curvature": lam,
                    "target": theta.tolist(),
                }
                for name, g, lam, theta in zip(
                    spec.block_names, spec.geometry, spec.curvatures, spec.targets
                )
            ],
            "noise": _noise_to_dict(spec.noise),
        }
    if isinstance(spec, LogisticRegression):
        return {
            "kind": spec.kind,
            "blocks": [
                {"name": spec.block_names[0], "geometry": _geometry_to_dict(spec.geometry[0])}
            ],
            "n_samples": spec.n_samples,
            "dim": spec.dim,
            "data_seed": spec.data_seed,
            "margin_boost": spec.margin_boost,
            "noise": _noise_to_dict(spec.noise),
        }
    raise TypeError(f"unsupported problem kind {spec!r}")


_NOISE_KEYS = {"sigma_star", "B", "S", "b_shift", "s_shift"}


def _noise_from_dict(d: dict) -> NoiseModel:
    unknown = set(d) - _NOISE_KEYS
    if unknown:
        raise ValueError(f"unknown noise keys: {sorted(unknown)}")
    return NoiseModel(**d)


def _geometry_from_dict(d: dict) -> BlockGeometry:
    unknown = set(d) - {"kind", "shape", "radius_eta"}
    if unknown:
        raise ValueError(f"unknown geometry keys: {sorted(unknown)}")
    return BlockGeometry(kind=d["kind"], shape=tuple(d["shape"]), radius_eta=d.get("radius_eta", 1.0))


def spec_from_dict(d: dict) -> ProblemSpec:
    kind = d.get("kind")
    if kind == "layered_quadratic":
        unknown = set(d) - {"kind", "blocks", "noise"}
        if unknown:
            raise ValueError(f"unknown problem keys: {sorted(unknown)}")
        names, geoms, lams, thetas = [], [], [], []
        for b in d["blocks"]:
            bad = set(b) - {"name", "geometry", "curvature", "target"}
            if bad:
                raise ValueError(f"unknown block keys: {sorted(bad)}")
            names.append(b["name"])
            geoms.append(_geometry_from_dict(b["geometry"]))
            lams.append(float(b["curvature"]))
            thetas.append(np.asarray(b["target"], dtype=float))
        return LayeredQuadratic(
            geometry=tuple(geoms),
            block_names=tuple(names),
            curvatures=tuple(lams),
            targets=tuple(thetas),
            noise=_noise_from_dict(d["noise"]),
        )
    if kind == "logistic_regression":
        unknown = set(d) - {"kind", "blocks", "n_samples", "dim", "data_seed", "margin_boost", "noise"}
        if unknown:
            raise ValueError(f"unknown problem keys: {sorted(unknown)}")
        b = d["blocks"][0]
        return LogisticRegression(
            geometry=(_geometry_from_dict(b["geometry"]),),
            block_names=(b["name"],),
            n_samples=int(d["n_samples"]),
            dim=int(d["dim"]),
            data_seed=int(d["data_seed"]),
            margin_boost=float(d.get("margin_boost", 0.0)),
            noise=_noise_from_dict(d["noise"]),
        )
    raise ValueError(f"unknown problem kind {kind!r}")
