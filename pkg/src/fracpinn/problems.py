"""Fabricated exact solutions and their forcing terms.

Every experiment verifies against a solution with a known closed form on the
unit ball.  One family (``dyda_combined``) has an analytic forcing assembled
from the known fractional Laplacians of ``(1 - |x|^2)^(a/2)``-type profiles;
the interaction families (two-body, three-body, and the time-dependent
two-body) have no closed-form forcing, so theirs is estimated by applying the
operator estimators to the exact solution.  The module also provides the
test-set sampler and the relative error metrics the reports use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import (
    ConfigMismatch,
    DimensionMismatch,
    OutsideDomain,
    ZeroReference,
)
from .operators import OperatorConfig, pde_residual
from .quadrature import RadialRule
from .sampling import RngStream, sample_ball

__all__ = [
    "PROBLEM_KINDS",
    "ProblemSpec",
    "ExactSolution",
    "eval_exact",
    "eval_exact_grad",
    "exact_field",
    "dyda_forcing",
    "mc_forcing",
    "make_test_set",
    "rel_l1",
    "rel_l2",
]

PROBLEM_KINDS = ("dyda_combined", "two_body", "three_body", "two_body_time")

# test points stay this far inside the unit ball; the dyda envelope's
# gradient is unbounded at the boundary
_INTERIOR_MARGIN = 1e-9


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    """A fabricated problem: exact solution, operator, and forcing source.

    The coefficient vectors are drawn once from a unit Gaussian seeded by
    ``seed``, so equal seeds reproduce identical problems.  ``dyda_combined``
    carries two vectors of length d+1 (a constant plus one weight per
    coordinate for each envelope power); the interaction solutions carry one
    vector with a weight per interacting coordinate group.
    """

    d: int
    kind: str
    operator: OperatorConfig
    seed: int = 0
    T: float = 1.0
    forcing: str = "mc_estimate"

    def __post_init__(self):
        if self.kind not in PROBLEM_KINDS:
            raise ValueError(
                f"unknown problem kind {self.kind!r}; expected one of {PROBLEM_KINDS}"
            )
        if self.d < 1:
            raise ValueError(f"dimension must be >= 1, got {self.d}")
        if self.kind in ("two_body", "two_body_time") and self.d < 2:
            raise ValueError(f"{self.kind} needs d >= 2, got d={self.d}")
        if self.kind == "three_body" and self.d < 3:
            raise ValueError(f"three_body needs d >= 3, got d={self.d}")
        if self.forcing not in ("analytic", "mc_estimate"):
            raise ValueError(f"unknown forcing source {self.forcing!r}")
        if self.forcing == "analytic" and self.kind != "dyda_combined":
            raise ConfigMismatch(
                f"analytic forcing is only available for dyda_combined, not {self.kind!r}"
            )
        if self.T <= 0.0:
            raise ValueError(f"terminal time must be > 0, got {self.T}")
        if self.kind == "two_body_time":
            if self.operator.gamma is None:
                raise ConfigMismatch(
                    "two_body_time is time-dependent: the operator needs a gamma"
                )
        elif self.operator.gamma is not None:
            raise ConfigMismatch(
                f"{self.kind} is stationary but the operator has a time order gamma"
            )

        gen = RngStream(self.seed).generator
        if self.kind == "dyda_combined":
            object.__setattr__(self, "c1", gen.standard_normal(self.d + 1))
            object.__setattr__(self, "c2", gen.standard_normal(self.d + 1))
            object.__setattr__(self, "c", None)
            self.c1.flags.writeable = False
            self.c2.flags.writeable = False
        else:
            n_terms = self.d - 1 if self.kind != "three_body" else self.d - 2
            object.__setattr__(self, "c", gen.standard_normal(n_terms))
            object.__setattr__(self, "c1", None)
            object.__setattr__(self, "c2", None)
            self.c.flags.writeable = False

    @property
    def time_dependent(self) -> bool:
        return self.kind == "two_body_time"


def _as_points(spec: ProblemSpec, points) -> np.ndarray:
    points = np.asarray(points, dtype=float)
    if points.ndim == 1:
        points = points[None, :]
    want = spec.d + 1 if spec.time_dependent else spec.d
    if points.ndim != 2 or points.shape[1] != want:
        raise DimensionMismatch(
            f"expected points of width {want} for kind {spec.kind!r} at d={spec.d}, "
            f"got shape {points.shape}"
        )
    return points


def _two_body_phases(x: np.ndarray):
    """phase_i = x_i + cos(x_{i+1}) + x_{i+1} cos(x_i) for i = 1..d-1."""
    xi, xj = x[:, :-1], x[:, 1:]
    return xi + np.cos(xj) + xj * np.cos(xi)


def _two_body_phase_grads(x: np.ndarray):
    """d(phase_i)/dx_i and d(phase_i)/dx_{i+1}."""
    xi, xj = x[:, :-1], x[:, 1:]
    return 1.0 - xj * np.sin(xi), np.cos(xi) - np.sin(xj)


def eval_exact(spec: ProblemSpec, points) -> np.ndarray:
    """The exact solution at the given points (0 outside the unit ball).

    For the time-dependent kind the time is the last column.  The
    interaction sums are evaluated only inside the ball: estimator stencils
    place most of their points far outside, where the three-body
    exponentials would overflow (and the envelope zeroes them anyway).
    """
    points = _as_points(spec, points)
    x = points[:, : spec.d]
    s = 1.0 - np.sum(x * x, axis=1)
    out = np.zeros(len(x))
    inside = s > 0.0
    if not inside.any():
        return out
    xi = x[inside]
    env = s[inside]

    if spec.kind == "dyda_combined":
        a2 = spec.operator.alpha / 2.0
        lin1 = spec.c1[0] + xi @ spec.c1[1:]
        lin2 = spec.c2[0] + xi @ spec.c2[1:]
        out[inside] = env**a2 * lin1 + env ** (1.0 + a2) * lin2
    elif spec.kind == "two_body":
        out[inside] = env * (np.sin(_two_body_phases(xi)) @ spec.c)
    elif spec.kind == "three_body":
        out[inside] = env * (np.exp(xi[:, :-2] * xi[:, 1:-1] * xi[:, 2:]) @ spec.c)
    else:
        t = points[inside, -1]
        out[inside] = env * (np.sin(t[:, None] * _two_body_phases(xi)) @ spec.c)
    return out


def eval_exact_grad(spec: ProblemSpec, points) -> np.ndarray:
    """Gradient of the exact solution, one column per input coordinate.

    Time-dependent solutions get a final time-derivative column.  For
    ``dyda_combined`` the gradient is unbounded at the boundary; callers keep
    evaluation points strictly interior.
    """
    points = _as_points(spec, points)
    x = points[:, : spec.d]
    s = 1.0 - np.sum(x * x, axis=1)
    inside = s > 0.0
    width = spec.d + 1 if spec.time_dependent else spec.d
    out = np.zeros((len(x), width))
    if not inside.any():
        return out
    xi = x[inside]
    env = s[inside]
    denv = -2.0 * xi

    if spec.kind == "dyda_combined":
        a2 = spec.operator.alpha / 2.0
        lin1 = spec.c1[0] + xi @ spec.c1[1:]
        lin2 = spec.c2[0] + xi @ spec.c2[1:]
        e1 = env**a2
        e2 = env ** (1.0 + a2)
        out[inside] = (
            (a2 * env ** (a2 - 1.0) * lin1)[:, None] * denv
            + e1[:, None] * spec.c1[None, 1:]
            + ((1.0 + a2) * e1 * lin2)[:, None] * denv
            + e2[:, None] * spec.c2[None, 1:]
        )
        return out

    if spec.kind == "two_body":
        phases = _two_body_phases(xi)
        total = np.sin(phases) @ spec.c
        w = np.cos(phases) * spec.c
        gi, gj = _two_body_phase_grads(xi)
        grad_sum = np.zeros_like(xi)
        grad_sum[:, :-1] += w * gi
        grad_sum[:, 1:] += w * gj
        out[inside] = total[:, None] * denv + env[:, None] * grad_sum
        return out

    if spec.kind == "three_body":
        terms = np.exp(xi[:, :-2] * xi[:, 1:-1] * xi[:, 2:]) * spec.c
        total = terms.sum(axis=1)
        grad_sum = np.zeros_like(xi)
        grad_sum[:, :-2] += terms * xi[:, 1:-1] * xi[:, 2:]
        grad_sum[:, 1:-1] += terms * xi[:, :-2] * xi[:, 2:]
        grad_sum[:, 2:] += terms * xi[:, :-2] * xi[:, 1:-1]
        out[inside] = total[:, None] * denv + env[:, None] * grad_sum
        return out

    t = points[inside, -1]
    phases = _two_body_phases(xi)
    total = np.sin(t[:, None] * phases) @ spec.c
    w = np.cos(t[:, None] * phases) * spec.c
    gi, gj = _two_body_phase_grads(xi)
    grad_sum = np.zeros_like(xi)
    grad_sum[:, :-1] += t[:, None] * w * gi
    grad_sum[:, 1:] += t[:, None] * w * gj
    block = np.empty((len(xi), spec.d + 1))
    block[:, : spec.d] = total[:, None] * denv + env[:, None] * grad_sum
    block[:, spec.d] = env * ((w * phases).sum(axis=1))
    out[inside] = block
    return out


class ExactSolution:
    """Callable adapter so the exact solution plugs in wherever a model does."""

    def __init__(self, spec: ProblemSpec):
        self.spec = spec

    def __call__(self, points) -> np.ndarray:
        return eval_exact(self.spec, points)

    def grad(self, points) -> np.ndarray:
        return eval_exact_grad(self.spec, points)


def exact_field(spec: ProblemSpec) -> ExactSolution:
    return ExactSolution(spec)


def _log_gamma_ratio(top: float, bottom: float) -> float:
    return math.lgamma(top) - math.lgamma(bottom)


def dyda_row_constants(d: int, alpha: float) -> tuple[float, float, float, float]:
    """The four per-row constants of the analytic dyda forcing.

    Row 1: (1-|x|^2)^(a/2)            -> A1 (constant)
    Row 2: (1-|x|^2)^(1+a/2)          -> A2 (1 - (1 + a/d)|x|^2)
    Row 3: x_i (1-|x|^2)^(a/2)        -> B1 x_i
    Row 4: x_i (1-|x|^2)^(1+a/2)      -> B2 (1 - (1 + a/(d+2))|x|^2) x_i

    Gamma ratios are evaluated in log space so the constants survive d in
    the hundreds.
    """
    base = alpha * math.log(2.0) + _log_gamma_ratio((alpha + d) / 2.0, d / 2.0)
    shift = math.log((alpha + d) / 2.0) - math.log(d / 2.0)  # both ratios +1
    g1 = math.lgamma(alpha / 2.0 + 1.0)
    g2 = math.lgamma(alpha / 2.0 + 2.0)
    a1 = math.exp(base + g1)
    a2 = math.exp(base + g2)
    b1 = math.exp(base + shift + g1)
    b2 = math.exp(base + shift + g2)
    return a1, a2, b1, b2


def dyda_forcing(spec: ProblemSpec, points, alpha: float | None = None) -> np.ndarray:
    """Analytic forcing of the combined dyda solution, assembled by linearity.

    The coordinate-weighted rows extend to every index i by the relabeling
    symmetry of the fractional Laplacian.  ``alpha`` defaults to the
    operator's order (the solution's envelope exponent).
    """
    if spec.kind != "dyda_combined":
        raise ConfigMismatch(
            f"analytic forcing exists only for dyda_combined, not {spec.kind!r}"
        )
    if alpha is None:
        alpha = spec.operator.alpha
    x = _as_points(spec, points)
    r2 = np.sum(x * x, axis=1)
    if np.any(r2 >= 1.0):
        raise OutsideDomain("forcing formula holds only inside the open unit ball")
    d = spec.d
    a1, a2, b1, b2 = dyda_row_constants(d, alpha)
    return (
        spec.c1[0] * a1
        + spec.c2[0] * a2 * (1.0 - (1.0 + alpha / d) * r2)
        + (x @ spec.c1[1:]) * b1
        + (x @ spec.c2[1:]) * b2 * (1.0 - (1.0 + alpha / (d + 2)) * r2)
    )


def mc_forcing(
    spec: ProblemSpec,
    points,
    cfg: OperatorConfig,
    rng,
    n: int = 1024,
    t=None,
    variant: str = "mc",
    rule: RadialRule | None = None,
    time_rule: RadialRule | None = None,
) -> np.ndarray:
    """Estimated forcing: the full operator applied to the exact solution.

    Uses ``n`` radial samples (or nodes) regardless of the operator config's
    own batch size, so the forcing target can be resolved more finely than
    the training-side estimator.  The advection term is exact -- only the
    nonlocal parts are estimated.  Deterministic given the rng stream.
    """
    cfg_n = replace(cfg, n_radial=int(n))
    points = np.asarray(points, dtype=float)
    if points.ndim == 1:
        points = points[None, :]
    if spec.time_dependent and t is not None:
        if points.ndim != 2 or points.shape[1] != spec.d:
            raise DimensionMismatch(
                "pass times either as the last point column or via t=, not both"
            )
    else:
        points = _as_points(spec, points)
        if spec.time_dependent:
            t = points[:, -1]
            points = points[:, : spec.d]
    return pde_residual(
        exact_field(spec),
        points,
        cfg_n,
        0.0,
        variant,
        rng,
        t=t,
        rule=rule,
        time_rule=time_rule,
    )


def make_test_set(spec: ProblemSpec, count: int, rng: RngStream):
    """Fixed evaluation points: volume-uniform in the ball, strictly interior.

    Returns ``(points, times)``; ``times`` is None for stationary problems
    and uniform on (0, T] otherwise.  The rare draw that lands within
    ``1e-9`` of the boundary is pulled inward so the dyda envelope's
    boundary-singular gradient stays finite.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    x = sample_ball(spec.d, count, rng)
    r2 = np.sum(x * x, axis=1)
    cap = (1.0 - _INTERIOR_MARGIN) ** 2
    close = r2 >= cap
    if close.any():
        x[close] *= (1.0 - _INTERIOR_MARGIN) / np.sqrt(r2[close])[:, None]
    if not spec.time_dependent:
        return x, None
    return x, spec.T * (1.0 - rng.generator.random(count))


def rel_l2(pred, exact) -> float:
    """Relative L2 error ||pred - exact|| / ||exact||."""
    pred = np.asarray(pred, dtype=float).ravel()
    exact = np.asarray(exact, dtype=float).ravel()
    if pred.size != exact.size:
        raise DimensionMismatch(
            f"prediction has {pred.size} entries, reference has {exact.size}"
        )
    if pred.size == 0:
        raise ValueError("relative error of empty arrays is undefined")
    denom = np.linalg.norm(exact)
    if denom == 0.0:
        raise ZeroReference("reference is identically zero")
    return float(np.linalg.norm(pred - exact) / denom)


def rel_l1(pred, exact) -> float:
    """Relative L1 error; used for identified scalar coefficients."""
    pred = np.asarray(pred, dtype=float).ravel()
    exact = np.asarray(exact, dtype=float).ravel()
    if pred.size != exact.size:
        raise DimensionMismatch(
            f"prediction has {pred.size} entries, reference has {exact.size}"
        )
    if pred.size == 0:
        raise ValueError("relative error of empty arrays is undefined")
    denom = np.sum(np.abs(exact))
    if denom == 0.0:
        raise ZeroReference("reference is identically zero")
    return float(np.sum(np.abs(pred - exact)) / denom)
