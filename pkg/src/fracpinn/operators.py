"""Estimators of fractional and tempered-fractional operators.

Every spatial operator here is a hypersingular integral over R^d.  After the
radial-angular decomposition it becomes a 1-D radial integral of the
symmetrized second difference

    g(r) = average over directions xi of  2 u(x) - u(x - xi r) - u(x + xi r)

against a singular radial weight.  The Monte Carlo variants draw the radius
from a distribution matching that weight (Beta on the ball, Gamma on the
half-line); the quadrature variants replace the radial draw with a Gaussian
rule whose weight function absorbs the singularity, leaving only the sphere
average stochastic.  Time-fractional derivatives get the same treatment on
(0, t) with a Beta draw or a Gauss-Jacobi rule in the relative lag.

All estimators are assembled as *stencils*: a list of evaluation points with
fixed coefficients, so that the estimate is exactly sum_k coef_k * u(p_k).
This makes every estimator linear in the field for fixed draws, lets training
code reuse the points for gradient assembly, and keeps the field evaluation in
one batched call (the dominant cost).  Gamma-function prefactors are fused in
log space; at d = 100 the individual factors overflow while the products stay
benign.

Inverse-mode estimators importance-weight the draws so that the sampled
distribution depends only on fixed upper bounds (alpha_H, gamma_H), never on
the trainable coefficient; the estimate is then differentiable in the
coefficient with frozen samples, and the builders expose those coefficient
derivatives for the training loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import digamma

from .errors import (
    AlphaOutOfRange,
    ConfigMismatch,
    DimensionMismatch,
    GammaOutOfRange,
    LambdaNonPositive,
    NonPositiveTime,
    RuleMismatch,
)
from .quadrature import (
    RadialRule,
    radial_rule_ball,
    radial_rule_halfline,
    radial_rule_time,
)
from .sampling import (
    RngStream,
    SobolDirections,
    sample_beta_one,
    sample_gamma,
    sample_sphere,
)

# Ball-split radius defaults: the Monte Carlo split radius is a tuning knob
# (small values put most draws in the well-behaved inner part), while the
# quadrature variant must use the support diameter so that the outer integral
# collapses to a closed form.
MC_SPLIT_RADIUS = 0.25
QUAD_SPLIT_RADIUS = 2.0

# Cap on the transient stencil size (in float64 entries) per internal batch;
# public estimators chunk large point sets to stay near ~64 MB.
_CHUNK_DOUBLES = 8_000_000


@dataclass(frozen=True, eq=False)
class OperatorConfig:
    """Coefficients and discretization knobs of the differential operator.

    gamma None means a stationary (time-independent) operator.  lambda_x = 0
    selects the plain fractional Laplacian, lambda_x > 0 the tempered one.
    r0 None defers to the variant default (MC_SPLIT_RADIUS or
    QUAD_SPLIT_RADIUS).  v is the advection velocity (None for no advection).
    n_radial counts Monte Carlo draws or quadrature nodes per point.
    """

    alpha: float
    lambda_x: float = 0.0
    gamma: float | None = None
    lambda_t: float = 0.0
    c: float = 1.0
    v: np.ndarray | None = None
    r0: float | None = None
    epsilon: float = 1e-6
    n_radial: int = 64

    def __post_init__(self):
        if not 0.0 < self.alpha < 2.0:
            raise AlphaOutOfRange(f"alpha must be in (0, 2), got {self.alpha}")
        if self.lambda_x < 0.0:
            raise ValueError(f"lambda_x must be >= 0, got {self.lambda_x}")
        if self.gamma is not None and not 0.0 < self.gamma < 1.0:
            raise GammaOutOfRange(f"gamma must be in (0, 1), got {self.gamma}")
        if self.lambda_t < 0.0:
            raise ValueError(f"lambda_t must be >= 0, got {self.lambda_t}")
        if self.lambda_t > 0.0 and self.gamma is None:
            raise ConfigMismatch("lambda_t > 0 needs a time order gamma")
        if self.c <= 0.0:
            raise ValueError(f"c must be > 0, got {self.c}")
        if self.r0 is not None and self.r0 <= 0.0:
            raise ValueError(f"r0 must be > 0, got {self.r0}")
        if self.epsilon <= 0.0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if self.r0 is not None and self.epsilon >= self.r0:
            raise ValueError(
                f"epsilon must lie in (0, r0), got {self.epsilon} with r0 {self.r0}"
            )
        if self.n_radial < 1:
            raise ValueError(f"n_radial must be >= 1, got {self.n_radial}")
        if self.v is not None:
            v = np.asarray(self.v, dtype=float)
            if v.ndim != 1 or not np.all(np.isfinite(v)):
                raise ValueError("v must be a finite 1-D velocity vector")
            v.setflags(write=False)
            object.__setattr__(self, "v", v)


def split_radius(cfg: OperatorConfig, variant: str) -> float:
    """The ball-split radius r0 for a variant, honoring an explicit override."""
    if cfg.r0 is not None:
        return cfg.r0
    return MC_SPLIT_RADIUS if variant == "mc" else QUAD_SPLIT_RADIUS


@dataclass
class Stencil:
    """Evaluation points and coefficients: estimate_b = sum_k coefs[b,k] u(points[b,k]).

    The optional arrays carry coefficient derivatives for inverse-mode
    training: dcoef_dalpha and dcoef_dlam are (B, K); dpoints_dlam is
    (B, K, width) point motion (the tempered shift scales with 1/lambda);
    dcoef_dgamma is (B, K) for the time estimator.
    """

    points: np.ndarray
    coefs: np.ndarray
    dcoef_dalpha: np.ndarray | None = None
    dcoef_dlam: np.ndarray | None = None
    dpoints_dlam: np.ndarray | None = None
    dcoef_dgamma: np.ndarray | None = None

    def apply(self, u) -> np.ndarray:
        b, k, width = self.points.shape
        vals = np.asarray(u(self.points.reshape(b * k, width)), dtype=float)
        return np.sum(self.coefs * vals.reshape(b, k), axis=1)


@dataclass
class TimeStencil:
    """1-D analogue of Stencil over time lags: value_b = sum_k coefs[b,k] f(times[b,k])."""

    times: np.ndarray
    coefs: np.ndarray
    dcoef_dgamma: np.ndarray | None = None

    def apply(self, f) -> np.ndarray:
        vals = np.asarray(f(self.times.reshape(-1)), dtype=float)
        vals = np.broadcast_to(vals, (self.times.size,))
        return np.sum(self.coefs * vals.reshape(self.times.shape), axis=1)


# --- log-space constants ---------------------------------------------------


def _log_sphere_area(d: int) -> float:
    # |S^{d-1}| = 2 pi^{d/2} / Gamma(d/2)
    return math.log(2.0) + 0.5 * d * math.log(math.pi) - math.lgamma(0.5 * d)


def _log_frac_constant(d: int, alpha: float) -> float:
    # C_{d,alpha} = 2^alpha Gamma((d+alpha)/2) / (pi^{d/2} |Gamma(-alpha/2)|)
    return (
        alpha * math.log(2.0)
        + math.lgamma(0.5 * (d + alpha))
        - 0.5 * d * math.log(math.pi)
        - math.lgamma(-0.5 * alpha)
    )


def _log_tempered_constant(d: int, alpha: float) -> float:
    # C_{d,alpha,lambda} = Gamma(d/2) / (2 pi^{d/2} |Gamma(-alpha)|)
    try:
        log_abs_gamma = math.lgamma(-alpha)
    except ValueError as err:
        raise AlphaOutOfRange(
            "tempered operators are undefined at alpha = 1 (Gamma(-alpha) pole)"
        ) from err
    return (
        math.lgamma(0.5 * d)
        - math.log(2.0)
        - 0.5 * d * math.log(math.pi)
        - log_abs_gamma
    )


def _tempered_prefactor(
    d: int, alpha: float, shape_arg: float, lam: float, lam_exponent: float
) -> float:
    """C_{d,alpha,lambda} * (1/2)|S^{d-1}| * Gamma(shape_arg) * lam^lam_exponent.

    Shared by the forward estimator (shape_arg = 2-alpha, exponent -(2-alpha))
    and the inverse estimator (shape_arg = 2-alpha_H, exponent alpha) so that
    the two reduce to bit-identical values at alpha = alpha_H, lam = 1.
    """
    base = (
        _log_tempered_constant(d, alpha)
        + _log_sphere_area(d)
        - math.log(2.0)
        + math.lgamma(shape_arg)
    )
    return math.exp(base + lam_exponent * math.log(lam))


def frac_constant(d: int, alpha: float) -> float:
    """The hypersingular-integral normalization C_{d,alpha}."""
    return math.exp(_log_frac_constant(d, alpha))


def tempered_constant(d: int, alpha: float) -> float:
    """The tempered normalization C_{d,alpha,lambda} (independent of lambda)."""
    return math.exp(_log_tempered_constant(d, alpha))


# --- direction sources ------------------------------------------------------


def _directions(source, d: int, count: int) -> np.ndarray:
    """Unit directions from an RngStream, a SobolDirections walker, or a
    pre-drawn array.

    An array source is reused verbatim; when it holds fewer rows than
    requested it is tiled, which shares one frozen direction set across a
    batch of stencil points.
    """
    if isinstance(source, SobolDirections):
        if source.d != d:
            raise DimensionMismatch(
                f"direction source is {source.d}-dimensional, points are {d}-dimensional"
            )
        return source.directions(count)
    if isinstance(source, np.ndarray):
        if source.ndim != 2 or source.shape[1] != d:
            raise DimensionMismatch(
                f"direction array must be (m, {d}), got {source.shape}"
            )
        m = source.shape[0]
        if count % m != 0:
            raise DimensionMismatch(
                f"cannot tile {m} directions to {count} stencil rows"
            )
        return source if m == count else np.tile(source, (count // m, 1))
    return sample_sphere(d, count, source)


def _as_batch(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise DimensionMismatch(f"expected points of shape (batch, d), got {x.shape}")
    return x


def _chunk_rows(k: int, d: int) -> int:
    return max(1, _CHUNK_DOUBLES // (k * max(d, 1)))


# --- spatial stencil builders ------------------------------------------------


def mc_frac_stencil(x: np.ndarray, cfg: OperatorConfig, rng) -> Stencil:
    """Monte Carlo stencil for the plain fractional Laplacian.

    Draw order per call: inner radii, inner directions, outer radii, outer
    directions.  Inner radii are r0 * Beta(2-alpha, 1) floored at epsilon;
    outer radii are r0 / Beta(alpha, 1) and may leave the domain, where the
    hard-constraint wrapper evaluates to zero.
    """
    x = _as_batch(x)
    b, d = x.shape
    if cfg.lambda_x != 0.0:
        raise ConfigMismatch(
            "plain-Laplacian estimator needs lambda_x = 0; use the tempered variant"
        )
    n = cfg.n_radial
    alpha = cfg.alpha
    r0 = split_radius(cfg, "mc")
    log_cs = _log_frac_constant(d, alpha) + _log_sphere_area(d)
    pre_in = math.exp(
        log_cs + (2.0 - alpha) * math.log(r0) - math.log(2.0) - math.log(2.0 - alpha)
    )
    pre_out = math.exp(log_cs - alpha * math.log(r0) - math.log(2.0) - math.log(alpha))

    r_in = r0 * np.maximum(
        sample_beta_one(2.0 - alpha, b * n, rng).reshape(b, n), cfg.epsilon / r0
    )
    xi_in = _directions(rng, d, b * n).reshape(b, n, d)
    r_out = r0 / sample_beta_one(alpha, b * n, rng).reshape(b, n)
    xi_out = _directions(rng, d, b * n).reshape(b, n, d)

    points = np.empty((b, 4 * n + 1, d))
    shift_in = xi_in * r_in[..., None]
    shift_out = xi_out * r_out[..., None]
    points[:, 0:n] = x[:, None, :] - shift_in
    points[:, n : 2 * n] = x[:, None, :] + shift_in
    points[:, 2 * n : 3 * n] = x[:, None, :] - shift_out
    points[:, 3 * n : 4 * n] = x[:, None, :] + shift_out
    points[:, 4 * n] = x

    coefs = np.empty((b, 4 * n + 1))
    coefs[:, 0:n] = -pre_in / (n * r_in * r_in)
    coefs[:, n : 2 * n] = coefs[:, 0:n]
    coefs[:, 2 * n : 4 * n] = -pre_out / n
    coefs[:, 4 * n] = -np.sum(coefs[:, : 4 * n], axis=1)
    return Stencil(points, coefs)


def _check_rule(rule: RadialRule, provenance: str, want: dict) -> None:
    if rule.provenance != provenance or rule.params != want:
        raise RuleMismatch(
            f"rule {rule.provenance} {rule.params} does not match operator "
            f"settings {provenance} {want}"
        )


def quad_frac_stencil(x: np.ndarray, cfg: OperatorConfig, rule: RadialRule, rng) -> Stencil:
    """Quadrature stencil for the plain fractional Laplacian.

    The radial rule integrates the inner-ball part exactly for polynomial
    radial profiles; beyond r0 (the support diameter) the shifted evaluations
    vanish, so the outer part collapses to a closed-form multiple of u(x).
    One fresh direction per node per point.
    """
    x = _as_batch(x)
    b, d = x.shape
    if cfg.lambda_x != 0.0:
        raise ConfigMismatch(
            "plain-Laplacian estimator needs lambda_x = 0; use the tempered variant"
        )
    alpha = cfg.alpha
    r0 = split_radius(cfg, "quadrature")
    _check_rule(rule, "jacobi_ball", {"alpha": alpha, "r0": r0, "n": cfg.n_radial})
    n = cfg.n_radial
    log_cs = _log_frac_constant(d, alpha) + _log_sphere_area(d)
    pre = math.exp(log_cs - math.log(2.0))
    pre_center = math.exp(log_cs - alpha * math.log(r0) - math.log(alpha))

    r = rule.nodes_r
    xi = _directions(rng, d, b * n).reshape(b, n, d)
    shift = xi * r[None, :, None]

    points = np.empty((b, 2 * n + 1, d))
    points[:, 0:n] = x[:, None, :] - shift
    points[:, n : 2 * n] = x[:, None, :] + shift
    points[:, 2 * n] = x

    cw = -pre * rule.weights_r / (r * r)
    coefs = np.empty((b, 2 * n + 1))
    coefs[:, 0:n] = cw
    coefs[:, n : 2 * n] = cw
    coefs[:, 2 * n] = -2.0 * np.sum(cw) + pre_center
    return Stencil(points, coefs)


def mc_tempered_stencil(x: np.ndarray, cfg: OperatorConfig, rng) -> Stencil:
    """Monte Carlo stencil for the tempered fractional Laplacian.

    Radii are Gamma(2-alpha, rate lambda_x) draws floored at epsilon; the
    exponential tempering is the sampling density, so no ball split is needed.
    Draw order per call: radii, then directions.
    """
    x = _as_batch(x)
    b, d = x.shape
    if cfg.lambda_x <= 0.0:
        raise LambdaNonPositive(
            f"tempered estimator needs lambda_x > 0, got {cfg.lambda_x}"
        )
    n = cfg.n_radial
    alpha = cfg.alpha
    lam = cfg.lambda_x
    pre = _tempered_prefactor(d, alpha, 2.0 - alpha, lam, -(2.0 - alpha))

    r = sample_gamma(2.0 - alpha, lam, b * n, rng).reshape(b, n)
    r = np.maximum(r, cfg.epsilon)
    xi = _directions(rng, d, b * n).reshape(b, n, d)
    shift = xi * r[..., None]

    points = np.empty((b, 2 * n + 1, d))
    points[:, 0:n] = x[:, None, :] - shift
    points[:, n : 2 * n] = x[:, None, :] + shift
    points[:, 2 * n] = x

    coefs = np.empty((b, 2 * n + 1))
    coefs[:, 0:n] = -pre / (n * r * r)
    coefs[:, n : 2 * n] = coefs[:, 0:n]
    coefs[:, 2 * n] = -np.sum(coefs[:, : 2 * n], axis=1)
    return Stencil(points, coefs)


def quad_tempered_stencil(
    x: np.ndarray, cfg: OperatorConfig, rule: RadialRule, rng
) -> Stencil:
    """Quadrature stencil for the tempered fractional Laplacian.

    Generalized Gauss-Laguerre nodes cover (0, inf) with the tempering factor
    as weight; nodes deep outside the domain cost nothing because the wrapped
    field short-circuits there.  One fresh direction per node per point.
    """
    x = _as_batch(x)
    b, d = x.shape
    if cfg.lambda_x <= 0.0:
        raise LambdaNonPositive(
            f"tempered estimator needs lambda_x > 0, got {cfg.lambda_x}"
        )
    alpha = cfg.alpha
    lam = cfg.lambda_x
    _check_rule(
        rule, "laguerre_halfline", {"alpha": alpha, "lam": lam, "n": cfg.n_radial}
    )
    n = cfg.n_radial
    pre = math.exp(
        _log_tempered_constant(d, alpha) + _log_sphere_area(d) - math.log(2.0)
    )

    r = rule.nodes_r
    xi = _directions(rng, d, b * n).reshape(b, n, d)
    shift = xi * r[None, :, None]

    points = np.empty((b, 2 * n + 1, d))
    points[:, 0:n] = x[:, None, :] - shift
    points[:, n : 2 * n] = x[:, None, :] + shift
    points[:, 2 * n] = x

    cw = -pre * rule.weights_r / (r * r)
    coefs = np.empty((b, 2 * n + 1))
    coefs[:, 0:n] = cw
    coefs[:, n : 2 * n] = cw
    coefs[:, 2 * n] = -2.0 * np.sum(cw)
    return Stencil(points, coefs)


def inverse_tempered_stencil(
    x: np.ndarray,
    alpha: float,
    alpha_h: float,
    lam: float,
    n: int,
    rng,
    epsilon: float = 1e-6,
    with_grads: bool = False,
) -> Stencil:
    """Resampling-free stencil for the tempered Laplacian with trainable (alpha, lam).

    Radii come from Gamma(2-alpha_H, 1), which does not depend on the
    trainable coefficients; alpha enters through the importance weight
    r^(alpha_H-alpha) and the constants, lam through the shift scaling r/lam
    and the factor lam^alpha.  At alpha = alpha_H, lam = 1 this reproduces the
    forward Monte Carlo estimator bit for bit on shared draws.
    """
    x = _as_batch(x)
    b, d = x.shape
    if not 0.0 < alpha <= alpha_h < 2.0:
        raise AlphaOutOfRange(
            f"need 0 < alpha <= alpha_H < 2, got alpha {alpha}, alpha_H {alpha_h}"
        )
    if lam <= 0.0:
        raise LambdaNonPositive(f"lam must be > 0, got {lam}")
    pre = _tempered_prefactor(d, alpha, 2.0 - alpha_h, lam, alpha)

    r = sample_gamma(2.0 - alpha_h, 1.0, b * n, rng).reshape(b, n)
    r = np.maximum(r, epsilon)
    xi = _directions(rng, d, b * n).reshape(b, n, d)
    shift = xi * (r / lam)[..., None]

    points = np.empty((b, 2 * n + 1, d))
    points[:, 0:n] = x[:, None, :] - shift
    points[:, n : 2 * n] = x[:, None, :] + shift
    points[:, 2 * n] = x

    wgt = r ** (alpha_h - alpha)
    half = -pre * wgt / (n * r * r)
    coefs = np.empty((b, 2 * n + 1))
    coefs[:, 0:n] = half
    coefs[:, n : 2 * n] = half
    coefs[:, 2 * n] = -np.sum(coefs[:, : 2 * n], axis=1)
    if not with_grads:
        return Stencil(points, coefs)

    # d/d alpha: psi(-alpha) from the constant, log(lam) from lam^alpha,
    # -log r from the importance weight.
    dfac = float(digamma(-alpha)) + math.log(lam) - np.log(r)
    dhalf = half * dfac
    dcoef_dalpha = np.empty_like(coefs)
    dcoef_dalpha[:, 0:n] = dhalf
    dcoef_dalpha[:, n : 2 * n] = dhalf
    dcoef_dalpha[:, 2 * n] = -np.sum(dcoef_dalpha[:, : 2 * n], axis=1)

    dcoef_dlam = coefs * (alpha / lam)
    dcoef_dlam[:, 2 * n] = -np.sum(dcoef_dlam[:, : 2 * n], axis=1)

    dpoints_dlam = np.zeros_like(points)
    motion = shift / lam  # = xi r / lam^2
    dpoints_dlam[:, 0:n] = motion
    dpoints_dlam[:, n : 2 * n] = -motion
    return Stencil(points, coefs, dcoef_dalpha, dcoef_dlam, dpoints_dlam)


def inverse_quad_tempered_stencil(
    x: np.ndarray,
    alpha: float,
    alpha_h: float,
    lam: float,
    rule: RadialRule,
    rng,
    with_grads: bool = False,
) -> Stencil:
    """Quadrature stencil for the tempered Laplacian with trainable (alpha, lam).

    Same change of variables as the Monte Carlo inverse estimator, but the
    radial integral uses fixed generalized Gauss-Laguerre nodes built for the
    alpha_H weight at unit tempering; alpha enters through the importance
    factor r^(alpha_H-alpha) and the constants, lam through the shift scaling
    r/lam and the factor lam^alpha, so the nodes never move with either
    coefficient.  At alpha = alpha_H, lam = 1 this reproduces the forward
    quadrature estimator bit for bit on shared directions.
    """
    x = _as_batch(x)
    b, d = x.shape
    if not 0.0 < alpha <= alpha_h < 2.0:
        raise AlphaOutOfRange(
            f"need 0 < alpha <= alpha_H < 2, got alpha {alpha}, alpha_H {alpha_h}"
        )
    if lam <= 0.0:
        raise LambdaNonPositive(f"lam must be > 0, got {lam}")
    n = rule.nodes_r.shape[0]
    _check_rule(rule, "laguerre_halfline", {"alpha": alpha_h, "lam": 1.0, "n": n})
    pre = math.exp(
        _log_tempered_constant(d, alpha)
        + _log_sphere_area(d)
        - math.log(2.0)
        + alpha * math.log(lam)
    )

    r = rule.nodes_r
    xi = _directions(rng, d, b * n).reshape(b, n, d)
    shift = xi * (r / lam)[None, :, None]

    points = np.empty((b, 2 * n + 1, d))
    points[:, 0:n] = x[:, None, :] - shift
    points[:, n : 2 * n] = x[:, None, :] + shift
    points[:, 2 * n] = x

    half = -pre * rule.weights_r * r ** (alpha_h - alpha) / (r * r)
    coefs = np.empty((b, 2 * n + 1))
    coefs[:, 0:n] = half
    coefs[:, n : 2 * n] = half
    coefs[:, 2 * n] = -2.0 * np.sum(half)
    if not with_grads:
        return Stencil(points, coefs)

    dfac = float(digamma(-alpha)) + math.log(lam) - np.log(r)
    dhalf = half * dfac
    dcoef_dalpha = np.empty_like(coefs)
    dcoef_dalpha[:, 0:n] = dhalf
    dcoef_dalpha[:, n : 2 * n] = dhalf
    dcoef_dalpha[:, 2 * n] = -2.0 * np.sum(dhalf)

    dcoef_dlam = coefs * (alpha / lam)
    dcoef_dlam[:, 2 * n] = -np.sum(dcoef_dlam[:, : 2 * n], axis=1)

    dpoints_dlam = np.zeros_like(points)
    motion = shift / lam
    dpoints_dlam[:, 0:n] = motion
    dpoints_dlam[:, n : 2 * n] = -motion
    return Stencil(points, coefs, dcoef_dalpha, dcoef_dlam, dpoints_dlam)


# --- time stencil builders ----------------------------------------------------


def _as_times(t) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(t <= 0.0) or not np.all(np.isfinite(t)):
        raise NonPositiveTime(f"times must be positive and finite, got {t}")
    return t


def mc_time_stencil(
    t,
    gamma: float,
    gamma_h: float,
    n: int,
    rng: RngStream,
    with_grads: bool = False,
    epsilon: float = 0.0,
) -> TimeStencil:
    """Monte Carlo stencil for the Caputo derivative of order gamma at times t.

    Lags tau are Beta(1-gamma_H, 1) draws; gamma_h = gamma gives the forward
    estimator, gamma < gamma_h the importance-weighted inverse-mode one whose
    samples do not move with gamma.  For gamma_h near 1 the Beta draws are
    U^{1/(1-gamma_h)} and can underflow to exact zero, where the 1/tau
    coefficients are undefined; a positive epsilon floors the lags the same
    way the spatial builders floor their radii.
    """
    t = _as_times(t)
    b = t.shape[0]
    tau = sample_beta_one(1.0 - gamma_h, b * n, rng).reshape(b, n)
    if epsilon > 0.0:
        tau = np.maximum(tau, epsilon)
    inv_g1 = math.exp(-math.lgamma(1.0 - gamma))
    p = inv_g1 * (gamma / (1.0 - gamma_h)) * t ** (1.0 - gamma)
    q = inv_g1 / t**gamma

    times = np.empty((b, n + 2))
    times[:, 0:n] = t[:, None] - t[:, None] * tau
    times[:, n] = 0.0
    times[:, n + 1] = t

    wgt = tau ** (gamma_h - gamma)
    coefs = np.empty((b, n + 2))
    coefs[:, 0:n] = -p[:, None] * wgt / (n * t[:, None] * tau)
    coefs[:, n] = -q
    coefs[:, n + 1] = -np.sum(coefs[:, : n + 1], axis=1)
    if not with_grads:
        return TimeStencil(times, coefs)

    psi = float(digamma(1.0 - gamma))
    dcoef = np.empty_like(coefs)
    dcoef[:, 0:n] = coefs[:, 0:n] * (
        psi + 1.0 / gamma - np.log(t)[:, None] - np.log(tau)
    )
    dcoef[:, n] = coefs[:, n] * (psi - np.log(t))
    dcoef[:, n + 1] = -np.sum(dcoef[:, : n + 1], axis=1)
    return TimeStencil(times, coefs, dcoef)


def quad_time_stencil(t, gamma: float, rule: RadialRule) -> TimeStencil:
    """Gauss-Jacobi stencil for the Caputo derivative at times t."""
    t = _as_times(t)
    b = t.shape[0]
    if rule.provenance != "jacobi_time" or rule.params.get("gamma") != gamma:
        raise RuleMismatch(
            f"rule {rule.provenance} {rule.params} does not match a time "
            f"derivative of order {gamma}"
        )
    tau = rule.nodes_r
    w = rule.weights_r
    n = tau.shape[0]
    inv_g1 = math.exp(-math.lgamma(1.0 - gamma))
    p = inv_g1 * gamma * t ** (1.0 - gamma)
    q = inv_g1 / t**gamma

    times = np.empty((b, n + 2))
    times[:, 0:n] = t[:, None] - t[:, None] * tau[None, :]
    times[:, n] = 0.0
    times[:, n + 1] = t

    coefs = np.empty((b, n + 2))
    coefs[:, 0:n] = -p[:, None] * w / (t[:, None] * tau)
    coefs[:, n] = -q
    coefs[:, n + 1] = -np.sum(coefs[:, : n + 1], axis=1)
    return TimeStencil(times, coefs)


# --- public estimator operations ----------------------------------------------


def mc_frac_laplacian(u, x, cfg: OperatorConfig, rng) -> np.ndarray:
    """Monte Carlo estimate of the fractional Laplacian of u at each point."""
    x = _as_batch(x)
    out = np.empty(x.shape[0])
    step = _chunk_rows(4 * cfg.n_radial + 1, x.shape[1])
    for lo in range(0, x.shape[0], step):
        out[lo : lo + step] = mc_frac_stencil(x[lo : lo + step], cfg, rng).apply(u)
    return out


def quad_frac_laplacian(u, x, cfg: OperatorConfig, rule: RadialRule, rng) -> np.ndarray:
    """Gauss-Jacobi radial estimate of the fractional Laplacian of u."""
    x = _as_batch(x)
    out = np.empty(x.shape[0])
    step = _chunk_rows(2 * cfg.n_radial + 1, x.shape[1])
    for lo in range(0, x.shape[0], step):
        out[lo : lo + step] = quad_frac_stencil(x[lo : lo + step], cfg, rule, rng).apply(u)
    return out


def mc_tempered_frac_laplacian(u, x, cfg: OperatorConfig, rng) -> np.ndarray:
    """Monte Carlo estimate of the tempered fractional Laplacian of u."""
    x = _as_batch(x)
    out = np.empty(x.shape[0])
    step = _chunk_rows(2 * cfg.n_radial + 1, x.shape[1])
    for lo in range(0, x.shape[0], step):
        out[lo : lo + step] = mc_tempered_stencil(x[lo : lo + step], cfg, rng).apply(u)
    return out


def quad_tempered_frac_laplacian(
    u, x, cfg: OperatorConfig, rule: RadialRule, rng
) -> np.ndarray:
    """Generalized Gauss-Laguerre estimate of the tempered fractional Laplacian."""
    x = _as_batch(x)
    out = np.empty(x.shape[0])
    step = _chunk_rows(2 * cfg.n_radial + 1, x.shape[1])
    for lo in range(0, x.shape[0], step):
        out[lo : lo + step] = quad_tempered_stencil(
            x[lo : lo + step], cfg, rule, rng
        ).apply(u)
    return out


def inverse_mc_tempered_laplacian(
    u, x, alpha: float, alpha_h: float, lam: float, n: int, rng, epsilon: float = 1e-6
) -> np.ndarray:
    """Importance-weighted tempered-Laplacian estimate for trainable (alpha, lam)."""
    x = _as_batch(x)
    out = np.empty(x.shape[0])
    step = _chunk_rows(2 * n + 1, x.shape[1])
    for lo in range(0, x.shape[0], step):
        st = inverse_tempered_stencil(
            x[lo : lo + step], alpha, alpha_h, lam, n, rng, epsilon
        )
        out[lo : lo + step] = st.apply(u)
    return out


def inverse_quad_tempered_laplacian(
    u, x, alpha: float, alpha_h: float, lam: float, rule: RadialRule, rng
) -> np.ndarray:
    """Rule-based tempered-Laplacian estimate for trainable (alpha, lam).

    The radial nodes are a fixed alpha_H-weighted Gauss-Laguerre rule; the
    current coefficient values enter only through the weights and the shift
    scaling, so the same rule serves every (alpha, lam) it brackets.
    """
    x = _as_batch(x)
    out = np.empty(x.shape[0])
    n = rule.nodes_r.shape[0]
    step = _chunk_rows(2 * n + 1, x.shape[1])
    for lo in range(0, x.shape[0], step):
        st = inverse_quad_tempered_stencil(
            x[lo : lo + step], alpha, alpha_h, lam, rule, rng
        )
        out[lo : lo + step] = st.apply(u)
    return out


def _scalar_time_value(stencil: TimeStencil, f) -> float:
    vals = np.asarray(f(stencil.times[0]), dtype=float)
    vals = np.broadcast_to(vals, stencil.times[0].shape)
    return float(np.dot(stencil.coefs[0], vals))


def mc_time_frac(f, t: float, gamma: float, n: int, rng: RngStream) -> float:
    """Monte Carlo estimate of the Caputo derivative of f at time t.

    f must accept a 1-D array of times.
    """
    if t <= 0.0:
        raise NonPositiveTime(f"t must be > 0, got {t}")
    if not 0.0 < gamma < 1.0:
        raise GammaOutOfRange(f"gamma must be in (0, 1), got {gamma}")
    return _scalar_time_value(mc_time_stencil(t, gamma, gamma, n, rng), f)


def inverse_mc_time_frac(
    f, t: float, gamma: float, gamma_h: float, n: int, rng: RngStream
) -> float:
    """Caputo estimate differentiable in gamma on frozen Beta(1-gamma_H, 1) draws."""
    if t <= 0.0:
        raise NonPositiveTime(f"t must be > 0, got {t}")
    if not 0.0 < gamma <= gamma_h:
        raise GammaOutOfRange(
            f"need 0 < gamma <= gamma_H, got gamma {gamma}, gamma_H {gamma_h}"
        )
    if not gamma_h < 1.0:
        raise GammaOutOfRange(f"gamma_H must be < 1, got {gamma_h}")
    return _scalar_time_value(mc_time_stencil(t, gamma, gamma_h, n, rng), f)


def quad_time_frac(f, t: float, gamma: float, rule: RadialRule) -> float:
    """Gauss-Jacobi estimate of the Caputo derivative of f at time t."""
    if t <= 0.0:
        raise NonPositiveTime(f"t must be > 0, got {t}")
    if not 0.0 < gamma < 1.0:
        raise GammaOutOfRange(f"gamma must be in (0, 1), got {gamma}")
    return _scalar_time_value(quad_time_stencil(t, gamma, rule), f)


def tempered_time_frac(f, t: float, gamma: float, lambda_t: float, inner) -> float:
    """Tempered Caputo derivative: exp(-lambda_t t) * inner(exp(lambda_t s) f(s), t, gamma).

    inner is any estimator with signature (f, t, gamma) -> real, e.g. a
    partially applied mc_time_frac or quad_time_frac.  lambda_t = 0 reduces
    exactly to inner(f, t, gamma).
    """
    if lambda_t < 0.0:
        raise LambdaNonPositive(f"lambda_t must be >= 0, got {lambda_t}")

    def g(s):
        return np.exp(lambda_t * np.asarray(s, dtype=float)) * f(s)

    return math.exp(-lambda_t * t) * inner(g, t, gamma)


# --- full residual -------------------------------------------------------------


def build_spatial_rule(cfg: OperatorConfig) -> RadialRule:
    """The radial rule the quadrature variants need for this operator."""
    if cfg.lambda_x > 0.0:
        return radial_rule_halfline(cfg.n_radial, cfg.alpha, cfg.lambda_x)
    return radial_rule_ball(cfg.n_radial, cfg.alpha, split_radius(cfg, "quadrature"))


def residual_stencil(
    x: np.ndarray,
    cfg: OperatorConfig,
    variant: str,
    rng,
    t=None,
    rule: RadialRule | None = None,
    time_rule: RadialRule | None = None,
) -> Stencil:
    """One stencil for the whole operator c*(-Delta_lam)^(alpha/2) [+ d^gamma/dt^gamma].

    For time-dependent operators the returned points have the time as the
    last column; the diffusion coefficient c is folded into the spatial
    coefficients, and time tempering multiplies each time entry by
    exp(lambda_t (s - t)).  Advection and forcing are not included.
    """
    x = _as_batch(x)
    b, d = x.shape
    if variant not in ("mc", "quadrature", "qmc"):
        raise ValueError(f"unknown estimator variant {variant!r}")
    if variant == "mc":
        if cfg.lambda_x > 0.0:
            spatial = mc_tempered_stencil(x, cfg, rng)
        else:
            spatial = mc_frac_stencil(x, cfg, rng)
    else:
        if rule is None:
            rule = build_spatial_rule(cfg)
        if cfg.lambda_x > 0.0:
            spatial = quad_tempered_stencil(x, cfg, rule, rng)
        else:
            spatial = quad_frac_stencil(x, cfg, rule, rng)
    spatial.coefs *= cfg.c

    if cfg.gamma is None:
        if t is not None:
            raise ConfigMismatch("times were supplied but the operator has no gamma")
        return spatial

    if t is None:
        raise ConfigMismatch("the operator has a time order gamma but no times given")
    t = _as_times(t)
    if t.shape[0] != b:
        raise DimensionMismatch(f"{b} points but {t.shape[0]} times")
    if variant == "mc":
        ts = mc_time_stencil(t, cfg.gamma, cfg.gamma, cfg.n_radial, rng)
    else:
        if time_rule is None:
            time_rule = radial_rule_time(cfg.n_radial, cfg.gamma)
        ts = quad_time_stencil(t, cfg.gamma, time_rule)
    tcoefs = ts.coefs * np.exp(cfg.lambda_t * (ts.times - t[:, None]))

    k_sp = spatial.coefs.shape[1]
    k_t = tcoefs.shape[1]
    points = np.empty((b, k_sp + k_t, d + 1))
    points[:, :k_sp, :d] = spatial.points
    points[:, :k_sp, d] = t[:, None]
    points[:, k_sp:, :d] = x[:, None, :]
    points[:, k_sp:, d] = ts.times
    coefs = np.concatenate([spatial.coefs, tcoefs], axis=1)
    return Stencil(points, coefs)


def pde_residual(
    u_model,
    x,
    cfg: OperatorConfig,
    forcing,
    variant: str,
    rng,
    t=None,
    rule: RadialRule | None = None,
    time_rule: RadialRule | None = None,
) -> np.ndarray:
    """Residual of the operator equation at the given points.

    Returns time term + c * spatial term + v . grad u - forcing, batched.
    u_model is called on batches of points (with the time appended as the
    last column for time-dependent operators); when advection is active it
    must also expose a .grad(points) method (the network wrapper and the
    analytic solutions both do).
    """
    x = _as_batch(x)
    b, d = x.shape
    st = residual_stencil(x, cfg, variant, rng, t=t, rule=rule, time_rule=time_rule)
    res = st.apply(u_model)
    if cfg.v is not None and np.any(cfg.v != 0.0):
        if cfg.v.shape != (d,):
            raise DimensionMismatch(
                f"velocity has shape {cfg.v.shape}, points are {d}-dimensional"
            )
        if cfg.gamma is None:
            z = x
        else:
            z = np.column_stack([x, _as_times(t)])
        grads = np.asarray(u_model.grad(z), dtype=float)
        res = res + grads[:, :d] @ cfg.v
    return res - np.asarray(forcing, dtype=float)
