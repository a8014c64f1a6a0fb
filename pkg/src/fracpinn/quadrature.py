"""Gaussian quadrature rules for singular radial integrals.

After the radial-angular split, the nonlocal operators in this package reduce
to one-dimensional integrals against one of two weight families,

    (1 - x)^a (1 + x)^b   on (-1, 1),        Gauss-Jacobi,
    x^a e^{-x}            on (0, infinity),  generalized Gauss-Laguerre,

with exponents in (-1, 0] coming from the fractional orders.  Nodes and
weights are produced by the Golub-Welsch method: the eigenvalues of the
symmetric tridiagonal Jacobi matrix built from the three-term recurrence of
the monic orthogonal polynomials are the nodes, and the squared first
components of the normalized eigenvectors, scaled by the zeroth moment, are
the weights.

The raw rules are wrapped into ``RadialRule`` objects that absorb every
change-of-variable factor, so that downstream code applies them to the bare
integrand g(r) without knowing the underlying weight.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from math import exp, lgamma, log

import numpy as np
from scipy.linalg import eigh_tridiagonal

from .errors import DegenerateRule, InvalidExponent, LambdaNonPositive

__all__ = [
    "QuadratureRule",
    "RadialRule",
    "gauss_rule",
    "radial_rule_ball",
    "radial_rule_halfline",
    "radial_rule_time",
]


@dataclass(frozen=True)
class QuadratureRule:
    """A Gaussian rule: sum(weights * f(nodes)) ~ integral of f * weight."""

    kind: str  # "jacobi" | "generalized_laguerre"
    n: int
    exp_a: float
    exp_b: float | None
    nodes: np.ndarray
    weights: np.ndarray

    def apply(self, f) -> float:
        return float(np.dot(self.weights, f(self.nodes)))


@dataclass(frozen=True)
class RadialRule:
    """A rule in physical radius r with all weight factors absorbed.

    ``sum(weights_r * g(nodes_r))`` approximates the base integral of the
    provenance (see the builders below) applied to g.
    """

    nodes_r: np.ndarray
    weights_r: np.ndarray
    provenance: str  # "jacobi_ball" | "laguerre_halfline" | "jacobi_time"
    params: dict

    @property
    def n(self) -> int:
        return self.nodes_r.shape[0]

    def apply(self, g) -> float:
        return float(np.dot(self.weights_r, g(self.nodes_r)))


def _log_mu0_jacobi(a: float, b: float) -> float:
    # integral of (1-x)^a (1+x)^b over (-1,1) = 2^(a+b+1) B(a+1, b+1)
    return (a + b + 1.0) * log(2.0) + lgamma(a + 1.0) + lgamma(b + 1.0) - lgamma(a + b + 2.0)


def _jacobi_recurrence(n: int, a: float, b: float):
    """Monic three-term recurrence coefficients for the Jacobi weight.

    Returns (alpha, beta) with beta[0] unused.  The i=0,1 entries use the
    closed forms that stay finite at a + b = -1, where the generic
    expressions hit 0/0.
    """
    ab = a + b
    alpha = np.empty(n)
    beta = np.empty(n)
    alpha[0] = (b - a) / (ab + 2.0)
    beta[0] = 0.0
    if n > 1:
        alpha[1] = (b * b - a * a) / ((2.0 + ab) * (4.0 + ab))
        beta[1] = 4.0 * (a + 1.0) * (b + 1.0) / ((ab + 2.0) ** 2 * (ab + 3.0))
    for i in range(2, n):
        s = 2.0 * i + ab
        alpha[i] = (b * b - a * a) / (s * (s + 2.0))
        beta[i] = 4.0 * i * (i + a) * (i + b) * (i + ab) / (s * s * (s * s - 1.0))
    return alpha, beta


def _laguerre_recurrence(n: int, a: float):
    i = np.arange(n, dtype=float)
    alpha = 2.0 * i + a + 1.0
    beta = np.concatenate(([0.0], i[1:] * (i[1:] + a)))
    return alpha, beta


def _christoffel_weights(alpha, beta, log_mu0, nodes):
    """Gauss weights via the Christoffel function, w_j = 1 / sum_k phi_k(x_j)^2.

    The orthonormal polynomials phi_k are evaluated by their three-term
    recurrence with per-node exponent tracking.  LAPACK eigenvector first
    components flush to zero once a weight drops ~16 orders of magnitude
    below the largest, whereas this sum keeps every weight to full relative
    accuracy; weights smaller than the double-precision minimum come out as
    an exact 0 (far Laguerre tail at very large n).
    """
    n = alpha.shape[0]
    sqb = np.sqrt(beta)
    phi_prev = np.zeros_like(nodes)
    phi = np.full_like(nodes, exp(-0.5 * log_mu0))
    ssum = phi * phi
    logscale = np.zeros_like(nodes)
    for k in range(n - 1):
        phi_next = ((nodes - alpha[k]) * phi - (sqb[k] if k > 0 else 0.0) * phi_prev) / sqb[k + 1]
        phi_prev, phi = phi, phi_next
        mag = np.abs(phi)
        big = mag > 1e130
        if np.any(big):
            f = np.where(big, mag, 1.0)
            phi = phi / f
            phi_prev = phi_prev / f
            ssum = ssum / (f * f)
            logscale = logscale + np.log(f)
        ssum += phi * phi
    return np.exp(-(np.log(ssum) + 2.0 * logscale))


@functools.lru_cache(maxsize=256)
def _build_rule(kind: str, n: int, exp_a: float, exp_b: float | None) -> QuadratureRule:
    if kind == "jacobi":
        alpha, beta = _jacobi_recurrence(n, exp_a, exp_b)
        log_mu0 = _log_mu0_jacobi(exp_a, exp_b)
    else:
        alpha, beta = _laguerre_recurrence(n, exp_a)
        log_mu0 = lgamma(exp_a + 1.0)

    if n == 1:
        nodes = alpha.copy()
    else:
        try:
            nodes = eigh_tridiagonal(alpha, np.sqrt(beta[1:]), eigvals_only=True)
        except np.linalg.LinAlgError as err:  # pragma: no cover - defensive
            raise DegenerateRule(f"eigen-solve failed for {kind}(n={n}, a={exp_a}, b={exp_b})") from err
    weights = _christoffel_weights(alpha, beta, log_mu0, nodes)

    if np.any(np.diff(nodes) <= 0.0) or np.any(~np.isfinite(weights)) or np.any(weights < 0.0):
        raise DegenerateRule(f"invalid nodes/weights for {kind}(n={n}, a={exp_a}, b={exp_b})")
    zero = weights == 0.0
    if np.any(zero):
        # Only the far right tail of a Laguerre rule may underflow.
        if kind == "jacobi" or not np.all(zero[np.argmax(zero):]):
            raise DegenerateRule(f"unexpected zero weights for {kind}(n={n}, a={exp_a}, b={exp_b})")
    if kind == "jacobi" and (nodes[0] <= -1.0 or nodes[-1] >= 1.0):
        raise DegenerateRule(f"jacobi nodes escaped (-1, 1) for n={n}, a={exp_a}, b={exp_b}")
    if kind == "generalized_laguerre" and nodes[0] <= 0.0:
        raise DegenerateRule(f"laguerre node <= 0 for n={n}, a={exp_a}")

    nodes.setflags(write=False)
    weights.setflags(write=False)
    return QuadratureRule(kind=kind, n=n, exp_a=exp_a, exp_b=exp_b, nodes=nodes, weights=weights)


def gauss_rule(kind: str, n: int, exp_a: float, exp_b: float | None = None) -> QuadratureRule:
    """Build a Gaussian rule for the given weight function.

    kind "jacobi": weight (1-x)^exp_a (1+x)^exp_b on (-1, 1).
    kind "generalized_laguerre": weight x^exp_a e^{-x} on (0, inf); exp_b
    must be omitted.

    Construction is deterministic and cached; the returned rule is immutable.
    """
    if kind not in ("jacobi", "generalized_laguerre"):
        raise ValueError(f"unknown rule kind {kind!r}")
    if n < 1:
        raise ValueError(f"node count must be >= 1, got {n}")
    if exp_a <= -1.0:
        raise InvalidExponent(f"exp_a must be > -1 for an integrable weight, got {exp_a}")
    if kind == "jacobi":
        if exp_b is None:
            raise ValueError("jacobi rules require exp_b")
        if exp_b <= -1.0:
            raise InvalidExponent(f"exp_b must be > -1 for an integrable weight, got {exp_b}")
    elif exp_b is not None:
        raise ValueError("generalized_laguerre rules take no exp_b")
    return _build_rule(kind, int(n), float(exp_a), None if exp_b is None else float(exp_b))


def radial_rule_ball(n: int, alpha: float, r0: float) -> RadialRule:
    """Rule for the inner-ball integral: integral_0^r0 g(r) r^(1-alpha) dr.

    Uses Gauss-Jacobi with (a, b) = (0, 1-alpha) under the affine map
    r = r0 (x+1)/2; the Jacobian and the weight factor combine into
    (r0/2)^(2-alpha).
    """
    if not 0.0 < alpha < 2.0:
        raise ValueError(f"alpha must be in (0, 2), got {alpha}")
    if r0 <= 0.0:
        raise ValueError(f"r0 must be > 0, got {r0}")
    base = gauss_rule("jacobi", n, 0.0, 1.0 - alpha)
    nodes_r = r0 * (base.nodes + 1.0) / 2.0
    weights_r = (r0 / 2.0) ** (2.0 - alpha) * base.weights
    nodes_r.setflags(write=False)
    weights_r.setflags(write=False)
    return RadialRule(nodes_r, weights_r, "jacobi_ball", {"alpha": alpha, "r0": r0, "n": n})


def radial_rule_halfline(n: int, alpha: float, lam: float) -> RadialRule:
    """Rule for integral_0^inf g(r) r^(1-alpha) e^(-lam r) dr.

    Generalized Gauss-Laguerre with a = 1-alpha under s = lam*r:
    nodes s_i/lam, weights w_i / lam^(2-alpha).
    """
    if not 0.0 < alpha < 2.0:
        raise ValueError(f"alpha must be in (0, 2), got {alpha}")
    if lam <= 0.0:
        raise LambdaNonPositive(f"tempering factor must be > 0, got {lam}")
    base = gauss_rule("generalized_laguerre", n, 1.0 - alpha)
    nodes_r = base.nodes / lam
    weights_r = base.weights * exp(-(2.0 - alpha) * log(lam))
    nodes_r.setflags(write=False)
    weights_r.setflags(write=False)
    return RadialRule(nodes_r, weights_r, "laguerre_halfline", {"alpha": alpha, "lam": lam, "n": n})


def radial_rule_time(n: int, gamma: float) -> RadialRule:
    """Rule for integral_0^1 g(tau) tau^(-gamma) d tau.

    Gauss-Jacobi with (a, b) = (0, -gamma) mapped to (0, 1) via
    tau = (x+1)/2, which contributes the factor 2^(gamma-1).
    """
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must be in (0, 1), got {gamma}")
    base = gauss_rule("jacobi", n, 0.0, -gamma)
    nodes_r = (base.nodes + 1.0) / 2.0
    weights_r = 2.0 ** (gamma - 1.0) * base.weights
    nodes_r.setflags(write=False)
    weights_r.setflags(write=False)
    return RadialRule(nodes_r, weights_r, "jacobi_time", {"gamma": gamma, "n": n})
