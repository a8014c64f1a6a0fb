"""Seeded samplers for the Monte Carlo estimators.

The estimators need Beta(a, 1) and Gamma(shape, rate) radial draws, uniform
directions on the unit sphere, uniform points in the unit ball, and a
low-discrepancy (Sobol) direction source for the quasi-Monte Carlo variant.
Everything is keyed by an :class:`RngStream`, a counter-based generator
addressed by (seed, stream_id) so that substreams are reproducible
independently of evaluation order.
"""

from __future__ import annotations

import numpy as np
from scipy.stats import qmc
from scipy.special import ndtri

from .errors import DimensionUnsupported, NonPositiveRate, NonPositiveShape

__all__ = [
    "RngStream",
    "SobolDirections",
    "sample_beta_one",
    "sample_gamma",
    "sample_sphere",
    "sample_ball",
    "sample_cube",
    "sobol_sphere",
]

_MASK64 = (1 << 64) - 1


def _splitmix64(z: int) -> int:
    """One round of the splitmix64 finalizer; mixes substream keys."""
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


class RngStream:
    """A named substream of a counter-based (Philox) random generator.

    Identical (seed, stream_id) pairs replay identical sample sequences;
    distinct stream_ids are statistically independent.  ``child(k)`` derives
    a new stream deterministically, so per-epoch or per-point substreams do
    not depend on the order in which work is scheduled.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id,))
        self.generator = np.random.Generator(np.random.Philox(ss))

    def child(self, k: int) -> "RngStream":
        return RngStream(self.seed, _splitmix64(self.stream_id ^ _splitmix64(k & _MASK64)))

    def __repr__(self) -> str:  # pragma: no cover
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"


def _open_uniform(rng: RngStream, count: int) -> np.ndarray:
    """Uniform draws strictly inside (0, 1)."""
    u = rng.generator.random(count)
    while True:  # exact 0 has probability 2^-53 per draw
        zero = u == 0.0
        if not zero.any():
            return u
        u[zero] = rng.generator.random(int(zero.sum()))


def sample_beta_one(a: float, count: int, rng: RngStream) -> np.ndarray:
    """Beta(a, 1) samples via the inverse CDF u^(1/a); strictly in (0, 1)."""
    if a <= 0.0:
        raise NonPositiveShape(f"Beta shape must be > 0, got {a}")
    return _open_uniform(rng, count) ** (1.0 / a)


def sample_gamma(shape: float, rate: float, count: int, rng: RngStream) -> np.ndarray:
    """Gamma(shape, rate) samples, mean shape/rate.

    Marsaglia-Tsang squeeze for shape >= 1; the shape < 1 case draws at
    shape + 1 and multiplies by U^(1/shape).
    """
    if shape <= 0.0:
        raise NonPositiveShape(f"Gamma shape must be > 0, got {shape}")
    if rate <= 0.0:
        raise NonPositiveRate(f"Gamma rate must be > 0, got {rate}")

    boosted = shape < 1.0
    s = shape + 1.0 if boosted else shape
    d = s - 1.0 / 3.0
    c = 1.0 / np.sqrt(9.0 * d)

    out = np.empty(count)
    filled = 0
    gen = rng.generator
    while filled < count:
        m = count - filled
        x = gen.standard_normal(m)
        v = (1.0 + c * x) ** 3
        u = gen.random(m)
        ok = v > 0.0
        lv = np.log(v, out=np.full(m, -np.inf), where=ok)
        accept = ok & (np.log(u) < 0.5 * x * x + d * (1.0 - v + lv))
        k = int(accept.sum())
        out[filled : filled + k] = d * v[accept]
        filled += k

    if boosted:
        out *= _open_uniform(rng, count) ** (1.0 / shape)
    return out / rate


def sample_sphere(d: int, count: int, rng: RngStream) -> np.ndarray:
    """Uniform directions on S^(d-1): normalized standard Gaussian vectors."""
    if d < 1:
        raise ValueError(f"dimension must be >= 1, got {d}")
    g = rng.generator.standard_normal((count, d))
    norms = np.linalg.norm(g, axis=1)
    while True:  # a numerically-zero vector is resampled internally
        bad = norms < 1e-300
        if not bad.any():
            break
        g[bad] = rng.generator.standard_normal((int(bad.sum()), d))
        norms[bad] = np.linalg.norm(g[bad], axis=1)
    return g / norms[:, None]


def sample_ball(d: int, count: int, rng: RngStream) -> np.ndarray:
    """Uniform points in the unit ball: sphere direction times U^(1/d)."""
    xi = sample_sphere(d, count, rng)
    u = rng.generator.random(count)
    return xi * (u ** (1.0 / d))[:, None]


def sample_cube(d: int, count: int, rng: RngStream) -> np.ndarray:
    """Uniform points on the cube [-1/sqrt(d), 1/sqrt(d)]^d.

    The cube is inscribed in the unit ball, so every point is interior
    (corners touch the sphere with probability zero).  Used as the
    evaluation-point law for estimator-accuracy checks: it keeps points away
    from the boundary ring where the hard-constraint envelope's curvature,
    and with it the estimators' relative noise, blows up.
    """
    if d < 1:
        raise ValueError(f"dimension must be >= 1, got {d}")
    half = 1.0 / np.sqrt(d)
    return rng.generator.uniform(-half, half, (count, d))


def sobol_sphere(d: int, count: int, skip: int = 0) -> np.ndarray:
    """Deterministic low-discrepancy directions on S^(d-1).

    Sobol points in (0,1)^d are mapped through the standard-normal inverse
    CDF and normalized.  The raw sequence starts with two points that have
    no direction image -- all-zeros (inverse CDF diverges) and all-halves
    (maps to the origin) -- so those are always skipped; every later point
    maps to a nonzero vector.  ``skip`` offsets within the usable sequence.
    """
    if d < 2:
        raise ValueError(f"sobol_sphere requires d >= 2, got {d}")
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if skip < 0:
        raise ValueError(f"skip must be >= 0, got {skip}")
    try:
        eng = qmc.Sobol(d, scramble=False)
    except ValueError as err:
        raise DimensionUnsupported(str(err)) from err
    eng.fast_forward(2 + skip)
    pts = eng.random(count)
    g = ndtri(pts)
    return g / np.linalg.norm(g, axis=1, keepdims=True)


class SobolDirections:
    """A stateful direction source that walks the Sobol sequence.

    Drop-in alternative to an RngStream for the quadrature estimators'
    sphere directions (the quasi-Monte Carlo variant).  Consecutive draws
    continue the sequence, so repeated estimator calls see fresh points
    while a fresh instance replays the identical stream.
    """

    def __init__(self, d: int, skip: int = 0):
        self.d = d
        self.skip = skip

    def directions(self, count: int) -> np.ndarray:
        out = sobol_sphere(self.d, count, self.skip)
        self.skip += count
        return out
