"""Fully-connected tanh network with hand-rolled gradients and hard constraints.

The architecture is fixed and small (a few dense layers, scalar output), so
reverse-mode gradients are written out layer by layer instead of pulling in an
autodiff framework.  Three gradient operations cover everything the residual
estimators need: gradients with respect to parameters, gradients with respect
to inputs, and the parameter gradient of a directional input derivative (for
advection terms).  All arithmetic is in 64-bit floats.

Hard constraints multiply the raw network output by a factor that vanishes on
the boundary (and at t=0 for time-dependent problems), so boundary and initial
conditions hold exactly rather than through penalty terms.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import BadShape
from .sampling import RngStream

VALID_WRAPPER_KINDS = ("none", "spatial_ball", "spacetime_ball")


@dataclass
class MlpModel:
    """Weights and biases of a fully-connected network.

    Hidden layers use tanh; the output layer is linear.  ``weights[i]`` has
    shape ``(layer_sizes[i], layer_sizes[i+1])``.  The training loop owns the
    single mutable copy; everything else treats a model as a value.
    """

    layer_sizes: tuple
    weights: list = field(repr=False)
    biases: list = field(repr=False)

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise BadShape(f"need at least 2 layers, got sizes {sizes}")
        if any(s < 1 for s in sizes):
            raise BadShape(f"layer sizes must be positive, got {sizes}")
        if len(self.weights) != len(sizes) - 1 or len(self.biases) != len(sizes) - 1:
            raise BadShape("weights/biases do not match layer count")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (sizes[i], sizes[i + 1]) or b.shape != (sizes[i + 1],):
                raise BadShape(
                    f"layer {i}: weight {w.shape} / bias {b.shape} inconsistent "
                    f"with sizes {sizes}"
                )
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise BadShape(f"layer {i}: non-finite parameters")

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "MlpModel":
        return MlpModel(
            self.layer_sizes,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
        )


@dataclass
class MlpGrads:
    """Parameter-shaped gradient container mirroring MlpModel's layout."""

    weights: list
    biases: list

    def scaled(self, c: float) -> "MlpGrads":
        return MlpGrads([c * w for w in self.weights], [c * b for b in self.biases])

    def add_(self, other: "MlpGrads") -> "MlpGrads":
        for w, ow in zip(self.weights, other.weights):
            w += ow
        for b, ob in zip(self.biases, other.biases):
            b += ob
        return self


def zero_grads(model: MlpModel) -> MlpGrads:
    return MlpGrads(
        [np.zeros_like(w) for w in model.weights],
        [np.zeros_like(b) for b in model.biases],
    )


def flatten_params(model: MlpModel) -> np.ndarray:
    """Concatenate all parameters into one vector (weights then bias, per layer)."""
    parts = []
    for w, b in zip(model.weights, model.biases):
        parts.append(w.ravel())
        parts.append(b)
    return np.concatenate(parts)


def flatten_grads(grads: MlpGrads) -> np.ndarray:
    parts = []
    for w, b in zip(grads.weights, grads.biases):
        parts.append(w.ravel())
        parts.append(b)
    return np.concatenate(parts)


def set_params(model: MlpModel, vec: np.ndarray) -> None:
    """Write a flat parameter vector back into the model arrays in place."""
    if vec.shape != (model.n_params,):
        raise BadShape(f"expected {model.n_params} parameters, got shape {vec.shape}")
    pos = 0
    for w, b in zip(model.weights, model.biases):
        w[...] = vec[pos : pos + w.size].reshape(w.shape)
        pos += w.size
        b[...] = vec[pos : pos + b.size]
        pos += b.size


def mlp_init(layer_sizes, rng: RngStream) -> MlpModel:
    """Glorot-uniform weights, zero biases; deterministic per stream."""
    sizes = tuple(int(s) for s in layer_sizes)
    if len(sizes) < 2:
        raise BadShape(f"need at least 2 layers, got sizes {sizes}")
    if any(s < 1 for s in sizes):
        raise BadShape(f"layer sizes must be positive, got {sizes}")
    gen = rng.generator
    weights = []
    biases = []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (n_in + n_out))
        weights.append(gen.uniform(-limit, limit, (n_in, n_out)))
        biases.append(np.zeros(n_out))
    return MlpModel(sizes, weights, biases)


@dataclass(frozen=True)
class ConstraintWrapper:
    """A model together with the multiplicative hard-constraint factor.

    kind "none" passes the raw output through.  "spatial_ball" multiplies by
    ReLU(1 - ||x||^2), which is exactly zero on and outside the unit sphere.
    "spacetime_ball" expects inputs laid out as [x, t] with t in the last
    column and multiplies by t * ReLU(1 - ||x||^2), pinning both the boundary
    and the initial condition.
    """

    kind: str
    model: MlpModel

    def __post_init__(self):
        if self.kind not in VALID_WRAPPER_KINDS:
            raise ValueError(f"unknown wrapper kind {self.kind!r}")
        if self.model.layer_sizes[-1] != 1:
            raise BadShape(
                f"wrapper needs scalar output, got width {self.model.layer_sizes[-1]}"
            )

    @property
    def input_width(self) -> int:
        return self.model.layer_sizes[0]


def _check_input(wrapper: ConstraintWrapper, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != wrapper.input_width:
        raise BadShape(
            f"expected input of shape (batch, {wrapper.input_width}), got {x.shape}"
        )
    return x


def _constraint_factor(wrapper: ConstraintWrapper, x: np.ndarray):
    """Return (rho, relu_arg) for a batch; relu_arg is None for kind 'none'."""
    if wrapper.kind == "none":
        return np.ones(x.shape[0]), None
    if wrapper.kind == "spatial_ball":
        s = 1.0 - np.sum(x * x, axis=1)
        return np.maximum(s, 0.0), s
    # spacetime_ball: t is the last column
    s = 1.0 - np.sum(x[:, :-1] ** 2, axis=1)
    return x[:, -1] * np.maximum(s, 0.0), s


def _forward_cached(model: MlpModel, x: np.ndarray):
    """Forward pass caching every layer's activation h_0..h_L."""
    hs = [x]
    h = x
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        a = h @ w + b
        h = np.tanh(a) if i < last else a
        hs.append(h)
    return hs


def forward(wrapper: ConstraintWrapper, x: np.ndarray) -> np.ndarray:
    """Wrapped scalar outputs for a batch of inputs.

    Rows where the constraint factor is zero are short-circuited: their output
    is exactly 0.0 without evaluating the network (the factor annihilates the
    raw value).  Only the active rows go through the dense layers.
    """
    x = _check_input(wrapper, x)
    rho, _ = _constraint_factor(wrapper, x)
    out = np.zeros(x.shape[0])
    active = rho != 0.0
    if np.any(active):
        hs = _forward_cached(wrapper.model, x[active])
        out[active] = rho[active] * hs[-1][:, 0]
    return out


def grad_params(
    wrapper: ConstraintWrapper, x: np.ndarray, upstream: np.ndarray
) -> MlpGrads:
    """Gradient of sum_b upstream_b * output_b with respect to all parameters.

    The constraint factor multiplies the raw output, so it simply scales each
    row's upstream weight; rows with a zero factor contribute nothing and are
    skipped entirely.
    """
    x = _check_input(wrapper, x)
    upstream = np.asarray(upstream, dtype=float)
    if upstream.shape != (x.shape[0],):
        raise BadShape(f"upstream shape {upstream.shape} != ({x.shape[0]},)")
    rho, _ = _constraint_factor(wrapper, x)
    scale = upstream * rho
    active = scale != 0.0
    grads = zero_grads(wrapper.model)
    if not np.any(active):
        return grads
    model = wrapper.model
    hs = _forward_cached(model, x[active])
    g = scale[active][:, None]  # adjoint of h_L (linear output layer)
    for i in range(len(model.weights) - 1, -1, -1):
        grads.weights[i] += hs[i].T @ g
        grads.biases[i] += g.sum(axis=0)
        if i > 0:
            g = (g @ model.weights[i].T) * (1.0 - hs[i] ** 2)
    return grads


def _grad_raw_input(model: MlpModel, hs: list) -> np.ndarray:
    """d raw / d input for every batch row, from a cached forward pass."""
    g = np.ones((hs[0].shape[0], 1))
    for i in range(len(model.weights) - 1, -1, -1):
        g = g @ model.weights[i].T
        if i > 0:
            g = g * (1.0 - hs[i] ** 2)
    return g


def _grad_rho(wrapper: ConstraintWrapper, x: np.ndarray, relu_arg) -> np.ndarray:
    """Gradient of the constraint factor, batch-shaped like the input.

    Uses subgradient 0 at the ReLU kink (the boundary sphere), which interior
    sampling never hits.
    """
    drho = np.zeros_like(x)
    if wrapper.kind == "none":
        return drho
    inside = relu_arg > 0.0
    if wrapper.kind == "spatial_ball":
        drho[inside] = -2.0 * x[inside]
    else:
        t = x[:, -1]
        drho[inside, :-1] = -2.0 * t[inside, None] * x[inside, :-1]
        drho[inside, -1] = relu_arg[inside]
    return drho


def grad_input(wrapper: ConstraintWrapper, x: np.ndarray) -> np.ndarray:
    """Gradient of the wrapped output with respect to the inputs, per row.

    Product rule: rho * d(raw)/dx + raw * d(rho)/dx.  Strictly outside the
    ball both terms vanish identically, so those rows are short-circuited.
    For the spacetime wrapper the last column carries d/dt, which is nonzero
    at t=0 (the factor t has unit slope there).
    """
    x = _check_input(wrapper, x)
    rho, relu_arg = _constraint_factor(wrapper, x)
    out = np.zeros_like(x)
    if wrapper.kind == "none":
        active = np.ones(x.shape[0], dtype=bool)
    else:
        active = relu_arg > 0.0
    if not np.any(active):
        return out
    model = wrapper.model
    xa = x[active]
    hs = _forward_cached(model, xa)
    raw = hs[-1][:, 0]
    draw = _grad_raw_input(model, hs)
    drho = _grad_rho(wrapper, x, relu_arg)[active]
    out[active] = rho[active][:, None] * draw + raw[:, None] * drho
    return out


def grad_params_dirderiv(
    wrapper: ConstraintWrapper,
    x: np.ndarray,
    direction: np.ndarray,
    upstream: np.ndarray,
) -> MlpGrads:
    """Parameter gradient of sum_b upstream_b * (direction_b . d out_b / d x_b).

    Needed when an advection term v . grad u enters the residual: the loss
    then depends on the parameters through an input derivative of the network.
    The directional derivative is computed with a forward (tangent) pass and
    the parameter gradient with a reverse pass that carries a dual pair of
    adjoints, one for the primal activations and one for the tangents.

    ``direction`` has the full input width; for spacetime inputs a spatial
    advection velocity is padded with a zero time component by the caller.
    """
    x = _check_input(wrapper, x)
    direction = np.asarray(direction, dtype=float)
    if direction.shape != x.shape:
        raise BadShape(f"direction shape {direction.shape} != {x.shape}")
    upstream = np.asarray(upstream, dtype=float)
    if upstream.shape != (x.shape[0],):
        raise BadShape(f"upstream shape {upstream.shape} != ({x.shape[0]},)")

    rho, relu_arg = _constraint_factor(wrapper, x)
    if wrapper.kind == "none":
        active = np.ones(x.shape[0], dtype=bool)
    else:
        # Strictly outside the ball rho and grad rho both vanish, and so does
        # every parameter sensitivity of the wrapped directional derivative.
        active = relu_arg > 0.0
    grads = zero_grads(wrapper.model)
    if not np.any(active):
        return grads

    model = wrapper.model
    xa = x[active]
    va = direction[active]
    ua = upstream[active]
    rho_a = rho[active]
    drho = _grad_rho(wrapper, x, relu_arg)[active]
    v_dot_drho = np.sum(va * drho, axis=1)

    last = len(model.weights) - 1
    hs = [xa]
    hdots = [va]
    adots = []
    h, hdot = xa, va
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        a = h @ w + b
        adot = hdot @ w
        if i < last:
            h = np.tanh(a)
            hdot = (1.0 - h**2) * adot
        else:
            h = a
            hdot = adot
        hs.append(h)
        hdots.append(hdot)
        adots.append(adot)

    # d out/dx . v = (v . grad rho) * raw + rho * (v . grad raw); the first
    # term is an ordinary parameter gradient of raw with reweighted upstream,
    # the second needs the dual-adjoint sweep below.
    g_primal = (ua * v_dot_drho)[:, None]  # adjoint of h_L from the raw term
    g_tangent = (ua * rho_a)[:, None]  # adjoint of hdot_L
    for i in range(last, -1, -1):
        if i == last:
            a_hat, a_tld = g_primal, g_tangent
        else:
            deriv = 1.0 - hs[i + 1] ** 2
            a_hat = g_primal * deriv + g_tangent * (-2.0 * hs[i + 1] * deriv) * adots[i]
            a_tld = g_tangent * deriv
        grads.weights[i] += hs[i].T @ a_hat + hdots[i].T @ a_tld
        grads.biases[i] += a_hat.sum(axis=0)
        g_primal = a_hat @ model.weights[i].T
        g_tangent = a_tld @ model.weights[i].T
    return grads


def save_model(path, wrapper: ConstraintWrapper, header: dict | None = None) -> None:
    """Write a checkpoint: layer shapes, row-major parameter arrays, and a
    JSON header echoing whatever run metadata the caller passes (seed, config).
    """
    model = wrapper.model
    arrays = {"layer_sizes": np.asarray(model.layer_sizes)}
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        arrays[f"w{i}"] = w
        arrays[f"b{i}"] = b
    meta = {"kind": wrapper.kind}
    if header:
        meta["header"] = header
    arrays["meta_json"] = np.frombuffer(
        json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8
    )
    np.savez(path, **arrays)


def load_model(path):
    """Read a checkpoint written by save_model; returns (wrapper, header)."""
    with np.load(path) as data:
        sizes = tuple(int(s) for s in data["layer_sizes"])
        weights = [data[f"w{i}"] for i in range(len(sizes) - 1)]
        biases = [data[f"b{i}"] for i in range(len(sizes) - 1)]
        meta = json.loads(bytes(data["meta_json"]).decode())
    model = MlpModel(sizes, weights, biases)
    wrapper = ConstraintWrapper(meta["kind"], model)
    return wrapper, meta.get("header", {})
