"""Loss assembly, Adam with linear learning-rate decay, and the training loops.

Forward mode fits a hard-constrained network to the PDE by minimizing the
mean squared estimator residual at freshly sampled interior points.  Inverse
mode additionally trains one operator coefficient (alpha, lambda, or gamma)
through the resampling-free importance-weighted estimators, with a sparse
observation loss anchoring the solution.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigMismatch, DimensionMismatch, NonFiniteLoss, ShapeMismatch
from .network import (
    ConstraintWrapper,
    MlpGrads,
    flatten_grads,
    flatten_params,
    forward,
    grad_input,
    grad_params,
    grad_params_dirderiv,
    mlp_init,
    set_params,
)
from .operators import (
    OperatorConfig,
    Stencil,
    build_spatial_rule,
    inverse_quad_tempered_stencil,
    inverse_tempered_stencil,
    mc_time_stencil,
    quad_time_stencil,
    residual_stencil,
)
from .problems import (
    ProblemSpec,
    dyda_forcing,
    eval_exact,
    eval_exact_grad,
    make_test_set,
    mc_forcing,
    rel_l1,
    rel_l2,
)
from .quadrature import RadialRule, radial_rule_halfline, radial_rule_time
from .sampling import RngStream, SobolDirections, sample_ball, sample_sphere

VARIANTS = ("mc", "quadrature", "qmc")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# Radial samples (or nodes) for the forcing target, independent of the
# training-side estimator's batch size.
FORCING_SAMPLES = 1024

# Default priors for trainable coefficients when no bounds are configured.
# The importance-weighted estimators need a finite upper bound strictly
# inside the admissible interval, so the open theoretical ranges (0, 2) and
# (0, 1) are shrunk by a hair.
ALPHA_BOUNDS = (0.01, 1.99)
GAMMA_BOUNDS = (0.01, 0.99)

# Substream ids carved off the run seed, so reordering one consumer never
# shifts the draws of another.
_STREAM_INIT = 0
_STREAM_TEST = 1
_STREAM_EPOCH = 2
_STREAM_FORCING = 3
_STREAM_DATA = 4
_STREAM_EST = 5
_STREAM_STENCIL = 6


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings shared by the forward and inverse loops.

    ``w_initial`` is accepted for completeness but the hard constraint makes
    the initial-condition loss identically zero, so it never contributes.
    ``epochs = 0`` is allowed and means "evaluate the freshly initialized
    model without taking a step".
    """

    epochs: int
    lr0: float = 1e-3
    n_residual: int = 100
    n_data: int = 100
    w_initial: float = 1.0
    w_residual: float = 1.0
    w_data: float = 1.0
    variant: str = "mc"
    hidden: tuple = (128, 128, 128, 128)
    n_test: int = 20000
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if not self.lr0 > 0.0:
            raise ValueError(f"lr0 must be > 0, got {self.lr0}")
        if self.n_residual < 1:
            raise ValueError(f"n_residual must be >= 1, got {self.n_residual}")
        if self.n_data < 1:
            raise ValueError(f"n_data must be >= 1, got {self.n_data}")
        for name in ("w_initial", "w_residual", "w_data"):
            w = getattr(self, name)
            if not (math.isfinite(w) and w >= 0.0):
                raise ValueError(f"{name} must be a finite weight >= 0, got {w}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown estimator variant {self.variant!r}")
        hidden = tuple(int(h) for h in self.hidden)
        if not hidden or any(h < 1 for h in hidden):
            raise ValueError(f"hidden layer sizes must be positive, got {self.hidden}")
        object.__setattr__(self, "hidden", hidden)
        if self.n_test < 1:
            raise ValueError(f"n_test must be >= 1, got {self.n_test}")


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    """lr0 * (1 - epoch/epochs): linear decay hitting zero at the last epoch."""
    if epoch < 1:
        raise ValueError(f"epoch must be >= 1, got {epoch}")
    if cfg.epochs == 0:
        return 0.0
    return cfg.lr0 * max(0.0, 1.0 - epoch / cfg.epochs)


@dataclass
class AdamState:
    """First and second moment accumulators."""

    m: np.ndarray
    v: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n))


def adam_step(params, grads, state: AdamState, epoch: int, cfg: TrainConfig):
    """One bias-corrected Adam update with the linearly decayed step size.

    Returns (new params, state); the moment accumulators are updated in
    place, the parameter vector is a fresh array.
    """
    params = np.asarray(params, dtype=float)
    grads = np.asarray(grads, dtype=float)
    if grads.shape != params.shape:
        raise ShapeMismatch(
            f"gradient shape {grads.shape} != parameter shape {params.shape}"
        )
    if state.m.shape != params.shape or state.v.shape != params.shape:
        raise ShapeMismatch(
            f"Adam state shape {state.m.shape} != parameter shape {params.shape}"
        )
    lr = learning_rate(cfg, epoch)
    state.m = ADAM_BETA1 * state.m + (1.0 - ADAM_BETA1) * grads
    state.v = ADAM_BETA2 * state.v + (1.0 - ADAM_BETA2) * grads * grads
    mhat = state.m / (1.0 - ADAM_BETA1**epoch)
    vhat = state.v / (1.0 - ADAM_BETA2**epoch)
    return params - lr * mhat / (np.sqrt(vhat) + ADAM_EPS), state


# --- trainable coefficient parameterizations --------------------------------


# Deep in sigmoid saturation the update lo + s*(hi-lo) would round exactly
# onto the bound (s*(hi-lo) falls below half an ulp of lo); pinning s away
# from 0 and 1 keeps the value strictly inside for every finite raw.  The
# gradient is already ~1e-15 there, so the clamp changes nothing trainable.
_SIGMOID_FLOOR = 1e-15


def _sigmoid(z: float) -> float:
    if z >= 0.0:
        s = 1.0 / (1.0 + math.exp(-z))
    else:
        e = math.exp(z)
        s = e / (1.0 + e)
    return min(max(s, _SIGMOID_FLOOR), 1.0 - _SIGMOID_FLOOR)


@dataclass
class BoundedCoeff:
    """A trainable coefficient squashed into (lo, hi) by a sigmoid.

    raw = 0 sits at the exact midpoint, and any finite raw stays strictly
    inside the bounds, so out-of-range values cannot occur by construction.
    """

    raw: float
    lo: float
    hi: float

    def __post_init__(self):
        if not (
            math.isfinite(self.lo) and math.isfinite(self.hi) and self.lo < self.hi
        ):
            raise ValueError(f"need finite bounds lo < hi, got ({self.lo}, {self.hi})")
        if not math.isfinite(self.raw):
            raise ValueError(f"raw must be finite, got {self.raw}")

    @property
    def value(self) -> float:
        return self.lo + _sigmoid(self.raw) * (self.hi - self.lo)

    @property
    def dvalue_draw(self) -> float:
        """d value / d raw."""
        s = _sigmoid(self.raw)
        return s * (1.0 - s) * (self.hi - self.lo)


@dataclass
class PositiveCoeff:
    """A trainable coefficient kept positive by an exponential map.

    The exponent is clamped to +-700 so the value can neither underflow to
    zero nor overflow to inf for any finite raw.
    """

    raw: float

    def __post_init__(self):
        if not math.isfinite(self.raw):
            raise ValueError(f"raw must be finite, got {self.raw}")

    @property
    def value(self) -> float:
        return math.exp(min(max(self.raw, -700.0), 700.0))

    @property
    def dvalue_draw(self) -> float:
        return math.exp(min(max(self.raw, -700.0), 700.0))


def make_trainable_coeff(name: str, lo=None, hi=None, init=None):
    """Default parameterization for one trainable operator coefficient.

    alpha and gamma get sigmoid bounds (defaults ALPHA_BOUNDS / GAMMA_BOUNDS)
    and start at the midpoint unless ``init`` is given; lambda needs no prior
    beyond positivity, so it is exp-parameterized with init 1 by default and
    accepts no bounds.
    """
    if name == "lambda":
        if lo is not None or hi is not None:
            raise ValueError("lambda is positivity-constrained only, bounds do not apply")
        init = 1.0 if init is None else float(init)
        if init <= 0.0:
            raise ValueError(f"lambda init must be > 0, got {init}")
        return PositiveCoeff(math.log(init))
    if name == "alpha":
        default_lo, default_hi = ALPHA_BOUNDS
    elif name == "gamma":
        default_lo, default_hi = GAMMA_BOUNDS
    else:
        raise ValueError(f"unknown trainable coefficient {name!r}")
    lo = default_lo if lo is None else float(lo)
    hi = default_hi if hi is None else float(hi)
    if init is None:
        return BoundedCoeff(0.0, lo, hi)
    init = float(init)
    if not lo < init < hi:
        raise ValueError(f"init {init} must lie strictly inside ({lo}, {hi})")
    p = (init - lo) / (hi - lo)
    return BoundedCoeff(math.log(p / (1.0 - p)), lo, hi)


# --- model plumbing ----------------------------------------------------------


class ModelField:
    """Callable view of a wrapped network, with the .grad the estimators expect."""

    def __init__(self, wrapper: ConstraintWrapper):
        self.wrapper = wrapper

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return forward(self.wrapper, x)

    def grad(self, x: np.ndarray) -> np.ndarray:
        return grad_input(self.wrapper, x)


def _as_batch(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError(f"need a nonempty batch of points, got shape {x.shape}")
    return x


# --- losses -------------------------------------------------------------------


def _inverse_residual_stencil(
    x: np.ndarray,
    cfg_op: OperatorConfig,
    unknown: str,
    coeff,
    variant: str,
    rng: RngStream,
    t=None,
    rule: RadialRule | None = None,
    time_rule: RadialRule | None = None,
    directions=None,
) -> Stencil:
    """Merged stencil whose derivative arrays cover the trainable coefficient.

    Nothing the estimator samples depends on the coefficient value: radii
    come from Gamma(2 - alpha_H, 1) draws (mc) or fixed alpha_H-weighted
    Gauss-Laguerre nodes (quadrature/qmc), lags from Beta(1 - gamma_H, 1)
    draws, with the current value entering only through importance weights,
    constants, and (for lambda) the shift scaling of the points.
    """
    b, d = x.shape

    if unknown == "gamma":
        src = directions if (variant == "qmc" and directions is not None) else rng
        spatial = residual_stencil(
            x, replace(cfg_op, gamma=None, lambda_t=0.0), variant, src, rule=rule
        )
        time_dep = True
    else:
        if unknown == "alpha" and cfg_op.lambda_x <= 0.0:
            raise ConfigMismatch(
                "the resampling-free spatial estimator needs a tempered "
                "operator (lambda_x > 0)"
            )
        alpha = coeff.value if unknown == "alpha" else cfg_op.alpha
        alpha_h = coeff.hi if unknown == "alpha" else cfg_op.alpha
        lam = coeff.value if unknown == "lambda" else cfg_op.lambda_x
        if variant == "mc":
            spatial = inverse_tempered_stencil(
                x,
                alpha,
                alpha_h,
                lam,
                cfg_op.n_radial,
                rng,
                epsilon=cfg_op.epsilon,
                with_grads=True,
            )
        else:
            if rule is None:
                rule = radial_rule_halfline(cfg_op.n_radial, alpha_h, 1.0)
            spatial = inverse_quad_tempered_stencil(
                x,
                alpha,
                alpha_h,
                lam,
                rule,
                directions if directions is not None else rng,
                with_grads=True,
            )
        spatial.coefs *= cfg_op.c
        spatial.dcoef_dalpha *= cfg_op.c
        spatial.dcoef_dlam *= cfg_op.c
        time_dep = cfg_op.gamma is not None

    if not time_dep:
        if t is not None:
            raise ConfigMismatch("times were supplied but the operator has no gamma")
        return spatial

    if t is None:
        raise ConfigMismatch("the operator has a time order gamma but no times given")
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if t.shape[0] != b:
        raise DimensionMismatch(f"{b} points but {t.shape[0]} times")
    if unknown == "gamma":
        # gamma_h near 1 makes the Beta lags underflow-prone; floor them.
        ts = mc_time_stencil(
            t, coeff.value, coeff.hi, cfg_op.n_radial, rng,
            with_grads=True, epsilon=cfg_op.epsilon,
        )
    elif variant == "mc":
        ts = mc_time_stencil(t, cfg_op.gamma, cfg_op.gamma, cfg_op.n_radial, rng)
    else:
        if time_rule is None:
            time_rule = radial_rule_time(cfg_op.n_radial, cfg_op.gamma)
        ts = quad_time_stencil(t, cfg_op.gamma, time_rule)
    temper = np.exp(cfg_op.lambda_t * (ts.times - t[:, None]))
    tcoefs = ts.coefs * temper

    k_sp = spatial.coefs.shape[1]
    k_t = tcoefs.shape[1]
    points = np.empty((b, k_sp + k_t, d + 1))
    points[:, :k_sp, :d] = spatial.points
    points[:, :k_sp, d] = t[:, None]
    points[:, k_sp:, :d] = x[:, None, :]
    points[:, k_sp:, d] = ts.times
    coefs = np.concatenate([spatial.coefs, tcoefs], axis=1)

    dalpha = dlam = dpts = dgamma = None
    if unknown == "alpha":
        dalpha = np.zeros_like(coefs)
        dalpha[:, :k_sp] = spatial.dcoef_dalpha
    elif unknown == "lambda":
        dlam = np.zeros_like(coefs)
        dlam[:, :k_sp] = spatial.dcoef_dlam
        dpts = np.zeros_like(points)
        dpts[:, :k_sp, :d] = spatial.dpoints_dlam
    else:
        dgamma = np.zeros_like(coefs)
        dgamma[:, k_sp:] = ts.dcoef_dgamma * temper
    return Stencil(points, coefs, dalpha, dlam, dpts, dgamma)


def residual_loss(
    wrapper: ConstraintWrapper,
    x: np.ndarray,
    cfg_op: OperatorConfig,
    forcing,
    rng,
    variant: str = "mc",
    weight: float = 1.0,
    t=None,
    rule: RadialRule | None = None,
    time_rule: RadialRule | None = None,
    unknown: str | None = None,
    coeff=None,
    directions=None,
):
    """Weighted mean squared PDE residual with gradients.

    Returns (loss, parameter gradients, d loss / d raw); the last entry is
    None in forward mode.  In inverse mode ``unknown`` names the trainable
    operator coefficient ("alpha", "lambda" or "gamma") whose current
    parameterization is ``coeff``; its value then overrides the matching
    entry of ``cfg_op`` inside the estimator.  ``directions`` optionally
    supplies a quasi-random direction source for the qmc variant.
    """
    x = _as_batch(x)
    b, d = x.shape
    forcing = np.asarray(forcing, dtype=float)
    if forcing.shape != (b,):
        raise DimensionMismatch(f"forcing shape {forcing.shape} != ({b},)")
    if (unknown is None) != (coeff is None):
        raise ValueError("unknown and coeff must be given together")

    if unknown is None:
        src = directions if (variant == "qmc" and directions is not None) else rng
        st = residual_stencil(
            x, cfg_op, variant, src, t=t, rule=rule, time_rule=time_rule
        )
    else:
        st = _inverse_residual_stencil(
            x,
            cfg_op,
            unknown,
            coeff,
            variant,
            rng,
            t=t,
            rule=rule,
            time_rule=time_rule,
            directions=directions,
        )

    nb, k, width = st.points.shape
    flat = st.points.reshape(nb * k, width)
    vals = forward(wrapper, flat).reshape(nb, k)
    res = np.sum(st.coefs * vals, axis=1)

    z = None
    if cfg_op.v is not None and np.any(cfg_op.v != 0.0):
        if cfg_op.v.shape != (d,):
            raise DimensionMismatch(
                f"velocity has shape {cfg_op.v.shape}, points are {d}-dimensional"
            )
        if cfg_op.gamma is None:
            z = x
        else:
            z = np.column_stack([x, np.atleast_1d(np.asarray(t, dtype=float))])
        res = res + grad_input(wrapper, z)[:, :d] @ cfg_op.v
    res = res - forcing

    loss = weight * float(np.mean(res * res))
    upstream = (2.0 * weight / b) * res
    grads = grad_params(wrapper, flat, (upstream[:, None] * st.coefs).reshape(-1))
    if z is not None:
        vfull = np.zeros(z.shape[1])
        vfull[:d] = cfg_op.v
        grads.add_(
            grad_params_dirderiv(wrapper, z, np.broadcast_to(vfull, z.shape), upstream)
        )

    dloss_draw = None
    if unknown is not None:
        if unknown == "alpha":
            dres = np.sum(st.dcoef_dalpha * vals, axis=1)
        elif unknown == "gamma":
            dres = np.sum(st.dcoef_dgamma * vals, axis=1)
        else:
            dres = np.sum(st.dcoef_dlam * vals, axis=1)
            gin = grad_input(wrapper, flat).reshape(nb, k, width)
            dres = dres + np.sum(st.coefs * np.sum(gin * st.dpoints_dlam, axis=2), axis=1)
        dloss_draw = float(np.dot(upstream, dres)) * coeff.dvalue_draw
    return loss, grads, dloss_draw


def data_loss(wrapper: ConstraintWrapper, points, targets, weight: float = 1.0):
    """Weighted mean squared misfit to observed solution values."""
    points = _as_batch(points)
    targets = np.asarray(targets, dtype=float)
    if targets.shape != (points.shape[0],):
        raise DimensionMismatch(
            f"targets shape {targets.shape} != ({points.shape[0]},)"
        )
    misfit = forward(wrapper, points) - targets
    loss = weight * float(np.mean(misfit * misfit))
    grads = grad_params(wrapper, points, (2.0 * weight / points.shape[0]) * misfit)
    return loss, grads


# --- training loops -----------------------------------------------------------


@dataclass(frozen=True)
class TrainReport:
    """History, final errors and timing of one training run.

    evals_per_sec counts residual-point estimator evaluations (n_residual
    per epoch), the unit the experiment tables use for throughput.
    """

    seed: int
    variant: str
    epochs: int
    loss_history: np.ndarray
    lr_history: np.ndarray
    rel_l2: float
    rel_l1: float
    elapsed: float
    epochs_per_sec: float
    evals_per_sec: float
    coeff_name: str | None = None
    coeff_history: np.ndarray | None = None
    coeff_final: float | None = None
    coeff_error: float | None = None


def _init_wrapper(problem: ProblemSpec, cfg: TrainConfig) -> ConstraintWrapper:
    width = problem.d + (1 if problem.time_dependent else 0)
    kind = "spacetime_ball" if problem.time_dependent else "spatial_ball"
    model = mlp_init(
        (width, *cfg.hidden, 1), RngStream(cfg.seed, _STREAM_INIT)
    )
    return ConstraintWrapper(kind, model)


def _test_inputs(problem: ProblemSpec, cfg: TrainConfig):
    x, times = make_test_set(problem, cfg.n_test, RngStream(cfg.seed, _STREAM_TEST))
    z = x if times is None else np.column_stack([x, times])
    return z, eval_exact(problem, z)


def _make_forcing(problem: ProblemSpec, cfg: TrainConfig, cfg_op: OperatorConfig):
    """A closure (x, t, rng) -> forcing values at the residual points.

    Analytic forcing is exact and ignores the stream; estimated forcing uses
    FORCING_SAMPLES fresh radial/direction pairs per call (quadrature
    variants fix the radial nodes once and refresh directions).
    """
    if problem.forcing == "analytic":
        alpha = cfg_op.alpha

        def analytic(x, t, rng):
            return dyda_forcing(problem, x, alpha=alpha)

        return analytic

    rule = time_rule = None
    if cfg.variant != "mc":
        rule = build_spatial_rule(replace(cfg_op, n_radial=FORCING_SAMPLES))
        if cfg_op.gamma is not None:
            time_rule = radial_rule_time(FORCING_SAMPLES, cfg_op.gamma)
    dirs = SobolDirections(problem.d) if cfg.variant == "qmc" else None

    def estimated(x, t, rng):
        src = dirs if dirs is not None else rng
        return mc_forcing(
            problem,
            x,
            cfg_op,
            src,
            n=FORCING_SAMPLES,
            t=t,
            variant=cfg.variant,
            rule=rule,
            time_rule=time_rule,
        )

    return estimated


def _rates(epochs: int, n_residual: int, elapsed: float):
    if epochs == 0 or elapsed <= 0.0:
        return 0.0, 0.0
    return epochs / elapsed, epochs * n_residual / elapsed


def train_forward(problem: ProblemSpec, cfg: TrainConfig, cfg_op=None):
    """Fit the network to the forward problem; returns (wrapper, report).

    Each epoch draws n_residual fresh interior points (paired with t uniform
    on (0, T] for time-dependent problems), recomputes the forcing target,
    and takes one Adam step on the weighted residual loss.  The hard
    constraint covers the boundary and initial conditions, so no other loss
    term is active.
    """
    if cfg_op is None:
        cfg_op = problem.operator
    if problem.time_dependent != (cfg_op.gamma is not None):
        raise ConfigMismatch(
            "operator and problem disagree about time dependence"
        )
    wrapper = _init_wrapper(problem, cfg)
    z_test, exact_test = _test_inputs(problem, cfg)

    rule = time_rule = None
    if cfg.variant != "mc":
        rule = build_spatial_rule(cfg_op)
        if cfg_op.gamma is not None:
            time_rule = radial_rule_time(cfg_op.n_radial, cfg_op.gamma)
    dirs = SobolDirections(problem.d) if cfg.variant == "qmc" else None
    forcing = _make_forcing(problem, cfg, cfg_op)

    root = RngStream(cfg.seed)
    epoch_root = root.child(_STREAM_EPOCH)
    forcing_root = root.child(_STREAM_FORCING)
    theta = flatten_params(wrapper.model)
    state = AdamState.zeros(theta.size)
    loss_hist = np.zeros(cfg.epochs)
    lr_hist = np.zeros(cfg.epochs)

    start = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        rng_e = epoch_root.child(epoch)
        x = sample_ball(problem.d, cfg.n_residual, rng_e)
        t = None
        if problem.time_dependent:
            t = problem.T * (1.0 - rng_e.generator.random(cfg.n_residual))
        f = forcing(x, t, forcing_root.child(epoch))
        loss, grads, _ = residual_loss(
            wrapper,
            x,
            cfg_op,
            f,
            rng_e,
            variant=cfg.variant,
            weight=cfg.w_residual,
            t=t,
            rule=rule,
            time_rule=time_rule,
            directions=dirs,
        )
        lr = learning_rate(cfg, epoch)
        if not math.isfinite(loss):
            raise NonFiniteLoss(epoch, lr, loss)
        theta, state = adam_step(theta, flatten_grads(grads), state, epoch, cfg)
        set_params(wrapper.model, theta)
        loss_hist[epoch - 1] = loss
        lr_hist[epoch - 1] = lr
    elapsed = time.perf_counter() - start

    pred = forward(wrapper, z_test)
    per_epoch, per_eval = _rates(cfg.epochs, cfg.n_residual, elapsed)
    report = TrainReport(
        seed=cfg.seed,
        variant=cfg.variant,
        epochs=cfg.epochs,
        loss_history=loss_hist,
        lr_history=lr_hist,
        rel_l2=rel_l2(pred, exact_test),
        rel_l1=rel_l1(pred, exact_test),
        elapsed=elapsed,
        epochs_per_sec=per_epoch,
        evals_per_sec=per_eval,
    )
    return wrapper, report


@dataclass(frozen=True)
class _TruthView:
    """Stand-in for a trainable coefficient, pinned at the data-generating value."""

    value: float
    hi: float | None = None


def _apply_to_exact(problem: ProblemSpec, st: Stencil) -> np.ndarray:
    b, k, width = st.points.shape
    vals = eval_exact(problem, st.points.reshape(b * k, width)).reshape(b, k)
    return np.sum(st.coefs * vals, axis=1)


def _inverse_forcing(problem, cfg, cfg_op, unknown, coeff, rule, time_rule, dirs):
    """Forcing for inverse runs, discretized exactly like the residual.

    The estimator that evaluates the network inside the residual also
    generates the forcing data: same radial rule or radial draws, same
    directions, same time lags, applied to the exact solution at the true
    coefficients.  Operator and data then agree exactly when the network hits
    the true solution at the true coefficient, so discretization error cannot
    tilt the recovered value -- the classical rule of discretizing the
    forward map and the observations consistently.  ``dirs`` must be the
    forcing's own direction source when the residual consumes a quasi-random
    walker; a shared fixed array or stream twin is fine otherwise.
    """
    if problem.forcing == "analytic":
        alpha = problem.operator.alpha

        def analytic(x, t, rng):
            return dyda_forcing(problem, x, alpha=alpha)

        return analytic

    fields = {"alpha": "alpha", "lambda": "lambda_x", "gamma": "gamma"}
    truth = _TruthView(
        getattr(problem.operator, fields[unknown]), getattr(coeff, "hi", None)
    )
    truth_op = replace(
        problem.operator, n_radial=cfg_op.n_radial, epsilon=cfg_op.epsilon
    )

    def estimated(x, t, rng):
        st = _inverse_residual_stencil(
            x,
            truth_op,
            unknown,
            truth,
            cfg.variant,
            rng,
            t=t,
            rule=rule,
            time_rule=time_rule,
            directions=dirs,
        )
        f = _apply_to_exact(problem, st)
        if truth_op.v is not None and np.any(truth_op.v != 0.0):
            d = x.shape[1]
            z = x if truth_op.gamma is None else np.column_stack(
                [x, np.atleast_1d(np.asarray(t, dtype=float))]
            )
            f = f + eval_exact_grad(problem, z)[:, :d] @ truth_op.v
        return f

    return estimated


def train_inverse(
    problem: ProblemSpec,
    cfg: TrainConfig,
    cfg_op: OperatorConfig,
    unknown: str,
    coeff=None,
    observations=None,
    truth=None,
):
    """Jointly train the network and one operator coefficient.

    ``cfg_op`` carries the coefficients the solver treats as known; the one
    named by ``unknown`` is replaced by the trainable value each epoch.  The
    forcing at the residual points comes from the problem's true operator --
    it is data -- evaluated with the residual's own discretization so that
    operator and data cancel exactly at the true coefficient (see
    ``_inverse_forcing``).  ``observations`` is a callable
    (count, rng) -> (points, values); by default fresh interior points are
    drawn each epoch and the exact solution is observed.  ``truth`` is the
    known true coefficient, used only for the report's relative L1 error.
    Returns (wrapper, coeff, report).
    """
    if unknown not in ("alpha", "lambda", "gamma"):
        raise ValueError(f"unknown coefficient must be alpha/lambda/gamma, got {unknown!r}")
    if coeff is None:
        coeff = make_trainable_coeff(unknown)
    if unknown == "gamma" and not problem.time_dependent:
        raise ConfigMismatch("gamma is trainable only for time-dependent problems")
    if problem.time_dependent != (cfg_op.gamma is not None) and unknown != "gamma":
        raise ConfigMismatch("operator and problem disagree about time dependence")

    wrapper = _init_wrapper(problem, cfg)
    z_test, exact_test = _test_inputs(problem, cfg)

    # The trainable-gamma time estimator only exists in Monte Carlo form; the
    # trainable alpha/lambda spatial estimator has a rule-based counterpart
    # whose fixed alpha_H nodes never move with the coefficient.  Its one
    # direction set is drawn once and shared across points and epochs, so the
    # discretized operator the coefficient sees is a fixed function.
    root = RngStream(cfg.seed)
    rule = time_rule = None
    dirs = SobolDirections(problem.d) if cfg.variant == "qmc" else None
    if cfg.variant != "mc":
        if unknown == "gamma":
            rule = build_spatial_rule(cfg_op)
        else:
            alpha_h = coeff.hi if unknown == "alpha" else cfg_op.alpha
            rule = radial_rule_halfline(cfg_op.n_radial, alpha_h, 1.0)
            if cfg.variant == "qmc":
                dirs = SobolDirections(problem.d).directions(cfg_op.n_radial)
            else:
                dirs = sample_sphere(
                    problem.d, cfg_op.n_radial, root.child(_STREAM_EST)
                )
    if cfg_op.gamma is not None and unknown != "gamma" and cfg.variant != "mc":
        time_rule = radial_rule_time(cfg_op.n_radial, cfg_op.gamma)
    # A quasi-random walker advances as it is consumed, so the forcing gets a
    # twin walker held in lockstep; fixed arrays and streams are shared.
    dirs_f = SobolDirections(problem.d) if isinstance(dirs, SobolDirections) else dirs
    forcing = _inverse_forcing(
        problem, cfg, cfg_op, unknown, coeff, rule, time_rule, dirs_f
    )

    if observations is None:

        def observations(count, rng):
            x, times = make_test_set(problem, count, rng)
            z = x if times is None else np.column_stack([x, times])
            return z, eval_exact(problem, z)

    epoch_root = root.child(_STREAM_EPOCH)
    stencil_root = root.child(_STREAM_STENCIL)
    data_root = root.child(_STREAM_DATA)
    joint = np.append(flatten_params(wrapper.model), coeff.raw)
    state = AdamState.zeros(joint.size)
    loss_hist = np.zeros(cfg.epochs)
    lr_hist = np.zeros(cfg.epochs)
    coeff_hist = np.zeros(cfg.epochs)

    start = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        rng_e = epoch_root.child(epoch)
        x = sample_ball(problem.d, cfg.n_residual, rng_e)
        t = None
        if problem.time_dependent:
            t = problem.T * (1.0 - rng_e.generator.random(cfg.n_residual))
        # Twin streams: the forcing consumes the same estimator draws the
        # residual stencil does, keeping the two sides of the residual on one
        # discretization.
        f = forcing(x, t, stencil_root.child(epoch))
        loss_r, grads, dloss_draw = residual_loss(
            wrapper,
            x,
            cfg_op,
            f,
            stencil_root.child(epoch),
            variant=cfg.variant,
            weight=cfg.w_residual,
            t=t,
            rule=rule,
            time_rule=time_rule,
            unknown=unknown,
            coeff=coeff,
            directions=dirs,
        )
        obs_z, obs_u = observations(cfg.n_data, data_root.child(epoch))
        loss_d, grads_d = data_loss(wrapper, obs_z, obs_u, weight=cfg.w_data)
        grads.add_(grads_d)
        loss = loss_r + loss_d

        lr = learning_rate(cfg, epoch)
        if not math.isfinite(loss):
            raise NonFiniteLoss(epoch, lr, loss)
        gjoint = np.append(flatten_grads(grads), dloss_draw)
        joint, state = adam_step(joint, gjoint, state, epoch, cfg)
        set_params(wrapper.model, joint[:-1])
        coeff.raw = float(joint[-1])
        loss_hist[epoch - 1] = loss
        lr_hist[epoch - 1] = lr
        coeff_hist[epoch - 1] = coeff.value
    elapsed = time.perf_counter() - start

    pred = forward(wrapper, z_test)
    per_epoch, per_eval = _rates(cfg.epochs, cfg.n_residual, elapsed)
    report = TrainReport(
        seed=cfg.seed,
        variant=cfg.variant,
        epochs=cfg.epochs,
        loss_history=loss_hist,
        lr_history=lr_hist,
        rel_l2=rel_l2(pred, exact_test),
        rel_l1=rel_l1(pred, exact_test),
        elapsed=elapsed,
        epochs_per_sec=per_epoch,
        evals_per_sec=per_eval,
        coeff_name=unknown,
        coeff_history=coeff_hist,
        coeff_final=coeff.value,
        coeff_error=None if truth is None else rel_l1(coeff.value, truth),
    )
    return wrapper, coeff, report
