"""Single-iteration steppers for all accelerated, first-order and baseline methods.

Every stepper is a pure map from the iteration-k state to the iteration-k+1
state: positions, velocities and weights are each updated from frozen
iteration-k quantities (Jacobi order), so the three sub-updates commute.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .core import (
    InvalidArgumentError,
    KernelConfig,
    ParticleState,
    bandwidth_nn_from_d2,
    empirical_moments,
    rbf_kernel_matrix,
    squared_distances,
)
from .smoothing import FirstVariation, first_variation
from .targets import TargetModel

METRICS = ("W", "KW", "S")
SMOOTHINGS = ("BLOB", "GFSD", "KSDD")
WEIGHT_MODES = ("fixed", "CA", "DK")


class NumericalDivergenceError(FloatingPointError):
    """Raised when a sub-update produces a non-finite particle."""


class ConfigurationError(ValueError):
    """Raised for incompatible method/target combinations or unknown method ids."""


@dataclass
class DynamicsConfig:
    """Method selection (metric x smoothing x weight mode) plus step sizes and damping."""

    metric: str = "W"
    smoothing: str = "BLOB"
    weight_mode: str = "fixed"
    eta_pos: float = 1e-2
    eta_vel: float = 1.0
    eta_wei: float = 1e-2
    gamma: float = 0.3
    lambda_kw: float = 1.0
    warmup: bool = True
    total_steps: int = 2000
    ca_variant: str = "multiplicative"  # multiplicative | as_printed

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ConfigurationError("metric must be one of %s" % (METRICS,))
        if self.smoothing not in SMOOTHINGS:
            raise ConfigurationError("smoothing must be one of %s" % (SMOOTHINGS,))
        if self.weight_mode not in WEIGHT_MODES:
            raise ConfigurationError("weight_mode must be one of %s" % (WEIGHT_MODES,))
        if self.ca_variant not in ("multiplicative", "as_printed"):
            raise ConfigurationError("unknown ca_variant %r" % self.ca_variant)
        for name in ("eta_pos", "eta_vel", "eta_wei", "gamma", "lambda_kw"):
            if getattr(self, name) < 0:
                raise ConfigurationError("%s must be nonnegative" % name)
        if self.total_steps < 1:
            raise ConfigurationError("total_steps must be >= 1")
        decay = 1.0 - self.gamma * self.eta_vel
        if not -1.0 <= decay <= 1.0:
            raise ConfigurationError(
                "velocity decay factor 1 - gamma*eta_vel = %g is outside [-1, 1]" % decay
            )
        if decay < 0.0:
            warnings.warn(
                "velocity decay factor 1 - gamma*eta_vel = %g is negative; "
                "the velocity field will oscillate" % decay,
                stacklevel=2,
            )


class StepRng:
    """Counter-based random streams addressed by (seed, iteration, tag).

    Streams are rewound to the addressed counter on demand, so identical
    addresses produce identical draws regardless of evaluation order. The
    returned generator is a shared handle; it is only valid until the next
    stream() call on the same StepRng.
    """

    DK_TAG = 2**48
    INIT_TAG = 2**48 + 1
    REFERENCE_TAG = 2**48 + 2

    def __init__(self, seed: int):
        self.seed = int(seed) & (2**64 - 1)
        # resetting the cached bit generator's counter is ~4x cheaper than
        # constructing a fresh Philox per call, which matters on the DK path
        self._bitgen = np.random.Philox(key=self.seed)
        self._template = self._bitgen.state
        self._gen = np.random.Generator(self._bitgen)

    def stream(self, iteration: int, tag: int) -> np.random.Generator:
        state = dict(self._template)
        state["state"] = {
            "counter": np.array([0, 0, int(iteration), int(tag)], dtype=np.uint64),
            "key": state["state"]["key"],
        }
        self._bitgen.state = state
        return self._gen


def effective_eta_wei(cfg: DynamicsConfig, iteration: int) -> float:
    """Weight step size at a given iteration, with the optional tanh ramp-up schedule."""
    if not cfg.warmup:
        return cfg.eta_wei
    t = iteration / cfg.total_steps
    return cfg.eta_wei * math.tanh(2.0 * t**5)


def _require_finite(arr: np.ndarray, what: str, iteration: int):
    finite = np.isfinite(arr)
    if not finite.all():
        bad = int(np.argwhere(~finite.reshape(arr.shape[0], -1).all(axis=1))[0, 0])
        raise NumericalDivergenceError(
            "non-finite %s for particle %d at iteration %d" % (what, bad, iteration)
        )


def _check_finite(new_pos: np.ndarray, new_vel: np.ndarray, u: np.ndarray, iteration: int):
    # a finite sum implies all entries finite; fall back to the slow scan for the message
    if math.isfinite(float(new_pos.sum() + new_vel.sum() + u.sum())):
        return
    _require_finite(new_pos, "position", iteration)
    _require_finite(new_vel, "velocity", iteration)
    _require_finite(u, "first variation", iteration)


def ca_weight_update(weights, u, eta, variant="multiplicative"):
    """Deterministic weight step driven by the centered first variation.

    Returns (new_weights, clamp_count). The multiplicative variant moves each
    weight by -eta*(u - mean_u)*w, which telescopes to zero net mass change;
    the as_printed variant drops the trailing w factor. Negative results are
    clamped to zero and the vector renormalized.
    """
    weights = np.asarray(weights, dtype=float)
    u = np.asarray(u, dtype=float)
    centered = u - weights @ u
    if variant == "multiplicative":
        new = weights - eta * centered * weights
    elif variant == "as_printed":
        new = weights - eta * centered
    else:
        raise InvalidArgumentError("unknown ca_variant %r" % variant)
    clamps = int(np.count_nonzero(new < 0.0))
    if clamps:
        new = np.maximum(new, 0.0)
    total = new.sum()
    if total <= 0.0:
        raise NumericalDivergenceError(
            "all weights clamped to zero; eta_wei is too large for this state"
        )
    return new / total, clamps


@dataclass
class DkOutcome:
    state: ParticleState
    events: list
    skipped: int

    @property
    def event_count(self) -> int:
        return len(self.events)


def dk_resample(state: ParticleState, u, eta, rng: StepRng) -> DkOutcome:
    """Stochastic duplicate/kill reweighting that keeps the weights uniform.

    Rates are frozen from the pre-step state; events are applied sequentially
    in a seeded random permutation. A positive rate duplicates the owning
    particle onto a uniformly chosen victim slot; a negative rate replaces the
    owner with a uniformly chosen survivor. Kill events with a single particle
    are skipped (the system may never empty) and counted separately.
    """
    w = state.weights
    m = state.num_particles
    if not np.all(w == w[0]):
        raise InvalidArgumentError("duplicate/kill requires uniform weights")
    u = np.asarray(u, dtype=float)
    rates = -eta * (u - w @ u)
    gen = rng.stream(state.iteration, StepRng.DK_TAG)
    coin = gen.random(m)
    # fire with probability 1 - exp(-|rate|); -expm1 of a nonpositive value never
    # overflows, and a zero rate gives probability 0, which coin in [0, 1) never beats
    fire = coin < -np.expm1(-np.abs(rates))
    if not fire.any():
        return DkOutcome(state=state, events=[], skipped=0)
    order = gen.permutation(m)
    partner = gen.integers(0, max(m - 1, 1), size=m)
    pos = state.positions.copy()
    vel = state.velocities.copy()
    events = []
    skipped = 0
    for i in order:
        if not fire[i]:
            continue
        if m == 1:
            skipped += 1
            continue
        p = partner[i] if partner[i] < i else partner[i] + 1
        if rates[i] > 0.0:
            pos[p] = pos[i]
            vel[p] = vel[i]
            events.append(("duplicate", int(i), int(p)))
        else:
            pos[i] = pos[p]
            vel[i] = vel[p]
            events.append(("kill", int(i), int(p)))
    new_state = ParticleState._trusted(pos, vel, w.copy(), state.iteration)
    return DkOutcome(state=new_state, events=events, skipped=skipped)


def _weight_stage(state, u, cfg, rng, new_pos, new_vel):
    """Apply the configured weight update; DK may also rewrite particle rows."""
    eta = effective_eta_wei(cfg, state.iteration)
    clamps = 0
    dk_events = 0
    if cfg.weight_mode == "fixed" or eta == 0.0:
        new_w = state.weights.copy()
    elif cfg.weight_mode == "CA":
        new_w, clamps = ca_weight_update(state.weights, u, eta, cfg.ca_variant)
    elif cfg.weight_mode == "DK":
        staged = ParticleState._trusted(new_pos, new_vel, state.weights, state.iteration)
        outcome = dk_resample(staged, u, eta, rng)
        dk_events = outcome.event_count + outcome.skipped
        return outcome.state.weights, outcome.state.positions, outcome.state.velocities, clamps, dk_events
    else:  # pragma: no cover
        raise ConfigurationError("unknown weight mode %r" % cfg.weight_mode)
    return new_w, new_pos, new_vel, clamps, dk_events


def _assemble(state, cfg, rng, new_pos, new_vel, u, counters=None):
    _check_finite(new_pos, new_vel, u, state.iteration)
    new_w, new_pos, new_vel, clamps, dk_events = _weight_stage(
        state, u, cfg, rng, new_pos, new_vel
    )
    if counters is not None:
        counters["clamp_count"] += clamps
        counters["dk_event_count"] += dk_events
    return ParticleState._trusted(new_pos, new_vel, new_w, state.iteration + 1)


def wgad_step(state, fv: FirstVariation, cfg: DynamicsConfig, rng: StepRng, counters=None):
    """Accelerated step under the flat transport metric."""
    new_pos = state.positions + cfg.eta_pos * state.velocities
    decay = 1.0 - cfg.gamma * cfg.eta_vel
    new_vel = decay * state.velocities - cfg.eta_vel * fv.grad_u
    return _assemble(state, cfg, rng, new_pos, new_vel, fv.u, counters)


def kwgad_step(state, fv: FirstVariation, cfg: DynamicsConfig, rng: StepRng, counters=None):
    """Accelerated step preconditioned by the regularized weighted covariance."""
    moments = empirical_moments(state, ridge=cfg.lambda_kw)
    c_lam = moments.regularized_covariance
    new_pos = state.positions + cfg.eta_pos * state.velocities @ c_lam.T
    # coupling[i] = [sum_j w_j v_j v_j^T] (x_i - m)
    vv = (state.velocities * state.weights[:, None]).T @ state.velocities
    coupling = (state.positions - moments.mean) @ vv.T
    decay = 1.0 - cfg.gamma * cfg.eta_vel
    new_vel = decay * state.velocities - cfg.eta_vel * coupling - cfg.eta_vel * fv.grad_u
    return _assemble(state, cfg, rng, new_pos, new_vel, fv.u, counters)


def sgad_step(state, fv: FirstVariation, cfg: DynamicsConfig, rng: StepRng, h: float,
              counters=None, k=None):
    """Accelerated step with kernel-averaged transport and velocity coupling."""
    x = state.positions
    w = state.weights
    if k is None:
        k = rbf_kernel_matrix(x, h=h)
    kw = k * w[None, :]
    new_pos = x + cfg.eta_pos * kw @ state.velocities
    # coupling[i] = sum_j w_j (v_i . v_j) dK/dx_i(x_i, x_j)
    coeff = kw * (state.velocities @ state.velocities.T)
    coupling = -(2.0 / h) * (x * coeff.sum(axis=1)[:, None] - coeff @ x)
    decay = 1.0 - cfg.gamma * cfg.eta_vel
    new_vel = decay * state.velocities - cfg.eta_vel * coupling - cfg.eta_vel * fv.grad_u
    return _assemble(state, cfg, rng, new_pos, new_vel, fv.u, counters)


def first_order_step(state, fv: FirstVariation, cfg: DynamicsConfig, rng: StepRng, counters=None):
    """Plain descent on the smoothed first variation; velocities stay untouched."""
    new_pos = state.positions - cfg.eta_pos * fv.grad_u
    return _assemble(state, cfg, rng, new_pos, state.velocities.copy(), fv.u, counters)


def svgd_step(state: ParticleState, target: TargetModel, h: float, eta_pos: float, k=None):
    """Kernelized score-ascent step with pairwise repulsion; fixed uniform weights."""
    w = state.weights
    if not np.all(w == w[0]):
        raise InvalidArgumentError("this stepper requires uniform weights")
    x = state.positions
    m = state.num_particles
    if k is None:
        k = rbf_kernel_matrix(x, h=h)
    scores = np.atleast_2d(target.score(x))
    repulsion = (2.0 / h) * (x * k.sum(axis=1)[:, None] - k @ x)
    drift = (k @ scores + repulsion) / m
    new_pos = x + eta_pos * drift
    _require_finite(new_pos, "position", state.iteration)
    return ParticleState._trusted(new_pos, state.velocities.copy(), w.copy(), state.iteration + 1)


def wnes_momentum(k: int) -> float:
    return (k - 1.0) / (k + 2.0)


def wnes_lookahead(state: ParticleState, prev_positions: np.ndarray, k: int) -> np.ndarray:
    return state.positions + wnes_momentum(k) * (state.positions - prev_positions)


def wnes_step(state, prev_positions, fv_at_lookahead: FirstVariation, eta_pos: float, k: int):
    """Momentum-extrapolated descent: gradient taken at the lookahead point."""
    if k < 1:
        raise InvalidArgumentError("step counter k must be >= 1")
    y = wnes_lookahead(state, prev_positions, k)
    new_pos = y - eta_pos * fv_at_lookahead.grad_u
    _require_finite(new_pos, "position", state.iteration)
    return ParticleState._trusted(new_pos, state.velocities.copy(), state.weights.copy(),
                                  state.iteration + 1)


# ---------------------------------------------------------------------------
# Method registry


@dataclass(frozen=True)
class MethodSpec:
    name: str
    kind: str  # gad | first_order | svgd | wnes
    metric: str = "W"
    smoothing: str = "BLOB"
    weight_mode: str = "fixed"


def _gad_names():
    return [
        "%sGAD-%s-%s" % (m, w, s)
        for m in METRICS
        for w in ("CA", "DK")
        for s in SMOOTHINGS
    ]


BASELINE_METHODS = [
    "BLOB",
    "GFSD",
    "KSDD",
    "SVGD",
    "WAIG-BLOB",
    "WNES-BLOB",
    "DPVI-CA-BLOB",
    "DPVI-DK-BLOB",
]

CANONICAL_METHODS = _gad_names() + BASELINE_METHODS


def parse_method(name: str) -> MethodSpec:
    """Resolve a method id to its family, metric, smoothing rule and weight mode.

    Beyond the canonical registry, any syntactically valid combination
    (e.g. WAIG-GFSD, DPVI-CA-GFSD) is accepted.
    """
    ident = name.strip().upper()
    if ident == "SVGD":
        return MethodSpec(name=ident, kind="svgd")
    if ident in SMOOTHINGS:
        return MethodSpec(name=ident, kind="first_order", smoothing=ident)
    parts = ident.split("-")
    if parts[0] == "WNES" and len(parts) == 2 and parts[1] in SMOOTHINGS:
        return MethodSpec(name=ident, kind="wnes", smoothing=parts[1])
    if parts[0] == "DPVI" and len(parts) == 3 and parts[1] in ("CA", "DK") and parts[2] in SMOOTHINGS:
        return MethodSpec(name=ident, kind="first_order", smoothing=parts[2], weight_mode=parts[1])
    for metric in METRICS:
        if parts[0] == metric + "GAD" and len(parts) == 3 and parts[1] in ("CA", "DK") and parts[2] in SMOOTHINGS:
            return MethodSpec(name=ident, kind="gad", metric=metric, smoothing=parts[2], weight_mode=parts[1])
        if parts[0] == metric + "AIG" and len(parts) == 2 and parts[1] in SMOOTHINGS:
            return MethodSpec(name=ident, kind="gad", metric=metric, smoothing=parts[1], weight_mode="fixed")
    raise ConfigurationError(
        "unknown method %r; valid ids include: %s" % (name, ", ".join(CANONICAL_METHODS))
    )


class Stepper:
    """Deterministic one-iteration stepper for a registered method.

    Accumulates weight-clamp and duplicate/kill event counters across calls.
    """

    def __init__(self, spec: MethodSpec, target: TargetModel, cfg: DynamicsConfig,
                 kernel: KernelConfig, rng: StepRng):
        self.spec = spec
        self.target = target
        self.cfg = cfg
        self.kernel = kernel
        self.rng = rng
        self.counters = {"clamp_count": 0, "dk_event_count": 0, "floored_count": 0}
        self._prev_positions = None  # lookahead memory for the momentum baseline

    def _first_variation(self, state: ParticleState, h: float, d2=None, k=None) -> FirstVariation:
        try:
            fv = first_variation(state, self.target, h, self.spec.smoothing, d2=d2, k=k)
        except (FloatingPointError, OverflowError) as exc:
            raise NumericalDivergenceError(
                "non-finite first variation at iteration %d" % state.iteration
            ) from exc
        self.counters["floored_count"] += fv.floored
        return fv

    def _resolve_h(self, d2: np.ndarray) -> float:
        if self.kernel.bandwidth_mode == "fixed":
            return self.kernel.fixed_h
        return bandwidth_nn_from_d2(d2)

    def __call__(self, state: ParticleState) -> ParticleState:
        spec, cfg = self.spec, self.cfg
        if spec.kind == "svgd":
            d2 = squared_distances(state.positions)
            h = self._resolve_h(d2)
            return svgd_step(state, self.target, h, cfg.eta_pos, k=np.exp(d2 / -h))
        if spec.kind == "wnes":
            k = state.iteration + 1
            prev = self._prev_positions if self._prev_positions is not None else state.positions
            y = wnes_lookahead(state, prev, k)
            staged = ParticleState._trusted(y, state.velocities, state.weights, state.iteration)
            d2 = squared_distances(y)
            fv = self._first_variation(staged, self._resolve_h(d2), d2)
            new_state = wnes_step(state, prev, fv, cfg.eta_pos, k)
            self._prev_positions = state.positions
            return new_state
        d2 = squared_distances(state.positions)
        h = self._resolve_h(d2)
        k = np.exp(d2 / -h)
        fv = self._first_variation(state, h, d2, k)
        if spec.kind == "first_order":
            return first_order_step(state, fv, cfg, self.rng, self.counters)
        if spec.metric == "W":
            return wgad_step(state, fv, cfg, self.rng, self.counters)
        if spec.metric == "KW":
            return kwgad_step(state, fv, cfg, self.rng, self.counters)
        return sgad_step(state, fv, cfg, self.rng, h, self.counters, k=k)


def make_stepper(method: str, target: TargetModel, cfg: DynamicsConfig | None = None,
                 kernel: KernelConfig | None = None, rng: StepRng | None = None) -> Stepper:
    """Build a stepper for any registered method id against a target."""
    spec = parse_method(method)
    cfg = cfg if cfg is not None else DynamicsConfig()
    cfg = replace(cfg, metric=spec.metric, smoothing=spec.smoothing, weight_mode=spec.weight_mode)
    if spec.smoothing == "KSDD" and spec.kind != "svgd" and not target.has_hessian:
        raise ConfigurationError(
            "method %s needs a target with a log-density Hessian" % spec.name
        )
    return Stepper(spec, target, cfg, kernel or KernelConfig(), rng or StepRng(0))
