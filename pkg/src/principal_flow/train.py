"""Fitting a principal flow to a point cloud.

Each iteration samples initial conditions, rolls them out through the
current field (optionally with noise injected after every step), scores the
rollouts with :func:`principal_flow_loss`, backpropagates through the
solver and takes one Adam step.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data import path_extent
from .diffcore import MLPArchitecture, ParamVector, init_params
from .errors import ConfigurationError, ContractError, NumericFailureError
from .field import DEFAULT_EPSILON, VelocityField
from .integrate import IntegratorSpec, backprop_rollout, noise_draws, rollout
from .loss import DataCloud, LossBreakdown, principal_flow_loss

log = logging.getLogger(__name__)

# sub-stream tags keep initial-condition and noise draws independent for equal seeds
_IC_STREAM = 1
_NOISE_STREAM = 2


@dataclass(frozen=True)
class TrainConfig:
    arch: MLPArchitecture = field(default_factory=MLPArchitecture)
    # None: rk4 with ``dt`` and a horizon covering the data from the start point
    integrator: IntegratorSpec | None = None
    dt: float = 0.05
    n_trajectories: int = 32
    init_mean: tuple[float, float] = (0.0, 0.0)
    init_sigma: float = 0.05
    noise_sigma: float = 0.0
    learning_rate: float = 1e-3
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    n_iterations: int = 2000
    seed: int = 0
    epsilon: float = DEFAULT_EPSILON
    # rollout length grows linearly from horizon_start * n_steps to n_steps over
    # the first horizon_warmup fraction of iterations; 0 disables the ramp
    horizon_warmup: float = 0.25
    horizon_start: float = 0.1
    # rescale gradients whose L2 norm exceeds this; None disables clipping
    grad_clip: float | None = None

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigurationError(f"learning_rate must be positive, got {self.learning_rate}")
        b1, b2 = self.adam_betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ConfigurationError(f"adam betas must lie in [0, 1), got {self.adam_betas}")
        if self.n_trajectories < 1 or self.n_iterations < 1:
            raise ConfigurationError("n_trajectories and n_iterations must be positive")
        if self.init_sigma < 0 or self.noise_sigma < 0:
            raise ConfigurationError("init_sigma and noise_sigma must be non-negative")
        if not self.dt > 0:
            raise ConfigurationError(f"dt must be positive, got {self.dt}")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigurationError(f"grad_clip must be positive or None, got {self.grad_clip}")
        if not (0 <= self.horizon_warmup <= 1 and 0 < self.horizon_start <= 1):
            raise ConfigurationError("horizon_warmup must lie in [0, 1] and horizon_start in (0, 1]")
        object.__setattr__(self, "init_mean", tuple(float(v) for v in self.init_mean))
        object.__setattr__(self, "adam_betas", tuple(float(v) for v in self.adam_betas))

    def to_dict(self) -> dict:
        return {
            "arch": {"layer_widths": list(self.arch.layer_widths), "activation": self.arch.activation},
            "integrator": None if self.integrator is None else {
                "scheme": self.integrator.scheme, "dt": self.integrator.dt,
                "n_steps": self.integrator.n_steps},
            "dt": self.dt,
            "n_trajectories": self.n_trajectories,
            "init_mean": list(self.init_mean),
            "init_sigma": self.init_sigma,
            "noise_sigma": self.noise_sigma,
            "learning_rate": self.learning_rate,
            "adam_betas": list(self.adam_betas),
            "adam_eps": self.adam_eps,
            "n_iterations": self.n_iterations,
            "seed": self.seed,
            "epsilon": self.epsilon,
            "horizon_warmup": self.horizon_warmup,
            "horizon_start": self.horizon_start,
            "grad_clip": self.grad_clip,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "arch" in d and isinstance(d["arch"], dict):
            d["arch"] = MLPArchitecture(tuple(d["arch"]["layer_widths"]), d["arch"].get("activation", "tanh"))
        if d.get("integrator") is not None and isinstance(d["integrator"], dict):
            d["integrator"] = IntegratorSpec(**d["integrator"])
        for key in ("init_mean", "adam_betas"):
            if key in d:
                d[key] = tuple(d[key])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainReport:
    loss_history: list[float]
    term1_history: list[float]
    term2_history: list[float]
    final_params: ParamVector
    wall_time: float
    integrator: IntegratorSpec


def resolve_integrator(cfg: TrainConfig, data: DataCloud) -> IntegratorSpec:
    """The configured integrator, or rk4 with a horizon long enough to cross the data at unit speed."""
    if cfg.integrator is not None:
        return cfg.integrator
    extent = path_extent(data.points, cfg.init_mean)
    return IntegratorSpec("rk4", cfg.dt, max(1, int(np.ceil(extent / cfg.dt))))


def steps_at(cfg: TrainConfig, spec: IntegratorSpec, iteration: int) -> int:
    """Rollout length used at ``iteration`` under the horizon ramp."""
    ramp = cfg.horizon_warmup * cfg.n_iterations
    if ramp <= 0 or iteration >= ramp:
        return spec.n_steps
    frac = cfg.horizon_start + (1.0 - cfg.horizon_start) * iteration / ramp
    return max(1, min(spec.n_steps, int(round(frac * spec.n_steps))))


def sample_initial_conditions(cfg: TrainConfig, iteration: int) -> np.ndarray:
    """``n_trajectories`` isotropic Gaussian draws around ``init_mean``, keyed by (seed, iteration)."""
    rng = np.random.default_rng([cfg.seed, _IC_STREAM, iteration])
    return np.asarray(cfg.init_mean) + cfg.init_sigma * rng.standard_normal((cfg.n_trajectories, 2))


def clip_by_norm(grads: np.ndarray, max_norm: float | None) -> np.ndarray:
    """``grads`` rescaled to L2 norm ``max_norm`` when it is longer; unchanged otherwise."""
    if max_norm is None:
        return grads
    norm = float(np.sqrt(np.dot(grads, grads)))
    return grads * (max_norm / norm) if norm > max_norm else grads


def adam_step(params: np.ndarray, grads: np.ndarray, moment_state, lr: float,
              betas=(0.9, 0.999), eps: float = 1e-8, t: int = 1):
    """One bias-corrected Adam update; ``t`` counts from 1.

    ``moment_state`` is ``(m, v)`` or ``None`` for fresh zero moments.
    Inputs are not modified.
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape:
        raise ContractError(f"params {params.shape} and grads {grads.shape} differ in shape")
    if moment_state is None:
        m, v = np.zeros_like(params), np.zeros_like(params)
    else:
        m, v = moment_state
        if m.shape != params.shape or v.shape != params.shape:
            raise ContractError("moment state does not match parameter shape")
    b1, b2 = betas
    m = b1 * m + (1.0 - b1) * grads
    v = b2 * v + (1.0 - b2) * grads * grads
    m_hat = m / (1.0 - b1 ** t)
    v_hat = v / (1.0 - b2 ** t)
    return params - lr * m_hat / (np.sqrt(v_hat) + eps), (m, v)


def rollout_loss_and_grad(f: VelocityField, Z0: np.ndarray, spec: IntegratorSpec, data: DataCloud,
                          noise: np.ndarray | None = None) -> tuple[LossBreakdown, np.ndarray]:
    """Principal-flow loss of the rollouts from ``Z0`` and its gradient in the field parameters."""
    states, tape = rollout(f, Z0, spec, noise, keep_tape=True)
    lb = principal_flow_loss(states, data)
    gp, _ = backprop_rollout(f, states, lb.state_grads, spec.scheme, spec.dt, tape=tape)
    return lb, gp


def fit_principal_flow(cfg: TrainConfig, data: DataCloud,
                       callback: Callable[[int, LossBreakdown, ParamVector, float], None] | None = None,
                       params: ParamVector | None = None) -> TrainReport:
    """Train a unit-speed field whose rollouts from ``init_mean`` traverse ``data``.

    ``callback(iteration, breakdown, params_before_update, elapsed_s)`` is
    called once per iteration.
    """
    spec = resolve_integrator(cfg, data)
    p = params if params is not None else init_params(cfg.arch, cfg.seed)
    f = VelocityField(p, cfg.epsilon)
    moments = None
    totals, t1s, t2s = [], [], []
    start = time.perf_counter()
    for it in range(cfg.n_iterations):
        Z0 = sample_initial_conditions(cfg, it)
        spec_it = IntegratorSpec(spec.scheme, spec.dt, steps_at(cfg, spec, it))
        noise = None
        if cfg.noise_sigma > 0:
            noise = noise_draws(cfg.noise_sigma, (cfg.seed, _NOISE_STREAM, it), cfg.n_trajectories, spec_it.n_steps)
        try:
            lb, gp = rollout_loss_and_grad(f, Z0, spec_it, data, noise)
        except NumericFailureError as exc:
            raise NumericFailureError(f"iteration {it}: {exc}", location=exc.location) from exc
        if not np.isfinite(lb.total) or not np.all(np.isfinite(gp)):
            raise NumericFailureError(f"iteration {it}: non-finite loss or gradient")
        totals.append(lb.total)
        t1s.append(lb.traj_to_data)
        t2s.append(lb.data_to_traj)
        if callback is not None:
            callback(it, lb, f.params, time.perf_counter() - start)
        gp = clip_by_norm(gp, cfg.grad_clip)
        values, moments = adam_step(f.params.values, gp, moments, cfg.learning_rate,
                                    cfg.adam_betas, cfg.adam_eps, it + 1)
        f = f.with_params(f.params.replace(values))
        if it % 200 == 0:
            log.debug("iter %d loss %.5f (%.5f + %.5f)", it, lb.total, lb.traj_to_data, lb.data_to_traj)
    return TrainReport(totals, t1s, t2s, f.params, time.perf_counter() - start, spec)


def evaluate_fit(params: ParamVector, cfg: TrainConfig, data: DataCloud, spec: IntegratorSpec,
                 iteration: int = 0) -> LossBreakdown:
    """Noiseless loss of ``params`` on a fresh draw of initial conditions."""
    f = VelocityField(params, cfg.epsilon)
    states = rollout(f, sample_initial_conditions(cfg, iteration), spec)
    return principal_flow_loss(states, data)
