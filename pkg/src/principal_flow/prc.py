"""Phase response curves of a planar oscillator living near the unit circle.

A state is ``(phase, amplitude)`` with Cartesian form ``a (cos phi, sin phi)``.
A perturbation changes the amplitude instantaneously at fixed phase. The
phase shift is read after a relaxation horizon as the angle of the perturbed
copy minus the angle of an unperturbed reference started at the same phase,
wrapped to (-180, 180] degrees.

The target curve is the type-two PRC

    M(phi) = sigma_phi - A1 sin(phi - xi1) - A2 sin(2 phi + xi2),

multiplied by ``scale`` and read as degrees of phase shift.
"""
from __future__ import annotations

import csv
import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .diffcore import ParamVector, init_params
from .errors import ContractError, NumericFailureError
from .field import VelocityField
from .integrate import IntegratorSpec, backprop_rollout, rollout
from .loss import prc_mse, unit_circle_penalty
from .train import TrainConfig, adam_step, clip_by_norm

log = logging.getLogger(__name__)

TWO_PI = 2.0 * np.pi
# inward kick: the copy cuts inside the cycle, so unit speed can advance it
DEFAULT_DELTA_A = -0.1
DEFAULT_N_PHASES = 64
DEFAULT_LAMBDA_CIRCLE = 1.0
RELAX_PERIODS = 3
RELAXED_TOL = 0.1
WARM_START_ATTRACTION = 0.05
# a step whose loss exceeds this multiple of the best so far is undone
DIVERGENCE_FACTOR = 1.5


@dataclass(frozen=True)
class PRCParams:
    sigma_phi: float = 0.05
    xi1: float = 0.0
    xi2: float = 0.0
    A1: float = 0.4
    A2: float = 0.2
    scale: float = 100.0

    def __post_init__(self):
        if not all(np.isfinite([self.sigma_phi, self.xi1, self.xi2, self.A1, self.A2, self.scale])):
            raise ContractError("PRC parameters must be finite")


@dataclass(frozen=True)
class OscState:
    phase: float
    amplitude: float

    def to_cartesian(self) -> np.ndarray:
        return self.amplitude * np.array([math.cos(self.phase), math.sin(self.phase)])

    @classmethod
    def from_cartesian(cls, xy) -> "OscState":
        x, y = map(float, xy)
        return cls(math.atan2(y, x) % TWO_PI, math.hypot(x, y))


@dataclass
class PRCCurve:
    phases: np.ndarray
    shifts: np.ndarray
    relaxed: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.phases = np.asarray(self.phases, dtype=np.float64)
        self.shifts = np.asarray(self.shifts, dtype=np.float64)
        if self.phases.shape != self.shifts.shape or self.phases.ndim != 1:
            raise ContractError("phases and shifts must be 1-D arrays of equal length")
        if len(self.phases) > 1 and not np.all(np.diff(self.phases) > 0):
            raise ContractError("phases must be strictly increasing")

    def __len__(self):
        return len(self.phases)


class PhaseShift(NamedTuple):
    shift: float
    relaxed: bool


def phase_grid(n: int = DEFAULT_N_PHASES) -> np.ndarray:
    if n < 1:
        raise ContractError(f"phase grid needs at least one sample, got {n}")
    return TWO_PI * np.arange(n) / n


def default_relax_spec(dt: float = 0.05, scheme: str = "rk4", periods: int = RELAX_PERIODS) -> IntegratorSpec:
    return IntegratorSpec.for_horizon(periods * TWO_PI, dt, scheme)


def target_prc(phases, p: PRCParams = PRCParams()) -> PRCCurve:
    phi = np.asarray(phases, dtype=np.float64)
    m = p.sigma_phi - p.A1 * np.sin(phi - p.xi1) - p.A2 * np.sin(2.0 * phi + p.xi2)
    return PRCCurve(phi, p.scale * m)


def apply_perturbation(s: OscState, delta_a: float) -> OscState:
    a = s.amplitude + delta_a
    if not a > 0:
        raise ContractError(f"perturbed amplitude must stay positive, got {a}")
    return OscState(s.phase, a)


def _angle_units(units: str) -> float:
    if units == "deg":
        return 180.0 / np.pi
    if units == "rad":
        return 1.0
    raise ContractError(f"units must be 'deg' or 'rad', got {units!r}")


def _wrap(d: np.ndarray, units: str) -> np.ndarray:
    half = 180.0 if units == "deg" else np.pi
    # maps onto (-half, half]
    return half - np.mod(half - d, 2.0 * half)


def _start_points(phases: np.ndarray, delta_a: float) -> np.ndarray:
    if not 1.0 + delta_a > 0:
        raise ContractError(f"perturbed amplitude must stay positive, got {1.0 + delta_a}")
    ring = np.stack([np.cos(phases), np.sin(phases)], axis=1)
    return np.concatenate([(1.0 + delta_a) * ring, ring])


def _readout(states: np.ndarray, n: int, units: str):
    end = states[:, -1]
    ang = np.arctan2(end[:, 1], end[:, 0])
    shifts = _wrap((ang[:n] - ang[n:]) * _angle_units(units), units)
    amp = np.hypot(end[:n, 0], end[:n, 1])
    return shifts, np.abs(amp - 1.0) < RELAXED_TOL


def simulate_prc(f, phases, delta_a: float = DEFAULT_DELTA_A, relax: IntegratorSpec | None = None,
                 units: str = "deg") -> PRCCurve:
    """Phase shift at every phase of the grid; ``relaxed`` flags samples back near amplitude 1."""
    phases = np.asarray(phases, dtype=np.float64)
    relax = relax or default_relax_spec()
    if relax.horizon < TWO_PI - 1e-9:
        raise ContractError(f"relaxation horizon {relax.horizon} is shorter than one period (2*pi)")
    n = len(phases)
    states = rollout(f, _start_points(phases, delta_a), relax)
    shifts, relaxed = _readout(states, n, units)
    if delta_a == 0:
        shifts = np.zeros(n)
    if not relaxed.all():
        warnings.warn(f"{int((~relaxed).sum())} of {n} perturbed trajectories did not relax to the unit circle",
                      RuntimeWarning, stacklevel=2)
    return PRCCurve(phases, shifts, relaxed)


def measure_phase_shift(f, phi0: float, delta_a: float = DEFAULT_DELTA_A,
                        relax: IntegratorSpec | None = None, units: str = "deg") -> PhaseShift:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        curve = simulate_prc(f, [phi0], delta_a, relax, units)
    relaxed = bool(curve.relaxed[0])
    if not relaxed:
        warnings.warn(f"perturbed trajectory from phase {phi0:.4f} did not relax", RuntimeWarning, stacklevel=2)
    return PhaseShift(float(curve.shifts[0]), relaxed)


def return_time(f, phi0: float = 0.0, dt: float = 0.01, max_periods: float = 2.0) -> float:
    """Time for the unperturbed state at ``phi0`` to wind once around the origin."""
    spec = IntegratorSpec.for_horizon(max_periods * TWO_PI, dt)
    states = rollout(f, _start_points(np.array([phi0]), 0.0)[1:], spec)[0]
    ang = np.unwrap(np.arctan2(states[:, 1], states[:, 0]) - phi0)
    target = TWO_PI if ang[-1] > 0 else -TWO_PI
    crossed = np.flatnonzero(np.abs(ang) >= abs(target))
    if len(crossed) == 0:
        raise NumericFailureError("trajectory did not complete a revolution")
    k = crossed[0]
    frac = (abs(target) - abs(ang[k - 1])) / (abs(ang[k]) - abs(ang[k - 1]))
    return (k - 1 + frac) * dt


# --- fitting ---------------------------------------------------------------

@dataclass
class PRCFitReport:
    loss_history: list[float]
    mse_history: list[float]
    circle_history: list[float]
    final_params: ParamVector
    wall_time: float
    relax: IntegratorSpec
    best_iteration: int = -1


def prc_loss_and_grad(f: VelocityField, target: PRCCurve, delta_a: float, lambda_circle: float,
                      relax: IntegratorSpec, units: str = "deg"):
    """``prc_mse + lambda * unit_circle_penalty(reference runs)`` and its parameter gradient."""
    n = len(target)
    states, tape = rollout(f, _start_points(target.phases, delta_a), relax, keep_tape=True)
    shifts, _ = _readout(states, n, units)
    mse, dmse = prc_mse(target, PRCCurve(target.phases, shifts))
    circle, dcircle = unit_circle_penalty(states[n:])

    cot = np.zeros_like(states)
    end = states[:, -1]
    r2 = end[:, 0] ** 2 + end[:, 1] ** 2
    dang = np.stack([-end[:, 1], end[:, 0]], axis=1) / r2[:, None]
    c = _angle_units(units) * dmse
    cot[:n, -1] = c[:, None] * dang[:n]
    cot[n:, -1] = -c[:, None] * dang[n:]
    cot[n:] += lambda_circle * dcircle
    gp, _ = backprop_rollout(f, states, cot, relax.scheme, relax.dt, tape=tape)
    return mse + lambda_circle * circle, mse, circle, gp


def rotation_warm_start(p: ParamVector, n_iterations: int = 500, lr: float = 1e-2, seed: int = 0,
                        attraction: float = 1.0, epsilon: float = 1e-8) -> ParamVector:
    """Regress the normalized field onto a unit-speed limit cycle on the unit circle.

    Target direction is ``tangent + attraction * (1 - r) * radial``.
    """
    rng = np.random.default_rng([seed, 7])
    moments = None
    for t in range(1, n_iterations + 1):
        r = rng.uniform(0.3, 1.7, 256)
        th = rng.uniform(0.0, TWO_PI, 256)
        X = np.stack([r * np.cos(th), r * np.sin(th)], axis=1)
        tgt = np.stack([-np.sin(th), np.cos(th)], axis=1) + \
            (attraction * (1.0 - r))[:, None] * np.stack([np.cos(th), np.sin(th)], axis=1)
        tgt /= np.linalg.norm(tgt, axis=1, keepdims=True)
        f = VelocityField(p, epsilon)
        V, cache = f.velocity_cached(X)
        gp, _ = f.velocity_backward(cache, 2.0 * (V - tgt) / len(X))
        values, moments = adam_step(p.values, gp, moments, lr, t=t)
        p = p.replace(values)
    return p


def fit_prc(cfg: TrainConfig, target: PRCCurve, delta_a: float = DEFAULT_DELTA_A,
            lambda_circle: float = DEFAULT_LAMBDA_CIRCLE, units: str = "deg",
            warm_start_iterations: int = 500, params: ParamVector | None = None,
            callback: Callable | None = None,
            warm_start_attraction: float = WARM_START_ATTRACTION) -> PRCFitReport:
    """Fit a field whose simulated PRC matches ``target`` while cycling on the unit circle.

    ``cfg.integrator`` is the relaxation integrator (default: ``cfg.dt`` over
    three periods). Unless ``params`` is given, the network is first warm
    started towards a unit-speed cycle on the unit circle.

    The objective is evaluated in radians whatever ``units`` the target is
    given in, so ``lambda_circle`` weighs the circle penalty against phase
    error on a fixed scale; ``mse_history`` is reported in ``units``.

    If a step makes the loss non-finite or more than ``DIVERGENCE_FACTOR``
    times the best seen, the parameters go back to the best point and the
    learning rate is halved. ``final_params`` is the best point.
    """
    if lambda_circle <= 0:
        raise ContractError(f"lambda_circle must be positive, got {lambda_circle}")
    relax = cfg.integrator or default_relax_spec(cfg.dt)
    if params is None:
        params = init_params(cfg.arch, cfg.seed)
        if warm_start_iterations:
            params = rotation_warm_start(params, warm_start_iterations, seed=cfg.seed,
                                         attraction=warm_start_attraction, epsilon=cfg.epsilon)
    to_rad = 1.0 / _angle_units(units)
    target_rad = PRCCurve(target.phases, target.shifts * to_rad)
    f = VelocityField(params, cfg.epsilon)
    lr, moments = cfg.learning_rate, None
    best_total, best_params, best_it = math.inf, params, -1
    totals, mses, circles = [], [], []
    start = time.perf_counter()
    for it in range(cfg.n_iterations):
        total, mse, circle, gp = prc_loss_and_grad(f, target_rad, delta_a, lambda_circle, relax, "rad")
        finite = np.isfinite(total) and np.all(np.isfinite(gp))
        if not finite or total > DIVERGENCE_FACTOR * best_total:
            if best_it < 0:
                raise NumericFailureError(f"iteration {it}: non-finite loss or gradient")
            log.info("iteration %d: loss %.4g after best %.4g, back to iteration %d with lr %.3g",
                     it, total, best_total, best_it, lr / 2)
            f = f.with_params(best_params)
            lr /= 2
            total, mse, circle, gp = prc_loss_and_grad(f, target_rad, delta_a, lambda_circle, relax, "rad")
        if total < best_total:
            best_total, best_params, best_it = total, f.params, it
        totals.append(total)
        mses.append(mse / to_rad ** 2)
        circles.append(circle)
        if callback is not None:
            callback(it, total, mses[-1], circle, f.params, time.perf_counter() - start)
        values, moments = adam_step(f.params.values, clip_by_norm(gp, cfg.grad_clip), moments, lr,
                                    cfg.adam_betas, cfg.adam_eps, it + 1)
        f = f.with_params(f.params.replace(values))
    return PRCFitReport(totals, mses, circles, best_params, time.perf_counter() - start, relax, best_it)


def write_prc_csv(target: PRCCurve, simulated: PRCCurve, path) -> None:
    if not np.array_equal(target.phases, simulated.phases):
        raise ContractError("target and simulated curves use different phase grids")
    relaxed = simulated.relaxed if simulated.relaxed is not None else np.ones(len(simulated), bool)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["phi_rad", "target_shift", "simulated_shift", "relaxed_flag"])
        for phi, m, mh, ok in zip(target.phases, target.shifts, simulated.shifts, relaxed):
            w.writerow([repr(float(phi)), repr(float(m)), repr(float(mh)), int(bool(ok))])
