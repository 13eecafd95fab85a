"""Fixed-step integration of autonomous planar fields and its reverse pass.

Gradients are obtained by differentiating the unrolled discrete solver
(discretize-then-optimize): every RK4 stage is replayed backwards, so the
gradient is exact for the discrete trajectory that was actually computed.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .diffcore import _as_batch
from .errors import ConfigurationError, ContractError, DivergenceError, NumericFailureError

SCHEMES = ("euler", "rk4")


@dataclass(frozen=True)
class IntegratorSpec:
    scheme: str = "rk4"
    dt: float = 0.05
    n_steps: int = 40

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigurationError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if not (self.dt > 0 and np.isfinite(self.dt)):
            raise ConfigurationError(f"dt must be positive, got {self.dt}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 0:
            raise ConfigurationError(f"n_steps must be a non-negative integer, got {self.n_steps}")
        object.__setattr__(self, "n_steps", int(self.n_steps))

    @property
    def horizon(self) -> float:
        return self.dt * self.n_steps

    @classmethod
    def for_horizon(cls, T: float, dt: float = 0.05, scheme: str = "rk4") -> "IntegratorSpec":
        """Smallest step count whose horizon covers ``T``; ``T = 0`` gives the identity map."""
        if T < 0:
            raise ConfigurationError(f"horizon must be non-negative, got {T}")
        return cls(scheme, dt, int(np.ceil(T / dt - 1e-9)))


@dataclass(frozen=True)
class Trajectory:
    states: np.ndarray
    dt: float
    t0: float = 0.0

    def __post_init__(self):
        states = np.asarray(self.states, dtype=np.float64)
        if states.ndim != 2 or states.shape[1] != 2 or states.shape[0] < 2:
            raise ContractError(f"trajectory needs >= 2 planar states, got shape {states.shape}")
        object.__setattr__(self, "states", states)

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(len(self.states))

    def __len__(self):
        return len(self.states)


def _rk4_stages(f, Z, dt, keep):
    k1, c1 = f.velocity_cached(Z) if keep else (f.velocity(Z), None)
    U2 = Z + 0.5 * dt * k1
    k2, c2 = f.velocity_cached(U2) if keep else (f.velocity(U2), None)
    U3 = Z + 0.5 * dt * k2
    k3, c3 = f.velocity_cached(U3) if keep else (f.velocity(U3), None)
    U4 = Z + dt * k3
    k4, c4 = f.velocity_cached(U4) if keep else (f.velocity(U4), None)
    Znew = Z + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return Znew, (c1, c2, c3, c4)


def _step_batch(f, Z, dt, scheme, keep=False):
    if scheme == "euler":
        if keep:
            k1, c1 = f.velocity_cached(Z)
            return Z + dt * k1, (c1,)
        return Z + dt * f.velocity(Z), None
    return _rk4_stages(f, Z, dt, keep)


def step(f, x, dt: float, scheme: str = "rk4") -> np.ndarray:
    """One Euler or classical RK4 step of ``dx/dt = f(x)``."""
    if not dt > 0:
        raise ContractError(f"dt must be positive, got {dt}")
    if scheme not in SCHEMES:
        raise ConfigurationError(f"unknown scheme {scheme!r}")
    X, single = _as_batch(x)
    Z, _ = _step_batch(f, X, dt, scheme)
    if not np.all(np.isfinite(Z)):
        raise DivergenceError("non-finite state after step", step_index=0)
    return Z[0] if single else Z


def rollout(f, Z0, spec: IntegratorSpec, noise: np.ndarray | None = None,
            keep_tape: bool = False, on_divergence: str = "raise"):
    """Integrate a batch ``(B, 2)`` for ``spec.n_steps`` steps.

    ``noise`` of shape ``(B, n_steps, 2)`` is added after each step.
    Returns states ``(B, n_steps + 1, 2)`` and, with ``keep_tape``, the stage
    caches needed by :func:`backprop_rollout`. With ``on_divergence="mark"``
    diverged rows are filled with NaN from the failing step on instead of raising.
    """
    Z = np.array(Z0, dtype=np.float64).reshape(-1, 2)
    B, K = Z.shape[0], spec.n_steps
    if noise is not None and noise.shape != (B, K, 2):
        raise ContractError(f"noise must have shape {(B, K, 2)}, got {noise.shape}")
    states = np.empty((B, K + 1, 2))
    states[:, 0] = Z
    tape = [] if keep_tape else None
    alive = np.ones(B, dtype=bool)
    for k in range(K):
        try:
            Znew, caches = _step_batch(f, Z, spec.dt, spec.scheme, keep_tape)
        except NumericFailureError as exc:
            raise DivergenceError(f"step {k}: {exc}", step_index=k, location=exc.location) from exc
        if noise is not None:
            Znew = Znew + noise[:, k]
        finite = np.all(np.isfinite(Znew), axis=1)
        if not finite.all():
            if on_divergence == "raise":
                bad = int(np.flatnonzero(~finite)[0])
                raise DivergenceError(f"trajectory {bad} diverged at step {k}", step_index=k,
                                      location=Z[bad].copy())
            alive &= finite
            # park diverged rows at the origin so the batch stays finite; they are NaN-masked below
            Znew[~alive] = 0.0
        states[:, k + 1] = Znew
        states[~alive, k + 1] = np.nan
        if keep_tape:
            tape.append(caches)
        Z = Znew
    return (states, tape) if keep_tape else states


def backprop_rollout(f, states: np.ndarray, cotangents: np.ndarray, scheme: str, dt: float,
                     tape=None) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of ``sum_k <cot_k, state_k>`` for batched rollouts.

    Returns ``(grad_params, grad_initial_states)``. Noise added between steps
    is treated as a constant, so only the recorded states are needed: stage
    inputs are recomputed from them when no tape is supplied.
    """
    if states.shape != cotangents.shape:
        raise ContractError(f"cotangents {cotangents.shape} do not match states {states.shape}")
    K = states.shape[1] - 1
    gp = None
    adj = cotangents[:, K].copy()
    for k in range(K - 1, -1, -1):
        Z = states[:, k]
        caches = tape[k] if tape is not None else _step_batch(f, Z, dt, scheme, keep=True)[1]
        if scheme == "euler":
            gpk, gz = f.velocity_backward(caches[0], dt * adj)
            new_adj = adj + gz
        else:
            c1, c2, c3, c4 = caches
            d4 = (dt / 6.0) * adj
            gp4, gu4 = f.velocity_backward(c4, d4)
            d3 = (dt / 3.0) * adj + dt * gu4
            gp3, gu3 = f.velocity_backward(c3, d3)
            d2 = (dt / 3.0) * adj + (0.5 * dt) * gu3
            gp2, gu2 = f.velocity_backward(c2, d2)
            d1 = (dt / 6.0) * adj + (0.5 * dt) * gu2
            gp1, gu1 = f.velocity_backward(c1, d1)
            gpk = gp1 + gp2 + gp3 + gp4
            new_adj = adj + gu1 + gu2 + gu3 + gu4
        gp = gpk if gp is None else gp + gpk
        adj = new_adj + cotangents[:, k]
    if gp is None:
        gp = np.zeros(f.params.arch.n_params)
    return gp, adj


def flow_map(f, x0, spec: IntegratorSpec) -> np.ndarray:
    """Terminal state after ``spec.n_steps`` noiseless steps; ``n_steps = 0`` is the identity."""
    X, single = _as_batch(x0)
    if spec.n_steps == 0:
        out = X.copy()
    else:
        out = rollout(f, X, spec)[:, -1]
    return out[0] if single else out


def noise_draws(noise_sigma: float, key: Sequence[int], n_traj: int, n_steps: int) -> np.ndarray:
    """Gaussian increments ``(n_traj, n_steps, 2)``; row ``i`` depends only on ``(*key, i)``."""
    return np.stack([_noise_row(noise_sigma, (*key, i), n_steps) for i in range(n_traj)]) \
        if n_traj else np.empty((0, n_steps, 2))


def _noise_row(noise_sigma: float, key: Sequence[int], n_steps: int) -> np.ndarray:
    rng = np.random.default_rng([int(k) for k in key])
    return rng.normal(0.0, noise_sigma, size=(n_steps, 2))


def simulate_trajectory(f, x0, spec: IntegratorSpec, noise_sigma: float = 0.0,
                        seed: int = 0, traj_index: int = 0) -> Trajectory:
    if noise_sigma < 0:
        raise ContractError(f"noise_sigma must be non-negative, got {noise_sigma}")
    if spec.n_steps < 1:
        raise ContractError("a trajectory needs at least one step")
    X, _ = _as_batch(x0)
    noise = None
    if noise_sigma > 0:
        noise = _noise_row(noise_sigma, (seed, traj_index), spec.n_steps)[None]
    states = rollout(f, X[:1], spec, noise)
    return Trajectory(states[0], spec.dt)


def simulate_batch(f, X0, spec: IntegratorSpec, noise_sigma: float = 0.0, seed: int = 0) -> list[Trajectory]:
    """Trajectory ``i`` equals ``simulate_trajectory(..., seed, traj_index=i)``."""
    X0 = np.asarray(X0, dtype=np.float64).reshape(-1, 2)
    noise = noise_draws(noise_sigma, (seed,), len(X0), spec.n_steps) if noise_sigma > 0 else None
    states = rollout(f, X0, spec, noise)
    return [Trajectory(s, spec.dt) for s in states]


def backprop_through_solver(f, traj: Trajectory, state_cotangents, scheme: str = "rk4") -> np.ndarray:
    """Parameter gradient of ``sum_k <cot_k, state_k>`` along one recorded trajectory."""
    cot = np.asarray(state_cotangents, dtype=np.float64)
    if cot.shape != traj.states.shape:
        raise ContractError(f"{len(cot)} cotangents for a trajectory of {len(traj)} states")
    gp, _ = backprop_rollout(f, traj.states[None], cot[None], scheme, traj.dt)
    return gp


def write_trajectories_csv(trajectories: Sequence[Trajectory], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["traj_id", "step", "t", "x", "y"])
        for tid, tr in enumerate(trajectories):
            for k, (t, (x, y)) in enumerate(zip(tr.times, tr.states)):
                w.writerow([tid, k, repr(float(t)), repr(float(x)), repr(float(y))])
