"""Unit-speed velocity fields.

Integrators and the FTLE code only rely on the small evaluation interface
shared by :class:`VelocityField` and :class:`AnalyticField`:

``velocity(X)``
    batched evaluation, ``(B, 2) -> (B, 2)``;
``velocity_cached(X)`` / ``velocity_backward(cache, cot)``
    forward pass with saved intermediates and its reverse pass returning
    ``(grad_params, grad_X)``; only needed for training.

Neither takes a time argument: fields are autonomous by construction.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .diffcore import ParamVector, _as_batch, backward, forward_cached
from .errors import ConfigurationError, ContractError, NumericFailureError

DEFAULT_EPSILON = 1e-8


def _normalize(R: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray]:
    n = np.sqrt(R[:, 0] * R[:, 0] + R[:, 1] * R[:, 1])
    return R / (n + eps)[:, None], n


def _normalize_vjp(R: np.ndarray, n: np.ndarray, eps: float, C: np.ndarray) -> np.ndarray:
    # d(v/(|v|+e)) = dv/(|v|+e) - v vᵀ dv / (|v| (|v|+e)²); rank-1 term dropped at |v| = 0
    denom = n + eps
    rc = R[:, 0] * C[:, 0] + R[:, 1] * C[:, 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        coef = np.where(n > 0.0, rc / (n * denom * denom), 0.0)
    return C / denom[:, None] - R * coef[:, None]


@dataclass(frozen=True)
class VelocityField:
    """``x -> g(x) / (|g(x)| + epsilon)`` for the network ``g`` given by ``params``."""

    params: ParamVector
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigurationError(f"epsilon must be positive, got {self.epsilon}")

    def raw(self, X: np.ndarray) -> np.ndarray:
        out, _ = forward_cached(self.params, X)
        return out

    def velocity(self, X: np.ndarray) -> np.ndarray:
        return self.velocity_cached(X)[0]

    def velocity_cached(self, X: np.ndarray):
        R, acts = forward_cached(self.params, X)
        if not np.all(np.isfinite(R)):
            bad = int(np.flatnonzero(~np.all(np.isfinite(R), axis=1))[0])
            raise NumericFailureError(f"non-finite network output at {X[bad]}", location=X[bad].copy())
        V, n = _normalize(R, self.epsilon)
        return V, (acts, R, n)

    def velocity_backward(self, cache, C: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        acts, R, n = cache
        return backward(self.params, acts, _normalize_vjp(R, n, self.epsilon, C))

    def with_params(self, params: ParamVector) -> "VelocityField":
        return VelocityField(params, self.epsilon)


def eval_field(f, x) -> np.ndarray:
    X, single = _as_batch(x)
    V = f.velocity(X)
    return V[0] if single else V


def eval_field_vjp(f: VelocityField, x, cotangent) -> tuple[np.ndarray, np.ndarray]:
    X, single = _as_batch(x)
    C = np.asarray(cotangent, dtype=np.float64).reshape(X.shape)
    _, cache = f.velocity_cached(X)
    gp, gx = f.velocity_backward(cache, C)
    return gp, (gx[0] if single else gx)


class AnalyticField:
    """Closed-form field for oracle tests and CLI test hooks.

    ``fn`` maps a ``(B, 2)`` array to velocities. When ``normalize`` is set the
    output is divided by ``|v| + epsilon`` exactly like a learned field.
    No parameters, so it cannot be trained.
    """

    params = None

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], normalize: bool = True,
                 epsilon: float = DEFAULT_EPSILON, name: str = "analytic"):
        self.fn = fn
        self.normalize = normalize
        self.epsilon = epsilon
        self.name = name

    def velocity(self, X: np.ndarray) -> np.ndarray:
        V = np.asarray(self.fn(X), dtype=np.float64)
        if self.normalize:
            V, _ = _normalize(V, self.epsilon)
        return V

    def velocity_cached(self, X):
        return self.velocity(X), None

    def velocity_backward(self, cache, C):
        raise ContractError(f"analytic field {self.name!r} has no trainable parameters")

    def __repr__(self):
        return f"AnalyticField({self.name!r}, normalize={self.normalize})"


def rotation_field(epsilon: float = DEFAULT_EPSILON) -> AnalyticField:
    """Counter-clockwise unit-speed rotation about the origin."""
    return AnalyticField(lambda X: np.stack([-X[:, 1], X[:, 0]], axis=1), True, epsilon, "rotation")


def rigid_rotation_field() -> AnalyticField:
    """Rotation ``(-y, x)`` without normalization: angular speed 1 at every radius."""
    return AnalyticField(lambda X: np.stack([-X[:, 1], X[:, 0]], axis=1), False, name="rigid_rotation")


def constant_field(vx: float = 1.0, vy: float = 0.0) -> AnalyticField:
    c = np.array([vx, vy], dtype=np.float64)
    return AnalyticField(lambda X: np.broadcast_to(c, X.shape).copy(), False, name="constant")


def zero_field() -> AnalyticField:
    return AnalyticField(lambda X: np.zeros_like(X), False, name="zero")


def saddle_field() -> AnalyticField:
    """Linear saddle ``(x, -y)`` without normalization."""
    return AnalyticField(lambda X: np.stack([X[:, 0], -X[:, 1]], axis=1), False, name="saddle")


ANALYTIC_FIELDS = {
    "rotation": rotation_field,
    "rigid_rotation": rigid_rotation_field,
    "constant": constant_field,
    "zero": zero_field,
    "saddle": saddle_field,
}
