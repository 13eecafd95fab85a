"""Losses on simulated states with gradients with respect to those states.

The principal-flow loss is a two-sided nearest-neighbour (Chamfer) distance:

* ``traj_to_data``: mean over simulated states of the distance to the closest
  data point, keeping trajectories on the data;
* ``data_to_traj``: mean over data points of the distance to the closest
  simulated state, making trajectories pass by every data point.

Distances are Euclidean, not squared. Reductions use ``math.fsum`` so values
do not depend on the order of points.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NumericInputError

# below this separation a distance has no direction; its gradient is taken as zero
COINCIDENCE_TOL = 1e-12


@dataclass(frozen=True)
class DataCloud:
    points: np.ndarray
    name: str = "cloud"

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) == 0:
            raise ContractError(f"a data cloud needs a nonempty (N, 2) array, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise NumericInputError("data cloud contains non-finite points")
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)

    def __eq__(self, other):
        if not isinstance(other, DataCloud):
            return NotImplemented
        return self.name == other.name and np.array_equal(self.points, other.points)

    __hash__ = None


@dataclass
class LossBreakdown:
    traj_to_data: float
    data_to_traj: float
    total: float
    state_grads: np.ndarray = field(repr=False)


def _stack_states(simulated) -> np.ndarray:
    if isinstance(simulated, np.ndarray):
        S = np.asarray(simulated, dtype=np.float64)
    else:
        if len(simulated) == 0:
            raise ContractError("need at least one trajectory")
        S = np.stack([np.asarray(getattr(t, "states", t), dtype=np.float64) for t in simulated])
    if S.size == 0 or S.shape[-1] != 2:
        raise ContractError(f"simulated states must be a nonempty (..., 2) array, got {S.shape}")
    return S


def principal_flow_loss(simulated, data: DataCloud) -> LossBreakdown:
    """Two-sided nearest-neighbour loss.

    ``simulated`` is a sequence of trajectories (or an array whose last axis
    is 2); ``state_grads`` has the same shape as the stacked states.
    Ties resolve to the lowest index.
    """
    S = _stack_states(simulated)
    shape = S.shape
    Z = S.reshape(-1, 2)
    X = data.points if isinstance(data, DataCloud) else DataCloud(data).points
    diff = Z[:, None, :] - X[None, :, :]
    D = np.sqrt(diff[..., 0] ** 2 + diff[..., 1] ** 2)
    M, N = D.shape

    nn_data = np.argmin(D, axis=1)
    d1 = D[np.arange(M), nn_data]
    nn_state = np.argmin(D, axis=0)
    d2 = D[nn_state, np.arange(N)]

    term1 = math.fsum(d1.tolist()) / M
    term2 = math.fsum(d2.tolist()) / N

    with np.errstate(divide="ignore", invalid="ignore"):
        u1 = np.where((d1 > COINCIDENCE_TOL)[:, None], diff[np.arange(M), nn_data] / d1[:, None], 0.0)
        u2 = np.where((d2 > COINCIDENCE_TOL)[:, None], diff[nn_state, np.arange(N)] / d2[:, None], 0.0)
    grads = u1 / M
    # several data points may share a nearest state; accumulate in data index order
    np.add.at(grads, nn_state, u2 / N)
    return LossBreakdown(term1, term2, term1 + term2, grads.reshape(shape))


def unit_circle_penalty(traj) -> tuple[float, np.ndarray]:
    """Mean of ``(x² + y² − 1)²`` over states, and its gradient per state."""
    S = np.asarray(getattr(traj, "states", traj), dtype=np.float64)
    if S.size == 0:
        raise ContractError("empty trajectory")
    Z = S.reshape(-1, 2)
    r = Z[:, 0] ** 2 + Z[:, 1] ** 2 - 1.0
    n = len(Z)
    value = math.fsum((r * r).tolist()) / n
    grad = (4.0 / n) * r[:, None] * Z
    return value, grad.reshape(S.shape)


def prc_mse(target, simulated) -> tuple[float, np.ndarray]:
    """Mean squared difference of two PRC curves on the same phase grid.

    Returns the value and ``d value / d simulated.shifts``.
    """
    tp = np.asarray(target.phases)
    sp = np.asarray(simulated.phases)
    if tp.shape != sp.shape or not np.array_equal(tp, sp):
        raise ContractError("PRC curves are sampled on different phase grids")
    diff = np.asarray(simulated.shifts, dtype=np.float64) - np.asarray(target.shifts, dtype=np.float64)
    n = len(diff)
    if n == 0:
        raise ContractError("empty PRC curve")
    return math.fsum((diff * diff).tolist()) / n, 2.0 * diff / n

