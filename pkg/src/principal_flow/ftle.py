"""Finite-time Lyapunov exponents of planar velocity fields.

Grid nodes are advected for a horizon ``T``; at each interior node the flow
map Jacobian is estimated by central differences of the advected
positions over the neighbouring nodes, and

    sigma = (1 / T) * ln(sqrt(lambda_max((DPhi)^T DPhi))).

Boundary nodes (and nodes next to a diverged neighbour) have no central
difference and are reported as NaN.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .integrate import IntegratorSpec, rollout


@dataclass(frozen=True)
class FlowMapJacobian:
    entries: np.ndarray
    cauchy_green: np.ndarray
    lambda_max: float


@dataclass
class FTLEGrid:
    x_coords: np.ndarray
    y_coords: np.ndarray
    sigma: np.ndarray  # shape (nx, ny), indexed [i, j] like (x_i, y_j)
    horizon_T: float

    def interior(self) -> np.ndarray:
        return self.sigma[1:-1, 1:-1]


def make_grid(bounds, nx: int, ny: int) -> np.ndarray:
    """Node positions ``(nx, ny, 2)`` over ``bounds = (xmin, xmax, ymin, ymax)``."""
    xmin, xmax, ymin, ymax = map(float, bounds)
    if nx < 3 or ny < 3:
        raise ContractError(f"grid must be at least 3x3, got {nx}x{ny}")
    if not (xmax > xmin and ymax > ymin):
        raise ContractError(f"degenerate bounds {bounds}")
    xs = np.linspace(xmin, xmax, nx)
    ys = np.linspace(ymin, ymax, ny)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    return np.stack([X, Y], axis=-1)


def advect_grid(f, grid: np.ndarray, spec: IntegratorSpec) -> np.ndarray:
    """Noiseless flow map at every node; diverged nodes come back as NaN."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 3 or grid.shape[0] < 3 or grid.shape[1] < 3 or grid.shape[2] != 2:
        raise ContractError(f"grid must have shape (nx>=3, ny>=3, 2), got {grid.shape}")
    flat = grid.reshape(-1, 2)
    if spec.n_steps == 0:
        return grid.copy()
    with np.errstate(over="ignore", invalid="ignore"):
        end = rollout(f, flat, spec, on_divergence="mark")[:, -1]
    return end.reshape(grid.shape)


def _sym_eig_max(a, b, c):
    """Largest eigenvalue of [[a, b], [b, c]]."""
    half_tr = 0.5 * (a + c)
    disc = np.sqrt((0.5 * (a - c)) ** 2 + b * b)
    return half_tr + disc


def flow_map_jacobian(advected: np.ndarray, grid: np.ndarray, i: int, j: int) -> FlowMapJacobian | None:
    """Central-difference flow map Jacobian at interior node ``(i, j)``; ``None`` if not computable."""
    nx, ny = grid.shape[:2]
    if not (1 <= i <= nx - 2 and 1 <= j <= ny - 2):
        return None
    nb = advected[[i + 1, i - 1, i, i], [j, j, j + 1, j - 1]]
    if not np.all(np.isfinite(nb)):
        return None
    dx0 = grid[i + 1, j, 0] - grid[i - 1, j, 0]
    dy0 = grid[i, j + 1, 1] - grid[i, j - 1, 1]
    J = np.array([
        [(advected[i + 1, j, 0] - advected[i - 1, j, 0]) / dx0, (advected[i, j + 1, 0] - advected[i, j - 1, 0]) / dy0],
        [(advected[i + 1, j, 1] - advected[i - 1, j, 1]) / dx0, (advected[i, j + 1, 1] - advected[i, j - 1, 1]) / dy0],
    ])
    C = J.T @ J
    lam = float(_sym_eig_max(C[0, 0], C[0, 1], C[1, 1]))
    return FlowMapJacobian(J, C, max(lam, 0.0))


def ftle_value(jac: FlowMapJacobian | float, T: float) -> float:
    """``(1/T) ln sqrt(lambda_max)``; ``-inf`` when ``lambda_max`` is 0."""
    if not T > 0:
        raise ContractError(f"horizon T must be positive, got {T}")
    lam = jac.lambda_max if isinstance(jac, FlowMapJacobian) else float(jac)
    if lam < 0:
        raise ContractError(f"lambda_max must be non-negative, got {lam}")
    if lam == 0.0:
        return -math.inf
    return math.log(math.sqrt(lam)) / T


def ftle_from_advected(advected: np.ndarray, grid: np.ndarray, T: float) -> np.ndarray:
    """Vectorized ``flow_map_jacobian`` + ``ftle_value`` over all interior nodes."""
    if not T > 0:
        raise ContractError(f"horizon T must be positive, got {T}")
    A, G = advected, grid
    dx0 = (G[2:, 1:-1, 0] - G[:-2, 1:-1, 0])
    dy0 = (G[1:-1, 2:, 1] - G[1:-1, :-2, 1])
    a11 = (A[2:, 1:-1, 0] - A[:-2, 1:-1, 0]) / dx0
    a21 = (A[2:, 1:-1, 1] - A[:-2, 1:-1, 1]) / dx0
    a12 = (A[1:-1, 2:, 0] - A[1:-1, :-2, 0]) / dy0
    a22 = (A[1:-1, 2:, 1] - A[1:-1, :-2, 1]) / dy0
    c11 = a11 * a11 + a21 * a21
    c12 = a11 * a12 + a21 * a22
    c22 = a12 * a12 + a22 * a22
    lam = np.maximum(_sym_eig_max(c11, c12, c22), 0.0)
    sigma = np.full(G.shape[:2], np.nan)
    with np.errstate(divide="ignore", invalid="ignore"):
        sigma[1:-1, 1:-1] = np.log(np.sqrt(lam)) / T
    return sigma


def ftle_field(f, bounds, nx: int, ny: int, spec: IntegratorSpec) -> FTLEGrid:
    grid = make_grid(bounds, nx, ny)
    T = spec.horizon
    if not T > 0:
        raise ContractError("FTLE needs a positive horizon")
    advected = advect_grid(f, grid, spec)
    sigma = ftle_from_advected(advected, grid, T)
    return FTLEGrid(grid[:, 0, 0].copy(), grid[0, :, 1].copy(), sigma, T)


def ftle_at_points(f, points, h: float, spec: IntegratorSpec) -> np.ndarray:
    """FTLE at arbitrary points, each on its own 3x3 stencil of spacing ``h``."""
    P = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    offs = np.array([-h, 0.0, h])
    OX, OY = np.meshgrid(offs, offs, indexing="ij")
    stencil = np.stack([OX, OY], axis=-1)  # (3, 3, 2)
    grids = P[:, None, None, :] + stencil[None]
    flat = grids.reshape(-1, 2)
    with np.errstate(over="ignore", invalid="ignore"):
        end = rollout(f, flat, spec, on_divergence="mark")[:, -1].reshape(grids.shape)
    return np.array([ftle_from_advected(end[k], grids[k], spec.horizon)[1, 1] for k in range(len(P))])


def write_ftle_csv(grid: FTLEGrid, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["i", "j", "x", "y", "sigma"])
        for i, x in enumerate(grid.x_coords):
            for j, y in enumerate(grid.y_coords):
                s = grid.sigma[i, j]
                w.writerow([i, j, repr(float(x)), repr(float(y)), "" if np.isnan(s) else repr(float(s))])
