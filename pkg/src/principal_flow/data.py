"""Synthetic point clouds ("C", two-branch "Y", three-branch star) and CSV I/O.

Geometry is fixed here:

* ``c_arc``: radius-1 arc centred at the origin covering angles
  [45°, 315°], i.e. a "C" opening to the right;
* ``y_two_branch``: stem from (0, -1) to (0, 0), then two unit branches at
  ±45° from the stem axis;
* ``y_three_branch``: three unit branches from the origin at 90°, 210° and
  330°.

Points are arc-length uniform within each segment, segments get equal
shares of ``n_points`` (±1), and isotropic Gaussian noise is added last.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, FormatError, ParseError
from .loss import DataCloud

SHAPES = ("c_arc", "y_two_branch", "y_three_branch")
DEFAULT_NOISE_STD = 0.05

C_ARC_START = np.pi / 4
C_ARC_END = 7 * np.pi / 4
_S45 = np.sqrt(0.5)

# (start, end) of each straight segment
SEGMENTS = {
    "y_two_branch": [((0.0, -1.0), (0.0, 0.0)), ((0.0, 0.0), (-_S45, _S45)), ((0.0, 0.0), (_S45, _S45))],
    "y_three_branch": [((0.0, 0.0), (np.cos(a), np.sin(a))) for a in np.deg2rad([90.0, 210.0, 330.0])],
}

# where trajectories start for each bundled shape
ANCHORS = {
    "c_arc": (np.cos(C_ARC_START), np.sin(C_ARC_START)),
    "y_two_branch": (0.0, -1.0),
    "y_three_branch": (0.0, 0.0),
}


@dataclass(frozen=True)
class ShapeSpec:
    kind: str = "c_arc"
    n_points: int = 500
    noise_std: float = DEFAULT_NOISE_STD
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SHAPES:
            raise ConfigurationError(f"unknown shape {self.kind!r}; choose from {SHAPES}")
        if int(self.n_points) != self.n_points or self.n_points < 10:
            raise ConfigurationError(f"n_points must be an integer >= 10, got {self.n_points}")
        if not self.noise_std >= 0:
            raise ConfigurationError(f"noise_std must be non-negative, got {self.noise_std}")


def _split_counts(n: int, parts: int) -> list[int]:
    base, extra = divmod(n, parts)
    return [base + (1 if k < extra else 0) for k in range(parts)]


def generate(spec: ShapeSpec) -> DataCloud:
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "c_arc":
        theta = rng.uniform(C_ARC_START, C_ARC_END, size=spec.n_points)
        pts = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    else:
        segs = SEGMENTS[spec.kind]
        chunks = []
        for (a, b), m in zip(segs, _split_counts(spec.n_points, len(segs))):
            s = rng.uniform(0.0, 1.0, size=m)[:, None]
            chunks.append(np.asarray(a) + s * (np.asarray(b) - np.asarray(a)))
        pts = np.concatenate(chunks)
    if spec.noise_std > 0:
        pts = pts + rng.normal(0.0, spec.noise_std, size=pts.shape)
    return DataCloud(pts, spec.kind)


def anchor(kind: str) -> np.ndarray:
    return np.array(ANCHORS[kind], dtype=np.float64)


def save_cloud(cloud: DataCloud, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y"])
        for x, y in cloud.points:
            w.writerow([repr(float(x)), repr(float(y))])


def load_cloud(path, name: str | None = None) -> DataCloud:
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError(f"{path}: empty file, expected header 'x,y'")
    if [c.strip() for c in rows[0]] != ["x", "y"]:
        raise FormatError(f"{path}: missing header 'x,y' (got {','.join(rows[0])!r})")
    pts = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 2:
            raise ParseError(f"{path}: expected 2 fields, got {len(row)}", line=lineno)
        try:
            pts.append((float(row[0]), float(row[1])))
        except ValueError:
            raise ParseError(f"{path}: cannot parse {','.join(row)!r} as numbers", line=lineno) from None
    if not pts:
        raise FormatError(f"{path}: no data rows")
    return DataCloud(np.array(pts), name or path.stem)


def path_extent(points: np.ndarray, start, k: int = 10) -> float:
    """Longest shortest-path distance from ``start`` through a k-nearest-neighbour graph.

    Approximates the arc length a unit-speed trajectory needs to reach the
    far end of the cloud when started at ``start``.
    """
    from scipy.sparse import csr_matrix
    from scipy.sparse.csgraph import dijkstra
    from scipy.spatial import cKDTree

    P = np.vstack([np.asarray(start, dtype=np.float64)[None], np.asarray(points, dtype=np.float64)])
    k = min(k, len(P) - 1)
    dist, idx = cKDTree(P).query(P, k=k + 1)
    rows = np.repeat(np.arange(len(P)), k)
    graph = csr_matrix((dist[:, 1:].ravel(), (rows, idx[:, 1:].ravel())), shape=(len(P), len(P)))
    d = dijkstra(graph, directed=False, indices=0)
    finite = d[np.isfinite(d)]
    return float(finite.max())


def data_diameter(points: np.ndarray) -> float:
    """Largest pairwise distance in the cloud."""
    from scipy.spatial.distance import pdist

    P = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    return float(pdist(P).max()) if len(P) > 1 else 0.0
