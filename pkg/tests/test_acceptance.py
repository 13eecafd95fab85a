"""End-to-end acceptance checks, one PASS/FAIL line per criterion.

The trained models are module-scoped fixtures: the C fit, the Y fit and the
PRC fit each run once (several minutes in total on one CPU core).
"""
import json
import math
import time
import warnings

import numpy as np
import pytest
from scipy.stats import spearmanr

from principal_flow.cli import main
from principal_flow.data import ShapeSpec, anchor, generate
from principal_flow.diffcore import MLPArchitecture, ParamVector, load_checkpoint
from principal_flow.field import VelocityField, constant_field, rotation_field, saddle_field
from principal_flow.ftle import advect_grid, ftle_at_points, ftle_field, make_grid
from principal_flow.integrate import IntegratorSpec, flow_map, rollout
from principal_flow.loss import DataCloud, principal_flow_loss
from principal_flow.prc import fit_prc, phase_grid, simulate_prc, target_prc
from principal_flow.train import TrainConfig, fit_principal_flow, rollout_loss_and_grad, sample_initial_conditions

NOISE_STD = 0.05
# narrow start distribution for the branching fit; see README
Y_INIT_SIGMA = 0.02
PRC_CONFIG = dict(learning_rate=5e-4, n_iterations=2000, grad_clip=1e4, dt=0.1)


@pytest.fixture
def report(capsys):
    def emit(name, ok, detail):
        with capsys.disabled():
            print(f"\n{name} {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail
    return emit


# --- A1 ----------------------------------------------------------------------

def end_to_end_loss(values, arch, Z0, spec, data):
    f = VelocityField(ParamVector(values, arch))
    return principal_flow_loss(rollout(f, Z0, spec), data).total


def test_a1_gradient_integrity(report):
    t0 = time.perf_counter()
    arch = MLPArchitecture((2, 8, 2))
    rng = np.random.default_rng(11)
    p = ParamVector(0.7 * rng.standard_normal(arch.n_params), arch)
    data = DataCloud(generate(ShapeSpec("c_arc", 40, NOISE_STD, 1)).points)
    Z0 = np.array([[0.7, 0.7], [0.6, 0.8]])
    spec = IntegratorSpec("rk4", 0.1, 5)
    _, g = rollout_loss_and_grad(VelocityField(p), Z0, spec, data)
    h = 1e-6
    fd = np.array([(end_to_end_loss(p.values + h * e, arch, Z0, spec, data)
                    - end_to_end_loss(p.values - h * e, arch, Z0, spec, data)) / (2 * h)
                   for e in np.eye(arch.n_params)])
    rel = np.abs(g - fd).max() / np.abs(fd).max()
    elapsed = time.perf_counter() - t0
    report("A1", rel < 1e-4 and elapsed < 10, f"max rel err {rel:.2e}, {elapsed:.2f} s")


# --- A2 ----------------------------------------------------------------------

def brute_force_loss(states, data):
    t1 = [min(math.dist(z, x) for x in data) for z in states]
    t2 = [min(math.dist(z, x) for z in states) for x in data]
    return sum(t1) / len(t1) + sum(t2) / len(t2)


def test_a2_loss_oracle(report):
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(200):
        n_traj, n_states = rng.integers(1, 5), rng.integers(1, 9)
        S = rng.normal(size=(n_traj, n_states, 2))
        X = rng.normal(size=(rng.integers(1, 33), 2))
        got = principal_flow_loss(S, DataCloud(X)).total
        worst = max(worst, abs(got - brute_force_loss(S.reshape(-1, 2).tolist(), X.tolist())))
    report("A2", worst < 1e-12, f"max abs diff {worst:.2e} over 200 instances")


# --- A3 ----------------------------------------------------------------------

def test_a3_integrator_order(report):
    f = rotation_field()
    T, eps = 1.0, 1e-8
    x0 = np.array([1.0, 0.0])
    ang = T / (1 + eps)
    exact = np.array([math.cos(ang), math.sin(ang)])
    errs = []
    for dt in (0.1, 0.05, 0.025):
        end = flow_map(f, x0, IntegratorSpec.for_horizon(T, dt))
        errs.append(np.linalg.norm(end - exact))
    ratios = [errs[0] / errs[1], errs[1] / errs[2]]
    report("A3", all(12 <= r <= 20 for r in ratios), f"error ratios {ratios[0]:.2f}, {ratios[1]:.2f}")


# --- A4 / A8: C shape through the command line -------------------------------

def c_fit_args(data, out):
    a = anchor("c_arc")
    return ["fit", "--data", str(data), "--out", str(out), "--iterations", "2000", "--seed", "0",
            "--init-mean", repr(float(a[0])), repr(float(a[1])), "--no-wall-clock"]


@pytest.fixture(scope="module")
def c_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("c_shape")
    gen = ["gen", "c_arc", "--n", "500", "--noise", str(NOISE_STD), "--seed", "0", "--out", str(root / "data")]
    assert main(gen) == 0
    t0 = time.perf_counter()
    assert main(c_fit_args(root / "data" / "cloud.csv", root / "run1")) == 0
    return root, time.perf_counter() - t0


def read_totals(path):
    lines = path.read_text().splitlines()[1:]
    return np.array([float(line.split(",")[3]) for line in lines])


def test_a4_c_shape_fit(c_run, report):
    root, elapsed = c_run
    params = load_checkpoint(root / "run1" / "model.json")
    cloud = generate(ShapeSpec("c_arc", 500, NOISE_STD, 0))
    a = anchor("c_arc")
    cfg = TrainConfig(init_mean=(a[0], a[1]), seed=0)
    integ = json.loads((root / "run1" / "manifest.json").read_text())["config"]["integrator"]
    spec = IntegratorSpec(**integ)
    # fresh initial conditions, no noise
    states = rollout(VelocityField(params), sample_initial_conditions(cfg, 10_000), spec)
    term1 = principal_flow_loss(states, cloud).traj_to_data
    totals = read_totals(root / "run1" / "train_log.csv")
    lead, trail = totals[:100].mean(), totals[-100:].mean()
    ok = term1 < 2 * NOISE_STD and trail < lead and elapsed < 600
    report("A4", ok, f"mean nearest-data distance {term1:.4f} (< {2 * NOISE_STD}), "
                     f"loss {lead:.4f} -> {trail:.4f}, {elapsed:.0f} s")


def test_a8_determinism(c_run, report):
    root, _ = c_run
    assert main(c_fit_args(root / "data" / "cloud.csv", root / "run2")) == 0
    same = [(root / "run1" / n).read_bytes() == (root / "run2" / n).read_bytes()
            for n in ("train_log.csv", "model.json", "manifest.json")]
    report("A8", all(same), f"training log / checkpoint / manifest identical: {same}")


# --- A5 / A6: Y shape --------------------------------------------------------

@pytest.fixture(scope="module")
def y_model():
    cloud = generate(ShapeSpec("y_two_branch", 500, NOISE_STD, 0))
    a = anchor("y_two_branch")
    cfg = TrainConfig(init_mean=(a[0], a[1]), init_sigma=Y_INIT_SIGMA, seed=0)
    rep = fit_principal_flow(cfg, cloud)
    return VelocityField(rep.final_params), rep.integrator


def test_a5_separatrix(y_model, report):
    f, spec = y_model
    a = anchor("y_two_branch")
    # stem runs along y, so the perpendicular offset is along x
    ends = flow_map(f, [a + [-0.05, 0.0], a + [0.05, 0.0]], spec)
    sep = float(np.linalg.norm(ends[0] - ends[1]))
    ok = sep > 0.5 and ends[0, 0] < 0 < ends[1, 0]
    report("A5", ok, f"terminal points {np.round(ends, 3).tolist()}, separation {sep:.3f}")


def separatrix_band(f, spec, grid, half_width=0.1):
    """Nodes within ``half_width`` of the branch-switch point nearest the stem, rows with -1 <= y <= 0."""
    end_x = advect_grid(f, grid, spec)[..., 0]
    xs, ys = grid[:, 0, 0], grid[0, :, 1]
    band = np.zeros(grid.shape[:2], bool)
    for j, y in enumerate(ys):
        if not -1.0 <= y <= 0.0:
            continue
        side = np.sign(end_x[:, j])
        flips = np.flatnonzero(side[:-1] * side[1:] < 0)
        if len(flips) == 0:
            continue
        k = flips[np.argmin(np.abs(xs[flips]))]
        x_sep = 0.5 * (xs[k] + xs[k + 1])
        band[:, j] = np.abs(xs - x_sep) <= half_width
    return band


def test_a6_ftle(y_model, report):
    spec_t1 = IntegratorSpec("rk4", 0.05, 20)
    sad = ftle_field(saddle_field(), (-1, 1, -1, 1), 50, 50, spec_t1)
    dev = np.abs(sad.interior() - 1.0).max()
    const = ftle_field(constant_field(0.6, 0.8), (-1, 1, -1, 1), 50, 50, spec_t1)
    cmax = np.abs(const.interior()).max()

    f, spec = y_model
    bounds = (-1.5, 1.5, -1.5, 1.5)
    g = ftle_field(f, bounds, 61, 61, spec)
    band = separatrix_band(f, spec, make_grid(bounds, 61, 61))
    ok_nodes = np.isfinite(g.sigma)
    inside = np.max(g.sigma[band & ok_nodes])
    outside = np.median(g.sigma[~band & ok_nodes])
    ok = dev < 0.05 and cmax < 1e-6 and band.any() and inside >= 2 * outside
    report("A6", ok, f"(a) saddle max |sigma-1| {dev:.4f}; (b) constant max |sigma| {cmax:.1e}; "
                     f"(c) band max {inside:.3f} vs outside median {outside:.3f}")


# --- A7: PRC -----------------------------------------------------------------

def test_a7_prc_fit(report):
    t0 = time.perf_counter()
    phases = phase_grid(64)
    target = target_prc(phases)
    cfg = TrainConfig(seed=0, **PRC_CONFIG)
    rep = fit_prc(cfg, target)
    f = VelocityField(rep.final_params)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        sim = simulate_prc(f, phases, relax=rep.relax)
    elapsed = time.perf_counter() - t0
    ratio = np.mean((sim.shifts - target.shifts) ** 2) / np.var(target.shifts)
    one_period = rollout(f, [[1.0, 0.0]], IntegratorSpec.for_horizon(2 * np.pi, 0.05))[0]
    amp_dev = np.mean(np.abs(np.hypot(one_period[:, 0], one_period[:, 1]) - 1.0))
    ring = np.stack([np.cos(phases), np.sin(phases)], axis=1)
    ftle = ftle_at_points(f, ring, 0.01, IntegratorSpec.for_horizon(2 * np.pi, 0.05))
    rho = spearmanr(np.abs(sim.shifts), ftle).correlation
    ok = ratio < 0.1 and amp_dev < 0.05 and rho > 0.3 and elapsed < 1200
    report("A7", ok, f"mse/var {ratio:.4f}, amplitude dev {amp_dev:.4f}, spearman {rho:.3f}, {elapsed:.0f} s")
