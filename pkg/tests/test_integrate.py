import csv

import numpy as np
import pytest

from principal_flow.diffcore import MLPArchitecture, ParamVector
from principal_flow.errors import ContractError
from principal_flow.field import VelocityField, constant_field, rotation_field, zero_field
from principal_flow.integrate import (
    IntegratorSpec, Trajectory, backprop_through_solver, flow_map, simulate_batch, simulate_trajectory,
    step, write_trajectories_csv,
)


def random_field(widths=(2, 8, 2), seed=0, scale=0.8):
    arch = MLPArchitecture(widths)
    rng = np.random.default_rng(seed)
    return VelocityField(ParamVector(scale * rng.standard_normal(arch.n_params), arch))


EPS = 1e-8


def exact_rotation(T):
    # on the unit circle the soft-normalized rotation has speed 1 / (1 + eps)
    a = T / (1.0 + EPS)
    return np.array([np.cos(a), np.sin(a)])


def rotation_error(dt):
    """RK4 error after a quarter turn from (1, 0) on the unit-speed rotation field."""
    n = int(np.ceil((np.pi / 2) / dt))
    end = flow_map(rotation_field(EPS), [1.0, 0.0], IntegratorSpec("rk4", dt, n))
    return np.linalg.norm(end - exact_rotation(n * dt))


@pytest.mark.parametrize("scheme", ["euler", "rk4"])
def test_constant_field_step(scheme):
    assert np.array_equal(step(constant_field(1.0, 0.0), [0.0, 0.0], 0.1, scheme), [0.1, 0.0])


def test_rk4_quarter_turn():
    n = int(np.ceil((np.pi / 2) / 0.01))
    end = flow_map(rotation_field(), [1.0, 0.0], IntegratorSpec("rk4", 0.01, n))
    # the last step overshoots pi/2 by n*dt - pi/2; compare against that exact angle
    T = n * 0.01
    assert np.linalg.norm(end - exact_rotation(T)) < 1e-6
    assert abs(T - np.pi / 2) < 0.01


def test_rk4_fourth_order():
    errs = [rotation_error(dt) for dt in (0.1, 0.05, 0.025)]
    ratios = [errs[0] / errs[1], errs[1] / errs[2]]
    assert all(12 <= r <= 20 for r in ratios), ratios


def test_euler_first_order():
    def err(dt):
        n = int(round(1.0 / dt))
        end = flow_map(rotation_field(), [1.0, 0.0], IntegratorSpec("euler", dt, n))
        return np.linalg.norm(end - exact_rotation(1.0))
    r = err(0.01) / err(0.005)
    assert 1.8 < r < 2.2


def test_flow_map_identity_and_translation():
    assert np.array_equal(flow_map(random_field(), [0.3, 0.4], IntegratorSpec.for_horizon(0.0)), [0.3, 0.4])
    end = flow_map(constant_field(0.0, 1.0), [0.5, -1.0], IntegratorSpec("rk4", 0.05, 40))
    assert np.allclose(end, [0.5, 1.0], atol=1e-12)


@pytest.mark.parametrize("scheme", ["euler", "rk4"])
def test_flow_map_is_last_trajectory_state(scheme):
    f = random_field()
    spec = IntegratorSpec(scheme, 0.05, 17)
    tr = simulate_trajectory(f, [0.2, -0.1], spec)
    assert np.array_equal(flow_map(f, [0.2, -0.1], spec), tr.states[-1])


def test_noiseless_trajectory_is_repeated_step():
    f = random_field(seed=3)
    spec = IntegratorSpec("rk4", 0.1, 6)
    tr = simulate_trajectory(f, [0.1, 0.1], spec)
    z = np.array([0.1, 0.1])
    for k in range(6):
        z = step(f, z, 0.1, "rk4")
        assert np.array_equal(z, tr.states[k + 1])
    assert np.allclose(tr.times, 0.1 * np.arange(7))


def test_noise_reproducible_and_keyed_by_index():
    f = random_field()
    spec = IntegratorSpec("rk4", 0.05, 10)
    a = simulate_trajectory(f, [0, 0], spec, 0.05, seed=4)
    b = simulate_trajectory(f, [0, 0], spec, 0.05, seed=4)
    assert np.array_equal(a.states, b.states)
    batch = simulate_batch(f, [[0, 0], [1, 1], [0, 0]], spec, 0.05, seed=4)
    assert np.allclose(batch[0].states, a.states, atol=1e-13, rtol=0)
    # batched BLAS may differ from the single-row path in the last bits
    assert np.allclose(batch[2].states, simulate_trajectory(f, [0, 0], spec, 0.05, seed=4, traj_index=2).states,
                       atol=1e-13, rtol=0)
    assert not np.array_equal(batch[0].states, batch[2].states)


def test_noise_std_monte_carlo():
    tr = simulate_trajectory(zero_field(), [0.0, 0.0], IntegratorSpec("rk4", 0.05, 10_000), 0.05, seed=11)
    steps = np.diff(tr.states, axis=0)
    assert abs(steps.std() - 0.05) < 0.005
    assert abs(steps.mean()) < 0.005


def test_unit_speed_kinematics():
    f = random_field((2, 16, 16, 2), seed=5, scale=0.5)
    tr = simulate_trajectory(f, [0.2, 0.3], IntegratorSpec("rk4", 0.05, 100))
    speed = np.linalg.norm(np.diff(tr.states, axis=0), axis=1) / 0.05
    assert np.all(np.abs(speed - 1) < 0.05)


def fd_solver_grad(f, x0, spec, cot, h=1e-6):
    arch = f.params.arch
    out = np.zeros(arch.n_params)
    for i in range(arch.n_params):
        e = np.zeros(arch.n_params)
        e[i] = h
        up = simulate_trajectory(VelocityField(ParamVector(f.params.values + e, arch)), x0, spec).states
        dn = simulate_trajectory(VelocityField(ParamVector(f.params.values - e, arch)), x0, spec).states
        out[i] = (np.sum(cot * up) - np.sum(cot * dn)) / (2 * h)
    return out


def test_backprop_zero_cotangents():
    f = random_field()
    tr = simulate_trajectory(f, [0.1, 0.2], IntegratorSpec("rk4", 0.1, 5))
    assert not backprop_through_solver(f, tr, np.zeros_like(tr.states), "rk4").any()


def test_backprop_length_mismatch():
    f = random_field()
    tr = simulate_trajectory(f, [0.1, 0.2], IntegratorSpec("rk4", 0.1, 5))
    with pytest.raises(ContractError):
        backprop_through_solver(f, tr, np.zeros((3, 2)), "rk4")


@pytest.mark.parametrize("scheme,n_steps,widths", [
    ("euler", 5, (2, 8, 2)),
    ("rk4", 5, (2, 8, 2)),
    ("euler", 20, (2, 16, 2)),
    ("rk4", 20, (2, 16, 2)),
    ("rk4", 12, (2, 8, 8, 2)),
])
def test_backprop_matches_finite_differences(scheme, n_steps, widths):
    f = random_field(widths, seed=n_steps)
    spec = IntegratorSpec(scheme, 0.1, n_steps)
    x0 = np.array([0.3, -0.2])
    tr = simulate_trajectory(f, x0, spec)
    cot = np.random.default_rng(1).normal(size=tr.states.shape)
    g = backprop_through_solver(f, tr, cot, scheme)
    fd = fd_solver_grad(f, x0, spec, cot)
    assert np.abs(g - fd).max() / np.abs(fd).max() < 1e-4


def test_schemes_give_different_gradients():
    f = random_field(seed=2)
    x0 = np.array([0.3, -0.2])
    grads = {}
    for scheme in ("euler", "rk4"):
        spec = IntegratorSpec(scheme, 0.2, 5)
        tr = simulate_trajectory(f, x0, spec)
        cot = np.ones_like(tr.states)
        grads[scheme] = backprop_through_solver(f, tr, cot, scheme)
        fd = fd_solver_grad(f, x0, spec, cot)
        assert np.abs(grads[scheme] - fd).max() / np.abs(fd).max() < 1e-4
    assert np.abs(grads["euler"] - grads["rk4"]).max() > 1e-6


def test_backprop_with_recorded_noise():
    f = random_field(seed=8)
    spec = IntegratorSpec("rk4", 0.1, 6)
    x0 = np.array([0.1, 0.4])
    tr = simulate_trajectory(f, x0, spec, noise_sigma=0.05, seed=3)
    cot = np.random.default_rng(2).normal(size=tr.states.shape)
    g = backprop_through_solver(f, tr, cot, "rk4")
    arch = f.params.arch
    h = 1e-6
    fd = np.zeros(arch.n_params)
    for i in range(arch.n_params):
        e = np.zeros(arch.n_params)
        e[i] = h
        up = simulate_trajectory(VelocityField(ParamVector(f.params.values + e, arch)), x0, spec, 0.05, 3).states
        dn = simulate_trajectory(VelocityField(ParamVector(f.params.values - e, arch)), x0, spec, 0.05, 3).states
        fd[i] = (np.sum(cot * up) - np.sum(cot * dn)) / (2 * h)
    assert np.abs(g - fd).max() / np.abs(fd).max() < 1e-4


def test_spec_validation():
    with pytest.raises(Exception):
        IntegratorSpec("midpoint", 0.1, 3)
    with pytest.raises(Exception):
        IntegratorSpec("rk4", 0.0, 3)
    with pytest.raises(ContractError):
        Trajectory(np.zeros((1, 2)), 0.1)


def test_trajectory_csv(tmp_path):
    f = random_field()
    trs = simulate_batch(f, [[0, 0], [1, 0]], IntegratorSpec("rk4", 0.1, 4))
    path = tmp_path / "traj.csv"
    write_trajectories_csv(trs, path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["traj_id", "step", "t", "x", "y"]
    assert len(rows) == 1 + 2 * 5
    assert float(rows[-1][3]) == trs[1].states[-1, 0]
