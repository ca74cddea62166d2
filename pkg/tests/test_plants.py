"""Plant model tests with hand-computed oracles.

GRN single-step values are worked out by hand from the update rule; steady
states are cross-checked against the closed-form protein balance
x_protein = (beta/c) * x_mrna and the scalar mRNA fixed-point equation.
"""

import json

import numpy as np
import pytest

from deepc_lab.errors import ConfigError, ConvergenceError, DimensionError
from deepc_lab.plants import (
    GRN_BENCHMARK_STEADY_INPUTS,
    GrnParams,
    GrnPlant,
    LtiPlant,
    find_steady_state,
    generate_open_loop,
    grn_benchmark_initial_state,
    grn_benchmark_setpoints,
    grn_output,
    grn_step,
    is_controllable,
    load_plant_config,
    random_controllable_lti,
)


def test_grn_step_hand_computed_from_origin():
    # from x = 0 with u = 1: each mRNA gains 1.6/(1+0) + 1 = 2.6, proteins 0
    p = GrnParams()
    nxt = grn_step(np.zeros(6), np.ones(3), p, np.zeros(6))
    np.testing.assert_allclose(nxt, [2.6, 2.6, 2.6, 0, 0, 0], atol=1e-15)


def test_grn_step_hand_computed_generic_state():
    # x = (1,2,3,4,5,6), u = (0.1,0.2,0.3), default rates. Repressor pairs:
    # mRNA 1 <- protein 6, mRNA 2 <- protein 4, mRNA 3 <- protein 5.
    p = GrnParams()
    x = np.arange(1.0, 7.0)
    u = np.array([0.1, 0.2, 0.3])
    dm1 = -0.16 * 1 + 1.6 / (1 + 36.0) + 0.1
    dm2 = -0.16 * 2 + 1.6 / (1 + 16.0) + 0.2
    dm3 = -0.16 * 3 + 1.6 / (1 + 25.0) + 0.3
    dp4 = -0.06 * 4 + 0.16 * 1
    dp5 = -0.06 * 5 + 0.16 * 2
    dp6 = -0.06 * 6 + 0.16 * 3
    expect = x + np.array([dm1, dm2, dm3, dp4, dp5, dp6])
    np.testing.assert_allclose(grn_step(x, u, p, np.zeros(6)), expect, rtol=1e-14)


def test_grn_step_applies_noise_and_clamps(caplog):
    p = GrnParams(delta=0.1)
    noise = np.full(6, -0.05)
    with caplog.at_level("WARNING"):
        nxt = grn_step(np.zeros(6), np.zeros(3), p, noise)
    # mRNA channels get +1.6 production, proteins would go negative
    assert (nxt >= 0).all()
    np.testing.assert_allclose(nxt[:3], 1.6 - 0.05)
    np.testing.assert_allclose(nxt[3:], 0.0)
    assert any("clamping" in r.message for r in caplog.records)


def test_grn_step_dt_scales_drift():
    p_half = GrnParams(dt=0.5)
    p_full = GrnParams()
    x = np.array([1.0, 0.5, 2.0, 3.0, 1.0, 4.0])
    u = np.array([0.3, 0.3, 0.3])
    drift_full = grn_step(x, u, p_full, np.zeros(6)) - x
    drift_half = grn_step(x, u, p_half, np.zeros(6)) - x
    np.testing.assert_allclose(drift_half, drift_full / 2, rtol=1e-13, atol=1e-15)


def test_grn_output_is_protein_block():
    x = np.arange(6.0)
    np.testing.assert_array_equal(grn_output(x), [3.0, 4.0, 5.0])
    with pytest.raises(DimensionError):
        grn_output(np.zeros(5))


def test_grn_params_validation():
    with pytest.raises(ConfigError):
        GrnParams(K=np.array([1.0, 1.0]))
    with pytest.raises(ConfigError):
        GrnParams(a=np.array([1.6, -1.6, 1.6]))
    with pytest.raises(ConfigError):
        GrnParams(delta=-0.1)
    with pytest.raises(ConfigError):
        GrnParams(dt=0.0)


def test_grn_plant_noise_bounds_and_determinism():
    plant = GrnPlant(GrnParams(delta=0.05))
    x = np.full(6, 2.0)
    u = np.full(3, 0.5)
    base = plant.step(x, u, None)
    devs = []
    for seed in range(20):
        nxt = plant.step(x, u, np.random.default_rng(seed))
        devs.append(np.abs(nxt - base).max())
        assert np.abs(nxt - base).max() <= 0.05 + 1e-12
    assert max(devs) > 0  # noise actually fires
    a = plant.step(x, u, np.random.default_rng(42))
    b = plant.step(x, u, np.random.default_rng(42))
    np.testing.assert_array_equal(a, b)


def grn_fixed_point_residual(m: np.ndarray, u: np.ndarray, p: GrnParams) -> np.ndarray:
    """Scalar steady-state equations after eliminating proteins.

    At a fixed point the protein balance gives x_prot = (beta/c) m, and the
    mRNA channel i must satisfy gamma*m_i = a/(K + ((beta/c) m_j)^2) + u_i
    with j the paired mRNA of the repressing protein.
    """
    ratio = p.beta / p.c
    # protein repressing mRNA i is translated from mRNA pair_map[i]
    pair_map = (2, 0, 1)  # protein 6<-mRNA 3, protein 4<-mRNA 1, protein 5<-mRNA 2
    res = np.empty(3)
    for i in range(3):
        rep = ratio[pair_map[i]] * m[pair_map[i]]
        res[i] = -p.gamma[i] * m[i] + p.a[i] / (p.K[i] + rep**2) + u[i]
    return res


def test_find_steady_state_grn_matches_reduced_equations():
    plant = GrnPlant()
    u = np.full(3, 0.5)
    x = find_steady_state(plant, u, np.concatenate([u / 0.16, u / 0.16 * 2]))
    # one-step invariance
    np.testing.assert_allclose(plant.step(x, u, None), x, atol=1e-9)
    # protein/mRNA ratio is beta/c = 8/3
    np.testing.assert_allclose(x[3:], x[:3] * (0.16 / 0.06), rtol=1e-9)
    # reduced 3-equation system solved
    np.testing.assert_allclose(
        grn_fixed_point_residual(x[:3], u, plant.params), 0, atol=1e-9
    )


def test_find_steady_state_lti_closed_form():
    plant = random_controllable_lti(11)
    u = np.array([0.4, -0.2])
    x = find_steady_state(plant, u, np.zeros(plant.n_x))
    expect = np.linalg.solve(np.eye(plant.n_x) - plant.A, plant.B @ u)
    np.testing.assert_allclose(x, expect, atol=1e-9)


def test_find_steady_state_reports_failure_residual():
    # pure integrator with constant push has no fixed point
    plant = LtiPlant(np.eye(1), np.ones((1, 1)), np.eye(1))
    with pytest.raises(ConvergenceError) as exc:
        find_steady_state(plant, np.array([1.0]), np.zeros(1))
    assert exc.value.residual > 0
    assert "residual" in str(exc.value)


def test_lti_plant_shapes_and_feedthrough():
    with pytest.raises(DimensionError):
        LtiPlant(np.zeros((2, 2)), np.zeros((3, 1)), np.zeros((1, 2)))
    plant = LtiPlant(np.eye(2) * 0.5, np.ones((2, 1)), np.ones((1, 2)), np.ones((1, 1)))
    y = plant.output(np.array([1.0, 2.0]), np.array([3.0]))
    np.testing.assert_allclose(y, [6.0])
    with pytest.raises(DimensionError):
        plant.output(np.array([1.0, 2.0]))  # D != 0 needs the input


def test_controllability_known_cases():
    double_integrator = LtiPlant(np.array([[1.0, 1.0], [0.0, 1.0]]),
                                 np.array([[0.0], [1.0]]), np.eye(2))
    assert is_controllable(double_integrator)
    decoupled = LtiPlant(np.diag([0.5, 0.4]), np.array([[1.0], [0.0]]), np.eye(2))
    assert not is_controllable(decoupled)


def test_random_controllable_lti_properties():
    plant = random_controllable_lti(3, n_x=4, n_u=2, n_y=3)
    assert (plant.n_x, plant.n_u, plant.n_y) == (4, 2, 3)
    assert is_controllable(plant)
    assert max(abs(np.linalg.eigvals(plant.A))) <= 0.9 + 1e-12


def test_generate_open_loop_structure_and_replay():
    plant = GrnPlant()
    x0 = grn_benchmark_initial_state()
    u, y = generate_open_loop(plant, x0, steps=50, hold=7,
                              input_box=(np.zeros(3), np.ones(3)), seed=9)
    assert u.data.shape == (3, 50) and y.data.shape == (3, 50)
    assert (u.data >= 0).all() and (u.data <= 1).all()
    # piecewise constant with the requested hold
    for t in range(50):
        np.testing.assert_array_equal(u.data[:, t], u.data[:, t - t % 7])
    # level changes actually happen
    assert np.abs(np.diff(u.data, axis=1)).max() > 0
    # outputs replay under manual simulation with the same inputs
    x = x0.copy()
    for t in range(50):
        np.testing.assert_allclose(y.data[:, t], grn_output(x), atol=1e-12)
        x = plant.step(x, u.data[:, t], None)
    # deterministic in the seed
    u2, y2 = generate_open_loop(plant, x0, steps=50, hold=7,
                                input_box=(np.zeros(3), np.ones(3)), seed=9)
    np.testing.assert_array_equal(u.data, u2.data)
    np.testing.assert_array_equal(y.data, y2.data)


def test_generate_open_loop_validates_box_and_hold():
    plant = GrnPlant()
    x0 = np.ones(6)
    with pytest.raises(ConfigError):
        generate_open_loop(plant, x0, 10, 3, (np.ones(3), np.zeros(3)), seed=0)
    with pytest.raises(ConfigError):
        generate_open_loop(plant, x0, 10, 0, (np.zeros(3), np.ones(3)), seed=0)
    with pytest.raises(ConfigError):
        generate_open_loop(plant, x0, 10, 3, (np.zeros(2), np.ones(2)), seed=0)


def test_benchmark_setpoints_are_fixed_points_within_boxes():
    plant = GrnPlant()
    pairs = grn_benchmark_setpoints()
    assert len(pairs) == 4
    for u_ss, x_ss in pairs:
        np.testing.assert_allclose(plant.step(x_ss, u_ss, None), x_ss, atol=1e-9)
        np.testing.assert_allclose(x_ss[3:], x_ss[:3] * (0.16 / 0.06), rtol=1e-8)
        assert (u_ss >= 0).all() and (u_ss <= 1).all()
        assert (x_ss[3:] > 0).all() and (x_ss[3:] < 50).all()
    np.testing.assert_array_equal(
        np.array([u for u, _ in pairs]), GRN_BENCHMARK_STEADY_INPUTS
    )


def test_benchmark_initial_state_is_fixed_point():
    plant = GrnPlant()
    x0 = grn_benchmark_initial_state()
    np.testing.assert_allclose(plant.step(x0, np.full(3, 0.5), None), x0, atol=1e-9)


def test_load_plant_config_grn_and_lti(tmp_path):
    grn_cfg = tmp_path / "grn.json"
    grn_cfg.write_text(json.dumps({"kind": "grn", "noise": {"delta": 0.02}}))
    plant, ubox, ybox = load_plant_config(grn_cfg)
    assert isinstance(plant, GrnPlant)
    assert plant.params.delta == 0.02
    np.testing.assert_array_equal(ubox[0], np.zeros(3))
    np.testing.assert_array_equal(ybox[1], np.full(3, 50.0))

    lti_cfg = tmp_path / "lti.json"
    lti_cfg.write_text(json.dumps({
        "kind": "lti",
        "params": {"A": [[0.5]], "B": [[1.0]], "C": [[1.0]]},
        "input_box": {"lb": [-1.0], "ub": [1.0]},
    }))
    plant, ubox, ybox = load_plant_config(lti_cfg)
    assert isinstance(plant, LtiPlant)
    assert ybox is None
    np.testing.assert_array_equal(ubox[1], [1.0])

    ext_cfg = tmp_path / "ext.json"
    ext_cfg.write_text(json.dumps({
        "kind": "external",
        "input_box": {"lb": [0.0], "ub": [2.0]},
    }))
    plant, ubox, _ = load_plant_config(ext_cfg)
    assert plant is None and ubox[1][0] == 2.0

    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"kind": "what"}))
    with pytest.raises(ConfigError):
        load_plant_config(bad)
