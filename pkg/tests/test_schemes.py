import warnings

import numpy as np
import pytest
import scipy.linalg

from nvsplit.errors import ConfigError, NumericalFailure, UnsupportedModel
from nvsplit.models import build_model, constant_field, linear_field
from nvsplit.paths import TimeGrid, constant_signs, make_path, make_rademacher
from nvsplit.schemes import (
    RefConfig,
    exact_trajectory,
    reference_solution,
    run_scheme,
    simulate_euler,
    simulate_milstein,
    simulate_nv,
    simulate_nv_commuting,
)
from nvsplit.vecfield import SdeModel


def paths(model, N, M=20, seed=1, T=None):
    return make_path(seed, np.arange(M), model.d, TimeGrid(T or model.T, N))


def commuting_linear_2d():
    # diagonal diffusions commute with each other, the drift does not
    A = np.array([[0.1, 0.4], [-0.3, 0.2]])
    return SdeModel(
        linear_field(A, "b"),
        [linear_field(np.diag([0.3, 0.0]), "s1"), linear_field(np.diag([0.0, 0.5]), "s2")],
        1.0,
        [1.0, 0.5],
        name="diag",
    )


def test_euler_exact_on_constant_fields():
    model = build_model("constant")
    p = paths(model, 32)
    g = TimeGrid(1.0, 32)
    np.testing.assert_allclose(simulate_euler(model, g, p).states, exact_trajectory(model, g, p).states, atol=1e-13)


def test_euler_without_noise_is_matrix_power():
    A = np.array([[0.0, 1.0], [-2.0, -0.3]])
    model = SdeModel(linear_field(A), [constant_field([0.0, 0.0])], 1.0, [1.0, 0.0])
    g = TimeGrid(1.0, 10)
    traj = simulate_euler(model, g, paths(model, 10, M=2))
    step = np.eye(2) + g.h * A
    for k in (1, 5, 10):
        want = np.linalg.matrix_power(step, k) @ model.x0
        np.testing.assert_allclose(traj.states[:, k], np.broadcast_to(want, (2, 2)), rtol=1e-13)


def test_milstein_equals_euler_for_additive_noise():
    model = build_model("linear-1d")
    p = paths(model, 16)
    g = TimeGrid(1.0, 16)
    np.testing.assert_allclose(simulate_milstein(model, g, p).states, simulate_euler(model, g, p).states, atol=1e-12)


def test_milstein_black_scholes_one_step():
    mu, sig = 0.1, 0.4
    model = build_model("bs")
    g = TimeGrid(1.0, 1)
    p = paths(model, 1, M=5)
    dW = p.increments[:, 0, 0]
    want = 1.0 + mu + sig * dW + 0.5 * sig ** 2 * (dW ** 2 - 1.0)
    np.testing.assert_allclose(simulate_milstein(model, g, p).states[:, 1, 0], want, rtol=1e-9)


def test_milstein_rejects_noncommuting():
    model = build_model("noncommuting-2d")
    with pytest.raises(UnsupportedModel):
        simulate_milstein(model, TimeGrid(1.0, 4), paths(model, 4))


def test_nv_without_noise_is_drift_exponential():
    A = np.array([[-0.5, 1.0], [-1.0, -0.2]])
    model = SdeModel(linear_field(A), [constant_field([0.0, 0.0])], 1.0, [1.0, 2.0])
    g = TimeGrid(1.0, 8)
    traj = simulate_nv(model, g, paths(model, 8, M=3), None)
    for k in range(9):
        want = scipy.linalg.expm(g.times[k] * A) @ model.x0
        np.testing.assert_allclose(traj.states[0, k], want, rtol=1e-12, atol=1e-14)


def test_nv_exact_on_constant_fields():
    model = build_model("constant")
    g = TimeGrid(1.0, 8)
    p = paths(model, 8)
    for eta in (None, make_rademacher(3, np.arange(20), 8)):
        np.testing.assert_allclose(simulate_nv(model, g, p, eta).states, exact_trajectory(model, g, p).states, atol=1e-13)


def test_nv_exact_for_black_scholes():
    model = build_model("bs")
    g = TimeGrid(1.0, 16)
    p = paths(model, 16, M=100)
    nv = simulate_nv_commuting(model, g, p).states
    ex = exact_trajectory(model, g, p).states
    assert np.abs(nv - ex).max() <= 1e-12 * np.abs(ex).max()


def test_fixed_order_equals_all_plus_signs():
    model = build_model("noncommuting-2d")
    g = TimeGrid(1.0, 16)
    p = paths(model, 16)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fixed = simulate_nv_commuting(model, g, p).states
    plus = simulate_nv(model, g, p, constant_signs(p.batch, 16, +1)).states
    assert np.array_equal(fixed, plus)


def test_mixed_signs_match_rowwise_constant_signs():
    model = commuting_linear_2d()
    g = TimeGrid(1.0, 8)
    p = paths(model, 8, M=6)
    eta = make_rademacher(2, p.path_indices, 8)
    mixed = simulate_nv(model, g, p, eta).states
    for b in range(6):
        one = simulate_nv(model, g, p.subset([b]), type(eta)(eta.values[[b]], 2, p.path_indices[[b]], eta.stream))
        assert np.array_equal(mixed[b], one.states[0])


def test_sign_choice_irrelevant_when_fields_commute():
    model = commuting_linear_2d()
    g = TimeGrid(1.0, 16)
    p = paths(model, 16)
    plus = simulate_nv(model, g, p, constant_signs(p.batch, 16, +1)).states
    minus = simulate_nv(model, g, p, constant_signs(p.batch, 16, -1)).states
    np.testing.assert_allclose(plus, minus, rtol=1e-13, atol=1e-14)


def test_sign_choice_matters_when_fields_do_not_commute():
    model = build_model("noncommuting-2d")
    g = TimeGrid(1.0, 4)
    p = paths(model, 4)
    plus = simulate_nv(model, g, p, constant_signs(p.batch, 4, +1)).states
    minus = simulate_nv(model, g, p, constant_signs(p.batch, 4, -1)).states
    assert np.abs(plus - minus).max() > 1e-3


def test_second_moment_agrees_between_variants():
    # X1 = 1 + W1, X2 = int X1 dW2, so E[X2_T^2] = T + T^2/2
    model = build_model("noncommuting-2d")
    M, N = 20000, 8
    g = TimeGrid(1.0, N)
    p = paths(model, N, M=M, seed=21)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fixed = simulate_nv_commuting(model, g, p).terminal[:, 1]
    rand = run_scheme("nv-eta", model, g, p).terminal[:, 1]
    for x in (fixed, rand):
        se = np.std(x ** 2) / np.sqrt(M)
        assert abs(np.mean(x ** 2) - 1.5) <= 4 * se
        assert abs(np.mean(x)) <= 4 * np.std(x) / np.sqrt(M)


def test_commuting_variant_warns_on_noncommuting_model():
    model = build_model("noncommuting-2d")
    with pytest.warns(RuntimeWarning, match="do not commute"):
        traj = simulate_nv_commuting(model, TimeGrid(1.0, 4), paths(model, 4))
    assert traj.warnings


def test_grid_coupling_uses_coarsened_increments():
    model = build_model("additive-sin")
    fine = paths(model, 64)
    g = TimeGrid(1.0, 8)
    for name in ("euler", "milstein", "nv"):
        a = run_scheme(name, model, g, fine).states
        b = run_scheme(name, model, g, fine.coarsen(8)).states
        assert np.array_equal(a, b)


def test_horizon_mismatch_rejected():
    model = build_model("bs")
    with pytest.raises(ConfigError):
        simulate_euler(model, TimeGrid(2.0, 4), paths(model, 4))
    with pytest.raises(ConfigError):
        simulate_euler(model, TimeGrid(1.0, 3), paths(model, 8))


def test_eta_shape_checked():
    model = build_model("noncommuting-2d")
    with pytest.raises(ConfigError):
        simulate_nv(model, TimeGrid(1.0, 4), paths(model, 4), constant_signs(3, 4))


def test_steps_shrink_with_h():
    model = build_model("additive-sin")
    for N in (16, 64):
        st = run_scheme("nv", model, TimeGrid(1.0, N), paths(model, N)).states
        jumps = np.abs(np.diff(st[..., 0], axis=1)).max()
        assert jumps <= 6 * np.sqrt(1.0 / N) + 1.0 / N


def test_reference_is_exact_when_available():
    model = build_model("bs")
    g = TimeGrid(1.0, 8)
    p = paths(model, 128)
    ref = reference_solution(model, g, p, RefConfig(16))
    assert np.array_equal(ref.states, exact_trajectory(model, g, p).states)


def test_reference_refinement_converges():
    model = build_model("additive-sin")
    g = TimeGrid(1.0, 8)
    p = paths(model, 8 * 32, M=50)
    r16 = reference_solution(model, g, p, RefConfig(16)).states
    r32 = reference_solution(model, g, p, RefConfig(32)).states
    assert np.sqrt(np.mean(np.max((r16 - r32) ** 2, axis=1))) < 5e-3


def test_reference_requires_divisible_path():
    model = build_model("additive-sin")
    with pytest.raises(ConfigError):
        reference_solution(model, TimeGrid(1.0, 8), paths(model, 64), RefConfig(16))
    with pytest.raises(ConfigError):
        RefConfig(12)


def test_overflow_reported():
    model = SdeModel(linear_field([[40.0]]), [constant_field([0.0])], 1.0, [1e300])
    with pytest.raises(NumericalFailure):
        simulate_euler(model, TimeGrid(1.0, 4), paths(model, 4, M=2))


def test_unknown_scheme():
    model = build_model("bs")
    with pytest.raises(ConfigError):
        run_scheme("rk", model, TimeGrid(1.0, 4), paths(model, 4))


def test_csv_layout():
    model = build_model("noncommuting-2d")
    traj = run_scheme("nv-eta", model, TimeGrid(1.0, 4), paths(model, 4))
    lines = traj.to_csv().splitlines()
    assert lines[0] == "t,x1,x2"
    assert len(lines) == 6
    assert lines[1] == "0,1,0"
    assert [float(v) for v in lines[-1].split(",")] == [1.0, *traj.states[0, -1]]
