import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pdecq.bases import cq_basis, pde_basis
from pdecq.cli import warmup_family
from pdecq.curves import sample_ensemble
from pdecq.optpde import (
    LinearFamily,
    LossConfig,
    angular_distance,
    cartesian_to_spherical,
    cosine_lr,
    initial_angles,
    load_search,
    loss_and_gradient,
    loss_value,
    optimize,
    run_search,
    smoothed_ncq,
    smoothed_ncq_grad,
    spherical_jacobian,
    spherical_to_cartesian,
    vanishing_count,
)
from pdecq.symbolic import parse


@pytest.fixture(scope="module")
def ens():
    return sample_ensemble(seed=0, P=60, N_p=600)


@pytest.fixture(scope="module")
def family33(ens):
    return LinearFamily.from_bases(pde_basis("cubic33"), cq_basis("burgers-kdv"), ens)


# -- smoothed count -----------------------------------------------------------


def test_smoothed_count_examples():
    assert smoothed_ncq([1.0]) == pytest.approx(0.5)
    assert smoothed_ncq([1e-30, 1e30], B=1.0) == pytest.approx(1.0)
    assert smoothed_ncq([0.0, 0.0, 1.0]) == pytest.approx(2.5)
    # A shifts the threshold
    assert smoothed_ncq([math.e], A=1.0) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        smoothed_ncq([1.0], B=0)


@given(st.lists(st.floats(1e-12, 1e12), min_size=1, max_size=8), st.floats(0.1, 10))
def test_smoothed_count_bounds_and_monotone(s, B):
    s = np.array(s)
    n = smoothed_ncq(s, B=B)
    assert 0 <= n <= s.size
    assert smoothed_ncq(s * 2, B=B) <= n + 1e-12
    assert np.all(smoothed_ncq_grad(s, B=B) <= 0)


def test_smoothed_count_gradient_fd():
    s = np.array([1e-3, 0.5, 2.0])
    g = smoothed_ncq_grad(s, A=0.3, B=0.7)
    for i in range(3):
        h = 1e-4 * s[i]
        e = np.zeros(3)
        e[i] = h
        fd = (smoothed_ncq(s + e, 0.3, 0.7) - smoothed_ncq(s - e, 0.3, 0.7)) / (2 * h)
        assert g[i] == pytest.approx(fd, rel=1e-6)


# -- sphere -------------------------------------------------------------------


def test_spherical_small_cases():
    np.testing.assert_allclose(spherical_to_cartesian([0.3]), [math.cos(0.3), math.sin(0.3)])
    phi = [0.4, 1.1]
    s0, c0 = math.sin(0.4), math.cos(0.4)
    expected = [c0, s0 * math.cos(1.1), s0 * math.sin(1.1)]
    np.testing.assert_allclose(spherical_to_cartesian(phi), expected)
    np.testing.assert_allclose(spherical_to_cartesian([]), [1.0])


@given(st.lists(st.floats(-10, 10), min_size=2, max_size=12).filter(lambda v: np.linalg.norm(v) > 1e-3))
def test_spherical_roundtrip(c):
    c = np.array(c)
    r, phi = cartesian_to_spherical(c)
    assert r == pytest.approx(np.linalg.norm(c))
    np.testing.assert_allclose(r * spherical_to_cartesian(phi), c, atol=1e-12 * max(1, r))


@given(st.lists(st.floats(0, 2 * math.pi), min_size=1, max_size=10))
def test_unit_norm_and_jacobian(phi):
    phi = np.array(phi)
    assert np.linalg.norm(spherical_to_cartesian(phi)) == pytest.approx(1.0)
    J = spherical_jacobian(phi)
    h = 1e-6
    for j in range(phi.size):
        e = np.zeros_like(phi)
        e[j] = h
        fd = (spherical_to_cartesian(phi + e) - spherical_to_cartesian(phi - e)) / (2 * h)
        np.testing.assert_allclose(J[:, j], fd, atol=1e-8)


def test_zero_vector_rejected():
    with pytest.raises(ValueError):
        cartesian_to_spherical(np.zeros(3))


def test_sphere_init_is_uniform_over_coordinates():
    rng = np.random.default_rng(0)
    C = np.array([spherical_to_cartesian(initial_angles(10, rng, "sphere")) for _ in range(4000)])
    mean_sq = (C**2).mean(axis=0)
    np.testing.assert_allclose(mean_sq, 0.1, atol=0.015)
    # uniform angles concentrate on the first coordinates
    A = np.array([spherical_to_cartesian(initial_angles(10, rng, "angles")) for _ in range(4000)])
    assert (A[:, 0] ** 2).mean() > 0.4
    with pytest.raises(ValueError):
        initial_angles(3, rng, "cube")


def test_angular_distance():
    assert angular_distance([1, 0], [0, 2]) == pytest.approx(math.pi / 2)
    assert angular_distance([1, 0], [-1, 0]) == pytest.approx(0)
    assert angular_distance([1, 0], [-1, 0], antipodal=False) == pytest.approx(math.pi)


def test_cosine_schedule():
    cfg = LossConfig(learning_rate=1.0, T_max=10)
    assert cosine_lr(0, cfg) == 1.0
    assert cosine_lr(5, cfg) == pytest.approx(0.5)
    assert cosine_lr(10, cfg) == 1.0


@pytest.mark.parametrize("bad", [{"B": 0}, {"epochs": 0}, {"learning_rate": -1}, {"optimizer": "lbfgs"}])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        LossConfig(**bad)


# -- loss and gradient --------------------------------------------------------


def test_gradient_matches_central_differences(family33):
    cfg = LossConfig(B=3.0)
    rng = np.random.default_rng(42)
    for _ in range(20):
        phi = initial_angles(family33.n_terms, rng, "sphere")
        _, g = loss_and_gradient(phi, family33, cfg)
        h = 1e-6
        fd = np.array(
            [
                (loss_value(phi + h * e, family33, cfg) - loss_value(phi - h * e, family33, cfg)) / (2 * h)
                for e in np.eye(phi.size)
            ]
        )
        assert np.linalg.norm(g - fd) <= 1e-4 * np.linalg.norm(fd)


def test_loss_is_antipodal_and_bounded(family33):
    cfg = LossConfig(B=3.0)
    rng = np.random.default_rng(1)
    for _ in range(5):
        c = spherical_to_cartesian(initial_angles(family33.n_terms, rng, "sphere"))
        _, phi = cartesian_to_spherical(c)
        _, phi_neg = cartesian_to_spherical(-c)
        a, b = loss_value(phi, family33, cfg), loss_value(phi_neg, family33, cfg)
        assert a == pytest.approx(b, rel=1e-10)
        assert -family33.K <= a <= 0


def test_single_term_family_has_empty_gradient(ens):
    fam = LinearFamily.from_bases([parse("u_xxx")], cq_basis("burgers-kdv"), ens)
    loss, g = loss_and_gradient(np.zeros(0), fam, LossConfig())
    assert g.shape == (0,)
    assert np.isfinite(loss)


def test_warmup_gradient_points_toward_zero(ens):
    fam = warmup_family(ens, cq_basis("burgers-kdv"))
    cfg = LossConfig(B=1.0)
    _, g_pos = loss_and_gradient([1.0], fam, cfg)
    _, g_neg = loss_and_gradient([-1.0], fam, cfg)
    assert g_pos[0] > 0 > g_neg[0]
    assert loss_value([0.0], fam, cfg) < loss_value([1.0], fam, cfg)


def test_third_derivative_is_stationary(family33):
    # u_t = u_xxx sits in a deep well of the loss
    idx = pde_basis("cubic33").index(parse("u_xxx"))
    c = np.zeros(family33.n_terms)
    c[idx] = 1.0
    _, phi = cartesian_to_spherical(c)
    cfg = LossConfig(B=3.0, epochs=1000, learning_rate=1e-2, T_max=1000, optimizer="adam")
    res = optimize(phi, family33, cfg)
    assert angular_distance(res.final_coefficients, c) < 0.1
    assert res.losses.shape == (1001,)


def test_loss_is_near_stationary_at_third_derivative(family33):
    # the well is a cusp in log sigma; at the default sharpness B the loss
    # barely moves while the optimizer circles it
    c = np.zeros(family33.n_terms)
    c[pde_basis("cubic33").index(parse("u_xxx"))] = 1.0
    _, phi = cartesian_to_spherical(c)
    res = optimize(phi, family33, LossConfig(epochs=1000))
    assert abs(res.losses[-1] - res.losses[0]) < 0.1


def test_vanishing_count():
    assert vanishing_count([0.0, 0.0], 1.0) == 2
    assert vanishing_count([1e-12, 1.0], 1.0) == 1
    assert vanishing_count([1e-9, 1e-9], 1.0) == 2


def test_record_params(family33):
    cfg = LossConfig(B=3.0, epochs=5, T_max=5)
    phi = initial_angles(family33.n_terms, np.random.default_rng(0), "sphere")
    res, hist = optimize(phi, family33, cfg, record_params=True)
    assert hist.shape == (6, phi.size)
    np.testing.assert_array_equal(hist[-1], res.final_params)


# -- search -------------------------------------------------------------------


def test_search_deterministic_and_resumable(family33, tmp_path):
    cfg = LossConfig(B=3.0, epochs=20, T_max=20, optimizer="adam", learning_rate=1e-2)
    a = run_search(4, family33, cfg, seed=5, out_dir=tmp_path / "a", init="sphere")
    b = run_search(4, family33, cfg, seed=5, out_dir=tmp_path / "b", workers=2, init="sphere")
    for name in sorted(p.name for p in (tmp_path / "a").iterdir()):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    # delete one restart and resume
    (tmp_path / "a" / "restart_00002.json").unlink()
    c = run_search(4, family33, cfg, seed=5, out_dir=tmp_path / "a", init="sphere")
    np.testing.assert_array_equal(c.coefficient_matrix(), a.coefficient_matrix())
    loaded = load_search(tmp_path / "a")
    assert loaded.metadata["seed"] == 5
    np.testing.assert_array_equal(loaded.coefficient_matrix(), b.coefficient_matrix())
    assert json.loads((tmp_path / "a" / "search.json").read_text())["init"] == "sphere"


def test_search_refuses_mismatched_directory(family33, tmp_path):
    cfg = LossConfig(B=3.0, epochs=2, T_max=2)
    run_search(1, family33, cfg, seed=0, out_dir=tmp_path)
    with pytest.raises(ValueError):
        run_search(1, family33, cfg, seed=1, out_dir=tmp_path)


def test_search_argument_checks(family33, ens):
    cfg = LossConfig(epochs=1, T_max=1)
    with pytest.raises(ValueError):
        run_search(0, family33, cfg, seed=0)
    with pytest.raises(ValueError):
        run_search(1, warmup_family(ens, cq_basis("burgers-kdv")), cfg, seed=0)
    with pytest.raises(FileNotFoundError):
        load_search("/nonexistent/search")


def test_full_basis_prefers_first_derivative():
    # with u_x available, most restarts collapse onto u_t = u_x
    ens = sample_ensemble(seed=0, P=50, N_p=600)
    basis = pde_basis("cubic34")
    fam = LinearFamily.from_bases(basis, cq_basis("burgers-kdv"), ens)
    cfg = LossConfig(B=3.0, epochs=500, learning_rate=1e-2, T_max=500, optimizer="adam")
    res = run_search(20, fam, cfg, seed=0, workers=4, init="sphere")
    ux = np.array([1.0 if b == parse("u_x") else 0.0 for b in basis])
    near = sum(angular_distance(r.final_coefficients, ux) < 0.1 for r in res.successful())
    assert near > 10


def test_smoothed_count_limits():
    # sigma = 1/e and e sit symmetrically about the threshold
    assert smoothed_ncq([math.exp(-1), math.e]) == pytest.approx(1.0, abs=1e-15)
    # B -> 0 approaches a hard count of sigma below exp(A)
    assert smoothed_ncq([0.5, 0.9, 1.1, 2.0], B=1e-3) == pytest.approx(2.0, abs=1e-12)


def test_spherical_axis_cases():
    np.testing.assert_allclose(spherical_to_cartesian([0.0]), [1.0, 0.0])
    np.testing.assert_allclose(spherical_to_cartesian([math.pi / 2, math.pi / 2]), [0, 0, 1], atol=1e-16)


def test_spherical_roundtrip_full_basis_size():
    c = np.random.default_rng(1).normal(size=33)
    c /= np.linalg.norm(c)
    _, phi = cartesian_to_spherical(c)
    assert phi.size == 32
    assert np.abs(spherical_to_cartesian(phi) - c).max() < 1e-12


def test_single_term_trajectory_is_constant(ens):
    fam = LinearFamily.from_bases([parse("u_xxx")], cq_basis("burgers-kdv"), ens)
    res = optimize(np.zeros(0), fam, LossConfig(B=3.0, epochs=20, T_max=20))
    np.testing.assert_array_equal(res.losses, res.losses[0])
    np.testing.assert_array_equal(res.final_coefficients, [1.0])


def test_two_restarts_repeat_exactly(family33):
    cfg = LossConfig(B=3.0, epochs=10, T_max=10, optimizer="adam", learning_rate=1e-2)
    a = run_search(2, family33, cfg, seed=11)
    b = run_search(2, family33, cfg, seed=11)
    np.testing.assert_array_equal(a.coefficient_matrix(), b.coefficient_matrix())
    for ra, rb in zip(a.restarts, b.restarts):
        np.testing.assert_array_equal(ra.losses, rb.losses)
