import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from nikodym_lab.errors import ChartDomainError, ConstructionError
from nikodym_lab.metric import (
    CustomCometric,
    Flat,
    PerturbationProfile,
    build_perturbed,
    cometric_eval,
    cometric_partials,
    constant_curvature,
    coupling_pairs,
    fd_partials,
    normal_dim,
    parity_of,
    positivity_threshold,
    submanifold_dim,
    synthetic_taylor,
)


@pytest.fixture(scope="module")
def taylor5():
    return synthetic_taylor(5, seed=0, amplitude=0.4)


@pytest.fixture(scope="module")
def taylor4():
    return synthetic_taylor(4, seed=1, amplitude=0.3)


def random_points(dim, count, seed=0, scale=0.45):
    return np.random.default_rng(seed).uniform(-scale, scale, (count, dim))


# --- dimensions -------------------------------------------------------------


@pytest.mark.parametrize("dim,n_sub,m,parity", [(3, 2, 1, "odd"), (4, 3, 1, "even"),
                                                (5, 3, 2, "odd"), (6, 4, 2, "even")])
def test_dimension_split(dim, n_sub, m, parity):
    assert submanifold_dim(dim) == n_sub
    assert normal_dim(dim) == m
    assert parity_of(dim) == parity


def test_coupling_pairs_pair_tangential_with_normal_slots():
    assert coupling_pairs(3) == [(1, 2)]
    assert coupling_pairs(5) == [(1, 3), (2, 4)]
    assert coupling_pairs(4) == [(2, 3)]


# --- perturbation profile ----------------------------------------------------


def test_profile_vanishes_for_nonpositive_arguments():
    prof = PerturbationProfile(0.3, 0.05)
    t = -np.linspace(0, 0.5, 101)
    assert np.all(prof.alpha(t) == 0.0)
    assert np.all(prof.alpha_prime(t) == 0.0)
    assert np.all(prof.alpha_antiderivative(t) == 0.0)


def test_profile_is_positive_and_bounded_for_positive_arguments():
    prof = PerturbationProfile(0.3, 0.05)
    t = np.linspace(1e-3, 0.5, 400)
    a = prof.alpha(t)
    assert np.all(a > 0)
    assert np.all(a < 0.3)


@given(st.floats(0.005, 0.5), st.floats(0.001, 0.2))
@settings(max_examples=40, deadline=None)
def test_antiderivative_matches_quadrature(t, scale):
    prof = PerturbationProfile(0.7, scale)
    ref, _ = integrate.quad(lambda u: float(prof.alpha(np.array([u]))[0]), 0.0, t,
                            epsabs=1e-14, epsrel=1e-12)
    got = float(prof.alpha_antiderivative(np.array([t]))[0])
    assert got == pytest.approx(ref, rel=1e-8, abs=1e-15)


def test_alpha_prime_matches_central_difference():
    prof = PerturbationProfile(0.5, 0.05)
    t = np.linspace(0.01, 0.4, 50)
    h = 1e-6
    fd = (prof.alpha(t + h) - prof.alpha(t - h)) / (2 * h)
    np.testing.assert_allclose(prof.alpha_prime(t), fd, rtol=1e-6)


@pytest.mark.parametrize("eps,scale", [(-0.1, 0.05), (float("nan"), 0.05), (0.1, 0.0)])
def test_profile_rejects_bad_parameters(eps, scale):
    with pytest.raises(ConstructionError):
        PerturbationProfile(eps, scale)


# --- flat and constant curvature ----------------------------------------------


@given(st.lists(st.floats(-0.49, 0.49), min_size=3, max_size=3))
def test_flat_is_identity_with_zero_partials(x):
    model = Flat(3)
    np.testing.assert_array_equal(cometric_eval(model, x), np.eye(3))
    np.testing.assert_array_equal(cometric_partials(model, x), np.zeros((3, 3, 3)))


@pytest.mark.parametrize("K", [-1.0, 1.0])
def test_constant_curvature_partials_match_finite_differences(K):
    model = constant_curvature(3, K, delta0=0.3)
    x = random_points(3, 20, seed=2, scale=0.28)
    np.testing.assert_allclose(model.partials(x), fd_partials(model, x), atol=1e-8)


def test_zero_curvature_delegates_to_flat():
    assert isinstance(constant_curvature(4, 0.0), Flat)


def test_hyperbolic_chart_must_fit():
    with pytest.raises(ConstructionError):
        constant_curvature(3, -1.0, delta0=0.6)


def test_points_outside_chart_are_rejected():
    with pytest.raises(ChartDomainError):
        cometric_eval(Flat(3), [0.6, 0.0, 0.0])


# --- Taylor models -------------------------------------------------------------


@pytest.mark.parametrize("fixture", ["taylor5", "taylor4"])
def test_taylor_cometric_is_exactly_symmetric(fixture, request):
    model = request.getfixturevalue(fixture)
    G = model.cometric(random_points(model.dim, 200))
    assert np.array_equal(G, G.transpose(0, 2, 1))


def test_taylor_on_submanifold_is_block_diagonal(taylor5):
    x = random_points(5, 50, seed=3)
    x[:, 3:] = 0.0
    G = taylor5.cometric(x)
    gt = taylor5.gtilde.value(x)
    expect = np.zeros_like(G)
    expect[:, 0, 0] = 1.0
    expect[:, 1:3, 1:3] = gt
    expect[:, 3:, 3:] = np.eye(2)
    np.testing.assert_allclose(G, expect, atol=1e-15)


@pytest.mark.parametrize("fixture", ["taylor5", "taylor4"])
def test_taylor_partials_match_finite_differences(fixture, request):
    model = request.getfixturevalue(fixture)
    x = random_points(model.dim, 100, seed=4)
    an = model.partials(x)
    fd = fd_partials(model, x)
    assert np.max(np.abs(an - fd)) <= 1e-5 * np.max(np.abs(an))


def test_taylor_is_totally_geodesic(taylor5):
    x = random_points(5, 100, seed=5)
    x[:, 3:] = 0.0
    P = fd_partials(taylor5, x)
    assert np.max(np.abs(P[:, :3, :3, 3:])) <= 1e-8


@pytest.mark.parametrize("fixture", ["taylor5", "taylor4"])
def test_taylor_field_matches_generic_contraction(fixture, request):
    model = request.getfixturevalue(fixture)
    rng = np.random.default_rng(6)
    x = random_points(model.dim, 30, seed=6)
    p = rng.normal(size=x.shape)
    dx, dp = model.field(x, p)
    G, dG = model.cometric(x), model.partials(x)
    np.testing.assert_allclose(dx, np.einsum("bij,bj->bi", G, p), atol=1e-14)
    np.testing.assert_allclose(dp, -0.5 * np.einsum("bijk,bi,bj->bk", dG, p, p), atol=1e-12)


def test_taylor_field_matches_hamiltonian_differences(taylor5):
    rng = np.random.default_rng(7)
    x = random_points(5, 5, seed=7, scale=0.4)
    p = rng.normal(size=x.shape)
    dx, dp = taylor5.field(x, p)
    h = 1e-6
    for k in range(5):
        e = np.zeros(5)
        e[k] = h
        dHdp = (taylor5.hamiltonian(x, p + e) - taylor5.hamiltonian(x, p - e)) / (2 * h)
        dHdx = (taylor5.hamiltonian(x + e, p) - taylor5.hamiltonian(x - e, p)) / (2 * h)
        np.testing.assert_allclose(dx[:, k], dHdp, rtol=1e-6, atol=1e-9)
        np.testing.assert_allclose(dp[:, k], -dHdx, rtol=1e-6, atol=1e-9)


def test_synthetic_taylor_is_reproducible_per_seed():
    x = random_points(5, 10)
    a = synthetic_taylor(5, seed=3).cometric(x)
    b = synthetic_taylor(5, seed=3).cometric(x)
    c = synthetic_taylor(5, seed=4).cometric(x)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


# --- perturbed models -----------------------------------------------------------


def test_perturbed_equals_base_where_first_coordinate_is_nonpositive(taylor5):
    model = build_perturbed(taylor5, PerturbationProfile(0.2, 0.05))
    x = random_points(5, 300, seed=8)
    x[:, 0] = -np.abs(x[:, 0])
    assert np.array_equal(model.cometric(x), taylor5.cometric(x))
    np.testing.assert_array_equal(model.partials(x), taylor5.partials(x))


def test_perturbed_3d_example_point_equals_base():
    base = Flat(3)
    model = build_perturbed(base, PerturbationProfile(0.05))
    np.testing.assert_array_equal(cometric_eval(model, [-0.3, 0.1, 0.05]), np.eye(3))


def test_perturbed_3d_coupling_entry_and_its_derivative():
    prof = PerturbationProfile(0.05)
    model = build_perturbed(Flat(3), prof)
    for t in (0.05, 0.2, 0.4):
        G = cometric_eval(model, [t, 0.0, 0.0])
        dG = cometric_partials(model, [t, 0.0, 0.0])
        assert G[1, 2] == G[2, 1] == prof.alpha(np.array([t]))[0]
        assert dG[1, 2, 0] == pytest.approx(prof.alpha_prime(np.array([t]))[0], rel=1e-14)


def test_small_epsilon_keeps_3d_model_positive_by_characteristic_polynomial():
    model = build_perturbed(Flat(3), PerturbationProfile(0.01))
    G = cometric_eval(model, [0.2, 0.0, 0.0])
    roots = np.roots(np.poly(G))
    assert np.all(np.abs(roots.imag) < 1e-6)
    assert roots.real.min() > 0
    assert roots.real.min() == pytest.approx(np.linalg.eigvalsh(G)[0], abs=1e-9)


def test_zero_epsilon_reproduces_base(taylor5):
    model = build_perturbed(taylor5, PerturbationProfile(0.0))
    x = random_points(5, 100, seed=9)
    np.testing.assert_array_equal(model.cometric(x), taylor5.cometric(x))


def test_5d_coupling_occupies_only_the_paired_slots(taylor5):
    model = build_perturbed(taylor5, PerturbationProfile(0.02), "odd")
    x = random_points(5, 50, seed=10)
    x[:, 0] = np.abs(x[:, 0]) + 0.01
    diff = model.cometric(x) - taylor5.cometric(x)
    alpha = model.profile.alpha(x[:, 0])
    expect = np.zeros_like(diff)
    for i, j in [(1, 3), (2, 4)]:
        expect[:, i, j] = expect[:, j, i] = alpha
    np.testing.assert_allclose(diff, expect, atol=1e-16)


def test_perturbed_below_half_threshold_is_positive_definite(taylor5):
    threshold = positivity_threshold(taylor5)
    model = build_perturbed(taylor5, PerturbationProfile(threshold / 2, 0.05))
    x = random_points(5, 2000, seed=11, scale=0.499)
    np.linalg.cholesky(model.cometric(x))


def test_epsilon_above_threshold_is_rejected():
    with pytest.raises(ConstructionError):
        build_perturbed(Flat(3), PerturbationProfile(1.0))


def test_parity_mismatch_is_rejected():
    with pytest.raises(ConstructionError):
        build_perturbed(Flat(5), PerturbationProfile(0.1), "even")


def test_perturbing_twice_is_rejected():
    once = build_perturbed(Flat(3), PerturbationProfile(0.1))
    with pytest.raises(ConstructionError):
        build_perturbed(once, PerturbationProfile(0.1))


def test_perturbed_field_matches_partials(taylor4):
    model = build_perturbed(taylor4, PerturbationProfile(0.1, 0.05))
    rng = np.random.default_rng(12)
    x = random_points(4, 20, seed=12)
    p = rng.normal(size=x.shape)
    dx, dp = model.field(x, p)
    G, dG = model.cometric(x), model.partials(x)
    np.testing.assert_allclose(dx, np.einsum("bij,bj->bi", G, p), atol=1e-14)
    np.testing.assert_allclose(dp, -0.5 * np.einsum("bijk,bi,bj->bk", dG, p, p), atol=1e-12)


def test_custom_model_uses_finite_difference_partials():
    model = CustomCometric(2, lambda x: np.eye(2)[None] * (1 + x[:, 0] ** 2)[:, None, None])
    x = np.array([[0.2, 0.1]])
    P = model.partials(x)
    assert P[0, 0, 0, 0] == pytest.approx(0.4, rel=1e-9)
    assert P[0, 0, 0, 1] == pytest.approx(0.0, abs=1e-9)


def test_model_id_is_stable_for_equal_descriptions():
    a = build_perturbed(Flat(3), PerturbationProfile(0.05))
    b = build_perturbed(Flat(3), PerturbationProfile(0.05))
    c = build_perturbed(Flat(3), PerturbationProfile(0.06))
    assert a.model_id == b.model_id != c.model_id
