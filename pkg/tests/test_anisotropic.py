import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from artifact.anisotropic import (
    GreenSolveError,
    GreenState,
    anis_density,
    anis_green_kernel,
    anis_nb_variance,
    anis_variance_experiment,
    build_Ap,
    build_Bp,
    centering_values,
    conjugated_kernel,
    decay_gap,
    density_mass,
    green_orthogonality_check,
    green_recursive,
    harmonic_cylinders,
    k_lambda_p,
    kolmogorov_sum,
    lift_anis,
    log_cheeger_sandwich,
    m0_identity_check,
    random_word_kernel,
    solve_green,
    solve_green_batch,
    support_intervals,
    transition_weights,
    tree_conjugated_row,
    tree_resolvent_solve,
    truncated_tree_green,
    weighted_transfer,
    word_kernel_on_graph,
)
from artifact.eigen import adjacency_eigensystem
from artifact.graphs import build_named, random_labelled_regular, sphere_sizes
from artifact.kernels import (
    PathComplex,
    PathSpaceKernel,
    diagonal_kernel,
    fold_to_graph,
    shell_constant_kernel,
)
from artifact.nonbacktracking import lift_eigenvector, nb_eps
from artifact.tree import green_tree, km_density
from artifact.variance import balanced_sign_observable, spherical_center

P = np.array([0.5, 0.3, 0.2])
ISO = np.ones(3) / 3


@pytest.fixture(scope="module")
def labelled50():
    g, bonds = random_labelled_regular(50, 2, 1)
    mat, eig = build_Ap(g, bonds, P)
    return g, bonds, mat, eig, PathComplex(g, bonds)


# ----------------------------------------------------------------------------
# Green system


def test_weights_validation():
    with pytest.raises(ValueError):
        transition_weights([0.5, 0.6, -0.1])
    with pytest.raises(ValueError):
        transition_weights([0.5, 0.3, 0.3])


def test_isotropic_green_matches_tree():
    gamma = 0.3 + 0.01j
    st_ = solve_green(ISO, gamma)
    assert st_.diagonal == pytest.approx(3 * green_tree(2, 3 * gamma, 0), abs=1e-8)
    # distance 2 after the (q+1) scaling
    assert anis_green_kernel(st_, (1, 2)) == pytest.approx(3 * green_tree(2, 3 * gamma, 2), abs=1e-8)


def test_skewed_residuals_and_branch():
    st_ = solve_green(P, 0.2 + 0.05j)
    assert st_.max_residual < 1e-10
    assert st_.branch_ok and np.all(st_.zeta.imag < 0)


def test_lower_half_plane_mirrors():
    up = solve_green(P, 0.2 + 0.05j)
    down = solve_green(P, 0.2 - 0.05j)
    assert np.allclose(down.zeta, up.zeta.conj(), atol=1e-14)
    assert np.all(down.zeta.imag > 0)


def test_equal_weights_equal_zeta():
    for gamma in (0.1 + 0.2j, -0.6 + 0.001j, 0.9 + 1e-5j):
        st_ = solve_green([0.4, 0.4, 0.2], gamma)
        assert abs(st_.zeta[0] - st_.zeta[1]) < 1e-12


@settings(max_examples=25, deadline=None)
@given(
    st.floats(0.05, 1.0),
    st.floats(0.05, 1.0),
    st.floats(0.05, 1.0),
    st.floats(-1.2, 1.2),
    st.floats(1e-4, 2.0),
)
def test_green_system_property(a, b, c, re, im):
    p = np.array([a, b, c]) / (a + b + c)
    st_ = solve_green(p, re + 1j * im)
    scale = 1 + abs(st_.w) + np.abs(st_.zeta).max() + 1 / np.abs(st_.zeta).min()
    assert st_.max_residual < 1e-10 * scale
    assert np.all(st_.zeta.imag < 0)
    # Green function of a self-adjoint operator: Im G(o,o) < 0 in the upper half plane
    assert st_.diagonal.imag < 0


def test_real_gamma_needs_side():
    with pytest.raises(ValueError):
        solve_green(P, 0.3)
    with pytest.raises(ValueError):
        solve_green(P, 0.3, side="x")
    with pytest.raises(ValueError):
        solve_green_batch(P, [0.3])


def test_green_matches_schur_recursion():
    gamma = 0.2 + 0.5j
    st_ = solve_green(P, gamma)
    w, z = green_recursive(P, gamma, 80)
    assert abs(w - st_.w) < 1e-12 and np.max(np.abs(z - st_.zeta)) < 1e-12


def test_green_kernel_matches_tree_solve():
    gamma = 0.2 + 0.05j
    st_ = solve_green(P, gamma)
    words = [(), (1,), (2,), (3,), (1, 2), (2, 3), (3, 1), (1, 2, 1), (2, 3, 1), (3, 2, 3)]
    ours = np.array([anis_green_kernel(st_, w) for w in words])
    # the factorized truncated-tree resolvent equals a sparse solve on the same ball
    small = truncated_tree_green(P, gamma, 9, words)
    assert np.max(np.abs(small - tree_resolvent_solve(P, gamma, 10, words))) < 1e-12
    # the truncation error decays like |zeta|^(2 depth)
    errs = [np.max(np.abs(truncated_tree_green(P, gamma, d, words) - ours)) for d in (25, 50, 100)]
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] < 1e-6
    assert anis_green_kernel(st_, ()) == st_.diagonal


def test_green_kernel_rejects_unreduced():
    st_ = solve_green(P, 0.2 + 0.05j)
    with pytest.raises(ValueError):
        anis_green_kernel(st_, (1, 1))
    with pytest.raises(ValueError):
        anis_green_kernel(st_, (4,))


def test_boundary_state_and_json_roundtrip():
    st_ = solve_green(P, 0.4, side="+")
    assert st_.side == "+" and st_.branch_ok
    assert st_.max_residual < 1e-10
    back = GreenState.from_json(st_.to_json())
    assert np.allclose(back.zeta, st_.zeta) and back.w == st_.w
    assert back.max_residual < 1e-10


def test_boundary_isotropic_matches_nb_eps():
    for lam in (-0.7, 0.1, 0.5):
        st_ = solve_green(ISO, lam, side="+")
        assert np.allclose(st_.zeta, nb_eps(2, 3 * lam, "+"), atol=1e-10)


def test_gap_point():
    # zero energy is in a spectral gap for these weights
    st_ = solve_green(P, 0.0, side="+")
    assert abs(st_.density) < 1e-8


# ----------------------------------------------------------------------------
# density and harmonic measure


def test_isotropic_density_is_scaled_kesten_mckay():
    lams = np.linspace(-0.99, 0.99, 301)
    tab = anis_density(ISO, lams)
    expect = 3 * km_density(2)(3 * lams)
    assert np.max(np.abs(tab.density - expect)) < 1e-6


def test_density_nonnegative_and_support():
    tab = anis_density(P, np.linspace(-1, 1, 201))
    assert np.all(tab.density >= 0)
    assert not tab.support[100]  # lam = 0 lies in the gap
    assert len(list(tab.rows())) == 201
    ivals = support_intervals(P)
    assert len(ivals) == 2
    assert ivals[0][1] == pytest.approx(-ivals[1][0], abs=1e-10)


def test_isotropic_support_edges():
    ivals = support_intervals(ISO)
    assert len(ivals) == 1
    edge = 2 * np.sqrt(2) / 3
    # square-root edges are located to the resolution of the eps-extrapolation
    assert ivals[0][0] == pytest.approx(-edge, abs=1e-4)
    assert ivals[0][1] == pytest.approx(edge, abs=1e-4)


@pytest.mark.parametrize("p", [ISO, P])
def test_density_mass(p):
    mass = density_mass(p)
    assert mass <= 1 + 1e-6
    assert mass > 1 - 1e-6


@pytest.mark.parametrize("lam", [-0.8, -0.3, 0.25, 0.6])
def test_kolmogorov_and_cylinders(lam):
    st_ = solve_green(P, lam, side="+")
    assert kolmogorov_sum(st_) == pytest.approx(1, abs=1e-8)
    cyl = harmonic_cylinders(st_, 3)
    assert cyl.level_sum(1) == pytest.approx(1, abs=1e-8)
    assert cyl.level_sum(3) == pytest.approx(1, abs=1e-8)
    assert cyl.consistency_error() < 1e-10
    kids = sum(v for k, v in cyl.weights.items() if len(k) == 2 and k[0] == 1)
    assert kids == pytest.approx(cyl.weights[(1,)], abs=1e-10)


def test_isotropic_cylinders_uniform():
    cyl = harmonic_cylinders(solve_green(ISO, 0.2, side="+"), 3)
    for word, val in cyl.weights.items():
        assert val == pytest.approx(1 / sphere_sizes(2, len(word))[0], abs=1e-10)


def test_cylinders_need_density():
    with pytest.raises(ValueError):
        harmonic_cylinders(solve_green(P, 0.0, side="+"), 2)


# ----------------------------------------------------------------------------
# walk on a labelled graph


def test_build_Ap(labelled50):
    g, bonds, mat, eig, _ = labelled50
    dense = mat.toarray()
    assert np.allclose(dense, dense.T)
    assert np.allclose(dense.sum(axis=1), 1)
    assert eig.lambdas[-1] == pytest.approx(1)
    assert np.ptp(np.abs(eig.psis[:, -1])) < 1e-12
    assert np.all(np.abs(eig.lambdas) <= 1 + 1e-12)


def test_isotropic_Ap_is_scaled_adjacency(labelled50):
    g, bonds = labelled50[:2]
    mat, _ = build_Ap(g, bonds, ISO)
    assert np.allclose(mat.toarray(), g.dense_adjacency() / 3)


def test_Ap_needs_labels():
    g = build_named("petersen")
    with pytest.raises(ValueError):
        build_Ap(g, g.bonds, P)


def test_lift_residuals(labelled50):
    g, bonds, _, eig, _ = labelled50
    worst = 0.0
    for j in range(len(eig) - 1):
        st_ = solve_green(P, eig.lambdas[j], side="+")
        if st_.density > 1e-8:
            worst = max(worst, lift_anis(bonds, eig.psis[:, j], st_).residual)
    assert worst < 1e-8


def test_isotropic_lift_matches_nb(labelled50):
    g, bonds = labelled50[:2]
    _, eig = build_Ap(g, bonds, ISO)
    j = len(eig) // 2
    lam = eig.lambdas[j]
    st_ = solve_green(ISO, lam, side="+")
    ours = lift_anis(bonds, eig.psis[:, j], st_)
    ref = lift_eigenvector(bonds, eig.psis[:, j], 3 * lam, "+")
    assert np.allclose(ours.f, ref.f, atol=1e-10)
    # B_p = B / (q+1), so its eigenvalue is mu / (q+1)
    assert np.allclose(ours.beta, ref.mu / 3, atol=1e-10)


def test_bp_row_weights(labelled50):
    bonds = labelled50[1]
    Bp = build_Bp(bonds, P)
    rows = np.asarray(Bp.sum(axis=1)).ravel()
    # each row misses exactly the weight of the reversed bond's label
    assert np.allclose(rows, 1 - P[bonds.label - 1])


# ----------------------------------------------------------------------------
# centering


def test_centering_diagonal_is_mean(labelled50):
    g, bonds, _, eig, space = labelled50
    a = np.random.default_rng(0).standard_normal(g.n)
    st_ = solve_green(P, 0.4, side="+")
    assert k_lambda_p(diagonal_kernel(space, a), st_, space) == pytest.approx(a.mean(), abs=1e-12)


def test_centering_zero_kernel(labelled50):
    space = labelled50[4]
    st_ = solve_green(P, 0.4, side="+")
    assert k_lambda_p(PathSpaceKernel(space, 1, np.zeros(space.size(1))), st_, space) == 0


def test_centering_isotropic_is_spherical(labelled50):
    g, bonds, _, _, space = labelled50
    K = shell_constant_kernel(space, [0.3, 1.0, -0.5])
    for lam in (-0.5, 0.1, 0.4):
        st_ = solve_green(ISO, lam, side="+")
        expect = spherical_center(2, np.array([3 * lam]), K, g.n)[0]
        assert k_lambda_p(K, st_, space) == pytest.approx(expect, abs=1e-8)
    vals = centering_values(ISO, [-0.5, 0.1, 0.4], K, space)
    assert np.allclose(vals, spherical_center(2, 3 * np.array([-0.5, 0.1, 0.4]), K, g.n), atol=1e-8)


def test_centering_needs_density(labelled50):
    space = labelled50[4]
    with pytest.raises(ValueError):
        k_lambda_p(PathSpaceKernel.constant(space, 1), solve_green(P, 0.0, side="+"), space)


# ----------------------------------------------------------------------------
# weighted transfer operators


@pytest.mark.parametrize("m", [1, 2])
def test_transfer_is_stochastic(labelled50, m):
    space = labelled50[4]
    op = weighted_transfer(solve_green(P, 0.4, side="+"), space, m)
    assert np.max(np.abs(op.row_sums() - 1)) < 1e-12
    assert op.invariance_error() < 1e-12
    adj = op.adjoint()
    assert np.allclose(np.asarray(adj.sum(axis=1)).ravel(), 1, atol=1e-12)
    assert op.norm(1) == pytest.approx(1, abs=1e-10)


@pytest.mark.parametrize("m", [1, 2])
def test_twisted_transfer_decays(labelled50, m):
    space = labelled50[4]
    st_ = solve_green(P, 0.4, side="+")
    assert not np.allclose(st_.u(), st_.u()[0])
    delta = decay_gap(st_, space, m)
    assert delta > 1e-3


def test_u_constant_cases():
    iso = solve_green(ISO, 0.4, side="+").u()
    assert np.allclose(iso, iso[0])
    zero = solve_green([0.4, 0.35, 0.25], 0.0, side="+")
    assert zero.density > 1e-3
    assert np.allclose(zero.u(), -1, atol=1e-8)


def test_transfer_needs_density(labelled50):
    with pytest.raises(ValueError):
        weighted_transfer(solve_green(P, 0.0, side="+"), labelled50[4], 1)


def test_cheeger_sandwich_logged(labelled50, caplog):
    op = weighted_transfer(solve_green(P, 0.4, side="+"), labelled50[4], 1)
    with caplog.at_level("INFO"):
        measured, rate = log_cheeger_sandwich(op, 4, 0.1)
    assert 0 <= measured <= 1 + 1e-10 and rate > 0
    assert "weighted transfer" in caplog.text


# ----------------------------------------------------------------------------
# conjugation identities


@pytest.mark.parametrize("m", [1, 2, 3])
def test_conjugated_kernel_reproduces_bond_pairing(labelled50, m):
    g, bonds, _, eig, space = labelled50
    K = PathSpaceKernel.random(space, m, np.random.default_rng(m))
    j = len(eig) // 3
    st_ = solve_green(P, eig.lambdas[j], side="+")
    psi = eig.psis[:, j]
    gv = lift_anis(bonds, psi, st_).g
    lev = space.level(m)
    direct = np.sum(np.conj(gv[bonds.rev][lev.first]) * K.values * gv[lev.last])
    folded = psi.conj() @ (fold_to_graph(conjugated_kernel(K, P, st_.zeta)).matrix @ psi)
    assert abs(direct - folded) < 1e-12
    assert abs(direct) > 1e-4


def test_m0_identity(labelled50):
    g, bonds, _, eig, _ = labelled50
    rep = m0_identity_check(g, bonds, P, eig, np.random.default_rng(0).standard_normal(g.n))
    assert rep.count > 40
    assert rep.residual < 1e-8 and rep.scale > 1e-2
    assert rep.w_spread < 1e-12
    # the unit-weight form misses the factor i and the weights p(x, y)
    assert rep.unweighted_residual > 1e-2


def test_m0_identity_constant(labelled50):
    g, bonds, _, eig, _ = labelled50
    rep = m0_identity_check(g, bonds, P, eig, np.ones(g.n))
    assert rep.scale < 1e-12 and rep.residual < 1e-12


def test_isotropic_w_constant():
    st_ = solve_green(ISO, 0.3, side="+")
    assert np.sum(st_.zeta.imag) == pytest.approx(3 * st_.zeta[0].imag)


@pytest.mark.parametrize("m", [1, 2, 3])
def test_green_orthogonality(m):
    wk = random_word_kernel(2, m, np.random.default_rng(m))
    for rep in green_orthogonality_check(P, wk, m, [-0.8, -0.3, 0.3, 0.8]):
        assert abs(rep.pairing) < 1e-7
        assert rep.scale > 1e-3
        assert set(rep.shells) <= {m, m - 1, m - 2} | ({1} if m == 1 else set())


def test_green_orthogonality_depth_independent():
    wk = random_word_kernel(2, 2, np.random.default_rng(5))
    st_ = solve_green(P, 0.3, side="+")
    shallow = tree_conjugated_row(P, st_.zeta, wk, 2, depth=3)
    deep = tree_conjugated_row(P, st_.zeta, wk, 2, depth=8)
    assert shallow.keys() == deep.keys()
    assert max(abs(shallow[k] - deep[k]) for k in shallow) == 0
    with pytest.raises(ValueError):
        tree_conjugated_row(P, st_.zeta, wk, 2, depth=2)


def test_green_orthogonality_zero_kernel():
    wk = {k: 0j for k in random_word_kernel(2, 1, np.random.default_rng(0))}
    rep = green_orthogonality_check(P, wk, 1, [0.3])[0]
    assert rep.pairing == 0 and all(v == 0 for v in rep.shells.values())


@pytest.mark.parametrize("m", [1, 2, 3])
def test_tree_row_matches_graph(m):
    g, bonds = random_labelled_regular(200, 2, 3)
    space = PathComplex(g, bonds)
    wk = random_word_kernel(2, m, np.random.default_rng(10 + m))
    st_ = solve_green(P, 0.3, side="+")
    row = tree_conjugated_row(P, st_.zeta, wk, m)
    graded = conjugated_kernel(word_kernel_on_graph(space, wk, m), P, st_.zeta)
    # vertex 0 has injectivity radius above 3 on this graph, so every path is a tree path
    worst = 0.0
    for k, vals in graded.components.items():
        seq = space.bond_sequences(k)
        start = np.arange(g.n) if k == 0 else bonds.origin[seq[:, 0]]
        for i in np.nonzero(start == 0)[0]:
            word = tuple(int(c) for c in bonds.label[seq[i]]) if k else ()
            worst = max(worst, abs(vals[i] - row.get(word, 0)))
    assert worst < 1e-12


def test_isotropic_row_structure():
    # for an isotropic constant H_1 kernel the row only depends on the distance
    wk = {k: 1.0 + 0j for k in random_word_kernel(2, 1, np.random.default_rng(0))}
    st_ = solve_green(ISO, 0.3, side="+")
    row = tree_conjugated_row(ISO, st_.zeta, wk, 1)
    ones = [row[(c,)] for c in (1, 2, 3)]
    assert np.allclose(ones, ones[0])
    beta = (1 / 3) / st_.zeta[0]
    # |beta|^2 - p^2 on the distance-1 shell, -2 Re(beta) p at the root
    assert ones[0] == pytest.approx(abs(beta) ** 2 + 1 / 9, abs=1e-12)
    assert row[()] == pytest.approx(-3 * (1 / 3) * 2 * beta.real, abs=1e-12)


# ----------------------------------------------------------------------------
# variances


def test_anis_nb_variance(labelled50):
    g, bonds, _, eig, space = labelled50
    K = PathSpaceKernel.random(space, 1, np.random.default_rng(1))
    var, lams, terms = anis_nb_variance(g, bonds, P, eig, K)
    assert var > 0 and len(lams) == len(terms)
    local, lams_i, _ = anis_nb_variance(g, bonds, P, eig, K, interval=(0.2, 0.6))
    assert np.all((lams_i > 0.2) & (lams_i < 0.6))
    with pytest.raises(ValueError):
        anis_nb_variance(g, bonds, P, eig, K, interval=(-0.05, 0.05))


@pytest.fixture(scope="module")
def labelled_family():
    return [random_labelled_regular(n, 2, 7) for n in (100, 200, 400, 800)]


def test_anis_decay_diagonal(labelled_family):
    gen = lambda g, space, eig: diagonal_kernel(space, balanced_sign_observable(g.n, 11))
    tab = anis_variance_experiment(labelled_family, P, gen)
    v = tab.vars
    assert np.all(np.diff(v) < 0)
    # frozen from the first verified run
    assert v == pytest.approx(
        [0.021441706102550216, 0.009344320336872063, 0.004931067653747413, 0.002951366840596684], rel=1e-6
    )
    assert tab.slope == pytest.approx(-0.9505083329046747, rel=1e-6)


def test_anis_decay_bond_kernel(labelled_family):
    def gen(g, space, eig):
        rng = np.random.default_rng(3)
        return PathSpaceKernel(space, 1, np.sign(rng.standard_normal(space.size(1))) + 1.0)

    centered = anis_variance_experiment(labelled_family, P, gen).vars
    raw = anis_variance_experiment(labelled_family, P, gen, use_centering=False).vars
    assert np.all(np.diff(centered) < 0)
    assert centered == pytest.approx(
        [0.05004162564110368, 0.026815698854544642, 0.012917469338587421, 0.0065670012181717795], rel=1e-6
    )
    # without the centering the variance does not decay
    assert raw[-1] > 1


def test_anis_identity_variance(labelled_family):
    tab = anis_variance_experiment(labelled_family, P, lambda g, s, e: shell_constant_kernel(s, [1.0]))
    assert np.all(tab.vars == 0)


def test_anis_decay_needs_three(labelled_family):
    with pytest.raises(ValueError):
        anis_variance_experiment(labelled_family[:2], P, lambda g, s, e: shell_constant_kernel(s, [1.0]))


def test_homotopy_error_type():
    assert issubclass(GreenSolveError, RuntimeError)
