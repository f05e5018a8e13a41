import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from artifact.eigen import adjacency_eigensystem
from artifact.graphs import build_named, geometry_profile, random_regular, sphere_sizes
from artifact.kernels import (
    GradedKernel,
    PathComplex,
    PathSpaceKernel,
    S_matrix,
    ShellError,
    compare_to_H,
    constant_Ck,
    embed,
    enumerate_paths,
    flow_average,
    flow_average_lemma_bound,
    flow_average_taylor,
    fold_to_graph,
    hsn_norm,
    op_L,
    op_L_factored,
    op_M,
    op_Mstar,
    op_nabla,
    op_nabla_star,
    op_S,
    op_S_adjoint,
    op_shift_left,
    op_shift_right,
    op_Sigma_n,
    operator_norm,
    shell_constant_kernel,
    verify_inverse_bound,
)
from artifact.nonbacktracking import build_nb
from artifact.tree import sphere_function

GRAPHS = {
    "petersen": build_named("petersen"),
    "heawood": build_named("heawood"),
    "rrg50": random_regular(50, 3, 0),
}
SPACES = {k: PathComplex(g) for k, g in GRAPHS.items()}


def rand(space, k, seed):
    return PathSpaceKernel.random(space, k, np.random.default_rng(seed))


# path enumeration ------------------------------------------------------------


def test_path_counts():
    g = GRAPHS["petersen"]
    assert len(enumerate_paths(g, 0)) == 10
    assert len(enumerate_paths(g, 1)) == 30
    assert len(enumerate_paths(g, 2)) == 60
    for k in range(6):
        assert SPACES["heawood"].size(k) == len(SPACES["heawood"].level(k))


@pytest.mark.parametrize("name", list(GRAPHS))
def test_paths_are_non_backtracking_and_distinct(name):
    space = SPACES[name]
    b = space.bonds
    for k in range(1, 5):
        seq = space.bond_sequences(k)
        assert np.all(b.terminus[seq[:, :-1]] == b.origin[seq[:, 1:]])
        assert not np.any(seq[:, 1:] == b.rev[seq[:, :-1]])
        assert len(np.unique(seq, axis=0)) == len(seq)
        lev = space.level(k)
        verts = space.vertex_sequences(k)
        assert np.array_equal(verts[:, 0], lev.start) and np.array_equal(verts[:, -1], lev.end)
        if k >= 2:
            prev = space.bond_sequences(k - 1)
            assert np.array_equal(prev[lev.tail], seq[:, 1:])
            assert np.array_equal(prev[lev.head], seq[:, :-1])
        if k >= 3:
            mid = space.bond_sequences(k - 2)
            assert np.array_equal(mid[lev.mil], seq[:, 1:-1])


def test_enumerate_negative():
    with pytest.raises(ShellError):
        SPACES["petersen"].level(-1)


# operator identities ---------------------------------------------------------


@pytest.mark.parametrize("name", list(GRAPHS))
def test_MMstar(name):
    space = SPACES[name]
    q = space.q
    for k in (0, 1, 2, 3):
        K = rand(space, k, k)
        factor = 1 if k >= 1 else (q + 1) / q
        assert np.max(np.abs(op_M(op_Mstar(K)).values - factor * K.values)) < 1e-12


@pytest.mark.parametrize("name", list(GRAPHS))
def test_nabla_star_is_minus_M_nabla(name):
    space = SPACES[name]
    for k in (1, 2, 3):
        K = rand(space, k, 10 + k)
        diff = op_nabla_star(K).values + op_M(op_nabla(K)).values
        assert np.max(np.abs(diff)) < 1e-12


@pytest.mark.parametrize("name", list(GRAPHS))
def test_L_factorisation_and_commutator(name):
    space = SPACES[name]
    g = GRAPHS[name]
    a = g.dense_adjacency()
    for k in (0, 1, 2):
        K = rand(space, k, 20 + k)
        assert np.max(np.abs((op_L(K) - op_L_factored(K)).to_flat(k + 1))) < 1e-12
        f = fold_to_graph(K).toarray()
        lf = fold_to_graph(op_L(K)).toarray()
        assert np.max(np.abs(lf - (a @ f - f @ a))) < 1e-12


@settings(max_examples=25, deadline=None)
@given(k=st.integers(1, 4), seed=st.integers(0, 2**31), name=st.sampled_from(list(GRAPHS)))
def test_adjoints(k, seed, name):
    space = SPACES[name]
    rng = np.random.default_rng(seed)
    K = PathSpaceKernel.random(space, k, rng)
    J = PathSpaceKernel.random(space, k - 1, rng)
    assert abs(op_nabla(J).inner(K) - J.inner(op_nabla_star(K))) < 1e-12 * (1 + K.norm() * J.norm())
    # grad* = -M grad in the adjoint form <grad J, K> = <J, -M grad K>
    assert abs(op_nabla(J).inner(K) + J.inner(op_M(op_nabla(K)))) < 1e-11 * (1 + K.norm() * J.norm())
    K2 = PathSpaceKernel.random(space, k + 2, rng)
    assert abs(op_M(K2).inner(K) - K2.inner(op_Mstar(K))) < 1e-12 * (1 + K.norm() * K2.norm())
    K3 = PathSpaceKernel.random(space, k, rng)
    assert abs(op_S(K3).inner(K) - K3.inner(op_S_adjoint(K))) < 1e-12 * (1 + K.norm() * K3.norm())


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31), name=st.sampled_from(list(GRAPHS)))
def test_L_self_adjoint(seed, name):
    space = SPACES[name]
    rng = np.random.default_rng(seed)
    K = GradedKernel(space, {2: PathSpaceKernel.random(space, 2, rng).values})
    J = GradedKernel(space, {k: PathSpaceKernel.random(space, k, rng).values for k in (1, 3)})
    assert abs(op_L(K).inner(J) - K.inner(op_L(J))) < 1e-12 * (1 + K.norm() * J.norm())


def test_S_on_H1_is_transposed_nb():
    for name, g in GRAPHS.items():
        nb = build_nb(g).matrix.toarray()
        assert np.array_equal(S_matrix(SPACES[name], 1).toarray(), nb.T / g.q)


def test_S_doubly_stochastic_and_norms():
    space = SPACES["petersen"]
    q = space.q
    rng = np.random.default_rng(0)
    for k in (1, 2, 3):
        s = S_matrix(space, k)
        assert np.allclose(s.sum(axis=0), 1) and np.allclose(s.sum(axis=1), 1)
        size = space.size(k)
        mk = lambda v, f: f(PathSpaceKernel(space, k, v)).values  # noqa: E731
        ns = operator_norm(lambda v: mk(v, op_S), lambda v: mk(v, op_S_adjoint), size, rng)
        assert abs(ns - 1) < 1e-8 and ns <= 1 + 1e-8
    for k in (2, 3, 4):
        size = space.size(k)
        m_apply = lambda v: op_M(PathSpaceKernel(space, k, v)).values  # noqa: E731
        ms_apply = lambda v: op_Mstar(PathSpaceKernel(space, k - 2, v)).values  # noqa: E731
        nm = operator_norm(m_apply, ms_apply, size, rng)
        if k >= 3:
            assert abs(nm - 1) < 1e-8 and nm <= 1 + 1e-8
        else:
            assert nm == pytest.approx(np.sqrt((q + 1) / q), abs=1e-8)


def test_S_power_lands_in_embedded_H1():
    space = SPACES["petersen"]
    for k in (2, 3):
        s = S_matrix(space, k).toarray()
        power = np.linalg.matrix_power(s, k - 1)
        # every column of S^(k-1) K depends only on the first bond
        rank = np.linalg.matrix_rank(power)
        assert rank <= space.size(1)
        emb = np.array([embed(PathSpaceKernel(space, 1, e), k).values for e in np.eye(space.size(1))]).T
        stacked = np.linalg.matrix_rank(np.hstack([emb, power]))
        assert stacked == np.linalg.matrix_rank(emb)


def test_grad_star_of_embedding_is_transfer():
    # grad* j_{m-1,m} = -q (I - S) with the orientation used here
    space = SPACES["heawood"]
    q = space.q
    for m in (2, 3):
        K = rand(space, m - 1, m)
        lhs = op_nabla_star(embed(K, m)).values
        rhs = -q * (K.values - op_S(K).values)
        assert np.max(np.abs(lhs - rhs)) < 1e-12


def test_shifts_commute_and_norms():
    space = SPACES["petersen"]
    K = rand(space, 2, 3)
    a = op_shift_left(op_shift_right(K)).values
    b = op_shift_right(op_shift_left(K)).values
    assert np.allclose(a, b)
    assert op_shift_left(K).norm_sq() == pytest.approx(space.q * K.norm_sq())


def test_shell_constants_in_null_space():
    for name, space in SPACES.items():
        K = shell_constant_kernel(space, [0.3, -1.0, 2.0, 0.5])
        assert op_L(K).norm() < 1e-12
        a = GRAPHS[name].dense_adjacency()
        f = fold_to_graph(K).toarray()
        assert np.max(np.abs(a @ f - f @ a)) < 1e-12


@pytest.mark.parametrize("name", ["petersen", "heawood"])
def test_null_space_dimension(name):
    space = SPACES[name]
    for k in (1, 2):
        dim = sum(space.size(j) for j in range(k + 1))
        cols = []
        for i in range(dim):
            e = np.zeros(dim, dtype=complex)
            e[i] = 1
            cols.append(op_L(GradedKernel.from_flat(space, e, k)).to_flat(k + 1))
        s = np.linalg.svd(np.array(cols).T, compute_uv=False)
        assert int(np.sum(s < 1e-10)) == k + 1


def test_sigma_n():
    space = SPACES["petersen"]
    q = space.q
    K = rand(space, 1, 5)
    one = op_Sigma_n(K, 1)
    assert one.shells == [1] and np.allclose(one.components[1], K.values)
    for n in (2, 4, 8):
        s = op_Sigma_n(K, n)
        assert s.norm() <= np.sqrt((q + 1) / q) * K.norm() + 1e-12
        # Pythagoras over distinct shells
        pieces = [K]
        for _ in range(n - 1):
            pieces.append(op_Mstar(pieces[-1]))
        assert s.norm() <= n**-0.5 * max(p.norm() for p in pieces) + 1e-12
        assert s.sup() <= q**n * K.sup()
    with pytest.raises(ValueError):
        op_Sigma_n(K, 0)


def test_pythagoras_distinct_shells():
    space = SPACES["heawood"]
    parts = [rand(space, k, 40 + k) for k in range(4)]
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    assert total.norm_sq() == pytest.approx(sum(p.norm_sq() for p in parts))
    n = len(parts)
    assert (total * (1 / n)).norm() <= n**-0.5 * max(p.norm() for p in parts) + 1e-12


# folding ---------------------------------------------------------------------


def test_fold_basic():
    space = SPACES["petersen"]
    g = GRAPHS["petersen"]
    assert np.array_equal(fold_to_graph(PathSpaceKernel.constant(space, 0)).toarray(), np.eye(10))
    assert np.array_equal(fold_to_graph(PathSpaceKernel.constant(space, 1)).toarray(), g.dense_adjacency())
    two = fold_to_graph(PathSpaceKernel.constant(space, 2)).toarray()
    assert np.allclose(two.sum(axis=1), sphere_sizes(2, 2)[0])


@pytest.mark.parametrize("name", list(GRAPHS))
def test_fold_shell_constant_is_polynomial(name):
    space, g = SPACES[name], GRAPHS[name]
    eig = adjacency_eigensystem(g)
    for k in range(5):
        f = fold_to_graph(PathSpaceKernel.constant(space, k)).toarray()
        h = np.array([sphere_function(g.q, lam, k) for lam in eig.lambdas])
        expected = (eig.psis * h) @ eig.psis.T
        assert np.max(np.abs(f - expected)) < 1e-9


def test_fold_hermitian_for_symmetric_kernel():
    space = SPACES["heawood"]
    K = rand(space, 2, 7)
    seq = space.bond_sequences(2)
    # reversal of a path
    rev = space.bonds.rev[seq[:, ::-1]]
    index = {tuple(r): i for i, r in enumerate(seq)}
    ridx = np.array([index[tuple(r)] for r in rev])
    sym = PathSpaceKernel(space, 2, 0.5 * (K.values + np.conj(K.values[ridx])))
    f = fold_to_graph(sym).toarray()
    assert np.allclose(f, f.conj().T)


def test_hsn_norms():
    heawood = SPACES["heawood"]
    K = rand(heawood, 1, 0)
    cmp = compare_to_H(K, GRAPHS["heawood"])
    assert cmp.exact_regime
    assert abs(cmp.hsn_sq - cmp.h_sq) < 1e-12
    assert hsn_norm(fold_to_graph(K)) ** 2 == pytest.approx(cmp.hsn_sq)
    k4 = build_named("complete(4)")
    space = PathComplex(k4)
    prof = geometry_profile(k4)
    for k in (1, 2, 3):
        c = compare_to_H(PathSpaceKernel.constant(space, k), k4, prof)
        assert c.discrepancy <= sphere_sizes(2, k)[1] ** 2 * prof.bad_count(k) / 4 + 1e-12
        assert c.discrepancy <= c.bound + 1e-12
    zero = compare_to_H(PathSpaceKernel.constant(heawood, 2, 0.0), GRAPHS["heawood"])
    assert zero.hsn_sq == 0 and zero.h_sq == 0


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.integers(1, 3))
def test_hsn_discrepancy_bound_random(seed, k):
    g = random_regular(30, 3, seed)
    space = PathComplex(g)
    K = PathSpaceKernel.random(space, k, np.random.default_rng(seed))
    cmp = compare_to_H(K, g)
    assert cmp.discrepancy <= cmp.bound + 1e-9
    if cmp.exact_regime:
        assert cmp.discrepancy < 1e-10


# inverse bound and flow average ----------------------------------------------


def test_constant_Ck():
    q = 2
    beta = 1 - 2 * np.sqrt(q) / (q + 1)
    assert constant_Ck(1, beta, q) == pytest.approx(1 + 1 / (1 - q**-0.5) ** 2)
    assert constant_Ck(1, 0.0, q) == np.inf


@pytest.mark.parametrize("name", ["petersen", "heawood"])
def test_inverse_bound(name):
    g = GRAPHS[name]
    eig = adjacency_eigensystem(g)
    for k in (1, 2):
        rep = verify_inverse_bound(g, k, eig.beta, SPACES[name])
        assert rep.holds
        assert rep.measured >= 1


def test_flow_average_invariant_kernel():
    space = SPACES["petersen"]
    K = shell_constant_kernel(space, [1.0, 0.5, -0.25])
    for T in (0.5, 10.0):
        rep = flow_average(K, T, shell_cap=6)
        assert (rep.estimate - K).norm() < 1e-10


def test_flow_average_small_T_and_taylor():
    space = SPACES["petersen"]
    K = rand(space, 1, 9).centered()
    tay = flow_average_taylor(K, 0.05, 8)
    kry = flow_average(K, 0.05, shell_cap=12)
    assert (tay - kry.estimate).norm() < 1e-10 * K.norm()
    tiny = flow_average(K, 1e-7, shell_cap=6)
    assert (tiny.estimate - K).norm() < 1e-6 * K.norm()
    with pytest.raises(ShellError):
        flow_average_taylor(K, 1.0, 8, shell_cap=4)


def test_flow_average_bound_petersen():
    g = GRAPHS["petersen"]
    space = SPACES["petersen"]
    eig = adjacency_eigensystem(g)
    K = rand(space, 1, 11).centered()
    c = constant_Ck(1, eig.beta, g.q)
    for T in (10, 20, 40):
        rep = flow_average(K, T, shell_cap=12)
        assert rep.norm_estimate <= rep.norm_bound + 1e-12
        assert rep.norm_bound <= K.norm() + 1e-12
        assert rep.norm_bound <= flow_average_lemma_bound(c, T) * K.norm()
        assert abs(rep.weights.sum() - K.norm_sq()) < 1e-10
