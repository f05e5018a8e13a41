"""Quantum variances of graph eigenbases and the experiments built on them."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .eigen import EigenSystem
from .graphs import GeometryProfile, RegularGraph, geometry_profile, sphere_sizes
from .kernels import (
    GradedKernel,
    PathComplex,
    PathSpaceKernel,
    _as_graded,
    constant_Ck,
    fold_to_graph,
    op_nabla,
    op_nabla_star,
    op_S,
    op_Sigma_n,
)
from .nonbacktracking import lift_eigenvector
from .tree import km_density, spherical_phi_table

CENTERINGS = ("none", "spherical")


@dataclass(frozen=True)
class VarianceReport:
    """Per-eigenvalue diagonal terms and their averaged squared deviation.

    Attributes
    ----------
    lambdas : ndarray
        Eigenvalues entering the average.
    diag : ndarray
        Diagonal matrix elements of the observable in the eigenbasis.
    center : ndarray
        Centering subtracted from each diagonal term (zeros without centering).
    var : float
        ``sum |diag - center|**2 / norm``.
    hsn_sq : float
        Squared normalized Hilbert-Schmidt norm of the centered operator
        (``nan`` where no such operator is formed).
    interval : tuple or None
        Spectral window the average is restricted to.
    """

    lambdas: np.ndarray
    diag: np.ndarray
    center: np.ndarray
    var: float
    hsn_sq: float = float("nan")
    interval: tuple | None = None

    @property
    def per_j(self):
        return list(zip(self.lambdas, self.diag, self.center))


def diagonal_elements(psis, matrix):
    """``<psi_j, B psi_j>`` for every column ``psi_j``."""
    return np.einsum("xj,xj->j", psis.conj(), matrix @ psis)


def _shell_means(K: GradedKernel):
    return {k: complex(v.mean()) for k, v in K.components.items()}


def spherical_center(q, lambdas, K: GradedKernel, n):
    """``(1/n) sum_omega K(omega) Phi_lam(|omega|)`` for each ``lam``."""
    K = _as_graded(K)
    lambdas = np.asarray(lambdas, dtype=float)
    phi = spherical_phi_table(q, lambdas, max(K.depth, 0))
    out = np.zeros(len(lambdas), dtype=complex)
    for k, vals in K.components.items():
        out += phi[:, k] * vals.sum() / n
    return out


def quantum_variance(g: RegularGraph, eig: EigenSystem, K, centering="none") -> VarianceReport:
    """``(1/n) sum_j |<psi_j, K_G psi_j> - c_j|**2`` over the full eigenbasis.

    With ``centering='spherical'`` the centering ``c_j`` is the tree average of
    ``K`` against the spherical function at ``lambda_j``; the centered operator
    is the fold of ``K`` minus its shell means.
    """
    if centering not in CENTERINGS:
        raise ValueError(f"centering must be one of {CENTERINGS}")
    K = _as_graded(K)
    folded = fold_to_graph(K).matrix
    diag = diagonal_elements(eig.psis, folded)
    if centering == "spherical":
        center = spherical_center(g.q, eig.lambdas, K, g.n)
        means = _shell_means(K)
        centered = GradedKernel(K.space, {k: v - means[k] for k, v in K.components.items()})
        folded_c = fold_to_graph(centered)
        # the shell means fold to h_k(A), whose diagonal is h_k(lambda_j) exactly
        dev = diagonal_elements(eig.psis, folded_c.matrix)
        hsn_sq = folded_c.hsn_sq()
    else:
        center = np.zeros_like(diag)
        dev = diag
        hsn_sq = fold_to_graph(K).hsn_sq()
    var = float(np.sum(np.abs(dev) ** 2) / g.n)
    return VarianceReport(eig.lambdas.copy(), diag, center, var, hsn_sq)


# ----------------------------------------------------------------------------
# non-backtracking variance


def bond_matrix_element(f_star, K: PathSpaceKernel, f):
    """``<f_star, K_B f> = sum_omega conj(f_star(first omega)) K(omega) f(last omega)``."""
    if K.k < 1:
        raise ValueError("bond kernels need paths of length at least 1")
    lev = K.space.level(K.k)
    return complex(np.sum(np.conj(f_star[lev.first]) * K.values * f[lev.last]))


def _bond_element_graded(f_star, K: GradedKernel, f):
    return sum((bond_matrix_element(f_star, K.component(k), f) for k in K.shells), 0j)


def tempered_indices(eig: EigenSystem, q, tol=1e-8):
    """Indices of eigenvalues strictly inside ``(-2 sqrt q, 2 sqrt q)``."""
    edge = 2 * np.sqrt(q)
    return np.nonzero(np.abs(eig.lambdas) < edge - tol)[0]


def nb_variance(g: RegularGraph, eig: EigenSystem, K, interval=None) -> VarianceReport:
    """Non-backtracking variance over the tempered eigenvalues.

    Without ``interval`` the sum is divided by ``n``; with ``interval = (a, b)``
    only eigenvalues in the open window enter and the sum is divided by their
    number.
    """
    K = _as_graded(K)
    if 0 in K.components and np.any(K.components[0] != 0):
        raise ValueError("bond kernels need paths of length at least 1")
    idx = tempered_indices(eig, g.q)
    if interval is not None:
        a, b = interval
        idx = idx[(eig.lambdas[idx] > a) & (eig.lambdas[idx] < b)]
        if len(idx) == 0:
            raise ValueError(f"no tempered eigenvalue in the interval {interval}")
    terms = np.empty(len(idx), dtype=complex)
    bonds = K.space.bonds
    for i, j in enumerate(idx):
        pair = lift_eigenvector(bonds, eig.psis[:, j], eig.lambdas[j])
        terms[i] = _bond_element_graded(pair.f_star, K, pair.f)
    denom = g.n if interval is None else len(idx)
    var = float(np.sum(np.abs(terms) ** 2) / denom)
    return VarianceReport(eig.lambdas[idx], terms, np.zeros_like(terms), var, interval=interval)


@dataclass(frozen=True)
class TransferIdentityReport:
    """Largest residuals of the two bond/vertex transfer identities over tempered ``j``."""

    residual_i: float
    residual_ii: float
    scale_i: float
    scale_ii: float


def isotropic_transfer_identities(g: RegularGraph, eig: EigenSystem, a, K: PathSpaceKernel) -> TransferIdentityReport:
    """Check the identities linking bond matrix elements to vertex ones.

    (i)  ``<f*, K'_B f> = conj(eps) <psi, (((q+1) - A) a) psi>`` with ``K'(e) = a(o(e))``;
    (ii) ``<f*, K_B f> = <psi, ((1-S)K)_G psi> + eps <psi, (grad* K)_G psi>``
    """
    if K.k < 1:
        raise ValueError("identity (ii) needs K in H_m with m >= 1")
    space = K.space
    q = g.q
    a = np.asarray(a, dtype=complex)
    lev1 = space.level(1)
    k_prime = PathSpaceKernel(space, 1, a[lev1.start])
    mult = (q + 1) * a - g.adjacency_matrix @ a
    one_minus_s = fold_to_graph(K - op_S(K)).matrix
    nabla_star = fold_to_graph(op_nabla_star(K)).matrix
    r1 = r2 = s1 = s2 = 0.0
    for j in tempered_indices(eig, q):
        psi = eig.psis[:, j]
        pair = lift_eigenvector(space.bonds, psi, eig.lambdas[j])
        lhs1 = bond_matrix_element(pair.f_star, k_prime, pair.f)
        rhs1 = np.conj(pair.eps) * np.vdot(psi, mult * psi)
        lhs2 = bond_matrix_element(pair.f_star, K, pair.f)
        rhs2 = np.vdot(psi, one_minus_s @ psi) + pair.eps * np.vdot(psi, nabla_star @ psi)
        r1, s1 = max(r1, abs(lhs1 - rhs1)), max(s1, abs(lhs1))
        r2, s2 = max(r2, abs(lhs2 - rhs2)), max(s2, abs(lhs2))
    return TransferIdentityReport(float(r1), float(r2), float(s1), float(s2))


# ----------------------------------------------------------------------------
# smoothing inequality


@dataclass(frozen=True)
class SmoothingReport:
    """Both sides of the smoothing estimates for ``K`` in ``H^0_m``.

    ``var_nabla_star`` is ``Var(grad* K)``; ``var_nabla_sigma`` is
    ``Var(grad Sigma^n K)``, which equals it exactly.  ``bound_nabla`` is
    ``4(q+1)/n ||K||^2 + 8(q+1) q^n tau~(m+2n+1)^2 ||K||_sup^2 bad(m+2n+1)/|V|``.
    ``var`` and ``bound_final`` are the plain variance of ``K`` and the bound
    obtained after inverting ``1 - S``; ``bound_lemma`` is the two-parameter
    form of that bound when ``T`` is given.
    """

    m: int
    n: int
    T: float | None
    var_nabla_star: float
    var_nabla_sigma: float
    hsn_sq_nabla_sigma: float
    bound_nabla: float
    var: float
    bound_final: float
    bound_lemma: float | None
    C_m_beta: float

    @property
    def holds(self):
        ok = self.var_nabla_star <= self.bound_nabla * (1 + 1e-12) + 1e-14
        ok &= self.var <= self.bound_final * (1 + 1e-12) + 1e-14
        if self.bound_lemma is not None:
            ok &= self.var <= self.bound_lemma * (1 + 1e-12) + 1e-14
        return bool(ok)


def _plain_var(eig, K, n):
    K = _as_graded(K)
    if not K.components:
        return 0.0
    diag = diagonal_elements(eig.psis, fold_to_graph(K).matrix)
    return float(np.sum(np.abs(diag) ** 2) / n)


def variance_smoothing_check(
    g: RegularGraph,
    eig: EigenSystem,
    K: PathSpaceKernel,
    n: int,
    T: float | None = None,
    profile: GeometryProfile | None = None,
) -> SmoothingReport:
    """Evaluate both sides of the smoothing estimates with their printed constants."""
    if K.k < 1:
        raise ValueError("the smoothing estimate needs K in H_m with m >= 1")
    if n < 1:
        raise ValueError("n must be at least 1")
    if abs(K.mean()) > 1e-10 * max(1.0, K.sup()):
        raise ValueError("K must have mean zero")
    profile = geometry_profile(g) if profile is None else profile
    q, m, nv = g.q, K.k, g.n
    norm_sq, sup_sq = K.norm_sq(), K.sup() ** 2

    var_ns = _plain_var(eig, op_nabla_star(K), nv)
    smoothed = op_Sigma_n(K, n)
    grad = GradedKernel.zero(K.space)
    for k in smoothed.shells:
        grad = grad + op_nabla(smoothed.component(k))
    var_sigma = _plain_var(eig, grad, nv)
    hsn = fold_to_graph(grad).hsn_sq() if grad.components else 0.0

    r1 = m + 2 * n + 1
    bound_nabla = 4 * (q + 1) / n * norm_sq + 8 * (q + 1) * q**n * sphere_sizes(q, r1)[1] ** 2 * sup_sq * profile.bad_count(
        r1
    ) / nv

    c = constant_Ck(m, eig.beta, q)
    r2 = m + 2 * n + 2
    f_n = 8 * (q + 1) * q**n * sphere_sizes(q, r2)[1] ** 2 * profile.bad_count(r2) / nv
    tail = sphere_sizes(q, m)[1] ** 2 * profile.bad_count(m) / nv
    bound_final = 2 * c**2 * (4 * q + 5) / n * norm_sq + 2 * sup_sq * (n * f_n + tail)
    bound_lemma = None
    if T is not None:
        cm = 4 * (q + 1)
        bound_lemma = (
            2 * cm * c**2 / n * norm_sq + 2 * T**2 * sup_sq * f_n + 2 * c**2 / T**2 * norm_sq + 2 * sup_sq * tail
        )
    return SmoothingReport(
        m, n, T, var_ns, var_sigma, hsn, bound_nabla, _plain_var(eig, K, nv), bound_final, bound_lemma, c
    )


# ----------------------------------------------------------------------------
# decay experiments


@dataclass
class DecayTable:
    """Variance of one observable family across growing graphs."""

    rows: list = field(default_factory=list)
    slope: float = float("nan")

    header = ("n", "seed", "girth", "beta", "var", "hsn_sq", "bad_term", "slope")

    def as_rows(self):
        for r in self.rows:
            yield (*r, self.slope)

    @property
    def vars(self):
        return np.array([r[4] for r in self.rows])


def loglog_slope(ns, values):
    """Least-squares slope of ``log value`` against ``log n`` (``nan`` if some value is 0)."""
    ns, values = np.asarray(ns, float), np.asarray(values, float)
    if np.any(values <= 0):
        return float("nan")
    return float(np.polyfit(np.log(ns), np.log(values), 1)[0])


def decay_experiment(family, observable_gen, centering="none", seeds=None) -> DecayTable:
    """Variance of ``observable_gen(g, space, eig)`` on every member of ``family``.

    Parameters
    ----------
    family : sequence of (RegularGraph, EigenSystem)
        At least three graphs of increasing size.
    observable_gen : callable
        Returns a kernel on the given path complex.
    seeds : sequence of int, optional
        Seed recorded in each row.
    """
    family = list(family)
    if len(family) < 3:
        raise ValueError("a decay experiment needs at least three graphs")
    seeds = [None] * len(family) if seeds is None else list(seeds)
    table = DecayTable()
    for (g, eig), seed in zip(family, seeds):
        space = PathComplex(g)
        K = _as_graded(observable_gen(g, space, eig))
        rep = quantum_variance(g, eig, K, centering)
        prof = geometry_profile(g)
        depth = max(K.depth, 0)
        bad = sphere_sizes(g.q, depth)[1] ** 2 * K.sup() ** 2 * prof.bad_count(depth) / g.n
        table.rows.append((g.n, seed, prof.girth, eig.beta, rep.var, rep.hsn_sq, bad))
    table.slope = loglog_slope([r[0] for r in table.rows], table.vars)
    return table


def balanced_sign_observable(n, seed):
    """Vertex function with exactly ``n // 2`` entries ``+1`` and ``n // 2`` entries ``-1``."""
    if n % 2:
        raise ValueError("a balanced sign observable needs an even number of vertices")
    rng = np.random.default_rng(seed)
    a = np.ones(n)
    a[rng.permutation(n)[: n // 2]] = -1
    return a


@dataclass(frozen=True)
class KMComparison:
    n: int
    distance: float
    at: float


def km_compare(q, lambdas, include_trivial=False) -> KMComparison:
    """Sup distance between the eigenvalue counting CDF and the Kesten-McKay CDF.

    Both one-sided limits of the step function are compared at each eigenvalue.
    """
    lam = np.sort(np.asarray(lambdas, dtype=float))
    if not include_trivial:
        lam = lam[np.abs(lam - (q + 1)) > 1e-8]
    dens = km_density(q)
    n = len(lam)
    best, at = 0.0, float("nan")
    for i, x in enumerate(lam):
        ref = dens.cdf(x)
        d = max(abs((i + 1) / n - ref), abs(i / n - ref))
        if d > best:
            best, at = d, float(x)
    return KMComparison(n, best, at)
