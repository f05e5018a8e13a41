"""Kernels on non-backtracking paths and their operator calculus.

A kernel supported at distance ``k`` from the diagonal is stored as a complex
vector indexed by ``B_k``, the non-backtracking paths of length ``k`` on the
finite graph.  ``B_0`` is the vertex set and ``B_1`` the bond set.  Paths of
length ``k >= 2`` are numbered by right extension: if ``p`` indexes a path of
length ``k-1`` then ``p*q + i`` indexes its extension by the ``i``-th
non-backtracking successor of its last bond.

Every shell carries the inner product ``<K, K'> = (1/n) sum conj(K) K'``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .graphs import BondTable, RegularGraph, geometry_profile, sphere_sizes
from .nonbacktracking import beta_prime

MAX_PATHS = 20_000_000


class ShellError(ValueError):
    """Operator applied to a kernel of the wrong length."""


@dataclass
class PathSpace:
    """Index data of ``B_k``.

    Attributes
    ----------
    k : int
    start, end : ndarray
        First and last vertex of each path.
    first, last : ndarray or None
        First and last bond (``k >= 1``).
    tail : ndarray or None
        Index in ``B_{k-1}`` of the path with its first step removed.
    head : ndarray or None
        Index in ``B_{k-1}`` of the path with its last step removed.
    mil : ndarray or None
        Index in ``B_{k-2}`` of the path with both end steps removed.
    """

    k: int
    start: np.ndarray
    end: np.ndarray
    first: np.ndarray | None = None
    last: np.ndarray | None = None
    tail: np.ndarray | None = None
    head: np.ndarray | None = None
    mil: np.ndarray | None = None

    def __len__(self):
        return len(self.start)


class PathComplex:
    """Lazily built path spaces ``B_0, B_1, ...`` of a regular graph."""

    def __init__(self, g: RegularGraph, bonds: BondTable | None = None):
        self.g = g
        self.bonds = g.bonds if bonds is None else bonds
        self.q = g.q
        self.n = g.n
        self._levels: list[PathSpace] = []

    def size(self, k):
        if k == 0:
            return self.n
        return self.n * (self.q + 1) * self.q ** (k - 1)

    def level(self, k) -> PathSpace:
        if k < 0:
            raise ShellError("path length must be non-negative")
        while len(self._levels) <= k:
            self._levels.append(self._build(len(self._levels)))
        return self._levels[k]

    def _build(self, k) -> PathSpace:
        b, q = self.bonds, self.q
        if self.size(k) > MAX_PATHS:
            raise MemoryError(f"B_{k} has {self.size(k)} paths, over the budget of {MAX_PATHS}")
        if k == 0:
            v = np.arange(self.n)
            return PathSpace(0, v, v)
        if k == 1:
            e = np.arange(len(b))
            return PathSpace(1, b.origin, b.terminus, e, e, b.terminus, b.origin)
        prev = self.level(k - 1)
        head = np.repeat(np.arange(len(prev)), q)
        slot = np.tile(np.arange(q), len(prev))
        last = b.successors[prev.last[head], slot]
        if k == 2:
            tail = last
            mil = b.terminus[prev.first[head]]
        else:
            tail = prev.tail[head] * q + slot
            mil = prev.tail[head]
        first = prev.first[head]
        return PathSpace(k, b.origin[first], b.terminus[last], first, last, tail, head, mil)

    def bond_sequences(self, k):
        """Array ``(|B_k|, k)`` of the bonds of every path."""
        if k == 0:
            return np.zeros((self.n, 0), dtype=np.int64)
        out = np.empty((self.size(k), k), dtype=np.int64)
        idx = np.arange(self.size(k))
        for j in range(k, 0, -1):
            lev = self.level(j)
            out[:, j - 1] = lev.last[idx]
            idx = lev.head[idx]
        return out

    def vertex_sequences(self, k):
        """Array ``(|B_k|, k+1)`` of the vertices ``x_0, ..., x_k`` of every path."""
        if k == 0:
            return np.arange(self.n)[:, None]
        seq = self.bond_sequences(k)
        return np.concatenate([self.bonds.origin[seq[:, :1]], self.bonds.terminus[seq]], axis=1)


def enumerate_paths(g: RegularGraph, k, bonds=None) -> PathSpace:
    return PathComplex(g, bonds).level(k)


def _scatter(idx, vals, size):
    vals = np.asarray(vals)
    if np.iscomplexobj(vals):
        return np.bincount(idx, vals.real, size) + 1j * np.bincount(idx, vals.imag, size)
    return np.bincount(idx, vals, size)


# ----------------------------------------------------------------------------
# kernels


@dataclass(frozen=True)
class PathSpaceKernel:
    """Element of ``H_k``: one complex value per path of ``B_k``."""

    space: PathComplex
    k: int
    values: np.ndarray

    def __post_init__(self):
        if len(self.values) != self.space.size(self.k):
            raise ShellError(f"H_{self.k} needs {self.space.size(self.k)} values, got {len(self.values)}")

    @classmethod
    def constant(cls, space, k, c=1.0):
        return cls(space, k, np.full(space.size(k), c, dtype=complex))

    @classmethod
    def random(cls, space, k, rng, real=False):
        vals = rng.standard_normal(space.size(k))
        if not real:
            vals = vals + 1j * rng.standard_normal(space.size(k))
        return cls(space, k, vals.astype(complex))

    def norm_sq(self):
        return float(np.sum(np.abs(self.values) ** 2) / self.space.n)

    def norm(self):
        return np.sqrt(self.norm_sq())

    def sup(self):
        return float(np.max(np.abs(self.values))) if len(self.values) else 0.0

    def inner(self, other: PathSpaceKernel):
        if other.k != self.k:
            return 0.0
        return complex(np.vdot(self.values, other.values) / self.space.n)

    def mean(self):
        return complex(self.values.mean())

    def centered(self):
        """Projection onto the mean-zero subspace ``H^0_k``."""
        return PathSpaceKernel(self.space, self.k, self.values - self.values.mean())

    def graded(self) -> GradedKernel:
        return GradedKernel(self.space, {self.k: self.values})

    def __add__(self, other):
        if other.k != self.k:
            return self.graded() + other.graded()
        return PathSpaceKernel(self.space, self.k, self.values + other.values)

    def __sub__(self, other):
        return self + (-1) * other

    def __mul__(self, c):
        return PathSpaceKernel(self.space, self.k, c * self.values)

    __rmul__ = __mul__


@dataclass(frozen=True)
class GradedKernel:
    """Finite sum of shell components, an element of ``H_{<=D}``."""

    space: PathComplex
    components: dict = field(default_factory=dict)

    @classmethod
    def zero(cls, space):
        return cls(space, {})

    @property
    def shells(self):
        return sorted(self.components)

    @property
    def depth(self):
        return max(self.components, default=-1)

    def component(self, k) -> PathSpaceKernel:
        vals = self.components.get(k)
        if vals is None:
            vals = np.zeros(self.space.size(k), dtype=complex)
        return PathSpaceKernel(self.space, k, vals)

    def norm_sq(self):
        return sum(float(np.sum(np.abs(v) ** 2)) for v in self.components.values()) / self.space.n

    def norm(self):
        return np.sqrt(self.norm_sq())

    def sup(self):
        return max((float(np.max(np.abs(v))) for v in self.components.values() if len(v)), default=0.0)

    def inner(self, other: GradedKernel):
        tot = 0j
        for k, v in self.components.items():
            w = other.components.get(k)
            if w is not None:
                tot += np.vdot(v, w)
        return complex(tot / self.space.n)

    def __add__(self, other):
        if isinstance(other, PathSpaceKernel):
            other = other.graded()
        comps = {k: v.copy() for k, v in self.components.items()}
        for k, v in other.components.items():
            comps[k] = comps[k] + v if k in comps else v.copy()
        return GradedKernel(self.space, comps)

    def __sub__(self, other):
        return self + (-1) * other

    def __mul__(self, c):
        return GradedKernel(self.space, {k: c * v for k, v in self.components.items()})

    __rmul__ = __mul__

    def to_flat(self, kmax):
        """Concatenation of shells ``0..kmax`` (missing shells are zero)."""
        if self.depth > kmax:
            raise ShellError("kernel has support beyond kmax")
        parts = [self.components.get(k, np.zeros(self.space.size(k), dtype=complex)) for k in range(kmax + 1)]
        return np.concatenate(parts).astype(complex)

    @classmethod
    def from_flat(cls, space, flat, kmax, drop_zero=True):
        comps, pos = {}, 0
        for k in range(kmax + 1):
            size = space.size(k)
            part = flat[pos : pos + size]
            pos += size
            if not drop_zero or np.any(part != 0):
                comps[k] = np.array(part)
        return cls(space, comps)


def shell_constant_kernel(space, coeffs) -> GradedKernel:
    """``sum_k coeffs[k] 1_k``; folds to the polynomial ``sum_k coeffs[k] h_k(A)``."""
    return GradedKernel(space, {k: np.full(space.size(k), c, dtype=complex) for k, c in enumerate(coeffs)})


def diagonal_kernel(space, a) -> PathSpaceKernel:
    """Element of ``H_0`` with values ``a(x)``."""
    return PathSpaceKernel(space, 0, np.asarray(a, dtype=complex))


# ----------------------------------------------------------------------------
# operators on single shells


def _check(K: PathSpaceKernel, kmin, name):
    if K.k < kmin:
        raise ShellError(f"{name} needs k >= {kmin}, got k = {K.k}")


def op_M(K: PathSpaceKernel) -> PathSpaceKernel:
    """``MK(w) = (1/q) sum_{mil w' = w} K(w')``, from ``H_k`` to ``H_{k-2}``."""
    _check(K, 2, "M")
    sp_, lev = K.space, K.space.level(K.k)
    vals = _scatter(lev.mil, K.values, sp_.size(K.k - 2)) / sp_.q
    return PathSpaceKernel(sp_, K.k - 2, vals)


def op_Mstar(K: PathSpaceKernel) -> PathSpaceKernel:
    """Adjoint of ``M``, from ``H_k`` to ``H_{k+2}``."""
    sp_ = K.space
    lev = sp_.level(K.k + 2)
    return PathSpaceKernel(sp_, K.k + 2, K.values[lev.mil] / sp_.q)


def op_nabla(K: PathSpaceKernel) -> PathSpaceKernel:
    """``grad f(x_0..x_k) = f(x_1..x_k) - f(x_0..x_{k-1})``, from ``H_{k-1}`` to ``H_k``."""
    sp_ = K.space
    lev = sp_.level(K.k + 1)
    return PathSpaceKernel(sp_, K.k + 1, K.values[lev.tail] - K.values[lev.head])


def op_nabla_star(K: PathSpaceKernel) -> PathSpaceKernel:
    """Adjoint of ``grad``, from ``H_k`` to ``H_{k-1}``; equals ``-M grad``."""
    _check(K, 1, "grad*")
    sp_, lev = K.space, K.space.level(K.k)
    size = sp_.size(K.k - 1)
    vals = _scatter(lev.tail, K.values, size) - _scatter(lev.head, K.values, size)
    return PathSpaceKernel(sp_, K.k - 1, vals)


def op_S(K: PathSpaceKernel) -> PathSpaceKernel:
    """Transfer operator ``SK(w) = (1/q) sum_{w' -> w} K(w')`` on ``H_k``.

    ``w' -> w`` means that ``(w'_0, w_0, ..., w_k)`` is a non-backtracking path of
    length ``k+1``, i.e. ``w'`` is ``w`` shifted one step backwards.
    """
    _check(K, 1, "S")
    sp_, up = K.space, K.space.level(K.k + 1)
    vals = _scatter(up.tail, K.values[up.head], sp_.size(K.k)) / sp_.q
    return PathSpaceKernel(sp_, K.k, vals)


def op_S_adjoint(K: PathSpaceKernel) -> PathSpaceKernel:
    _check(K, 1, "S*")
    sp_, up = K.space, K.space.level(K.k + 1)
    vals = _scatter(up.head, K.values[up.tail], sp_.size(K.k)) / sp_.q
    return PathSpaceKernel(sp_, K.k, vals)


def op_shift_left(K: PathSpaceKernel) -> PathSpaceKernel:
    """``sigma K(x_0..x_{k+1}) = K(x_1..x_{k+1})``, from ``H_k`` to ``H_{k+1}``."""
    lev = K.space.level(K.k + 1)
    return PathSpaceKernel(K.space, K.k + 1, K.values[lev.tail])


def op_shift_right(K: PathSpaceKernel) -> PathSpaceKernel:
    """``rho K(x_0..x_{k+1}) = K(x_0..x_k)``, from ``H_k`` to ``H_{k+1}``."""
    lev = K.space.level(K.k + 1)
    return PathSpaceKernel(K.space, K.k + 1, K.values[lev.head])


def embed(K: PathSpaceKernel, k) -> PathSpaceKernel:
    """Injection ``j_{l,k}`` of ``H_l`` into ``H_k``: ``K`` read on the first ``l`` steps."""
    if k < K.k:
        raise ShellError("cannot embed into a shorter shell")
    out = K
    while out.k < k:
        out = op_shift_right(out)
    return out


def op_Sigma_n(K: PathSpaceKernel, n) -> GradedKernel:
    """``Sigma^n K = (1/n) (K + M* K + ... + M*^(n-1) K)``."""
    if n < 1:
        raise ValueError("n must be at least 1")
    comps, cur = {}, K
    for j in range(n):
        comps[cur.k] = cur.values / n
        if j < n - 1:
            cur = op_Mstar(cur)
    return GradedKernel(K.space, comps)


# ----------------------------------------------------------------------------
# graded operators


def _as_graded(K):
    return K.graded() if isinstance(K, PathSpaceKernel) else K


def op_L(K) -> GradedKernel:
    """``L = grad + grad*`` applied shell by shell; maps ``H_{<=D}`` into ``H_{<=D+1}``."""
    K = _as_graded(K)
    out = GradedKernel.zero(K.space)
    for k in K.shells:
        comp = K.component(k)
        out = out + op_nabla(comp)
        if k >= 1:
            out = out + op_nabla_star(comp)
    return out


def op_L_factored(K) -> GradedKernel:
    """``(I - M) grad`` applied shell by shell."""
    K = _as_graded(K)
    out = GradedKernel.zero(K.space)
    for k in K.shells:
        g = op_nabla(K.component(k))
        out = out + g
        if g.k >= 2:
            out = out - op_M(g)
    return out


def apply_shellwise(op, K) -> GradedKernel:
    K = _as_graded(K)
    out = GradedKernel.zero(K.space)
    for k in K.shells:
        out = out + op(K.component(k))
    return out


# ----------------------------------------------------------------------------
# folding onto the graph


@dataclass(frozen=True)
class FoldedOperator:
    """Operator on ``l^2(V)`` obtained by summing a kernel over paths."""

    matrix: sp.csr_matrix
    source_k: tuple

    def toarray(self):
        return self.matrix.toarray()

    def hsn_sq(self):
        n = self.matrix.shape[0]
        return float(np.sum(np.abs(self.matrix.data) ** 2) / n)


def fold_to_graph(K, g: RegularGraph | None = None) -> FoldedOperator:
    """``K_G(x, y) = sum over paths x -> y of K``, summed over all shells."""
    K = _as_graded(K)
    sp_ = K.space
    n = sp_.n
    rows, cols, vals = [], [], []
    for k in K.shells:
        lev = sp_.level(k)
        rows.append(lev.start)
        cols.append(lev.end)
        vals.append(K.components[k])
    if not rows:
        return FoldedOperator(sp.csr_matrix((n, n), dtype=complex), ())
    mat = sp.coo_matrix(
        (np.concatenate(vals).astype(complex), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    ).tocsr()
    mat.sum_duplicates()
    return FoldedOperator(mat, tuple(K.shells))


def hsn_norm(op: FoldedOperator) -> float:
    """Normalized Hilbert-Schmidt norm ``((1/n) sum |K_G(x,y)|^2)^(1/2)``."""
    return np.sqrt(op.hsn_sq())


@dataclass(frozen=True)
class NormComparison:
    hsn_sq: float
    h_sq: float
    discrepancy: float
    bound: float
    exact_regime: bool


def compare_to_H(K, g: RegularGraph, profile=None) -> NormComparison:
    """Compare ``||K_G||_HSN^2`` with ``||K||_H^2``.

    They agree when every path length is below the minimal injectivity radius.
    Otherwise the discrepancy is at most
    ``tau_tilde(D)^2 ||K||_sup^2 #{x : rho(x) <= D} / n``.
    """
    K = _as_graded(K)
    profile = geometry_profile(g) if profile is None else profile
    folded = fold_to_graph(K)
    hs, h = folded.hsn_sq(), K.norm_sq()
    depth = max(K.depth, 0)
    tt = sphere_sizes(g.q, depth)[1]
    bound = tt**2 * K.sup() ** 2 * profile.bad_count(depth) / g.n
    return NormComparison(hs, h, abs(hs - h), bound, depth < profile.min_rho)


# ----------------------------------------------------------------------------
# dense matrices and norms


def dense_operator(op, space: PathComplex, k_in) -> np.ndarray:
    """Dense matrix of a single-shell linear operator, column by column."""
    size = space.size(k_in)
    cols = []
    for i in range(size):
        e = np.zeros(size, dtype=complex)
        e[i] = 1
        cols.append(op(PathSpaceKernel(space, k_in, e)).values)
    return np.array(cols).T


def S_matrix(space: PathComplex, k) -> sp.csr_matrix:
    """Sparse matrix of ``S`` on ``H_k``: entry ``1/q`` at ``(tail W, head W)`` for ``W`` in ``B_{k+1}``."""
    up = space.level(k + 1)
    size = space.size(k)
    return sp.csr_matrix((np.full(len(up), 1.0 / space.q), (up.tail, up.head)), shape=(size, size))


def operator_norm(apply, apply_adjoint, size, rng=None, iters=200, tol=1e-10):
    """Largest singular value by power iteration on ``T* T``."""
    rng = np.random.default_rng(0) if rng is None else rng
    v = rng.standard_normal(size) + 1j * rng.standard_normal(size)
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(iters):
        w = apply_adjoint(apply(v))
        nw = np.linalg.norm(w)
        if nw == 0:
            return 0.0
        new = np.sqrt(nw)
        v = w / nw
        if abs(new - est) <= tol * max(new, 1e-300):
            est = new
            break
        est = new
    return float(est)


def _mean_zero_basis(size):
    """Orthonormal basis of the complement of the constants, as a dense matrix."""
    basis = np.eye(size) - 1.0 / size
    q_, _ = np.linalg.qr(basis[:, : size - 1])
    return q_


def resolvent_norm_mean_zero(space: PathComplex, k) -> float:
    """``||(I - S)^{-1}||`` on the mean-zero subspace of ``H_k`` (dense)."""
    s_mat = S_matrix(space, k).toarray()
    size = s_mat.shape[0]
    basis = _mean_zero_basis(size)
    restricted = basis.T @ (np.eye(size) - s_mat) @ basis
    smin = np.linalg.svd(restricted, compute_uv=False).min()
    return float(1 / smin)


def constant_Ck(k, beta, q) -> float:
    """``k + 1/beta'^2``, the bound on ``||(I - S)^{-1}||`` over ``H^0_k``."""
    bp = beta_prime(beta, q)
    if bp <= 0:
        return np.inf
    return k + 1 / bp**2


@dataclass(frozen=True)
class InverseBoundReport:
    k: int
    beta: float
    beta_prime: float
    measured: float
    constant: float

    @property
    def holds(self):
        return self.measured <= self.constant


def verify_inverse_bound(g: RegularGraph, k, beta, space=None) -> InverseBoundReport:
    space = PathComplex(g) if space is None else space
    measured = resolvent_norm_mean_zero(space, k)
    return InverseBoundReport(k, beta, beta_prime(beta, g.q), measured, constant_Ck(k, beta, g.q))


# ----------------------------------------------------------------------------
# time average of the flow e^{itL}


def _sinc_avg(x, T):
    """``(1/T) int_0^T e^{itx} dt``."""
    x = np.asarray(x, dtype=float)
    z = 1j * T * x
    small = np.abs(T * x) < 1e-8
    safe = np.where(small, 1.0, z)
    return np.where(small, 1 + z / 2, np.expm1(safe) / safe)


def flow_average_taylor(K, T, M_taylor, shell_cap=None) -> GradedKernel:
    """Exact time average of the order-``M_taylor`` Taylor polynomial of ``e^{itL}K``.

    ``(1/T) int_0^T sum_{j<=M} (itL)^j K / j! dt = sum_j (iTL)^j K / (j+1)!``.
    """
    K = _as_graded(K)
    need = K.depth + M_taylor
    if shell_cap is not None and shell_cap < need:
        raise ShellError(f"shell_cap={shell_cap} is below depth + M_taylor = {need}")
    out, term = K, K
    fact = 1.0
    for j in range(1, M_taylor + 1):
        term = op_L(term) * (1j * T)
        fact *= j + 1
        out = out + term * (1 / fact)
    return out


def lanczos(apply, v0, steps, reorth=True):
    """Hermitian Lanczos with full reorthogonalisation.

    Returns
    -------
    alpha, beta : ndarray
        Tridiagonal coefficients.
    basis : list of ndarray
        Lanczos vectors.
    """
    norm0 = np.linalg.norm(v0)
    basis = [v0 / norm0]
    alpha, beta = [], []
    for j in range(steps):
        w = apply(basis[j])
        a = np.vdot(basis[j], w).real
        alpha.append(a)
        w = w - a * basis[j]
        if j > 0:
            w = w - beta[-1] * basis[j - 1]
        if reorth:
            for v in basis:
                w = w - np.vdot(v, w) * v
        b = np.linalg.norm(w)
        if j == steps - 1 or b < 1e-13 * norm0:
            break
        beta.append(b)
        basis.append(w / b)
    return np.array(alpha), np.array(beta[: len(alpha) - 1]), basis


@dataclass(frozen=True)
class FlowAverageReport:
    """Time average of ``e^{itL}K`` over ``[0, T]``.

    Attributes
    ----------
    estimate : GradedKernel
        Krylov approximation of the average.
    norm_estimate : float
        ``||estimate||_H``.
    norm_bound : float
        Certified upper bound on the norm of the exact average.
    nodes, weights : ndarray
        Gauss quadrature of the spectral measure of ``L`` at ``K``.
    steps : int
        Exact Krylov dimension.
    nominal_taylor_order : int
        ``5 ||L|| T`` with ``||L|| <= 4 sqrt(q)``, reported only.
    """

    T: float
    estimate: GradedKernel
    norm_estimate: float
    norm_bound: float
    nodes: np.ndarray
    weights: np.ndarray
    steps: int
    nominal_taylor_order: int


def _measure_bound(nodes, weights, T, total):
    """Upper bound on ``int sinc^2(Tx/2) dmu`` from Gauss data.

    Chebyshev-Markov-Stieltjes: the mass of ``[-d, d]`` is at most the sum of the
    weights of the nodes from the last one at or below ``-d`` to the first one at
    or above ``d``.  Outside ``[-d, d]`` the integrand is at most ``4/(T d)^2``.
    """
    order = np.argsort(nodes)
    x, w = nodes[order], weights[order]
    cands = np.unique(np.abs(x))
    cands = np.concatenate([cands[cands > 0], np.geomspace(1e-4, 10, 200)])
    best = total
    for d in cands:
        lo = np.nonzero(x <= -d)[0]
        hi = np.nonzero(x >= d)[0]
        a = lo[-1] if len(lo) else 0
        b = hi[0] if len(hi) else len(x) - 1
        mass = w[a : b + 1].sum()
        best = min(best, mass + 4 * total / (T * d) ** 2)
    return min(best, total)


def flow_average(K, T, shell_cap, M_taylor=None) -> FlowAverageReport:
    """Average ``(1/T) int_0^T e^{itL} K dt`` on a shell-truncated Krylov space.

    With ``K`` supported up to shell ``D`` the Krylov vectors ``L^j K`` are exact
    for ``j <= shell_cap - D``.  The average is ``f(L) K`` with
    ``f(x) = (e^{iTx}-1)/(iTx)``; its norm squared is ``int |f|^2 dmu_K`` which is
    bounded rigorously from the Gauss rule of the Krylov space.
    """
    K = _as_graded(K)
    space = K.space
    if shell_cap <= K.depth:
        raise ShellError("shell_cap must exceed the support of K")
    steps = shell_cap - K.depth
    v0 = K.to_flat(shell_cap)
    norm0 = np.linalg.norm(v0)
    q = space.q
    nominal = int(np.ceil(5 * 4 * np.sqrt(q) * T))
    if M_taylor is not None and M_taylor <= steps:
        est = flow_average_taylor(K, T, M_taylor, shell_cap)
        return FlowAverageReport(T, est, est.norm(), est.norm(), np.zeros(0), np.zeros(0), M_taylor, nominal)
    if norm0 == 0:
        zero = GradedKernel.zero(space)
        return FlowAverageReport(T, zero, 0.0, 0.0, np.zeros(0), np.zeros(0), 0, nominal)

    def apply(flat):
        g = GradedKernel.from_flat(space, flat, shell_cap)
        return op_L(g).to_flat(shell_cap + 1)[: len(flat)]

    alpha, beta, basis = lanczos(apply, v0, steps)
    tri = np.diag(alpha)
    if len(beta):
        tri += np.diag(beta, 1) + np.diag(beta, -1)
    nodes, vecs = np.linalg.eigh(tri)
    weights = np.abs(vecs[0]) ** 2 * K.norm_sq()
    coef = vecs @ (_sinc_avg(nodes, T) * vecs[0].conj())
    flat = norm0 * sum(c * v for c, v in zip(coef, basis))
    est = GradedKernel.from_flat(space, flat, shell_cap)
    bound = np.sqrt(_measure_bound(nodes, weights, T, K.norm_sq()))
    return FlowAverageReport(T, est, est.norm(), float(bound), nodes, weights, len(alpha), nominal)


def flow_average_lemma_bound(C, T):
    """``(C^{1/2} + 16) / T^{1/7}``, relative to ``||K||``."""
    return (np.sqrt(C) + 16) / T ** (1 / 7)


# ----------------------------------------------------------------------------
# self-test of the operator algebra


def operator_selftest(g: RegularGraph, seed=0, kmax=3) -> dict:
    """Largest residual of each operator identity on random kernels.

    Keys: ``MMstar`` (``M M* = I`` on ``H_k``, ``k >= 1``), ``MMstar_0``
    (``M M* = (q+1)/q I`` on ``H_0``), ``nabla_star`` (``nabla* = -M nabla``),
    ``L_factored`` (``L = (I - M) nabla``) and ``commutator``
    (``fold(LK) = [A, fold(K)]``).
    """
    rng = np.random.default_rng(seed)
    space = PathComplex(g)
    q = g.q
    a = g.dense_adjacency()
    out = dict.fromkeys(("MMstar", "MMstar_0", "nabla_star", "L_factored", "commutator"), 0.0)
    for k in range(kmax + 1):
        K = PathSpaceKernel.random(space, k, rng)
        factor = 1 if k >= 1 else (q + 1) / q
        key = "MMstar" if k >= 1 else "MMstar_0"
        out[key] = max(out[key], float(np.max(np.abs(op_M(op_Mstar(K)).values - factor * K.values))))
        if k >= 1:
            diff = op_nabla_star(K).values + op_M(op_nabla(K)).values
            out["nabla_star"] = max(out["nabla_star"], float(np.max(np.abs(diff))))
        if k < kmax:
            lk = op_L(K)
            out["L_factored"] = max(
                out["L_factored"], float(np.max(np.abs((lk - op_L_factored(K)).to_flat(k + 1))))
            )
            f = fold_to_graph(K).toarray()
            lf = fold_to_graph(lk).toarray()
            out["commutator"] = max(out["commutator"], float(np.max(np.abs(lf - (a @ f - f @ a)))))
    return out
