"""Anisotropic homogeneous walks ``A_p`` on labelled regular graphs and on the labelled tree."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from itertools import product

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .eigen import EigenSystem, eigensystem
from .graphs import BondTable, RegularGraph
from .kernels import GradedKernel, PathComplex, PathSpaceKernel, _as_graded, _scatter, fold_to_graph
from .tree import _richardson
from .variance import DecayTable, diagonal_elements, loglog_slope

log = logging.getLogger(__name__)

EPS_LADDER = (1e-4, 1e-5, 1e-6)


class GreenSolveError(RuntimeError):
    """The homotopy for the tree Green function failed to converge or lost its branch."""


def transition_weights(p):
    """Validate weights ``p_1..p_{q+1}``: positive and summing to one."""
    p = np.asarray(p, dtype=float)
    if p.ndim != 1 or len(p) < 2:
        raise ValueError("need at least two weights")
    if np.any(p <= 0):
        raise ValueError("weights must be positive")
    if abs(p.sum() - 1) > 1e-12:
        raise ValueError("weights must sum to 1")
    return p


# ----------------------------------------------------------------------------
# the Green function system on the labelled tree


def _roots(w, p):
    """Both roots of ``p zeta^2 + 2 w zeta - p = 0``; the product of the roots is ``-1``."""
    r = np.sqrt(w[:, None] ** 2 + p[None, :] ** 2)
    a = -w[:, None] + r
    b = -w[:, None] - r
    big = np.where(np.abs(a) >= np.abs(b), a, b) / p[None, :]
    return big, -1 / big


def _pick(w, p, ref):
    """Root of ``p zeta^2 + 2 w zeta - p = 0`` closest to ``ref`` (or of modulus <= 1)."""
    z1, z2 = _roots(w, p)
    if ref is None:
        return z2
    return np.where(np.abs(z1 - ref) <= np.abs(z2 - ref), z1, z2)


def _equation(p, gamma, w, z):
    """``F(w)`` and ``F'(w)`` without cancellation.

    ``p_k zeta_k + 2w = p_k / zeta_k``, applied to the largest ``zeta_k``, removes
    the cancellation between huge terms inside spectral gaps.
    """
    k = np.argmax(np.abs(z), axis=1)
    rows = np.arange(len(w))
    z2 = z * z
    terms = p[None, :] * z
    dterms = -2 * z2 / (1 + z2)
    zk = z[rows, k]
    f = terms.sum(axis=1) - terms[rows, k] + p[k] / zk - gamma
    df = dterms.sum(axis=1) - dterms[rows, k] + 2 / (1 + zk * zk)
    return f, df


def _newton(p, gamma, w, ref, iters=50, tol=1e-14):
    """Newton on ``F(w) = sum p_j zeta_j(w) + 2w - gamma`` with branch continuity."""
    z = _pick(w, p, ref)
    for _ in range(iters):
        f, df = _equation(p, gamma, w, z)
        step = f / df
        w = w - step
        z = _pick(w, p, z)
        if np.all(np.abs(step) <= tol * np.maximum(1, np.abs(w))):
            break
    return w, z


def _system_residuals(p, gamma, w, z):
    ra = np.abs(_equation(p, gamma, w, z)[0])
    rb = np.abs(p[None, :] * (1 / z - z) - 2 * w[:, None])
    return np.concatenate([ra[:, None], rb], axis=1)


def _relative_residual(p, gamma, w, z):
    """Residuals scaled by the size of the terms (``zeta`` and ``w`` blow up inside gaps)."""
    scale = 1 + np.abs(w) + np.abs(z).max(axis=1) + 1 / np.abs(z).min(axis=1)
    scale = np.maximum(scale, 1.0)
    return _system_residuals(p, gamma, w, z).max(axis=1) / scale


def solve_green_batch(p, gammas, steps_per_decade=25):
    """``(w, zeta)`` for many spectral points off the real axis.

    Each point is reached by a homotopy from ``Re gamma + iY`` (``Y`` large,
    where the decaying root has ``|zeta| < 1``) down to the target imaginary
    part, continuing each ``zeta_j`` to its nearest root.
    """
    p = transition_weights(p)
    gammas = np.atleast_1d(np.asarray(gammas, dtype=complex))
    if np.any(gammas.imag == 0):
        raise ValueError("gamma must be off the real axis")
    flip = gammas.imag < 0
    target = np.where(flip, gammas.conj(), gammas)
    top = 4.0 + np.abs(target.real)
    start = target.real + 1j * top
    w = start / 2 - (p**2).sum() / (2 * start)
    w, z = _newton(p, start, w, None)
    decades = np.log10(top / target.imag)
    nsteps = int(np.ceil(steps_per_decade * max(decades.max(), 0.0))) + 1
    for t in np.linspace(0, 1, nsteps + 1)[1:]:
        gam = target.real + 1j * top ** (1 - t) * target.imag**t
        w, z = _newton(p, gam, w, z, iters=8)
    w, z = _newton(p, target, w, z)
    res = _relative_residual(p, target, w, z)
    if not np.all(np.isfinite(res)) or res.max() > 1e-10:
        raise GreenSolveError(f"homotopy did not converge, residual {np.nanmax(res):.3g}")
    w = np.where(flip, w.conj(), w)
    z = np.where(flip[:, None], z.conj(), z)
    return w, z


def _boundary_batch(p, lams, side="+", eps=EPS_LADDER):
    """On-axis ``(w, zeta)`` by Richardson extrapolation followed by an on-axis polish."""
    p = transition_weights(p)
    lams = np.atleast_1d(np.asarray(lams, dtype=float))
    sgn = 1 if side == "+" else -1
    raw = [solve_green_batch(p, lams + sgn * 1j * e) for e in eps]
    # extrapolate the Green values G(o,o) = 1/(2w) and G(o,a_j) = zeta_j/(2w), which stay bounded
    goo = [1 / (2 * r[0]) for r in raw]
    gj = [r[1] / (2 * r[0][:, None]) for r in raw]
    goo_ex = _richardson(eps, goo)
    gj_ex = _richardson(eps, gj)
    # convergence check: full extrapolation against the one from the two finest eps
    goo_2 = _richardson(eps[1:], goo[1:])
    gj_2 = _richardson(eps[1:], gj[1:])
    spread = np.maximum(np.abs(goo_ex - goo_2), np.abs(gj_ex - gj_2).max(axis=1))
    with np.errstate(divide="ignore", invalid="ignore"):
        w_ex = 1 / (2 * goo_ex)
        z_ex = gj_ex / goo_ex[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        w_pol, z_pol = _newton(p, lams + 0j, w_ex.copy(), z_ex)
        r_ex = _relative_residual(p, lams, w_ex, z_ex)
        r_pol = _relative_residual(p, lams, w_pol, z_pol)
    near = np.abs(z_pol - z_ex).max(axis=1) < 1e-4
    take = (r_pol < r_ex) & near & np.all(np.isfinite(z_pol), axis=1)
    w = np.where(take, w_pol, w_ex)
    z = np.where(take[:, None], z_pol, z_ex)
    return w, z, spread


@dataclass(frozen=True)
class GreenState:
    """Solution ``(w, zeta)`` of the tree Green system at one spectral point.

    ``(gamma - A_p)^{-1}(y, y a_{i1} ... a_{iM}) = zeta(i1) ... zeta(iM) / (2w)``.
    ``side`` is ``'+'`` or ``'-'`` for boundary values on the real axis.
    """

    p: np.ndarray
    gamma: complex
    zeta: np.ndarray
    w: complex
    residuals: np.ndarray
    branch_ok: bool
    side: str | None = None
    spread: float = 0.0

    @property
    def q(self):
        return len(self.p) - 1

    @property
    def diagonal(self):
        return 1 / (2 * self.w)

    @property
    def density(self):
        """``-Im(1/(2w))/pi``, the spectral density of ``A_p`` at the root."""
        return float(-self.diagonal.imag / np.pi)

    @property
    def max_residual(self):
        return float(np.max(self.residuals))

    def u(self):
        """``zeta / conj(zeta)`` per label."""
        return self.zeta / self.zeta.conj()

    def to_dict(self):
        return {
            "p": self.p.tolist(),
            "gamma": [self.gamma.real, self.gamma.imag],
            "zeta": [[z.real, z.imag] for z in self.zeta],
            "w": [self.w.real, self.w.imag],
            "residual": self.max_residual,
            "branch_ok": self.branch_ok,
            "side": self.side,
        }

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d):
        p = np.asarray(d["p"], dtype=float)
        gamma = complex(*d["gamma"])
        zeta = np.array([complex(*z) for z in d["zeta"]])
        w = complex(*d["w"])
        res = _system_residuals(p, np.array([gamma.real if d.get("side") else gamma]), np.array([w]), zeta[None])[0]
        return cls(p, gamma, zeta, w, res, bool(d["branch_ok"]), d.get("side"))

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def _branch_ok(zeta, sign, strict):
    im = zeta.imag * sign
    return bool(np.all(im < 0) if strict else np.all(im <= 1e-9))


def solve_green(p, gamma, side=None) -> GreenState:
    """Green system at ``gamma`` off the axis, or at ``gamma + i0`` / ``gamma - i0`` with ``side``.

    Raises
    ------
    GreenSolveError
        If the homotopy diverges or the branch certificate fails off the axis.
    """
    p = transition_weights(p)
    gamma = complex(gamma)
    if side is None:
        if gamma.imag == 0:
            raise ValueError("real gamma needs side='+' or side='-'")
        w, z = solve_green_batch(p, [gamma])
        res = _system_residuals(p, np.array([gamma]), w, z)[0]
        ok = _branch_ok(z[0], np.sign(gamma.imag), strict=True)
        if not ok:
            raise GreenSolveError("branch certificate failed: Im zeta has the wrong sign")
        return GreenState(p, gamma, z[0], complex(w[0]), res, ok)
    if side not in ("+", "-"):
        raise ValueError("side must be '+' or '-'")
    lam = gamma.real
    w, z, spread = _boundary_batch(p, [lam], side)
    res = _system_residuals(p, np.array([lam + 0j]), w, z)[0]
    ok = _branch_ok(z[0], 1 if side == "+" else -1, strict=False)
    return GreenState(p, complex(lam), z[0], complex(w[0]), res, ok, side, float(spread[0]))


def check_reduced(word, q):
    word = tuple(int(c) for c in word)
    if any(c < 1 or c > q + 1 for c in word):
        raise ValueError(f"labels must lie in 1..{q + 1}")
    if any(a == b for a, b in zip(word, word[1:])):
        raise ValueError("word is not reduced (repeated consecutive label)")
    return word


def anis_green_kernel(state: GreenState, word) -> complex:
    """``(gamma - A_p)^{-1}(y, y g)`` for the reduced word ``g``."""
    word = check_reduced(word, state.q)
    val = state.diagonal
    for c in word:
        val = val * state.zeta[c - 1]
    return complex(val)


def _branch_table(p, gamma, depth):
    """``G_j(d)``, ``d = 0..depth``: root value of a depth-``d`` branch hanging off a label-``j`` edge."""
    p2 = p**2
    table = np.empty((depth + 1, len(p)), dtype=complex)
    table[0] = 1 / gamma
    for d in range(1, depth + 1):
        g = table[d - 1]
        table[d] = 1 / (gamma - (p2 @ g - p2 * g))
    return table


def green_recursive(p, gamma, depth):
    """Tree Green system by the Schur-complement recursion on a truncated tree.

    ``G_j(D) = 1/(gamma - sum_{k != j} p_k^2 G_k(D-1))`` with ``G_j(0) = 1/gamma``
    is the root value of a depth-``D`` branch hanging off an edge of label ``j``.

    Returns
    -------
    w, zeta : complex, ndarray
    """
    p = transition_weights(p)
    gamma = complex(gamma)
    g = _branch_table(p, gamma, depth)[depth]
    g_oo = 1 / (gamma - p**2 @ g)
    return 1 / (2 * g_oo), p * g


def truncated_tree_green(p, gamma, depth, words):
    """``(gamma - A_p)^{-1}(o, g)`` on the ball of radius ``depth + 1`` of the labelled tree.

    The resolvent of a tree factorizes along the geodesic,
    ``G(o, a_{i1}..a_{iM}) = G(o, o) prod_k p_{ik} G_{ik}(depth - k + 1)``,
    so arbitrary depths cost ``O(depth)``.
    """
    p = transition_weights(p)
    gamma = complex(gamma)
    table = _branch_table(p, gamma, depth)
    g_oo = 1 / (gamma - p**2 @ table[depth])
    out = []
    for word in words:
        word = check_reduced(word, len(p) - 1)
        if len(word) > depth + 1:
            raise ValueError("word longer than the truncated tree")
        val = g_oo
        for k, c in enumerate(word):
            val = val * p[c - 1] * table[depth - k, c - 1]
        out.append(val)
    return np.array(out)


@dataclass
class LabelledTreeBall:
    """Ball of reduced words of length ``<= depth`` in the labelled ``(q+1)``-regular tree."""

    q: int
    depth: int
    words: list = field(default_factory=list)
    index: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.words:
            self.words = [()]
            frontier = [()]
            for _ in range(self.depth):
                nxt = []
                for wd in frontier:
                    for c in range(1, self.q + 2):
                        if not wd or wd[-1] != c:
                            nxt.append(wd + (c,))
                self.words.extend(nxt)
                frontier = nxt
        self.index = {wd: i for i, wd in enumerate(self.words)}

    def __len__(self):
        return len(self.words)

    def edges(self):
        """``(parent, child, label)`` for every edge of the ball."""
        out = [(self.index[wd[:-1]], i, wd[-1]) for i, wd in enumerate(self.words) if wd]
        return np.array(out, dtype=np.int64).reshape(-1, 3)

    def walk_matrix(self, p):
        e = self.edges()
        vals = np.asarray(p)[e[:, 2] - 1]
        n = len(self)
        m = sp.coo_matrix((vals, (e[:, 0], e[:, 1])), shape=(n, n))
        return (m + m.T).tocsr()


def tree_resolvent_solve(p, gamma, depth, words):
    """``(gamma - A_p)^{-1}(o, g)`` for each word ``g`` from a sparse solve on the ball."""
    p = transition_weights(p)
    ball = LabelledTreeBall(len(p) - 1, depth)
    mat = (complex(gamma) * sp.identity(len(ball), format="csr") - ball.walk_matrix(p)).tocsc()
    rhs = np.zeros(len(ball), dtype=complex)
    rhs[0] = 1
    sol = spla.spsolve(mat, rhs)
    return np.array([sol[ball.index[check_reduced(wd, len(p) - 1)]] for wd in words])


# ----------------------------------------------------------------------------
# spectral density and harmonic measures


@dataclass(frozen=True)
class DensityTable:
    lambdas: np.ndarray
    density: np.ndarray
    spread: np.ndarray
    flagged: np.ndarray

    @property
    def support(self):
        return self.density > 1e-8

    def rows(self):
        for row in zip(self.lambdas, self.density, self.spread, self.flagged):
            yield float(row[0]), float(row[1]), float(row[2]), bool(row[3])


def anis_density(p, lambda_grid, flag_tol=1e-6) -> DensityTable:
    """``m_p(lam) = -Im(1/(2 w_{lam+i0}))/pi`` on a grid.

    Grid points whose extrapolation spread exceeds ``flag_tol`` are flagged.
    """
    lams = np.asarray(lambda_grid, dtype=float)
    w, _, spread = _boundary_batch(p, lams)
    dens = np.maximum(-(1 / (2 * w)).imag / np.pi, 0.0)
    return DensityTable(lams, dens, spread, spread > flag_tol)


def _density_values(p, lams):
    w, _, _ = _boundary_batch(p, lams)
    return np.maximum(-(1 / (2 * w)).imag / np.pi, 0.0)


def support_intervals(p, grid_size=801, tol=1e-8, bisections=45):
    """Intervals where ``m_p > tol``, edges refined by bisection."""
    lams = np.linspace(-1.0, 1.0, grid_size)
    pos = _density_values(p, lams) > tol
    edges = np.nonzero(np.diff(pos.astype(int)))[0]
    lo, hi = lams[edges], lams[edges + 1]
    rising = ~pos[edges]
    for _ in range(bisections):
        mid = (lo + hi) / 2
        mpos = _density_values(p, mid) > tol
        inside_hi = np.where(rising, mpos, ~mpos)
        hi = np.where(inside_hi, mid, hi)
        lo = np.where(inside_hi, lo, mid)
    pts = (lo + hi) / 2
    if pos[0]:
        pts = np.concatenate([[lams[0]], pts])
    if pos[-1]:
        pts = np.concatenate([pts, [lams[-1]]])
    return [(float(a), float(b)) for a, b in zip(pts[::2], pts[1::2])]


def density_mass(p, npts=200):
    """``int m_p`` over the detected support (Gauss-Legendre in a cosine substitution)."""
    x, wts = np.polynomial.legendre.leggauss(npts)
    theta = 0.5 * np.pi * (x + 1)
    total = 0.0
    for a, b in support_intervals(p):
        lam = a + (b - a) * (1 - np.cos(theta)) / 2
        jac = (b - a) / 2 * np.sin(theta) * 0.5 * np.pi
        total += float(np.sum(wts * jac * _density_values(p, lam)))
    return total


@dataclass(frozen=True)
class CylinderMeasure:
    """Harmonic measure of cylinders ``[a_{i1}, ..., a_{iM}]`` at a spectral point."""

    lam: float
    weights: dict

    def level_sum(self, depth):
        return float(sum(v for k, v in self.weights.items() if len(k) == depth))

    def consistency_error(self):
        """Largest ``|sum of children - parent|`` over all stored prefixes."""
        err = 0.0
        for key, val in self.weights.items():
            kids = [v for k, v in self.weights.items() if len(k) == len(key) + 1 and k[:-1] == key]
            if kids:
                err = max(err, abs(sum(kids) - val))
        return err


def kolmogorov_sum(state: GreenState):
    a = np.abs(state.zeta) ** 2
    return float(np.sum(a / (1 + a)))


def harmonic_cylinders(state: GreenState, depth, tol=1e-10) -> CylinderMeasure:
    """Cylinder weights ``|zeta(i1)|^2 ... |zeta(i_{M-1})|^2 |zeta(iM)|^2/(1+|zeta(iM)|^2)``."""
    if state.density <= tol:
        raise ValueError(f"spectral density vanishes at {state.gamma.real}")
    a = np.abs(state.zeta) ** 2
    q = state.q
    weights = {}
    for m in range(1, depth + 1):
        for word in product(range(1, q + 2), repeat=m):
            if any(x == y for x, y in zip(word, word[1:])):
                continue
            val = np.prod([a[c - 1] for c in word[:-1]]) * a[word[-1] - 1] / (1 + a[word[-1] - 1])
            weights[word] = float(val)
    return CylinderMeasure(state.gamma.real, weights)


# ----------------------------------------------------------------------------
# the walk on a labelled graph


def _require_labels(bonds: BondTable):
    if not bonds.labelled:
        raise ValueError("the graph carries no edge labels")


def build_Ap(g: RegularGraph, bonds: BondTable, p):
    """``A_p f(x) = sum_y p(c(x, y)) f(y)`` as a sparse matrix, with its eigensystem."""
    _require_labels(bonds)
    p = transition_weights(p)
    if len(p) != g.q + 1:
        raise ValueError(f"need {g.q + 1} weights")
    mat = sp.csr_matrix((p[bonds.label - 1], (bonds.origin, bonds.terminus)), shape=(g.n, g.n))
    return mat, eigensystem(mat.toarray(), 1.0, g.is_bipartite)


def build_Bp(bonds: BondTable, p):
    """Weighted non-backtracking operator ``B_p f(e) = sum p(e') f(e')`` over continuations ``e'``."""
    _require_labels(bonds)
    p = np.asarray(p, dtype=float)
    succ = bonds.successors
    rows = np.repeat(np.arange(len(bonds)), bonds.q)
    vals = p[bonds.label[succ.ravel()] - 1]
    return sp.csr_matrix((vals, (rows, succ.ravel())), shape=(len(bonds), len(bonds)))


@dataclass(frozen=True)
class AnisLift:
    """``f = psi(t) - zeta(c) psi(o)`` and ``g = (p/zeta) f`` with ``B_p f = (p/zeta) f``."""

    f: np.ndarray
    g: np.ndarray
    beta: np.ndarray
    residual: float


def lift_anis(bonds: BondTable, psi, state: GreenState, tol=1e-12) -> AnisLift:
    _require_labels(bonds)
    z = state.zeta[bonds.label - 1]
    if np.min(np.abs(z)) < tol:
        raise ValueError("zeta vanishes on some label")
    pe = state.p[bonds.label - 1]
    psi = np.asarray(psi)
    f = psi[bonds.terminus] - z * psi[bonds.origin]
    beta = pe / z
    res = build_Bp(bonds, state.p) @ f - beta * f
    return AnisLift(f, beta * f, beta, float(np.max(np.abs(res))))


def _label_counts(space: PathComplex, k):
    """``(|B_k|, q+1)`` array of label multiplicities along each path."""
    seq = space.bond_sequences(k)
    lab = space.bonds.label[seq] - 1 if k else np.zeros((space.n, 0), dtype=np.int64)
    counts = np.zeros((space.size(k), space.q + 1), dtype=np.int64)
    for col in range(k):
        np.add.at(counts, (np.arange(space.size(k)), lab[:, col]), 1)
    return counts


def _zeta_products(space: PathComplex, k, zeta):
    """``prod zeta(c(e))`` over the bonds of each path of ``B_k``, one row per ``zeta`` row."""
    zeta = np.atleast_2d(zeta)
    counts = _label_counts(space, k)
    uniq, inv = np.unique(counts, axis=0, return_inverse=True)
    vals = np.prod(zeta[:, None, :] ** uniq[None, :, :], axis=2)
    return vals[:, inv.ravel()]


def _shell_ratio_sums(space, K: GradedKernel, w, zeta):
    """``(1/n) sum_omega K(omega) Im(prod zeta/(2w)) / Im(1/(2w))`` for rows of ``(w, zeta)``."""
    w = np.atleast_1d(w)
    diag = 1 / (2 * w)
    out = np.zeros(len(w), dtype=complex)
    for k in K.shells:
        vals = K.components[k]
        if k == 0:
            out += vals.sum() / space.n
            continue
        prods = _zeta_products(space, k, zeta)
        ratio = (prods * diag[:, None]).imag / diag.imag[:, None]
        out += ratio @ vals / space.n
    return out


def k_lambda_p(K, state: GreenState, space: PathComplex, tol=1e-10) -> complex:
    """Anisotropic centering ``<K>_{lam,p}`` at an on-axis state.

    Each path carries the label word of its unique lift to the tree, so paths
    around short cycles are summed over without ambiguity.
    """
    K = _as_graded(K)
    if not K.components:
        return 0j
    if state.density <= tol and any(k > 0 for k in K.shells):
        raise ValueError("spectral density vanishes; use centering_values for a limit")
    return complex(_shell_ratio_sums(space, K, np.array([state.w]), state.zeta[None])[0])


def centering_values(p, lambdas, K, space: PathComplex, eps=EPS_LADDER):
    """``<K>_{lam,p}`` for many ``lam``, as the ``eps -> 0`` limit of the ratio at ``lam + i eps``.

    The limit exists also where the density vanishes, which covers eigenvalues
    outside the support.
    """
    K = _as_graded(K)
    lambdas = np.asarray(lambdas, dtype=float)
    vals = []
    for e in eps:
        w, z = solve_green_batch(p, lambdas + 1j * e)
        vals.append(_shell_ratio_sums(space, K, w, z))
    return _richardson(eps, vals)


# ----------------------------------------------------------------------------
# weighted transfer operators


@dataclass(frozen=True)
class WeightedTransfer:
    """Stochastic transfer operator on ``H_m`` and its invariant weight ``mu``.

    The norm of ``H~_{m,E0}`` is ``sum_omega mu(omega) |K(omega)|^2``.
    """

    matrix: sp.csr_matrix
    mu: np.ndarray
    m: int

    def row_sums(self):
        return np.asarray(self.matrix.sum(axis=1)).ravel()

    def adjoint(self):
        """Adjoint in the weighted space."""
        d = sp.diags(self.mu)
        dinv = sp.diags(1 / self.mu)
        return (dinv @ self.matrix.conj().T @ d).tocsr()

    def invariance_error(self):
        """``max |mu S - mu|``: zero iff the adjoint is stochastic."""
        return float(np.max(np.abs(self.matrix.T @ self.mu - self.mu)))

    def norm(self, power=1, mean_zero=False):
        """Operator norm of ``S^power`` in the weighted space (dense)."""
        mat = np.linalg.matrix_power(self.matrix.toarray(), power)
        s = np.sqrt(self.mu)
        conj = s[:, None] * mat / s[None, :]
        if mean_zero:
            v = s / np.linalg.norm(s)
            proj = np.eye(len(s)) - np.outer(v, v)
            conj = proj @ conj @ proj
        return float(np.linalg.norm(conj, 2))


def weighted_transfer(state: GreenState, space: PathComplex, m, with_u=False) -> WeightedTransfer:
    """``S_{E0}`` (or ``S^u_{E0}``) on ``H_m`` of a labelled graph.

    ``S K(omega) = sum_{omega' -> omega} (1+|z(omega_0 omega_1)|^2)/(1+|z(omega'_0 omega'_1)|^2)
    |z(omega'_0 omega'_1)|^2 K(omega')`` with ``omega'`` the path one step behind ``omega``.
    """
    if m < 1:
        raise ValueError("m must be at least 1")
    _require_labels(space.bonds)
    if state.density <= 1e-10:
        raise ValueError("spectral density vanishes at E0")
    lab = space.bonds.label - 1
    a = np.abs(state.zeta) ** 2
    lev, up = space.level(m), space.level(m + 1)
    c_new = lab[lev.first[up.tail]]
    c_old = lab[lev.first[up.head]]
    vals = (1 + a[c_new]) / (1 + a[c_old]) * a[c_old]
    if with_u:
        vals = vals * state.u()[c_old]
    size = space.size(m)
    mat = sp.csr_matrix((vals, (up.tail, up.head)), shape=(size, size))
    prods = np.abs(_zeta_products(space, m, state.zeta)[0]) ** 2
    mu = prods / ((1 + a[lab[lev.first]]) * (1 + a[lab[lev.last]])) / space.n
    return WeightedTransfer(mat, mu, m)


def decay_gap(state: GreenState, space: PathComplex, m):
    """``1 - ||(S^u)^{m+1}||`` in the weighted space."""
    return 1 - weighted_transfer(state, space, m, with_u=True).norm(m + 1)


def log_cheeger_sandwich(op: WeightedTransfer, k0, beta_p):
    """Log ``||S^k0||`` on mean-zero functions next to the isotropic rate ``(1-beta')^(k0-m+1)``."""
    measured = op.norm(k0, mean_zero=True)
    rate = (1 - beta_p) ** (k0 - op.m + 1)
    log.info("weighted transfer: ||S^%d||_0 = %.6g, isotropic rate %.6g", k0, measured, rate)
    return measured, rate


# ----------------------------------------------------------------------------
# conjugated kernels, variances and identities


def _label_arrays(space, state_p, zeta):
    lab = space.bonds.label - 1
    return state_p[lab], zeta[lab]


def conjugated_kernel(K: PathSpaceKernel, p, zeta) -> GradedKernel:
    """Path kernel whose fold is ``(iota U)^* K_B U`` with ``U phi(e) = (p/zeta)(e)(phi(t e) - zeta(e) phi(o e))``.

    The result lives on shells ``m, m-1, m-2`` (for ``m = 1`` the last part is
    the reversed bond, again in ``H_1``).
    """
    space, m = K.space, K.k
    if m < 1:
        raise ValueError("bond kernels need paths of length at least 1")
    lev = space.level(m)
    pe, ze = _label_arrays(space, np.asarray(p, float), np.asarray(zeta))
    b1, b2 = lev.first, lev.last
    beta = pe / ze
    v = K.values
    comps = {m: np.conj(beta[b1]) * beta[b2] * v}
    tail = -pe[b1] * beta[b2] * v
    head = -np.conj(beta[b1]) * pe[b2] * v
    size = space.size(m - 1)
    comps[m - 1] = _scatter(lev.tail, tail, size) + _scatter(lev.head, head, size)
    inner = pe[b1] * pe[b2] * v
    if m == 1:
        comps[1] = comps[1] + _scatter(space.bonds.rev[b1], inner, space.size(1))
    else:
        comps[m - 2] = comps.get(m - 2, 0) + _scatter(lev.mil, inner, space.size(m - 2))
    return GradedKernel(space, comps)


def _bond_pairing(left, K: PathSpaceKernel, right):
    lev = K.space.level(K.k)
    return complex(np.sum(np.conj(left[lev.first]) * K.values * right[lev.last]))


def in_support(eig: EigenSystem, p, tol=1e-8):
    """Indices ``j`` with positive density at ``lambda_j`` and their on-axis ``(w, zeta)``."""
    w, z, _ = _boundary_batch(p, eig.lambdas)
    dens = -(1 / (2 * w)).imag / np.pi
    idx = np.nonzero(dens > tol)[0]
    return idx, w[idx], z[idx]


def anis_nb_variance(g, bonds, p, eig: EigenSystem, K, interval=None):
    """``(1/N) sum_j |<iota g_j, K_B g_j>|^2`` over eigenvalues with positive density."""
    K = _as_graded(K)
    idx, _, zs = in_support(eig, p)
    if interval is not None:
        keep = (eig.lambdas[idx] > interval[0]) & (eig.lambdas[idx] < interval[1])
        idx, zs = idx[keep], zs[keep]
        if len(idx) == 0:
            raise ValueError(f"no eigenvalue with positive density in {interval}")
    terms = np.empty(len(idx), dtype=complex)
    for i, (j, z) in enumerate(zip(idx, zs)):
        st = GreenState(np.asarray(p, float), complex(eig.lambdas[j]), z, 0j, np.zeros(1), True, "+")
        lift = lift_anis(bonds, eig.psis[:, j], st)
        gj = lift.g
        terms[i] = sum(_bond_pairing(gj[bonds.rev], K.component(k), gj) for k in K.shells)
    denom = g.n if interval is None else len(idx)
    return float(np.sum(np.abs(terms) ** 2) / denom), eig.lambdas[idx], terms


@dataclass(frozen=True)
class M0Report:
    """Two-sided evaluation of the m = 0 pairing identity.

    ``residual`` is for the p-weighted form with the factor ``2i``;
    ``unweighted_residual`` is for ``2 sum |psi|^2 ((A_lam - W_lam) a)`` with
    unit weights, kept for comparison.
    """

    residual: float
    unweighted_residual: float
    scale: float
    w_spread: float
    count: int


def _neighbour_sum(bonds, weights, f, n):
    f = np.asarray(f, dtype=complex)
    vals = weights * f[bonds.terminus]
    return np.bincount(bonds.origin, vals.real, n) + 1j * np.bincount(bonds.origin, vals.imag, n)


def m0_identity_check(g: RegularGraph, bonds: BondTable, p, eig: EigenSystem, a) -> M0Report:
    """Check ``<iota g, K_B g> - <iota g~, K_B g~> = 2i sum_x |psi|^2 ((A^p_lam - W^p_lam) a)(x)``.

    ``K_lam(x, y) = a(x) |zeta(x,y)|^2 / p(x,y)``, ``g`` is built from
    ``zeta_{lam+i0}`` and ``g~`` from ``zeta_{lam-i0}``,
    ``A^p_lam f(x) = sum_y p(x,y) Im zeta(x,y) f(y)`` and ``W^p_lam = A^p_lam 1``.
    The unit-weight operator ``A_lam`` with ``W_lam = sum_y Im zeta(x,y)``
    is evaluated alongside; ``w_spread`` is the spread of ``W_lam`` over ``x``.
    """
    _require_labels(bonds)
    p = transition_weights(p)
    a = np.asarray(a, dtype=complex)
    space = PathComplex(g, bonds)
    idx, _, zs = in_support(eig, p)
    lab = bonds.label - 1
    res = res_unit = scale = spread = 0.0
    ones = np.ones(g.n)
    for j, zp in zip(idx, zs):
        psi = eig.psis[:, j]
        kvals = a[bonds.origin] * np.abs(zp[lab]) ** 2 / p[lab]
        Kl = PathSpaceKernel(space, 1, kvals)
        lhs = 0j
        for z, sgn in ((zp, 1), (zp.conj(), -1)):
            st = GreenState(p, complex(eig.lambdas[j]), z, 0j, np.zeros(1), True)
            gj = lift_anis(bonds, psi, st).g
            lhs += sgn * _bond_pairing(gj[bonds.rev], Kl, gj)
        dens = np.abs(psi) ** 2
        im = zp.imag[lab]
        wp = _neighbour_sum(bonds, p[lab] * im, ones, g.n)
        rhs = 2j * np.sum(dens * (_neighbour_sum(bonds, p[lab] * im, a, g.n) - wp * a))
        w_unit = _neighbour_sum(bonds, im, ones, g.n)
        rhs_unit = 2 * np.sum(dens * (_neighbour_sum(bonds, im, a, g.n) - w_unit * a))
        spread = max(spread, float(np.ptp(w_unit.real)), float(np.ptp(wp.real)))
        res = max(res, abs(lhs - rhs))
        res_unit = max(res_unit, abs(lhs - rhs_unit))
        scale = max(scale, abs(lhs))
    return M0Report(float(res), float(res_unit), float(scale), spread, len(idx))


@dataclass(frozen=True)
class OrthogonalityReport:
    """Green pairing of the conjugated kernel's root row on the labelled tree."""

    lam: float
    pairing: complex
    scale: float
    shells: dict


def tree_conjugated_row(p, zeta, word_kernel, m, depth=None):
    """Root row of ``(iota U)^* K_B U`` on a labelled tree ball.

    ``word_kernel`` maps each reduced word of length ``m`` to the value of the
    label-invariant kernel on paths with that label sequence.  The row is
    exact once ``depth >= m + 1``.

    Returns
    -------
    dict
        Reduced word of the column vertex -> entry.
    """
    q = len(p) - 1
    depth = m + 2 if depth is None else depth
    if depth < m + 1:
        raise ValueError("depth must be at least m + 1")
    ball = LabelledTreeBall(q, depth)
    p = np.asarray(p, float)
    zeta = np.asarray(zeta)
    beta = p / zeta

    def move(word, c):
        return word[:-1] if word and word[-1] == c else word + (c,)

    row = {}

    def add(word, val):
        row[word] = row.get(word, 0) + val

    # paths with x0 = o contribute through o(e1) = o, paths with x1 = o through t(e1) = o
    for lab0 in range(1, q + 2):
        for rest in product(range(1, q + 2), repeat=m - 1):
            labels = (lab0,) + rest
            if any(x == y for x, y in zip(labels, labels[1:])):
                continue
            kval = word_kernel[labels]
            c1, c2 = labels[0] - 1, labels[-1] - 1
            # path from the root: vertices o, a_{l1}, a_{l1}a_{l2}, ...
            end = labels
            before_end = labels[:-1]
            add(end, np.conj(beta[c1]) * beta[c2] * kval)
            add(before_end, -np.conj(beta[c1]) * p[c2] * kval)
            # path whose second vertex is the root: it starts at a_{l1}
            end2 = prev2 = (labels[0],)
            for i, c in enumerate(labels):
                end2 = move(end2, c)
                if i < m - 1:
                    prev2 = move(prev2, c)
            add(end2, -p[c1] * beta[c2] * kval)
            add(prev2, p[c1] * p[c2] * kval)
    for wd in row:
        if wd not in ball.index:
            raise ValueError("tree ball too shallow for the kernel")
    return row


def green_orthogonality_check(p, word_kernel, m, lambda_grid, depth=None):
    """``sum_y F(o, y) Im g_{lam+i0}(y) = 0`` for the conjugated kernel ``F`` at each ``lam``."""
    p = transition_weights(p)
    out = []
    for lam in np.atleast_1d(lambda_grid):
        st = solve_green(p, lam, side="+")
        if st.density <= 1e-8:
            raise ValueError(f"spectral density vanishes at {lam}")
        row = tree_conjugated_row(p, st.zeta, word_kernel, m, depth)
        pairing, scale, shells = 0j, 0.0, {}
        for wd, val in row.items():
            term = val * anis_green_kernel(st, wd).imag
            pairing += term
            scale = max(scale, abs(term))
            shells[len(wd)] = shells.get(len(wd), 0) + term
        out.append(OrthogonalityReport(float(lam), complex(pairing), scale, shells))
    return out


def random_word_kernel(q, m, rng):
    """Random complex value on every reduced word of length ``m``."""
    out = {}
    for word in product(range(1, q + 2), repeat=m):
        if all(x != y for x, y in zip(word, word[1:])):
            out[word] = complex(rng.standard_normal(), rng.standard_normal())
    return out


def word_kernel_on_graph(space: PathComplex, word_kernel, m) -> PathSpaceKernel:
    """Label-invariant kernel on ``H_m`` of a labelled graph."""
    seq = space.bond_sequences(m)
    lab = space.bonds.label[seq]
    vals = np.array([word_kernel[tuple(int(c) for c in row)] for row in lab], dtype=complex)
    return PathSpaceKernel(space, m, vals)


# ----------------------------------------------------------------------------
# decay experiments


def anis_quantum_variance(g, bonds, p, eig: EigenSystem, K, use_centering=True):
    """Variance of ``K`` in the ``A_p`` eigenbasis, centered by ``<K>_{lam_j,p}``.

    Returns
    -------
    var, hsn_sq, deviations
    """
    K = _as_graded(K)
    space = K.space
    if not K.components:
        return 0.0, 0.0, np.zeros(len(eig), complex)
    dev = np.zeros(len(eig), dtype=complex)
    if use_centering:
        # the diagonal shell is centered exactly by its mean
        if 0 in K.components:
            v0 = K.components[0]
            dev += diagonal_elements(eig.psis, fold_to_graph(GradedKernel(space, {0: v0 - v0.mean()})).matrix)
        rest = GradedKernel(space, {k: v for k, v in K.components.items() if k > 0})
        if rest.components:
            dev += diagonal_elements(eig.psis, fold_to_graph(rest).matrix)
            dev -= centering_values(p, eig.lambdas, rest, space)
    else:
        dev = diagonal_elements(eig.psis, fold_to_graph(K).matrix)
    var = float(np.sum(np.abs(dev) ** 2) / g.n)
    return var, fold_to_graph(K).hsn_sq(), dev


def anis_variance_experiment(family, p, K_gen, use_centering=True) -> DecayTable:
    """Decay table over a family of labelled graphs ``(g, bonds)`` of increasing size."""
    family = list(family)
    if len(family) < 3:
        raise ValueError("a decay experiment needs at least three graphs")
    from .graphs import geometry_profile, sphere_sizes

    table = DecayTable()
    for g, bonds in family:
        _, eig = build_Ap(g, bonds, p)
        space = PathComplex(g, bonds)
        K = _as_graded(K_gen(g, space, eig))
        var, hsn, _ = anis_quantum_variance(g, bonds, p, eig, K, use_centering)
        prof = geometry_profile(g)
        depth = max(K.depth, 0)
        bad = sphere_sizes(g.q, depth)[1] ** 2 * K.sup() ** 2 * prof.bad_count(depth) / g.n
        table.rows.append((g.n, None, prof.girth, eig.beta, var, hsn, bad))
    table.slope = loglog_slope([r[0] for r in table.rows], table.vars)
    return table
