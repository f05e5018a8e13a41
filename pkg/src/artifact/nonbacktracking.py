"""The non-backtracking bond operator and its relation to the adjacency spectrum."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .eigen import EigenSystem
from .graphs import BondTable, RegularGraph
from .tree import _growth_root

FAMILIES = ("trivial", "tempered", "untempered", "plus_one", "minus_one")


class JordanBlockWarning(UserWarning):
    """Lifting at ``lambda = +-2 sqrt(q)``, where the bond operator is not diagonalizable."""


@dataclass(frozen=True)
class NBOperator:
    """Sparse non-backtracking matrix ``A#(e, e') = 1`` iff ``o(e') = t(e)`` and ``e' != rev(e)``."""

    matrix: sp.csr_matrix
    bonds: BondTable

    @property
    def q(self):
        return self.bonds.q

    def __len__(self):
        return self.matrix.shape[0]

    def apply(self, f):
        return self.matrix @ f

    def apply_adjoint(self, f):
        return self.matrix.T @ f

    def reverse(self, f):
        """``iota f(e) = f(rev e)``."""
        return np.asarray(f)[self.bonds.rev]


def build_nb(g: RegularGraph, bonds: BondTable | None = None) -> NBOperator:
    bonds = g.bonds if bonds is None else bonds
    succ = bonds.successors
    rows = np.repeat(np.arange(len(bonds)), bonds.q)
    mat = sp.csr_matrix((np.ones(succ.size), (rows, succ.ravel())), shape=(len(bonds), len(bonds)))
    return NBOperator(mat, bonds)


def beta_prime(beta, q):
    """Gap of the non-backtracking spectrum induced by an adjacency gap ``beta``.

    ``1 - beta'`` is ``|mu|/q`` for the largest root ``mu`` of
    ``mu**2 - lam*mu + q = 0`` at ``lam = (q+1)(1-beta)``.  Inside the Ramanujan
    window the roots have modulus ``sqrt(q)`` and ``1 - beta' = q**-0.5``.
    """
    if not 0 <= beta <= 1:
        raise ValueError("beta must lie in [0, 1]")
    disc = (1 - beta) ** 2 - 4 * q / (q + 1) ** 2
    if disc <= 0:
        return 1 - q**-0.5
    return 1 - 2 / ((q + 1) * (1 - beta - np.sqrt(disc)))


# ----------------------------------------------------------------------------
# spectrum correspondence


def _nb_pair(q, lam):
    """The two bond eigenvalues ``mu`` with ``mu**2 - lam*mu + q = 0``."""
    x = complex(_growth_root(q, lam + 0j))
    return x, q / x


def predicted_nb_spectrum(g: RegularGraph, eig: EigenSystem, tol=1e-8):
    """Predicted bond spectrum as ``(values, families)``."""
    q = g.q
    b = g.cycle_rank
    bip = bool(np.any(np.abs(eig.lambdas + (q + 1)) < tol))
    vals, fam = [complex(q)], ["trivial"]
    edge = 2 * np.sqrt(q)
    for lam in eig.lambdas:
        if abs(lam - (q + 1)) < tol:
            continue
        if abs(lam + (q + 1)) < tol:
            vals.append(complex(-q))
            fam.append("trivial")
            continue
        kind = "tempered" if abs(lam) <= edge + tol else "untempered"
        for mu in _nb_pair(q, lam):
            vals.append(mu)
            fam.append(kind)
    vals += [1.0 + 0j] * b
    fam += ["plus_one"] * b
    nminus = b if bip else b - 1
    vals += [-1.0 + 0j] * nminus
    fam += ["minus_one"] * nminus
    return np.array(vals), fam


def greedy_pairing(predicted, computed):
    """Pair two equal-size multisets greedily by smallest distance.

    Returns
    -------
    match : ndarray of int
        ``computed[match[i]]`` is paired with ``predicted[i]``.
    """
    predicted, computed = np.asarray(predicted), np.asarray(computed)
    if len(predicted) != len(computed):
        raise ValueError("multisets have different sizes")
    dist = np.abs(predicted[:, None] - computed[None, :])
    order = np.argsort(dist, axis=None, kind="stable")
    match = -np.ones(len(predicted), dtype=np.int64)
    used_p = np.zeros(len(predicted), bool)
    used_c = np.zeros(len(predicted), bool)
    left = len(predicted)
    for flat in order:
        i, j = divmod(int(flat), len(computed))
        if used_p[i] or used_c[j]:
            continue
        match[i] = j
        used_p[i] = used_c[j] = True
        left -= 1
        if left == 0:
            break
    return match


@dataclass(frozen=True)
class CorrespondenceReport:
    predicted: np.ndarray
    matched: np.ndarray
    families: list
    errors: np.ndarray

    @property
    def max_error(self):
        return float(self.errors.max())

    def rows(self):
        for p, m, e, f in zip(self.predicted, self.matched, self.errors, self.families):
            yield p.real, p.imag, m.real, m.imag, e, f

    def count(self, value, tol=1e-6):
        return int(np.sum(np.abs(self.matched - value) < tol))


def nb_spectrum(op: NBOperator):
    if len(op) > 6000:
        raise MemoryError("dense bond eigensolve is limited to 6000 bonds")
    return np.linalg.eigvals(op.matrix.toarray())


def nb_spectrum_correspondence(g: RegularGraph, eig: EigenSystem, tol=1e-6) -> CorrespondenceReport:
    """Compare the predicted and the computed bond spectra as multisets.

    Raises
    ------
    ValueError
        If some pairing distance exceeds ``tol``.
    """
    computed = nb_spectrum(build_nb(g))
    predicted, fam = predicted_nb_spectrum(g, eig)
    match = greedy_pairing(predicted, computed)
    matched = computed[match]
    errors = np.abs(matched - predicted)
    report = CorrespondenceReport(predicted, matched, fam, errors)
    if report.max_error > tol:
        raise ValueError(f"unpaired eigenvalue, pairing distance {report.max_error:.3g}")
    return report


# ----------------------------------------------------------------------------
# lifting adjacency eigenvectors


@dataclass(frozen=True)
class LiftedPair:
    """Bond eigenfunctions built from an adjacency eigenvector.

    ``f = psi(t) - eps psi(o)`` satisfies ``A# f = mu f`` with ``mu = 1/eps``,
    and ``f_star = iota f`` satisfies ``A#* f_star = mu f_star``.
    """

    f: np.ndarray
    f_star: np.ndarray
    eps: complex
    mu: complex
    lam: float

    def residuals(self, op: NBOperator):
        r1 = np.max(np.abs(op.apply(self.f) - self.mu * self.f))
        r2 = np.max(np.abs(op.apply_adjoint(self.f_star) - self.mu * self.f_star))
        return float(r1), float(r2)


def nb_eps(q, lam, branch="+"):
    """Root ``eps`` of ``q eps**2 - lam eps + 1 = 0``.

    ``branch='+'`` gives ``eps = q**(-1/2 - i s)`` with ``sin(s ln q) >= 0`` on the
    tempered window (the root of smaller modulus outside it); ``'-'`` gives the
    other root.
    """
    x = complex(_growth_root(q, complex(lam)))
    if branch == "+":
        return 1 / x
    if branch == "-":
        return x / q
    raise ValueError("branch must be '+' or '-'")


def lift_eigenvector(bonds: BondTable, psi, lam, branch="+") -> LiftedPair:
    q = bonds.q
    if abs(abs(lam) - 2 * np.sqrt(q)) < 1e-10:
        warnings.warn("lambda = +-2 sqrt(q): the lift sits in a Jordan block", JordanBlockWarning)
    eps = nb_eps(q, lam, branch)
    psi = np.asarray(psi)
    f = psi[bonds.terminus] - eps * psi[bonds.origin]
    mu = 1 / eps if eps != 0 else np.inf
    return LiftedPair(f, f[bonds.rev], eps, mu, float(lam))


def odd_even_solutions(op: NBOperator, sign, tol=1e-8):
    """Orthonormal basis of the ``sign``-eigenspace (``sign`` in ``{+1, -1}``) of ``A#``."""
    mat = op.matrix.toarray() - sign * np.eye(len(op))
    u, s, vh = np.linalg.svd(mat)
    return vh[s < tol * max(1.0, s.max())].conj().T


def triangular_block_constant(bonds: BondTable, psi, lam):
    """Upper corner of ``A#`` in an orthonormal basis ``(f1, f2')`` of the two lifts.

    Measured only; it depends on ``q`` and ``lam`` but not on the graph.
    """
    f1 = lift_eigenvector(bonds, psi, lam, "+").f
    f2 = lift_eigenvector(bonds, psi, lam, "-").f
    f1 = f1 / np.linalg.norm(f1)
    f2 = f2 - np.vdot(f1, f2) * f1
    f2 = f2 / np.linalg.norm(f2)
    af2 = f2[bonds.successors].sum(axis=1)
    return complex(np.vdot(f1, af2))
