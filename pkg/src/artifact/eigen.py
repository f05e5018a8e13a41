"""Dense symmetric eigensystems of adjacency-type operators."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graphs import RegularGraph


@dataclass(frozen=True)
class EigenSystem:
    """Orthonormal eigenbasis of a symmetric operator on ``l^2(V)``.

    Attributes
    ----------
    lambdas : ndarray
        Eigenvalues in ascending order.
    psis : ndarray
        Orthonormal eigenvectors as columns.
    top : float
        Trivial eigenvalue (``q+1`` for ``A``, ``1`` for a stochastic ``A_p``).
    beta : float
        Spectral gap ``1 - max |lambda| / top`` over the non-trivial spectrum.
        With ``bipartite=True`` the eigenvalue ``-top`` also counts as trivial.
    """

    lambdas: np.ndarray
    psis: np.ndarray
    top: float
    beta: float

    def __len__(self):
        return len(self.lambdas)

    def residual(self, matrix):
        """Largest ``|A psi - lambda psi|`` over the basis."""
        return float(np.max(np.abs(matrix @ self.psis - self.psis * self.lambdas[None, :])))

    def gram_error(self):
        n = self.psis.shape[1]
        return float(np.max(np.abs(self.psis.conj().T @ self.psis - np.eye(n))))

    def nontrivial(self, bipartite=False, tol=1e-8):
        """Mask of eigenvalues other than ``top`` (and ``-top`` when bipartite)."""
        mask = np.abs(self.lambdas - self.top) > tol
        if bipartite:
            mask &= np.abs(self.lambdas + self.top) > tol
        return mask


def spectral_gap(lambdas, top, bipartite=False, tol=1e-8):
    lambdas = np.asarray(lambdas)
    mask = np.abs(lambdas - top) > tol
    if bipartite:
        mask &= np.abs(lambdas + top) > tol
    if not np.any(mask):
        return 1.0
    return float(1 - np.max(np.abs(lambdas[mask])) / top)


def eigensystem(matrix, top, bipartite=False) -> EigenSystem:
    """Eigensystem of a dense symmetric matrix with trivial eigenvalue ``top``."""
    matrix = np.asarray(matrix, dtype=float)
    if not np.allclose(matrix, matrix.T, atol=1e-13):
        raise ValueError("matrix is not symmetric")
    lam, vec = np.linalg.eigh(matrix)
    # make the top eigenvector the positive constant when it is simple
    if abs(lam[-1] - top) < 1e-8 and (len(lam) < 2 or abs(lam[-2] - top) > 1e-8):
        vec[:, -1] *= np.sign(vec[:, -1].sum())
    return EigenSystem(lam, vec, float(top), spectral_gap(lam, top, bipartite))


def adjacency_eigensystem(g: RegularGraph, bipartite_gap=None) -> EigenSystem:
    """Eigensystem of the adjacency matrix of ``g``.

    Parameters
    ----------
    bipartite_gap : bool, optional
        Treat ``-(q+1)`` as trivial when computing the gap; defaults to
        ``g.is_bipartite``.
    """
    if bipartite_gap is None:
        bipartite_gap = g.is_bipartite
    return eigensystem(g.dense_adjacency(), g.q + 1, bipartite_gap)
