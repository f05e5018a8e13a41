"""Harmonic analysis on the ``(q+1)``-regular tree.

A real spectral value is written ``lam = 2*sqrt(q)*cos(theta)`` with
``theta = s*log(q)``.  The tempered window ``|lam| <= 2*sqrt(q)`` is where
``theta`` is real; on it the boundary value ``lam + i0`` corresponds to
``sin(theta) >= 0``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import integrate


@dataclass(frozen=True)
class SpectralParameter:
    """Spectral parameter of a point ``lam`` for branching number ``q``.

    ``alpha = 1/2 + i*s`` satisfies ``lam = q**(1-alpha) + q**alpha`` with
    ``Re(alpha) >= 1/2``.
    """

    q: int
    lam: complex
    s: complex
    alpha: complex

    @property
    def theta(self):
        return self.s * np.log(self.q)

    @property
    def tempered(self):
        return abs(np.imag(self.s)) < 1e-12

    def lam_from_s(self):
        return 2 * np.sqrt(self.q) * np.cos(self.theta)


def _growth_root(q, gamma):
    """Root ``X = q**alpha`` of ``X + q/X = gamma`` with ``|X| >= sqrt(q)``.

    On the real tempered window both roots have modulus ``sqrt(q)`` and the one
    with non-negative imaginary part (the ``+i0`` side) is returned.
    """
    gamma = np.asarray(gamma, dtype=complex)
    d2 = gamma * gamma - 4 * q
    disc = np.sqrt(np.where(np.abs(d2) < 1e-12 * q, 0, d2))
    r1 = (gamma + disc) / 2
    r2 = (gamma - disc) / 2
    a1, a2 = np.abs(r1), np.abs(r2)
    tie = np.isclose(a1, a2, rtol=1e-13, atol=0)
    pick = np.where(a1 > a2, r1, r2)
    pick = np.where(tie, np.where(r1.imag >= r2.imag, r1, r2), pick)
    return pick


def spectral_param(q, lam) -> SpectralParameter:
    """Spectral parameter of ``lam`` (real or complex); needs ``q >= 2``."""
    if q < 2:
        raise ValueError("the spectral parameter needs q >= 2")
    x = _growth_root(q, lam)
    alpha = np.log(x) / np.log(q)
    s = (alpha - 0.5) / 1j
    return SpectralParameter(q, complex(lam), complex(s), complex(alpha))


def spherical_phi_table(q, lam, dmax):
    """Spherical function ``Phi_lam(d)`` for ``d = 0..dmax`` by recurrence.

    ``lam`` may be an array; the result has shape ``lam.shape + (dmax+1,)``.
    Uses ``Phi(0) = 1``, ``Phi(1) = lam/(q+1)`` and
    ``lam*Phi(d) = q*Phi(d+1) + Phi(d-1)``.
    """
    lam = np.asarray(lam)
    out = np.empty(lam.shape + (dmax + 1,), dtype=np.result_type(lam, float))
    out[..., 0] = 1.0
    if dmax >= 1:
        out[..., 1] = lam / (q + 1)
    for d in range(1, dmax):
        out[..., d + 1] = (lam * out[..., d] - out[..., d - 1]) / q
    return out


def spherical_phi(q, lam, d):
    """``Phi_lam(d)`` evaluated by the three-term recurrence."""
    if d < 0:
        raise ValueError("distance must be non-negative")
    return spherical_phi_table(q, lam, d)[..., d]


def spherical_phi_closed(q, lam, d):
    """Closed trigonometric form of ``Phi_lam(d)``.

    Singular (removably) at ``lam = +-2 sqrt(q)``; kept as a cross-check.
    """
    theta = np.arccos(np.asarray(lam, dtype=complex) / (2 * np.sqrt(q)))
    val = q ** (-d / 2) * (
        2 / (q + 1) * np.cos(d * theta)
        + (q - 1) / (q + 1) * np.sin((d + 1) * theta) / np.sin(theta)
    )
    return val.real if np.isrealobj(lam) else val


def sphere_function(q, lam, d):
    """``h_d(lam) = tau(d) * Phi_lam(d)``, the eigenvalue of the distance-``d`` sum operator."""
    tau = 1 if d == 0 else (q + 1) * q ** (d - 1)
    return tau * spherical_phi(q, lam, d)


def green_tree(q, gamma, d, side=None):
    """Isotropic tree resolvent ``(gamma - A)^{-1}(x, o)`` at distance ``d``.

    Parameters
    ----------
    q : int
    gamma : complex or array
        Spectral point off the real axis, or a real point when ``side`` is set.
    d : int or array of int
    side : {None, "+", "-"}
        For real ``gamma``, the boundary value from above or below.
    """
    gamma = np.asarray(gamma, dtype=complex)
    if side is None:
        if np.any((gamma.imag == 0) & (np.abs(gamma.real) <= 2 * np.sqrt(q))):
            raise ValueError("gamma on the tempered window needs side='+' or side='-'")
        x = _growth_root(q, gamma)
    else:
        x = _growth_root(q, gamma.real + 0j)
        if side == "-":
            x = np.conj(x)
        elif side != "+":
            raise ValueError("side must be '+' or '-'")
    denom = x - 1 / x
    if np.any(np.abs(denom) < 1e-14):
        raise ZeroDivisionError("Green function blows up at this point")
    return x ** (-np.asarray(d)) / denom


def _richardson(eps, values):
    """Polynomial extrapolation of ``values(eps)`` to ``eps = 0`` (Neville)."""
    eps = np.asarray(eps, dtype=float)
    table = [np.asarray(v, dtype=complex) for v in values]
    n = len(eps)
    for k in range(1, n):
        table = [
            (eps[i + k] * table[i] - eps[i] * table[i + 1]) / (eps[i + k] - eps[i])
            for i in range(n - k)
        ]
    return table[0]


@dataclass(frozen=True)
class LimitReport:
    value: np.ndarray
    raw: tuple
    eps: tuple
    spread: float


def green_tree_limit(q, lam, d, eps=(1e-4, 1e-5, 1e-6)):
    """``g_{lam+i0}(d)`` obtained from off-axis values by Richardson extrapolation."""
    raw = tuple(green_tree(q, np.asarray(lam) + 1j * e, d) for e in eps)
    value = _richardson(eps, raw)
    spread = float(np.max(np.abs(value - raw[-1])))
    return LimitReport(value, raw, tuple(eps), spread)


# ----------------------------------------------------------------------------
# Plancherel (Kesten-McKay) density


@dataclass(frozen=True)
class PlancherelDensity:
    """Spectral density of the tree adjacency operator at a vertex."""

    q: int

    @property
    def edge(self):
        return 2 * np.sqrt(self.q)

    def __call__(self, lam):
        lam = np.asarray(lam, dtype=float)
        inside = np.abs(lam) < self.edge
        g0 = green_tree(self.q, np.where(inside, lam, 0.0), 0, side="+")
        return np.where(inside, -g0.imag / np.pi, 0.0)

    def _theta_integral(self, func, a=0.0, b=np.pi):
        # lam = edge*cos(theta) removes the square-root edges
        def integrand(theta):
            lam = self.edge * np.cos(theta)
            return func(lam) * self(lam) * self.edge * np.sin(theta)

        val, _ = integrate.quad(integrand, a, b, epsabs=1e-13, epsrel=1e-13, limit=200)
        return val

    def moment(self, k):
        return self._theta_integral(lambda lam: lam**k)

    def cdf(self, lam):
        """``int_{-inf}^{lam} m``."""
        lam = float(lam)
        if lam <= -self.edge:
            return 0.0
        if lam >= self.edge:
            return 1.0
        return self._theta_integral(lambda _: 1.0, np.arccos(lam / self.edge), np.pi)

    def quadrature(self, npts):
        """Nodes and weights ``(lam_i, w_i)`` with ``sum w_i f(lam_i) ~ int f m``."""
        x, w = np.polynomial.legendre.leggauss(npts)
        theta = 0.5 * np.pi * (x + 1)
        lam = self.edge * np.cos(theta)
        weights = 0.5 * np.pi * w * self(lam) * self.edge * np.sin(theta)
        return lam, weights


def km_density(q) -> PlancherelDensity:
    return PlancherelDensity(q)


# ----------------------------------------------------------------------------
# trace formula on a finite ball


@dataclass(frozen=True)
class TreeBall:
    """Ball of radius ``depth`` around the root of the ``(q+1)``-regular tree."""

    q: int
    depth: int
    parent: np.ndarray
    level: np.ndarray
    dist: np.ndarray

    @property
    def size(self):
        return len(self.parent)

    def boundary(self):
        return np.nonzero(self.level == self.depth)[0]

    def adjacency(self):
        a = np.zeros((self.size, self.size))
        child = np.arange(1, self.size)
        a[child, self.parent[1:]] = 1
        a[self.parent[1:], child] = 1
        return a


def tree_ball(q, depth) -> TreeBall:
    parent, level = [-1], [0]
    frontier = [0]
    for r in range(1, depth + 1):
        nxt = []
        for v in frontier:
            for _ in range(q + 1 if v == 0 else q):
                parent.append(v)
                level.append(r)
                nxt.append(len(parent) - 1)
        frontier = nxt
    parent = np.array(parent)
    level = np.array(level)
    n = len(parent)
    # distances through the lowest common ancestor
    anc = [[v] for v in range(n)]
    for v in range(1, n):
        anc[v] = anc[parent[v]] + [v]
    dist = np.zeros((n, n), dtype=np.int64)
    for a in range(n):
        sa = set(anc[a])
        for b in range(n):
            common = max((level[v] for v in anc[b] if v in sa), default=0)
            dist[a, b] = level[a] + level[b] - 2 * common
    return TreeBall(q, depth, parent, level, dist)


@dataclass(frozen=True)
class TraceReport:
    trace: float
    spectral: float
    error: float


def tree_trace_check(kernel, q, depth, npts=64) -> TraceReport:
    """Compare the trace of a ball-supported kernel with its spectral integral.

    The boundary is split into the depth-``depth`` cylinders, each of harmonic
    measure ``1/tau(depth)``; on the ball the Busemann function of a boundary
    point only depends on its cylinder.

    Parameters
    ----------
    kernel : ndarray
        Square matrix indexed by the vertices of ``tree_ball(q, depth)``.
    npts : int
        Gauss-Legendre points in the angle variable.
    """
    ball = tree_ball(q, depth)
    kernel = np.asarray(kernel)
    if kernel.shape != (ball.size, ball.size):
        raise ValueError("kernel does not match the ball size")
    cyl = ball.boundary()
    busemann = ball.dist[:, cyl] - depth  # (ball, cylinders)
    lam, w = km_density(q).quadrature(npts)
    total = 0.0 + 0.0j
    for lam_i, w_i in zip(lam, w):
        x = _growth_root(q, lam_i + 0j)
        p = x ** (-busemann.astype(float))
        quad = np.einsum("xc,xy,yc->", p.conj(), kernel, p)
        total += w_i * quad / len(cyl)
    trace = float(np.trace(kernel).real)
    return TraceReport(trace, float(total.real), abs(total - trace))
