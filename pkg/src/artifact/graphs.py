"""Finite regular graphs, directed bonds and local geometry.

Vertices are ``0..n-1``.  Every vertex has ``q+1`` neighbours.  Directed
bonds are numbered so that the bonds leaving vertex ``x`` are the contiguous
block ``x*(q+1) .. x*(q+1)+q``, in the order of the sorted neighbour list.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass
from functools import cached_property

import networkx as nx
import numpy as np
import scipy.sparse as sp
from scipy.sparse import csgraph

MAX_ATTEMPTS = 10_000


class GraphError(ValueError):
    """Invalid graph parameters or a violated graph invariant."""


class GenerationError(RuntimeError):
    """Random generation ran out of its rejection budget."""

    def __init__(self, message, attempts):
        super().__init__(f"{message} (attempts={attempts})")
        self.attempts = attempts


@dataclass(frozen=True)
class BondTable:
    """Directed bonds of a regular graph.

    Attributes
    ----------
    q : int
        Branching number, the degree is ``q+1``.
    origin, terminus : ndarray of int
        ``o(e)`` and ``t(e)`` for every bond ``e``.
    rev : ndarray of int
        Index of the reversed bond.
    label : ndarray of int or None
        Edge colour in ``1..q+1``, shared by a bond and its reversal.
    """

    q: int
    origin: np.ndarray
    terminus: np.ndarray
    rev: np.ndarray
    label: np.ndarray | None = None

    def __len__(self):
        return len(self.origin)

    @property
    def labelled(self):
        return self.label is not None

    @cached_property
    def successors(self) -> np.ndarray:
        """Array ``(n_bonds, q)`` of non-backtracking continuations of each bond."""
        d = self.q + 1
        out = self.terminus[:, None] * d + np.arange(d)[None, :]
        keep = out != self.rev[:, None]
        return out[keep].reshape(len(self), self.q)

    def successor_position(self, prev, nxt):
        """Position of bond ``nxt`` inside ``successors[prev]``."""
        d = self.q + 1
        slot = np.asarray(nxt) % d
        rslot = self.rev[np.asarray(prev)] % d
        return np.where(slot < rslot, slot, slot - 1)

    def check(self):
        """Raise ``GraphError`` when a bond invariant fails."""
        if np.any(self.rev[self.rev] != np.arange(len(self))):
            raise GraphError("reversal is not an involution")
        if np.any(self.rev == np.arange(len(self))):
            raise GraphError("reversal has a fixed point")
        if np.any(self.origin[self.rev] != self.terminus):
            raise GraphError("o(rev e) != t(e)")
        if self.label is not None:
            lab = self.label
            if np.any(lab[self.rev] != lab):
                raise GraphError("labels differ on a bond and its reversal")
            per_vertex = np.sort(lab.reshape(-1, self.q + 1), axis=1)
            if np.any(per_vertex != np.arange(1, self.q + 2)[None, :]):
                raise GraphError("some vertex does not carry every label exactly once")


@dataclass(frozen=True)
class RegularGraph:
    """Connected simple ``(q+1)``-regular graph.

    Parameters
    ----------
    n : int
        Number of vertices.
    q : int
        Branching number.
    adjacency : tuple of tuple of int
        Sorted neighbour list of every vertex.
    name : str
        Free-form tag used in reports.
    """

    n: int
    q: int
    adjacency: tuple
    name: str = ""

    def __post_init__(self):
        d = self.q + 1
        if len(self.adjacency) != self.n:
            raise GraphError("adjacency has the wrong length")
        for x, nbrs in enumerate(self.adjacency):
            if len(nbrs) != d:
                raise GraphError(f"vertex {x} has degree {len(nbrs)}, expected {d}")
            if x in nbrs:
                raise GraphError(f"self-loop at vertex {x}")
            if len(set(nbrs)) != d:
                raise GraphError(f"multi-edge at vertex {x}")
            if list(nbrs) != sorted(nbrs):
                raise GraphError("neighbour lists must be sorted")
            for y in nbrs:
                if x not in self.adjacency[y]:
                    raise GraphError(f"edge {x}-{y} is not symmetric")
        ncomp = csgraph.connected_components(self.adjacency_matrix, directed=False)[0]
        if ncomp != 1:
            raise GraphError("graph is not connected")

    @classmethod
    def from_edges(cls, n, q, edges, name=""):
        nbrs = [[] for _ in range(n)]
        for u, v in edges:
            nbrs[int(u)].append(int(v))
            nbrs[int(v)].append(int(u))
        return cls(n, q, tuple(tuple(sorted(a)) for a in nbrs), name)

    @classmethod
    def from_networkx(cls, graph, name=""):
        graph = nx.convert_node_labels_to_integers(graph, ordering="sorted")
        degrees = {d for _, d in graph.degree()}
        if len(degrees) != 1:
            raise GraphError("graph is not regular")
        q = degrees.pop() - 1
        return cls.from_edges(graph.number_of_nodes(), q, graph.edges(), name)

    @property
    def degree(self):
        return self.q + 1

    @cached_property
    def edges(self) -> np.ndarray:
        """Undirected edges ``(u, v)`` with ``u < v``, lexicographically sorted."""
        e = [(x, y) for x, nbrs in enumerate(self.adjacency) for y in nbrs if x < y]
        return np.array(e, dtype=np.int64).reshape(-1, 2)

    @cached_property
    def adjacency_matrix(self) -> sp.csr_matrix:
        d = self.q + 1
        rows = np.repeat(np.arange(self.n), d)
        cols = np.array([y for nbrs in self.adjacency for y in nbrs], dtype=np.int64)
        return sp.csr_matrix((np.ones(len(cols)), (rows, cols)), shape=(self.n, self.n))

    def dense_adjacency(self):
        return self.adjacency_matrix.toarray()

    @cached_property
    def bonds(self) -> BondTable:
        """Unlabelled bond table."""
        d = self.q + 1
        origin = np.repeat(np.arange(self.n), d)
        terminus = np.array([y for nbrs in self.adjacency for y in nbrs], dtype=np.int64)
        index = {(int(o), int(t)): i for i, (o, t) in enumerate(zip(origin, terminus))}
        rev = np.array([index[(int(t), int(o))] for o, t in zip(origin, terminus)])
        table = BondTable(self.q, origin, terminus, rev)
        table.check()
        return table

    def bond_index(self, x, y):
        """Index of the bond ``x -> y``."""
        return x * (self.q + 1) + self.adjacency[x].index(y)

    @cached_property
    def cycle_rank(self) -> int:
        """``|E| - |V| + 1``."""
        return len(self.edges) - self.n + 1

    @cached_property
    def is_bipartite(self) -> bool:
        return nx.is_bipartite(self.to_networkx())

    def to_networkx(self):
        graph = nx.Graph()
        graph.add_nodes_from(range(self.n))
        graph.add_edges_from(map(tuple, self.edges))
        return graph

    def labelled_bonds(self, edge_labels):
        """Bond table carrying ``edge_labels`` (one per row of ``edges``)."""
        lookup = {}
        for (u, v), c in zip(self.edges, edge_labels):
            lookup[(int(u), int(v))] = int(c)
            lookup[(int(v), int(u))] = int(c)
        base = self.bonds
        label = np.array([lookup[(int(o), int(t))] for o, t in zip(base.origin, base.terminus)])
        table = BondTable(self.q, base.origin, base.terminus, base.rev, label)
        table.check()
        return table


# ----------------------------------------------------------------------------
# construction


_NAMED = re.compile(r"^\s*(petersen|heawood|complete|cycle)\s*(?:\(\s*(\d+)\s*\))?\s*$")


def build_named(name, param=None) -> RegularGraph:
    """Named fixture graph.

    Parameters
    ----------
    name : str
        ``"petersen"``, ``"heawood"``, ``"complete"`` or ``"cycle"``.  The forms
        ``"complete(4)"`` and ``"cycle(6)"`` are also accepted.
    param : int, optional
        Size parameter of ``complete`` and ``cycle``.
    """
    m = _NAMED.match(name)
    if m is None:
        raise GraphError(f"unknown graph name {name!r}")
    kind, inline = m.group(1), m.group(2)
    if inline is not None:
        param = int(inline)
    if kind == "petersen":
        return RegularGraph.from_networkx(nx.petersen_graph(), "petersen")
    if kind == "heawood":
        return RegularGraph.from_networkx(nx.heawood_graph(), "heawood")
    if param is None:
        raise GraphError(f"{kind} needs a size parameter")
    if kind == "complete":
        if param < 3:
            raise GraphError("complete(k) needs k >= 3")
        return RegularGraph.from_networkx(nx.complete_graph(param), f"complete({param})")
    if param < 3:
        raise GraphError("cycle(n) needs n >= 3")
    return RegularGraph.from_networkx(nx.cycle_graph(param), f"cycle({param})")


def _is_connected(n, pairs):
    m = sp.coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    return csgraph.connected_components(m, directed=False)[0] == 1


def random_regular(n, degree, seed) -> RegularGraph:
    """Random simple connected regular graph from the configuration model.

    Stubs are shuffled and paired; samples with loops, multi-edges or more
    than one component are rejected and redrawn.
    """
    if degree < 2 or n <= degree or (n * degree) % 2:
        raise GraphError("need degree >= 2, n > degree and n*degree even")
    rng = np.random.default_rng(seed)
    stubs = np.repeat(np.arange(n), degree)
    for attempt in range(1, MAX_ATTEMPTS + 1):
        pairs = rng.permutation(stubs).reshape(-1, 2)
        if np.any(pairs[:, 0] == pairs[:, 1]):
            continue
        pairs = np.sort(pairs, axis=1)
        if len(np.unique(pairs, axis=0)) != len(pairs):
            continue
        if not _is_connected(n, pairs):
            continue
        g = RegularGraph.from_edges(n, degree - 1, pairs, f"rrg(n={n},d={degree},seed={seed})")
        object.__setattr__(g, "_attempts", attempt)
        return g
    raise GenerationError("configuration model never produced a simple connected graph", MAX_ATTEMPTS)


def random_labelled_regular(n, q, seed):
    """Union of ``q+1`` random perfect matchings, matching ``j`` labelled ``j+1``.

    Returns
    -------
    graph : RegularGraph
    bonds : BondTable
        Bond table with labels.
    """
    if n % 2 or n < 2 or q < 1 or n <= q + 1:
        raise GraphError("need even n > q+1 and q >= 1")
    rng = np.random.default_rng(seed)
    for attempt in range(1, MAX_ATTEMPTS + 1):
        matchings = [np.sort(rng.permutation(n).reshape(-1, 2), axis=1) for _ in range(q + 1)]
        pairs = np.concatenate(matchings)
        if len(np.unique(pairs, axis=0)) != len(pairs):
            continue
        if not _is_connected(n, pairs):
            continue
        g = RegularGraph.from_edges(n, q, pairs, f"labelled(n={n},q={q},seed={seed})")
        labels = {}
        for j, mt in enumerate(matchings):
            for u, v in mt:
                labels[(int(u), int(v))] = j + 1
        edge_labels = [labels[(int(u), int(v))] for u, v in g.edges]
        object.__setattr__(g, "_attempts", attempt)
        return g, g.labelled_bonds(edge_labels)
    raise GenerationError("no simple connected union of matchings found", MAX_ATTEMPTS)


# ----------------------------------------------------------------------------
# geometry


@dataclass(frozen=True)
class GeometryProfile:
    """Girth and per-vertex injectivity radius."""

    girth: float
    rho: np.ndarray

    def bad_count(self, radius):
        """Number of vertices whose injectivity radius is at most ``radius``."""
        return int(np.count_nonzero(self.rho <= radius))

    @property
    def min_rho(self):
        return int(self.rho.min())


def distance_matrix(g: RegularGraph) -> np.ndarray:
    d = csgraph.shortest_path(g.adjacency_matrix, unweighted=True, directed=False)
    return d.astype(np.int64)


def geometry_profile(g: RegularGraph, dist=None) -> GeometryProfile:
    """Girth and injectivity radii.

    ``rho[x]`` is the largest ``r`` for which the subgraph induced on the ball
    ``B(x, r)`` has no cycle, i.e. has exactly one edge fewer than vertices.
    """
    dist = distance_matrix(g) if dist is None else dist
    u, v = g.edges[:, 0], g.edges[:, 1]
    du, dv = dist[:, u], dist[:, v]
    diameter = int(dist.max())
    rho = np.empty(g.n, dtype=np.int64)
    # an edge lies in the induced ball of radius r iff both ends do
    level = np.maximum(du, dv)
    for x in range(g.n):
        nv = np.cumsum(np.bincount(dist[x], minlength=diameter + 1))
        ne = np.cumsum(np.bincount(level[x], minlength=diameter + 1))
        cyclic = np.nonzero(ne != nv - 1)[0]
        rho[x] = cyclic[0] - 1
    # odd cycles show up as an edge between two vertices of equal depth,
    # even cycles as a vertex with two parents in the BFS layering
    odd = np.where(du == dv, 2 * du + 1, np.iinfo(np.int64).max).min()
    parents = np.zeros(dist.shape)
    ne = len(u)
    for a, b in ((u, v), (v, u)):
        hit = (dist[:, a] == dist[:, b] - 1).astype(float)
        scatter = sp.csr_matrix((np.ones(ne), (np.arange(ne), b)), shape=(ne, g.n))
        parents += (scatter.T @ hit.T).T
    even = np.where(parents >= 2, 2 * dist, np.iinfo(np.int64).max).min()
    return GeometryProfile(float(min(odd, even)), rho)


def sphere_sizes(q, r):
    """Sphere and ball sizes ``(tau(r), tau_tilde(r))`` in the ``(q+1)``-regular tree."""
    if r < 0:
        raise ValueError("radius must be non-negative")
    tau = 1 if r == 0 else (q + 1) * q ** (r - 1)
    tau_tilde = 1 + sum((q + 1) * q ** (k - 1) for k in range(1, r + 1))
    return tau, tau_tilde


# ----------------------------------------------------------------------------
# serialization


def graph_to_dict(g: RegularGraph, bonds: BondTable | None = None) -> dict:
    out = {"n": g.n, "q": g.q, "edges": g.edges.tolist()}
    if bonds is not None and bonds.labelled:
        first = [g.bond_index(int(u), int(v)) for u, v in g.edges]
        out["labels"] = bonds.label[first].tolist()
    return out


def graph_from_dict(data: dict):
    """Inverse of :func:`graph_to_dict`; returns ``(graph, bonds)``."""
    g = RegularGraph.from_edges(int(data["n"]), int(data["q"]), data["edges"])
    bonds = g.labelled_bonds(data["labels"]) if data.get("labels") is not None else g.bonds
    return g, bonds


def save_graph(path, g, bonds=None):
    with open(path, "w") as fh:
        json.dump(graph_to_dict(g, bonds), fh)


def load_graph(path):
    with open(path) as fh:
        return graph_from_dict(json.load(fh))
