"""Embedding tables, normalized bipartite propagation, BPR math, and ranking.

The model state is nothing but the user/item embedding tables. A layer is a
linear map over the symmetrically normalized interaction graph, the readout
is the mean over layers, and predictions are inner products. Because one
propagation step is self-adjoint on the stacked user+item space, the exact
loss gradient with respect to the raw tables is obtained by running the same
propagation and readout on the gradient of the final tables.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from scipy import sparse
from scipy.special import expit

from .errors import DataError


@dataclass(eq=False)
class EmbeddingTable:
    """Dense user and item embedding rows sharing one dimension."""

    users: np.ndarray
    items: np.ndarray

    def __post_init__(self) -> None:
        self.users = np.ascontiguousarray(np.asarray(self.users, dtype=np.float64))
        self.items = np.ascontiguousarray(np.asarray(self.items, dtype=np.float64))
        if self.users.ndim != 2 or self.items.ndim != 2:
            raise ValueError("embedding tables must be two-dimensional")
        if self.users.shape[1] != self.items.shape[1]:
            raise ValueError(
                f"user dim {self.users.shape[1]} != item dim {self.items.shape[1]}"
            )

    @property
    def dim(self) -> int:
        return self.users.shape[1]

    @property
    def n_users(self) -> int:
        return self.users.shape[0]

    @property
    def n_items(self) -> int:
        return self.items.shape[0]

    def copy(self) -> "EmbeddingTable":
        return EmbeddingTable(self.users.copy(), self.items.copy())

    def allfinite(self) -> bool:
        return bool(np.isfinite(self.users).all() and np.isfinite(self.items).all())


def init_table(
    n_users: int, n_items: int, dim: int, rng: np.random.Generator, scale: float = 0.1
) -> EmbeddingTable:
    """Gaussian-initialized table (std ``scale``), users drawn before items."""
    return EmbeddingTable(
        rng.normal(0.0, scale, (n_users, dim)),
        rng.normal(0.0, scale, (n_items, dim)),
    )


@dataclass(frozen=True)
class BipartiteGraph:
    """A user-item interaction graph given by its (user, item) edge list."""

    n_users: int
    n_items: int
    edges: tuple[tuple[int, int], ...]


@dataclass(eq=False)
class PropagationOperator:
    """L-layer propagation over a bipartite graph.

    One step maps each user row to the sum of its incident item rows weighted
    by 1/sqrt(deg_u * deg_i), and symmetrically for items; no transform, no
    nonlinearity, no self loop. Nodes without edges propagate to zero.
    """

    n_users: int
    n_items: int
    edges: tuple[tuple[int, int], ...]
    n_layers: int
    degree_u: np.ndarray = field(init=False, repr=False)
    degree_i: np.ndarray = field(init=False, repr=False)
    _adj: np.ndarray | sparse.csr_matrix = field(init=False, repr=False)

    # below this many cells the dense adjacency beats csr construction cost,
    # which matters because every client update builds a tiny operator
    _DENSE_CELLS = 1 << 14

    def __post_init__(self) -> None:
        if self.n_layers < 0:
            raise ValueError("n_layers must be >= 0")
        us = np.fromiter((e[0] for e in self.edges), dtype=np.int64, count=len(self.edges))
        its = np.fromiter((e[1] for e in self.edges), dtype=np.int64, count=len(self.edges))
        if len(us) and (
            us.min() < 0 or us.max() >= self.n_users or its.min() < 0 or its.max() >= self.n_items
        ):
            raise ValueError("edge endpoint out of range")
        if len(set(self.edges)) != len(self.edges):
            raise ValueError("duplicate edges")
        self.degree_u = np.bincount(us, minlength=self.n_users).astype(np.int64)
        self.degree_i = np.bincount(its, minlength=self.n_items).astype(np.int64)
        if len(us):
            weights = 1.0 / np.sqrt(self.degree_u[us] * self.degree_i[its])
        else:
            weights = np.zeros(0)
        if self.n_users * self.n_items <= self._DENSE_CELLS:
            adj = np.zeros((self.n_users, self.n_items))
            adj[us, its] = weights
            self._adj = adj
        else:
            self._adj = sparse.csr_matrix(
                (weights, (us, its)), shape=(self.n_users, self.n_items)
            )

    @classmethod
    def from_graph(cls, graph: BipartiteGraph, n_layers: int) -> "PropagationOperator":
        return cls(graph.n_users, graph.n_items, graph.edges, n_layers)


def propagate(op: PropagationOperator, table: EmbeddingTable) -> list[EmbeddingTable]:
    """All L+1 layer tables; layer 0 is the input table."""
    if table.n_users != op.n_users or table.n_items != op.n_items:
        raise ValueError("table shape does not match the operator")
    layers = [table.copy()]
    for _ in range(op.n_layers):
        prev = layers[-1]
        layers.append(
            EmbeddingTable(op._adj @ prev.items, op._adj.T @ prev.users)
        )
    return layers


def readout(layers: Sequence[EmbeddingTable]) -> EmbeddingTable:
    """Elementwise mean over layers 0..L."""
    if not layers:
        raise ValueError("readout needs at least one layer")
    return EmbeddingTable(
        np.mean([t.users for t in layers], axis=0),
        np.mean([t.items for t in layers], axis=0),
    )


def score(final: EmbeddingTable, user: int, item: int) -> float:
    """Inner-product preference of ``user`` for ``item``."""
    return float(np.dot(final.users[user], final.items[item]))


class BprTriple(NamedTuple):
    user: int
    pos_item: int
    neg_item: int


@dataclass(eq=False)
class GradientUpdate:
    """Sparse per-row gradients plus the owning client's data count."""

    user_grads: dict[int, np.ndarray]
    item_grads: dict[int, np.ndarray]
    data_count: int


def _triple_arrays(triples: Sequence[BprTriple]):
    n = len(triples)
    u = np.fromiter((t.user for t in triples), dtype=np.int64, count=n)
    p = np.fromiter((t.pos_item for t in triples), dtype=np.int64, count=n)
    j = np.fromiter((t.neg_item for t in triples), dtype=np.int64, count=n)
    return u, p, j


def _margins(final: EmbeddingTable, triples: Sequence[BprTriple]) -> np.ndarray:
    u, p, j = _triple_arrays(triples)
    return np.einsum("nd,nd->n", final.users[u], final.items[p] - final.items[j])


def _touched_rows(triples: Sequence[BprTriple]):
    users = sorted({t.user for t in triples})
    items = sorted({t.pos_item for t in triples} | {t.neg_item for t in triples})
    return users, items


def bpr_loss(
    final: EmbeddingTable,
    triples: Sequence[BprTriple],
    gamma: float,
    raw: EmbeddingTable,
) -> float:
    """Mean of -ln sigmoid(pos - neg) over the batch, plus the L2 penalty.

    The penalty is gamma times the summed squared norms of the raw rows the
    batch touches (each distinct row counted once).
    """
    if not triples:
        raise ValueError("empty triple batch")
    m = _margins(final, triples)
    loss = float(np.mean(np.logaddexp(0.0, -m)))
    if gamma:
        users, items = _touched_rows(triples)
        loss += gamma * float(
            np.sum(raw.users[users] ** 2) + np.sum(raw.items[items] ** 2)
        )
    return loss


def bpr_gradients(
    op: PropagationOperator,
    raw: EmbeddingTable,
    triples: Sequence[BprTriple],
    gamma: float,
) -> GradientUpdate:
    """Exact gradient of :func:`bpr_loss` with respect to the raw table.

    The batch gradient on the final tables is pushed back through readout and
    propagation by reapplying the (self-adjoint) operator to it; the L2 term
    acts on the raw rows directly. Support is restricted to rows with nonzero
    gradient plus the batch-touched rows.
    """
    if not triples:
        raise ValueError("empty triple batch")
    final = readout(propagate(op, raw))
    u, p, j = _triple_arrays(triples)
    m = np.einsum("nd,nd->n", final.users[u], final.items[p] - final.items[j])
    coef = -expit(-m) / len(triples)

    g_users = np.zeros_like(final.users)
    g_items = np.zeros_like(final.items)
    np.add.at(g_users, u, coef[:, None] * (final.items[p] - final.items[j]))
    np.add.at(g_items, p, coef[:, None] * final.users[u])
    np.add.at(g_items, j, -coef[:, None] * final.users[u])

    back = readout(propagate(op, EmbeddingTable(g_users, g_items)))
    raw_gu, raw_gi = back.users, back.items

    touched_u, touched_i = _touched_rows(triples)
    if gamma:
        for uu in touched_u:
            raw_gu[uu] += 2.0 * gamma * raw.users[uu]
        for ii in touched_i:
            raw_gi[ii] += 2.0 * gamma * raw.items[ii]

    support_u = sorted(set(np.flatnonzero(np.any(raw_gu, axis=1))) | set(touched_u))
    support_i = sorted(set(np.flatnonzero(np.any(raw_gi, axis=1))) | set(touched_i))
    return GradientUpdate(
        {int(uu): raw_gu[uu].copy() for uu in support_u},
        {int(ii): raw_gi[ii].copy() for ii in support_i},
        len(triples),
    )


def rank_items(
    final: EmbeddingTable, user: int, excluded: Iterable[int], k: int
) -> list[int]:
    """Top-k non-excluded items by score, ties broken by ascending item id.

    If fewer than k candidates exist, all of them are returned ranked.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = final.items @ final.users[user]
    excluded = set(excluded)
    if excluded:
        keep = np.ones(final.n_items, dtype=bool)
        keep[list(excluded)] = False
        cand = np.flatnonzero(keep)
    else:
        cand = np.arange(final.n_items)
    order = np.lexsort((cand, -scores[cand]))
    return [int(x) for x in cand[order[:k]]]


def save_checkpoint(table: EmbeddingTable, path, pretrained: bool = False) -> None:
    """Write the text checkpoint: `dim N M [pretrained=true]`, then one row
    of space-separated floats per line, user rows first."""
    header = f"{table.dim} {table.n_users} {table.n_items}"
    if pretrained:
        header += " pretrained=true"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        for block in (table.users, table.items):
            for row in block:
                fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def load_checkpoint(path) -> tuple[EmbeddingTable, dict[str, str]]:
    """Read a checkpoint; returns the table and any header flags."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DataError(f"{path}: empty checkpoint")
    head = lines[0].split()
    if len(head) < 3:
        raise DataError(f"{path}: header must be `dim N M [flags]`")
    try:
        dim, n_users, n_items = (int(x) for x in head[:3])
    except ValueError as exc:
        raise DataError(f"{path}: bad header {lines[0]!r}") from exc
    flags = {}
    for token in head[3:]:
        key, _, value = token.partition("=")
        flags[key] = value
    rows = lines[1:]
    if len(rows) != n_users + n_items:
        raise DataError(
            f"{path}: expected {n_users + n_items} rows, found {len(rows)}"
        )
    try:
        data = np.array([[float(v) for v in row.split()] for row in rows])
    except ValueError as exc:
        raise DataError(f"{path}: malformed float row") from exc
    if data.shape != (n_users + n_items, dim):
        raise DataError(f"{path}: row width does not match dim {dim}")
    return EmbeddingTable(data[:n_users], data[n_users:]), flags
