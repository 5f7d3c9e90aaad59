"""Hermite polynomial chaos basis.

Probabilists' Hermite polynomials He_n, orthogonal under the standard normal
measure, tensorised over ``dimension`` coordinates and truncated at total
degree ``order``. Indices are graded lexicographic with the constant term
first, so the first-order term of coordinate ``k`` sits at position ``1 + k``.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from math import comb, factorial

import numpy as np

MAX_TERMS = 10**6
TRIPLE_CUTOFF = 1e-12


class BasisSizeError(ValueError):
    pass


def total_degree_indices(dimension: int, order: int) -> np.ndarray:
    """All multi-indices of length ``dimension`` with total degree <= ``order``.

    Rows are sorted by total degree, then lexicographically descending, giving
    (0,0), (1,0), (0,1), (2,0), (1,1), (0,2), ... for two coordinates.
    """
    rows = []
    for degree in range(order + 1):
        block = [c for c in _compositions(degree, dimension)]
        block.sort(reverse=True)
        rows.extend(block)
    return np.array(rows, dtype=np.int64).reshape(-1, dimension)


def _compositions(total: int, parts: int):
    if parts == 1:
        yield (total,)
        return
    for first in range(total, -1, -1):
        for rest in _compositions(total - first, parts - 1):
            yield (first,) + rest


def hermite_1d_triple(a: int, b: int, c: int) -> float:
    """E[He_a He_b He_c] for a standard normal variable (closed form)."""
    twice = a + b + c
    if twice % 2:
        return 0.0
    s = twice // 2
    if s < a or s < b or s < c:
        return 0.0
    return factorial(a) * factorial(b) * factorial(c) / (
        factorial(s - a) * factorial(s - b) * factorial(s - c)
    )


def hermite_table(x: np.ndarray, order: int) -> np.ndarray:
    """He_0..He_order evaluated at ``x``; result has a trailing axis of size order+1."""
    x = np.asarray(x, dtype=float)
    out = np.empty(x.shape + (order + 1,))
    out[..., 0] = 1.0
    if order >= 1:
        out[..., 1] = x
    for n in range(1, order):
        out[..., n + 1] = x * out[..., n] - n * out[..., n - 1]
    return out


def gauss_hermite_rule(level: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss rule for the standard normal density.

    The ``level``-point rule integrates polynomials up to degree
    ``2 * level - 1`` exactly; weights sum to one.
    """
    if not 1 <= level <= 64:
        raise ValueError(f"unsupported Gauss-Hermite level {level} (need 1..64)")
    nodes, weights = np.polynomial.hermite_e.hermegauss(level)
    weights = weights / weights.sum()
    # hermegauss returns nodes symmetric up to round-off; symmetrise exactly
    nodes = 0.5 * (nodes - nodes[::-1])
    weights = 0.5 * (weights + weights[::-1])
    return nodes, weights


def tensor_rule(level: int, dimension: int) -> tuple[np.ndarray, np.ndarray]:
    """Full tensor Gauss-Hermite rule; nodes shaped (level**dimension, dimension)."""
    nodes, weights = gauss_hermite_rule(level)
    pts = np.array(list(itertools.product(nodes, repeat=dimension))).reshape(-1, dimension)
    wts = np.prod(np.array(list(itertools.product(weights, repeat=dimension))).reshape(-1, dimension), axis=1)
    return pts, wts


@dataclass(frozen=True)
class GpcBasis:
    dimension: int
    order: int
    indices: np.ndarray
    norms_sq: np.ndarray
    triples: dict[tuple[int, int, int], float] = field(repr=False)

    @property
    def size(self) -> int:
        return len(self.indices)

    def first_order_index(self, coord: int) -> int:
        """Position of the degree-one term in coordinate ``coord``."""
        return 1 + coord

    def evaluate(self, xi) -> np.ndarray:
        """All basis polynomials at ``xi``; shape (..., size)."""
        xi = np.asarray(xi, dtype=float)
        if xi.shape[-1] != self.dimension:
            raise ValueError(f"xi has {xi.shape[-1]} coordinates, basis has {self.dimension}")
        table = hermite_table(xi, self.order)  # (..., d, order+1)
        out = np.ones(xi.shape[:-1] + (self.size,))
        for k in range(self.dimension):
            deg = self.indices[:, k]
            if np.any(deg):
                out = out * table[..., k, deg]
        return out

    def triple(self, i: int, j: int, k: int) -> float:
        return self.triples.get(tuple(sorted((i, j, k))), 0.0)

    def sparse_triples(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Nonzero entries expanded over all distinct permutations, as COO arrays."""
        cached = self.__dict__.get("_coo")
        if cached is not None:
            return cached
        rows: set[tuple[int, int, int, float]] = set()
        for (a, b, c), v in self.triples.items():
            for perm in set(itertools.permutations((a, b, c))):
                rows.add(perm + (v,))
        arr = np.array(sorted(rows), dtype=float).reshape(-1, 4)
        coo = (arr[:, 0].astype(np.int64), arr[:, 1].astype(np.int64), arr[:, 2].astype(np.int64), arr[:, 3])
        object.__setattr__(self, "_coo", coo)
        return coo

    def contract(self, coefficients) -> np.ndarray:
        """Matrix M[j, k] = sum_i c_i <psi_i psi_j psi_k>."""
        c = np.asarray(coefficients, dtype=float)
        I, J, K, V = self.sparse_triples()
        out = np.zeros((self.size, self.size))
        np.add.at(out, (J, K), c[I] * V)
        return out

    def to_json(self) -> str:
        doc = {
            "dimension": self.dimension,
            "order": self.order,
            "indices": self.indices.tolist(),
            "norms_sq": self.norms_sq.tolist(),
            "triples": [{"i": i, "j": j, "k": k, "value": v} for (i, j, k), v in sorted(self.triples.items())],
        }
        return json.dumps(doc, indent=1)


def basis_size(dimension: int, order: int) -> int:
    return comb(dimension + order, order)


def build_basis(dimension: int, order: int, max_terms: int = MAX_TERMS) -> GpcBasis:
    if dimension < 1 or order < 0:
        raise ValueError(f"need dimension >= 1 and order >= 0, got ({dimension}, {order})")
    count = basis_size(dimension, order)
    if count > max_terms:
        raise BasisSizeError(f"basis with dimension={dimension}, order={order} has {count} terms (cap {max_terms})")

    indices = total_degree_indices(dimension, order)
    norms_sq = np.array([np.prod([factorial(int(d)) for d in row]) for row in indices], dtype=float)

    # 1D factors for all degree combinations up to `order`
    table = np.zeros((order + 1,) * 3)
    for a, b, c in itertools.product(range(order + 1), repeat=3):
        table[a, b, c] = hermite_1d_triple(a, b, c)

    triples: dict[tuple[int, int, int], float] = {}
    P = len(indices)
    for i in range(P):
        di = indices[i]
        js, ks = np.triu_indices(P)
        keep = js >= i
        js, ks = js[keep], ks[keep]
        vals = np.prod(table[di[None, :], indices[js], indices[ks]], axis=1)
        nz = np.abs(vals) > TRIPLE_CUTOFF
        for j, k, v in zip(js[nz], ks[nz], vals[nz]):
            triples[(i, int(j), int(k))] = float(v)
    return GpcBasis(dimension, order, indices, norms_sq, triples)


def eval_psi(basis: GpcBasis, q: int, xi) -> float:
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (basis.dimension,):
        raise ValueError("xi length must equal the basis dimension")
    table = hermite_table(xi, basis.order)
    return float(np.prod(table[np.arange(basis.dimension), basis.indices[q]]))


def triple_product(basis: GpcBasis, i: int, j: int, k: int) -> float:
    return basis.triple(i, j, k)
