"""Exact linear algebra over the integers and rationals.

Small dense matrices only (ambient dimension <= 8 in practice).  Rational
elimination gives ranks, span tests and kernels; a column-style Hermite
reduction with a unimodular transform gives saturated integer kernels and
integer solutions of linear systems.  Everything is exact.
"""

from __future__ import annotations

from fractions import Fraction
from typing import Optional, Sequence

IntVec = tuple[int, ...]


def dot(a: Sequence[int], b: Sequence[int]) -> int:
    return sum(x * y for x, y in zip(a, b))


def rref(rows: Sequence[Sequence]) -> tuple[list[list[Fraction]], list[int]]:
    """Reduced row echelon form over Q.  Returns (rows, pivot columns)."""
    m = [[Fraction(x) for x in row] for row in rows]
    if not m:
        return [], []
    ncols = len(m[0])
    pivots: list[int] = []
    r = 0
    for c in range(ncols):
        pivot = next((i for i in range(r, len(m)) if m[i][c] != 0), None)
        if pivot is None:
            continue
        m[r], m[pivot] = m[pivot], m[r]
        pv = m[r][c]
        m[r] = [x / pv for x in m[r]]
        for i in range(len(m)):
            if i != r and m[i][c] != 0:
                f = m[i][c]
                m[i] = [a - f * b for a, b in zip(m[i], m[r])]
        pivots.append(c)
        r += 1
        if r == len(m):
            break
    return m[:r], pivots


def rank(rows: Sequence[Sequence]) -> int:
    return len(rref(rows)[0])


def in_span(vec: Sequence, rows: Sequence[Sequence]) -> bool:
    """True when vec lies in the rational span of rows."""
    if not rows:
        return all(x == 0 for x in vec)
    return rank(rows) == rank(list(rows) + [list(vec)])


class SpanChecker:
    """Incremental rational span membership for a growing set of vectors."""

    def __init__(self, dim: int):
        self.dim = dim
        self.rows: list[list[Fraction]] = []  # kept in echelon form
        self.pivots: list[int] = []

    def contains(self, vec: Sequence[int]) -> bool:
        return self._reduce(vec) is None

    def add(self, vec: Sequence[int]) -> bool:
        """Add vec; returns False if it was already in the span."""
        red = self._reduce(vec)
        if red is None:
            return False
        c, row = red
        self.rows.append(row)
        self.pivots.append(c)
        order = sorted(range(len(self.pivots)), key=lambda i: self.pivots[i])
        self.rows = [self.rows[i] for i in order]
        self.pivots = [self.pivots[i] for i in order]
        return True

    def _reduce(self, vec) -> Optional[tuple[int, list[Fraction]]]:
        v = [Fraction(x) for x in vec]
        for row, p in zip(self.rows, self.pivots):
            if v[p] != 0:
                f = v[p]
                v = [a - f * b for a, b in zip(v, row)]
        c = next((i for i in range(self.dim) if v[i] != 0), None)
        if c is None:
            return None
        pv = v[c]
        return c, [x / pv for x in v]

    def copy(self) -> "SpanChecker":
        other = SpanChecker(self.dim)
        other.rows = [row[:] for row in self.rows]
        other.pivots = self.pivots[:]
        return other

    @property
    def rank(self) -> int:
        return len(self.rows)


def column_hermite(rows: Sequence[Sequence[int]]) -> tuple[list[list[int]], list[list[int]], int]:
    """Column echelon reduction M @ U = [H | 0] with U unimodular.

    Returns (H_full, U, rank) where H_full is the reduced r x d matrix whose
    first `rank` columns are the echelon part and the rest are zero, and U is
    the d x d unimodular column transform applied to the identity.
    """
    m = [list(map(int, row)) for row in rows]
    nrows = len(m)
    d = len(m[0]) if m else 0
    u = [[int(i == j) for j in range(d)] for i in range(d)]

    def col_op(j, k, q):
        # column_j -= q * column_k
        for row in m:
            row[j] -= q * row[k]
        for row in u:
            row[j] -= q * row[k]

    def col_swap(j, k):
        for row in m:
            row[j], row[k] = row[k], row[j]
        for row in u:
            row[j], row[k] = row[k], row[j]

    def col_neg(j):
        for row in m:
            row[j] = -row[j]
        for row in u:
            row[j] = -row[j]

    r = 0
    for i in range(nrows):
        if r == d:
            break
        # euclidean reduction across columns r..d-1 on row i
        while True:
            nz = [j for j in range(r, d) if m[i][j] != 0]
            if not nz:
                break
            jmin = min(nz, key=lambda j: abs(m[i][j]))
            if jmin != r:
                col_swap(r, jmin)
            if m[i][r] < 0:
                col_neg(r)
            done = True
            for j in range(r + 1, d):
                if m[i][j] != 0:
                    q = m[i][j] // m[i][r]
                    col_op(j, r, q)
                    if m[i][j] != 0:
                        done = False
            if done:
                break
        if m[i][r] != 0:
            # reduce columns to the left for a canonical-ish echelon
            for j in range(r):
                q = m[i][j] // m[i][r]
                if q:
                    col_op(j, r, q)
            r += 1
    return m, u, r


def integer_kernel(rows: Sequence[Sequence[int]]) -> list[IntVec]:
    """Basis of the saturated lattice {x in Z^d : rows @ x = 0}."""
    if not rows:
        raise ValueError("need the ambient dimension; pass [[0]*d] for no constraints")
    d = len(rows[0])
    _, u, r = column_hermite(rows)
    basis = [tuple(u[i][j] for i in range(d)) for j in range(r, d)]
    return basis


def solve_integer(rows: Sequence[Sequence[int]], rhs: Sequence[int]) -> Optional[IntVec]:
    """One integer solution x of rows @ x = rhs, or None."""
    m = [list(map(int, row)) for row in rows]
    if not m:
        return None
    d = len(m[0])
    h, u, r = column_hermite(m)
    y = [0] * d
    resid = list(map(int, rhs))
    for j in range(r):
        i = next((i for i in range(len(h)) if h[i][j] != 0), None)
        if i is None:
            continue
        if resid[i] % h[i][j] != 0:
            return None
        t = resid[i] // h[i][j]
        y[j] = t
        for ii in range(len(h)):
            resid[ii] -= t * h[ii][j]
    if any(resid):
        return None
    return tuple(sum(u[i][j] * y[j] for j in range(d)) for i in range(d))


def gram_solve(basis: Sequence[Sequence[int]], vec: Sequence[Fraction]) -> list[Fraction]:
    """Coefficients t with basis^T t = orthogonal projection data.

    Solves (B B^T) t = B vec for the coefficient vector t of the projection
    of vec onto the row span of basis; exact over Q.
    """
    k = len(basis)
    g = [[Fraction(dot(basis[i], basis[j])) for j in range(k)] for i in range(k)]
    b = [sum(Fraction(basis[i][m]) * Fraction(vec[m]) for m in range(len(vec)))
         for i in range(k)]
    # gaussian elimination
    for c in range(k):
        p = next(i for i in range(c, k) if g[i][c] != 0)
        g[c], g[p] = g[p], g[c]
        b[c], b[p] = b[p], b[c]
        pv = g[c][c]
        g[c] = [x / pv for x in g[c]]
        b[c] /= pv
        for i in range(k):
            if i != c and g[i][c] != 0:
                f = g[i][c]
                g[i] = [a - f * bb for a, bb in zip(g[i], g[c])]
                b[i] -= f * b[c]
    return b
