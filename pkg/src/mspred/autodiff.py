"""Reverse-mode automatic differentiation over dense float64 matrices.

A :class:`Tape` records every operation as it executes (define-by-run).
Node values are immutable 2-D float64 numpy arrays; a :class:`Var` is a
lightweight handle (tape, node index, shape). Calling :meth:`Tape.backward`
on a scalar loss runs one reverse topological sweep and fills a gradient
slot per reachable node.

Design notes, fixed once and relied on by tests:

* every forward value is checked finite; a NaN/Inf raises ``NumericError``
  at the op that produced it;
* ``relu`` uses relu'(0) = 0;
* ``spd_inverse`` factorizes with an in-repo Cholesky (lower triangle only)
  and rejects matrices whose diagonal-based condition estimate exceeds
  ``COND_LIMIT``;
* ``sym_eig`` differentiates eigenvalues only (the eigenvector matrix is
  returned as a plain array, deliberately without a gradient path);
* gradient accumulation order is the reverse of node creation order, so
  identical inputs give bit-identical gradients.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ContractError, DimensionError, NumericError, SingularityError

Array = np.ndarray

# spd_inverse refuses matrices whose (diag L max / diag L min)^2 exceeds this.
COND_LIMIT = 1e12


def as_matrix(data) -> Array:
    """Validate and copy ``data`` into an immutable 2-D float64 array."""
    a = np.array(data, dtype=np.float64, copy=True)
    if a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2:
        raise DimensionError(f"matrix must be 2-D, got ndim={a.ndim}")
    if not np.all(np.isfinite(a)):
        raise NumericError("matrix construction saw a non-finite entry")
    a.flags.writeable = False
    return a


class Var:
    """Handle to one node on a tape."""

    __slots__ = ("tape", "index", "shape")

    def __init__(self, tape: "Tape", index: int, shape: tuple[int, int]):
        self.tape = tape
        self.index = index
        self.shape = shape

    @property
    def value(self) -> Array:
        return self.tape.values[self.index]

    def __matmul__(self, other: "Var") -> "Var":
        return matmul(self, other)

    def __add__(self, other: "Var") -> "Var":
        return add(self, other)

    def __sub__(self, other: "Var") -> "Var":
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Var):
            return hadamard(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Var":
        return scale(self, -1.0)

    def __repr__(self):
        return f"Var(index={self.index}, shape={self.shape})"


class Tape:
    """Append-only operation record plus gradient slots.

    A tape is single-owner: it must not be mutated from two threads.
    ``backward`` may run once per tape; rebuild the graph on a fresh tape
    for every new gradient evaluation.
    """

    def __init__(self):
        self.values: list[Array] = []
        self.parents: list[tuple[int, ...]] = []
        self.vjps: list = []
        self.grads: list | None = None

    def _push(self, value: Array, parents=(), vjp=None) -> Var:
        value.flags.writeable = False
        self.values.append(value)
        self.parents.append(parents)
        self.vjps.append(vjp)
        return Var(self, len(self.values) - 1, value.shape)

    def input(self, data) -> Var:
        """Enter a leaf value (parameter or constant) onto the tape."""
        return self._push(as_matrix(data))

    def backward(self, loss: Var) -> None:
        """Reverse sweep from ``loss``, filling gradient slots.

        Raises:
            ContractError: if ``loss`` is not 1x1, lives on another tape,
                or backward already ran on this tape.
        """
        if self.grads is not None:
            raise ContractError("backward() already ran on this tape")
        if loss.tape is not self:
            raise ContractError("loss belongs to a different tape")
        if loss.shape != (1, 1):
            raise ContractError(f"loss must be 1x1, got {loss.shape}")
        self.grads = [None] * len(self.values)
        self.grads[loss.index] = np.ones((1, 1))
        for i in range(loss.index, -1, -1):
            g = self.grads[i]
            vjp = self.vjps[i]
            if g is None or vjp is None:
                continue
            for p, pg in zip(self.parents[i], vjp(g)):
                if pg is None:
                    continue
                if self.grads[p] is None:
                    self.grads[p] = pg
                else:
                    self.grads[p] = self.grads[p] + pg

    def grad(self, var: Var) -> Array:
        """Gradient of the last backward()'s loss w.r.t. ``var``.

        Nodes the loss does not depend on get a zero gradient.
        """
        if self.grads is None:
            raise ContractError("call backward() before grad()")
        g = self.grads[var.index]
        if g is None:
            return np.zeros(var.shape)
        return g


def _same_tape(*vars_: Var) -> Tape:
    tape = vars_[0].tape
    for v in vars_[1:]:
        if v.tape is not tape:
            raise ContractError("operands live on different tapes")
    return tape


def _finite(out: Array, op: str) -> Array:
    if not np.all(np.isfinite(out)):
        raise NumericError(f"{op} produced a non-finite value")
    return out


# ---------------------------------------------------------------------------
# core ops


def matmul(a: Var, b: Var) -> Var:
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    tape = _same_tape(a, b)
    av, bv = a.value, b.value
    out = _finite(av @ bv, "matmul")

    def vjp(g):
        return g @ bv.T, av.T @ g

    return tape._push(out, (a.index, b.index), vjp)


def add(a: Var, b: Var) -> Var:
    if a.shape != b.shape:
        raise DimensionError(f"add shapes differ: {a.shape} vs {b.shape}")
    tape = _same_tape(a, b)
    out = _finite(a.value + b.value, "add")
    return tape._push(out, (a.index, b.index), lambda g: (g, g))


def sub(a: Var, b: Var) -> Var:
    if a.shape != b.shape:
        raise DimensionError(f"sub shapes differ: {a.shape} vs {b.shape}")
    tape = _same_tape(a, b)
    out = _finite(a.value - b.value, "sub")
    return tape._push(out, (a.index, b.index), lambda g: (g, -g))


def hadamard(a: Var, b: Var) -> Var:
    if a.shape != b.shape:
        raise DimensionError(f"hadamard shapes differ: {a.shape} vs {b.shape}")
    tape = _same_tape(a, b)
    av, bv = a.value, b.value
    out = _finite(av * bv, "hadamard")
    return tape._push(out, (a.index, b.index), lambda g: (g * bv, g * av))


def scale(a: Var, c: float) -> Var:
    c = float(c)
    out = _finite(a.value * c, "scale")
    return a.tape._push(out, (a.index,), lambda g: (g * c,))


def tanh(a: Var) -> Var:
    y = _finite(np.tanh(a.value), "tanh")
    return a.tape._push(y, (a.index,), lambda g: (g * (1.0 - y * y),))


def relu(a: Var) -> Var:
    mask = a.value > 0.0
    out = np.where(mask, a.value, 0.0)
    return a.tape._push(out, (a.index,), lambda g: (g * mask,))


def square(a: Var) -> Var:
    av = a.value
    out = _finite(av * av, "square")
    return a.tape._push(out, (a.index,), lambda g: (2.0 * g * av,))


def smooth_abs(a: Var, eps: float) -> Var:
    """Entrywise sqrt(x^2 + eps^2): a differentiable |x| surrogate."""
    av = a.value
    y = np.sqrt(av * av + eps * eps)
    return a.tape._push(y, (a.index,), lambda g: (g * av / y,))


def rsqrt(a: Var) -> Var:
    """Entrywise x^(-1/2); requires strictly positive entries."""
    av = a.value
    if np.any(av <= 0.0):
        raise ContractError("rsqrt requires strictly positive entries")
    y = 1.0 / np.sqrt(av)
    return a.tape._push(y, (a.index,), lambda g: (-0.5 * g * y / av,))


def transpose(a: Var) -> Var:
    out = np.ascontiguousarray(a.value.T)
    return a.tape._push(out, (a.index,), lambda g: (g.T,))


def reshape(a: Var, rows: int, cols: int) -> Var:
    if rows * cols != a.shape[0] * a.shape[1]:
        raise DimensionError(f"cannot reshape {a.shape} to ({rows}, {cols})")
    r, c = a.shape
    out = a.value.reshape(rows, cols).copy()
    return a.tape._push(out, (a.index,), lambda g: (g.reshape(r, c),))


def slice_rows(a: Var, start: int, stop: int) -> Var:
    if not (0 <= start < stop <= a.shape[0]):
        raise DimensionError(f"row slice [{start}:{stop}] out of range for {a.shape}")
    rows, cols = a.shape
    out = a.value[start:stop].copy()

    def vjp(g):
        full = np.zeros((rows, cols))
        full[start:stop] = g
        return (full,)

    return a.tape._push(out, (a.index,), vjp)


def hcat(parts: list[Var]) -> Var:
    if not parts:
        raise ContractError("hcat of zero matrices")
    rows = parts[0].shape[0]
    for p in parts:
        if p.shape[0] != rows:
            raise DimensionError("hcat row counts differ")
    tape = _same_tape(*parts)
    widths = [p.shape[1] for p in parts]
    out = np.concatenate([p.value for p in parts], axis=1)
    splits = np.cumsum(widths)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, splits, axis=1))

    return tape._push(out, tuple(p.index for p in parts), vjp)


def vcat(parts: list[Var]) -> Var:
    if not parts:
        raise ContractError("vcat of zero matrices")
    cols = parts[0].shape[1]
    for p in parts:
        if p.shape[1] != cols:
            raise DimensionError("vcat column counts differ")
    tape = _same_tape(*parts)
    heights = [p.shape[0] for p in parts]
    out = np.concatenate([p.value for p in parts], axis=0)
    splits = np.cumsum(heights)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, splits, axis=0))

    return tape._push(out, tuple(p.index for p in parts), vjp)


def add_rowvec(a: Var, b: Var) -> Var:
    """Broadcast-add a 1 x c row vector to every row of an r x c matrix."""
    if b.shape != (1, a.shape[1]):
        raise DimensionError(f"row vector {b.shape} does not match {a.shape}")
    tape = _same_tape(a, b)
    out = _finite(a.value + b.value, "add_rowvec")
    return tape._push(out, (a.index, b.index), lambda g: (g, g.sum(axis=0, keepdims=True)))


def reduce_sum(a: Var) -> Var:
    r, c = a.shape
    out = np.array([[float(a.value.sum())]])
    return a.tape._push(out, (a.index,), lambda g: (np.full((r, c), g[0, 0]),))


def frobenius_sq(a: Var) -> Var:
    av = a.value
    out = np.array([[float((av * av).sum())]])
    return a.tape._push(out, (a.index,), lambda g: (2.0 * g[0, 0] * av,))


# ---------------------------------------------------------------------------
# linear-algebra ops


def cholesky_lower(s: Array) -> Array:
    """Lower Cholesky factor of an SPD matrix, reading the lower triangle.

    Raises:
        SingularityError: non-positive pivot, or diagonal-based condition
            estimate (max diag L / min diag L)^2 above ``COND_LIMIT``;
            ``pivot`` names the offending index.
    """
    n = s.shape[0]
    L = np.zeros((n, n))
    for j in range(n):
        d = s[j, j] - L[j, :j] @ L[j, :j]
        if not np.isfinite(d) or d <= 0.0:
            raise SingularityError(
                f"Cholesky pivot {j} is not positive (got {d!r})", pivot=j
            )
        L[j, j] = math.sqrt(d)
        if j + 1 < n:
            L[j + 1 :, j] = (s[j + 1 :, j] - L[j + 1 :, :j] @ L[j, :j]) / L[j, j]
    diag = np.diagonal(L)
    cond_est = (diag.max() / diag.min()) ** 2
    if cond_est > COND_LIMIT:
        worst = int(np.argmin(diag))
        raise SingularityError(
            f"condition estimate {cond_est:.3e} exceeds {COND_LIMIT:.0e} "
            f"(pivot {worst})",
            pivot=worst,
        )
    return L


def spd_solve_identity(L: Array) -> Array:
    """Invert S = L L^T by forward/back substitution against the identity."""
    n = L.shape[0]
    Y = np.zeros((n, n))
    eye = np.eye(n)
    for i in range(n):
        Y[i] = (eye[i] - L[i, :i] @ Y[:i]) / L[i, i]
    X = np.zeros((n, n))
    for i in range(n - 1, -1, -1):
        X[i] = (Y[i] - L[i + 1 :, i] @ X[i + 1 :]) / L[i, i]
    return (X + X.T) / 2.0


def spd_inverse(s: Var) -> Var:
    """Inverse of a symmetric positive definite matrix via Cholesky.

    Backward: dL/dS = -S^{-T} G S^{-T}, symmetrized, which is the correct
    derivative when S is produced by a symmetric composite such as H H^T.
    """
    if s.shape[0] != s.shape[1]:
        raise DimensionError(f"spd_inverse needs a square matrix, got {s.shape}")
    L = cholesky_lower(s.value)
    inv = spd_solve_identity(L)
    _finite(inv, "spd_inverse")

    def vjp(g):
        h = -inv @ g @ inv
        return ((h + h.T) / 2.0,)

    return s.tape._push(inv, (s.index,), vjp)


def pinv_right(h: Var) -> Var:
    """Right Moore-Penrose pseudo-inverse h^T (h h^T)^{-1} of a wide matrix.

    Valid for full-row-rank h with at least as many columns as rows; a
    rank-deficient input surfaces as the underlying ``SingularityError``.
    The composite is built from tape ops, so it is differentiable end to end.
    """
    a, k = h.shape
    if k < a:
        raise DimensionError(f"pinv_right needs cols >= rows, got {h.shape}")
    ht = transpose(h)
    gram = matmul(h, ht)
    return matmul(ht, spd_inverse(gram))


def sym_eig(s: Var) -> tuple[Var, Array]:
    """Eigendecomposition of (s + s^T)/2.

    Returns:
        (eigenvalues as an ascending n x 1 Var, orthonormal eigenvector
        matrix as a plain read-only array). Only losses of the eigenvalues
        are differentiable: dL/dS = Q diag(dL/dlambda) Q^T.

    Raises:
        NumericError: if the iterative eigensolver fails to converge.
    """
    if s.shape[0] != s.shape[1]:
        raise DimensionError(f"sym_eig needs a square matrix, got {s.shape}")
    sym = (s.value + s.value.T) / 2.0
    try:
        w, q = np.linalg.eigh(sym)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"symmetric eigensolver did not converge: {exc}") from exc
    q = np.ascontiguousarray(q)
    q.flags.writeable = False

    def vjp(g):
        return (q @ (g.ravel()[:, None] * q.T),)

    lam = s.tape._push(w.reshape(-1, 1).copy(), (s.index,), vjp)
    return lam, q
