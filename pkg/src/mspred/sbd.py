"""Simultaneous block-diagonalization of a family of transition operators.

A family of matrices sharing a common block structure in some orthogonal
basis is uncovered by minimizing a graph-spectral surrogate: view the
conjugated matrix V = U M U^T as a weighted graph through the adjacency
A = abs(V) abs(V)^T, form its symmetrically normalized Laplacian, and sum
the moduli of the Laplacian's eigenvalues (its trace norm). The kernel
dimension of the Laplacian counts the connected components of A's graph,
so pushing small eigenvalues to zero carves V into blocks; the trace norm
is the convex surrogate that makes this optimizable.

``U`` stays exactly orthogonal throughout: it is the matrix exponential
of a skew-symmetric parameter, computed on the tape by scaling and
squaring with a Taylor series, so the optimization is unconstrained.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .datagen import mix64
from .errors import ContractError, DimensionError, NumericError
from .training import AdamState, adam_step

ABS_EPS = 1e-12      # smoothing of |x| inside the adjacency
DEGREE_EPS = 1e-10   # guard added to degrees before the inverse square root
SIGN_EPS = 1e-10     # smoothing of |lambda| in the trace norm
EXPM_TOL = 1e-13     # Taylor truncation tolerance for the matrix exponential


def abs_adjacency(v: Var) -> Var:
    """Adjacency A = abs(V) abs(V)^T with smoothed absolute value."""
    if v.shape[0] != v.shape[1]:
        raise DimensionError(f"abs_adjacency needs a square matrix, got {v.shape}")
    sabs = ad.smooth_abs(v, ABS_EPS)
    return ad.matmul(sabs, ad.transpose(sabs))


def normalized_laplacian(adj: Var) -> Var:
    """I - D^{-1/2} A D^{-1/2} with an epsilon guard on the degrees."""
    if adj.shape[0] != adj.shape[1]:
        raise DimensionError(f"normalized_laplacian needs a square matrix, got {adj.shape}")
    n = adj.shape[0]
    tape = adj.tape
    ones = tape.input(np.ones((n, 1)))
    degrees = ad.add(ad.matmul(adj, ones), tape.input(np.full((n, 1), DEGREE_EPS)))
    dinv_sqrt = ad.rsqrt(degrees)
    outer = ad.matmul(dinv_sqrt, ad.transpose(dinv_sqrt))
    return ad.sub(tape.input(np.eye(n)), ad.hadamard(adj, outer))


def blockness_loss(v: Var) -> Var:
    """Trace norm of the Laplacian of A(V): sum of |eigenvalues|.

    Low values mean many connected components, i.e. many blocks. The
    absolute value uses the smoothed subgradient lambda/sqrt(lambda^2 +
    eps^2) so the loss stays differentiable at zero crossings.
    """
    lam, _ = ad.sym_eig(normalized_laplacian(abs_adjacency(v)))
    return ad.reduce_sum(ad.smooth_abs(lam, SIGN_EPS))


def expm_skew(skew: Var) -> Var:
    """Matrix exponential by scaling-and-squaring with a Taylor series.

    The Taylor term count is chosen from the scaled norm so the
    truncation error is below EXPM_TOL; for a skew-symmetric input the
    result is orthogonal to that tolerance. Fully differentiable.
    """
    n = skew.shape[0]
    if skew.shape[1] != n:
        raise DimensionError(f"expm_skew needs a square matrix, got {skew.shape}")
    tape = skew.tape
    norm = float(np.abs(skew.value).sum(axis=1).max())
    squarings = max(0, math.ceil(math.log2(max(norm, 1e-30) / 0.5))) if norm > 0.5 else 0
    scaled = ad.scale(skew, 0.5**squarings) if squarings else skew
    # term count: (norm_scaled)^k / k! < tol with norm_scaled <= 0.5
    terms = 3
    bound = 0.5
    while bound > EXPM_TOL and terms < 30:
        bound *= 0.5 / terms
        terms += 1
    acc = tape.input(np.eye(n))
    term = None
    for k in range(1, terms + 1):
        term = scaled if k == 1 else ad.matmul(ad.scale(scaled, 1.0 / k), term)
        acc = ad.add(acc, term)
    for _ in range(squarings):
        acc = ad.matmul(acc, acc)
    return acc


def _batched_conjugate(u: Var, stack: Var, n: int) -> Var:
    """V_i = U M_i U^T for a family stacked vertically as (count*n, n)."""
    count = stack.shape[0] // n
    uv = u.value
    sv = stack.value.reshape(count, n, n)
    out = (uv @ sv @ uv.T).reshape(count * n, n)

    def vjp(g):
        gb = g.reshape(count, n, n)
        gbt = gb.transpose(0, 2, 1)
        svt = sv.transpose(0, 2, 1)
        du = ((gb @ uv) @ svt).sum(axis=0) + ((gbt @ uv) @ sv).sum(axis=0)
        dstack = (uv.T @ gb @ uv).reshape(count * n, n)
        return du, dstack

    return u.tape._push(out, (u.index, stack.index), vjp)


def _batched_gram(stack: Var, n: int) -> Var:
    """S_i S_i^T for a family stacked vertically as (count*n, n)."""
    count = stack.shape[0] // n
    sv = stack.value.reshape(count, n, n)
    out = (sv @ sv.transpose(0, 2, 1)).reshape(count * n, n)

    def vjp(g):
        gb = g.reshape(count, n, n)
        ds = (gb + gb.transpose(0, 2, 1)) @ sv
        return (ds.reshape(count * n, n),)

    return stack.tape._push(out, (stack.index,), vjp)


def _batched_outer(col: Var, n: int) -> Var:
    """d_i d_i^T for per-block column vectors stacked as (count*n, 1)."""
    count = col.shape[0] // n
    dv = col.value.reshape(count, n)
    out = (dv[:, :, None] * dv[:, None, :]).reshape(count * n, n)

    def vjp(g):
        gb = g.reshape(count, n, n)
        dd = ((gb + gb.transpose(0, 2, 1)) @ dv[:, :, None]).reshape(count, n)
        return (dd.reshape(count * n, 1),)

    return col.tape._push(out, (col.index,), vjp)


def _batched_sym_eig(stack: Var, n: int) -> Var:
    """Ascending eigenvalues of each symmetrized block, stacked (count*n, 1)."""
    count = stack.shape[0] // n
    sv = stack.value.reshape(count, n, n)
    sym = (sv + np.transpose(sv, (0, 2, 1))) / 2.0
    try:
        w, q = np.linalg.eigh(sym)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"batched eigensolver did not converge: {exc}") from exc

    def vjp(g):
        gb = g.reshape(count, n)
        ds = (q * gb[:, None, :]) @ q.transpose(0, 2, 1)
        return (ds.reshape(count * n, n),)

    return stack.tape._push(w.reshape(count * n, 1).copy(), (stack.index,), vjp)


def _mean_blockness_batched(u: Var, stack: Var, n: int) -> Var:
    """Mean blockness loss over a stacked family, in a handful of tape ops.

    Arithmetic matches the per-matrix ``blockness_loss`` chain applied to
    each block; batching only fuses the loop.
    """
    tape = u.tape
    count = stack.shape[0] // n
    v = _batched_conjugate(u, stack, n)
    sabs = ad.smooth_abs(v, ABS_EPS)
    adj = _batched_gram(sabs, n)
    ones = tape.input(np.ones((n, 1)))
    degrees = ad.add(ad.matmul(adj, ones), tape.input(np.full((count * n, 1), DEGREE_EPS)))
    dinv = ad.rsqrt(degrees)
    eye_stack = tape.input(np.tile(np.eye(n), (count, 1)))
    lap = ad.sub(eye_stack, ad.hadamard(adj, _batched_outer(dinv, n)))
    lam = _batched_sym_eig(lap, n)
    return ad.scale(ad.reduce_sum(ad.smooth_abs(lam, SIGN_EPS)), 1.0 / count)


def _log_special_orthogonal(u: np.ndarray) -> np.ndarray:
    """Skew-symmetric logarithm of a rotation (det +1 orthogonal) matrix."""
    w, v = np.linalg.eig(u)
    s = np.real((v * np.log(w)) @ np.linalg.inv(v))
    return (s - s.T) / 2.0


def _spectral_init(mats: list[np.ndarray], rng) -> np.ndarray | None:
    """Warm-start skew parameters from a joint eigenbasis guess.

    For a family of near-conjugated rotations, the symmetric part of any
    member is U0 diag(cos-blocks) U0^T, so the eigenvectors of a random
    symmetric combination expose the common basis up to within-block
    rotation. Returns None if the exp/log round trip is poor (e.g.
    eigenvalue clustering), in which case the caller falls back to a
    random start.
    """
    n = mats[0].shape[0]
    coeffs = rng.normal(size=len(mats))
    combo = sum(c * (m + m.T) for c, m in zip(coeffs, mats))
    _, q = np.linalg.eigh(combo)
    u0 = q.T
    if np.linalg.det(u0) < 0:
        u0 = u0.copy()
        u0[0] *= -1.0
    skew = _log_special_orthogonal(u0)
    iu = np.triu_indices(n, k=1)
    p = skew[iu].reshape(-1, 1)
    tape = ad.Tape()
    rebuilt = expm_skew(skew_from_params(tape, tape.input(p), n))
    if np.abs(rebuilt.value - u0).max() > 1e-8:
        return None
    return p


def skew_from_params(tape, params: Var, n: int) -> Var:
    """Assemble an n x n skew-symmetric matrix from n(n-1)/2 parameters."""
    count = n * (n - 1) // 2
    if params.shape != (count, 1):
        raise DimensionError(f"expected ({count}, 1) parameters, got {params.shape}")
    iu = np.triu_indices(n, k=1)
    scatter = np.zeros((count, n * n))
    for idx, (r, c) in enumerate(zip(*iu)):
        scatter[idx, r * n + c] = 1.0
        scatter[idx, c * n + r] = -1.0
    flat = ad.matmul(ad.transpose(params), tape.input(scatter))
    return ad.reshape(flat, n, n)


@dataclass
class BlockStructure:
    """Disjoint blocks of coordinate indices covering 0..a-1."""

    blocks: list[tuple[int, ...]]
    threshold: float

    def block_of(self, coord: int) -> int:
        for b, members in enumerate(self.blocks):
            if coord in members:
                return b
        raise ContractError(f"coordinate {coord} not covered")

    def sizes(self) -> list[int]:
        return sorted(len(b) for b in self.blocks)

    def to_dict(self) -> dict:
        return {"kind": "blocks", "blocks": [list(b) for b in self.blocks],
                "threshold": self.threshold}


@dataclass
class SbdResult:
    """Orthogonal change of basis with its loss history and blocks."""

    u: np.ndarray
    skew_param: np.ndarray
    loss_history: list[float]
    blocks: BlockStructure

    def conjugate(self, mats) -> np.ndarray:
        """Apply the change of basis: V_i = U M_i U^T."""
        mats = np.asarray(mats, dtype=np.float64)
        single = mats.ndim == 2
        if single:
            mats = mats[None]
        out = np.einsum("ij,njk,lk->nil", self.u, mats, self.u)
        return out[0] if single else out

    def to_dict(self) -> dict:
        return {"kind": "sbd", "u": self.u.tolist(),
                "skew_param": self.skew_param.ravel().tolist(),
                "loss_history": self.loss_history,
                "blocks": self.blocks.to_dict()}


class _UnionFind:
    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, x):
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, x, y):
        rx, ry = self.find(x), self.find(y)
        if rx != ry:
            self.parent[max(rx, ry)] = min(rx, ry)


def detect_blocks(v_list, threshold: float = 0.01) -> BlockStructure:
    """Read the common block partition off a family of conjugated matrices.

    Averages abs(V - I) over the family, draws an edge (i, j) wherever
    either direction exceeds ``threshold`` times the largest averaged
    entry, and returns the connected components, each sorted, ordered by
    smallest member.
    """
    mats = [np.asarray(v, dtype=np.float64) for v in v_list]
    if not mats:
        raise ContractError("detect_blocks needs at least one matrix")
    n = mats[0].shape[0]
    for m in mats:
        if m.shape != (n, n):
            raise DimensionError("matrices differ in size")
    energy = np.mean([np.abs(m - np.eye(n)) for m in mats], axis=0)
    scale = energy.max()
    uf = _UnionFind(n)
    if scale > 0.0:
        cut = threshold * scale
        for i in range(n):
            for j in range(i + 1, n):
                if max(energy[i, j], energy[j, i]) > cut:
                    uf.union(i, j)
    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(uf.find(i), []).append(i)
    blocks = sorted((tuple(sorted(g)) for g in groups.values()), key=lambda b: b[0])
    return BlockStructure(blocks=list(blocks), threshold=threshold)


def fit_sbd(transitions, iters: int = 1500, lr: float = 0.05, seed: int = 0, *,
            threshold: float = 0.01, init_scale: float = 0.6,
            restarts: int = 4) -> SbdResult:
    """Optimize the orthogonal basis that block-diagonalizes a family.

    Runs Adam on the skew parameters of U against the mean blockness
    loss of U M_i U^T, restarting from ``restarts`` seeded initial points
    (the landscape has merged-block local minima); the learning rate
    drops 3x for the last 40% of each restart to settle the endgame. The
    recorded history is the running best across everything tried, so it
    is non-increasing, and the returned U is the best-loss iterate.

    Raises:
        NumericError: if the loss turns non-finite, naming the iterate.
    """
    mats = [np.asarray(m, dtype=np.float64) for m in transitions]
    if not mats:
        raise ContractError("fit_sbd needs at least one transition")
    n = mats[0].shape[0]
    for m in mats:
        if m.shape != (n, n):
            raise DimensionError("transitions differ in size")
    stacked = np.concatenate(mats, axis=0)
    count = n * (n - 1) // 2
    rng = np.random.default_rng(mix64(seed, 101))
    iters = max(1, iters)
    decay_from = int(0.6 * iters)
    best_loss = math.inf
    best_p = None
    best_u = None
    history: list[float] = []
    for restart in range(max(1, restarts)):
        if restart == 0 and init_scale == 0.0:
            p = np.zeros((count, 1))
        elif restart == 0:
            p = _spectral_init(mats, rng)
            if p is None:
                p = rng.normal(0.0, init_scale, size=(count, 1))
        else:
            p = rng.normal(0.0, init_scale, size=(count, 1))
        adam = AdamState(["p"], [(count, 1)], lr=lr)
        for it in range(iters):
            adam.lr = lr if it < decay_from else 0.3 * lr
            tape = ad.Tape()
            pv = tape.input(p)
            u = expm_skew(skew_from_params(tape, pv, n))
            loss = _mean_blockness_batched(u, tape.input(stacked), n)
            loss_val = float(loss.value[0, 0])
            if not math.isfinite(loss_val):
                raise NumericError(
                    f"blockness loss became non-finite at iterate {it} "
                    f"of restart {restart}"
                )
            if loss_val < best_loss:
                best_loss = loss_val
                best_p = p.copy()
                best_u = u.value.copy()
            history.append(best_loss)
            tape.backward(loss)
            adam_step(adam, {"p": p}, {"p": tape.grad(pv)})
    v_best = [best_u @ m @ best_u.T for m in mats]
    blocks = detect_blocks(v_best, threshold=threshold)
    return SbdResult(u=best_u, skew_param=best_p, loss_history=history, blocks=blocks)


def restrict_to_blocks(v, blocks: BlockStructure, keep) -> np.ndarray:
    """Keep selected blocks of a matrix, identity elsewhere.

    ``keep`` lists indices into ``blocks.blocks``. Entries inside kept
    blocks are copied; all other diagonal entries become 1 and all other
    off-diagonal entries become 0.
    """
    v = np.asarray(v, dtype=np.float64)
    n = v.shape[0]
    if v.shape != (n, n):
        raise DimensionError("restrict_to_blocks needs a square matrix")
    keep = list(keep)
    for b in keep:
        if not (0 <= b < len(blocks.blocks)):
            raise ContractError(f"unknown block index {b}")
    out = np.eye(n)
    for b in keep:
        idx = np.array(blocks.blocks[b])
        out[np.ix_(idx, idx)] = v[np.ix_(idx, idx)]
    return out


def assign_blocks_to_factors(block_structure: BlockStructure,
                             per_factor_vs: list[np.ndarray]) -> list[int]:
    """Match each hidden factor to the block it activates most.

    ``per_factor_vs[j]`` is the averaged abs(V - I) over sequences where
    only factor j moves; the factor is assigned to the block holding the
    largest share of that activation mass. This automates an assignment
    that would otherwise be read off heatmaps by eye.
    """
    out = []
    for energy in per_factor_vs:
        masses = []
        for members in block_structure.blocks:
            idx = np.array(members)
            masses.append(float(np.abs(energy[np.ix_(idx, idx)]).sum()))
        out.append(int(np.argmax(masses)))
    return out
