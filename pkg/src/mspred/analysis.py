"""Post-hoc measurements on trained models.

Everything here is gradient-free and pure: equivariance error (how well a
transition fitted on one sequence predicts another sequence with the same
hidden motion), transition swapping, intra-orbit homogeneity, spectra of
the transition family, orthogonality, and a linear probe regressing the
hidden transition parameters from the fitted operators.

The prediction routines repeat the training loss's operations in the same
order (one batched encode, per-sequence closed-form solve, one batched
decode), so their numbers coincide with the tape loss on identical
inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as mm
from .datagen import PairedBatch, SequenceBatch, mix64
from .errors import ContractError, DimensionError, NumericError

RATIO_FLOOR = 1e-15


def _prediction_error(model, transitions, obs, T_c, T_p):
    """Mean squared frame error using externally supplied transitions.

    Mirrors the training loss step for step: batched encode of the
    conditional frames, per-sequence rollout from the last conditional
    latent, one batched decode, mean over sequences and frames.
    """
    obs = np.asarray(obs, dtype=np.float64)
    n_seq, t_len, n_dim = obs.shape
    if t_len < T_c + T_p:
        raise DimensionError(f"need T >= {T_c + T_p}, got {t_len}")
    a, m = model.a, model.m
    enc = mm.encode_rows_np(model, obs[:, :T_c].reshape(n_seq * T_c, n_dim))
    pred_rows = np.empty((n_seq * T_p, a * m))
    for i in range(n_seq):
        cur = enc[i * T_c + T_c - 1].reshape(a, m)
        mat = transitions[i]
        for j in range(T_p):
            cur = mat @ cur
            pred_rows[i * T_p + j] = cur.reshape(-1)
    decoded = mm.decode_rows_np(model, pred_rows)
    targets = obs[:, T_c : T_c + T_p].reshape(n_seq * T_p, n_dim)
    return float(((decoded - targets) ** 2).sum() * (1.0 / (n_seq * T_p)))


def fitted_transitions(model, obs, T_c):
    """Per-sequence least-squares transitions from batched encodings."""
    obs = np.asarray(obs, dtype=np.float64)
    n_seq, _, n_dim = obs.shape
    a, m = model.a, model.m
    enc = mm.encode_rows_np(model, obs[:, :T_c].reshape(n_seq * T_c, n_dim))
    out = np.empty((n_seq, a, a))
    for i in range(n_seq):
        lat = enc[i * T_c : (i + 1) * T_c].reshape(T_c, a, m)
        h0 = lat[0] if T_c == 2 else np.concatenate(list(lat[:-1]), axis=1)
        h1 = lat[1] if T_c == 2 else np.concatenate(list(lat[1:]), axis=1)
        out[i] = h1 @ mm._pinv_right_np(h0)
    return out


@dataclass
class EquivarianceReport:
    """Self-prediction error, cross-sequence error, and their ratio."""

    lp: float
    lp_equiv: float
    ratio: float | None
    sample_count: int

    def to_dict(self) -> dict:
        return {"kind": "equivariance", "lp": self.lp, "lp_equiv": self.lp_equiv,
                "ratio": self.ratio, "sample_count": self.sample_count}


def equivariance_error(model, paired: PairedBatch, T_c: int, T_p: int) -> EquivarianceReport:
    """Score transitions fitted on one batch against its paired partner.

    ``lp`` predicts each partner sequence with its own fitted transition;
    ``lp_equiv`` predicts it with the transition fitted on the sequence
    that shares its hidden motion. The ratio is None when the baseline is
    below the floating-point floor.
    """
    first, second = paired.first, paired.second
    if first.num_sequences != second.num_sequences:
        raise ContractError("paired batches differ in length")
    own = fitted_transitions(model, second.observations, T_c)
    cross = fitted_transitions(model, first.observations, T_c)
    lp = _prediction_error(model, own, second.observations, T_c, T_p)
    lp_equiv = _prediction_error(model, cross, second.observations, T_c, T_p)
    ratio = (lp_equiv / lp) if lp >= RATIO_FLOOR else None
    return EquivarianceReport(lp=lp, lp_equiv=lp_equiv, ratio=ratio,
                              sample_count=first.num_sequences)


@dataclass
class SwapResult:
    """Decoded frames and per-frame errors for a transition swap."""

    pred_a_on_b: np.ndarray
    pred_b_on_a: np.ndarray
    err_a_on_b: np.ndarray
    err_b_on_a: np.ndarray
    err_self_a: np.ndarray
    err_self_b: np.ndarray

    def to_dict(self) -> dict:
        return {"kind": "swap",
                "pred_a_on_b": self.pred_a_on_b.tolist(),
                "pred_b_on_a": self.pred_b_on_a.tolist(),
                "err_a_on_b": self.err_a_on_b.tolist(),
                "err_b_on_a": self.err_b_on_a.tolist(),
                "err_self_a": self.err_self_a.tolist(),
                "err_self_b": self.err_self_b.tolist()}


def _single_prediction(model, mat, obs, T_c, T_p):
    a, m = model.a, model.m
    enc = mm.encode_rows_np(model, obs[:T_c])
    cur = enc[T_c - 1].reshape(a, m)
    rows = np.empty((T_p, a * m))
    for j in range(T_p):
        cur = mat @ cur
        rows[j] = cur.reshape(-1)
    decoded = mm.decode_rows_np(model, rows)
    errors = ((decoded - obs[T_c : T_c + T_p]) ** 2).sum(axis=1)
    return decoded, errors


def transition_swap(model, seq_a, seq_b, T_c: int, T_p: int) -> SwapResult:
    """Apply each sequence's fitted transition to the other sequence."""
    seq_a = np.asarray(seq_a, dtype=np.float64)
    seq_b = np.asarray(seq_b, dtype=np.float64)
    mat_a = mm.fit_transition_np(model, seq_a[:T_c])
    mat_b = mm.fit_transition_np(model, seq_b[:T_c])
    pred_ab, err_ab = _single_prediction(model, mat_a, seq_b, T_c, T_p)
    pred_ba, err_ba = _single_prediction(model, mat_b, seq_a, T_c, T_p)
    _, err_self_a = _single_prediction(model, mat_a, seq_a, T_c, T_p)
    _, err_self_b = _single_prediction(model, mat_b, seq_b, T_c, T_p)
    return SwapResult(pred_a_on_b=pred_ab, pred_b_on_a=pred_ba,
                      err_a_on_b=err_ab, err_b_on_a=err_ba,
                      err_self_a=err_self_a, err_self_b=err_self_b)


def transition_distance(m1, m2) -> tuple[float, np.ndarray]:
    """Squared Frobenius distance and the entrywise squared differences."""
    m1 = np.asarray(m1, dtype=np.float64)
    m2 = np.asarray(m2, dtype=np.float64)
    if m1.shape != m2.shape:
        raise DimensionError(f"shape mismatch: {m1.shape} vs {m2.shape}")
    sq = (m1 - m2) ** 2
    return float(sq.sum()), sq


def orthogonality_defect(mat) -> float:
    """||I - M M^T||_F^2; zero exactly when M is orthogonal."""
    mat = np.asarray(mat, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise DimensionError(f"orthogonality defect needs a square matrix, got {mat.shape}")
    eye = np.eye(mat.shape[0])
    return float(((eye - mat @ mat.T) ** 2).sum())


@dataclass
class HomogeneityReport:
    """Distances between transitions fitted at shifted starts of one orbit."""

    distances: list[float]
    mean: float
    max: float
    base_norm: float

    @property
    def relative_mean(self) -> float:
        return self.mean / self.base_norm if self.base_norm > 0 else float("inf")

    def to_dict(self) -> dict:
        return {"kind": "homogeneity", "distances": self.distances, "mean": self.mean,
                "max": self.max, "base_norm": self.base_norm,
                "relative_mean": self.relative_mean}


def homogeneity_check(model, probe: SequenceBatch, T_c: int = 2) -> HomogeneityReport:
    """Compare transitions fitted at different offsets along one orbit.

    The probe must come from ``make_orbit_probe``: sequence l starts l
    steps further along the same orbit with the same hidden velocity. A
    transition map constant on orbits gives all distances zero.
    """
    mats = fitted_transitions(model, probe.observations, T_c)
    base = mats[0]
    distances = [float(np.linalg.norm(base - mats[ell])) for ell in range(1, len(mats))]
    return HomogeneityReport(distances=distances,
                             mean=float(np.mean(distances)),
                             max=float(np.max(distances)),
                             base_norm=float(np.linalg.norm(base)))


# ---------------------------------------------------------------------------
# spectra


def canonical_spectrum(mat) -> np.ndarray:
    """Eigenvalues sorted lexicographically by (real, imaginary) part.

    Real input matrices give exactly conjugate complex pairs, so the sort
    is a total order; ties inside a conjugate pair resolve by the sign of
    the imaginary part.
    """
    mat = np.asarray(mat, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise DimensionError(f"spectrum needs a square matrix, got {mat.shape}")
    try:
        eig = np.linalg.eigvals(mat)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"eigensolver did not converge: {exc}") from exc
    order = np.lexsort((eig.imag, eig.real))
    return eig[order]


def spectrum_distance(m1, m2) -> float:
    """Sum of moduli of differences between canonically sorted spectra."""
    s1 = canonical_spectrum(m1)
    s2 = canonical_spectrum(m2)
    if s1.shape != s2.shape:
        raise DimensionError("spectra of different sizes")
    return float(np.abs(s1 - s2).sum())


@dataclass
class SpectrumReport:
    """Pairwise distances between eigenvalue multisets of a family."""

    pairs: list[tuple[int, int, float]]
    mean: float | None
    max: float | None

    def to_dict(self) -> dict:
        return {"kind": "spectrum",
                "pairs": [[i, j, d] for i, j, d in self.pairs],
                "mean": self.mean, "max": self.max}


def spectrum_similarity(mats) -> SpectrumReport:
    """All-pairs spectrum distances; empty pair set for a singleton."""
    mats = [np.asarray(m, dtype=np.float64) for m in mats]
    for m in mats:
        if m.shape != mats[0].shape:
            raise DimensionError("transition matrices differ in size")
    spectra = [canonical_spectrum(m) for m in mats]
    pairs = []
    for i in range(len(mats)):
        for j in range(i + 1, len(mats)):
            pairs.append((i, j, float(np.abs(spectra[i] - spectra[j]).sum())))
    if not pairs:
        return SpectrumReport(pairs=[], mean=None, max=None)
    dists = [d for _, _, d in pairs]
    return SpectrumReport(pairs=pairs, mean=float(np.mean(dists)), max=float(np.max(dists)))


def paired_spectrum_distances(model, paired: PairedBatch, T_c: int = 2) -> list[float]:
    """Spectrum distance between same-motion, different-orbit transitions."""
    mats_a = fitted_transitions(model, paired.first.observations, T_c)
    mats_b = fitted_transitions(model, paired.second.observations, T_c)
    return [spectrum_distance(a, b) for a, b in zip(mats_a, mats_b)]


# ---------------------------------------------------------------------------
# linear probe


def regress_transition_params(mats, targets, *, seed: int = 0,
                              ridge: float = 1e-6) -> list[float | None]:
    """1 - R^2 of ridge regression from flattened transitions to targets.

    Fits on a seeded 80% split and scores each target column on the held
    out 20%. A held-out target with (numerically) zero variance reports
    None for that column.
    """
    mats = np.asarray(mats, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if targets.ndim == 1:
        targets = targets[:, None]
    n = mats.shape[0]
    if targets.shape[0] != n:
        raise DimensionError("targets and transition count differ")
    if n < 5:
        raise ContractError("need at least 5 samples for the 80/20 split")
    x = np.concatenate([mats.reshape(n, -1), np.ones((n, 1))], axis=1)
    perm = np.random.default_rng(mix64(seed, 71)).permutation(n)
    cut = max(1, int(round(0.8 * n)))
    train, test = perm[:cut], perm[cut:]
    xt = x[train]
    gram = xt.T @ xt + ridge * np.eye(x.shape[1])
    beta = np.linalg.solve(gram, xt.T @ targets[train])
    pred = x[test] @ beta
    out: list[float | None] = []
    for col in range(targets.shape[1]):
        y = targets[test, col]
        ss_tot = float(((y - y.mean()) ** 2).sum())
        if ss_tot < 1e-15:
            out.append(None)
            continue
        ss_res = float(((y - pred[:, col]) ** 2).sum())
        out.append(ss_res / ss_tot)
    return out


def velocity_targets(batch: SequenceBatch) -> np.ndarray:
    """(cos v_j, sin v_j) per factor, the regression probe's targets."""
    return np.concatenate([np.cos(batch.velocity), np.sin(batch.velocity)], axis=1)
