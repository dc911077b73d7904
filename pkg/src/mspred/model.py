"""Encoder/decoder model, closed-form latent transitions, and losses.

The training objective encodes the first ``T_c`` frames of a sequence,
solves a least-squares problem for the latent transition of *that*
sequence in closed form, rolls the transition forward, decodes, and
scores the prediction against the unseen frames. Because the transition
solve is a differentiable composite (transpose / matmul / SPD inverse),
the whole pipeline trains end to end by plain backpropagation.

Losses are averaged over sequences and predicted frames (the summed
variant only rescales the learning rate). Gradient-free numpy mirrors of
the encode/decode/estimate path live at the bottom; they perform the same
operations in the same order as the tape path, so evaluation code and the
training loss agree on identical inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Var, cholesky_lower, spd_solve_identity
from .datagen import MixingMap, mix64
from .errors import ContractError, DimensionError, SingularityError, ValidationError

VARIANTS = ("msp", "rec_model", "fixed_blocks", "neural_mstar")


# ---------------------------------------------------------------------------
# parameters


@dataclass
class TrainConfig:
    """Hyperparameters of one training run.

    ``T_c``/``T_p`` default to (2, 1) for first order and (5, 5) for
    second order. The learning rate drops from ``lr`` to ``lr_final`` at
    ``decay_at`` (default: 80% of the iteration budget).
    """

    a: int = 8
    m: int = 16
    enc_hidden: tuple[int, ...] = (128, 128)
    dec_hidden: tuple[int, ...] = (128, 128)
    mstar_hidden: tuple[int, ...] = (128, 128)
    lr: float = 3e-4
    lr_final: float = 1e-4
    decay_at: int | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    iterations: int = 10_000
    seed: int = 0
    variant: str = "msp"
    order: int = 1
    T_c: int | None = None
    T_p: int | None = None
    invertibility_weight: float = 1.0
    holdout: int = 0
    log_interval: int = 100

    def resolved(self) -> "TrainConfig":
        """Materialize order-dependent defaults into concrete fields."""
        cfg = self
        if cfg.T_c is None:
            cfg = replace(cfg, T_c=2 if cfg.order == 1 else 5)
        if cfg.T_p is None:
            cfg = replace(cfg, T_p=1 if cfg.order == 1 else 5)
        if cfg.decay_at is None:
            cfg = replace(cfg, decay_at=int(0.8 * cfg.iterations))
        return cfg

    def validate(self) -> None:
        cfg = self.resolved()
        if cfg.variant not in VARIANTS:
            raise ValidationError(f"unknown variant {cfg.variant!r}", field="variant")
        if cfg.order not in (1, 2):
            raise ValidationError("order must be 1 or 2", field="order")
        if cfg.m <= cfg.a:
            raise ValidationError("multiplicity m must exceed a", field="m")
        if cfg.batch_size < 1:
            raise ValidationError("batch_size must be >= 1", field="batch_size")
        if cfg.iterations < 0:
            raise ValidationError("iterations must be >= 0", field="iterations")
        min_tc = 2 if cfg.order == 1 else 3
        if cfg.T_c < min_tc:
            raise ValidationError(f"T_c must be >= {min_tc} for order {cfg.order}",
                                  field="T_c")
        if cfg.T_p < 1 and cfg.variant != "rec_model":
            raise ValidationError("T_p must be >= 1", field="T_p")
        if cfg.variant == "fixed_blocks" and cfg.a % 2 != 0:
            raise ValidationError("fixed_blocks needs even a", field="a")
        if cfg.lr <= 0 or cfg.lr_final <= 0:
            raise ValidationError("learning rates must be positive", field="lr")


def _init_mlp(rng, sizes):
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        b = np.zeros((1, fan_out))
        layers.append((w, b))
    return layers


@dataclass
class ModelParams:
    """Encoder and decoder MLP weights plus the latent shape (a, m).

    Layers apply ``x @ W + b`` with tanh between hidden layers and a
    linear final layer. ``mstar`` is present only for the neural
    transition ablation.
    """

    a: int
    m: int
    obs_dim: int
    T_c: int
    enc: list = field(repr=False)
    dec: list = field(repr=False)
    mstar: list | None = field(default=None, repr=False)

    @classmethod
    def initialize(cls, cfg: TrainConfig, obs_dim: int) -> "ModelParams":
        """Seeded init: weights uniform in +-1/sqrt(fan_in), biases zero.

        The neural transition head's output bias starts at vec(I) so that
        ablation begins from an identity transition.
        """
        cfg = cfg.resolved()
        cfg.validate()
        rng = np.random.default_rng(mix64(cfg.seed, 17))
        enc = _init_mlp(rng, (obs_dim, *cfg.enc_hidden, cfg.a * cfg.m))
        dec = _init_mlp(rng, (cfg.a * cfg.m, *cfg.dec_hidden, obs_dim))
        mstar = None
        if cfg.variant == "neural_mstar":
            mstar = _init_mlp(rng, (cfg.T_c * obs_dim, *cfg.mstar_hidden, cfg.a * cfg.a))
            w_out, _ = mstar[-1]
            mstar[-1] = (w_out, np.eye(cfg.a).reshape(1, -1).copy())
        return cls(a=cfg.a, m=cfg.m, obs_dim=obs_dim, T_c=cfg.T_c,
                   enc=enc, dec=dec, mstar=mstar)

    def named_tensors(self) -> dict[str, np.ndarray]:
        """Flat, ordered name -> array view of every parameter."""
        out = {}
        for group, layers in (("enc", self.enc), ("dec", self.dec),
                              ("mstar", self.mstar or [])):
            for i, (w, b) in enumerate(layers):
                out[f"{group}{i}.w"] = w
                out[f"{group}{i}.b"] = b
        return out

    def copy(self) -> "ModelParams":
        def cp(layers):
            return [(w.copy(), b.copy()) for w, b in layers]

        return ModelParams(a=self.a, m=self.m, obs_dim=self.obs_dim, T_c=self.T_c,
                           enc=cp(self.enc), dec=cp(self.dec),
                           mstar=cp(self.mstar) if self.mstar is not None else None)

    def apply_named(self, tensors: dict[str, np.ndarray]) -> None:
        """Overwrite parameters in place from a named_tensors()-style dict."""
        mine = self.named_tensors()
        if set(mine) != set(tensors):
            raise ContractError("parameter names do not match this model")
        for name, arr in tensors.items():
            target = mine[name]
            if target.shape != arr.shape:
                raise ContractError(f"shape mismatch for {name}")
        # rebuild layer lists so arrays are owned copies
        def rebuild(group_name, layers):
            return [(tensors[f"{group_name}{i}.w"].copy(),
                     tensors[f"{group_name}{i}.b"].copy())
                    for i in range(len(layers))]

        self.enc = rebuild("enc", self.enc)
        self.dec = rebuild("dec", self.dec)
        if self.mstar is not None:
            self.mstar = rebuild("mstar", self.mstar)


class TapeModel:
    """Model parameters entered as leaves on one tape.

    Construct a fresh instance per loss evaluation; ``leaf_vars`` maps
    parameter names to their tape handles so the trainer can read
    gradients after backward().
    """

    def __init__(self, tape: ad.Tape, params: ModelParams):
        self.tape = tape
        self.params = params
        self.a = params.a
        self.m = params.m
        self.leaf_vars: dict[str, Var] = {}
        self._enc = self._enter("enc", params.enc)
        self._dec = self._enter("dec", params.dec)
        self._mstar = self._enter("mstar", params.mstar) if params.mstar else None

    def _enter(self, group, layers):
        out = []
        for i, (w, b) in enumerate(layers):
            wv = self.tape.input(w)
            bv = self.tape.input(b)
            self.leaf_vars[f"{group}{i}.w"] = wv
            self.leaf_vars[f"{group}{i}.b"] = bv
            out.append((wv, bv))
        return out

    @staticmethod
    def _mlp(layers, x: Var) -> Var:
        h = x
        last = len(layers) - 1
        for i, (w, b) in enumerate(layers):
            h = ad.add_rowvec(ad.matmul(h, w), b)
            if i < last:
                h = ad.tanh(h)
        return h

    def encode_rows(self, x: Var) -> Var:
        """Encode observation rows (r, n) to latent rows (r, a*m)."""
        return self._mlp(self._enc, x)

    def decode_rows(self, h: Var) -> Var:
        """Decode latent rows (r, a*m) back to observation rows (r, n)."""
        return self._mlp(self._dec, h)

    def transition_rows(self, x: Var) -> Var:
        """Neural transition head: condition rows (r, T_c*n) -> (r, a*a)."""
        if self._mstar is None:
            raise ContractError("model has no neural transition head")
        return self._mlp(self._mstar, x)

    def gradients(self) -> dict[str, np.ndarray]:
        return {name: self.tape.grad(var) for name, var in self.leaf_vars.items()}


def encode_frame(tape_model: TapeModel, x) -> Var:
    """Encode a single observation vector into its a x m latent."""
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    row = tape_model.encode_rows(tape_model.tape.input(x))
    return ad.reshape(row, tape_model.a, tape_model.m)


def decode_latent(tape_model: TapeModel, h: Var) -> Var:
    """Decode one a x m latent back to a single observation row."""
    row = ad.reshape(h, 1, tape_model.a * tape_model.m)
    return tape_model.decode_rows(row)


# ---------------------------------------------------------------------------
# transition estimation


@dataclass
class TransitionEstimate:
    """Result of the internal least-squares transition solve.

    ``m_star`` is the a x a transition (first order) or the acceleration
    operator (second order, with ``m_last`` the final velocity operator).
    ``residual`` is the fit error of the internal problem, from forward
    values only.
    """

    order: int
    m_star: Var
    m_last: Var | None
    residual: float


def _rank_check(h0_shape, a):
    if h0_shape[1] < a:
        raise DimensionError(
            f"conditioning latents give {h0_shape[1]} columns for {a} rows; "
            "need (T_c - 1) * m >= a"
        )


def estimate_transition(latents: list[Var]) -> TransitionEstimate:
    """Least-squares transition M minimizing sum ||M H_t - H_{t+1}||_F^2.

    ``latents`` are the encoded conditional frames; the optimum is
    H_plus1 pinv(H_plus0) over their horizontal concatenations, solved
    through the differentiable right pseudo-inverse.

    Raises:
        SingularityError: the stacked conditioning latent is rank
            deficient (a collapsed encoder).
    """
    if len(latents) < 2:
        raise ContractError("estimate_transition needs at least two frames")
    a = latents[0].shape[0]
    h0 = latents[0] if len(latents) == 2 else ad.hcat(latents[:-1])
    h1 = latents[1] if len(latents) == 2 else ad.hcat(latents[1:])
    _rank_check(h0.shape, a)
    m = ad.matmul(h1, ad.pinv_right(h0))
    residual = float(((m.value @ h0.value - h1.value) ** 2).sum())
    return TransitionEstimate(order=1, m_star=m, m_last=None, residual=residual)


def estimate_transition_blockwise(latents: list[Var], block: int = 2) -> TransitionEstimate:
    """Independent transition solve on each ``block``-row slice.

    Produces a transition that is exactly a direct sum: off-block entries
    are zero constants, not small numbers.
    """
    if len(latents) < 2:
        raise ContractError("estimate_transition_blockwise needs two frames")
    a = latents[0].shape[0]
    if a % block != 0:
        raise ContractError(f"a={a} is not divisible by block={block}")
    tape = latents[0].tape
    n_blocks = a // block
    zero = tape.input(np.zeros((block, block)))
    band_rows = []
    residual = 0.0
    for r in range(n_blocks):
        sub = [ad.slice_rows(lat, r * block, (r + 1) * block) for lat in latents]
        try:
            est = estimate_transition(sub)
        except SingularityError as exc:
            raise SingularityError(f"block {r}: {exc}", pivot=exc.pivot) from exc
        residual += est.residual
        band = [zero] * n_blocks
        band[r] = est.m_star
        band_rows.append(ad.hcat(band))
    m = ad.vcat(band_rows)
    return TransitionEstimate(order=1, m_star=m, m_last=None, residual=residual)


def estimate_second_order(latents: list[Var]) -> TransitionEstimate:
    """Two-stage solve: per-step velocity operators, then their transition.

    Step one forms velocity estimates 1M_t = H_t pinv(H_{t-1}) (each frame
    latent must be full row rank, hence m >= a); step two solves the same
    least-squares problem on the velocity sequence, yielding the constant
    acceleration operator. Returns that operator as ``m_star`` and the
    final velocity 1M_{T_c} as ``m_last``.

    Raises:
        SingularityError: naming the failing frame index.
    """
    if len(latents) < 3:
        raise ContractError("second order needs at least three frames (T_c >= 3)")
    a, m_cols = latents[0].shape
    if m_cols < a:
        raise DimensionError(f"second order needs m >= a, got latent {latents[0].shape}")
    vel = []
    for t in range(1, len(latents)):
        try:
            vel.append(ad.matmul(latents[t], ad.pinv_right(latents[t - 1])))
        except SingularityError as exc:
            raise SingularityError(f"frame {t - 1}: {exc}", pivot=exc.pivot) from exc
    v0 = vel[0] if len(vel) == 2 else ad.hcat(vel[:-1])
    v1 = vel[1] if len(vel) == 2 else ad.hcat(vel[1:])
    try:
        acc = ad.matmul(v1, ad.pinv_right(v0))
    except SingularityError as exc:
        raise SingularityError(f"velocity stage: {exc}", pivot=exc.pivot) from exc
    residual = float(((acc.value @ v0.value - v1.value) ** 2).sum())
    return TransitionEstimate(order=2, m_star=acc, m_last=vel[-1], residual=residual)


def rollout(est: TransitionEstimate, h: Var, steps: int) -> list[Var]:
    """Latents M^1 h .. M^steps h by repeated multiplication."""
    if est.order != 1:
        raise ContractError("rollout expects a first-order estimate")
    if steps < 1:
        raise ContractError("steps must be >= 1")
    out = []
    cur = h
    for _ in range(steps):
        cur = ad.matmul(est.m_star, cur)
        out.append(cur)
    return out


def rollout_second_order(est: TransitionEstimate, h: Var, steps: int) -> list[Var]:
    """Second-order rollout with left-accumulated step operators.

    Step j applies A^j B where A is the acceleration operator and B the
    last velocity operator; products accumulate from the left, so the
    j-th output is (A^j B)(A^{j-1} B)...(A B) h.
    """
    if est.order != 2:
        raise ContractError("rollout_second_order expects a second-order estimate")
    if steps < 1:
        raise ContractError("steps must be >= 1")
    a_op, b_op = est.m_star, est.m_last
    out = []
    a_pow = None
    left = None
    for j in range(1, steps + 1):
        a_pow = a_op if j == 1 else ad.matmul(a_op, a_pow)
        step_op = ad.matmul(a_pow, b_op)
        left = step_op if j == 1 else ad.matmul(step_op, left)
        out.append(ad.matmul(left, h))
    return out


def neural_mstar(tape_model: TapeModel, cond_frames) -> Var:
    """Transition matrix predicted by the neural head from T_c raw frames."""
    flat = np.asarray(cond_frames, dtype=np.float64).reshape(1, -1)
    row = tape_model.transition_rows(tape_model.tape.input(flat))
    return ad.reshape(row, tape_model.a, tape_model.a)


# ---------------------------------------------------------------------------
# losses


def _as_batch(obs) -> np.ndarray:
    obs = np.asarray(obs, dtype=np.float64)
    if obs.ndim == 2:
        obs = obs[None]
    if obs.ndim != 3:
        raise DimensionError(f"expected (N, T, n) observations, got {obs.shape}")
    return obs


def _sequence_latents(tape_model, enc_out, i, T_c):
    a, m = tape_model.a, tape_model.m
    return [ad.reshape(ad.slice_rows(enc_out, i * T_c + t, i * T_c + t + 1), a, m)
            for t in range(T_c)]


def loss_pred(tape_model: TapeModel, obs, T_c: int, T_p: int, *,
              order: int = 1, transition: str = "lstsq", block: int = 2) -> Var:
    """Prediction loss: fit the transition on frames 1..T_c, score T_p more.

    ``transition`` selects the estimator: "lstsq" (closed form),
    "blockwise" (direct sum of 2x2 solves) or "neural" (the learned
    transition head). Returns the mean over sequences and predicted
    frames of the squared L2 frame error.
    """
    obs = _as_batch(obs)
    n_seq, t_len, n_dim = obs.shape
    if t_len < T_c + T_p:
        raise DimensionError(f"sequences of length {t_len} cannot supply T_c+T_p={T_c + T_p}")
    tape = tape_model.tape
    enc_in = obs[:, :T_c].reshape(n_seq * T_c, n_dim)
    enc_out = tape_model.encode_rows(tape.input(enc_in))
    trans_rows = None
    if transition == "neural":
        cond = obs[:, :T_c].reshape(n_seq, T_c * n_dim)
        trans_rows = tape_model.transition_rows(tape.input(cond))
    pred_rows = []
    a, m = tape_model.a, tape_model.m
    for i in range(n_seq):
        lat = _sequence_latents(tape_model, enc_out, i, T_c)
        if transition == "lstsq":
            est = estimate_transition(lat) if order == 1 else estimate_second_order(lat)
        elif transition == "blockwise":
            est = estimate_transition_blockwise(lat, block)
        elif transition == "neural":
            mat = ad.reshape(ad.slice_rows(trans_rows, i, i + 1), a, a)
            est = TransitionEstimate(order=1, m_star=mat, m_last=None, residual=float("nan"))
        else:
            raise ContractError(f"unknown transition kind {transition!r}")
        if est.order == 1:
            preds = rollout(est, lat[-1], T_p)
        else:
            preds = rollout_second_order(est, lat[-1], T_p)
        pred_rows.extend(ad.reshape(p, 1, a * m) for p in preds)
    decoded = tape_model.decode_rows(ad.vcat(pred_rows))
    targets = obs[:, T_c : T_c + T_p].reshape(n_seq * T_p, n_dim)
    diff = ad.sub(decoded, tape.input(targets))
    return ad.scale(ad.frobenius_sq(diff), 1.0 / (n_seq * T_p))


def loss_rec(tape_model: TapeModel, obs, T_c: int) -> Var:
    """Reconstruction loss: fit on all T_c frames, re-predict frames 2..T_c.

    The transition is estimated from the full conditional sequence and
    then asked to reproduce the frames it was fitted on, starting from
    the first latent. No unseen frames are involved.
    """
    obs = _as_batch(obs)
    n_seq, t_len, n_dim = obs.shape
    if t_len < T_c:
        raise DimensionError(f"sequences of length {t_len} cannot supply T_c={T_c}")
    tape = tape_model.tape
    enc_in = obs[:, :T_c].reshape(n_seq * T_c, n_dim)
    enc_out = tape_model.encode_rows(tape.input(enc_in))
    a, m = tape_model.a, tape_model.m
    pred_rows = []
    for i in range(n_seq):
        lat = _sequence_latents(tape_model, enc_out, i, T_c)
        est = estimate_transition(lat)
        preds = rollout(est, lat[0], T_c - 1)
        pred_rows.extend(ad.reshape(p, 1, a * m) for p in preds)
    decoded = tape_model.decode_rows(ad.vcat(pred_rows))
    targets = obs[:, 1:T_c].reshape(n_seq * (T_c - 1), n_dim)
    diff = ad.sub(decoded, tape.input(targets))
    return ad.scale(ad.frobenius_sq(diff), 1.0 / (n_seq * (T_c - 1)))


def invertibility_loss(tape_model: TapeModel, obs, T_c: int) -> Var:
    """Mean squared error of decode(encode(frame)) over the first T_c frames."""
    obs = _as_batch(obs)
    n_seq, _, n_dim = obs.shape
    frames = obs[:, :T_c].reshape(n_seq * T_c, n_dim)
    tape = tape_model.tape
    x = tape.input(frames)
    rec = tape_model.decode_rows(tape_model.encode_rows(x))
    diff = ad.sub(rec, x)
    return ad.scale(ad.frobenius_sq(diff), 1.0 / (n_seq * T_c))


def variant_loss(tape_model: TapeModel, obs, cfg: TrainConfig) -> Var:
    """The training objective for the configured variant."""
    cfg = cfg.resolved()
    if cfg.variant == "msp":
        return loss_pred(tape_model, obs, cfg.T_c, cfg.T_p, order=cfg.order)
    if cfg.variant == "fixed_blocks":
        return loss_pred(tape_model, obs, cfg.T_c, cfg.T_p, transition="blockwise")
    if cfg.variant == "rec_model":
        return loss_rec(tape_model, obs, max(cfg.T_c, 3))
    if cfg.variant == "neural_mstar":
        pred = loss_pred(tape_model, obs, cfg.T_c, cfg.T_p, transition="neural")
        if cfg.invertibility_weight == 0.0:
            return pred
        inv = invertibility_loss(tape_model, obs, cfg.T_c)
        return ad.add(pred, ad.scale(inv, cfg.invertibility_weight))
    raise ContractError(f"unknown variant {cfg.variant!r}")


# ---------------------------------------------------------------------------
# gradient-free numpy mirrors (evaluation path)


def _mlp_np(layers, x):
    h = x
    last = len(layers) - 1
    for i, (w, b) in enumerate(layers):
        h = h @ w + b
        if i < last:
            h = np.tanh(h)
    return h


def encode_rows_np(model, rows: np.ndarray) -> np.ndarray:
    """Forward-only encode; accepts ModelParams or an oracle model."""
    if isinstance(model, ModelParams):
        return _mlp_np(model.enc, np.asarray(rows, dtype=np.float64))
    return model.encode_rows_np(rows)


def decode_rows_np(model, rows: np.ndarray) -> np.ndarray:
    """Forward-only decode; accepts ModelParams or an oracle model."""
    if isinstance(model, ModelParams):
        return _mlp_np(model.dec, np.asarray(rows, dtype=np.float64))
    return model.decode_rows_np(rows)


def transition_rows_np(params: ModelParams, rows: np.ndarray) -> np.ndarray:
    if params.mstar is None:
        raise ContractError("model has no neural transition head")
    return _mlp_np(params.mstar, np.asarray(rows, dtype=np.float64))


def _pinv_right_np(h):
    gram = h @ h.T
    return h.T @ spd_solve_identity(cholesky_lower(gram))


def fit_transition_np(model, frames: np.ndarray) -> np.ndarray:
    """First-order transition from raw conditional frames (T_c, n)."""
    frames = np.asarray(frames, dtype=np.float64)
    t_c = frames.shape[0]
    lat = encode_rows_np(model, frames).reshape(t_c, model.a, model.m)
    h0 = lat[0] if t_c == 2 else np.concatenate(list(lat[:-1]), axis=1)
    h1 = lat[1] if t_c == 2 else np.concatenate(list(lat[1:]), axis=1)
    return h1 @ _pinv_right_np(h0)


def fit_transition2_np(model, frames: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Second-order operators (acceleration, last velocity) from frames."""
    frames = np.asarray(frames, dtype=np.float64)
    t_c = frames.shape[0]
    lat = encode_rows_np(model, frames).reshape(t_c, model.a, model.m)
    vel = [lat[t] @ _pinv_right_np(lat[t - 1]) for t in range(1, t_c)]
    v0 = vel[0] if len(vel) == 2 else np.concatenate(vel[:-1], axis=1)
    v1 = vel[1] if len(vel) == 2 else np.concatenate(vel[1:], axis=1)
    acc = v1 @ _pinv_right_np(v0)
    return acc, vel[-1]


def neural_transition_np(params: ModelParams, cond_frames: np.ndarray) -> np.ndarray:
    flat = np.asarray(cond_frames, dtype=np.float64).reshape(1, -1)
    return transition_rows_np(params, flat).reshape(params.a, params.a)


def batch_transitions_np(model, obs, T_c: int, *,
                         transition: str = "lstsq") -> np.ndarray:
    """Per-sequence transition matrices for a whole batch, shape (N, a, a)."""
    obs = _as_batch(obs)
    out = np.empty((obs.shape[0], model.a, model.a))
    for i in range(obs.shape[0]):
        if transition == "lstsq":
            out[i] = fit_transition_np(model, obs[i, :T_c])
        elif transition == "neural":
            out[i] = neural_transition_np(model, obs[i, :T_c])
        else:
            raise ContractError(f"unknown transition kind {transition!r}")
    return out


def horizon_errors_np(model, obs, T_c: int, horizons: int, *,
                      order: int = 1, transition: str = "lstsq") -> np.ndarray:
    """Mean squared frame error at each prediction horizon 1..horizons.

    Fits the per-sequence transition on the first T_c frames, rolls the
    latent forward, decodes every predicted latent in one batch, and
    averages ||error||_2^2 over sequences per horizon.
    """
    obs = _as_batch(obs)
    n_seq, t_len, n_dim = obs.shape
    if t_len < T_c + horizons:
        raise DimensionError(f"need T >= {T_c + horizons}, got {t_len}")
    a, m = model.a, model.m
    pred_lat = np.empty((n_seq, horizons, a * m))
    for i in range(n_seq):
        frames = obs[i, :T_c]
        lat = encode_rows_np(model, frames).reshape(T_c, a, m)
        cur = lat[-1]
        if order == 1:
            mat = (fit_transition_np(model, frames) if transition == "lstsq"
                   else neural_transition_np(model, frames))
            for h in range(horizons):
                cur = mat @ cur
                pred_lat[i, h] = cur.reshape(-1)
        else:
            acc, vel_last = fit_transition2_np(model, frames)
            a_pow = None
            left = None
            for h in range(horizons):
                a_pow = acc if h == 0 else acc @ a_pow
                step_op = a_pow @ vel_last
                left = step_op if h == 0 else step_op @ left
                pred_lat[i, h] = (left @ lat[-1]).reshape(-1)
    decoded = decode_rows_np(model, pred_lat.reshape(n_seq * horizons, a * m))
    decoded = decoded.reshape(n_seq, horizons, n_dim)
    targets = obs[:, T_c : T_c + horizons]
    return ((decoded - targets) ** 2).sum(axis=2).mean(axis=0)


# ---------------------------------------------------------------------------
# oracle model (known generator, exact equivariant lift)


class OracleModel:
    """Exact encoder/decoder built from the known generator.

    Encodes an observation by inverting the mixing map and lifting the
    recovered 2k latent into a (2k) x m matrix whose columns are plane
    rotations of the latent; every column transforms identically under
    the hidden torus action, so the latent transition is exactly the
    block rotation and every loss in this module vanishes on clean data.
    Evaluation-only: its tape methods inject constants, so nothing
    differentiates through it.
    """

    def __init__(self, spec, m: int | None = None):
        self.spec = spec
        self.mixing = MixingMap(spec)
        self.a = spec.latent_dim
        self.m = m if m is not None else self.a + 2
        k = spec.k
        if self.m < self.a:
            raise ContractError("oracle multiplicity must be >= 2k")
        # column-lift angles: column 0 is the identity (so decoding reads
        # it back directly); later columns advance at a factor-specific
        # frequency, which keeps the 2k cos/sin rows linearly independent
        cols = np.arange(self.m)
        freqs = math.pi * (np.arange(k) + 1.0) / (k + 1.0)
        self._phis = freqs[:, None] * cols[None, :]
        basis = np.vstack([np.cos(self._phis), np.sin(self._phis)])
        if np.linalg.matrix_rank(basis, tol=1e-8) < 2 * k:
            raise ContractError("degenerate oracle lift; increase m")

    def _lift(self, z_rows: np.ndarray) -> np.ndarray:
        r = z_rows.shape[0]
        out = np.empty((r, self.a, self.m))
        zx = z_rows[:, 0::2][:, :, None]
        zy = z_rows[:, 1::2][:, :, None]
        c = np.cos(self._phis)[None, :, :]
        s = np.sin(self._phis)[None, :, :]
        out[:, 0::2, :] = c * zx - s * zy
        out[:, 1::2, :] = s * zx + c * zy
        return out.reshape(r, self.a * self.m)

    def encode_rows_np(self, rows: np.ndarray) -> np.ndarray:
        z = self.mixing.demix(np.asarray(rows, dtype=np.float64))
        return self._lift(z)

    def decode_rows_np(self, rows: np.ndarray) -> np.ndarray:
        h = np.asarray(rows, dtype=np.float64).reshape(-1, self.a, self.m)
        return self.mixing.apply(h[:, :, 0])

    # tape protocol (constant injection; evaluation only)

    def bind(self, tape: ad.Tape) -> "BoundOracle":
        return BoundOracle(tape, self)


class BoundOracle:
    """Tape adapter for OracleModel; values enter as constants."""

    def __init__(self, tape, oracle: OracleModel):
        self.tape = tape
        self.oracle = oracle
        self.a = oracle.a
        self.m = oracle.m

    def encode_rows(self, x: Var) -> Var:
        return self.tape.input(self.oracle.encode_rows_np(x.value))

    def decode_rows(self, h: Var) -> Var:
        return self.tape.input(self.oracle.decode_rows_np(h.value))
