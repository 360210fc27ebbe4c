"""Attention encoder-decoder with a copy branch, forward and backward in numpy.

Everything operates on padded batches (leading axis ``B``); the single-
sentence functions :func:`encode`, :func:`attend`, :func:`bridge`,
:func:`decode_step` and :func:`sequence_logprob` are thin wrappers.

Extended ids: ids below ``vocab_size`` are ordinary vocabulary entries, id
``vocab_size + k`` is the k-th out-of-vocabulary token of the source
sentence.  The encoder and the decoder input embed such ids as ``<unk>``;
they only receive probability through the copy branch.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import numeric as nm
from .numeric import LstmCellWeights, ParamTensor
from .text import BOS_ID, EOS_ID, PAD_ID, UNK_ID

log = logging.getLogger(__name__)


@dataclass
class ModelConfig:
    num_layers: int = 3
    hidden_dim: int = 256
    embed_dim: int = 256
    vocab_size: int = 50010
    bidirectional_encoder: bool = True
    dropout: float = 0.3
    max_source_len: int = 100
    precision: int = 64

    def __post_init__(self):
        for name in ("num_layers", "hidden_dim", "embed_dim", "vocab_size", "max_source_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.precision not in (32, 64):
            raise ValueError("precision must be 32 or 64")

    @property
    def num_directions(self) -> int:
        return 2 if self.bidirectional_encoder else 1

    @property
    def enc_out_dim(self) -> int:
        return self.hidden_dim * self.num_directions

    @property
    def dtype(self):
        return np.float64 if self.precision == 64 else np.float32

    def to_dict(self) -> dict:
        return asdict(self)


class ModelParams:
    """All learned weights, addressable by name and by role."""

    def __init__(self, cfg: ModelConfig, tensors: dict[str, ParamTensor]):
        self.cfg = cfg
        self.tensors = tensors
        self._check_shapes()
        L, H = cfg.num_layers, cfg.hidden_dim
        t = tensors
        self.embedding = t["embedding"]
        dirs = ("fwd", "bwd")[: cfg.num_directions]
        self.encoder = [
            [LstmCellWeights(t[f"enc.{l}.{d}.W_ih"], t[f"enc.{l}.{d}.W_hh"], t[f"enc.{l}.{d}.b"]) for d in dirs]
            for l in range(L)
        ]
        self.decoder = [
            LstmCellWeights(t[f"dec.{l}.W_ih"], t[f"dec.{l}.W_hh"], t[f"dec.{l}.b"]) for l in range(L)
        ]
        self.attn_W_s, self.attn_W_h, self.attn_v = t["attn.W_s"], t["attn.W_h"], t["attn.v"]
        self.bridge = [
            (t[f"bridge.{l}.W_h"], t[f"bridge.{l}.b_h"], t[f"bridge.{l}.W_c"], t[f"bridge.{l}.b_c"])
            for l in range(L)
        ]
        self.out_W, self.out_b = t["out.W"], t["out.b"]
        assert H == self.decoder[0].hidden_dim

    @staticmethod
    def expected_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
        L, H, E, V = cfg.num_layers, cfg.hidden_dim, cfg.embed_dim, cfg.vocab_size
        D = cfg.enc_out_dim
        shapes: dict[str, tuple[int, ...]] = {"embedding": (V, E)}
        for l in range(L):
            in_dim = E if l == 0 else D
            for d in ("fwd", "bwd")[: cfg.num_directions]:
                shapes[f"enc.{l}.{d}.W_ih"] = (4 * H, in_dim)
                shapes[f"enc.{l}.{d}.W_hh"] = (4 * H, H)
                shapes[f"enc.{l}.{d}.b"] = (4 * H,)
        for l in range(L):
            in_dim = E + D if l == 0 else H
            shapes[f"dec.{l}.W_ih"] = (4 * H, in_dim)
            shapes[f"dec.{l}.W_hh"] = (4 * H, H)
            shapes[f"dec.{l}.b"] = (4 * H,)
        shapes["attn.W_s"] = (H, H)
        shapes["attn.W_h"] = (H, D)
        shapes["attn.v"] = (H,)
        for l in range(L):
            shapes[f"bridge.{l}.W_h"] = (H, D)
            shapes[f"bridge.{l}.b_h"] = (H,)
            shapes[f"bridge.{l}.W_c"] = (H, D)
            shapes[f"bridge.{l}.b_c"] = (H,)
        shapes["out.W"] = (V, E + H + D)
        shapes["out.b"] = (V,)
        return shapes

    def _check_shapes(self):
        expected = self.expected_shapes(self.cfg)
        if set(expected) != set(self.tensors):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise nm.DimensionError(f"parameter set mismatch: missing {missing}, unexpected {extra}")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise nm.DimensionError(f"{name}: expected {shape}, got {self.tensors[name].shape}")

    @classmethod
    def init(cls, cfg: ModelConfig, rng=0, scale: float = nm.INIT_SCALE) -> "ModelParams":
        """Uniform(-scale, scale) initialisation in a fixed name order."""
        rng = nm.make_rng(rng)
        tensors = {
            name: ParamTensor.uniform(name, shape, rng, scale, cfg.dtype)
            for name, shape in cls.expected_shapes(cfg).items()
        }
        return cls(cfg, tensors)

    @classmethod
    def zeros(cls, cfg: ModelConfig) -> "ModelParams":
        tensors = {
            name: ParamTensor.zeros(name, shape, cfg.dtype)
            for name, shape in cls.expected_shapes(cfg).items()
        }
        return cls(cfg, tensors)

    def __iter__(self) -> Iterator[ParamTensor]:
        return iter(self.tensors.values())

    def __getitem__(self, name: str) -> ParamTensor:
        return self.tensors[name]

    def zero_grad(self) -> None:
        nm.zero_grads(self)

    def num_parameters(self) -> int:
        return sum(p.value.size for p in self)


# ---------------------------------------------------------------- state types


@dataclass
class EncoderStates:
    outputs: np.ndarray  # (B, T, D)
    mask: np.ndarray  # (B, T)
    final_h: list[np.ndarray]  # per layer, (B, D)
    final_c: list[np.ndarray]
    keys: np.ndarray  # W_h @ h_j, (B, T, H)
    src_ids: np.ndarray  # extended ids, (B, T)
    copy_map: np.ndarray  # (B, T, n_oov) one-hot of OOV source tokens
    n_oov: np.ndarray  # (B,)

    @property
    def h(self) -> np.ndarray:
        """Encoder outputs of the first sentence, shape (m, D)."""
        return self.outputs[0][self.mask[0] > 0]

    def tile(self, k: int) -> "EncoderStates":
        """Repeat a single-sentence encoding ``k`` times along the batch axis."""
        rep = lambda a: np.repeat(a, k, axis=0)  # noqa: E731
        return EncoderStates(
            rep(self.outputs), rep(self.mask), [rep(a) for a in self.final_h],
            [rep(a) for a in self.final_c], rep(self.keys), rep(self.src_ids),
            rep(self.copy_map), rep(self.n_oov),
        )


@dataclass
class DecoderState:
    layers: list[tuple[np.ndarray, np.ndarray]]  # per layer (h, c), each (B, H)

    @property
    def top(self) -> np.ndarray:
        return self.layers[-1][0]

    def select(self, rows) -> "DecoderState":
        return DecoderState([(h[rows], c[rows]) for h, c in self.layers])


@dataclass
class AttentionResult:
    context: np.ndarray
    weights: np.ndarray
    scores: np.ndarray


@dataclass
class OutputDistribution:
    probs: np.ndarray  # (B, V + n_oov_max)
    log_probs: np.ndarray
    vocab_size: int
    oov_tokens: list[str] = field(default_factory=list)

    def token(self, ext_id: int, vocab) -> str:
        if ext_id < self.vocab_size:
            return vocab.token(ext_id)
        return self.oov_tokens[ext_id - self.vocab_size]


# ---------------------------------------------------------------- batching


@dataclass
class Batch:
    src: np.ndarray  # (B, Ts) extended ids, PAD padded
    src_mask: np.ndarray
    tgt: np.ndarray  # (B, Tt) extended ids starting BOS, PAD padded
    tgt_mask: np.ndarray  # (B, Tt - 1) mask over predicted positions
    copy_map: np.ndarray
    n_oov: np.ndarray

    @property
    def num_tokens(self) -> int:
        return int(self.tgt_mask.sum())


def _copy_map(src: np.ndarray, vocab_size: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    n_oov = np.where(src >= vocab_size, src - vocab_size + 1, 0).max(axis=1)
    k = max(int(n_oov.max()) if n_oov.size else 0, 0)
    S = np.zeros(src.shape + (k,), dtype=dtype)
    b, t = np.nonzero(src >= vocab_size)
    S[b, t, src[b, t] - vocab_size] = 1.0
    return S, n_oov


def make_batch(pairs: Sequence[tuple[Sequence[int], Sequence[int]]], cfg: ModelConfig) -> Batch:
    """Pad ``(source ext ids, target ext ids)`` pairs into a :class:`Batch`."""
    if not pairs:
        raise ValueError("empty batch")
    B = len(pairs)
    Ts = max(len(s) for s, _ in pairs)
    Tt = max(len(t) for _, t in pairs)
    src = np.full((B, Ts), PAD_ID, dtype=np.int64)
    tgt = np.full((B, Tt), PAD_ID, dtype=np.int64)
    src_mask = np.zeros((B, Ts), dtype=cfg.dtype)
    tgt_mask = np.zeros((B, Tt - 1), dtype=cfg.dtype)
    for b, (s, t) in enumerate(pairs):
        if not s:
            raise ValueError("empty source sequence")
        if len(t) < 2 or t[0] != BOS_ID or t[-1] != EOS_ID:
            raise ValueError("targets must be framed by BOS and EOS")
        src[b, : len(s)] = s
        src_mask[b, : len(s)] = 1.0
        tgt[b, : len(t)] = t
        tgt_mask[b, : len(t) - 1] = 1.0
    S, n_oov = _copy_map(src, cfg.vocab_size, cfg.dtype)
    for b, (_, t) in enumerate(pairs):
        if max(t) >= cfg.vocab_size + n_oov[b]:
            raise ValueError(f"target id {max(t)} outside the extended vocabulary of pair {b}")
    return Batch(src, src_mask, tgt, tgt_mask, S, n_oov)


def _check_source(src: np.ndarray, V: int) -> None:
    """Ids must be non-negative and OOV ids must be numbered V, V+1, ... per row."""
    if np.any(src < 0):
        raise ValueError("negative source id")
    for row in src:
        oov = np.unique(row[row >= V])
        if oov.size and oov[-1] - V >= oov.size:
            raise ValueError(f"source id {int(oov[-1])} out of range for vocabulary of {V}")


def _in_vocab(ids: np.ndarray, V: int) -> np.ndarray:
    return np.where(ids >= V, UNK_ID, ids)


# ---------------------------------------------------------------- encoder


def _encode_forward(params: ModelParams, src, mask, rng=None):
    cfg = params.cfg
    V, L, H = cfg.vocab_size, cfg.num_layers, cfg.hidden_dim
    _check_source(src, V)
    B, T = src.shape
    in_ids = _in_vocab(src, V)
    X = params.embedding.value[in_ids]
    layer_caches = []
    final_h, final_c = [], []
    for l in range(L):
        drop = nm.dropout_mask(X.shape, cfg.dropout, rng, cfg.dtype) if l > 0 else None
        X = nm.apply_mask(X, drop)
        outs, hs, cs, dir_caches = [], [], [], []
        for d, cell in enumerate(params.encoder[l]):
            order = range(T) if d == 0 else range(T - 1, -1, -1)
            h = np.zeros((B, H), dtype=cfg.dtype)
            c = np.zeros((B, H), dtype=cfg.dtype)
            out = np.empty((B, T, H), dtype=cfg.dtype)
            steps = [None] * T
            for t in order:
                hn, cn, steps[t] = nm.lstm_cell_forward(X[:, t], h, c, cell)
                m = mask[:, t, None]
                h = m * hn + (1 - m) * h
                c = m * cn + (1 - m) * c
                out[:, t] = h
            outs.append(out)
            hs.append(h)
            cs.append(c)
            dir_caches.append(steps)
        layer_caches.append((drop, dir_caches))
        X = np.concatenate(outs, axis=-1)
        final_h.append(np.concatenate(hs, axis=-1))
        final_c.append(np.concatenate(cs, axis=-1))
    return X, final_h, final_c, (in_ids, mask, layer_caches)


def _encode_backward(params: ModelParams, d_out, d_final_h, d_final_c, cache):
    cfg = params.cfg
    H = cfg.hidden_dim
    in_ids, mask, layer_caches = cache
    B, T = in_ids.shape
    for l in range(cfg.num_layers - 1, -1, -1):
        drop, dir_caches = layer_caches[l]
        dX = None
        for d, steps in enumerate(dir_caches):
            sl = slice(d * H, (d + 1) * H)
            dh = d_final_h[l][:, sl].copy()
            dc = d_final_c[l][:, sl].copy()
            order = range(T - 1, -1, -1) if d == 0 else range(T)
            for t in order:
                dh = dh + d_out[:, t, sl]
                m = mask[:, t, None]
                dx, dh_prev, dc_prev = nm.lstm_cell_backward(m * dh, m * dc, steps[t])
                dh = dh_prev + (1 - m) * dh
                dc = dc_prev + (1 - m) * dc
                if dX is None:
                    dX = np.zeros((B, T, dx.shape[-1]), dtype=dx.dtype)
                dX[:, t] += dx
        d_out = nm.apply_mask(dX, drop)
    np.add.at(params.embedding.grad, in_ids, d_out)


def _bridge_forward(params: ModelParams, final_h, final_c):
    layers, caches = [], []
    for l, (Wh, bh, Wc, bc) in enumerate(params.bridge):
        zh, ch = nm.linear_forward(final_h[l], Wh, bh)
        zc, cc = nm.linear_forward(final_c[l], Wc, bc)
        h0, c0 = np.tanh(zh), np.tanh(zc)
        layers.append((h0, c0))
        caches.append((h0, c0, ch, cc))
    return DecoderState(layers), caches


def _bridge_backward(d_layers, caches):
    d_final_h, d_final_c = [], []
    for (dh, dc), (h0, c0, ch, cc) in zip(d_layers, caches):
        d_final_h.append(nm.linear_backward(dh * (1 - h0 * h0), ch))
        d_final_c.append(nm.linear_backward(dc * (1 - c0 * c0), cc))
    return d_final_h, d_final_c


# ---------------------------------------------------------------- decoder step


def _step_forward(params: ModelParams, y_prev, state: DecoderState, enc: EncoderStates, rng=None):
    """One decoder step; returns ``(new_state, p_gen, copy, logits, alpha, cache)``."""
    cfg = params.cfg
    ctx, alpha, scores, att_cache = nm.additive_attention_forward(
        state.top, enc.keys, enc.outputs, enc.mask, params.attn_W_s, params.attn_v
    )
    y_in = _in_vocab(y_prev, cfg.vocab_size)
    emb = params.embedding.value[y_in]
    x = np.concatenate([emb, ctx], axis=-1)
    new_layers, cell_caches, drops = [], [], []
    for l, cell in enumerate(params.decoder):
        drop = nm.dropout_mask(x.shape, cfg.dropout, rng, cfg.dtype) if l > 0 else None
        x = nm.apply_mask(x, drop)
        h, c, cc = nm.lstm_cell_forward(x, *state.layers[l], cell)
        new_layers.append((h, c))
        cell_caches.append(cc)
        drops.append(drop)
        x = h
    feat = np.concatenate([emb, x, ctx], axis=-1)
    feat_drop = nm.dropout_mask(feat.shape, cfg.dropout, rng, cfg.dtype)
    logits, lin_cache = nm.linear_forward(nm.apply_mask(feat, feat_drop), params.out_W, params.out_b)
    p_gen = nm.softmax(logits)
    copy = np.einsum("bt,btk->bk", alpha, enc.copy_map)
    cache = (y_in, att_cache, cell_caches, drops, feat_drop, lin_cache, p_gen, copy, enc.copy_map)
    return DecoderState(new_layers), p_gen, copy, logits, alpha, scores, cache


def _combine(logits, copy, vocab_size):
    """Copy-rule distribution: generation probs over V, attention mass for OOV source words."""
    log_z = np.log1p(copy.sum(axis=-1, keepdims=True))
    log_gen = nm.log_softmax(logits) - log_z
    with np.errstate(divide="ignore"):
        log_copy = np.log(copy) - log_z
    log_probs = np.concatenate([log_gen, log_copy], axis=-1)
    return np.exp(log_probs), log_probs


def _step_target_logprob(logits, copy, target, V):
    log_z = np.log1p(copy.sum(axis=-1))
    lsm = nm.log_softmax(logits)
    rows = np.arange(len(target))
    in_v = target < V
    out = np.empty(len(target), dtype=logits.dtype)
    out[in_v] = lsm[rows[in_v], target[in_v]]
    if np.any(~in_v):
        picked = copy[rows[~in_v], target[~in_v] - V]
        with np.errstate(divide="ignore"):
            out[~in_v] = np.log(picked)
    return out - log_z


def _step_backward(params: ModelParams, d_logp, target, d_next: DecoderState, cache):
    """Backprop ``sum_b d_logp[b] * log p(target[b])`` through one step.

    ``d_next`` holds gradients flowing into this step's output state.  Returns
    ``(d_prev_state, d_keys, d_values)``.
    """
    cfg = params.cfg
    V, E, H = cfg.vocab_size, cfg.embed_dim, cfg.hidden_dim
    y_in, att_cache, cell_caches, drops, feat_drop, lin_cache, p_gen, copy, S = cache
    B = len(target)
    rows = np.arange(B)
    in_v = target < V
    w = d_logp
    # generation branch: softmax CE gradient only when the target lives in V
    d_logits = -(w * in_v)[:, None] * p_gen
    d_logits[rows[in_v], target[in_v]] += w[in_v]
    # copy branch, via log Z and (for OOV targets) log copy[y]
    z = 1.0 + copy.sum(axis=-1)
    d_copy = np.repeat((-w / z)[:, None], copy.shape[1], axis=1)
    if np.any(~in_v):
        r = rows[~in_v]
        d_copy[r, target[r] - V] += w[r] / copy[r, target[r] - V]
    d_alpha_copy = np.einsum("bk,btk->bt", d_copy, S) if S.shape[-1] else None

    d_feat = nm.apply_mask(nm.linear_backward(d_logits, lin_cache), feat_drop)
    d_emb = d_feat[:, :E]
    d_top = d_feat[:, E : E + H]
    d_ctx = d_feat[:, E + H :]

    L = cfg.num_layers
    d_prev = [None] * L
    dx = None
    for l in range(L - 1, -1, -1):
        dh, dc = d_next.layers[l]
        if l == L - 1:
            dh = dh + d_top
        if dx is not None:
            dh = dh + dx
        dx, dh_prev, dc_prev = nm.lstm_cell_backward(dh, dc, cell_caches[l])
        dx = nm.apply_mask(dx, drops[l])
        d_prev[l] = (dh_prev, dc_prev)
    d_emb = d_emb + dx[:, :E]
    d_ctx = d_ctx + dx[:, E:]
    np.add.at(params.embedding.grad, y_in, d_emb)
    ds, d_keys, d_values = nm.additive_attention_backward(d_ctx, d_alpha_copy, att_cache)
    h_top, c_top = d_prev[L - 1]
    d_prev[L - 1] = (h_top + ds, c_top)
    return DecoderState(d_prev), d_keys, d_values


# ---------------------------------------------------------------- full forward/backward


def _encode_batch(params: ModelParams, src, src_mask, copy_map, n_oov, rng=None):
    outputs, final_h, final_c, enc_cache = _encode_forward(params, src, src_mask, rng)
    keys, key_cache = nm.linear_forward(outputs, params.attn_W_h, None)
    enc = EncoderStates(outputs, src_mask, final_h, final_c, keys, src, copy_map, n_oov)
    return enc, (enc_cache, key_cache)


class LossRecord:
    """Cached forward pass of :func:`loss_forward`; call :meth:`backward` once or more."""

    def __init__(self, params, batch, enc, enc_caches, bridge_caches, step_caches, weights):
        self.params = params
        self.batch = batch
        self.enc = enc
        self.enc_caches = enc_caches
        self.bridge_caches = bridge_caches
        self.step_caches = step_caches
        self.weights = weights

    def backward(self, upstream: float = 1.0) -> None:
        params, batch, enc = self.params, self.batch, self.enc
        cfg = params.cfg
        B = batch.src.shape[0]
        zeros = lambda: np.zeros((B, cfg.hidden_dim), dtype=cfg.dtype)  # noqa: E731
        d_state = DecoderState([(zeros(), zeros()) for _ in range(cfg.num_layers)])
        d_keys = np.zeros_like(enc.keys)
        d_values = np.zeros_like(enc.outputs)
        for t in range(len(self.step_caches) - 1, -1, -1):
            # loss = -sum_t w_t log p_t, so d loss / d log p_t = -w_t
            d_logp = -upstream * self.weights[:, t]
            d_state, dk, dv = _step_backward(params, d_logp, batch.tgt[:, t + 1], d_state, self.step_caches[t])
            d_keys += dk
            d_values += dv
        d_final_h, d_final_c = _bridge_backward(d_state.layers, self.bridge_caches)
        enc_cache, key_cache = self.enc_caches
        d_out = d_values + nm.linear_backward(d_keys, key_cache)
        _encode_backward(params, d_out, d_final_h, d_final_c, enc_cache)


def loss_forward(params: ModelParams, batch: Batch, rng=None, normalize: str = "tokens"):
    """Masked NLL of the batch targets under teacher forcing.

    ``normalize="tokens"`` divides by the number of predicted non-PAD tokens,
    ``"sum"`` returns the plain sum.  Dropout is active iff ``rng`` is given.
    Returns ``(loss, LossRecord)``.
    """
    cfg = params.cfg
    enc, enc_caches = _encode_batch(params, batch.src, batch.src_mask, batch.copy_map, batch.n_oov, rng)
    state, bridge_caches = _bridge_forward(params, enc.final_h, enc.final_c)
    denom = batch.num_tokens if normalize == "tokens" else 1.0
    weights = batch.tgt_mask / denom
    total = 0.0
    step_caches = []
    for t in range(batch.tgt.shape[1] - 1):
        state, p_gen, copy, logits, _, _, cache = _step_forward(params, batch.tgt[:, t], state, enc, rng)
        logp = _step_target_logprob(logits, copy, batch.tgt[:, t + 1], cfg.vocab_size)
        active = weights[:, t] > 0
        total -= float(np.sum(weights[active, t] * logp[active]))
        step_caches.append(cache)
    return total, LossRecord(params, batch, enc, enc_caches, bridge_caches, step_caches, weights)


class Seq2Seq:
    """Stateful wrapper: ``forward`` records, ``backward`` replays the record."""

    def __init__(self, params: ModelParams):
        self.params = params
        self._record: LossRecord | None = None

    def forward(self, batch: Batch, rng=None) -> float:
        loss, self._record = loss_forward(self.params, batch, rng)
        return loss

    def backward(self, upstream: float = 1.0) -> None:
        if self._record is None:
            raise nm.StateError("backward called before forward")
        self._record.backward(upstream)


# ---------------------------------------------------------------- public single-sentence API


def _as_source(source_ids, cfg: ModelConfig):
    src = np.asarray(source_ids, dtype=np.int64)
    if src.ndim == 1:
        src = src[None, :]
    if src.shape[1] == 0:
        raise ValueError("cannot encode an empty source sequence")
    if src.shape[1] > cfg.max_source_len:
        raise ValueError(f"source length {src.shape[1]} exceeds max_source_len {cfg.max_source_len}")
    return src


def encode(source_ids, params: ModelParams) -> EncoderStates:
    """Run the encoder on one sentence of extended ids (no dropout)."""
    cfg = params.cfg
    src = _as_source(source_ids, cfg)
    mask = np.ones(src.shape, dtype=cfg.dtype)
    S, n_oov = _copy_map(src, cfg.vocab_size, cfg.dtype)
    return _encode_batch(params, src, mask, S, n_oov)[0]


def attend(s_prev: np.ndarray, enc: EncoderStates, params: ModelParams) -> AttentionResult:
    s = np.atleast_2d(s_prev)
    ctx, alpha, e, _ = nm.additive_attention_forward(
        s, enc.keys, enc.outputs, enc.mask, params.attn_W_s, params.attn_v
    )
    if np.ndim(s_prev) == 1:
        return AttentionResult(ctx[0], alpha[0], e[0])
    return AttentionResult(ctx, alpha, e)


def bridge(enc: EncoderStates, params: ModelParams) -> DecoderState:
    return _bridge_forward(params, enc.final_h, enc.final_c)[0]


def decode_step(y_prev, state: DecoderState, enc: EncoderStates, params: ModelParams):
    """Advance the decoder one token; returns ``(DecoderState, OutputDistribution)``.

    ``y_prev`` is an extended id (or one per batch row).
    """
    V = params.cfg.vocab_size
    y = np.atleast_1d(np.asarray(y_prev, dtype=np.int64))
    if y.shape[0] != state.top.shape[0]:
        raise ValueError("y_prev batch size does not match decoder state")
    if np.any(y < 0) or np.any(y >= V + enc.n_oov):
        raise ValueError(f"invalid extended id in {y.tolist()}")
    new_state, _, copy, logits, _, _, _ = _step_forward(params, y, state, enc)
    probs, log_probs = _combine(logits, copy, V)
    return new_state, OutputDistribution(probs, log_probs, V)


def start(source_ids, params: ModelParams) -> tuple[EncoderStates, DecoderState]:
    enc = encode(source_ids, params)
    return enc, bridge(enc, params)


def sequence_logprob(source_ids, target_ids, params: ModelParams) -> float:
    """``sum_t log p(y_t | y_<t, X)`` under teacher forcing, dropout off.

    ``target_ids`` are extended ids framed by BOS ... EOS.  Returns ``-inf``
    (with a warning) if some target token has zero probability.
    """
    tgt = list(target_ids)
    if len(tgt) < 2 or tgt[0] != BOS_ID or tgt[-1] != EOS_ID:
        raise ValueError("target must begin with BOS and end with EOS")
    enc, state = start(source_ids, params)
    V = params.cfg.vocab_size
    total = 0.0
    for prev, nxt in zip(tgt[:-1], tgt[1:]):
        if nxt >= V + enc.n_oov[0]:
            raise ValueError(f"target id {nxt} outside the extended vocabulary")
        state, _, copy, logits, _, _, _ = _step_forward(params, np.array([prev]), state, enc)
        total += float(_step_target_logprob(logits, copy, np.array([nxt]), V)[0])
    if not np.isfinite(total):
        log.warning("target has zero probability under the model; returning -inf")
        return float("-inf")
    return total
