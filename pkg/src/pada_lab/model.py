"""From-scratch encoder-decoder with a convolutional classification head.

Pre-norm transformer blocks, sinusoidal (non-trainable) positions, and a
token embedding matrix shared between the encoder input, decoder input,
and the generation softmax. All gradients are exact reverse-mode
derivations; no autodiff. Parameters live in a flat name->array dict of
float32 tensors; forward and backward computation upcasts to float64, so
checkpoints round-trip bitwise while gradient checks stay tight.

Shapes: B batch, T sequence length, D d_model, H heads, V vocab size,
C classes, F conv filters.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import NamedTuple

import numpy as np

from .corpus import BOS, PAD

CHECKPOINT_MAGIC = b"PADALAB-CKPT-v1\n"


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_classes: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ffn: int = 128
    max_input_len: int = 128
    max_output_len: int = 40
    conv_filters: int = 32
    conv_width: int = 9
    dropout: float = 0.0
    use_positional: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.conv_width < 1 or self.conv_width % 2 == 0:
            raise ValueError("conv_width must be odd and positive")
        if self.vocab_size < 6:
            raise ValueError("vocab_size must cover the special tokens")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.max_input_len < 1 or self.max_output_len < 1:
            raise ValueError("sequence length caps must be positive")


class ForwardTrace(NamedTuple):
    """Loss plus every cached activation the backward pass needs."""

    task: str
    loss: float
    caches: tuple


def init_params(cfg: ModelConfig) -> dict[str, np.ndarray]:
    """Fresh float32 parameters, deterministic given cfg.seed."""
    rng = np.random.default_rng(cfg.seed)
    D, F, V = cfg.d_model, cfg.d_ffn, cfg.vocab_size

    def mat(shape, fan_in, fan_out):
        lim = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-lim, lim, size=shape).astype(np.float32)

    def ones(*shape):
        return np.ones(shape, dtype=np.float32)

    def zeros(*shape):
        return np.zeros(shape, dtype=np.float32)

    p: dict[str, np.ndarray] = {}
    p["embed"] = rng.normal(0.0, 0.02, size=(V, D)).astype(np.float32)
    for i in range(cfg.n_layers):
        pre = f"enc{i}."
        p[pre + "ln1.g"], p[pre + "ln1.b"] = ones(D), zeros(D)
        for nm in ("wq", "wk", "wv", "wo"):
            p[pre + "attn." + nm] = mat((D, D), D, D)
        p[pre + "ln2.g"], p[pre + "ln2.b"] = ones(D), zeros(D)
        p[pre + "ffn.w1"], p[pre + "ffn.b1"] = mat((D, F), D, F), zeros(F)
        p[pre + "ffn.w2"], p[pre + "ffn.b2"] = mat((F, D), F, D), zeros(D)
    p["enc.lnf.g"], p["enc.lnf.b"] = ones(D), zeros(D)
    for i in range(cfg.n_layers):
        pre = f"dec{i}."
        p[pre + "ln1.g"], p[pre + "ln1.b"] = ones(D), zeros(D)
        for nm in ("wq", "wk", "wv", "wo"):
            p[pre + "self." + nm] = mat((D, D), D, D)
        p[pre + "ln2.g"], p[pre + "ln2.b"] = ones(D), zeros(D)
        for nm in ("wq", "wk", "wv", "wo"):
            p[pre + "cross." + nm] = mat((D, D), D, D)
        p[pre + "ln3.g"], p[pre + "ln3.b"] = ones(D), zeros(D)
        p[pre + "ffn.w1"], p[pre + "ffn.b1"] = mat((D, F), D, F), zeros(F)
        p[pre + "ffn.w2"], p[pre + "ffn.b2"] = mat((F, D), F, D), zeros(D)
    p["dec.lnf.g"], p["dec.lnf.b"] = ones(D), zeros(D)
    p["cls.conv.w"] = mat((cfg.conv_filters, cfg.conv_width, D), cfg.conv_width * D, cfg.conv_filters)
    p["cls.conv.b"] = zeros(cfg.conv_filters)
    p["cls.proj.w"] = mat((cfg.n_classes, cfg.conv_filters), cfg.conv_filters, cfg.n_classes)
    p["cls.proj.b"] = zeros(cfg.n_classes)
    return p


def _f64(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: v.astype(np.float64, copy=False) for k, v in params.items()}


@lru_cache(maxsize=32)
def _pos_table(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(dim, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, (2.0 * (i // 2)) / dim)
    pe = np.zeros((length, dim))
    pe[:, 0::2] = np.sin(angle[:, 0::2])
    pe[:, 1::2] = np.cos(angle[:, 1::2])
    pe.setflags(write=False)
    return pe


def pad_batch(id_seqs, pad_id: int = PAD):
    """Stack variable-length id sequences into [B,T] ids and a 1/0 mask."""
    if not id_seqs:
        raise ValueError("empty batch")
    if any(len(s) == 0 for s in id_seqs):
        raise ValueError("empty sequence in batch")
    width = max(len(s) for s in id_seqs)
    ids = np.full((len(id_seqs), width), pad_id, dtype=np.int64)
    mask = np.zeros((len(id_seqs), width), dtype=np.float64)
    for r, s in enumerate(id_seqs):
        ids[r, : len(s)] = s
        mask[r, : len(s)] = 1.0
    return ids, mask


def _logsumexp(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    return m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True))


# --- primitives -------------------------------------------------------------

_LN_EPS = 1e-5


def _ln_fwd(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv, g)


def _ln_bwd(dout, cache):
    xhat, inv, g = cache
    n = xhat.shape[-1]
    axes = tuple(range(xhat.ndim - 1))
    dg = (dout * xhat).sum(axis=axes)
    db = dout.sum(axis=axes)
    dxhat = dout * g
    dx = (inv / n) * (
        n * dxhat
        - dxhat.sum(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
    )
    return dx, dg, db


def _split_heads(x, n_heads):
    b, t, d = x.shape
    return x.reshape(b, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


_MASK_NEG = -1e9


def _attn_fwd(q_in, kv_in, wq, wk, wv, wo, n_heads, key_mask, causal):
    # q_in [B,Tq,D], kv_in [B,Tk,D], key_mask [B,Tk] with 1 = attend
    dh = q_in.shape[-1] // n_heads
    tq, tk = q_in.shape[1], kv_in.shape[1]
    q = _split_heads(q_in @ wq, n_heads)
    k = _split_heads(kv_in @ wk, n_heads)
    v = _split_heads(kv_in @ wv, n_heads)
    scores = q @ k.transpose(0, 1, 3, 2) / math.sqrt(dh)
    scores = scores + (1.0 - key_mask)[:, None, None, :] * _MASK_NEG
    if causal:
        scores = scores + np.triu(np.ones((tq, tk)), k=1)[None, None] * _MASK_NEG
    scores = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    attn = e / e.sum(axis=-1, keepdims=True)
    merged = _merge_heads(attn @ v)
    out = merged @ wo
    return out, (q_in, kv_in, q, k, v, attn, merged, wq, wk, wv, wo, n_heads)


def _attn_bwd(dout, cache):
    q_in, kv_in, q, k, v, attn, merged, wq, wk, wv, wo, n_heads = cache
    d = q_in.shape[-1]
    dh = d // n_heads
    dwo = merged.reshape(-1, d).T @ dout.reshape(-1, d)
    dmerged = dout @ wo.T
    dctx = _split_heads(dmerged, n_heads)
    dattn = dctx @ v.transpose(0, 1, 3, 2)
    dv = attn.transpose(0, 1, 3, 2) @ dctx
    dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
    dscores = dscores / math.sqrt(dh)
    dq = dscores @ k
    dk = dscores.transpose(0, 1, 3, 2) @ q
    dq_m, dk_m, dv_m = _merge_heads(dq), _merge_heads(dk), _merge_heads(dv)
    dwq = q_in.reshape(-1, d).T @ dq_m.reshape(-1, d)
    dwk = kv_in.reshape(-1, d).T @ dk_m.reshape(-1, d)
    dwv = kv_in.reshape(-1, d).T @ dv_m.reshape(-1, d)
    dq_in = dq_m @ wq.T
    dkv_in = dk_m @ wk.T + dv_m @ wv.T
    return dq_in, dkv_in, dwq, dwk, dwv, dwo


def _ffn_fwd(x, w1, b1, w2, b2):
    h = x @ w1 + b1
    r = np.maximum(h, 0.0)
    return r @ w2 + b2, (x, h, r, w1, w2)


def _ffn_bwd(dout, cache):
    x, h, r, w1, w2 = cache
    din, dff = x.shape[-1], h.shape[-1]
    lead = tuple(range(dout.ndim - 1))
    db2 = dout.sum(axis=lead)
    dw2 = r.reshape(-1, dff).T @ dout.reshape(-1, x.shape[-1])
    dr = dout @ w2.T
    dh = dr * (h > 0)
    db1 = dh.sum(axis=lead)
    dw1 = x.reshape(-1, din).T @ dh.reshape(-1, dff)
    dx = dh @ w1.T
    return dx, dw1, db1, dw2, db2


def _drop_fwd(x, p, rng):
    if p <= 0.0 or rng is None:
        return x, None
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * keep, keep


def _drop_bwd(dout, keep):
    return dout if keep is None else dout * keep


def _acc(grads: dict, name: str, val: np.ndarray) -> None:
    if name in grads:
        grads[name] = grads[name] + val
    else:
        grads[name] = val


# --- encoder / decoder ------------------------------------------------------


def _check_ids(cfg: ModelConfig, ids: np.ndarray, mask: np.ndarray, limit: int, what: str):
    if ids.ndim != 2:
        raise ValueError(f"{what} ids must be 2-d")
    if ids.shape[1] > limit:
        raise ValueError(f"{what} length {ids.shape[1]} exceeds cap {limit}")
    if ids.min(initial=0) < 0 or ids.max(initial=0) >= cfg.vocab_size:
        bad = ids[(ids < 0) | (ids >= cfg.vocab_size)][0]
        raise ValueError(f"token id {int(bad)} outside vocabulary of size {cfg.vocab_size}")
    if (mask.sum(axis=1) == 0).any():
        raise ValueError(f"empty sequence: a {what} row is all padding")


def _embed_fwd(cfg, P, ids):
    x = P["embed"][ids] * math.sqrt(cfg.d_model)
    if cfg.use_positional:
        x = x + _pos_table(ids.shape[1], cfg.d_model)
    return x


def _encoder_fwd(cfg, P, ids, mask, rng=None):
    x = _embed_fwd(cfg, P, ids)
    layer_caches = []
    for i in range(cfg.n_layers):
        pre = f"enc{i}."
        h, c1 = _ln_fwd(x, P[pre + "ln1.g"], P[pre + "ln1.b"])
        a, ca = _attn_fwd(
            h, h, P[pre + "attn.wq"], P[pre + "attn.wk"], P[pre + "attn.wv"],
            P[pre + "attn.wo"], cfg.n_heads, mask, causal=False,
        )
        a, da_keep = _drop_fwd(a, cfg.dropout, rng)
        x = x + a
        h, c2 = _ln_fwd(x, P[pre + "ln2.g"], P[pre + "ln2.b"])
        f, cf = _ffn_fwd(h, P[pre + "ffn.w1"], P[pre + "ffn.b1"], P[pre + "ffn.w2"], P[pre + "ffn.b2"])
        f, df_keep = _drop_fwd(f, cfg.dropout, rng)
        x = x + f
        layer_caches.append((c1, ca, da_keep, c2, cf, df_keep))
    out, clf = _ln_fwd(x, P["enc.lnf.g"], P["enc.lnf.b"])
    return out, (ids, layer_caches, clf)


def _encoder_bwd(cfg, dout, cache, grads):
    ids, layer_caches, clf = cache
    dx, dg, db = _ln_bwd(dout, clf)
    _acc(grads, "enc.lnf.g", dg)
    _acc(grads, "enc.lnf.b", db)
    for i in reversed(range(cfg.n_layers)):
        pre = f"enc{i}."
        c1, ca, da_keep, c2, cf, df_keep = layer_caches[i]
        df = _drop_bwd(dx, df_keep)
        dh, dw1, db1, dw2, db2 = _ffn_bwd(df, cf)
        _acc(grads, pre + "ffn.w1", dw1)
        _acc(grads, pre + "ffn.b1", db1)
        _acc(grads, pre + "ffn.w2", dw2)
        _acc(grads, pre + "ffn.b2", db2)
        dxm, dg2, db2n = _ln_bwd(dh, c2)
        _acc(grads, pre + "ln2.g", dg2)
        _acc(grads, pre + "ln2.b", db2n)
        dx = dx + dxm
        da = _drop_bwd(dx, da_keep)
        dq_in, dkv_in, dwq, dwk, dwv, dwo = _attn_bwd(da, ca)
        _acc(grads, pre + "attn.wq", dwq)
        _acc(grads, pre + "attn.wk", dwk)
        _acc(grads, pre + "attn.wv", dwv)
        _acc(grads, pre + "attn.wo", dwo)
        dh1, dg1, db1n = _ln_bwd(dq_in + dkv_in, c1)
        _acc(grads, pre + "ln1.g", dg1)
        _acc(grads, pre + "ln1.b", db1n)
        dx = dx + dh1
    if "embed" not in grads:
        grads["embed"] = np.zeros((cfg.vocab_size, cfg.d_model))
    np.add.at(grads["embed"], ids, dx * math.sqrt(cfg.d_model))


def _decoder_fwd(cfg, P, ids, mask, enc_states, enc_mask, rng=None):
    x = _embed_fwd(cfg, P, ids)
    layer_caches = []
    for i in range(cfg.n_layers):
        pre = f"dec{i}."
        h, c1 = _ln_fwd(x, P[pre + "ln1.g"], P[pre + "ln1.b"])
        a, cs = _attn_fwd(
            h, h, P[pre + "self.wq"], P[pre + "self.wk"], P[pre + "self.wv"],
            P[pre + "self.wo"], cfg.n_heads, mask, causal=True,
        )
        a, ds_keep = _drop_fwd(a, cfg.dropout, rng)
        x = x + a
        h, c2 = _ln_fwd(x, P[pre + "ln2.g"], P[pre + "ln2.b"])
        a2, cc = _attn_fwd(
            h, enc_states, P[pre + "cross.wq"], P[pre + "cross.wk"], P[pre + "cross.wv"],
            P[pre + "cross.wo"], cfg.n_heads, enc_mask, causal=False,
        )
        a2, dc_keep = _drop_fwd(a2, cfg.dropout, rng)
        x = x + a2
        h, c3 = _ln_fwd(x, P[pre + "ln3.g"], P[pre + "ln3.b"])
        f, cf = _ffn_fwd(h, P[pre + "ffn.w1"], P[pre + "ffn.b1"], P[pre + "ffn.w2"], P[pre + "ffn.b2"])
        f, df_keep = _drop_fwd(f, cfg.dropout, rng)
        x = x + f
        layer_caches.append((c1, cs, ds_keep, c2, cc, dc_keep, c3, cf, df_keep))
    out, clf = _ln_fwd(x, P["dec.lnf.g"], P["dec.lnf.b"])
    return out, (ids, layer_caches, clf)


def _decoder_bwd(cfg, dout, cache, grads):
    """Returns the gradient wrt the encoder states (from cross-attention)."""
    ids, layer_caches, clf = cache
    dx, dg, db = _ln_bwd(dout, clf)
    _acc(grads, "dec.lnf.g", dg)
    _acc(grads, "dec.lnf.b", db)
    denc = None
    for i in reversed(range(cfg.n_layers)):
        pre = f"dec{i}."
        c1, cs, ds_keep, c2, cc, dc_keep, c3, cf, df_keep = layer_caches[i]
        df = _drop_bwd(dx, df_keep)
        dh, dw1, db1, dw2, db2 = _ffn_bwd(df, cf)
        _acc(grads, pre + "ffn.w1", dw1)
        _acc(grads, pre + "ffn.b1", db1)
        _acc(grads, pre + "ffn.w2", dw2)
        _acc(grads, pre + "ffn.b2", db2)
        dxm, dg3, db3 = _ln_bwd(dh, c3)
        _acc(grads, pre + "ln3.g", dg3)
        _acc(grads, pre + "ln3.b", db3)
        dx = dx + dxm
        da2 = _drop_bwd(dx, dc_keep)
        dq_in, dkv_enc, dwq, dwk, dwv, dwo = _attn_bwd(da2, cc)
        for nm, g in (("wq", dwq), ("wk", dwk), ("wv", dwv), ("wo", dwo)):
            _acc(grads, pre + "cross." + nm, g)
        denc = dkv_enc if denc is None else denc + dkv_enc
        dh2, dg2, db2n = _ln_bwd(dq_in, c2)
        _acc(grads, pre + "ln2.g", dg2)
        _acc(grads, pre + "ln2.b", db2n)
        dx = dx + dh2
        da = _drop_bwd(dx, ds_keep)
        dq_s, dkv_s, dwq, dwk, dwv, dwo = _attn_bwd(da, cs)
        for nm, g in (("wq", dwq), ("wk", dwk), ("wv", dwv), ("wo", dwo)):
            _acc(grads, pre + "self." + nm, g)
        dh1, dg1, db1n = _ln_bwd(dq_s + dkv_s, c1)
        _acc(grads, pre + "ln1.g", dg1)
        _acc(grads, pre + "ln1.b", db1n)
        dx = dx + dh1
    if "embed" not in grads:
        grads["embed"] = np.zeros((cfg.vocab_size, cfg.d_model))
    np.add.at(grads["embed"], ids, dx * math.sqrt(cfg.d_model))
    return denc if denc is not None else np.zeros(1)


# --- classification head ----------------------------------------------------


def _classify_fwd(cfg, P, states, mask):
    x = states * mask[..., None]
    w, b = P["cls.conv.w"], P["cls.conv.b"]  # [F,W,D], [F]
    n_f, width, _ = w.shape
    pad = (width - 1) // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (0, 0)))
    n_b, n_t = mask.shape
    conv = np.broadcast_to(b, (n_b, n_t, n_f)).copy()
    for k in range(width):
        conv += xp[:, k : k + n_t, :] @ w[:, k, :].T
    visible = np.where(mask[..., None] > 0, conv, -np.inf)
    idx = visible.argmax(axis=1)  # [B,F], first max wins ties
    b_idx = np.arange(n_b)[:, None]
    f_idx = np.arange(n_f)[None, :]
    pooled = conv[b_idx, idx, f_idx]
    logits = pooled @ P["cls.proj.w"].T + P["cls.proj.b"]
    logp = logits - _logsumexp(logits)
    return logp, (x, xp, conv, mask, idx, pooled, w, P["cls.proj.w"])


def _classify_bwd(dlogits, cache, grads):
    x, xp, conv, mask, idx, pooled, w, pw = cache
    n_b, n_t, _ = x.shape
    n_f, width, _ = w.shape
    _acc(grads, "cls.proj.w", dlogits.T @ pooled)
    _acc(grads, "cls.proj.b", dlogits.sum(axis=0))
    dpooled = dlogits @ pw
    dconv = np.zeros_like(conv)
    b_idx = np.arange(n_b)[:, None]
    f_idx = np.arange(n_f)[None, :]
    dconv[b_idx, idx, f_idx] = dpooled
    _acc(grads, "cls.conv.b", dconv.sum(axis=(0, 1)))
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    for k in range(width):
        dw[:, k, :] = np.einsum("btf,btd->fd", dconv, xp[:, k : k + n_t, :])
        dxp[:, k : k + n_t, :] += dconv @ w[:, k, :]
    _acc(grads, "cls.conv.w", dw)
    pad = (width - 1) // 2
    return dxp[:, pad : pad + n_t, :] * mask[..., None]


# --- public ops -------------------------------------------------------------


def encode(cfg: ModelConfig, params: dict, ids, mask=None) -> np.ndarray:
    """Contextual encoder states [B,T,D] for padded id batches."""
    ids = np.asarray(ids, dtype=np.int64)
    if mask is None:
        mask = (ids != PAD).astype(np.float64)
    else:
        mask = np.asarray(mask, dtype=np.float64)
    _check_ids(cfg, ids, mask, cfg.max_input_len, "input")
    states, _ = _encoder_fwd(cfg, _f64(params), ids, mask)
    return states


def classify(cfg: ModelConfig, params: dict, states, mask) -> np.ndarray:
    """Class log-probabilities [B,C] from encoder states.

    1D convolution over the unpadded positions, max-pool per filter,
    affine map, log-softmax.
    """
    mask = np.asarray(mask, dtype=np.float64)
    if (mask.sum(axis=1) == 0).any():
        raise ValueError("classification needs at least one unpadded position")
    logp, _ = _classify_fwd(cfg, _f64(params), np.asarray(states, dtype=np.float64), mask)
    return logp


def classify_tokens(cfg: ModelConfig, params: dict, id_seqs) -> np.ndarray:
    """encode + classify for a list of id sequences; log-probs [B,C]."""
    ids, mask = pad_batch(id_seqs)
    P = _f64(params)
    _check_ids(cfg, ids, mask, cfg.max_input_len, "input")
    states, _ = _encoder_fwd(cfg, P, ids, mask)
    logp, _ = _classify_fwd(cfg, P, states, mask)
    return logp


def decode_step(cfg: ModelConfig, params: dict, enc_states, enc_mask, prefixes) -> np.ndarray:
    """Next-token log-probabilities [B,V] given BOS-started prefixes.

    Prefixes in a batch must share one length; generation is resumed by
    re-running the decoder (no incremental cache at this scale).
    """
    prefix = np.asarray(prefixes, dtype=np.int64)
    if prefix.ndim != 2:
        raise ValueError("prefixes must be [B,T]")
    if (prefix[:, 0] != BOS).any():
        raise ValueError("decoder prefixes must start with BOS")
    if prefix.shape[1] - 1 >= cfg.max_output_len:
        raise ValueError(f"prefix exceeds max_output_len={cfg.max_output_len}")
    if prefix.min() < 0 or prefix.max() >= cfg.vocab_size:
        raise ValueError("prefix token id outside vocabulary")
    P = _f64(params)
    mask = np.ones(prefix.shape, dtype=np.float64)
    states, _ = _decoder_fwd(
        cfg, P, prefix, mask, np.asarray(enc_states, dtype=np.float64),
        np.asarray(enc_mask, dtype=np.float64),
    )
    logits = states[:, -1, :] @ P["embed"].T
    return logits - _logsumexp(logits)


def _forward(cfg: ModelConfig, P: dict, batch, rng=None) -> ForwardTrace:
    task = batch[0].task
    if any(inst.task != task for inst in batch):
        raise ValueError("batch mixes generative and discriminative instances")
    ids, mask = pad_batch([inst.input_ids for inst in batch])
    _check_ids(cfg, ids, mask, cfg.max_input_len, "input")
    enc_states, enc_cache = _encoder_fwd(cfg, P, ids, mask, rng)

    if task == "disc":
        targets = np.asarray([inst.target_class for inst in batch], dtype=np.int64)
        if targets.min() < 0 or targets.max() >= cfg.n_classes:
            raise ValueError("class target outside declared range")
        logp, cls_cache = _classify_fwd(cfg, P, enc_states, mask)
        loss = -float(logp[np.arange(len(batch)), targets].mean())
        return ForwardTrace(task, loss, (ids, mask, enc_cache, cls_cache, logp, targets))

    if task != "gen":
        raise ValueError(f"unknown task {task!r}")
    target, tmask = pad_batch([inst.target_ids for inst in batch])
    if target.shape[1] > cfg.max_output_len:
        raise ValueError(f"target length {target.shape[1]} exceeds cap {cfg.max_output_len}")
    dec_in = np.concatenate(
        [np.full((target.shape[0], 1), BOS, dtype=np.int64), target[:, :-1]], axis=1
    )
    dec_mask = (dec_in != PAD).astype(np.float64)
    dec_states, dec_cache = _decoder_fwd(cfg, P, dec_in, dec_mask, enc_states, mask, rng)
    logits = dec_states @ P["embed"].T
    logp = logits - _logsumexp(logits)
    n_tok = tmask.sum()
    b_idx = np.arange(target.shape[0])[:, None]
    t_idx = np.arange(target.shape[1])[None, :]
    nll = -(logp[b_idx, t_idx, target] * tmask).sum() / n_tok
    return ForwardTrace(
        task, float(nll),
        (ids, mask, enc_cache, dec_cache, dec_states, logp, target, tmask, n_tok),
    )


def _backward(cfg: ModelConfig, P: dict, trace: ForwardTrace) -> dict[str, np.ndarray]:
    grads: dict[str, np.ndarray] = {}
    if trace.task == "disc":
        ids, mask, enc_cache, cls_cache, logp, targets = trace.caches
        n = len(targets)
        dlogits = np.exp(logp)
        dlogits[np.arange(n), targets] -= 1.0
        dlogits /= n
        dstates = _classify_bwd(dlogits, cls_cache, grads)
        _encoder_bwd(cfg, dstates, enc_cache, grads)
    else:
        ids, mask, enc_cache, dec_cache, dec_states, logp, target, tmask, n_tok = trace.caches
        b_idx = np.arange(target.shape[0])[:, None]
        t_idx = np.arange(target.shape[1])[None, :]
        dlogits = np.exp(logp)
        dlogits[b_idx, t_idx, target] -= 1.0
        dlogits *= tmask[..., None] / n_tok
        grads["embed"] = np.einsum("btv,btd->vd", dlogits, dec_states)
        ddec = dlogits @ P["embed"]
        denc = _decoder_bwd(cfg, ddec, dec_cache, grads)
        _encoder_bwd(cfg, denc, enc_cache, grads)
    for k, v in P.items():
        if k not in grads:
            grads[k] = np.zeros_like(v)
    return grads


def loss_and_grads(cfg: ModelConfig, params: dict, batch, rng=None):
    """Mean loss over one task-homogeneous batch plus exact gradients
    for every parameter tensor (zeros for tensors the task never touches).

    Generative batches use teacher forcing with PAD positions excluded
    from the token-level mean; discriminative batches use mean class NLL.
    """
    if not batch:
        raise ValueError("empty batch")
    P = _f64(params)
    trace = _forward(cfg, P, batch, rng)
    grads = _backward(cfg, P, trace)
    return trace.loss, grads


# --- checkpoints ------------------------------------------------------------


def save_checkpoint(path, cfg: ModelConfig, params: dict[str, np.ndarray]) -> None:
    """Single binary file: magic, JSON config header, then named
    row-major float32 tensor payloads."""
    header = json.dumps(asdict(cfg), sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(struct.pack("<I", len(params)))
        for name, arr in params.items():
            data = np.ascontiguousarray(arr, dtype="<f4")
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.tobytes(order="C"))


def load_checkpoint(path):
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a model checkpoint (bad magic): {path}")
        (hlen,) = struct.unpack("<I", f.read(4))
        cfg = ModelConfig(**json.loads(f.read(hlen).decode("utf-8")))
        (count,) = struct.unpack("<I", f.read(4))
        params: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
            n_items = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(f.read(4 * n_items), dtype="<f4").reshape(shape)
            params[name] = arr.astype(np.float32).copy()
    return cfg, params
