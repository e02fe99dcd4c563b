"""Transformer building blocks over :mod:`pktseer.nn.tensor`.

Shapes follow ``[..., n, d_model]``; a leading batch axis is optional
everywhere. Attention masks are boolean and True where attending is allowed.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 512
    d_model: int = 64
    n_heads: int = 4
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    d_ff: int = 256
    max_seq_len: int = 192
    dropout_prob: float = 0.1

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.max_seq_len < 2:
            raise ValueError("max_seq_len must be >= 2")
        if min(self.vocab_size, self.d_model, self.n_heads, self.d_ff) < 1:
            raise ValueError("sizes must be positive")
        if self.n_enc_layers < 0 or self.n_dec_layers < 0:
            raise ValueError("layer counts must be >= 0")
        if not 0.0 <= self.dropout_prob < 1.0:
            raise ValueError("dropout_prob must be in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


class ModelParams:
    """Ordered name -> Tensor store plus the config it was built for."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor] | None = None):
        self.config = config
        self.tensors: dict[str, Tensor] = {} if tensors is None else dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self.tensors:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.ascontiguousarray(data, dtype=T.default_dtype()), requires_grad=True)
        self.tensors[name] = t
        return t

    def scope(self, prefix: str) -> "ParamScope":
        return ParamScope(self, prefix)

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.tensors.items()}

    def load_state(self, state: dict[str, np.ndarray]):
        for k, v in state.items():
            self.tensors[k].data = v.copy()

    def n_parameters(self) -> int:
        return sum(t.data.size for t in self.tensors.values())


class ParamScope:
    def __init__(self, params: ModelParams, prefix: str):
        self.params = params
        self.prefix = prefix

    def __getitem__(self, name: str) -> Tensor:
        return self.params[f"{self.prefix}.{name}"]

    def scope(self, sub: str) -> "ParamScope":
        return ParamScope(self.params, f"{self.prefix}.{sub}")


# ------------------------------------------------------------------ init


def _normal(rng, *shape):
    return rng.normal(0.0, INIT_STD, size=shape)


def init_attention(params: ModelParams, prefix: str, d: int, rng):
    # no key bias: it shifts every score in a row equally, so its gradient is 0
    for name in ("q", "k", "v", "o"):
        params.add(f"{prefix}.W{name}", _normal(rng, d, d))
        if name != "k":
            params.add(f"{prefix}.b{name}", np.zeros(d))


def init_norm(params: ModelParams, prefix: str, d: int):
    params.add(f"{prefix}.g", np.ones(d))
    params.add(f"{prefix}.b", np.zeros(d))


def init_block(params: ModelParams, prefix: str, cfg: ModelConfig, rng, cross: bool = False):
    d = cfg.d_model
    init_norm(params, f"{prefix}.ln1", d)
    init_attention(params, f"{prefix}.attn", d, rng)
    if cross:
        init_norm(params, f"{prefix}.lnx", d)
        init_attention(params, f"{prefix}.xattn", d, rng)
    init_norm(params, f"{prefix}.ln2", d)
    params.add(f"{prefix}.ffn.W1", _normal(rng, d, cfg.d_ff))
    params.add(f"{prefix}.ffn.b1", np.zeros(cfg.d_ff))
    params.add(f"{prefix}.ffn.W2", _normal(rng, cfg.d_ff, d))
    params.add(f"{prefix}.ffn.b2", np.zeros(d))


def init_stack(params: ModelParams, cfg: ModelConfig, rng, encoder=True, decoder=True):
    """Token table, position tables and the encoder/decoder block stacks."""
    params.add("tok_emb", _normal(rng, cfg.vocab_size, cfg.d_model))
    if encoder:
        params.add("enc.pos", _normal(rng, cfg.max_seq_len, cfg.d_model))
        for i in range(cfg.n_enc_layers):
            init_block(params, f"enc.{i}", cfg, rng)
        init_norm(params, "enc.ln_f", cfg.d_model)
    if decoder:
        params.add("dec.pos", _normal(rng, cfg.max_seq_len, cfg.d_model))
        for i in range(cfg.n_dec_layers):
            init_block(params, f"dec.{i}", cfg, rng, cross=True)
        init_norm(params, "dec.ln_f", cfg.d_model)


# ------------------------------------------------------------- attention


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def key_mask_4d(key_mask):
    """[B, m] keep-mask -> [B, 1, 1, m] so it broadcasts over heads and queries."""
    if key_mask is None:
        return None
    km = np.asarray(key_mask, dtype=bool)
    return km[:, None, None, :] if km.ndim == 2 else km[None, None, :]


def combine_masks(*masks):
    out = None
    for m in masks:
        if m is None:
            continue
        out = m if out is None else np.logical_and(out, m)
    return out


def attention_weights(Q: Tensor, K: Tensor, mask=None) -> Tensor:
    d_k = Q.shape[-1]
    if K.shape[-1] != d_k:
        raise ValueError(f"query dim {d_k} != key dim {K.shape[-1]}")
    scores = T.scale(T.matmul(Q, T.swap_last(K)), 1.0 / math.sqrt(d_k))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        try:
            np.broadcast_shapes(mask.shape, scores.shape)
        except ValueError:
            raise ValueError(f"mask shape {mask.shape} incompatible with scores {scores.shape}") from None
    return T.masked_softmax(scores, mask)


def attention(Q: Tensor, K: Tensor, V: Tensor, mask=None) -> Tensor:
    """softmax(Q K^T / sqrt(d_k) + mask_bias) V."""
    Q, K, V = T.as_tensor(Q), T.as_tensor(K), T.as_tensor(V)
    if K.shape[-2] != V.shape[-2]:
        raise ValueError(f"{K.shape[-2]} keys but {V.shape[-2]} values")
    return T.matmul(attention_weights(Q, K, mask), V)


def _split_heads(x: Tensor, h: int) -> Tensor:
    *lead, n, d = x.shape
    x = T.reshape(x, (*lead, n, h, d // h))
    k = len(lead)
    return T.permute(x, (*range(k), k + 1, k, k + 2))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dk = x.shape
    k = len(lead)
    x = T.permute(x, (*range(k), k + 1, k, k + 2))
    return T.reshape(x, (*lead, n, h * dk))


def multi_head_attention(p: ParamScope, x_q: Tensor, x_kv: Tensor, mask, n_heads: int) -> Tensor:
    """Projected multi-head attention. ``mask`` broadcasts against ``[..., h, n, m]``."""
    d = x_q.shape[-1]
    if d % n_heads:
        raise ValueError(f"d_model={d} not divisible by n_heads={n_heads}")
    if x_kv.shape[-1] != d:
        raise ValueError("query and key/value inputs differ in width")
    q = _split_heads(T.linear(x_q, p["Wq"], p["bq"]), n_heads)
    k = _split_heads(T.linear(x_kv, p["Wk"]), n_heads)
    v = _split_heads(T.linear(x_kv, p["Wv"], p["bv"]), n_heads)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.ndim == 2:
            mask = mask[None] if len(x_q.shape) == 2 else mask[None, None]
    out = _merge_heads(attention(q, k, v, mask))
    return T.linear(out, p["Wo"], p["bo"])


def _norm(p: ParamScope, x: Tensor) -> Tensor:
    return T.layer_norm(x, p["g"], p["b"])


def transformer_block(
    p: ParamScope,
    h: Tensor,
    self_mask,
    cross_context: Tensor | None = None,
    cross_mask=None,
    *,
    n_heads: int,
    dropout_p: float = 0.0,
    rng=None,
) -> Tensor:
    """Pre-norm residual block: self-attention, optional cross-attention, GELU FFN."""
    a = _norm(p.scope("ln1"), h)
    h = h + T.dropout(multi_head_attention(p.scope("attn"), a, a, self_mask, n_heads), dropout_p, rng)
    if cross_context is not None:
        if cross_context.shape[-1] != h.shape[-1]:
            raise ValueError("cross context width differs from block width")
        a = _norm(p.scope("lnx"), h)
        h = h + T.dropout(
            multi_head_attention(p.scope("xattn"), a, cross_context, cross_mask, n_heads), dropout_p, rng
        )
    a = _norm(p.scope("ln2"), h)
    f = p.scope("ffn")
    ff = T.linear(T.gelu(T.linear(a, f["W1"], f["b1"])), f["W2"], f["b2"])
    return h + T.dropout(ff, dropout_p, rng)


def embed(ids, W_e: Tensor, W_p: Tensor) -> Tensor:
    """Row i = W_e[ids[i]] + W_p[i]."""
    ids = np.asarray(ids, dtype=np.int64)
    n = ids.shape[-1]
    if n > W_p.shape[0]:
        raise ValueError(f"sequence length {n} exceeds max_seq_len {W_p.shape[0]}")
    return T.embedding(ids, W_e) + T.take(W_p, slice(0, n))


def _stack_mask(ids, key_mask, causal: bool):
    n = np.asarray(ids).shape[-1]
    return combine_masks(causal_mask(n) if causal else None, key_mask_4d(key_mask))


def encoder_forward(params: ModelParams, ids, key_mask=None, *, train=False, rng=None) -> Tensor:
    """Embed then run the encoder blocks (bidirectional). Returns [..., n, d]."""
    cfg = params.config
    drop = cfg.dropout_prob if train else 0.0
    h = T.dropout(embed(ids, params["tok_emb"], params["enc.pos"]), drop, rng)
    mask = _stack_mask(ids, key_mask, causal=False)
    for i in range(cfg.n_enc_layers):
        h = transformer_block(params.scope(f"enc.{i}"), h, mask, n_heads=cfg.n_heads, dropout_p=drop, rng=rng)
    return h


def decoder_forward(
    params: ModelParams, ids, enc_out: Tensor, key_mask=None, enc_key_mask=None, *, train=False, rng=None
) -> Tensor:
    """Embed then run causal decoder blocks with cross-attention on ``enc_out``."""
    cfg = params.config
    drop = cfg.dropout_prob if train else 0.0
    h = T.dropout(embed(ids, params["tok_emb"], params["dec.pos"]), drop, rng)
    mask = _stack_mask(ids, key_mask, causal=True)
    xmask = key_mask_4d(enc_key_mask)
    for i in range(cfg.n_dec_layers):
        h = transformer_block(
            params.scope(f"dec.{i}"), h, mask, enc_out, xmask, n_heads=cfg.n_heads, dropout_p=drop, rng=rng
        )
    return h


def final_norm(params: ModelParams, stack: str, h: Tensor) -> Tensor:
    return _norm(params.scope(f"{stack}.ln_f"), h)


# ----------------------------------------------------------------- heads


def lm_logits(h: Tensor, W_v: Tensor) -> Tensor:
    return T.matmul(h, W_v)


def autoregressive_nll(logits: Tensor, targets, weights=None) -> Tensor:
    """Mean next-token NLL; zero-weight positions (padding) are ignored."""
    return T.cross_entropy(logits, targets, weights)


def classification_loss(logits: Tensor, labels, class_weights=None) -> Tensor:
    """-log softmax(logits)[label], averaged over rows, optionally class-weighted."""
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    w = None
    if class_weights is not None:
        cw = np.asarray(class_weights, dtype=np.float64)
        if labels.min() < 0 or labels.max() >= cw.size:
            raise IndexError("label out of range")
        w = cw[labels]
    return T.cross_entropy(logits, labels, w)


def mlm_loss(hidden: Tensor, W_v: Tensor, positions, targets) -> tuple[Tensor, bool]:
    """Mean NLL of the original ids at masked positions only.

    ``positions`` indexes ``hidden`` (an int array for one sequence, or a tuple
    of index arrays for a batch). Returns ``(loss, empty)``; an empty mask set
    yields a zero loss with ``empty=True``.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size == 0:
        return Tensor(np.asarray(0.0)), True
    picked = T.take(hidden, positions)
    return T.cross_entropy(lm_logits(picked, W_v), targets), False
