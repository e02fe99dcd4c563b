"""Finite-difference gradient suite shared by the nn tests and the acceptance run.

Every case builds float64 inputs from a seed, runs the op, reduces the output
to a scalar with a fixed random projection, and compares the backward pass
with central differences on (a sample of) the input entries.
"""

import numpy as np

from pktseer.nn import layers as L
from pktseer.nn import tensor as T
from pktseer.nn.gradcheck import numeric_grad, rel_error
from pktseer.nn.layers import ModelConfig, ModelParams
from pktseer.nn.tensor import Tensor

MAX_ENTRIES = 24  # per array; larger arrays are subsampled


def _project(out: Tensor, rng) -> Tensor:
    if out.data.size == 1:
        return out
    r = rng.normal(size=out.data.shape)
    return T.total(T.mul(out, Tensor(r)))


def _check(arrays, build, rng, h=1e-5, max_entries=MAX_ENTRIES) -> float:
    """Relative error between analytic and numeric gradients w.r.t. ``arrays``."""
    seed = int(rng.integers(2**31))

    def loss(tensors):
        return _project(build(tensors), np.random.default_rng(seed))

    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    T.backward(loss(tensors))
    analytic, numeric = [], []
    for a, t in zip(arrays, tensors):
        entries = None
        if a.size > max_entries:
            entries = rng.choice(a.size, max_entries, replace=False)
        with T.no_grad():
            num = numeric_grad(lambda: loss(tensors).data, a, h=h, entries=entries)
        g = np.zeros(a.shape) if t.grad is None else t.grad
        idx = np.arange(a.size) if entries is None else entries
        analytic.append(g.reshape(-1)[idx])
        numeric.append(num.reshape(-1)[idx])
    return rel_error(np.concatenate(analytic), np.concatenate(numeric))


def _row_mask(rng, shape):
    m = rng.random(shape) < 0.7
    m[..., 0] = True  # every row keeps at least one entry
    return m


# --------------------------------------------------------------- op cases


def _simple(make, build):
    def run(rng):
        arrays, consts = make(rng)
        return _check(arrays, lambda ts: build(ts, consts), rng)

    return run


def _n(rng, *shape):
    return rng.normal(size=shape)


OP_CASES = {
    "add": _simple(lambda r: ([_n(r, 3, 4), _n(r, 4)], None), lambda ts, c: T.add(*ts)),
    "sub": _simple(lambda r: ([_n(r, 2, 3, 4), _n(r, 3, 1)], None), lambda ts, c: T.sub(*ts)),
    "mul": _simple(lambda r: ([_n(r, 3, 4), _n(r, 1, 4)], None), lambda ts, c: T.mul(*ts)),
    "scale": _simple(lambda r: ([_n(r, 5)], None), lambda ts, c: T.scale(ts[0], -1.7)),
    "total": _simple(lambda r: ([_n(r, 3, 2)], None), lambda ts, c: T.total(ts[0])),
    "mean": _simple(lambda r: ([_n(r, 3, 2)], None), lambda ts, c: T.mean(ts[0])),
    "matmul": _simple(lambda r: ([_n(r, 2, 3, 4), _n(r, 4, 5)], None), lambda ts, c: T.matmul(*ts)),
    "matmul_batched": _simple(
        lambda r: ([_n(r, 2, 2, 3, 4), _n(r, 2, 2, 4, 3)], None), lambda ts, c: T.matmul(*ts)
    ),
    "linear": _simple(lambda r: ([_n(r, 4, 3), _n(r, 3, 5), _n(r, 5)], None), lambda ts, c: T.linear(*ts)),
    "reshape": _simple(lambda r: ([_n(r, 2, 6)], None), lambda ts, c: T.reshape(ts[0], (3, 4))),
    "permute": _simple(lambda r: ([_n(r, 2, 3, 4)], None), lambda ts, c: T.permute(ts[0], (2, 0, 1))),
    "swap_last": _simple(lambda r: ([_n(r, 2, 3, 4)], None), lambda ts, c: T.swap_last(ts[0])),
    "gelu": _simple(lambda r: ([_n(r, 4, 5) * 2], None), lambda ts, c: T.gelu(ts[0])),
    "layer_norm": _simple(
        lambda r: ([_n(r, 3, 6) * 2 + 1, _n(r, 6), _n(r, 6)], None), lambda ts, c: T.layer_norm(*ts)
    ),
    "masked_softmax": _simple(
        lambda r: ([_n(r, 2, 3, 5) * 2], _row_mask(r, (2, 3, 5))), lambda ts, c: T.masked_softmax(ts[0], c)
    ),
    "dropout": _simple(
        lambda r: ([_n(r, 4, 6)], int(r.integers(1000))),
        lambda ts, c: T.dropout(ts[0], 0.3, np.random.default_rng(c)),
    ),
    "embedding": _simple(
        lambda r: ([_n(r, 7, 3)], r.integers(0, 7, (2, 5))), lambda ts, c: T.embedding(c, ts[0])
    ),
    "take": _simple(lambda r: ([_n(r, 6, 3)], np.array([0, 2, 2, 5])), lambda ts, c: T.take(ts[0], c)),
    "cross_entropy": _simple(
        lambda r: ([_n(r, 6, 5) * 2], (r.integers(0, 5, 6), r.random(6))),
        lambda ts, c: T.cross_entropy(ts[0], c[0], c[1]),
    ),
    "attention": _simple(
        lambda r: ([_n(r, 2, 4, 3), _n(r, 2, 5, 3), _n(r, 2, 5, 2)], _row_mask(r, (2, 4, 5))),
        lambda ts, c: L.attention(*ts, mask=c),
    ),
    "lm_logits": _simple(lambda r: ([_n(r, 3, 4), _n(r, 4, 9)], None), lambda ts, c: L.lm_logits(*ts)),
    "autoregressive_nll": _simple(
        lambda r: ([_n(r, 2, 4, 7)], (r.integers(0, 7, (2, 4)), (r.random((2, 4)) < 0.8).astype(float))),
        lambda ts, c: L.autoregressive_nll(ts[0], *c),
    ),
    "classification_loss": _simple(
        lambda r: ([_n(r, 8, 2)], r.integers(0, 2, 8)),
        lambda ts, c: L.classification_loss(ts[0], c, [0.6, 2.5]),
    ),
    "mlm_loss": _simple(
        lambda r: ([_n(r, 2, 6, 4), _n(r, 4, 9)], ((np.array([0, 0, 1]), np.array([1, 4, 2])), r.integers(0, 9, 3))),
        lambda ts, c: L.mlm_loss(ts[0], ts[1], *c)[0],
    ),
}


def _module_case(cfg, init, forward, make_inputs, max_entries=MAX_ENTRIES):
    def run(rng):
        params = ModelParams(cfg)
        init(params, rng)
        names = list(params)
        inputs = make_inputs(rng, cfg)
        x_arrays = [a for a in inputs if isinstance(a, np.ndarray) and a.dtype.kind == "f"]

        def build(ts):
            p = ModelParams(cfg, dict(zip(names, ts[: len(names)])))
            return forward(p, ts[len(names) :], inputs)

        return _check([params[n].data for n in names] + x_arrays, build, rng, max_entries=max_entries)

    return run


_SMALL = ModelConfig(
    vocab_size=11, d_model=8, n_heads=2, n_enc_layers=2, n_dec_layers=2, d_ff=12, max_seq_len=8, dropout_prob=0.0
)


def _init_scaled(init):
    """Initialise, then widen weights so activations are far from linear."""

    def run(params, rng):
        init(params, rng)
        for t in params.tensors.values():
            t.data += rng.normal(0, 0.3, size=t.data.shape)

    return run


def _mha_forward(p, xs, inputs):
    return L.multi_head_attention(p.scope("m"), xs[0], xs[1], inputs[2], 2)


def _block_forward(p, xs, inputs):
    return L.transformer_block(p.scope("b"), xs[0], inputs[2], xs[1], inputs[3], n_heads=2)


def _model_inputs(rng, cfg):
    enc = rng.integers(0, cfg.vocab_size, (2, 6))
    dec = rng.integers(0, cfg.vocab_size, (2, 5))
    enc_mask = np.ones((2, 6), bool)
    enc_mask[1, 4:] = False
    dec_mask = np.ones((2, 5), bool)
    dec_mask[0, 3:] = False
    targets = rng.integers(0, cfg.vocab_size, (2, 5))
    return enc, dec, enc_mask, dec_mask, targets


def _model_forward(p, xs, inputs):
    """Encoder-decoder next-token NLL through both stacks and final norms."""
    enc, dec, enc_mask, dec_mask, targets = inputs
    h = L.final_norm(p, "enc", L.encoder_forward(p, enc, enc_mask))
    d = L.final_norm(p, "dec", L.decoder_forward(p, dec, h, dec_mask, enc_mask))
    logits = L.lm_logits(d, p["lm.W"])
    return L.autoregressive_nll(logits, targets, dec_mask.astype(float))


def _init_model(params, rng):
    L.init_stack(params, params.config, rng)
    params.add("lm.W", rng.normal(0, 0.3, (params.config.d_model, params.config.vocab_size)))


MODULE_CASES = {
    "multi_head_attention": _module_case(
        _SMALL,
        _init_scaled(lambda p, r: L.init_attention(p, "m", 8, r)),
        _mha_forward,
        lambda r, c: (_n(r, 2, 3, 8), _n(r, 2, 4, 8), _row_mask(r, (2, 1, 3, 4))),
    ),
    "transformer_block": _module_case(
        _SMALL,
        _init_scaled(lambda p, r: L.init_block(p, "b", _SMALL, r, cross=True)),
        _block_forward,
        lambda r, c: (_n(r, 2, 3, 8), _n(r, 2, 4, 8), L.causal_mask(3), _row_mask(r, (2, 1, 3, 4))),
        max_entries=8,
    ),
    # ~80 parameter tensors: a few entries from each keeps the run short
    "model_2x2": _module_case(_SMALL, _init_scaled(_init_model), _model_forward, _model_inputs, max_entries=3),
}

ALL_CASES = {**OP_CASES, **MODULE_CASES}


def run_case(name: str, seed: int) -> float:
    with T.precision(np.float64):
        return ALL_CASES[name](np.random.default_rng(seed))
