"""Training loops for the three task models, splitting, early stopping and evaluation.

All randomness derives from ``TrainConfig.seed``: parameter init, the
train/validation split, per-epoch batch order (``default_rng([seed, epoch])``),
dropout and corruption draws. Identical data + config give identical
checkpoint bytes.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .ingest import PacketRecord, PairExample, PairLabel
from .metrics import EvalReport, evaluate_scores
from .models import (
    AssessorModel,
    ClassifierModel,
    PredictorModel,
    _trim,
    assess_probabilities,
    classify_scores,
    pad_batch,
)
from .nn import layers as L
from .nn import tensor as T
from .nn.layers import ModelConfig
from .nn.optim import Adam, clip_grad_norm
from .tokenizer import (
    BOS,
    EOS,
    BpeVocab,
    TokenSequence,
    make_denoising_corruption,
    make_mlm_corruption,
    pack_pair,
    serialize_packet,
)

METRICS = ("val_loss", "val_accuracy")


class TrainingError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, epoch: int, batch_ids, loss: float):
        super().__init__(
            f"non-finite loss {loss!r} at step {step} (epoch {epoch}); batch example ids {list(batch_ids)}"
        )
        self.step = step
        self.epoch = epoch
        self.batch_ids = list(batch_ids)
        self.loss = loss


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 15
    batch_size: int = 128
    learning_rate: float = 5e-5
    seed: int = 0
    early_stop_patience: int = 3
    early_stop_metric: str = "val_loss"
    max_seq_len: int = 192
    min_delta: float = 1e-4
    val_fraction: float = 0.2
    grad_clip: float | None = 1.0
    denoise_fraction: float = 0.2  # predictor only
    mlm_warmup_epochs: int = 3  # assessor only
    mask_prob: float = 0.15  # assessor only
    class_weighting: bool = True  # classifier only

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.early_stop_patience < 0:
            raise ValueError("early_stop_patience must be >= 0")
        if self.early_stop_metric not in METRICS:
            raise ValueError(f"early_stop_metric must be one of {METRICS}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in (0, 1)")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not 0.0 <= self.denoise_fraction <= 1.0:
            raise ValueError("denoise_fraction must be in [0, 1]")
        if self.mlm_warmup_epochs < 0:
            raise ValueError("mlm_warmup_epochs must be >= 0")
        if self.max_seq_len < 8:
            raise ValueError("max_seq_len must be >= 8")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def default_config(kind: str, **overrides) -> TrainConfig:
    """Per-model defaults; the classifier trains 4 epochs at batch 2 and keeps
    the best validation accuracy."""
    base = {
        "predictor": TrainConfig(),
        "assessor": TrainConfig(),
        "classifier": TrainConfig(epochs=4, batch_size=2, early_stop_metric="val_accuracy"),
    }
    if kind not in base:
        raise ValueError(f"unknown model kind {kind!r}")
    return replace(base[kind], **overrides)


# ---------------------------------------------------------------- history


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float | None
    wall_ms: float
    phase: str = "train"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class History:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None
    stopped_early: bool = False

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def phase(self, name: str) -> list[EpochRecord]:
        return [r for r in self.records if r.phase == name]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in self.records)


class EarlyStopping:
    """Patience counter on a monitored metric.

    ``update`` returns True when the value is the best seen so far (the caller
    should snapshot the model then). The patience counter only resets on an
    improvement larger than ``min_delta`` over the last reset point, so slow
    drift still ends training while the snapshot tracks the true best.
    """

    def __init__(self, metric: str = "val_loss", patience: int = 3, min_delta: float = 1e-4):
        if metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}")
        self.metric = metric
        self.patience = patience
        self.min_delta = min_delta
        self.sign = 1.0 if metric == "val_loss" else -1.0  # minimise sign * value
        self.best = math.inf
        self.reference = math.inf
        self.bad_epochs = 0
        self.best_epoch: int | None = None
        self._epoch = 0

    def update(self, value: float) -> bool:
        self._epoch += 1
        v = self.sign * value
        if not math.isfinite(v):
            self.bad_epochs += 1
            return False
        if v < self.reference - self.min_delta:
            self.reference = v
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        if v < self.best:
            self.best = v
            self.best_epoch = self._epoch
            return True
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs > self.patience

    @property
    def best_value(self) -> float:
        return self.sign * self.best


# ------------------------------------------------------------------ split


def split(dataset, val_fraction: float, seed: int = 0, labels=None):
    """Shuffled (train, val) split; stratified by ``labels`` when given.

    Stratified: each class contributes round(val_fraction * n_c) examples to
    validation, clamped so both sides get at least one.
    """
    if not 0.0 < val_fraction < 1.0:
        raise ValueError("val_fraction must be in (0, 1)")
    items = list(dataset)
    n = len(items)
    rng = np.random.default_rng(seed)
    if labels is None:
        order = rng.permutation(n)
        n_val = int(round(val_fraction * n))
        if n >= 2:
            n_val = min(max(n_val, 1), n - 1)
        val_idx, train_idx = order[:n_val], order[n_val:]
    else:
        labels = np.asarray(list(labels))
        if labels.size != n:
            raise ValueError("labels and dataset differ in length")
        val_parts, train_parts = [], []
        for c in np.unique(labels):
            idx = np.flatnonzero(labels == c)
            if idx.size < 2:
                raise ValueError(f"class {c!r} has fewer than 2 examples; cannot stratify")
            idx = rng.permutation(idx)
            k = min(max(int(round(val_fraction * idx.size)), 1), idx.size - 1)
            val_parts.append(idx[:k])
            train_parts.append(idx[k:])
        val_idx = rng.permutation(np.concatenate(val_parts))
        train_idx = rng.permutation(np.concatenate(train_parts))
    return [items[i] for i in train_idx], [items[i] for i in val_idx]


def class_weights(labels, n_classes: int = 2) -> np.ndarray:
    """Inverse-frequency weights N / (K * n_c); absent classes get weight 0."""
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=n_classes).astype(np.float64)
    n = counts.sum()
    with np.errstate(divide="ignore"):
        w = np.where(counts > 0, n / (n_classes * np.maximum(counts, 1)), 0.0)
    return w


# ------------------------------------------------------------- generic loop


def _epoch_batches(n: int, batch_size: int, seed: int, epoch: int):
    order = np.random.default_rng([seed, epoch]).permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


class _Loop:
    """Shared optimiser state and step bookkeeping for one training run."""

    def __init__(self, model, cfg: TrainConfig):
        self.model = model
        self.cfg = cfg
        self.params = model.params.parameters()
        self.opt = Adam(self.params, lr=cfg.learning_rate)
        self.step = 0

    def apply(self, loss: T.Tensor, epoch: int, batch_ids) -> float:
        value = float(loss.data)
        self.step += 1
        if not math.isfinite(value):
            raise TrainingDiverged(self.step, epoch, batch_ids, value)
        self.opt.zero_grad()
        T.backward(loss)
        if self.cfg.grad_clip:
            clip_grad_norm(self.params, self.cfg.grad_clip)
        self.opt.step()
        return value


def _fit(model, cfg, n_train, step_fn, val_fn, history: History, epoch0: int = 0):
    """Epoch loop with early stopping; restores the best snapshot at the end.

    ``step_fn(batch_idx, epoch, rng) -> (loss Tensor)``; ``val_fn() -> (loss, acc)``.
    """
    loop = _Loop(model, cfg)
    stopper = EarlyStopping(cfg.early_stop_metric, cfg.early_stop_patience, cfg.min_delta)
    best_state = model.params.state()
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        drop_rng = np.random.default_rng([cfg.seed, epoch0 + epoch, 1])
        total, count = 0.0, 0
        for b, idx in enumerate(_epoch_batches(n_train, cfg.batch_size, cfg.seed, epoch0 + epoch)):
            loss = step_fn(idx, epoch0 + epoch, b, drop_rng)
            total += loop.apply(loss, epoch0 + epoch, idx) * len(idx)
            count += len(idx)
        val_loss, val_acc = val_fn()
        history.records.append(
            EpochRecord(epoch, total / count, val_loss, val_acc, (time.perf_counter() - t0) * 1e3)
        )
        monitored = val_loss if cfg.early_stop_metric == "val_loss" else val_acc
        if stopper.update(monitored):
            best_state = model.params.state()
            history.best_epoch = epoch
        if stopper.should_stop:
            history.stopped_early = epoch < cfg.epochs
            break
    model.params.load_state(best_state)
    return loop


def _check_config(model_config: ModelConfig, vocab: BpeVocab, cfg: TrainConfig) -> ModelConfig:
    if model_config.vocab_size != vocab.size:
        model_config = replace(model_config, vocab_size=vocab.size)
    if model_config.max_seq_len < cfg.max_seq_len:
        raise TrainingError(
            f"model max_seq_len {model_config.max_seq_len} < training max_seq_len {cfg.max_seq_len}"
        )
    return model_config


def _clip(ids, n):
    return tuple(ids[:n])


# -------------------------------------------------------------- predictor


def _predictor_seqs(pairs, vocab, features, cap):
    cur = vocab.encode_batch([serialize_packet(a, features) for a, _ in pairs])
    nxt = vocab.encode_batch([serialize_packet(b, features) for _, b in pairs])
    return [c.ids for c in cur], [n.ids for n in nxt], cap


def _seq2seq_batch(srcs, tgts, cap):
    """Encoder input [BOS] src [EOS]; decoder input [BOS] tgt; targets tgt [EOS]."""
    enc = [(BOS, *_clip(s, cap - 2), EOS) for s in srcs]
    dec_in = [(BOS, *_clip(t, cap - 1)) for t in tgts]
    dec_out = [(*_clip(t, cap - 1), EOS) for t in tgts]
    e_ids, e_mask = pad_batch(enc)
    d_ids, d_mask = pad_batch(dec_in)
    y, _ = pad_batch(dec_out)
    return e_ids, e_mask, d_ids, d_mask, y


def _seq2seq_loss(m: PredictorModel, batch, train=False, rng=None):
    e_ids, e_mask, d_ids, d_mask, y = batch
    logits = m.logits(e_ids, e_mask, d_ids, d_mask, train=train, rng=rng)
    return logits, L.autoregressive_nll(logits, y, d_mask.astype(np.float64))


def train_predictor(
    pairs,
    vocab: BpeVocab,
    features,
    cfg: TrainConfig | None = None,
    model_config: ModelConfig | None = None,
    val_pairs=None,
) -> tuple[PredictorModel, History]:
    """Teacher-forced next-packet training with a share of denoising steps.

    When ``val_pairs`` is None a ``cfg.val_fraction`` split of ``pairs`` is
    held out.
    """
    cfg = cfg or default_config("predictor")
    pairs = list(pairs)
    if not pairs:
        raise TrainingError("no training pairs")
    mcfg = _check_config(model_config or ModelConfig(), vocab, cfg)
    if val_pairs is None:
        train, val = split(pairs, cfg.val_fraction, cfg.seed) if len(pairs) > 1 else (pairs, pairs)
    else:
        train, val = pairs, list(val_pairs)
    model = PredictorModel.create(mcfg, vocab, features, seed=cfg.seed)
    cap = cfg.max_seq_len
    cur, nxt, _ = _predictor_seqs(train, vocab, features, cap)
    vcur, vnxt, _ = _predictor_seqs(val, vocab, features, cap)

    def step(idx, epoch, b, rng):
        choose = np.random.default_rng([cfg.seed, epoch, b, 2])
        if cfg.denoise_fraction > 0 and choose.random() < cfg.denoise_fraction:
            # reconstruct the current packet from a span-masked copy
            srcs, tgts = [], []
            for i in idx:
                full = TokenSequence((BOS, *_clip(cur[i], cap - 2), EOS))
                noisy, _ = make_denoising_corruption(full, vocab, choose)
                srcs.append(noisy.ids[1:-1])
                tgts.append(cur[i])
        else:
            srcs, tgts = [cur[i] for i in idx], [nxt[i] for i in idx]
        return _seq2seq_loss(model, _seq2seq_batch(srcs, tgts, cap), True, rng)[1]

    def validate():
        return _seq2seq_eval(model, vcur, vnxt, cap, cfg.batch_size)

    history = History()
    _fit(model, cfg, len(train), step, validate, history)
    return model, history


def _seq2seq_eval(m, srcs, tgts, cap, batch_size):
    """(mean token NLL, token accuracy) under teacher forcing."""
    nll_sum, tok, correct = 0.0, 0, 0
    with T.no_grad():
        for i in range(0, len(srcs), batch_size):
            batch = _seq2seq_batch(srcs[i : i + batch_size], tgts[i : i + batch_size], cap)
            logits, loss = _seq2seq_loss(m, batch)
            w = batch[3]
            n = int(w.sum())
            nll_sum += float(loss.data) * n
            tok += n
            correct += int(((logits.data.argmax(-1) == batch[4]) & w).sum())
    return nll_sum / max(tok, 1), correct / max(tok, 1)


# --------------------------------------------------------------- assessor


def _pair_seqs(examples, vocab, features, cap):
    a = vocab.encode_batch([serialize_packet(e.first, features) for e in examples])
    b = vocab.encode_batch([serialize_packet(e.second, features) for e in examples])
    return [pack_pair(x.ids, y.ids, cap) for x, y in zip(a, b)]


def train_assessor(
    examples,
    vocab: BpeVocab,
    features,
    cfg: TrainConfig | None = None,
    model_config: ModelConfig | None = None,
) -> tuple[AssessorModel, History]:
    """Optional MLM warm-up on the packed pair sequences, then pair
    classification on the CLS head with early stopping."""
    cfg = cfg or default_config("assessor")
    examples = list(examples)
    labels = [int(e.label) for e in examples]
    if len(set(labels)) < 2:
        raise TrainingError("assessor training needs both Successive and NonSuccessive pairs")
    mcfg = _check_config(model_config or ModelConfig(), vocab, cfg)
    train, val = split(examples, cfg.val_fraction, cfg.seed, labels=labels)
    model = AssessorModel.create(mcfg, vocab, features, seed=cfg.seed, pair_max_len=cfg.max_seq_len)
    seqs = _pair_seqs(train, vocab, features, cfg.max_seq_len)
    vseqs = _pair_seqs(val, vocab, features, cfg.max_seq_len)
    y = np.array([int(e.label) for e in train])
    vy = np.array([int(e.label) for e in val])
    history = History()

    if cfg.mlm_warmup_epochs:
        _mlm_warmup(model, seqs, vseqs, vocab, cfg, history)

    def step(idx, epoch, b, rng):
        ids, mask = pad_batch(_trim([seqs[i] for i in idx]))
        logits = model.pair_logits(ids, mask, train=True, rng=rng)
        return L.classification_loss(logits, y[idx])

    def validate():
        return _pair_eval(model, vseqs, vy, cfg.batch_size)

    _fit(model, cfg, len(train), step, validate, history, epoch0=cfg.mlm_warmup_epochs)
    return model, history


def _pair_eval(model, seqs, y, batch_size):
    p = assess_probabilities(model, seqs, batch_size)
    nll = -np.log(np.clip(p[np.arange(len(y)), y], 1e-300, None))
    return float(nll.mean()), float((p.argmax(1) == y).mean())


def _mlm_batch(seqs, idx, vocab, cfg, seed):
    batches = [make_mlm_corruption(seqs[i], cfg.mask_prob, vocab, [*seed, int(i)]) for i in idx]
    ids, mask = pad_batch(_trim([mb.corrupted_ids for mb in batches]))
    rows = np.concatenate([np.full(len(mb.masked_positions), r) for r, mb in enumerate(batches)] or [[]])
    cols = np.concatenate([mb.masked_positions for mb in batches] or [[]])
    tgt = np.concatenate([mb.target_ids for mb in batches] or [[]])
    return ids, mask, (rows.astype(np.int64), cols.astype(np.int64)), tgt.astype(np.int64)


def _mlm_warmup(model: AssessorModel, seqs, vseqs, vocab, cfg: TrainConfig, history: History):
    loop = _Loop(model, cfg)
    W = model.params["lm_head.W"]
    for epoch in range(1, cfg.mlm_warmup_epochs + 1):
        t0 = time.perf_counter()
        rng = np.random.default_rng([cfg.seed, epoch, 1])
        total, count = 0.0, 0
        for idx in _epoch_batches(len(seqs), cfg.batch_size, cfg.seed, epoch):
            ids, mask, pos, tgt = _mlm_batch(seqs, idx, vocab, cfg, (cfg.seed, epoch))
            h = model.hidden(ids, mask, train=True, rng=rng)
            loss, empty = L.mlm_loss(h, W, pos, tgt)
            if empty:
                continue
            total += loop.apply(loss, epoch, idx) * len(idx)
            count += len(idx)
        v_total, v_count = 0.0, 0
        with T.no_grad():
            for s in range(0, len(vseqs), cfg.batch_size):
                idx = np.arange(s, min(s + cfg.batch_size, len(vseqs)))
                ids, mask, pos, tgt = _mlm_batch(vseqs, idx, vocab, cfg, (cfg.seed, 0))
                loss, empty = L.mlm_loss(model.hidden(ids, mask), W, pos, tgt)
                if not empty:
                    v_total += float(loss.data) * len(tgt)
                    v_count += len(tgt)
        history.records.append(
            EpochRecord(
                epoch,
                total / max(count, 1),
                v_total / max(v_count, 1),
                None,
                (time.perf_counter() - t0) * 1e3,
                phase="mlm",
            )
        )


# ------------------------------------------------------------- classifier


def _packet_seqs(records, vocab, features, cap):
    seqs = vocab.encode_batch([serialize_packet(r, features) for r in records])
    return [(BOS, *_clip(s.ids, cap - 2), EOS) for s in seqs]


def train_classifier(
    data,
    vocab: BpeVocab,
    features,
    cfg: TrainConfig | None = None,
    model_config: ModelConfig | None = None,
) -> tuple[ClassifierModel, History]:
    """``data``: (PacketRecord, class index) pairs, 0 Normal / 1 Malicious."""
    cfg = cfg or default_config("classifier")
    data = list(data)
    labels = [int(c) for _, c in data]
    if len(set(labels)) < 2:
        raise TrainingError("classifier training needs both Normal and Malicious packets")
    mcfg = _check_config(model_config or ModelConfig(), vocab, cfg)
    train, val = split(data, cfg.val_fraction, cfg.seed, labels=labels)
    model = ClassifierModel.create(mcfg, vocab, features, seed=cfg.seed)
    seqs = _packet_seqs([r for r, _ in train], vocab, features, cfg.max_seq_len)
    vseqs = _packet_seqs([r for r, _ in val], vocab, features, cfg.max_seq_len)
    y = np.array([int(c) for _, c in train])
    vy = np.array([int(c) for _, c in val])
    weights = class_weights(y) if cfg.class_weighting else None

    def step(idx, epoch, b, rng):
        ids, mask = pad_batch([seqs[i] for i in idx])
        logits = model.class_logits(ids, mask, train=True, rng=rng)
        return L.classification_loss(logits, y[idx], weights)

    def validate():
        s = classify_scores(model, vseqs, max(cfg.batch_size, 64))
        p = np.where(vy == 1, s, 1.0 - s)
        nll = -np.log(np.clip(p, 1e-300, None))
        w = np.ones(len(vy)) if weights is None else weights[vy]
        pred = (s > 0.5).astype(np.int64)
        return float((w * nll).sum() / w.sum()), float((pred == vy).mean())

    history = History()
    _fit(model, cfg, len(train), step, validate, history)
    return model, history


# ------------------------------------------------------------- evaluation


def evaluate_classifier(m: ClassifierModel, data, batch_size: int = 64) -> EvalReport:
    """``data``: (PacketRecord, class index) pairs."""
    data = list(data)
    if not data:
        raise ValueError("empty evaluation set")
    seqs = _packet_seqs([r for r, _ in data], m.vocab, m.features, m.config.max_seq_len)
    scores = classify_scores(m, seqs, batch_size)
    y = np.array([int(c) for _, c in data])
    return evaluate_scores(y, (scores > 0.5).astype(np.int64), scores, ("Normal", "Malicious"))


def evaluate_assessor(m: AssessorModel, examples, batch_size: int = 64) -> EvalReport:
    examples = list(examples)
    if not examples:
        raise ValueError("empty evaluation set")
    seqs = _pair_seqs(examples, m.vocab, m.features, m.pair_max_len)
    p = assess_probabilities(m, seqs, batch_size)
    y = np.array([int(e.label) for e in examples])
    # argmax with ties to Successive (index 0) == P(NonSuccessive) > P(Successive)
    pred = (p[:, 1] > p[:, 0]).astype(np.int64)
    return evaluate_scores(y, pred, p[:, 1], ("Successive", "NonSuccessive"))


__all__ = [
    "EarlyStopping",
    "EpochRecord",
    "History",
    "PacketRecord",
    "PairExample",
    "PairLabel",
    "TrainConfig",
    "TrainingDiverged",
    "TrainingError",
    "class_weights",
    "default_config",
    "evaluate_assessor",
    "evaluate_classifier",
    "predictor_loss",
    "split",
    "train_assessor",
    "train_classifier",
    "train_predictor",
]


def predictor_loss(m: PredictorModel, pairs, batch_size: int = 64) -> tuple[float, float]:
    """Teacher-forced (mean token NLL, token accuracy) of ``m`` on next-packet pairs."""
    pairs = list(pairs)
    cap = m.config.max_seq_len
    cur, nxt, _ = _predictor_seqs(pairs, m.vocab, m.features, cap)
    return _seq2seq_eval(m, cur, nxt, cap, batch_size)
