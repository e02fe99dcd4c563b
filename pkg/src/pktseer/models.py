"""The three task models and the predict -> assess -> classify pipeline.

* :class:`PredictorModel`  encoder-decoder with an LM head; generates the next
  packet's text greedily.
* :class:`AssessorModel`   bidirectional encoder with an MLM head and a
  2-class head on the CLS position (Successive / NonSuccessive).
* :class:`ClassifierModel` encoder-decoder fed the same packet tokens on both
  sides; 2-class head on the last decoder position (Normal / Malicious).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .ingest import PacketRecord, PairLabel, Verdict
from .nn import checkpoint
from .nn import layers as L
from .nn import tensor as T
from .nn.layers import ModelConfig, ModelParams
from .tokenizer import (
    BOS,
    CLS,
    EOS,
    PAD,
    BpeVocab,
    PacketParseError,
    TokenSequence,
    pack_pair,
    parse_packet_text,
    serialize_packet,
)


class ModelError(ValueError):
    pass


def pad_batch(seqs, pad: int = PAD):
    """Right-pad id sequences to a common length -> (ids [B, L], keep-mask [B, L])."""
    seqs = [s.ids if isinstance(s, TokenSequence) else tuple(s) for s in seqs]
    width = max((len(s) for s in seqs), default=0)
    ids = np.full((len(seqs), max(width, 1)), pad, dtype=np.int64)
    mask = np.zeros(ids.shape, dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


def _softmax(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


class TaskModel:
    kind = "base"

    def __init__(self, params: ModelParams, vocab: BpeVocab, features, meta: dict | None = None):
        if params.config.vocab_size != vocab.size:
            raise ModelError(f"model vocab_size {params.config.vocab_size} != vocabulary size {vocab.size}")
        self.params = params
        self.vocab = vocab
        self.features = list(features)
        self.meta = dict(meta or {})

    @property
    def config(self) -> ModelConfig:
        return self.params.config

    def checkpoint_meta(self) -> dict:
        return {
            **self.meta,
            "kind": self.kind,
            "vocab_sha256": self.vocab.fingerprint(),
            "features": self.features,
        }

    def to_bytes(self) -> bytes:
        return checkpoint.dumps(self.params, self.checkpoint_meta())

    def save(self, path) -> bytes:
        blob = self.to_bytes()
        with open(path, "wb") as fh:
            fh.write(blob)
        return blob

    @classmethod
    def create(cls, config: ModelConfig, vocab: BpeVocab, features, seed: int = 0, **meta):
        params = ModelParams(config)
        cls._init_params(params, np.random.default_rng(seed))
        return cls(params, vocab, features, meta)

    @staticmethod
    def _init_params(params: ModelParams, rng):
        raise NotImplementedError

    def encode_packet(self, p: PacketRecord) -> TokenSequence:
        return self.vocab.encode(serialize_packet(p, self.features), add_bos_eos=True)


def load_model(path_or_bytes, vocab: BpeVocab) -> TaskModel:
    """Load any task model checkpoint; ``vocab`` must match the one it was trained with."""
    if isinstance(path_or_bytes, (bytes, bytearray)):
        params, meta = checkpoint.loads(bytes(path_or_bytes))
    else:
        params, meta = checkpoint.load(path_or_bytes)
    kinds = {c.kind: c for c in (PredictorModel, AssessorModel, ClassifierModel)}
    kind = meta.get("kind")
    if kind not in kinds:
        raise ModelError(f"unknown model kind {kind!r}")
    if meta.get("vocab_sha256") != vocab.fingerprint():
        raise ModelError(f"{kind} checkpoint was trained with a different vocabulary")
    extra = {k: v for k, v in meta.items() if k not in {"kind", "vocab_sha256", "features"}}
    return kinds[kind](params, vocab, meta.get("features", []), extra)


# ------------------------------------------------------------- predictor


class PredictorModel(TaskModel):
    kind = "predictor"

    @staticmethod
    def _init_params(params, rng):
        cfg = params.config
        L.init_stack(params, cfg, rng)
        params.add("lm_head.W", rng.normal(0.0, L.INIT_STD, (cfg.d_model, cfg.vocab_size)))

    def encode(self, ids, mask, train=False, rng=None) -> T.Tensor:
        h = L.encoder_forward(self.params, ids, mask, train=train, rng=rng)
        return L.final_norm(self.params, "enc", h)

    def logits(self, enc_ids, enc_mask, dec_ids, dec_mask, train=False, rng=None) -> T.Tensor:
        enc = self.encode(enc_ids, enc_mask, train, rng)
        h = L.decoder_forward(self.params, dec_ids, enc, dec_mask, enc_mask, train=train, rng=rng)
        return L.lm_logits(L.final_norm(self.params, "dec", h), self.params["lm_head.W"])


def generate_batch(m: PredictorModel, seqs, max_new: int) -> list[list[int]]:
    """Greedy decoding for several inputs in lock-step. Returns the generated
    ids per input, without BOS and without the terminating EOS."""
    seqs = list(seqs)
    if not seqs:
        return []
    if any(len(s) == 0 for s in seqs):
        raise ModelError("cannot generate from an empty sequence")
    limit = min(max_new, m.config.max_seq_len - 1)
    out: list[list[int]] = [[] for _ in seqs]
    if limit <= 0:
        return out
    enc_ids, enc_mask = pad_batch(seqs)
    if enc_ids.shape[1] > m.config.max_seq_len:
        raise ModelError("input longer than max_seq_len")
    with T.no_grad():
        enc = m.encode(enc_ids, enc_mask)
        dec = np.full((len(seqs), 1), BOS, dtype=np.int64)
        done = np.zeros(len(seqs), dtype=bool)
        W = m.params["lm_head.W"]
        for _ in range(limit):
            h = L.decoder_forward(m.params, dec, enc, None, enc_mask)
            last = T.take(h, (slice(None), slice(h.shape[1] - 1, h.shape[1])))
            logits = L.lm_logits(L.final_norm(m.params, "dec", last), W).data[:, 0, :]
            nxt = np.argmax(logits, axis=-1)  # first maximum: smallest id wins ties
            for i in np.flatnonzero(~done):
                if nxt[i] == EOS:
                    done[i] = True
                else:
                    out[i].append(int(nxt[i]))
            if done.all():
                break
            dec = np.concatenate([dec, np.where(done, PAD, nxt)[:, None]], axis=1)
    return out


def generate_next_packet(m: PredictorModel, current: TokenSequence, vocab: BpeVocab, max_new: int) -> str:
    if len(current) == 0:
        raise ModelError("current sequence is empty")
    ids = generate_batch(m, [current], max_new)[0]
    return vocab.decode(ids)


# -------------------------------------------------------------- assessor


class AssessorModel(TaskModel):
    kind = "assessor"

    @staticmethod
    def _init_params(params, rng):
        cfg = params.config
        L.init_stack(params, cfg, rng, decoder=False)
        params.add("lm_head.W", rng.normal(0.0, L.INIT_STD, (cfg.d_model, cfg.vocab_size)))
        params.add("pair_head.W", rng.normal(0.0, L.INIT_STD, (cfg.d_model, 2)))
        params.add("pair_head.b", np.zeros(2))

    @property
    def pair_max_len(self) -> int:
        return int(self.meta.get("pair_max_len", self.config.max_seq_len))

    def hidden(self, ids, mask, train=False, rng=None) -> T.Tensor:
        h = L.encoder_forward(self.params, ids, mask, train=train, rng=rng)
        return L.final_norm(self.params, "enc", h)

    def pair_logits(self, ids, mask, train=False, rng=None) -> T.Tensor:
        ids = np.asarray(ids)
        if np.any(ids[:, 0] != CLS):
            raise ModelError("pair sequence must start with CLS")
        h = self.hidden(ids, mask, train, rng)
        cls_h = T.take(h, (slice(None), 0))
        return T.linear(cls_h, self.params["pair_head.W"], self.params["pair_head.b"])

    def pack(self, first: PacketRecord, second_text_or_record) -> TokenSequence:
        a = self.vocab.encode_ids(serialize_packet(first, self.features))
        s = second_text_or_record
        b = self.vocab.encode_ids(s if isinstance(s, str) else serialize_packet(s, self.features))
        return pack_pair(a, b, self.pair_max_len)


def assess_probabilities(m: AssessorModel, seqs, batch_size: int = 64) -> np.ndarray:
    """P(Successive), P(NonSuccessive) per packed pair sequence."""
    seqs = list(seqs)
    out = []
    with T.no_grad():
        for i in range(0, len(seqs), batch_size):
            ids, mask = pad_batch(_trim(seqs[i : i + batch_size]))
            out.append(_softmax(m.pair_logits(ids, mask).data))
    return np.concatenate(out) if out else np.zeros((0, 2))


def _trim(seqs):
    # trailing PAD is masked anyway; dropping it keeps batches short
    res = []
    for s in seqs:
        ids = s.ids if isinstance(s, TokenSequence) else tuple(s)
        n = len(ids)
        while n > 1 and ids[n - 1] == PAD:
            n -= 1
        res.append(ids[:n])
    return res


def assess_pair(m: AssessorModel, pair_seq: TokenSequence) -> tuple[PairLabel, float]:
    if len(pair_seq) == 0 or pair_seq.ids[0] != CLS:
        raise ModelError("pair sequence must start with CLS")
    p = assess_probabilities(m, [pair_seq])[0]
    k = int(np.argmax(p))
    return PairLabel(k), float(p[k])


# ------------------------------------------------------------ classifier


class ClassifierModel(TaskModel):
    kind = "classifier"

    @staticmethod
    def _init_params(params, rng):
        cfg = params.config
        L.init_stack(params, cfg, rng)
        params.add("cls_head.W", rng.normal(0.0, L.INIT_STD, (cfg.d_model, 2)))
        params.add("cls_head.b", np.zeros(2))

    def class_logits(self, ids, mask, train=False, rng=None) -> T.Tensor:
        ids = np.asarray(ids)
        if ids.shape[1] > self.config.max_seq_len:
            raise ModelError(f"sequence length {ids.shape[1]} exceeds max_seq_len {self.config.max_seq_len}")
        enc = L.encoder_forward(self.params, ids, mask, train=train, rng=rng)
        enc = L.final_norm(self.params, "enc", enc)
        h = L.decoder_forward(self.params, ids, enc, mask, mask, train=train, rng=rng)
        last = mask.sum(axis=1) - 1
        h_last = T.take(h, (np.arange(ids.shape[0]), last))
        h_last = L.final_norm(self.params, "dec", h_last)
        return T.linear(h_last, self.params["cls_head.W"], self.params["cls_head.b"])


def classify_scores(m: ClassifierModel, seqs, batch_size: int = 64) -> np.ndarray:
    """P(Malicious) per packet token sequence."""
    seqs = list(seqs)
    out = []
    with T.no_grad():
        for i in range(0, len(seqs), batch_size):
            ids, mask = pad_batch(seqs[i : i + batch_size])
            out.append(_softmax(m.class_logits(ids, mask).data)[:, 1])
    return np.concatenate(out) if out else np.zeros(0)


def verdict_from_score(score: float) -> Verdict:
    return Verdict.MALICIOUS if score > 0.5 else Verdict.NORMAL


def classify_packet(m: ClassifierModel, packet_seq: TokenSequence) -> tuple[Verdict, float, float]:
    if len(packet_seq) == 0:
        raise ModelError("packet sequence is empty")
    if len(packet_seq) > m.config.max_seq_len:
        raise ModelError("packet sequence longer than max_seq_len")
    score = float(classify_scores(m, [packet_seq])[0])
    v = verdict_from_score(score)
    return v, (score if v is Verdict.MALICIOUS else 1.0 - score), score


# -------------------------------------------------------------- pipeline


@dataclass
class PredictionOutcome:
    current: PacketRecord
    current_text: str
    predicted_text: str
    predicted_record: PacketRecord | None
    parse_error: str | None
    assessor_verdict: PairLabel
    assessor_probability: float
    classifier_verdict: Verdict
    classifier_probability: float
    classifier_score: float

    @property
    def malformed(self) -> bool:
        return self.predicted_record is None

    def to_dict(self) -> dict:
        k = self.current.flow_key
        return {
            "flow": {
                "src_addr": k.src_addr,
                "dst_addr": k.dst_addr,
                "src_port": k.src_port,
                "dst_port": k.dst_port,
                "protocol": k.protocol,
            },
            "timestamp": self.current.timestamp,
            "current": self.current_text,
            "predicted": self.predicted_text,
            "predicted_features": None
            if self.predicted_record is None
            else {n: v for n, v in self.predicted_record.features},
            "malformed": self.malformed,
            "parse_error": self.parse_error,
            "assessor": {
                "verdict": "Successive" if self.assessor_verdict is PairLabel.SUCCESSIVE else "NonSuccessive",
                "probability": self.assessor_probability,
            },
            "classifier": {
                "verdict": "Malicious" if self.classifier_verdict is Verdict.MALICIOUS else "Normal",
                "probability": self.classifier_probability,
                "score": self.classifier_score,
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


class Pipeline:
    """Generate the next packet, judge the (current, predicted) pair, classify
    the prediction. The assessor verdict is reported, never used as a gate."""

    def __init__(self, predictor, assessor, classifier, vocab: BpeVocab, kept_features, max_new: int | None = None):
        fp = vocab.fingerprint()
        for m in (predictor, assessor, classifier):
            if m.vocab.fingerprint() != fp:
                raise ModelError(f"{m.kind} model uses a different vocabulary")
        self.predictor = predictor
        self.assessor = assessor
        self.classifier = classifier
        self.vocab = vocab
        self.features = list(kept_features)
        self.max_new = max_new if max_new is not None else predictor.config.max_seq_len - 1

    def predict_many(self, records, batch_size: int = 32) -> list[PredictionOutcome]:
        records = list(records)
        outcomes = []
        for i in range(0, len(records), batch_size):
            outcomes.extend(self._predict_chunk(records[i : i + batch_size]))
        return outcomes

    def predict(self, current: PacketRecord) -> PredictionOutcome:
        return self._predict_chunk([current])[0]

    def _predict_chunk(self, records) -> list[PredictionOutcome]:
        texts = [serialize_packet(r, self.features) for r in records]
        cap = self.predictor.config.max_seq_len
        enc = [s.ids[: cap - 1] + (EOS,) if len(s) > cap else s.ids for s in
               self.vocab.encode_batch(texts, add_bos_eos=True)]
        generated = generate_batch(self.predictor, enc, self.max_new)
        predicted = [self.vocab.decode(g) for g in generated]

        parsed, errors = [], []
        for r, text in zip(records, predicted):
            try:
                parsed.append(parse_packet_text(text, self.features, r.flow_key, r.timestamp))
                errors.append(None)
            except PacketParseError as exc:
                parsed.append(None)
                errors.append(f"{type(exc).__name__}: {exc}")

        # the assessor and classifier see the generated ids as produced
        cur_ids = [s.ids for s in self.vocab.encode_batch(texts)]
        pred_ids = [tuple(g) for g in generated]
        pairs = [pack_pair(a, b, self.assessor.pair_max_len) for a, b in zip(cur_ids, pred_ids)]
        pair_p = assess_probabilities(self.assessor, pairs)

        ccap = self.classifier.config.max_seq_len
        cls_seqs = [(BOS, *ids[: ccap - 2], EOS) for ids in pred_ids]
        scores = classify_scores(self.classifier, cls_seqs)

        out = []
        for j, r in enumerate(records):
            k = int(np.argmax(pair_p[j]))
            v = verdict_from_score(float(scores[j]))
            out.append(
                PredictionOutcome(
                    current=r,
                    current_text=texts[j],
                    predicted_text=predicted[j],
                    predicted_record=parsed[j],
                    parse_error=errors[j],
                    assessor_verdict=PairLabel(k),
                    assessor_probability=float(pair_p[j, k]),
                    classifier_verdict=v,
                    classifier_probability=float(scores[j] if v is Verdict.MALICIOUS else 1.0 - scores[j]),
                    classifier_score=float(scores[j]),
                )
            )
        return out


def pipeline_predict(predictor, assessor, classifier, current: PacketRecord, vocab: BpeVocab, kept_features):
    return Pipeline(predictor, assessor, classifier, vocab, kept_features).predict(current)


def validity_rate(outcomes) -> float:
    """Fraction of outcomes the assessor judged Successive."""
    outcomes = list(outcomes)
    if not outcomes:
        return 0.0
    return sum(o.assessor_verdict is PairLabel.SUCCESSIVE for o in outcomes) / len(outcomes)
