import json
from dataclasses import replace

import numpy as np
import pytest
from desk import TINY_MODEL, corpus

from pktseer.ingest import PairLabel, Verdict
from pktseer.models import (
    AssessorModel,
    ClassifierModel,
    ModelError,
    Pipeline,
    PredictorModel,
    assess_pair,
    assess_probabilities,
    classify_packet,
    classify_scores,
    generate_batch,
    generate_next_packet,
    load_model,
    pad_batch,
    pipeline_predict,
    validity_rate,
    verdict_from_score,
)
from pktseer.tokenizer import BOS, CLS, EOS, TokenSequence, serialize_packet, train_bpe
from pktseer.trainer import TrainConfig, train_predictor


@pytest.fixture(scope="module")
def data():
    return corpus(600, 3, 400)


@pytest.fixture(scope="module")
def cfg(data):
    return replace(TINY_MODEL, vocab_size=data.vocab.size)


@pytest.fixture(scope="module")
def models(data, cfg):
    mk = lambda cls, s: cls.create(cfg, data.vocab, data.features, seed=s)  # noqa: E731
    return mk(PredictorModel, 1), mk(AssessorModel, 2), mk(ClassifierModel, 3)


def _zero_head(model, prefix):
    for k in (f"{prefix}.W", f"{prefix}.b"):
        model.params[k].data[...] = 0


def test_pad_batch():
    ids, mask = pad_batch([TokenSequence((1, 2, 3)), (4,)])
    np.testing.assert_array_equal(ids, [[1, 2, 3], [4, 0, 0]])
    np.testing.assert_array_equal(mask, [[1, 1, 1], [1, 0, 0]])


# --------------------------------------------------------------- assessor


def test_assessor_zeroed_head_ties_to_successive(data, cfg):
    m = AssessorModel.create(cfg, data.vocab, data.features, seed=0)
    _zero_head(m, "pair_head")
    a, b = data.records[:2]
    label, p = assess_pair(m, m.pack(a, b))
    assert label is PairLabel.SUCCESSIVE and p == pytest.approx(0.5, abs=1e-12)


def test_assessor_probabilities_sum_to_one(data, models):
    _, m, _ = models
    recs = data.records
    seqs = [m.pack(recs[i], recs[i + 7]) for i in range(40)]
    p = assess_probabilities(m, seqs, batch_size=16)
    assert p.shape == (40, 2)
    np.testing.assert_allclose(p.sum(1), 1, atol=1e-5)
    # batching does not change results
    np.testing.assert_allclose(p, assess_probabilities(m, seqs, batch_size=7), atol=1e-6)


def test_assessor_requires_cls(models):
    _, m, _ = models
    with pytest.raises(ModelError):
        assess_pair(m, TokenSequence((BOS, 300, EOS)))


def test_assessor_padding_invariance(data, models):
    """Trailing PAD never changes the verdict."""
    _, m, _ = models
    seq = m.pack(data.records[0], data.records[1])
    longer = TokenSequence(seq.ids + (0,) * 10)
    assert assess_pair(m, seq) == pytest.approx(assess_pair(m, longer))


# ------------------------------------------------------------- classifier


def test_classifier_zeroed_head_is_normal(data, cfg):
    m = ClassifierModel.create(cfg, data.vocab, data.features, seed=0)
    _zero_head(m, "cls_head")
    verdict, prob, score = classify_packet(m, m.encode_packet(data.records[0]))
    assert verdict is Verdict.NORMAL and prob == 0.5 and score == 0.5


def test_classifier_scores_in_unit_interval(data, models):
    _, _, m = models
    rng = np.random.default_rng(0)
    seqs = [TokenSequence((BOS, *rng.integers(6, data.vocab.size, int(rng.integers(0, 30))).tolist(), EOS)) for _ in range(50)]
    s = classify_scores(m, seqs)
    assert np.all((s >= 0) & (s <= 1))
    for seq, sc in zip(seqs[:5], s[:5]):
        v, p, score = classify_packet(m, seq)
        assert score == pytest.approx(sc, abs=1e-6)
        assert (v is Verdict.MALICIOUS) == (score > 0.5)
        assert p == pytest.approx(max(score, 1 - score))


def test_classifier_over_length(models):
    _, _, m = models
    with pytest.raises(ModelError):
        classify_packet(m, TokenSequence((BOS,) + (300,) * 64 + (EOS,)))
    with pytest.raises(ModelError):
        classify_packet(m, TokenSequence(()))


def test_verdict_threshold():
    assert verdict_from_score(0.5) is Verdict.NORMAL
    assert verdict_from_score(0.5000001) is Verdict.MALICIOUS


def test_classifier_reads_last_real_position(data, models):
    """Padding a batch must not change any sequence's score."""
    _, _, m = models
    short = m.encode_packet(data.records[0])
    long = TokenSequence((BOS,) + (300,) * 40 + (EOS,))
    alone = classify_scores(m, [short])[0]
    batched = classify_scores(m, [short, long])[0]
    assert alone == pytest.approx(batched, abs=1e-6)


# -------------------------------------------------------------- predictor


def test_generation_max_new_zero(data, models):
    p, _, _ = models
    assert generate_next_packet(p, p.encode_packet(data.records[0]), data.vocab, 0) == ""


def test_generation_deterministic_and_bounded(data, models):
    p, _, _ = models
    seqs = [p.encode_packet(r) for r in data.records[:6]]
    a = generate_batch(p, seqs, 12)
    assert a == generate_batch(p, seqs, 12)
    assert all(len(g) <= 12 and EOS not in g for g in a)
    # lock-step batching equals one-at-a-time decoding
    assert a == [generate_batch(p, [s], 12)[0] for s in seqs]


def test_generation_rejects_empty(data, models):
    p, _, _ = models
    with pytest.raises(ModelError):
        generate_next_packet(p, TokenSequence(()), data.vocab, 5)


def test_copy_task_reproduces_inputs(data, cfg):
    recs = list(data.records[:8])
    pairs = [(r, r) for r in recs]
    tc = TrainConfig(
        epochs=150, batch_size=8, learning_rate=3e-3, early_stop_patience=1000, max_seq_len=64, denoise_fraction=0.0
    )
    m, _ = train_predictor(pairs, data.vocab, data.features, tc, cfg, val_pairs=pairs)
    for r in recs:
        text = serialize_packet(r, data.features)
        assert generate_next_packet(m, m.encode_packet(r), data.vocab, 40) == text


# ------------------------------------------------------------ persistence


@pytest.mark.parametrize("which", [0, 1, 2])
def test_checkpoint_round_trip(data, models, which, tmp_path):
    m = models[which]
    blob = m.save(tmp_path / "m.ckpt")
    back = load_model(tmp_path / "m.ckpt", data.vocab)
    assert type(back) is type(m) and back.features == m.features
    assert back.to_bytes() == blob


def test_load_model_rejects_other_vocab(data, models):
    other = train_bpe(["completely different corpus text"] * 3, data.vocab.size)
    with pytest.raises(ModelError, match="different vocabulary"):
        load_model(models[0].to_bytes(), other)


def test_model_vocab_size_must_match(data, cfg):
    with pytest.raises(ModelError):
        PredictorModel.create(replace(cfg, vocab_size=cfg.vocab_size + 1), data.vocab, data.features)


# --------------------------------------------------------------- pipeline


def test_pipeline_untrained_is_total_and_deterministic(data, models):
    p, a, c = models
    pipe = Pipeline(p, a, c, data.vocab, data.features, max_new=20)
    recs = list(data.records[:10])
    out = pipe.predict_many(recs, batch_size=4)
    assert len(out) == 10
    assert [o.to_json() for o in out] == [o.to_json() for o in pipe.predict_many(recs, batch_size=4)]
    # other batch shapes change float rounding only
    regrouped = pipe.predict_many(recs, batch_size=3)
    assert [o.predicted_text for o in out] == [o.predicted_text for o in regrouped]
    np.testing.assert_allclose([o.classifier_score for o in out], [o.classifier_score for o in regrouped], atol=1e-5)
    for o, r in zip(out, recs):
        assert o.current is r
        assert o.malformed == (o.predicted_record is None) == (o.parse_error is not None)
        d = json.loads(o.to_json())
        assert d["malformed"] == o.malformed
        assert d["classifier"]["verdict"] in {"Normal", "Malicious"}
        assert (o.classifier_verdict is Verdict.MALICIOUS) == (o.classifier_score > 0.5)
    # an untrained predictor produces garbage: those outcomes are malformed, not errors
    assert any(o.malformed for o in out)
    assert 0.0 <= validity_rate(out) <= 1.0


def test_pipeline_single_matches_batch(data, models):
    p, a, c = models
    r = data.records[5]
    one = pipeline_predict(p, a, c, r, data.vocab, data.features)
    many = Pipeline(p, a, c, data.vocab, data.features).predict_many([data.records[4], r])[1]
    assert one.predicted_text == many.predicted_text
    assert one.classifier_score == pytest.approx(many.classifier_score, abs=1e-6)


def test_pipeline_with_copy_predictor_parses(data, cfg):
    """A predictor that emits a well-formed packet yields a parsed record."""
    recs = list(data.records[:4])
    tc = TrainConfig(epochs=120, batch_size=4, learning_rate=3e-3, early_stop_patience=1000, max_seq_len=64, denoise_fraction=0.0)
    p, _ = train_predictor([(r, r) for r in recs], data.vocab, data.features, tc, cfg, val_pairs=[(r, r) for r in recs])
    a = AssessorModel.create(cfg, data.vocab, data.features, seed=0)
    c = ClassifierModel.create(cfg, data.vocab, data.features, seed=0)
    out = Pipeline(p, a, c, data.vocab, data.features).predict_many(recs)
    for o, r in zip(out, recs):
        assert not o.malformed
        assert o.predicted_record.features == r.features
        assert o.predicted_record.flow_key == r.flow_key


def test_pipeline_vocab_mismatch(data, cfg, models):
    p, a, _ = models
    other = corpus(600, 4, 400).vocab  # same size, different merges
    assert other.size == data.vocab.size and other != data.vocab
    c = ClassifierModel.create(cfg, other, data.features)
    with pytest.raises(ModelError):
        Pipeline(p, a, c, data.vocab, data.features)
