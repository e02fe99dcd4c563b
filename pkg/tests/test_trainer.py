import json
from dataclasses import replace

import numpy as np
import pytest
from desk import TINY_MODEL, corpus

from pktseer.ingest import assemble_flows, labeled_packets, make_next_packet_pairs, make_pair_dataset
from pktseer.nn import tensor as T
from pktseer.nn.layers import ModelConfig, ModelParams
from pktseer.trainer import (
    EarlyStopping,
    History,
    TrainConfig,
    TrainingDiverged,
    TrainingError,
    _fit,
    class_weights,
    default_config,
    evaluate_assessor,
    evaluate_classifier,
    predictor_loss,
    split,
    train_assessor,
    train_classifier,
    train_predictor,
)


@pytest.fixture(scope="module")
def data():
    return corpus(600, 3, 400)


@pytest.fixture(scope="module")
def mcfg(data):
    return replace(TINY_MODEL, vocab_size=data.vocab.size)


def quick(**kw):
    base = dict(epochs=3, batch_size=16, learning_rate=3e-3, max_seq_len=64, early_stop_patience=10)
    return TrainConfig(**{**base, **kw})


# ------------------------------------------------------------------ split


def test_split_sizes_and_determinism():
    tr, va = split(range(100), 0.2, seed=1)
    assert (len(tr), len(va)) == (80, 20)
    assert sorted(tr + va) == list(range(100))
    assert split(range(100), 0.2, seed=1) == (tr, va)
    assert split(range(100), 0.2, seed=2) != (tr, va)


def test_split_stratified_90_10():
    labels = [0] * 90 + [1] * 10
    tr, va = split(list(range(100)), 0.2, seed=0, labels=labels)
    count = lambda part, c: sum(labels[i] == c for i in part)  # noqa: E731
    assert abs(count(va, 0) - 18) <= 1 and abs(count(va, 1) - 2) <= 1
    assert abs(count(tr, 0) - 72) <= 1 and abs(count(tr, 1) - 8) <= 1


def test_split_errors():
    with pytest.raises(ValueError):
        split(range(10), 0.0)
    with pytest.raises(ValueError):
        split(range(3), 0.5, labels=[0, 0, 1])


def test_class_weights_9_to_1():
    w = class_weights([0] * 90 + [1] * 10)
    assert abs(w[1] / w[0] - 9.0) <= 1e-9
    np.testing.assert_allclose(w, [100 / 180, 100 / 20])


# ---------------------------------------------------------------- config


def test_config_defaults_and_validation():
    c = default_config("classifier")
    assert (c.epochs, c.batch_size, c.early_stop_metric) == (4, 2, "val_accuracy")
    a = default_config("assessor")
    assert (a.epochs, a.learning_rate, a.batch_size, a.early_stop_patience) == (15, 5e-5, 128, 3)
    assert TrainConfig.from_dict(a.to_dict()) == a
    for bad in (dict(epochs=0), dict(batch_size=0), dict(early_stop_patience=-1), dict(early_stop_metric="f1")):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    with pytest.raises(ValueError):
        default_config("nope")


# -------------------------------------------------------------- stopping


def run_stopper(values, patience, metric="val_loss", min_delta=0.0):
    s = EarlyStopping(metric, patience, min_delta)
    for epoch, v in enumerate(values, 1):
        s.update(v)
        if s.should_stop:
            return epoch, s
    return len(values), s


def test_early_stop_patience_zero_stops_at_first_rise():
    epoch, s = run_stopper([1.0, 0.8, 0.6, 0.7, 0.5], patience=0)
    assert epoch == 4 and s.best_epoch == 3 and s.best_value == 0.6


def test_early_stop_patience_two():
    epoch, _ = run_stopper([1.0, 0.9, 0.95, 0.96, 0.97, 0.1], patience=2)
    assert epoch == 5


def test_early_stop_accuracy_maximises():
    epoch, s = run_stopper([0.5, 0.7, 0.6, 0.65], patience=1, metric="val_accuracy")
    assert epoch == 4 and s.best_value == 0.7


def test_min_delta_counts_tiny_gains_as_stalls():
    epoch, s = run_stopper([1.0, 0.99995, 0.9999, 0.99985], patience=1, min_delta=1e-3)
    assert epoch == 3
    assert s.best_epoch == 3  # the snapshot still follows the true best


class _Toy:
    """A one-parameter model for driving the epoch loop with scripted metrics."""

    def __init__(self):
        self.params = ModelParams(ModelConfig(vocab_size=1, d_model=1, n_heads=1, d_ff=1))
        self.params.add("w", np.zeros(1))


def _scripted_fit(val_losses, patience, step_loss=None):
    model = _Toy()
    cfg = TrainConfig(epochs=len(val_losses), batch_size=1, learning_rate=0.1, early_stop_patience=patience)
    seen = []

    def step(idx, epoch, b, rng):
        return step_loss(model) if step_loss else T.total(T.mul(model.params["w"] - 1.0, model.params["w"] - 1.0))

    def val():
        seen.append(float(model.params["w"].data[0]))
        return val_losses[len(seen) - 1], None

    history = History()
    _fit(model, cfg, 1, step, val, history)
    return model, history, seen


def test_fit_restores_best_snapshot():
    model, history, seen = _scripted_fit([3.0, 1.0, 2.0, 2.5, 2.6], patience=1)
    assert len(history) == 4 and history.stopped_early
    assert history.best_epoch == 2
    assert model.params["w"].data[0] == seen[1]
    assert [r.epoch for r in history] == [1, 2, 3, 4]


def test_fit_runs_all_epochs_without_stall():
    _, history, _ = _scripted_fit([5, 4, 3, 2, 1], patience=0)
    assert len(history) == 5 and not history.stopped_early and history.best_epoch == 5


def test_divergence_reports_step():
    with pytest.raises(TrainingDiverged) as e:
        _scripted_fit([1.0, 1.0], 3, step_loss=lambda m: T.scale(T.total(m.params["w"]), float("nan")))
    assert e.value.step == 1 and e.value.epoch == 1


def test_history_jsonl():
    _, history, _ = _scripted_fit([1.0, 0.5], patience=3)
    lines = history.to_jsonl().splitlines()
    assert len(lines) == 2
    assert set(json.loads(lines[0])) == {"epoch", "train_loss", "val_loss", "val_accuracy", "wall_ms", "phase"}


# -------------------------------------------------------------- training


def balanced_packets(data, n_per_class):
    labelled = labeled_packets(data.records)
    normal = [x for x in labelled if x[1] == 0][:n_per_class]
    bad = [x for x in labelled if x[1] == 1][:n_per_class]
    return normal + bad


def test_classifier_overfits_balanced_toy(data, mcfg):
    toy = balanced_packets(data, 20)
    cfg = quick(epochs=25, batch_size=8, val_fraction=0.25, early_stop_metric="val_accuracy", early_stop_patience=100)
    m, history = train_classifier(toy, data.vocab, data.features, cfg, mcfg)
    rep = evaluate_classifier(m, toy)
    assert rep.accuracy == 1.0
    assert len(history) == 25


def test_classifier_needs_both_classes(data, mcfg):
    with pytest.raises(TrainingError):
        train_classifier([(r, 0) for r in data.records[:10]], data.vocab, data.features, quick(), mcfg)


def test_reproducible_checkpoint_bytes(data, mcfg):
    toy = balanced_packets(data, 12)
    cfg = quick(epochs=2, batch_size=4)
    drop = replace(mcfg, dropout_prob=0.1)
    a, ha = train_classifier(toy, data.vocab, data.features, cfg, drop)
    b, hb = train_classifier(toy, data.vocab, data.features, cfg, drop)
    assert a.to_bytes() == b.to_bytes()
    assert [r.train_loss for r in ha] == [r.train_loss for r in hb]
    c, _ = train_classifier(toy, data.vocab, data.features, replace(cfg, seed=1), drop)
    assert c.to_bytes() != a.to_bytes()


def test_model_shorter_than_training_length(data, mcfg):
    with pytest.raises(TrainingError):
        train_classifier(balanced_packets(data, 4), data.vocab, data.features, quick(max_seq_len=128), mcfg)


def test_predictor_history_and_best_val(data, mcfg):
    pairs = make_next_packet_pairs(assemble_flows(data.records))[:120]
    cfg = quick(epochs=4, early_stop_patience=0)
    m, history = train_predictor(pairs, data.vocab, data.features, cfg, mcfg)
    assert 1 <= len(history) <= 4
    best = min(r.val_loss for r in history)
    assert best <= history.records[0].val_loss
    assert history.records[history.best_epoch - 1].val_loss == best
    nll, acc = predictor_loss(m, pairs)
    assert np.isfinite(nll) and 0.0 <= acc <= 1.0


def test_predictor_rejects_empty(data, mcfg):
    with pytest.raises(TrainingError):
        train_predictor([], data.vocab, data.features, quick(), mcfg)


def test_assessor_mlm_phase_and_eval(data, mcfg):
    examples = make_pair_dataset(assemble_flows(data.records[:200]), 1.0, seed=0)
    cfg = quick(epochs=2, mlm_warmup_epochs=1, max_seq_len=40)
    m, history = train_assessor(examples, data.vocab, data.features, cfg, mcfg)
    assert [r.phase for r in history] == ["mlm", "train", "train"]
    assert m.pair_max_len == 40
    rep = evaluate_assessor(m, examples)
    assert rep.total == len(examples) and rep.class_names == ("Successive", "NonSuccessive")


def test_assessor_needs_both_labels(data, mcfg):
    examples = [e for e in make_pair_dataset(assemble_flows(data.records[:100]), 1.0, 0) if e.label == 0]
    with pytest.raises(TrainingError):
        train_assessor(examples, data.vocab, data.features, quick(), mcfg)
