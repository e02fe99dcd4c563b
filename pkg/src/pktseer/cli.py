"""Command-line entry point: ``pktseer <command> ...``.

Every command writes a JSON run manifest (inputs and outputs with sha256
digests, resolved settings, counters, status). Exit codes: 0 success,
2 usage/config error, 3 data error, 4 training divergence.

Settings resolve as: command-line flag, then the ``--config`` INI file, then
built-in defaults. The seed falls back to ``$PKTSEER_SEED`` and then 0.
"""

from __future__ import annotations

import argparse
import configparser
import datetime as _dt
import hashlib
import io
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

from . import __version__, _accel
from .featsel import FeatureMatrix, SelectionError, select_features
from .ingest import (
    HeaderError,
    IngestError,
    PacketRecord,
    assemble_flows,
    labeled_packets,
    make_next_packet_pairs,
    make_pair_dataset,
    parse_feature_csv,
    parse_raw_capture,
    write_feature_csv,
)
from .models import ModelError, Pipeline, PredictorModel, load_model, validity_rate
from .nn.layers import ModelConfig
from .synth import SynthScenario, generate, malicious_count
from .tokenizer import BpeVocab, serialize_packet, train_bpe
from .trainer import (
    TrainConfig,
    TrainingDiverged,
    TrainingError,
    default_config,
    evaluate_assessor,
    evaluate_classifier,
    predictor_loss,
    train_assessor,
    train_classifier,
    train_predictor,
)

log = logging.getLogger("pktseer")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# ------------------------------------------------------------------ config


class Settings:
    """Flag > INI section value > default lookup for one command."""

    def __init__(self, args, ini: configparser.ConfigParser | None, sections):
        self.args = args
        self.ini = ini
        self.sections = [s for s in sections if ini is not None and ini.has_section(s)]
        self.used: dict[str, object] = {}

    def get(self, name: str, default, kind=None):
        kind = kind or (type(default) if default is not None else str)
        value = getattr(self.args, name, None)
        if value is None:
            key = name.replace("_", "-")
            for s in reversed(self.sections):  # later sections are more specific
                for k in (key, name):
                    if self.ini.has_option(s, k):
                        raw = self.ini.get(s, k)
                        try:
                            value = _convert(raw, kind)
                        except ValueError as exc:
                            raise UsageError(f"config [{s}] {k} = {raw!r}: {exc}") from None
                        break
                if value is not None:
                    break
        if value is None:
            value = default
        self.used[name] = value
        return value


def _convert(raw: str, kind):
    if kind is bool:
        low = raw.strip().lower()
        if low in {"1", "true", "yes", "on"}:
            return True
        if low in {"0", "false", "no", "off"}:
            return False
        raise ValueError("expected a boolean")
    return kind(raw.strip())


def _load_ini(path) -> configparser.ConfigParser | None:
    if path is None:
        return None
    ini = configparser.ConfigParser()
    try:
        with open(path, encoding="utf-8") as fh:
            ini.read_file(fh)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except configparser.Error as exc:
        raise UsageError(f"cannot parse config file {path}: {exc}") from None
    return ini


def resolve_seed(flag, settings: Settings | None = None) -> int:
    if flag is not None:
        return int(flag)
    if settings is not None:
        v = settings.get("seed", None, int)
        if v is not None:
            return int(v)
    env = os.environ.get("PKTSEER_SEED")
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"PKTSEER_SEED must be an integer, got {env!r}") from None
    return 0


# ---------------------------------------------------------------- manifest


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="milliseconds")


class RunManifest:
    def __init__(self, command: str, argv):
        self.command = command
        self.argv = list(argv)
        self.config: dict = {}
        self.inputs: list[dict] = []
        self.artifacts: list[dict] = []
        self.counters: dict = {}
        self.seed: int | None = None
        self.started = _now()
        self.finished: str | None = None
        self.status = "running"
        self.error: dict | None = None

    def add_input(self, path):
        if path is None or str(path) == "-":
            self.inputs.append({"path": "-", "sha256": None})
        else:
            self.inputs.append({"path": str(path), "sha256": sha256_file(path)})

    def add_artifact(self, path, kind: str):
        if path is None or str(path) == "-":
            self.artifacts.append({"path": "-", "kind": kind, "sha256": None})
        else:
            self.artifacts.append({"path": str(path), "kind": kind, "sha256": sha256_file(path)})

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "argv": self.argv,
            "version": __version__,
            "backend": _accel.backend_name(),
            "seed": self.seed,
            "config": self.config,
            "inputs": self.inputs,
            "artifacts": self.artifacts,
            "counters": self.counters,
            "started": self.started,
            "finished": self.finished,
            "status": self.status,
            "error": self.error,
        }

    def write(self, path):
        self.finished = _now()
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True, default=str) + "\n")


# ------------------------------------------------------------------ helpers


def _read_dataset(path, manifest: RunManifest) -> list[PacketRecord]:
    if not Path(path).is_file():
        raise UsageError(f"input not found: {path}")
    manifest.add_input(path)
    records, report = parse_feature_csv(Path(path).read_bytes())
    manifest.counters.update({f"{path}:rows": report.rows, f"{path}:skipped": sum(report.skip_reasons.values())})
    if not records:
        raise DataError(f"{path}: no usable rows")
    return records


def _read_vocab(path, manifest: RunManifest) -> BpeVocab:
    if not Path(path).is_file():
        raise UsageError(f"vocabulary not found: {path}")
    manifest.add_input(path)
    try:
        return BpeVocab.load(path)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None


def _write_text(path, text: str):
    Path(path).write_text(text, encoding="utf-8", newline="\n")


def _default_manifest(out) -> str:
    return f"{out}.manifest.json"


# ---------------------------------------------------------------- commands


def cmd_synth(args, m: RunManifest, ini):
    s = Settings(args, ini, ["synth"])
    seed = resolve_seed(args.seed, s)
    lo_hi = args.flow_len or [s.get("flow_len_min", 10, int), s.get("flow_len_max", 40, int)]
    try:
        scenario = SynthScenario(
            n_packets=s.get("packets", 5000, int),
            flow_len_range=(int(lo_hi[0]), int(lo_hi[1])),
            malicious_fraction=s.get("malicious_fraction", 0.3, float),
            seed=seed,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    m.seed = seed
    m.config = {**s.used, "flow_len_range": list(scenario.flow_len_range), "seed": seed}
    records = generate(scenario)
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        write_feature_csv(records, fh, with_label=True)
    m.counters.update(
        rows=len(records),
        malicious_rows=malicious_count(records),
        flows=len(assemble_flows(records)),
    )
    m.add_artifact(args.out, "dataset")
    log.info("wrote %d packets (%d malicious) to %s", len(records), m.counters["malicious_rows"], args.out)


def cmd_ingest(args, m: RunManifest, ini):
    all_records = []
    totals = {"rows": 0, "records": 0, "skipped": 0, "missing_cells": 0, "truncated": 0}
    reasons: dict[str, int] = {}
    for path in args.inputs:
        if not Path(path).is_file():
            raise UsageError(f"input not found: {path}")
        m.add_input(path)
        blob = Path(path).read_bytes()
        try:
            if args.format == "capture":
                records, report = parse_raw_capture(blob)
            else:
                records, report = parse_feature_csv(blob)
        except HeaderError as exc:
            # the columns do not match the expected layout: a usage problem
            raise UsageError(f"{path}: {exc}") from None
        except IngestError as exc:
            raise DataError(f"{path}: {exc}") from None
        for line in report.lines():
            print(f"{path}: {line}", file=sys.stderr)
        for w in report.warnings:
            log.warning("%s: %s", path, w)
        d = report.to_dict()
        for k in totals:
            totals[k] += int(d.get(k, 0) or 0)
        for k, v in report.skip_reasons.items():
            reasons[k] = reasons.get(k, 0) + v
        if all_records and records and records[0].names != all_records[0].names:
            raise DataError(f"{path}: feature columns differ from earlier inputs")
        all_records.extend(records)
    if not all_records:
        raise DataError("no usable records in input")
    m.config = {"format": args.format}
    m.counters.update(totals, skip_reasons=reasons)
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        write_feature_csv(all_records, fh)
    m.add_artifact(args.out, "dataset")
    log.info("read %d rows, kept %d records, skipped %d", totals["rows"], len(all_records), totals["skipped"])


def cmd_select_features(args, m: RunManifest, ini):
    s = Settings(args, ini, ["select-features", "select"])
    var_t = s.get("var_threshold", 0.25, float)
    corr_t = s.get("corr_threshold", 0.98, float)
    m.config = dict(s.used)
    records = _read_dataset(args.dataset, m)
    try:
        _, report = select_features(FeatureMatrix.from_records(records), var_t, corr_t)
    except SelectionError as exc:
        raise DataError(str(exc)) from None
    reduced = [r.select(report.kept) for r in records]
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        write_feature_csv(reduced, fh)
    m.add_artifact(args.out, "dataset")
    report_path = args.report or f"{args.out}.selection.json"
    _write_text(report_path, json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    m.add_artifact(report_path, "selection_report")
    m.counters.update(features_in=len(records[0].names), features_kept=len(report.kept))
    print(report.table())


def cmd_train_tokenizer(args, m: RunManifest, ini):
    s = Settings(args, ini, ["train-tokenizer", "tokenizer"])
    size = s.get("vocab_size", 512, int)
    min_freq = s.get("min_frequency", 2, int)
    m.config = dict(s.used)
    records = _read_dataset(args.dataset, m)
    features = list(records[0].names)
    try:
        vocab = train_bpe([serialize_packet(r, features) for r in records], size, min_freq)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    vocab.save(args.out)
    m.add_artifact(args.out, "vocabulary")
    m.counters.update(texts=len(records), vocab_size=vocab.size, merges=len(vocab.merges))
    log.info("vocabulary of %d tokens written to %s", vocab.size, args.out)


def _model_config(s: Settings, vocab: BpeVocab) -> ModelConfig:
    d = ModelConfig()
    try:
        return ModelConfig(
            vocab_size=vocab.size,
            d_model=s.get("d_model", d.d_model, int),
            n_heads=s.get("n_heads", d.n_heads, int),
            n_enc_layers=s.get("enc_layers", d.n_enc_layers, int),
            n_dec_layers=s.get("dec_layers", d.n_dec_layers, int),
            d_ff=s.get("d_ff", d.d_ff, int),
            max_seq_len=s.get("model_max_seq_len", d.max_seq_len, int),
            dropout_prob=s.get("dropout", d.dropout_prob, float),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _train_config(s: Settings, kind: str, seed: int) -> TrainConfig:
    d = default_config(kind)
    try:
        return replace(
            d,
            epochs=s.get("epochs", d.epochs, int),
            batch_size=s.get("batch_size", d.batch_size, int),
            learning_rate=s.get("lr", d.learning_rate, float),
            seed=seed,
            early_stop_patience=s.get("patience", d.early_stop_patience, int),
            early_stop_metric=s.get("metric", d.early_stop_metric, str),
            max_seq_len=s.get("max_seq_len", d.max_seq_len, int),
            min_delta=s.get("min_delta", d.min_delta, float),
            val_fraction=s.get("val_fraction", d.val_fraction, float),
            grad_clip=s.get("grad_clip", d.grad_clip, float) or None,
            denoise_fraction=s.get("denoise_fraction", d.denoise_fraction, float),
            mlm_warmup_epochs=s.get("mlm_warmup_epochs", d.mlm_warmup_epochs, int),
            mask_prob=s.get("mask_prob", d.mask_prob, float),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_train(args, m: RunManifest, ini):
    s = Settings(args, ini, ["train", "model", args.model])
    seed = resolve_seed(args.seed, s)
    m.seed = seed
    records = _read_dataset(args.dataset, m)
    vocab = _read_vocab(args.vocab, m)
    features = list(records[0].names)
    cfg = _train_config(s, args.model, seed)
    mcfg = _model_config(s, vocab)
    if mcfg.max_seq_len < cfg.max_seq_len:
        mcfg = replace(mcfg, max_seq_len=cfg.max_seq_len)
    m.config = {"train": cfg.to_dict(), "model": mcfg.to_dict(), "features": features}

    try:
        if args.model == "predictor":
            flows = assemble_flows(records)
            pairs = make_next_packet_pairs(flows)
            if not pairs:
                raise DataError("no flow has two or more packets; cannot build next-packet pairs")
            m.counters.update(flows=len(flows), pairs=len(pairs))
            model, history = train_predictor(pairs, vocab, features, cfg, mcfg)
        elif args.model == "assessor":
            ratio = s.get("negative_ratio", 1.0, float)
            m.config["negative_ratio"] = ratio
            flows = assemble_flows(records)
            examples = make_pair_dataset(flows, ratio, seed)
            m.counters.update(flows=len(flows), pairs=len(examples))
            model, history = train_assessor(examples, vocab, features, cfg, mcfg)
        else:
            data = labeled_packets(records)
            if len(data) < len(records):
                raise DataError(f"{len(records) - len(data)} rows lack a label; classifier needs labels")
            m.counters.update(packets=len(data), malicious=sum(c for _, c in data))
            model, history = train_classifier(data, vocab, features, cfg, mcfg)
    except (TrainingError, ValueError) as exc:
        if isinstance(exc, TrainingDiverged):
            raise
        raise DataError(str(exc)) from None

    model.save(args.out)
    m.add_artifact(args.out, "checkpoint")
    hist_path = args.history or f"{args.out}.history.jsonl"
    _write_text(hist_path, history.to_jsonl())
    m.add_artifact(hist_path, "history")
    m.counters.update(epochs_run=len(history.phase("train")), best_epoch=history.best_epoch)
    for r in history:
        log.info(
            "%s epoch %d: train %.4f val %.4f acc %s (%.0f ms)",
            r.phase, r.epoch, r.train_loss, r.val_loss,
            "-" if r.val_accuracy is None else f"{r.val_accuracy:.4f}", r.wall_ms,
        )


def cmd_evaluate(args, m: RunManifest, ini):
    s = Settings(args, ini, ["evaluate"])
    seed = resolve_seed(args.seed, s)
    m.seed = seed
    records = _read_dataset(args.dataset, m)
    vocab = _read_vocab(args.vocab, m)
    if not Path(args.checkpoint).is_file():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    m.add_input(args.checkpoint)
    try:
        model = load_model(args.checkpoint, vocab)
    except (ModelError, ValueError) as exc:
        raise DataError(f"{args.checkpoint}: {exc}") from None
    if list(records[0].names) != model.features:
        raise DataError(f"dataset features {list(records[0].names)} differ from model features {model.features}")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    m.config = {"kind": model.kind}

    if isinstance(model, PredictorModel):
        pairs = make_next_packet_pairs(assemble_flows(records))
        if not pairs:
            raise DataError("no next-packet pairs in dataset")
        nll, acc = predictor_loss(model, pairs)
        doc = {"kind": "predictor", "pairs": len(pairs), "token_nll": nll, "token_accuracy": acc}
        _write_text(out / "report.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")
        m.add_artifact(out / "report.json", "report")
        print(f"pairs {len(pairs)}  token NLL {nll:.4f}  token accuracy {acc:.4f}")
        return

    if model.kind == "assessor":
        ratio = s.get("negative_ratio", 1.0, float)
        m.config["negative_ratio"] = ratio
        try:
            data = make_pair_dataset(assemble_flows(records), ratio, seed)
        except ValueError as exc:
            raise DataError(str(exc)) from None
        report = evaluate_assessor(model, data)
    else:
        data = labeled_packets(records)
        if not data:
            raise DataError("dataset has no labels")
        report = evaluate_classifier(model, data)

    _write_text(out / "report.txt", report.table())
    _write_text(out / "report.json", report.to_json())
    _write_text(out / "roc.csv", report.roc_csv())
    for name, kind in (("report.txt", "report_table"), ("report.json", "report"), ("roc.csv", "roc")):
        m.add_artifact(out / name, kind)
    m.counters.update(examples=report.total)
    print(report.table(), end="")


def _iter_stdin_records(batch: int):
    """Parse a CSV stream from stdin in chunks of ``batch`` rows (header repeated)."""
    header = sys.stdin.readline()
    if not header:
        return
    chunk = []
    for line in sys.stdin:
        if not line.strip():
            continue
        chunk.append(line)
        if len(chunk) >= batch:
            yield parse_feature_csv(header + "".join(chunk))[0]
            chunk = []
    if chunk:
        yield parse_feature_csv(header + "".join(chunk))[0]


def cmd_predict(args, m: RunManifest, ini):
    s = Settings(args, ini, ["predict"])
    batch = s.get("batch_size", 32, int)
    workers = s.get("workers", 1, int)
    max_new = s.get("max_new", None, int)
    if batch < 1 or workers < 1:
        raise UsageError("--batch-size and --workers must be >= 1")
    m.config = dict(s.used)
    vocab = _read_vocab(args.vocab, m)
    models = []
    for role, path in (("predictor", args.predictor), ("assessor", args.assessor), ("classifier", args.classifier)):
        if not Path(path).is_file():
            raise UsageError(f"{role} checkpoint not found: {path}")
        m.add_input(path)
        try:
            mdl = load_model(path, vocab)
        except (ModelError, ValueError) as exc:
            raise DataError(f"{path}: {exc}") from None
        if mdl.kind != role:
            raise UsageError(f"{path} holds a {mdl.kind} model, expected {role}")
        models.append(mdl)
    try:
        pipe = Pipeline(*models, vocab, models[0].features, max_new=max_new)
    except ModelError as exc:
        raise DataError(str(exc)) from None

    if args.stream or args.dataset == "-":
        m.add_input("-")
        chunks = _iter_stdin_records(batch)
    else:
        records = _read_dataset(args.dataset, m)
        chunks = (records[i : i + batch] for i in range(0, len(records), batch))

    out = sys.stdout if args.out in (None, "-") else open(args.out, "w", encoding="utf-8", newline="\n")
    outcomes = []
    try:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            # map() yields in submission order: output order matches input order
            for result in pool.map(lambda c: pipe.predict_many(c, batch), chunks):
                for o in result:
                    out.write(o.to_json() + "\n")
                    outcomes.append(o)
                if args.stream:
                    out.flush()
    finally:
        if out is not sys.stdout:
            out.close()
    if args.out not in (None, "-"):
        m.add_artifact(args.out, "predictions")
    rate = validity_rate(outcomes)
    malformed = sum(o.malformed for o in outcomes)
    m.counters.update(packets=len(outcomes), validity_rate=rate, malformed=malformed)
    print(
        f"predicted {len(outcomes)} packets: validity rate {rate:.4f} (assessor Successive), "
        f"malformed {malformed}",
        file=sys.stderr,
    )


# ------------------------------------------------------------------ parser


def _add_common(p: argparse.ArgumentParser, out_required=True):
    p.add_argument("--config", metavar="INI", help="INI file with default settings (flags override it)")
    p.add_argument("--manifest", metavar="PATH", help="run manifest path (default: <out>.manifest.json)")
    p.add_argument("-q", "--quiet", action="store_true", help="only print warnings and errors")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pktseer", description="Next-packet prediction and packet classification toolkit.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", help="generate a labeled synthetic packet CSV")
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--packets", type=int, help="number of packet rows (default 5000)")
    p.add_argument("--malicious-fraction", type=float, help="share of malicious rows in [0, 1] (default 0.3)")
    p.add_argument("--flow-len", type=int, nargs=2, metavar=("MIN", "MAX"), help="flow length range (default 10 40)")
    p.add_argument("--seed", type=int, help="random seed (default $PKTSEER_SEED or 0)")
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="read packet CSVs or raw captures into the dataset CSV format")
    p.add_argument("inputs", nargs="+", help="input files")
    p.add_argument("--format", choices=("csv", "capture"), default="csv", help="input format (default csv)")
    p.add_argument("--out", required=True, help="output dataset CSV")
    _add_common(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("select-features", help="variance then correlation feature filtering")
    p.add_argument("dataset", help="input dataset CSV")
    p.add_argument("--out", required=True, help="reduced dataset CSV")
    p.add_argument("--report", help="selection report JSON (default <out>.selection.json)")
    p.add_argument("--var-threshold", type=float, help="variance threshold as a fraction of 0.25 (default 0.25)")
    p.add_argument("--corr-threshold", type=float, help="|Pearson r| above which a column is dropped (default 0.98)")
    _add_common(p)
    p.set_defaults(func=cmd_select_features)

    p = sub.add_parser("train-tokenizer", help="learn a BPE vocabulary from packet texts")
    p.add_argument("dataset", help="input dataset CSV")
    p.add_argument("--out", required=True, help="vocabulary file")
    p.add_argument("--vocab-size", type=int, help="target vocabulary size (default 512)")
    p.add_argument("--min-frequency", type=int, help="stop when the best pair is rarer than this (default 2)")
    _add_common(p)
    p.set_defaults(func=cmd_train_tokenizer)

    p = sub.add_parser("train", help="train the predictor, assessor or classifier")
    p.add_argument("model", choices=("predictor", "assessor", "classifier"))
    p.add_argument("dataset", help="dataset CSV")
    p.add_argument("--vocab", required=True, help="vocabulary file")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--history", help="per-epoch history JSONL (default <out>.history.jsonl)")
    p.add_argument("--seed", type=int, help="random seed (default $PKTSEER_SEED or 0)")
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int, help="maximum epochs (default 15; classifier 4)")
    g.add_argument("--batch-size", type=int, help="batch size (default 128; classifier 2)")
    g.add_argument("--lr", type=float, help="Adam learning rate (default 5e-5)")
    g.add_argument("--patience", type=int, help="early-stopping patience in epochs (default 3)")
    g.add_argument("--metric", choices=("val_loss", "val_accuracy"), help="early-stopping metric")
    g.add_argument("--min-delta", type=float, help="minimum improvement that resets patience (default 1e-4)")
    g.add_argument("--val-fraction", type=float, help="validation share (default 0.2)")
    g.add_argument("--max-seq-len", type=int, help="token truncation length (default 192)")
    g.add_argument("--grad-clip", type=float, help="global gradient-norm clip, 0 disables (default 1.0)")
    g.add_argument("--denoise-fraction", type=float, help="predictor: share of denoising steps (default 0.2)")
    g.add_argument("--mlm-warmup-epochs", type=int, help="assessor: MLM warm-up epochs (default 3)")
    g.add_argument("--mask-prob", type=float, help="assessor: MLM masking probability (default 0.15)")
    g.add_argument("--negative-ratio", type=float, help="assessor: negatives per positive pair (default 1.0)")
    g = p.add_argument_group("model")
    g.add_argument("--d-model", type=int, help="hidden width (default 64)")
    g.add_argument("--n-heads", type=int, help="attention heads (default 4)")
    g.add_argument("--enc-layers", type=int, help="encoder blocks (default 2)")
    g.add_argument("--dec-layers", type=int, help="decoder blocks (default 2)")
    g.add_argument("--d-ff", type=int, help="feed-forward width (default 256)")
    g.add_argument("--dropout", type=float, help="dropout probability (default 0.1)")
    g.add_argument("--model-max-seq-len", type=int, help="position table size (default 192)")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a dataset")
    p.add_argument("checkpoint", help="model checkpoint")
    p.add_argument("dataset", help="dataset CSV")
    p.add_argument("--vocab", required=True, help="vocabulary file")
    p.add_argument("--out-dir", required=True, help="directory for report.txt, report.json, roc.csv")
    p.add_argument("--negative-ratio", type=float, help="assessor: negatives per positive pair (default 1.0)")
    p.add_argument("--seed", type=int, help="seed for negative-pair sampling (default $PKTSEER_SEED or 0)")
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="run predict -> assess -> classify over packets")
    p.add_argument("dataset", help="dataset CSV, or - for stdin")
    p.add_argument("--predictor", required=True, help="predictor checkpoint")
    p.add_argument("--assessor", required=True, help="assessor checkpoint")
    p.add_argument("--classifier", required=True, help="classifier checkpoint")
    p.add_argument("--vocab", required=True, help="vocabulary file")
    p.add_argument("--out", help="JSONL output (default stdout)")
    p.add_argument("--stream", action="store_true", help="read CSV rows from stdin and flush each batch")
    p.add_argument("--batch-size", type=int, help="packets per batch (default 32)")
    p.add_argument("--workers", type=int, help="worker threads; output order is preserved (default 1)")
    p.add_argument("--max-new", type=int, help="generation budget in tokens (default max_seq_len - 1)")
    _add_common(p)
    p.set_defaults(func=cmd_predict)
    return ap


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(message)s",
        stream=sys.stderr,
    )
    command = args.command if args.command != "train" else f"train {args.model}"
    manifest = RunManifest(command, argv)
    out = getattr(args, "out", None) or getattr(args, "out_dir", None)
    manifest_path = args.manifest or (_default_manifest(out) if out not in (None, "-") else f"pktseer-{args.command}.manifest.json")

    code = EXIT_OK
    try:
        ini = _load_ini(args.config)
        args.func(args, manifest, ini)
        manifest.status = "ok"
    except (UsageError, HeaderError) as exc:
        code = EXIT_USAGE
        manifest.status, manifest.error = "error", {"type": "usage", "message": str(exc)}
    except (DataError, IngestError, SelectionError) as exc:
        code = EXIT_DATA
        manifest.status, manifest.error = "error", {"type": "data", "message": str(exc)}
    except TrainingDiverged as exc:
        code = EXIT_DIVERGED
        manifest.status = "error"
        manifest.error = {"type": "diverged", "message": str(exc), "step": exc.step, "batch_ids": exc.batch_ids}
    except OSError as exc:
        # an output path that cannot be written is a usage problem, not a crash
        code = EXIT_USAGE
        manifest.status, manifest.error = "error", {"type": "io", "message": f"{exc.strerror}: {exc.filename}"}
    if code:
        print(f"pktseer {command}: error: {manifest.error['message']}", file=sys.stderr)
    try:
        manifest.write(manifest_path)
    except OSError as exc:
        print(f"pktseer: cannot write manifest {manifest_path}: {exc}", file=sys.stderr)
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
