"""Drive the whole command-line lifecycle into one directory."""

import json
from pathlib import Path

from pktseer.cli import main

# a small model keeps the full lifecycle to a few seconds
SMALL_MODEL = [
    "--d-model", "32", "--n-heads", "2", "--enc-layers", "1", "--dec-layers", "1",
    "--d-ff", "64", "--max-seq-len", "48", "--model-max-seq-len", "48",
]  # fmt: skip


def run(*argv) -> int:
    return main([str(a) for a in argv])


def lifecycle(d: Path, packets: int = 400, seed: int = 5) -> dict[str, Path]:
    """synth -> select-features -> train-tokenizer -> train x3 -> evaluate x3 -> predict."""
    d = Path(d)
    d.mkdir(parents=True, exist_ok=True)
    p = {
        "raw": d / "raw.csv",
        "data": d / "data.csv",
        "vocab": d / "vocab.txt",
        "predictor": d / "predictor.ckpt",
        "assessor": d / "assessor.ckpt",
        "classifier": d / "classifier.ckpt",
        "predictions": d / "pred.jsonl",
    }
    steps = [
        ("synth", "--out", p["raw"], "--packets", packets, "--seed", seed, "-q"),
        ("select-features", p["raw"], "--out", p["data"], "-q"),
        ("train-tokenizer", p["data"], "--out", p["vocab"], "--vocab-size", 320, "-q"),
        ("train", "predictor", p["data"], "--vocab", p["vocab"], "--out", p["predictor"],
         "--epochs", 2, "--batch-size", 32, "--lr", "1e-3", "--seed", seed, *SMALL_MODEL, "-q"),
        ("train", "assessor", p["data"], "--vocab", p["vocab"], "--out", p["assessor"],
         "--epochs", 2, "--batch-size", 32, "--lr", "1e-3", "--mlm-warmup-epochs", 1, "--seed", seed,
         *SMALL_MODEL, "-q"),
        ("train", "classifier", p["data"], "--vocab", p["vocab"], "--out", p["classifier"],
         "--epochs", 2, "--batch-size", 32, "--lr", "1e-3", "--seed", seed, *SMALL_MODEL, "-q"),
    ]  # fmt: skip
    for kind in ("predictor", "assessor", "classifier"):
        out = d / f"eval_{kind}"
        p[f"eval_{kind}"] = out
        steps.append(("evaluate", p[kind], p["data"], "--vocab", p["vocab"], "--out-dir", out, "--seed", seed, "-q"))
    steps.append(
        ("predict", p["data"], "--predictor", p["predictor"], "--assessor", p["assessor"],
         "--classifier", p["classifier"], "--vocab", p["vocab"], "--out", p["predictions"],
         "--max-new", 40, "--batch-size", 64, "-q")
    )  # fmt: skip
    for argv in steps:
        code = run(*argv)
        if code != 0:
            raise RuntimeError(f"step {argv[0]} exited with {code}")
    return p


def _without_wall_time(blob: bytes) -> bytes:
    rows = [json.loads(line) for line in blob.decode().splitlines()]
    for r in rows:
        r.pop("wall_ms")
    return json.dumps(rows, sort_keys=True).encode()


def artifact_bytes(d: Path) -> dict[str, bytes]:
    """Every file the lifecycle produced. Run manifests carry timestamps and
    are skipped; history files are compared without their wall-clock column."""
    d = Path(d)
    out = {}
    for f in sorted(d.rglob("*")):
        if not f.is_file() or f.name.endswith(".manifest.json"):
            continue
        blob = f.read_bytes()
        out[str(f.relative_to(d))] = _without_wall_time(blob) if f.name.endswith(".history.jsonl") else blob
    return out
