"""Time every hot kernel in its numpy and numba flavours.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--json out.json]

Also times one training epoch of a small classifier under whichever backend
the process selected (``PKTSEER_NO_NUMBA=1`` forces numpy), so the two
end-to-end numbers can be compared by running the script twice.
"""

from __future__ import annotations

import argparse
import json
import time

import numpy as np

from pktseer import _accel, kernels


def _inputs(rng):
    """Shapes typical of a desk-scale batch: 32 x 24 tokens, d_model 64, vocab 512."""
    rows, d, vocab = 32 * 24, 64, 512
    x = rng.normal(size=(rows, d)).astype(np.float32)
    g = rng.normal(size=(rows, d)).astype(np.float32)
    gamma = np.ones(d, np.float32)
    beta = np.zeros(d, np.float32)
    y, xhat, rstd = kernels.NUMPY["layer_norm"](x, gamma, beta, 1e-5)
    scores = rng.normal(size=(32 * 4 * 24, 24)).astype(np.float32)
    probs = kernels.NUMPY["softmax_rows"](scores)
    logits = rng.normal(size=(rows, vocab)).astype(np.float32)
    targets = rng.integers(0, vocab, rows)
    ids = rng.integers(0, vocab, rows)
    p = rng.normal(size=(vocab, d)).astype(np.float32)
    text = rng.integers(6, 30, 20000).astype(np.int64)
    merges = np.stack([rng.integers(6, 30, 200), rng.integers(6, 30, 200)], axis=1).astype(np.int64)
    return {
        "softmax_rows": (scores,),
        "softmax_rows_backward": (probs, scores),
        "layer_norm": (x, gamma, beta, 1e-5),
        "layer_norm_backward": (g, xhat, rstd, gamma),
        "gelu": (x,),
        "gelu_backward": (x, g),
        "nll_rows": (logits, targets),
        "scatter_add_rows": (ids, g, vocab),
        "adam_update": lambda: (p.copy(), p, np.zeros_like(p), np.zeros_like(p), 1e-3, 0.9, 0.999, 1e-8, 0.1, 0.001),
        "pair_counts": (text, 512),
        "merge_pair": (text, 7, 8, 300),
        "apply_merges": (text, merges, 262),
    }


def _time(fn, args, repeat):
    best = float("inf")
    for _ in range(repeat):
        a = args() if callable(args) else args
        t0 = time.perf_counter()
        fn(*a)
        best = min(best, time.perf_counter() - t0)
    return best * 1e6


def bench_kernels(repeat: int = 20, seed: int = 0) -> list[dict]:
    inputs = _inputs(np.random.default_rng(seed))
    rows = []
    for name in kernels.KERNEL_NAMES:
        args = inputs[name]
        a = args() if callable(args) else args
        kernels.NUMBA[name](*a)  # compile (or load the cache) outside the timing
        t_np = _time(kernels.NUMPY[name], args, repeat)
        t_nb = _time(kernels.NUMBA[name], args, repeat)
        rows.append({"kernel": name, "numpy_us": t_np, "numba_us": t_nb, "speedup": t_np / t_nb})
    return rows


def bench_epoch(seed: int = 0) -> float:
    from pktseer.featsel import FeatureMatrix, select_features
    from pktseer.ingest import labeled_packets
    from pktseer.nn.layers import ModelConfig
    from pktseer.synth import SynthScenario, generate
    from pktseer.tokenizer import serialize_packet, train_bpe
    from pktseer.trainer import TrainConfig, train_classifier

    recs = generate(SynthScenario(n_packets=1000, seed=seed))
    _, rep = select_features(FeatureMatrix.from_records(recs))
    vocab = train_bpe([serialize_packet(r, rep.kept) for r in recs], 512)
    mcfg = ModelConfig(vocab_size=vocab.size, d_ff=128, max_seq_len=32)
    cfg = TrainConfig(epochs=1, batch_size=32, learning_rate=1e-3, max_seq_len=32, early_stop_metric="val_accuracy")
    t0 = time.perf_counter()
    train_classifier(labeled_packets(recs), vocab, rep.kept, cfg, mcfg)
    return time.perf_counter() - t0


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--json", help="also write results as JSON")
    ap.add_argument("--no-epoch", action="store_true", help="skip the end-to-end epoch timing")
    args = ap.parse_args()

    rows = bench_kernels(args.repeat)
    print(f"{'kernel':<24}{'numpy us':>12}{'numba us':>12}{'speedup':>10}")
    for r in rows:
        print(f"{r['kernel']:<24}{r['numpy_us']:>12.1f}{r['numba_us']:>12.1f}{r['speedup']:>9.2f}x")
    result = {"kernels": rows, "backend": _accel.backend_name()}
    if not args.no_epoch:
        result["epoch_seconds"] = bench_epoch()
        print(f"classifier epoch (1000 packets, backend {result['backend']}): {result['epoch_seconds']:.2f} s")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(result, fh, indent=2)


if __name__ == "__main__":
    main()
