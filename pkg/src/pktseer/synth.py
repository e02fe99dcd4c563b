"""Seeded synthetic per-packet traffic with benign and malicious flows.

Every packet carries the same eleven header-style features. Per flow ``f``
with packets ``t = 0 .. n-1``:

Benign flows (smooth progressions)::

    ttl_f      = choice({64, 128, 255}) - hops_f,   hops_f ~ U{0..20}   (constant)
    tcp_win_f  = choice(WINDOWS)                                        (constant)
    ip_id_t    = id0_f + t  (mod 65536),            id0_f ~ U{0..65535}
    mu_f       ~ U[200, 1400]
    frame_len_t = clip(round(mu_f + 0.7 (frame_len_{t-1} - mu_f) + N(0, 40)), 66, 1514)
    tcp_flags_t = SYN (2) at t = 0, else PSH|ACK (24) if payload > 0 else ACK (16)
    frame_len_0 = 74 (SYN, no payload);  a packet with frame_len 66 has no payload
    iat_us_t   ~ Exp(mean 20000)

Malicious flows (regime breaks), attack chosen per flow:

    DDoS:  frame_len = 60, tcp_flags = SYN (2), tcp_win = 1024,
           iat_us ~ Exp(mean 50) inside bursts of 8, Exp(mean 5000) between
    Recon: frame_len = 60, tcp_flags = choice({0 (null), 41 (FIN|PSH|URG)}),
           tcp_win = choice({1024, 2048, 3072, 4096}), iat_us ~ Exp(mean 300)

    ttl and ip_id follow the benign rules.

Derived fields for every packet::

    ip_len = frame_len - 14,  payload_len = max(frame_len - 66, 0) benign / 0 malicious,
    ip_hl = 20, ip_tos = 0,  frag_off = 0

Flows are drawn with lengths uniform in ``flow_len_range`` until ``n_packets``
rows exist (the last flow is cut short). Whole flows are then marked
malicious, in drawn order, until ``round(malicious_fraction * n_packets)``
rows are covered. If the last chosen flow would overshoot, it switches
regime part-way: its first packets stay benign and only the tail is
malicious. The malicious row count is therefore exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .ingest import NORMAL, FlowKey, Label, PacketRecord, Verdict

FEATURES = (
    "frame_len",
    "ip_hl",
    "ip_tos",
    "ip_len",
    "ip_id",
    "ttl",
    "frag_off",
    "tcp_flags",
    "tcp_win",
    "payload_len",
    "iat_us",
)
WINDOWS = (5840, 8192, 14600, 29200, 64240, 65535)
SYN, ACK, PSH_ACK, XMAS, NULL = 2, 16, 24, 41, 0


@dataclass(frozen=True)
class BenignParams:
    frame_mu_range: tuple[int, int] = (200, 1400)
    frame_rho: float = 0.7
    frame_noise: float = 40.0
    iat_mean_us: float = 20000.0


@dataclass(frozen=True)
class MaliciousParams:
    ddos_share: float = 0.5
    burst_len: int = 8
    burst_iat_us: float = 50.0
    gap_iat_us: float = 5000.0
    recon_iat_us: float = 300.0


@dataclass(frozen=True)
class SynthScenario:
    n_packets: int = 5000
    flow_len_range: tuple[int, int] = (10, 40)
    malicious_fraction: float = 0.3
    seed: int = 0
    benign: BenignParams = BenignParams()
    malicious: MaliciousParams = MaliciousParams()

    def __post_init__(self):
        if not 0.0 <= self.malicious_fraction <= 1.0:
            raise ValueError("malicious_fraction must be in [0, 1]")
        if self.n_packets < 1:
            raise ValueError("n_packets must be >= 1")
        lo, hi = self.flow_len_range
        if not 1 <= lo <= hi:
            raise ValueError("flow_len_range must satisfy 1 <= lo <= hi")


def _benign_rows(rng, n, ttl, win, id0, p: BenignParams):
    rows = []
    mu = rng.uniform(*p.frame_mu_range)
    prev = mu
    for t in range(n):
        if t == 0:
            frame, flags = 74, SYN
        else:
            frame = int(np.clip(round(mu + p.frame_rho * (prev - mu) + rng.normal(0.0, p.frame_noise)), 66, 1514))
            prev = frame
            flags = PSH_ACK if frame > 66 else ACK
        rows.append(
            {
                "frame_len": frame,
                "ip_id": (id0 + t) % 65536,
                "ttl": ttl,
                "tcp_flags": flags,
                "tcp_win": win,
                "payload_len": max(frame - 66, 0) if t else 0,
                "iat_us": 0 if t == 0 else int(round(rng.exponential(p.iat_mean_us))),
            }
        )
    return rows


def _malicious_rows(rng, n, ttl, id0, attack, p: MaliciousParams, t0=0):
    rows = []
    win = 1024 if attack == "DDoS" else int(rng.choice((1024, 2048, 3072, 4096)))
    flags = SYN if attack == "DDoS" else int(rng.choice((NULL, XMAS)))
    for t in range(t0, t0 + n):
        if attack == "DDoS":
            mean = p.burst_iat_us if t % p.burst_len else p.gap_iat_us
        else:
            mean = p.recon_iat_us
        rows.append(
            {
                "frame_len": 60,
                "ip_id": (id0 + t) % 65536,
                "ttl": ttl,
                "tcp_flags": flags,
                "tcp_win": win,
                "payload_len": 0,
                "iat_us": 0 if t == 0 else int(round(rng.exponential(mean))),
            }
        )
    return rows


def _complete(row) -> tuple[tuple[str, float], ...]:
    full = dict(row, ip_hl=20, ip_tos=0, frag_off=0, ip_len=row["frame_len"] - 14)
    return tuple((name, float(full[name])) for name in FEATURES)


def generate(scenario: SynthScenario) -> list[PacketRecord]:
    """Packets of all flows, sorted by (timestamp, flow order, position)."""
    sc = scenario
    rng = np.random.default_rng(sc.seed)
    lo, hi = sc.flow_len_range

    lengths = []
    remaining = sc.n_packets
    while remaining > 0:
        n = min(int(rng.integers(lo, hi + 1)), remaining)
        lengths.append(n)
        remaining -= n

    # malicious rows per flow: whole flows until the target, last one partial
    target = round(sc.malicious_fraction * sc.n_packets)
    n_mal = []
    for n in lengths:
        take = min(n, target)
        n_mal.append(take)
        target -= take

    out = []
    for f, (n, m) in enumerate(zip(lengths, n_mal)):
        ttl = int(rng.choice((64, 128, 255))) - int(rng.integers(0, 21))
        id0 = int(rng.integers(0, 65536))
        attack = "DDoS" if rng.random() < sc.malicious.ddos_share else "Recon"
        if m:
            key = FlowKey(f"172.16.{f // 250}.{f % 250 + 1}", "10.0.0.1", 1024 + f, 80, 6)
        else:
            key = FlowKey(f"192.168.{f // 250}.{f % 250 + 1}", f"10.0.1.{f % 200 + 1}", 1024 + f, 443, 6)
        win = int(rng.choice(WINDOWS))
        rows = _benign_rows(rng, n - m, ttl, win, id0, sc.benign)
        rows += _malicious_rows(rng, m, ttl, id0, attack, sc.malicious, t0=n - m)
        labels = [NORMAL] * (n - m) + [Label(Verdict.MALICIOUS, attack)] * m

        ts = int(rng.integers(0, 60_000_000))
        for t, (row, label) in enumerate(zip(rows, labels)):
            ts += row["iat_us"]
            out.append((ts, f, t, PacketRecord(key, ts, _complete(row), label)))
    out.sort(key=lambda x: x[:3])
    return [r for *_, r in out]


def malicious_count(records) -> int:
    return sum(1 for r in records if r.label is not None and r.label.malicious)


def stump_accuracy(records, feature_names=None) -> float:
    """Training accuracy of the best depth-2 decision tree on axis-aligned
    thresholds (exhaustive search). Used to confirm the classes separate."""
    names = list(feature_names or records[0].names)
    X = np.array([[r.get(n) for n in names] for r in records], dtype=np.float64)
    y = np.array([int(r.label.malicious) for r in records], dtype=np.int64)

    def best_split(idx):
        # returns (errors, feature, threshold) of the best single split on idx
        best = (_leaf_errors(y[idx]), -1, math.nan)
        for j in range(X.shape[1]):
            for thr in np.unique(X[idx, j]):
                left = X[idx, j] <= thr
                e = _leaf_errors(y[idx][left]) + _leaf_errors(y[idx][~left])
                if e < best[0]:
                    best = (e, j, float(thr))
        return best

    all_idx = np.arange(len(y))
    e0, j, thr = best_split(all_idx)
    if j < 0:
        return 1.0 - e0 / len(y)
    left = all_idx[X[:, j] <= thr]
    right = all_idx[X[:, j] > thr]
    errors = best_split(left)[0] + best_split(right)[0]
    return 1.0 - errors / len(y)


def _leaf_errors(y) -> int:
    if y.size == 0:
        return 0
    ones = int(y.sum())
    return min(ones, y.size - ones)
