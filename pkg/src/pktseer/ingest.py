"""Packet records from feature CSVs or classic captures; flows and datasets.

Flows are unidirectional: two packets belong to the same flow iff their
(src, dst, sport, dport, proto) tuples are equal.
"""

from __future__ import annotations

import csv
import enum
import io
import ipaddress
import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


class IngestError(ValueError):
    """Input cannot be ingested at all (bad header, bad container)."""


class HeaderError(IngestError):
    """The CSV header does not fit the expected column layout."""


@dataclass(frozen=True, order=True)
class FlowKey:
    src_addr: str
    dst_addr: str
    src_port: int
    dst_port: int
    protocol: int

    def __post_init__(self):
        if not (0 <= self.src_port <= 65535 and 0 <= self.dst_port <= 65535):
            raise ValueError(f"port out of range in {self}")
        if not 0 <= self.protocol <= 255:
            raise ValueError(f"protocol out of range in {self}")


NULL_KEY = FlowKey("0.0.0.0", "0.0.0.0", 0, 0, 0)


class Verdict(enum.IntEnum):
    NORMAL = 0
    MALICIOUS = 1


@dataclass(frozen=True)
class Label:
    """Normal, or Malicious with the attack name as given in the source data."""

    verdict: Verdict
    attack: str | None = None

    @classmethod
    def parse(cls, text: str) -> "Label":
        t = text.strip()
        if t.lower() in {"normal", "benign", "0"}:
            return cls(Verdict.NORMAL)
        if t.lower() in {"malicious", "attack", "1"}:
            return cls(Verdict.MALICIOUS)
        return cls(Verdict.MALICIOUS, t)

    @property
    def malicious(self) -> bool:
        return self.verdict is Verdict.MALICIOUS

    def __str__(self):
        if self.verdict is Verdict.NORMAL:
            return "Normal"
        return self.attack or "Malicious"


NORMAL = Label(Verdict.NORMAL)


@dataclass(frozen=True)
class PacketRecord:
    flow_key: FlowKey
    timestamp: int  # microseconds since epoch
    features: tuple[tuple[str, float], ...]
    label: Label | None = None

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.features)

    @property
    def values(self) -> tuple[float, ...]:
        return tuple(v for _, v in self.features)

    def get(self, name: str) -> float:
        for n, v in self.features:
            if n == name:
                return v
        raise KeyError(name)

    def select(self, names) -> "PacketRecord":
        d = dict(self.features)
        return PacketRecord(self.flow_key, self.timestamp, tuple((n, d[n]) for n in names), self.label)


class PairLabel(enum.IntEnum):
    SUCCESSIVE = 0
    NON_SUCCESSIVE = 1


@dataclass(frozen=True)
class PairExample:
    first: PacketRecord
    second: PacketRecord
    label: PairLabel


@dataclass
class IngestReport:
    rows: int = 0
    records: int = 0
    skipped: int = 0
    missing_cells: int = 0
    truncated: int = 0
    skip_reasons: dict[str, int] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def skip(self, reason: str, detail: str | None = None):
        self.skipped += 1
        self.skip_reasons[reason] = self.skip_reasons.get(reason, 0) + 1
        if detail:
            self.warnings.append(detail)

    def to_dict(self) -> dict:
        return {
            "rows": self.rows,
            "records": self.records,
            "skipped": self.skipped,
            "missing_cells": self.missing_cells,
            "truncated": self.truncated,
            "skip_reasons": dict(sorted(self.skip_reasons.items())),
        }

    def lines(self) -> list[str]:
        out = [f"ingest: rows={self.rows} records={self.records} skipped={self.skipped} "
               f"missing_cells={self.missing_cells} truncated={self.truncated}"]
        out += [f"ingest: skipped[{k}]={v}" for k, v in sorted(self.skip_reasons.items())]
        return out


def format_number(v: float) -> str:
    """Shortest round-trip decimal; integral values without a decimal point."""
    v = float(v)
    if not math.isfinite(v):
        raise ValueError(f"non-finite value {v!r}")
    if v.is_integer() and abs(v) < 2**53:
        return str(int(v))
    return repr(v)


# ------------------------------------------------------------ feature CSV


@dataclass(frozen=True)
class CsvColumns:
    src_addr: str = "srcIP"
    dst_addr: str = "dstIP"
    src_port: str = "srcPort"
    dst_port: str = "dstPort"
    protocol: str = "proto"
    timestamp: str = "ts"
    label: str = "label"

    def key_columns(self) -> tuple[str, ...]:
        return (self.src_addr, self.dst_addr, self.src_port, self.dst_port, self.protocol)


def _decode(source) -> io.StringIO:
    if isinstance(source, (bytes, bytearray)):
        return io.StringIO(source.decode("utf-8-sig"))
    if isinstance(source, str):
        return io.StringIO(source)
    data = source.read()
    return _decode(data)


def _parse_int(text: str, lo: int, hi: int) -> int:
    v = float(text)
    if not v.is_integer() or not lo <= v <= hi:
        raise ValueError(text)
    return int(v)


def parse_feature_csv(source, columns: CsvColumns | None = None) -> tuple[list[PacketRecord], IngestReport]:
    """Read a Tranalyzer-style per-packet CSV.

    Feature columns are every header column other than the flow key, the
    timestamp (integer microseconds) and the optional label, in header order.
    Empty feature cells become 0.0 and are counted; rows with a non-numeric
    feature or an unusable key are skipped and counted.
    """
    cols = columns or CsvColumns()
    reader = csv.reader(_decode(source))
    report = IngestReport()
    header = next(reader, None)
    if header is None:
        raise IngestError("empty input: no header row")
    header = [h.strip() for h in header]
    missing = [c for c in (*cols.key_columns(), cols.timestamp) if c not in header]
    if missing:
        raise HeaderError(f"header lacks required column(s): {', '.join(missing)}")
    if len(set(header)) != len(header):
        raise HeaderError("duplicate column names in header")
    pos = {h: i for i, h in enumerate(header)}
    reserved = set(cols.key_columns()) | {cols.timestamp, cols.label}
    feat_cols = [(h, pos[h]) for h in header if h not in reserved]
    if not feat_cols:
        raise HeaderError("header has no feature columns")
    label_at = pos.get(cols.label)
    ks, kd, ksp, kdp, kp = (pos[c] for c in cols.key_columns())
    kt = pos[cols.timestamp]

    records = []
    for lineno, row in enumerate(reader, start=2):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        report.rows += 1
        cell = lambda i: row[i].strip() if i < len(row) else ""  # noqa: E731
        try:
            key = FlowKey(
                str(ipaddress.ip_address(cell(ks))),
                str(ipaddress.ip_address(cell(kd))),
                _parse_int(cell(ksp), 0, 65535),
                _parse_int(cell(kdp), 0, 65535),
                _parse_int(cell(kp), 0, 255),
            )
            ts = round(float(cell(kt)))
        except ValueError:
            report.skip("bad_key", f"line {lineno}: unusable flow key or timestamp")
            continue
        feats = []
        bad = None
        for name, i in feat_cols:
            text = cell(i)
            if text == "":
                report.missing_cells += 1
                feats.append((name, 0.0))
                continue
            try:
                v = float(text)
            except ValueError:
                bad = name
                break
            if not math.isfinite(v):
                bad = name
                break
            feats.append((name, v))
        if bad is not None:
            report.skip("non_numeric", f"line {lineno}: non-numeric value in column {bad!r}")
            continue
        label = None
        if label_at is not None and cell(label_at):
            label = Label.parse(cell(label_at))
        records.append(PacketRecord(key, ts, tuple(feats), label))
    report.records = len(records)
    return records, report


def write_feature_csv(records, fh, columns: CsvColumns | None = None, with_label: bool | None = None):
    """Write records in the ingestion format (round-trips through parse_feature_csv)."""
    cols = columns or CsvColumns()
    records = list(records)
    names = records[0].names if records else ()
    if with_label is None:
        with_label = any(r.label is not None for r in records)
    header = [*cols.key_columns(), cols.timestamp, *names] + ([cols.label] if with_label else [])
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(header)
    for r in records:
        if r.names != names:
            raise ValueError("records disagree on feature names")
        k = r.flow_key
        row = [k.src_addr, k.dst_addr, k.src_port, k.dst_port, k.protocol, r.timestamp]
        row += [format_number(v) for v in r.values]
        if with_label:
            row.append("" if r.label is None else str(r.label))
        w.writerow(row)


# --------------------------------------------------------------- captures

CAPTURE_FEATURES = (
    "frame_len",
    "ip_hl",
    "ip_tos",
    "ip_len",
    "ip_flags",
    "frag_off",
    "ttl",
    "ip_proto",
    "tcp_flags",
    "tcp_win",
    "l4_hl",
    "payload_len",
)
"""Per-packet features extracted from headers only (payload bytes are never read):

frame_len   original frame length from the record header
ip_hl       IPv4 header length in bytes (IHL * 4)
ip_tos      type-of-service byte
ip_len      IPv4 total length
ip_flags    3-bit flags field (DF = 2, MF = 1)
frag_off    fragment offset in 8-byte units
ttl         time to live
ip_proto    6 (TCP) or 17 (UDP)
tcp_flags   TCP flag byte (FIN=1 SYN=2 RST=4 PSH=8 ACK=16 URG=32 ECE=64 CWR=128); 0 for UDP
tcp_win     TCP receive window; 0 for UDP
l4_hl       transport header length (TCP data offset * 4, or 8 for UDP)
payload_len ip_len - ip_hl - l4_hl, floored at 0
"""

_ETH_IPV4 = 0x0800
_LINK_ETHERNET = 1


def parse_raw_capture(source) -> tuple[list[PacketRecord], IngestReport]:
    """Parse a classic capture file carrying Ethernet/IPv4/TCP|UDP frames."""
    data = source if isinstance(source, (bytes, bytearray, memoryview)) else source.read()
    data = bytes(data)
    report = IngestReport()
    if len(data) < 24:
        raise IngestError("capture shorter than its 24-byte global header")
    magic_le = struct.unpack_from("<I", data, 0)[0]
    if magic_le == 0xA1B2C3D4:
        order = "<"
    elif magic_le == 0xD4C3B2A1:
        order = ">"
    else:
        raise IngestError(f"unsupported capture magic 0x{magic_le:08x}")
    linktype = struct.unpack_from(order + "I", data, 20)[0]
    if linktype != _LINK_ETHERNET:
        raise IngestError(f"unsupported link type {linktype} (Ethernet only)")
    rec_hdr = struct.Struct(order + "IIII")

    records = []
    off = 24
    while off < len(data):
        if off + 16 > len(data):
            report.truncated += 1
            report.warnings.append(f"truncated record header at byte {off}")
            break
        ts_sec, ts_usec, incl, orig = rec_hdr.unpack_from(data, off)
        off += 16
        if off + incl > len(data):
            report.truncated += 1
            report.warnings.append(f"truncated packet body at byte {off - 16}")
            break
        frame = data[off : off + incl]
        off += incl
        report.rows += 1
        rec = _parse_frame(frame, orig, ts_sec * 1_000_000 + ts_usec, report)
        if rec is not None:
            records.append(rec)
    report.records = len(records)
    return records, report


def _parse_frame(frame: bytes, orig_len: int, ts: int, report: IngestReport):
    if len(frame) < 14:
        report.skip("short")
        return None
    (ethertype,) = struct.unpack_from("!H", frame, 12)
    if ethertype != _ETH_IPV4:
        report.skip("non_ip")
        return None
    ip = frame[14:]
    if len(ip) < 20 or ip[0] >> 4 != 4:
        report.skip("non_ip" if len(ip) >= 1 and ip[0] >> 4 != 4 else "short")
        return None
    ihl = (ip[0] & 0x0F) * 4
    tos = ip[1]
    total_len, _ident, flags_frag = struct.unpack_from("!HHH", ip, 2)
    ttl, proto = ip[8], ip[9]
    src = str(ipaddress.IPv4Address(ip[12:16]))
    dst = str(ipaddress.IPv4Address(ip[16:20]))
    if ihl < 20 or len(ip) < ihl:
        report.skip("short")
        return None
    l4 = ip[ihl:]
    if proto == 6:
        if len(l4) < 20:
            report.skip("short")
            return None
        sport, dport = struct.unpack_from("!HH", l4, 0)
        l4_hl = (l4[12] >> 4) * 4
        tcp_flags = l4[13]
        (win,) = struct.unpack_from("!H", l4, 14)
    elif proto == 17:
        if len(l4) < 8:
            report.skip("short")
            return None
        sport, dport = struct.unpack_from("!HH", l4, 0)
        l4_hl, tcp_flags, win = 8, 0, 0
    else:
        report.skip("unsupported_l4")
        return None
    values = (
        orig_len,
        ihl,
        tos,
        total_len,
        flags_frag >> 13,
        flags_frag & 0x1FFF,
        ttl,
        proto,
        tcp_flags,
        win,
        l4_hl,
        max(total_len - ihl - l4_hl, 0),
    )
    feats = tuple((n, float(v)) for n, v in zip(CAPTURE_FEATURES, values))
    return PacketRecord(FlowKey(src, dst, sport, dport, proto), ts, feats)


# ------------------------------------------------------------- flows/pairs


def assemble_flows(records) -> dict[FlowKey, list[PacketRecord]]:
    """Group by flow key (first-seen order); each flow sorted by timestamp, stable."""
    flows: dict[FlowKey, list[PacketRecord]] = {}
    for r in records:
        flows.setdefault(r.flow_key, []).append(r)
    for k in flows:
        flows[k].sort(key=lambda r: r.timestamp)
    return flows


def make_next_packet_pairs(flows) -> list[tuple[PacketRecord, PacketRecord]]:
    pairs = []
    for packets in flows.values():
        pairs.extend(zip(packets[:-1], packets[1:]))
    return pairs


def make_pair_dataset(flows, negative_ratio: float = 1.0, seed: int = 0) -> list[PairExample]:
    """Successive pairs plus ceil(ratio * positives) sampled non-successive pairs.

    A negative pairs a uniformly drawn packet with a uniformly drawn packet
    (from any flow) that is neither itself nor its in-flow successor.
    """
    if negative_ratio <= 0:
        raise ValueError("negative_ratio must be > 0")
    packets = [p for flow in flows.values() for p in flow]
    n = len(packets)
    if n < 2:
        raise ValueError("insufficient data: need at least 2 packets")
    succ = np.full(n, -1, dtype=np.int64)
    i = 0
    for flow in flows.values():
        succ[i : i + len(flow) - 1] = np.arange(i + 1, i + len(flow))
        i += len(flow)
    pos_idx = np.flatnonzero(succ >= 0)
    n_neg = math.ceil(round(negative_ratio * len(pos_idx), 9))

    rng = np.random.default_rng(seed)
    examples = [PairExample(packets[a], packets[succ[a]], PairLabel.SUCCESSIVE) for a in pos_idx]
    budget = 1000 * max(n_neg, 1)
    while n_neg > 0:
        a, b = rng.integers(n, size=2)
        budget -= 1
        if budget < 0:
            raise ValueError("insufficient data: cannot draw non-successive pairs")
        if b == a or b == succ[a]:
            continue
        examples.append(PairExample(packets[a], packets[b], PairLabel.NON_SUCCESSIVE))
        n_neg -= 1
    order = rng.permutation(len(examples))
    return [examples[k] for k in order]


def labeled_packets(records) -> list[tuple[PacketRecord, int]]:
    """(record, class index) for every record with a label; 0 Normal, 1 Malicious."""
    return [(r, int(r.label.verdict)) for r in records if r.label is not None]
