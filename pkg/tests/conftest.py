import struct

import numpy as np
import pytest

from pktseer.ingest import FlowKey, PacketRecord


def make_record(key=("10.0.0.1", "10.0.0.2", 1000, 80, 6), ts=0, label=None, **features):
    return PacketRecord(FlowKey(*key), ts, tuple((k, float(v)) for k, v in features.items()), label)


def eth_ipv4_frame(proto, src, dst, sport, dport, *, tcp_flags=0, win=0, ttl=64, payload=b"", tos=0, ident=1):
    """Ethernet + IPv4 + TCP/UDP frame assembled field by field."""
    if proto == 6:
        l4 = struct.pack("!HHIIBBHHH", sport, dport, 0, 0, 5 << 4, tcp_flags, win, 0, 0)
    else:
        l4 = struct.pack("!HHHH", sport, dport, 8 + len(payload), 0)
    total = 20 + len(l4) + len(payload)
    ip = struct.pack(
        "!BBHHHBBH4s4s",
        0x45,
        tos,
        total,
        ident,
        0x4000,  # DF, offset 0
        ttl,
        proto,
        0,
        bytes(map(int, src.split("."))),
        bytes(map(int, dst.split("."))),
    )
    eth = b"\x00\x11\x22\x33\x44\x55" + b"\x66\x77\x88\x99\xaa\xbb" + struct.pack("!H", 0x0800)
    return eth + ip + l4 + payload


def arp_frame():
    eth = b"\xff" * 6 + b"\x66\x77\x88\x99\xaa\xbb" + struct.pack("!H", 0x0806)
    return eth + bytes(28)


def capture_bytes(frames, big_endian=False, ts0=(1_700_000_000, 0)):
    o = ">" if big_endian else "<"
    out = struct.pack(o + "IHHiIII", 0xA1B2C3D4, 2, 4, 0, 0, 65535, 1)
    for i, f in enumerate(frames):
        out += struct.pack(o + "IIII", ts0[0], ts0[1] + i, len(f), len(f)) + f
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
