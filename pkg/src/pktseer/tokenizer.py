"""Packet text, byte-level BPE, and the corruptions used by the training objectives.

Token ids: 0-5 are the special tokens, 6-261 the 256 single bytes, and
262 onwards the learned merges in the order they were learned.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .ingest import NULL_KEY, FlowKey, PacketRecord, format_number

SPECIALS = ("<PAD>", "<BOS>", "<EOS>", "<SEP>", "<CLS>", "<MASK>")
PAD, BOS, EOS, SEP, CLS, MASK = range(6)
N_SPECIAL = len(SPECIALS)
BYTE_OFFSET = N_SPECIAL
N_BASE = N_SPECIAL + 256
MAX_VOCAB = 4096  # pair counting allocates vocab_size**2 counters

VOCAB_MAGIC = "pktseer-bpe"
VOCAB_VERSION = 1


# ----------------------------------------------------------- packet text


def serialize_packet(p: PacketRecord, kept_features) -> str:
    """``name=value`` pairs in ``kept_features`` order, single-space separated."""
    d = dict(p.features)
    parts = []
    for name in kept_features:
        if name not in d:
            raise KeyError(f"packet lacks feature {name!r}")
        parts.append(f"{name}={format_number(d[name])}")
    return " ".join(parts)


class PacketParseError(ValueError):
    """A generated or supplied packet text does not match the feature layout."""


class WrongFieldCount(PacketParseError):
    def __init__(self, got: int, want: int):
        super().__init__(f"got {got} fields, want {want}")
        self.got = got
        self.want = want


class UnknownField(PacketParseError):
    def __init__(self, name: str, position: int, expected: str):
        super().__init__(f"field {position} is {name!r}, expected {expected!r}")
        self.name = name
        self.position = position
        self.expected = expected


class BadValue(PacketParseError):
    def __init__(self, name: str, text: str):
        super().__init__(f"field {name!r} has unparseable value {text!r}")
        self.name = name
        self.text = text


def parse_packet_text(
    text: str, kept_features, flow_key: FlowKey = NULL_KEY, timestamp: int = 0
) -> PacketRecord:
    fields = text.split(" ")
    kept = list(kept_features)
    if len(fields) != len(kept):
        raise WrongFieldCount(len(fields), len(kept))
    feats = []
    for pos, (chunk, want) in enumerate(zip(fields, kept)):
        name, eq, value = chunk.partition("=")
        if name != want:
            raise UnknownField(name, pos, want)
        if not eq:
            raise BadValue(want, chunk)
        try:
            v = float(value)
        except ValueError:
            raise BadValue(want, value) from None
        if not math.isfinite(v) or value.strip() != value or "_" in value:
            raise BadValue(want, value)
        feats.append((want, v))
    return PacketRecord(flow_key, timestamp, tuple(feats))


# ------------------------------------------------------------------ BPE


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]

    def __post_init__(self):
        if not isinstance(self.ids, tuple):
            object.__setattr__(self, "ids", tuple(int(i) for i in self.ids))

    def __len__(self):
        return len(self.ids)

    @property
    def segment_marks(self) -> tuple[int, ...]:
        return tuple(i for i, t in enumerate(self.ids) if t < N_SPECIAL)

    def array(self) -> np.ndarray:
        return np.asarray(self.ids, dtype=np.int64)


class BpeVocab:
    """Immutable byte-level BPE vocabulary."""

    def __init__(self, merges):
        self.merges: tuple[tuple[int, int], ...] = tuple((int(a), int(b)) for a, b in merges)
        tokens: list[bytes | None] = [None] * N_SPECIAL + [bytes([b]) for b in range(256)]
        for a, b in self.merges:
            if not (N_SPECIAL <= a < len(tokens) and N_SPECIAL <= b < len(tokens)):
                raise ValueError(f"merge ({a}, {b}) refers to an unknown or special token")
            tokens.append(tokens[a] + tokens[b])
        self.tokens = tuple(tokens)
        self.token_to_id: dict[bytes | str, int] = {s: i for i, s in enumerate(SPECIALS)}
        for i, t in enumerate(tokens[N_SPECIAL:], start=N_SPECIAL):
            if t in self.token_to_id:
                raise ValueError(f"duplicate token {t!r}")
            self.token_to_id[t] = i
        self._merge_arr = np.asarray(self.merges, dtype=np.int64).reshape(-1, 2)

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, BpeVocab) and self.merges == other.merges

    def __hash__(self):
        return hash(self.merges)

    # encoding

    def _bytes_to_ids(self, text: str) -> np.ndarray:
        return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.int64) + BYTE_OFFSET

    def encode_ids(self, text: str) -> tuple[int, ...]:
        ids = kernels.apply_merges(self._bytes_to_ids(text), self._merge_arr, N_BASE)
        return tuple(ids.tolist())

    def encode(self, text: str, add_bos_eos: bool = False) -> TokenSequence:
        ids = self.encode_ids(text)
        return TokenSequence((BOS, *ids, EOS) if add_bos_eos else ids)

    def encode_batch(self, texts, add_bos_eos: bool = False) -> list[TokenSequence]:
        """Encode many texts in one kernel pass (texts separated by -1)."""
        texts = list(texts)
        if not texts:
            return []
        parts = []
        for t in texts:
            parts.append(self._bytes_to_ids(t))
            parts.append(np.array([-1], dtype=np.int64))
        ids = kernels.apply_merges(np.concatenate(parts), self._merge_arr, N_BASE)
        cuts = np.flatnonzero(ids == -1)
        out = []
        start = 0
        for c in cuts:
            seg = tuple(ids[start:c].tolist())
            out.append(TokenSequence((BOS, *seg, EOS) if add_bos_eos else seg))
            start = c + 1
        return out

    def decode(self, seq) -> str:
        ids = seq.ids if isinstance(seq, TokenSequence) else seq
        chunks = []
        for i in ids:
            i = int(i)
            if not 0 <= i < self.size:
                raise IndexError(f"token id {i} out of range [0, {self.size})")
            if i >= N_SPECIAL:
                chunks.append(self.tokens[i])
        return b"".join(chunks).decode("utf-8", errors="replace")

    # persistence

    def dumps(self) -> bytes:
        lines = [f"{VOCAB_MAGIC} {VOCAB_VERSION}", f"vocab_size {self.size}", f"specials {N_SPECIAL}"]
        lines += [f"{i} {name}" for i, name in enumerate(SPECIALS)]
        lines.append(f"merges {len(self.merges)}")
        lines += [f"{self.tokens[a].hex()} {self.tokens[b].hex()}" for a, b in self.merges]
        return ("\n".join(lines) + "\n").encode("ascii")

    @classmethod
    def loads(cls, blob: bytes) -> "BpeVocab":
        lines = blob.decode("ascii").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        try:
            magic, version = lines[0].split(" ")
            if magic != VOCAB_MAGIC or int(version) != VOCAB_VERSION:
                raise ValueError(f"unsupported vocabulary header {lines[0]!r}")
            size = int(lines[1].split(" ")[1])
            n_spec = int(lines[2].split(" ")[1])
            specials = [ln.split(" ", 1) for ln in lines[3 : 3 + n_spec]]
            if [(int(i), s) for i, s in specials] != list(enumerate(SPECIALS)):
                raise ValueError("special-token table does not match")
            head = lines[3 + n_spec].split(" ")
            n_merges = int(head[1])
            body = lines[4 + n_spec :]
        except (IndexError, ValueError) as exc:
            raise ValueError(f"malformed vocabulary file: {exc}") from None
        if len(body) != n_merges:
            raise ValueError(f"expected {n_merges} merges, found {len(body)}")
        lookup = {bytes([b]): b + BYTE_OFFSET for b in range(256)}
        merges = []
        for ln in body:
            left, right = (bytes.fromhex(h) for h in ln.split(" "))
            a, b = lookup[left], lookup[right]
            lookup[left + right] = N_BASE + len(merges)
            merges.append((a, b))
        vocab = cls(merges)
        if vocab.size != size:
            raise ValueError("vocab_size line disagrees with merge count")
        return vocab

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path) -> "BpeVocab":
        with open(path, "rb") as fh:
            return cls.loads(fh.read())

    def fingerprint(self) -> str:
        return hashlib.sha256(self.dumps()).hexdigest()


def _corpus_ids(corpus) -> np.ndarray:
    parts = []
    for text in corpus:
        parts.append(np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.int64) + BYTE_OFFSET)
        parts.append(np.array([-1], dtype=np.int64))
    return np.concatenate(parts)


def train_bpe(corpus, vocab_size: int = 512, min_frequency: int = 2) -> BpeVocab:
    """Learn merges until ``vocab_size`` tokens exist or no pair occurs
    ``min_frequency`` times.

    Each step merges the most frequent adjacent pair (overlapping occurrences
    counted); ties go to the lexicographically smallest (left bytes, right
    bytes). A pair whose concatenation already exists as a token is passed
    over so that token strings stay unique.
    """
    corpus = list(corpus)
    if not corpus:
        raise ValueError("empty corpus")
    if vocab_size <= N_BASE:
        raise ValueError(f"vocab_size must exceed {N_BASE}")
    if vocab_size > MAX_VOCAB:
        raise ValueError(f"vocab_size above {MAX_VOCAB} not supported")
    ids = _corpus_ids(corpus)
    tokens: list[bytes | None] = [None] * N_SPECIAL + [bytes([b]) for b in range(256)]
    known = set(tokens[N_SPECIAL:])
    merges = []
    V = vocab_size
    while len(tokens) < vocab_size:
        counts = kernels.pair_counts(ids, V).astype(np.int64)
        chosen = None
        while chosen is None:
            top = int(counts.max())
            if top < max(min_frequency, 1):
                break
            cands = np.flatnonzero(counts == top)
            best = None
            for c in cands:
                a, b = divmod(int(c), V)
                if tokens[a] + tokens[b] in known:
                    counts[c] = 0
                    continue
                key = (tokens[a], tokens[b])
                if best is None or key < best[0]:
                    best = (key, a, b)
            if best is not None:
                chosen = best[1:]
        if chosen is None:
            break
        a, b = chosen
        new_id = len(tokens)
        ids = kernels.merge_pair(ids, a, b, new_id)
        tokens.append(tokens[a] + tokens[b])
        known.add(tokens[-1])
        merges.append((a, b))
    return BpeVocab(merges)


# ---------------------------------------------------------- corruptions


@dataclass(frozen=True)
class MaskedBatch:
    corrupted_ids: TokenSequence
    target_ids: tuple[int, ...]
    masked_positions: tuple[int, ...]


def _rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def make_mlm_corruption(
    seq: TokenSequence,
    mask_prob: float,
    vocab: BpeVocab,
    seed,
    mask_frac: float = 0.8,
    random_frac: float = 0.1,
) -> MaskedBatch:
    """Select each non-special position with ``mask_prob``; selected positions
    become MASK (``mask_frac``), a random non-special token (``random_frac``),
    or stay unchanged (the rest)."""
    if not 0.0 < mask_prob <= 1.0:
        raise ValueError("mask_prob must be in (0, 1]")
    rng = _rng(seed)
    ids = seq.array()
    n = ids.size
    select = rng.random(n) < mask_prob
    branch = rng.random(n)
    randoms = rng.integers(N_SPECIAL, vocab.size, size=n)
    select &= ids >= N_SPECIAL
    out = ids.copy()
    to_mask = select & (branch < mask_frac)
    to_rand = select & (branch >= mask_frac) & (branch < mask_frac + random_frac)
    out[to_mask] = MASK
    out[to_rand] = randoms[to_rand]
    pos = np.flatnonzero(select)
    return MaskedBatch(TokenSequence(tuple(out.tolist())), tuple(ids[pos].tolist()), tuple(pos.tolist()))


def make_denoising_corruption(
    seq: TokenSequence, vocab: BpeVocab, seed, span_lambda: float = 3.0, noise_ratio: float = 0.3
) -> tuple[TokenSequence, TokenSequence]:
    """Text infilling: cover ``round(noise_ratio * n)`` of the n non-special
    tokens with spans whose lengths are Poisson(``span_lambda``) draws (at
    least 1), then collapse each maximal covered run into one MASK token."""
    if len(seq) == 0:
        raise ValueError("cannot corrupt an empty sequence")
    del vocab  # token ids are self-describing; kept for interface symmetry
    rng = _rng(seed)
    ids = seq.array()
    content = np.flatnonzero(ids >= N_SPECIAL)
    n = content.size
    covered = np.zeros(n, dtype=bool)
    remaining = int(round(noise_ratio * n))
    while remaining > 0:
        length = int(min(max(rng.poisson(span_lambda), 1), remaining))
        free = np.flatnonzero(~covered)
        start = int(free[rng.integers(free.size)])
        # extend over uncovered positions only
        run = 0
        k = start
        while k < n and run < length and not covered[k]:
            covered[k] = True
            run += 1
            k += 1
        remaining -= run
    is_cov = np.zeros(ids.size, dtype=bool)
    is_cov[content[covered]] = True
    out = []
    prev = False
    for t, c in zip(ids.tolist(), is_cov.tolist()):
        if c:
            if not prev:
                out.append(MASK)
        else:
            out.append(t)
        prev = c
    return TokenSequence(tuple(out)), seq


def pack_pair(first_ids, second_ids, max_len: int) -> TokenSequence:
    """[CLS] a [SEP] b [SEP] + PAD to ``max_len``, trimming the longer side first."""
    if max_len < 8:
        raise ValueError("max_len must be >= 8")
    a, b = list(first_ids), list(second_ids)
    budget = max_len - 3
    la, lb = len(a), len(b)
    while la + lb > budget:
        if la > lb:
            la -= 1
        else:
            lb -= 1
    ids = [CLS, *a[:la], SEP, *b[:lb], SEP]
    ids += [PAD] * (max_len - len(ids))
    return TokenSequence(tuple(ids))


def make_pair_input(first_text: str, second_text: str, vocab: BpeVocab, max_len: int) -> TokenSequence:
    return pack_pair(vocab.encode_ids(first_text), vocab.encode_ids(second_text), max_len)
