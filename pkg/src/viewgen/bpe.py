"""Byte-level BPE: greedy merge training, encoding, decoding, vocab files.

Ids 0..255 are raw bytes, merges follow in learned order, and the three text
specials (SOS_R, EOS_R, TXT_PAD) take the last three ids.  Text is
lower-cased (ASCII only) before anything else.  Pair counts never span
pretokens; a pretoken is a run of non-whitespace with its leading
whitespace attached.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

N_BYTES = 256
SPECIALS = ("SOS_R", "EOS_R", "TXT_PAD")

_PRETOKEN = re.compile(rb"\s*\S+|\s+")


def pretokenize(data: bytes) -> list[bytes]:
    return _PRETOKEN.findall(data)


def _merge_pair(ids: list[int], pair: tuple[int, int], new_id: int) -> list[int]:
    out, i = [], 0
    while i < len(ids):
        if i + 1 < len(ids) and ids[i] == pair[0] and ids[i + 1] == pair[1]:
            out.append(new_id)
            i += 2
        else:
            out.append(ids[i])
            i += 1
    return out


@dataclass(frozen=True)
class Vocabulary:
    merges: tuple[tuple[int, int], ...]
    min_frequency: int = 2
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        for n, (a, b) in enumerate(self.merges):
            if not (0 <= a < N_BYTES + n and 0 <= b < N_BYTES + n):
                raise ValueError(f"merge {n} ({a}, {b}) references an undefined id")

    @property
    def size(self) -> int:
        return N_BYTES + len(self.merges) + len(SPECIALS)

    @property
    def sos(self) -> int:
        return self.size - 3

    @property
    def eos(self) -> int:
        return self.size - 2

    @property
    def pad(self) -> int:
        return self.size - 1

    @property
    def special_ids(self) -> tuple[int, int, int]:
        return self.sos, self.eos, self.pad

    @cached_property
    def ranks(self) -> dict[tuple[int, int], int]:
        return {pair: n for n, pair in enumerate(self.merges)}

    @cached_property
    def token_bytes(self) -> list[bytes]:
        table = [bytes([b]) for b in range(N_BYTES)]
        for a, b in self.merges:
            table.append(table[a] + table[b])
        return table

    def _encode_pretoken(self, piece: bytes) -> tuple[int, ...]:
        hit = self._cache.get(piece)
        if hit is not None:
            return hit
        ids = list(piece)
        ranks = self.ranks
        while len(ids) > 1:
            best = min(zip(ids, ids[1:]), key=lambda p: ranks.get(p, len(ranks)))
            rank = ranks.get(best)
            if rank is None:
                break
            ids = _merge_pair(ids, best, N_BYTES + rank)
        out = tuple(ids)
        self._cache[piece] = out
        return out

    def encode(self, text: str | bytes) -> list[int]:
        data = text.encode("utf-8") if isinstance(text, str) else bytes(text)
        out: list[int] = []
        for piece in pretokenize(data.lower()):
            out.extend(self._encode_pretoken(piece))
        return out

    def decode_bytes(self, ids: Iterable[int]) -> bytes:
        table = self.token_bytes
        specials = set(self.special_ids)
        parts = []
        for i in ids:
            i = int(i)
            if i in specials:
                continue
            if not 0 <= i < len(table):
                raise IndexError(f"token id {i} outside vocabulary of size {self.size}")
            parts.append(table[i])
        return b"".join(parts)

    def decode(self, ids: Iterable[int]) -> str:
        return self.decode_bytes(ids).decode("utf-8", errors="replace")

    # -- persistence ------------------------------------------------------
    def dumps(self) -> str:
        lines = [f"bpe v1 {self.size} {self.min_frequency}"]
        lines += [f"{a} {b}" for a, b in self.merges]
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="ascii")

    @classmethod
    def loads(cls, text: str) -> "Vocabulary":
        lines = text.splitlines()
        head = lines[0].split() if lines else []
        if len(head) != 4 or head[:2] != ["bpe", "v1"]:
            raise ValueError("not a bpe v1 vocabulary file")
        size, min_freq = int(head[2]), int(head[3])
        merges = tuple((int(a), int(b)) for a, b in (ln.split() for ln in lines[1:] if ln.strip()))
        vocab = cls(merges, min_freq)
        if vocab.size != size:
            raise ValueError(f"header says {size} tokens but merges give {vocab.size}")
        return vocab

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls.loads(Path(path).read_text(encoding="ascii"))


def train_bpe(corpus: Sequence[str], target_vocab: int = 512, min_frequency: int = 2) -> Vocabulary:
    """Greedy most-frequent-pair merging.

    ``target_vocab`` counts byte tokens plus merges; the three specials are
    added on top.  Ties go to the lexicographically smallest pair.
    """
    if not corpus:
        raise ValueError("empty corpus")
    if target_vocab < N_BYTES:
        raise ValueError(f"target_vocab must be >= {N_BYTES}")
    if min_frequency < 1:
        raise ValueError("min_frequency must be positive")
    counts: Counter[bytes] = Counter()
    for doc in corpus:
        counts.update(pretokenize(doc.encode("utf-8").lower()))
    words = [(list(piece), freq) for piece, freq in sorted(counts.items())]
    merges: list[tuple[int, int]] = []
    while N_BYTES + len(merges) < target_vocab:
        pairs: Counter[tuple[int, int]] = Counter()
        for ids, freq in words:
            for pair in zip(ids, ids[1:]):
                pairs[pair] += freq
        if not pairs:
            break
        best, freq = min(pairs.items(), key=lambda kv: (-kv[1], kv[0]))
        if freq < min_frequency:
            break
        new_id = N_BYTES + len(merges)
        merges.append(best)
        words = [(_merge_pair(ids, best, new_id), f) for ids, f in words]
    return Vocabulary(tuple(merges), min_frequency)
