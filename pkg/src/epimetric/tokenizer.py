"""Subword, context, and time vocabularies for turning raw actions into id sequences.

Text is tokenized with byte-pair merging learned from data: the base alphabet
is all 256 bytes (any UTF-8 string encodes), merges never cross whitespace
boundaries, and tie-breaking is lexicographic so learning is deterministic.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass

import numpy as np

PAD_ID = 0
EOS_ID = 1
BYTE_OFFSET = 2
NUM_RESERVED = BYTE_OFFSET + 256  # pad + eos + every byte

VOCAB_FILE_VERSION = 1

_CHUNK_RE = re.compile(rb"\S+|\s+")


class VocabError(ValueError):
    pass


class SubwordVocab:
    """Ordered byte-pair merges plus the id space they induce.

    ids: 0 pad, 1 eos, 2..257 single bytes, 258.. merged tokens in merge order.
    """

    def __init__(self, merges: list[tuple[bytes, bytes]]):
        self.merges = list(merges)
        self.token_to_id: dict[bytes, int] = {bytes([b]): BYTE_OFFSET + b for b in range(256)}
        self.ranks: dict[tuple[bytes, bytes], int] = {}
        next_id = NUM_RESERVED
        for rank, (a, b) in enumerate(self.merges):
            self.ranks[(a, b)] = rank
            merged = a + b
            if merged not in self.token_to_id:
                self.token_to_id[merged] = next_id
                next_id += 1
        self.size = next_id
        self._id_to_token: dict[int, bytes] = {i: tok for tok, i in self.token_to_id.items()}
        self._chunk_cache: dict[bytes, tuple[int, ...]] = {}

    def _merge_chunk(self, chunk: bytes) -> tuple[int, ...]:
        cached = self._chunk_cache.get(chunk)
        if cached is not None:
            return cached
        parts = [bytes([b]) for b in chunk]
        while len(parts) > 1:
            best_rank = None
            for i in range(len(parts) - 1):
                r = self.ranks.get((parts[i], parts[i + 1]))
                if r is not None and (best_rank is None or r < best_rank):
                    best_rank = r
            if best_rank is None:
                break
            a, b = self.merges[best_rank]
            out = []
            i = 0
            while i < len(parts):
                if i + 1 < len(parts) and parts[i] == a and parts[i + 1] == b:
                    out.append(a + b)
                    i += 2
                else:
                    out.append(parts[i])
                    i += 1
            parts = out
        ids = tuple(self.token_to_id[p] for p in parts)
        if len(self._chunk_cache) > 1 << 16:
            self._chunk_cache.clear()
        self._chunk_cache[chunk] = ids
        return ids

    def encode(self, text: str, T: int) -> list[int]:
        """Encode to exactly T ids: merges, then eos, truncated/padded as needed."""
        ids: list[int] = []
        raw = text.encode("utf-8")
        for m in _CHUNK_RE.finditer(raw):
            ids.extend(self._merge_chunk(m.group(0)))
            if len(ids) >= T:  # eos may be truncated away
                return ids[:T]
        ids.append(EOS_ID)
        if len(ids) >= T:
            return ids[:T]
        return ids + [PAD_ID] * (T - len(ids))

    def decode(self, ids) -> str:
        pieces = []
        for i in ids:
            i = int(i)
            if i in (PAD_ID, EOS_ID):
                continue
            tok = self._id_to_token.get(i)
            if tok is None:
                raise VocabError(f"id {i} outside vocabulary of size {self.size}")
            pieces.append(tok)
        return b"".join(pieces).decode("utf-8", errors="replace")


def learn_bpe(texts, V: int) -> SubwordVocab:
    """Greedy highest-frequency pair merging from bytes until V tokens or no pair repeats."""
    if V < NUM_RESERVED:
        raise VocabError(f"target size {V} below reserved+byte alphabet ({NUM_RESERVED})")
    chunk_counts: Counter[bytes] = Counter()
    for text in texts:
        for m in _CHUNK_RE.finditer(text.encode("utf-8")):
            chunk_counts[m.group(0)] += 1
    if not chunk_counts:
        raise VocabError("learn_bpe: empty text sample")

    # work on unique chunks weighted by frequency; merges never cross chunks
    seqs = [[bytes([b]) for b in chunk] for chunk in chunk_counts]
    weights = list(chunk_counts.values())
    merges: list[tuple[bytes, bytes]] = []
    vocab: set[bytes] = {bytes([b]) for b in range(256)}

    while len(vocab) + BYTE_OFFSET < V:
        pair_counts: Counter[tuple[bytes, bytes]] = Counter()
        for seq, w in zip(seqs, weights):
            for i in range(len(seq) - 1):
                pair_counts[(seq[i], seq[i + 1])] += w
        if not pair_counts:
            break
        best_count = max(pair_counts.values())
        if best_count < 2:
            break
        best = min(p for p, c in pair_counts.items() if c == best_count)
        a, b = best
        merges.append(best)
        vocab.add(a + b)
        for idx, seq in enumerate(seqs):
            if len(seq) < 2:
                continue
            out = []
            i = 0
            while i < len(seq):
                if i + 1 < len(seq) and seq[i] == a and seq[i + 1] == b:
                    out.append(a + b)
                    i += 2
                else:
                    out.append(seq[i])
                    i += 1
            seqs[idx] = out
    return SubwordVocab(merges)


def encode_text(vocab: SubwordVocab, text: str, T: int) -> list[int]:
    return vocab.encode(text, T)


class ContextVocab:
    """Top-K contexts by training frequency; everything else maps to unk (id 0)."""

    UNK = "unk"
    UNK_ID = 0

    def __init__(self, contexts: list[str]):
        self.contexts = list(contexts)
        self._ids = {c: i + 1 for i, c in enumerate(self.contexts)}

    @classmethod
    def fit(cls, contexts, K: int) -> "ContextVocab":
        counts = Counter(contexts)
        counts.pop(cls.UNK, None)
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        return cls([name for name, _ in ranked[:K]])

    @property
    def size(self) -> int:
        return len(self.contexts) + 1

    def encode(self, context: str) -> int:
        return self._ids.get(context, self.UNK_ID)


def time_feature(timestamp: float) -> int:
    """UTC hour of day in [0, 24)."""
    return int(timestamp // 3600) % 24


@dataclass
class EncodedAction:
    text_ids: np.ndarray  # exactly T ids
    hour_id: int
    context_id: int


@dataclass
class Vocabulary:
    """The bundle the encoder consumes: subword + context vocab and text length T."""

    subword: SubwordVocab
    context: ContextVocab
    T: int = 32

    def encode_action(self, text: str, timestamp: float, context: str) -> EncodedAction:
        return EncodedAction(
            text_ids=np.asarray(self.subword.encode(text, self.T), dtype=np.int64),
            hour_id=time_feature(timestamp),
            context_id=self.context.encode(context),
        )

    def save(self, path) -> None:
        doc = {
            "version": VOCAB_FILE_VERSION,
            "reserved": {"pad": PAD_ID, "eos": EOS_ID, "byte_offset": BYTE_OFFSET},
            "T": self.T,
            "merges": [[list(a), list(b)] for a, b in self.subword.merges],
            "contexts": self.context.contexts,
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        if doc.get("version") != VOCAB_FILE_VERSION:
            raise VocabError(f"unsupported vocabulary file version {doc.get('version')!r}")
        merges = [(bytes(a), bytes(b)) for a, b in doc["merges"]]
        return cls(subword=SubwordVocab(merges), context=ContextVocab(doc["contexts"]), T=int(doc["T"]))
