"""Byte-pair encoding over a byte alphabet with a fixed final vocabulary.

The vocabulary always has exactly `vocab_size` entries: 256 byte symbols,
then one symbol per learned merge, then reserved unused entries when the
corpus runs out of repeating pairs before the budget is spent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels


@dataclass
class BpeModel:
    base: int
    vocab_size: int
    merges: list[tuple[int, int]]
    ranks: dict = field(default_factory=dict, repr=False)
    expansions: list[bytes] = field(default_factory=list, repr=False)

    def __post_init__(self):
        if not self.ranks or not self.expansions:
            self._build_tables()

    def _build_tables(self) -> None:
        self.ranks = {
            pair: (rank, self.base + rank) for rank, pair in enumerate(self.merges)
        }
        self.expansions = [bytes([i]) for i in range(self.base)]
        for a, b in self.merges:
            self.expansions.append(self.expansions[a] + self.expansions[b])

    @property
    def n_reserved(self) -> int:
        return self.vocab_size - self.base - len(self.merges)


def train_bpe(corpus, vocab_size: int = 1024, base: int = 256,
              min_count: int = 2) -> BpeModel:
    """Learn merges greedily by pair frequency (ties: smallest pair).

    Stops when the merge budget (vocab_size - base) is spent or no pair
    reaches min_count; leftover vocabulary entries stay reserved.
    """
    if vocab_size <= base:
        raise ValueError(f"vocab_size {vocab_size} must exceed base {base}")
    seqs = [np.asarray(bytearray(c) if isinstance(c, (bytes, bytearray)) else c,
                       dtype=np.int32) for c in corpus]
    for s in seqs:
        if s.size and (s.min() < 0 or s.max() >= base):
            raise ValueError(f"corpus symbols outside base alphabet [0, {base})")
    merges: list[tuple[int, int]] = []
    budget = vocab_size - base
    while len(merges) < budget:
        counts = kernels.pair_counts(seqs)
        if not counts:
            break
        best_pair = min(counts, key=lambda p: (-counts[p], p))
        if counts[best_pair] < min_count:
            break
        new_id = base + len(merges)
        merges.append((int(best_pair[0]), int(best_pair[1])))
        seqs = [kernels.merge_pair(s, best_pair[0], best_pair[1], new_id)
                for s in seqs]
    return BpeModel(base=base, vocab_size=vocab_size, merges=merges)


def bpe_encode(model: BpeModel, data: bytes) -> np.ndarray:
    """Encode bytes to symbol ids (np.int32)."""
    seq = np.frombuffer(bytes(data), dtype=np.uint8).astype(np.int32)
    if seq.size == 0:
        return np.zeros(0, dtype=np.int32)
    return kernels.encode_ranked(seq, model.ranks)


def bpe_decode(model: BpeModel, ids) -> bytes:
    """Expand symbol ids back to bytes; reserved/unknown ids are errors."""
    out = bytearray()
    n_real = model.base + len(model.merges)
    for i in np.asarray(ids).tolist():
        if not 0 <= i < model.vocab_size:
            raise ValueError(f"symbol id {i} outside vocabulary")
        if i >= n_real:
            raise ValueError(f"symbol id {i} is a reserved unused entry")
        out.extend(model.expansions[i])
    return bytes(out)
