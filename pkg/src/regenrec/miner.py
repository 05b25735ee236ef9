"""Window-constrained sequential pattern mining for the pre-training pairs."""

from __future__ import annotations

import itertools
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

from .corpus import Dataset


@dataclass(frozen=True)
class MinerConfig:
    window_size: int = 10
    threshold: int = 2
    max_pattern_len: int | None = None  # defaults to window_size
    count_occurrences: bool = False

    def __post_init__(self):
        if self.window_size < 2:
            raise ValueError("window_size must be >= 2")
        if self.threshold < 1:
            raise ValueError("threshold must be >= 1")
        if not 2 <= self.max_len <= self.window_size:
            raise ValueError("max_pattern_len must lie in [2, window_size]")

    @property
    def max_len(self) -> int:
        return self.window_size if self.max_pattern_len is None else self.max_pattern_len


@dataclass(frozen=True, order=True)
class Pattern:
    items: tuple[int, ...]
    support: int

    def sort_key(self):
        return (len(self.items), self.items)


@dataclass(frozen=True)
class PretrainPair:
    sequence_index: int
    pattern: Pattern


def window_occurrences(items, window_size: int, max_len: int):
    """Yield every position tuple whose span fits inside one window.

    A tuple ``(i1, ..., ik)`` qualifies when ``2 <= k <= max_len`` and
    ``ik - i1 < window_size``.
    """
    n = len(items)
    for first in range(n):
        rest = range(first + 1, min(n, first + window_size))
        for k in range(1, max_len):
            for tail in itertools.combinations(rest, k):
                yield (first, *tail)


def window_subsequences(items, window_size: int, max_len: int) -> Counter:
    """Count the distinct item tuples occurring within a window of ``items``."""
    out: Counter = Counter()
    for pos in window_occurrences(items, window_size, max_len):
        out[tuple(items[i] for i in pos)] += 1
    return out


def mine_patterns(ds: Dataset, cfg: MinerConfig) -> list[Pattern]:
    """Every window-constrained subsequence of length 2..M with support >= threshold.

    Support is the number of sequences containing the pattern inside some
    window (or the number of occurrence tuples with ``count_occurrences``).
    """
    support: Counter = Counter()
    for items in ds.item_lists():
        found = window_subsequences(items, cfg.window_size, cfg.max_len)
        if cfg.count_occurrences:
            support.update(found)
        else:
            support.update(found.keys())
    kept = [Pattern(p, c) for p, c in support.items() if c >= cfg.threshold]
    kept.sort(key=Pattern.sort_key)
    return kept


def build_pretrain_pairs(ds: Dataset, patterns, cfg: MinerConfig) -> list[PretrainPair]:
    """Pair each sequence with every mined pattern occurring inside one of its windows."""
    if not patterns:
        return []
    by_items = {p.items: p for p in patterns}
    pairs = []
    for idx, items in enumerate(ds.item_lists()):
        found = window_subsequences(items, cfg.window_size, cfg.max_len)
        hits = [by_items[t] for t in found if t in by_items]
        hits.sort(key=Pattern.sort_key)
        pairs.extend(PretrainPair(idx, p) for p in hits)
    return pairs


def brute_force_support(ds: Dataset, pattern, window_size: int, count_occurrences: bool = False) -> int:
    """Reference support count by exhaustive enumeration of position tuples."""
    pattern = tuple(pattern)
    if len(pattern) < 2:
        raise ValueError("pattern length must be >= 2")
    total = 0
    for items in ds.item_lists():
        hits = 0
        for pos in itertools.combinations(range(len(items)), len(pattern)):
            if pos[-1] - pos[0] < window_size and all(items[i] == p for i, p in zip(pos, pattern)):
                hits += 1
        total += hits if count_occurrences else int(hits > 0)
    return total


def write_patterns(patterns, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for p in patterns:
            fh.write(" ".join(map(str, (p.support, *p.items))) + "\n")


def read_patterns(path) -> list[Pattern]:
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                support, *items = map(int, line.split())
                out.append(Pattern(tuple(items), support))
    return out
