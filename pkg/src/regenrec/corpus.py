"""Interaction-sequence datasets: loading, leave-one-out splitting, synthesis."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

PAD = 0
DEFAULT_MAX_LEN = 50


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Sequence:
    user_id: int
    items: tuple[int, ...]

    def __len__(self):
        return len(self.items)


@dataclass(frozen=True)
class Dataset:
    """A list of user sequences over items ``1..num_items``.

    ``provenance`` is only set on regenerated datasets: one
    ``(source_user_id, memory_index)`` pair per sequence.
    """

    sequences: tuple[Sequence, ...]
    num_items: int
    name: str = "dataset"
    provenance: tuple[tuple[int, int], ...] | None = None

    def __post_init__(self):
        if not self.sequences:
            raise DatasetError(f"{self.name}: dataset has no sequences")
        top = max(max(s.items) for s in self.sequences)
        if top > self.num_items:
            raise DatasetError(f"{self.name}: item id {top} exceeds num_items={self.num_items}")
        if self.provenance is not None and len(self.provenance) != len(self.sequences):
            raise DatasetError("provenance length does not match sequence count")

    def __len__(self):
        return len(self.sequences)

    def __iter__(self):
        return iter(self.sequences)

    def item_lists(self) -> list[tuple[int, ...]]:
        return [s.items for s in self.sequences]


@dataclass(frozen=True)
class SplitDataset:
    """Leave-one-out split.

    ``val_targets[i]`` and ``test_targets[i]`` are ``(prefix, target)`` pairs for
    the user of ``train.sequences[i]``; the validation prefix is the train
    sequence, the test prefix is train + validation item.
    """

    train: Dataset
    val_targets: tuple[tuple[tuple[int, ...], int], ...]
    test_targets: tuple[tuple[tuple[int, ...], int], ...]
    excluded: int = 0
    user_ids: tuple[int, ...] = field(default=())

    @property
    def num_items(self) -> int:
        return self.train.num_items


def _parse_line(line: str, lineno: int) -> tuple[int, list[int]]:
    try:
        fields = [int(tok) for tok in line.split()]
    except ValueError as exc:
        raise DatasetError(f"line {lineno}: non-integer token ({exc})") from None
    if len(fields) < 2:
        raise DatasetError(f"line {lineno}: expected '<user_id> <item_id>...' with at least one item")
    user, items = fields[0], fields[1:]
    if user < 0:
        raise DatasetError(f"line {lineno}: negative user id {user}")
    bad = [i for i in items if i <= PAD]
    if bad:
        raise DatasetError(f"line {lineno}: item id {bad[0]} is reserved or negative (ids are 1-based)")
    return user, items


def load_dataset(
    path,
    max_len: int | None = DEFAULT_MAX_LEN,
    remap: bool = False,
    num_items: int | None = None,
    name: str | None = None,
) -> Dataset:
    """Read a dataset file with one ``<user_id> <item_id>...`` line per user.

    Sequences keep their most recent ``max_len`` items. With ``remap`` the
    item ids are renumbered densely (by first appearance) to ``1..V``.
    """
    path = Path(path)
    rows = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            rows.append(_parse_line(line, lineno))
    if not rows:
        raise DatasetError(f"{path}: empty dataset")

    if remap:
        mapping: dict[int, int] = {}
        for _, items in rows:
            for i in items:
                mapping.setdefault(i, len(mapping) + 1)
        rows = [(u, [mapping[i] for i in items]) for u, items in rows]

    if max_len is not None:
        rows = [(u, items[-max_len:]) for u, items in rows]
    seqs = tuple(Sequence(u, tuple(items)) for u, items in rows)
    top = max(max(s.items) for s in seqs)
    return Dataset(seqs, num_items=num_items or top, name=name or path.stem)


def save_dataset(ds: Dataset, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for s in ds.sequences:
            fh.write(" ".join(map(str, (s.user_id, *s.items))) + "\n")


def truncate(ds: Dataset, max_len: int) -> Dataset:
    seqs = tuple(Sequence(s.user_id, s.items[-max_len:]) for s in ds.sequences)
    return Dataset(seqs, ds.num_items, ds.name, ds.provenance)


def leave_one_out_split(ds: Dataset) -> SplitDataset:
    """Hold out the last item for test and the second-to-last for validation.

    Sequences shorter than 3 cannot supply both held-out items and are
    dropped; their count is reported in ``excluded``.
    """
    train, val, test, users = [], [], [], []
    excluded = 0
    for s in ds.sequences:
        if len(s.items) < 3:
            excluded += 1
            continue
        prefix = s.items[:-2]
        train.append(Sequence(s.user_id, prefix))
        val.append((prefix, s.items[-2]))
        test.append((s.items[:-1], s.items[-1]))
        users.append(s.user_id)
    if excluded:
        logger.warning("leave_one_out_split: %d sequence(s) shorter than 3 excluded", excluded)
    if not train:
        raise DatasetError(f"{ds.name}: no sequence has the 3 interactions leave-one-out needs")
    return SplitDataset(
        train=Dataset(tuple(train), ds.num_items, f"{ds.name}-train"),
        val_targets=tuple(val),
        test_targets=tuple(test),
        excluded=excluded,
        user_ids=tuple(users),
    )


def generate_synthetic(
    num_users: int,
    num_items: int,
    planted_patterns,
    noise_rate: float,
    seed: int,
    patterns_per_user: tuple[int, int] = (2, 5),
    with_labels: bool = False,
):
    """Build sequences by concatenating randomly chosen planted patterns.

    Before each planted item, noise items are drawn uniformly from the
    vocabulary: every emitted position is noise with probability
    ``noise_rate``, so the expected noise fraction equals ``noise_rate``.

    With ``with_labels`` also returns one boolean noise mask per sequence.
    """
    if not planted_patterns:
        raise ValueError("planted_patterns must be non-empty")
    if not 0.0 <= noise_rate <= 1.0:
        raise ValueError(f"noise_rate must lie in [0, 1], got {noise_rate}")
    if noise_rate >= 1.0:
        raise ValueError("noise_rate=1 never emits a planted item")
    patterns = [tuple(int(i) for i in p) for p in planted_patterns]
    for p in patterns:
        if not p or min(p) < 1 or max(p) > num_items:
            raise ValueError(f"planted pattern {p} outside vocabulary 1..{num_items}")
    lo, hi = patterns_per_user

    rng = np.random.default_rng(seed)
    seqs, masks = [], []
    for u in range(num_users):
        chosen = rng.integers(len(patterns), size=int(rng.integers(lo, hi + 1)))
        items, mask = [], []
        for k in chosen:
            for item in patterns[k]:
                while rng.random() < noise_rate:
                    items.append(int(rng.integers(1, num_items + 1)))
                    mask.append(True)
                items.append(item)
                mask.append(False)
        seqs.append(Sequence(u, tuple(items)))
        masks.append(tuple(mask))
    ds = Dataset(tuple(seqs), num_items=num_items, name="synthetic")
    if with_labels:
        return ds, masks
    return ds
