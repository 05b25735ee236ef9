"""Leave-one-out ranking metrics against the full item catalog."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import Dataset, SplitDataset

DEFAULT_KS = (10, 20)


def rank_of_target(scores, target: int) -> int:
    """1-based rank of ``target`` among items ``1..V``; ties go to the smaller id.

    ``scores[j]`` is the score of item ``j + 1``.
    """
    scores = np.asarray(scores)
    if not 1 <= target <= len(scores):
        raise ValueError(f"target {target} outside 1..{len(scores)}")
    s = scores[target - 1]
    higher = int(np.count_nonzero(scores > s))
    tied_before = int(np.count_nonzero(scores[: target - 1] == s))
    return 1 + higher + tied_before


def recall_at_k(rank: int, k: int) -> float:
    return 1.0 if rank <= k else 0.0


def ndcg_at_k(rank: int, k: int) -> float:
    # one relevant item, so IDCG = 1
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0


@dataclass
class MetricReport:
    metrics: dict[str, float]
    num_users: int
    config: dict = field(default_factory=dict)
    ranks: dict[str, list[int]] = field(default_factory=dict)

    def __getitem__(self, key):
        return self.metrics[key]

    def to_text(self) -> str:
        lines = [f"num_users\t{self.num_users}"]
        lines += [f"{k}\t{v:.10f}" for k, v in sorted(self.metrics.items())]
        lines += [f"config.{k}\t{v}" for k, v in sorted(self.config.items())]
        return "\n".join(lines) + "\n"

    def write(self, path, rank_dump=None) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text(), encoding="utf-8")
        if rank_dump is not None:
            with Path(rank_dump).open("w", encoding="utf-8", newline="\n") as fh:
                for part, ranks in sorted(self.ranks.items()):
                    for user, r in enumerate(ranks):
                        fh.write(f"{part}\t{user}\t{r}\n")

    @classmethod
    def read(cls, path) -> "MetricReport":
        metrics, config, num_users = {}, {}, 0
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            key, value = line.split("\t", 1)
            if key == "num_users":
                num_users = int(value)
            elif key.startswith("config."):
                config[key[7:]] = value
            else:
                metrics[key] = float(value)
        return cls(metrics, num_users, config)


def _score_fn(model):
    if callable(getattr(model, "score_batch", None)):
        return model.score_batch
    if callable(model):
        return model
    raise TypeError("model must expose score_batch(prefixes) or be callable")


def evaluate(model, split: SplitDataset, ks=DEFAULT_KS, exclude_seen: bool = False, batch_size: int = 512) -> MetricReport:
    """Mean Recall@K / NDCG@K over users, for the validation and test targets.

    ``model`` is anything with ``score_batch(prefixes) -> (n, V) array`` or a
    callable with that signature.
    """
    if not split.test_targets:
        raise ValueError("empty split")
    score = _score_fn(model)
    metrics: dict[str, float] = {}
    all_ranks: dict[str, list[int]] = {}
    for part, targets in (("val", split.val_targets), ("test", split.test_targets)):
        ranks = []
        for start in range(0, len(targets), batch_size):
            chunk = targets[start : start + batch_size]
            scores = np.asarray(score([p for p, _ in chunk]), dtype=np.float64)
            for row, (prefix, target) in zip(scores, chunk):
                if exclude_seen:
                    row = row.copy()
                    seen = [i - 1 for i in set(prefix) if i != target]
                    row[seen] = -np.inf
                ranks.append(rank_of_target(row, target))
        all_ranks[part] = ranks
        for k in ks:
            metrics[f"{part}_recall@{k}"] = float(np.mean([recall_at_k(r, k) for r in ranks]))
            metrics[f"{part}_ndcg@{k}"] = float(np.mean([ndcg_at_k(r, k) for r in ranks]))
    return MetricReport(
        metrics,
        num_users=len(split.test_targets),
        config={"ks": ",".join(map(str, ks)), "exclude_seen": exclude_seen, "candidates": "all"},
        ranks=all_ranks,
    )


class PopularityScorer:
    """Scores every item by its training-set frequency."""

    def __init__(self, ds: Dataset):
        counts = Counter(i for s in ds for i in s.items)
        self.scores = np.array([counts.get(i, 0) for i in range(1, ds.num_items + 1)], dtype=np.float64)

    def score_batch(self, prefixes):
        return np.tile(self.scores, (len(prefixes), 1))
