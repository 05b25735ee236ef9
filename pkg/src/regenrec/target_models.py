"""Next-item recommenders trained on (possibly reweighted) pattern datasets."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .corpus import PAD, Dataset, SplitDataset
from .evalkit import evaluate

logger = logging.getLogger(__name__)

MASK_FILL = -1e9


class TrainingError(RuntimeError):
    pass


class NegativeSamplingError(ValueError):
    pass


@dataclass
class TargetModelConfig:
    kind: str = "attention"  # attention | recurrent
    embed_dim: int = 64
    layers: int = 2
    heads: int = 1
    dropout: float = 0.5
    max_len: int = 50
    learning_rate: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 1000
    patience: int = 20
    monitor: str = "val_ndcg@20"

    def __post_init__(self):
        if self.kind not in ("attention", "recurrent"):
            raise ValueError(f"unknown target model kind {self.kind!r}")
        if self.embed_dim <= 0 or self.patience < 1:
            raise ValueError("embed_dim must be > 0 and patience >= 1")


class CausalSelfAttention(nn.Module):
    # written out with matmul/softmax so that double backward is available
    def __init__(self, dim, heads, dropout):
        super().__init__()
        if dim % heads:
            raise ValueError("embed_dim must be divisible by heads")
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, key_pad):
        b, n, d = x.shape
        q, k, v = self.qkv(x).view(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        att = q @ k.transpose(-1, -2) / math.sqrt(d // self.heads)
        causal = torch.ones(n, n, dtype=torch.bool, device=x.device).triu(1)
        blocked = causal[None, None] | key_pad[:, None, None, :]
        att = att.masked_fill(blocked, MASK_FILL).softmax(-1)
        y = (self.drop(att) @ v).transpose(1, 2).reshape(b, n, d)
        return self.out(y)


class AttentionBlock(nn.Module):
    def __init__(self, dim, heads, dropout):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = CausalSelfAttention(dim, heads, dropout)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(nn.Linear(dim, dim), nn.GELU(), nn.Dropout(dropout), nn.Linear(dim, dim))
        self.drop = nn.Dropout(dropout)

    def forward(self, x, key_pad):
        x = x + self.drop(self.attn(self.norm1(x), key_pad))
        return x + self.drop(self.ffn(self.norm2(x)))


class TargetModel(nn.Module):
    """Causal sequence encoder with tied input/output item embeddings.

    Inputs are left-padded ``(B, L)`` id tensors. Positional embeddings are
    indexed by distance from the most recent item, so the last item of a
    prefix always sits at position 0 regardless of padding width.
    """

    def __init__(self, num_items: int, cfg: TargetModelConfig):
        super().__init__()
        self.num_items = num_items
        self.cfg = cfg
        d = cfg.embed_dim
        self.item_emb = nn.Embedding(num_items + 1, d, padding_idx=PAD)
        self.emb_drop = nn.Dropout(cfg.dropout)
        if cfg.kind == "attention":
            self.pos_emb = nn.Embedding(cfg.max_len, d)
            self.blocks = nn.ModuleList(AttentionBlock(d, cfg.heads, cfg.dropout) for _ in range(cfg.layers))
            self.final_norm = nn.LayerNorm(d)
        else:
            self.gru = nn.GRU(d, d, num_layers=cfg.layers, batch_first=True, dropout=cfg.dropout if cfg.layers > 1 else 0.0)
        nn.init.normal_(self.item_emb.weight, std=0.1)
        with torch.no_grad():
            self.item_emb.weight[PAD].zero_()

    def forward(self, x):
        """Per-position hidden states ``(B, L, d)``; PAD rows are zeroed."""
        pad = x == PAD
        h = self.item_emb(x)
        if self.cfg.kind == "attention":
            n = x.shape[1]
            pos = torch.arange(n - 1, -1, -1, device=x.device)
            h = self.emb_drop(h * math.sqrt(self.cfg.embed_dim) + self.pos_emb(pos)[None])
            for block in self.blocks:
                h = block(h, pad)
            h = self.final_norm(h)
        else:
            # rotate each row to right padding so the recurrence starts at the first real item
            n = x.shape[1]
            lengths = (~pad).sum(1, keepdim=True)
            ar = torch.arange(n, device=x.device)[None]
            to_right = ((ar + n - lengths) % n)[..., None].expand_as(h)
            h, _ = self.gru(self.emb_drop(h).gather(1, to_right))
            h = h.gather(1, ((ar + lengths) % n)[..., None].expand_as(h))
        return h.masked_fill(pad[..., None], 0.0)

    def hidden_states(self, pattern) -> torch.Tensor:
        x = encode_batch([pattern], self.cfg.max_len)
        return self(x)[0, x[0] != PAD]

    @torch.no_grad()
    def score_batch(self, prefixes) -> np.ndarray:
        was_training = self.training
        self.eval()
        x = encode_batch(prefixes, self.cfg.max_len)
        last = self(x)[:, -1]
        scores = last @ self.item_emb.weight[1:].T
        self.train(was_training)
        return scores.double().cpu().numpy()

    def score_all_items(self, prefix) -> np.ndarray:
        if len(prefix) < 1:
            raise ValueError("prefix must hold at least one item")
        return self.score_batch([prefix])[0]


def encode_batch(seqs, max_len: int) -> torch.Tensor:
    """Left-pad the most recent ``max_len`` items of each sequence."""
    seqs = [tuple(s)[-max_len:] for s in seqs]
    width = max(len(s) for s in seqs)
    out = torch.zeros(len(seqs), width, dtype=torch.long)
    for row, s in enumerate(seqs):
        if s:
            out[row, width - len(s) :] = torch.as_tensor(s)
    return out


def sample_negatives(x: torch.Tensor, num_items: int, rng: np.random.Generator) -> torch.Tensor:
    """One uniform negative per position, never an item of the same row."""
    xs = x.numpy()
    present = np.zeros((len(xs), num_items + 1), dtype=bool)
    np.put_along_axis(present, xs, True, axis=1)
    present[:, PAD] = True
    if present.all(axis=1).any():
        raise NegativeSamplingError("a pattern contains every item; no negative can be sampled")
    neg = rng.integers(1, num_items + 1, size=xs.shape)
    bad = np.take_along_axis(present, neg, axis=1)
    while bad.any():
        neg[bad] = rng.integers(1, num_items + 1, size=int(bad.sum()))
        bad = np.take_along_axis(present, neg, axis=1)
    neg[xs == PAD] = PAD
    return torch.from_numpy(neg)


def transition_mask(x: torch.Tensor) -> torch.Tensor:
    """``mask[:, j]`` is True when position ``j`` is a prediction target (j >= 1, both j-1 and j real)."""
    valid = x != PAD
    mask = torch.zeros_like(valid)
    mask[:, 1:] = valid[:, 1:] & valid[:, :-1]
    return mask


def next_item_loss_from_hidden(model, hidden, x, neg, weights=None, reduction="sum"):
    """Σ w·[-log σ(h_{t-1}·v_t) - log(1-σ(h_{t-1}·v_neg))] over target positions.

    ``weights`` (same shape as ``x``) is read at the target position.
    ``reduction='mean'`` divides by the number of target positions.
    """
    mask = transition_mask(x)
    h_prev = hidden[:, :-1]
    pos = (h_prev * model.item_emb(x[:, 1:])).sum(-1)
    negl = (h_prev * model.item_emb(neg[:, 1:])).sum(-1)
    terms = F.softplus(-pos) + F.softplus(negl)
    m = mask[:, 1:]
    if weights is not None:
        terms = terms * weights[:, 1:]
    total = terms.masked_fill(~m, 0.0).sum()
    if reduction == "mean":
        return total / m.sum().clamp(min=1)
    return total


def next_item_loss(model, patterns, negatives, weights=None, reduction="sum"):
    """Next-item loss of a batch of patterns.

    ``patterns`` is a padded id tensor or a list of item tuples; ``negatives``
    is aligned with it.
    """
    x = patterns if torch.is_tensor(patterns) else encode_batch(patterns, model.cfg.max_len)
    neg = negatives if torch.is_tensor(negatives) else encode_batch(negatives, model.cfg.max_len)
    return next_item_loss_from_hidden(model, model(x), x, neg, weights, reduction)


class Trainer:
    """Mini-batch Adam training with validation-NDCG early stopping.

    ``weight_fn(hidden, x) -> weights`` reweights the per-position loss;
    subclasses may override :meth:`step` (the bilevel engine does).
    """

    def __init__(self, model: TargetModel, train_ds: Dataset, split: SplitDataset, cfg: TargetModelConfig, seed: int, weight_fn=None):
        self.model = model
        self.patterns = [s.items for s in train_ds if len(s.items) >= 2]
        if not self.patterns:
            raise ValueError("training data holds no pattern with >= 2 items")
        self.split = split
        self.cfg = cfg
        self.weight_fn = weight_fn
        self.rng = np.random.default_rng([seed, 1])
        self.opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
        self.global_step = 0
        self.history: list[dict] = []

    def batches(self):
        order = self.rng.permutation(len(self.patterns))
        for start in range(0, len(order), self.cfg.batch_size):
            x = encode_batch([self.patterns[i] for i in order[start : start + self.cfg.batch_size]], self.cfg.max_len)
            yield x, sample_negatives(x, self.model.num_items, self.rng)

    def loss(self, x, neg, stochastic=True):
        hidden = self.model(x)
        w = None if self.weight_fn is None else self.weight_fn(hidden.detach(), x, stochastic)
        return next_item_loss_from_hidden(self.model, hidden, x, neg, w, reduction="mean")

    def step(self, x, neg) -> float:
        self.opt.zero_grad()
        loss = self.loss(x, neg)
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite loss at step {self.global_step}")
        loss.backward(inputs=[p for p in self.model.parameters() if p.requires_grad])
        self.opt.step()
        return loss.item()

    def validate(self) -> float:
        report = evaluate(self.model, self.split, ks=(10, 20))
        return report[self.cfg.monitor]

    def fit(self):
        best, best_state, stale = -math.inf, None, 0
        for epoch in range(self.cfg.max_epochs):
            self.model.train()
            losses = []
            for x, neg in self.batches():
                losses.append(self.step(x, neg))
                self.global_step += 1
            score = self.validate()
            self.history.append({"epoch": epoch, "loss": float(np.mean(losses)), self.cfg.monitor: score})
            if score > best:
                best, stale = score, 0
                best_state = self.snapshot()
            else:
                stale += 1
                if stale >= self.cfg.patience:
                    break
        if best_state is not None:
            self.restore(best_state)
        self.model.eval()
        return self.model

    def snapshot(self):
        return copy.deepcopy(self.model.state_dict())

    def restore(self, state):
        self.model.load_state_dict(state)


def build_model(num_items: int, cfg: TargetModelConfig, seed: int, dtype=torch.float32) -> TargetModel:
    torch.manual_seed(seed)
    return TargetModel(num_items, cfg).to(dtype)


def train_target(ds: Dataset, split: SplitDataset, cfg: TargetModelConfig, seed: int, weight_source=None, dtype=torch.float32):
    """Train a target model on ``ds``; validation uses ``split`` (the original data).

    ``weight_source`` is ``None`` (unweighted) or a personalizer whose
    per-position weights scale the loss.
    """
    model = build_model(ds.num_items, cfg, seed, dtype)
    weight_fn = None
    if weight_source is not None:
        gen = torch.Generator().manual_seed(seed)
        weight_fn = lambda h, x, stochastic: weight_source.position_weights(h, x, stochastic=stochastic, generator=gen)
    trainer = Trainer(model, ds, split, cfg, seed, weight_fn)
    torch.manual_seed(seed)
    trainer.fit()
    return model, trainer.history


def config_dict(cfg) -> dict:
    return asdict(cfg)
