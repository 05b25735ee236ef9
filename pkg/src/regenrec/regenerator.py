"""Encoder-decoder that regenerates sequences into patterns.

The encoder output is projected into K memory spaces. During pre-training a
promoter reads the gold pattern and mixes the K memories with softmax
weights; at inference every memory is decoded separately, which yields up to
K patterns per sequence.
"""

from __future__ import annotations

import copy
import logging
import math
import zlib
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .corpus import PAD, Dataset, Sequence
from .target_models import TrainingError

logger = logging.getLogger(__name__)


@dataclass
class RegeneratorConfig:
    embed_dim: int = 64
    encoder_layers: int = 2
    decoder_layers: int = 2
    attention_heads: int = 2
    ffn_dim: int = 128
    dropout: float = 0.1
    diversity_K: int = 5
    max_src_len: int = 50
    max_pattern_len: int = 10
    memory_pooling: str = "none"  # none | mean
    share_embeddings: bool = True
    learning_rate: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 200
    patience: int = 10
    holdout_fraction: float = 0.1

    def __post_init__(self):
        if self.diversity_K < 1 or self.embed_dim <= 0:
            raise ValueError("diversity_K must be >= 1 and embed_dim > 0")
        if self.memory_pooling not in ("none", "mean"):
            raise ValueError(f"unknown memory_pooling {self.memory_pooling!r}")


def _encoder(cfg: RegeneratorConfig, layers: int) -> nn.TransformerEncoder:
    layer = nn.TransformerEncoderLayer(cfg.embed_dim, cfg.attention_heads, cfg.ffn_dim, cfg.dropout, batch_first=True)
    return nn.TransformerEncoder(layer, layers, enable_nested_tensor=False)


class RegeneratorModel(nn.Module):
    def __init__(self, num_items: int, cfg: RegeneratorConfig):
        super().__init__()
        self.num_items = num_items
        self.cfg = cfg
        self.bos, self.eos = num_items + 1, num_items + 2
        self.vocab = num_items + 3
        d = cfg.embed_dim
        self.tok_emb = nn.Embedding(self.vocab, d, padding_idx=PAD)
        self.src_pos = nn.Embedding(cfg.max_src_len, d)
        self.tgt_pos = nn.Embedding(cfg.max_pattern_len + 2, d)
        self.encoder = _encoder(cfg, cfg.encoder_layers)
        self.memory_proj = nn.ModuleList(nn.Linear(d, d) for _ in range(cfg.diversity_K))
        self.pattern_emb = None if cfg.share_embeddings else nn.Embedding(self.vocab, d, padding_idx=PAD)
        self.pattern_encoder = _encoder(cfg, cfg.encoder_layers)
        self.promoter = nn.Sequential(nn.Linear(d, d), nn.Tanh(), nn.Linear(d, cfg.diversity_K))
        dec_layer = nn.TransformerDecoderLayer(d, cfg.attention_heads, cfg.ffn_dim, cfg.dropout, batch_first=True)
        self.decoder = nn.TransformerDecoder(dec_layer, cfg.decoder_layers)
        self.out = nn.Linear(d, self.vocab)

    # -- building blocks -------------------------------------------------
    def _embed(self, x, pos_table, emb=None):
        emb = emb or self.tok_emb
        pos = torch.arange(x.shape[1], device=x.device)
        return emb(x) * math.sqrt(self.cfg.embed_dim) + pos_table(pos)[None]

    def encode(self, src):
        """K projected memory sequences ``(K, B, L, d)`` and the source pad mask."""
        pad = src == PAD
        h = self.encoder(self._embed(src, self.src_pos), src_key_padding_mask=pad)
        bank = torch.stack([proj(h) for proj in self.memory_proj])
        if self.cfg.memory_pooling == "mean":
            keep = (~pad).to(h.dtype)[None, :, :, None]
            bank = (bank * keep).sum(2, keepdim=True) / keep.sum(2, keepdim=True)
            pad = torch.zeros(src.shape[0], 1, dtype=torch.bool, device=src.device)
        return bank, pad

    def promote(self, pattern):
        """Probability vector over the K memories from a right-padded pattern batch ``(B, T)``."""
        pad = pattern == PAD
        h = self.pattern_encoder(self._embed(pattern, self.tgt_pos, self.pattern_emb), src_key_padding_mask=pad)
        keep = (~pad).to(h.dtype)[..., None]
        pooled = (h * keep).sum(1) / keep.sum(1).clamp(min=1)
        return torch.softmax(self.promoter(pooled), dim=-1)

    def decode(self, tgt_in, memory, memory_pad):
        """Logits ``(B, T, vocab)`` with PAD never predictable."""
        n = tgt_in.shape[1]
        causal = torch.ones(n, n, dtype=torch.bool, device=tgt_in.device).triu(1)
        h = self.decoder(
            self._embed(tgt_in, self.tgt_pos),
            memory,
            tgt_mask=causal,
            tgt_key_padding_mask=tgt_in == PAD,
            memory_key_padding_mask=memory_pad,
        )
        logits = self.out(h)
        return logits.masked_fill(self._pad_column(logits), -math.inf)

    def _pad_column(self, logits):
        mask = torch.zeros(logits.shape[-1], dtype=torch.bool, device=logits.device)
        mask[PAD] = True
        return mask


def mix_memories(bank, pi, atol: float = 1e-5):
    """Position-wise convex combination ``sum_k pi_k m'_k``.

    ``bank`` is ``(K, B, L, d)`` and ``pi`` is ``(B, K)`` (or ``(K,)`` for
    one shared mixture).
    """
    if pi.dim() == 1:
        pi = pi[None].expand(bank.shape[1], -1)
    if pi.shape[-1] != bank.shape[0]:
        raise ValueError(f"pi has {pi.shape[-1]} entries, bank has K={bank.shape[0]}")
    if not torch.allclose(pi.sum(-1), torch.ones((), dtype=pi.dtype), atol=atol):
        raise ValueError("pi must sum to 1")
    return torch.einsum("kbld,bk->bld", bank, pi)


# -- tensors from pairs -------------------------------------------------------


def pad_right(seqs, width=None) -> torch.Tensor:
    width = width or max(len(s) for s in seqs)
    out = torch.zeros(len(seqs), width, dtype=torch.long)
    for row, s in enumerate(seqs):
        out[row, : len(s)] = torch.as_tensor(s[:width])
    return out


def make_batch(model: RegeneratorModel, sources, patterns):
    """Source, pattern, teacher-forcing input and target tensors."""
    cfg = model.cfg
    src = pad_right([tuple(s)[-cfg.max_src_len :] for s in sources])
    pats = [tuple(p)[: cfg.max_pattern_len] for p in patterns]
    pattern = pad_right(pats)
    tgt_in = pad_right([(model.bos, *p) for p in pats])
    tgt_out = pad_right([(*p, model.eos) for p in pats])
    return src, pattern, tgt_in, tgt_out


def reconstruction_loss(model: RegeneratorModel, src, pattern, tgt_in, tgt_out):
    """Mean per-token NLL of the gold pattern (and EOS), decoded from the promoted memory mix."""
    bank, mem_pad = model.encode(src)
    memory = mix_memories(bank, model.promote(pattern))
    logits = model.decode(tgt_in, memory, mem_pad)
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), tgt_out.reshape(-1), ignore_index=PAD)


def pair_loss(model, ds: Dataset, pairs):
    items = ds.item_lists()
    return reconstruction_loss(model, *make_batch(model, [items[p.sequence_index] for p in pairs], [p.pattern.items for p in pairs]))


# -- pre-training -------------------------------------------------------------


def _is_holdout(pair, fraction: float) -> bool:
    key = f"{pair.sequence_index}:{','.join(map(str, pair.pattern.items))}".encode()
    return zlib.crc32(key) % 1000 < int(round(fraction * 1000))


def build_model(num_items: int, cfg: RegeneratorConfig, seed: int, dtype=torch.float32) -> RegeneratorModel:
    torch.manual_seed(seed)
    return RegeneratorModel(num_items, cfg).to(dtype)


def pretrain(ds: Dataset, pairs, cfg: RegeneratorConfig, seed: int, dtype=torch.float32):
    """Fit the regenerator on (sequence, pattern) pairs with Adam.

    Early stopping watches the loss of a hash-selected held-out slice; when
    that slice would be empty (tiny corpora) the training loss is watched.
    Returns ``(model, history)``.
    """
    if not pairs:
        raise ValueError("no pre-training pairs")
    holdout = [p for p in pairs if _is_holdout(p, cfg.holdout_fraction)]
    train = [p for p in pairs if not _is_holdout(p, cfg.holdout_fraction)]
    if not holdout or not train:
        train, holdout = list(pairs), []

    model = build_model(ds.num_items, cfg, seed, dtype)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    rng = np.random.default_rng([seed, 4])
    torch.manual_seed(seed)
    history, best, best_state, stale = [], math.inf, None, 0
    for epoch in range(cfg.max_epochs):
        model.train()
        order = rng.permutation(len(train))
        total, count = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            batch = [train[i] for i in order[start : start + cfg.batch_size]]
            opt.zero_grad()
            loss = pair_loss(model, ds, batch)
            if not torch.isfinite(loss):
                raise TrainingError(f"regenerator loss became non-finite in epoch {epoch}")
            loss.backward()
            opt.step()
            total += loss.item() * len(batch)
            count += len(batch)
        record = {"epoch": epoch, "train_loss": total / count}
        if holdout:
            record["holdout_loss"] = evaluate_loss(model, ds, holdout, cfg.batch_size)
        history.append(record)
        watched = record.get("holdout_loss", record["train_loss"])
        if watched < best - 1e-6:
            best, stale, best_state = watched, 0, copy.deepcopy(model.state_dict())
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return model, history


@torch.no_grad()
def evaluate_loss(model, ds, pairs, batch_size=256) -> float:
    was_training = model.training
    model.eval()
    total = 0.0
    for start in range(0, len(pairs), batch_size):
        batch = pairs[start : start + batch_size]
        total += pair_loss(model, ds, batch).item() * len(batch)
    model.train(was_training)
    return total / len(pairs)


# -- hybrid inference ---------------------------------------------------------


@torch.no_grad()
def _decode_memories(model: RegeneratorModel, sources, gamma: float, rngs):
    """Greedy decode every (source, memory) pair; returns ``[[tokens_k for k] for source]``.

    At each step every source draws K uniforms from its own generator; a
    draw below ``gamma`` selects generative mode for that memory.
    """
    cfg = model.cfg
    K, V = cfg.diversity_K, model.num_items
    src = pad_right([tuple(s)[-cfg.max_src_len :] for s in sources])
    B = len(sources)
    bank, mem_pad = model.encode(src)
    memory = bank.transpose(0, 1).reshape(B * K, *bank.shape[2:])  # row = b * K + k
    mem_pad = mem_pad.repeat_interleave(K, dim=0)

    allowed_any = torch.zeros(model.vocab, dtype=torch.bool)
    allowed_any[1 : V + 1] = True
    allowed_any[model.eos] = True
    allowed_src = torch.zeros(B, model.vocab, dtype=torch.bool)
    for b, s in enumerate(sources):
        allowed_src[b, list(set(s))] = True
    allowed_src[:, model.eos] = True
    allowed_src = allowed_src.repeat_interleave(K, dim=0)

    tokens = torch.full((B * K, 1), model.bos, dtype=torch.long)
    done = torch.zeros(B * K, dtype=torch.bool)
    for _ in range(cfg.max_pattern_len + 1):
        draws = np.stack([r.random(K) for r in rngs]).reshape(-1)
        generative = torch.from_numpy(draws < gamma)
        logits = model.decode(tokens, memory, mem_pad)[:, -1]
        allowed = torch.where(generative[:, None], allowed_any[None], allowed_src)
        nxt = logits.masked_fill(~allowed, -math.inf).argmax(-1)
        nxt = torch.where(done, torch.full_like(nxt, PAD), nxt)
        tokens = torch.cat([tokens, nxt[:, None]], dim=1)
        done |= nxt == model.eos
        if tokens.shape[1] - 1 >= cfg.max_pattern_len:
            break
        if done.all():
            break

    out = []
    for b in range(B):
        row = []
        for k in range(K):
            seq = []
            for t in tokens[b * K + k, 1:].tolist():
                if t in (model.eos, PAD):
                    break
                seq.append(t)
            row.append(tuple(seq))
        out.append(row)
    return out


def _collect(decoded):
    """Drop patterns shorter than 2 and duplicates; keep the first memory index."""
    seen, kept = set(), []
    for k, p in enumerate(decoded):
        if len(p) >= 2 and p not in seen:
            seen.add(p)
            kept.append((p, k))
    return kept


def regenerate_sequence(model: RegeneratorModel, seq, gamma: float, rng: np.random.Generator):
    """Up to K distinct patterns decoded from one sequence, as ``(pattern, memory_index)`` pairs."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    if len(seq) == 0:
        raise ValueError("empty sequence")
    model.eval()
    return _collect(_decode_memories(model, [tuple(seq)], gamma, [rng])[0])


def regenerate_dataset(model: RegeneratorModel, ds: Dataset, gamma: float, seed: int, dedup: bool = False, batch_size: int = 128) -> Dataset:
    """Regenerated dataset with provenance ``(source_user_id, memory_index)`` per pattern.

    Sequence ``i`` draws from its own generator seeded by ``(seed, i)``, so
    the output does not depend on ``batch_size``.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    model.eval()
    items = ds.item_lists()
    patterns, provenance, seen = [], [], set()
    for start in range(0, len(items), batch_size):
        chunk = items[start : start + batch_size]
        rngs = [np.random.default_rng([seed, start + j]) for j in range(len(chunk))]
        for j, decoded in enumerate(_decode_memories(model, chunk, gamma, rngs)):
            for p, k in _collect(decoded):
                if dedup:
                    if p in seen:
                        continue
                    seen.add(p)
                patterns.append(p)
                provenance.append((ds.sequences[start + j].user_id, k))
    if not patterns:
        raise ValueError("regeneration produced no pattern of length >= 2")
    seqs = tuple(Sequence(i, p) for i, p in enumerate(patterns))
    return Dataset(seqs, ds.num_items, f"{ds.name}-regenerated", tuple(provenance))
