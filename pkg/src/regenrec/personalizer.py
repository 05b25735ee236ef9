"""Per-sample weights from a two-logit scorer relaxed with Gumbel-softmax."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from torch import nn

from .corpus import Dataset
from .target_models import encode_batch, transition_mask


def gumbel_noise(shape, generator=None, dtype=torch.float32) -> torch.Tensor:
    """G = -log(-log U), U ~ Uniform(0, 1)."""
    info = torch.finfo(dtype)
    u = torch.rand(shape, generator=generator, dtype=dtype).clamp(info.tiny, 1.0 - info.eps)
    return -torch.log(-torch.log(u))


class Personalizer(nn.Module):
    """``g_phi: R^d -> R^2`` (one tanh hidden layer of width d); the weight is the first softmax output."""

    def __init__(self, dim: int, tau: float = 1.0, hidden: int | None = None):
        super().__init__()
        if tau <= 0:
            raise ValueError(f"temperature must be > 0, got {tau}")
        self.tau = tau
        self.init_args = {"dim": dim, "tau": tau, "hidden": hidden}
        hidden = hidden or dim
        self.net = nn.Sequential(nn.Linear(dim, hidden), nn.Tanh(), nn.Linear(hidden, 2))

    def logits(self, h):
        return self.net(h)

    def forward(self, h, stochastic: bool = False, generator=None):
        z = self.logits(h)
        if stochastic:
            z = z + gumbel_noise(z.shape, generator, z.dtype)
        return torch.softmax(z / self.tau, dim=-1)[..., 0]

    def position_weights(self, hidden, x, stochastic=False, generator=None):
        """Weights aligned with next-item loss terms; zero where no term exists.

        ``hidden`` is used as a constant: it is detached from the target model.
        """
        w = self(hidden.detach(), stochastic=stochastic, generator=generator)
        return w * transition_mask(x).to(w.dtype)


class ConstantScorer(nn.Module):
    """Emits the same weight for every sample (all-ones by default)."""

    def __init__(self, value: float = 1.0):
        super().__init__()
        self.value = nn.Parameter(torch.tensor(float(value)))

    def position_weights(self, hidden, x, stochastic=False, generator=None):
        return self.value.to(hidden.dtype) * transition_mask(x).to(hidden.dtype)


def score(p: Personalizer, h, stochastic: bool = False, generator=None):
    """Weight in (0, 1) for a single hidden vector (or a batch of them)."""
    if p.tau <= 0:
        raise ValueError("temperature must be > 0")
    return p(torch.as_tensor(h), stochastic=stochastic, generator=generator)


@torch.no_grad()
def score_batch(p, model, patterns, stochastic: bool = False, generator=None, batch_size: int = 512):
    """Weight matrix for ``patterns``: row i holds ``w[i, t]`` for t = 2..|p_i|.

    Returned as a list of 1-d arrays (ragged; one entry per next-item term).
    """
    was_training = model.training
    model.eval()
    out = []
    for start in range(0, len(patterns), batch_size):
        chunk = patterns[start : start + batch_size]
        x = encode_batch(chunk, model.cfg.max_len)
        w = p.position_weights(model(x), x, stochastic=stochastic, generator=generator)
        mask = transition_mask(x)
        out.extend(w[r][mask[r]].double().cpu().numpy() for r in range(len(chunk)))
    model.train(was_training)
    return out


def dataset_weights(p, model, ds: Dataset, **kw):
    return score_batch(p, model, [s.items for s in ds], **kw)


def write_weights(weights, path) -> None:
    """Dump ``pattern_index position weight`` lines (positions are 1-based, from 2)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for i, row in enumerate(weights):
            for j, w in enumerate(np.asarray(row)):
                fh.write(f"{i} {j + 2} {w:.8f}\n")
