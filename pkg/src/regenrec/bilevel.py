"""Bi-level reweighting: inner training of the target model, implicit hypergradients for the scorer.

The hypergradient of the dev loss with respect to the scorer parameters is

    -grad_theta L_dev . sum_{n=0..K} (I - H)^n . d/dphi grad_theta L_train

with ``H`` the Hessian of the train loss in theta; the Neumann sum is
evaluated through Hessian-vector products.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import warnings
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .corpus import Dataset, SplitDataset
from .personalizer import Personalizer
from .target_models import (
    Trainer,
    TargetModelConfig,
    TrainingError,
    build_model,
    encode_batch,
    next_item_loss_from_hidden,
    sample_negatives,
)

logger = logging.getLogger(__name__)


class NumericalError(ArithmeticError):
    pass


class NeumannDivergenceWarning(RuntimeWarning):
    pass


@dataclass
class BilevelConfig:
    T_lower: int = 30
    neumann_K: int = 3
    upper_lr: float = 1e-2
    upper_weight_decay: float = 1e-3
    dev_fraction: float = 0.1
    hvp_mode: str = "second_order"  # second_order | finite_difference
    fd_scale: float = 1e-4
    hessian_scale: float = 1.0
    tau: float = 1.0

    def __post_init__(self):
        if self.T_lower < 1 or self.neumann_K < 0:
            raise ValueError("T_lower must be >= 1 and neumann_K >= 0")
        if self.hvp_mode not in ("second_order", "finite_difference"):
            raise ValueError(f"unknown hvp_mode {self.hvp_mode!r}")


class GradCounter:
    """Counts gradient-style (backward) evaluations by kind."""

    def __init__(self):
        self.kinds = Counter()

    def tick(self, kind: str, n: int = 1):
        self.kinds[kind] += n

    @property
    def total(self) -> int:
        return sum(self.kinds.values())

    def reset(self):
        self.kinds.clear()


def _tick(counter, kind, n=1):
    if counter is not None:
        counter.tick(kind, n)


def _zeros_for_none(grads, params):
    return [torch.zeros_like(p) if g is None else g for g, p in zip(grads, params)]


def _norm(vs) -> float:
    return math.sqrt(sum(float((v.detach() ** 2).sum()) for v in vs))


def _inf_norm(vs) -> float:
    return max(float(v.detach().abs().max()) if v.numel() else 0.0 for v in vs)


def _grad(out, params, counter=None, kind="grad", **kw):
    _tick(counter, kind)
    return _zeros_for_none(torch.autograd.grad(out, params, allow_unused=True, **kw), params)


def _vjp(grads, params, v, counter=None, kind="hvp"):
    """``d(grads . v)/d params`` through the graph of ``grads``."""
    _tick(counter, kind)
    live = [(g, vi) for g, vi in zip(grads, v) if g.requires_grad]
    if not live:
        return [torch.zeros_like(p) for p in params]
    out = torch.autograd.grad([g for g, _ in live], params, grad_outputs=[vi for _, vi in live], retain_graph=True, allow_unused=True)
    return _zeros_for_none(out, params)


def _fd_step(params, v, fd_scale):
    return fd_scale * (1.0 + _inf_norm(params)) / _inf_norm(v)


class _Shifted:
    """Temporarily moves ``params`` by ``eps * v`` in place."""

    def __init__(self, params, v, eps):
        self.params, self.v, self.eps = params, v, eps

    def __enter__(self):
        with torch.no_grad():
            for p, vi in zip(self.params, self.v):
                p.add_(vi, alpha=self.eps)

    def __exit__(self, *exc):
        with torch.no_grad():
            for p, vi in zip(self.params, self.v):
                p.sub_(vi, alpha=self.eps)


def _fd_grad_diff(loss_fn, wrt, shift_params, v, fd_scale, counter, kind):
    """Central difference of ``grad_wrt loss`` along ``v`` in ``shift_params``."""
    eps = _fd_step(shift_params, v, fd_scale)
    with _Shifted(shift_params, v, eps):
        plus = [g.detach() for g in _grad(loss_fn(), wrt, counter, kind)]
    with _Shifted(shift_params, v, -eps):
        minus = [g.detach() for g in _grad(loss_fn(), wrt, counter, kind)]
    return [(a - b) / (2 * eps) for a, b in zip(plus, minus)]


def hvp(loss_fn, params, v, mode="second_order", fd_scale=1e-4, counter=None):
    """Hessian-vector product of ``loss_fn()`` at ``params`` with ``v``.

    ``finite_difference`` mode uses ``(g(θ+εv) - g(θ-εv)) / 2ε`` with
    ``ε = fd_scale (1 + |θ|_inf) / |v|_inf``.
    """
    params, v = list(params), list(v)
    if _inf_norm(v) == 0.0:
        return [torch.zeros_like(p) for p in params]
    if mode == "second_order":
        grads = _grad(loss_fn(), params, counter, "grad", create_graph=True)
        return [h.detach() for h in _vjp(grads, params, v, counter)]
    if mode == "finite_difference":
        return _fd_grad_diff(loss_fn, params, params, v, fd_scale, counter, "hvp")
    raise ValueError(f"unknown hvp mode {mode!r}")


def _neumann(hvp_fn, v0, K):
    """p = sum_{n=0..K} v_n with v_{n+1} = v_n - H v_n."""
    v = [t.detach() for t in v0]
    p = [t.clone() for t in v]
    norms = [_norm(v)]
    for n in range(1, K + 1):
        hv = hvp_fn(v)
        v = [a - b.detach() for a, b in zip(v, hv)]
        if not all(torch.isfinite(t).all() for t in v):
            raise NumericalError(f"non-finite Neumann term at n={n}")
        p = [a + b for a, b in zip(p, v)]
        norms.append(_norm(v))
    if K >= 2 and norms[-1] > norms[0] and norms[-1] > norms[-2]:
        warnings.warn(
            f"Neumann terms grow (|v_0|={norms[0]:.3g}, |v_K|={norms[-1]:.3g}); Hessian spectrum likely outside (0, 2); "
            "consider a smaller hessian_scale",
            NeumannDivergenceWarning,
            stacklevel=3,
        )
    return p, norms


def neumann_inverse_hvp(loss_fn, params, v0, K, mode="second_order", fd_scale=1e-4, counter=None):
    """Approximate ``H^{-1} v0`` by the K-truncated Neumann series ``sum_n (I - H)^n v0``."""
    params = list(params)
    if K < 0:
        raise ValueError("K must be >= 0")
    if mode == "second_order":
        grads = None

        def hvp_fn(v):
            nonlocal grads
            if grads is None:
                grads = _grad(loss_fn(), params, counter, "grad", create_graph=True)
            return _vjp(grads, params, v, counter)

    else:

        def hvp_fn(v):
            if _inf_norm(v) == 0.0:
                return [torch.zeros_like(t) for t in v]
            return _fd_grad_diff(loss_fn, params, params, v, fd_scale, counter, "hvp")

    p, _ = _neumann(hvp_fn, v0, K)
    return p


def hypergradient(
    train_loss,
    dev_loss,
    theta,
    phi,
    K,
    mode="second_order",
    fd_scale=1e-4,
    counter=None,
    train_grad=None,
    hessian_scale=1.0,
    info=None,
):
    """Implicit gradient of the dev loss with respect to ``phi``.

    ``train_loss()`` / ``dev_loss()`` are closures over the live parameter
    tensors. ``train_grad`` may supply an already built ``grad_theta L_train``
    (with graph), in which case no extra train-gradient pass is made.
    """
    theta, phi = list(theta), list(phi)
    v0 = [g.detach() for g in _grad(dev_loss(), theta, counter, "dev")]

    if mode == "second_order":
        grads = train_grad
        if grads is None:
            grads = _grad(train_loss(), theta, counter, "grad", create_graph=True)
        if hessian_scale != 1.0:
            grads = [g * hessian_scale for g in grads]
        p, norms = _neumann(lambda v: _vjp(grads, theta, v, counter), v0, K)
        mixed = _vjp(grads, phi, p, counter, kind="mixed")
    elif mode == "finite_difference":
        scaled = (lambda: hessian_scale * train_loss()) if hessian_scale != 1.0 else train_loss

        def hvp_fn(v):
            if _inf_norm(v) == 0.0:
                return [torch.zeros_like(t) for t in v]
            return _fd_grad_diff(scaled, theta, theta, v, fd_scale, counter, "hvp")

        p, norms = _neumann(hvp_fn, v0, K)
        if _inf_norm(p) == 0.0:
            mixed = [torch.zeros_like(t) for t in phi]
        else:
            mixed = _fd_grad_diff(scaled, phi, theta, p, fd_scale, counter, "mixed")
    else:
        raise ValueError(f"unknown hvp mode {mode!r}")

    out = [-m.detach() for m in mixed]
    if info is not None:
        info.update(v0_norm=norms[0], p_norm=_norm(p), neumann_norms=norms, hypergrad_norm=_norm(out))
    return out


def make_dev_split(ds: Dataset, dev_fraction: float, seed: int):
    """Random partition of the patterns into (train part, dev part)."""
    if not 0.0 < dev_fraction <= 0.5:
        raise ValueError("dev_fraction must lie in (0, 0.5]")
    n = len(ds)
    n_dev = int(round(dev_fraction * n))
    if n_dev < 1 or n_dev >= n:
        raise ValueError(f"{n} patterns are too few for a non-empty dev split at fraction {dev_fraction}")
    order = np.random.default_rng([seed, 2]).permutation(n)
    dev_idx, train_idx = sorted(order[:n_dev]), sorted(order[n_dev:])

    def part(idx, suffix):
        prov = None if ds.provenance is None else tuple(ds.provenance[i] for i in idx)
        return Dataset(tuple(ds.sequences[i] for i in idx), ds.num_items, f"{ds.name}-{suffix}", prov)

    return part(train_idx, "train"), part(dev_idx, "dev")


class BilevelTrainer(Trainer):
    """Inner Adam steps on the weighted loss; every ``T_lower`` steps one upper step on the scorer.

    The upper step evaluates the hypergradient at the current θ with Gumbel
    noise off. Its train-loss gradient is built on the next inner batch and
    is reused as that inner step's update, so each outer cycle costs
    ``T_lower`` inner gradients plus ``K + 2`` extra evaluations (one dev
    gradient, K Hessian-vector products, one mixed partial).
    """

    def __init__(self, model, train_ds, dev_ds, split, cfg, bl_cfg: BilevelConfig, personalizer, seed, frozen=False, log_path=None):
        self.gumbel = torch.Generator().manual_seed(seed)
        weight_fn = lambda h, x, stochastic: personalizer.position_weights(h, x, stochastic=stochastic, generator=self.gumbel)
        super().__init__(model, train_ds, split, cfg, seed, weight_fn)
        self.bl = bl_cfg
        self.personalizer = personalizer
        self.frozen = frozen
        self.phi = [p for p in personalizer.parameters() if p.requires_grad]
        self.upper_opt = torch.optim.SGD(self.phi, lr=bl_cfg.upper_lr, weight_decay=bl_cfg.upper_weight_decay)
        self.dev_patterns = [s.items for s in dev_ds if len(s.items) >= 2]
        if not self.dev_patterns:
            raise ValueError("dev split holds no pattern with >= 2 items")
        self.dev_rng = np.random.default_rng([seed, 3])
        self.dev_order = self.dev_rng.permutation(len(self.dev_patterns))
        self.dev_cursor = 0
        self.counter = GradCounter()
        self.outer_step = 0
        self.inner_losses: list[float] = []
        self.log_path = Path(log_path) if log_path else None
        self.log: list[dict] = []
        if self.log_path:
            self.log_path.parent.mkdir(parents=True, exist_ok=True)
            self.log_path.write_text("", encoding="utf-8")

    def next_dev_batch(self):
        take = []
        while len(take) < min(self.cfg.batch_size, len(self.dev_patterns)):
            if self.dev_cursor == len(self.dev_order):
                self.dev_cursor = 0
            take.append(self.dev_patterns[self.dev_order[self.dev_cursor]])
            self.dev_cursor += 1
        x = encode_batch(take, self.cfg.max_len)
        return x, sample_negatives(x, self.model.num_items, self.dev_rng)

    def step(self, x, neg) -> float:
        if self.global_step > 0 and self.global_step % self.bl.T_lower == 0:
            return self.upper_step(x, neg)
        self.counter.tick("inner")
        loss = super().step(x, neg)
        self.inner_losses.append(loss)
        return loss

    def upper_step(self, x, neg) -> float:
        model = self.model
        theta = [p for p in model.parameters() if p.requires_grad]
        self.opt.zero_grad()
        hidden = model(x)
        w = self.weight_fn(hidden.detach(), x, False)
        loss = next_item_loss_from_hidden(model, hidden, x, neg, w, reduction="mean")
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite loss at step {self.global_step}")
        train_grad = _grad(loss, theta, self.counter, "inner", create_graph=True)

        dev_x, dev_neg = self.next_dev_batch()
        dev_value = {}

        def dev_loss():
            model.eval()
            value = next_item_loss_from_hidden(model, model(dev_x), dev_x, dev_neg, None, reduction="mean")
            model.train()
            dev_value["loss"] = value.item()
            return value

        info = {}
        if self.bl.hvp_mode == "second_order":
            hg = hypergradient(
                None, dev_loss, theta, self.phi, self.bl.neumann_K, counter=self.counter,
                train_grad=train_grad, hessian_scale=self.bl.hessian_scale, info=info,
            )
        else:
            hg = self._fd_hypergradient(x, neg, dev_loss, theta, info)
        if not all(torch.isfinite(g).all() for g in hg):
            raise NumericalError(
                f"non-finite hypergradient at outer step {self.outer_step}: |v0|={info.get('v0_norm')}, |p|={info.get('p_norm')}"
            )
        if not self.frozen:
            self.upper_opt.zero_grad()
            for p, g in zip(self.phi, hg):
                p.grad = g.to(p.dtype)
            self.upper_opt.step()

        for p, g in zip(theta, train_grad):
            p.grad = g.detach()
        self.opt.step()

        record = {
            "outer_step": self.outer_step,
            "global_step": self.global_step,
            "inner_loss": float(np.mean(self.inner_losses)) if self.inner_losses else float("nan"),
            "dev_loss": dev_value.get("loss", float("nan")),
            "hypergrad_norm": info["hypergrad_norm"],
            "v0_norm": info["v0_norm"],
            "p_norm": info["p_norm"],
            "mean_weight": float(w.detach().sum() / (w != 0).sum().clamp(min=1)),
        }
        self.log.append(record)
        if self.log_path:
            with self.log_path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        self.outer_step += 1
        self.inner_losses = []
        return loss.item()

    def _fd_hypergradient(self, x, neg, dev_loss, theta, info):
        model = self.model

        def train_loss():
            model.eval()
            hidden = model(x)
            w = self.weight_fn(hidden.detach(), x, False)
            value = next_item_loss_from_hidden(model, hidden, x, neg, w, reduction="mean")
            model.train()
            return value

        return hypergradient(
            train_loss, dev_loss, theta, self.phi, self.bl.neumann_K, mode="finite_difference",
            fd_scale=self.bl.fd_scale, counter=self.counter, hessian_scale=self.bl.hessian_scale, info=info,
        )

    def snapshot(self):
        return copy.deepcopy(self.model.state_dict()), copy.deepcopy(self.personalizer.state_dict())

    def restore(self, state):
        self.model.load_state_dict(state[0])
        self.personalizer.load_state_dict(state[1])


def train_dr4sr_plus(
    regen_ds: Dataset,
    split: SplitDataset,
    target_cfg: TargetModelConfig,
    bl_cfg: BilevelConfig,
    seed: int,
    personalizer=None,
    frozen: bool = False,
    log_path=None,
    dtype=torch.float32,
    extra_train: Dataset | None = None,
):
    """Jointly fit a target model and a personalizer on the regenerated dataset.

    The dev split is always drawn from ``regen_ds``; ``extra_train`` (for
    instance the original sequences) only joins the training part.
    Returns ``(model, personalizer, trainer)``; the trainer carries the
    per-outer-step log and the gradient-evaluation counter.
    """
    train_part, dev_part = make_dev_split(regen_ds, bl_cfg.dev_fraction, seed)
    if extra_train is not None:
        train_part = Dataset(train_part.sequences + extra_train.sequences, regen_ds.num_items, f"{train_part.name}+{extra_train.name}")
    model = build_model(regen_ds.num_items, target_cfg, seed, dtype)
    if personalizer is None:
        torch.manual_seed(seed + 1)
        personalizer = Personalizer(target_cfg.embed_dim, tau=bl_cfg.tau).to(dtype)
    trainer = BilevelTrainer(model, train_part, dev_part, split, target_cfg, bl_cfg, personalizer, seed, frozen, log_path)
    torch.manual_seed(seed)
    trainer.fit()
    return model, personalizer, trainer


class EndToEndTrainer(Trainer):
    """Ablation: minimise the weighted loss over model and scorer together."""

    def __init__(self, model, train_ds, split, cfg, personalizer, seed):
        self.gumbel = torch.Generator().manual_seed(seed)
        weight_fn = lambda h, x, stochastic: personalizer.position_weights(h, x, stochastic=stochastic, generator=self.gumbel)
        super().__init__(model, train_ds, split, cfg, seed, weight_fn)
        self.personalizer = personalizer
        self.scorer_opt = torch.optim.Adam(personalizer.parameters(), lr=cfg.learning_rate)
        self.mean_weights: list[float] = []

    def step(self, x, neg) -> float:
        self.opt.zero_grad()
        self.scorer_opt.zero_grad()
        hidden = self.model(x)
        w = self.weight_fn(hidden.detach(), x, True)
        loss = next_item_loss_from_hidden(self.model, hidden, x, neg, w, reduction="mean")
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite loss at step {self.global_step}")
        loss.backward()
        self.opt.step()
        self.scorer_opt.step()
        self.mean_weights.append(float(w.detach().sum() / (w != 0).sum().clamp(min=1)))
        return loss.item()


def train_end_to_end(regen_ds, split, target_cfg, seed, tau=1.0, dtype=torch.float32):
    train_part, _ = make_dev_split(regen_ds, 0.1, seed)
    model = build_model(regen_ds.num_items, target_cfg, seed, dtype)
    torch.manual_seed(seed + 1)
    personalizer = Personalizer(target_cfg.embed_dim, tau=tau).to(dtype)
    trainer = EndToEndTrainer(model, train_part, split, target_cfg, personalizer, seed)
    torch.manual_seed(seed)
    trainer.fit()
    return model, personalizer, trainer
