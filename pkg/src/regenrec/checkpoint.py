"""Checkpoints: config echo plus named parameter arrays in one torch file."""

from __future__ import annotations

from dataclasses import asdict
from pathlib import Path

import torch

from .personalizer import Personalizer
from .regenerator import RegeneratorConfig, RegeneratorModel
from .target_models import TargetModel, TargetModelConfig


def save(path, kind: str, config, num_items: int, model, **extra) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "kind": kind,
        "config": asdict(config),
        "num_items": num_items,
        "dtype": str(next(model.parameters()).dtype),
        "params": {k: v.detach().clone() for k, v in model.state_dict().items()},
    }
    for name, module in extra.items():
        payload[name] = {"params": {k: v.detach().clone() for k, v in module.state_dict().items()}, "init": getattr(module, "init_args", None)}
    torch.save(payload, path)
    return path


def load(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    return torch.load(path, weights_only=False)


def _dtype(payload):
    return getattr(torch, payload["dtype"].replace("torch.", ""))


def load_regenerator(path) -> RegeneratorModel:
    payload = load(path)
    if payload["kind"] != "regenerator":
        raise ValueError(f"{path} holds a {payload['kind']} checkpoint, not a regenerator")
    model = RegeneratorModel(payload["num_items"], RegeneratorConfig(**payload["config"])).to(_dtype(payload))
    model.load_state_dict(payload["params"])
    return model.eval()


def load_target(path):
    """Returns ``(model, personalizer_or_None)``."""
    payload = load(path)
    if payload["kind"] != "target":
        raise ValueError(f"{path} holds a {payload['kind']} checkpoint, not a target model")
    cfg = TargetModelConfig(**payload["config"])
    model = TargetModel(payload["num_items"], cfg).to(_dtype(payload))
    model.load_state_dict(payload["params"])
    personalizer = None
    if "personalizer" in payload:
        init = payload["personalizer"]["init"] or {"dim": cfg.embed_dim}
        personalizer = Personalizer(**init).to(_dtype(payload))
        personalizer.load_state_dict(payload["personalizer"]["params"])
    return model.eval(), personalizer
