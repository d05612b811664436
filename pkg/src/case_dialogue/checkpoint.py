"""Versioned checkpoint container."""

from __future__ import annotations

import io
from pathlib import Path

import torch

from .config import TrainConfig
from .knowledge import Vocabulary
from .model import CASEModel

FORMAT = "case-dialogue-checkpoint"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(model: CASEModel, path, vocab: Vocabulary, optimizer=None, step: int = 0) -> None:
    payload = {
        "format": FORMAT,
        "version": VERSION,
        "config": model.cfg.to_dict(),
        "vocab": vocab.to_json(),
        "dtype": str(model.dtype).removeprefix("torch."),
        "state_dict": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "step": int(step),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    torch.save(payload, buf)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def read_checkpoint(path) -> dict:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint {path} does not exist") from None
    except Exception as exc:  # torch raises a zoo of types for damaged archives
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.__class__.__name__}") from None
    if not isinstance(payload, dict) or payload.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not a {FORMAT} file")
    if payload.get("version") != VERSION:
        raise CheckpointError(f"checkpoint version {payload.get('version')} is incompatible with version {VERSION}")
    return payload


def load_checkpoint(path):
    """Return ``(model, vocab, payload)``; the model is in eval mode."""
    payload = read_checkpoint(path)
    try:
        cfg = TrainConfig.from_dict(payload["config"])
        vocab = Vocabulary.from_json(payload["vocab"])
        model = CASEModel(cfg, len(vocab), len(vocab.labels))
        model.to(getattr(torch, payload.get("dtype", "float32")))
        model.load_state_dict(payload["state_dict"])
    except CheckpointError:
        raise
    except Exception as exc:
        raise CheckpointError(f"checkpoint {path} is inconsistent: {exc}") from None
    model.eval()
    return model, vocab, payload
