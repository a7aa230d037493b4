"""Checkpoints: a torch state blob next to a JSON sidecar with format version, architecture, seed and step."""
from __future__ import annotations

import json
from pathlib import Path

import torch

from ..tracker.network import NetConfig, TrackerNet, parameter_checksum

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path: str | Path, net: TrackerNet, seed: int, step: int, extra: dict | None = None) -> Path:
    """Write ``<path>.pt`` and ``<path>.json``; returns the .pt path."""
    path = Path(path).with_suffix(".pt")
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(net.state_dict(), path)
    meta = {
        "format_version": FORMAT_VERSION,
        "arch": net.config.to_dict(),
        "seed": int(seed),
        "step": int(step),
        "checksum": parameter_checksum(net),
    }
    if extra:
        meta["extra"] = extra
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path


def read_metadata(path: str | Path) -> dict:
    meta_path = Path(path).with_suffix(".json")
    if not meta_path.exists():
        raise CheckpointError(f"missing checkpoint metadata {meta_path}")
    meta = json.loads(meta_path.read_text())
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {meta.get('format_version')!r}")
    return meta


def load_checkpoint(path: str | Path) -> tuple[TrackerNet, dict]:
    path = Path(path).with_suffix(".pt")
    meta = read_metadata(path)
    net = TrackerNet(NetConfig(**meta["arch"]))
    net.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
    if parameter_checksum(net) != meta["checksum"]:
        raise CheckpointError(f"checksum mismatch for {path}")
    return net, meta
