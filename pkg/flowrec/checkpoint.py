"""
Checkpoint container.

A checkpoint is one ``torch.save`` zip archive holding a plain dictionary, read
back with ``torch.load(weights_only=True)``. See ``docs/usage/checkpoints.md``
for the key layout.
"""

import logging
import typing as t
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, fields
from pathlib import Path

import torch

from .config import RunConfig
from .errors import CheckpointError, ConfigError, IncompatibleCheckpointError
from .model import ModelState, build_model

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "flowrec-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(slots=True, frozen=True)
class Checkpoint:
    config: RunConfig
    num_items: int
    epoch: int
    payload: dict[str, t.Any]

    @property
    def history(self) -> list[dict[str, float]]:
        return list(self.payload.get("history", []))

    @property
    def early_stopping(self) -> dict[str, t.Any] | None:
        return self.payload.get("early_stopping")

    @property
    def best_model(self) -> dict[str, torch.Tensor] | None:
        return self.payload.get("best_model")


def save_checkpoint(
    state: ModelState,
    path: str | Path,
    *,
    history: Sequence[Mapping[str, float]] = (),
    early_stopping: Mapping[str, t.Any] | None = None,
    best_model: Mapping[str, torch.Tensor] | None = None,
) -> Path:
    """Write ``state`` (weights, Adam moments, RNG streams, progress) to ``path``."""
    path = Path(path)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": state.config.to_dict(),
        "config_hash": state.config.config_hash(),
        "num_items": state.num_items,
        "dtype": str(state.model.table.dtype).removeprefix("torch."),
        "epoch": state.epoch,
        "model": state.model.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "rng": {
            "torch": torch.get_rng_state(),
            **{name: gen.get_state() for name, gen in state.generators.items()},
        },
        "history": [dict(r) for r in history],
        "early_stopping": dict(early_stopping) if early_stopping is not None else None,
        "best_model": dict(best_model) if best_model is not None else None,
    }
    partial = path.with_name(path.name + ".partial")
    torch.save(payload, partial)
    partial.replace(path)
    logger.debug(f"Saved checkpoint for epoch {state.epoch} to {path}.")
    return path


def read_checkpoint(path: str | Path) -> Checkpoint:
    """Load and validate the container without building a model."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Checkpoint {path} does not exist.")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(
            f"corrupt checkpoint {path}: not a {CHECKPOINT_FORMAT} file."
        )
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"Unsupported checkpoint version {payload.get('version')} in {path}; "
            f"expected {CHECKPOINT_VERSION}."
        )
    try:
        config = RunConfig.from_mapping(payload["config"])
    except (KeyError, ConfigError) as exc:
        raise CheckpointError(
            f"corrupt checkpoint {path}: bad embedded config ({exc})."
        ) from exc
    return Checkpoint(
        config=config,
        num_items=int(payload["num_items"]),
        epoch=int(payload["epoch"]),
        payload=payload,
    )


def check_compatible(
    checkpoint: Checkpoint, config: RunConfig | None, num_items: int | None
) -> None:
    """Raise unless the checkpoint's model shape matches the expected one."""
    if num_items is not None and num_items != checkpoint.num_items:
        raise IncompatibleCheckpointError(
            f"incompatible checkpoint: it scores {checkpoint.num_items} items, "
            f"the data has {num_items}."
        )
    if config is None:
        return
    saved, wanted = checkpoint.config.model, config.model
    diffs = [
        f"model.{name} {getattr(saved, name)!r} != {getattr(wanted, name)!r}"
        for name in (f.name for f in fields(wanted))
        if getattr(saved, name) != getattr(wanted, name)
    ]
    if checkpoint.config.data.max_len != config.data.max_len:
        diffs.append(
            f"data.max_len {checkpoint.config.data.max_len} != {config.data.max_len}"
        )
    if diffs:
        raise IncompatibleCheckpointError(
            f"incompatible checkpoint: {'; '.join(diffs)}."
        )


def restore_state(
    checkpoint: Checkpoint,
    *,
    config: RunConfig | None = None,
    num_items: int | None = None,
    restore_rng: bool = False,
) -> ModelState:
    """
    Rebuild the model, optimizer and generators saved in ``checkpoint``.

    ``config`` replaces the embedded run config (after a shape check), which
    lets a resumed run change e.g. ``train.max_epochs``. With ``restore_rng``
    the global torch generator is reset to its saved state as well.
    """
    check_compatible(checkpoint, config, num_items)
    config = config or checkpoint.config
    payload = checkpoint.payload
    dtype = getattr(torch, payload.get("dtype", "float32"))
    model = build_model(checkpoint.num_items, config, dtype=dtype)
    try:
        model.load_state_dict(payload["model"])
    except (KeyError, RuntimeError) as exc:
        raise IncompatibleCheckpointError(f"incompatible checkpoint: {exc}") from exc
    optimizer = torch.optim.Adam(
        model.parameters(), lr=config.train.lr, betas=(0.9, 0.999), eps=1e-8
    )
    optimizer.load_state_dict(payload["optimizer"])
    for group in optimizer.param_groups:
        group["lr"] = config.train.lr
    rng = payload.get("rng", {})
    generators = {}
    for name in ("time", "modulation"):
        generators[name] = torch.Generator()
        if name in rng:
            generators[name].set_state(rng[name])
    if restore_rng and "torch" in rng:
        torch.set_rng_state(rng["torch"])
    return ModelState(
        model=model,
        optimizer=optimizer,
        config=config,
        generators=generators,
        epoch=checkpoint.epoch,
    )


def load_checkpoint(
    path: str | Path,
    *,
    config: RunConfig | None = None,
    num_items: int | None = None,
    restore_rng: bool = False,
) -> ModelState:
    return restore_state(
        read_checkpoint(path),
        config=config,
        num_items=num_items,
        restore_rng=restore_rng,
    )
