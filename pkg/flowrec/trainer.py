import copy
import json
import logging
import math
import time
import typing as t
from collections.abc import Mapping
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
from tqdm import tqdm

from .checkpoint import read_checkpoint, restore_state, save_checkpoint
from .config import RunConfig, TrainConfig
from .dataset import PreparedData, SequenceBatch, Split, make_batches
from .errors import TrainingError
from .evaluation import evaluate
from .flow import sample_modulation, sample_time
from .logs import progress_disabled
from .model import ModelState, init_state
from .seeding import SeedStreams

logger = logging.getLogger(__name__)

SELECTION_METRIC = "ndcg@10"
LOG_NAME = "train_log.jsonl"
LAST_CHECKPOINT = "last.pt"
BEST_CHECKPOINT = "best.pt"


@dataclass(slots=True)
class StepLosses:
    prior: float
    cfm: float
    align: float
    total: float


@dataclass(slots=True)
class EarlyStopping:
    """Stop after ``patience`` epochs without a strictly better metric."""

    patience: int
    best: float = -math.inf
    best_epoch: int = 0
    wait: int = 0

    def update(self, epoch: int, metric: float) -> bool:
        """Record one epoch; True when it is the new best."""
        if metric > self.best:
            self.best, self.best_epoch, self.wait = metric, epoch, 0
            return True
        self.wait += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.wait >= self.patience

    def to_dict(self) -> dict[str, t.Any]:
        return asdict(self)


def active_losses(config: TrainConfig) -> dict[str, bool]:
    flags = {
        "use_prior": config.use_prior_loss,
        "use_cfm": config.use_cfm_loss,
        "use_align": config.use_align_loss,
    }
    if not any(flags.values()):
        raise TrainingError("no active loss: every loss term is disabled.")
    return flags


def train_step(
    batch: SequenceBatch, state: ModelState, config: TrainConfig | None = None
) -> StepLosses:
    """One Adam update on ``prior + alpha * cfm + beta * align``."""
    config = config or state.config.train
    flags = active_losses(config)
    model = state.model
    model.train()
    dtype = model.table.dtype
    t_batch = sample_time(len(batch), state.generators["time"], dtype=dtype)
    lam = sample_modulation(
        model.config.dim,
        model.modulation,
        state.generators["modulation"],
        batch=len(batch),
        dtype=dtype,
    )
    parts = model.loss_parts(
        batch.ids, batch.targets, t_batch, lam, **flags, detach_flow=config.detach_flow
    )
    for name, value in parts.items():
        if not bool(torch.isfinite(value)):
            raise TrainingError(
                f"Non-finite {name} loss ({float(value)}) at epoch {state.epoch + 1}."
            )
    total = parts.total(config.alpha, config.beta)
    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    if config.grad_clip is not None:
        torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
    state.optimizer.step()
    values = parts.as_floats()
    logger.debug(f"step losses {values} total {float(total):.6f}")
    return StepLosses(
        prior=values["prior"],
        cfm=values["cfm"],
        align=values["align"],
        total=float(total.detach()),
    )


def train_epoch(state: ModelState, split: Split, *, epoch: int) -> dict[str, float]:
    """One shuffled pass over the training pairs; returns mean losses per example."""
    config = state.config
    seed = SeedStreams(config.seed).seed("shuffle", epoch)
    batches = make_batches(
        split,
        "train",
        config.train.batch_size,
        config.data.max_len,
        seed=seed,
        all_prefixes=config.data.all_prefixes,
    )
    sums = {"l_prior": 0.0, "l_cfm": 0.0, "l_align": 0.0, "total": 0.0}
    seen = 0
    for batch in tqdm(
        batches, desc=f"epoch {epoch}", leave=False, disable=progress_disabled(logger)
    ):
        losses = train_step(batch, state)
        n = len(batch)
        sums["l_prior"] += n * losses.prior
        sums["l_cfm"] += n * losses.cfm
        sums["l_align"] += n * losses.align
        sums["total"] += n * losses.total
        seen += n
    if not seen:
        raise TrainingError("The training split holds no (context, target) pairs.")
    return {name: value / seen for name, value in sums.items()}


def _append_log(path: Path | None, record: Mapping[str, float]) -> None:
    if path is None:
        return
    with path.open("a", encoding="utf-8") as out:
        out.write(json.dumps(record) + "\n")


def train(
    data: PreparedData | Split,
    config: RunConfig,
    *,
    num_items: int | None = None,
    output_dir: str | Path | None = None,
    resume: str | Path | None = None,
    dtype: torch.dtype = torch.float32,
) -> tuple[ModelState, list[dict[str, float]]]:
    """
    Train until validation NDCG@10 stops improving or ``max_epochs`` is reached.

    Returns the state carrying the best validation weights and the per-epoch
    history. With ``output_dir`` every epoch appends to ``train_log.jsonl``
    and refreshes ``last.pt``; ``best.pt`` follows the best epoch. ``resume``
    continues from a ``last.pt`` exactly as an uninterrupted run would.
    """
    if isinstance(data, PreparedData):
        split, num_items = data.split, data.catalog.num_items
    else:
        split = data
    if num_items is None:
        raise ValueError("num_items is required when training on a bare Split.")
    active_losses(config.train)

    out = Path(output_dir) if output_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    log_path = out / LOG_NAME if out is not None else None

    stopper = EarlyStopping(config.train.patience)
    history: list[dict[str, float]] = []
    best_weights: dict[str, torch.Tensor] | None = None
    if resume is not None:
        checkpoint = read_checkpoint(resume)
        state = restore_state(
            checkpoint, config=config, num_items=num_items, restore_rng=True
        )
        history = checkpoint.history
        if checkpoint.early_stopping is not None:
            stopper = EarlyStopping(
                **{**checkpoint.early_stopping, "patience": config.train.patience}
            )
        best_weights = checkpoint.best_model
        if log_path is not None:
            log_path.write_text(
                "".join(json.dumps(r) + "\n" for r in history), encoding="utf-8"
            )
        logger.info(f"Resuming from {resume} after epoch {state.epoch}.")
    else:
        state = init_state(num_items, config, dtype=dtype)
        if log_path is not None:
            log_path.write_text("", encoding="utf-8")

    for epoch in range(state.epoch + 1, config.train.max_epochs + 1):
        if stopper.should_stop:
            break
        start = time.perf_counter()
        losses = train_epoch(state, split, epoch=epoch)
        seconds = time.perf_counter() - start
        report = evaluate(
            state.model,
            split,
            config.sampler,
            phase="valid",
            batch_size=config.train.batch_size,
            workers=config.train.workers,
        )
        record = {
            "epoch": epoch,
            **losses,
            **{f"val_{name}": value for name, value in report.overall.items()},
            "seconds": seconds,
        }
        history.append(record)
        _append_log(log_path, record)
        state.epoch = epoch
        improved = stopper.update(epoch, report.overall[SELECTION_METRIC])
        if improved:
            best_weights = copy.deepcopy(state.model.state_dict())
        marker = " *" if improved else ""
        logger.info(
            f"epoch {epoch}: total {losses['total']:.4f} "
            f"(prior {losses['l_prior']:.4f}, cfm {losses['l_cfm']:.4f}, "
            f"align {losses['l_align']:.4f}) "
            f"val ndcg@10 {report.overall[SELECTION_METRIC]:.4f}{marker} "
            f"[{seconds:.1f}s]"
        )
        if out is not None:
            save_checkpoint(
                state,
                out / LAST_CHECKPOINT,
                history=history,
                early_stopping=stopper.to_dict(),
                best_model=best_weights,
            )
            if improved:
                save_checkpoint(
                    state,
                    out / BEST_CHECKPOINT,
                    history=history,
                    early_stopping=stopper.to_dict(),
                )
        if stopper.should_stop:
            logger.info(
                f"Early stopping after epoch {epoch}; best {SELECTION_METRIC} "
                f"{stopper.best:.4f} at epoch {stopper.best_epoch}."
            )
            break

    if best_weights is not None:
        state.model.load_state_dict(best_weights)
    return state, history
