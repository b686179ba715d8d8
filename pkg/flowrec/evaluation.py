from __future__ import annotations

import json
import logging
import math
import time
from collections.abc import Callable, Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import torch

from .config import SamplerConfig
from .dataset import (
    HEAD,
    LONG,
    MIDDLE,
    SHORT,
    TAIL,
    EvalGroups,
    Phase,
    SequenceBatch,
    Split,
    make_batches,
)
from .model import FlowRec
from .sampler import mask_seen, sample_endpoints, score

logger = logging.getLogger(__name__)

KS = (5, 10)
METRICS = ("hr@5", "ndcg@5", "hr@10", "ndcg@10")
GROUPS = (HEAD, TAIL, SHORT, MIDDLE, LONG)

type Scorer = Callable[[SequenceBatch], torch.Tensor]
"""Maps a batch to its B x |I| score matrix."""


# --------------------------------------------------------------------------
# Per-user metrics
# --------------------------------------------------------------------------


def hr_at_k(rank: int | None, k: int) -> int:
    """1 when the target ranks within the top ``k``; a missing rank is a miss."""
    return int(rank is not None and rank <= k)


def ndcg_at_k(rank: int | None, k: int) -> float:
    if rank is None or rank > k:
        return 0.0
    return 1.0 / math.log2(rank + 1)


def target_ranks(scores: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """
    1-based rank of each target among all items.

    Items scoring strictly higher rank above the target, and so do items with
    an equal score and a lower id.
    """
    columns = (targets - 1).unsqueeze(1)
    target_scores = scores.gather(1, columns)
    ids = torch.arange(scores.shape[1], device=scores.device).unsqueeze(0)
    higher = (scores > target_scores).sum(dim=1)
    tied_before = ((scores == target_scores) & (ids < columns)).sum(dim=1)
    return 1 + higher + tied_before


def metrics_from_ranks(ranks: np.ndarray, ks: Sequence[int] = KS) -> dict[str, float]:
    """HR@k and NDCG@k averaged over users, as fractions."""
    ranks = np.asarray(ranks, dtype=np.float64)
    out: dict[str, float] = {}
    for k in ks:
        hit = ranks <= k
        gain = np.where(hit, 1.0 / np.log2(ranks + 1.0), 0.0)
        out[f"hr@{k}"] = float(hit.mean()) if len(ranks) else 0.0
        out[f"ndcg@{k}"] = float(gain.mean()) if len(ranks) else 0.0
    return out


# --------------------------------------------------------------------------
# Scorers and the sharded ranker
# --------------------------------------------------------------------------


def model_scorer(
    model: FlowRec, steps: int, *, mask_history: bool = False, from_prior: bool = False
) -> Scorer:
    def scorer(batch: SequenceBatch) -> torch.Tensor:
        x1 = sample_endpoints(model, batch.ids, steps, from_prior=from_prior)
        scores = score(x1, model.table.detach())
        return mask_seen(scores, batch.ids) if mask_history else scores

    return scorer


def popularity_scorer(popularity: np.ndarray, *, mask_history: bool = False) -> Scorer:
    """Every user gets the same scores: training counts per item."""
    counts = torch.as_tensor(popularity[1:], dtype=torch.float64)

    def scorer(batch: SequenceBatch) -> torch.Tensor:
        scores = counts.expand(len(batch), -1)
        return mask_seen(scores, batch.ids) if mask_history else scores

    return scorer


def rank_batches(
    scorer: Scorer, batches: Iterable[SequenceBatch], *, workers: int = 1
) -> tuple[np.ndarray, np.ndarray]:
    """
    Rank every batch's targets; returns (users, ranks) in batch order.

    Whole batches are handed to the workers and the results are concatenated
    in submission order, so the output does not depend on ``workers``.
    """

    def rank(batch: SequenceBatch) -> tuple[np.ndarray, np.ndarray]:
        with torch.no_grad():
            ranks = target_ranks(scorer(batch), batch.targets)
        return batch.users.numpy(), ranks.numpy()

    batches = list(batches)
    if workers <= 1:
        results = [rank(b) for b in batches]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(rank, batches))
    if not results:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    users, ranks = zip(*results)
    return np.concatenate(users), np.concatenate(ranks)


# --------------------------------------------------------------------------
# Reports
# --------------------------------------------------------------------------


def _percent(metrics: Mapping[str, float]) -> dict[str, float]:
    return {name: round(100.0 * value, 4) for name, value in metrics.items()}


@dataclass(slots=True)
class TimingReport:
    steps: int
    """Sampling steps of the headline inference time."""

    inference_seconds: dict[int, float]
    """Mean wall-clock seconds of one full inference pass, per step count."""

    train_seconds_per_epoch: float | None = None
    repeats: int = 3

    def to_dict(self) -> dict[str, object]:
        return {
            "steps": self.steps,
            "train_seconds_per_epoch": self.train_seconds_per_epoch,
            "inference_seconds": {str(k): v for k, v in self.inference_seconds.items()},
            "repeats": self.repeats,
        }


@dataclass(slots=True)
class EvalReport:
    """HR/NDCG over the full catalog, overall and per user group."""

    phase: Phase
    steps: int | None
    """Euler steps used; None for the prior-state and baseline rankers."""

    users: int
    overall: dict[str, float]
    groups: dict[str, dict[str, float]] = field(default_factory=dict)
    group_sizes: dict[str, int] = field(default_factory=dict)
    steps_sweep: dict[int, dict[str, float]] = field(default_factory=dict)
    timing: TimingReport | None = None
    ranker: str = "flow"
    config: dict[str, object] = field(default_factory=dict)
    config_hash: str = ""

    def to_dict(self) -> dict[str, object]:
        """Serialized form; metrics are percentages with four decimals."""
        return {
            "ranker": self.ranker,
            "phase": self.phase,
            "steps": self.steps,
            "users": self.users,
            "overall": _percent(self.overall),
            "groups": {name: _percent(m) for name, m in self.groups.items()},
            "group_sizes": dict(self.group_sizes),
            "steps_sweep": {str(k): _percent(m) for k, m in self.steps_sweep.items()},
            "timing": self.timing.to_dict() if self.timing is not None else None,
            "config_hash": self.config_hash,
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_csv_row(self, **extra: object) -> dict[str, object]:
        """One flat row for sweep tables."""
        row: dict[str, object] = {
            **extra,
            "ranker": self.ranker,
            "config_hash": self.config_hash,
            "phase": self.phase,
            "steps": self.steps,
            "users": self.users,
            **_percent(self.overall),
        }
        for name, metrics in self.groups.items():
            row.update({f"{name}_{k}": v for k, v in _percent(metrics).items()})
        return row

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(self.to_json() + "\n", encoding="utf-8")
        return path


def write_csv(rows: Sequence[Mapping[str, object]], path: str | Path) -> Path:
    path = Path(path)
    pd.DataFrame(list(rows)).to_csv(path, index=False)
    return path


def group_metrics(
    users: np.ndarray, ranks: np.ndarray, groups: EvalGroups
) -> tuple[dict[str, dict[str, float]], dict[str, int]]:
    labels = groups.labels()
    metrics: dict[str, dict[str, float]] = {}
    sizes: dict[str, int] = {}
    for name in GROUPS:
        member = np.array([name in labels.get(int(u), ()) for u in users], dtype=bool)
        sizes[name] = int(member.sum())
        metrics[name] = metrics_from_ranks(ranks[member])
    return metrics, sizes


def rank_report(
    scorer: Scorer,
    split: Split,
    groups: EvalGroups | None = None,
    *,
    phase: Phase = "test",
    batch_size: int = 512,
    max_len: int = 50,
    workers: int = 1,
    steps: int | None = None,
    ranker: str = "flow",
) -> EvalReport:
    batches = make_batches(split, phase, batch_size, max_len)
    users, ranks = rank_batches(scorer, batches, workers=workers)
    report = EvalReport(
        phase=phase,
        steps=steps,
        users=len(users),
        overall=metrics_from_ranks(ranks),
        ranker=ranker,
    )
    if groups is not None:
        report.groups, report.group_sizes = group_metrics(users, ranks, groups)
    return report


def _max_len(model: FlowRec) -> int:
    return int(model.encoder.positions.num_embeddings)


def evaluate(
    model: FlowRec,
    split: Split,
    sampler: SamplerConfig,
    groups: EvalGroups | None = None,
    *,
    phase: Phase = "test",
    batch_size: int = 512,
    workers: int = 1,
    from_prior: bool = False,
    steps: int | None = None,
) -> EvalReport:
    """
    Rank the held-out target of every evaluable user against all items.

    The flow is integrated from each user's prior state with ``steps`` Euler
    steps (default ``sampler.steps``); ``from_prior`` ranks with the prior
    state itself.
    """
    steps = sampler.steps if steps is None else steps
    model.eval()
    report = rank_report(
        model_scorer(
            model, steps, mask_history=sampler.mask_history, from_prior=from_prior
        ),
        split,
        groups,
        phase=phase,
        batch_size=batch_size,
        max_len=_max_len(model),
        workers=workers,
        steps=None if from_prior else steps,
        ranker="prior" if from_prior else "flow",
    )
    logger.debug(
        f"{phase} ranking ({report.ranker}, T={report.steps}): {report.overall}"
    )
    return report


def popularity_baseline(
    split: Split,
    num_items: int,
    groups: EvalGroups | None = None,
    *,
    phase: Phase = "test",
    batch_size: int = 512,
    max_len: int = 50,
    workers: int = 1,
    mask_history: bool = False,
) -> EvalReport:
    """Rank all items by training popularity, identically for every user."""
    scorer = popularity_scorer(
        split.train_popularity(num_items), mask_history=mask_history
    )
    return rank_report(
        scorer,
        split,
        groups,
        phase=phase,
        batch_size=batch_size,
        max_len=max_len,
        workers=workers,
        ranker="popularity",
    )


def steps_sweep(
    model: FlowRec,
    split: Split,
    grid: Sequence[int],
    *,
    phase: Phase = "test",
    batch_size: int = 512,
    workers: int = 1,
    mask_history: bool = False,
) -> dict[int, dict[str, float]]:
    """Overall metrics at every step count of ``grid``, everything else fixed."""
    sampler = SamplerConfig(
        steps=max(grid), grid=tuple(grid), mask_history=mask_history
    )
    sweep: dict[int, dict[str, float]] = {}
    for steps in grid:
        report = evaluate(
            model,
            split,
            sampler,
            phase=phase,
            batch_size=batch_size,
            workers=workers,
            steps=steps,
        )
        sweep[steps] = report.overall
    return sweep


# --------------------------------------------------------------------------
# Timing
# --------------------------------------------------------------------------


def time_inference(
    model: FlowRec,
    split: Split,
    steps: int,
    *,
    phase: Phase = "test",
    batch_size: int = 512,
    repeats: int = 3,
) -> float:
    """Mean wall-clock seconds of one full ranking pass over ``phase``."""
    if repeats < 1:
        raise ValueError(f"repeats must be at least 1; got {repeats}.")
    batches = list(make_batches(split, phase, batch_size, _max_len(model)))
    scorer = model_scorer(model, steps)
    elapsed = []
    for _ in range(repeats):
        start = time.perf_counter()
        rank_batches(scorer, batches)
        elapsed.append(time.perf_counter() - start)
    return float(np.mean(elapsed))


def timing_report(
    model: FlowRec,
    split: Split,
    grid: Sequence[int],
    *,
    steps: int = 10,
    history: Sequence[Mapping[str, object]] = (),
    batch_size: int = 512,
    repeats: int = 3,
) -> TimingReport:
    """Seconds per training epoch (from the epoch log) and per inference pass."""
    epoch_seconds = [float(r["seconds"]) for r in history if "seconds" in r]
    mean_epoch = float(np.mean(epoch_seconds)) if epoch_seconds else None
    seconds = {
        s: time_inference(model, split, s, batch_size=batch_size, repeats=repeats)
        for s in sorted(set(grid) | {steps})
    }
    return TimingReport(
        steps=steps,
        inference_seconds=seconds,
        train_seconds_per_epoch=mean_epoch,
        repeats=repeats,
    )
