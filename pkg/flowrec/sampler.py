import json
import logging
from collections.abc import Callable, Iterable, Iterator, Sequence
from dataclasses import dataclass
from pathlib import Path

import pandas as pd
import torch

from .dataset import SequenceBatch
from .errors import DivergedError
from .model import FlowRec
from .scoring import item_scores

logger = logging.getLogger(__name__)

type Field = Callable[[torch.Tensor, float], torch.Tensor]
"""A velocity field ``f(x, t)``; ``FlowRec.velocity`` is the trained one."""


@dataclass(slots=True, frozen=True)
class Trajectory:
    user: int
    states: torch.Tensor
    """(T + 1) x d states; row 0 is x0 and row T the endpoint."""

    target_id: int

    @property
    def steps(self) -> int:
        return int(self.states.shape[0]) - 1


# --------------------------------------------------------------------------
# Integration
# --------------------------------------------------------------------------


def euler_integrate(
    x0: torch.Tensor, field: Field, steps: int, *, record: bool = False
) -> tuple[torch.Tensor, torch.Tensor | None]:
    """
    Advance ``x0`` through ``steps`` uniform Euler steps on the grid ``i / steps``.

    Returns the endpoint and, with ``record``, every intermediate state
    stacked as (steps + 1) x ... .
    """
    if steps < 1:
        raise ValueError(f"steps must be at least 1; got {steps}.")
    dt = 1.0 / steps
    x = x0
    states = [x0] if record else []
    for i in range(steps):
        x = x + dt * field(x, i / steps)
        if not bool(torch.isfinite(x).all()):
            raise DivergedError(i + 1)
        if record:
            states.append(x)
    return x, torch.stack(states) if record else None


@torch.no_grad()
def sample_endpoints(
    model: FlowRec, ids: torch.Tensor, steps: int, *, from_prior: bool = False
) -> torch.Tensor:
    """Endpoint states for a batch of left-padded histories, in eval mode."""
    model.eval()
    x0 = model.prior(ids)
    if from_prior:
        return x0
    x1, _ = euler_integrate(x0, model.velocity, steps)
    return x1


@torch.no_grad()
def collect_trajectories(
    model: FlowRec, batch: SequenceBatch, steps: int
) -> list[Trajectory]:
    model.eval()
    _, states = euler_integrate(
        model.prior(batch.ids), model.velocity, steps, record=True
    )
    assert states is not None
    return [
        Trajectory(
            user=int(batch.users[b]),
            states=states[:, b].clone(),
            target_id=int(batch.targets[b]),
        )
        for b in range(len(batch))
    ]


# --------------------------------------------------------------------------
# Scoring and ranking
# --------------------------------------------------------------------------


def score(x1: torch.Tensor, table: torch.Tensor) -> torch.Tensor:
    """Inner-product score of every real item (``scores[i - 1]`` is item ``i``)."""
    return item_scores(x1, table)


def mask_seen(scores: torch.Tensor, ids: torch.Tensor) -> torch.Tensor:
    """Push already-interacted items (ids in each row's history) to the bottom."""
    masked = scores.clone()
    rows, cols = torch.nonzero(ids, as_tuple=True)
    masked[rows, ids[rows, cols] - 1] = float("-inf")
    return masked


def ranked_order(scores: torch.Tensor) -> torch.Tensor:
    """Column order by descending score; equal scores keep ascending item id."""
    return torch.sort(scores, dim=-1, descending=True, stable=True).indices


def top_k(scores: torch.Tensor, k: int) -> list[tuple[int, float]]:
    """The ``k`` best (dense item id, score) pairs of one score vector."""
    n = int(scores.shape[-1])
    if k <= 0:
        raise ValueError(f"k must be positive; got {k}.")
    if k > n:
        raise ValueError(f"k={k} exceeds the catalog size {n}.")
    order = ranked_order(scores)[:k]
    return [(int(i) + 1, float(scores[i])) for i in order]


# --------------------------------------------------------------------------
# Exports
# --------------------------------------------------------------------------


def trace_export(
    trajectories: Sequence[Trajectory], path: str | Path, *, dim: int | None = None
) -> Path:
    """Write trajectories as CSV: one row per (user, step) with every coordinate."""
    if trajectories:
        dim = int(trajectories[0].states.shape[-1])
    columns = ["user", "step", *(f"dim_{j}" for j in range(dim or 0)), "target_id"]
    rows = [
        [traj.user, step, *state.double().tolist(), traj.target_id]
        for traj in trajectories
        for step, state in enumerate(traj.states)
    ]
    path = Path(path)
    pd.DataFrame(rows, columns=columns).to_csv(path, index=False)
    logger.info(
        f"Wrote {len(rows)} trajectory rows for {len(trajectories)} user(s) to {path}."
    )
    return path


def read_trace(path: str | Path) -> list[Trajectory]:
    frame = pd.read_csv(path, float_precision="round_trip")
    dims = [c for c in frame.columns if c.startswith("dim_")]
    trajectories = []
    for user, rows in frame.groupby("user", sort=False):
        rows = rows.sort_values("step", kind="stable")
        trajectories.append(
            Trajectory(
                user=int(user),
                states=torch.tensor(rows[dims].to_numpy(dtype="float64")),
                target_id=int(rows["target_id"].iloc[0]),
            )
        )
    return trajectories


def iter_rankings(
    model: FlowRec,
    batches: Iterable[SequenceBatch],
    steps: int,
    k: int,
    *,
    mask_history: bool = False,
) -> Iterator[tuple[int, list[tuple[int, float]]]]:
    """Yield each user's top ``k`` (item, score) pairs."""
    for batch in batches:
        scores = score(sample_endpoints(model, batch.ids, steps), model.table.detach())
        if mask_history:
            scores = mask_seen(scores, batch.ids)
        for b in range(len(batch)):
            yield int(batch.users[b]), top_k(scores[b], min(k, scores.shape[1]))


def dump_rankings(
    path: str | Path,
    rankings: Iterable[tuple[int, list[tuple[int, float]]]],
    *,
    item_ids: Sequence[str] | None = None,
) -> Path:
    """Write one line-JSON record of ranked items per user."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as out:
        for user, ranked in rankings:
            record = {
                "user": user,
                "items": [i for i, _ in ranked],
                "scores": [s for _, s in ranked],
            }
            if item_ids is not None:
                record["item_ids"] = [item_ids[i - 1] for i, _ in ranked]
            out.write(json.dumps(record) + "\n")
    return path
