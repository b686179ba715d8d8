import math

import torch
import torch.nn.functional as F

from .errors import TrainingError


def item_scores(x: torch.Tensor, table: torch.Tensor) -> torch.Tensor:
    """Inner products of states with every real item; the pad row is skipped."""
    return x @ table[1:].T


def full_softmax_loss(
    x: torch.Tensor, targets: torch.Tensor, table: torch.Tensor, *, name: str = "loss"
) -> torch.Tensor:
    """
    Batch-mean cross-entropy of ``x . E^T`` against dense target ids.

    The softmax runs over all real items, so every non-target item acts as a
    negative. Shared by the prior and alignment losses.
    """
    logits = item_scores(x, table)
    finite = torch.isfinite(logits)
    if not bool(finite.all()):
        bad = int((~finite).sum())
        largest = float(x.detach().abs().nan_to_num(posinf=math.inf).max())
        raise TrainingError(
            f"Non-finite logits in {name}: {bad} of {logits.numel()} entries; "
            f"max |x| = {largest:.4g}."
        )
    return F.cross_entropy(logits, targets - 1)
