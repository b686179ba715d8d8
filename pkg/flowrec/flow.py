"""The flow model: interpolant, stochastic modulation, vector field and losses."""

import math

import torch
from torch import nn

from .config import ModulationConfig, ModulationMode, TimeEmbeddingKind
from .scoring import full_softmax_loss

type Time = float | torch.Tensor


def time_column(t: Time, like: torch.Tensor) -> torch.Tensor:
    """Broadcast a scalar or per-row time to a (B, 1) column matching ``like``."""
    if not isinstance(t, torch.Tensor):
        return torch.full(
            (*like.shape[:-1], 1), float(t), dtype=like.dtype, device=like.device
        )
    t = t.to(dtype=like.dtype, device=like.device)
    if t.dim() == 0:
        return t.expand(*like.shape[:-1], 1)
    if t.dim() == like.dim() - 1:
        return t.unsqueeze(-1)
    return t


# --------------------------------------------------------------------------
# Interpolant and modulation
# --------------------------------------------------------------------------


def interpolate(x0: torch.Tensor, x1: torch.Tensor, t: Time) -> torch.Tensor:
    """The point ``(1 - t) * x0 + t * x1`` on the straight path."""
    if x0.shape != x1.shape:
        raise ValueError(
            f"x0 and x1 must have the same shape; "
            f"got {tuple(x0.shape)} and {tuple(x1.shape)}."
        )
    column = time_column(t, x0)
    if bool(((column < 0) | (column > 1)).any()):
        raise ValueError(f"t must lie in [0, 1]; got {t!r}.")
    return (1 - column) * x0 + column * x1


def sample_time(
    batch: int, generator: torch.Generator | None = None, *, dtype=torch.float32
) -> torch.Tensor:
    """One uniform time per batch element, shaped (B, 1)."""
    return torch.rand(batch, 1, generator=generator, dtype=dtype)


def sample_modulation(
    dim: int,
    config: ModulationConfig,
    generator: torch.Generator | None = None,
    *,
    batch: int | None = None,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """
    Draw a modulation vector (or one per batch row) for training.

    ``delta`` is both the mean offset and the variance of the Gaussian.
    ``unit_mean_mult`` draws from N(1, delta), ``literal_mult`` and
    ``additive`` from N(delta, delta); ``off`` yields ones.
    """
    shape = (dim,) if batch is None else (batch, dim)
    if config.mode == "off":
        return torch.ones(shape, dtype=dtype)
    noise = torch.randn(shape, generator=generator, dtype=dtype)
    noise = noise * math.sqrt(config.delta)
    match config.mode:
        case "unit_mean_mult":
            return 1.0 + noise
        case "literal_mult" | "additive":
            return config.delta + noise
        case _:
            raise ValueError(f"Unknown modulation mode {config.mode!r}.")


def modulation_mean(
    dim: int, config: ModulationConfig, *, dtype: torch.dtype = torch.float32
) -> torch.Tensor:
    """The deterministic modulation used at inference."""
    match config.mode:
        case "off" | "unit_mean_mult":
            return torch.ones(dim, dtype=dtype)
        case _:
            return torch.full((dim,), config.delta, dtype=dtype)


def modulate(lam: torch.Tensor, x: torch.Tensor, mode: ModulationMode) -> torch.Tensor:
    return x + lam if mode == "additive" else lam * x


# --------------------------------------------------------------------------
# Vector field
# --------------------------------------------------------------------------


class TimeEmbedding(nn.Module):
    """Sinusoidal embedding of ``1000 * t``, optionally followed by a linear map."""

    def __init__(
        self, dim: int, kind: TimeEmbeddingKind = "sinusoidal", base: float = 10_000.0
    ):
        super().__init__()
        if dim % 2:
            raise ValueError(f"Time embedding dimension must be even; got {dim}.")
        self.dim = dim
        self.base = base
        self.linear = nn.Linear(dim, dim) if kind == "learned" else None

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        half = self.dim // 2
        steps = torch.arange(half, dtype=t.dtype, device=t.device) / half
        freqs = torch.exp(-math.log(self.base) * steps)
        args = 1000.0 * t.reshape(-1, 1) * freqs
        out = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
        return self.linear(out) if self.linear is not None else out


class VectorField(nn.Module):
    """Two-layer GELU MLP over the modulated state and the time embedding."""

    def __init__(
        self, dim: int, hidden: int, time_embedding: TimeEmbeddingKind = "sinusoidal"
    ):
        super().__init__()
        self.time = TimeEmbedding(dim, time_embedding)
        self.net = nn.Sequential(
            nn.Linear(2 * dim, hidden), nn.GELU(), nn.Linear(hidden, dim)
        )

    def forward(
        self,
        x_t: torch.Tensor,
        t: Time,
        lam: torch.Tensor,
        mode: ModulationMode = "unit_mean_mult",
    ) -> torch.Tensor:
        time = self.time(time_column(t, x_t))
        return self.net(torch.cat([modulate(lam, x_t, mode), time], dim=-1))


def vector_field(
    x_t: torch.Tensor,
    t: Time,
    lam: torch.Tensor,
    params: VectorField,
    mode: ModulationMode = "unit_mean_mult",
) -> torch.Tensor:
    return params(x_t, t, lam, mode)


# --------------------------------------------------------------------------
# Endpoint estimate and losses
# --------------------------------------------------------------------------


def single_step_estimate(x_t: torch.Tensor, t: Time, v: torch.Tensor) -> torch.Tensor:
    """Jump from ``x_t`` to the endpoint in one step: ``x_t + (1 - t) * v``."""
    return x_t + (1 - time_column(t, x_t)) * v


def cfm_loss(v: torch.Tensor, x0: torch.Tensor, x1: torch.Tensor) -> torch.Tensor:
    """Squared error to the straight-path velocity, summed over d, averaged over B."""
    return (v - (x1 - x0)).pow(2).sum(dim=-1).mean()


def align_loss(
    x1_tilde: torch.Tensor, targets: torch.Tensor, table: torch.Tensor
) -> torch.Tensor:
    return full_softmax_loss(x1_tilde, targets, table, name="alignment loss")
