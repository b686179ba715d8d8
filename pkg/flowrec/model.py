import logging
from dataclasses import dataclass, field

import torch
from torch import nn

from .config import ModelConfig, ModulationConfig, RunConfig
from .encoder import build_encoder, init_parameters, prior_loss
from .errors import TrainingError
from .flow import (
    Time,
    VectorField,
    align_loss,
    cfm_loss,
    interpolate,
    modulation_mean,
    single_step_estimate,
    time_column,
)
from .seeding import SeedStreams

logger = logging.getLogger(__name__)

LOSS_NAMES = ("prior", "cfm", "align")


@dataclass(slots=True, frozen=True)
class LossParts:
    """The three loss components of one batch; None marks a disabled term."""

    prior: torch.Tensor | None = None
    cfm: torch.Tensor | None = None
    align: torch.Tensor | None = None

    def items(self) -> list[tuple[str, torch.Tensor]]:
        found = ((name, getattr(self, name)) for name in LOSS_NAMES)
        return [(name, value) for name, value in found if value is not None]

    def total(self, alpha: float, beta: float) -> torch.Tensor:
        """``prior + alpha * cfm + beta * align`` over the enabled, non-zero terms."""
        terms: list[torch.Tensor] = []
        if self.prior is not None:
            terms.append(self.prior)
        if self.cfm is not None and alpha != 0:
            terms.append(alpha * self.cfm)
        if self.align is not None and beta != 0:
            terms.append(beta * self.align)
        if not terms:
            raise TrainingError(
                "no active loss: enable at least one loss with a non-zero weight."
            )
        total = terms[0]
        for term in terms[1:]:
            total = total + term
        return total

    def as_floats(self) -> dict[str, float]:
        """Plain numbers for logging; disabled terms report 0.0."""
        found = dict(self.items())
        return {
            name: float(found[name].detach()) if name in found else 0.0
            for name in LOSS_NAMES
        }


class FlowRec(nn.Module):
    """Item table, sequence encoder and vector field trained end to end."""

    def __init__(
        self,
        num_items: int,
        config: ModelConfig,
        modulation: ModulationConfig,
        max_len: int,
    ):
        super().__init__()
        if num_items < 1:
            raise ValueError(f"num_items must be positive; got {num_items}.")
        self.num_items = num_items
        self.config = config
        self.modulation = modulation
        self.item_embedding = nn.Embedding(num_items + 1, config.dim, padding_idx=0)
        self.encoder = build_encoder(config, max_len)
        self.flow = VectorField(config.dim, config.hidden, config.time_embedding)

    @property
    def table(self) -> torch.Tensor:
        return self.item_embedding.weight

    def reset_parameters(self) -> None:
        init_parameters(self, self.config.init_std)
        with torch.no_grad():
            self.item_embedding.weight[0].zero_()

    def prior(self, ids: torch.Tensor) -> torch.Tensor:
        """The behavior-based start state x0 of each left-padded row."""
        return self.encoder(ids, self.item_embedding)

    def velocity(self, x: torch.Tensor, t: Time) -> torch.Tensor:
        """The field at ``(x, t)`` under the deterministic inference modulation."""
        lam = modulation_mean(x.shape[-1], self.modulation, dtype=x.dtype).to(x.device)
        return self.flow(x, time_column(t, x), lam, self.modulation.mode)

    def loss_parts(
        self,
        ids: torch.Tensor,
        targets: torch.Tensor,
        t: torch.Tensor,
        lam: torch.Tensor,
        *,
        use_prior: bool = True,
        use_cfm: bool = True,
        use_align: bool = True,
        detach_flow: bool = True,
    ) -> LossParts:
        """
        Prior, flow-matching and alignment losses of one batch.

        With ``detach_flow`` the field sees a detached ``x_t`` and regresses
        onto a detached ``x1 - x0``, so only the softmax losses shape the
        encoder and the item table. The forward values are the same either way.
        """
        x0 = self.prior(ids)
        l_prior = prior_loss(x0, targets, self.table) if use_prior else None
        l_cfm = l_align = None
        if use_cfm or use_align:
            x1 = self.item_embedding(targets)
            x_t = interpolate(x0, x1, t)
            if detach_flow:
                field_in, start, end = x_t.detach(), x0.detach(), x1.detach()
            else:
                field_in, start, end = x_t, x0, x1
            v = self.flow(field_in, t, lam, self.modulation.mode)
            if use_cfm:
                l_cfm = cfm_loss(v, start, end)
            if use_align:
                l_align = align_loss(
                    single_step_estimate(x_t, t, v), targets, self.table
                )
        return LossParts(prior=l_prior, cfm=l_cfm, align=l_align)


def build_model(
    num_items: int,
    config: RunConfig,
    *,
    seed: int | None = None,
    dtype: torch.dtype = torch.float32,
) -> FlowRec:
    """Construct and initialize a model; ``seed`` defaults to the run's init stream."""
    if seed is None:
        seed = SeedStreams(config.seed).seed("init")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = FlowRec(num_items, config.model, config.modulation, config.data.max_len)
        model.reset_parameters()
    return model.to(dtype)


@dataclass(slots=True)
class ModelState:
    """Everything that evolves during training."""

    model: FlowRec
    optimizer: torch.optim.Optimizer
    config: RunConfig
    generators: dict[str, torch.Generator] = field(default_factory=dict)
    epoch: int = 0

    @property
    def num_items(self) -> int:
        return self.model.num_items


def init_state(
    num_items: int, config: RunConfig, *, dtype: torch.dtype = torch.float32
) -> ModelState:
    """Fresh model, Adam optimizer and seeded time/modulation generators."""
    streams = SeedStreams(config.seed)
    model = build_model(num_items, config, seed=streams.seed("init"), dtype=dtype)
    optimizer = torch.optim.Adam(
        model.parameters(), lr=config.train.lr, betas=(0.9, 0.999), eps=1e-8
    )
    # Dropout draws from the global generator.
    torch.manual_seed(streams.seed("dropout"))
    if config.modulation.mode != "literal_mult":
        logger.warning(
            f"Modulation mode is {config.modulation.mode!r}; the literal "
            f"N(delta, delta) multiplier is available as modulation.mode=literal_mult."
        )
    return ModelState(
        model=model,
        optimizer=optimizer,
        config=config,
        generators={name: streams.generator(name) for name in ("time", "modulation")},
    )
