import torch
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence

from .config import ModelConfig
from .dataset import PAD_ID, SequenceBatch
from .scoring import full_softmax_loss


def init_parameters(module: nn.Module, std: float) -> None:
    """Truncated-normal weights, zero biases, unit layer-norm gains."""
    norm_params: set[int] = set()
    for sub in module.modules():
        if isinstance(sub, nn.LayerNorm):
            nn.init.ones_(sub.weight)
            nn.init.zeros_(sub.bias)
            norm_params.update(id(p) for p in sub.parameters())
    for param in module.parameters():
        if id(param) in norm_params:
            continue
        if param.dim() >= 2:
            nn.init.trunc_normal_(param, std=std, a=-2 * std, b=2 * std)
        else:
            nn.init.zeros_(param)


def embed(
    ids: torch.Tensor,
    table: nn.Embedding,
    positions: nn.Embedding,
    dropout: nn.Module | None = None,
) -> torch.Tensor:
    """Item embedding plus the learned embedding of each window column."""
    columns = torch.arange(ids.shape[1], device=ids.device)
    out = table(ids) + positions(columns).unsqueeze(0)
    return dropout(out) if dropout is not None else out


class TransformerEncoder(nn.Module):
    """Bidirectional pre-norm Transformer over a left-padded id window."""

    def __init__(self, config: ModelConfig, max_len: int):
        super().__init__()
        self.positions = nn.Embedding(max_len, config.dim)
        self.dropout = nn.Dropout(config.embed_dropout)
        layer = nn.TransformerEncoderLayer(
            d_model=config.dim,
            nhead=config.heads,
            dim_feedforward=4 * config.dim,
            dropout=config.hidden_dropout,
            activation="gelu",
            batch_first=True,
            norm_first=True,
        )
        self.layers = nn.TransformerEncoder(
            layer,
            num_layers=config.layers,
            norm=nn.LayerNorm(config.dim),
            enable_nested_tensor=False,
        )

    def forward(self, ids: torch.Tensor, table: nn.Embedding) -> torch.Tensor:
        x = embed(ids, table, self.positions, self.dropout)
        pad_mask = ids == PAD_ID
        # The most recent column always attends, so an empty row stays finite.
        pad_mask[:, -1] = False
        hidden = self.layers(x, src_key_padding_mask=pad_mask)
        return hidden[:, -1]


class GRUEncoder(nn.Module):
    """GRU over the real items of each row; its last hidden state is the prior."""

    def __init__(self, config: ModelConfig, max_len: int):
        super().__init__()
        self.positions = nn.Embedding(max_len, config.dim)
        self.dropout = nn.Dropout(config.embed_dropout)
        self.gru = nn.GRU(
            config.dim,
            config.dim,
            num_layers=config.gru_layers,
            batch_first=True,
            dropout=config.hidden_dropout if config.gru_layers > 1 else 0.0,
        )

    def forward(self, ids: torch.Tensor, table: nn.Embedding) -> torch.Tensor:
        x = embed(ids, table, self.positions, self.dropout)
        window = ids.shape[1]
        lengths = (ids != PAD_ID).sum(dim=1).clamp(min=1)
        # Shift each left-padded row so its real items start at column 0.
        offsets = (window - lengths).unsqueeze(1)
        columns = torch.arange(window, device=ids.device).unsqueeze(0)
        gather = (columns + offsets).clamp(max=window - 1)
        x = x.gather(1, gather.unsqueeze(-1).expand(-1, -1, x.shape[-1]))
        packed = pack_padded_sequence(
            x, lengths.cpu(), batch_first=True, enforce_sorted=False
        )
        _, hidden = self.gru(packed)
        return hidden[-1]


type Encoder = TransformerEncoder | GRUEncoder


def build_encoder(config: ModelConfig, max_len: int) -> Encoder:
    match config.encoder:
        case "transformer":
            return TransformerEncoder(config, max_len)
        case "gru":
            return GRUEncoder(config, max_len)
        case _:
            raise ValueError(f"Unknown encoder backend {config.encoder!r}.")


def encode(
    batch: SequenceBatch, encoder: TransformerEncoder, table: nn.Embedding
) -> torch.Tensor:
    """Prior states x0 (B x d) for a batch through the Transformer encoder."""
    return encoder(batch.ids, table)


def encode_gru(
    batch: SequenceBatch, encoder: GRUEncoder, table: nn.Embedding
) -> torch.Tensor:
    """Prior states x0 (B x d) for a batch through the GRU encoder."""
    return encoder(batch.ids, table)


def prior_loss(
    x0: torch.Tensor, targets: torch.Tensor, table: torch.Tensor
) -> torch.Tensor:
    return full_softmax_loss(x0, targets, table, name="prior loss")
