"""Episode embedding and per-market classification losses.

Per post, the text, time, and graph-context vectors are concatenated; the
episode encoder projects them, mixes the post sequence with one attention
block plus a learned post-position encoding, mean-pools, projects to the
output width, and L2-normalizes. Each market owns a softmax head over its
training authors; the multi-task objective is the plain sum of per-task
mean cross-entropies through the shared encoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .text_encoder import AttentionBlock, DimensionMismatch, TextEncoder
from .time_encoder import TimeEncoder


class EmptyBatch(ValueError):
    def __init__(self, task: str):
        super().__init__(f"task {task!r} received an empty batch")
        self.task = task


class IndexOutOfRange(ValueError):
    pass


UNIT_FALLBACK_EPS = 1e-12


@dataclass(frozen=True)
class EpisodeEncoderConfig:
    d_in: int  # concatenated per-post width: text + time + graph context
    episode_len: int
    d_agg: int = 128
    n_heads: int = 4
    d_ff: int = 256
    out_dim: int = 128
    positional: bool = True

    def __post_init__(self):
        if self.out_dim < 2:
            raise ValueError("out_dim must be >= 2")
        if self.d_agg % self.n_heads != 0:
            raise ValueError("d_agg must be divisible by n_heads")


class EpisodeEncoder(nn.Module):
    """(B, L_e, d_in) per-post features -> (B, out_dim) unit-norm episode embedding."""

    def __init__(self, cfg: EpisodeEncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.input_proj = nn.Linear(cfg.d_in, cfg.d_agg)
        self.post_positions = nn.Parameter(torch.zeros(cfg.episode_len, cfg.d_agg))
        self.block = AttentionBlock(cfg.d_agg, cfg.n_heads, cfg.d_ff)
        self.output_proj = nn.Linear(cfg.d_agg, cfg.out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.cfg.d_in or x.shape[-2] != self.cfg.episode_len:
            raise DimensionMismatch(
                f"expected (*, {self.cfg.episode_len}, {self.cfg.d_in}) features, got {tuple(x.shape)}"
            )
        h = self.input_proj(x)
        if self.cfg.positional:
            h = h + self.post_positions
        h = self.block(h)
        e = self.output_proj(h.mean(dim=1))
        norm = e.norm(p=2, dim=-1, keepdim=True)
        unit = e / norm.clamp_min(UNIT_FALLBACK_EPS)
        fallback = torch.zeros_like(e)
        fallback[..., 0] = 1.0  # degenerate inputs map to a fixed unit vector
        return torch.where(norm >= UNIT_FALLBACK_EPS, unit, fallback)


class MarketHead(nn.Module):
    """Softmax classifier over one task's training labels."""

    def __init__(self, task_id: str, emb_dim: int, label_map: dict[str, int]):
        super().__init__()
        classes = set(label_map.values())
        n_classes = len(classes)
        if n_classes < 1:
            raise ValueError("head needs at least one class")
        if classes != set(range(n_classes)):  # several labels may share a class
            raise ValueError("label_map classes must be dense in [0, n_classes)")
        self.task_id = task_id
        self.label_map = dict(label_map)
        self.linear = nn.Linear(emb_dim, n_classes)

    @property
    def n_classes(self) -> int:
        return self.linear.out_features

    def forward(self, e: torch.Tensor) -> torch.Tensor:
        return self.linear(e)


def softmax_xent(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-sample -log softmax(logits)[target], stabilized by max subtraction."""
    if logits.dim() == 1:
        logits = logits.unsqueeze(0)
    target = torch.as_tensor(target, dtype=torch.long, device=logits.device).reshape(-1)
    n_classes = logits.shape[-1]
    if torch.any(target < 0) or torch.any(target >= n_classes):
        raise IndexOutOfRange(f"class index out of range for {n_classes} classes")
    z = logits - logits.max(dim=-1, keepdim=True).values
    log_norm = z.exp().sum(dim=-1).log()
    picked = z.gather(-1, target.unsqueeze(-1)).squeeze(-1)
    return log_norm - picked


def multitask_loss(
    batches: dict[str, tuple[torch.Tensor, torch.Tensor]],
    heads: dict[str, MarketHead],
) -> torch.Tensor:
    """Sum over tasks of the mean cross-entropy on that task's batch."""
    total = None
    for task_id, head in heads.items():
        embeddings, labels = batches[task_id]
        if embeddings.shape[0] == 0:
            raise EmptyBatch(task_id)
        loss = softmax_xent(head(embeddings), labels).mean()
        total = loss if total is None else total + loss
    if total is None:
        raise ValueError("no tasks given")
    return total


class AuthorEncoder(nn.Module):
    """Shared encoder f: episode features -> unit embedding.

    Inputs per episode: token ids (L_e, L_p), day-of-week and day-of-year
    ids (L_e,), and per-post graph-context vectors (L_e, d_m). The time and
    graph channels can be ablated, which replaces them with zeros of the
    same width.
    """

    def __init__(
        self,
        text: TextEncoder,
        time: TimeEncoder,
        episode: EpisodeEncoder,
        d_m: int,
        use_time: bool = True,
        use_graph: bool = True,
    ):
        super().__init__()
        expected = text.out_dim + time.d_tau + d_m
        if episode.cfg.d_in != expected:
            raise DimensionMismatch(
                f"episode encoder expects d_in={episode.cfg.d_in}, channels give {expected}"
            )
        self.text = text
        self.time = time
        self.episode = episode
        self.d_m = d_m
        self.use_time = use_time
        self.use_graph = use_graph

    @property
    def out_dim(self) -> int:
        return self.episode.cfg.out_dim

    def forward(
        self,
        tokens: torch.Tensor,  # (B, L_e, L_p) int64
        dows: torch.Tensor,  # (B, L_e) int64
        doys: torch.Tensor,  # (B, L_e) int64
        contexts: torch.Tensor,  # (B, L_e, d_m) float
    ) -> torch.Tensor:
        b, l_e, l_p = tokens.shape
        dtype = self.episode.input_proj.weight.dtype
        h_text = self.text(tokens.reshape(b * l_e, l_p)).reshape(b, l_e, -1)
        if self.use_time:
            h_time = self.time(dows.reshape(-1), doys.reshape(-1)).reshape(b, l_e, -1)
        else:
            h_time = torch.zeros(b, l_e, self.time.d_tau, dtype=dtype)
        h_ctx = contexts.to(dtype) if self.use_graph else torch.zeros(b, l_e, self.d_m, dtype=dtype)
        return self.episode(torch.cat([h_text, h_time, h_ctx], dim=-1))
