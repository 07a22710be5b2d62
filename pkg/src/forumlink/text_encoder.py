"""Post text encoder: convolutional and self-attention branches fused by a
confidence-band gate.

The convolutional branch captures local token patterns (multiple kernel
sizes, ReLU, max-over-time, dense projection). The self-attention branch
models the whole sequence (sinusoidal positions plus a stack of standard
attention blocks) and is reduced to two pooled projections. A gate vector
derived from the convolutional features decides, element-wise, whether the
attention features are admitted: only gate entries within epsilon of 0.5
(the "unsure" band) pass through; all others contribute nothing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn


class IdOutOfRange(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


@dataclass(frozen=True)
class TextEncoderConfig:
    vocab_size: int
    seq_len: int  # uniform token-sequence length
    d_tok: int = 64
    filters: int = 32  # per kernel size
    kernel_sizes: tuple[int, ...] = (2, 3, 4, 5)
    d_c: int = 64
    d_s: int = 64
    n_heads: int = 4
    n_blocks: int = 2
    d_ff: int = 128
    epsilon: float = 0.3
    fusion: str = "residual"  # "residual" | "concat"
    mask_pad: bool = False
    positional: bool = True

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError("vocab_size must include PAD and UNK")
        if self.seq_len < max(self.kernel_sizes):
            raise ValueError("seq_len must be >= the largest kernel size")
        if self.d_tok % self.n_heads != 0:
            raise ValueError("d_tok must be divisible by n_heads")
        if not 0.0 <= self.epsilon <= 0.5:
            raise ValueError("epsilon must be in [0, 0.5]")
        if self.fusion not in ("residual", "concat"):
            raise ValueError("fusion must be 'residual' or 'concat'")
        if self.fusion == "residual" and self.d_c != self.d_s:
            raise DimensionMismatch("residual fusion requires d_c == d_s")

    @property
    def out_dim(self) -> int:
        return self.d_c if self.fusion == "residual" else self.d_c + 2 * self.d_s


def sinusoidal_positions(length: int, dim: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64).unsqueeze(1)
    idx = torch.arange(0, dim, 2, dtype=torch.float64)
    angles = pos / torch.pow(10000.0, idx / dim)
    table = torch.zeros(length, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(angles)
    table[:, 1::2] = torch.cos(angles[:, : dim // 2])
    return table.to(torch.float32)


def valve(gate, epsilon: float):
    """Keep gate entries inside [0.5 - epsilon, 0.5 + epsilon], zero the rest."""
    if not 0.0 <= epsilon <= 0.5:
        raise ValueError("epsilon must be in [0, 0.5]")
    if not torch.is_tensor(gate):
        gate = torch.as_tensor(gate, dtype=torch.float64)
    band = (gate >= 0.5 - epsilon) & (gate <= 0.5 + epsilon)
    return torch.where(band, gate, gate.new_zeros(()))


class ConvBranch(nn.Module):
    """Parallel 1-D convolutions, ReLU, max-over-time, dense projection."""

    def __init__(self, cfg: TextEncoderConfig):
        super().__init__()
        self.convs = nn.ModuleList(
            nn.Conv1d(cfg.d_tok, cfg.filters, k) for k in cfg.kernel_sizes
        )
        self.project = nn.Linear(cfg.filters * len(cfg.kernel_sizes), cfg.d_c)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        xt = x.transpose(1, 2)  # (B, d_tok, L)
        pooled = [torch.relu(conv(xt)).max(dim=2).values for conv in self.convs]
        return self.project(torch.cat(pooled, dim=1))


class AttentionBlock(nn.Module):
    """Multi-head self-attention with residual add/norm and a feed-forward tail."""

    def __init__(self, d_model: int, n_heads: int, d_ff: int):
        super().__init__()
        if d_model % n_heads != 0:
            raise DimensionMismatch("d_model must be divisible by n_heads")
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q_proj = nn.Linear(d_model, d_model, bias=False)
        self.k_proj = nn.Linear(d_model, d_model, bias=False)
        self.v_proj = nn.Linear(d_model, d_model, bias=False)
        self.out_proj = nn.Linear(d_model, d_model, bias=False)
        self.norm1 = nn.LayerNorm(d_model)
        self.ff1 = nn.Linear(d_model, d_ff)
        self.ff2 = nn.Linear(d_ff, d_model)
        self.norm2 = nn.LayerNorm(d_model)

    def attention_weights(self, x: torch.Tensor, key_mask: torch.Tensor | None = None) -> torch.Tensor:
        b, n, d = x.shape
        q = self.q_proj(x).view(b, n, self.n_heads, self.d_head).transpose(1, 2)
        k = self.k_proj(x).view(b, n, self.n_heads, self.d_head).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.d_head)
        if key_mask is not None:
            # A row with every key masked would produce NaNs; leave such rows unmasked.
            usable = key_mask & ~key_mask.all(dim=-1, keepdim=True)
            scores = scores.masked_fill(usable[:, None, None, :], float("-inf"))
        return torch.softmax(scores, dim=-1)  # (B, heads, N, N)

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor | None = None) -> torch.Tensor:
        b, n, d = x.shape
        weights = self.attention_weights(x, key_mask)
        v = self.v_proj(x).view(b, n, self.n_heads, self.d_head).transpose(1, 2)
        ctx = (weights @ v).transpose(1, 2).reshape(b, n, d)
        h = self.norm1(x + self.out_proj(ctx))
        return self.norm2(h + self.ff2(torch.relu(self.ff1(h))))


class AttentionStack(nn.Module):
    """Positional encoding followed by a stack of attention blocks."""

    def __init__(self, cfg: TextEncoderConfig):
        super().__init__()
        self.positional = cfg.positional
        self.register_buffer("positions", sinusoidal_positions(cfg.seq_len, cfg.d_tok))
        self.blocks = nn.ModuleList(
            AttentionBlock(cfg.d_tok, cfg.n_heads, cfg.d_ff) for _ in range(cfg.n_blocks)
        )

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor | None = None) -> torch.Tensor:
        if self.positional:
            x = x + self.positions[: x.shape[1]]
        for block in self.blocks:
            x = block(x, key_mask)
        return x


class PoolProject(nn.Module):
    """Max- and mean-pool over positions, each with its own linear map."""

    def __init__(self, cfg: TextEncoderConfig):
        super().__init__()
        self.max_proj = nn.Linear(cfg.d_tok, cfg.d_s)
        self.mean_proj = nn.Linear(cfg.d_tok, cfg.d_s)

    def forward(self, s: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.max_proj(s.max(dim=1).values), self.mean_proj(s.mean(dim=1))


class AdaGate(nn.Module):
    """Fuse conv and pooled attention features through the band-gated valve.

    residual mode: out = conv + gate * (max_pooled + mean_pooled), width d_c.
    concat mode:   out = [conv ; gate * max_pooled ; gate * mean_pooled],
    width d_c + 2*d_s. The gate is sigmoid(W conv + b), zeroed outside the
    confidence band; gradients pass through gate entries only inside it.
    """

    def __init__(self, d_c: int, d_s: int, epsilon: float, fusion: str):
        super().__init__()
        if fusion == "residual" and d_c != d_s:
            raise DimensionMismatch("residual fusion requires d_c == d_s")
        self.epsilon = epsilon
        self.fusion = fusion
        self.gate_proj = nn.Linear(d_c, d_s)

    def gate(self, h_conv: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        lam = torch.sigmoid(self.gate_proj(h_conv))
        band = (lam >= 0.5 - self.epsilon) & (lam <= 0.5 + self.epsilon)
        return lam, band

    def forward(self, h_conv: torch.Tensor, h_max: torch.Tensor, h_mean: torch.Tensor) -> torch.Tensor:
        lam, band = self.gate(h_conv)
        if self.fusion == "residual":
            # torch.where keeps rejected entries bit-identical to the conv features.
            return torch.where(band, h_conv + lam * (h_max + h_mean), h_conv)
        gated = torch.where(band, lam, lam.new_zeros(()))
        return torch.cat([h_conv, gated * h_max, gated * h_mean], dim=-1)


class TextEncoder(nn.Module):
    """Token ids (B, L) -> post text embedding (B, out_dim)."""

    def __init__(self, cfg: TextEncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.token_table = nn.Embedding(cfg.vocab_size, cfg.d_tok)
        self.conv = ConvBranch(cfg)
        self.attn = AttentionStack(cfg)
        self.pool = PoolProject(cfg)
        self.fuse = AdaGate(cfg.d_c, cfg.d_s, cfg.epsilon, cfg.fusion)

    @property
    def out_dim(self) -> int:
        return self.cfg.out_dim

    def embed_tokens(self, ids: torch.Tensor) -> torch.Tensor:
        if torch.any(ids < 0) or torch.any(ids >= self.cfg.vocab_size):
            raise IdOutOfRange(f"token ids must be in [0, {self.cfg.vocab_size})")
        return self.token_table(ids)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        if ids.dim() == 1:
            ids = ids.unsqueeze(0)
        x = self.embed_tokens(ids)
        key_mask = ids.eq(0) if self.cfg.mask_pad else None
        h_conv = self.conv(x)
        s = self.attn(x, key_mask)
        h_max, h_mean = self.pool(s)
        return self.fuse(h_conv, h_max, h_mean)


def init_parameters(module: nn.Module, seed: int) -> None:
    """Seeded init: weights uniform in +-1/sqrt(fan_in), biases zero, norms identity.

    fan_in is the receptive input width of the weight (in-features for linear
    maps, in-channels * kernel for convolutions, row width for lookup tables).
    """
    gen = torch.Generator().manual_seed(seed)
    seen = set()
    for sub in module.modules():
        if isinstance(sub, nn.LayerNorm):
            nn.init.ones_(sub.weight)
            nn.init.zeros_(sub.bias)
            seen.update((id(sub.weight), id(sub.bias)))
        elif isinstance(sub, (nn.Linear, nn.Conv1d)):
            fan_in = sub.weight.shape[1:].numel()
            bound = 1.0 / math.sqrt(fan_in)
            sub.weight.data.uniform_(-bound, bound, generator=gen)
            seen.add(id(sub.weight))
            if sub.bias is not None:
                nn.init.zeros_(sub.bias)
                seen.add(id(sub.bias))
        elif isinstance(sub, nn.Embedding):
            bound = 1.0 / math.sqrt(sub.weight.shape[1])
            sub.weight.data.uniform_(-bound, bound, generator=gen)
            seen.add(id(sub.weight))
    for name, p in module.named_parameters():
        if id(p) in seen:
            continue
        if name.endswith("bias") or p.dim() == 1:
            nn.init.zeros_(p)
        else:
            bound = 1.0 / math.sqrt(p.shape[-1])
            p.data.uniform_(-bound, bound, generator=gen)
