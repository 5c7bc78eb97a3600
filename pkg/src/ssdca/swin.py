"""Hierarchical shifted-window transformer encoder.

Tensor layout inside the encoder is channels-last: a stage feature map is a
``(B, T, C)`` token tensor together with its ``(rows, cols)`` grid. Module
and parameter names follow the widely used reference Swin layout so public
checkpoints translate with a short rename table (see ``checkpoint.py``).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn as nn

from .config import ConfigError, SwinConfig


@dataclass
class FeatureMap:
    tokens: torch.Tensor  # (B, T, C)
    grid: tuple[int, int]
    stage_index: int

    @property
    def channels(self) -> int:
        return self.tokens.shape[-1]

    def as_grid(self) -> torch.Tensor:
        b, _, c = self.tokens.shape
        return self.tokens.reshape(b, *self.grid, c)


class WindowSet(NamedTuple):
    windows: torch.Tensor  # (B * nW, w*w, C)
    mask: torch.Tensor  # (nW, w*w, w*w) bool, True where attention is allowed
    grid: tuple[int, int]
    window: int
    shift: int


def _region_labels(rows: int, cols: int, window: int, shift: int) -> torch.Tensor:
    """Label every position of the shifted grid with the region it came from."""
    labels = torch.zeros(rows, cols, dtype=torch.long)
    if shift == 0:
        return labels
    bounds = lambda n: ((0, n - window), (n - window, n - shift), (n - shift, n))  # noqa: E731
    cnt = 0
    for r0, r1 in bounds(rows):
        for c0, c1 in bounds(cols):
            labels[r0:r1, c0:c1] = cnt
            cnt += 1
    return labels


def shifted_window_mask(rows: int, cols: int, window: int, shift: int) -> torch.Tensor:
    """Boolean (nW, w*w, w*w) mask; False marks pairs from different regions."""
    labels = _region_labels(rows, cols, window, shift)
    lw = labels.reshape(rows // window, window, cols // window, window)
    lw = lw.permute(0, 2, 1, 3).reshape(-1, window * window)
    return lw[:, :, None] == lw[:, None, :]


def window_partition(x: torch.Tensor, window: int, shift: int = 0) -> WindowSet:
    """Cyclically shift a (B, H, W, C) grid by -shift and tile it into windows."""
    b, h, w, c = x.shape
    if h % window or w % window:
        raise ConfigError(f"grid {h}x{w} not divisible by window {window}")
    if not 0 <= shift < window:
        raise ConfigError(f"shift {shift} outside [0, {window})")
    if shift:
        x = torch.roll(x, shifts=(-shift, -shift), dims=(1, 2))
    x = x.reshape(b, h // window, window, w // window, window, c)
    windows = x.permute(0, 1, 3, 2, 4, 5).reshape(-1, window * window, c)
    mask = shifted_window_mask(h, w, window, shift).to(x.device)
    return WindowSet(windows, mask, (h, w), window, shift)


def window_reverse(ws: WindowSet, windows: torch.Tensor | None = None) -> torch.Tensor:
    """Inverse of :func:`window_partition`; returns the unshifted (B, H, W, C) grid."""
    windows = ws.windows if windows is None else windows
    h, w = ws.grid
    win = ws.window
    n_w = (h // win) * (w // win)
    b = windows.shape[0] // n_w
    c = windows.shape[-1]
    x = windows.reshape(b, h // win, w // win, win, win, c)
    x = x.permute(0, 1, 3, 2, 4, 5).reshape(b, h, w, c)
    if ws.shift:
        x = torch.roll(x, shifts=(ws.shift, ws.shift), dims=(1, 2))
    return x


def relative_position_index(window: int) -> torch.Tensor:
    coords = torch.stack(torch.meshgrid(torch.arange(window), torch.arange(window), indexing="ij"))
    coords = coords.flatten(1)
    rel = coords[:, :, None] - coords[:, None, :]
    rel = rel.permute(1, 2, 0) + (window - 1)
    return rel[..., 0] * (2 * window - 1) + rel[..., 1]


def masked_softmax(logits: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
    """Softmax over the last axis where masked entries get exactly zero weight.

    Rows with no allowed entry produce all-zero weights instead of NaN.
    """
    if mask is None:
        return logits.softmax(dim=-1)
    logits = logits.masked_fill(~mask, torch.finfo(logits.dtype).min)
    attn = logits.softmax(dim=-1) * mask.to(logits.dtype)
    return attn


class WindowAttention(nn.Module):
    """Multi-head self-attention inside windows with a relative position bias."""

    def __init__(self, dim: int, window: int, num_heads: int, attn_drop: float = 0.0, proj_drop: float = 0.0):
        super().__init__()
        if dim % num_heads:
            raise ConfigError(f"{dim} channels not divisible by {num_heads} heads")
        self.dim = dim
        self.window = window
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.relative_position_bias_table = nn.Parameter(torch.zeros((2 * window - 1) ** 2, num_heads))
        self.register_buffer("relative_position_index", relative_position_index(window), persistent=False)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.attn_drop = nn.Dropout(attn_drop)
        self.proj_drop = nn.Dropout(proj_drop)

    def position_bias(self) -> torch.Tensor:
        n = self.window * self.window
        bias = self.relative_position_bias_table[self.relative_position_index.reshape(-1)]
        return bias.reshape(n, n, self.num_heads).permute(2, 0, 1)

    def attention_weights(self, ws: WindowSet) -> tuple[torch.Tensor, torch.Tensor]:
        """Return (attention (B*nW, heads, N, N), values (B*nW, heads, N, d))."""
        x = ws.windows
        bw, n, c = x.shape
        qkv = self.qkv(x).reshape(bw, n, 3, self.num_heads, c // self.num_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        logits = (q * self.scale) @ k.transpose(-2, -1) + self.position_bias().unsqueeze(0)
        n_w = ws.mask.shape[0]
        logits = logits.reshape(bw // n_w, n_w, self.num_heads, n, n)
        mask = ws.mask[None, :, None] if ws.shift or not bool(ws.mask.all()) else None
        attn = masked_softmax(logits, mask).reshape(bw, self.num_heads, n, n)
        return attn, v

    def forward(self, ws: WindowSet) -> WindowSet:
        attn, v = self.attention_weights(ws)
        bw, n, c = ws.windows.shape
        out = (self.attn_drop(attn) @ v).transpose(1, 2).reshape(bw, n, c)
        out = self.proj_drop(self.proj(out))
        return ws._replace(windows=out)


class DropPath(nn.Module):
    def __init__(self, p: float = 0.0):
        super().__init__()
        self.p = p

    def forward(self, x):
        if self.p == 0.0 or not self.training:
            return x
        keep = 1.0 - self.p
        shape = (x.shape[0],) + (1,) * (x.ndim - 1)
        return x * x.new_empty(shape).bernoulli_(keep) / keep


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int, drop: float = 0.0):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)
        self.drop = nn.Dropout(drop)

    def forward(self, x):
        return self.drop(self.fc2(self.drop(self.act(self.fc1(x)))))


class SwinBlock(nn.Module):
    """LN -> (S)W-MSA -> residual -> LN -> MLP -> residual."""

    def __init__(
        self,
        dim: int,
        num_heads: int,
        window: int,
        shift: int = 0,
        mlp_ratio: float = 4.0,
        drop: float = 0.0,
        drop_path: float = 0.0,
    ):
        super().__init__()
        self.window = window
        self.shift = shift
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, window, num_heads, attn_drop=drop, proj_drop=drop)
        self.drop_path = DropPath(drop_path)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio), drop)

    def forward(self, x: torch.Tensor, grid: tuple[int, int]) -> torch.Tensor:
        b, t, c = x.shape
        h = self.norm1(x).reshape(b, *grid, c)
        ws = self.attn(window_partition(h, self.window, self.shift))
        h = window_reverse(ws).reshape(b, t, c)
        x = x + self.drop_path(h)
        return x + self.drop_path(self.mlp(self.norm2(x)))


class PatchEmbed(nn.Module):
    """Non-overlapping patch projection (a strided convolution) followed by LN."""

    def __init__(self, patch_size: int, embed_dim: int, in_chans: int = 3):
        super().__init__()
        self.patch_size = patch_size
        self.proj = nn.Conv2d(in_chans, embed_dim, kernel_size=patch_size, stride=patch_size)
        self.norm = nn.LayerNorm(embed_dim)

    def forward(self, image: torch.Tensor) -> FeatureMap:
        # image: (B, 3, H, W)
        if image.ndim != 4 or image.shape[1] != self.proj.in_channels:
            raise ConfigError(f"expected (B, {self.proj.in_channels}, H, W) image, got {tuple(image.shape)}")
        if image.shape[2] % self.patch_size or image.shape[3] % self.patch_size:
            raise ConfigError(f"image {tuple(image.shape[2:])} not divisible by patch {self.patch_size}")
        x = self.proj(image)
        grid = (x.shape[2], x.shape[3])
        x = x.flatten(2).transpose(1, 2)
        return FeatureMap(self.norm(x), grid, 1)


class PatchMerging(nn.Module):
    """Concatenate each 2x2 neighbourhood (4C), normalize, project to 2C."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim)
        self.reduction = nn.Linear(4 * dim, 2 * dim, bias=False)

    def forward(self, fm: FeatureMap) -> FeatureMap:
        rows, cols = fm.grid
        if rows % 2 or cols % 2:
            raise ConfigError(f"cannot merge odd grid {rows}x{cols}")
        x = fm.as_grid()
        x = torch.cat([x[:, 0::2, 0::2], x[:, 1::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 1::2]], dim=-1)
        b = x.shape[0]
        x = x.reshape(b, -1, x.shape[-1])
        return FeatureMap(self.reduction(self.norm(x)), (rows // 2, cols // 2), fm.stage_index + 1)


class SwinStage(nn.Module):
    def __init__(self, cfg: SwinConfig, stage: int, drop_paths: list[float], downsample: bool):
        super().__init__()
        dim = cfg.stage_channels(stage)
        window = cfg.stage_window(stage)
        self.blocks = nn.ModuleList(
            SwinBlock(
                dim,
                cfg.num_heads[stage - 1],
                window,
                shift=0 if (i % 2 == 0 or window >= cfg.stage_grid(stage)) else window // 2,
                mlp_ratio=cfg.mlp_ratio,
                drop=cfg.dropout_rate,
                drop_path=drop_paths[i],
            )
            for i in range(cfg.depths[stage - 1])
        )
        self.downsample = PatchMerging(dim) if downsample else None

    def forward(self, fm: FeatureMap) -> FeatureMap:
        x = fm.tokens
        for blk in self.blocks:
            x = blk(x, fm.grid)
        return FeatureMap(x, fm.grid, fm.stage_index)


class SwinEncoder(nn.Module):
    """Four-stage Swin encoder returning every stage's feature map.

    The stage-4 output additionally passes through the final LayerNorm, as
    in the reference architecture.
    """

    def __init__(self, cfg: SwinConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = PatchEmbed(cfg.patch_size, cfg.embed_dim)
        self.pos_drop = nn.Dropout(cfg.dropout_rate)
        total = sum(cfg.depths)
        rates = [cfg.drop_path_rate * i / max(total - 1, 1) for i in range(total)]
        self.layers = nn.ModuleList()
        start = 0
        for s in range(1, 5):
            d = cfg.depths[s - 1]
            self.layers.append(SwinStage(cfg, s, rates[start : start + d], downsample=s < 4))
            start += d
        self.norm = nn.LayerNorm(cfg.stage_channels(4))

    def forward(self, image: torch.Tensor, up_to: int = 4) -> list[FeatureMap]:
        if image.shape[-1] != self.cfg.image_size or image.shape[-2] != self.cfg.image_size:
            raise ConfigError(f"expected {self.cfg.image_size}px input, got {tuple(image.shape[-2:])}")
        fm = self.patch_embed(image)
        fm = FeatureMap(self.pos_drop(fm.tokens), fm.grid, 1)
        outputs = []
        for s, layer in enumerate(self.layers, start=1):
            fm = layer(fm)
            if s == 4:
                fm = FeatureMap(self.norm(fm.tokens), fm.grid, 4)
            outputs.append(fm)
            if s == up_to:
                break
            fm = layer.downsample(fm)
        return outputs


def init_weights(module: nn.Module, seed: int) -> nn.Module:
    """Truncated-normal(0.02) weights, zero biases, unit LayerNorm; seeded."""
    gen = torch.Generator().manual_seed(seed)
    for name, sub in module.named_modules():
        if isinstance(sub, (nn.Linear, nn.Conv2d)):
            nn.init.trunc_normal_(sub.weight, std=0.02, a=-0.04, b=0.04, generator=gen)
            if sub.bias is not None:
                nn.init.zeros_(sub.bias)
        elif isinstance(sub, nn.LayerNorm):
            nn.init.ones_(sub.weight)
            nn.init.zeros_(sub.bias)
        elif isinstance(sub, WindowAttention):
            nn.init.trunc_normal_(sub.relative_position_bias_table, std=0.02, a=-0.04, b=0.04, generator=gen)
    return module


def patch_embed(image: torch.Tensor, encoder: SwinEncoder) -> FeatureMap:
    return encoder.patch_embed(image)


def encoder_forward(image: torch.Tensor, encoder: SwinEncoder) -> list[FeatureMap]:
    return encoder(image)
