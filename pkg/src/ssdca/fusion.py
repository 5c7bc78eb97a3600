"""Dual cross-attention fusion, classification head and the three pair models."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ConfigError, ModelConfig
from .swin import FeatureMap, SwinEncoder, init_weights, masked_softmax


@dataclass
class PairLogit:
    logit: torch.Tensor

    @property
    def probability(self) -> torch.Tensor:
        return torch.sigmoid(self.logit)


class DualCrossAttention(nn.Module):
    """Bidirectional cross-attention with shared projections and shared LayerNorm.

    Each branch queries the other branch's keys/values; the attended result
    is added back to the querying features and layer-normalized.
    """

    def __init__(self, dim: int, num_heads: int = 8, out_proj: bool = True):
        super().__init__()
        if dim % num_heads:
            raise ConfigError(f"{dim} channels not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.w_q = nn.Linear(dim, dim, bias=False)
        self.w_k = nn.Linear(dim, dim, bias=False)
        self.w_v = nn.Linear(dim, dim, bias=False)
        self.proj = nn.Linear(dim, dim) if out_proj else nn.Identity()
        self.norm = nn.LayerNorm(dim)

    def _heads(self, x: torch.Tensor) -> torch.Tensor:
        b, t, _ = x.shape
        return x.reshape(b, t, self.num_heads, self.head_dim).transpose(1, 2)

    def cross_attend(
        self, query_src: torch.Tensor, kv_src: torch.Tensor, return_weights: bool = False
    ) -> tuple[torch.Tensor, torch.Tensor | None]:
        """CA(query_src) against kv_src; weights are (B, heads, Tq, Tk)."""
        b, t, c = query_src.shape
        q = self._heads(self.w_q(query_src))
        k = self._heads(self.w_k(kv_src))
        v = self._heads(self.w_v(kv_src))
        if return_weights:
            attn = masked_softmax((q @ k.transpose(-2, -1)) * self.head_dim**-0.5, None)
            out = attn @ v
        else:
            attn = None
            out = F.scaled_dot_product_attention(q, k, v)
        out = out.transpose(1, 2).reshape(b, t, c)
        return self.proj(out), attn

    def forward(self, f_pre: torch.Tensor, f_post: torch.Tensor, return_weights: bool = False):
        if f_pre.shape != f_post.shape:
            raise ValueError(f"DCA inputs differ in shape: {tuple(f_pre.shape)} vs {tuple(f_post.shape)}")
        ca_pre, a_pre = self.cross_attend(f_pre, f_post, return_weights)
        ca_post, a_post = self.cross_attend(f_post, f_pre, return_weights)
        h_pre = self.norm(f_pre + ca_pre)
        h_post = self.norm(f_post + ca_post)
        if return_weights:
            return h_pre, h_post, (a_pre, a_post)
        return h_pre, h_post


class ClassificationHead(nn.Module):
    """Linear -> ReLU -> Dropout -> Linear producing one regrowth logit."""

    def __init__(self, in_dim: int, hidden: int = 256, dropout: float = 0.2):
        super().__init__()
        self.in_dim = in_dim
        self.fc1 = nn.Linear(in_dim, hidden)
        self.drop = nn.Dropout(dropout)
        self.fc2 = nn.Linear(hidden, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"head expects width {self.in_dim}, got {x.shape[-1]}")
        return self.fc2(self.drop(F.relu(self.fc1(x)))).squeeze(-1)


def gap(tokens: torch.Tensor) -> torch.Tensor:
    return tokens.mean(dim=1)


def gap_concat_head(h_pre: torch.Tensor, h_post: torch.Tensor, head: ClassificationHead) -> PairLogit:
    if h_pre.shape[-1] != h_post.shape[-1]:
        raise ValueError("pre/post channel counts differ")
    return PairLogit(head(torch.cat([gap(h_pre), gap(h_post)], dim=-1)))


class PairModel(nn.Module):
    """Common interface: ``forward(pre, post) -> logits`` over (B, 3, H, W) batches."""

    variant = ""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = SwinEncoder(cfg.encoder)

    @property
    def fusion_channels(self) -> int:
        return self.cfg.encoder.stage_channels(self.cfg.fusion_stage)

    def stage_features(self, image: torch.Tensor) -> FeatureMap:
        return self.encoder(image, up_to=self.cfg.fusion_stage)[-1]

    def embed_from_features(self, f_pre: torch.Tensor, f_post: torch.Tensor) -> torch.Tensor:
        """Head input computed from fusion-stage token tensors (B, T, C)."""
        raise NotImplementedError

    def embed(self, pre: torch.Tensor, post: torch.Tensor) -> torch.Tensor:
        """Vector entering the classification head."""
        return self.embed_from_features(self.stage_features(pre).tokens, self.stage_features(post).tokens)

    def forward(self, pre: torch.Tensor, post: torch.Tensor) -> torch.Tensor:
        return self.head(self.embed(pre, post))


class SSDCA(PairModel):
    variant = "ssdca"

    def __init__(self, cfg: ModelConfig):
        super().__init__(cfg)
        self.dca = DualCrossAttention(self.fusion_channels, cfg.dca_heads, cfg.dca_out_proj)
        self.head = ClassificationHead(2 * self.fusion_channels, cfg.head_hidden, cfg.head_dropout)

    def fused(self, pre, post, return_weights: bool = False):
        f_pre = self.stage_features(pre)
        f_post = self.stage_features(post)
        return self.dca(f_pre.tokens, f_post.tokens, return_weights=return_weights)

    def embed_from_features(self, f_pre, f_post):
        h_pre, h_post = self.dca(f_pre, f_post)
        return torch.cat([gap(h_pre), gap(h_post)], dim=-1)


class SSFC(PairModel):
    variant = "ssfc"

    def __init__(self, cfg: ModelConfig):
        super().__init__(cfg)
        self.head = ClassificationHead(2 * self.fusion_channels, cfg.head_hidden, cfg.head_dropout)

    def embed_from_features(self, f_pre, f_post):
        return torch.cat([gap(f_pre), gap(f_post)], dim=-1)


class SingleImage(PairModel):
    """Non-Siamese baseline: one encoder pass over a single timepoint.

    ``cfg.single_image_source`` picks which image of a pair is classified
    (restaging image by default).
    """

    variant = "single"

    def __init__(self, cfg: ModelConfig):
        super().__init__(cfg)
        self.head = ClassificationHead(self.fusion_channels, cfg.head_hidden, cfg.head_dropout)

    def embed_image(self, image):
        return gap(self.stage_features(image).tokens)

    def embed_from_features(self, f_pre, f_post):
        return gap(f_pre if self.cfg.single_image_source == "pre" else f_post)

    def embed(self, pre, post):
        return self.embed_image(pre if self.cfg.single_image_source == "pre" else post)


VARIANTS = {"ssdca": SSDCA, "ssfc": SSFC, "single": SingleImage}


def build_model(cfg: ModelConfig, seed: int | None = None) -> PairModel:
    """Construct a model and apply the seeded random initialization.

    Cross-attention projections use Xavier-uniform (the usual attention
    init); everything else follows :func:`init_weights`.
    """
    seed = cfg.seed if seed is None else seed
    model = VARIANTS[cfg.variant](cfg)
    init_weights(model, seed)
    if isinstance(model, SSDCA):
        gen = torch.Generator().manual_seed(seed + 1)
        for lin in (model.dca.w_q, model.dca.w_k, model.dca.w_v):
            nn.init.xavier_uniform_(lin.weight, generator=gen)
    return model


def ssdca_forward(pre, post, model: SSDCA) -> PairLogit:
    return PairLogit(model(pre, post))


def ssfc_forward(pre, post, model: SSFC) -> PairLogit:
    return PairLogit(model(pre, post))


def single_image_forward(image, model: SingleImage) -> PairLogit:
    return PairLogit(model.head(model.embed_image(image)))


def dual_cross_attention(f_pre: torch.Tensor, f_post: torch.Tensor, dca: DualCrossAttention):
    return dca(f_pre, f_post)
