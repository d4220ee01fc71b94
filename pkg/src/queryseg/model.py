"""Segmentation network: U-shaped pixel backbone plus a transformer decoder
whose object queries act as feature-space cluster centers.

The decoder updates queries by hard-assignment cross-attention: each voxel
routes its value vector to the single query with the highest affinity, and
the one-hot routing matrix is treated as a constant under backpropagation
(gradients reach the value path and the residual stream only). A final
two-stage head turns queries into a segmentation: soft cluster assignment
of voxels to queries, then per-query classification, combined into class
logits by matrix product.

Smoothness note: downsampling uses strided convolutions and activations are
GELU, so apart from the hard routing the whole forward map is C^1; the
finite-difference gradient suite relies on this.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ConfigError, ShapeError

__all__ = [
    "ModelConfig",
    "PixelFeatures",
    "BlockAttention",
    "ClusterOutputs",
    "PixelBackbone",
    "DecoderBlock",
    "ClusterSegmenter",
    "hard_assignment",
]


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    grid is (H, W, D); D == 1 selects the 2-D convolution path. Non-singleton
    grid dims must be divisible by 2**(levels - 1).
    """

    grid: tuple[int, int, int] = (64, 64, 1)
    num_classes: int = 5
    num_queries: int = 32
    partition: tuple[int, int, int] = (16, 4, 12)
    embed_dim: int = 64
    base_width: int = 16
    levels: int = 3
    block_strides: tuple[int, ...] = (4, 2)
    attn_heads: int = 8
    ffn_mult: int = 4

    def __post_init__(self):
        if len(self.grid) != 3 or min(self.grid) < 1:
            raise ConfigError(f"grid must be three positive dims, got {self.grid}")
        if sum(self.partition) != self.num_queries:
            raise ConfigError(
                f"partition {self.partition} must sum to num_queries={self.num_queries}"
            )
        if min(self.partition) < 0:
            raise ConfigError("partition counts must be non-negative")
        if self.num_classes < 3:
            raise ConfigError("need at least background, organ and one tumor class")
        if self.embed_dim % self.attn_heads:
            raise ConfigError("embed_dim must be divisible by attn_heads")
        if self.levels < 1:
            raise ConfigError("levels must be >= 1")
        factor = 2 ** (self.levels - 1)
        for size in self.grid:
            if size > 1 and size % factor:
                raise ConfigError(
                    f"grid dim {size} not divisible by 2**(levels-1)={factor}"
                )
        valid = {1} | {2**l for l in range(1, self.levels)}
        for s in self.block_strides:
            if s not in valid:
                raise ConfigError(f"block stride {s} not in feature pyramid {sorted(valid)}")

    @property
    def spatial_ndim(self) -> int:
        return 2 if self.grid[2] == 1 else 3

    def grid_at(self, stride: int) -> tuple[int, int, int]:
        return tuple(g // stride if g > 1 else 1 for g in self.grid)


@dataclass
class PixelFeatures:
    """Multi-scale backbone features plus the normalized full-resolution map."""

    per_scale: dict[int, Tensor]
    final: Tensor  # (B, C, *spatial), already instance-normalized

    @property
    def final_flat(self) -> Tensor:
        """Full-resolution features as (B, voxels, C) rows."""
        return self.final.flatten(2).transpose(1, 2)


@dataclass
class BlockAttention:
    """Cross-attention logits of one decoder block over its own grid."""

    logits: Tensor  # (B, N, voxels at this stride)
    grid: tuple[int, int, int]
    stride: int

    @property
    def hard(self) -> Tensor:
        """One-hot voxel-to-query routing actually used by the update."""
        return hard_assignment(self.logits)


@dataclass
class ClusterOutputs:
    """All per-volume decoder outputs needed for losses and scoring."""

    query_responses: Tensor  # R, (B, N, voxels)
    assignments: Tensor  # M = softmax over queries of R, (B, N, voxels)
    cluster_classes: Tensor  # (B, N, K) classification logits per query
    seg_logits: Tensor  # Z = cluster_classes^T @ M, (B, K, voxels)
    aux_attention: list[BlockAttention] = field(default_factory=list)
    grid: tuple[int, int, int] = (0, 0, 0)


def hard_assignment(logits: Tensor) -> Tensor:
    """One-hot argmax over the query axis, constant under autograd.

    Ties break toward the lowest query index (torch.argmax picks the first
    maximal entry), keeping runs bit-reproducible.
    """
    idx = logits.argmax(dim=-2)
    onehot = F.one_hot(idx, num_classes=logits.shape[-2])
    return onehot.transpose(-1, -2).to(logits.dtype)


def _conv_nd(ndim: int):
    return nn.Conv2d if ndim == 2 else nn.Conv3d


def _norm_nd(ndim: int, channels: int) -> nn.Module:
    cls = nn.InstanceNorm2d if ndim == 2 else nn.InstanceNorm3d
    return cls(channels, affine=True)


class _ConvBlock(nn.Module):
    """Two 3x3 conv + instance norm + GELU stages at constant resolution."""

    def __init__(self, ndim: int, in_ch: int, out_ch: int):
        super().__init__()
        conv = _conv_nd(ndim)
        self.stage = nn.Sequential(
            conv(in_ch, out_ch, kernel_size=3, padding=1),
            _norm_nd(ndim, out_ch),
            nn.GELU(),
            conv(out_ch, out_ch, kernel_size=3, padding=1),
            _norm_nd(ndim, out_ch),
            nn.GELU(),
        )

    def forward(self, x: Tensor) -> Tensor:
        return self.stage(x)


class _Down(nn.Module):
    """Strided-conv downsampling; stride per dim is 1 for singleton dims."""

    def __init__(self, ndim: int, in_ch: int, out_ch: int, stride: tuple[int, ...]):
        super().__init__()
        conv = _conv_nd(ndim)
        kernel = tuple(3 if s == 2 else 1 for s in stride)
        padding = tuple(1 if s == 2 else 0 for s in stride)
        self.stage = nn.Sequential(
            conv(in_ch, out_ch, kernel_size=kernel, stride=stride, padding=padding),
            _norm_nd(ndim, out_ch),
            nn.GELU(),
        )

    def forward(self, x: Tensor) -> Tensor:
        return self.stage(x)


class PixelBackbone(nn.Module):
    """Small U-shaped encoder-decoder with skip connections.

    Produces a feature map per pyramid stride and a full-resolution map
    with `embed_dim` channels, instance-normalized before use.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        ndim = cfg.spatial_ndim
        widths = [cfg.base_width * 2**l for l in range(cfg.levels)]
        self.widths = widths

        self.stem = _ConvBlock(ndim, 1, widths[0])
        downs, enc_blocks = [], []
        for l in range(1, cfg.levels):
            stride = self._level_stride(l)
            downs.append(_Down(ndim, widths[l - 1], widths[l], stride))
            enc_blocks.append(_ConvBlock(ndim, widths[l], widths[l]))
        self.downs = nn.ModuleList(downs)
        self.enc_blocks = nn.ModuleList(enc_blocks)

        dec_blocks = []
        for l in range(cfg.levels - 2, -1, -1):
            dec_blocks.append(_ConvBlock(ndim, widths[l + 1] + widths[l], widths[l]))
        self.dec_blocks = nn.ModuleList(dec_blocks)

        conv = _conv_nd(ndim)
        self.out_proj = conv(widths[0], cfg.embed_dim, kernel_size=1)
        self.final_norm = _norm_nd(ndim, cfg.embed_dim)

    def _level_stride(self, level: int) -> tuple[int, ...]:
        """Per-dim downsampling factor entering `level`; singleton dims stay."""
        sizes = self.cfg.grid_at(2 ** (level - 1))
        dims = sizes[: self.cfg.spatial_ndim] if self.cfg.spatial_ndim == 2 else sizes
        return tuple(2 if s > 1 else 1 for s in dims)

    def channels_at(self, stride: int) -> int:
        if stride == 1:
            return self.cfg.embed_dim
        return self.widths[int(math.log2(stride))]

    def forward(self, image: Tensor) -> PixelFeatures:
        cfg = self.cfg
        expected = cfg.grid[:2] if cfg.spatial_ndim == 2 else cfg.grid
        if image.dim() != 2 + len(expected) or tuple(image.shape[2:]) != tuple(expected):
            raise ShapeError(
                f"image spatial shape {tuple(image.shape[2:])} does not match grid {expected}"
            )

        skips = [self.stem(image)]
        x = skips[0]
        for down, block in zip(self.downs, self.enc_blocks):
            x = block(down(x))
            skips.append(x)

        per_scale = {2 ** (cfg.levels - 1): x}
        for i, block in enumerate(self.dec_blocks):
            level = cfg.levels - 2 - i
            up_factor = self._level_stride(level + 1)
            x = F.interpolate(x, scale_factor=tuple(float(f) for f in up_factor), mode="nearest")
            x = block(torch.cat([x, skips[level]], dim=1))
            if level > 0:
                per_scale[2**level] = x

        final = self.final_norm(self.out_proj(x))
        per_scale[1] = final
        return PixelFeatures(per_scale=per_scale, final=final)


class DecoderBlock(nn.Module):
    """One query-update block: hard-routing cross-attention, then query
    self-attention and a feed-forward stage, all pre-norm residual."""

    def __init__(self, cfg: ModelConfig, in_channels: int, stride: int):
        super().__init__()
        c = cfg.embed_dim
        self.stride = stride
        self.grid = cfg.grid_at(stride)
        self.query_norm = nn.LayerNorm(c)
        self.q_proj = nn.Linear(c, c, bias=False)
        self.k_proj = nn.Linear(in_channels, c, bias=False)
        self.v_proj = nn.Linear(in_channels, c, bias=False)
        self.self_norm = nn.LayerNorm(c)
        self.self_attn = nn.MultiheadAttention(c, cfg.attn_heads, batch_first=True)
        self.ffn_norm = nn.LayerNorm(c)
        self.ffn = nn.Sequential(
            nn.Linear(c, cfg.ffn_mult * c), nn.GELU(), nn.Linear(cfg.ffn_mult * c, c)
        )

    def forward(self, queries: Tensor, scale_features: Tensor) -> tuple[Tensor, BlockAttention]:
        """`scale_features` is (B, voxels, in_channels) for this block's grid."""
        if scale_features.shape[-1] != self.k_proj.in_features:
            raise ShapeError(
                f"expected {self.k_proj.in_features} feature channels, "
                f"got {scale_features.shape[-1]}"
            )
        q = self.q_proj(self.query_norm(queries))
        k = self.k_proj(scale_features)
        v = self.v_proj(scale_features)
        attn_logits = q @ k.transpose(1, 2)  # (B, N, voxels)
        routing = hard_assignment(attn_logits).detach()
        queries = queries + routing @ v

        y = self.self_norm(queries)
        queries = queries + self.self_attn(y, y, y, need_weights=False)[0]
        queries = queries + self.ffn(self.ffn_norm(queries))
        return queries, BlockAttention(logits=attn_logits, grid=self.grid, stride=self.stride)


class ClusterSegmenter(nn.Module):
    """Full model: backbone, query decoder, and the two-stage cluster head.

    Also carries a plain 1x1-conv segmentation head on the backbone output
    so the backbone can be pretrained alone before joint training.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = PixelBackbone(cfg)
        self.query_embed = nn.Parameter(
            torch.randn(cfg.num_queries, cfg.embed_dim) * 0.02
        )
        self.blocks = nn.ModuleList(
            DecoderBlock(cfg, self.backbone.channels_at(s), s) for s in cfg.block_strides
        )
        self.final_query_norm = nn.LayerNorm(cfg.embed_dim)
        self.class_mlp = nn.Sequential(
            nn.Linear(cfg.embed_dim, cfg.embed_dim),
            nn.GELU(),
            nn.Linear(cfg.embed_dim, cfg.num_classes),
        )
        conv = _conv_nd(cfg.spatial_ndim)
        self.plain_seg_head = conv(cfg.embed_dim, cfg.num_classes, kernel_size=1)

    def extract_features(self, image: Tensor) -> PixelFeatures:
        return self.backbone(image)

    def decode_queries(self, feats: PixelFeatures) -> tuple[Tensor, list[BlockAttention]]:
        """Run all decoder blocks; returns layer-normalized final queries."""
        bsz = feats.final.shape[0]
        queries = self.query_embed.unsqueeze(0).expand(bsz, -1, -1)
        aux = []
        for block in self.blocks:
            scale = feats.per_scale[block.stride]
            queries, attn = block(queries, scale.flatten(2).transpose(1, 2))
            aux.append(attn)
        return self.final_query_norm(queries), aux

    def cluster_assign(self, queries: Tensor, pixel_rows: Tensor) -> tuple[Tensor, Tensor]:
        """Affinity of every voxel to every query and its softmax over queries.

        `pixel_rows` is (B, voxels, C); returns (R, M), both (B, N, voxels)
        with M column-stochastic per voxel.
        """
        if pixel_rows.shape[-1] != queries.shape[-1]:
            raise ShapeError("pixel feature width must equal query embedding width")
        responses = queries @ pixel_rows.transpose(1, 2)
        return responses, torch.softmax(responses, dim=1)

    def classify_clusters(self, queries: Tensor) -> Tensor:
        """Per-query class logits, (B, N, K); softmax is left to the loss."""
        return self.class_mlp(queries)

    def forward(self, image: Tensor) -> ClusterOutputs:
        feats = self.extract_features(image)
        queries, aux = self.decode_queries(feats)
        responses, assignments = self.cluster_assign(queries, feats.final_flat)
        cluster_classes = self.classify_clusters(queries)
        seg_logits = cluster_classes.transpose(1, 2) @ assignments
        return ClusterOutputs(
            query_responses=responses,
            assignments=assignments,
            cluster_classes=cluster_classes,
            seg_logits=seg_logits,
            aux_attention=aux,
            grid=self.cfg.grid,
        )

    def forward_backbone(self, image: Tensor) -> Tensor:
        """Plain segmentation logits (B, K, voxels) for backbone pretraining."""
        feats = self.extract_features(image)
        return self.plain_seg_head(feats.final).flatten(2)

    def backbone_parameters(self):
        yield from self.backbone.parameters()
        yield from self.plain_seg_head.parameters()

    def decoder_parameters(self):
        for name, p in self.named_parameters():
            if not name.startswith(("backbone.", "plain_seg_head.")):
                yield p
