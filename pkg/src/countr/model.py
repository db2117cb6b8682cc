"""Counting network: ViT image encoder, exemplar ConvNet, cross-attention
feature interaction and a progressive up-sampling density decoder.

Tensor layout is channels-first (B, 3, H, W) for images; token grids are
(B, M, width) with M = (image_size / patch_size) ** 2 and no class token.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import IMAGENET_MEAN, IMAGENET_STD

CHECKPOINT_FORMAT = "countr-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    image_size: int = 384
    patch_size: int = 16
    encoder_depth: int = 12
    encoder_dim: int = 768
    encoder_heads: int = 12
    fim_depth: int = 2
    fim_dim: int = 512
    fim_heads: int = 16
    exemplar_dim: int = 512
    exemplar_resolution: int = 64
    decoder_blocks: int = 4
    decoder_dim: int = 256
    mlp_ratio: float = 4.0
    pixel_mean: tuple[float, float, float] = IMAGENET_MEAN
    pixel_std: tuple[float, float, float] = IMAGENET_STD

    def __post_init__(self):
        self.pixel_mean = tuple(self.pixel_mean)
        self.pixel_std = tuple(self.pixel_std)
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        if self.grid_size * 2 ** self.decoder_blocks != self.image_size:
            raise ValueError(
                f"{self.decoder_blocks} decoder blocks upsample a {self.grid_size}-wide grid to "
                f"{self.grid_size * 2 ** self.decoder_blocks}, not {self.image_size}")
        for dim, heads, name in ((self.encoder_dim, self.encoder_heads, "encoder"),
                                 (self.fim_dim, self.fim_heads, "fim")):
            if dim % heads:
                raise ValueError(f"{name}_dim must be divisible by {name}_heads")
        if self.exemplar_dim % 8:
            raise ValueError("exemplar_dim must be a multiple of 8")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid_size ** 2

    @classmethod
    def toy(cls, **overrides) -> "ModelConfig":
        """A few-thousand-parameter variant for CPU smoke runs."""
        base = dict(image_size=64, patch_size=16, encoder_depth=2, encoder_dim=32,
                    encoder_heads=4, fim_depth=2, fim_dim=32, fim_heads=4, exemplar_dim=32,
                    exemplar_resolution=16, decoder_blocks=4, decoder_dim=16)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown ModelConfig keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pixel_mean"] = list(self.pixel_mean)
        d["pixel_std"] = list(self.pixel_std)
        return d


def sincos_pos_embed_2d(dim: int, grid: int) -> np.ndarray:
    """Fixed 2-D sine-cosine position table of shape (grid * grid, dim), row-major."""
    if dim % 4:
        raise ValueError("embedding dim must be a multiple of 4")
    ys, xs = np.meshgrid(np.arange(grid, dtype=np.float64), np.arange(grid, dtype=np.float64),
                         indexing="ij")
    omega = 1.0 / 10000 ** (np.arange(dim // 4, dtype=np.float64) / (dim / 4))

    def enc(pos):
        out = np.outer(pos.reshape(-1), omega)
        return np.concatenate([np.sin(out), np.cos(out)], axis=1)

    return np.concatenate([enc(ys), enc(xs)], axis=1)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int, kv_dim: int | None = None):
        super().__init__()
        kv_dim = kv_dim or dim
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(kv_dim, dim)
        self.v = nn.Linear(kv_dim, dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, context=None):
        context = x if context is None else context
        B, N, C = x.shape
        h = self.heads

        def split(t):
            return t.reshape(B, t.shape[1], h, C // h).transpose(1, 2)

        q, k, v = split(self.q(x)), split(self.k(context)), split(self.v(context))
        attn = (q @ k.transpose(-2, -1)) * self.scale
        out = attn.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(B, N, C))


def _mlp(dim: int, ratio: float) -> nn.Sequential:
    hidden = int(dim * ratio)
    return nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))


class EncoderBlock(nn.Module):
    def __init__(self, dim, heads, mlp_ratio=4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = _mlp(dim, mlp_ratio)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class DecoderLayer(nn.Module):
    """Pre-norm transformer decoder layer: self-attention, cross-attention, MLP.

    The cross-attention key/value projections read ``memory`` at its own
    width, so exemplar features enter without a separate bridge layer.
    """

    def __init__(self, dim, heads, memory_dim=None, mlp_ratio=4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.cross_attn = Attention(dim, heads, kv_dim=memory_dim or dim)
        self.norm3 = nn.LayerNorm(dim)
        self.mlp = _mlp(dim, mlp_ratio)

    def forward(self, x, memory):
        x = x + self.self_attn(self.norm1(x))
        x = x + self.cross_attn(self.norm2(x), memory)
        return x + self.mlp(self.norm3(x))


class ViTEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = nn.Conv2d(3, cfg.encoder_dim, cfg.patch_size, stride=cfg.patch_size)
        pos = torch.from_numpy(sincos_pos_embed_2d(cfg.encoder_dim, cfg.grid_size)).float()
        self.register_buffer("pos_embed", pos[None], persistent=False)
        self.blocks = nn.ModuleList(
            EncoderBlock(cfg.encoder_dim, cfg.encoder_heads, cfg.mlp_ratio)
            for _ in range(cfg.encoder_depth))
        self.norm = nn.LayerNorm(cfg.encoder_dim)

    def patchify(self, images: torch.Tensor) -> torch.Tensor:
        """Project non-overlapping patches to tokens and add positions: (B, M, D)."""
        size = self.cfg.image_size
        if images.shape[-2:] != (size, size):
            raise ValueError(f"expected {size}x{size} images, got {tuple(images.shape[-2:])}")
        tokens = self.patch_embed(images).flatten(2).transpose(1, 2)
        return tokens + self.pos_embed.to(tokens.dtype)

    def forward(self, images: torch.Tensor, keep_index: torch.Tensor | None = None) -> torch.Tensor:
        """Encode images; with ``keep_index`` (B, M_keep) only those tokens are processed."""
        x = self.patchify(images)
        if keep_index is not None:
            x = torch.gather(x, 1, keep_index[..., None].expand(-1, -1, x.shape[-1]))
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)


class ExemplarEncoder(nn.Module):
    """Four stride-2 3x3 convolutions with ReLU, then global average pooling."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        out = cfg.exemplar_dim
        chans = [3, out // 8, out // 4, out // 2, out]
        layers = []
        for cin, cout in zip(chans[:-1], chans[1:]):
            layers += [nn.Conv2d(cin, cout, 3, stride=2, padding=1), nn.ReLU(inplace=True)]
        self.body = nn.Sequential(*layers)

    def forward(self, crops: torch.Tensor) -> torch.Tensor:
        return self.body(crops).mean(dim=(2, 3))


class DensityDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.grid = cfg.grid_size
        blocks = []
        cin = cfg.fim_dim
        for _ in range(cfg.decoder_blocks):
            blocks.append(nn.Sequential(nn.Conv2d(cin, cfg.decoder_dim, 3, padding=1),
                                        nn.ReLU(inplace=True)))
            cin = cfg.decoder_dim
        self.blocks = nn.ModuleList(blocks)
        self.regressor = nn.Conv2d(cfg.decoder_dim, 1, 1)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        B, M, C = tokens.shape
        g = math.isqrt(M)
        if g * g != M:
            raise ValueError(f"{M} tokens do not form a square grid")
        x = tokens.transpose(1, 2).reshape(B, C, g, g)
        for blk in self.blocks:
            x = F.interpolate(blk(x), scale_factor=2, mode="bilinear", align_corners=False)
        return self.regressor(x)[:, 0]


def crop_exemplars(image: torch.Tensor, boxes, resolution: int) -> torch.Tensor:
    """Cut (y1, x1, y2, x2) boxes out of a (3, H, W) image and resize to ``resolution``.

    Box edges are rounded to the nearest pixel; every crop is at least 1 px.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    H, W = image.shape[-2:]
    crops = []
    for y1, x1, y2, x2 in boxes:
        r0 = int(np.clip(np.floor(y1 + 0.5), 0, H - 1))
        c0 = int(np.clip(np.floor(x1 + 0.5), 0, W - 1))
        r1 = int(np.clip(np.floor(y2 + 0.5), r0 + 1, H))
        c1 = int(np.clip(np.floor(x2 + 0.5), c0 + 1, W))
        patch = image[None, :, r0:r1, c0:c1]
        crops.append(F.interpolate(patch, size=(resolution, resolution), mode="bilinear",
                                   align_corners=False))
    if not crops:
        return image.new_zeros((0, image.shape[0], resolution, resolution))
    return torch.cat(crops)


def _init_weights(module: nn.Module) -> None:
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


class CounTR(nn.Module):
    """Image + optional exemplar crops -> one-channel density map of the image size."""

    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        cfg = config or ModelConfig()
        self.config = cfg
        self.encoder = ViTEncoder(cfg)
        self.exemplar_encoder = ExemplarEncoder(cfg)
        self.spe_token = nn.Parameter(torch.zeros(1, 1, cfg.exemplar_dim))
        self.fim_embed = nn.Linear(cfg.encoder_dim, cfg.fim_dim)
        pos = torch.from_numpy(sincos_pos_embed_2d(cfg.fim_dim, cfg.grid_size)).float()
        self.register_buffer("fim_pos_embed", pos[None], persistent=False)
        self.fim_layers = nn.ModuleList(
            DecoderLayer(cfg.fim_dim, cfg.fim_heads, cfg.exemplar_dim, cfg.mlp_ratio)
            for _ in range(cfg.fim_depth))
        self.fim_norm = nn.LayerNorm(cfg.fim_dim)
        self.decoder = DensityDecoder(cfg)
        self.register_buffer("pixel_mean", torch.tensor(cfg.pixel_mean).view(1, 3, 1, 1),
                             persistent=False)
        self.register_buffer("pixel_std", torch.tensor(cfg.pixel_std).view(1, 3, 1, 1),
                             persistent=False)

        self.apply(_init_weights)
        nn.init.trunc_normal_(self.encoder.patch_embed.weight, std=0.02)
        nn.init.zeros_(self.encoder.patch_embed.bias)
        nn.init.trunc_normal_(self.spe_token, std=0.02)
        nn.init.zeros_(self.decoder.regressor.bias)

    def normalize(self, images: torch.Tensor) -> torch.Tensor:
        return (images - self.pixel_mean.to(images.dtype)) / self.pixel_std.to(images.dtype)

    def encode_image(self, images: torch.Tensor) -> torch.Tensor:
        return self.encoder(self.normalize(images))

    def encode_exemplars(self, exemplars: torch.Tensor) -> torch.Tensor:
        """(B, K, 3, r, r) crops -> (B, K, exemplar_dim); K must be >= 1."""
        B, K = exemplars.shape[:2]
        if K == 0:
            raise ValueError("no exemplars given; use the SPE token path")
        flat = self.normalize(exemplars.flatten(0, 1))
        return self.exemplar_encoder(flat).view(B, K, -1)

    def side_tokens(self, exemplars: torch.Tensor | None, batch: int) -> torch.Tensor:
        if exemplars is None or exemplars.shape[1] == 0:
            return self.spe_token.expand(batch, -1, -1)
        return self.encode_exemplars(exemplars)

    def interact(self, image_tokens: torch.Tensor, side: torch.Tensor) -> torch.Tensor:
        """Image tokens query exemplar (or SPE) tokens: (B, M, D) -> (B, M, fim_dim)."""
        cfg = self.config
        if image_tokens.shape[-1] != cfg.encoder_dim:
            raise ValueError(f"image tokens have width {image_tokens.shape[-1]}, "
                             f"expected {cfg.encoder_dim}")
        if side.shape[-1] != cfg.exemplar_dim:
            raise ValueError(f"side tokens have width {side.shape[-1]}, expected {cfg.exemplar_dim}")
        x = self.fim_embed(image_tokens) + self.fim_pos_embed.to(image_tokens.dtype)
        for layer in self.fim_layers:
            x = layer(x, side)
        return self.fim_norm(x)

    def forward(self, images: torch.Tensor, exemplars: torch.Tensor | None = None) -> torch.Tensor:
        """images (B, 3, S, S) in [0, 1]; exemplars (B, K, 3, r, r) or None -> (B, S, S)."""
        tokens = self.encode_image(images)
        side = self.side_tokens(exemplars, images.shape[0])
        return self.decoder(self.interact(tokens, side))


def save_checkpoint(path, model: nn.Module, config: ModelConfig, kind: str = "countr",
                    **extra) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "model_config": config.to_dict(),
        "state_dict": model.state_dict(),
    }
    payload.update(extra)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def read_checkpoint(path, kind: str | None = None) -> dict:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a countr checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    if kind is not None and payload.get("kind") != kind:
        raise CheckpointError(f"{path}: expected a {kind!r} checkpoint, got {payload.get('kind')!r}")
    return payload


def check_config_compatible(stored: dict, expected: ModelConfig, keys=None) -> None:
    want = expected.to_dict()
    keys = keys or want.keys()
    diff = {k: (stored.get(k), want[k]) for k in keys if stored.get(k) != want[k]}
    if diff:
        raise CheckpointError(f"checkpoint config mismatch (stored, expected): {diff}")


def load_model(path, config: ModelConfig | None = None) -> tuple[CounTR, dict]:
    """Load a counting checkpoint; if ``config`` is given it must match the stored one."""
    payload = read_checkpoint(path, kind="countr")
    stored = ModelConfig.from_dict(payload["model_config"])
    if config is not None:
        check_config_compatible(payload["model_config"], config)
    model = CounTR(stored)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload
