"""Masked-autoencoder pre-training of the image encoder and supervised
density-map fine-tuning of the full counting model."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn

from .augment import augment_sample
from .data import DensityMap, ImageSample, generate_density_map, rescale_sample, to_tensor
from .model import (CounTR, DecoderLayer, ModelConfig, ViTEncoder, check_config_compatible,
                    crop_exemplars, read_checkpoint, save_checkpoint, sincos_pos_embed_2d,
                    _init_weights)
from .mosaic import ANY_SHOT, MosaicConfig, synthesize
from .seeding import SeedStreams

logger = logging.getLogger(__name__)

ENCODER_KEYS = ("image_size", "patch_size", "encoder_depth", "encoder_dim", "encoder_heads",
                "mlp_ratio", "pixel_mean", "pixel_std")


@dataclass
class PretrainConfig:
    mask_ratio: float = 0.5
    mae_decoder_depth: int = 8
    mae_decoder_dim: int = 512
    mae_decoder_heads: int = 16
    epochs: int = 300
    learning_rate: float = 5e-6
    batch_size: int = 16
    weight_decay: float = 0.05

    def __post_init__(self):
        if not 0 < self.mask_ratio < 1:
            raise ValueError(f"mask_ratio must be in (0, 1), got {self.mask_ratio}")


@dataclass
class TrainConfig:
    loss_scale: float = 60.0
    nonobject_drop: float = 0.2
    learning_rate: float = 1e-5
    batch_size: int = 8
    weight_decay: float = 0.05
    epochs: int = 200
    sigma: float = 4.0
    shot_choices: tuple[int, ...] = (0, 1, 2, 3)
    augment_noise: bool = True
    augment_blur: bool = True
    augment_flip: bool = True
    augment_color: bool = True
    augment_geometric: bool = True
    mosaic_prob: float = 0.25

    def __post_init__(self):
        self.shot_choices = tuple(int(k) for k in self.shot_choices)
        if not 0 <= self.nonobject_drop < 1:
            raise ValueError(f"nonobject_drop must be in [0, 1), got {self.nonobject_drop}")
        if not self.shot_choices or any(k not in ANY_SHOT for k in self.shot_choices):
            raise ValueError(f"shot_choices must be a non-empty subset of 0..3, got {self.shot_choices}")
        if not 0 <= self.mosaic_prob <= 1:
            raise ValueError("mosaic_prob must be in [0, 1]")

    @property
    def augment_flags(self) -> dict:
        return dict(noise=self.augment_noise, blur=self.augment_blur, flip=self.augment_flip,
                    color=self.augment_color, geometric=self.augment_geometric)


# ---------------------------------------------------------------- MAE stage

def random_mask(tokens: torch.Tensor, ratio: float, seed=None):
    """Keep a uniformly random ``floor(M * (1 - ratio))`` tokens per image.

    ``tokens`` is (M, D) or (B, M, D); ``seed`` is an int or a torch.Generator.
    Returns (visible, keep_index, mask_index) with indices sorted ascending.
    """
    if not 0 < ratio < 1:
        raise ValueError(f"ratio must be in (0, 1), got {ratio}")
    single = tokens.dim() == 2
    x = tokens[None] if single else tokens
    B, M, D = x.shape
    n_keep = int(math.floor(M * (1 - ratio)))
    gen = seed if isinstance(seed, torch.Generator) else torch.Generator().manual_seed(int(seed or 0))
    order = torch.argsort(torch.rand(B, M, generator=gen), dim=1)
    keep = order[:, :n_keep].sort(dim=1).values.to(x.device)
    masked = order[:, n_keep:].sort(dim=1).values.to(x.device)
    visible = torch.gather(x, 1, keep[..., None].expand(-1, -1, D))
    if single:
        return visible[0], keep[0], masked[0]
    return visible, keep, masked


def patchify_pixels(images: torch.Tensor, patch: int) -> torch.Tensor:
    """(B, 3, H, W) -> (B, M, patch * patch * 3) in row-major patch order."""
    B, C, H, W = images.shape
    h, w = H // patch, W // patch
    x = images.reshape(B, C, h, patch, w, patch)
    return x.permute(0, 2, 4, 3, 5, 1).reshape(B, h * w, patch * patch * C)


def unpatchify_pixels(patches: torch.Tensor, patch: int, grid: int) -> torch.Tensor:
    B = patches.shape[0]
    x = patches.reshape(B, grid, grid, patch, patch, 3)
    return x.permute(0, 5, 1, 3, 2, 4).reshape(B, 3, grid * patch, grid * patch)


def mae_loss(pred: torch.Tensor, target: torch.Tensor, mask_index: torch.Tensor) -> torch.Tensor:
    """Pixel MSE averaged over the masked patches only."""
    err = ((pred - target) ** 2).mean(dim=-1)
    picked = torch.gather(err, 1, mask_index)
    return picked.mean()


class MAEPretrainer(nn.Module):
    """Image encoder plus a light decoder that reconstructs patches.

    Decoder queries are a learnable mask token plus the position encoding at
    every grid location; the visible encoder tokens are the cross-attention
    memory.
    """

    def __init__(self, model_cfg: ModelConfig, cfg: PretrainConfig, encoder: ViTEncoder | None = None):
        super().__init__()
        self.model_cfg = model_cfg
        self.cfg = cfg
        dim = cfg.mae_decoder_dim
        self.encoder = encoder if encoder is not None else ViTEncoder(model_cfg)
        self.enc_to_dec = nn.Linear(model_cfg.encoder_dim, dim)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, dim))
        pos = torch.from_numpy(sincos_pos_embed_2d(dim, model_cfg.grid_size)).float()
        self.register_buffer("dec_pos_embed", pos[None], persistent=False)
        self.layers = nn.ModuleList(DecoderLayer(dim, cfg.mae_decoder_heads, dim, model_cfg.mlp_ratio)
                                    for _ in range(cfg.mae_decoder_depth))
        self.norm = nn.LayerNorm(dim)
        self.head = nn.Linear(dim, model_cfg.patch_size ** 2 * 3)
        self.register_buffer("pixel_mean", torch.tensor(model_cfg.pixel_mean).view(1, 3, 1, 1),
                             persistent=False)
        self.register_buffer("pixel_std", torch.tensor(model_cfg.pixel_std).view(1, 3, 1, 1),
                             persistent=False)
        for m in (self.enc_to_dec, self.layers, self.norm, self.head):
            m.apply(_init_weights)
        if encoder is None:
            self.encoder.apply(_init_weights)
            nn.init.trunc_normal_(self.encoder.patch_embed.weight, std=0.02)
            nn.init.zeros_(self.encoder.patch_embed.bias)
        nn.init.trunc_normal_(self.mask_token, std=0.02)

    def forward(self, images: torch.Tensor, keep_index: torch.Tensor) -> torch.Tensor:
        """Predict every patch's pixels from the visible ones: (B, M, p*p*3)."""
        x = (images - self.pixel_mean.to(images.dtype)) / self.pixel_std.to(images.dtype)
        latent = self.encoder(x, keep_index)
        pos = self.dec_pos_embed.to(latent.dtype)
        vis_pos = torch.gather(pos.expand(latent.shape[0], -1, -1), 1,
                               keep_index[..., None].expand(-1, -1, pos.shape[-1]))
        memory = self.enc_to_dec(latent) + vis_pos
        q = self.mask_token.to(latent.dtype) + pos
        q = q.expand(latent.shape[0], -1, -1)
        for layer in self.layers:
            q = layer(q, memory)
        return self.head(self.norm(q))


def mae_step(pretrainer: MAEPretrainer, images: torch.Tensor, cfg: PretrainConfig, seed=None):
    """Masked reconstruction loss for a batch of (B, 3, S, S) images in [0, 1]."""
    M = pretrainer.model_cfg.num_tokens
    dummy = torch.zeros(images.shape[0], M, 1)
    _, keep, masked = random_mask(dummy, cfg.mask_ratio, seed)
    pred = pretrainer(images, keep.to(images.device))
    target = patchify_pixels(images, pretrainer.model_cfg.patch_size)
    return mae_loss(pred, target, masked.to(images.device))


# ---------------------------------------------------------- counting stage

def counting_loss(pred, gt, cfg: TrainConfig | None = None, seed=None, *, loss_scale=None,
                  nonobject_drop=None) -> torch.Tensor:
    """Scaled per-pixel squared error with random dropping of empty pixels.

    Pixels where the target is exactly zero are dropped with probability
    ``nonobject_drop``; the sum is still divided by H * W and multiplied by
    ``loss_scale``. Batched inputs (B, H, W) are averaged over the batch.
    """
    cfg = cfg or TrainConfig()
    scale = cfg.loss_scale if loss_scale is None else loss_scale
    drop = cfg.nonobject_drop if nonobject_drop is None else nonobject_drop
    if isinstance(pred, DensityMap):
        pred = torch.as_tensor(pred.grid)
    if isinstance(gt, DensityMap):
        gt = torch.as_tensor(gt.grid)
    gt = gt.to(pred.dtype)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {tuple(pred.shape)} and target {tuple(gt.shape)} differ")
    sq = (pred - gt) ** 2
    if drop > 0:
        gen = seed if isinstance(seed, torch.Generator) else torch.Generator().manual_seed(int(seed or 0))
        u = torch.rand(gt.shape, generator=gen, dtype=torch.float64).to(gt.device)
        sq = torch.where((gt == 0) & (u < drop), torch.zeros_like(sq), sq)
    H, W = gt.shape[-2:]
    per_image = sq.reshape(-1, H * W).sum(dim=1) / (H * W)
    return per_image.mean() * scale


@dataclass
class TrainItem:
    sample: ImageSample
    usable_shots: frozenset = ANY_SHOT

    def allows(self, k: int) -> bool:
        return k in self.usable_shots and k <= self.sample.num_exemplars


def square_view(sample: ImageSample, size: int, rng: np.random.Generator | None):
    """Rescale so the short side is ``size``; return (size x size window, full rescaled sample).

    The window is random when ``rng`` is given, centred otherwise.
    """
    s = size / min(sample.height, sample.width)
    H, W = max(size, round(sample.height * s)), max(size, round(sample.width * s))
    full = rescale_sample(sample, H, W)
    if (H, W) == (size, size):
        return full, full
    y0 = int(rng.integers(0, H - size + 1)) if rng is not None else (H - size) // 2
    x0 = int(rng.integers(0, W - size + 1)) if rng is not None else (W - size) // 2
    d = full.dots
    inside = (d[:, 0] >= x0) & (d[:, 0] < x0 + size) & (d[:, 1] >= y0) & (d[:, 1] < y0 + size)
    window = full.replace(
        image=full.pixels[y0:y0 + size, x0:x0 + size],
        dots=d[inside] - np.array([x0, y0]),
        boxes=np.clip(full.boxes - np.array([y0, x0, y0, x0]), 0, size),
    )
    return window, full


def prepare_example(sample: ImageSample, model_cfg: ModelConfig, cfg: TrainConfig, shots: int,
                    rng: np.random.Generator | None = None, augment: bool = True):
    """(image (3,S,S), exemplars (k,3,r,r), gt density (S,S)) tensors for one sample.

    Exemplars are cut from the rescaled full image before the training window
    is taken, so boxes outside the window still serve as shots.
    """
    if augment and rng is not None:
        sample = augment_sample(sample, rng, **cfg.augment_flags)
    S = model_cfg.image_size
    window, full = square_view(sample, S, rng)
    full_img = to_tensor(full.pixels)
    exemplars = crop_exemplars(full_img, full.boxes[:shots], model_cfg.exemplar_resolution)
    gt = generate_density_map(window.dots, S, S, cfg.sigma).grid
    return to_tensor(window.pixels), exemplars, torch.from_numpy(gt).float()


def collate(examples):
    images = torch.stack([e[0] for e in examples])
    exemplars = torch.stack([e[1] for e in examples])
    gts = torch.stack([e[2] for e in examples])
    return images, exemplars, gts


def make_optimizer(params, lr: float, weight_decay: float) -> torch.optim.Optimizer:
    return torch.optim.AdamW(params, lr=lr, weight_decay=weight_decay)


def finetune_step(model: CounTR, optimizer: torch.optim.Optimizer, batch, cfg: TrainConfig,
                  seed=None) -> float:
    """One gradient update on (images, exemplars, gt densities); returns the batch loss."""
    images, exemplars, gts = batch
    model.train()
    pred = model(images, exemplars if exemplars.shape[1] else None)
    loss = counting_loss(pred, gts, cfg, seed)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def _as_items(samples) -> list[TrainItem]:
    return [s if isinstance(s, TrainItem) else TrainItem(s, frozenset(range(min(3, s.num_exemplars) + 1)))
            for s in samples]


def _default_steps(n: int, batch: int, epochs: int) -> int:
    return max(1, epochs * math.ceil(n / batch))


def _log(log, step, loss, lr):
    record = {"step": step, "loss": loss, "lr": lr}
    if log is None:
        logger.info("step %d loss %.6f", step, loss)
    elif callable(log):
        log(record)
    else:
        log.write(json.dumps(record) + "\n")
        log.flush()


def pretrain(samples: Sequence[ImageSample], model_cfg: ModelConfig, cfg: PretrainConfig,
             steps: int | None = None, seed: int = 0, log=None, resume=None,
             checkpoint: str | None = None) -> MAEPretrainer:
    """Run masked-autoencoder pre-training and optionally write a checkpoint."""
    if not samples:
        raise ValueError("no training samples")
    streams = SeedStreams(seed)
    torch.manual_seed(streams.int_seed("init"))
    net = MAEPretrainer(model_cfg, cfg)
    opt = make_optimizer(net.parameters(), cfg.learning_rate, cfg.weight_decay)
    start = 0
    if resume is not None:
        payload = read_checkpoint(resume, kind="mae")
        check_config_compatible(payload["model_config"], model_cfg)
        net.load_state_dict(payload["state_dict"])
        opt.load_state_dict(payload["optimizer"])
        start = payload.get("step", 0)
    steps = steps if steps is not None else _default_steps(len(samples), cfg.batch_size, cfg.epochs)
    data_rng = streams.numpy("data")
    mask_gen = streams.torch("mask")
    net.train()
    S = model_cfg.image_size
    for step in range(start, start + steps):
        idx = data_rng.integers(len(samples), size=min(cfg.batch_size, len(samples)))
        images = []
        for i in idx:
            window, _ = square_view(samples[int(i)], S, data_rng)
            images.append(to_tensor(window.pixels))
        loss = mae_step(net, torch.stack(images), cfg, mask_gen)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        _log(log, step + 1, float(loss.detach()), cfg.learning_rate)
    if checkpoint:
        save_checkpoint(checkpoint, net, model_cfg, kind="mae", optimizer=opt.state_dict(),
                        step=start + steps, pretrain_config=vars(cfg))
    return net


def load_pretrained_encoder(model: CounTR, path) -> None:
    """Copy the encoder weights of an MAE checkpoint into ``model``."""
    payload = read_checkpoint(path, kind="mae")
    check_config_compatible(payload["model_config"], model.config, ENCODER_KEYS)
    enc = {k[len("encoder."):]: v for k, v in payload["state_dict"].items() if k.startswith("encoder.")}
    model.encoder.load_state_dict(enc)


def draw_batch(items: Sequence[TrainItem], cfg: TrainConfig, rng: np.random.Generator):
    """Pick a shot count, then batch members that can supply that many exemplars."""
    for _ in range(100):
        k = int(rng.choice(cfg.shot_choices))
        pool = [i for i, it in enumerate(items) if it.allows(k)]
        if pool:
            picks = rng.choice(pool, size=min(cfg.batch_size, len(pool)), replace=False)
            return k, [items[int(i)] for i in picks]
    raise ValueError(f"no training item supports any of the shot counts {cfg.shot_choices}")


def finetune(samples, model_cfg: ModelConfig, cfg: TrainConfig, steps: int | None = None,
             seed: int = 0, init_checkpoint=None, init_encoder: dict | None = None, mosaic_cfg: MosaicConfig | None = None,
             log=None, resume=None, checkpoint: str | None = None,
             callback: Callable[[int, CounTR], None] | None = None,
             checkpoint_extra: dict | None = None) -> CounTR:
    """Supervised fine-tuning.

    The image encoder starts from an MAE checkpoint path (``init_checkpoint``)
    or an encoder state dict (``init_encoder``); everything else is random.
    """
    items = _as_items(samples)
    if not items:
        raise ValueError("no training samples")
    streams = SeedStreams(seed)
    torch.manual_seed(streams.int_seed("init"))
    model = CounTR(model_cfg)
    if init_checkpoint is not None:
        load_pretrained_encoder(model, init_checkpoint)
    if init_encoder is not None:
        model.encoder.load_state_dict(init_encoder)
    opt = make_optimizer(model.parameters(), cfg.learning_rate, cfg.weight_decay)
    start = 0
    if resume is not None:
        payload = read_checkpoint(resume, kind="countr")
        check_config_compatible(payload["model_config"], model_cfg)
        model.load_state_dict(payload["state_dict"])
        if "optimizer" in payload:
            opt.load_state_dict(payload["optimizer"])
        start = payload.get("step", 0)
    steps = steps if steps is not None else _default_steps(len(items), cfg.batch_size, cfg.epochs)
    data_rng = streams.numpy("data")
    aug_rng = streams.numpy("augment")
    mosaic_rng = streams.numpy("mosaic")
    drop_gen = streams.torch("drop")
    pool = [it.sample for it in items]
    for step in range(start, start + steps):
        k, batch_items = draw_batch(items, cfg, data_rng)
        examples = []
        for it in batch_items:
            sample = it.sample
            if mosaic_cfg is not None and mosaic_rng.random() < cfg.mosaic_prob:
                sample = _mosaic_for(pool, k, mosaic_cfg, mosaic_rng) or sample
            examples.append(prepare_example(sample, model_cfg, cfg, k, aug_rng))
        loss = finetune_step(model, opt, collate(examples), cfg, drop_gen)
        _log(log, step + 1, loss, cfg.learning_rate)
        if callback is not None:
            callback(step + 1, model)
    if checkpoint:
        save_checkpoint(checkpoint, model, model_cfg, kind="countr", optimizer=opt.state_dict(),
                        step=start + steps, train_config=vars(cfg), **(checkpoint_extra or {}))
    model.eval()
    return model


def _mosaic_for(pool, shots, mosaic_cfg, rng):
    """A fresh mosaic usable at ``shots`` shots, or None when synthesis fails."""
    cfg = MosaicConfig(**{**vars(mosaic_cfg), "rng_seed": int(rng.integers(2 ** 31))})
    results, _ = synthesize(pool, 1, cfg, "B" if shots == 0 else "auto")
    if results and shots in results[0].usable_shots and results[0].sample.num_exemplars >= shots:
        return results[0].sample
    return None
