"""Velocity-prediction transformer over patchified video latents.

The latent is pixel space under a lossless patch rearrangement (no VAE):
a [T, H, W, 3] video becomes [L_Z, D] patch tokens with
L_Z = (T/pt)(H/ph)(W/pw) and D = pt*ph*pw*3. The backbone projects D -> C,
runs stacked self-attention / cross-attention / MLP blocks with additive
timestep modulation, and projects back to D. Sampling is forward Euler on
x' = v(x, t, cond) from t=0 (noise) to t=1 (data).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nm
from .condition import (ConceptEmbeddingTable, ConditioningSequence,
                        ReferenceEncoder, TextEncoder, build_conditioning)
from .layers import (Layer, LayerNorm, Linear, Mlp, MultiHeadAttention, gelu,
                     sinusoidal_table)
from .numerics import Tensor
from .prompt import Vocabulary


@dataclass
class ModelConfig:
    layers: int = 4
    heads: int = 4
    channels: int = 64
    mlp_ratio: int = 4
    frames: int = 8
    height: int = 32
    width: int = 48
    video_channels: int = 3
    patch_t: int = 1
    patch_h: int = 2
    patch_w: int = 2
    text_len: int = 24
    vision_grid: int = 2            # N = grid^2 tokens per reference
    ref_size: int = 16
    r_max: int = 4
    dtype: str = "float64"

    def __post_init__(self):
        if self.channels % self.heads != 0:
            raise ValueError(f"channels {self.channels} not divisible by heads {self.heads}")
        for dim, patch, name in ((self.frames, self.patch_t, "frames"),
                                 (self.height, self.patch_h, "height"),
                                 (self.width, self.patch_w, "width")):
            if dim % patch != 0:
                raise ValueError(f"{name} {dim} not divisible by its patch size {patch}")

    @property
    def latent_tokens(self) -> int:
        return (self.frames // self.patch_t) * (self.height // self.patch_h) \
            * (self.width // self.patch_w)

    @property
    def patch_dim(self) -> int:
        return self.patch_t * self.patch_h * self.patch_w * self.video_channels

    @property
    def vision_tokens(self) -> int:
        return self.vision_grid ** 2

    def video_shape(self) -> tuple[int, int, int, int]:
        return (self.frames, self.height, self.width, self.video_channels)


@dataclass
class LatentVideo:
    tokens: np.ndarray          # [L_Z, D] patch rearrangement of the video
    grid: tuple[int, int, int]  # (T/pt, H/ph, W/pw)
    patch: tuple[int, int, int]
    video_channels: int = 3


def patchify(video: np.ndarray, cfg: ModelConfig) -> LatentVideo:
    """Lossless position-preserving rearrangement into patch tokens."""
    video = np.asarray(video)
    if video.shape != cfg.video_shape():
        raise nm.DimensionError(
            f"video shape {list(video.shape)} != configured {list(cfg.video_shape())}")
    t, h, w, c = video.shape
    pt, ph, pw = cfg.patch_t, cfg.patch_h, cfg.patch_w
    gt, gh, gw = t // pt, h // ph, w // pw
    x = video.reshape(gt, pt, gh, ph, gw, pw, c)
    x = x.transpose(0, 2, 4, 1, 3, 5, 6)                 # [gt, gh, gw, pt, ph, pw, c]
    tokens = x.reshape(gt * gh * gw, pt * ph * pw * c)
    return LatentVideo(tokens=tokens, grid=(gt, gh, gw), patch=(pt, ph, pw),
                       video_channels=c)


def unpatchify(latent: LatentVideo) -> np.ndarray:
    gt, gh, gw = latent.grid
    pt, ph, pw = latent.patch
    c = latent.video_channels
    x = latent.tokens.reshape(gt, gh, gw, pt, ph, pw, c)
    x = x.transpose(0, 3, 1, 4, 2, 5, 6)                 # [gt, pt, gh, ph, gw, pw, c]
    return x.reshape(gt * pt, gh * ph, gw * pw, c)


class TimestepEmbedding(Layer):
    """Sinusoidal features of t in [0, 1] through a small MLP."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.fc_in = Linear(channels, channels, rng)
        self.fc_out = Linear(channels, channels, rng)
        half = channels // 2
        self._freqs = np.exp(np.linspace(0.0, np.log(1000.0), half))

    def __call__(self, t: np.ndarray, dtype) -> Tensor:
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        angle = t[:, None] * self._freqs[None, :]
        feats = np.concatenate([np.sin(angle), np.cos(angle)], axis=1)
        return self.fc_out(gelu(self.fc_in(Tensor(feats.astype(dtype)))))


class Block(Layer):
    """Pre-norm transformer block: self-attention, cross-attention, MLP."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.norm_self = LayerNorm(cfg.channels)
        self.self_attn = MultiHeadAttention(cfg.channels, cfg.heads, rng)
        self.norm_cross = LayerNorm(cfg.channels)
        self.cross_attn = MultiHeadAttention(cfg.channels, cfg.heads, rng)
        self.norm_mlp = LayerNorm(cfg.channels)
        self.mlp = Mlp(cfg.channels, cfg.channels * cfg.mlp_ratio, rng)

    def __call__(self, z: Tensor, cond: Tensor, key_mask) -> Tensor:
        h = self.norm_self(z)
        z = z + self.self_attn(h, h)
        z = z + self.cross_attn(self.norm_cross(z), cond, key_mask=key_mask)
        return z + self.mlp(self.norm_mlp(z))


class Backbone(Layer):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        c = cfg.channels
        self.in_proj = Linear(cfg.patch_dim, c, rng)
        self.pos_emb = nm.randn((cfg.latent_tokens, c), rng, std=0.02,
                                requires_grad=True)
        self.time_emb = TimestepEmbedding(c, rng)
        self.blocks = [Block(cfg, rng) for _ in range(cfg.layers)]
        self.out_norm = LayerNorm(c)
        self.head = Linear(c, cfg.patch_dim, rng, std=0.02)

    def __call__(self, z_tokens: Tensor, t: np.ndarray, cond: Tensor,
                 key_mask) -> Tensor:
        z = self.in_proj(z_tokens) + self.pos_emb
        temb = self.time_emb(t, z.dtype)                 # [B, C]
        temb = nm.reshape(temb, (temb.shape[0], 1, temb.shape[1]))
        for block in self.blocks:
            z = z + temb                                 # additive modulation
            z = block(z, cond, key_mask)
        return self.head(self.out_norm(z))


class VideoModel(Layer):
    """Full trainable system: text encoder, reference encoder, concept
    embedding table, and the velocity backbone. All parameters train
    jointly."""

    def __init__(self, cfg: ModelConfig, vocab: Vocabulary,
                 rng: np.random.Generator):
        nm.set_default_dtype(cfg.dtype)
        self.text_encoder = TextEncoder(vocab, cfg.channels, cfg.text_len, rng)
        self.ref_encoder = ReferenceEncoder(cfg.ref_size, cfg.channels, rng,
                                            grid=cfg.vision_grid)
        self.concepts = ConceptEmbeddingTable(cfg.r_max, cfg.channels, rng)
        self.backbone = Backbone(cfg, rng)
        self.cfg = cfg
        self.vocab = vocab

    def named_params(self, prefix: str = ""):
        for attr in ("text_encoder", "ref_encoder", "concepts", "backbone"):
            child = getattr(self, attr)
            name = f"{prefix}.{attr}" if prefix else attr
            yield from child.named_params(name)

    def conditioning(self, text_ids: np.ndarray, ref_images: np.ndarray,
                     ref_counts: np.ndarray, *, use_ce: bool = True,
                     ce_mode: str = "block"):
        return build_conditioning(text_ids, ref_images, ref_counts,
                                  self.text_encoder, self.ref_encoder,
                                  self.concepts, use_ce=use_ce, ce_mode=ce_mode)

    def forward_tokens(self, z_tokens, t, cond_tokens: Tensor, key_mask) -> Tensor:
        """Batched velocity prediction on raw [B, L_Z, D] patch tokens."""
        if not isinstance(z_tokens, Tensor):
            z_tokens = Tensor(np.asarray(z_tokens).astype(cond_tokens.dtype))
        return self.backbone(z_tokens, t, cond_tokens, key_mask)

    def velocity(self, latent: LatentVideo, t: float,
                 cond: ConditioningSequence) -> LatentVideo:
        """Single-example spec-level forward on an assembled sequence."""
        if not 0.0 <= t <= 1.0:
            raise ValueError(f"t must lie in [0, 1], got {t}")
        tokens = nm.reshape(cond.tokens, (1,) + cond.tokens.shape)
        z = Tensor(latent.tokens[None].astype(tokens.dtype))
        out = self.backbone(z, np.array([t]), tokens, None)
        return LatentVideo(out.data[0], latent.grid, latent.patch,
                           latent.video_channels)


def sample(model: VideoModel, noise: LatentVideo, cond: ConditioningSequence,
           steps: int) -> np.ndarray:
    """Euler-integrate the learned field from noise at t=0 to video at t=1."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x = noise
    dt = 1.0 / steps
    with nm.no_grad():
        for i in range(steps):
            v = model.velocity(x, i / steps, cond)
            x = LatentVideo(x.tokens + dt * v.tokens, x.grid, x.patch,
                            x.video_channels)
    return np.clip(unpatchify(x), 0.0, 1.0)


def sample_batch(model: VideoModel, noise_tokens: np.ndarray,
                 cond_tokens: Tensor, key_mask, cfg: ModelConfig,
                 steps: int) -> np.ndarray:
    """Batched Euler sampling; returns [B, T, H, W, 3] clamped videos."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x = noise_tokens.copy()
    dt = 1.0 / steps
    b = x.shape[0]
    with nm.no_grad():
        for i in range(steps):
            t = np.full(b, i / steps)
            v = model.forward_tokens(x, t, cond_tokens, key_mask).data
            x = x + dt * v
    grid = (cfg.frames // cfg.patch_t, cfg.height // cfg.patch_h,
            cfg.width // cfg.patch_w)
    patch = (cfg.patch_t, cfg.patch_h, cfg.patch_w)
    videos = [np.clip(unpatchify(LatentVideo(x[j], grid, patch,
                                             cfg.video_channels)), 0.0, 1.0)
              for j in range(b)]
    return np.stack(videos)


# -- checkpoints -----------------------------------------------------------


def save_checkpoint(path, model: VideoModel, stage: str, step: int,
                    opt_state: dict | None = None) -> None:
    """Directory of named tensors plus a JSON manifest."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    names = []
    for name, param in model.named_params():
        nm.save_tensor(path / f"{name}.bin", param.data)
        names.append(name)
    extra = {}
    if opt_state is not None:
        for key, arrays in (("m", opt_state["m"]), ("v", opt_state["v"])):
            for name, arr in arrays.items():
                nm.save_tensor(path / f"opt.{key}.{name}.bin", arr)
        extra = {"opt_step": opt_state["step"]}
    manifest = {"config": asdict(model.cfg), "stage": stage, "step": step,
                "tensors": names, "has_opt_state": opt_state is not None, **extra}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_checkpoint(path, vocab: Vocabulary):
    """Rebuild a VideoModel (and optimizer state, if saved) from disk."""
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    cfg = ModelConfig(**manifest["config"])
    model = VideoModel(cfg, vocab, np.random.default_rng(0))
    for name, param in model.named_params():
        arr = nm.load_tensor(path / f"{name}.bin")
        if arr.shape != param.data.shape:
            raise nm.DimensionError(
                f"checkpoint tensor {name} has shape {list(arr.shape)}, "
                f"expected {list(param.data.shape)}")
        param.data = arr.astype(param.data.dtype)
    opt_state = None
    if manifest.get("has_opt_state"):
        opt_state = {"step": manifest["opt_step"], "m": {}, "v": {}}
        for name, _ in model.named_params():
            opt_state["m"][name] = nm.load_tensor(path / f"opt.m.{name}.bin")
            opt_state["v"][name] = nm.load_tensor(path / f"opt.v.{name}.bin")
    return model, manifest, opt_state
