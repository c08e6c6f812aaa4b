"""Flow-matching training: straight-path velocity regression with AdamW.

Path convention (used everywhere): x_t = (1-t)*x0 + t*x1 with x0 standard
normal noise and x1 the data latent; the regression target is v = x1 - x0.
Sampling therefore integrates from t=0 (noise) to t=1 (data).

Stages: `pretrain` starts fresh (or warm-starts from a checkpoint) on the
mixed-configuration schedule; `finetune` requires a pretrain checkpoint and
consumes the curated high-quality subset at a reduced learning rate.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import numerics as nm
from .model import (LatentVideo, ModelConfig, VideoModel, load_checkpoint,
                    patchify, save_checkpoint)
from .numerics import Tensor
from .prompt import Vocabulary, parse, tokenize
from .synthdata import RenderedExample, resample_mixed


@dataclass
class FlowSample:
    t: float
    x0: np.ndarray
    x1: np.ndarray
    x_t: np.ndarray
    target_v: np.ndarray


def make_flow_sample(x1, rng: np.random.Generator) -> FlowSample:
    """Draw t ~ U[0,1], x0 ~ N(0,1) and interpolate along the straight path."""
    tokens = x1.tokens if isinstance(x1, LatentVideo) else np.asarray(x1)
    t = float(rng.random())
    x0 = rng.standard_normal(tokens.shape)
    x_t = (1.0 - t) * x0 + t * tokens
    return FlowSample(t=t, x0=x0, x1=tokens, x_t=x_t, target_v=tokens - x0)


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean squared error over all latent elements."""
    if not isinstance(target, Tensor):
        target = Tensor(np.asarray(target).astype(pred.dtype))
    if pred.shape != target.shape:
        raise nm.DimensionError(
            f"prediction shape {list(pred.shape)} != target shape {list(target.shape)}")
    diff = pred - target
    return nm.tmean(diff * diff)


@dataclass
class TrainConfig:
    lr_pretrain: float = 1e-4
    lr_finetune: float = 2e-5
    batch_size: int = 8
    steps_pretrain: int = 3000
    steps_finetune: int = 300
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    grad_clip: float = 1.0
    seed: int = 0
    kinds: tuple[str, ...] = ("double",)
    use_ap: bool = True
    use_ce: bool = True
    ce_mode: str = "block"
    log_every: int = 50
    checkpoint_every: int = 0          # 0 = final checkpoint only

    def __post_init__(self):
        if self.lr_finetune >= self.lr_pretrain:
            raise ValueError(
                f"lr_finetune {self.lr_finetune} must be below lr_pretrain {self.lr_pretrain}")
        if self.ce_mode not in ("block", "per_token"):
            raise ValueError(f"unknown ce_mode {self.ce_mode!r}")


class AdamW:
    """Decoupled-weight-decay adaptive moments with bias correction and
    global gradient-norm clipping."""

    def __init__(self, params: dict[str, Tensor], lr: float,
                 betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, grad_clip: float = 0.0):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.step_count = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def state(self) -> dict:
        return {"step": self.step_count, "m": self.m, "v": self.v}

    def load_state(self, state: dict) -> None:
        self.step_count = int(state["step"])
        for n in self.params:
            self.m[n] = np.asarray(state["m"][n], dtype=self.m[n].dtype)
            self.v[n] = np.asarray(state["v"][n], dtype=self.v[n].dtype)

    def step(self) -> None:
        grads = {n: (p.grad if p.grad is not None else np.zeros_like(p.data))
                 for n, p in self.params.items()}
        if self.grad_clip > 0:
            total = np.sqrt(sum(float((g.astype(np.float64) ** 2).sum())
                                for g in grads.values()))
            if total > self.grad_clip:
                scale = self.grad_clip / total
                grads = {n: g * scale for n, g in grads.items()}
        self.step_count += 1
        bc1 = 1.0 - self.b1 ** self.step_count
        bc2 = 1.0 - self.b2 ** self.step_count
        for n, p in self.params.items():
            g = grads[n]
            self.m[n] = self.b1 * self.m[n] + (1.0 - self.b1) * g
            self.v[n] = self.b2 * self.v[n] + (1.0 - self.b2) * g * g
            m_hat = self.m[n] / bc1
            v_hat = self.v[n] / bc2
            update = m_hat / (np.sqrt(v_hat) + self.eps)
            if self.weight_decay > 0:
                update = update + self.weight_decay * p.data
            p.data = p.data - self.lr * update


def example_token_ids(ex: RenderedExample, vocab: Vocabulary, max_len: int,
                      use_ap: bool) -> list[int]:
    """Token ids for one example under the anchored-prompt flag."""
    prompt = ex.prompt if use_ap else parse(ex.prompt.plain_text(), vocab)
    return tokenize(prompt, vocab, max_len)


def assemble_batch(examples: list[RenderedExample], model: VideoModel,
                   cfg: TrainConfig, rng: np.random.Generator):
    """Flow samples plus conditioning arrays for one training batch."""
    mcfg = model.cfg
    vocab = model.vocab
    b = len(examples)
    ids = np.zeros((b, mcfg.text_len), dtype=np.int64)
    refs = np.zeros((b, mcfg.r_max, mcfg.ref_size, mcfg.ref_size, 3))
    counts = np.zeros(b, dtype=np.int64)
    x_t = np.zeros((b, mcfg.latent_tokens, mcfg.patch_dim))
    target = np.zeros_like(x_t)
    t = np.zeros(b)
    for j, ex in enumerate(examples):
        ids[j] = example_token_ids(ex, vocab, mcfg.text_len, cfg.use_ap)
        counts[j] = len(ex.references)
        for s, ref in enumerate(ex.references):
            if ref.pixels.shape != (mcfg.ref_size, mcfg.ref_size, 3):
                raise nm.DimensionError(
                    f"reference of shape {list(ref.pixels.shape)} does not match "
                    f"model ref_size {mcfg.ref_size}; dataset canvas and model "
                    f"config disagree")
            refs[j, s] = ref.pixels
        flow = make_flow_sample(patchify(ex.video.astype(np.float64), mcfg), rng)
        x_t[j] = flow.x_t
        target[j] = flow.target_v
        t[j] = flow.t
    return ids, refs, counts, x_t, t, target


def train_step(model: VideoModel, opt: AdamW, batch, cfg: TrainConfig) -> float:
    ids, refs, counts, x_t, t, target = batch
    nm.zero_grads(p for _, p in model.named_params())
    cond, mask, _ = model.conditioning(ids, refs, counts, use_ce=cfg.use_ce,
                                       ce_mode=cfg.ce_mode)
    pred = model.forward_tokens(x_t, t, cond, mask)
    loss = mse_loss(pred, target.astype(pred.dtype))
    value = loss.item()
    if not np.isfinite(value):
        raise RuntimeError(
            f"non-finite loss {value} at optimizer step {opt.step_count + 1}")
    nm.backward(loss)
    opt.step()
    return value


_STAGE_IDS = {"pretrain": 0, "finetune": 1}


def run_stage(stage: str, datasets: dict[str, list[RenderedExample]],
              cfg: TrainConfig, model_cfg: ModelConfig, vocab: Vocabulary,
              out_dir, *, init_checkpoint=None,
              log_fn=None) -> Path:
    """Train one stage and return the final checkpoint directory.

    `datasets` maps enabled config kinds to example lists; batches resample
    kinds with equal probability. All randomness derives from cfg.seed and
    the step index, so a run resumed from a checkpoint replays identically.
    """
    if stage not in _STAGE_IDS:
        raise ValueError(f"unknown stage {stage!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    enabled = {k: v for k, v in datasets.items() if k in cfg.kinds}
    missing = [k for k in cfg.kinds if not enabled.get(k)]
    if missing:
        raise ValueError(f"enabled config kinds without data: {missing}")

    stage_id = _STAGE_IDS[stage]
    lr = cfg.lr_pretrain if stage == "pretrain" else cfg.lr_finetune
    steps = cfg.steps_pretrain if stage == "pretrain" else cfg.steps_finetune

    start_step = 0
    opt_state = None
    if init_checkpoint is not None:
        model, manifest, opt_state = load_checkpoint(init_checkpoint, vocab)
        if manifest["stage"] == stage:
            start_step = manifest["step"]          # resume within the stage
    elif stage == "finetune":
        raise ValueError("finetune requires an initial checkpoint")
    else:
        model = VideoModel(model_cfg, vocab,
                           np.random.default_rng(np.random.SeedSequence([cfg.seed, 17])))

    opt = AdamW(dict(model.named_params()), lr=lr, betas=cfg.betas, eps=cfg.eps,
                weight_decay=cfg.weight_decay, grad_clip=cfg.grad_clip)
    if opt_state is not None and start_step > 0:
        opt.load_state(opt_state)

    sizes = {k: len(v) for k, v in enabled.items()}
    log_path = out_dir / f"{stage}_log.jsonl"
    log_handle = open(log_path, "a")
    final = out_dir / f"checkpoint_{stage}"
    began = time.time()
    try:
        for step in range(start_step, steps):
            step_rng = np.random.default_rng(
                np.random.SeedSequence([cfg.seed, stage_id, 2, step]))
            schedule = resample_mixed(sizes, cfg.batch_size, 1, step_rng)[0]
            examples = [enabled[kind][idx] for kind, idx in schedule]
            batch = assemble_batch(examples, model, cfg, step_rng)
            loss = train_step(model, opt, batch, cfg)
            if (step + 1) % cfg.log_every == 0 or step == steps - 1:
                entry = {"step": step + 1, "stage": stage, "loss": loss,
                         "lr": lr, "wallclock": round(time.time() - began, 3)}
                log_handle.write(json.dumps(entry) + "\n")
                log_handle.flush()
                if log_fn:
                    log_fn(entry)
            if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0 \
                    and step + 1 < steps:
                save_checkpoint(out_dir / f"checkpoint_{stage}_{step + 1:06d}",
                                model, stage, step + 1, opt.state())
    finally:
        log_handle.close()
    save_checkpoint(final, model, stage, steps, opt.state())
    return final
