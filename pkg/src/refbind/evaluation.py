"""Automatic analogs of the human-study metrics, plus the ablation runner.

All similarity judgments use normalized cross-correlation against the fed
reference images: it is reference-exact on synthetic glyphs and needs no
external model. Identity slots (face/animal references) are located either
at the scripted ground-truth boxes (layout mode; eval prompts reuse scripted
trajectories) or by correlation search with non-maximum suppression
(layout-free mode, used for motion tracking).

Metric analogs:
  separation_rate      two located slots resolve to distinct references with
                       a score margin (the "no composite identity" judgment)
  identity similarity  per-slot NCC to the slot's own reference >= theta
  binding_accuracy     the entity executing anchor-k's scripted motion is
                       the one matching reference k
  temporal_consistency per-slot min NCC of each frame's patch to frame 0
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imageops import masked_ncc, ncc_map, support
from .model import ModelConfig, VideoModel, load_checkpoint, sample_batch
from .prompt import Vocabulary
from .synthdata import RenderedExample
from .train import TrainConfig, example_token_ids, run_stage

SCORE_FLOOR = 0.25          # below this, a slot is "absent" (no entity found)
THETA_SIM = 0.6             # identity similarity threshold
DELTA_MARGIN = 0.1          # separation top-1 margin
THETA_CONS = 0.8            # temporal consistency threshold


@dataclass
class SlotMeasurement:
    slot: int                       # identity-slot index (0-based entity order)
    patches: np.ndarray | None      # [T, g, g, 3] located per-frame patches
    similarities: np.ndarray        # support-masked NCC to each fed reference
    assigned_reference: int
    positions: np.ndarray | None = None   # [T, 2] tracked top-left (y, x)
    absent: bool = False
    ref_support: np.ndarray | None = None  # own reference's glyph mask


@dataclass
class EvalSample:
    """A generated video paired with its ground truth for measurement."""
    video: np.ndarray
    references: list[np.ndarray]    # fed identity references, slot order
    layout: np.ndarray              # scripted boxes for identity slots
    motions: list[str]              # scripted motion per identity slot
    config_kind: str


@dataclass
class MetricsReport:
    variant: str
    n_examples: int
    separation_rate: float | None = None
    slot_similarity: list[float] = field(default_factory=list)
    binding_accuracy: float | None = None
    temporal_consistency: float | None = None
    absent_slots: int = 0
    theta: float = THETA_SIM
    delta: float = DELTA_MARGIN
    theta_c: float = THETA_CONS
    failed: bool = False

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "n_examples": self.n_examples,
            "separation_rate": self.separation_rate,
            "slot_similarity": list(self.slot_similarity),
            "binding_accuracy": self.binding_accuracy,
            "temporal_consistency": self.temporal_consistency,
            "absent_slots": self.absent_slots,
            "theta": self.theta,
            "delta": self.delta,
            "theta_c": self.theta_c,
            "failed": self.failed,
        }


def identity_slot_indices(example: RenderedExample) -> list[int]:
    return [i for i, k in enumerate(example.slot_kinds) if k != "body-analog"]


def eval_sample_from_example(example: RenderedExample,
                             video: np.ndarray | None = None,
                             swap: bool = False) -> EvalSample:
    """Ground truth restricted to identity slots; `swap` reverses the fed
    reference order (order-swap experiments)."""
    idx = identity_slot_indices(example)
    refs = [example.references[i].pixels for i in idx]
    layout = example.layout[idx]
    motions = list(example.motions)
    if swap:
        refs = refs[::-1]
    return EvalSample(video=example.video if video is None else video,
                      references=refs, layout=layout, motions=motions,
                      config_kind=example.config_kind)


# -- locating slots -------------------------------------------------------------


def _extract(video: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    return np.stack([video[t, y:y + h, x:x + w]
                     for t, (y, x, h, w) in enumerate(boxes)])


def locate(sample: EvalSample, mode: str = "layout") -> list[SlotMeasurement]:
    """Per-slot patches for every identity slot.

    layout mode reads the scripted boxes; layout-free finds the k best
    reference-matching windows per frame with greedy non-max suppression
    and marks slots absent when no window clears the score floor.
    """
    if mode not in ("layout", "layout_free"):
        raise ValueError(f"unknown locate mode {mode!r}")
    k = len(sample.references)
    frames = sample.video.shape[0]
    supports = [support(ref) for ref in sample.references]
    if mode == "layout":
        out = []
        for slot in range(k):
            patches = _extract(sample.video, sample.layout[slot])
            sims = np.array([np.mean([masked_ncc(p, ref, sup) for p in patches])
                             for ref, sup in zip(sample.references, supports)])
            out.append(SlotMeasurement(
                slot=slot, patches=patches, similarities=sims,
                assigned_reference=int(np.argmax(sims)),
                positions=sample.layout[slot, :, :2].copy(),
                absent=bool(sims.max() < SCORE_FLOOR),
                ref_support=supports[slot]))
        return out

    g = sample.references[0].shape[0]
    positions = np.zeros((k, frames, 2), dtype=np.int64)
    found = np.ones((k, frames), dtype=bool)
    for t in range(frames):
        maps = [ncc_map(sample.video[t], ref, sup)
                for ref, sup in zip(sample.references, supports)]
        taken: list[tuple[int, int]] = []
        remaining = set(range(k))
        while remaining:
            best_slot, best_pos, best_score = -1, (0, 0), -np.inf
            for slot in remaining:
                m = maps[slot].copy()
                for (ty, tx) in taken:
                    y0, y1 = max(ty - g // 2, 0), min(ty + g // 2 + 1, m.shape[0])
                    x0, x1 = max(tx - g // 2, 0), min(tx + g // 2 + 1, m.shape[1])
                    m[y0:y1, x0:x1] = -np.inf
                pos = np.unravel_index(np.argmax(m), m.shape)
                if m[pos] > best_score:
                    best_slot, best_pos, best_score = slot, pos, m[pos]
            remaining.discard(best_slot)
            if best_score < SCORE_FLOOR:
                found[best_slot, t] = False
                continue
            positions[best_slot, t] = best_pos
            taken.append(best_pos)

    out = []
    for slot in range(k):
        if not found[slot].all():
            out.append(SlotMeasurement(slot=slot, patches=None,
                                       similarities=np.zeros(k),
                                       assigned_reference=-1, absent=True))
            continue
        boxes = np.concatenate([positions[slot],
                                np.full((frames, 2), g, dtype=np.int64)], axis=1)
        patches = _extract(sample.video, boxes)
        sims = np.array([np.mean([masked_ncc(p, ref, sup) for p in patches])
                         for ref, sup in zip(sample.references, supports)])
        out.append(SlotMeasurement(slot=slot, patches=patches,
                                   similarities=sims,
                                   assigned_reference=int(np.argmax(sims)),
                                   positions=positions[slot],
                                   ref_support=supports[slot]))
    return out


# -- metric primitives -------------------------------------------------------------


def separation_rate(measured: list[list[SlotMeasurement]],
                    delta: float = DELTA_MARGIN) -> float:
    """Fraction of two-entity samples whose slots resolve to distinct
    references with top-1 margin >= delta in both slots."""
    hits = 0
    for slots in measured:
        if len(slots) != 2:
            raise ValueError(f"separation_rate needs two-entity samples, got {len(slots)} slots")
        a, b = slots
        if a.absent or b.absent:
            continue
        if a.assigned_reference == b.assigned_reference:
            continue
        margins = []
        for m in (a, b):
            top = np.sort(m.similarities)[::-1]
            margins.append(top[0] - top[1])
        if min(margins) >= delta:
            hits += 1
    return hits / len(measured) if measured else 0.0


def slot_similarity_rates(measured: list[list[SlotMeasurement]],
                          theta: float = THETA_SIM) -> list[float]:
    """Per-slot fraction of samples with NCC(slot patch, own reference) >= theta."""
    k = len(measured[0])
    rates = []
    for slot in range(k):
        ok = [not m[slot].absent and m[slot].similarities[slot] >= theta
              for m in measured]
        rates.append(float(np.mean(ok)))
    return rates


def classify_motion(positions: np.ndarray, min_move: int = 2) -> str:
    """Recover the scripted motion label from per-frame positions."""
    ys, xs = positions[:, 0].astype(float), positions[:, 1].astype(float)
    dy, dx = ys[-1] - ys[0], xs[-1] - xs[0]
    span_y, span_x = np.ptp(ys), np.ptp(xs)
    if abs(dx) >= min_move and abs(dx) >= abs(dy):
        return "right" if dx > 0 else "left"
    if abs(dy) >= min_move:
        return "down" if dy > 0 else "up"
    if span_x >= min_move and span_x >= span_y:
        return "sways"
    if span_y >= min_move:
        return "bobs"
    return "stays"


def binding_accuracy(samples: list[EvalSample],
                     measured: list[list[SlotMeasurement]] | None = None) -> float:
    """Fraction of slots where the tracked entity matching reference k
    executes anchor-k's scripted motion (motion re-derived from positions)."""
    if measured is None:
        measured = [locate(s, mode="layout_free") for s in samples]
    total = correct = 0
    for sample, slots in zip(samples, measured):
        for k, m in enumerate(slots):
            total += 1
            if m.absent or m.positions is None:
                continue
            if classify_motion(m.positions) == sample.motions[k]:
                correct += 1
    return correct / total if total else 0.0


def temporal_consistency(measured: list[list[SlotMeasurement]],
                         theta_c: float = THETA_CONS) -> tuple[float, int]:
    """Fraction of samples whose mean per-slot min-over-frames self-NCC
    clears theta_c; absent slots are excluded and counted."""
    absent = 0
    scores = []
    for slots in measured:
        per_slot = []
        for m in slots:
            if m.absent or m.patches is None:
                absent += 1
                continue
            first = m.patches[0]
            sup = (m.ref_support if m.ref_support is not None
                   else np.ones(first.shape[:2], dtype=bool))
            per_slot.append(min(masked_ncc(p, first, sup) for p in m.patches))
        if per_slot:
            scores.append(float(np.mean(per_slot)))
    rate = float(np.mean([s >= theta_c for s in scores])) if scores else 0.0
    return rate, absent


# -- generation + evaluation ------------------------------------------------------


def generate_eval_videos(model: VideoModel, examples: list[RenderedExample],
                         cfg: TrainConfig, steps: int, seed: int,
                         swap: bool = False, chunk: int = 32) -> list[EvalSample]:
    """Sample one video per eval example under the variant's conditioning."""
    mcfg = model.cfg
    vocab = model.vocab
    samples = []
    for lo in range(0, len(examples), chunk):
        part = examples[lo:lo + chunk]
        b = len(part)
        ids = np.zeros((b, mcfg.text_len), dtype=np.int64)
        refs = np.zeros((b, mcfg.r_max, mcfg.ref_size, mcfg.ref_size, 3))
        counts = np.zeros(b, dtype=np.int64)
        noise = np.zeros((b, mcfg.latent_tokens, mcfg.patch_dim))
        for j, ex in enumerate(part):
            ids[j] = example_token_ids(ex, vocab, mcfg.text_len, cfg.use_ap)
            fed = [r.pixels for r in ex.references]
            if swap:
                fed = fed[::-1]
            counts[j] = len(fed)
            for s, pix in enumerate(fed):
                refs[j, s] = pix
            rng = np.random.default_rng(np.random.SeedSequence([seed, 3, lo + j]))
            noise[j] = rng.standard_normal(noise.shape[1:])
        cond, mask, _ = model.conditioning(ids, refs, counts, use_ce=cfg.use_ce,
                                           ce_mode=cfg.ce_mode)
        videos = sample_batch(model, noise, cond, mask, mcfg, steps)
        for j, ex in enumerate(part):
            samples.append(eval_sample_from_example(ex, video=videos[j], swap=swap))
    return samples


def evaluate_samples(variant: str, samples: list[EvalSample], *,
                     two_entity: bool | None = None) -> MetricsReport:
    """All metrics over generated samples (layout mode for identity metrics,
    layout-free tracking for binding)."""
    measured = [locate(s, mode="layout") for s in samples]
    if two_entity is None:
        two_entity = all(len(s.references) == 2 for s in samples)
    report = MetricsReport(variant=variant, n_examples=len(samples))
    if two_entity:
        report.separation_rate = separation_rate(measured)
    report.slot_similarity = slot_similarity_rates(measured)
    report.binding_accuracy = binding_accuracy(samples)
    cons, absent = temporal_consistency(measured)
    report.temporal_consistency = cons
    report.absent_slots = absent
    return report


def evaluate_checkpoint(checkpoint, vocab: Vocabulary, variant: str,
                        cfg: TrainConfig, eval_examples, steps: int,
                        seed: int, swap: bool = False) -> MetricsReport:
    model, _, _ = load_checkpoint(checkpoint, vocab)
    samples = generate_eval_videos(model, eval_examples, cfg, steps, seed,
                                   swap=swap)
    return evaluate_samples(variant, samples)


# -- ablation runner -----------------------------------------------------------------


def run_ablation(variants: list[tuple[str, TrainConfig]], model_cfg: ModelConfig,
                 datasets: dict, eval_examples: list[RenderedExample],
                 vocab: Vocabulary, out_dir, *, sample_steps: int = 8,
                 eval_seed: int = 1234, log_fn=None) -> list[MetricsReport]:
    """Train every variant on identical data/seeds, evaluate on the shared
    held-out set, and emit the comparison table. A variant that fails to
    train is recorded as a failed row, never fatal."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    reports = []
    for name, cfg in variants:
        try:
            ckpt = run_stage("pretrain", datasets, cfg, model_cfg, vocab,
                             out_dir / name, log_fn=log_fn)
            report = evaluate_checkpoint(ckpt, vocab, name, cfg, eval_examples,
                                         sample_steps, eval_seed)
        except Exception as err:          # noqa: BLE001 - record, don't abort
            report = MetricsReport(variant=name, n_examples=0, failed=True)
            (out_dir / f"{name}_error.txt").write_text(f"{type(err).__name__}: {err}\n")
        reports.append(report)
    write_reports(reports, out_dir)
    return reports


def write_reports(reports: list[MetricsReport], out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "ablation.json", "w") as fh:
        json.dump([r.to_dict() for r in reports], fh, indent=2, sort_keys=True)
    with open(out_dir / "ablation.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "separation_rate", "slot1_sim", "slot2_sim",
                         "binding", "temporal_consistency", "n_examples", "failed"])
        for r in reports:
            sims = list(r.slot_similarity) + [None, None]
            writer.writerow([r.variant,
                             _fmt(r.separation_rate), _fmt(sims[0]), _fmt(sims[1]),
                             _fmt(r.binding_accuracy), _fmt(r.temporal_consistency),
                             r.n_examples, r.failed])


def _fmt(x) -> str:
    return "" if x is None else f"{x:.4f}"


def contact_sheet(sample: EvalSample, path) -> None:
    """References beside generated frames, as one PNG raster."""
    from PIL import Image

    g = sample.references[0].shape[0]
    frames, h, w = sample.video.shape[:3]
    pad = 2
    sheet_w = max(len(sample.references) * (g + pad), frames * (w + pad))
    sheet = np.ones((g + h + 3 * pad, sheet_w, 3))
    for i, ref in enumerate(sample.references):
        x = i * (g + pad)
        sheet[pad:pad + g, x:x + g] = ref
    for t in range(frames):
        x = t * (w + pad)
        sheet[2 * pad + g:2 * pad + g + h, x:x + w] = sample.video[t]
    img = Image.fromarray((np.clip(sheet, 0, 1) * 255).astype(np.uint8))
    img.save(path)
