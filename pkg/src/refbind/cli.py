"""Command-line entry point: the whole pipeline as reproducible subcommands.

Every subcommand is a pure function of (config file, seed): data shards,
checkpoints, and reports are byte-identical across reruns at --threads 1.
Exit codes: 0 success, 1 domain error, 2 usage error.
"""

from __future__ import annotations

import argparse
import os
import sys


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="refbind",
        description="Anchored-prompt / concept-embedding conditioning testbed.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=False, checkpoint=False):
        p.add_argument("--config", required=True, help="TOML run configuration")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--threads", type=int, default=None,
                       help="BLAS thread cap (default from config; 1 = deterministic)")
        if data:
            p.add_argument("--data", required=True,
                           help="directory produced by gen-data")
        if checkpoint:
            p.add_argument("--checkpoint", required=True,
                           help="checkpoint directory")

    common(sub.add_parser("gen-data", help="generate dataset shards"))
    common(sub.add_parser("curate", help="run the curation pipeline"), data=True)
    train = sub.add_parser("train", help="train one stage")
    common(train, data=True)
    train.add_argument("--stage", choices=("pretrain", "finetune"),
                       default="pretrain")
    train.add_argument("--init", default=None, help="checkpoint to start from")
    sample = sub.add_parser("sample", help="sample videos from a checkpoint")
    common(sample, data=True, checkpoint=True)
    evalp = sub.add_parser("eval", help="evaluate a checkpoint")
    common(evalp, data=True, checkpoint=True)
    ablate = sub.add_parser("ablate", help="train and compare ablation variants")
    common(ablate, data=True)
    grad = sub.add_parser("gradcheck", help="finite-difference gradient check")
    grad.add_argument("--config", default=None)
    grad.add_argument("--out", default=None)
    grad.add_argument("--seed", type=int, default=0)
    grad.add_argument("--threads", type=int, default=1)
    grad.add_argument("--probes", type=int, default=512)
    return parser


def _load(args):
    from .config import load_config

    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.threads is not None:
        cfg.threads = args.threads
    return cfg


def _split_dir(data_dir, kind: str, split: str):
    from pathlib import Path
    return Path(data_dir) / kind / split


def cmd_gen_data(args) -> int:
    from . import synthdata as sd
    from .config import write_resolved
    from .prompt import Vocabulary
    from pathlib import Path

    cfg = _load(args)
    out = Path(args.out)
    write_resolved(cfg, out)
    vocab = Vocabulary.default(r_max=cfg.model.r_max)
    (out / "vocab.json").write_text(vocab.to_json())
    canvas = tuple(cfg.data.canvas)
    for kind in cfg.data.kinds:
        train = sd.generate_examples(
            kind, cfg.data.train_count, cfg.seed, vocab, canvas=canvas,
            namespace=0, hard_case_prob=cfg.data.hard_case_prob,
            prefix_pool=tuple(cfg.data.prefixes))
        sd.save_shards(train, _split_dir(out / "data", kind, "train"))
        eval_ = sd.generate_examples(
            kind, cfg.data.eval_count, cfg.seed, vocab, canvas=canvas,
            namespace=1, hard_case_prob=cfg.data.eval_hard_case_prob,
            motion_pool=cfg.data.eval_motion_pool(),
            prefix_pool=tuple(cfg.data.prefixes))
        sd.save_shards(eval_, _split_dir(out / "data", kind, "eval"))
        print(f"gen-data: {kind}: {len(train)} train / {len(eval_)} eval shards")
    return 0


def cmd_curate(args) -> int:
    import json
    import numpy as np
    from . import curation as cu
    from . import synthdata as sd
    from .config import write_resolved
    from .prompt import Vocabulary
    from pathlib import Path

    cfg = _load(args)
    out = Path(args.out)
    write_resolved(cfg, out)
    vocab = Vocabulary.default(r_max=cfg.model.r_max)
    kind = cfg.curation.kind
    examples = sd.load_shards(_split_dir(args.data, kind, "train"), vocab)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 5]))
    detector = (cu.OracleDetector() if cfg.curation.p_miss == 0 and
                cfg.curation.jitter == 0
                else cu.NoisyDetector(cfg.curation.p_miss, cfg.curation.jitter, rng))
    noise = cfg.curation.matcher_noise
    factory = (None if noise == 0 else
               (lambda ex, f: cu.OracleMatcher(ex, f, noise_std=noise, rng=rng)))
    records, summary = cu.curate(examples, kind, vocab, detector=detector,
                                 matcher_factory=factory)
    cu.write_manifest(records, out)
    stats = {"total": summary.total, "passed": summary.passed,
             "pass_rate": summary.pass_rate,
             "assignment_accuracy": summary.assignment_accuracy}
    (out / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True))
    print(f"curate: pass_rate={summary.pass_rate:.3f} "
          f"assignment_accuracy={summary.assignment_accuracy:.3f}")
    return 0


def _load_datasets(data_dir, kinds, vocab, split="train"):
    from . import synthdata as sd

    datasets = {}
    for kind in kinds:
        examples = sd.load_shards(_split_dir(data_dir, kind, split), vocab)
        if examples:
            datasets[kind] = examples
    return datasets


def cmd_train(args) -> int:
    from .config import write_resolved
    from .prompt import Vocabulary
    from .train import run_stage
    from pathlib import Path

    cfg = _load(args)
    out = Path(args.out)
    write_resolved(cfg, out)
    vocab = Vocabulary.default(r_max=cfg.model.r_max)
    datasets = _load_datasets(args.data, cfg.train.kinds, vocab)
    tcfg = cfg.train_config()
    init = args.init
    if args.stage == "finetune" and init is None:
        raise ValueError("finetune requires --init with a pretrain checkpoint")
    final = run_stage(args.stage, datasets, tcfg, cfg.model_config(), vocab, out,
                      init_checkpoint=init,
                      log_fn=lambda e: print(f"step {e['step']}: loss {e['loss']:.5f}"))
    print(f"train: wrote {final}")
    return 0


def cmd_sample(args) -> int:
    from . import evaluation as ev
    from .config import write_resolved
    from .model import load_checkpoint
    from .prompt import Vocabulary
    from pathlib import Path
    from . import numerics as nm
    import numpy as np

    cfg = _load(args)
    out = Path(args.out)
    write_resolved(cfg, out)
    vocab = Vocabulary.default(r_max=cfg.model.r_max)
    examples = _load_datasets(args.data, [cfg.eval.kind], vocab, "eval")
    examples = examples[cfg.eval.kind][:cfg.eval.count]
    model, _, _ = load_checkpoint(args.checkpoint, vocab)
    samples = ev.generate_eval_videos(model, examples, cfg.train_config(),
                                      cfg.eval.sample_steps, cfg.seed,
                                      swap=cfg.eval.swap)
    videos_dir = out / "videos"
    videos_dir.mkdir(parents=True, exist_ok=True)
    sheets = cfg.eval.contact_sheets or min(8, len(samples))
    for i, sample in enumerate(samples):
        nm.save_tensor(videos_dir / f"video_{i:04d}.bin",
                       sample.video.astype(np.float32))
        if i < sheets:
            ev.contact_sheet(sample, videos_dir / f"sheet_{i:04d}.png")
    print(f"sample: wrote {len(samples)} videos to {videos_dir}")
    return 0


def cmd_eval(args) -> int:
    import json
    from . import evaluation as ev
    from .config import write_resolved
    from .prompt import Vocabulary
    from pathlib import Path

    cfg = _load(args)
    out = Path(args.out)
    write_resolved(cfg, out)
    vocab = Vocabulary.default(r_max=cfg.model.r_max)
    examples = _load_datasets(args.data, [cfg.eval.kind], vocab, "eval")
    examples = examples[cfg.eval.kind][:cfg.eval.count]
    report = ev.evaluate_checkpoint(args.checkpoint, vocab, "eval",
                                    cfg.train_config(), examples,
                                    cfg.eval.sample_steps, cfg.seed,
                                    swap=cfg.eval.swap)
    (out / "metrics.json").write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True))
    ev.write_reports([report], out)
    print(f"eval: {json.dumps(report.to_dict(), sort_keys=True)}")
    return 0


ABLATION_VARIANTS = (
    ("baseline", dict(use_ap=False, use_ce=False)),
    ("ce_only", dict(use_ap=False, use_ce=True, ce_mode="block")),
    ("ap_ce", dict(use_ap=True, use_ce=True, ce_mode="block")),
    ("pe_variant", dict(use_ap=False, use_ce=True, ce_mode="per_token")),
)


def cmd_ablate(args) -> int:
    from . import evaluation as ev
    from .config import write_resolved
    from .prompt import Vocabulary
    from pathlib import Path

    cfg = _load(args)
    out = Path(args.out)
    write_resolved(cfg, out)
    vocab = Vocabulary.default(r_max=cfg.model.r_max)
    datasets = _load_datasets(args.data, cfg.train.kinds, vocab)
    eval_examples = _load_datasets(args.data, [cfg.eval.kind], vocab, "eval")
    eval_examples = eval_examples[cfg.eval.kind][:cfg.eval.count]
    variants = [(name, cfg.train_config(**flags))
                for name, flags in ABLATION_VARIANTS]
    reports = ev.run_ablation(variants, cfg.model_config(), datasets,
                              eval_examples, vocab, out,
                              sample_steps=cfg.eval.sample_steps,
                              eval_seed=cfg.seed,
                              log_fn=lambda e: print(
                                  f"  step {e['step']}: loss {e['loss']:.5f}"))
    for r in reports:
        print(f"ablate: {r.variant}: sep={r.separation_rate} "
              f"sims={[round(s, 3) for s in r.slot_similarity]} "
              f"binding={r.binding_accuracy}")
    print(f"ablate: wrote {out / 'ablation.csv'}")
    return 0


def cmd_gradcheck(args) -> int:
    import numpy as np
    from . import numerics as nm
    from .model import ModelConfig, VideoModel
    from .numerics import Tensor
    from .prompt import Vocabulary

    nm.set_default_dtype("float64")
    vocab = Vocabulary.default()
    cfg = ModelConfig(layers=1, heads=2, channels=16, frames=2, height=4,
                      width=8, text_len=24, ref_size=2, mlp_ratio=2,
                      dtype="float64")
    model = VideoModel(cfg, vocab, np.random.default_rng(args.seed))
    rng = np.random.default_rng(args.seed + 1)
    z = rng.standard_normal((1, cfg.latent_tokens, cfg.patch_dim))
    target = rng.standard_normal(z.shape)
    ids = np.full((1, cfg.text_len), vocab.BOS)
    ids[0, 2] = vocab.anchor_id(1)
    refs = rng.random((1, 2, cfg.ref_size, cfg.ref_size, 3))

    def loss_fn(_):
        cond, mask, _ = model.conditioning(ids, refs, np.array([2]))
        pred = model.forward_tokens(z, np.array([0.35]), cond, mask)
        diff = pred - Tensor(target)
        return nm.tmean(diff * diff)

    params = list(model.named_params())
    total = sum(p.size for _, p in params)
    per_param = max(1, args.probes // len(params))
    worst = 0.0
    probed = 0
    for name, param in params:
        n = min(per_param, param.size)
        err = nm.grad_check(loss_fn, param, eps=1e-4, max_probes=n,
                            rng=np.random.default_rng(args.seed + 2))
        probed += n
        worst = max(worst, err)
    print(f"gradcheck: probed {probed} of {total} coordinates, "
          f"max relative error {worst:.3e}")
    if worst >= 1e-4:
        print("gradcheck: FAILED (tolerance 1e-4)", file=sys.stderr)
        return 1
    return 0


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "curate": cmd_curate,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    threads = getattr(args, "threads", None) or 1
    os.environ.setdefault("OMP_NUM_THREADS", str(threads))
    os.environ.setdefault("OPENBLAS_NUM_THREADS", str(threads))
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, KeyError, FileNotFoundError, RuntimeError) as err:
        print(f"refbind {args.command}: error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
