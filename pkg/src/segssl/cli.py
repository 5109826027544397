"""Command-line entry point: ``segssl <verb> ...``.

Exit codes: 0 success, 2 usage or config error (including missing input
files), 3 data error, 4 numerical abort during training.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import Config, ConfigError, config_from_dict, load_config
from .dsp import GlobalStats
from .experiment import (corpus_stats, finetune_eval, linear_eval, load_corpus, pretrain_and_probe,
                         pretrain_specs)
from .pretrain import CheckpointError, NumericalAbort, init_state, load_checkpoint, pretrain, read_archive
from .synth import DESIGNS, SynthSpec, design, generate_corpus

log = logging.getLogger("segssl")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _existing(path, what):
    if path is None or not Path(path).exists():
        raise UsageError(f"{what} not found: {path}")
    return Path(path)


def _overrides(args) -> dict:
    out = {}
    if getattr(args, "epochs", None) is not None:
        out.setdefault("data", {})["epochs"] = args.epochs
    if getattr(args, "seed", None) is not None:
        out.setdefault("data", {})["seed"] = args.seed
    if getattr(args, "batch_size", None) is not None:
        out.setdefault("data", {})["batch_size"] = args.batch_size
    if getattr(args, "segment_len", None) is not None:
        out.setdefault("views", {}).setdefault("pair", {})["segment_len_s"] = args.segment_len
    return out


def _config(args) -> Config:
    if args.config is not None:
        _existing(args.config, "config file")
    return load_config(args.config, _overrides(args))


def _write_json(path, record):
    Path(path).write_text(json.dumps(record, indent=2, default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, (np.integer, np.floating)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def encoder_checksum(encoder) -> str:
    digest = hashlib.sha256()
    for name, t in sorted(encoder.state_dict().items()):
        digest.update(name.encode())
        digest.update(t.detach().cpu().numpy().tobytes())
    return digest.hexdigest()


# ---------------------------------------------------------------- verbs

def cmd_make_synthetic(args) -> int:
    spec = SynthSpec(n_clips=args.n_clips, clip_len_s=args.clip_len, classes=design(args.design), seed=args.seed,
                     n_folds=args.n_folds, distractor_rate=args.distractor_rate,
                     distractor_db=tuple(args.distractor_db))
    echo = {k: str(v) if isinstance(v, Path) else v for k, v in vars(args).items() if k != "func"}
    manifest = generate_corpus(spec, args.out, header=echo)
    print(manifest)
    return EXIT_OK


def cmd_compute_stats(args) -> int:
    cfg = _config(args)
    manifest = _existing(args.manifest, "manifest")
    corpus = load_corpus(manifest, cfg.mel.sample_rate)
    splits = args.splits.split(",") if args.splits else cfg.data.pretrain_splits
    stats = corpus_stats(corpus, cfg, splits)
    stats.save(args.out, config_hash=cfg.digest(), splits=splits)
    log.info("stats min %.4f max %.4f over %d frames", stats.min_val, stats.max_val, stats.n_frames_seen)
    print(args.out)
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    manifest = _existing(args.manifest, "manifest")
    stats = GlobalStats.load(_existing(args.stats, "stats file"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    corpus = load_corpus(manifest, cfg.mel.sample_rate)
    specs = pretrain_specs(corpus, cfg, stats)
    if len(specs) < 2:
        raise ValueError("pre-training needs at least 2 clips")
    state = None
    ckpt = out / "checkpoint.bin"
    if args.resume and ckpt.exists():
        state = load_checkpoint(ckpt, cfg)
        log.info("resumed from step %d", state.step)
    cfg.save(out / "config.json")
    try:
        state, losses = pretrain(cfg, specs, out, state, args.max_steps)
    except NumericalAbort as exc:
        _write_json(out / "abort.json", {"config_hash": cfg.digest(), **exc.dump})
        raise
    _write_json(out / "summary.json", {"config_hash": cfg.digest(), "step": state.step,
                                        "total_steps": state.total_steps, "final_loss": losses[-1] if losses else None})
    print(ckpt)
    return EXIT_OK


def _eval_config(args) -> tuple:
    """Effective config: the checkpoint's own, with the eval section taken from --config."""
    if args.checkpoint is not None:
        manifest, _ = read_archive(_existing(args.checkpoint, "checkpoint"))
        data = manifest["config"]
        if args.config is not None:
            load_config(_existing(args.config, "config file"))  # schema check of the whole file
            user = json.loads(args.config.read_text())
            if "eval" in user:
                data = {**data, "eval": {**data["eval"], **user["eval"]}}
        return config_from_dict(data), manifest["config_hash"]
    return _config(args), None


def cmd_eval(args) -> int:
    if args.checkpoint is None and not args.random_init:
        raise UsageError("eval needs --checkpoint or --random-init")
    cfg, ckpt_hash = _eval_config(args)
    manifest = _existing(args.manifest, "manifest")
    stats = GlobalStats.load(_existing(args.stats, "stats file"))
    if args.checkpoint is not None:
        encoder = load_checkpoint(args.checkpoint).teacher.encoder
    else:
        encoder = init_state(cfg, 2).teacher.encoder
    corpus = load_corpus(manifest, cfg.mel.sample_rate)
    task = corpus.task(args.task_name, folds=args.folds)
    before = encoder_checksum(encoder)
    run = linear_eval if args.protocol == "linear" else finetune_eval
    result = run(encoder, corpus, cfg, stats, task)
    after = encoder_checksum(encoder)
    if before != after:
        raise RuntimeError("evaluation modified the pre-trained encoder")
    result.update(config_hash=cfg.digest(), checkpoint_config_hash=ckpt_hash, encoder_checksum=before,
                  checkpoint=str(args.checkpoint) if args.checkpoint else None)
    _write_json(args.out, result)
    log.info("%s %s = %.4f", args.protocol, result["metric_name"], result["value"])
    print(args.out)
    return EXIT_OK


def normalize_scores(values) -> list:
    """Min-max normalize to [0, 1]; None when fewer than two distinct values."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = values.min(), values.max()
    if len(values) < 2 or hi == lo:
        return [None] * len(values)
    return ((values - lo) / (hi - lo)).tolist()


def cmd_sweep_segment_length(args) -> int:
    lengths = [float(x) for x in args.lengths.split(",")]
    base = _config(args)
    manifest = _existing(args.manifest, "manifest")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    corpus = load_corpus(manifest, base.mel.sample_rate)
    stats = GlobalStats.load(_existing(args.stats, "stats file")) if args.stats else \
        corpus_stats(corpus, base, base.data.pretrain_splits)
    rows = []
    for length in lengths:
        data = base.to_dict()
        data["views"]["pair"]["segment_len_s"] = length
        cfg = config_from_dict(data)
        res = pretrain_and_probe(cfg, corpus, stats, out / f"seg_{length:g}s")
        probe = res["probe"]
        log.info("segment %.2f s: %s %.4f", length, probe["metric_name"], probe["value"])
        rows.append({"segment_len_s": length, "metric": probe["metric_name"], "value": probe["value"],
                     "lr_chosen": probe["lr_chosen"], "config_hash": cfg.digest()})
    normalized = normalize_scores([r["value"] for r in rows])
    if normalized[0] is None:
        log.warning("normalization undefined for %d length(s) with distinct scores; writing raw scores only",
                    len(set(r["value"] for r in rows)))
    for row, norm in zip(rows, normalized):
        row["normalized"] = norm
    fields = ["segment_len_s", "metric", "value", "normalized", "lr_chosen", "config_hash"]
    with open(out / "sweep.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: "" if row[k] is None else row[k] for k in fields})
    _plot_sweep(rows, out / "sweep.png")
    _write_json(out / "sweep.json", {"base_config_hash": base.digest(), "rows": rows})
    print(out / "sweep.csv")
    return EXIT_OK


def _plot_sweep(rows, path):
    import matplotlib

    matplotlib.use("Agg")
    from matplotlib import pyplot as plt

    x = [r["segment_len_s"] for r in rows]
    use_norm = rows[0]["normalized"] is not None
    y = [r["normalized"] if use_norm else r["value"] for r in rows]
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot(x, y, marker="o")
    ax.set_xlabel("segment length (s)")
    ax.set_ylabel(f"normalized {rows[0]['metric']}" if use_norm else rows[0]["metric"])
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="segssl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p, manifest=True):
        p.add_argument("--config", type=Path, help="run config JSON (defaults apply to missing keys)")
        if manifest:
            p.add_argument("--manifest", type=Path, required=True)
        p.add_argument("--seed", type=int)

    p = sub.add_parser("make-synthetic", help="write a synthetic labelled corpus")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--design", choices=sorted(DESIGNS), default="tones")
    p.add_argument("--n-clips", type=int, default=300)
    p.add_argument("--clip-len", type=float, default=10.0)
    p.add_argument("--n-folds", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--distractor-rate", type=float, default=0.0, help="transient events per second")
    p.add_argument("--distractor-db", type=float, nargs=2, default=[0.0, 6.0], metavar=("LO", "HI"))
    p.set_defaults(func=cmd_make_synthetic)

    p = sub.add_parser("compute-stats", help="global min/max of log-mel values")
    common(p)
    p.add_argument("--splits", help="comma-separated manifest splits (default: config data.pretrain_splits)")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_compute_stats)

    p = sub.add_parser("pretrain", help="teacher-student pre-training")
    common(p)
    p.add_argument("--stats", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--segment-len", type=float)
    p.add_argument("--max-steps", type=int, help="stop after this many steps (checkpoint is written)")
    p.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.bin if present")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("eval", help="linear probe or finetune on a labelled manifest")
    common(p)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--random-init", action="store_true", help="evaluate the untrained encoder (control)")
    p.add_argument("--stats", type=Path, required=True)
    p.add_argument("--protocol", choices=["linear", "finetune"], default="linear")
    p.add_argument("--folds", type=int, default=1, help="k-fold cross-validation over the manifest 'fold' field")
    p.add_argument("--task-name", default="task")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-segment-length", help="pre-train and probe once per segment length")
    common(p)
    p.add_argument("--lengths", required=True, help="comma-separated seconds, e.g. 1,2,4,6")
    p.add_argument("--stats", type=Path)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_sweep_segment_length)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (CheckpointError, ValueError, OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
