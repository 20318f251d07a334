"""Command-line entry point: ``anchor-embed {gen-data|train|eval|ablate|grad-check}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .ablation import ALPHAS, AblationGrid, run_ablation
from .config import RunConfig
from .data import PairFormatError, generate_synthetic_pairs, load_pairs_jsonl, split_pairs, write_pairs_jsonl
from .model import CheckpointError, init_params, load_checkpoint, save_checkpoint
from .retrieval import evaluate_pairs, format_reports, write_reports_csv
from .stage1 import train_stage1
from .stage2 import train_stage2
from .verify import run_grad_suite

log = logging.getLogger("anchor_embed")

TRAIN_FILE = "train.jsonl"
HELD_OUT_FILE = "heldout.jsonl"


class CommandError(Exception):
    pass


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON run config; flags override its fields")
    p.add_argument("--seed", type=int, help="global seed (also seeds both trainers)")
    p.add_argument("--out", type=Path, help="output directory (default: the config's out_dir)")
    p.add_argument("-v", "--verbose", action="store_true")


def _training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--alpha", type=float, help="Stage I mixing weight of the query-to-document loss")
    p.add_argument("--tau", type=float, help="Stage II temperature")
    p.add_argument("--steps", type=int, help="step count of the selected stage (single-stage runs only)")
    p.add_argument("--stage1-steps", type=int)
    p.add_argument("--stage2-steps", type=int)
    p.add_argument("--adapter-rank", type=int, help="Stage II low-rank adapter rank; 0 trains all weights")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="anchor-embed", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic train/held-out corpus as JSONL")
    _common(p)
    p.add_argument("--count", type=int, help="number of pairs before splitting")

    p = sub.add_parser("train", help="run Stage I, Stage II or both")
    _common(p)
    _training_flags(p)
    p.add_argument("--stage", choices=("1", "2", "both"), default="both")
    p.add_argument("--init", type=Path, help="starting checkpoint (default: fresh init from the seed)")
    p.add_argument("--data", type=Path, help=f"directory holding {TRAIN_FILE} (default: generate from config)")

    p = sub.add_parser("eval", help="retrieval metrics on the held-out split")
    _common(p)
    p.add_argument("--checkpoint", type=Path, help="model to evaluate (default: untrained init from the seed)")
    p.add_argument("--data", type=Path, help=f"directory holding {HELD_OUT_FILE} (default: generate from config)")
    p.add_argument("--label", default=None)

    p = sub.add_parser("ablate", help="stage or alpha ablation over several seeds")
    _common(p)
    _training_flags(p)
    p.add_argument("--axis", choices=("stage", "alpha"), default="stage")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--steps-matched", action="store_true", help="add Stage II alone for the combined step count")
    p.add_argument("--data", type=Path, help="directory holding the JSONL splits (default: generate from config)")

    p = sub.add_parser("grad-check", help="finite-difference check of every loss on the toy model")
    _common(p)
    p.add_argument("--alpha", type=float, default=0.2)
    p.add_argument("--tau", type=float, default=0.05)
    p.add_argument("--adapter-rank", type=int, default=4, help="also check InfoNCE through adapters; 0 skips")
    p.add_argument("--samples", type=int, default=32)
    return parser


def load_config(args, stage: Optional[str] = None) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    s1 = getattr(args, "stage1_steps", None)
    s2 = getattr(args, "stage2_steps", None)
    steps = getattr(args, "steps", None)
    if steps is not None:
        if stage == "1":
            s1 = steps
        elif stage == "2":
            s2 = steps
        else:
            raise CommandError("--steps needs a single stage; use --stage1-steps/--stage2-steps")
    return cfg.with_overrides(
        seed=args.seed,
        out_dir=args.out,
        alpha=getattr(args, "alpha", None),
        tau=getattr(args, "tau", None),
        stage1_steps=s1,
        stage2_steps=s2,
        adapter_rank=getattr(args, "adapter_rank", None),
    )


def corpus_splits(cfg: RunConfig, data_dir: Optional[Path] = None):
    """(train, held_out) loaded from ``data_dir`` or generated from the config."""
    if data_dir is not None:
        return load_pairs_jsonl(data_dir / TRAIN_FILE), load_pairs_jsonl(data_dir / HELD_OUT_FILE)
    d = cfg.data
    pairs = generate_synthetic_pairs(d.seed, d.count, d.synthetic)
    train, held = split_pairs(pairs, d.split, d.seed)
    return train, held


def _held_out(cfg: RunConfig, held):
    n = cfg.eval.max_queries
    return held if n is None else held[:n]


def _prepare_out(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    return out


def cmd_gen_data(args) -> int:
    cfg = load_config(args)
    if args.count is not None:
        d = cfg.to_dict()
        d["data"]["count"] = args.count
        cfg = RunConfig.from_dict(d)
    if args.seed is not None:
        d = cfg.to_dict()
        d["data"]["seed"] = args.seed
        cfg = RunConfig.from_dict(d)
    out = _prepare_out(cfg)
    train, held = corpus_splits(cfg)
    write_pairs_jsonl(train, out / TRAIN_FILE)
    write_pairs_jsonl(held, out / HELD_OUT_FILE)
    print(f"wrote {len(train)} train and {len(held)} held-out pairs to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args, stage=args.stage)
    out = _prepare_out(cfg)
    train, _ = corpus_splits(cfg, args.data)
    if args.init is not None:
        params, model_cfg = load_checkpoint(args.init)
        if model_cfg != cfg.model:
            log.warning("checkpoint model config differs from run config; using the checkpoint's")
    else:
        params = init_params(cfg.model, cfg.seed)
    if args.stage in ("1", "both"):
        params, report = train_stage1(params, train, cfg.stage1, log_every=50, logger=log)
        report.to_csv(out / "stage1_report.csv")
        save_checkpoint(params, params.config, out / "stage1.ckpt")
        print(f"stage I: final l_stage1={report.records[-1]['l_stage1']:.4f}" if report.records else "stage I: 0 steps")
    if args.stage in ("2", "both"):
        params, report = train_stage2(params, train, cfg.stage2, log_every=50, logger=log)
        report.to_csv(out / "stage2_report.csv")
        save_checkpoint(params, params.config, out / "stage2.ckpt")
        print(f"stage II: final info_nce={report.records[-1]['info_nce']:.4f}" if report.records else "stage II: 0 steps")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args)
    out = _prepare_out(cfg)
    _, held = corpus_splits(cfg, args.data)
    if args.checkpoint is not None:
        params, _ = load_checkpoint(args.checkpoint)
        label = args.label or args.checkpoint.stem
    else:
        params = init_params(cfg.model, cfg.seed)
        label = args.label or "untrained"
    report = evaluate_pairs(
        params, _held_out(cfg, held), label=label, seed=cfg.seed, corpus="synthetic", batch_size=cfg.eval.batch_size
    )
    write_reports_csv([report], out / "eval.csv")
    text = format_reports([report])
    (out / "eval.txt").write_text(text + "\n")
    print(text)
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args)
    out = _prepare_out(cfg)
    train, held = corpus_splits(cfg, args.data)
    if args.axis == "stage":
        grid = AblationGrid.stage_axis(cfg.stage1.alpha, steps_matched=args.steps_matched)
    else:
        grid = AblationGrid.alpha_axis(ALPHAS)
    result = run_ablation(
        grid,
        train,
        _held_out(cfg, held),
        args.seeds,
        model_config=cfg.model,
        stage1=cfg.stage1,
        stage2=cfg.stage2,
        eval_batch_size=cfg.eval.batch_size,
        log=log.info,
    )
    result.write(out)
    print(result.summary())
    return 0


def cmd_grad_check(args) -> int:
    cfg = load_config(args)
    out = _prepare_out(cfg)
    reports = run_grad_suite(
        seed=cfg.seed,
        alpha=args.alpha,
        tau=args.tau,
        adapter_rank=args.adapter_rank or None,
        samples=args.samples,
    )
    lines = []
    for kind, report in reports.items():
        lines += [f"== {kind}", report.format(), ""]
    ok = all(r.passed for r in reports.values())
    lines.append("grad-check " + ("PASS" if ok else "FAIL"))
    text = "\n".join(lines)
    (out / "grad_check.txt").write_text(text + "\n")
    print(text)
    return 0 if ok else 1


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "grad-check": cmd_grad_check,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        return COMMANDS[args.command](args)
    except (CommandError, CheckpointError, PairFormatError, ValueError, OSError) as exc:
        print(f"anchor-embed {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
