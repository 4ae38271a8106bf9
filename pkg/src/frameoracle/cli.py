"""Command-line entry points: train, mine, select, eval, stats.

Every subcommand takes ``--seed`` and ``--config``. The config is a JSON
object; recognised keys are::

    {
      "variant": "frames16",
      "backends": {"kind": "planted", "n_examples": 600, ...},
      "model": {...SelectorConfig overrides...},
      "steps": {"3": 600},
      "stages": {"4": {...StageConfig overrides...}},
      "holdout": 100,
      "tokens_per_frame": 727.75,
      "mining": {"max_iterations": 10, "retries": 2}
    }

Without a ``backends`` entry a planted world seeded by ``--seed`` is used.

Exit status: 0 on success, 1 on invalid input (including bad flags), 2 when a
backend fails.
"""

from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch

from .backends import BackendError, BackendSuite, PlantedWorld, suite_from_config
from .core import AnnotatedExample, CandidateSet, PromptEncoding, TaskRecord, TrainExample, load_records, validation_errors
from .curriculum import StageError, run_curriculum, stage_configs_from_mapping
from .harness import TOKENS_PER_FRAME, evaluate, parse_mode, read_embeddings, select, select_topk
from .mining import MiningConfig, build_dataset, read_corpus
from .model import SelectorConfig, load_checkpoint
from .stats import write_stats

log = logging.getLogger("frameoracle")

EXIT_OK, EXIT_INVALID, EXIT_BACKEND = 0, 1, 2
DEFAULT_WORLD_SIZE = 600
DEFAULT_HOLDOUT = 100


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for backend failures here.
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ------------------------------------------------------------------ helpers


def _load_config(path: str | None) -> dict[str, Any]:
    if not path:
        return {}
    with open(path, encoding="utf-8") as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    return cfg


def _variant(args, cfg) -> str:
    return getattr(args, "variant", None) or cfg.get("variant", "frames16")


def _backends(args, cfg, n_frames: int) -> tuple[BackendSuite, PlantedWorld | None]:
    bcfg = dict(cfg.get("backends") or {"kind": "planted"})
    if bcfg.get("kind", "planted") == "planted":
        bcfg.setdefault("seed", args.seed)
        bcfg.setdefault("n_examples", DEFAULT_WORLD_SIZE)
        bcfg.setdefault("n_frames", n_frames)
    return suite_from_config(bcfg)


def _parse_stages(text: str) -> list[int]:
    m = re.fullmatch(r"([1-4])(?:-([1-4]))?", text)
    if not m:
        raise ValueError(f"--stages must look like '1-4' or '3', got {text!r}")
    lo, hi = int(m.group(1)), int(m.group(2) or m.group(1))
    if hi < lo:
        raise ValueError(f"empty stage range {text!r}")
    return list(range(lo, hi + 1))


def _examples_from_records(records: Sequence[AnnotatedExample], suite: BackendSuite, n_frames: int) -> list[TrainExample]:
    suite.require("visual_encoder", "text_encoder")
    out = []
    for r in records:
        errs = validation_errors(r)
        if errs:
            raise ValueError(f"record {r.id}: {'; '.join(errs)}")
        task = TaskRecord(r.id, r.video, r.question, r.ground_truth_answer, r.duration)
        out.append(TrainExample(task, suite.visual_encoder(r.video, n_frames), suite.text_encoder(r.question), r))
    return out


def _world_split(world: PlantedWorld, holdout: int, part: str) -> list[TrainExample]:
    if not 0 <= holdout < world.n_examples:
        raise ValueError(f"holdout={holdout} must be in [0, {world.n_examples})")
    cut = world.n_examples - holdout
    ids = range(cut) if part == "train" else range(cut, world.n_examples) if holdout else range(world.n_examples)
    return world.examples(list(ids))


def _dataset(args, cfg, suite, world, n_frames: int, part: str) -> list[TrainExample]:
    if args.dataset:
        return _examples_from_records(load_records(args.dataset), suite, n_frames)
    if world is None:
        raise ValueError("--dataset is required when the backends are not a planted world")
    holdout = args.holdout if args.holdout is not None else int(cfg.get("holdout", DEFAULT_HOLDOUT))
    return _world_split(world, holdout, part)


def _emit(obj: Any, out: str | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=False)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n", encoding="utf-8")
    print(text)


# ----------------------------------------------------------------- commands


def cmd_train(args, cfg) -> int:
    variant = _variant(args, cfg)
    stages = _parse_stages(args.stages)
    model_cfg = SelectorConfig.for_variant(variant, **cfg.get("model", {}))
    configs = [c for c in stage_configs_from_mapping(cfg, variant) if c.stage in stages]
    params = None
    if args.init:
        params, _ = load_checkpoint(args.init)
    elif stages[0] != 1:
        raise ValueError("starting after stage 1 needs --init <checkpoint>")
    suite, world = _backends(args, cfg, model_cfg.max_frames)
    data = _dataset(args, cfg, suite, world, model_cfg.max_frames, "train")
    torch.manual_seed(args.seed)
    result = run_curriculum(
        args.seed,
        variant,
        {s: data for s in stages},
        suite,
        model_config=model_cfg,
        stage_configs=configs,
        checkpoint_dir=args.out,
        params=params,
    )
    summary = {
        "variant": variant,
        "stages": stages,
        "n_train": len(data),
        "checkpoints": {str(s): str(p) for s, p in result.checkpoints.items()},
        "final_loss": {str(s): h[-1]["loss"] if h else None for s, h in result.stage_logs.items()},
    }
    _emit(summary, None)
    return EXIT_OK


def cmd_mine(args, cfg) -> int:
    suite, world = _backends(args, cfg, int((cfg.get("backends") or {}).get("n_frames", 64)))
    suite.require("agent")
    if args.corpus:
        corpus = read_corpus(args.corpus)
    elif world is not None:
        corpus = world.corpus()
    else:
        raise ValueError("--corpus is required when the backends are not a planted world")
    if args.limit is not None:
        corpus = corpus[: args.limit]
    mcfg = MiningConfig(**cfg.get("mining", {}))
    build = build_dataset(corpus, suite.agent, suite.verifiers, args.lambda_rel, mcfg, workers=args.workers)
    build.write(args.out)
    _emit({"n_input": len(corpus), "n_retained": len(build.records), "discards": dict(sorted(build.discards.items())), "out": args.out}, None)
    return EXIT_OK


def cmd_select(args, cfg) -> int:
    params, _ = load_checkpoint(args.checkpoint)
    fixed = parse_mode(args.mode)
    suite = world = None
    if args.embeddings:
        frames = CandidateSet.uniform(args.video or args.embeddings, read_embeddings(args.embeddings), args.duration)
    elif args.video:
        suite, world = _backends(args, cfg, params.config.max_frames)
        suite.require("visual_encoder")
        frames = suite.visual_encoder(args.video, params.config.max_frames)
    else:
        raise ValueError("give --embeddings FILE or --video ID")
    if args.prompt_tokens:
        prompt = PromptEncoding(args.prompt, read_embeddings(args.prompt_tokens))
    else:
        if suite is None:
            suite, world = _backends(args, cfg, params.config.max_frames)
        suite.require("text_encoder")
        prompt = suite.text_encoder(args.prompt)
    result = select(params, frames, prompt) if fixed is None else select_topk(params, frames, prompt, fixed)
    ts = [frames.timestamps_s[i] for i in result.selected_indices]
    _emit(
        {
            "video": frames.video_id,
            "mode": args.mode,
            "chosen_k": result.chosen_k,
            "selected_indices": list(result.selected_indices),
            "selected_frame_indices": [int(frames.frame_indices[i]) for i in result.selected_indices],
            "selected_timestamps": [round(float(t), 3) for t in ts],
            "scores": [round(float(s), 6) for s in result.scores.scores],
            "k_probs": [round(float(p), 6) for p in result.k_distribution.probs],
        },
        args.out,
    )
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    params, _ = load_checkpoint(args.checkpoint)
    parse_mode(args.mode)
    suite, world = _backends(args, cfg, params.config.max_frames)
    data = _dataset(args, cfg, suite, world, params.config.max_frames, "test")
    report = evaluate(params, data, suite, args.mode, float(cfg.get("tokens_per_frame", TOKENS_PER_FRAME)), workers=args.workers)
    _emit(report.to_dict(), args.out)
    return EXIT_OK


def cmd_stats(args, cfg) -> int:
    records = load_records(args.dataset)
    for r in records:
        errs = validation_errors(r)
        if errs:
            raise ValueError(f"record {r.id}: {'; '.join(errs)}")
    summary = write_stats(records, args.out, plots=not args.no_plots)
    (Path(args.out) / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    _emit(summary, None)
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="global seed (default 0)")
    common.add_argument("--config", help="JSON config file")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="frameoracle", description="Adaptive keyframe selection for video QA.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", parents=[common], help="run curriculum stages")
    t.add_argument("--variant", choices=("frames16", "frames64"))
    t.add_argument("--stages", default="1-4", help="stage range, e.g. 1-4 or 3-4")
    t.add_argument("--init", help="checkpoint to continue from")
    t.add_argument("--dataset", help="annotated records (JSON/JSONL); default: planted world")
    t.add_argument("--holdout", type=int, help="planted examples kept out of training")
    t.add_argument("--out", default="runs/train", help="checkpoint directory")
    t.set_defaults(fn=cmd_train)

    m = sub.add_parser("mine", parents=[common], help="build an annotated dataset with the mining agent")
    m.add_argument("--corpus", help="JSONL rows with video, question, answer[, id, duration]")
    m.add_argument("--lambda", dest="lambda_rel", type=int, default=4, help="relevance threshold for keyframes")
    m.add_argument("--limit", type=int, help="mine only the first N rows")
    m.add_argument("--workers", type=int, default=4)
    m.add_argument("--out", default="runs/mined")
    m.set_defaults(fn=cmd_mine)

    s = sub.add_parser("select", parents=[common], help="select frames for one video and prompt")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--embeddings", help="frame embedding file (N x D)")
    s.add_argument("--video", help="video id for the visual-encoder backend")
    s.add_argument("--duration", type=float, default=0.0, help="video length in seconds (with --embeddings)")
    s.add_argument("--prompt", required=True, help="question text")
    s.add_argument("--prompt-tokens", help="prompt token embedding file; default: text-encoder backend")
    s.add_argument("--mode", default="adaptive", help="adaptive or topk:K")
    s.add_argument("--out", help="also write the result JSON here")
    s.set_defaults(fn=cmd_select)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", help="annotated records; default: planted held-out split")
    e.add_argument("--holdout", type=int, help="size of the planted held-out split")
    e.add_argument("--mode", default="adaptive", help="adaptive or topk:K")
    e.add_argument("--workers", type=int, default=4)
    e.add_argument("--out", help="also write the report JSON here")
    e.set_defaults(fn=cmd_eval)

    st = sub.add_parser("stats", parents=[common], help="keyframe and duration statistics")
    st.add_argument("--dataset", required=True)
    st.add_argument("--out", default="runs/stats")
    st.add_argument("--no-plots", action="store_true", help="CSV only, skip PNG rendering")
    st.set_defaults(fn=cmd_stats)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    np.random.seed(args.seed)
    try:
        return args.fn(args, _load_config(args.config))
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except StageError as exc:
        cause = exc.__cause__
        print(f"training failed: {exc}" + (f" (last checkpoint: {exc.last_checkpoint})" if exc.last_checkpoint else ""), file=sys.stderr)
        return EXIT_BACKEND if isinstance(cause, BackendError) else EXIT_INVALID
    except (ValueError, KeyError, TypeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
