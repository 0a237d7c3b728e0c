"""Command-line entry point: generate, train, evaluate, attention, ablate.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 missing file,
4 invalid configuration or data.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import __version__
from .config import ConfigError, TrainConfig, read_config, write_config
from .data import DataError, generate_synthetic, load_dataset, save_dataset, split_train_test
from .evaluation import (
    component_purity,
    concept_anchors,
    evaluate,
    influence_graph,
    relevance_matrix,
    run_ablations,
    write_ablation_table,
    write_dot,
    write_relevance,
)
from .seeding import sub_seed
from .training import (
    CheckpointError,
    TrainingError,
    load_checkpoint,
    read_checkpoint_header,
    save_checkpoint,
    train,
)

log = logging.getLogger("sakt")

EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_INVALID = 4

# TrainConfig fields exposed as per-verb flags; seed has its own top-level flag
_CONFIG_FLAGS = [f for f in fields(TrainConfig) if f.name != "seed"]


class UsageError(Exception):
    pass


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model/training overrides (take precedence over --config)")
    for f in _CONFIG_FLAGS:
        flag = "--" + f.name.replace("_", "-")
        if f.type == "bool":
            g.add_argument(flag, dest=f.name, action="store_const", const=True, default=None)
        else:
            kind = {"int": int, "float": float}.get(f.type, str)
            g.add_argument(flag, dest=f.name, type=kind, default=None, metavar=f.type.upper())


def _add_data_flags(p: argparse.ArgumentParser, required: bool = True) -> None:
    p.add_argument("--data", required=required, help="interaction CSV")
    p.add_argument("--student-col", default="user_id")
    p.add_argument("--exercise-col", default="skill_id")
    p.add_argument("--correct-col", default="correct")
    p.add_argument("--order-by", default=None, help="column to sort events by (default: file order)")
    p.add_argument("--skip-invalid", action="store_true", help="drop malformed rows instead of failing")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--threads", type=int, default=1, help="worker threads (default: serial)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="sakt", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="verb", required=True, metavar="VERB")

    p = sub.add_parser("generate", parents=[common], help="simulate an IRT dataset")
    p.add_argument("--students", type=int, default=4000)
    p.add_argument("--exercises", type=int, default=50)
    p.add_argument("--concepts", type=int, default=5)
    p.add_argument("--guess", type=float, default=0.0)
    p.add_argument("--ability-std", type=float, default=2.0)
    p.add_argument("--difficulty-std", type=float, default=1.0)
    p.add_argument("--out", required=True, help="CSV path; a .json sidecar is written next to it")

    p = sub.add_parser("train", parents=[common], help="train on a dataset's training split")
    _add_data_flags(p)
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--fraction", type=float, default=0.8, help="training share of students")
    p.add_argument("--out", required=True, help="output directory")
    _add_config_flags(p)

    p = sub.add_parser("evaluate", parents=[common], help="score a checkpoint")
    _add_data_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("test", "train", "all"), default="test")
    p.add_argument("--out", help="JSON report path")

    p = sub.add_parser("attention", parents=[common], help="export relevance matrix and influence graph")
    _add_data_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("test", "train", "all"), default="all")
    p.add_argument("--block", type=int, default=-1, help="attention block to read (default: last)")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("ablate", parents=[common], help="train every architecture variant")
    _add_data_flags(p)
    p.add_argument("--config", help="base config file")
    p.add_argument("--fraction", type=float, default=0.8)
    p.add_argument("--name", default=None, help="dataset column label (default: CSV stem)")
    p.add_argument("--out", required=True, help="output directory")
    _add_config_flags(p)
    return parser


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _require_file(path: str | None, what: str) -> Path:
    if path is None:
        raise UsageError(f"{what} path is required")
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _resolve_config(args) -> TrainConfig:
    cfg = read_config(_require_file(args.config, "config")) if args.config else TrainConfig()
    overrides = {f.name: getattr(args, f.name) for f in _CONFIG_FLAGS}
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if args.seed is not None:
        overrides["seed"] = args.seed
    return cfg.replace(**overrides) if overrides else cfg


def _load_data(args):
    return load_dataset(
        _require_file(args.data, "data file"),
        student_col=args.student_col,
        exercise_col=args.exercise_col,
        correct_col=args.correct_col,
        order_by=args.order_by,
        skip_invalid=args.skip_invalid,
    )


def _split(dataset, seed: int, fraction: float):
    return split_train_test(dataset, fraction, sub_seed(seed, "split"))


def _select(dataset, seed, fraction, which):
    if which == "all":
        return dataset
    train_set, test_set = _split(dataset, seed, fraction)
    return train_set if which == "train" else test_set


def _announce(paths) -> None:
    for p in paths:
        print(f"wrote {p}")


# ---------------------------------------------------------------------------
# verbs
# ---------------------------------------------------------------------------


def cmd_generate(args) -> None:
    seed = 0 if args.seed is None else args.seed
    ds = generate_synthetic(
        num_students=args.students,
        num_exercises=args.exercises,
        num_concepts=args.concepts,
        guess=args.guess,
        seed=sub_seed(seed, "data"),
        ability_std=args.ability_std,
        difficulty_std=args.difficulty_std,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _announce(save_dataset(ds, out))


def cmd_train(args) -> None:
    cfg = _resolve_config(args)
    dataset = _load_data(args)
    train_set, test_set = _split(dataset, cfg.seed, args.fraction)
    log.info(
        "training on %d students, testing on %d (E=%d)",
        len(train_set), len(test_set), dataset.num_exercises,
    )  # fmt: skip
    params, history = train(train_set, test_set, cfg, threads=args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = save_checkpoint(
        params, cfg, out / "model.ckpt", history, extra={"fraction": args.fraction}
    )
    hist = history.to_csv(out / "history.csv")
    cfg_path = out / "config.txt"
    write_config(cfg, cfg_path)
    _announce([ckpt, hist, cfg_path])


def _checkpoint_and_data(args):
    ckpt = _require_file(args.checkpoint, "checkpoint")
    params, cfg, _ = load_checkpoint(ckpt)
    fraction = read_checkpoint_header(ckpt).get("extra", {}).get("fraction", 0.8)
    dataset = _load_data(args)
    if dataset.num_exercises != params.num_exercises:
        raise DataError(
            f"data has {dataset.num_exercises} exercises, checkpoint expects {params.num_exercises}"
        )
    return params, cfg, dataset, fraction


def cmd_evaluate(args) -> None:
    params, cfg, dataset, fraction = _checkpoint_and_data(args)
    subset = _select(dataset, cfg.seed, fraction, args.split)
    test_auc, test_loss = evaluate(params, subset, cfg)
    print(f"auc {test_auc:.6f}")
    print(f"loss {test_loss:.6f}")
    if args.out:
        report = {
            "auc": test_auc,
            "loss": test_loss,
            "split": args.split,
            "students": len(subset),
            "checkpoint": str(args.checkpoint),
            "data": str(args.data),
        }
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        _announce([out])


def cmd_attention(args) -> None:
    params, cfg, dataset, fraction = _checkpoint_and_data(args)
    subset = _select(dataset, cfg.seed, fraction, args.split)
    rel = relevance_matrix(params, subset, cfg, block=args.block)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = list(write_relevance(rel, out / "relevance.csv"))
    anchors = concept_anchors(dataset.concept_of) if dataset.concept_of else []
    graph = influence_graph(rel, anchors, dataset.concept_of)
    paths.append(write_dot(graph, out / "influence.dot", labels=dataset.id_map))
    if dataset.concept_of:
        print(f"purity {component_purity(graph, dataset.concept_of):.6f}")
    _announce(paths)


def cmd_ablate(args) -> None:
    cfg = _resolve_config(args)
    dataset = _load_data(args)
    train_set, test_set = _split(dataset, cfg.seed, args.fraction)
    results = run_ablations(cfg, train_set, test_set, threads=args.threads)
    for r in results:
        print(f"{r.architecture}\t{r.auc:.6f}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    name = args.name or Path(args.data).stem
    _announce([write_ablation_table(results, out / "ablation.csv", dataset_name=name)])


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "attention": cmd_attention,
    "ablate": cmd_ablate,
}


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    if args.threads < 1:
        print("sakt: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        COMMANDS[args.verb](args)
    except UsageError as exc:
        print(f"sakt: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"sakt: error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ConfigError, DataError, CheckpointError, ValueError) as exc:
        print(f"sakt: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except TrainingError as exc:
        print(f"sakt: error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
