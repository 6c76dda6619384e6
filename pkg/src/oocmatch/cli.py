"""Command-line entry point: gen-data, train, eval, sweep, gradcheck, ttest.

Every subcommand accepts ``--config PATH`` pointing at a JSON object with
optional sections::

    {"train": {...TrainConfig fields...},
     "inference": {"iou_threshold": 0.5, "sim_threshold": 0.93},
     "data": {"train_size": 200, "test_size": 100}}

Flags given on the command line override the file. Failures print one line
``error: <Kind>: <message>`` to stderr and exit 1; usage errors exit 2.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .data import dataset_digest, generate_test_split, generate_train_split, read_jsonl, write_jsonl
from .encoders import load_checkpoint, save_checkpoint
from .errors import OOCError
from .harness import DEFAULT_SIZES, MODEL_TAGS, TEST_SEED, sweep, write_summary
from .inference import Thresholds
from .metrics import evaluate
from .stats import paired_t_test
from .training import SCHEDULES, TrainConfig, train

DATA_KEYS = {"train_size": 200, "test_size": 100, "test_seed": TEST_SEED}
INFERENCE_KEYS = ("iou_threshold", "sim_threshold")


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    thresholds: Thresholds = field(default_factory=Thresholds)
    data: dict = field(default_factory=lambda: dict(DATA_KEYS))

    @classmethod
    def load(cls, path) -> RunConfig:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ValueError(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ValueError(f"config {path} must hold a JSON object")
        unknown = set(raw) - {"train", "inference", "data"}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        inference = raw.get("inference", {})
        bad = set(inference) - set(INFERENCE_KEYS)
        if bad:
            raise ValueError(f"unknown inference keys: {sorted(bad)}")
        data = dict(DATA_KEYS)
        bad = set(raw.get("data", {})) - set(DATA_KEYS)
        if bad:
            raise ValueError(f"unknown data keys: {sorted(bad)}")
        data.update(raw.get("data", {}))
        return cls(TrainConfig.from_mapping(raw.get("train", {})), Thresholds(**inference), data)

    def to_dict(self) -> dict:
        return {"train": asdict(self.train), "inference": asdict(self.thresholds), "data": dict(self.data)}


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _schedule_list(text: str) -> list[str]:
    items = [x.strip() for x in text.split(",") if x.strip()]
    bad = [x for x in items if x not in SCHEDULES]
    if bad or not items:
        raise argparse.ArgumentTypeError(f"schedules must be drawn from {','.join(SCHEDULES)}, got {text!r}")
    return items


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int, help="run seed (overrides config)")
    p.add_argument("--out", default=".", help="output directory")


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--tau", type=float, help="contrastive temperature")
    p.add_argument("--gamma", type=float, help="matching margin")


def _threshold_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--iou-thr", type=float, help="IoU threshold of the decision rule")
    p.add_argument("--sim-thr", type=float, help="caption-similarity threshold of the decision rule")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="oocmatch", description="Out-of-context caption detection experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write synthetic train and test JSONL")
    _common(p)
    p.add_argument("--train-size", type=int)
    p.add_argument("--test-size", type=int)

    p = sub.add_parser("train", help="train one model and save a checkpoint")
    _common(p)
    _model_flags(p)
    p.add_argument("--schedules", type=_schedule_list, help="training schedule (exactly one)")
    p.add_argument("--data", help="training JSONL; generated from --seed when omitted")
    p.add_argument("--train-size", type=int)

    p = sub.add_parser("eval", help="evaluate a checkpoint on labelled test records")
    _common(p)
    _threshold_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="test JSONL; generated when omitted")

    p = sub.add_parser("sweep", help="training-size sweep over schedules and seeds")
    _common(p)
    _model_flags(p)
    _threshold_flags(p)
    p.add_argument("--sizes", type=_int_list, help="ascending training sizes, e.g. 50,100,150")
    p.add_argument("--schedules", type=_schedule_list, help="comma-separated schedules")
    p.add_argument("--num-seeds", type=int, default=3, help="seeds run: seed, seed+1, ...")
    p.add_argument("--test-size", type=int)
    p.add_argument("--true-caption-size", type=int, default=100,
                   help="held-out pairs for the true-caption experiment (0 to skip)")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    _common(p)
    p.add_argument("--trials", type=int, default=10)

    p = sub.add_parser("ttest", help="two-sided paired t-test")
    _common(p)
    p.add_argument("--a", type=_float_list, help="first sample, comma-separated")
    p.add_argument("--b", type=_float_list, help="second sample, comma-separated")
    p.add_argument("--metrics", help="sweep metrics.csv; compares cross and joint per size")
    return parser


def _resolve(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    for name in ("tau", "gamma"):
        if getattr(args, name, None) is not None:
            overrides[name] = getattr(args, name)
    if overrides:
        cfg.train = replace(cfg.train, **overrides)
    thr = {}
    if getattr(args, "iou_thr", None) is not None:
        thr["iou_threshold"] = args.iou_thr
    if getattr(args, "sim_thr", None) is not None:
        thr["sim_threshold"] = args.sim_thr
    if thr:
        cfg.thresholds = replace(cfg.thresholds, **thr)
    for key in ("train_size", "test_size"):
        if getattr(args, key, None) is not None:
            cfg.data[key] = getattr(args, key)
    return cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_data(args) -> int:
    cfg = _resolve(args)
    out = _out(args)
    seed = cfg.train.seed
    train_set = generate_train_split(cfg.data["train_size"], seed)
    test_set = generate_test_split(cfg.data["test_size"], cfg.data["test_seed"])
    write_jsonl(train_set, out / "train.jsonl")
    write_jsonl(test_set, out / "test.jsonl")
    print(json.dumps({"train": str(out / "train.jsonl"), "train_digest": dataset_digest(train_set),
                      "test": str(out / "test.jsonl"), "test_digest": dataset_digest(test_set)}))
    return 0


def _read_data(path) -> list:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"data file not found: {path}")
    return read_jsonl(path)


def cmd_train(args) -> int:
    cfg = _resolve(args)
    if args.schedules:
        if len(args.schedules) != 1:
            raise ValueError("train takes exactly one schedule")
        cfg.train = replace(cfg.train, schedule=args.schedules[0])
    out = _out(args)
    data = _read_data(args.data) if args.data else generate_train_split(cfg.data["train_size"], cfg.train.seed)
    result = train(data, cfg.train)
    save_checkpoint(result.model, out / "checkpoint.json")
    result.write_losses_csv(out / "losses.csv")
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    print(json.dumps({"checkpoint": str(out / "checkpoint.json"), "schedule": cfg.train.schedule,
                      "model_tag": MODEL_TAGS[cfg.train.schedule], "train_size": len(data),
                      "steps": len(result.records)}))
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    model = load_checkpoint(args.checkpoint)
    out = _out(args)
    test_set = _read_data(args.data) if args.data else generate_test_split(cfg.data["test_size"],
                                                                            cfg.data["test_seed"])
    report, preds = evaluate(model, test_set, cfg.thresholds, seed=cfg.train.seed)
    with open(out / "predictions.jsonl", "w") as fh:
        for p in preds:
            fh.write(json.dumps(p.to_json()) + "\n")
    (out / "metrics.json").write_text(json.dumps(report.as_dict(), indent=2) + "\n")
    print(json.dumps(report.as_dict()))
    return 0


def cmd_sweep(args) -> int:
    cfg = _resolve(args)
    out = _out(args)
    sizes = args.sizes or list(DEFAULT_SIZES)
    schedules = args.schedules or ["baseline", "cross", "joint"]
    seeds = [cfg.train.seed + k for k in range(args.num_seeds)]
    result = sweep(sizes, schedules, seeds, cfg.train, cfg.thresholds,
                   test_size=cfg.data["test_size"], test_seed=cfg.data["test_seed"],
                   true_caption_size=args.true_caption_size, out_dir=out, workers=args.workers)
    summary = write_summary(result, out / "summary.json")
    print(json.dumps(summary))
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import format_table, run_all

    cfg = _resolve(args)
    seed = cfg.train.seed
    results = run_all(seeds=range(seed, seed + args.trials))
    print(format_table(results))
    out = _out(args)
    with open(out / "gradcheck.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["op", "trials", "max_rel_error", "passed"])
        for r in results:
            w.writerow([r.name, r.trials, repr(r.max_rel_error), r.passed])
    return 0 if all(r.passed for r in results) else 1


def _metrics_accuracies(path) -> tuple[list[float], list[float]]:
    from .harness import read_metrics_csv

    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"metrics file not found: {path}")
    by = {}
    for row in read_metrics_csv(path):
        if row["accuracy"] is not None:
            by.setdefault((row["schedule"], row["size"]), []).append(row["accuracy"])
    sizes = sorted({n for (s, n) in by if s == "cross"} & {n for (s, n) in by if s == "joint"})
    if len(sizes) < 2:
        raise ValueError(f"{path} needs cross and joint results at 2 or more sizes")
    mean = lambda xs: sum(xs) / len(xs)  # noqa: E731
    return [mean(by[("cross", n)]) for n in sizes], [mean(by[("joint", n)]) for n in sizes]


def cmd_ttest(args) -> int:
    if args.metrics:
        a, b = _metrics_accuracies(args.metrics)
    elif args.a is not None and args.b is not None:
        a, b = args.a, args.b
    else:
        raise ValueError("give --a and --b, or --metrics")
    t, p = paired_t_test(a, b)
    print(json.dumps({"t": t, "p": p, "n": len(a)}))
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep,
            "gradcheck": cmd_gradcheck, "ttest": cmd_ttest}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (OOCError, ValueError, FileNotFoundError, ArithmeticError) as exc:
        message = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
