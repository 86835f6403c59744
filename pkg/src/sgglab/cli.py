"""Command-line entry point: ``sgg-lab <command> [--config FILE] [--set key=value] ...``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 missing artifact.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .checkpoint import MissingArtifactError
from .config import ConfigError, RunConfig, load_config
from .core import FORMAT, AnnotationError, Dataset, PredictionFormatError, load_dataset, save_predictions
from .detector import Detector, NotTrainedError, train_detector
from .harness import config_hash, count_params, dcs_sweep, measure_latency
from .metrics import EmptyEvaluationError, MetricReport, evaluate_dataset
from .relhead import ABLATION_GRID, AblationFlags, Pipeline, RelationHead, train_relhead
from .selection import DcsCurve, dcs_fit, default_grid
from .synth import SynthConfig, dense_record, generate_dataset, write_dataset

log = logging.getLogger("sgglab")

EXIT_CONFIG, EXIT_DATA, EXIT_MISSING = 2, 3, 4


# ---------------------------------------------------------------------------
# helpers


def _write_json(path: Path, obj: dict, cfg: RunConfig) -> None:
    obj = dict(obj)
    obj["format"] = FORMAT
    obj["config_hash"] = config_hash(cfg.to_json())
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _manifest(cfg: RunConfig, command: str, **extra) -> None:
    body = {
        "command": command,
        "config": cfg.to_json(),
        "seed": cfg["seed"],
        "versions": {
            "sgglab": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "torch": torch.__version__,
        },
        **extra,
    }
    _write_json(cfg.out / f"manifest.{command}.json", body, cfg)


def _dataset(path: str) -> Dataset:
    p = Path(path)
    if not p.exists():
        raise MissingArtifactError(f"dataset not found: {p} (run synth-gen first)")
    return load_dataset(p)


def _limit(records, n: int):
    return list(records)[:n] if n > 0 else list(records)


def _detector(cfg: RunConfig, num_classes: int) -> Detector:
    opts = dict(
        noise_sigma=cfg["detector.noise_sigma"],
        score_beta=tuple(cfg["detector.score_beta"]) if cfg["detector.score_beta"] else None,
        num_clutter=cfg["detector.num_clutter"],
    )
    ckpt = cfg["detector.checkpoint"]
    default = cfg.out / "detector.npz"
    if ckpt is None and cfg["detector.mode"] == "learned" and default.exists():
        ckpt = str(default)
    if ckpt is not None:
        return Detector.load(ckpt, **opts)
    return Detector(num_classes=num_classes, seed=cfg["detector.seed"], **opts)


def _head_path(cfg: RunConfig) -> Path:
    return Path(cfg["relhead.checkpoint"] or cfg.out / "relhead.npz")


def _new_head(cfg: RunConfig, ds: Dataset, flags: str | None = None) -> RelationHead:
    return RelationHead(
        ds.categories,
        len(ds.predicates),
        flags=AblationFlags.parse(flags or cfg["relhead.flags"]),
        fusion=cfg["relhead.fusion"],
        graph_constraint=cfg["relhead.graph_constraint"],
        seed=cfg["seed"],
    )


def _pipeline(cfg: RunConfig, ds: Dataset) -> Pipeline:
    head = RelationHead.load(_head_path(cfg))
    head.graph_constraint = cfg["relhead.graph_constraint"]
    return Pipeline(_detector(cfg, len(ds.categories)), head, cfg["detector.mode"])


def _train_kwargs(cfg: RunConfig) -> dict:
    return dict(
        mode=cfg["detector.mode"],
        lr=cfg["train.lr"],
        theta=cfg["train.theta"],
        batch_size=cfg["train.batch_size"],
        optimizer=cfg["train.optimizer"],
        schedule=cfg["train.schedule"],
        seed=cfg["seed"],
    )


def _resolve_budget(cfg: RunConfig) -> tuple[int, dict]:
    budget = cfg["eval.k_budget"]
    if budget != "dcs":
        return budget, {"k_budget": budget}
    path = cfg.out / "dcs_curve.json"
    if not path.exists():
        raise MissingArtifactError(f"--k-budget dcs needs {path} (run dcs-fit first)")
    curve = DcsCurve.load(path)
    if curve.x_opt is None:
        raise MissingArtifactError(f"{path} has no fitted x_opt")
    return curve.x_opt, {"k_budget": "dcs", "x_opt": curve.x_opt, "dcs_curve": str(path)}


# ---------------------------------------------------------------------------
# commands


def cmd_synth_gen(cfg: RunConfig, args) -> None:
    n_train, n_test = cfg["synth.num_train"], cfg["synth.num_test"]
    base = SynthConfig(num_images=n_train + n_test, seed=cfg["synth.seed"], max_objects=cfg["synth.max_objects"])
    records = generate_dataset(base)
    write_dataset(base, cfg["data.train"], records[:n_train])
    write_dataset(base, cfg["data.test"], records[n_train:])
    _manifest(cfg, "synth-gen", outputs=[cfg["data.train"], cfg["data.test"]])
    print(f"wrote {n_train} train / {n_test} test images")


def cmd_train_detector(cfg: RunConfig, args) -> None:
    ds = _dataset(cfg["data.train"])
    det = Detector(num_classes=len(ds.categories), seed=cfg["detector.seed"])
    path = cfg.out / "detector.npz"
    history = train_detector(det, ds.records, cfg["detector.epochs"], cfg["detector.lr"], seed=cfg["seed"], checkpoint=path)
    _manifest(cfg, "train-detector", checkpoint=str(path), losses=history)
    print(f"detector checkpoint: {path} (final loss {history[-1]:.4f})")


def cmd_train_relhead(cfg: RunConfig, args) -> None:
    ds = _dataset(cfg["data.train"])
    det = _detector(cfg, len(ds.categories))
    head = _new_head(cfg, ds)
    path = _head_path(cfg)
    history = train_relhead(
        head, det, ds.records, epochs=cfg["train.epochs"], checkpoint=path,
        log_path=cfg.out / "train_log.jsonl", **_train_kwargs(cfg),
    )
    _manifest(cfg, "train-relhead", checkpoint=str(path), losses=history, params=count_params(head))
    print(f"relation head checkpoint: {path} (final loss {history[-1]:.4f})")


def cmd_eval(cfg: RunConfig, args) -> None:
    ds = _dataset(cfg["data.test"])
    pipe = _pipeline(cfg, ds)
    k, budget_info = _resolve_budget(cfg)
    records = _limit(ds.records, cfg["eval.limit"])
    report = evaluate_dataset(pipe, records, cfg["eval.ks"], k)
    report.params = count_params(pipe.head)["total"]
    report.extra = budget_info
    _write_json(cfg.out / "report.json", report.to_json(), cfg)
    (cfg.out / "report.md").write_text(report.table() + "\n")
    if args.predictions:
        save_predictions([pipe.forward(r, k) for r in records], cfg.out / "predictions.jsonl")
    _manifest(cfg, "eval", **budget_info, report=str(cfg.out / "report.json"))
    print(report.table())


def cmd_dcs_fit(cfg: RunConfig, args) -> None:
    ds = _dataset(cfg["data.test"])
    pipe = _pipeline(cfg, ds)
    records = _limit(ds.records, cfg["eval.limit"])
    grid = default_grid(cfg["dcs.theta"], cfg["dcs.step"])
    curve = dcs_sweep(pipe, records, grid, cfg["eval.ks"], cfg["dcs.epsilon"], cfg["dcs.theta"])
    curve.smoothing = cfg["dcs.smoothing"]
    x_opt = dcs_fit(curve)
    path = cfg.out / "dcs_curve.json"
    _write_json(path, curve.to_json(), cfg)
    from .plots import plot_artifact

    plot_artifact(path, cfg.out / "dcs_curve.png")
    _manifest(cfg, "dcs-fit", x_opt=x_opt, curve=str(path))
    print(f"x_opt = {x_opt}")


def cmd_bench(cfg: RunConfig, args) -> None:
    ds = _dataset(cfg["data.test"])
    head = RelationHead.load(_head_path(cfg))
    det = _detector(cfg, len(ds.categories))
    pipe = Pipeline(det, head, "perfect")
    image = dense_record(cfg["bench.dense_objects"], seed=cfg["seed"], num_classes=len(ds.categories))
    torch.set_num_threads(1)
    results = {}
    for k in cfg["bench.budgets"]:
        stats = measure_latency(pipe, [image], cfg["bench.warmup"], cfg["bench.reps"], k)
        results[str(k)] = stats.to_json()
        print(f"k={k:4d} pairs={stats.pair_counts} e2e p50={stats.end_to_end['p50']:.2f} ms "
              f"relation p50={stats.stages['relation']['p50']:.2f} ms")
    path = cfg.out / "latency.json"
    _write_json(path, {"budgets": results, "dense_objects": cfg["bench.dense_objects"]}, cfg)
    from .plots import plot_artifact

    plot_artifact(path, cfg.out / "latency.png")
    _manifest(cfg, "bench", latency=str(path))


def cmd_ablate(cfg: RunConfig, args) -> None:
    train = _dataset(cfg["data.train"])
    test = _dataset(cfg["data.test"])
    tr = _limit(train.records, cfg["ablate.num_train"])
    te = _limit(test.records, cfg["ablate.num_test"])
    det = _detector(cfg, len(train.categories))
    rows = []
    for label in cfg["ablate.rows"].split(","):
        head = _new_head(cfg, train, label)
        train_relhead(head, det, tr, epochs=cfg["ablate.epochs"], **_train_kwargs(cfg))
        pipe = Pipeline(det, head, cfg["detector.mode"])
        report = evaluate_dataset(pipe, te, cfg["eval.ks"], cfg["train.theta"])
        stats = measure_latency(pipe, te[:10], warmup=3, reps=20, k_budget=cfg["train.theta"])
        rows.append({
            "flags": label,
            "recall": report.recall,
            "mean_recall": report.mean_recall,
            "f1_avg": report.f1_avg,
            "latency_ms": stats.end_to_end["mean"],
            "params": count_params(head)["total"],
            "edge_input_dim": head.edge_proj.in_features,
        })
        print(f"{label:5s} mR@20={report.mean_recall[20]:.3f} R@20={report.recall[20]:.3f} "
              f"F1={report.f1_avg:.3f} latency={stats.end_to_end['mean']:.1f} ms")
    path = cfg.out / "ablation.json"
    _write_json(path, {"rows": rows}, cfg)
    (cfg.out / "ablation.md").write_text(ablation_table(rows))
    _manifest(cfg, "ablate", ablation=str(path))


def ablation_table(rows) -> str:
    lines = ["| T | V | S | U | mR@K | R@K | F1@K | Latency (ms) | Params |", "|---|---|---|---|---|---|---|---|---|"]
    for r in rows:
        marks = " | ".join("x" if c in r["flags"] else "-" for c in "TVSU")
        mr = 100 * float(np.mean(list(r["mean_recall"].values())))
        rc = 100 * float(np.mean(list(r["recall"].values())))
        lines.append(f"| {marks} | {mr:.1f} | {rc:.1f} | {100 * r['f1_avg']:.1f} | {r['latency_ms']:.1f} | {r['params']} |")
    return "\n".join(lines) + "\n"


def cmd_plot(cfg: RunConfig, args) -> None:
    from .plots import plot_artifact

    src = Path(args.artifact)
    if not src.exists():
        raise MissingArtifactError(f"artifact not found: {src}")
    out = Path(args.output) if args.output else src.with_suffix(".png")
    plot_artifact(src, out)
    print(f"wrote {out}")


COMMANDS = {
    "synth-gen": cmd_synth_gen,
    "train-detector": cmd_train_detector,
    "train-relhead": cmd_train_relhead,
    "eval": cmd_eval,
    "dcs-fit": cmd_dcs_fit,
    "bench": cmd_bench,
    "ablate": cmd_ablate,
    "plot": cmd_plot,
}

# flag -> config key
FLAG_KEYS = {
    "out": "output.dir",
    "seed": "seed",
    "train": "data.train",
    "test": "data.test",
    "mode": "detector.mode",
    "epochs": "train.epochs",
    "lr": "train.lr",
    "flags": "relhead.flags",
    "k_budget": "eval.k_budget",
    "limit": "eval.limit",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    common.add_argument("--out", help="output directory (output.dir)")
    common.add_argument("--seed")
    common.add_argument("--train", help="training annotation file (data.train)")
    common.add_argument("--test", help="evaluation annotation file (data.test)")
    common.add_argument("--mode", help="detector mode: perfect, noisy or learned")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="sgg-lab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name in ("train-relhead", "ablate"):
            p.add_argument("--epochs")
            p.add_argument("--lr")
        if name == "train-relhead":
            p.add_argument("--flags", help="ablation letters, e.g. TVS")
        if name in ("eval", "dcs-fit"):
            p.add_argument("--k-budget", dest="k_budget", help="proposal budget or 'dcs'")
            p.add_argument("--limit", help="evaluate only the first N images")
        if name == "eval":
            p.add_argument("--predictions", action="store_true", help="also write predictions.jsonl")
        if name == "plot":
            p.add_argument("artifact")
            p.add_argument("--output")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        overrides: dict[str, str] = {}
        for item in args.set:
            if "=" not in item:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            key, value = item.split("=", 1)
            overrides[key.strip()] = value.strip()
        for flag, key in FLAG_KEYS.items():
            value = getattr(args, flag, None)
            if value is not None:
                overrides[key] = str(value)
        cfg = load_config(args.config, overrides)
        cfg.out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingArtifactError, NotTrainedError) as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (AnnotationError, PredictionFormatError, EmptyEvaluationError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
