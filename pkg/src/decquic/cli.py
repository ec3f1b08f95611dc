"""Command-line pipeline: generate -> featurize -> train -> eval -> aggregate.

Every subcommand accepts --config CONFIG_ECHO.json to rerun with a previous
invocation's effective parameters, and writes its own config echo (all
effective parameters plus derived quantities and the tool version) into the
output directory.  All randomness derives from --seed (fallback: the
DECQUIC_SEED environment variable).  Exit codes: 0 success, 1 validation or
runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .errors import DecquicError
from .evaluation import (
    SplitPlan,
    cap,
    emit_reports,
    per_class_stats,
    split,
    split_audit,
    trace_report,
)
from .featurize import (
    AugmentSpec,
    WindowSpec,
    featurize_dataset,
    load_image_dataset,
    read_image_manifest,
)
from .losses import LossParams
from .model import (
    ModelConfig,
    TINY_CONFIG,
    TrainConfig,
    grid_search,
    load_model,
    predict_batch,
    save_model,
    train,
)
from .synth import GenConfig, PRESETS, generate_dataset
from .trace import load_trace, read_manifest

log = logging.getLogger("decquic")


def _resolve_seed(value) -> int:
    if value is not None:
        return int(value)
    env = os.environ.get("DECQUIC_SEED")
    return int(env) if env else 0


def _write_echo(out_dir: Path, subcommand: str, params: dict, derived: dict | None = None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    echo = {
        "tool_version": __version__,
        "subcommand": subcommand,
        "params": params,
        "derived": derived or {},
    }
    path = out_dir / f"{subcommand}_config.json"
    path.write_text(json.dumps(echo, indent=2, sort_keys=True) + "\n")
    log.info("config echo written to %s", path)


def _echo_params(args: argparse.Namespace) -> dict:
    skip = {"func", "config", "log_level"}
    return {k: v for k, v in vars(args).items() if k not in skip}


def _window_spec(args: argparse.Namespace) -> WindowSpec:
    return WindowSpec(
        window_s=args.window,
        overlap=args.overlap,
        time_bins=args.bins,
        length_bins=args.bins,
        max_len=args.max_len,
    )


def _filter_rows(rows: list[dict], audit_path: str | None, side: str) -> list[dict]:
    if audit_path is None:
        return rows
    audit = json.loads(Path(audit_path).read_text())
    keep = set(audit[f"{side}_trace_ids"])
    filtered = [r for r in rows if r["trace_id"] in keep]
    if not filtered:
        raise DecquicError(f"no manifest rows left after filtering to {side} traces of {audit_path}")
    return filtered


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_generate(args: argparse.Namespace) -> int:
    seed = _resolve_seed(args.seed)
    profiles = PRESETS[args.preset]()
    config = GenConfig(
        seed=seed,
        n_traces=args.n_traces,
        profiles=profiles,
        trace_duration_s=args.duration,
    )
    out_dir = Path(args.out)
    manifest = generate_dataset(config, out_dir, workers=args.threads)
    log.info("wrote %d traces to %s", args.n_traces, manifest)
    _write_echo(
        out_dir,
        "generate",
        {**_echo_params(args), "seed": seed},
        {"profiles": [p.profile_id for p in profiles], "manifest": manifest.name},
    )
    print(f"generated {args.n_traces} traces ({args.preset}) -> {manifest}")
    return 0


def cmd_featurize(args: argparse.Namespace) -> int:
    seed = _resolve_seed(args.seed)
    spec = _window_spec(args)
    aug = AugmentSpec() if args.augment else None
    out_dir = Path(args.out)
    manifest = featurize_dataset(
        Path(args.in_dir) / "manifest.csv",
        out_dir,
        spec,
        aug=aug,
        seed=seed,
        max_label=args.max_label,
        workers=args.threads,
    )
    n_images = len(read_image_manifest(manifest))
    log.info("wrote %d images to %s", n_images, manifest)
    _write_echo(
        out_dir,
        "featurize",
        {**_echo_params(args), "seed": seed},
        {
            "dt_s": spec.dt_s,
            "dl_bytes": spec.dl_bytes,
            "stride_s": spec.stride_s,
            "n_images": n_images,
            "manifest": manifest.name,
        },
    )
    print(f"featurized {n_images} images (T={args.window}s, overlap={args.overlap}) -> {manifest}")
    return 0


def _model_config(args: argparse.Namespace) -> ModelConfig:
    return TINY_CONFIG if getattr(args, "tiny", False) else ModelConfig()


def cmd_train(args: argparse.Namespace) -> int:
    seed = _resolve_seed(args.seed)
    ckpt_path = Path(args.out)
    out_dir = ckpt_path.parent
    out_dir.mkdir(parents=True, exist_ok=True)

    manifest = Path(args.manifest)
    rows = read_image_manifest(manifest)
    audit = None
    if args.split != "none":
        plan = SplitPlan(
            mode=args.split,
            train_ratio=args.train_ratio,
            holdout_servers=tuple(args.holdout or ()),
            seed=seed,
        )
        train_rows, test_rows = split(rows, plan)
        audit = split_audit(train_rows, test_rows, plan)
        for name, side_rows in (("train_images.csv", train_rows), ("test_images.csv", test_rows)):
            _write_rows_manifest(out_dir / name, side_rows, manifest.parent)
        emit_reports(out_dir, audit=audit)
        log.info(
            "split %s: %d train / %d test images", args.split, len(train_rows), len(test_rows)
        )
    else:
        train_rows = rows

    dataset = load_image_dataset(manifest, rows=train_rows)
    loss = LossParams(alpha=args.alpha, beta=args.beta, gamma=args.gamma)
    tconf = TrainConfig(
        batch_size=args.batch_size,
        lr=args.lr,
        max_epochs=args.max_epochs,
        val_fraction=args.val_fraction,
        early_stop_patience=args.patience,
        seed=seed,
        loss=loss,
    )
    aug = None if args.no_augment else AugmentSpec()
    model = train(dataset, _model_config(args), tconf, augment_spec=aug, log=log.info)
    save_model(model, ckpt_path)

    from .report import training_curves_figure

    training_curves_figure(model.history, out_dir / "training_curves.png")
    _write_echo(out_dir, "train", {**_echo_params(args), "seed": seed}, {"checkpoint": ckpt_path.name})
    best = min(model.history, key=lambda h: h["val_loss"])
    print(
        f"trained {len(model.history)} epochs; best val_loss {best['val_loss']:.4f} "
        f"(val CAP±1 {best['val_cap1']:.3f}) -> {ckpt_path}"
    )
    return 0


def _write_rows_manifest(path: Path, rows: list[dict], source_base: Path) -> None:
    import csv

    from .featurize import IMAGE_MANIFEST_COLUMNS

    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(IMAGE_MANIFEST_COLUMNS)
        for r in rows:
            rel = os.path.relpath(source_base / r["image_path"], path.parent)
            writer.writerow(
                [rel, r["label"], r["trace_id"], r["window_index"], r["window_start_s"], r["server_id"]]
            )


def cmd_gridsearch(args: argparse.Namespace) -> int:
    seed = _resolve_seed(args.seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    tconf = TrainConfig(
        batch_size=args.batch_size,
        max_epochs=args.max_epochs,
        val_fraction=args.val_fraction,
        seed=seed,
    )
    best, rows = grid_search(
        Path(args.manifest),
        _model_config(args),
        tconf,
        alphas=args.alphas,
        betas=args.betas,
        gammas=args.gammas,
        out_csv=out_dir / "grid.csv",
        log=log.info,
    )
    best_d = {"alpha": best.alpha, "beta": best.beta, "gamma": best.gamma}
    (out_dir / "best_params.json").write_text(json.dumps(best_d, indent=2, sort_keys=True) + "\n")
    _write_echo(out_dir, "gridsearch", {**_echo_params(args), "seed": seed}, {"n_rows": len(rows)})
    print(f"grid search over {len(rows)} combinations; best {best_d} -> {out_dir / 'grid.csv'}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    out_dir = Path(args.out)
    model = load_model(args.model)
    manifest = Path(args.manifest)
    rows = _filter_rows(read_image_manifest(manifest), args.split_audit, args.side)
    dataset = load_image_dataset(manifest, rows=rows)
    preds = predict_batch(model, dataset.images)

    ks = args.cap or [1, 2]
    cap_reports = [cap(dataset.labels, preds, k) for k in sorted(set(ks))]
    stats = per_class_stats(dataset.labels, preds)
    emit_reports(out_dir, cap_reports=cap_reports, class_stats=stats)

    if not args.no_figures:
        from .report import label_histogram_figure, per_class_box_figure

        per_class_box_figure(stats, out_dir / "per_class_box.png")
        label_histogram_figure(dataset.labels, out_dir / "label_histogram.png")

    _write_echo(out_dir, "eval", _echo_params(args), {"n_images": len(dataset)})
    for r in cap_reports:
        print(f"CAP±{r.k}: {r.fraction:.4f}  (n={r.n})")
    return 0


def cmd_aggregate(args: argparse.Namespace) -> int:
    out_dir = Path(args.out)
    model = load_model(args.model)
    spec = WindowSpec(window_s=args.window, overlap=0.0, time_bins=args.bins, length_bins=args.bins)
    manifest = Path(args.traces) / "manifest.csv"
    rows = _filter_rows([r.__dict__ for r in read_manifest(manifest)], args.split_audit, args.side)

    traces = (load_trace_row(r, manifest.parent) for r in rows)
    report = trace_report(model, traces, spec, k=args.tolerance)
    emit_reports(out_dir, trace_rows=report.rows)

    if not args.no_figures:
        from .report import scatter_figure

        scatter_figure(report.rows, out_dir / "trace_scatter.png")

    _write_echo(out_dir, "aggregate", _echo_params(args), {"n_traces": len(report.rows)})
    print(
        f"aggregated {len(report.rows)} traces; ±{report.tolerance_k} tolerance accuracy "
        f"{report.tolerance_fraction:.4f}"
    )
    return 0


def load_trace_row(row: dict, base_dir: Path):
    from .trace import ManifestRow

    return load_trace(ManifestRow(**row), base_dir)


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _float_list(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x]


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(
        prog="decquic",
        description="Estimate HTTP/3 response counts in QUIC traces from window images.",
    )
    parser.add_argument("--version", action="version", version=f"decquic {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    by_name: dict[str, argparse.ArgumentParser] = {}

    def add_sub(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="config-echo JSON whose params become defaults")
        p.add_argument("--log-level", default="warning", choices=["debug", "info", "warning", "error"])
        p.add_argument("--seed", type=int, default=None, help="global seed (fallback: DECQUIC_SEED)")
        by_name[name] = p
        return p

    p = add_sub("generate", "generate a synthetic labeled trace dataset")
    p.add_argument("--n-traces", type=int, default=200)
    p.add_argument("--duration", type=float, default=3.0, help="trace duration in seconds")
    p.add_argument("--preset", default="full-range", choices=sorted(PRESETS))
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = add_sub("featurize", "turn traces into labeled window images")
    p.add_argument("--in", dest="in_dir", required=True, help="trace dataset directory")
    p.add_argument("--window", type=float, default=0.3, help="window length T in seconds")
    p.add_argument("--overlap", type=float, default=0.9)
    p.add_argument("--bins", type=int, default=32, help="time and length bins (M = N)")
    p.add_argument("--max-len", type=int, default=1500, help="max packet length L in bytes")
    p.add_argument("--augment", action="store_true", help="noise-augment minority-class images")
    p.add_argument("--max-label", type=int, default=20, help="exclude images with larger labels")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_featurize)

    p = add_sub("train", "train the response-count estimator")
    p.add_argument("--manifest", required=True, help="image manifest CSV")
    p.add_argument("--window", type=float, default=0.3, help="recorded window length (metadata)")
    p.add_argument("--alpha", type=float, default=0.7)
    p.add_argument("--beta", type=float, default=0.4)
    p.add_argument("--gamma", type=float, default=2.0)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--max-epochs", type=int, default=30)
    p.add_argument("--patience", type=int, default=6, help="early stopping patience (epochs)")
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--split", default="none", choices=["none", "known", "unknown"])
    p.add_argument("--train-ratio", type=float, default=0.8)
    p.add_argument("--holdout", action="append", help="holdout server id (give twice)")
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--tiny", action="store_true", help="use the tiny debug architecture")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train)

    p = add_sub("gridsearch", "grid-search the loss mixing parameters")
    p.add_argument("--manifest", required=True)
    p.add_argument("--alphas", type=_float_list, default=[0.0, 0.3, 0.5, 0.7, 1.0])
    p.add_argument("--betas", type=_float_list, default=[0.0, 0.4, 0.6, 1.0])
    p.add_argument("--gammas", type=_float_list, default=[1.0, 2.0, 3.0])
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--max-epochs", type=int, default=8)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--tiny", action="store_true")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gridsearch)

    p = add_sub("eval", "CAP metrics and per-class statistics on an image set")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--cap", type=int, action="append", help="tolerance k (repeatable; default 1 2)")
    p.add_argument("--split-audit", help="split_audit.json to filter traces with")
    p.add_argument("--side", default="test", choices=["train", "test"])
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = add_sub("aggregate", "whole-trace response-count estimation")
    p.add_argument("--model", required=True)
    p.add_argument("--traces", required=True, help="trace dataset directory")
    p.add_argument("--window", type=float, default=0.3)
    p.add_argument("--bins", type=int, default=32)
    p.add_argument("--tolerance", type=int, default=3)
    p.add_argument("--split-audit", help="split_audit.json to filter traces with")
    p.add_argument("--side", default="test", choices=["train", "test"])
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_aggregate)

    return parser, by_name


def _scan_config(argv: list[str]) -> tuple[str | None, str | None]:
    """Find (subcommand, --config value) without triggering required-arg checks."""
    config = None
    subcommand = None
    it = iter(range(len(argv)))
    for i in it:
        tok = argv[i]
        if tok == "--config" and i + 1 < len(argv):
            config = argv[i + 1]
            next(it, None)
        elif tok.startswith("--config="):
            config = tok.split("=", 1)[1]
        elif subcommand is None and not tok.startswith("-"):
            subcommand = tok
    return subcommand, config


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, by_name = build_parser()
    subcommand, config_path = _scan_config(argv)
    if config_path and subcommand in by_name:
        loaded = json.loads(Path(config_path).read_text())
        params = {k: v for k, v in loaded.get("params", {}).items() if v is not None}
        subparser = by_name[subcommand]
        subparser.set_defaults(**params)
        for action in subparser._actions:
            if action.required and action.dest in params:
                action.required = False
    args = parser.parse_args(argv)

    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except DecquicError as exc:
        print(f"decquic: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"decquic: I/O error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
