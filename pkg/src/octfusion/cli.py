"""Command-line entry point: ``octfusion <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import ConfigError, FusionError

log = logging.getLogger("octfusion")


def _train_overrides(args) -> dict:
    train = {}
    for flag, key in (("epochs", "epochs"), ("batch_size", "batch_size"), ("lr", "lr"), ("select", "select")):
        value = getattr(args, flag, None)
        if value is not None:
            train[key] = value
    out = {"train": train} if train else {}
    if getattr(args, "seed", None) is not None:
        out["seeds"] = [args.seed]
    if getattr(args, "output_dir", None):
        out["paths"] = {"output_dir": args.output_dir}
    return out


def _add_train_flags(p):
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--select", choices=["best", "final"])


def _single_config(path, overrides):
    from .experiment import load_configs

    cfgs = load_configs(path, overrides)
    if len(cfgs) != 1:
        raise ConfigError(f"{path} defines {len(cfgs)} experiments; this subcommand needs exactly one")
    return cfgs[0]


# ---------------------------------------------------------------- subcommands


def cmd_verify_weights(args) -> int:
    from .backbones import BACKBONE_ORDER, canonical_order, get_spec, headless_param_count, load_frozen_backbone

    status = 0
    for bid in canonical_order(args.backbones) if args.backbones else BACKBONE_ORDER:
        spec = get_spec(bid, args.weights_dir)
        try:
            fb = load_frozen_backbone(spec)
        except FusionError as exc:
            print(f"{bid.value:12s} ERROR {exc}")
            status = status or exc.exit_code
            continue
        expected = headless_param_count(bid)
        ok = "ok" if fb.param_count_headless == expected else f"MISMATCH (expected {expected:,})"
        print(f"{bid.value:12s} params={fb.param_count_headless:,} {ok} sha256={fb.weights_digest}")
        if fb.param_count_headless != expected:
            status = status or 3
    return status


def cmd_export_weights(args) -> int:
    from .backbones import BACKBONE_ORDER, canonical_order, export_weights

    out = Path(args.out)
    for bid in canonical_order(args.backbones) if args.backbones else BACKBONE_ORDER:
        path = export_weights(bid, out / f"{bid.value}.weights", args.source, args.seed)
        print(f"{bid.value:12s} -> {path}")
    return 0


def cmd_split(args) -> int:
    from .data import build_manifest, make_full_split, make_kshot_split

    manifest = build_manifest(args.data)
    if args.protocol == "kshot":
        if args.k is None:
            raise ConfigError("--k is required for the kshot protocol")
        plan = make_kshot_split(manifest, args.k, args.seed, args.subsample_pool)
    else:
        plan = make_full_split(manifest, args.seed)
    if args.out:
        plan.save(args.out)
        counts = {c: v for c, v in plan.per_class_counts.items()}
        print(json.dumps({"out": args.out, "per_class_counts": counts}))
    else:
        print(json.dumps(plan.to_dict(), indent=1))
    return 0


def cmd_cache(args) -> int:
    from .backbones import load_backbones
    from .cache import FeatureCache, cache_features, resolve_cache_dir
    from .data import SplitPlan, build_manifest

    manifest = build_manifest(args.data)
    ids = sorted(SplitPlan.load(args.split).universe()) if args.split else None
    backbones = load_backbones(args.backbones, args.weights_dir)
    cache = FeatureCache(resolve_cache_dir(args.cache_dir))
    res = cache_features(manifest, ids, backbones, cache, verify=args.verify, batch_size=args.batch_size)
    print(json.dumps({"hits": res.hits, "computed": res.computed, "failures": res.failures}, indent=1))
    return 5 if res.failures and args.strict else 0


def cmd_train(args) -> int:
    from .data import SplitPlan
    from .experiment import RunMode, make_source, make_split, train_frozen
    from .plotting import plot_history

    cfg = _single_config(args.config, _train_overrides(args))
    if cfg.mode is not RunMode.FROZEN_HEAD:
        raise ConfigError("the train subcommand trains the frozen-backbone head; use `run` for full-network baselines")
    seed = cfg.seeds[0]
    source = make_source(cfg)
    split = SplitPlan.load(args.split) if args.split else make_split(cfg, source.manifest, seed)
    out = Path(args.out)
    res = train_frozen(cfg, source, split, seed, out)
    plot_history(res["history"], out / "history.png", cfg.model_label)
    print(json.dumps({"checkpoint": res["checkpoint"], "selected_epoch": res["selected_epoch"],
                      "history": str(out / "history.csv")}))
    return 0


def cmd_evaluate(args) -> int:
    from .backbones import canonical_order
    from .data import SplitPlan
    from .experiment import evaluate_frozen, make_source
    from .head import load_head
    from .plotting import plot_confusion
    from .reporting import Layout, render_report

    cfg = _single_config(args.config, {})
    head, meta = load_head(args.checkpoint)
    if [b.value for b in canonical_order(meta["backbone_order"])] != [b.value for b in cfg.backbones]:
        raise ConfigError(f"checkpoint backbones {meta['backbone_order']} differ from config {cfg.backbones}")
    source = make_source(cfg)
    split = SplitPlan.load(args.split)
    report = evaluate_frozen(cfg, source, split, head, meta.get("seed"))
    rendered = render_report([report], Layout.TABLE2)
    print(rendered.text, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(rendered.csv)
        (out / "table.txt").write_text(rendered.text)
        plot_confusion(report.confusion, out / "confusion.png", cfg.model_label)
    return 0


def cmd_param_audit(args) -> int:
    from .experiment import load_configs, param_audit
    from .reporting import Layout, render_report

    cfgs = load_configs(args.config) if args.config else []
    rendered = render_report(param_audit(cfgs, hidden_dim=args.hidden_dim), Layout.TABLE3)
    print(rendered.csv if args.csv else rendered.text, end="")
    return 0


def _summary(records, out: Path):
    from .data import Protocol
    from .metrics import mean_report
    from .plotting import plot_accuracy
    from .reporting import Layout, render_report

    out.mkdir(parents=True, exist_ok=True)
    rows = {"full-500": [], "kshot": []}
    for rec in records:
        mean = mean_report(rec.reports) if len(rec.reports) > 1 else rec.reports[0]
        kind = "kshot" if rec.config["protocol"] == Protocol.KSHOT.value else "full-500"
        rows[kind].append(mean)
    for kind, reports in rows.items():
        if not reports:
            continue
        layout = Layout.TABLE4 if kind == "kshot" else Layout.TABLE2
        rendered = render_report(reports, layout)
        (out / f"{layout.value}.txt").write_text(rendered.text)
        (out / f"{layout.value}.csv").write_text(rendered.csv)
        plot_accuracy(reports, out / f"{layout.value}_accuracy.png")
        print(rendered.text)


def cmd_run(args) -> int:
    from .experiment import load_configs, run_experiment

    cfgs = load_configs(args.config, _train_overrides(args))
    records = []
    for cfg in cfgs:
        log.info("running %s (%s, %s)", cfg.name, cfg.model_label, cfg.split_label)
        rec = run_experiment(cfg, make_figures=not args.no_figures)
        records.append(rec)
        accs = ", ".join(f"{r.accuracy * 100:.2f}" for r in rec.reports)
        print(f"{cfg.name}: accuracy [{accs}] -> {rec.output_dir}")
    if len(records) > 1 or args.summary:
        _summary(records, Path(cfgs[0].output_dir) / "summary")
    return 0


def cmd_report(args) -> int:
    from .plotting import plot_accuracy
    from .reporting import Layout, read_metrics_csv, render_report

    reports = []
    for run in args.runs:
        path = Path(run)
        reports += read_metrics_csv(path / "metrics.csv" if path.is_dir() else path)
    if not reports:
        raise ConfigError("no metrics found")
    rendered = render_report(reports, Layout(args.layout))
    print(rendered.text, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{args.layout}.txt").write_text(rendered.text)
        (out / f"{args.layout}.csv").write_text(rendered.csv)
        plot_accuracy(reports, out / f"{args.layout}_accuracy.png")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="octfusion", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify-weights", help="load each backbone archive, print parameter counts and digests")
    p.add_argument("--weights-dir")
    p.add_argument("--backbones", nargs="+")
    p.set_defaults(func=cmd_verify_weights)

    p = sub.add_parser("export-weights", help="write headless weight archives")
    p.add_argument("--out", required=True)
    p.add_argument("--backbones", nargs="+")
    p.add_argument("--source", choices=["random", "torchvision"], default="random")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_export_weights)

    p = sub.add_parser("split", help="emit a JSON split plan")
    p.add_argument("--data", required=True)
    p.add_argument("--protocol", choices=["full_500", "kshot"], default="full_500")
    p.add_argument("--k", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--subsample-pool", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("cache", help="populate the feature cache")
    p.add_argument("--data", required=True)
    p.add_argument("--split")
    p.add_argument("--backbones", nargs="+", default=["resnet18", "densenet121", "inceptionv3"])
    p.add_argument("--weights-dir")
    p.add_argument("--cache-dir")
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--verify", action="store_true", help="re-check record checksums, recompute corrupt ones")
    p.add_argument("--strict", action="store_true", help="nonzero exit when any image failed")
    p.set_defaults(func=cmd_cache)

    p = sub.add_parser("train", help="train the task head on cached features")
    p.add_argument("--config", required=True)
    p.add_argument("--split")
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a head checkpoint on a split's test set")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("param-audit", help="trainable-parameter table")
    p.add_argument("--config")
    p.add_argument("--hidden-dim", type=int, default=1024)
    p.add_argument("--csv", action="store_true")
    p.set_defaults(func=cmd_param_audit)

    p = sub.add_parser("run", help="run every experiment in a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--output-dir")
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--summary", action="store_true", help="write summary tables even for a single experiment")
    _add_train_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="re-render tables and figures from run outputs")
    p.add_argument("runs", nargs="+", help="run directories or metrics CSV files")
    p.add_argument("--layout", choices=["table2", "table4"], default="table2")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FusionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
