"""Command-line pipeline: train, saliency, oracle, prune, finetune, eval,
and report. Every artifact-producing command writes a manifest.json next
to its outputs so a run can be reproduced from the directory alone.

Exit codes: 0 success, 2 configuration problems, 3 numeric failures,
4 malformed files.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as _dt
import json
import subprocess
import sys
from pathlib import Path

import numpy as np

from .data import open_dataset
from .errors import ConfigError, GfbsError
from .netgraph import (
    build_coupling_groups,
    build_network,
    count_flops,
    load_checkpoint,
    parse_spec,
    save_checkpoint,
)
from .oracle import (
    bottom_fraction_overlap,
    oracle_delta_loss,
    spearman,
    spot_check_zero_equivalence,
    write_oracle_csv,
)
from .saliency import (
    PruneConfig,
    read_saliency_csv,
    saliency_records,
    write_saliency_csv,
)
from .surgeon import apply_prune, plan_prune, validate_plan, write_plan
from .trainer import (
    TrainConfig,
    classify_finetune_config,
    classify_train_config,
    denoise_finetune_config,
    denoise_train_config,
    evaluate,
    finetune as run_finetune,
    train as run_train,
    write_metrics,
)

DEFAULT_LAMBDAS = (0.0, 0.005, 0.05, 0.5)


def _timestamp() -> str:
    return _dt.datetime.now().strftime("%Y%m%d-%H%M%S")


def _git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


def _outdir(args) -> Path:
    out = Path(args.out) if args.out else Path("runs") / _timestamp()
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, command: str, args, extra: dict | None = None) -> None:
    doc = {
        "command": command,
        "argv": sys.argv[1:] if sys.argv[0].endswith(("gfbs", "cli.py")) else None,
        "args": {k: (str(v) if isinstance(v, Path) else v)
                 for k, v in vars(args).items() if k != "func"},
        "seed": getattr(args, "seed", None),
        "git_describe": _git_describe(),
        "out_dir": str(out),
        "written_at": _dt.datetime.now().isoformat(timespec="seconds"),
    }
    if extra:
        doc.update(extra)
    with open(out / "manifest.json", "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def _train_config(args, data) -> TrainConfig:
    presets = {
        "classify": classify_train_config,
        "classify_finetune": classify_finetune_config,
        "denoise": denoise_train_config,
        "denoise_finetune": denoise_finetune_config,
    }
    name = args.preset
    if name == "auto":
        name = "denoise" if data.task == "denoise" else "classify"
    elif name == "auto_finetune":
        name = "denoise_finetune" if data.task == "denoise" else "classify_finetune"
    cfg = presets[name](seed=args.seed)
    overrides = {}
    if args.config:
        with open(args.config) as fh:
            overrides.update(json.load(fh))
    for field_name in ("epochs", "batch_size", "lr"):
        value = getattr(args, field_name, None)
        if value is not None:
            overrides[field_name] = value
    if overrides:
        bad = set(overrides) - set(TrainConfig.__dataclass_fields__)
        if bad:
            raise ConfigError(f"unknown train config fields: {sorted(bad)}")
        merged = {**vars(cfg), **overrides}
        milestones = tuple(merged["lr_milestones"])
        if "lr_milestones" not in overrides:
            # a shortened run keeps only the milestones it can still reach
            milestones = tuple(m for m in milestones if m < merged["epochs"])
        merged["lr_milestones"] = milestones
        cfg = TrainConfig(**merged)
    return cfg


def _add_train_flags(sp) -> None:
    sp.add_argument("--config", help="JSON file of training-config overrides")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch-size", type=int, dest="batch_size")
    sp.add_argument("--lr", type=float)


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    out = _outdir(args)
    with open(args.spec) as fh:
        spec = parse_spec(fh.read())
    data = open_dataset(args.data)
    net = build_network(spec, seed=args.seed)
    cfg = _train_config(args, data)
    history = run_train(net, data, cfg, ckpt_path=out / "baseline.ckpt")
    write_metrics(history, out / "metrics.csv")
    final = [m for m in history if m.split == "test"][-1]
    print(f"trained {spec.name}: test loss {final.loss:.4f} metric {final.metric:.4f}")
    _write_manifest(out, "train", args, {"final_metric": final.metric})
    return 0


def cmd_saliency(args) -> int:
    out = _outdir(args)
    net = load_checkpoint(args.ckpt)
    data = open_dataset(args.data)
    cfg = PruneConfig(lam=args.lam, criterion=args.criterion,
                      batch_size=args.batch_size, seed=args.seed)
    x, y = data.capture_batch(cfg.batch_size)
    loss_kind = "mse" if data.task == "denoise" else "cross_entropy"
    records = saliency_records(net, x, y, loss_kind, cfg)
    write_saliency_csv(records, out / "saliency.csv")
    # the CSV drops the filter-norm fields; keep a lossless copy as well
    with open(out / "records.json", "w") as fh:
        json.dump([dataclasses.asdict(r) for r in records], fh, indent=2)
        fh.write("\n")
    prunable = sum(1 for r in records if r.group >= 0)
    print(f"scored {len(records)} channels ({prunable} prunable) "
          f"with {cfg.criterion}, lambda={cfg.lam}")
    _write_manifest(out, "saliency", args, {"channels": len(records)})
    return 0


def cmd_oracle(args) -> int:
    out = _outdir(args)
    net = load_checkpoint(args.ckpt)
    data = open_dataset(args.data)
    x, y = data.capture_batch(args.batch_size)
    loss_kind = "mse" if data.task == "denoise" else "cross_entropy"
    records = oracle_delta_loss(net, x, y, loss_kind)
    write_oracle_csv(records, out / "oracle.csv")
    summary: dict = {"groups": len(records)}

    rng = np.random.default_rng(args.seed)
    refs = [g.members[0] for g in build_coupling_groups(net.spec)]
    if refs:
        picks = [refs[i] for i in rng.choice(len(refs), min(5, len(refs)), replace=False)]
        summary["zero_equivalence_max_diff"] = spot_check_zero_equivalence(
            net, x, y, loss_kind, picks)

    if args.saliency:
        sal = read_saliency_csv(args.saliency)
        by_ref = {(r.layer, r.channel): r.score for r in sal}
        group_scores, deltas = [], []
        for r in records:
            members = [(m.layer, m.channel) for m in r.members]
            if any(m not in by_ref for m in members):
                raise ConfigError("saliency CSV does not cover the oracle's channels")
            group_scores.append(float(np.mean([by_ref[m] for m in members])))
            deltas.append(r.delta_loss)
        rho = spearman(group_scores, deltas)
        overlap, k, expect = bottom_fraction_overlap(group_scores, deltas, 0.2)
        summary.update({"spearman": rho, "bottom20_overlap": overlap,
                        "bottom20_size": k, "bottom20_random_expectation": expect})
        print(f"oracle vs saliency: spearman {rho:.3f}, "
              f"bottom-20% overlap {overlap}/{k} (random {expect:.2f})")
    else:
        print(f"oracle: {len(records)} groups probed")
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    _write_manifest(out, "oracle", args, summary)
    return 0


def cmd_prune(args) -> int:
    out = _outdir(args)
    net = load_checkpoint(args.ckpt)
    records = read_saliency_csv(args.saliency)
    cfg = PruneConfig(lam=args.lam, tau=args.tau, criterion=args.criterion,
                      min_keep=args.min_keep, seed=args.seed)
    plan = plan_prune(net, records, cfg)
    report = validate_plan(net, plan)
    if not report.ok:
        raise ConfigError("plan failed validation: " + "; ".join(report.violations))
    pruned = apply_prune(net, plan)
    write_plan(plan, out / "plan.json")
    save_checkpoint(pruned, out / "pruned.ckpt")
    base_flops = count_flops(net.spec)
    new_flops = count_flops(pruned.spec)
    with open(out / "flops.txt", "w") as fh:
        fh.write(f"baseline total {base_flops.total}\n")
        fh.write(f"pruned   total {new_flops.total}\n")
        fh.write(f"ratio {plan.flops_ratio:.6f}\n")
        for e in new_flops.entries:
            fh.write(f"  block {e.block:2d} {e.kind:14s} {e.flops:12d}  {e.detail}\n")
    note = " (shortfall: budget unreachable)" if plan.shortfall else ""
    print(f"pruned {len(plan.removed)} channels, achieved {plan.achieved_ratio:.3f} "
          f"of tau {plan.tau}, flops ratio {plan.flops_ratio:.3f}{note}")
    _write_manifest(out, "prune", args, {
        "achieved_ratio": plan.achieved_ratio, "flops_ratio": plan.flops_ratio,
        "removed": len(plan.removed), "shortfall": plan.shortfall})
    return 0


def cmd_finetune(args) -> int:
    out = _outdir(args)
    net = load_checkpoint(args.ckpt)
    data = open_dataset(args.data)
    cfg = _train_config(args, data)
    history = run_finetune(net, data, cfg, ckpt_path=out / "finetuned.ckpt")
    write_metrics(history, out / "metrics.csv")
    final = [m for m in history if m.split == "test"][-1]
    print(f"finetuned: test loss {final.loss:.4f} metric {final.metric:.4f}")
    _write_manifest(out, "finetune", args, {"final_metric": final.metric})
    return 0


def cmd_eval(args) -> int:
    net = load_checkpoint(args.ckpt)
    data = open_dataset(args.data)
    m = evaluate(net, data)
    metric_name = "psnr_db" if data.task == "denoise" else "accuracy"
    print(f"eval: loss {m.loss:.6f} {metric_name} {m.metric:.4f}")
    if args.out:
        out = _outdir(args)
        with open(out / "eval.json", "w") as fh:
            json.dump({"loss": m.loss, "metric": m.metric,
                       "metric_name": metric_name}, fh, indent=2)
            fh.write("\n")
        _write_manifest(out, "eval", args, {"metric": m.metric})
    return 0


# ---------------------------------------------------------------------------
# report


def cmd_report(args) -> int:
    out = _outdir(args)
    if args.sweep_lambda:
        return _sweep_lambda(args, out)

    root = Path(args.dir) if args.dir else out
    sections: list[str] = ["# Pruning run report", ""]
    plans = sorted(root.glob("**/plan.json"))
    for plan_path in plans:
        with open(plan_path) as fh:
            doc = json.load(fh)
        sections.append(f"## Plan `{plan_path.relative_to(root)}`")
        sections.append("")
        sections.append(f"spec `{doc['spec_name']}`, criterion {doc['criterion']}, "
                        f"lambda {doc['lambda']}, tau {doc['tau']}, "
                        f"achieved {doc['achieved_ratio']:.3f}, "
                        f"flops ratio {doc['flops_ratio']:.3f}")
        sections.append("")
        sections.append("| layer slot | kept channels |")
        sections.append("|---|---|")
        for idx, kept in enumerate(doc["kept_per_layer"]):
            sections.append(f"| {idx} | {len(kept)} |")
        sections.append("")
    metrics = sorted(root.glob("**/metrics.csv"))
    if metrics:
        sections.append("## Final metrics")
        sections.append("")
        sections.append("| run | split | loss | metric |")
        sections.append("|---|---|---|---|")
        for mpath in metrics:
            rows = mpath.read_text().strip().splitlines()[1:]
            if not rows:
                continue
            last_test = [r for r in rows if r.split(",")[1] == "test"]
            if last_test:
                _, split, lval, mval = last_test[-1].split(",")
                sections.append(f"| {mpath.parent.relative_to(root)} | {split} "
                                f"| {float(lval):.4f} | {float(mval):.4f} |")
        sections.append("")
    summaries = sorted(root.glob("**/summary.json"))
    for spath in summaries:
        with open(spath) as fh:
            doc = json.load(fh)
        if "spearman" in doc:
            sections.append(f"## Oracle agreement `{spath.parent.relative_to(root)}`")
            sections.append("")
            sections.append(f"Spearman rho {doc['spearman']:.3f}; bottom-20% overlap "
                            f"{doc['bottom20_overlap']}/{doc['bottom20_size']} "
                            f"(random {doc['bottom20_random_expectation']:.2f})")
            sections.append("")
    (out / "report.md").write_text("\n".join(sections) + "\n")
    print(f"report written to {out / 'report.md'}")
    _write_manifest(out, "report", args)
    return 0


def _sweep_lambda(args, out: Path) -> int:
    """Score/prune/finetune/eval once per lambda with a shared budget."""
    net = load_checkpoint(args.ckpt)
    data = open_dataset(args.data)
    loss_kind = "mse" if data.task == "denoise" else "cross_entropy"
    lambdas = [float(s) for s in args.lambdas.split(",")] if args.lambdas \
        else list(DEFAULT_LAMBDAS)
    ft_cfg = _train_config(args, data)
    x, y = data.capture_batch(args.probe_batch)
    rows = []
    for lam in lambdas:
        sub = out / f"lambda_{lam:g}"
        sub.mkdir(parents=True, exist_ok=True)
        cfg = PruneConfig(lam=lam, tau=args.tau, min_keep=args.min_keep,
                          batch_size=args.probe_batch, seed=args.seed)
        records = saliency_records(net.clone(), x, y, loss_kind, cfg)
        write_saliency_csv(records, sub / "saliency.csv")
        plan = plan_prune(net, records, cfg)
        write_plan(plan, sub / "plan.json")
        pruned = apply_prune(net, plan)
        run_finetune(pruned, data, ft_cfg)
        m = evaluate(pruned, data)
        save_checkpoint(pruned, sub / "finetuned.ckpt")
        rows.append((lam, plan.achieved_ratio, plan.flops_ratio, m.metric))
    lines = ["# Lambda sweep", "",
             f"tau {args.tau}, finetune epochs {ft_cfg.epochs}", "",
             "| lambda | achieved ratio | flops ratio | final metric |",
             "|---|---|---|---|"]
    for lam, ach, fr, metric in rows:
        lines.append(f"| {lam:g} | {ach:.3f} | {fr:.3f} | {metric:.4f} |")
    (out / "report.md").write_text("\n".join(lines) + "\n")
    best = max(rows, key=lambda r: r[3])
    print(f"lambda sweep done; best metric {best[3]:.4f} at lambda={best[0]:g}")
    _write_manifest(out, "report", args, {"sweep": [list(r) for r in rows]})
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gfbs",
        description="Channel pruning by norm-parameter saliency: train, score, "
                    "prune, finetune, and report on desk-scale networks.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--out", help="output directory (default runs/<timestamp>)")
        sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("train", help="train a baseline network")
    sp.add_argument("--spec", required=True, help="network spec file")
    sp.add_argument("--data", required=True, help="dataset descriptor")
    sp.add_argument("--preset", default="auto",
                    choices=["auto", "classify", "denoise"])
    _add_train_flags(sp)
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("saliency", help="score channels on a probe batch")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--lambda", dest="lam", type=float, default=0.05)
    sp.add_argument("--criterion", default="gfbs",
                    choices=["gfbs", "gamma_only", "beta_only", "l1_filter"])
    sp.add_argument("--batch-size", dest="batch_size", type=int, default=64)
    common(sp)
    sp.set_defaults(func=cmd_saliency)

    sp = sub.add_parser("oracle", help="brute-force loss deltas per group")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--saliency", help="saliency CSV to correlate against")
    sp.add_argument("--batch-size", dest="batch_size", type=int, default=64)
    common(sp)
    sp.set_defaults(func=cmd_oracle)

    sp = sub.add_parser("prune", help="plan and apply surgery")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--saliency", required=True, help="saliency CSV")
    sp.add_argument("--tau", type=float, default=0.5)
    sp.add_argument("--min-keep", dest="min_keep", type=int, default=4)
    sp.add_argument("--lambda", dest="lam", type=float, default=0.05)
    sp.add_argument("--criterion", default="gfbs",
                    choices=["gfbs", "gamma_only", "beta_only", "l1_filter"])
    common(sp)
    sp.set_defaults(func=cmd_prune)

    sp = sub.add_parser("finetune", help="retrain a pruned checkpoint")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--preset", default="auto_finetune",
                    choices=["auto_finetune", "classify_finetune", "denoise_finetune",
                             "classify", "denoise"])
    _add_train_flags(sp)
    common(sp)
    sp.set_defaults(func=cmd_finetune)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    common(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("report", help="aggregate artifacts or run a lambda sweep")
    sp.add_argument("--dir", help="directory of existing run artifacts")
    sp.add_argument("--sweep-lambda", action="store_true", dest="sweep_lambda")
    sp.add_argument("--ckpt", help="baseline checkpoint (sweep mode)")
    sp.add_argument("--data", help="dataset descriptor (sweep mode)")
    sp.add_argument("--lambdas", help="comma list, default 0,0.005,0.05,0.5")
    sp.add_argument("--tau", type=float, default=0.2)
    sp.add_argument("--min-keep", dest="min_keep", type=int, default=4)
    sp.add_argument("--probe-batch", dest="probe_batch", type=int, default=64,
                    help="batch size for the saliency capture")
    sp.add_argument("--preset", default="auto_finetune",
                    choices=["auto_finetune", "classify_finetune", "denoise_finetune"])
    _add_train_flags(sp)
    common(sp)
    sp.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "report" and args.sweep_lambda:
        if not args.ckpt or not args.data:
            parser.error("--sweep-lambda needs --ckpt and --data")
    if args.command == "report" and not args.sweep_lambda and not args.dir:
        parser.error("report needs --dir (or --sweep-lambda with --ckpt/--data)")
    try:
        return args.func(args)
    except GfbsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
