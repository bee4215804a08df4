"""``semu`` command line: pretraining, unlearning, baselines, evaluation, spectra, comparison.

Exit codes: 0 success, 2 configuration or validation error, 3 I/O failure,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from semu import core, diffusion, metrics, nn, pipeline
from semu.config import RunConfig, load_config
from semu.errors import ConfigError, InvalidInputError, NumericalError

logger = logging.getLogger("semu")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
CHECKPOINT, REPORT, SPECTRUM, SAMPLES, METRICS_LOG = (
    "checkpoint.json", "report.json", "spectrum.csv", "samples.csv", "metrics.csv")


def _config(args) -> RunConfig:
    if not args.config:
        raise ConfigError("--config is required for this command")
    overrides = list(args.set or [])
    if getattr(args, "mode", None):
        overrides.append(f"unlearn.mode={args.mode}")
    if getattr(args, "remain_access", False):
        overrides.append("unlearn.remain_access=true")
    if getattr(args, "both_branches", False):
        overrides.append("diffusion.both_branches=true")
    if getattr(args, "fixed_relabel", False):
        overrides.append("diffusion.fixed_relabel=true")
    return load_config(args.config, overrides)


def _outdir(args, cfg: RunConfig | None) -> Path:
    out = Path(args.output or (cfg.output_dir if cfg else "."))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8")
    logger.info("wrote %s", path)


def _load_classifier(args, cfg: RunConfig):
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required for this command")
    model, _ = nn.load_checkpoint(args.checkpoint)
    train, test = pipeline.classification_data(cfg)
    pipeline.check_compatible(model, cfg, train)
    return model, train, test


def _retrain_report(args):
    path = getattr(args, "retrain_report", None)
    return metrics.UnlearnReport.load(path) if path else None


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _outdir(args, cfg)
    if cfg.task == "diffusion":
        return cmd_diffusion_train(args, cfg)
    model, log, train, test = pipeline.pretrain(cfg)
    final = log[-1] if log else {"loss": float("nan"), "accuracy": nn.accuracy_of(model, train.x, train.y)}
    test_acc = metrics.accuracy(model, test)
    nn.save_checkpoint(out / CHECKPOINT, model, {"train": {"epochs": len(log), "final_loss": final["loss"],
                                                           "train_accuracy": final["accuracy"],
                                                           "test_accuracy": test_acc}})
    print(f"train loss {final['loss']:.4f}  train acc {final['accuracy']:.2f}  test acc {test_acc:.2f}")
    return EXIT_OK


def cmd_unlearn(args) -> int:
    cfg = _config(args)
    if cfg.task == "diffusion":
        return cmd_diffusion_unlearn(args, cfg)
    pipeline.check_remain_access(cfg)
    out = _outdir(args, cfg)
    model, train, test = _load_classifier(args, cfg)
    split = pipeline.make_split(cfg, train, test)
    run = pipeline.run_semu(cfg, model, split, log_metrics=args.log_metrics, retrain_report=_retrain_report(args))
    nn.save_checkpoint(out / CHECKPOINT, run.merged, {"semu": run.report.run})
    _write(out / REPORT, run.report.to_json())
    _write(out / SPECTRUM, core.spectrum_csv(run.spectrum))
    if args.log_metrics:
        pipeline.write_metrics_log(out / METRICS_LOG, run.history)
    table, _ = metrics.compare_table([run.report])
    print(table, end="")
    return EXIT_OK


def cmd_baseline(args) -> int:
    cfg = _config(args)
    out = _outdir(args, cfg)
    model, train, test = _load_classifier(args, cfg)
    split = pipeline.make_split(cfg, train, test)
    retrain = _retrain_report(args)
    kinds = list(dict.fromkeys(args.kind))

    def one(kind):
        trained, report = pipeline.run_baseline(cfg, model, split, kind, retrain)
        target = out if len(kinds) == 1 else out / kind
        target.mkdir(parents=True, exist_ok=True)
        nn.save_checkpoint(target / CHECKPOINT, trained)
        _write(target / REPORT, report.to_json())
        return report

    if args.jobs > 1 and len(kinds) > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            reports = list(pool.map(one, kinds))
    else:
        reports = [one(k) for k in kinds]
    table, _ = metrics.compare_table(reports, retrain)
    print(table, end="")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    out = _outdir(args, cfg)
    model, train, test = _load_classifier(args, cfg)
    split = pipeline.make_split(cfg, train, test)
    report = pipeline.evaluate_model(cfg, model, split, args.method, _retrain_report(args))
    _write(out / REPORT, report.to_json())
    print(metrics.compare_table([report])[0], end="")
    return EXIT_OK


def cmd_spectrum(args) -> int:
    cfg = _config(args)
    out = _outdir(args, cfg)
    if cfg.task == "diffusion":
        pre = pipeline.load_diffusion_checkpoint(_need_checkpoint(args))
        rows = pipeline.diffusion_spectrum(cfg, pre)
    else:
        model, train, test = _load_classifier(args, cfg)
        rows = pipeline.run_spectrum(cfg, model, pipeline.make_split(cfg, train, test))
    text = core.spectrum_csv(rows)
    _write(out / SPECTRUM, text)
    for row in rows:
        print(f"layer {row.layer_index} ({row.layer_kind}): {len(row.sigma)} singular values, r = {row.chosen_r}")
    return EXIT_OK


def cmd_compare(args) -> int:
    reports = [metrics.UnlearnReport.load(p) for p in args.reports]
    anchor = metrics.UnlearnReport.load(args.anchor) if args.anchor else None
    table, records = metrics.compare_table(reports, anchor)
    print(table, end="")
    if args.output:
        out = Path(args.output)
        out.mkdir(parents=True, exist_ok=True)
        _write(out / "compare.txt", table)
        _write(out / "compare.json", json.dumps({"anchor": args.anchor, "rows": records}, indent=2) + "\n")
    return EXIT_OK


def _need_checkpoint(args) -> str:
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required for this command")
    return args.checkpoint


def cmd_diffusion_train(args, cfg: RunConfig | None = None) -> int:
    cfg = cfg or _config(args)
    out = _outdir(args, cfg)
    pre = pipeline.diffusion_pretrain(cfg)
    ev = diffusion.evaluate_generation(pre.model, pre.oracle, pre.schedule, None, cfg.diffusion.guidance_w,
                                       cfg.diffusion.eval_samples, cfg.eval.mia_seed)
    pipeline.save_diffusion_checkpoint(out / CHECKPOINT, pre, {"train_log": pre.log,
                                                               "agreement": ev.per_class_agreement})
    last = pre.log[-1] if pre.log else {}
    print(f"denoising loss {last.get('loss', float('nan')):.4f}  "
          f"held-out {last.get('held_out_loss', float('nan')):.4f}  "
          f"oracle agreement {ev.per_class_agreement}")
    return EXIT_OK


def cmd_diffusion_unlearn(args, cfg: RunConfig | None = None) -> int:
    cfg = cfg or _config(args)
    pipeline.check_remain_access(cfg)
    out = _outdir(args, cfg)
    pre = pipeline.load_diffusion_checkpoint(_need_checkpoint(args))
    run = pipeline.diffusion_unlearn(cfg, pre)
    diffusion.save_noise_model(out / CHECKPOINT, run.theta_u, pre.schedule,
                               {"oracle": nn.model_to_dict(pre.oracle), "semu": run.report.run})
    _write(out / REPORT, run.report.to_json())
    _write(out / SPECTRUM, core.spectrum_csv(run.spectrum))
    diffusion.write_samples_csv(out / SAMPLES, run.after.samples)
    print(metrics.compare_table([run.report])[0], end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--set", action="append", metavar="K=V", help="override a config field by dotted path")
    common.add_argument("--output", help="output directory (default: config output_dir)")
    common.add_argument("--jobs", type=int, default=1, help="parallel independent tasks")
    common.add_argument("--log-metrics", action="store_true", help="write per-epoch metrics.csv")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="semu", description="Low-rank subspace machine unlearning toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.set_defaults(func=func)
        return sp

    add("train", cmd_train, "train the original model")
    for name, func, help_ in (("unlearn", cmd_unlearn, "SEMU unlearning and report"),
                              ("diffusion-unlearn", cmd_diffusion_unlearn, "SEMU unlearning of a generator class")):
        sp = add(name, func, help_)
        sp.add_argument("--checkpoint")
        sp.add_argument("--mode", choices=["forget_only", "with_remain", "with_subset"])
        sp.add_argument("--remain-access", action="store_true", help="allow reading the remaining data")
        sp.add_argument("--retrain-report", help="retrain report.json for deltas")
        if name == "diffusion-unlearn":
            sp.add_argument("--both-branches", action="store_true", help="let gradients flow through the c' branch")
            sp.add_argument("--fixed-relabel", action="store_true", help="draw c' once instead of per iteration")
    sp = add("baseline", cmd_baseline, "comparison baselines")
    sp.add_argument("--kind", action="append", required=True, help="retrain | ft | ga | rl (repeatable)")
    sp.add_argument("--checkpoint")
    sp.add_argument("--mode", choices=["forget_only", "with_remain", "with_subset"])
    sp.add_argument("--remain-access", action="store_true")
    sp.add_argument("--retrain-report")
    sp = add("eval", cmd_eval, "evaluate a checkpoint")
    sp.add_argument("--checkpoint")
    sp.add_argument("--method", default="original")
    sp.add_argument("--retrain-report")
    sp = add("spectrum", cmd_spectrum, "gradient spectra and chosen ranks")
    sp.add_argument("--checkpoint")
    sp = add("compare", cmd_compare, "side-by-side report table")
    sp.add_argument("reports", nargs="+")
    sp.add_argument("--anchor", help="report to compute deltas against")
    add("diffusion-train", cmd_diffusion_train, "train the toy conditional DDPM and oracle")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, InvalidInputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
