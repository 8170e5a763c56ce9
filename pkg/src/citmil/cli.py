"""Command-line interface.

Every subcommand reads an optional config file (``--config``) and flag
overrides, writes its outputs under ``--out`` and returns 0 on success, 1 on a
contract or configuration error (including bad usage) and 2 on an I/O or
format error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .cohort import (
    clinical_width,
    generate_cohort,
    generate_tile_set,
    load_cohort,
    save_cohort,
    write_summary_csv,
)
from .config import RunConfig, load_config, parse_overrides, save_config
from .encoder import MorphClassifier, PretrainResult, finetune_morph, pretrain_mae
from .errors import ConfigError, ContractError, DomainError, FormatError
from .evaluation import (
    METRICS,
    benchmark_suite,
    fold_splits,
    read_folds_csv,
    run_cv,
    run_fold,
    summarize,
    wilcoxon_exact,
    write_folds_csv,
    write_predictions_csv,
    write_report,
)
from .fusion import MODELS, PAPER_CIT_PARAMS, build_model, fusion_param_count
from .pipeline import TileEncoders, featurize_cohort, sample_cohort_tiles, train_tile_encoders
from .tensorio import load_params, save_params
from .training import write_history_csv

log = logging.getLogger("citmil")

COMMANDS = ("gen-cohort", "pretrain-mae", "finetune-morph", "extract-features", "train", "evaluate", "benchmark",
            "stats", "params")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="citmil", description="Multimodal MIL prognosis pipeline on synthetic cohorts.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--seed", type=int, help="seed (cohort seed for gen-cohort, CV seed otherwise)")
    common.add_argument("--folds", type=int, help="number of CV folds")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--model", choices=sorted(MODELS), help="fusion model")
    common.add_argument("--no-type-injection", action="store_true", help="disable morph type injection")
    common.add_argument("--clinical-mode", choices=("0m", "0m+3m"), help="clinical feature set")
    common.add_argument("--cohort", help="cohort directory (input)")
    common.add_argument("-v", "--verbose", action="store_true")

    helps = {
        "gen-cohort": "generate a synthetic cohort with tiles",
        "pretrain-mae": "MAE-pretrain the tile encoder on cohort tiles",
        "finetune-morph": "finetune the morphology classifier from a pretrained encoder",
        "extract-features": "attach frozen features and predicted types to a cohort",
        "train": "train one model on one fold",
        "evaluate": "cross-validate one model",
        "benchmark": "cross-validate all configured models and compare",
        "stats": "Wilcoxon tests from a folds.csv",
        "params": "print exact parameter counts",
    }
    cmds = {name: sub.add_parser(name, parents=[common], help=text) for name, text in helps.items()}
    cmds["finetune-morph"].add_argument("--mae", help="pretrained encoder params directory")
    cmds["extract-features"].add_argument("--mae", help="pretrained encoder params directory")
    cmds["extract-features"].add_argument("--morph", help="morph classifier params directory")
    cmds["train"].add_argument("--fold", type=int, default=0)
    cmds["stats"].add_argument("--input", required=True, help="folds.csv from evaluate or benchmark")
    cmds["stats"].add_argument("--reference", default="cit")
    cmds["params"].add_argument("--d-patch", type=int, default=768 + 5, help="patch input width (features + types)")
    cmds["params"].add_argument("--d-clin", type=int, default=59 + 5, help="clinical input width (+ type distribution)")
    return parser


def _config(args) -> RunConfig:
    pairs = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        pairs[key.strip()] = value
    overrides = parse_overrides(pairs)
    if args.seed is not None:
        key = "cohort_seed" if args.command == "gen-cohort" else "seeds"
        overrides[key] = args.seed if key == "cohort_seed" else (args.seed,)
    if args.folds is not None:
        overrides["folds"] = args.folds
    if args.model is not None:
        overrides["models"] = (args.model,)
    if args.no_type_injection:
        overrides["inject_types"] = False
    if args.clinical_mode is not None:
        overrides["clinical_mode"] = args.clinical_mode
    return load_config(args.config, **overrides)


def _setup_logging(out: Path, verbose: bool) -> logging.Handler:
    out.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out / "run.log", mode="a")
    handler.setFormatter(logging.Formatter("%(asctime)s %(name)s %(levelname)s %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.DEBUG if verbose else logging.INFO)
    return handler


def _cohort(args, cfg: RunConfig, need_features: bool):
    if args.cohort:
        cohort = load_cohort(args.cohort)
    else:
        log.info("no --cohort given; generating from config")
        cohort = generate_cohort(cfg.cohort_spec())
    if need_features and any(r.features is None for r in cohort.records):
        log.info("cohort has no features; training tile encoders")
        cohort = featurize_cohort(cohort, _encoders(cohort, cfg))
    return cohort


def _encoders(cohort, cfg: RunConfig) -> TileEncoders:
    return train_tile_encoders(cohort, cfg.mae_tiles, cfg.morph_tiles, cfg.mae_opts(), cfg.morph_opts(),
                               cfg.vit_config(), cfg.encoder_seed)


def _log_run(cfg: RunConfig, args) -> None:
    log.info("command %s seeds=%s folds=%d", args.command, list(cfg.seeds), cfg.folds)
    log.info("clinical mode %s, clinical width %d", cfg.clinical_mode, clinical_width(cfg.clinical_mode))
    for line in cfg.to_lines():
        log.debug("config %s", line)


# ---------------------------------------------------------------- commands

def cmd_gen_cohort(args, cfg, out: Path) -> None:
    cohort = generate_cohort(cfg.cohort_spec())
    save_cohort(cohort, out / "cohort")
    write_summary_csv(cohort, out / "cohort_summary.csv")
    counts = np.bincount(cohort.labels, minlength=3)
    print(f"wrote {len(cohort)} patients (CR/PR/NR = {counts.tolist()}) to {out / 'cohort'}")


def cmd_pretrain_mae(args, cfg, out: Path) -> None:
    cohort = _cohort(args, cfg, need_features=False)
    tiles = sample_cohort_tiles(cohort, cfg.mae_tiles, cfg.encoder_seed)
    res = pretrain_mae(tiles, cfg.vit_config(), cfg.mae_opts(), cfg.encoder_seed)
    save_params(res.params, out / "mae_params", {"vit": cfg.vit_config().to_dict()})
    with open(out / "mae_loss.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        w.writerows([i, repr(v)] for i, v in enumerate(res.loss_curve))
    print(f"masked MSE {res.loss_curve[0]:.5f} -> {res.loss_curve[-1]:.5f} over {cfg.mae_epochs} epochs")


def cmd_finetune_morph(args, cfg, out: Path) -> None:
    if not args.mae:
        raise ConfigError("finetune-morph needs --mae")
    pretrained, _ = load_params(args.mae)
    vit = cfg.vit_config()
    tiles, labels = generate_tile_set(cfg.morph_tiles, seed=cfg.encoder_seed + 1, size=vit.image_size)
    clf = finetune_morph(tiles, labels, pretrained, vit, cfg.morph_opts(), cfg.encoder_seed)
    save_params(clf.params, out / "morph_params", {"accuracy": clf.accuracy})
    print(f"held-out morph accuracy {clf.accuracy:.4f}")


def cmd_extract_features(args, cfg, out: Path) -> None:
    cohort = _cohort(args, cfg, need_features=False)
    if args.mae and args.morph:
        vit = cfg.vit_config()
        mae, _ = load_params(args.mae)
        morph, meta = load_params(args.morph)
        enc = TileEncoders(PretrainResult(mae, mae, [float("nan")], vit),
                           MorphClassifier(morph, vit, meta.get("accuracy", float("nan")), np.array([]), np.array([])))
    elif args.mae or args.morph:
        raise ConfigError("give both --mae and --morph, or neither")
    else:
        enc = _encoders(cohort, cfg)
    cohort = featurize_cohort(cohort, enc)
    save_cohort(cohort, out / "cohort")
    print(f"features for {len(cohort)} patients; type agreement {cohort.meta['type_agreement']:.3f}")


def cmd_train(args, cfg, out: Path) -> None:
    cohort = _cohort(args, cfg, need_features=True)
    seed, model = cfg.seeds[0], cfg.models[0]
    splits = fold_splits(cohort.labels, cfg, seed)
    if not 0 <= args.fold < len(splits):
        raise ConfigError(f"--fold must lie in 0..{len(splits) - 1}")
    res = run_fold(cohort, model, cfg, seed, args.fold, splits[args.fold])
    write_history_csv(res.history, out / "history.csv")
    write_predictions_csv([res], out / "predictions.csv")
    log.info("%s parameters: %d", model, res.n_params)
    print(f"{model} seed {seed} fold {args.fold}: " + ", ".join(f"{m}={res.metrics[m]:.4f}" for m in METRICS))


def cmd_evaluate(args, cfg, out: Path) -> None:
    cohort = _cohort(args, cfg, need_features=True)
    model = cfg.models[0]
    results = run_cv(cohort, model, cfg)
    write_folds_csv(results, out / "folds.csv")
    write_predictions_csv(results, out / "predictions.csv")
    summary = summarize(results)
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "metric", "mean", "std"])
        for metric, (mean, std) in summary.items():
            w.writerow([model, metric, repr(mean), repr(std)])
    for metric, (mean, std) in summary.items():
        print(f"{model} {metric}: {mean:.4f} +- {std:.4f}")


def cmd_benchmark(args, cfg, out: Path) -> None:
    cohort = _cohort(args, cfg, need_features=True)
    report = benchmark_suite(cohort, cfg)
    write_report(report, out)
    for model, metrics in report.summary.items():
        print(model, " ".join(f"{m}={mean:.4f}+-{std:.4f}" for m, (mean, std) in metrics.items()))
    for model, res in report.wilcoxon.items():
        print(f"{report.reference} > {model}: W={res.statistic} p={res.p_value:.3g}")


def cmd_stats(args, cfg, out: Path) -> None:
    rows = read_folds_csv(args.input)
    by_model: dict[str, dict] = {}
    for r in rows:
        by_model.setdefault(r["model"], {})[(r["seed"], r["fold"])] = r["acc"]
    if args.reference not in by_model:
        raise ConfigError(f"reference model {args.reference!r} not in {sorted(by_model)}")
    ref = by_model[args.reference]
    with open(out / "wilcoxon.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["reference", "baseline", "mean_diff", "statistic", "p_value", "n", "undefined"])
        for model, accs in by_model.items():
            if model == args.reference:
                continue
            if set(accs) != set(ref):
                raise ContractError(f"{model}: (seed, fold) keys differ from {args.reference}")
            diffs = np.array([ref[k] - accs[k] for k in sorted(ref)])
            res = wilcoxon_exact(diffs)
            w.writerow([args.reference, model, repr(float(diffs.mean())), res.statistic, repr(res.p_value), res.n,
                        int(res.undefined)])
            print(f"{args.reference} > {model}: mean diff {diffs.mean():+.4f}, W={res.statistic}, p={res.p_value:.3g}")


def cmd_params(args, cfg, out: Path) -> None:
    model_name = args.model or "cit"
    model = build_model(model_name, cfg.fusion_config(), args.d_patch, args.d_clin, np.random.default_rng(0))
    total = model.count_params()
    fusion = fusion_param_count(model)
    print(f"model {model_name}: d_h={cfg.d_h} layers={cfg.layers} heads={cfg.heads} mlp={cfg.mlp_width} "
          f"attn_dim={cfg.attn_dim}, inputs d_patch={args.d_patch} d_clin={args.d_clin}")
    print(f"total parameters: {total}")
    print(f"fusion parameters (excluding input projections): {fusion}")
    if hasattr(model, "param_breakdown"):
        for part, n in model.param_breakdown().items():
            print(f"  {part}: {n}")
    if model_name == "cit":
        msg = (f"reference figure ~{PAPER_CIT_PARAMS}: fusion count differs by {fusion - PAPER_CIT_PARAMS:+d} "
               f"({fusion / PAPER_CIT_PARAMS:.3f}x)")
        print(msg)
        log.info(msg)


HANDLERS = {
    "gen-cohort": cmd_gen_cohort,
    "pretrain-mae": cmd_pretrain_mae,
    "finetune-morph": cmd_finetune_morph,
    "extract-features": cmd_extract_features,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "benchmark": cmd_benchmark,
    "stats": cmd_stats,
    "params": cmd_params,
}


def cli(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    out = Path(args.out)
    handler = None
    try:
        cfg = _config(args)
        handler = _setup_logging(out, args.verbose)
        _log_run(cfg, args)
        save_config(cfg, out / "config.cfg")
        HANDLERS[args.command](args, cfg, out)
        return 0
    except (ConfigError, ContractError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        log.error("%s", exc)
        return 1
    except (FormatError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        log.error("%s", exc)
        return 2
    finally:
        if handler is not None:
            log.removeHandler(handler)
            handler.close()


def main() -> None:
    sys.exit(cli())


if __name__ == "__main__":
    main()
