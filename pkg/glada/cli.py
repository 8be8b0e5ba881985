"""Command line: synth, pretrain, run, eval, export-embeddings, summary."""
import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from .config import ADV_MODES, MODES, ScenarioConfig, load_scenario_config, scenario_from_dict
from .dataio import SynthSpec, load_dataset, make_synthetic_pair, save_dataset, split_train_test
from .errors import ConfigError, GladaError
from .metrics import write_jsonl
from .nets import load_net, save_net, seed_everything
from .pipeline import (
    EMBEDDINGS_FILENAME,
    CHECKPOINT_DIR,
    evaluate,
    export_embeddings,
    run_scenario,
    setup_run_log,
    summarize_reports,
)
from .pretrain import encoder_config_for, pretrain_source

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FAILURE = 2

log = logging.getLogger(__name__)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting with status 2."""

    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _add_scenario_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, metavar="PATH", help="Scenario JSON file")
    p.add_argument("--source", type=Path, metavar="DIR", help="Source dataset directory (instead of --config)")
    p.add_argument("--target", type=Path, metavar="DIR", help="Target dataset directory (instead of --config)")
    p.add_argument("--seed", type=int, help="Override seed")
    p.add_argument("--mode", choices=MODES, help="uda or ssda")
    p.add_argument("--no-lca", action="store_true", help="Disable local class alignment (ablation)")
    p.add_argument("--adv-mode", choices=ADV_MODES, help="Adversarial loss variant")
    p.add_argument("--out", type=Path, metavar="DIR", help="Output directory")
    p.add_argument("--source-only", action="store_true", help="Pretrain and evaluate without adaptation")
    p.add_argument("--export-embeddings", action="store_true", help=f"Also write {EMBEDDINGS_FILENAME}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="glada", description="Time-series domain adaptation: pseudo-labels, GFA, LCA")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="Write a synthetic source/target dataset pair and a scenario.json")
    p.add_argument("--out", type=Path, required=True, metavar="DIR")
    p.add_argument("--classes", type=int, default=6)
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--channels", type=int, default=3)
    p.add_argument("--length", type=int, default=128)
    p.add_argument("--amplitude-scale", type=float, default=1.0)
    p.add_argument("--phase-offset", type=float, default=0.0)
    p.add_argument("--frequency-shift", type=float, default=0.0, help="target frequency drift in cycles per window")
    p.add_argument("--frequency-jitter", type=float, default=0.0, help="per-sample spread of the drift")
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("pretrain", help="Pretrain the source model and save its checkpoints")
    _add_scenario_flags(p)

    p = sub.add_parser("run", help="Run a full scenario")
    _add_scenario_flags(p)

    p = sub.add_parser("eval", help="Evaluate an encoder + classifier checkpoint on a labeled dataset")
    p.add_argument("--encoder", type=Path, required=True, metavar="DIR")
    p.add_argument("--classifier", type=Path, required=True, metavar="DIR")
    p.add_argument("--data", type=Path, required=True, metavar="DIR")
    p.add_argument("--json", type=Path, metavar="PATH", help="Also write the scores as JSON")

    p = sub.add_parser("export-embeddings", help="Re-export test-set embeddings from a finished run")
    _add_scenario_flags(p)
    p.add_argument("--run", type=Path, required=True, metavar="DIR", help="Run output directory with checkpoints/")

    p = sub.add_parser("summary", help="Table of every report.json under a directory")
    p.add_argument("root", type=Path)
    return parser


def scenario_from_args(args: argparse.Namespace) -> ScenarioConfig:
    """Config file (or --source/--target) with CLI overrides applied."""
    if args.config is not None:
        cfg = load_scenario_config(args.config)
    elif args.source is not None and args.target is not None:
        cfg = scenario_from_dict({"source_path": args.source, "target_path": args.target})
    else:
        raise UsageError("either --config or both --source and --target are required")
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.mode is not None:
        overrides["mode"] = args.mode
    if args.out is not None:
        overrides["output_dir"] = args.out
    if args.source_only:
        overrides["source_only"] = True
    if args.export_embeddings:
        overrides["export_embeddings"] = True
    hp_overrides = {}
    if args.no_lca:
        hp_overrides["lca_enabled"] = False
    if args.adv_mode is not None:
        hp_overrides["adv_loss_mode"] = args.adv_mode
    if hp_overrides:
        overrides["hyperparams"] = replace(cfg.hyperparams, **hp_overrides)
    return replace(cfg, **overrides) if overrides else cfg


def _cmd_synth(args: argparse.Namespace) -> int:
    spec = SynthSpec(
        num_classes=args.classes,
        samples_per_class=args.per_class,
        channels=args.channels,
        length=args.length,
        amplitude_scale=args.amplitude_scale,
        phase_offset=args.phase_offset,
        frequency_shift=args.frequency_shift,
        frequency_jitter=args.frequency_jitter,
        noise_std=args.noise,
        seed=args.seed,
    )
    source, target = make_synthetic_pair(spec)
    out = args.out
    save_dataset(source, out / "source")
    save_dataset(target, out / "target")
    scenario = {"source_path": "source", "target_path": "target", "output_dir": "run", "seed": args.seed}
    with open(out / "scenario.json", "w", encoding="utf-8") as f:
        json.dump(scenario, f, indent=2)
        f.write("\n")
    print(f"Wrote {out / 'source'}, {out / 'target'} and {out / 'scenario.json'}", file=sys.stderr)
    return EXIT_OK


def _cmd_pretrain(args: argparse.Namespace) -> int:
    cfg = scenario_from_args(args)
    setup_run_log(cfg.output_dir)
    seed_everything(cfg.seed)
    cfg.check_paths()
    source = load_dataset(cfg.source_path)
    split = split_train_test(source, cfg.train_ratio, cfg.seed)
    encoder, classifier, history = pretrain_source(split.train, cfg.hyperparams, cfg.seed,
                                                   encoder_config_for(source, cfg.encoder_preset))
    write_jsonl(cfg.output_dir / "pretrain_history.jsonl", history)
    save_net(encoder, cfg.output_dir / CHECKPOINT_DIR / "source_encoder")
    save_net(classifier, cfg.output_dir / CHECKPOINT_DIR / "source_classifier")
    result = evaluate(encoder, classifier, split.test)
    print(f"source-test MF1: {100 * result.macro_f1:.2f}")
    return EXIT_OK


def _cmd_run(args: argparse.Namespace) -> int:
    cfg = scenario_from_args(args)
    report = run_scenario(cfg)
    line = f"target-test MF1: {100 * report.target_test_macro_f1:.2f}"
    if report.source_only_target_macro_f1 is not None and not report.source_only:
        line += f" (source-only {100 * report.source_only_target_macro_f1:.2f})"
    print(line)
    return EXIT_OK


def _cmd_eval(args: argparse.Namespace) -> int:
    encoder = load_net(args.encoder)
    classifier = load_net(args.classifier)
    if encoder.role != "encoder" or classifier.role != "classifier":
        raise ConfigError("--encoder/--classifier must point at encoder and classifier checkpoints")
    result = evaluate(encoder, classifier, load_dataset(args.data))
    print(f"MF1: {100 * result.macro_f1:.2f}")
    print("per-class F1: " + " ".join(f"{100 * v:.2f}" for v in result.f1_per_class))
    if args.json is not None:
        with open(args.json, "w", encoding="utf-8") as f:
            json.dump(result.to_dict(), f, indent=2)
    return EXIT_OK


def _cmd_export(args: argparse.Namespace) -> int:
    cfg = scenario_from_args(args)
    cfg.check_paths()
    ckpt = args.run / CHECKPOINT_DIR
    encoder_s = load_net(ckpt / "source_encoder")
    encoder_t = load_net(ckpt / "target_encoder")
    src_test = split_train_test(load_dataset(cfg.source_path), cfg.train_ratio, cfg.seed).test
    tgt_test = split_train_test(load_dataset(cfg.target_path), cfg.train_ratio, cfg.seed + 1).test
    path = export_embeddings(encoder_s, encoder_t, src_test, tgt_test, args.run / EMBEDDINGS_FILENAME)
    print(f"Wrote {path}", file=sys.stderr)
    return EXIT_OK


def _pct(value: Optional[float]) -> str:
    return "-" if value is None else f"{100 * value:.2f}"


def _cmd_summary(args: argparse.Namespace) -> int:
    from rich.console import Console
    from rich.table import Table

    rows = summarize_reports(args.root)
    if not rows:
        print(f"No reports under {args.root}", file=sys.stderr)
        return EXIT_FAILURE
    table = Table(title=f"Runs under {args.root} (MF1 x100)")
    for column in ("run", "mode", "adv", "LCA", "seed", "target MF1", "source-only MF1", "pseudo-label MF1"):
        table.add_column(column, justify="right" if "MF1" in column or column == "seed" else "left")
    for r in rows:
        table.add_row(
            r["run"], str(r["mode"]), str(r["adv_loss_mode"]),
            "on" if r["lca_enabled"] else "off",
            str(r["seed"]), _pct(r["target_test_macro_f1"]), _pct(r["source_only_target_macro_f1"]),
            _pct(r["pseudo_label_macro_f1"]),
        )
    Console().print(table)
    return EXIT_OK


COMMANDS = {
    "synth": _cmd_synth,
    "pretrain": _cmd_pretrain,
    "run": _cmd_run,
    "eval": _cmd_eval,
    "export-embeddings": _cmd_export,
    "summary": _cmd_summary,
}


def cli_main(argv: Optional[Sequence[str]] = None) -> int:
    """Exit 0 on success, 1 on usage error, 2 on runtime failure."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return int(e.code or 0)
    except KeyboardInterrupt:
        print("\nInterrupted by user.", file=sys.stderr)
        return EXIT_FAILURE
    except (GladaError, OSError, RuntimeError, ValueError) as e:
        log.debug("command failed", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE
