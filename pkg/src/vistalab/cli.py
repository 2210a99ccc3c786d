"""Command-line entry point: ``vistalab <command> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .autodiff import ContractError, DimensionError
from .autodiff.container import ContainerError
from .pipeline import (ConfigError, ExperimentConfig, IntegrityError, MissingCheckpointError,
                       Pipeline)
from .projector import ProjectorDivergence, VistaConfigError
from .sae import NoDirectionError, SaeConfigError
from .steering import SteeringSpecError
from .synthworld import WorldConfigError
from .toylm import TrainingFailure

COMMANDS = ("init-config", "gen-world", "train-lm", "train-sae", "train-projector",
            "eval-metrics", "steer", "sweep-layers", "encoder-sweep", "compare", "report")

# exit codes
EXIT_FAILED, EXIT_USAGE, EXIT_MISSING = 1, 2, 3

KNOWN = (ConfigError, ContainerError, ContractError, DimensionError, IntegrityError,
         MissingCheckpointError, NoDirectionError, ProjectorDivergence, SaeConfigError,
         SteeringSpecError, TrainingFailure, VistaConfigError, WorldConfigError,
         FileNotFoundError)

# stages each command may (re)train; anything else must already be on disk
BUILDS = {"train-lm": {"lm"}, "train-sae": {"sae"}, "train-projector": {"projector"},
          "sweep-layers": {"projector"}, "encoder-sweep": {"projector"},
          "compare": {"lm", "sae", "projector"}}


def _layers(text: str) -> tuple[int, ...]:
    text = text.strip()
    if text in ("", "none"):
        return ()
    try:
        return tuple(sorted({int(t) for t in text.split(",")}))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad layer list {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vistalab",
                                 description="Text-SAE interpretability for visual tokens "
                                             "on a synthetic world.")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", type=Path, help="experiment config JSON")
    ap.add_argument("--seed", type=int, help="override every component seed")
    ap.add_argument("--out", type=Path, default=Path("runs/default"), help="output directory")
    ap.add_argument("--layers", type=_layers,
                    help="comma list: SAE layers (train-sae), constrained set M "
                         "(train-projector, eval-metrics) or steering layers (steer)")
    ap.add_argument("--coef", type=float, help="steering coefficient, used for alpha and beta")
    ap.add_argument("--encoder", choices=("local", "smoothed", "global"))
    ap.add_argument("--no-sae", action="store_true", help="train/evaluate the CE-only baseline")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.encoder:
        cfg = ExperimentConfig.from_dict({**cfg.to_dict(), "encoder": args.encoder})
    if args.command == "steer" and args.layers is not None:
        d = cfg.to_dict()
        d["eval"]["steer_layers"] = list(args.layers)
        cfg = ExperimentConfig.from_dict(d)
    if args.coef is not None:
        if args.coef < 0:
            raise ConfigError("--coef must be non-negative")
        d = cfg.to_dict()
        d["eval"]["alpha"] = d["eval"]["beta"] = args.coef
        cfg = ExperimentConfig.from_dict(d)
    return cfg


def run(args) -> dict:
    cfg = load_config(args)
    if args.command == "init-config":
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "config.json").write_text(cfg.dumps())
        return {"config": str(args.out / "config.json")}
    pipe = Pipeline(cfg, args.out, BUILDS.get(args.command, ()))
    pipe.write_config()
    use_sae = not args.no_sae
    m_layers = args.layers if args.command in ("train-projector", "eval-metrics") else None
    if args.command == "gen-world":
        out = pipe.gen_world()
    elif args.command == "train-lm":
        pipe.lm(force=True)
        out = {"lm": "lm.vsta"}
    elif args.command == "train-sae":
        pipe.saes(force=True, layers=args.layers)
        out = {"saes": sorted(str(p.name) for p in args.out.glob("sae_l*.vsta"))}
    elif args.command == "train-projector":
        tag, _ = pipe.projector(None, use_sae, m_layers, force=True)
        out = {"projector": f"projector_{tag}.vsta"}
    elif args.command == "eval-metrics":
        rep = pipe.eval_metrics(None, use_sae, m_layers)
        out = {k: rep[k] for k in ("tag", "match_rate_mean_constrained", "sla",
                                   "task_accuracy")}
    elif args.command == "steer":
        rep = pipe.steer(None, use_sae)
        out = {k: rep[k] for k in ("tag", "remove", "replace")}
    elif args.command == "sweep-layers":
        out = {"rows": pipe.sweep_layers()}
    elif args.command == "encoder-sweep":
        out = pipe.encoder_sweep()
    elif args.command == "compare":
        out = pipe.compare()
    else:
        out = pipe.report()
    pipe.write_manifest()
    return out


def error_record(exc: BaseException, command: str) -> dict:
    rec = {"error": type(exc).__name__, "message": str(exc), "command": command}
    if isinstance(exc, MissingCheckpointError):
        rec["missing"] = str(exc.path)
        rec["run_first"] = exc.producer
    curve = getattr(exc, "curve", None)
    if curve is not None:
        rec["curve"] = list(curve)
    return rec


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        out = run(args)
    except KNOWN as exc:
        rec = error_record(exc, args.command)
        print(json.dumps(rec, sort_keys=True), file=sys.stderr)
        try:
            args.out.mkdir(parents=True, exist_ok=True)
            (args.out / "error.json").write_text(json.dumps(rec, indent=2, sort_keys=True) + "\n")
        except OSError:
            pass
        if isinstance(exc, MissingCheckpointError):
            return EXIT_MISSING
        return EXIT_USAGE if isinstance(exc, (ConfigError, FileNotFoundError)) else EXIT_FAILED
    (args.out / "error.json").unlink(missing_ok=True)
    print(json.dumps(out, indent=2, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
