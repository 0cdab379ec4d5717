"""Command-line entry point: gen-data, train, eval, report, ablate.

Exit codes: 0 ok, 2 configuration error, 3 I/O error, 4 non-finite loss,
5 checkpoint/model mismatch. Failures print one JSON line on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import ablation
from .config import RunConfig
from .data import generate_synthetic, load_manifest, manifest_digest
from .errors import CheckpointMismatchError, ConfigError, ManifestError, NonFiniteLossError
from .evaluation import evaluate_model, write_metrics
from .trainer import load_checkpoint, model_from_checkpoint, train

logger = logging.getLogger("msreid")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NONFINITE, EXIT_MISMATCH = 0, 2, 3, 4, 5


def _load_config(args, require_seed=True):
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "data_dir", None):
        overrides.append(f"paths.data_dir={json.dumps(args.data_dir)}")
    if getattr(args, "output_dir", None):
        overrides.append(f"paths.output_dir={json.dumps(args.output_dir)}")
    if overrides:
        cfg = cfg.with_overrides(overrides)
    return cfg.validate(require_seed=require_seed)


def _write_resolved(cfg, directory):
    directory = Path(directory)
    (directory / "resolved_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n",
                                                    encoding="utf-8")


def cmd_gen_data(args):
    cfg = _load_config(args)
    out = Path(cfg.paths.data_dir)
    generate_synthetic(cfg.data, out, cfg.spectra_set)
    _write_resolved(cfg, out)
    digest = manifest_digest(out / "manifest.jsonl")
    print(json.dumps({"manifest": str(out / "manifest.jsonl"), "sha256": digest}))
    return EXIT_OK


def _dataset(cfg):
    ds = load_manifest(cfg.manifest_path, cfg.spectra_set)
    return ds


def cmd_train(args):
    cfg = _load_config(args)
    ds = _dataset(cfg)
    last, reports, trainer = train(cfg, ds.split("train"), cfg.paths.output_dir, resume=args.resume)
    print(json.dumps({"checkpoint": str(last), "epochs": trainer.epoch, "iterations": trainer.iteration,
                      "parameters": trainer.param_report}))
    return EXIT_OK


def cmd_eval(args):
    cfg = _load_config(args, require_seed=False)
    if args.protocol:
        cfg.eval.protocol = args.protocol
    out = Path(cfg.paths.output_dir)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "checkpoints" / "last.pt"
    state = load_checkpoint(ckpt)
    model = model_from_checkpoint(cfg, state)
    ds = _dataset(cfg)
    ev = cfg.eval
    metrics = evaluate_model(model, ds, cfg.data.resolved_size, ev.protocol, ev.same_camera, ev.query_in_gallery)
    echo = state.get("config", {})
    metrics.update(flags=dict(zip(("sic", "al", "adapter"), cfg.components.key())), seed=echo.get("seed"),
                   epoch=int(state["epoch"]))
    out.mkdir(parents=True, exist_ok=True)
    suffix = "" if ev.protocol == "standard" else f"_{ev.protocol}"
    write_metrics(metrics, out / f"eval_metrics{suffix}.json", out / f"cmc{suffix}.csv")
    print(json.dumps({k: metrics[k] for k in ("mAP", "rank-1", "rank-5", "rank-10", "protocol")}))
    return EXIT_OK


def cmd_report(args):
    if not args.metrics:
        raise ConfigError("report needs at least one metrics file", field="metrics")
    table = ablation.aggregate(ablation.load_metrics(args.metrics))
    print(ablation.format_table(table))
    if args.csv:
        Path(args.csv).write_text(ablation.table_csv(table), encoding="utf-8")
    return EXIT_OK


def cmd_ablate(args):
    cfg = _load_config(args)
    ds = _dataset(cfg)
    seeds = [int(s) for s in args.seeds.split(",")]
    out = Path(cfg.paths.output_dir)
    results = ablation.run_ablation(cfg, ds, rows=tuple(args.rows), seeds=seeds, out_dir=out)
    table = ablation.aggregate(results)
    print(ablation.format_table(table))
    (out / "ablation.csv").write_text(ablation.table_csv(table), encoding="utf-8")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="msreid", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", "-c", help="run configuration JSON")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value (repeatable)")
        p.add_argument("--seed", type=int)
        p.add_argument("--data-dir")
        p.add_argument("--output-dir")

    p = sub.add_parser("gen-data", help="write the synthetic multi-spectral corpus")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on query/gallery")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--protocol", choices=("standard", "strict"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="aggregate eval metrics files into an ablation table")
    p.add_argument("metrics", nargs="*")
    p.add_argument("--csv", help="also write the table as CSV")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("ablate", help="train and evaluate the component ablation grid")
    common(p)
    p.add_argument("--rows", default="abcdef")
    p.add_argument("--seeds", default="0,1,2")
    p.set_defaults(func=cmd_ablate)
    return parser


def _fail(code, exc, **extra):
    payload = {"error": type(exc).__name__, "exit_code": code, "message": str(exc)}
    payload.update({k: v for k, v in extra.items() if v is not None})
    print(json.dumps(payload), file=sys.stderr)
    return code


def main(argv=None):
    args = build_parser().parse_args(argv)
    if not logger.handlers:
        handler = logging.StreamHandler(sys.stdout)
        handler.setFormatter(logging.Formatter("%(asctime)s %(name)s %(levelname)s %(message)s"))
        logger.addHandler(handler)
    logger.setLevel(logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except (ConfigError, ManifestError) as exc:
        return _fail(EXIT_CONFIG, exc, field=getattr(exc, "field", None), line=getattr(exc, "line", None))
    except NonFiniteLossError as exc:
        return _fail(EXIT_NONFINITE, exc, term=exc.term)
    except CheckpointMismatchError as exc:
        return _fail(EXIT_MISMATCH, exc)
    except OSError as exc:
        return _fail(EXIT_IO, exc, path=getattr(exc, "filename", None))


if __name__ == "__main__":
    sys.exit(main())
