"""Command-line entry point: ``poezsl {gen-data,train,eval,ablate}``.

Exit codes: 0 success, 2 argument error, 3 data-format error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import os
import sys
import time
from pathlib import Path

from .dataio import FormatError, SyntheticConfig, ValidationError, generate_synthetic, load_dataset, save_dataset
from .evaluation import evaluate
from .model import CheckpointError, ModelParams, NumericError, load_checkpoint, save_checkpoint
from .runner import RunConfig, RunRecord, ablate, format_table, prepare_dataset, train_model

EXIT_OK, EXIT_ARGS, EXIT_FORMAT, EXIT_NUMERIC = 0, 2, 3, 4

RUN_FILE = "run.json"
CHECKPOINT_FILE = "model.ckpt"


class ArgumentError(ValueError):
    pass


def _thread_limit():
    n = os.environ.get("POEZSL_THREADS")
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    try:
        return threadpool_limits(limits=int(n))
    except ValueError:
        raise ArgumentError(f"POEZSL_THREADS must be an integer, got {n!r}") from None


# --- config resolution ---

def _read_config_file(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ArgumentError(f"cannot read config {path}: {e}") from None
    # a RunRecord can serve as a config file
    if isinstance(doc, dict) and "config" in doc and "losses" in doc:
        doc = doc["config"]
    if not isinstance(doc, dict):
        raise ArgumentError(f"config {path} must be a JSON object")
    return doc


def _flag_overrides(args) -> dict:
    out = {}
    for name in ("epochs", "seed", "latent_dim", "gamma_final", "fusion", "batch_size", "learning_rate",
                 "encoder_hidden", "decoder_hidden", "classifier_epochs"):
        v = getattr(args, name, None)
        if v is not None:
            out[name] = v
    # eval takes a list of fractions and sweeps them itself
    if isinstance(getattr(args, "missing_fraction", None), float):
        out["missing_fraction"] = args.missing_fraction
    for flag, key in (("no_skip", "skip_connections"), ("no_aud", "use_aud"), ("no_pseudo", "use_pseudo_attributes")):
        if getattr(args, flag, False):
            out[key] = False
    return out


def resolve_config(args, base: dict | None = None) -> RunConfig:
    """Defaults, then ``base``, then ``--config``, then explicit flags."""
    d = dict(base or {})
    if getattr(args, "config", None):
        d.update(_read_config_file(args.config))
    d.update(_flag_overrides(args))
    try:
        cfg = RunConfig.from_dict(d)
    except (TypeError, ValueError) as e:
        raise ArgumentError(str(e)) from None
    if cfg.epochs < 0 or cfg.latent_dim < 1 or cfg.batch_size < 1:
        raise ArgumentError("epochs must be >= 0, latent_dim and batch_size >= 1")
    _fractions([cfg.missing_fraction])
    return cfg


def _fractions(values) -> list[float]:
    for f in values:
        if not 0.0 <= f <= 1.0:
            raise ArgumentError(f"missing fraction {f} outside [0, 1]")
    return list(values)


def _load_params(path, cfg: RunConfig) -> ModelParams:
    return ModelParams.from_tensors(load_checkpoint(path), cfg.skip_connections, cfg.fusion)


def _emit(record: dict, out=None):
    print(json.dumps(record), file=out or sys.stdout)


# --- commands ---

def cmd_gen_data(args) -> int:
    try:
        cfg = SyntheticConfig(num_seen=args.num_seen, num_unseen=args.num_unseen, num_aud_classes=args.num_aud_classes,
                              samples_per_class=args.samples_per_class, attr_dim=args.attr_dim,
                              feature_dim=args.feature_dim, feature_noise_sigma=args.feature_noise,
                              pseudo_attr_noise_sigma=args.pseudo_noise, seed=args.seed)
    except ValueError as e:
        raise ArgumentError(str(e)) from None
    manifest = save_dataset(generate_synthetic(cfg), args.out)
    print(manifest)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    dataset = prepare_dataset(load_dataset(args.manifest), cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def log(epoch, report):
        if args.verbose:
            print(f"epoch {epoch + 1:4d}  loss {report.total:.4f}  beta {report.beta:.4f}  gamma {report.gamma:.4f}",
                  file=sys.stderr)

    t0 = time.perf_counter()
    params, history = train_model(dataset, cfg, callback=log)
    save_checkpoint(params, out / CHECKPOINT_FILE)
    record = RunRecord(cfg.to_dict(), [r.as_dict() for r in history], None, time.perf_counter() - t0)
    (out / RUN_FILE).write_text(record.to_json())
    print(out / CHECKPOINT_FILE)
    return EXIT_OK


def cmd_eval(args) -> int:
    base = None
    if args.checkpoint:
        beside = Path(args.checkpoint).parent / RUN_FILE
        if beside.exists():
            base = _read_config_file(beside)
    cfg = resolve_config(args, base)
    ks = args.k_shot
    if any(k < 0 or k > args.max_shots for k in ks):
        raise ArgumentError(f"k-shot values must be in [0, {args.max_shots}]")
    fractions = _fractions(args.missing_fraction)
    dataset = load_dataset(args.manifest)
    params = _load_params(args.checkpoint, cfg) if args.checkpoint else None
    for f in fractions:
        fcfg = dataclasses.replace(cfg, missing_fraction=f)
        ds = prepare_dataset(dataset, fcfg)
        fparams = params if params is not None else train_model(ds, fcfg)[0]
        for k in ks:
            m = evaluate(fparams, ds, k, cfg.seed, cfg.classifier_epochs, max_shots=args.max_shots,
                         prior_for_single=cfg.prior_for_single)
            _emit(m.record(k, f, cfg.seed))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    if args.manifest:
        dataset = load_dataset(args.manifest)
    else:
        dataset = generate_synthetic(SyntheticConfig(seed=cfg.seed))
    rows = ablate(dataset, cfg)
    print(format_table(rows), file=sys.stderr)
    if args.out:
        Path(args.out).write_text(json.dumps(rows, indent=1))
    for r in rows:
        _emit({k: r[k] for k in ("name", "S", "U", "H", "top1", "final_loss", "wall_time")})
    return EXIT_OK


# --- parser ---

def _add_run_flags(p):
    p.add_argument("--config", help="JSON RunConfig (or a run.json record); flags override it")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--latent-dim", type=int)
    p.add_argument("--gamma-final", type=float, help="final AUD weight reached at the end of the ramp")
    p.add_argument("--fusion", choices=("poe", "product"))
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--encoder-hidden", type=int)
    p.add_argument("--decoder-hidden", type=int)
    p.add_argument("--classifier-epochs", type=int)
    p.add_argument("--no-skip", action="store_true", help="disable the per-modality skip ELBOs")
    p.add_argument("--no-aud", action="store_true", help="ignore auxiliary unlabeled rows")
    p.add_argument("--no-pseudo", action="store_true", help="ignore pseudo-attributes")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="poezsl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a seeded synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=1)
    d = SyntheticConfig()
    g.add_argument("--num-seen", type=int, default=d.num_seen)
    g.add_argument("--num-unseen", type=int, default=d.num_unseen)
    g.add_argument("--num-aud-classes", type=int, default=d.num_aud_classes)
    g.add_argument("--samples-per-class", type=int, default=d.samples_per_class)
    g.add_argument("--attr-dim", type=int, default=d.attr_dim)
    g.add_argument("--feature-dim", type=int, default=d.feature_dim)
    g.add_argument("--feature-noise", type=float, default=d.feature_noise_sigma)
    g.add_argument("--pseudo-noise", type=float, default=d.pseudo_attr_noise_sigma)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model and write a checkpoint plus run.json")
    t.add_argument("--manifest", required=True)
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--missing-fraction", type=float, default=None)
    t.add_argument("-v", "--verbose", action="store_true")
    _add_run_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="GZSL/GFSL metrics as JSON lines")
    e.add_argument("--manifest", required=True)
    e.add_argument("--checkpoint", help="trained model; without it a model is trained per missing fraction")
    e.add_argument("--k-shot", type=int, nargs="+", default=[0])
    e.add_argument("--missing-fraction", type=float, nargs="+", default=[0.0])
    e.add_argument("--max-shots", type=int, default=10)
    _add_run_flags(e)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run the component and fusion ablations")
    a.add_argument("--manifest", help="dataset; defaults to the synthetic benchmark at --seed")
    a.add_argument("--out", help="write full rows (with configs) to this JSON file")
    _add_run_flags(a)
    a.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with _thread_limit():
            return args.func(args)
    except ArgumentError as e:
        parser.error(str(e))  # exits with status 2
    except (FormatError, ValidationError, CheckpointError) as e:
        print(f"poezsl: data error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except NumericError as e:
        print(f"poezsl: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"poezsl: {e}", file=sys.stderr)
        return EXIT_FORMAT


if __name__ == "__main__":
    sys.exit(main())
