"""``spgm`` command-line entry point.

Exit status: 0 on success, 1 on usage errors, 2 on data or model errors.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import logging
import os
import statistics
import sys
from pathlib import Path

import numpy as np

from spgm import config as cfgmod
from spgm.checkpoint import CheckpointError, load_checkpoint
from spgm.data import AudioBuffer, WavFormatError, build_dataset, read_manifest, read_wav, write_wav
from spgm.layers import ConfigError, InputTooShortError
from spgm.profiler import MAC_CONVENTION, count_macs, count_params
from spgm.separator import SeparatorModel, separate_forward
from spgm.tensor import NonFiniteError, ShapeError, no_grad
from spgm.training import TrainingError, evaluate_manifest, fit, utterance_sisdri

log = logging.getLogger("spgm")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2

DATA_ERRORS = (ConfigError, CheckpointError, WavFormatError, InputTooShortError, ShapeError,
               NonFiniteError, TrainingError, FileNotFoundError, ValueError, OSError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _model(args, sections) -> SeparatorModel:
    if args.model:
        return load_checkpoint(args.model)
    return SeparatorModel.init(cfgmod.model_config(sections), seed=args.seed or 0)


def _write_table(rows):
    for r in rows:
        print(" ".join(str(v) for v in r))


# commands -------------------------------------------------------------------

def cmd_synth_data(args, sections) -> int:
    overrides = {}
    if args.duration is not None:
        overrides["duration_s"] = args.duration
    if args.sample_rate is not None:
        overrides["sample_rate"] = args.sample_rate
    if args.seed is not None:
        overrides["seed"] = args.seed
    spec = cfgmod.synth_spec(sections, **overrides)
    manifest = build_dataset(args.out, args.count, spec)
    print(manifest)
    return EXIT_OK


def cmd_train(args, sections) -> int:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.epochs is not None:
        overrides["max_epochs"] = args.epochs
    tcfg = cfgmod.train_config(sections, **overrides)
    model = SeparatorModel.init(cfgmod.model_config(sections), seed=tcfg.seed)
    _, history = fit(model, args.data, args.valid, tcfg, out_dir=args.out,
                     resume_from=args.resume)
    if history:
        epoch, train_loss, valid_loss, lr = history[-1]
        print(f"epoch {epoch} train_loss {train_loss:.4f} valid_loss {valid_loss:.4f} lr {lr:.3g}")
    return EXIT_OK


def cmd_separate(args, sections) -> int:
    model = _model(args, sections)
    mix = read_wav(args.input)
    if mix.sample_rate != model.config.sample_rate:
        raise WavFormatError(f"{args.input}: {mix.sample_rate} Hz, model expects "
                             f"{model.config.sample_rate} Hz")
    with no_grad():
        est = separate_forward(model, mix).data
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for c, wav in enumerate(est):
        path = out / f"s{c + 1}.wav"
        write_wav(path, AudioBuffer(wav, mix.sample_rate))
        print(path)
    return EXIT_OK


def _scores_from_estimates(records, est_dir: Path) -> list[float]:
    scores = []
    for rec in records:
        mix, srcs = rec.load()
        name = rec.mixture_path.name
        est = np.stack([read_wav(est_dir / f"s{c + 1}" / name).samples
                        for c in range(len(srcs))])
        if est.shape[1] != len(mix):
            raise ShapeError(f"{name}: estimate length {est.shape[1]} != mixture {len(mix)}")
        scores.append(utterance_sisdri(est, np.stack([s.samples for s in srcs]), mix.samples))
    return scores


def cmd_evaluate(args, sections) -> int:
    if bool(args.model) == bool(args.estimates):
        raise UsageError("evaluate: pass exactly one of --model or --estimates")
    records = read_manifest(args.manifest)
    if not records:
        raise ValueError(f"{args.manifest}: manifest is empty")
    if args.estimates:
        scores = _scores_from_estimates(records, Path(args.estimates))
    else:
        scores = evaluate_manifest(load_checkpoint(args.model), records)
    rows = [(rec.mixture_path.name, f"{s:.6f}") for rec, s in zip(records, scores)]
    print("mixture,sisdri_db")
    for name, s in rows:
        print(f"{name},{s}")
    print(f"mean_sisdri_db {statistics.fmean(scores):.6f}")
    print(f"median_sisdri_db {statistics.median(scores):.6f}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["mixture", "sisdri_db"])
            w.writerows(rows)
    return EXIT_OK


def cmd_profile(args, sections) -> int:
    mcfg = cfgmod.model_config(sections)
    params = count_params(mcfg)
    macs = count_macs(mcfg, args.duration)
    print("# parameters")
    _write_table(params.items())
    print(f"# MACs for {args.duration:g} s at {mcfg.sample_rate} Hz")
    _write_table(macs.items())
    print(f"# total {macs['total'] / 1e9:.2f} GMAC")
    print(f"# convention: {MAC_CONVENTION}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["module", "params", "macs"])
            for name in macs:
                w.writerow([name, params.get(name, 0), macs[name]])
    return EXIT_OK


def cmd_gradcheck(args, sections) -> int:
    from spgm.gradsuite import run_suite
    start = args.seed or 0
    results = run_suite(range(start, start + args.seeds), end_to_end=not args.layers_only)
    worst: dict[str, tuple[float, float]] = {}
    for r in results:
        err, tol = worst.get(r.name, (0.0, r.tolerance))
        worst[r.name] = (max(err, r.error), tol)
    failed = [r for r in results if not r.ok]
    for name, (err, tol) in worst.items():
        print(f"{'ok ' if err < tol else 'BAD'} {name} max_rel_err {err:.2e} tol {tol:g}")
    print(f"{len(results) - len(failed)}/{len(results)} checks passed over {args.seeds} seeds")
    return EXIT_OK if not failed else EXIT_DATA


# parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="TOML file with [model]/[train]/[data] tables")
    common.add_argument("--seed", type=int, default=None)

    parser = _Parser(prog="spgm", description="Single-path separation with SPGM blocks.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth-data", parents=[common], help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--duration", type=float)
    p.add_argument("--sample-rate", type=int)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", parents=[common], help="train a separator")
    p.add_argument("--data", required=True, help="training manifest or dataset folder")
    p.add_argument("--valid", required=True, help="validation manifest or dataset folder")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, help="override max_epochs")
    p.add_argument("--resume", help="TrainState file to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("separate", parents=[common], help="separate one mixture")
    p.add_argument("--model", help="checkpoint; default is a fresh seeded model")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_separate)

    p = sub.add_parser("evaluate", parents=[common], help="SI-SDRi over a manifest")
    p.add_argument("--model")
    p.add_argument("--estimates", help="folder with s1/, s2/ WAVs named like the mixtures")
    p.add_argument("--manifest", required=True)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("profile", parents=[common], help="parameter and MAC tables")
    p.add_argument("--duration", type=float, default=1.0)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--layers-only", action="store_true")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _thread_limit():
    value = os.environ.get("SPGM_NUM_THREADS")
    if not value:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    try:
        n = int(value)
    except ValueError as exc:
        raise UsageError(f"SPGM_NUM_THREADS must be an integer, got {value!r}") from exc
    if n < 1:
        raise UsageError("SPGM_NUM_THREADS must be >= 1")
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        args = build_parser().parse_args(argv)
        with _thread_limit():
            sections = cfgmod.maybe_load(args.config)
            return args.func(args, sections)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
