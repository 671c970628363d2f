"""Command-line entry point: ``latentdir train | traverse | eval | transfer | export | import``.

Exit codes: 0 ok, 1 usage or config error, 2 training abort, 3 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import metrics
from .config import RunConfig, load_run_config
from .directions import DirectionError, DirectionSet, edit, parse_direction_set, serialize_direction_set
from .generators import SYNTHETIC, GeneratorError, ground_truth_directions, render, sample_latents
from .pgm import montage, save_pgm
from .trainer import ConfigError, TrainingAborted, train

EXIT_OK, EXIT_USAGE, EXIT_ABORT, EXIT_IO = 0, 1, 2, 3
DIRECTIONS_FILE = "directions.json"
TRACE_FILE = "loss_trace.ndjson"
CONFIG_ECHO = "config.json"
RESCORE_ALPHAS = (-3.0, -1.5, 0.0, 1.5, 3.0)
N_PROBES = 256
N_HELDOUT = 64
N_RESCORE = 100

log = logging.getLogger("latentdir")


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_USAGE):
        self.code = code
        super().__init__(message)


def _load_config(path: str) -> RunConfig:
    try:
        return load_run_config(path)
    except OSError as exc:
        raise CliError(f"cannot read config: {exc}") from None


def _load_directions(path: str) -> DirectionSet:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CliError(f"cannot read directions file: {exc}", EXIT_IO) from None
    try:
        return parse_direction_set(data)
    except DirectionError as exc:
        raise CliError(f"{path}: {exc}", EXIT_IO) from None


def _rng(cfg: RunConfig, stream: int) -> np.random.Generator:
    return np.random.default_rng([cfg.train.seed, stream])


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    gen = cfg.build_generator()
    cfg = cfg.resolved(gen)
    out = Path(args.out or cfg.output_dir)
    try:
        dset, trace = train(cfg.train, gen)
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except GeneratorError as exc:
        raise CliError(str(exc)) from None
    out.mkdir(parents=True, exist_ok=True)
    (out / DIRECTIONS_FILE).write_bytes(serialize_direction_set(dset))
    (out / TRACE_FILE).write_text(trace.to_ndjson(timing=args.timing))
    (out / CONFIG_ECHO).write_text(cfg.dumps())
    n = max(1, len(trace.loss) // 10)
    print(f"trained {dset.K} {dset.kind} directions for {cfg.train.steps} steps: "
          f"loss {np.median(trace.loss[:n]):.4f} -> {np.median(trace.loss[-n:]):.4f}")
    print(f"wrote {out / DIRECTIONS_FILE}")
    return EXIT_OK


def _parse_alphas(text: str) -> list[float]:
    try:
        alphas = sorted(float(a) for a in text.split(","))
    except ValueError:
        raise CliError(f"--alphas must be comma-separated numbers, got {text!r}") from None
    if 0.0 not in alphas or not np.allclose(alphas, [-a for a in reversed(alphas)]):
        raise CliError(f"--alphas must be symmetric around 0 and include 0, got {alphas}")
    return alphas


def cmd_traverse(args) -> int:
    alphas = _parse_alphas(args.alphas)
    if args.n < 1:
        raise CliError("--n must be at least 1")
    dset = _load_directions(args.directions)
    cfg = _load_config(args.config)
    gen = cfg.build_generator()
    if not 0 <= args.k < dset.K:
        raise CliError(f"--k must be in 0..{dset.K - 1}, got {args.k}")
    if gen.latent_dim != dset.d:
        raise CliError(f"latent dimension mismatch: directions d={dset.d}, generator d={gen.latent_dim}")
    latents = sample_latents(_rng(cfg, 2), args.n, gen.latent_dim, cfg.train.truncation)
    model = dset.models[args.k]
    rows = []
    for z in latents:
        rows.append([render(gen, z if a == 0.0 else edit(model, z, a)) for a in alphas])
    out = Path(args.out or Path(args.directions).parent)
    cells = out / f"traverse_k{args.k}"
    cells.mkdir(parents=True, exist_ok=True)
    for r, row in enumerate(rows):
        for c, img in enumerate(row):
            save_pgm(cells / f"r{r}_c{c}.pgm", img)
    save_pgm(out / f"traverse_k{args.k}.pgm", montage(rows))
    (cells / "alphas.json").write_text(json.dumps({"direction": args.k, "alphas": alphas}) + "\n")
    print(f"wrote {out / f'traverse_k{args.k}.pgm'} ({args.n} x {len(alphas)} cells)")
    return EXIT_OK


def _truth_for(gen, truth_path):
    if truth_path:
        try:
            truth = np.asarray(json.loads(Path(truth_path).read_text()), dtype=np.float64)
        except (OSError, ValueError) as exc:
            raise CliError(f"cannot read truth file: {exc}") from None
        if truth.ndim != 2 or truth.shape[1] != gen.latent_dim:
            raise CliError(f"truth file must hold vectors of length {gen.latent_dim}")
        return truth
    if gen.kind != SYNTHETIC:
        raise CliError("ground truth is unknown for a file generator; pass --truth")
    return ground_truth_directions(gen)


def _evaluate(dset: DirectionSet, cfg: RunConfig, truth_path=None, rescore=True) -> dict:
    gen = cfg.build_generator()
    if gen.latent_dim != dset.d:
        raise CliError(f"latent dimension mismatch: directions d={dset.d}, generator d={gen.latent_dim}")
    truth = _truth_for(gen, truth_path)
    t = cfg.train
    probes = sample_latents(_rng(cfg, 3), N_PROBES, gen.latent_dim, t.truncation)
    heldout = sample_latents(_rng(cfg, 4), N_HELDOUT, gen.latent_dim, t.truncation)
    align = metrics.alignment_score(dset, truth, probes, t.alpha)
    null_mean, null_std = metrics.random_alignment_null(dset.K, len(truth), dset.d, trials=500)
    report = {
        "alignment": align.to_dict(),
        "random_null": {"mean": null_mean, "std": null_std},
        "diversity": metrics.diversity_score(dset, probes, t.alpha),
        "identifiability_margin": metrics.identifiability_margin(gen, dset, heldout, t.alpha, t.tau),
    }
    if rescore and gen.kind == SYNTHETIC:
        rescore_probes = probes[:N_RESCORE]
        report["rescoring"] = [
            metrics.rescoring(gen, dset, k, RESCORE_ALPHAS, rescore_probes, factor=j).to_dict()
            for k, j in sorted(align.assignment.items())
        ]
    return report


def _summary(report: dict, title: str) -> str:
    a = report["alignment"]
    lines = [title, f"{'direction':>9} {'factor':>6} {'|cos|':>7} {'monotone':>9}"]
    mono = {r["direction"]: r["monotone_fraction"] for r in report.get("rescoring", [])}
    for k, j in a["assignment"].items():
        m = mono.get(int(k))
        lines.append(f"{k:>9} {j:>6} {a['pair_cos'][k]:>7.3f} {'' if m is None else f'{m:>9.2f}'}")
    null = report["random_null"]
    lines.append(f"mean |cos| {a['mean_cos']:.3f}  (random null {null['mean']:.3f} +/- {null['std']:.3f})")
    lines.append(f"diversity {report['diversity']:.3f}  identifiability margin {report['identifiability_margin']:.3f}")
    if a["unmatched"]:
        lines.append(f"unmatched learned directions: {a['unmatched']}")
    return "\n".join(lines)


def cmd_eval(args) -> int:
    dset = _load_directions(args.directions)
    cfg = _load_config(args.config)
    if dset.K != cfg.train.K:
        raise CliError(f"directions file has K={dset.K} but config has K={cfg.train.K}")
    report = _evaluate(dset, cfg, args.truth)
    out = Path(args.out or Path(args.directions).parent)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(_summary(report, f"evaluation of {args.directions}"))
    return EXIT_OK


def cmd_transfer(args) -> int:
    dset = _load_directions(args.directions)
    cfg = _load_config(args.config)
    report = _evaluate(dset, cfg, args.truth, rescore=False)
    out = Path(args.out or Path(args.directions).parent)
    out.mkdir(parents=True, exist_ok=True)
    (out / "transfer_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(_summary(report, f"transfer of {args.directions} to {args.config}"))
    return EXIT_OK


def cmd_export(args) -> int:
    data = serialize_direction_set(_load_directions(args.directions))
    if args.out:
        Path(args.out).write_bytes(data)
    else:
        sys.stdout.write(data.decode())
    return EXIT_OK


def cmd_import(args) -> int:
    dset = _load_directions(args.file)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / DIRECTIONS_FILE).write_bytes(serialize_direction_set(dset))
    print(f"imported {dset.K} {dset.kind} directions (d={dset.d}) into {out / DIRECTIONS_FILE}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="latentdir", description="Contrastive discovery of latent edit directions.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="train direction models from a run config")
    s.add_argument("config", help="config path or preset:NAME")
    s.add_argument("--out", help="output directory (default: config output_dir)")
    s.add_argument("--timing", action="store_true", help="record per-step wall time in the loss trace")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("traverse", help="render traversal strips for one direction")
    s.add_argument("directions")
    s.add_argument("config")
    s.add_argument("--k", type=int, required=True)
    s.add_argument("--alphas", default="-3,-1.5,0,1.5,3")
    s.add_argument("--n", type=int, default=4, help="number of latents (rows)")
    s.add_argument("--out")
    s.set_defaults(func=cmd_traverse)

    for name, func, help_ in (("eval", cmd_eval, "score directions against ground truth"),
                              ("transfer", cmd_transfer, "score directions on another generator")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("directions")
        s.add_argument("config")
        s.add_argument("--truth", help="JSON list of ground-truth latent directions")
        s.add_argument("--out")
        s.set_defaults(func=func)

    s = sub.add_parser("export", help="write a directions file in canonical form")
    s.add_argument("directions")
    s.add_argument("--out")
    s.set_defaults(func=cmd_export)

    s = sub.add_parser("import", help="validate a directions file and store it in a run directory")
    s.add_argument("file")
    s.add_argument("out_dir")
    s.set_defaults(func=cmd_import)
    return p


def _join_alphas(argv: list[str]) -> list[str]:
    # argparse takes a value like "-3,-1.5,0" for an option flag
    out, i = [], 0
    while i < len(argv):
        if argv[i] == "--alphas" and i + 1 < len(argv):
            out.append(f"--alphas={argv[i + 1]}")
            i += 2
            continue
        out.append(argv[i])
        i += 1
    return out


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parser.parse_args(_join_alphas(argv))
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, GeneratorError, metrics.EvalError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
