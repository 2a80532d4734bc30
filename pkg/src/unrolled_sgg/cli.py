"""Command-line entry point: ``unrolled-sgg <command> [options]``.

Commands
--------
gen      generate a synthetic dataset file
train    train a model, writing checkpoints and a loss CSV
eval     evaluate a checkpoint, writing a JSON report and a per-class CSV
ablate   train and evaluate one configuration per axis value and seed
check    run the numerical self-check suites
denoise  convergence traces of the graph denoising solvers

Every command reads the flat ``key = value`` run config given by
``--config`` (defaults otherwise); flags override file values. Each output
artifact embeds the resolved config.

Exit codes: 0 success, 2 bad config or arguments, 3 missing or unreadable
file, 4 malformed data or checkpoint, 5 numerical failure, 6 a self-check
failed, 1 anything else.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_FORMAT = 4
EXIT_NUMERIC = 5
EXIT_CHECK_FAILED = 6

log = logging.getLogger("unrolled_sgg")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# helpers


def _run_config(args):
    from .config import RunConfig, load_config

    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {
        "seed": args.seed,
        "tau": getattr(args, "tau", None),
        "p": getattr(args, "p", None),
        "variant": getattr(args, "variant", None),
        "num_layers": getattr(args, "layers", None),
    }
    return cfg.with_overrides(**overrides).validate()


def _echo(cfg) -> dict:
    return asdict(cfg)


def _write_csv(path: Path, header: list, rows, cfg) -> None:
    """CSV with the run config as leading ``#`` comment lines."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        for line in cfg.to_text().splitlines():
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _k_list(text: str) -> tuple:
    try:
        ks = tuple(int(k) for k in text.split(",") if k.strip())
    except ValueError:
        raise CliError(EXIT_CONFIG, f"--k-list expects comma-separated integers, got {text!r}") from None
    if not ks or min(ks) < 1:
        raise CliError(EXIT_CONFIG, "--k-list needs positive integers")
    return ks


def _load_dataset(path):
    from .synth_scene import load

    if not Path(path).is_file():
        raise CliError(EXIT_IO, f"dataset file not found: {path}")
    return load(path)


def _load_checkpoint(path):
    from .pipeline import load_checkpoint

    if not Path(path).is_file():
        raise CliError(EXIT_IO, f"checkpoint file not found: {path}")
    try:
        return load_checkpoint(path)
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError(EXIT_FORMAT, f"malformed checkpoint {path}: {exc}") from None


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    from .synth_scene import generate, save

    cfg = _run_config(args)
    data = generate(cfg.synth())
    out = Path(args.out or "data.jsonl")
    save(data, out, meta={"run_config": _echo(cfg), "threads": args.threads})
    for split in ("train", "val", "test"):
        scenes = data[split]
        triplets = sum(len(s.triplets(full=False)) for s in scenes)
        hidden = sum(len(s.triplets(full=True)) for s in scenes) - triplets
        print(f"{split}: {len(scenes)} scenes, {triplets} annotated triplets ({hidden} hidden)")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .pipeline import save_checkpoint, train

    cfg = _run_config(args)
    data = _load_dataset(args.data)
    tc = cfg.train()
    out = Path(args.out or "run")
    resume = None
    if args.resume:
        resume, _, _ = _load_checkpoint(args.resume)
        print(f"resuming after epoch {resume.epochs_done}")
    result = train(data, tc, checkpoint_dir=out / "checkpoints", resume=resume)
    save_checkpoint(result, tc, out / "checkpoint.json", extra={"run_config": _echo(cfg)})
    _write_csv(out / "loss.csv", ["step", "loss"], enumerate(result.loss_trace), cfg)
    last = result.loss_trace[-1] if result.loss_trace else float("nan")
    print(f"{len(result.loss_trace)} steps, final loss {last:.6f}, clipped steps {result.clipped_steps}")
    print(f"wrote {out / 'checkpoint.json'} and {out / 'loss.csv'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .pipeline import evaluate

    result, tc, extra = _load_checkpoint(args.checkpoint)
    data = _load_dataset(args.data)
    ks = _k_list(args.k_list)
    protocols = ("predcls", "sgcls") if args.protocol == "both" else (args.protocol,)
    scenes = data[args.split]
    if not scenes:
        raise CliError(EXIT_FORMAT, f"split {args.split!r} is empty")
    out = Path(args.out or "eval")
    echo = extra.get("run_config", asdict(tc))
    reports = {}
    rows = []
    for proto in protocols:
        rep = evaluate(result.params, scenes, tc.ump, proto, ks)
        reports[proto] = rep.to_dict()
        for K in ks:
            for cls, value in enumerate(rep.per_class_recall[K]):
                if cls > 0:
                    rows.append([proto, K, cls, "" if value is None else value])
        summary = " ".join(f"R@{K}={rep.recall_at[K]:.4f} mR@{K}={rep.mean_recall_at[K]:.4f}" for K in ks)
        print(f"{proto}: {summary} object_acc={rep.object_accuracy:.4f}")
    out.mkdir(parents=True, exist_ok=True)
    record = {"config": echo, "checkpoint": str(args.checkpoint), "data": str(args.data), "split": args.split, "reports": reports}
    (out / "report.json").write_text(json.dumps(record, indent=2) + "\n")
    with (out / "per_class_recall.csv").open("w", newline="") as fh:
        for key, value in echo.items():
            fh.write(f"# {key} = {value}\n")
        w = csv.writer(fh)
        w.writerow(["protocol", "K", "relation_class", "recall"])
        w.writerows(rows)
    print(f"wrote {out / 'report.json'} and {out / 'per_class_recall.csv'}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .pipeline import ABLATION_AXES, ablate

    cfg = _run_config(args)
    if args.axis not in ABLATION_AXES:
        raise CliError(EXIT_CONFIG, f"unknown axis {args.axis!r}; choose from {ABLATION_AXES}")
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise CliError(EXIT_CONFIG, "--values is empty")
    seeds = [cfg.seed + k for k in range(args.num_seeds)]
    ks = _k_list(args.k_list)
    protocols = ("predcls", "sgcls") if args.protocol == "both" else (args.protocol,)
    rows = ablate(cfg.synth(), cfg.train(), args.axis, values, seeds, protocols, ks)
    metrics = [f"R@{K}" for K in ks] + [f"mR@{K}" for K in ks] + ["object_accuracy", "column_mass_entropy"]
    header = ["axis", "value", "seed", "protocol"] + metrics
    out = Path(args.out or "ablation.csv")
    _write_csv(out, header, ([r[h] for h in header] for r in rows), cfg)
    for value in values:
        for proto in protocols:
            mine = [r for r in rows if r["value"] == value and r["protocol"] == proto]
            med = {m: float(np.median([r[m] for r in mine])) for m in (f"R@{ks[-1]}", f"mR@{ks[-1]}", "object_accuracy")}
            print(f"{args.axis}={value} {proto}: " + " ".join(f"{k}={v:.4f}" for k, v in med.items()) + f" (median of {len(mine)} seeds)")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_check(args) -> int:
    from .checks import run_suites

    results = run_suites(args.suite, seed=args.seed or 0)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_OK if not failed else EXIT_CHECK_FAILED


DENOISE_VARIANTS = ("unrolled", "unrolled_reweighted", "mm")


def denoise_traces(cfg) -> list:
    """Rows ``(iteration, variant, dist_to_closed_form, objective)``.

    The instance has random node signals and a random symmetric affinity.
    ``dist_to_closed_form`` is measured to the solution of the quadratic
    problem with the row-normalized affinity; ``objective`` is the robust
    objective at the configured ``p`` and ``epsilon`` for every variant.
    """
    from .graph_denoise import GldProblem, LaplacianForm, closed_form_solution, gld_lp_objective, mm_solve, normalize_rows, omega_matrix, unrolled_step

    rng = np.random.default_rng(cfg.seed)
    n, d = cfg.denoise_nodes, cfg.denoise_dim
    X = rng.normal(size=(n, d))
    A = rng.uniform(0, 1, size=(n, n))
    A = (A + A.T) / 2
    np.fill_diagonal(A, 0.0)
    prob = GldProblem(X, A, epsilon=cfg.epsilon, p=cfg.p)
    lap = LaplacianForm.build(A, "random_walk")
    Y_star = closed_form_solution(prob, lap)
    rows = []

    def emit(k, variant, Y):
        rows.append([k, variant, float(np.linalg.norm(Y - Y_star)), gld_lp_objective(Y, prob)])

    Y = X.copy()
    emit(0, "unrolled", Y)
    for k in range(1, cfg.denoise_iterations + 1):
        Y = unrolled_step(Y, X, lap.A)
        emit(k, "unrolled", Y)
    Y = X.copy()
    emit(0, "unrolled_reweighted", Y)
    for k in range(1, cfg.denoise_iterations + 1):
        Y = unrolled_step(Y, X, normalize_rows(A * omega_matrix(Y, cfg.epsilon, cfg.p)))
        emit(k, "unrolled_reweighted", Y)
    for k, Y in enumerate(mm_solve(prob, cfg.denoise_iterations)):
        emit(k, "mm", Y)
    return rows


def cmd_denoise(args) -> int:
    cfg = _run_config(args)
    rows = denoise_traces(cfg)
    out = Path(args.out or "denoise.csv")
    _write_csv(out, ["iteration", "variant", "dist_to_closed_form", "objective"], rows, cfg)
    for variant in DENOISE_VARIANTS:
        last = [r for r in rows if r[1] == variant][-1]
        print(f"{variant}: after {last[0]} iterations dist {last[2]:.3e}, objective {last[3]:.6f}")
    print(f"wrote {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="unrolled-sgg",
        description="Scene graph generation with unrolled message passing and group diversity.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, model=False):
        p.add_argument("--config", default=None, help="flat key = value run config file (built-in defaults if omitted)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="output path")
        p.add_argument("--threads", type=int, default=1, help="worker cap; computation is sequential and deterministic")
        if model:
            p.add_argument("--tau", type=float, default=None, help="override the diversity weight")
            p.add_argument("--p", type=float, default=None, help="override the robust exponent")
            p.add_argument("--variant", default=None, choices=("gmp_baseline", "unrolled", "unrolled_reweighted"), help="override the layer variant")
            p.add_argument("--layers", type=int, default=None, help="override the number of layers")

    def kinds(p):
        p.add_argument("--protocol", default="both", choices=("predcls", "sgcls", "both"))
        p.add_argument("--k-list", default="20,50,100", help="comma-separated K values")

    p = sub.add_parser("gen", help="generate a synthetic dataset", formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    common(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model", formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    common(p, model=True)
    p.add_argument("--data", required=True, help="dataset file written by gen")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint", formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    common(p)
    kinds(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="sweep one axis over several seeds", formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    common(p, model=True)
    kinds(p)
    p.add_argument("--axis", required=True, help="one of p, K, tau, grouping, variant, module")
    p.add_argument("--values", required=True, help="comma-separated axis values")
    p.add_argument("--num-seeds", type=int, default=3, help="seeds seed, seed+1, ...")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("check", help="run numerical self-checks", formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    common(p)
    p.add_argument("--suite", default="all", choices=("grad", "gld", "mm", "l21", "all"))
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("denoise", help="solver convergence traces", formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    common(p, model=True)
    p.set_defaults(func=cmd_denoise)
    return parser


def main(argv=None) -> int:
    from .autodiff import ContractError, DimensionError
    from .config import ConfigError
    from .graph_denoise import ParameterError, SingularMatrixError
    from .pipeline import TrainingDivergedError
    from .synth_scene import DatasetFormatError

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, ParameterError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (DatasetFormatError, ContractError, DimensionError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (TrainingDivergedError, SingularMatrixError, FloatingPointError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except Exception as exc:  # noqa: BLE001 - last-resort category
        print(f"unexpected error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
