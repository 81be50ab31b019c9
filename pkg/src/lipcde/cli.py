"""Command-line interface.

    lipcde <simulate|train|evaluate|ablate|gradcheck|plot> --config PATH
           [--out DIR] [--seeds N ...] [--variants ...] [--force]

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numerical failure.
Runs are deterministic under a fixed seed; LIPCDE_THREADS caps fan-out across
(seed, variant) jobs (default 1, fully sequential and single-threaded).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .cde import NumericalDivergenceError
from .config import ConfigError, ExperimentConfig, load_config
from .dataio import DataIoError, RunManifest, export_csv, ingest_csv, write_atomic, write_manifest
from .model import ModelError, VARIANTS
from .sim import SimulationError, apply_missingness, simulate_counterfactual, simulate_factual
from .training import NonFiniteLossError, TrainingError, run_experiment

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _threads() -> int:
    raw = os.environ.get("LIPCDE_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise CliError(f"LIPCDE_THREADS must be an integer, got {raw!r}", EXIT_CONFIG)
    return max(1, n)


def _prepare_run_dir(base: Path, run_id: str, force: bool) -> Path:
    run_dir = base / run_id
    if run_dir.exists():
        if not force:
            raise CliError(
                f"run directory {run_dir} exists; pass --force to overwrite", EXIT_IO
            )
    else:
        run_dir.mkdir(parents=True)
    return run_dir


def _rate_tag(rate: float) -> str:
    return f"miss{int(round(rate * 100)):02d}"


def cmd_simulate(cfg: ExperimentConfig, out: Path, force: bool) -> int:
    run_dir = _prepare_run_dir(out, cfg.run_id, force)
    files = ["factual.csv", "counterfactual.csv"]
    rates = [r for r in cfg.eval.missing_rates if r > 0.0]
    for rate in rates:
        files += [f"factual_{_rate_tag(rate)}.csv", f"counterfactual_{_rate_tag(rate)}.csv"]
    manifest = RunManifest.create(cfg.run_id, cfg.config_hash(), [cfg.sim.seed], files)
    write_manifest(manifest, run_dir)

    factual = simulate_factual(cfg.sim)
    counterfactual = simulate_counterfactual(cfg.sim)
    export_csv(factual, run_dir / "factual.csv")
    export_csv(counterfactual, run_dir / "counterfactual.csv")
    for rate in rates:
        # identical seed on both worlds keeps their observation patterns aligned
        fact_m = apply_missingness(factual, rate, cfg.eval.missing_seed)
        cf_m = apply_missingness(counterfactual, rate, cfg.eval.missing_seed)
        export_csv(fact_m, run_dir / f"factual_{_rate_tag(rate)}.csv", observed_only=True)
        export_csv(cf_m, run_dir / f"counterfactual_{_rate_tag(rate)}.csv", observed_only=True)
    n_rows = sum(len(r) for r in factual)
    print(f"wrote {len(files)} files to {run_dir} ({n_rows} factual rows)")
    return EXIT_OK


def _load_or_simulate(cfg: ExperimentConfig, data_dir: Path | None):
    if data_dir is None:
        return simulate_factual(cfg.sim), simulate_counterfactual(cfg.sim)
    fact_path = data_dir / "factual.csv"
    if not fact_path.exists():
        raise CliError(f"dataset file {fact_path} not found", EXIT_IO)
    factual = ingest_csv(fact_path)
    cf_path = data_dir / "counterfactual.csv"
    counterfactual = ingest_csv(cf_path) if cf_path.exists() else None
    return factual, counterfactual


def _write_losses_csv(path: Path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "val_loss"])
        writer.writeheader()
        writer.writerows(history)


def _run_one_job(args: tuple) -> dict:
    """One (variant, seed) training job; module-level so it can cross processes."""
    cfg_dict, variant, seed, job_dir_str, data_dir_str = args
    import torch

    torch.set_num_threads(1)
    cfg = _config_from_dict(cfg_dict)
    data_dir = Path(data_dir_str) if data_dir_str else None
    factual, counterfactual = _load_or_simulate(cfg, data_dir)
    train_cfg = dataclasses.replace(cfg.train, seed=seed)
    report, result = run_experiment(
        factual, counterfactual, variant, train_cfg, cfg.model_config(),
        run_id=cfg.run_id, record_timing=cfg.eval.record_timing,
    )
    job_dir = Path(job_dir_str)
    job_dir.mkdir(parents=True, exist_ok=True)
    write_atomic(job_dir / "metrics.json", report.to_json())
    _write_losses_csv(job_dir / "losses.csv", result.history)
    return dataclasses.asdict(report)


def _config_from_dict(d: dict) -> ExperimentConfig:
    import tempfile

    import yaml

    with tempfile.NamedTemporaryFile("w", suffix=".yaml", delete=False) as fh:
        yaml.safe_dump(d, fh, default_flow_style=False)
        tmp = fh.name
    try:
        return load_config(tmp)
    finally:
        os.unlink(tmp)


def _run_jobs(cfg: ExperimentConfig, jobs: list[tuple], run_dir: Path) -> list[dict]:
    threads = _threads()
    if threads == 1:
        return [_run_one_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(_run_one_job, jobs))


def _metrics_table(rows: list[dict], path: Path, extra_cols: list[str] = ()) -> None:
    cols = [*extra_cols, "run_id", "variant", "seed", "rmse", "rmse_pct",
            "covsim", "cf_rmse", "wallclock_seconds"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        writer.writerows(rows)


def cmd_train_like(
    cfg: ExperimentConfig,
    out: Path,
    force: bool,
    seeds: list[int],
    variants: list[str],
    data_dir: Path | None,
    table_name: str,
) -> int:
    for v in variants:
        if v not in VARIANTS:
            raise CliError(f"unknown variant {v!r}; choose from {VARIANTS}", EXIT_CONFIG)
    run_dir = _prepare_run_dir(out, cfg.run_id, force)
    jobs, job_files = [], []
    for variant in variants:
        for seed in seeds:
            name = f"{variant}_seed{seed}"
            jobs.append(
                (cfg.canonical_dict(), variant, seed, str(run_dir / name),
                 str(data_dir) if data_dir else "")
            )
            job_files += [f"{name}/metrics.json", f"{name}/losses.csv"]
    manifest = RunManifest.create(
        cfg.run_id, cfg.config_hash(), seeds, job_files + [table_name]
    )
    write_manifest(manifest, run_dir)
    rows = _run_jobs(cfg, jobs, run_dir)
    _metrics_table(rows, run_dir / table_name)
    for row in rows:
        print(
            f"{row['variant']} seed={row['seed']}: rmse={row['rmse']:.4f} "
            f"rmse_pct={row['rmse_pct']:.2f} covsim={row['covsim']} cf_rmse={row['cf_rmse']}"
        )
    return EXIT_OK


def cmd_evaluate(cfg: ExperimentConfig, out: Path, force: bool, gammas: list[float],
                 seeds: list[int], variants: list[str]) -> int:
    run_dir = _prepare_run_dir(out, cfg.run_id, force)
    manifest = RunManifest.create(cfg.run_id, cfg.config_hash(), seeds, ["gamma_sweep.csv"])
    write_manifest(manifest, run_dir)
    rows = []
    for gamma in gammas:
        sweep_cfg_dict = cfg.canonical_dict()
        sweep_cfg_dict["sim"]["gamma_deg"] = float(gamma)
        for variant in variants:
            for seed in seeds:
                name = f"gamma{gamma:g}_{variant}_seed{seed}"
                row = _run_one_job(
                    (sweep_cfg_dict, variant, seed, str(run_dir / name), "")
                )
                row["gamma"] = gamma
                rows.append(row)
                print(
                    f"gamma={gamma:g} {variant} seed={seed}: rmse={row['rmse']:.4f} "
                    f"cf_rmse={row['cf_rmse']}"
                )
    _metrics_table(rows, run_dir / "gamma_sweep.csv", extra_cols=["gamma"])
    return EXIT_OK


def cmd_gradcheck() -> int:
    import torch

    torch.set_num_threads(1)
    from .gradcheck import pipeline_gradcheck

    res = pipeline_gradcheck()
    print(
        f"gradcheck: max relative error {res.max_rel_error:.3e} over "
        f"{res.n_checked} parameters (worst: {res.worst_parameter})"
    )
    if not res.ok:
        raise CliError(
            f"gradient check failed: {res.max_rel_error:.3e} > 1e-3", EXIT_NUMERIC
        )
    return EXIT_OK


def cmd_plot(sweep_csv: Path, out_file: Path) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not sweep_csv.exists():
        raise CliError(f"sweep table {sweep_csv} not found", EXIT_IO)
    rows = list(csv.DictReader(open(sweep_csv)))
    if not rows or "gamma" not in rows[0]:
        raise CliError(f"{sweep_csv} is not a gamma-sweep table", EXIT_CONFIG)
    series: dict[str, dict[float, list[float]]] = {}
    for row in rows:
        series.setdefault(row["variant"], {}).setdefault(float(row["gamma"]), []).append(
            float(row["rmse"])
        )
    fig, ax = plt.subplots(figsize=(6, 4))
    for variant, by_gamma in sorted(series.items()):
        gs = sorted(by_gamma)
        ax.plot(gs, [sum(by_gamma[g]) / len(by_gamma[g]) for g in gs], marker="o", label=variant)
    ax.set_xlabel("confounding degree")
    ax.set_ylabel("factual RMSE")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_file, format="svg")
    print(f"wrote {out_file}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lipcde", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="YAML experiment config")
        p.add_argument("--out", default=None, help="output base directory (default: config output_dir)")
        p.add_argument("--force", action="store_true", help="overwrite an existing run directory")

    p = sub.add_parser("simulate", help="generate factual/counterfactual CSV datasets")
    common(p)

    for name, hlp in (("train", "train selected variants"),
                      ("ablate", "run the ablation variant grid")):
        p = sub.add_parser(name, help=hlp)
        common(p)
        p.add_argument("--seeds", type=int, nargs="+", default=None)
        p.add_argument("--variants", nargs="+", default=None)
        p.add_argument("--data", default=None, help="simulate-output dir with factual.csv")

    p = sub.add_parser("evaluate", help="confounding-degree sweep")
    common(p)
    p.add_argument("--gammas", type=float, nargs="+", default=None)
    p.add_argument("--seeds", type=int, nargs="+", default=None)
    p.add_argument("--variants", nargs="+", default=["full"])

    p = sub.add_parser("gradcheck", help="finite-difference gradient validation")
    p.add_argument("--config", default=None, help="ignored; the check is self-contained")

    p = sub.add_parser("plot", help="render RMSE-vs-gamma curves as SVG")
    p.add_argument("--sweep", required=True, help="gamma_sweep.csv from `lipcde evaluate`")
    p.add_argument("--out-file", default="rmse_vs_gamma.svg")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "gradcheck":
            return cmd_gradcheck()
        if args.command == "plot":
            return cmd_plot(Path(args.sweep), Path(args.out_file))

        cfg = load_config(args.config)
        out = Path(args.out) if args.out else Path(cfg.output_dir)
        if args.command == "simulate":
            return cmd_simulate(cfg, out, args.force)
        seeds = args.seeds if args.seeds is not None else [cfg.train.seed]
        if args.command == "train":
            variants = args.variants if args.variants is not None else ["full"]
            data_dir = Path(args.data) if args.data else None
            return cmd_train_like(cfg, out, args.force, seeds, variants, data_dir, "metrics_table.csv")
        if args.command == "ablate":
            variants = args.variants if args.variants is not None else list(VARIANTS)
            data_dir = Path(args.data) if args.data else None
            return cmd_train_like(cfg, out, args.force, seeds, variants, data_dir, "ablation.csv")
        if args.command == "evaluate":
            gammas = args.gammas if args.gammas is not None else list(cfg.eval.gammas)
            return cmd_evaluate(cfg, out, args.force, gammas, seeds, args.variants)
        raise CliError(f"unhandled command {args.command}", EXIT_CONFIG)
    except CliError as exc:
        print(f"lipcde: error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, SimulationError, TrainingError) as exc:
        print(f"lipcde: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalDivergenceError as exc:
        print(f"lipcde: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataIoError, OSError) as exc:
        print(f"lipcde: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
