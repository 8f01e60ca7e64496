"""Command-line entry points for simulation and recovery experiments.

Subcommands:
  gen-data          write a blob dataset CSV and a Dirichlet partition CSV
  run               simulate federated rounds and attack every client update
  sweep             repeat `run` over grids of alpha / epochs / seeds
  diagnose-moments  per-(class, logit) histograms of a model's logits
  report            aggregate result CSVs into mean/std tables

Configuration comes from an optional JSON file (--config) merged with
command-line overrides; --seed overrides the master seed. Exit codes:
0 success, 1 validation error, 2 I/O error.
"""

import argparse
import csv
import json
import os
import sys
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import attack as atk
from . import data as dat
from . import fedsim as fed
from . import metrics as met
from . import nn

RESULT_COLUMNS = [
    "seed",
    "round",
    "client",
    "scheme",
    "optimizer",
    "alpha",
    "m",
    "batch",
    "train_acc",
    "cacc",
    "iacc",
    "l1_err",
    "residual",
    "wall_ms",
    "status",
]

# Seed-stream tags for deriving independent sub-seeds from the master seed.
_S_DATA, _S_AUX, _S_PART, _S_MODEL, _S_ATTACK = 11, 12, 13, 14, 15


def _derive_seed(master: int, *tags) -> int:
    return int(np.random.SeedSequence([master, *tags]).generate_state(1)[0])


@dataclass(frozen=True)
class DataSpec:
    n_classes: int = 10
    dim: int = 16
    per_class: int = 100
    separation: float = 4.0
    seed: int = None  # None: derived from the master seed


@dataclass(frozen=True)
class PartitionSpec:
    clients: int = 10
    alpha: float = 0.5


@dataclass(frozen=True)
class ModelSpec:
    hidden: tuple = (32, 16)
    activation: str = "relu"


@dataclass(frozen=True)
class AttackSpec:
    mc_samples: int = 10000
    search_iters: int = 5
    search_mc_samples: int = 1000
    tol: float = 1e-10
    aux_per_class: int = 100


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataSpec = field(default_factory=DataSpec)
    partition: PartitionSpec = field(default_factory=PartitionSpec)
    scheme: fed.SchemeConfig = field(default_factory=fed.SchemeConfig)
    model: ModelSpec = field(default_factory=ModelSpec)
    attack: AttackSpec = field(default_factory=AttackSpec)
    rounds: int = 1
    seed: int = 0
    output: str = "results.csv"

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be at least 1")


def _build_section(cls, payload, name):
    if not isinstance(payload, dict):
        raise ValueError(f"config section {name!r} must be an object")
    allowed = {f.name for f in fields(cls)}
    unknown = set(payload) - allowed
    if unknown:
        raise ValueError(f"unknown keys in config section {name!r}: {sorted(unknown)}")
    if cls is ModelSpec and "hidden" in payload:
        payload = dict(payload, hidden=tuple(payload["hidden"]))
    return cls(**payload)


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    sections = {
        "data": DataSpec,
        "partition": PartitionSpec,
        "scheme": fed.SchemeConfig,
        "model": ModelSpec,
        "attack": AttackSpec,
    }
    unknown = set(raw) - set(sections) - {"rounds", "seed", "output"}
    if unknown:
        raise ValueError(f"{path}: unknown config keys {sorted(unknown)}")
    kwargs = {}
    for key, cls in sections.items():
        if key in raw:
            kwargs[key] = _build_section(cls, raw[key], key)
    for key in ("rounds", "seed", "output"):
        if key in raw:
            kwargs[key] = raw[key]
    return ExperimentConfig(**kwargs)


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    data_over = {}
    for name in ("n_classes", "dim", "per_class", "separation"):
        val = getattr(args, name, None)
        if val is not None:
            data_over[name] = val
    if data_over:
        cfg = replace(cfg, data=replace(cfg.data, **data_over))
    part_over = {}
    if getattr(args, "clients", None) is not None:
        part_over["clients"] = args.clients
    if getattr(args, "alpha", None) is not None:
        part_over["alpha"] = args.alpha
    if part_over:
        cfg = replace(cfg, partition=replace(cfg.partition, **part_over))
    scheme_over = {}
    for src, dst in (
        ("scheme", "scheme"),
        ("optimizer", "optimizer"),
        ("eta", "eta"),
        ("lam", "lam"),
        ("gamma", "gamma"),
        ("epochs", "epochs"),
        ("batch_size", "batch_size"),
    ):
        val = getattr(args, src, None)
        if val is not None:
            scheme_over[dst] = val
    if scheme_over:
        cfg = replace(cfg, scheme=replace(cfg.scheme, **scheme_over))
    attack_over = {}
    for name in ("mc_samples", "search_iters", "aux_per_class"):
        val = getattr(args, name, None)
        if val is not None:
            attack_over[name] = val
    if attack_over:
        cfg = replace(cfg, attack=replace(cfg.attack, **attack_over))
    if getattr(args, "rounds", None) is not None:
        cfg = replace(cfg, rounds=args.rounds)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "output", None) is not None:
        cfg = replace(cfg, output=args.output)
    return cfg


def _config_from_args(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    return _apply_overrides(cfg, args)


def _build_world(cfg: ExperimentConfig):
    """Dataset, auxiliary set, partition, and initial model for one run."""
    d = cfg.data
    data_seed = d.seed if d.seed is not None else _derive_seed(cfg.seed, _S_DATA)
    dataset = dat.make_synthetic(d.n_classes, d.dim, d.per_class, d.separation, data_seed)
    aux = dat.make_auxiliary(
        d.n_classes, d.dim, cfg.attack.aux_per_class, d.separation, _derive_seed(cfg.seed, _S_AUX)
    )
    partition = dat.dirichlet_partition(
        dataset, cfg.partition.clients, cfg.partition.alpha, _derive_seed(cfg.seed, _S_PART)
    )
    sizes = [d.dim, *cfg.model.hidden, d.n_classes]
    model = nn.init_model(sizes, cfg.model.activation, _derive_seed(cfg.seed, _S_MODEL))
    return dataset, aux, partition, model


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def run_experiment(cfg: ExperimentConfig, report_dir=None, round_log=None):
    """Simulate cfg.rounds rounds, attack every update, return result rows."""
    dataset, aux, partition, model = _build_world(cfg)
    histories = [fed.UpdateHistory.fresh(model) for _ in range(partition.n_clients)]
    rows = []
    current = model
    for t in range(1, cfg.rounds + 1):
        new_global, updates, truths, stats, new_histories = fed.run_round(
            current, dataset, partition, cfg.scheme, histories, t, cfg.seed
        )
        if round_log:
            fed.append_round_log(round_log, t, cfg.scheme, stats)
        for k in range(partition.n_clients):
            params = atk.AttackParams(
                mc_samples=cfg.attack.mc_samples,
                search_iters=cfg.attack.search_iters,
                search_mc_samples=cfg.attack.search_mc_samples,
                tol=cfg.attack.tol,
                seed=_derive_seed(cfg.seed, _S_ATTACK, t, k),
            )
            start = time.perf_counter()
            row = {
                "seed": cfg.seed,
                "round": t,
                "client": k,
                "scheme": cfg.scheme.scheme,
                "optimizer": cfg.scheme.optimizer,
                "alpha": repr(cfg.partition.alpha),
                "m": cfg.scheme.epochs,
                "batch": cfg.scheme.batch_size,
                "train_acc": _fmt(stats[k]["train_acc"]) if stats[k] else "",
            }
            try:
                report = atk.rlu_attack(current, updates[k], aux, cfg.scheme, histories[k], params)
            except atk.DegenerateUpdateError:
                report = None
            wall_ms = (time.perf_counter() - start) * 1000.0
            if report is None or truths[k] is None:
                row.update({"cacc": "", "iacc": "", "l1_err": "", "residual": "", "status": "degenerate"})
            else:
                sc = met.score(report.counts, truths[k], cfg.scheme.epochs, cfg.scheme.batch_size)
                row.update(
                    {
                        "cacc": _fmt(sc.cacc),
                        "iacc": _fmt(sc.iacc),
                        "l1_err": sc.l1_error,
                        "residual": _fmt(report.residual),
                        "status": "ok",
                    }
                )
                if report_dir:
                    atk.save_report(os.path.join(report_dir, f"report_r{t}_c{k}.json"), report)
            row["wall_ms"] = _fmt(wall_ms)
            rows.append(row)
        current, histories = new_global, new_histories
    return rows


def _write_results(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)


def cmd_gen_data(args) -> int:
    cfg = _config_from_args(args)
    dataset, _, partition, _ = _build_world(cfg)
    dat.save_dataset_csv(args.out_data, dataset)
    dat.save_partition_csv(args.out_partition, partition)
    print(f"wrote {len(dataset)} samples to {args.out_data}, {partition.n_clients} clients to {args.out_partition}")
    return 0


def cmd_run(args) -> int:
    cfg = _config_from_args(args)
    if args.report_dir:
        os.makedirs(args.report_dir, exist_ok=True)
    rows = run_experiment(cfg, report_dir=args.report_dir, round_log=args.round_log)
    _write_results(cfg.output, rows)
    ok = sum(1 for r in rows if r["status"] == "ok")
    print(f"wrote {len(rows)} rows ({ok} ok) to {cfg.output}")
    return 0


def _parse_list(text, cast):
    return [cast(tok) for tok in text.split(",") if tok.strip()]


def cmd_sweep(args) -> int:
    base = _config_from_args(args)
    alphas = _parse_list(args.alphas, float) if args.alphas else [base.partition.alpha]
    epoch_grid = _parse_list(args.epoch_grid, int) if args.epoch_grid else [base.scheme.epochs]
    seeds = _parse_list(args.seeds, int) if args.seeds else [base.seed]
    rows = []
    for alpha in alphas:
        for m in epoch_grid:
            for seed in seeds:
                cfg = replace(
                    base,
                    partition=replace(base.partition, alpha=alpha),
                    scheme=replace(base.scheme, epochs=m),
                    seed=seed,
                )
                rows.extend(run_experiment(cfg))
    _write_results(base.output, rows)
    print(f"wrote {len(rows)} rows to {base.output}")
    return 0


def cmd_diagnose_moments(args) -> int:
    model = nn.load_model(args.model)
    dataset = dat.load_dataset_csv(args.data, n_classes=model.n_classes)
    logits, _ = nn.forward_batch(model, dataset.features)
    n = model.n_classes
    with open(args.output, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["n", "j", "bin_left", "bin_right", "count"])
        for cls in range(n):
            rows = logits[dataset.labels == cls]
            if len(rows) == 0:
                raise ValueError(f"dataset has no samples for class {cls}")
            for j in range(n):
                counts, edges = np.histogram(rows[:, j], bins=args.bins)
                for b in range(args.bins):
                    writer.writerow([cls, j, repr(float(edges[b])), repr(float(edges[b + 1])), int(counts[b])])
    print(f"wrote {n * n * args.bins} histogram rows to {args.output}")
    return 0


def cmd_report(args) -> int:
    rows = []
    for path in args.inputs:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = [c for c in RESULT_COLUMNS if c not in (reader.fieldnames or [])]
            if missing:
                raise ValueError(f"{path}: missing columns {missing}")
            rows.extend(reader)
    groups = {}
    for row in rows:
        if row["status"] != "ok":
            continue
        key = (row["scheme"], row["optimizer"], row["alpha"], row["m"])
        groups.setdefault(key, []).append(row)
    with open(args.output, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["scheme", "optimizer", "alpha", "m", "n"]
        for name in ("cacc", "iacc", "l1_err", "residual"):
            header += [f"{name}_mean", f"{name}_std"]
        writer.writerow(header)
        for key in sorted(groups):
            grp = groups[key]
            out = list(key) + [len(grp)]
            for name in ("cacc", "iacc", "l1_err", "residual"):
                vals = np.array([float(r[name]) for r in grp])
                std = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
                out += [repr(float(vals.mean())), repr(std)]
            writer.writerow(out)
    print(f"wrote {len(groups)} aggregate rows to {args.output}")
    return 0


def _add_config_args(p, with_output=True):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int, help="master seed override")
    p.add_argument("--n-classes", dest="n_classes", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--per-class", dest="per_class", type=int)
    p.add_argument("--separation", type=float)
    p.add_argument("--clients", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--scheme", choices=fed.SCHEMES)
    p.add_argument("--optimizer", choices=fed.OPTIMIZERS)
    p.add_argument("--eta", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--epochs", type=int, help="local epochs m")
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--rounds", type=int)
    p.add_argument("--mc-samples", dest="mc_samples", type=int)
    p.add_argument("--search-iters", dest="search_iters", type=int)
    p.add_argument("--aux-per-class", dest="aux_per_class", type=int)
    if with_output:
        p.add_argument("--output", help="result CSV path")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedleak", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write dataset and partition CSVs")
    _add_config_args(p, with_output=False)
    p.add_argument("--out-data", default="data.csv")
    p.add_argument("--out-partition", default="partition.csv")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("run", help="simulate rounds and attack every update")
    _add_config_args(p)
    p.add_argument("--report-dir", help="also write per-attack JSON reports here")
    p.add_argument("--round-log", help="also append the per-round training log CSV here")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="grid of runs over alpha/epochs/seeds")
    _add_config_args(p)
    p.add_argument("--alphas", help="comma-separated alpha grid")
    p.add_argument("--epoch-grid", dest="epoch_grid", help="comma-separated local-epoch grid")
    p.add_argument("--seeds", help="comma-separated master seeds")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("diagnose-moments", help="logit histograms per (class, logit)")
    p.add_argument("--model", required=True, help="model checkpoint path")
    p.add_argument("--data", required=True, help="dataset CSV path")
    p.add_argument("--output", default="moments.csv")
    p.add_argument("--bins", type=int, default=100)
    p.set_defaults(func=cmd_diagnose_moments)

    p = sub.add_parser("report", help="aggregate result CSVs")
    p.add_argument("inputs", nargs="+", help="result CSV paths")
    p.add_argument("--output", default="report.csv")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
