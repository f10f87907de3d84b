"""Command-line entry points: train, evaluate, predict, param-count, quantiles.

Exit codes: 0 success, 1 usage or configuration error, 2 data or numeric error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis
from .dataset import (DatasetError, SpeciesTable, apply_exclusion_list, load_qm9,
                      read_exclusion_file, read_extended_xyz, split_dataset, write_manifest)
from .model import HyperParameters, NonFiniteError, count_parameters, predict
from .persistence import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .trainer import OptimizerConfig, train, write_history

logger = logging.getLogger("hipnn")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class ConfigError(ValueError):
    pass


@dataclasses.dataclass
class RunConfig:
    # data
    data: str = ""
    data_format: str = "xyz"
    energy_key: str = "energy"
    exclusions: str = ""
    n_train: int = 0
    n_validate: int = 1000
    seed: int = 0
    out: str = "run"
    # architecture
    n_interaction: int = 2
    n_onsite: int = 3
    n_feature: int = 80
    n_sensitivity: int = 20
    r_low: float = 1.7
    r_high: float = 10.0
    r_cut: float = 15.0
    species: str = "1,6,7,8,9"
    # optimizer
    eta_init: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 30
    alpha_decay: float = 0.5
    t_patience: int = 50
    t_init: int = 100
    t_max: int = 2000
    lambda_l2: float = 1e-6
    lambda_r: float = 1e-2

    def apply(self, key: str, value: str) -> None:
        fields = {f.name: f for f in dataclasses.fields(self)}
        key = key.strip().replace("-", "_")
        if key not in fields:
            raise ConfigError(f"unknown config key {key!r}")
        kind = type(getattr(RunConfig(), key))
        try:
            setattr(self, key, kind(value.strip()) if kind is not str else value.strip())
        except ValueError:
            raise ConfigError(f"config key {key!r}: cannot parse {value!r} as {kind.__name__}") from None

    @property
    def species_table(self) -> SpeciesTable:
        try:
            return SpeciesTable(tuple(int(z) for z in self.species.split(",") if z.strip()))
        except ValueError as exc:
            raise ConfigError(f"species: {exc}") from None

    def hyper(self) -> HyperParameters:
        try:
            return HyperParameters(self.n_interaction, self.n_onsite, self.n_feature, self.n_sensitivity,
                                   self.r_low, self.r_high, self.r_cut, self.species_table)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def optimizer(self) -> OptimizerConfig:
        names = [f.name for f in dataclasses.fields(OptimizerConfig)]
        try:
            return OptimizerConfig(**{n: getattr(self, n) for n in names})
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def dump(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in dataclasses.fields(self))


def read_config(path: str | None, overrides=()) -> RunConfig:
    cfg = RunConfig()
    if path:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            cfg.apply(key, value)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not KEY=VALUE")
        cfg.apply(*item.split("=", 1))
    return cfg


def load_data(path: str, fmt: str, species: SpeciesTable | None, energy_key: str = "energy"):
    if not path:
        raise ConfigError("no dataset path configured (set 'data' or pass --data)")
    if not Path(path).exists():
        raise ConfigError(f"dataset path {path} does not exist")
    if fmt == "xyz":
        return read_extended_xyz(path, species, energy_key=energy_key)
    if fmt == "qm9":
        return load_qm9(path, species)
    raise ConfigError(f"unknown data_format {fmt!r} (xyz or qm9)")


def _common_overrides(cfg: RunConfig, args) -> None:
    if getattr(args, "data", None):
        cfg.data = args.data
    if getattr(args, "out", None):
        cfg.out = args.out
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed


def cmd_train(args) -> int:
    cfg = read_config(args.config, args.set)
    _common_overrides(cfg, args)
    hyper, opt = cfg.hyper(), cfg.optimizer()
    opt = dataclasses.replace(opt, seed=cfg.seed)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.txt").write_text(cfg.dump())

    data = load_data(cfg.data, cfg.data_format, hyper.species, cfg.energy_key)
    if cfg.exclusions:
        data = apply_exclusion_list(data, read_exclusion_file(cfg.exclusions))
    n_train = cfg.n_train or len(data) - cfg.n_validate
    split = split_dataset(data, n_train, cfg.n_validate, cfg.seed)
    write_manifest(out / "manifest.txt", split, source=cfg.data, data_format=cfg.data_format,
                   target_energy_key=cfg.energy_key if cfg.data_format == "xyz"
                   else "U0 atomization energy", exclusions=cfg.exclusions or "none")
    for name, part in (("train", split.train), ("validate", split.validate), ("test", split.test)):
        (out / f"{name}_ids.txt").write_text("".join(c.identifier + "\n" for c in part))

    def save_best(epoch, params, score):
        save_checkpoint(Checkpoint(params, None, {"epoch": epoch, "best_score": score}), out / "best.ckpt")

    result = train(split, hyper, opt, on_improvement=save_best)
    write_history(out / "history.csv", result.history)
    save_checkpoint(Checkpoint(result.params, None, {
        "epoch": len(result.history), "best_score": result.best_score, "stop_reason": result.stop_reason,
    }), out / "best.ckpt")
    print(f"trained {len(result.history)} epochs ({result.stop_reason}); "
          f"best validation MAE {result.best_score:.6g} kcal/mol")
    return EXIT_OK


def _load_ckpt(path):
    if not path:
        raise ConfigError("--checkpoint is required")
    if not Path(path).exists():
        raise ConfigError(f"checkpoint {path} does not exist")
    return load_checkpoint(path)


def _data_for_checkpoint(args, ckpt):
    data = load_data(args.data, args.format, None, args.energy_key)
    for c in data:
        c.check_species(ckpt.hyper.species)
    return data


def cmd_evaluate(args) -> int:
    ckpt = _load_ckpt(args.checkpoint)
    data = _data_for_checkpoint(args, ckpt)
    if args.ids:
        keep = set(read_exclusion_file(args.ids))
        data = [c for c in data if c.identifier in keep]
    report = analysis.evaluate(ckpt.params, data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    analysis.write_report_csv(out / "report.csv", report)
    analysis.write_records_csv(out / "records.csv", report)
    curve = [analysis.truncated_mae(ckpt.params, data, k, report.per_order_totals)
             for k in range(ckpt.hyper.n_interaction + 1)]
    analysis.write_truncation_csv(out / "truncation.csv", curve)
    print(f"n={report.n_molecules} MAE={report.mae:.6g} RMSE={report.rmse:.6g} "
          f">1kcal={report.pct_above_1kcal:.3g}%")
    return EXIT_OK


def cmd_predict(args) -> int:
    ckpt = _load_ckpt(args.checkpoint)
    data = _data_for_checkpoint(args, ckpt)
    pred = predict(data, ckpt.params)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n_orders = ckpt.hyper.n_interaction + 1
    with open(out / "predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["identifier", "energy"] + [f"order{n}" for n in range(n_orders)] + ["R"])
        for c, total, orders, R in zip(data, pred.total, pred.per_order_totals, pred.non_hierarchicality):
            w.writerow([c.identifier, repr(float(total))] + [repr(float(v)) for v in orders] + [repr(float(R))])
    print(f"wrote {len(data)} predictions to {out / 'predictions.csv'}")
    return EXIT_OK


def cmd_param_count(args) -> int:
    cfg = read_config(args.config, args.set)
    learnable, fixed = count_parameters(cfg.hyper())
    print(f"learnable {learnable}")
    print(f"fixed {fixed}")
    return EXIT_OK


def cmd_quantiles(args) -> int:
    records = []
    for path in args.records:
        records.extend(analysis.read_records_csv(path))
    if not records:
        raise DatasetError("no records to analyse")
    try:
        probs = [float(p) for p in args.p.split(",")]
    except ValueError:
        raise ConfigError(f"cannot parse probabilities {args.p!r}") from None
    err = np.array([r.abs_error for r in records])
    R = np.array([r.non_hierarchicality for r in records])
    table = analysis.error_quantiles(err, R, probs, args.bin_width)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    analysis.write_quantiles_csv(out / "quantiles.csv", table)
    rho, pval = analysis.rank_correlation(err, R)
    print(f"{len(records)} records, {len(table.counts)} bins; Spearman rho={rho:.4f} p={pval:.3g}")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: usage error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hipnn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def config_args(p):
        p.add_argument("--config", help="flat 'key = value' config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config field (repeatable)")

    def data_args(p):
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--format", default="xyz", choices=("xyz", "qm9"))
        p.add_argument("--energy-key", default="energy")
        p.add_argument("--out", default=".")

    p = sub.add_parser("train", help="split, initialize and train a model")
    config_args(p)
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="error statistics of a checkpoint on a dataset")
    data_args(p)
    p.add_argument("--ids", help="only evaluate identifiers listed in this file")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="energies, per-order energies and R for each molecule")
    data_args(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("param-count", help="learnable and fixed parameter counts")
    config_args(p)
    p.set_defaults(func=cmd_param_count)

    p = sub.add_parser("quantiles", help="error quantiles binned by non-hierarchicality")
    p.add_argument("--records", nargs="+", required=True, help="records.csv files from evaluate (merged)")
    p.add_argument("--p", default="0.5,0.9,0.99")
    p.add_argument("--bin-width", type=float, default=0.066)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_quantiles)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
