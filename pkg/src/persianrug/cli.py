"""Command-line experiments.

Every command reads one INI-style config file (``--config``); sections are
``[data]``, ``[train]``, ``[sweep]``, ``[rug]``, ``[compare]`` and
``[scaling]``. Any key can be overridden with ``--set section.key=value``.

Exit codes: 0 success, 1 configuration error, 2 numerical failure. Error
lines on stderr start with ``error:``.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from . import analytic, rug
from .datagen import DataConfig
from .model import ModelFormatError, TrainConfig, TrainingDiverged, evaluate_loss, load_model, save_model, train
from .symmetry import stats_report

EXIT_CONFIG = 1
EXIT_NUMERIC = 2


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "data": {"p": "0.05", "n_s": "256"},
    "train": {
        "n_d": "64",
        "batch_size": "1024",
        "learning_rate": "1e-3",
        "adam_beta1": "0.9",
        "adam_beta2": "0.999",
        "adam_eps": "1e-8",
        "window": "100",
        "max_steps": "50000",
        "dtype": "float32",
        "init": "tied",
        "eval_samples": "65536",
    },
    "sweep": {"p_grid": "0.02, 0.05, 0.1", "r_grid": "0.125, 0.25, 0.5", "n_s_list": "256", "seeds_per_cell": "1"},
    "rug": {"n_s": "256", "n_d": "40", "p": "0.05", "subset": ""},
    "compare": {"p": "0.05", "n_s": "1024", "n_d_list": "128, 256, 512"},
    "scaling": {"p_list": "0.02, 0.01, 0.005, 0.0025", "r": "0.25", "n_quad": "64"},
}


class Config:
    """Sectioned key/value settings with typed getters."""

    def __init__(self, path=None, overrides=()):
        self.parser = configparser.ConfigParser()
        self.parser.read_dict(DEFAULTS)
        if path is not None:
            path = Path(path)
            if not path.is_file():
                raise ConfigError(f"config file {path} not found")
            try:
                self.parser.read(path, encoding="utf-8")
            except configparser.Error as exc:
                raise ConfigError(f"{path}: {exc}") from None
        for item in overrides:
            key, sep, value = item.partition("=")
            section, dot, name = key.strip().partition(".")
            if not sep or not dot:
                raise ConfigError(f"override {item!r} is not of the form section.key=value")
            if not self.parser.has_section(section):
                self.parser.add_section(section)
            self.parser.set(section, name, value.strip())

    def _get(self, section, key):
        try:
            return self.parser.get(section, key)
        except (configparser.NoSectionError, configparser.NoOptionError):
            raise ConfigError(f"missing setting {section}.{key}") from None

    def get(self, section, key, kind=str):
        raw = self._get(section, key)
        try:
            return kind(raw)
        except ValueError:
            raise ConfigError(f"{section}.{key}={raw!r} is not a valid {kind.__name__}") from None

    def get_list(self, section, key, kind=float):
        raw = self._get(section, key)
        items = [s.strip() for s in raw.replace(";", ",").split(",") if s.strip()]
        if not items:
            raise ConfigError(f"{section}.{key} is empty")
        try:
            return [kind(s) for s in items]
        except ValueError:
            raise ConfigError(f"{section}.{key}={raw!r} holds a non-{kind.__name__} entry") from None

    def train_config(self, seed: int) -> TrainConfig:
        g = self.get
        try:
            return TrainConfig(
                batch_size=g("train", "batch_size", int),
                learning_rate=g("train", "learning_rate", float),
                adam_beta1=g("train", "adam_beta1", float),
                adam_beta2=g("train", "adam_beta2", float),
                adam_eps=g("train", "adam_eps", float),
                window=g("train", "window", int),
                max_steps=g("train", "max_steps", int),
                seed=seed,
                dtype=g("train", "dtype"),
                init=g("train", "init"),
            )
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from None


def cell_seed(master: int, p: float, n_s: int, n_d: int, replicate: int) -> int:
    """Per-cell seed: first 8 bytes (little-endian) of BLAKE2b over
    ``"{master}:{p!r}:{n_s}:{n_d}:{replicate}"``."""
    key = f"{int(master)}:{float(p)!r}:{int(n_s)}:{int(n_d)}:{int(replicate)}".encode()
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")


@dataclass
class SweepRow:
    p: float
    n_s: int
    n_d: int
    r: float
    seed: int
    steps: int
    loss_per_feature: float
    diag_mean: float
    diag_var: float
    bias_mean: float
    bias_var: float
    delta_var_noise: float
    lyapunov: float
    noise_sigma: float   # mean interference variance of the diagonal-normalized W
    sigma_bound: float   # lower bound on that variance
    errors: str = ""


SWEEP_COLUMNS = [f.name for f in fields(SweepRow)]


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path, columns, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in columns])


def append_csv(path, columns, rows) -> None:
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in columns])


def model_row(model, p, seed, steps, loss_per_feature) -> SweepRow:
    st = stats_report(model, p)
    try:
        ns = rug.noise_sigma(st.W, p).variance
    except ValueError:
        ns = float("nan")
    return SweepRow(
        p=p, n_s=model.n_s, n_d=model.n_d, r=model.n_d / model.n_s, seed=seed, steps=steps,
        loss_per_feature=loss_per_feature, diag_mean=st.diag_mean, diag_var=st.diag_var,
        bias_mean=st.bias_mean, bias_var=st.bias_var, delta_var_noise=st.delta_var_noise,
        lyapunov=st.lyapunov, noise_sigma=ns,
        sigma_bound=rug.sigma_lower_bound(p, model.n_s, model.n_d).bound_value,
    )


def run_cell(p, n_s, n_d, seed, train_cfg, eval_samples, weights_path=None):
    """Train one model and summarize it. Returns ``(SweepRow, model)``."""
    data = DataConfig(p, n_s, seed)
    model, report = train(data, n_d, train_cfg)
    loss_pf = evaluate_loss(model, data, n_samples=eval_samples) if eval_samples > 0 else report.final_loss_per_feature
    if weights_path is not None:
        save_model(model, weights_path)
    return model_row(model, p, seed, report.steps_taken, loss_pf), model


def _sweep_cell(args):
    p, n_s, n_d, seed, train_cfg, eval_samples = args
    try:
        row, _ = run_cell(p, n_s, n_d, seed, train_cfg, eval_samples)
        return asdict(row)
    except Exception as exc:  # recorded per cell, sweep continues
        nan = float("nan")
        row = SweepRow(p, n_s, n_d, n_d / n_s, seed, 0, nan, nan, nan, nan, nan, nan, nan, nan, nan,
                       errors=f"{type(exc).__name__}: {exc}")
        return asdict(row)


def _master_seed(args, cfg):
    if args.seed is not None:
        return args.seed
    if cfg.parser.has_option("DEFAULT", "seed"):
        return cfg.get("DEFAULT", "seed", int)
    return 0


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args, cfg) -> int:
    p = cfg.get("data", "p", float)
    n_s = cfg.get("data", "n_s", int)
    n_d = cfg.get("train", "n_d", int)
    master = _master_seed(args, cfg)
    seed = cell_seed(master, p, n_s, n_d, 0)
    tcfg = cfg.train_config(seed)
    out = _out_dir(args)
    weights = out / f"model_p{p:g}_ns{n_s}_nd{n_d}_s{master}.tmsw"
    row, _ = run_cell(p, n_s, n_d, seed, tcfg, cfg.get("train", "eval_samples", int), weights)
    append_csv(out / "train.csv", SWEEP_COLUMNS, [asdict(row)])
    print(f"wrote {weights} (loss/feature {row.loss_per_feature:.6g}, {row.steps} steps)")
    return 0


def sweep_cells(cfg, master):
    tcfg_base = cfg.train_config(0)
    eval_samples = cfg.get("train", "eval_samples", int)
    cells = []
    for n_s in cfg.get_list("sweep", "n_s_list", int):
        for p in cfg.get_list("sweep", "p_grid", float):
            for r in cfg.get_list("sweep", "r_grid", float):
                n_d = max(1, int(round(r * n_s)))
                for rep in range(cfg.get("sweep", "seeds_per_cell", int)):
                    seed = cell_seed(master, p, n_s, n_d, rep)
                    tcfg = TrainConfig(**{**asdict(tcfg_base), "seed": seed})
                    cells.append((p, n_s, n_d, seed, tcfg, eval_samples))
    return cells


def cmd_sweep(args, cfg) -> int:
    master = _master_seed(args, cfg)
    cells = sweep_cells(cfg, master)
    if args.threads > 1:
        with ProcessPoolExecutor(max_workers=args.threads) as pool:
            rows = list(pool.map(_sweep_cell, cells))
    else:
        rows = [_sweep_cell(c) for c in cells]
    rows.sort(key=lambda r: (r["n_s"], r["p"], r["r"], r["seed"]))
    out = _out_dir(args)
    write_csv(out / "sweep.csv", SWEEP_COLUMNS, rows)
    failed = sum(1 for r in rows if r["errors"])
    print(f"wrote {out / 'sweep.csv'} ({len(rows)} rows, {failed} failed)")
    return 0


RUG_COLUMNS = ["n_s", "n_d", "r", "p", "noise_sigma", "sigma_bound", "a", "b", "loss_per_feature"]


def cmd_rug(args, cfg) -> int:
    n_s = cfg.get("rug", "n_s", int)
    n_d = cfg.get("rug", "n_d", int)
    p = cfg.get("rug", "p", float)
    try:
        rug.order_of(n_s)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    subset = cfg.get("rug", "subset").strip()
    S = [int(s) for s in subset.replace(";", ",").split(",") if s.strip()] if subset else None
    seed = _master_seed(args, cfg)
    try:
        layout = rug.RugSpec.for_size(n_s, n_d, seed=seed, S=S)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    R = rug.persian_rug(layout)
    out = _out_dir(args)
    rug.write_pgm(R, out / f"rug_ns{n_s}_nd{n_d}.pgm")
    bound = rug.sigma_lower_bound(p, n_s, n_d).bound_value
    noise = rug.noise_sigma(R, p).variance
    a, b, br = analytic.optimize_macro(math.sqrt(bound), p)
    row = dict(n_s=n_s, n_d=n_d, r=n_d / n_s, p=p, noise_sigma=noise, sigma_bound=bound,
               a=a, b=b, loss_per_feature=br.total)
    append_csv(out / "rug.csv", RUG_COLUMNS, [row])
    print(f"rug n_s={n_s} n_d={n_d}: noise {noise:.10g} bound {bound:.10g} loss {br.total:.6g}")
    return 0


COMPARE_COLUMNS = ["r", "trained_loss", "rug_loss", "linear_loss"]


def cmd_compare(args, cfg) -> int:
    p = cfg.get("compare", "p", float)
    n_s = cfg.get("compare", "n_s", int)
    n_d_list = cfg.get_list("compare", "n_d_list", int)
    master = _master_seed(args, cfg)
    eval_samples = cfg.get("train", "eval_samples", int)
    rug_curve = dict(analytic.rug_loss_curve(p, n_s, n_d_list))
    rows = []
    for n_d in n_d_list:
        seed = cell_seed(master, p, n_s, n_d, 0)
        row, _ = run_cell(p, n_s, n_d, seed, cfg.train_config(seed), eval_samples)
        r = n_d / n_s
        rows.append(dict(r=r, trained_loss=row.loss_per_feature, rug_loss=rug_curve[r],
                         linear_loss=analytic.linear_optimal_loss(p, n_s, n_d, per_feature=True)))
    out = _out_dir(args)
    write_csv(out / "compare.csv", COMPARE_COLUMNS, rows)
    print(f"wrote {out / 'compare.csv'} ({len(rows)} rows)")
    return 0


SCALING_COLUMNS = ["p", "r", "loss", "ratio", "log_ratio", "loss_over_p", "below_r0_limit"]


def cmd_scaling(args, cfg) -> int:
    p_list = cfg.get_list("scaling", "p_list", float)
    r = cfg.get("scaling", "r", float)
    n_quad = cfg.get("scaling", "n_quad", int)
    try:
        table = analytic.scaling_probe(p_list, r, n_quad)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = _out_dir(args)
    rows = [dict(row._asdict(), r=r) for row in table]
    write_csv(out / "scaling.csv", SCALING_COLUMNS, rows)
    print(f"wrote {out / 'scaling.csv'} ({len(rows)} rows)")
    return 0


STATS_COLUMNS = ["n_s", "n_d", "p", "diag_mean", "diag_var", "bias_mean", "bias_var",
                 "delta_var_noise", "lyapunov", "noise_sigma", "sigma_bound"]


def cmd_stats(args, cfg) -> int:
    if args.model is None:
        raise ConfigError("stats needs --model <path.tmsw>")
    p = cfg.get("data", "p", float)
    try:
        model = load_model(args.model)
    except (OSError, ModelFormatError) as exc:
        raise ConfigError(str(exc)) from None
    row = asdict(model_row(model, p, 0, 0, float("nan")))
    row["p"] = p
    out = _out_dir(args)
    append_csv(out / "stats.csv", STATS_COLUMNS, [row])
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(STATS_COLUMNS)
    w.writerow([_fmt(row[c]) for c in STATS_COLUMNS])
    return 0


COMMANDS = {
    "train": cmd_train,
    "sweep": cmd_sweep,
    "rug": cmd_rug,
    "compare": cmd_compare,
    "scaling": cmd_scaling,
    "stats": cmd_stats,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="persianrug", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", type=Path, help="INI config file")
        sp.add_argument("--out", default="out", help="output directory")
        sp.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
        sp.add_argument("--threads", type=int, default=1, help="worker processes for sweeps")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
        if name == "stats":
            sp.add_argument("--model", type=Path, help="TMSW weight file")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.seed is not None and not 0 <= args.seed < 2**64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = Config(args.config, args.overrides)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDiverged, FloatingPointError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
