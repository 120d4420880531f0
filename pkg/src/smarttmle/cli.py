"""Command-line interface: ``smarttmle {simulate,estimate,power}``.

Configuration is one JSON document. Every command-line flag overrides a key of
that document, and ``--set a.b=value`` overrides any key by its dotted path.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import itertools
import json
import logging
import os
import sys
import tempfile
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from .data import CONTRASTS, DataError, get_regime, read_dataset, serialize_dataset
from .hal import HalConfig
from .inference import confidence_interval, contrast_test, standard_error
from .simulation import (
    DGP_INTERPRETATION,
    POWER_COLUMNS,
    SimParams,
    parse_contrast,
    run_power_study,
    simulate_trial,
)
from .tmle import TmleConfig, estimate_regime_mean, fit_censoring, fit_stage3

log = logging.getLogger("smarttmle")

OUT_ENV = "SMARTTMLE_OUT"

DEFAULT_CONFIG = {
    "seed": 0,
    "alpha": 0.05,
    "out": "smarttmle-out",
    "reps": 500,
    "estimator": {
        "superlearner": True,
        "hal": True,
        "delta_g": 0.01,
        "delta_y": 0.005,
        "folds": 5,
    },
    "simulate": {"n": 250, "file": "data.csv"},
    "estimate": {
        "data": None,
        "regimes": ["I", "II", "III", "IIA", "IIIA"],
        "contrasts": None,  # default: every standard contrast among the requested regimes
    },
    "power": {
        "n": [200, 250, 300],
        "alpha0": [-4.06],
        "gamma1": [0.0],
        "gamma2": [0.0],
        "gamma3": [0.0],
        "contrasts": ["II-I"],
        "n_mc": 1000000,
        "n_jobs": 1,
    },
}

SIM_KEYS = {f.name for f in fields(SimParams)} - {"seed"}


class ConfigError(ValueError):
    pass


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def set_dotted(cfg: dict, path: str, value) -> None:
    keys = path.split(".")
    node = cfg
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{path}: {k} is not a section")
    node[keys[-1]] = value


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def build_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if args.config:
        with open(args.config) as fh:
            cfg = _merge(cfg, json.load(fh))
    if os.environ.get(OUT_ENV):
        cfg["out"] = os.environ[OUT_ENV]
    for item in args.set or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        set_dotted(cfg, k.strip(), _parse_value(v))
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out is not None:
        cfg["out"] = args.out
    if args.alpha is not None:
        cfg["alpha"] = args.alpha
    if args.reps is not None:
        cfg["reps"] = args.reps
    if args.no_superlearner:
        cfg["estimator"]["superlearner"] = False
    if getattr(args, "data", None):
        cfg["estimate"]["data"] = args.data
    if not 0 < float(cfg["alpha"]) < 1:
        raise ConfigError("alpha must lie in (0, 1)")
    return cfg


def tmle_config(cfg: dict) -> TmleConfig:
    e = cfg["estimator"]
    return TmleConfig(
        learner="superlearner" if e["superlearner"] else "glm",
        delta_g=float(e["delta_g"]),
        delta_y=float(e["delta_y"]),
        sl_folds=int(e["folds"]),
        sl_hal=bool(e["hal"]),
        seed=int(cfg["seed"]),
    )


def sim_params(section: dict, seed: int) -> SimParams:
    unknown = set(section) - SIM_KEYS - {"file"}
    if unknown:
        raise ConfigError(f"unknown simulation parameters: {sorted(unknown)}")
    return SimParams(seed=seed, **{k: v for k, v in section.items() if k in SIM_KEYS})


def atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_with_metadata(path: Path, text: str, cfg: dict, command: str, extra=None) -> None:
    atomic_write(path, text)
    meta = {"command": command, "version": __version__, "seed": cfg["seed"], "config": cfg,
            "dgp_interpretation": DGP_INTERPRETATION,
            "variance": "empirical second moment of the summed influence components D0+D1+D2+D3",
            "hal_defaults": asdict(HalConfig())}
    if extra:
        meta.update(extra)
    atomic_write(path.with_name(path.name + ".meta.json"), json.dumps(meta, indent=2, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def _csv_text(rows, columns) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r[k]) for k in columns})
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def cmd_simulate(cfg: dict) -> int:
    params = sim_params(cfg["simulate"], int(cfg["seed"]))
    data = simulate_trial(params)
    path = Path(cfg["out"]) / cfg["simulate"].get("file", "data.csv")
    write_with_metadata(path, serialize_dataset(data), cfg, "simulate", {"params": asdict(params)})
    log.info("wrote %s (n=%d)", path, data.n)
    return 0


def cmd_estimate(cfg: dict) -> int:
    sec = cfg["estimate"]
    if not sec.get("data"):
        raise ConfigError("estimate.data (dataset path) is required")
    data = read_dataset(sec["data"])
    config = tmle_config(cfg)
    alpha = float(cfg["alpha"])
    regimes = [get_regime(r).label for r in sec["regimes"]]
    if sec.get("contrasts") is None:
        contrasts = [c for c in CONTRASTS if c[0] in regimes and c[1] in regimes]
    else:
        contrasts = [parse_contrast(c) for c in sec["contrasts"]]
    needed = list(dict.fromkeys(regimes + [r for c in contrasts for r in c]))
    ok = True

    censoring = fit_censoring(data, config.delta_g)
    stage3 = fit_stage3(data, config) if (data.c3 == 1).any() else None
    fits, report = {}, {"n": data.n, "alpha": alpha, "regimes": {}, "contrasts": []}
    for r in needed:
        try:
            fit = estimate_regime_mean(data, r, config, censoring, stage3)
        except Exception as exc:  # noqa: BLE001 - reported per regime
            ok = False
            log.error("regime %s failed: %s", r, exc)
            report["regimes"][r] = {"error": f"{type(exc).__name__}: {exc}"}
            continue
        fits[r] = fit
        entry = fit.report()
        entry["std_error"] = standard_error(fit)
        entry["ci"] = list(confidence_interval(fit, alpha))
        report["regimes"][r] = entry

    rows = []
    for c in contrasts:
        label = f"{c[0]}-{c[1]}"
        if c[0] not in fits or c[1] not in fits:
            ok = False
            report["contrasts"].append({"contrast": label, "error": "regime estimation failed"})
            continue
        try:
            res = contrast_test(fits[c[0]], fits[c[1]], alpha)
        except Exception as exc:  # noqa: BLE001
            ok = False
            log.error("contrast %s failed: %s", label, exc)
            report["contrasts"].append({"contrast": label, "error": str(exc)})
            continue
        rows.append(res.as_row())
        report["contrasts"].append(res.as_row())

    out = Path(cfg["out"])
    write_with_metadata(out / "fit_report.json",
                        json.dumps(report, indent=2, default=_json_default) + "\n", cfg, "estimate")
    cols = ("contrast", "estimate", "std_error", "ci_lower", "ci_upper", "z", "p_value", "reject")
    write_with_metadata(out / "contrasts.csv", _csv_text(rows, cols), cfg, "estimate")
    return 0 if ok else 1


def power_grid(sec: dict, reps_seed: int) -> list:
    axes = {k: sec[k] if isinstance(sec[k], list) else [sec[k]]
            for k in ("n", "alpha0", "gamma1", "gamma2", "gamma3")}
    extra = {k: v for k, v in sec.items() if k in SIM_KEYS and k not in axes}
    grid = []
    for n, a0, g1, g2, g3 in itertools.product(*axes.values()):
        grid.append(SimParams(n=int(n), alpha0=a0, gamma1=g1, gamma2=g2, gamma3=g3,
                              seed=reps_seed, **extra))
    return grid


def power_svg(cells, contrast: str, alpha: float) -> str:
    """Power against true effect, one polyline per sample size."""
    cells = [c for c in cells if c.contrast == contrast]
    W, H, L, R, T, B = 800, 600, 80, 40, 70, 70
    xs = [c.true_effect for c in cells]
    xlo, xhi = (min(xs), max(xs)) if xs else (0.0, 1.0)
    if xhi - xlo < 1e-9:
        xlo, xhi = xlo - 0.5, xhi + 0.5
    px = lambda x: L + (x - xlo) / (xhi - xlo) * (W - L - R)  # noqa: E731
    py = lambda y: H - B - y * (H - T - B)  # noqa: E731
    flagged = [c for c in cells if c.flagged]
    subtitle = f"alpha = {alpha:g}"
    if flagged:
        subtitle += f"; {len(flagged)} cell(s) flagged: >2% replication failures"
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<text x="{W / 2}" y="28" text-anchor="middle" font-size="18">Power, contrast {contrast}</text>',
        f'<text x="{W / 2}" y="50" text-anchor="middle" font-size="12">{subtitle}</text>',
        f'<line x1="{L}" y1="{H - B}" x2="{W - R}" y2="{H - B}" stroke="black"/>',
        f'<line x1="{L}" y1="{T}" x2="{L}" y2="{H - B}" stroke="black"/>',
        f'<text x="{W / 2}" y="{H - 20}" text-anchor="middle" font-size="14">True effect</text>',
        f'<text x="20" y="{H / 2}" text-anchor="middle" font-size="14" '
        f'transform="rotate(-90 20 {H / 2})">Probability of rejecting H0</text>',
    ]
    for level in (0.05, 0.80):
        y = py(level)
        parts.append(f'<line x1="{L}" y1="{y:.2f}" x2="{W - R}" y2="{y:.2f}" stroke="gray" '
                     f'stroke-dasharray="2,4"/>')
    for tick in (0.0, 0.25, 0.5, 0.75, 1.0):
        parts.append(f'<text x="{L - 8}" y="{py(tick) + 4:.2f}" text-anchor="end" font-size="11">{tick:g}</text>')
    for tick in np.linspace(xlo, xhi, 5):
        parts.append(f'<text x="{px(tick):.2f}" y="{H - B + 18}" text-anchor="middle" font-size="11">{tick:.2f}</text>')
    colors = ("#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02")
    for i, n in enumerate(sorted({c.params.n for c in cells})):
        line = sorted((c for c in cells if c.params.n == n), key=lambda c: c.true_effect)
        pts = " ".join(f"{px(c.true_effect):.2f},{py(c.power if np.isfinite(c.power) else 0):.2f}"
                       for c in line)
        color = colors[i % len(colors)]
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}"/>')
        parts.append(f'<text x="{W - R - 80}" y="{T + 16 * (i + 1)}" font-size="12" fill="{color}">n = {n}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_power(cfg: dict) -> int:
    sec = cfg["power"]
    grid = power_grid(sec, int(cfg["seed"]))
    contrasts = [parse_contrast(c) for c in sec["contrasts"]]
    alpha = float(cfg["alpha"])

    def progress(done, total):
        log.info("cell %d/%d", done, total)

    cells = run_power_study(grid, contrasts, reps=int(cfg["reps"]), alpha=alpha,
                            config=tmle_config(cfg), master_seed=int(cfg["seed"]),
                            n_mc=int(sec["n_mc"]), n_jobs=int(sec["n_jobs"]), progress=progress)
    out = Path(cfg["out"])
    rows = [dict(c.as_row(), flagged=int(c.flagged)) for c in cells]
    write_with_metadata(out / "power.csv", _csv_text(rows, POWER_COLUMNS + ("flagged",)), cfg, "power")
    for c in dict.fromkeys(cell.contrast for cell in cells):
        write_with_metadata(out / f"power_{c}.svg", power_svg(cells, c, alpha), cfg, "power")
    ok = all(c.failures == 0 for c in cells)
    if not ok:
        log.warning("%d cell(s) had replication failures", sum(c.failures > 0 for c in cells))
    return 0 if ok else 1


def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--out", help=f"output directory (env {OUT_ENV} also honored)")
    common.add_argument("--alpha", type=float, help="test level (default 0.05)")
    common.add_argument("--reps", type=int, help="replications per power cell")
    common.add_argument("--no-superlearner", action="store_true",
                        help="Poisson GLM initial fits instead of the super learner")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key by dotted path, e.g. power.n=[200,300]")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="smarttmle", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="simulate one trial dataset")
    est = sub.add_parser("estimate", parents=[common], help="estimate regime means and contrasts")
    est.add_argument("data", nargs="?", help="dataset CSV (overrides estimate.data)")
    sub.add_parser("power", parents=[common], help="run a power study")
    return parser


COMMANDS = {"simulate": cmd_simulate, "estimate": cmd_estimate, "power": cmd_power}


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = build_config(args)
        return COMMANDS[args.command](cfg)
    except (ConfigError, DataError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
