"""Command line: ``ccbm synth|run|verify|sweep``."""

from __future__ import annotations

import argparse
import configparser
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from . import coeff, optim, pde, synth
from .mesh import MeshError, ObstacleCurve, annulus_for_curve, write_vtk

log = logging.getLogger("ccbm")

DEFAULT_SEED = 42
SEED_ENV = "CCBM_SEED"


class ConfigError(ValueError):
    """Invalid configuration; the message starts with ``section.key``."""


def _float(s):
    return float(s)


def _int(s):
    return int(s)


def _bool(s):
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _expr(s):
    coeff.parse_expr(s)
    return s.strip()


def _optional_float(s):
    return None if s.strip().lower() in ("", "none", "auto") else float(s)


# section -> key -> (parser, default)
SCHEMA = {
    "domain": {
        "outer_radius": (_float, 1.0),
        "sigma": (_expr, "1.1 + sin(pi*x)*sin(pi*y)"),
        "bx": (_expr, "1.1 - sin(t)"),
        "by": (_expr, "1.1 + cos(t)"),
    },
    "truth": {
        "kind": (str, "ellipse"),
        "center_x": (_float, 0.0),
        "center_y": (_float, 0.0),
        "radius": (_float, 0.6),
        "radius_expr": (_expr, None),
    },
    "data": {
        "g": (_expr, "2 + cos(t)"),
        "fine_factor": (_int, 2),
        "delta": (_float, 0.0),
        "seed": (_int, DEFAULT_SEED),
    },
    "solver": {
        "n_angular": (_int, 150),
        "n_radial": (_int, 12),
    },
    "optim": {
        "method": (str, "conventional"),
        "mu": (_float, 0.1),
        "c_b": (_float, 0.7),
        "N": (_int, 600),
        "epsilon": (_float, 1e-6),
        "beta": (_optional_float, None),
        "a": (_optional_float, None),
        "b": (_optional_float, None),
        "lambda0": (_float, 0.001),
        "v0": (_float, 1.0),
        "init_radius": (_float, 0.6),
        "init_center_x": (_float, 0.0),
        "init_center_y": (_float, 0.0),
        "inner_max": (_int, 1),
        "stop_on_epsilon": (_bool, True),
        "normals": (str, "flux"),
    },
    "output": {
        "directory": (str, "out"),
        "snapshot_stride": (_int, 50),
        "vtk": (_bool, False),
    },
}

CHOICES = {
    ("truth", "kind"): ("circle", "ellipse", "dumbbell", "peanut", "lblock", "polar"),
    ("optim", "method"): optim.METHODS,
    ("optim", "normals"): ("flux", "gradient"),
}


@dataclass(frozen=True)
class Settings:
    values: dict
    path: Path | None = None

    def __getitem__(self, item):
        section, key = item
        return self.values[section][key]

    def curve(self) -> ObstacleCurve:
        v = self.values["truth"]
        return ObstacleCurve(v["kind"], (v["center_x"], v["center_y"]), v["radius"], v["radius_expr"])

    def coefficients(self) -> pde.Coefficients:
        d = self.values["domain"]
        return pde.Coefficients.parse(d["sigma"], d["bx"], d["by"])

    def run_config(self) -> optim.RunConfig:
        o, d, s = self.values["optim"], self.values["domain"], self.values["solver"]
        return optim.RunConfig(
            method=o["method"],
            mu=o["mu"],
            c_b=o["c_b"],
            max_iter=o["N"],
            epsilon=o["epsilon"],
            beta=o["beta"],
            a=o["a"],
            b=o["b"],
            lambda0=o["lambda0"],
            v0=o["v0"],
            init_center=(o["init_center_x"], o["init_center_y"]),
            init_radius=o["init_radius"],
            n_angular=s["n_angular"],
            n_radial=s["n_radial"],
            outer_radius=d["outer_radius"],
            sigma=d["sigma"],
            bx=d["bx"],
            by=d["by"],
            inner_max=o["inner_max"],
            snapshot_stride=self.values["output"]["snapshot_stride"],
            normals=o["normals"],
            stop_on_epsilon=o["stop_on_epsilon"],
        )


def _check_ranges(values):
    def need(cond, where, msg):
        if not cond:
            raise ConfigError(f"{where}: {msg}")

    need(values["domain"]["outer_radius"] > 0, "domain.outer_radius", "must be positive")
    need(values["data"]["delta"] >= 0, "data.delta", "must be non-negative")
    need(values["data"]["fine_factor"] >= 2, "data.fine_factor", "must be at least 2 (data and inversion meshes must differ)")
    need(values["solver"]["n_angular"] >= 8, "solver.n_angular", "must be at least 8")
    need(values["solver"]["n_radial"] >= 2, "solver.n_radial", "must be at least 2")
    o = values["optim"]
    need(o["mu"] > 0, "optim.mu", "must be positive")
    need(0 < o["c_b"] <= 1, "optim.c_b", "must lie in (0, 1]")
    need(o["N"] >= 0, "optim.N", "must be non-negative")
    need(o["epsilon"] > 0, "optim.epsilon", "must be positive")
    need(o["beta"] is None or o["beta"] > 0, "optim.beta", "must be positive")
    need(o["a"] is None or o["b"] is None or o["a"] <= o["b"], "optim.a", "must not exceed optim.b")
    need(o["inner_max"] >= 1, "optim.inner_max", "must be at least 1")
    need(o["init_radius"] > 0, "optim.init_radius", "must be positive")
    need(values["output"]["snapshot_stride"] >= 0, "output.snapshot_stride", "must be non-negative")
    if values["truth"]["kind"] == "polar":
        need(values["truth"]["radius_expr"] is not None, "truth.radius_expr", "required for kind = polar")


def load_config(path=None, text: str | None = None, env=None) -> Settings:
    """Parse and validate a config file; missing keys take their defaults."""
    env = os.environ if env is None else env
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        if text is not None:
            parser.read_string(text, source=str(path or "<string>"))
        elif path is not None:
            with open(path) as fh:
                parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror or exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    values = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{section}: unknown section (expected one of {', '.join(SCHEMA)})")
    for section, keys in SCHEMA.items():
        given = parser[section] if parser.has_section(section) else {}
        for key in given:
            if key not in keys:
                raise ConfigError(f"{section}.{key}: unknown key")
        values[section] = {}
        for key, (conv, default) in keys.items():
            if key not in given:
                values[section][key] = default
                continue
            raw = given[key]
            try:
                val = conv(raw)
            except coeff.ExprSyntaxError as exc:
                raise ConfigError(f"{section}.{key}: syntax error at offset {exc.offset}: expected {exc.expected}") from exc
            except ValueError as exc:
                raise ConfigError(f"{section}.{key}: cannot parse {raw!r} ({exc})") from exc
            choices = CHOICES.get((section, key))
            if choices and val not in choices:
                raise ConfigError(f"{section}.{key}: {val!r} is not one of {', '.join(choices)}")
            values[section][key] = val
    if env.get(SEED_ENV):
        try:
            values["data"]["seed"] = int(env[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"data.seed: {SEED_ENV}={env[SEED_ENV]!r} is not an integer") from exc
    _check_ranges(values)
    return Settings(values, Path(path) if path else None)


def _out_dir(args, settings) -> Path:
    return Path(args.out) if args.out else Path(settings["output", "directory"])


def cmd_synth(settings: Settings, out: Path) -> synth.Dataset:
    s = settings["solver", "n_angular"], settings["solver", "n_radial"]
    ds = synth.make_dataset(
        settings.curve(),
        settings["data", "g"],
        settings.coefficients(),
        s[0],
        s[1],
        fine_factor=settings["data", "fine_factor"],
        delta=settings["data", "delta"],
        seed=settings["data", "seed"],
        outer_radius=settings["domain", "outer_radius"],
    )
    ds.write(out)
    return ds


def cmd_run(settings: Settings, dataset_path: Path, out: Path) -> optim.History:
    ds = synth.Dataset.read(dataset_path)
    cfg = settings.run_config()
    if len(ds.angles) != cfg.n_angular:
        log.warning("dataset has %d Sigma values, mesh has %d; interpolating", len(ds.angles), cfg.n_angular)
    hist = optim.run(cfg, ds)
    hist.write(out)
    if settings["output", "vtk"]:
        write_vtk(out / f"mesh_{len(hist)}.vtk", hist.mesh)
    log.info("%s: %d iterations, stop=%s, final J=%.3e", cfg.method, len(hist), hist.stop_reason, hist.final_J)
    return hist


def _sweep_one(config_path: str, out: str) -> tuple[str, int, str]:
    try:
        settings = load_config(config_path)
        d = Path(out)
        cmd_synth(settings, d)
        cmd_run(settings, d, d)
        return config_path, 0, ""
    except Exception as exc:  # reported per job, the sweep continues
        return config_path, 1, str(exc)


def cmd_sweep(manifest: Path, out: Path, jobs: int) -> int:
    configs = [
        line.strip()
        for line in manifest.read_text().splitlines()
        if line.strip() and not line.lstrip().startswith("#")
    ]
    base = manifest.parent
    paths = [str(p if Path(p).is_absolute() else base / p) for p in configs]
    outs = [str(out / Path(p).stem) for p in paths]
    if len(set(outs)) != len(outs):
        raise ConfigError(f"{manifest}: config file names must be distinct (they name the output directories)")
    status = 0
    if jobs <= 1:
        results = [_sweep_one(p, o) for p, o in zip(paths, outs)]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_one, paths, outs))
    for path, code, msg in results:
        print(f"{'ok' if code == 0 else 'FAILED'} {path}{': ' + msg if msg else ''}")
        status |= code
    return status


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ccbm", description="Obstacle reconstruction by complex boundary coupling.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p = sub.add_parser("run", help="reconstruct from a dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--dataset", required=True, help="dataset.csv or the directory holding it")
    p.add_argument("--out")
    p = sub.add_parser("verify", help="run the acceptance checks")
    p.add_argument("--level", choices=("fast", "full"), default="fast")
    p = sub.add_parser("sweep", help="synth + run for every config listed in a manifest")
    p.add_argument("--config", required=True, help="manifest: one config path per line")
    p.add_argument("--out", default="sweep")
    p.add_argument("--jobs", type=int, default=1)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "verify":
            from . import verify

            results = verify.run_checks(args.level)
            return 0 if all(r.passed for r in results) else 1
        if args.command == "sweep":
            if args.jobs < 1:
                raise ConfigError("--jobs: must be at least 1")
            return cmd_sweep(Path(args.config), Path(args.out), args.jobs)
        settings = load_config(args.config)
        out = _out_dir(args, settings)
        if args.command == "synth":
            cmd_synth(settings, out)
        else:
            cmd_run(settings, Path(args.dataset), out)
        return 0
    except (ConfigError, MeshError, pde.SolverError, coeff.ExprDomainError, OSError, ValueError) as exc:
        print(f"ccbm {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
