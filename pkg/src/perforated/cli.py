"""Command-line runner: one experiment per invocation, config echoed into a manifest.

Usage::

    perforated run cluster --lambda 50 --eps 0.05 --alpha 4 --seed 7 --out out/
    perforated run cutoff-rate --config cfg.json --ladder 0.2,0.14,0.1

Exit status is 0 when every invariant check passes, 1 when one fails and 2
when the configuration is invalid (no artifacts are written then).
"""

from __future__ import annotations

import argparse
import copy
import json
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__

EXPERIMENTS = ("sample", "cluster", "occupancy", "separation", "slln", "john", "bogovskii-sweep", "cutoff-rate")

DYADIC = [2.0**-3, 2.0**-4, 2.0**-5, 2.0**-6]

DEFAULTS = {
    "sample": {"lambda": 1.0, "eps": 0.1, "alpha": 4.0, "d": 3, "radius": 1.0, "marks": {"kind": "constant", "params": [1.0]}},
    "cluster": {"lambda": 50.0, "eps": 0.05, "alpha": 4.0, "d": 3, "radius": 0.25, "kappa": None, "method": "batched"},
    "occupancy": {"lambda": 20.0, "delta": 1.0, "d": 2, "radius": 0.068, "ladder": DYADIC, "trials": 1000, "mode": "grid"},
    "separation": {"lambda": 0.1, "kappa": 1.5, "tau": 1.0, "d": 2, "radius": 2.5, "ladder": DYADIC, "trials": 1000},
    "slln": {"lambda": 5.0, "d": 2, "half_width": 0.5, "marks": {"kind": "uniform", "params": [0.0, 1.0]}, "m": 3.0, "ladder": [2.0**-6], "trials": 200},
    "john": {"ladder": [0.2, 0.1, 0.05], "alpha": 4.0, "d": 3, "N": None, "samples": 50, "violate": False},
    "bogovskii-sweep": {
        "ladder": [0.2, 0.14, 0.1, 0.07],
        "q": 2.0,
        "probes": 32,
        "power_iters": 40,
        "naive": True,
        "lambda": 0.06,
        "resolution": 512,
        "cube_ratio": 1.5,
        "hole_cells": 1.5,
        "N": 12,
        "alpha": 4.0,
        "kappa": 1.5,
    },
    "cutoff-rate": {"alpha": 4.0, "r": 2.0, "ladder": [0.2, 0.14, 0.1], "lambda": 0.1, "d": 3, "radius": 1.0, "cells_per_ramp": 6.0},
}


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass
class ExperimentConfig:
    """Experiment name, its parameters, seed and output directory."""

    experiment: str
    params: dict = field(default_factory=dict)
    seed: int = 0
    output_dir: str = "out"
    workers: int = 1

    def to_dict(self) -> dict:
        return {
            "experiment": self.experiment,
            "params": copy.deepcopy(self.params),
            "seed": int(self.seed),
            "output_dir": self.output_dir,
            "workers": int(self.workers),
        }

    def data_config(self) -> dict:
        """The keys that determine the data; output location and worker count do not."""
        d = self.to_dict()
        del d["output_dir"], d["workers"]
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        unknown = set(data) - {"experiment", "params", "seed", "output_dir", "workers"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "experiment" not in data:
            raise ConfigError("config lacks 'experiment'")
        return cls(
            data["experiment"],
            dict(data.get("params", {})),
            data.get("seed", 0),
            data.get("output_dir", "out"),
            data.get("workers", 1),
        )

    def validate(self) -> None:
        """Fill defaults and check every precondition; raise ConfigError on the first violation."""
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}")
        if isinstance(self.seed, bool) or not isinstance(self.seed, int) or not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed!r}")
        if isinstance(self.workers, bool) or not isinstance(self.workers, int) or self.workers < 1:
            raise ConfigError(f"workers must be a positive integer, got {self.workers!r}")
        defaults = DEFAULTS[self.experiment]
        unknown = set(self.params) - set(defaults)
        if unknown:
            raise ConfigError(f"unknown parameters for {self.experiment}: {sorted(unknown)}")
        merged = copy.deepcopy(defaults)
        merged.update(self.params)
        self.params = merged
        try:
            _CHECKS[self.experiment](self)
        except ConfigError:
            raise
        except (ValueError, TypeError, KeyError) as exc:
            raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# builders shared by validation and execution


def _ball(p) -> "StarDomain":
    from .geometry import StarDomain

    return StarDomain.ball(float(p["radius"]), int(p["d"]))


def _trial_config(cfg: ExperimentConfig):
    from .stochastic_lab import TrialConfig

    p = cfg.params
    return TrialConfig(int(p["trials"]), cfg.seed, tuple(p["ladder"]), 0.95, cfg.workers)


def _positive(p, *names):
    for n in names:
        v = p[n]
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not v > 0 or not math.isfinite(v):
            raise ConfigError(f"{n} must be a positive number, got {v!r}")


def _ladder(p):
    lad = p["ladder"]
    if not isinstance(lad, (list, tuple)) or not lad:
        raise ConfigError("ladder must be a non-empty list")
    if any(isinstance(e, bool) or not isinstance(e, (int, float)) or not 0 < e < 1 for e in lad):
        raise ConfigError(f"ladder entries must lie in (0, 1), got {lad}")
    if any(b >= a for a, b in zip(lad, lad[1:])):
        raise ConfigError(f"ladder must be strictly decreasing, got {lad}")


def _check_sample(cfg):
    from .sampler import MarkDist, ProcessParams, admissible_alpha

    p = cfg.params
    _positive(p, "lambda", "eps", "radius")
    if not admissible_alpha(p["alpha"], p["d"]):
        raise ConfigError(f"alpha={p['alpha']} must exceed d={p['d']}")
    ProcessParams(p["lambda"], MarkDist.from_dict(p["marks"]), cfg.seed)
    _ball(p)


def _check_cluster(cfg):
    from .clusterer import ClusterParams

    p = cfg.params
    _positive(p, "lambda", "eps", "radius")
    if p["method"] not in ("batched", "sequential"):
        raise ConfigError(f"method must be 'batched' or 'sequential', got {p['method']!r}")
    ClusterParams.from_alpha(p["eps"], p["alpha"], p["d"], p["kappa"])
    _ball(p)


def _check_occupancy(cfg):
    p = cfg.params
    _positive(p, "lambda", "delta", "radius")
    _ladder(p)
    if p["mode"] not in ("grid", "all"):
        raise ConfigError(f"mode must be 'grid' or 'all', got {p['mode']!r}")
    _trial_config(cfg)
    _ball(p)


def _check_separation(cfg):
    p = cfg.params
    _positive(p, "lambda", "kappa", "tau", "radius")
    if not p["kappa"] > 1:
        raise ConfigError(f"kappa must be > 1, got {p['kappa']}")
    if not p["tau"] >= 1:
        raise ConfigError(f"tau must be >= 1, got {p['tau']}")
    _ladder(p)
    _trial_config(cfg)
    _ball(p)


def _check_slln(cfg):
    from .sampler import MarkDist

    p = cfg.params
    _positive(p, "lambda", "half_width", "m")
    _ladder(p)
    _trial_config(cfg)
    MarkDist.from_dict(p["marks"])


def _check_john(cfg):
    p = cfg.params
    _ladder(p)
    if p["d"] not in (2, 3):
        raise ConfigError(f"d must be 2 or 3, got {p['d']}")
    if not p["alpha"] > p["d"]:
        raise ConfigError(f"alpha={p['alpha']} must exceed d={p['d']}")
    if int(p["samples"]) < 1:
        raise ConfigError("samples must be >= 1")


def _family(cfg):
    from .bogovskii.sweep import SurrogateFamily

    p = cfg.params
    return SurrogateFamily(
        intensity=float(p["lambda"]),
        seed=cfg.seed,
        resolution=int(p["resolution"]),
        hole_cells=float(p["hole_cells"]),
        cube_ratio=float(p["cube_ratio"]),
        N=int(p["N"]),
        alpha=float(p["alpha"]),
        kappa=float(p["kappa"]),
        eps_min=float(min(p["ladder"])),
    )


def _check_sweep(cfg):
    p = cfg.params
    _positive(p, "q", "lambda", "resolution", "cube_ratio", "hole_cells", "N")
    _ladder(p)
    if int(p["probes"]) < 1 or int(p["power_iters"]) < 1:
        raise ConfigError("probes and power_iters must be >= 1")
    if p["hole_cells"] * 2 < 3:
        raise ConfigError("holes must be at least 3 cells across (hole_cells >= 1.5)")
    fam = _family(cfg)
    for eps in p["ladder"]:
        fam.params(eps)
        if fam.cube(eps) / 8 < 3 * fam.h:
            raise ConfigError(f"eps={eps}: box layer is {fam.cube(eps) / 8 / fam.h:.2f} cells, need 3")


def _check_cutoff(cfg):
    from .cutoff import check_admissible

    p = cfg.params
    _positive(p, "alpha", "r", "lambda", "radius", "cells_per_ramp")
    _ladder(p)
    check_admissible(p["r"], p["alpha"], p["d"])
    if p["cells_per_ramp"] < 3:
        raise ConfigError("cells_per_ramp must be >= 3")
    _ball(p)


_CHECKS = {
    "sample": _check_sample,
    "cluster": _check_cluster,
    "occupancy": _check_occupancy,
    "separation": _check_separation,
    "slln": _check_slln,
    "john": _check_john,
    "bogovskii-sweep": _check_sweep,
    "cutoff-rate": _check_cutoff,
}


# ---------------------------------------------------------------------------
# runners: each returns (artifacts, invariants, errors)


def _run_sample(cfg, out: Path):
    from .sampler import MarkDist, ProcessParams, build_perforation, master_window, sample_marked_ppp, write_jsonl

    p = cfg.params
    domain = _ball(p)
    window = master_window(domain, p["eps"])
    sample = sample_marked_ppp(ProcessParams(p["lambda"], MarkDist.from_dict(p["marks"]), cfg.seed), window)
    write_jsonl(sample, out / "sample.jsonl")
    perf = build_perforation(sample, domain, p["eps"], p["alpha"])
    inv = {
        "points_in_window": bool(len(sample) == 0 or np.all(window.contains(sample.z))),
        "holes_inside_domain": bool(np.all(domain.boundary_distance(perf.centers) > p["eps"])) if len(perf.radii) else True,
    }
    return ["sample.jsonl"], inv, []


def _run_cluster(cfg, out: Path):
    from .clusterer import ClusterParams, EpsilonTooLarge, build_cluster_boxes, verify_cluster_properties, write_boxes_json
    from .sampler import ProcessParams, build_perforation, master_window, sample_marked_ppp

    p = cfg.params
    domain = _ball(p)
    sample = sample_marked_ppp(ProcessParams(p["lambda"], seed=cfg.seed), master_window(domain, p["eps"]))
    perf = build_perforation(sample, domain, p["eps"], p["alpha"])
    params = ClusterParams.from_alpha(p["eps"], p["alpha"], p["d"], p["kappa"])
    try:
        boxes = build_cluster_boxes(perf.centers, params, method=p["method"])
    except EpsilonTooLarge as exc:
        return [], {"clustered": False}, [{"eps": p["eps"], "error": str(exc)}]
    write_boxes_json(boxes, out / "boxes.json")
    report = verify_cluster_properties(boxes, perf, params)
    report.write_csv(out / "report.csv")
    inv = {r.prop: bool(r.passed) for r in report.rows}
    return ["boxes.json", "report.csv"], inv, []


def _within_bound(estimates) -> dict:
    return {f"eps={e.eps!r}": bool(e.p_hat <= e.theory_bound + 3 * e.sigma) for e in estimates}


def _run_occupancy(cfg, out: Path):
    from .stochastic_lab import estimate_max_occupancy, write_estimates_csv

    p = cfg.params
    tc = _trial_config(cfg)
    domain = _ball(p)
    est = [estimate_max_occupancy(p["lambda"], e, p["delta"], p["d"], tc, domain=domain, mode=p["mode"]) for e in tc.eps_ladder]
    write_estimates_csv(est, out / "occupancy.csv", cfg.data_config())
    return ["occupancy.csv", "occupancy.csv.json"], _within_bound(est), []


def _run_separation(cfg, out: Path):
    from .stochastic_lab import estimate_separation_event, write_estimates_csv

    p = cfg.params
    tc = _trial_config(cfg)
    domain = _ball(p)
    est = [estimate_separation_event(p["lambda"], e, p["kappa"], p["tau"], p["d"], tc, domain=domain) for e in tc.eps_ladder]
    write_estimates_csv(est, out / "separation.csv", cfg.data_config())
    return ["separation.csv", "separation.csv.json"], _within_bound(est), []


def _run_slln(cfg, out: Path):
    from .geometry import StarDomain
    from .sampler import MarkDist
    from .stochastic_lab import slln_estimate, write_slln_csv

    p = cfg.params
    tc = _trial_config(cfg)
    S = StarDomain.box([p["half_width"]] * int(p["d"]))
    rows = slln_estimate(p["lambda"], MarkDist.from_dict(p["marks"]), S, p["m"], tc.eps_ladder, tc)
    write_slln_csv(rows, out / "slln.csv", cfg.data_config())
    inv = {}
    for r in rows:
        # the limit should sit within a few standard errors of the mean
        se_c = (r.count_ci_hi - r.count_ci_lo) / (2 * 1.96)
        se_m = (r.moment_ci_hi - r.moment_ci_lo) / (2 * 1.96)
        inv[f"count eps={r.eps!r}"] = bool(abs(r.count_mean - r.count_limit) <= 5 * se_c + 1e-12)
        inv[f"moment eps={r.eps!r}"] = bool(abs(r.moment_mean - r.moment_limit) <= 5 * se_m + 1e-12)
    return ["slln.csv", "slln.csv.json"], inv, []


def _run_john(cfg, out: Path):
    from .john import c_cap, construct_john_path, estimate_john_constant, reference_scene, write_constant_csv, write_path_json

    p = cfg.params
    rows, inv, artifacts = [], {}, ["john.csv"]
    for k, eps in enumerate(p["ladder"]):
        scene = reference_scene(eps, p["alpha"], p["N"], p["d"], p["violate"])
        c, worst = estimate_john_constant(scene, int(p["samples"]), seed=cfg.seed)
        rows.append((eps, c, worst))
        path = construct_john_path(worst, scene)
        name = f"path_{k}.json"
        write_path_json(path, out / name)
        artifacts.append(name)
        try:
            inv[f"eps={eps!r}"] = bool(c <= c_cap(scene.N, scene.d))
        except KeyError:
            inv[f"eps={eps!r}"] = bool(math.isfinite(c))
    write_constant_csv(rows, out / "john.csv")
    return artifacts, inv, []


def _run_sweep(cfg, out: Path):
    from .bogovskii.sweep import operator_norm_sweep, write_sweep_csv

    p = cfg.params
    skipped = []
    rows = operator_norm_sweep(
        _family(cfg), p["ladder"], p["q"], int(p["probes"]), int(p["power_iters"]), bool(p["naive"]), seed=cfg.seed, skipped=skipped
    )
    write_sweep_csv(rows, out / "sweep.csv")
    inv = {}
    for r in rows:
        inv[f"residual eps={r.eps!r}"] = bool(r.div_residual <= 1e-7)
        inv[f"zero trace eps={r.eps!r}"] = r.trace_violations == 0
    return ["sweep.csv"], inv, skipped


def _run_cutoff(cfg, out: Path):
    from .cutoff import rate_fit, rate_ladder, write_rate_csv
    from .sampler import MarkDist, ProcessParams, build_perforation, master_window, sample_marked_ppp

    p = cfg.params
    domain = _ball(p)
    sample = sample_marked_ppp(ProcessParams(p["lambda"], MarkDist("constant", (1.0,)), cfg.seed), master_window(domain, min(p["ladder"])))
    perfs = [build_perforation(sample, domain, e, p["alpha"]) for e in p["ladder"]]
    rows = rate_ladder(perfs, p["r"], p["cells_per_ramp"])
    write_rate_csv(rows, out / "rate.csv")
    inv = {f"grad bound eps={r.eps!r}": bool(r.max_grad_ratio <= r.grad_tolerance) for r in rows}
    if len(rows) >= 3 and all(r.gap > 0 for r in rows):
        fit = rate_fit([(r.eps, r.gap) for r in rows])
        with open(out / "rate_fit.json", "w") as fh:
            json.dump({"slope": fit.slope, "stderr": fit.stderr, "sigma_theory": rows[0].sigma_theory}, fh, indent=1, sort_keys=True)
            fh.write("\n")
        return ["rate.csv", "rate_fit.json"], inv, []
    return ["rate.csv"], inv, []


_RUNNERS = {
    "sample": _run_sample,
    "cluster": _run_cluster,
    "occupancy": _run_occupancy,
    "separation": _run_separation,
    "slln": _run_slln,
    "john": _run_john,
    "bogovskii-sweep": _run_sweep,
    "cutoff-rate": _run_cutoff,
}


def run(cfg: ExperimentConfig) -> int:
    """Validate, run and write artifacts plus ``manifest.json``; return the exit status."""
    try:
        cfg.validate()
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    artifacts, invariants, errors = _RUNNERS[cfg.experiment](cfg, out)
    passed = bool(invariants) and all(invariants.values()) and not errors
    manifest = {
        "config": cfg.to_dict(),
        "tool": "perforated",
        "version": __version__,
        "wall_time_s": time.perf_counter() - t0,
        "artifacts": artifacts,
        "invariants": invariants,
        "errors": errors,
        "passed": passed,
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    status = "PASS" if passed else "FAIL"
    print(f"{cfg.experiment}: {status} ({len(artifacts)} artifacts in {out})")
    return 0 if passed else 1


# ---------------------------------------------------------------------------
# argument parsing


def _flag_type(default):
    if isinstance(default, bool):
        return lambda s: {"true": True, "1": True, "false": False, "0": False}[s.lower()]
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    if isinstance(default, list):
        return lambda s: [float(v) for v in s.split(",") if v.strip()]
    if isinstance(default, dict):
        return json.loads
    return _auto


def _auto(s: str):
    """Parse flags whose default is None: number if possible, else the string."""
    for conv in (int, float):
        try:
            return conv(s)
        except ValueError:
            pass
    return s


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="perforated", description="Run one perforated-domain experiment.")
    sub = parser.add_subparsers(dest="experiment", required=True, metavar="EXPERIMENT")
    for name in EXPERIMENTS:
        sp = sub.add_parser(name, help=f"run the {name} experiment")
        sp.add_argument("--config", type=Path, help="JSON config; flags override its keys")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--workers", type=int)
        sp.add_argument("--out", type=str)
        for key, default in DEFAULTS[name].items():
            flag = "--" + key.replace("_", "-")
            sp.add_argument(flag, dest=f"param_{key}", type=_flag_type(default), default=None, metavar=key.upper())
    return parser


def config_from_args(args) -> ExperimentConfig:
    if args.config is not None:
        try:
            data = json.loads(args.config.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        cfg = ExperimentConfig.from_dict(data)
        if cfg.experiment != args.experiment:
            raise ConfigError(f"config is for {cfg.experiment!r}, command line asks for {args.experiment!r}")
    else:
        cfg = ExperimentConfig(args.experiment)
    for key, value in vars(args).items():
        if key.startswith("param_") and value is not None:
            cfg.params[key[len("param_") :]] = value
    if args.seed is not None:
        cfg.seed = args.seed
    if args.workers is not None:
        cfg.workers = args.workers
    if args.out is not None:
        cfg.output_dir = args.out
    return cfg


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if argv and argv[0] == "run":
        argv = argv[1:]
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    try:
        cfg = config_from_args(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
