"""Command-line pipeline: coefficient cache, synthesis, simulation, baseline, reports.

Configuration is a JSON object; every key is optional and missing keys take
the defaults in :data:`DEFAULTS`::

    r                 kernel support radius                       1.5
    Q, R              state / input weights                       1.0, 1.0
    T, k              horizon, truncation order                   5, 12
    domain            [z1_min, z1_max, z2_min, z2_max]            [-2, 2, -2, 2]
    lambda            [lambda1, lambda2] or null (twice widths)   null
    quad_n            quadrature nodes per axis                   2048
    n_u               actuator count (perfect square)             16
    actuators         explicit [[z1, z2], ...] or null            null
    locality          null or {"norm": 1|2, "radius": float}      null
    disturbances      [[z1, z2], ...] or {"seed": s, "count": c}  [[-0.26, 0.56]]
    grid_n            simulation cells per axis                   80
    baseline_dx       lattice spacings for the comparator         [0.5, 0.25, 0.2]
    baseline_scaled   match the comparator cost to the basis cost true
    measurement       comparator state reading: sample|average    "sample"
    average_gain      average table-1 gains over all disturbances false
    max_error_pct     --check threshold on per-step basis error   1.0
    jobs              worker processes                            1
    cache_dir         coefficient cache                           "cache"
    output_dir        results                                     "out"

``--preset fig3`` switches to the enlarged multi-disturbance experiment
(domain [-4, 4]^2, 64 actuators, 1-norm locality radius 2, 15 seeded
disturbances) before the file and flags are applied.

Exit codes: 0 success, 2 configuration or input error, 3 solver failure,
4 verification threshold breached under ``--check``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import baseline as bl
from .model import KernelModel, Locality, SynthesisConfig, actuator_grid, build_model
from .oracle import run_suite
from .qpsolve import KKTError
from .simulate import (Simulator, basis_accuracy, mean_performance_gain, performance_gain,
                       rollout, write_grid_dump, write_table1_csv)
from .spectral import Domain2D, read_coeff_csv, synthesize_tensor, write_coeff_csv
from .synth import (ResponseBank, SynthesisError, load_bank, realize_controller, save_bank,
                    synthesize_bank)

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_CHECK = 0, 2, 3, 4

DEFAULTS = {
    "r": 1.5, "Q": 1.0, "R": 1.0, "T": 5, "k": 12,
    "domain": [-2.0, 2.0, -2.0, 2.0], "lambda": None, "quad_n": 2048,
    "n_u": 16, "actuators": None, "locality": None,
    "disturbances": [[-0.26, 0.56]],
    "grid_n": 80, "baseline_dx": [0.5, 0.25, 0.2], "baseline_scaled": True,
    "measurement": "sample", "average_gain": False, "max_error_pct": 1.0,
    "jobs": 1, "cache_dir": "cache", "output_dir": "out",
}

PRESETS = {
    "default": {},
    "fig3": {"domain": [-4.0, 4.0, -4.0, 4.0], "n_u": 64,
             "locality": {"norm": 1, "radius": 2.0},
             "disturbances": {"seed": 0, "count": 15}},
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    raw: dict
    synthesis: SynthesisConfig
    r: float
    n_u: int
    actuators: np.ndarray | None
    disturbances: tuple[tuple[float, float], ...]
    grid_n: int
    baseline_dx: tuple[float, ...]
    baseline_scaled: bool
    measurement: str
    average_gain: bool
    max_error_pct: float
    cache_dir: Path
    output_dir: Path

    @property
    def domain(self) -> Domain2D:
        return self.synthesis.domain


def _seeded_disturbances(dom: Domain2D, seed: int, count: int):
    rng = np.random.default_rng(seed)
    z1 = rng.uniform(dom.z1_min, dom.z1_max, count)
    z2 = rng.uniform(dom.z2_min, dom.z2_max, count)
    return tuple((float(a), float(b)) for a, b in zip(z1, z2))


def make_run_config(overrides: dict | None = None, preset: str = "default") -> RunConfig:
    unknown = set(overrides or {}) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    raw = {**DEFAULTS, **PRESETS[preset], **(overrides or {})}
    try:
        z = [float(v) for v in raw["domain"]]
        if len(z) != 4:
            raise ConfigError("domain must be [z1_min, z1_max, z2_min, z2_max]")
        lam = raw["lambda"] or [2 * (z[1] - z[0]), 2 * (z[3] - z[2])]
        dom = Domain2D(z[0], z[1], z[2], z[3], float(lam[0]), float(lam[1]), int(raw["quad_n"]))
        loc = raw["locality"]
        locality = None if loc is None else Locality(int(loc.get("norm", 1)),
                                                     float(loc.get("radius", np.inf)))
        syn = SynthesisConfig(int(raw["T"]), int(raw["k"]), float(raw["Q"]), float(raw["R"]),
                              dom, locality, int(raw["jobs"]))
        acts = None if raw["actuators"] is None else np.asarray(raw["actuators"], float).reshape(-1, 2)
        n_u = len(acts) if acts is not None else int(raw["n_u"])
        if acts is None:
            actuator_grid(n_u, dom)
        dist = raw["disturbances"]
        if isinstance(dist, dict):
            pts = _seeded_disturbances(dom, int(dist["seed"]), int(dist["count"]))
        else:
            pts = tuple((float(p[0]), float(p[1])) for p in dist)
        if not pts:
            raise ConfigError("at least one disturbance is required")
        for p in pts:
            if not dom.contains(p):
                raise ConfigError(f"disturbance {p} outside the domain")
        if raw["measurement"] not in ("sample", "average"):
            raise ConfigError("measurement must be 'sample' or 'average'")
        return RunConfig(raw, syn, float(raw["r"]), n_u, acts, pts, int(raw["grid_n"]),
                         tuple(float(d) for d in raw["baseline_dx"]), bool(raw["baseline_scaled"]),
                         raw["measurement"], bool(raw["average_gain"]),
                         float(raw["max_error_pct"]), Path(raw["cache_dir"]),
                         Path(raw["output_dir"]))
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------- coefficient cache

def _model_key(rc: RunConfig) -> dict:
    d = rc.domain
    acts = rc.actuators if rc.actuators is not None else actuator_grid(rc.n_u, d)
    return {"r": rc.r, "k": rc.synthesis.k,
            "domain": [d.z1_min, d.z1_max, d.z2_min, d.z2_max],
            "lambda": [d.lambda1, d.lambda2], "quad_n": d.quad_n,
            "actuators": np.asarray(acts).tolist()}


def model_hash(rc: RunConfig) -> str:
    return hashlib.sha256(json.dumps(_model_key(rc), sort_keys=True).encode()).hexdigest()


def _cache_files(rc: RunConfig) -> list[str]:
    return ["a.csv"] + [f"b_{l:02d}.csv" for l in range(rc.n_u)]


def build_cache(rc: RunConfig, force: bool = False) -> int:
    """Write the coefficient cache; returns the number of coefficient files written.

    ``cache.json`` (the model hash) is bookkeeping and not counted.
    """
    cache = rc.cache_dir
    meta = cache / "cache.json"
    key = model_hash(rc)
    if meta.exists():
        stored = json.loads(meta.read_text()).get("hash")
        complete = all((cache / f).exists() for f in _cache_files(rc))
        if stored == key and complete and not force:
            return 0
        if stored != key and not force:
            raise ConfigError(f"cache in {cache} was built for a different model; use --force")
    try:
        cache.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create cache dir {cache}: {exc}") from exc
    model = build_model(rc.r, rc.n_u, rc.domain, rc.synthesis.k, rc.actuators)
    write_coeff_csv(cache / "a.csv", model.a_coeffs, rc.domain, "a")
    for l, b in enumerate(model.b_coeffs):
        write_coeff_csv(cache / f"b_{l:02d}.csv", b, rc.domain, f"b_{l:02d}")
    meta.write_text(json.dumps({"hash": key, "model": _model_key(rc)}, indent=1,
                               sort_keys=True) + "\n")
    return len(_cache_files(rc))


def load_model(rc: RunConfig, force: bool = False) -> KernelModel:
    """Model from the cache, building the cache first if needed."""
    build_cache(rc, force)
    a, _ = read_coeff_csv(rc.cache_dir / "a.csv")
    bs = tuple(read_coeff_csv(rc.cache_dir / f"b_{l:02d}.csv")[0] for l in range(rc.n_u))
    acts = rc.actuators if rc.actuators is not None else actuator_grid(rc.n_u, rc.domain)
    return KernelModel(rc.r, rc.domain, a, acts, bs)


# ---------------------------------------------------------------- commands

def _bank_dir(rc: RunConfig) -> Path:
    return rc.output_dir / "bank"


def cmd_coeffs(rc: RunConfig, args) -> int:
    n = build_cache(rc, args.force)
    print(f"coefficient cache {rc.cache_dir}: {n} coefficient files written")
    return EXIT_OK


def cmd_synthesize(rc: RunConfig, args) -> int:
    model = load_model(rc, args.force)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        bank = synthesize_bank(model, rc.synthesis, rc.disturbances)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    save_bank(bank, _bank_dir(rc))
    for key, resp in bank.responses.items():
        print(f"{key} zt=({resp.zt[0]:.6g},{resp.zt[1]:.6g}) objective={resp.objective:.10g} "
              f"active={len(resp.active)}")
    return EXIT_OK


def _load_bank(rc: RunConfig, model: KernelModel) -> ResponseBank:
    try:
        return load_bank(_bank_dir(rc), model, rc.synthesis)
    except FileNotFoundError as exc:
        raise ConfigError(f"{exc}; run 'synthesize' first") from exc


def _table1(rc: RunConfig, model, bank):
    resp = list(bank.responses.values())
    errors = np.max([basis_accuracy(r, model, rc.grid_n) for r in resp], axis=0) \
        if rc.average_gain else basis_accuracy(resp[0], model, rc.grid_n)
    gains = mean_performance_gain(resp, model, rc.grid_n) if rc.average_gain \
        else performance_gain(resp[0], model, rc.grid_n)
    return errors, gains


def cmd_simulate(rc: RunConfig, args) -> int:
    """Closed-loop rollout of the realized controller with every bank disturbance at t=0."""
    model = load_model(rc)
    bank = _load_bank(rc, model)
    T = rc.synthesis.T
    sim = Simulator(model, rc.grid_n, T)
    ctl = realize_controller(bank)
    dist = {0: [(r.zt, 1.0) for r in bank.responses.values()]}
    traj = rollout(sim, T, policy=ctl, disturbances=dist)
    free = rollout(sim, T, np.zeros((T, model.n_u)), disturbances=dist)
    out = rc.output_dir / "simulate"
    out.mkdir(parents=True, exist_ok=True)
    g1, g2 = sim.omega_axes
    lines = ["time_step,norm_controlled,norm_uncontrolled"]
    for t in range(1, T + 1):
        write_grid_dump(out / f"state_t{t}.csv", g1, g2, traj.on_domain(t))
        lines.append(f"{t},{traj.domain_norm(t):.17g},{free.domain_norm(t):.17g}")
        print(f"t={t} |x|={traj.domain_norm(t):.6g} |x_free|={free.domain_norm(t):.6g}")
    (out / "norms.csv").write_text("\n".join(lines) + "\n")
    inp = ["t," + ",".join(f"u{l}" for l in range(model.n_u))]
    inp += [f"{t}," + ",".join(f"{v:.17g}" for v in row) for t, row in enumerate(traj.inputs)]
    (out / "inputs.csv").write_text("\n".join(inp) + "\n")
    return EXIT_OK


def _table3_rows(rc: RunConfig, model, bank, cont_gain: float):
    zt = next(iter(bank.responses.values())).zt
    rows = [("continuous", None, None, cont_gain)]
    for dx in rc.baseline_dx:
        sys_ = bl.discretize(model, dx)
        Q = bl.state_cost_weight(rc.synthesis.Q, dx, model) if rc.baseline_scaled else rc.synthesis.Q
        clm = bl.finite_sls(sys_, Q, rc.synthesis.R, rc.synthesis.T)
        ctl = bl.DiscreteController(clm, rc.measurement)
        avg, _ = bl.evaluate_in_continuous(sys_, ctl, model, zt, rc.synthesis.T, rc.grid_n)
        rows.append(("finite_sls", dx, sys_.n_x, avg))
        print(f"baseline dx={dx:g} n_x={sys_.n_x} avg_gain={avg:.4f}%")
    return rows


def cmd_baseline(rc: RunConfig, args) -> int:
    model = load_model(rc)
    bank = _load_bank(rc, model)
    gains = performance_gain(next(iter(bank.responses.values())), model, rc.grid_n)
    rc.output_dir.mkdir(parents=True, exist_ok=True)
    rows = _table3_rows(rc, model, bank, float(np.mean(gains)))
    bl.write_table3_csv(rc.output_dir / "table3.csv", rows)
    if args.check and any(r[3] >= rows[0][3] for r in rows[1:]):
        print("check failed: a baseline matches or beats the continuous pipeline", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def cmd_report(rc: RunConfig, args) -> int:
    model = load_model(rc)
    bank = _load_bank(rc, model)
    out = rc.output_dir
    out.mkdir(parents=True, exist_ok=True)
    errors, gains = _table1(rc, model, bank)
    write_table1_csv(out / "table1.csv", errors, gains)
    for t, (e, g) in enumerate(zip(errors, gains), start=1):
        print(f"t={t} error={100 * e:.4f}% gain={g:.4f}%")
    rows = _table3_rows(rc, model, bank, float(np.mean(gains)))
    bl.write_table3_csv(out / "table3.csv", rows)

    fields = out / "fields"
    fields.mkdir(exist_ok=True)
    sim = Simulator(model, rc.grid_n, rc.synthesis.T)
    g1, g2 = sim.omega_axes
    for key, resp in bank.responses.items():
        for t, fld in enumerate(resp.alpha, start=1):
            write_grid_dump(fields / f"{key}_pred_t{t}.csv", g1, g2,
                            synthesize_tensor(fld, g1, g2, model.domain))
    if args.check:
        breach = []
        if np.any(100 * errors > rc.max_error_pct):
            breach.append(f"basis error above {rc.max_error_pct}%")
        if any(r[3] >= rows[0][3] for r in rows[1:]):
            breach.append("baseline not beaten")
        if breach:
            print("check failed: " + "; ".join(breach), file=sys.stderr)
            return EXIT_CHECK
    return EXIT_OK


def cmd_oracle(rc: RunConfig, args) -> int:
    ok = True
    for conv in ("adjoint", "standard"):
        res = run_suite(args.draws, args.seed, conv)
        worst = max(res["worst"].values())
        print(f"{conv}: {res['n_draws']} draws, worst residual {worst:.3e}, "
              f"{'pass' if res['passed'] else 'FAIL ' + str(res['failures'][:10])}")
        ok &= res["passed"]
    return EXIT_OK if ok or not args.check else EXIT_CHECK


COMMANDS = {
    "coeffs": cmd_coeffs, "synthesize": cmd_synthesize, "simulate": cmd_simulate,
    "baseline": cmd_baseline, "report": cmd_report, "oracle": cmd_oracle,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spectral-sls", description=__doc__.split("\n\n")[0],
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", type=Path, help="JSON config file")
    p.add_argument("--preset", choices=sorted(PRESETS), default="default")
    p.add_argument("--jobs", type=int)
    p.add_argument("--cache-dir", type=Path)
    p.add_argument("--output-dir", type=Path)
    p.add_argument("--force", action="store_true", help="rebuild a stale coefficient cache")
    p.add_argument("--check", action="store_true", help="exit 4 when a verification threshold fails")
    p.add_argument("--draws", type=int, default=200, help="oracle: random systems per convention")
    p.add_argument("--seed", type=int, default=0, help="oracle: random seed")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        overrides = {}
        if args.config is not None:
            try:
                overrides = json.loads(args.config.read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
            if not isinstance(overrides, dict):
                raise ConfigError("config must be a JSON object")
        if args.jobs is not None:
            overrides["jobs"] = args.jobs
        if args.cache_dir is not None:
            overrides["cache_dir"] = str(args.cache_dir)
        if args.output_dir is not None:
            overrides["output_dir"] = str(args.output_dir)
        rc = make_run_config(overrides, args.preset)
        return COMMANDS[args.command](rc, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SynthesisError, KKTError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
