"""Per-disturbance synthesis, banks of responses, and the realized controller."""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import KernelModel, SynthesisConfig
from .qpsolve import KKTError, solve, solve_with_R_zero
from .simulate import SimState, Simulator
from .slp import assemble, conv_operator, cost_of
from .spectral import SpectralField, read_coeff_csv, write_coeff_csv

__all__ = [
    "DisturbanceResponse",
    "ResponseBank",
    "SynthesisError",
    "BankMismatchError",
    "synthesize_one",
    "synthesize_bank",
    "superpose",
    "InternalModelController",
    "realize_controller",
    "save_bank",
    "load_bank",
]

RESIDUAL_TOL = 1e-8


class SynthesisError(RuntimeError):
    """One or more disturbances failed to solve; ``failures`` maps id to message."""

    def __init__(self, failures: dict[str, str]):
        super().__init__("; ".join(f"{k}: {v}" for k, v in failures.items()))
        self.failures = failures


class BankMismatchError(RuntimeError):
    """Observed disturbance cannot be expressed with the bank's locations."""


@dataclass(frozen=True, eq=False)
class DisturbanceResponse:
    """Closed-loop response to a unit point disturbance at ``zt`` entering at time 0.

    ``alpha[t-1]`` holds the state coefficients at time ``t`` and
    ``u_gains[t]`` the actuator gains at time ``t``.
    """

    zt: tuple[float, float]
    alpha: tuple[SpectralField, ...]
    u_gains: np.ndarray
    objective: float
    active: tuple[int, ...]
    residual: float = 0.0

    def __post_init__(self):
        g = np.array(self.u_gains, dtype=float)
        g.setflags(write=False)
        object.__setattr__(self, "u_gains", g)
        object.__setattr__(self, "alpha", tuple(self.alpha))

    @property
    def T(self) -> int:
        return len(self.alpha)

    def same_as(self, other: "DisturbanceResponse") -> bool:
        """Bitwise equality of every stored number."""
        return (self.zt == other.zt and self.active == other.active
                and self.objective == other.objective
                and np.array_equal(self.u_gains, other.u_gains)
                and all(a == b for a, b in zip(self.alpha, other.alpha)))


@dataclass(frozen=True, eq=False)
class ResponseBank:
    model: KernelModel
    config: SynthesisConfig
    responses: dict[str, DisturbanceResponse]

    @property
    def ids(self) -> list[str]:
        return list(self.responses)

    def __len__(self) -> int:
        return len(self.responses)

    def __getitem__(self, key: str) -> DisturbanceResponse:
        return self.responses[key]

    def same_as(self, other: "ResponseBank") -> bool:
        return (self.ids == other.ids
                and all(self[i].same_as(other[i]) for i in self.ids))


def disturbance_ids(n: int) -> list[str]:
    width = max(2, len(str(n - 1)))
    return [f"d{i:0{width}d}" for i in range(n)]


def synthesize_one(model: KernelModel, cfg: SynthesisConfig, zt, *, conv=None) -> DisturbanceResponse:
    """Optimal response to a point disturbance at ``zt``."""
    prob = assemble(model, cfg, zt, conv=conv)
    qp = prob.qp()
    sol = solve_with_R_zero(qp) if cfg.R == 0 else solve(qp)
    resid = prob.residual(sol.x)
    if resid > RESIDUAL_TOL:
        raise KKTError(f"constraint residual {resid:.3g} above {RESIDUAL_TOL}")
    alpha, gains = prob.unpack(sol.x)
    return DisturbanceResponse(prob.zt, tuple(alpha), gains, cost_of(prob, sol.x),
                               prob.active, resid)


def _solve_chunk(args):
    model, cfg, items = args
    conv = conv_operator(model)
    out = []
    for key, zt in items:
        try:
            out.append((key, synthesize_one(model, cfg, zt, conv=conv), None))
        except (KKTError, ValueError, np.linalg.LinAlgError) as exc:
            out.append((key, None, f"{type(exc).__name__}: {exc}"))
    return out


def synthesize_bank(model: KernelModel, cfg: SynthesisConfig,
                    disturbances: Sequence) -> ResponseBank:
    """Solve every disturbance; ``cfg.jobs`` worker processes over a static partition.

    Each solve is a pure function of its inputs, so the bank does not depend
    on the worker count.
    """
    pts = [(float(z[0]), float(z[1])) for z in disturbances]
    if not pts:
        raise ValueError("no disturbances given")
    items = list(zip(disturbance_ids(len(pts)), pts))
    jobs = min(cfg.jobs, len(items))
    chunks = [list(c) for c in np.array_split(np.arange(len(items)), jobs)]
    tasks = [(model, cfg, [items[i] for i in c]) for c in chunks]
    if jobs == 1:
        results = [_solve_chunk(tasks[0])]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_solve_chunk, tasks))
    responses, failures = {}, {}
    for chunk in results:
        for key, resp, err in chunk:
            if err is None:
                responses[key] = resp
            else:
                failures[key] = err
    if failures:
        raise SynthesisError(failures)
    return ResponseBank(model, cfg, {k: responses[k] for k, _ in items})


def superpose(bank: ResponseBank, weights) -> tuple[list[SpectralField], np.ndarray]:
    """Weighted sums of state fields and gains across the bank, per time step."""
    w = np.asarray(weights, dtype=float)
    if w.shape != (len(bank),) or not np.all(np.isfinite(w)):
        raise ValueError("need one finite weight per response")
    resp = list(bank.responses.values())
    T, k = bank.config.T, bank.model.k
    alpha = [SpectralField(k, sum(wi * r.alpha[t].coeffs for wi, r in zip(w, resp)))
             for t in range(T)]
    gains = sum(wi * r.u_gains for wi, r in zip(w, resp))
    return alpha, np.asarray(gains, dtype=float).reshape(T, bank.model.n_u)


class InternalModelController:
    """State-feedback realization of a response bank.

    At each step the measured state is compared with the one-step prediction
    of the nominal dynamics. The difference is the new disturbance, which must
    consist of point masses at bank locations. Inputs are the time-shifted
    bank gains applied to every disturbance seen so far. Disturbances older
    than the bank horizon no longer contribute.
    """

    def __init__(self, bank: ResponseBank, match_tol: float = 1e-9, field_tol: float = 1e-9):
        self.bank = bank
        self.match_tol, self.field_tol = match_tol, field_tol
        self._locs = np.array([r.zt for r in bank.responses.values()])
        self._gains = [r.u_gains for r in bank.responses.values()]
        self.reset()

    def reset(self) -> None:
        self.history: list[np.ndarray] = []   # disturbance weights per response, per step
        self._predicted: SimState | None = None

    def _attribute(self, impulses) -> np.ndarray:
        w = np.zeros(len(self._locs))
        for z, wt in impulses:
            d = np.max(np.abs(self._locs - np.asarray(z)), axis=1)
            j = int(np.argmin(d))
            if d[j] > self.match_tol:
                raise BankMismatchError(f"disturbance at {z} is not a bank location")
            w[j] += wt
        return w

    def __call__(self, state: SimState, sim: Simulator) -> np.ndarray:
        if self._predicted is None:
            if state.t != 0:
                raise RuntimeError("controller must start at t=0; call reset()")
            resid = state.field
        else:
            resid = state.field - self._predicted.field
        scale = 1.0 + float(np.max(np.abs(state.field), initial=0.0))
        if np.max(np.abs(resid), initial=0.0) > self.field_tol * scale:
            raise BankMismatchError(
                f"disturbance at t={state.t} has a distributed part not spanned by the bank")
        self.history.append(self._attribute(state.impulses))
        t = len(self.history) - 1
        u = np.zeros(self.bank.model.n_u)
        T = self.bank.config.T
        for tau, w in enumerate(self.history):
            lag = t - tau
            if lag >= T:
                continue
            for j in np.flatnonzero(w):
                u += w[j] * self._gains[j][lag]
        self._predicted = sim.step(state, u)
        return u


def realize_controller(bank: ResponseBank) -> InternalModelController:
    return InternalModelController(bank)


def _config_echo(bank: ResponseBank) -> dict:
    cfg, m, dom = bank.config, bank.model, bank.model.domain
    return {
        "T": cfg.T, "k": cfg.k, "Q": cfg.Q, "R": cfg.R, "r": m.r,
        "domain": [dom.z1_min, dom.z1_max, dom.z2_min, dom.z2_max],
        "lambda": [dom.lambda1, dom.lambda2], "quad_n": dom.quad_n,
        "locality": None if cfg.locality is None else
        {"norm": cfg.locality.norm, "radius": cfg.locality.radius},
        "actuators": m.actuators.tolist(),
    }


def save_bank(bank: ResponseBank, directory) -> None:
    """Directory with ``meta.json``, and per disturbance ``<id>_gains.csv`` plus one
    coefficient CSV per time step (``<id>_alpha_<t>.csv``)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    meta = {"config": _config_echo(bank), "disturbances": {}}
    for key, resp in bank.responses.items():
        meta["disturbances"][key] = {"zt": list(resp.zt), "objective": repr(resp.objective),
                                     "active": list(resp.active)}
        for t, fld in enumerate(resp.alpha, start=1):
            write_coeff_csv(d / f"{key}_alpha_{t}.csv", fld, bank.model.domain, f"alpha_{t}")
        lines = ["t," + ",".join(f"u{l}" for l in range(bank.model.n_u))]
        lines += [f"{t}," + ",".join(f"{v:.17g}" for v in row) for t, row in enumerate(resp.u_gains)]
        (d / f"{key}_gains.csv").write_text("\n".join(lines) + "\n")
    (d / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def load_bank(directory, model: KernelModel, cfg: SynthesisConfig) -> ResponseBank:
    d = Path(directory)
    if not (d / "meta.json").exists():
        raise FileNotFoundError(f"no response bank in {d}")
    meta = json.loads((d / "meta.json").read_text())
    responses = {}
    for key, info in meta["disturbances"].items():
        alpha = tuple(read_coeff_csv(d / f"{key}_alpha_{t}.csv")[0] for t in range(1, cfg.T + 1))
        rows = (d / f"{key}_gains.csv").read_text().splitlines()[1:]
        gains = np.array([[float(v) for v in row.split(",")[1:]] for row in rows])
        responses[key] = DisturbanceResponse(tuple(info["zt"]), alpha,
                                             gains.reshape(cfg.T, model.n_u),
                                             float(info["objective"]), tuple(info["active"]))
    return ResponseBank(model, cfg, responses)


def bank_digest(directory) -> str:
    """SHA-256 over the sorted file names and contents of a saved bank."""
    h = hashlib.sha256()
    for p in sorted(Path(directory).iterdir()):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()
