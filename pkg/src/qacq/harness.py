"""Bayesian-optimization outer loop, trial orchestration and result files."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import math
import os
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.stats import qmc

from . import __version__
from .acquisitions import AcquisitionSpec, evaluate
from .errors import ConfigError, FitError, NumericalError
from .gp import Dataset, GPModel, PriorConfig, fit_hyperparameters_map
from .maximizers import MaximizerConfig, _derived_seed, select
from .reparam import draw_base_samples
from .tasks import (
    BENCHMARKS,
    ObservationChannel,
    known_prior_hyperparams,
    make_benchmark,
    observe_batch,
    sample_matern_task,
)

CSV_HEADER = ("trial", "iteration", "wall_time_s", "best_observed", "log10_regret", "acq_value")
REGRET_FLOOR = 1e-12


@dataclass(frozen=True)
class RunConfig:
    """Everything needed to reproduce a run. Serialized as flat JSON."""

    task: str = "synthetic"
    dim: int = 2
    input_scaling: str = "unit_cube"
    n_basis: int = 2**14
    noise_variance: float = 1e-3
    q: int = 2
    acq: str = "ei"
    alpha: Optional[float] = None
    beta: float = 2.0
    tau: float = 0.01
    inner_mc_samples: int = 64
    n_discretization: int = 128
    maximizer: str = "grad"
    parallel_mode: str = "greedy"
    n_starts: Optional[int] = None
    step_size: float = 1.0 / 40.0
    minibatch: int = 128
    eval_samples: int = 1024
    inner_budget: float = 2**12
    budget_mode: str = "evals"
    fantasize_pending: bool = True
    n_fantasies: int = 16
    surrogate_mode: str = "known_prior"
    n_initial: int = 3
    n_iterations: int = 24
    total_evaluations: Optional[int] = None
    n_trials: int = 32
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.task != "synthetic" and self.task not in BENCHMARKS:
            raise ConfigError(f"unknown task {self.task!r}")
        if self.input_scaling != "unit_cube":
            raise ConfigError("only unit_cube input scaling is supported")
        if self.n_initial < 1 or self.q < 1 or self.n_trials < 1 or self.dim < 1:
            raise ConfigError("n_initial, q, n_trials and dim must be >= 1")
        if self.n_iterations < 0:
            raise ConfigError("n_iterations must be >= 0")
        if self.parallel_mode not in ("greedy", "joint", "incremental"):
            raise ConfigError(f"unknown parallel mode {self.parallel_mode!r}")
        if self.surrogate_mode not in ("known_prior", "map_fit"):
            raise ConfigError(f"unknown surrogate mode {self.surrogate_mode!r}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.total_evaluations is not None and self.total_evaluations < self.n_initial:
            raise ConfigError("total_evaluations must cover the initial design")
        self.acquisition_spec(np.zeros((1, self.dim)))
        self.maximizer_config()

    # -- derived objects --------------------------------------------------

    def acquisition_spec(self, discretization=None) -> AcquisitionSpec:
        kind = self.acq.upper()
        return AcquisitionSpec(
            kind=kind,
            alpha=self.alpha,
            beta=self.beta,
            tau=self.tau,
            discretization=discretization if kind in ("ES", "KG") else None,
            mc_samples=self.minibatch,
            inner_mc_samples=self.inner_mc_samples,
        )

    def maximizer_config(self, seed: int = 0, budget: Optional[float] = None) -> MaximizerConfig:
        return MaximizerConfig(
            kind=self.maximizer,
            n_starts=self.n_starts,
            step_size=self.step_size,
            minibatch=self.minibatch,
            budget=self.inner_budget if budget is None else budget,
            budget_mode=self.budget_mode,
            seed=seed,
            eval_samples=self.eval_samples,
            fantasize_pending=self.fantasize_pending,
        )

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, obj: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(obj) - names)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**obj)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        obj = json.loads(text)
        if not isinstance(obj, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(obj)

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()


@dataclass
class TrialRecord:
    trial: int
    seed: int
    config_hash: str
    rows: list = field(default_factory=list)  # (iteration, wall_time_s, best_observed, log10_regret, acq_value)
    status: str = "ok"
    diagnostics: list = field(default_factory=list)
    version: str = __version__


# ---------------------------------------------------------------- pieces


def calibrate_inner_budget(N: int, model: GPModel, spec: AcquisitionSpec, mode: str = "evals", q: int = 1, m: int = 128, seed: int = 0):
    """Inner budget for one selection.

    In ``evals`` mode this is ``N`` itself. In ``seconds`` mode it is the median
    of three timings of a single batched evaluation of N query sets.
    """
    if mode == "evals":
        return int(N)
    if mode != "seconds":
        raise ConfigError(f"unknown budget mode {mode!r}")
    gen = np.random.default_rng(seed)
    X = gen.random((int(N), q, model.dim))
    z = draw_base_samples(m, q, "deterministic", seed).z
    times = []
    for _ in range(3):
        t0 = time.perf_counter()
        evaluate(spec, model, X, z)
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


@lru_cache(maxsize=64)
def _synthetic_task(d: int, n_basis: int, seed: int):
    return sample_matern_task(d, n_basis, seed)


def build_objective(cfg: RunConfig, trial_seed: int):
    """Objective and its known maximum for one trial."""
    if cfg.task == "synthetic":
        task = _synthetic_task(cfg.dim, cfg.n_basis, _derived_seed(trial_seed, 101))
        return task, task.true_max
    bench = make_benchmark(cfg.task, cfg.dim)
    return bench, bench.true_max


def sobol_points(n: int, d: int, seed: int) -> np.ndarray:
    """First ``n`` points of a scrambled Sobol sequence in the unit cube."""
    sob = qmc.Sobol(d, scramble=True, seed=np.random.default_rng(seed))
    return sob.random_base2(max(0, math.ceil(math.log2(n))))[:n]


def _log10_regret(f_max: float, f_at_best: float) -> float:
    return math.log10(max(abs(f_max - f_at_best), REGRET_FLOOR))


def _surrogate(cfg: RunConfig, data: Dataset, seed: int) -> GPModel:
    if cfg.surrogate_mode == "known_prior":
        return GPModel(data, known_prior_hyperparams(cfg.dim, cfg.noise_variance))
    hp = fit_hyperparameters_map(data, PriorConfig(seed=seed))
    return GPModel(data, hp)


def run_trial(cfg: RunConfig, trial_seed: int, trial: int = 0) -> TrialRecord:
    """One BO run: initial design, then select / observe / append until the stopping rule."""
    rec = TrialRecord(trial=trial, seed=int(trial_seed), config_hash=cfg.config_hash())
    objective, f_max = build_objective(cfg, trial_seed)
    channel = ObservationChannel(cfg.noise_variance, _derived_seed(trial_seed, 103))
    gen = np.random.default_rng(_derived_seed(trial_seed, 107))
    X = gen.random((cfg.n_initial, cfg.dim))
    y = observe_batch(objective, X, channel, 0)
    data = Dataset(X, y)
    t_start = time.perf_counter()

    def log_row(iteration, acq_value):
        best = int(np.argmax(data.outputs))
        f_best = float(objective(data.inputs[best])[0])
        rec.rows.append(
            (iteration, time.perf_counter() - t_start, float(data.outputs[best]), _log10_regret(f_max, f_best), acq_value)
        )

    log_row(0, float("nan"))
    for it in range(1, cfg.n_iterations + 1):
        if cfg.total_evaluations is not None and len(data) + cfg.q > cfg.total_evaluations:
            break
        iter_seed = _derived_seed(trial_seed, it, 109)
        try:
            model = _surrogate(cfg, data, iter_seed)
        except (FitError, NumericalError) as exc:
            rec.status = "aborted"
            rec.diagnostics.append(f"iteration {it}: surrogate failure: {exc}")
            rec.diagnostics.extend(getattr(exc, "diagnostics", []))
            break
        disc = None
        if cfg.acq.upper() in ("ES", "KG"):
            disc = sobol_points(cfg.n_discretization, cfg.dim, _derived_seed(iter_seed, 113))
        spec = cfg.acquisition_spec(disc)
        budget = calibrate_inner_budget(cfg.inner_budget, model, spec, cfg.budget_mode, cfg.q, cfg.minibatch, iter_seed)
        mcfg = cfg.maximizer_config(seed=iter_seed, budget=budget)
        result = select(spec, cfg.q, model, mcfg, cfg.parallel_mode, cfg.n_fantasies)
        y_new = observe_batch(objective, result.X, channel, len(data))
        data = data.append(result.X, y_new)
        if result.warning:
            rec.diagnostics.append(f"iteration {it}: {result.warning}")
        log_row(it, float(result.acq_value))
    return rec


def _run_indexed(args):
    cfg, trial = args
    return run_trial(cfg, trial_seed(cfg, trial), trial)


def trial_seed(cfg: RunConfig, trial: int) -> int:
    return _derived_seed(cfg.seed, trial, 127)


def run_trials(cfg: RunConfig) -> list[TrialRecord]:
    """All trials of a run, optionally in worker processes; output order is by trial index."""
    jobs = [(cfg, t) for t in range(cfg.n_trials)]
    if cfg.workers == 1 or cfg.n_trials == 1:
        return [_run_indexed(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
        return list(pool.map(_run_indexed, jobs))


# ---------------------------------------------------------------- emission


def _fmt(x, timed: bool = True) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if not timed or math.isnan(x):
        return "nan"
    return repr(x)


def results_csv(records: Sequence[TrialRecord], budget_mode: str = "evals") -> str:
    """CSV text. Wall times are written as ``nan`` in evals mode so output is reproducible."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    timed = budget_mode == "seconds"
    for rec in records:
        for it, wall, best, reg, acq in rec.rows:
            w.writerow([rec.trial, it, _fmt(wall, timed), _fmt(best), _fmt(reg), _fmt(acq)])
    return buf.getvalue()


def _atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def emit_results(records: Sequence[TrialRecord], out_path, cfg: Optional[RunConfig] = None):
    """Write ``out_path`` (CSV) and ``out_path`` with a ``.json`` suffix (metadata).

    Both files are written to temporaries and renamed into place.
    """
    if not records:
        raise ValueError("no records to emit")
    out = Path(out_path)
    if not out.parent.is_dir():
        raise FileNotFoundError(f"output directory {out.parent} does not exist")
    mode = cfg.budget_mode if cfg is not None else "evals"
    meta = {
        "version": __version__,
        "config": cfg.to_dict() if cfg is not None else None,
        "config_hash": records[0].config_hash,
        "csv_header": list(CSV_HEADER),
        "trials": [
            {
                "trial": r.trial,
                "seed": r.seed,
                "status": r.status,
                "diagnostics": r.diagnostics,
                "wall_time_s": [row[1] for row in r.rows],
            }
            for r in records
        ],
    }
    sidecar = out.with_suffix(".json")
    _atomic_write(out, results_csv(records, mode))
    _atomic_write(sidecar, json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return out, sidecar


def final_regrets(records: Sequence[TrialRecord]) -> np.ndarray:
    return np.array([r.rows[-1][3] for r in records])
