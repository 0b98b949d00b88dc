"""Multi-trial, multi-k experiment sweeps and their CSV/JSON emission.

A sweep point is one value of ``k``. Every point is resolved (and checked
for feasibility) before any trial runs. Trial ``t`` of sweep ``s`` draws
from the stream keyed ``(s, t)`` under the master seed, so results do not
depend on the worker count or on scheduling order.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import partial
from pathlib import Path

import numpy as np

from shufflehist import compact, topk
from shufflehist._validation import check_nonneg_int, check_positive_int, normalize_mode
from shufflehist.adversary import (
    AttackSpec,
    HadParams,
    had_params,
    run_attacked_flip,
    run_attacked_had,
    run_had_protocol,
)
from shufflehist.exceptions import DomainError, ResourceLimitError
from shufflehist.params import amplification_params, error_bound_max, error_bound_per_bin, min_k
from shufflehist.protocol import DEFAULT_DENSE_BUDGET, Dataset, ProtocolParams, run_protocol

__all__ = [
    "ExperimentConfig",
    "ExperimentResult",
    "ResultRow",
    "run_experiment",
    "topk_metrics",
    "write_results",
]

SCHEMA = "shufflehist-results v1"
CSV_COLUMNS = ("sweep", "trial", "protocol", "k", "q", "max_error", "bound")
PROTOCOLS = ("flip", "flip2", "flip3", "had", "flip_amplified")
# Estimates are embedded in the JSON when they fit in this many floats.
ESTIMATE_LIMIT = 2_000_000


@dataclass(frozen=True)
class ExperimentConfig:
    """What to run.

    Attributes:
        protocol: ``flip`` (dense bits), ``flip2`` (sparse indices),
            ``flip3`` (count-min), ``had`` (Hadamard response) or
            ``flip_amplified`` (one message, amplification by shuffling).
        eps, delta: Central privacy target.
        k: Sweep of fabricated-message counts; ``None`` entries pick the
            protocol's default.
        V, d_hat, hash_seed: Count-min overrides.
        q: Explicit flip probability for ``flip``/``flip2``. It bypasses
            the solver, so the bound column becomes ``nan``.
        mode: Accuracy mode used to solve ``q`` for ``flip``/``flip2``.
        trials: Trials per sweep point.
        seed: Master seed.
        attack: Optional coalition attack. Each trial then reports the
            corrupted run's error alongside the coupled bias.
        t: Target sizes for top-t metrics.
        simulation: ``"messages"`` or ``"counts"``.
        n_jobs: Worker processes.
        memory_budget: Largest expected size, in bytes, of one trial's
            materialised messages. Larger runs are refused up front.
        keep_estimates: Force the estimates into the JSON output.
    """

    protocol: str
    eps: float = 1.0
    delta: float = 1e-6
    k: tuple[int | None, ...] = (None,)
    V: int | None = None
    d_hat: int | None = None
    hash_seed: int = 0
    q: float | None = None
    mode: str = "max"
    trials: int = 100
    seed: int = 0
    attack: AttackSpec | None = None
    t: tuple[int, ...] = ()
    simulation: str = "messages"
    n_jobs: int = 1
    memory_budget: int = DEFAULT_DENSE_BUDGET
    keep_estimates: bool = False

    def __post_init__(self) -> None:
        protocol = str(self.protocol).replace("-", "_").lower()
        if protocol not in PROTOCOLS:
            raise DomainError(f"protocol must be one of {PROTOCOLS}, got {self.protocol!r}")
        object.__setattr__(self, "protocol", protocol)
        ks = (self.k,) if self.k is None or isinstance(self.k, (int, np.integer)) else tuple(self.k)
        if not ks:
            raise DomainError("the k sweep must not be empty")
        object.__setattr__(self, "k", tuple(None if k is None else check_nonneg_int(k, "k") for k in ks))
        object.__setattr__(self, "t", tuple(check_positive_int(t, "t") for t in self.t))
        object.__setattr__(self, "mode", normalize_mode(self.mode))
        object.__setattr__(self, "trials", check_positive_int(self.trials, "trials"))
        object.__setattr__(self, "n_jobs", check_positive_int(self.n_jobs, "n_jobs"))
        if self.simulation not in ("messages", "counts"):
            raise DomainError(f"simulation must be 'messages' or 'counts', got {self.simulation!r}")
        if self.q is not None and protocol not in ("flip", "flip2"):
            raise DomainError("an explicit q is only supported for flip and flip2")

    def as_dict(self) -> dict:
        out = asdict(self)
        out["k"] = list(self.k)
        out["t"] = list(self.t)
        out["attack"] = None if self.attack is None else asdict(self.attack)
        return out


@dataclass(frozen=True)
class ResultRow:
    """One trial of one sweep point.

    ``bound`` comes straight from the params module (``nan`` when the
    protocol has none). ``topk`` holds one dict per requested ``t`` and
    ``attack`` the coupled attack measurements, when configured.
    """

    sweep: int
    trial: int
    protocol: str
    k: int
    q: float
    max_error: float
    bound: float
    runtime: float = field(default=0.0, compare=False)
    topk: tuple[dict, ...] = ()
    attack: dict | None = None

    def csv_fields(self) -> list:
        return [self.sweep, self.trial, self.protocol, self.k, repr(self.q), repr(self.max_error), repr(self.bound)]

    def as_dict(self) -> dict:
        out = asdict(self)
        out["topk"] = list(self.topk)
        return out


@dataclass(frozen=True)
class _Plan:
    """A resolved sweep point: everything a worker needs to run trials."""

    sweep: int
    protocol: str
    k: int
    q: float
    bound: float
    params: object
    family: compact.HashFamily | None
    meta: dict


@dataclass
class ExperimentResult:
    """Rows of an experiment plus the resolved configuration.

    Behaves as a sequence of :class:`ResultRow`.
    """

    config: ExperimentConfig
    rows: list[ResultRow]
    sweeps: list[dict]
    histogram: np.ndarray
    n: int
    estimates: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def __getitem__(self, i):
        return self.rows[i]

    def column(self, name: str, sweep: int | None = None) -> np.ndarray:
        """One numeric field across rows, optionally restricted to a sweep point."""
        return np.array([getattr(r, name) for r in self.rows if sweep is None or r.sweep == sweep], dtype=float)

    def csv_text(self) -> str:
        buf = io.StringIO()
        buf.write(f"# {SCHEMA}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for row in self.rows:
            writer.writerow(row.csv_fields())
        return buf.getvalue()

    def as_dict(self) -> dict:
        out = {
            "schema": SCHEMA,
            "meta": {
                "config": self.config.as_dict(),
                "n": self.n,
                "d": int(self.histogram.size),
                "sweeps": self.sweeps,
            },
            "rows": [r.as_dict() for r in self.rows],
            "histogram": self.histogram.tolist(),
        }
        if self.estimates is not None:
            out["estimates"] = self.estimates.tolist()
        return out


def _json_safe(value):
    """Replace non-finite floats by ``None`` so the JSON stays standard."""
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    if isinstance(value, np.generic):
        return _json_safe(value.item())
    return value


def _resolve_flip(config: ExperimentConfig, data: Dataset, sweep: int, k: int | None) -> _Plan:
    n, d = data.n, data.d
    if config.q is not None:
        if k is None:
            raise DomainError("an explicit q needs an explicit k")
        params = ProtocolParams(n=n, d=d, k=k, q=config.q)
        bound = math.nan
        meta = {"k": k, "q": params.q, "source": "explicit q"}
    else:
        if k is None:
            k = min_k(config.eps, config.delta, n, config.mode, d=d)
        params = ProtocolParams.solve(n, d, config.eps, config.delta, k=k, mode=config.mode)
        if config.mode == "max":
            bound = error_bound_max(config.eps, config.delta, n, k, d)
        else:
            bound = error_bound_per_bin(config.eps, config.delta, n, k)
        meta = {"k": k, "q": params.q, "scale": params.scale, "bound": bound, "mode": config.mode}
    if config.protocol == "flip" and config.simulation == "messages":
        need = params.n_messages * ((d + 7) // 8)
        if need > config.memory_budget:
            raise ResourceLimitError(
                f"a dense batch would need {need} bytes (budget {config.memory_budget}); "
                "use flip2 or flip3 instead"
            )
    return _Plan(sweep, config.protocol, params.k, params.q, bound, params, None, meta)


def _check_sparse_memory(config: ExperimentConfig, messages: int, width: int, q: float) -> None:
    # Eight bytes per stored index: one per flipped bit plus the encoded one.
    need = 8.0 * messages * (width * q + 1.0)
    if config.simulation == "messages" and need > config.memory_budget:
        raise ResourceLimitError(
            f"sparse messages would need about {need:.3g} bytes (budget {config.memory_budget}); "
            "use simulation='counts' instead"
        )


def _resolve(config: ExperimentConfig, data: Dataset, sweep: int, k: int | None) -> _Plan:
    n, d = data.n, data.d
    if config.protocol in ("flip", "flip2"):
        plan = _resolve_flip(config, data, sweep, k)
        if plan.protocol == "flip2":
            _check_sparse_memory(config, plan.params.n_messages, d, plan.q)
        return plan
    if config.protocol == "flip3":
        sol = compact.solve_cm(config.eps, config.delta, n, d, V=config.V, k=k, d_hat=config.d_hat)
        _check_sparse_memory(config, sol.V * n * (sol.k + 1), sol.d_hat, sol.q)
        family = sol.hash_family(config.hash_seed)
        return _Plan(sweep, "flip3", sol.k, sol.q, sol.bound, sol.protocol_params(), family, sol.as_dict())
    if config.protocol == "had":
        base = had_params(config.eps, config.delta, n, d)
        hp = HadParams(d=base.d, D=base.D, tau=base.tau, k=base.k if k is None else k, n=n)
        return _Plan(sweep, "had", hp.k, math.nan, math.nan, hp, None, asdict(hp))
    if k not in (None, 0):
        raise DomainError("the amplification variant sends no fabricated messages (k = 0)")
    sol = amplification_params(config.eps, config.delta, n, d)
    params = ProtocolParams(n=n, d=d, k=0, q=sol.q, eps=config.eps, delta=config.delta)
    return _Plan(sweep, "flip_amplified", 0, sol.q, sol.bound, params, None, sol.as_dict())


def _estimate(plan: _Plan, data: Dataset, config: ExperimentConfig, key: tuple[int, int]) -> np.ndarray:
    if plan.protocol in ("flip", "flip2", "flip_amplified"):
        layout = "dense" if plan.protocol == "flip" else "sparse"
        return run_protocol(
            data, plan.params, config.seed, layout=layout, simulation=config.simulation,
            stream_key=key, dense_budget=config.memory_budget,
        ).z
    if plan.protocol == "flip3":
        return compact.run_cm_protocol(
            data, plan.params, plan.family, config.seed, simulation=config.simulation, stream_key=key
        ).z
    return run_had_protocol(data, plan.params, config.seed, stream_key=key).z


def topk_metrics(z, hist, protocol: str, n: int, k: int, q: float, ts) -> tuple[dict, ...]:
    """Top-t quality of one estimate vector for each ``t`` in ``ts``.

    ``alpha_bound`` is only defined for the flip family (``nan`` otherwise,
    and also when ``q`` is below the bound's floor).
    """
    z, hist = np.asarray(z, dtype=float), np.asarray(hist, dtype=float)
    out = []
    for t in ts:
        cands = topk.top_t(z, t)
        bound = math.nan
        if protocol in ("flip", "flip2", "flip_amplified"):
            try:
                bound = topk.alpha_bound(ProtocolParams(n=n, d=hist.size, k=k, q=q), hist.size, t)
            except DomainError:
                pass
        out.append({
            "t": int(t),
            "alpha_observed": topk.alpha_gap(cands, hist, t),
            "alpha_bound": bound,
            "f1": topk.f1_score(cands, hist, t),
        })
    return tuple(out)


def _run_trial(job: tuple[_Plan, int], data: Dataset, config: ExperimentConfig) -> tuple[ResultRow, np.ndarray]:
    plan, trial = job
    start = time.perf_counter()
    z = _estimate(plan, data, config, (plan.sweep, trial))
    runtime = time.perf_counter() - start
    hist = data.histogram()
    row = ResultRow(
        sweep=plan.sweep, trial=trial, protocol=plan.protocol, k=plan.k, q=plan.q,
        max_error=float(np.max(np.abs(z - hist))), bound=plan.bound, runtime=runtime,
        topk=topk_metrics(z, hist, plan.protocol, data.n, plan.k, plan.q, config.t),
    )
    return row, z


def _sweep_seed(seed: int, sweep: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=(sweep,)).generate_state(1, np.uint64)[0] >> 1)


def _run_attack(plan: _Plan, data: Dataset, config: ExperimentConfig) -> list[ResultRow]:
    spec = config.attack
    seed = _sweep_seed(config.seed, plan.sweep)
    start = time.perf_counter()
    if plan.protocol == "had":
        report = run_attacked_had(data, plan.params, spec.target, spec.m, seed, config.trials)
    else:
        report = run_attacked_flip(data, plan.params, spec, seed, config.trials)
    per_trial = (time.perf_counter() - start) / config.trials
    rows = []
    for t, base in enumerate(report.rows()):
        attack = {k: v for k, v in base.items() if k not in ("trial", "protocol")}
        attack["max_error_honest"] = float(report.max_error_honest[t])
        rows.append(ResultRow(
            sweep=plan.sweep, trial=t, protocol=plan.protocol, k=plan.k, q=plan.q,
            max_error=float(report.max_error_corrupt[t]), bound=plan.bound, runtime=per_trial,
            attack=attack,
        ))
    return rows


def run_experiment(config: ExperimentConfig, data: Dataset) -> ExperimentResult:
    """Run every trial of every sweep point.

    Raises:
        InfeasibleParametersError, OutOfRegimeError, DomainError,
        ResourceLimitError: From resolving the sweep, before any trial.
    """
    if config.attack is not None:
        if config.protocol == "flip3":
            raise DomainError("attacks are not implemented for flip3")
        config.attack.validate(data.n, data.d)
    plans = [_resolve(config, data, s, k) for s, k in enumerate(config.k)]
    hist = data.histogram()
    sweeps = [{"sweep": p.sweep, "protocol": p.protocol, **p.meta} for p in plans]

    if config.attack is not None:
        rows = [row for plan in plans for row in _run_attack(plan, data, config)]
        return ExperimentResult(config, rows, sweeps, hist, data.n)

    jobs = [(plan, t) for plan in plans for t in range(config.trials)]
    work = partial(_run_trial, data=data, config=config)
    if config.n_jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=config.n_jobs) as pool:
            results = list(pool.map(work, jobs, chunksize=max(1, len(jobs) // (4 * config.n_jobs))))
    else:
        results = [work(job) for job in jobs]
    results.sort(key=lambda rz: (rz[0].sweep, rz[0].trial))
    rows = [r for r, _ in results]
    estimates = None
    if config.keep_estimates or len(results) * data.d <= ESTIMATE_LIMIT:
        estimates = np.stack([z for _, z in results])
    return ExperimentResult(config, rows, sweeps, hist, data.n, estimates)


def write_results(result: ExperimentResult, prefix, *, extra_meta: dict | None = None) -> tuple[Path, Path]:
    """Write ``<prefix>.csv`` and ``<prefix>.json``; returns both paths.

    The CSV leaves out runtimes, so identical inputs give byte-identical
    files. ``extra_meta`` is merged into the JSON ``meta`` block.
    """
    prefix = Path(prefix)
    if prefix.parent != Path("."):
        prefix.parent.mkdir(parents=True, exist_ok=True)
    csv_path = prefix.with_name(prefix.name + ".csv")
    json_path = prefix.with_name(prefix.name + ".json")
    csv_path.write_text(result.csv_text(), encoding="utf-8")
    doc = result.as_dict()
    doc["meta"].update(extra_meta or {})
    json_path.write_text(json.dumps(_json_safe(doc), indent=1), encoding="utf-8")
    return csv_path, json_path
