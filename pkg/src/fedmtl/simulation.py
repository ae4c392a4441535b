"""Simulated-time accounting for federated runs: FLOP counting, network cost
presets, per-round work budgets, and dropout injection.

Per-round cost for node t follows compute-plus-communication:

    time(t) = flops(t) / clock_rate(t) + 2 * (latency + message_bytes / bandwidth)

with one dense d-vector shipped each way (8 bytes per entry).  A synchronous
round lasts as long as the slowest responding node; dropped nodes never extend
the deadline, which is set by the coordinator's clock cycle.

Budget and dropout draws are pure functions of (seed, node, round), so any
wrapped run is reproducible and indifferent to worker threading.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import FederatedDataset
from .losses import LossKind
from .regularizers import OmegaModel, build_relationship, initial_omega
from .solver import RoundStats, SolverConfig, run_mocha

BUDGET_STREAM = 21
DROP_STREAM = 22

# FLOPs charged per coordinate update (or gradient evaluation) per feature:
# one dot against the weight snapshot, one against the local accumulator, the
# step computation, and the accumulator refresh.
C_UPDATE = 4

MESSAGE_BYTES_PER_FEATURE = 8.0

# Strictly positive floor so simulated time advances even for free rounds.
MIN_ROUND_MS = 1e-9


@dataclass(frozen=True)
class NodeProfile:
    clock_rate: float = 1e6          # FLOPs per millisecond
    drop_probability: float = 0.0

    def __post_init__(self):
        if self.clock_rate <= 0.0:
            raise ValueError("clock_rate must be positive")
        if not 0.0 <= self.drop_probability <= 1.0:
            raise ValueError("drop_probability must be in [0, 1]")


@dataclass(frozen=True)
class NetworkPreset:
    name: str
    latency_ms: float
    bandwidth_bytes_per_ms: float

    def __post_init__(self):
        if self.latency_ms < 0.0 or self.bandwidth_bytes_per_ms <= 0.0:
            raise ValueError("need latency >= 0 and bandwidth > 0")

    def comm_ms(self, message_bytes: float) -> float:
        # Down the weight snapshot, up the delta block.
        return 2.0 * (self.latency_ms + message_bytes / self.bandwidth_bytes_per_ms)


PRESETS = {
    "wifi": NetworkPreset("wifi", 5.0, 1e4),
    "lte": NetworkPreset("lte", 40.0, 1e3),
    "3g": NetworkPreset("3g", 75.0, 1e2),
}


def preset_for_ratio(ratio: float, clock_rate: float, d: int,
                     name: str | None = None) -> NetworkPreset:
    """Custom preset whose round-trip cost is ``ratio`` times the compute cost
    of a single local update; backs the 10x / 100x / 1000x comparisons."""
    if ratio <= 0.0:
        raise ValueError("ratio must be positive")
    update_ms = C_UPDATE * d / clock_rate
    return NetworkPreset(name or f"ratio{ratio:g}x", 0.5 * ratio * update_ms, 1e18)


@dataclass(frozen=True)
class HeterogeneityPolicy:
    """Per-round work budgets: ``none`` grants the full n_min, ``low`` draws
    uniformly from [0.9 n_min, n_min], ``high`` from [0.1 n_min, n_min], and
    ``fixed`` always grants k."""

    mode: str
    n_min: int
    k: int | None = None

    def __post_init__(self):
        if self.mode not in ("none", "low", "high", "fixed"):
            raise ValueError("mode must be none|low|high|fixed")
        if self.n_min < 1:
            raise ValueError("n_min must be >= 1")
        if self.mode == "fixed" and (self.k is None or self.k < 0):
            raise ValueError("fixed mode needs k >= 0")

    def bounds(self) -> tuple[int, int]:
        if self.mode == "low":
            return int(np.ceil(0.9 * self.n_min)), self.n_min
        if self.mode == "high":
            return int(np.ceil(0.1 * self.n_min)), self.n_min
        if self.mode == "none":
            return self.n_min, self.n_min
        return self.k, self.k


def sample_budget(policy: HeterogeneityPolicy, rng) -> int:
    lo, hi = policy.bounds()
    if lo == hi:
        return lo
    return int(rng.integers(lo, hi + 1))


def sample_drop(profile: NodeProfile, rng) -> bool:
    return bool(rng.random() < profile.drop_probability)


def estimate_flops(update_count: int, d: int) -> float:
    if update_count < 0:
        raise ValueError("update_count must be >= 0")
    return float(update_count) * C_UPDATE * d


def round_time(per_node_flops, profiles, preset: NetworkPreset,
               message_bytes: float, dropped=()) -> float:
    """Synchronous round duration: max compute+comm over responding nodes.
    Dropped nodes only wait out the deadline set by the others."""
    if len(per_node_flops) != len(profiles):
        raise ValueError("per_node_flops and profiles must have equal length")
    dropped = set(dropped)
    comm = preset.comm_ms(message_bytes)
    deadline = 0.0
    any_active = False
    for t, flops in enumerate(per_node_flops):
        if t in dropped:
            continue
        any_active = True
        deadline = max(deadline, flops / profiles[t].clock_rate + comm)
    if not any_active:
        deadline = comm
    return max(deadline, MIN_ROUND_MS)


class SystemsPolicy:
    """Budget/drop provider for solver runs, backed by reproducible streams
    keyed on (seed, node, round)."""

    def __init__(self, seed: int, profiles, heterogeneity: HeterogeneityPolicy):
        if seed < 0:
            raise ValueError("seed must be >= 0")
        self.seed = seed
        self.profiles = list(profiles)
        self.heterogeneity = heterogeneity

    def budget(self, task_id: int, round_idx: int) -> int:
        rng = np.random.default_rng([self.seed, BUDGET_STREAM, task_id, round_idx])
        return sample_budget(self.heterogeneity, rng)

    def dropped(self, task_id: int, round_idx: int) -> bool:
        rng = np.random.default_rng([self.seed, DROP_STREAM, task_id, round_idx])
        return sample_drop(self.profiles[task_id], rng)


def attach_times(trace: list[RoundStats], d: int, profiles,
                 preset: NetworkPreset) -> list[RoundStats]:
    """Fill elapsed_ms_estimated on each round record (cumulative) from the
    recorded per-node update counts; returns the trace for chaining."""
    message_bytes = MESSAGE_BYTES_PER_FEATURE * d
    elapsed = 0.0
    for stats in trace:
        flops = [estimate_flops(c, d) for c in stats.update_counts]
        elapsed += round_time(flops, profiles, preset, message_bytes,
                              dropped=stats.dropped)
        stats.elapsed_ms_estimated = elapsed
    return trace


@dataclass(frozen=True)
class SimulationResult:
    method: str
    trace: list[RoundStats]
    preset: NetworkPreset
    heterogeneity: HeterogeneityPolicy
    primal: object = None     # PrimalState of the finished run
    omega: np.ndarray | None = None


def simulate_run(method: str, ds: FederatedDataset, *, kind: LossKind,
                 model: OmegaModel, preset: NetworkPreset,
                 heterogeneity: HeterogeneityPolicy, seed: int,
                 rounds: int, gap_tol: float | None = None,
                 profiles=None, method_params: dict | None = None,
                 solver_config: SolverConfig | None = None) -> SimulationResult:
    """Run a method under a systems environment and annotate its trace with
    estimated time.  ``method_params`` carries per-method knobs: theta for
    cocoa, batch/beta for mb_sdca, batch/step/schedule for mb_sgd."""
    from . import baselines

    params = dict(method_params or {})
    if profiles is None:
        profiles = [NodeProfile() for _ in range(ds.m)]
    if len(profiles) != ds.m:
        raise ValueError("need one node profile per task")
    policy = SystemsPolicy(seed, profiles, heterogeneity)

    if method == "mocha":
        config = solver_config or SolverConfig()
        config = replace(config, seed=seed, inner_rounds=rounds, gap_tol=gap_tol)
        result = run_mocha(ds, model, config, policy, kind)
        trace, primal, omega = result.trace, result.primal, result.omega
    elif method == "cocoa":
        omega = initial_omega(model, ds.m)
        rel = build_relationship(model, omega)
        run = baselines.cocoa_run(
            ds, kind, rel, model, params.get("theta", 0.1), rounds,
            seed=seed, gap_tol=gap_tol,
            max_passes=params.get("max_passes", 500),
        )
        trace, primal = run.trace, run.primal
    elif method == "mb_sdca":
        omega = initial_omega(model, ds.m)
        rel = build_relationship(model, omega)
        run = baselines.mb_sdca_run(
            ds, kind, rel, model, params.get("batch", 1),
            params.get("beta", 1.0), rounds, seed=seed,
            policy=policy if heterogeneity.mode != "none" else None,
            gap_tol=gap_tol,
        )
        trace, primal = run.trace, run.primal
    elif method == "mb_sgd":
        omega = initial_omega(model, ds.m)
        run = baselines.mb_sgd_run(
            ds, kind, model, omega, params.get("batch", 1),
            params.get("step", 0.1), rounds, seed=seed,
            schedule=params.get("schedule", "constant"),
            policy=policy if heterogeneity.mode != "none" else None,
        )
        trace, primal = run.trace, run.primal
    else:
        raise ValueError(f"unknown method {method!r}")

    attach_times(trace, ds.d, profiles, preset)
    return SimulationResult(method, trace, preset, heterogeneity, primal, omega)
