"""Exact search over service-mode/association assignments.

Assignments are enumerated as ``choice`` vectors: entry t is the SPV row
serving target t, comm targets first. Ties are broken by the
lexicographically smallest choice vector everywhere.
"""
from __future__ import annotations

import itertools
import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import gnn
from .hetgraph import GraphSettings, build_graph, sample_neighborhood
from .jcs import Assignment, LinkBudget, LinkReport, SystemParams, evaluate
from .scenario import Topology

DEFAULT_BUDGET = 10**7
_CHUNK = 1 << 15


class BudgetExceeded(RuntimeError):
    pass


@dataclass
class SolveResult:
    assignment: Assignment | None
    objective_true: float
    objective_surrogate: float
    feasible: bool
    nodes_explored: int = 0
    wall_time: float = 0.0
    report: LinkReport | None = field(default=None, repr=False)

    @property
    def choice(self) -> tuple[int, ...] | None:
        return None if self.assignment is None else self.assignment.choice()

    def to_dict(self) -> dict:
        return {
            "schema": "thzjcs.solve_result/1",
            "assignment": None if self.assignment is None else self.assignment.to_dict(),
            "objective_true_bps": self.objective_true,
            "objective_surrogate": self.objective_surrogate,
            "feasible": self.feasible,
            "solver_stats": {"nodes_explored": self.nodes_explored, "wall_time_s": self.wall_time},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def assignment_rows(topology: Topology, a: Assignment) -> list[tuple[int, str, int]]:
    """``(spv_id, mode, target_id)`` rows for CSV export."""
    vs = topology.vehicles
    rows = []
    for k, m in zip(*np.nonzero(a.alpha)):
        rows.append((vs[topology.spvs[k]].id, "comm", vs[topology.comm[m]].id))
    for k, n in zip(*np.nonzero(a.beta)):
        rows.append((vs[topology.spvs[k]].id, "sense", vs[topology.sense[n]].id))
    return sorted(rows)


def labels_from_assignment(a: Assignment) -> np.ndarray:
    """Per-SPV multi-hot labels of length L+1; the last class marks an idle SPV."""
    cols = np.concatenate([a.alpha, a.beta], axis=1).astype(float)
    idle = (cols.sum(axis=1) == 0).astype(float)
    return np.concatenate([cols, idle[:, None]], axis=1)


def assignment_from_labels(z, n_comm: int, n_sense: int) -> Assignment:
    z = np.asarray(z)
    return Assignment(z[:, :n_comm], z[:, n_comm:n_comm + n_sense])


def _finish(topology, params, choice, surrogate, feasible_hint, nodes, t0):
    K, M, N = topology.counts
    if choice is None:
        return SolveResult(None, 0.0, surrogate, False, nodes, time.perf_counter() - t0)
    a = Assignment.from_choice(choice, K, M, N)
    report = evaluate(topology, a, params)
    return SolveResult(a, report.objective, surrogate, feasible_hint and report.feasible,
                       nodes, time.perf_counter() - t0, report)


def _lex_chunks(K: int, L: int):
    """All choice vectors in lexicographic order, in chunks."""
    it = itertools.product(range(K), repeat=L)
    while True:
        block = list(itertools.islice(it, _CHUNK))
        if not block:
            return
        yield np.array(block, dtype=np.intp).reshape(len(block), L)


def enumerate_optimal(topology: Topology, params: SystemParams | None = None,
                      budget: int = DEFAULT_BUDGET) -> tuple[SolveResult, np.ndarray | None]:
    """Exhaustive search for the sum-rate optimum; also returns per-SPV labels.

    When no assignment meets the sensing constraint the best mode-consistent
    assignment is returned with ``feasible`` False.
    """
    params = params or SystemParams()
    K, M, N = topology.counts
    L = M + N
    if K**L > budget:
        raise BudgetExceeded(f"{K}^{L} = {K**L} assignments exceeds the budget of {budget}")
    t0 = time.perf_counter()
    lb = LinkBudget(topology, params)
    feasible_pool: list[tuple[float, tuple]] = []
    fallback_obj, fallback = -np.inf, None
    for C in _lex_chunks(K, L):
        C = C[lb.mode_ok(C)]
        if not len(C):
            continue
        obj, _, sense = lb.metrics(C)
        j = int(np.argmax(obj))
        if obj[j] > fallback_obj:
            fallback_obj, fallback = float(obj[j]), tuple(int(x) for x in C[j])
        ok = lb.sensing_feasible(sense)
        feasible_pool.extend((float(o), tuple(int(x) for x in c)) for o, c in zip(obj[ok], C[ok]))
    # best objective first, lexicographic choice among ties
    feasible_pool.sort(key=lambda oc: (-oc[0], oc[1]))
    for _, choice in feasible_pool:
        res = _finish(topology, params, choice, float("nan"), True, K**L, t0)
        if res.feasible:  # reference route agrees at the threshold
            return res, labels_from_assignment(res.assignment)
    res = _finish(topology, params, fallback, float("nan"), False, K**L, t0)
    labels = None if res.assignment is None else labels_from_assignment(res.assignment)
    return res, labels


def _target_probs(probabilities, K: int, L: int) -> np.ndarray:
    P = np.asarray(probabilities, dtype=float)
    if P.shape != (K, L + 1):
        raise ValueError(f"probabilities must be {K}x{L + 1}, got {P.shape}")
    if np.any((P < 0) | (P > 1)):
        raise ValueError("probabilities must lie in [0, 1]")
    return P[:, :L]


def surrogate_value(probabilities, choice) -> float:
    """Sum of the chosen SPV's probability for every target, accumulated in target order."""
    P = np.asarray(probabilities, dtype=float)
    total = 0.0
    for t, k in enumerate(choice):
        total = total + float(P[k, t])
    return total


def enumerate_surrogate(topology: Topology, probabilities,
                        params: SystemParams | None = None) -> SolveResult:
    """Brute-force maximiser of the probability-sum objective."""
    params = params or SystemParams()
    K, M, N = topology.counts
    L = M + N
    P = _target_probs(probabilities, K, L)
    t0 = time.perf_counter()
    lb = LinkBudget(topology, params)
    best, best_choice = -np.inf, None
    for C in _lex_chunks(K, L):
        C = C[lb.mode_ok(C)]
        if not len(C):
            continue
        _, _, sense = lb.metrics(C)
        C = C[lb.sensing_feasible(sense)]
        if not len(C):
            continue
        val = np.zeros(len(C))
        for t in range(L):
            val = val + P[C[:, t], t]
        j = int(np.argmax(val))
        if val[j] > best:
            best, best_choice = float(val[j]), tuple(int(x) for x in C[j])
    if best_choice is None:
        return SolveResult(None, 0.0, float("nan"), False, K**L, time.perf_counter() - t0)
    return _finish(topology, params, best_choice, best, True, K**L, t0)


def solve_surrogate(topology: Topology, probabilities,
                    params: SystemParams | None = None) -> SolveResult:
    """Exact depth-first branch and bound for the probability-sum objective.

    Targets are fixed in order, SPVs tried in increasing index, so the first
    maximiser found is the lexicographically smallest. Subtrees are cut when
    a mode conflict appears, when an SPV cannot reach a sensing target even
    without interference, or when the optimistic bound (current value plus the
    best remaining per-target probability) cannot beat the incumbent.
    Sensing SINR is checked at the leaves.
    """
    params = params or SystemParams()
    K, M, N = topology.counts
    L = M + N
    P = _target_probs(probabilities, K, L)
    t0 = time.perf_counter()
    lb = LinkBudget(topology, params)
    gmin = params.sensing.min_sensing_sinr
    reachable = lb.sense_signal / lb.noise_floor >= gmin  # K x N, necessary condition
    col_max = P.max(axis=0)
    suffix = np.zeros(L + 1)
    for t in range(L - 1, -1, -1):
        suffix[t] = suffix[t + 1] + col_max[t]
    slack = 1e-12 * max(1.0, float(suffix[0]))

    mode = [0] * K  # 0 idle, 1 comm, 2 sense; counts of targets below
    load = [0] * K
    choice = [0] * L
    best = [-np.inf, None]
    nodes = [0]

    def leaf(value):
        if value <= best[0]:
            return
        _, _, sense = lb.metrics(np.array([choice], dtype=np.intp))
        if lb.sensing_feasible(sense)[0]:
            best[0], best[1] = value, tuple(choice)

    def dfs(t, value):
        nodes[0] += 1
        if t == L:
            leaf(value)
            return
        if value + suffix[t] < best[0] - slack:
            return
        want = 1 if t < M else 2
        for k in range(K):
            if mode[k] not in (0, want):
                continue
            if want == 2 and not reachable[k, t - M]:
                continue
            old = mode[k]
            mode[k] = want
            load[k] += 1
            choice[t] = k
            dfs(t + 1, value + float(P[k, t]))
            load[k] -= 1
            if load[k] == 0:
                mode[k] = old

    dfs(0, 0.0)
    if best[1] is None:
        return SolveResult(None, 0.0, float("nan"), False, nodes[0], time.perf_counter() - t0)
    return _finish(topology, params, best[1], best[0], True, nodes[0], t0)


def baseline_location(topology: Topology, params: SystemParams | None = None) -> SolveResult:
    """Greedy strongest-signal association from positions alone.

    Targets go in order of their best interference-free SNR (sensing SNR
    relative to the requirement); each takes the strongest SPV not already
    committed to the other mode, lower index on ties. A sensing target whose
    pick cannot meet the requirement still takes it and the result is
    reported infeasible.
    """
    params = params or SystemParams()
    K, M, N = topology.counts
    L = M + N
    t0 = time.perf_counter()
    lb = LinkBudget(topology, params)
    signal = np.concatenate([lb.comm_signal, lb.sense_signal], axis=1)  # K x L
    margin = signal / lb.noise_floor
    margin[:, M:] /= params.sensing.min_sensing_sinr
    order = sorted(range(L), key=lambda t: (-margin[:, t].max(), t))
    mode = [0] * K
    choice = [0] * L
    for t in order:
        want = 1 if t < M else 2
        allowed = [k for k in range(K) if mode[k] in (0, want)]
        pool = allowed or list(range(K))
        k = max(pool, key=lambda k: (signal[k, t], -k))
        choice[t] = k
        mode[k] = want
    a = Assignment.from_choice(choice, K, M, N)
    if a.violations():
        return SolveResult(a, 0.0, float("nan"), False, L, time.perf_counter() - t0)
    report = evaluate(topology, a, params)
    return SolveResult(a, report.objective, float("nan"), report.feasible, L,
                       time.perf_counter() - t0, report)


def spv_samples(topology: Topology, s1: int, s2: int, rng: np.random.Generator,
                params: SystemParams | None = None, settings: GraphSettings | None = None,
                labels=None) -> list[gnn.TrainingSample]:
    """One sample per SPV, in SPV order, drawn from a single rng stream."""
    params = params or SystemParams()
    settings = settings or GraphSettings()
    graph = build_graph(topology, params.channel, settings)
    out = []
    for row, node in enumerate(graph.spv_nodes):
        nb = sample_neighborhood(graph, node, s1, s2, rng, settings.second_hop_per_node)
        out.append(gnn.make_sample(graph, nb, None if labels is None else labels[row]))
    return out


def predict_probabilities(topology: Topology, model: gnn.GnnModel, rng: np.random.Generator,
                          params: SystemParams | None = None,
                          settings: GraphSettings | None = None) -> np.ndarray:
    if topology.n_targets != model.L:
        raise ValueError(f"model trained for L={model.L}, topology has L={topology.n_targets}")
    s1, s2 = model.hyper.sample_sizes
    samples = spv_samples(topology, s1, s2, rng, params, settings)
    return gnn.sigmoid(gnn.forward(model, samples))


def decide(topology: Topology, model: gnn.GnnModel, rng: np.random.Generator,
           params: SystemParams | None = None,
           settings: GraphSettings | None = None) -> tuple[SolveResult, np.ndarray]:
    """Online phase: sample, encode every SPV, then solve the surrogate exactly."""
    probs = predict_probabilities(topology, model, rng, params, settings)
    return solve_surrogate(topology, probs, params), probs
