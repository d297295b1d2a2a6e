"""Dataset generation, training, evaluation and explanation runs.

Every output file is written atomically and carries the resolved config
hash. Nothing time-dependent is written to disk, so identical configs and
seeds give byte-identical files.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import os
import shutil
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import gnn
from .assign import (BudgetExceeded, assignment_rows, baseline_location, decide,
                     enumerate_optimal, labels_from_assignment)
from .config import ExperimentConfig, config_from_dict
from .gnn import GnnModel, Mode
from .hetgraph import HeteroGraph, SampledNeighborhood, build_graph, sample_neighborhood
from .jcs import Assignment
from .scenario import Topology, TopologyError, generate_topology

log = logging.getLogger(__name__)

SPLITS = {"train": 0, "test": 1, "validate": 2}
SCHEMES = ("proposed", "baseline_a", "baseline_b", "baseline_c")
METRIC_FIELDS = ("scheme", "n_instances", "sum_rate_mean_bps", "ratio_of_means",
                 "ratio_mean", "ratio_ci_low", "ratio_ci_high", "subset_accuracy",
                 "per_label_accuracy", "feasibility_rate")
BOOTSTRAP_RESAMPLES = 2000


# ---------------------------------------------------------------------------
# output helpers


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def write_atomic(path: Path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def csv_text(header, rows, config_hash: str) -> str:
    """CSV with one leading ``# config_hash: ...`` comment line."""
    buf = io.StringIO()
    buf.write(f"# config_hash: {config_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


class _Staging:
    """Build a directory next to its destination and swap it in on success."""

    def __init__(self, dest: Path):
        self.dest = Path(dest)

    def __enter__(self) -> Path:
        self.dest.parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=f".{self.dest.name}.", dir=self.dest.parent))
        os.chmod(self.tmp, 0o755)
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            shutil.rmtree(self.tmp, ignore_errors=True)
            return False
        if self.dest.exists():
            shutil.rmtree(self.dest)
        os.replace(self.tmp, self.dest)
        return False


def _config_doc(cfg: ExperimentConfig) -> str:
    return dumps({"schema": "thzjcs.config/1", "config_hash": cfg.hash(), "config": cfg.to_dict()})


def load_run_config(directory) -> ExperimentConfig:
    doc = json.loads((Path(directory) / "config.json").read_text(encoding="utf-8"))
    return config_from_dict(doc["config"])


def _float(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# dataset


@dataclass
class Record:
    index: int
    draw: int
    topology: Topology
    graph: HeteroGraph
    neighborhoods: list[SampledNeighborhood]
    labels: np.ndarray
    oracle_choice: tuple[int, ...]
    oracle_objective: float

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "draw": self.draw,
            "topology": self.topology.to_dict(),
            "graph": self.graph.to_dict(),
            "neighborhoods": [nb.to_dict() for nb in self.neighborhoods],
            "labels": self.labels.astype(int).tolist(),
            "oracle": {"choice": list(self.oracle_choice), "objective_bps": self.oracle_objective},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Record":
        graph = HeteroGraph.from_dict(d["graph"])
        return cls(
            index=int(d["index"]),
            draw=int(d["draw"]),
            topology=Topology.from_dict(d["topology"]),
            graph=graph,
            neighborhoods=[SampledNeighborhood.from_dict(graph, nb) for nb in d["neighborhoods"]],
            labels=np.array(d["labels"], dtype=float),
            oracle_choice=tuple(d["oracle"]["choice"]),
            oracle_objective=float(d["oracle"]["objective_bps"]),
        )

    def samples(self) -> list[gnn.TrainingSample]:
        return [gnn.make_sample(self.graph, nb, z) for nb, z in zip(self.neighborhoods, self.labels)]


def _topology_seed(cfg, split: str, draw: int):
    return [cfg.seed, SPLITS[split], draw]


def generate_split(cfg: ExperimentConfig, split: str, n: int) -> tuple[list[Record], int]:
    """Draw topologies until ``n`` feasible ones are labelled; returns (records, infeasible)."""
    K, M, N = cfg.counts
    if K ** (M + N) > cfg.data.enumeration_budget:
        raise BudgetExceeded(
            f"labelling needs {K}^{M + N} = {K ** (M + N)} evaluations per topology, above "
            f"data.enumeration_budget={cfg.data.enumeration_budget}; reduce data.counts or raise the budget")
    params, settings = cfg.system_params(), cfg.graph_settings()
    s1, s2 = cfg.gnn.sample_sizes
    records, infeasible, draw = [], 0, 0
    max_draws = max(1, n) * cfg.data.max_draws_per_record
    while len(records) < n:
        if draw >= max_draws:
            raise TopologyError(f"{split}: only {len(records)} feasible topologies in {draw} draws")
        topo = generate_topology(_topology_seed(cfg, split, draw),
                                 tuple(cfg.data.region_m), cfg.counts,
                                 tx_power=cfg.tx_power_w(), antenna=cfg.antenna_pattern())
        res, labels = enumerate_optimal(topo, params, cfg.data.enumeration_budget)
        if not res.feasible:
            infeasible += 1
            draw += 1
            continue
        graph = build_graph(topo, params.channel, settings)
        rng = np.random.default_rng([cfg.seed, SPLITS[split], draw, 1])
        nbs = [sample_neighborhood(graph, k, s1, s2, rng, settings.second_hop_per_node)
               for k in graph.spv_nodes]
        records.append(Record(len(records), draw, topo, graph, nbs, labels, res.choice, res.objective_true))
        draw += 1
    return records, infeasible


def make_dataset(cfg: ExperimentConfig, out_dir) -> dict:
    """Write ``<split>.jsonl`` files plus ``manifest.json`` into ``out_dir``."""
    out_dir = Path(out_dir)
    t0 = time.perf_counter()
    manifest = {"schema": "thzjcs.dataset/1", "config_hash": cfg.hash(), "L": cfg.n_targets,
                "counts": list(cfg.counts), "splits": {}}
    with _Staging(out_dir) as tmp:
        write_atomic(tmp / "config.json", _config_doc(cfg))
        for split, n in (("train", cfg.data.n_train), ("test", cfg.data.n_test),
                         ("validate", cfg.data.n_validate)):
            records, infeasible = generate_split(cfg, split, n)
            text = "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in records)
            write_atomic(tmp / f"{split}.jsonl", text)
            manifest["splits"][split] = {"file": f"{split}.jsonl", "records": len(records),
                                         "infeasible_skipped": infeasible}
            log.info("%s: %d records, %d infeasible topologies skipped", split, len(records), infeasible)
        write_atomic(tmp / "manifest.json", dumps(manifest))
    log.info("dataset written to %s in %.1f s", out_dir, time.perf_counter() - t0)
    return manifest


def load_split(dataset_dir, split: str) -> list[Record]:
    path = Path(dataset_dir) / f"{split}.jsonl"
    with path.open(encoding="utf-8") as fh:
        return [Record.from_dict(json.loads(line)) for line in fh if line.strip()]


def load_manifest(dataset_dir) -> dict:
    return json.loads((Path(dataset_dir) / "manifest.json").read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# training


def model_name(mode: Mode, embedding_dim: int | None = None) -> str:
    return mode.value if embedding_dim is None else f"{mode.value}_d{embedding_dim}"


def smoothed(losses, window: int = 500) -> np.ndarray:
    """Trailing moving average; the first entries average what is available."""
    x = np.asarray(losses, dtype=float)
    c = np.cumsum(np.insert(x, 0, 0.0))
    idx = np.arange(1, len(x) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def _check_L(cfg: ExperimentConfig, dataset_dir):
    L = load_manifest(dataset_dir)["L"]
    if L != cfg.n_targets:
        raise gnn.ShapeError(f"dataset has L={L} targets per topology, config expects "
                             f"L={cfg.n_targets} (data.counts={list(cfg.counts)})")
    return L


def train_models(cfg: ExperimentConfig, dataset_dir, out_dir, modes=None, embedding_dims=None) -> dict:
    """Train one model per (mode, embedding_dim); writes checkpoints and loss CSVs."""
    L = _check_L(cfg, dataset_dir)
    train = [s for r in load_split(dataset_dir, "train") for s in r.samples()]
    validate = [s for r in load_split(dataset_dir, "validate") for s in r.samples()]
    if modes is None:
        modes = [Mode.HETEROGENEOUS] + ([Mode.HOMOGENEOUS] if cfg.gnn.train_homogeneous else [])
    dims = embedding_dims or [None]
    h = cfg.hash()
    summary = {"schema": "thzjcs.train_summary/1", "config_hash": h, "L": L, "models": {}}
    out_dir = Path(out_dir)
    with _Staging(out_dir) as tmp:
        write_atomic(tmp / "config.json", _config_doc(cfg))
        for mode in modes:
            for dim in dims:
                name = model_name(mode, dim)
                hyper = cfg.hyper(mode, dim)
                # the same init/batch streams for every mode keeps comparisons paired
                init_rng = np.random.default_rng([cfg.seed, 10, hyper.embedding_dim])
                model = gnn.init_model(L, hyper, init_rng, seed=cfg.seed)
                t0 = time.perf_counter()
                res = gnn.train(model, train, hyper, np.random.default_rng([cfg.seed, 11]),
                                progress=lambda it, loss, n=name: log.info("%s it %d loss %.4f", n, it, loss),
                                validation=validate if cfg.gnn.select_by_validation else None,
                                validate_every=cfg.gnn.validate_every)
                log.info("%s trained in %.1f s, checkpoint from iteration %d",
                         name, time.perf_counter() - t0, res.selected_iteration)
                write_atomic(tmp / f"model_{name}.json", res.model.to_json() + "\n")
                write_atomic(tmp / f"model_{name}_final.json", res.final_model.to_json() + "\n")
                rows = [(i + 1, _float(v)) for i, v in enumerate(res.losses)]
                write_atomic(tmp / f"loss_{name}.csv", csv_text(("iteration", "loss"), rows, h))
                if res.validation:
                    rows = [(i, _float(v)) for i, v in res.validation]
                    write_atomic(tmp / f"validation_{name}.csv", csv_text(("iteration", "loss"), rows, h))
                sm = smoothed(res.losses)
                summary["models"][name] = {
                    "mode": mode.value, "embedding_dim": hyper.embedding_dim,
                    "checkpoint": f"model_{name}.json", "final_checkpoint": f"model_{name}_final.json",
                    "loss_csv": f"loss_{name}.csv",
                    "first_loss": res.losses[0], "final_loss": res.losses[-1],
                    "final_smoothed_loss": float(sm[-1]),
                    "selected_iteration": res.selected_iteration,
                    "validation_loss": (gnn.mean_loss(res.model, validate) if validate else None),
                }
        write_atomic(tmp / "train_summary.json", dumps(summary))
    return summary


def load_model(models_dir, name: str) -> GnnModel:
    path = Path(models_dir) / f"model_{name}.json"
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint {path}; run `thzjcs train` first")
    return GnnModel.from_dict(json.loads(path.read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# evaluation


def subset_accuracy(pred_labels, oracle_labels) -> tuple[float, float]:
    """(fraction of SPVs whose whole label row matches, fraction of matching label entries)."""
    P = np.asarray(pred_labels)
    Z = np.asarray(oracle_labels)
    rows = np.all(P == Z, axis=1)
    return float(rows.mean()), float((P == Z).mean())


def bootstrap_ci(values, rng: np.random.Generator, resamples: int = BOOTSTRAP_RESAMPLES,
                 level: float = 0.95) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    if len(v) == 0:
        return float("nan"), float("nan")
    idx = rng.integers(0, len(v), size=(resamples, len(v)))
    means = v[idx].mean(axis=1)
    lo, hi = np.quantile(means, [(1 - level) / 2, (1 + level) / 2])
    return float(lo), float(hi)


@dataclass
class Outcome:
    """One scheme on one instance; infeasible decisions score zero sum rate."""

    scheme: str
    index: int
    assignment: Assignment | None
    objective: float
    feasible: bool

    @property
    def sum_rate(self) -> float:
        return self.objective if self.feasible else 0.0


def _outcome(scheme, rec: Record, res) -> Outcome:
    return Outcome(scheme, rec.index, res.assignment, res.objective_true, res.feasible)


def evaluate_records(cfg: ExperimentConfig, records: list[Record], models: dict[str, GnnModel]) -> list[Outcome]:
    """Run every available scheme on every record; ``models`` maps scheme -> model."""
    params, settings = cfg.system_params(), cfg.graph_settings()
    out = []
    for rec in records:
        a = Assignment.from_choice(rec.oracle_choice, *rec.topology.counts)
        out.append(Outcome("baseline_a", rec.index, a, rec.oracle_objective, True))
        for scheme, model in models.items():
            # identical sampling stream for every learned scheme on a record
            rng = np.random.default_rng([cfg.seed, 20, rec.index])
            res, _ = decide(rec.topology, model, rng, params, settings)
            out.append(_outcome(scheme, rec, res))
        out.append(_outcome("baseline_c", rec, baseline_location(rec.topology, params)))
    return out


def summarize(cfg: ExperimentConfig, records: list[Record], outcomes: list[Outcome]) -> list[dict]:
    by_index = {r.index: r for r in records}
    oracle = {o.index: o.sum_rate for o in outcomes if o.scheme == "baseline_a"}
    rows = []
    schemes = [s for s in SCHEMES if any(o.scheme == s for o in outcomes)]
    for scheme in schemes:
        outs = sorted((o for o in outcomes if o.scheme == scheme), key=lambda o: o.index)
        rates = np.array([o.sum_rate for o in outs])
        opt = np.array([oracle[o.index] for o in outs])
        ratios = rates / opt
        accs = []
        for o in outs:
            z = by_index[o.index].labels
            pred = np.zeros_like(z) if o.assignment is None else labels_from_assignment(o.assignment)
            accs.append(subset_accuracy(pred, z))
        accs = np.array(accs) if accs else np.zeros((0, 2))
        lo, hi = bootstrap_ci(ratios, np.random.default_rng([cfg.seed, 30, SCHEMES.index(scheme)]))
        rows.append({
            "scheme": scheme,
            "n_instances": len(outs),
            "sum_rate_mean_bps": float(rates.mean()),
            "ratio_of_means": float(rates.mean() / opt.mean()),
            "ratio_mean": float(ratios.mean()),
            "ratio_ci_low": lo,
            "ratio_ci_high": hi,
            "subset_accuracy": float(accs[:, 0].mean()),
            "per_label_accuracy": float(accs[:, 1].mean()),
            "feasibility_rate": float(np.mean([o.feasible for o in outs])),
        })
    return rows


def _row_values(row: dict) -> list:
    return [_float(row[f]) if isinstance(row[f], float) else row[f] for f in METRIC_FIELDS]


def evaluate_models(cfg: ExperimentConfig, dataset_dir, models_dir, out_dir, split: str = "test",
                    limit: int | None = None) -> list[dict]:
    """Writes ``metrics.csv`` (one row per scheme), ``instances.csv`` and ``assignments.csv``."""
    _check_L(cfg, dataset_dir)
    records = load_split(dataset_dir, split)[:limit]
    if not records:
        raise ValueError(f"no {split} records in {dataset_dir}")
    models = {"proposed": load_model(models_dir, model_name(Mode.HETEROGENEOUS))}
    if cfg.gnn.train_homogeneous:
        models["baseline_b"] = load_model(models_dir, model_name(Mode.HOMOGENEOUS))
    for m in models.values():
        if m.L != cfg.n_targets:
            raise gnn.ShapeError(f"checkpoint has L={m.L}, config expects L={cfg.n_targets}")
    t0 = time.perf_counter()
    outcomes = evaluate_records(cfg, records, models)
    log.info("evaluated %d instances in %.1f s", len(records), time.perf_counter() - t0)
    rows = summarize(cfg, records, outcomes)
    h = cfg.hash()
    by_index = {r.index: r for r in records}
    inst_rows, assign_rows = [], []
    oracle = {o.index: o.sum_rate for o in outcomes if o.scheme == "baseline_a"}
    for o in outcomes:
        inst_rows.append((o.index, o.scheme, _float(o.sum_rate), int(o.feasible),
                          _float(o.sum_rate / oracle[o.index])))
        if o.assignment is not None:
            for spv, mode, target in assignment_rows(by_index[o.index].topology, o.assignment):
                assign_rows.append((o.index, o.scheme, spv, mode, target))
    out_dir = Path(out_dir)
    with _Staging(out_dir) as tmp:
        write_atomic(tmp / "config.json", _config_doc(cfg))
        write_atomic(tmp / "metrics.csv", csv_text(METRIC_FIELDS, [_row_values(r) for r in rows], h))
        write_atomic(tmp / "instances.csv", csv_text(
            ("index", "scheme", "sum_rate_bps", "feasible", "ratio_to_optimal"), inst_rows, h))
        write_atomic(tmp / "assignments.csv", csv_text(
            ("index", "scheme", "spv_id", "mode", "target_id"), assign_rows, h))
        write_atomic(tmp / "metrics.json", dumps({"schema": "thzjcs.metrics/1", "config_hash": h,
                                                  "split": split, "rows": rows}))
    return rows


# ---------------------------------------------------------------------------
# explanation


def explain(cfg: ExperimentConfig, model: GnnModel, topology: Topology, index: int = 0) -> dict:
    """Geometry and chosen links of one decision, enough to redraw it externally."""
    params, settings = cfg.system_params(), cfg.graph_settings()
    rng = np.random.default_rng([cfg.seed, 20, index])
    res, probs = decide(topology, model, rng, params, settings)
    vs = topology.vehicles
    links = []
    if res.assignment is not None:
        rep = res.report
        for k, m in zip(*np.nonzero(res.assignment.alpha)):
            sinr = float(rep.comm_sinr[k, m])
            links.append({"spv_id": vs[topology.spvs[k]].id, "target_id": vs[topology.comm[m]].id,
                          "mode": "comm", "sinr": sinr, "sinr_db": float(10 * np.log10(sinr)),
                          "rate_bps": float(rep.comm_rate[k, m])})
        for k, n in zip(*np.nonzero(res.assignment.beta)):
            sinr = float(rep.sense_sinr[k, n])
            links.append({"spv_id": vs[topology.spvs[k]].id, "target_id": vs[topology.sense[n]].id,
                          "mode": "sense", "sinr": sinr, "sinr_db": float(10 * np.log10(sinr)),
                          "rate_bps": None, "meets_threshold": bool(rep.sensing_ok[n])})
    links.sort(key=lambda x: (x["spv_id"], x["mode"], x["target_id"]))
    return {
        "schema": "thzjcs.explain/1",
        "config_hash": cfg.hash(),
        "region_m": list(topology.region),
        "vehicles": [{"id": v.id, "role": v.role.value, "position_m": list(v.position)} for v in vs],
        "links": links,
        "objective_bps": res.objective_true,
        "feasible": res.feasible,
        "probabilities": probs.tolist(),
        "min_sensing_sinr": params.sensing.min_sensing_sinr,
    }


# ---------------------------------------------------------------------------
# sweeps

SWEEP_AXES = ("spv", "targets", "embedding")


def _parse_point(axis: str, value: str):
    if axis == "targets":
        m, n = value.lower().split("x")
        return int(m), int(n)
    return int(value)


def sweep(cfg: ExperimentConfig, axis: str, values, out_dir) -> list[dict]:
    """Dataset, training and evaluation per sweep point; one table row per scheme and point.

    ``spv`` varies the SPV count, ``targets`` takes ``MxN`` comm x sensing
    counts (one model per L), ``embedding`` retrains on a single dataset
    with each embedding dimension.
    """
    if axis not in SWEEP_AXES:
        raise ValueError(f"axis must be one of {SWEEP_AXES}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = []
    if axis == "embedding":
        dims = [_parse_point(axis, v) for v in values]
        make_dataset(cfg, out_dir / "dataset")
        train_models(cfg, out_dir / "dataset", out_dir / "models", [Mode.HETEROGENEOUS], dims)
        records = load_split(out_dir / "dataset", "test")
        for dim in dims:
            model = load_model(out_dir / "models", model_name(Mode.HETEROGENEOUS, dim))
            rows = summarize(cfg, records, evaluate_records(cfg, records, {"proposed": model}))
            table += [{"axis": axis, "value": str(dim), **r} for r in rows]
    else:
        for raw in values:
            point = _parse_point(axis, str(raw))
            K, M, N = cfg.counts
            counts = [point, M, N] if axis == "spv" else [K, *point]
            sub = config_from_dict({**cfg.to_dict(), "data": {**cfg.to_dict()["data"], "counts": counts}})
            tag = "x".join(str(c) for c in counts)
            make_dataset(sub, out_dir / tag / "dataset")
            train_models(sub, out_dir / tag / "dataset", out_dir / tag / "models")
            rows = evaluate_models(sub, out_dir / tag / "dataset", out_dir / tag / "models", out_dir / tag / "eval")
            table += [{"axis": axis, "value": str(raw), **r} for r in rows]
    header = ("axis", "value") + METRIC_FIELDS
    body = [[r["axis"], r["value"]] + _row_values(r) for r in table]
    write_atomic(out_dir / f"sweep_{axis}.csv", csv_text(header, body, cfg.hash()))
    return table
