"""Two-hop heterogeneous GNN written directly in numpy.

Architecture per SPV k (q = embedding_dim / 4):

    layer I   h1(v) = relu([w1 f_v | w2 a_SC | w3 a_SS | w4 a_I])
    layer II  h2(k) = relu([w5 h1(k) | w6 A_SC | w7 A_SS | w8 A_I])
    head      three affine+relu layers, then an affine map to L+1 logits

``a_R`` is the mean of ``[f_u | g_vu]`` over sampled neighbours u of type R,
``A_R`` the mean of ``[h1(u) | g_ku]`` over first-hop neighbours of type R.
Empty classes aggregate to zeros. In homogeneous mode the three neighbour
blocks of a layer share one matrix (w2, resp. w6) and all aggregate over the
union of neighbour types.

Everything runs on padded batches; gradients are exact and are checked
against central differences in the tests.
"""
from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .hetgraph import EdgeType, HeteroGraph, SampledNeighborhood

log = logging.getLogger(__name__)

N_TYPES = len(EdgeType)
TIED = {"w3": "w2", "w4": "w2", "w7": "w6", "w8": "w6"}


class Mode(str, enum.Enum):
    HETEROGENEOUS = "heterogeneous"
    HOMOGENEOUS = "homogeneous"


class ShapeError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class GnnHyperParams:
    embedding_dim: int = 64
    sample_sizes: tuple[int, int] = (10, 10)
    hop_count: int = 2
    head_layer_sizes: tuple[int, ...] = (32, 64, 64)
    learning_rate: float = 0.7
    batch_size: int = 64
    iterations: int = 20_000
    mode: Mode = Mode.HETEROGENEOUS

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "sample_sizes", tuple(int(s) for s in self.sample_sizes))
        object.__setattr__(self, "head_layer_sizes", tuple(int(s) for s in self.head_layer_sizes))
        if self.embedding_dim <= 0 or self.embedding_dim % 4:
            raise ValueError("embedding_dim must be a positive multiple of 4")
        if self.hop_count != 2:
            raise ValueError("the architecture is fixed at two hops")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.iterations < 1 or self.batch_size < 1:
            raise ValueError("iterations and batch_size must be >= 1")
        if len(self.sample_sizes) != 2 or min(self.sample_sizes) < 0:
            raise ValueError("sample_sizes must be two non-negative ints")


# ---------------------------------------------------------------------------
# samples


def edge_feature(weight, ref_db: float = -140.0, span_db: float = 40.0):
    """Path gains span ~1e-18..1e-9; feed them to the network on a dB scale."""
    return (10.0 * np.log10(weight) - ref_db) / span_db


@dataclass(frozen=True)
class TrainingSample:
    """Fixed-size view of one SPV's sampled neighbourhood plus its label."""

    source: int
    self_feat: np.ndarray  # L
    self_sum: np.ndarray   # 3 x (L+1): per-type sums of [f_u | g]
    self_cnt: np.ndarray   # 3
    hop_feat: np.ndarray   # n1 x L
    hop_sum: np.ndarray    # n1 x 3 x (L+1)
    hop_cnt: np.ndarray    # n1 x 3
    hop_weight: np.ndarray  # n1, transformed g_{k v'}
    hop_type: np.ndarray   # n1, EdgeType of k -> v'
    label: np.ndarray      # L+1

    @property
    def n_targets(self) -> int:
        return len(self.self_feat)


def make_sample(graph: HeteroGraph, nb: SampledNeighborhood, label=None) -> TrainingSample:
    L = graph.n_targets
    feats = graph.features

    def typed_sum(neigh):
        s = np.zeros((N_TYPES, L + 1))
        c = np.zeros(N_TYPES)
        for u in neigh:
            s[u.type, :L] += feats[u.node]
            s[u.type, L] += edge_feature(u.weight)
            c[u.type] += 1
        return s, c

    self_sum, self_cnt = typed_sum(nb.first_hop)
    n1 = len(nb.first_hop)
    hop_sum = np.zeros((n1, N_TYPES, L + 1))
    hop_cnt = np.zeros((n1, N_TYPES))
    for j, hop in enumerate(nb.second_hop):
        hop_sum[j], hop_cnt[j] = typed_sum(hop)
    if label is None:
        label = np.zeros(L + 1)
    label = np.asarray(label, dtype=float)
    if label.shape != (L + 1,):
        raise ShapeError(f"label must have length {L + 1}")
    return TrainingSample(
        source=nb.source,
        self_feat=feats[nb.source].astype(float),
        self_sum=self_sum, self_cnt=self_cnt,
        hop_feat=np.array([feats[u.node] for u in nb.first_hop], dtype=float).reshape(n1, L),
        hop_sum=hop_sum, hop_cnt=hop_cnt,
        hop_weight=np.array([edge_feature(u.weight) for u in nb.first_hop], dtype=float),
        hop_type=np.array([int(u.type) for u in nb.first_hop], dtype=int),
        label=label,
    )


def _safe_div(num, cnt):
    return num / np.where(cnt > 0, cnt, 1.0)


class Batch:
    """Padded, pre-aggregated tensors for a list of samples.

    The layer-I aggregates only involve raw features, so they are computed
    once here for both modes.
    """

    def __init__(self, samples: list[TrainingSample], width: int | None = None):
        if not samples:
            raise ShapeError("empty batch")
        L = samples[0].n_targets
        if any(s.n_targets != L for s in samples):
            raise ShapeError("samples disagree on the number of targets")
        B = len(samples)
        S = max([len(s.hop_type) for s in samples] + [width or 0, 1])
        self.L, self.S = L, S
        self.self_feat = np.stack([s.self_feat for s in samples])
        self_sum = np.stack([s.self_sum for s in samples])
        self_cnt = np.stack([s.self_cnt for s in samples])
        self.hop_feat = np.zeros((B, S, L))
        hop_sum = np.zeros((B, S, N_TYPES, L + 1))
        hop_cnt = np.zeros((B, S, N_TYPES))
        self.hop_weight = np.zeros((B, S))
        onehot = np.zeros((B, S, N_TYPES))
        mask = np.zeros((B, S))
        for b, s in enumerate(samples):
            n = len(s.hop_type)
            self.hop_feat[b, :n] = s.hop_feat
            hop_sum[b, :n] = s.hop_sum
            hop_cnt[b, :n] = s.hop_cnt
            self.hop_weight[b, :n] = s.hop_weight
            onehot[b, np.arange(n), s.hop_type] = 1.0
            mask[b, :n] = 1.0
        self.labels = np.stack([s.label for s in samples])
        self.self_agg = _safe_div(self_sum, self_cnt[..., None])
        self.self_all = _safe_div(self_sum.sum(1), self_cnt.sum(1)[:, None])
        self.hop_agg = _safe_div(hop_sum, hop_cnt[..., None])
        self.hop_all = _safe_div(hop_sum.sum(2), hop_cnt.sum(2)[..., None])
        self.coef = _safe_div(onehot, onehot.sum(1, keepdims=True))   # B x S x 3
        self.coef_all = _safe_div(mask, mask.sum(1, keepdims=True))    # B x S

    def __len__(self):
        return len(self.labels)

    def take(self, idx) -> "Batch":
        out = object.__new__(Batch)
        out.L, out.S = self.L, self.S
        for name in ("self_feat", "hop_feat", "hop_weight", "labels", "self_agg", "self_all",
                     "hop_agg", "hop_all", "coef", "coef_all"):
            setattr(out, name, getattr(self, name)[idx])
        return out


# ---------------------------------------------------------------------------
# model


def param_shapes(L: int, hyper: GnnHyperParams) -> dict[str, tuple[int, ...]]:
    lam = hyper.embedding_dim
    q = lam // 4
    shapes = {"w1": (q, L), "w2": (q, L + 1), "w3": (q, L + 1), "w4": (q, L + 1),
              "w5": (q, lam), "w6": (q, lam + 1), "w7": (q, lam + 1), "w8": (q, lam + 1)}
    prev = lam
    for j, width in enumerate(hyper.head_layer_sizes, start=1):
        shapes[f"p{j}"] = (width, prev)
        shapes[f"b{j}"] = (width,)
        prev = width
    shapes["p_out"] = (L + 1, prev)
    shapes["b_out"] = (L + 1,)
    if hyper.mode is Mode.HOMOGENEOUS:
        for name in TIED:
            del shapes[name]
    return shapes


@dataclass
class GnnModel:
    L: int
    hyper: GnnHyperParams
    params: dict[str, np.ndarray]
    seed: int | None = None
    init: str = "uniform(+-1/sqrt(fan_in))"

    def __post_init__(self):
        self.check()

    def check(self):
        want = param_shapes(self.L, self.hyper)
        if set(want) != set(self.params):
            raise ShapeError(f"parameter names {sorted(self.params)} != {sorted(want)}")
        for name, shape in want.items():
            arr = self.params[name]
            if arr.shape != shape:
                raise ShapeError(f"{name}: shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ShapeError(f"{name} has non-finite entries")

    def weight(self, name: str) -> np.ndarray:
        if self.hyper.mode is Mode.HOMOGENEOUS and name in TIED:
            name = TIED[name]
        return self.params[name]

    def copy(self) -> "GnnModel":
        return GnnModel(self.L, self.hyper, {k: v.copy() for k, v in self.params.items()},
                        self.seed, self.init)

    @property
    def head_names(self) -> list[tuple[str, str]]:
        n = len(self.hyper.head_layer_sizes)
        return [(f"p{j}", f"b{j}") for j in range(1, n + 1)]

    def to_dict(self) -> dict:
        hyper = asdict(self.hyper)
        hyper["mode"] = self.hyper.mode.value
        return {
            "schema": "thzjcs.gnn_checkpoint/1",
            "L": self.L,
            "seed": self.seed,
            "init": self.init,
            "hyper": hyper,
            "tied": TIED if self.hyper.mode is Mode.HOMOGENEOUS else {},
            "params": {k: {"shape": list(v.shape), "data": v.tolist()}
                       for k, v in sorted(self.params.items())},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "GnnModel":
        hyper = GnnHyperParams(**d["hyper"])
        params = {}
        for k, v in d["params"].items():
            arr = np.array(v["data"], dtype=float).reshape(v["shape"])
            params[k] = arr
        return cls(int(d["L"]), hyper, params, d.get("seed"), d.get("init", ""))


def init_model(L: int, hyper: GnnHyperParams, rng: np.random.Generator, seed=None) -> GnnModel:
    params = {}
    for name, shape in param_shapes(L, hyper).items():
        if name.startswith("b"):
            fan_in = param_shapes(L, hyper)["p" + name[1:]][1]
        else:
            fan_in = shape[1]
        bound = 1.0 / math.sqrt(fan_in)
        params[name] = rng.uniform(-bound, bound, size=shape)
    return GnnModel(L, hyper, params, seed)


# ---------------------------------------------------------------------------
# forward / backward


def _relu(x):
    return np.maximum(x, 0.0)


def _blocks(model: GnnModel, first: str, rest: tuple[str, str, str]):
    return [model.params[first]] + [model.weight(n) for n in rest]


def _layer_inputs(model, batch):
    """Aggregated neighbour inputs per block for layer I (self and hops)."""
    if model.hyper.mode is Mode.HETEROGENEOUS:
        self_in = [batch.self_agg[:, r] for r in range(N_TYPES)]
        hop_in = [batch.hop_agg[:, :, r] for r in range(N_TYPES)]
    else:
        self_in = [batch.self_all] * N_TYPES
        hop_in = [batch.hop_all] * N_TYPES
    return self_in, hop_in


def _forward(model: GnnModel, batch: Batch):
    W1 = _blocks(model, "w1", ("w2", "w3", "w4"))
    W2 = _blocks(model, "w5", ("w6", "w7", "w8"))
    self_in, hop_in = _layer_inputs(model, batch)

    z1s = np.concatenate([batch.self_feat @ W1[0].T] + [a @ w.T for a, w in zip(self_in, W1[1:])], axis=-1)
    z1h = np.concatenate([batch.hop_feat @ W1[0].T] + [a @ w.T for a, w in zip(hop_in, W1[1:])], axis=-1)
    h1s, h1h = _relu(z1s), _relu(z1h)

    hw = np.concatenate([h1h, batch.hop_weight[..., None]], axis=-1)  # B x S x (lam+1)
    if model.hyper.mode is Mode.HETEROGENEOUS:
        agg2 = [np.einsum("bs,bsd->bd", batch.coef[:, :, r], hw) for r in range(N_TYPES)]
    else:
        agg2 = [np.einsum("bs,bsd->bd", batch.coef_all, hw)] * N_TYPES
    z2 = np.concatenate([h1s @ W2[0].T] + [a @ w.T for a, w in zip(agg2, W2[1:])], axis=-1)
    h2 = _relu(z2)

    acts, pre = [h2], []
    x = h2
    for pn, bn in model.head_names:
        z = x @ model.params[pn].T + model.params[bn]
        pre.append(z)
        x = _relu(z)
        acts.append(x)
    logits = x @ model.params["p_out"].T + model.params["b_out"]
    cache = dict(W1=W1, W2=W2, self_in=self_in, hop_in=hop_in, z1s=z1s, z1h=z1h, h1s=h1s,
                 hw=hw, agg2=agg2, z2=z2, acts=acts, pre=pre)
    return logits, cache


def encode(model: GnnModel, samples) -> np.ndarray:
    """Graph-information vectors h2, shape (batch, embedding_dim)."""
    batch = samples if isinstance(samples, Batch) else Batch(list(samples))
    if batch.L != model.L:
        raise ShapeError(f"samples have L={batch.L}, model expects {model.L}")
    return _forward(model, batch)[1]["acts"][0]


def homogeneous_encode(model: GnnModel, samples) -> np.ndarray:
    if model.hyper.mode is not Mode.HOMOGENEOUS:
        raise ValueError("model is not homogeneous")
    return encode(model, samples)


def head_forward(model: GnnModel, h2: np.ndarray) -> np.ndarray:
    if h2.shape[-1] != model.hyper.embedding_dim:
        raise ShapeError("embedding length mismatch")
    x = h2
    for pn, bn in model.head_names:
        x = _relu(x @ model.params[pn].T + model.params[bn])
    return x @ model.params["p_out"].T + model.params["b_out"]


def forward(model: GnnModel, samples) -> np.ndarray:
    """Logits, shape (batch, L+1)."""
    batch = samples if isinstance(samples, Batch) else Batch(list(samples))
    if batch.L != model.L:
        raise ShapeError(f"samples have L={batch.L}, model expects {model.L}")
    return _forward(model, batch)[0]


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def bce_loss(logits, labels):
    """Summed binary cross entropy on logits, log-sum-exp stable. Sums over the last axis."""
    y = np.asarray(logits, dtype=float)
    z = np.asarray(labels, dtype=float)
    if y.shape != z.shape:
        raise ShapeError("logits and labels differ in shape")
    return np.sum(np.logaddexp(0.0, y) - z * y, axis=-1)


def backward(model: GnnModel, samples) -> tuple[float, dict[str, np.ndarray]]:
    """Mean batch loss and its exact gradient for every parameter."""
    batch = samples if isinstance(samples, Batch) else Batch(list(samples))
    if batch.L != model.L:
        raise ShapeError(f"samples have L={batch.L}, model expects {model.L}")
    B = len(batch)
    logits, c = _forward(model, batch)
    loss = float(np.mean(bce_loss(logits, batch.labels)))
    grads: dict[str, np.ndarray] = {}
    hetero = model.hyper.mode is Mode.HETEROGENEOUS
    q = model.hyper.embedding_dim // 4
    lam = model.hyper.embedding_dim

    dy = (sigmoid(logits) - batch.labels) / B
    x = c["acts"][-1]
    grads["p_out"] = dy.T @ x
    grads["b_out"] = dy.sum(0)
    dx = dy @ model.params["p_out"]
    for li in range(len(model.head_names) - 1, -1, -1):
        pn, bn = model.head_names[li]
        dz = dx * (c["pre"][li] > 0)
        grads[pn] = dz.T @ c["acts"][li]
        grads[bn] = dz.sum(0)
        dx = dz @ model.params[pn]
    dz2 = dx * (c["z2"] > 0)

    # layer II
    d2 = [dz2[:, r * q:(r + 1) * q] for r in range(4)]
    grads["w5"] = d2[0].T @ c["h1s"]
    dh1s = d2[0] @ c["W2"][0]
    names2 = ("w6", "w7", "w8")
    dhw = np.zeros_like(c["hw"])
    if hetero:
        for r in range(N_TYPES):
            grads[names2[r]] = d2[r + 1].T @ c["agg2"][r]
            dA = d2[r + 1] @ c["W2"][r + 1]
            dhw += batch.coef[:, :, r, None] * dA[:, None, :]
    else:
        dsum = d2[1] + d2[2] + d2[3]
        grads["w6"] = dsum.T @ c["agg2"][0]
        dA = dsum @ model.params["w6"]
        dhw += batch.coef_all[:, :, None] * dA[:, None, :]
    dh1h = dhw[..., :lam]

    # layer I, applied to the source and to every first-hop node
    dz1s = dh1s * (c["z1s"] > 0)
    dz1h = dh1h * (c["z1h"] > 0)
    d1s = [dz1s[:, r * q:(r + 1) * q] for r in range(4)]
    d1h = [dz1h[..., r * q:(r + 1) * q] for r in range(4)]
    grads["w1"] = d1s[0].T @ batch.self_feat + np.einsum("bsq,bsl->ql", d1h[0], batch.hop_feat)
    names1 = ("w2", "w3", "w4")
    if hetero:
        for r in range(N_TYPES):
            grads[names1[r]] = (d1s[r + 1].T @ c["self_in"][r]
                                + np.einsum("bsq,bsl->ql", d1h[r + 1], c["hop_in"][r]))
    else:
        grads["w2"] = ((d1s[1] + d1s[2] + d1s[3]).T @ batch.self_all
                       + np.einsum("bsq,bsl->ql", d1h[1] + d1h[2] + d1h[3], batch.hop_all))
    return loss, grads


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    """``model`` is the selected checkpoint; ``final_model`` the last iterate.

    Without validation data the two are the same object.
    """

    model: GnnModel
    losses: list[float] = field(default_factory=list)
    final_model: GnnModel | None = None
    validation: list[tuple[int, float]] = field(default_factory=list)
    selected_iteration: int = 0


def mean_loss(model: GnnModel, data) -> float:
    batch = data if isinstance(data, Batch) else Batch(list(data))
    return float(np.mean(bce_loss(forward(model, batch), batch.labels)))


def train(model: GnnModel, dataset, hyper: GnnHyperParams | None = None,
          rng: np.random.Generator | None = None, progress=None,
          validation=None, validate_every: int = 500) -> TrainResult:
    """Mini-batch SGD; each iteration draws a batch with replacement.

    The loss trace holds the mean batch loss before each update. With
    ``validation`` samples the mean validation loss is measured every
    ``validate_every`` iterations (and after the last one), and the
    parameters with the lowest value are returned as ``model``; all T
    iterations run regardless.
    """
    hyper = hyper or model.hyper
    rng = rng if rng is not None else np.random.default_rng(0)
    data = dataset if isinstance(dataset, Batch) else Batch(list(dataset))
    if len(data) == 0:
        raise ValueError("empty dataset")
    if data.L != model.L:
        raise ShapeError(f"dataset L={data.L} but model L={model.L}")
    val = None
    if validation is not None and len(validation):
        val = validation if isinstance(validation, Batch) else Batch(list(validation))
        if val.L != model.L:
            raise ShapeError(f"validation L={val.L} but model L={model.L}")
    model = model.copy()
    losses, val_trace = [], []
    best, best_loss, best_it = model, math.inf, 0
    eta = hyper.learning_rate
    for it in range(hyper.iterations):
        idx = rng.integers(0, len(data), size=hyper.batch_size)
        loss, grads = backward(model, data.take(idx))
        if not math.isfinite(loss):
            raise DivergenceError(f"non-finite loss {loss!r} at iteration {it + 1}")
        losses.append(loss)
        for name, g in grads.items():
            model.params[name] -= eta * g
        done = it + 1
        if val is not None and (done % validate_every == 0 or done == hyper.iterations):
            v = mean_loss(model, val)
            val_trace.append((done, v))
            if v < best_loss:
                best, best_loss, best_it = model.copy(), v, done
        if progress and done % 1000 == 0:
            progress(done, loss)
    if val is None:
        return TrainResult(model, losses, model, [], hyper.iterations)
    return TrainResult(best, losses, model, val_trace, best_it)
