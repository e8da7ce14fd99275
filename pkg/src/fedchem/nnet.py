"""Message-passing network on numpy with hand-written reverse mode.

Gradients are exact with respect to both the flat parameter vector and the
input node-feature matrix (the latter is what virtual adversarial training
perturbs). Everything runs in float64.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .molgraph import FeatureSpec, FeaturizedGraph

PROB_CLAMP = 1e-7
CHECKPOINT_MAGIC = b"FCHEMPRM"


class ShapeMismatch(ValueError):
    pass


class AllLabelsMissing(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class CheckpointFormatError(ValueError):
    pass


@dataclass(frozen=True)
class MpnnConfig:
    node_in: int = FeatureSpec().node_width
    edge_in: int = FeatureSpec().edge_width
    mp_layers: int = 3
    edge_hidden: int = 16
    node_dim: int = 64
    readout: str = "sum"
    head_hidden: int = 64
    task_count: int = 1
    task_type: str = "regression"

    def __post_init__(self):
        dims = (self.node_in, self.edge_in, self.mp_layers, self.edge_hidden,
                self.node_dim, self.head_hidden, self.task_count)
        if min(dims) < 1:
            raise ValueError(f"all MPNN dimensions must be >= 1: {self}")
        if self.readout not in ("sum", "mean"):
            raise ValueError(f"readout must be 'sum' or 'mean', got {self.readout!r}")
        if self.task_type not in ("regression", "classification"):
            raise ValueError(f"unknown task_type {self.task_type!r}")


def param_layout(cfg: MpnnConfig) -> tuple[tuple[str, tuple[int, ...]], ...]:
    D, H = cfg.node_dim, cfg.edge_hidden
    layout = [("embed.W", (cfg.node_in, D)), ("embed.b", (D,))]
    for t in range(cfg.mp_layers):
        layout += [
            (f"mp{t}.msg.W1", (D + cfg.edge_in, H)), (f"mp{t}.msg.b1", (H,)),
            (f"mp{t}.msg.W2", (H, D)), (f"mp{t}.msg.b2", (D,)),
            (f"mp{t}.upd.W1", (2 * D, D)), (f"mp{t}.upd.b1", (D,)),
            (f"mp{t}.upd.W2", (D, D)), (f"mp{t}.upd.b2", (D,)),
        ]
    layout += [
        ("head.W1", (D, cfg.head_hidden)), ("head.b1", (cfg.head_hidden,)),
        ("head.W2", (cfg.head_hidden, cfg.task_count)), ("head.b2", (cfg.task_count,)),
    ]
    return tuple(layout)


@dataclass(frozen=True)
class ParamVector:
    values: np.ndarray
    layout: tuple[tuple[str, tuple[int, ...]], ...]

    def __post_init__(self):
        size = sum(int(np.prod(s)) for _, s in self.layout)
        if self.values.ndim != 1 or self.values.shape[0] != size:
            raise ShapeMismatch(f"layout wants {size} values, got {self.values.shape}")

    def tensors(self) -> dict[str, np.ndarray]:
        """Named reshaped views into ``values`` (no copies)."""
        out, pos = {}, 0
        for name, shape in self.layout:
            n = int(np.prod(shape))
            out[name] = self.values[pos:pos + n].reshape(shape)
            pos += n
        return out

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(np.asarray(values, dtype=np.float64), self.layout)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def __len__(self) -> int:
        return self.values.shape[0]


def init_params(cfg: MpnnConfig, rng: np.random.Generator) -> ParamVector:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases use their weight's fan-in."""
    layout = param_layout(cfg)
    chunks = []
    fan_in = 1
    for name, shape in layout:
        if len(shape) == 2:
            fan_in = shape[0]
        bound = 1.0 / np.sqrt(fan_in)
        chunks.append(rng.uniform(-bound, bound, size=int(np.prod(shape))))
    return ParamVector(np.concatenate(chunks), layout)


@dataclass
class GraphBatch:
    """Disjoint union of featurized graphs."""

    nodes: np.ndarray
    edges: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    node_graph: np.ndarray
    n_graphs: int
    scatter_dst: sp.csr_matrix = field(repr=False)
    scatter_src: sp.csr_matrix = field(repr=False)
    counts: np.ndarray = field(repr=False)

    @classmethod
    def from_graphs(cls, graphs: Sequence[FeaturizedGraph]) -> "GraphBatch":
        sizes = np.array([g.num_nodes for g in graphs], dtype=np.int64)
        offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        nodes = np.concatenate([g.nodes for g in graphs], axis=0)
        edges = np.concatenate([g.edges for g in graphs], axis=0)
        src = np.concatenate([g.src + o for g, o in zip(graphs, offsets)])
        dst = np.concatenate([g.dst + o for g, o in zip(graphs, offsets)])
        node_graph = np.repeat(np.arange(len(graphs)), sizes)
        n, e = nodes.shape[0], edges.shape[0]
        ones = np.ones(e)
        cols = np.arange(e)
        return cls(
            nodes=nodes, edges=edges, src=src, dst=dst, node_graph=node_graph,
            n_graphs=len(graphs),
            scatter_dst=sp.csr_matrix((ones, (dst, cols)), shape=(n, e)),
            scatter_src=sp.csr_matrix((ones, (src, cols)), shape=(n, e)),
            counts=sizes.astype(np.float64),
        )

    @property
    def num_nodes(self) -> int:
        return self.nodes.shape[0]


@dataclass
class Prediction:
    raw: np.ndarray
    task_type: str

    @property
    def probs(self) -> np.ndarray:
        if self.task_type != "classification":
            raise AttributeError("probabilities exist only for classification")
        return sigmoid(self.raw)


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _pool(batch: GraphBatch, v: np.ndarray, readout: str) -> np.ndarray:
    # nodes of one graph are contiguous, so a segment sum is a reduceat
    starts = np.concatenate([[0], np.cumsum(batch.counts[:-1].astype(np.int64))])
    nonempty = batch.counts > 0
    h = np.zeros((batch.n_graphs, v.shape[1]))
    h[nonempty] = np.add.reduceat(v, starts[nonempty], axis=0)
    if readout == "mean":
        h = h / np.maximum(batch.counts, 1.0)[:, None]
    return h


def forward(params: ParamVector, cfg: MpnnConfig, batch: GraphBatch, nodes: np.ndarray | None = None):
    """Return (Prediction, cache). ``nodes`` overrides ``batch.nodes`` (perturbed inputs)."""
    x = batch.nodes if nodes is None else nodes
    if x.shape[1] != cfg.node_in or batch.edges.shape[1] != cfg.edge_in:
        raise ShapeMismatch(
            f"features ({x.shape[1]}, {batch.edges.shape[1]}) vs config ({cfg.node_in}, {cfg.edge_in})"
        )
    if params.layout != param_layout(cfg):
        raise ShapeMismatch("parameter layout does not match MpnnConfig")
    P = params.tensors()
    v = x @ P["embed.W"] + P["embed.b"]
    layers = []
    for t in range(cfg.mp_layers):
        z = np.concatenate([v[batch.src], batch.edges], axis=1)
        pre = z @ P[f"mp{t}.msg.W1"] + P[f"mp{t}.msg.b1"]
        hid = np.maximum(pre, 0.0)
        msg = hid @ P[f"mp{t}.msg.W2"] + P[f"mp{t}.msg.b2"]
        m = batch.scatter_dst @ msg
        u = np.concatenate([v, m], axis=1)
        a = np.tanh(u @ P[f"mp{t}.upd.W1"] + P[f"mp{t}.upd.b1"])
        layers.append((z, pre, hid, u, a))
        v = a @ P[f"mp{t}.upd.W2"] + P[f"mp{t}.upd.b2"]
    h = _pool(batch, v, cfg.readout)
    hpre = h @ P["head.W1"] + P["head.b1"]
    hr = np.maximum(hpre, 0.0)
    out = hr @ P["head.W2"] + P["head.b2"]
    cache = {"x": x, "batch": batch, "layers": layers, "h": h, "hpre": hpre, "hr": hr}
    return Prediction(out, cfg.task_type), cache


def backward(params: ParamVector, cfg: MpnnConfig, cache: dict, dout: np.ndarray):
    """Reverse pass for upstream gradient ``dout`` (n_graphs x task_count).

    Returns (parameter gradient as ParamVector, gradient w.r.t. input node features).
    """
    P = params.tensors()
    grad = ParamVector(np.zeros_like(params.values), params.layout)
    G = grad.tensors()
    batch: GraphBatch = cache["batch"]

    G["head.W2"][...] = cache["hr"].T @ dout
    G["head.b2"][...] = dout.sum(axis=0)
    dhpre = (dout @ P["head.W2"].T) * (cache["hpre"] > 0)
    G["head.W1"][...] = cache["h"].T @ dhpre
    G["head.b1"][...] = dhpre.sum(axis=0)
    dh = dhpre @ P["head.W1"].T
    dv = dh[batch.node_graph]
    if cfg.readout == "mean":
        dv = dv / np.maximum(batch.counts, 1.0)[batch.node_graph][:, None]

    D = cfg.node_dim
    for t in reversed(range(cfg.mp_layers)):
        z, pre, hid, u, a = cache["layers"][t]
        G[f"mp{t}.upd.W2"][...] = a.T @ dv
        G[f"mp{t}.upd.b2"][...] = dv.sum(axis=0)
        dapre = (dv @ P[f"mp{t}.upd.W2"].T) * (1.0 - a * a)
        G[f"mp{t}.upd.W1"][...] = u.T @ dapre
        G[f"mp{t}.upd.b1"][...] = dapre.sum(axis=0)
        du = dapre @ P[f"mp{t}.upd.W1"].T
        dmsg = du[:, D:][batch.dst]
        G[f"mp{t}.msg.W2"][...] = hid.T @ dmsg
        G[f"mp{t}.msg.b2"][...] = dmsg.sum(axis=0)
        dpre = (dmsg @ P[f"mp{t}.msg.W2"].T) * (pre > 0)
        G[f"mp{t}.msg.W1"][...] = z.T @ dpre
        G[f"mp{t}.msg.b1"][...] = dpre.sum(axis=0)
        dz = dpre @ P[f"mp{t}.msg.W1"].T
        dv = du[:, :D] + batch.scatter_src @ dz[:, :D]

    G["embed.W"][...] = cache["x"].T @ dv
    G["embed.b"][...] = dv.sum(axis=0)
    dx = dv @ P["embed.W"].T
    return grad, dx


def relu_margin(cache: dict) -> float:
    """Smallest |pre-activation| over all ReLUs in a forward pass."""
    vals = [np.abs(pre).min() for _, pre, *_ in cache["layers"] if pre.size]
    vals.append(np.abs(cache["hpre"]).min())
    return float(min(vals))


# ---------------------------------------------------------------- losses

def label_losses(raw: np.ndarray, y: np.ndarray, task_type: str) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise loss and its derivative w.r.t. ``raw`` (same shape; unmasked)."""
    if task_type == "regression":
        r = raw - y
        return r * r, 2.0 * r
    # binary cross-entropy on the clamped target-class probability
    s = np.where(y > 0.5, raw, -raw)
    pt = sigmoid(s)
    clamped = np.clip(pt, PROB_CLAMP, 1.0 - PROB_CLAMP)
    inside = (pt > PROB_CLAMP) & (pt < 1.0 - PROB_CLAMP)
    ds = np.where(inside, -(1.0 - pt), 0.0)
    return -np.log(clamped), np.where(y > 0.5, ds, -ds)


def loss(pred: Prediction, y: np.ndarray, mask: np.ndarray) -> float:
    """Mean loss over present labels (BCE for classification, squared error for regression)."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise AllLabelsMissing("every label in the batch is missing")
    ell, _ = label_losses(pred.raw, np.where(mask, y, 0.0), pred.task_type)
    return float(ell[mask].sum() / mask.sum())


def per_sample_loss(ell: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Mean over each sample's present labels (0 for samples with none)."""
    cnt = mask.sum(axis=1)
    return np.where(cnt > 0, (ell * mask).sum(axis=1) / np.maximum(cnt, 1), 0.0)


def check_finite(what: str, arr) -> None:
    if not np.all(np.isfinite(arr)):
        bad = np.size(arr) - np.count_nonzero(np.isfinite(arr))
        raise NonFiniteError(f"{bad} non-finite value(s) in {what}")


# ---------------------------------------------------------------- optimizer

@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-5


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState,
              cfg: AdamConfig = AdamConfig()) -> tuple[np.ndarray, AdamState]:
    """Bias-corrected Adam with coupled (L2) weight decay."""
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ShapeMismatch("params, grads and moments must share a shape")
    b1, b2 = cfg.betas
    g = grads + cfg.weight_decay * params if cfg.weight_decay else grads
    t = state.step + 1
    m = b1 * state.m + (1.0 - b1) * g
    v = b2 * state.v + (1.0 - b2) * g * g
    m_hat = m / (1.0 - b1 ** t)
    v_hat = v / (1.0 - b2 ** t)
    new = params - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return new, AdamState(m, v, t)


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, params: ParamVector, cfg: MpnnConfig, meta: dict | None = None) -> Path:
    """Write the binary parameter file and a ``.json`` sidecar next to it."""
    path = Path(path)
    try:
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<I", len(params)))
            fh.write(params.values.astype("<f8").tobytes())
        sidecar = {
            "layout": [[name, list(shape)] for name, shape in params.layout],
            "config": asdict(cfg),
            "meta": meta or {},
        }
        with open(str(path) + ".json", "w", encoding="utf-8") as fh:
            json.dump(sidecar, fh, sort_keys=True, indent=1)
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def load_checkpoint(path) -> tuple[ParamVector, MpnnConfig, dict]:
    path = Path(path)
    try:
        blob = path.read_bytes()
        with open(str(path) + ".json", encoding="utf-8") as fh:
            sidecar = json.load(fh)
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc}") from exc
    if blob[:8] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {blob[:8]!r}")
    if len(blob) < 12:
        raise CheckpointFormatError(f"{path}: truncated header")
    (count,) = struct.unpack("<I", blob[8:12])
    if len(blob) != 12 + 8 * count:
        raise CheckpointFormatError(f"{path}: expected {count} floats, file has {(len(blob) - 12) / 8}")
    values = np.frombuffer(blob[12:], dtype="<f8").astype(np.float64)
    conf = dict(sidecar["config"])
    cfg = MpnnConfig(**conf)
    layout = tuple((name, tuple(shape)) for name, shape in sidecar["layout"])
    if layout != param_layout(cfg):
        raise CheckpointFormatError(f"{path}: layout does not match stored config")
    return ParamVector(values, layout), cfg, sidecar.get("meta", {})
