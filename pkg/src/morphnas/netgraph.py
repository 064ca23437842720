"""Network phenotype: a DAG of layer nodes with their parameters.

A graph owns its weights. Node ids are strings; the fixed nodes of the
initial model have readable names and every node created by a mutation is
named after that mutation's global id, so replaying the same history always
reproduces the same ids.
"""

from __future__ import annotations

import copy
import io
import json
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import tensor as T
from .tensor import BnParams, ConvParams, SgdrSchedule, ShapeError

KINDS = ("input", "conv", "maxpool", "gap", "head", "concat", "add")
FORMAT_VERSION = 1
_MAGIC = b"MNET"


class GraphError(ValueError):
    """Structural problem with a network graph."""


class FormatError(ValueError):
    """Malformed or incompatible network document."""


@dataclass
class HeadParams:
    w: np.ndarray  # (channels, classes)
    b: np.ndarray

    def copy(self) -> "HeadParams":
        return HeadParams(self.w.copy(), self.b.copy())


@dataclass
class LayerNode:
    id: str
    kind: str
    inputs: list[str] = field(default_factory=list)
    block: int | None = None
    conv: ConvParams | None = None
    bn: BnParams | None = None
    head: HeadParams | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise GraphError(f"unknown layer kind {self.kind!r}")

    @property
    def out_channels(self) -> int | None:
        if self.kind == "conv":
            return self.conv.filters
        return None

    def param_arrays(self) -> dict[str, np.ndarray]:
        if self.kind == "conv":
            bn = self.bn
            return {
                "w": self.conv.w,
                "gamma": bn.gamma,
                "beta": bn.beta,
                "running_mean": bn.running_mean,
                "running_var": bn.running_var,
            }
        if self.kind == "head":
            return {"w": self.head.w, "b": self.head.b}
        return {}


@dataclass
class NetworkGraph:
    nodes: dict[str, LayerNode]
    input_shape: tuple[int, int, int]
    dtype: np.dtype = np.dtype(np.float32)
    bn_momentum: float = T.BN_MOMENTUM

    # -- structure -----------------------------------------------------------

    def copy(self) -> "NetworkGraph":
        return copy.deepcopy(self)

    def consumers(self, node_id: str) -> list[str]:
        return [n.id for n in self.nodes.values() if node_id in n.inputs]

    def edges(self) -> list[tuple[str, str]]:
        return [(src, n.id) for n in self.topo_order() for src in n.inputs]

    @property
    def input_id(self) -> str:
        ids = [n.id for n in self.nodes.values() if n.kind == "input"]
        if len(ids) != 1:
            raise GraphError(f"graph must have exactly one input node, found {len(ids)}")
        return ids[0]

    @property
    def head_id(self) -> str:
        ids = [n.id for n in self.nodes.values() if n.kind == "head"]
        if len(ids) != 1:
            raise GraphError(f"graph must have exactly one head node, found {len(ids)}")
        return ids[0]

    @property
    def num_classes(self) -> int:
        return self.nodes[self.head_id].head.w.shape[1]

    def blocks(self) -> list[list[str]]:
        """Node ids of each evolutionary block, in topological order."""
        count = max((n.block for n in self.nodes.values() if n.block is not None), default=-1) + 1
        out: list[list[str]] = [[] for _ in range(count)]
        for n in self.topo_order():
            if n.block is not None:
                out[n.block].append(n.id)
        return out

    def topo_order(self) -> list[LayerNode]:
        """Kahn's algorithm; ties resolved by node insertion order."""
        indeg = {nid: 0 for nid in self.nodes}
        for n in self.nodes.values():
            for src in n.inputs:
                if src not in self.nodes:
                    raise GraphError(f"node {n.id!r} reads missing node {src!r}")
                indeg[n.id] += 1
        users: dict[str, list[str]] = {nid: [] for nid in self.nodes}
        for n in self.nodes.values():
            for src in n.inputs:
                users[src].append(n.id)
        position = {nid: i for i, nid in enumerate(self.nodes)}
        ready = sorted((nid for nid, d in indeg.items() if d == 0), key=position.get)
        order = []
        while ready:
            nid = ready.pop(0)
            order.append(self.nodes[nid])
            for u in users[nid]:
                indeg[u] -= 1
                if indeg[u] == 0:
                    ready.append(u)
            ready.sort(key=position.get)
        if len(order) != len(self.nodes):
            raise GraphError("graph contains a cycle")
        return order

    def param_count(self) -> int:
        """Trainable parameters: conv weights, BN gamma/beta, head weights and bias."""
        total = 0
        for n in self.nodes.values():
            if n.kind == "conv":
                total += n.conv.w.size + n.bn.gamma.size + n.bn.beta.size
            elif n.kind == "head":
                total += n.head.w.size + n.head.b.size
        return total

    def validate(self) -> dict[str, tuple[int, ...]]:
        """Check the single-input/single-head rule and run shape inference."""
        _ = self.input_id
        _ = self.head_id
        return infer_shapes(self)

    def astype(self, dtype) -> "NetworkGraph":
        g = self.copy()
        g.dtype = np.dtype(dtype)
        for n in g.nodes.values():
            if n.conv is not None:
                n.conv.w = n.conv.w.astype(dtype)
            if n.bn is not None:
                for name in ("gamma", "beta", "running_mean", "running_var"):
                    setattr(n.bn, name, getattr(n.bn, name).astype(dtype))
            if n.head is not None:
                n.head.w = n.head.w.astype(dtype)
                n.head.b = n.head.b.astype(dtype)
        return g


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def conv_node(
    node_id: str,
    src: str,
    c: int,
    f: int,
    rng: np.random.Generator,
    dtype,
    block: int | None = None,
    k: int = 3,
) -> LayerNode:
    w = he_normal(rng, (k, k, c, f), k * k * c, dtype)
    bn = BnParams(
        gamma=np.ones(f, dtype),
        beta=np.zeros(f, dtype),
        running_mean=np.zeros(f, dtype),
        running_var=np.ones(f, dtype),
    )
    return LayerNode(node_id, "conv", [src], block=block, conv=ConvParams(w), bn=bn)


def build_initial_model(
    input_shape: tuple[int, int, int] = (32, 32, 3),
    classes: int = 10,
    stem: int = 64,
    block: int = 128,
    final: int = 256,
    seed: int = 0,
    dtype=np.float32,
) -> NetworkGraph:
    """Stem conv, three single-conv evolutionary blocks separated by two
    max-pools, a final conv, global average pooling and a softmax head.

    With the default widths the model has 669,258 trainable parameters.
    """
    for name, v in (("stem", stem), ("block", block), ("final", final), ("classes", classes)):
        if int(v) != v or v <= 0:
            raise ValueError(f"{name} must be a positive integer, got {v!r}")
    h, w, c = input_shape
    if min(h, w, c) <= 0:
        raise ValueError(f"invalid input shape {input_shape}")
    dtype = np.dtype(dtype)
    rng = np.random.default_rng(seed)
    nodes = [
        LayerNode("input", "input"),
        conv_node("stem", "input", c, stem, rng, dtype),
        conv_node("b0.conv", "stem", stem, block, rng, dtype, block=0),
        LayerNode("pool0", "maxpool", ["b0.conv"]),
        conv_node("b1.conv", "pool0", block, block, rng, dtype, block=1),
        LayerNode("pool1", "maxpool", ["b1.conv"]),
        conv_node("b2.conv", "pool1", block, block, rng, dtype, block=2),
        conv_node("final", "b2.conv", block, final, rng, dtype),
        LayerNode("gap", "gap", ["final"]),
        LayerNode(
            "head",
            "head",
            ["gap"],
            head=HeadParams(
                w=he_normal(rng, (final, classes), final, dtype),
                b=np.zeros(classes, dtype),
            ),
        ),
    ]
    g = NetworkGraph({n.id: n for n in nodes}, tuple(input_shape), dtype)
    g.validate()
    return g


# ---------------------------------------------------------------------------
# shapes
# ---------------------------------------------------------------------------


def infer_shapes(g: NetworkGraph, input_shape: tuple[int, int, int] | None = None) -> dict[str, tuple]:
    """Per-node output shapes (H, W, C); the head reports (classes,)."""
    shapes: dict[str, tuple] = {}
    for n in g.topo_order():
        ins = [shapes[s] for s in n.inputs]
        if n.kind == "input":
            shapes[n.id] = tuple(input_shape or g.input_shape)
        elif n.kind == "conv":
            (s,) = ins
            if s[2] != n.conv.in_channels:
                raise ShapeError(
                    f"{n.id}: input shape {s} vs conv weights {n.conv.w.shape}"
                )
            if n.bn.channels != n.conv.filters:
                raise ShapeError(f"{n.id}: {n.bn.channels} BN channels vs {n.conv.filters} filters")
            shapes[n.id] = (s[0], s[1], n.conv.filters)
        elif n.kind == "maxpool":
            (s,) = ins
            shapes[n.id] = ((s[0] + 1) // 2, (s[1] + 1) // 2, s[2])
        elif n.kind == "gap":
            (s,) = ins
            shapes[n.id] = (1, 1, s[2])
        elif n.kind == "head":
            (s,) = ins
            if s[:2] != (1, 1) or s[2] != n.head.w.shape[0]:
                raise ShapeError(f"{n.id}: input shape {s} vs head weights {n.head.w.shape}")
            shapes[n.id] = (n.head.w.shape[1],)
        elif n.kind == "concat":
            if len(ins) < 2:
                raise GraphError(f"{n.id}: concat needs at least two inputs")
            if len({s[:2] for s in ins}) != 1:
                raise ShapeError(f"{n.id}: concat inputs disagree spatially: {ins}")
            shapes[n.id] = (ins[0][0], ins[0][1], sum(s[2] for s in ins))
        elif n.kind == "add":
            if len(ins) < 2:
                raise GraphError(f"{n.id}: add needs at least two inputs")
            if len(set(ins)) != 1:
                raise ShapeError(f"{n.id}: add inputs disagree: {ins}")
            shapes[n.id] = ins[0]
    return shapes


# ---------------------------------------------------------------------------
# execution
# ---------------------------------------------------------------------------


def forward(g: NetworkGraph, x: np.ndarray, mode: str = "infer", trace: dict | None = None) -> np.ndarray:
    """Run the network and return logits of shape (N, classes).

    In train mode BN running statistics are updated in place and, if
    ``trace`` is given, it is filled with everything :func:`backward` needs.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    x = np.asarray(x, dtype=g.dtype)
    acts: dict[str, np.ndarray] = {}
    order = g.topo_order()
    remaining = {n.id: 0 for n in order}
    for n in order:
        for s in n.inputs:
            remaining[s] += 1
    keep = trace is not None
    for n in order:
        ins = [acts[s] for s in n.inputs]
        if n.kind == "input":
            out = x
        elif n.kind == "conv":
            z, cols = T.conv2d_forward(ins[0], n.conv.w, return_cols=True)
            y, stats = T.batchnorm_forward(z, n.bn, mode, g.bn_momentum)
            if stats is not None:
                n.bn.running_mean = stats.running_mean
                n.bn.running_var = stats.running_var
            out = T.relu(y)
            if keep:
                trace[n.id] = (ins[0], cols, stats, y)
        elif n.kind == "maxpool":
            out, idx = T.maxpool2_forward(ins[0])
            if keep:
                trace[n.id] = (ins[0].shape, idx)
        elif n.kind == "gap":
            out = T.global_avg_pool(ins[0])
            if keep:
                trace[n.id] = ins[0].shape
        elif n.kind == "head":
            flat = ins[0].reshape(ins[0].shape[0], -1)
            out = T.linear_forward(flat, n.head.w, n.head.b)
            if keep:
                trace[n.id] = (ins[0].shape, flat)
        elif n.kind == "concat":
            out = np.concatenate(ins, axis=3)
            if keep:
                trace[n.id] = [a.shape[3] for a in ins]
        elif n.kind == "add":
            out = ins[0]
            for a in ins[1:]:
                out = out + a
        acts[n.id] = out
        if not keep:
            for s in n.inputs:
                remaining[s] -= 1
                if remaining[s] == 0:
                    del acts[s]
    return acts[g.head_id]


def backward(g: NetworkGraph, trace: dict, grad_logits: np.ndarray) -> dict[tuple[str, str], np.ndarray]:
    """Parameter gradients keyed by (node id, parameter name)."""
    grads: dict[tuple[str, str], np.ndarray] = {}
    upstream: dict[str, np.ndarray] = {g.head_id: grad_logits}

    def push(node_id: str, grad: np.ndarray) -> None:
        if node_id in upstream:
            upstream[node_id] = upstream[node_id] + grad
        else:
            upstream[node_id] = grad

    for n in reversed(g.topo_order()):
        if n.id not in upstream or n.kind == "input":
            continue
        gout = upstream.pop(n.id)
        if n.kind == "head":
            shape, flat = trace[n.id]
            gx, gw, gb = T.linear_backward(flat, n.head.w, gout)
            grads[(n.id, "w")] = gw
            grads[(n.id, "b")] = gb
            push(n.inputs[0], gx.reshape(shape))
        elif n.kind == "gap":
            push(n.inputs[0], T.global_avg_pool_backward(trace[n.id], gout))
        elif n.kind == "maxpool":
            shape, idx = trace[n.id]
            push(n.inputs[0], T.maxpool2_backward(shape, idx, gout))
        elif n.kind == "concat":
            start = 0
            for src, width in zip(n.inputs, trace[n.id]):
                push(src, gout[..., start : start + width])
                start += width
        elif n.kind == "add":
            for src in n.inputs:
                push(src, gout)
        elif n.kind == "conv":
            x, cols, stats, y = trace[n.id]
            gy = T.relu_backward(y, gout)
            gz, ggamma, gbeta = T.batchnorm_backward(gy, n.bn, stats)
            gx, gw = T.conv2d_backward(x, n.conv.w, gz, cols)
            grads[(n.id, "w")] = gw
            grads[(n.id, "gamma")] = ggamma
            grads[(n.id, "beta")] = gbeta
            if g.nodes[n.inputs[0]].kind != "input":
                push(n.inputs[0], gx)
    return grads


def apply_gradients(g: NetworkGraph, grads: dict, lr: float, weight_decay: float) -> None:
    for (nid, name), grad in grads.items():
        n = g.nodes[nid]
        if n.kind == "conv":
            if name == "w":
                n.conv.w = T.sgd_step(n.conv.w, grad, lr, weight_decay)
            else:
                setattr(n.bn, name, T.sgd_step(getattr(n.bn, name), grad, lr))
        elif n.kind == "head":
            setattr(n.head, name, T.sgd_step(getattr(n.head, name), grad, lr))


# ---------------------------------------------------------------------------
# training and evaluation
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W, C)
    labels: np.ndarray  # (N,) int

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ShapeError(f"images must be (N, H, W, C), got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ShapeError(f"{self.labels.shape[0]} labels for {self.images.shape[0]} images")

    def __len__(self) -> int:
        return self.labels.shape[0]


@dataclass
class TrainConfig:
    batch_size: int = 32
    schedule: SgdrSchedule = field(default_factory=SgdrSchedule)
    weight_decay: float = 1e-4
    restart_per_burst: bool = False
    check_finite: bool = False


@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)


def train_epochs(
    g: NetworkGraph,
    data: Dataset,
    epochs: int,
    config: TrainConfig | None = None,
    epoch_offset: float = 0,
    rng: np.random.Generator | None = None,
    augment: Callable[[np.ndarray, np.random.Generator], np.ndarray] | None = None,
) -> TrainLog:
    """Mini-batch SGD under the SGDR schedule, in place.

    The learning rate is evaluated at the fractional epoch position of every
    batch, starting from ``epoch_offset`` (ignored when the config restarts
    the schedule per burst).
    """
    config = config or TrainConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    log = TrainLog()
    if epochs <= 0:
        return log
    n = len(data)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    bs = config.batch_size
    nb = (n + bs - 1) // bs
    offset = 0 if config.restart_per_burst else epoch_offset
    for epoch in range(epochs):
        perm = rng.permutation(n)
        total = 0.0
        for b in range(nb):
            idx = perm[b * bs : (b + 1) * bs]
            xb = data.images[idx]
            if augment is not None:
                xb = augment(xb, rng)
            lr = T.sgdr_lr(config.schedule, offset + epoch + b / nb)
            trace: dict = {}
            logits = forward(g, xb, "train", trace)
            loss, grad = T.softmax_cross_entropy(logits, data.labels[idx])
            if config.check_finite:
                T.check_finite(logits, "logits")
            grads = backward(g, trace, grad)
            apply_gradients(g, grads, lr, config.weight_decay)
            log.losses.append(loss)
            log.lrs.append(lr)
            total += loss * len(idx)
        log.epoch_losses.append(total / n)
    return log


def predict(g: NetworkGraph, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = [forward(g, images[i : i + batch_size], "infer") for i in range(0, len(images), batch_size)]
    return np.concatenate(out, axis=0)


def evaluate(g: NetworkGraph, data: Dataset, batch_size: int = 256) -> float:
    """Classification accuracy in infer mode."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    logits = predict(g, data.images, batch_size)
    return float((logits.argmax(axis=1) == data.labels).mean())


# ---------------------------------------------------------------------------
# structure signatures
# ---------------------------------------------------------------------------


def topology_signature(g: NetworkGraph) -> tuple:
    """Id-free canonical description; equal signatures mean isomorphic graphs
    (with matching parameter shapes and concat/add operand order)."""
    order = g.topo_order()
    pos = {n.id: i for i, n in enumerate(order)}
    sig = []
    for n in order:
        shapes = tuple((k, v.shape) for k, v in n.param_arrays().items())
        sig.append((n.kind, tuple(pos[s] for s in n.inputs), n.block, shapes))
    return tuple(sig)


# ---------------------------------------------------------------------------
# serialisation
# ---------------------------------------------------------------------------


def encode_network(g: NetworkGraph) -> bytes:
    """JSON header plus a raw little-endian weight blob."""
    shapes = infer_shapes(g)
    blob = io.BytesIO()
    le = np.dtype(g.dtype).newbyteorder("<")
    nodes = []
    for n in g.nodes.values():
        params = {}
        for name, arr in n.param_arrays().items():
            data = np.ascontiguousarray(arr, dtype=le).tobytes()
            params[name] = {"offset": blob.tell(), "shape": list(arr.shape)}
            blob.write(data)
        entry = {"id": n.id, "kind": n.kind, "inputs": list(n.inputs), "block": n.block, "params": params}
        if n.bn is not None:
            entry["eps"] = n.bn.eps
        nodes.append(entry)
    header = {
        "format_version": FORMAT_VERSION,
        "dtype": np.dtype(g.dtype).name,
        "input_shape": list(g.input_shape),
        "bn_momentum": g.bn_momentum,
        "nodes": nodes,
        "edges": [list(e) for e in g.edges()],
        "blocks": g.blocks(),
        "shapes": {k: list(v) for k, v in shapes.items()},
        "blob_size": blob.tell(),
    }
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    return _MAGIC + struct.pack("<I", len(hdr)) + hdr + blob.getvalue()


def decode_network(doc: bytes) -> NetworkGraph:
    """Inverse of :func:`encode_network`; any malformation raises FormatError."""
    try:
        return _decode(doc)
    except FormatError:
        raise
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise FormatError(f"malformed network document: {exc!r}") from exc


def _decode(doc: bytes) -> NetworkGraph:
    if len(doc) < 8 or doc[:4] != _MAGIC:
        raise FormatError("not a network document (bad magic)")
    (hlen,) = struct.unpack("<I", doc[4:8])
    if len(doc) < 8 + hlen:
        raise FormatError("truncated network document header")
    try:
        header = json.loads(doc[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt network header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise FormatError(
            f"unsupported format_version {header.get('format_version')!r}, expected {FORMAT_VERSION}"
        )
    blob = doc[8 + hlen :]
    if len(blob) != header["blob_size"]:
        raise FormatError(f"weight blob has {len(blob)} bytes, header declares {header['blob_size']}")
    dtype = np.dtype(header["dtype"])
    le = dtype.newbyteorder("<")

    def read(spec) -> np.ndarray:
        count = int(np.prod(spec["shape"], dtype=np.int64))
        end = spec["offset"] + count * le.itemsize
        if end > len(blob):
            raise FormatError("parameter extends past end of weight blob")
        return np.frombuffer(blob, le, count, spec["offset"]).astype(dtype).reshape(spec["shape"])

    nodes = {}
    for e in header["nodes"]:
        p = e["params"]
        n = LayerNode(e["id"], e["kind"], list(e["inputs"]), e["block"])
        if n.kind == "conv":
            n.conv = ConvParams(read(p["w"]))
            n.bn = BnParams(
                read(p["gamma"]), read(p["beta"]), read(p["running_mean"]), read(p["running_var"]), e["eps"]
            )
        elif n.kind == "head":
            n.head = HeadParams(read(p["w"]), read(p["b"]))
        nodes[n.id] = n
    g = NetworkGraph(nodes, tuple(header["input_shape"]), dtype, header["bn_momentum"])
    g.validate()
    return g


def save_network(g: NetworkGraph, path) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_network(g))


def load_network(path) -> NetworkGraph:
    with open(path, "rb") as fh:
        return decode_network(fh.read())


def iter_conv_nodes(g: NetworkGraph) -> Iterable[LayerNode]:
    return (n for n in g.topo_order() if n.kind == "conv")
