"""Function-preserving mutation operators.

Five operators change a network's structure while choosing new weights so
that the student computes the same inference-mode function as the teacher:

* ``widen``    replicate filters of a conv and divide the consumers' input
               slices by the replication count (plus optional noise);
* ``branch``   split a conv's filters into two parallel convs joined by a concat;
* ``identity`` insert a conv initialised to the identity kernel;
* ``shortcut`` insert a zero conv whose output is added to the existing path;
* ``dense``    insert a zero conv whose output is concatenated in front of the
               existing path, zero-extending every downstream consumer.

Operators edit the graph in place. Every mutation is described by a
:class:`MutationRecord` that is sufficient to replay it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .netgraph import LayerNode, NetworkGraph, infer_shapes
from .tensor import BnParams, ConvParams

OPS = ("widen", "branch", "identity", "shortcut", "dense")
_PASS_THROUGH = ("maxpool", "gap", "concat")


class MutationError(ValueError):
    """A mutation cannot be applied at the requested site."""


@dataclass
class MorphConfig:
    noise_max: float = 0.05
    ops: tuple[str, ...] = OPS
    widen_max_fraction: float = 0.5
    kernel: int = 3
    max_retries: int = 20

    def __post_init__(self):
        if not 0 <= self.noise_max < 1:
            raise ValueError(f"noise_max must lie in [0, 1), got {self.noise_max}")
        unknown = set(self.ops) - set(OPS)
        if unknown or not self.ops:
            raise ValueError(f"invalid operator set {self.ops!r}")
        if self.kernel % 2 == 0:
            raise ValueError("inserted kernel size must be odd")
        self.ops = tuple(self.ops)


@dataclass
class WidenPlan:
    """Widen ``target`` from ``f`` to ``f_prime`` filters; ``sources[i]`` is the
    (0-based) filter copied into new slot ``f + i``."""

    target: str
    f: int
    f_prime: int
    sources: list[int]

    def __post_init__(self):
        if self.f_prime < self.f:
            raise MutationError(f"cannot shrink {self.target}: f'={self.f_prime} < f={self.f}")
        if len(self.sources) != self.f_prime - self.f:
            raise MutationError("need one source filter per added filter")
        if any(not 0 <= s < self.f for s in self.sources):
            raise MutationError(f"widen sources must index the original {self.f} filters")

    def mapping(self) -> np.ndarray:
        """The replication map g as 0-based indices (identity on the first f)."""
        return np.concatenate([np.arange(self.f), np.asarray(self.sources, dtype=int)]).astype(int)


@dataclass
class MutationRecord:
    global_id: int
    kind: str
    location: dict
    plan: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "global_id": self.global_id,
            "kind": self.kind,
            "location": self.location,
            "plan": self.plan,
            "seed": self.plan.get("seed"),
        }

    @classmethod
    def from_json(cls, d: dict) -> "MutationRecord":
        loc = dict(d["location"])
        if "edge" in loc:
            loc["edge"] = list(loc["edge"])
        return cls(int(d["global_id"]), d["kind"], loc, dict(d["plan"]))

    def label(self) -> str:
        where = self.location.get("node") or "->".join(self.location.get("edge", []))
        return f"{self.kind}#{self.global_id}@{where}"


# ---------------------------------------------------------------------------
# graph editing helpers
# ---------------------------------------------------------------------------


def _reorder(g: NetworkGraph, anchor: str, new_nodes: list[LayerNode], replace: bool) -> None:
    items = []
    for nid, n in g.nodes.items():
        if nid == anchor:
            if not replace:
                items.append((nid, n))
            items.extend((m.id, m) for m in new_nodes)
        else:
            items.append((nid, n))
    g.nodes = dict(items)


def _rewire(g: NetworkGraph, consumer: str, old: str, new: str) -> None:
    inputs = g.nodes[consumer].inputs
    inputs[inputs.index(old)] = new


def is_post_relu(g: NetworkGraph, node_id: str) -> bool:
    """True if the node's output is an activation that is non-negative by construction."""
    n = g.nodes[node_id]
    if n.kind == "conv":
        return True
    if n.kind in ("maxpool", "concat", "add"):
        return all(is_post_relu(g, s) for s in n.inputs)
    return False


def _reaches_add(g: NetworkGraph, start: list[str]) -> bool:
    """Would a channel-count change at these nodes' inputs hit an add merge?"""
    stack = list(start)
    seen = set()
    while stack:
        nid = stack.pop()
        if nid in seen:
            continue
        seen.add(nid)
        n = g.nodes[nid]
        if n.kind == "add":
            return True
        if n.kind in _PASS_THROUGH:
            stack.extend(g.consumers(nid))
    return False


def _edge_block(g: NetworkGraph, src: str, dst: str) -> int | None:
    d, s = g.nodes[dst], g.nodes[src]
    if d.block is not None:
        return d.block
    if s.block is not None:
        return s.block
    return None


def _propagate(
    g: NetworkGraph,
    origin: str,
    src_map: np.ndarray,
    divisor: np.ndarray,
    old_channels: int,
    old_shapes: dict,
    rng: np.random.Generator | None,
    noise_max: float,
) -> None:
    """Adjust everything downstream of ``origin`` after its output channels changed.

    New channel ``j`` of ``origin`` carries old channel ``src_map[j]`` (or is
    a new all-zero channel when that is -1).  Consumers absorb the change in
    their input axis: ``W'[.., j, ..] = W[.., src_map[j], ..] / divisor[j]``,
    with zeros for new channels and ``(1 + delta)`` noise on divided slices.
    """
    maps = {origin: (src_map, divisor, old_channels)}
    for n in g.topo_order():
        hit = [s for s in n.inputs if s in maps]
        if not hit or n.id in maps:
            continue
        if n.kind in ("conv", "head"):
            src, div, _ = maps[n.inputs[0]]
            w = n.conv.w if n.kind == "conv" else n.head.w
            axis = 2 if n.kind == "conv" else 0
            new = np.take(w, np.maximum(src, 0), axis=axis)
            shape = [1] * w.ndim
            shape[axis] = -1
            scale = np.where(src < 0, 0.0, 1.0 / div).astype(w.dtype).reshape(shape)
            new = new * scale
            split = np.nonzero(div > 1)[0]
            if noise_max > 0 and split.size and rng is not None:
                idx = [slice(None)] * w.ndim
                idx[axis] = split
                idx = tuple(idx)
                delta = rng.uniform(0.0, noise_max, size=new[idx].shape).astype(w.dtype)
                new[idx] = new[idx] * (1 + delta)
            if n.kind == "conv":
                n.conv = ConvParams(new)
            else:
                n.head.w = new
        elif n.kind in ("maxpool", "gap"):
            maps[n.id] = maps[n.inputs[0]]
        elif n.kind == "concat":
            parts_src, parts_div, offset = [], [], 0
            for s in n.inputs:
                if s in maps:
                    src, div, width = maps[s]
                    parts_src.append(np.where(src < 0, -1, src + offset))
                    parts_div.append(div)
                else:
                    width = old_shapes[s][2]
                    parts_src.append(np.arange(width) + offset)
                    parts_div.append(np.ones(width))
                offset += width
            maps[n.id] = (np.concatenate(parts_src), np.concatenate(parts_div), offset)
        elif n.kind == "add":
            raise MutationError(f"channel change at {origin} reaches add merge {n.id}")


# ---------------------------------------------------------------------------
# the five operators
# ---------------------------------------------------------------------------


def widen_layer(g: NetworkGraph, plan: WidenPlan, noise_max: float = 0.0, seed: int = 0) -> NetworkGraph:
    """Replicate filters of ``plan.target`` and rescale its consumers."""
    node = g.nodes.get(plan.target)
    if node is None or node.kind != "conv":
        raise MutationError(f"widen target {plan.target!r} is not a conv block")
    if node.conv.filters != plan.f:
        raise MutationError(f"{plan.target} has {node.conv.filters} filters, plan expects {plan.f}")
    if plan.f_prime == plan.f:
        return g
    if _reaches_add(g, g.consumers(plan.target)):
        raise MutationError(f"{plan.target} feeds an add merge and cannot be widened")
    old_shapes = infer_shapes(g)
    gmap = plan.mapping()
    counts = np.bincount(gmap, minlength=plan.f)
    node.conv = ConvParams(node.conv.w[..., gmap].copy())
    node.bn = node.bn.take(gmap)
    rng = np.random.default_rng(seed) if noise_max > 0 else None
    _propagate(g, plan.target, gmap, counts[gmap].astype(float), plan.f, old_shapes, rng, noise_max)
    return g


def branch_layer(g: NetworkGraph, target: str, gid: int) -> NetworkGraph:
    """Split a conv into two convs holding the first floor(f/2) filters and the rest."""
    node = g.nodes.get(target)
    if node is None or node.kind != "conv":
        raise MutationError(f"branch target {target!r} is not a conv block")
    f = node.conv.filters
    if f < 2:
        raise MutationError(f"{target} has {f} filter(s); branching needs at least 2")
    m = f // 2
    u = LayerNode(
        f"m{gid}.u", "conv", list(node.inputs), node.block,
        conv=ConvParams(node.conv.w[..., :m].copy()), bn=node.bn.take(np.arange(m)),
    )
    v = LayerNode(
        f"m{gid}.v", "conv", list(node.inputs), node.block,
        conv=ConvParams(node.conv.w[..., m:].copy()), bn=node.bn.take(np.arange(m, f)),
    )
    cat = LayerNode(f"m{gid}.cat", "concat", [u.id, v.id], node.block)
    consumers = g.consumers(target)
    _reorder(g, target, [u, v, cat], replace=True)
    for c in consumers:
        _rewire(g, c, target, cat.id)
    return g


def identity_kernel(k1: int, k2: int, channels: int, dtype) -> np.ndarray:
    """(k1, k2, c, c) kernel with a one at the centre tap on the channel diagonal."""
    if k1 % 2 == 0 or k2 % 2 == 0:
        raise MutationError(f"identity kernel needs odd extents, got {k1}x{k2}")
    w = np.zeros((k1, k2, channels, channels), dtype)
    w[(k1 - 1) // 2, (k2 - 1) // 2, np.arange(channels), np.arange(channels)] = 1
    return w


def _check_edge(g: NetworkGraph, edge) -> tuple[str, str, int]:
    src, dst = edge
    if src not in g.nodes or dst not in g.nodes or src not in g.nodes[dst].inputs:
        raise MutationError(f"edge {src}->{dst} does not exist")
    block = _edge_block(g, src, dst)
    if block is None:
        raise MutationError(f"edge {src}->{dst} lies outside every evolutionary block")
    if not is_post_relu(g, src):
        raise MutationError(f"edge {src}->{dst} does not carry a post-ReLU activation")
    return src, dst, block


def _channels(g: NetworkGraph, node_id: str) -> int:
    return infer_shapes(g)[node_id][2]


def insert_identity_layer(g: NetworkGraph, edge, gid: int, kernel: int = 3) -> NetworkGraph:
    src, dst, block = _check_edge(g, edge)
    c = _channels(g, src)
    new = LayerNode(
        f"m{gid}.id", "conv", [src], block,
        conv=ConvParams(identity_kernel(kernel, kernel, c, g.dtype)),
        bn=BnParams.identity(c, g.dtype),
    )
    _reorder(g, src, [new], replace=False)
    _rewire(g, dst, src, new.id)
    return g


def _zero_conv(node_id: str, src: str, c: int, f: int, block: int, dtype, kernel: int) -> LayerNode:
    return LayerNode(
        node_id, "conv", [src], block,
        conv=ConvParams(np.zeros((kernel, kernel, c, f), dtype)),
        bn=BnParams.identity(f, dtype),
    )


def insert_shortcut_layer(g: NetworkGraph, edge, gid: int, kernel: int = 3) -> NetworkGraph:
    """Replace ``src -> dst`` by ``src -> add(src, zero_conv(src)) -> dst``."""
    src, dst, block = _check_edge(g, edge)
    c = _channels(g, src)
    conv = _zero_conv(f"m{gid}.sc", src, c, c, block, g.dtype, kernel)
    add = LayerNode(f"m{gid}.add", "add", [src, conv.id], block)
    _reorder(g, src, [conv, add], replace=False)
    _rewire(g, dst, src, add.id)
    return g


def insert_dense_layer(g: NetworkGraph, edge, gid: int, growth: int | None = None, kernel: int = 3) -> NetworkGraph:
    """Replace ``src -> dst`` by ``concat(zero_conv(src), src) -> dst``."""
    src, dst, block = _check_edge(g, edge)
    if _reaches_add(g, [dst]):
        raise MutationError(f"consumer {dst} cannot accept a wider input")
    old_shapes = infer_shapes(g)
    c = old_shapes[src][2]
    growth = c if growth is None else int(growth)
    if growth < 1:
        raise MutationError("dense growth must be positive")
    conv = _zero_conv(f"m{gid}.dn", src, c, growth, block, g.dtype, kernel)
    cat = LayerNode(f"m{gid}.cat", "concat", [conv.id, src], block)
    _reorder(g, src, [conv, cat], replace=False)
    _rewire(g, dst, src, cat.id)
    src_map = np.concatenate([np.full(growth, -1), np.arange(c)])
    _propagate(g, cat.id, src_map, np.ones(growth + c), c, old_shapes, None, 0.0)
    return g


# ---------------------------------------------------------------------------
# sites, sampling, replay
# ---------------------------------------------------------------------------


def legal_sites(g: NetworkGraph, kind: str, block: int | None = None) -> list[dict]:
    """Every location where ``kind`` can be applied, in a deterministic order."""
    out = []
    if kind in ("widen", "branch"):
        for n in g.topo_order():
            if n.kind != "conv" or n.block is None or (block is not None and n.block != block):
                continue
            if kind == "branch" and n.conv.filters < 2:
                continue
            if kind == "widen" and _reaches_add(g, g.consumers(n.id)):
                continue
            out.append({"block": n.block, "node": n.id})
        return out
    if kind not in OPS:
        raise ValueError(f"unknown mutation kind {kind!r}")
    for src, dst in g.edges():
        b = _edge_block(g, src, dst)
        if b is None or (block is not None and b != block):
            continue
        if not is_post_relu(g, src):
            continue
        if kind == "dense" and _reaches_add(g, [dst]):
            continue
        out.append({"block": b, "edge": [src, dst]})
    return out


def sample_plan(g: NetworkGraph, kind: str, location: dict, config: MorphConfig, rng: np.random.Generator) -> dict:
    if kind == "widen":
        f = g.nodes[location["node"]].conv.filters
        add = int(rng.integers(1, max(1, math.ceil(f * config.widen_max_fraction)) + 1))
        return {
            "f": f,
            "f_prime": f + add,
            "sources": [int(s) for s in rng.integers(0, f, add)],
            "noise_max": config.noise_max,
            "seed": int(rng.integers(2**31)),
        }
    if kind == "dense":
        return {"growth": _channels(g, location["edge"][0]), "kernel": config.kernel}
    if kind in ("identity", "shortcut"):
        return {"kernel": config.kernel}
    return {}


def propose_mutation(
    g: NetworkGraph, config: MorphConfig, rng: np.random.Generator, gid: int, block: int | None = None
) -> MutationRecord:
    """Draw an operator uniformly, then a site uniformly among its legal sites."""
    for _ in range(config.max_retries):
        kind = config.ops[int(rng.integers(len(config.ops)))]
        sites = legal_sites(g, kind, block)
        if not sites:
            continue
        loc = sites[int(rng.integers(len(sites)))]
        return MutationRecord(gid, kind, loc, sample_plan(g, kind, loc, config, rng))
    raise MutationError(f"no legal mutation site found after {config.max_retries} draws")


def apply_mutation(g: NetworkGraph, record: MutationRecord) -> NetworkGraph:
    """Apply a recorded mutation in place, validating its location first."""
    loc, plan = record.location, record.plan
    legal = legal_sites(g, record.kind, loc.get("block"))
    if loc not in legal:
        raise MutationError(f"{record.label()} is not applicable to this graph")
    if record.kind == "widen":
        wp = WidenPlan(loc["node"], plan["f"], plan["f_prime"], list(plan["sources"]))
        return widen_layer(g, wp, plan.get("noise_max", 0.0), plan.get("seed", 0))
    if record.kind == "branch":
        return branch_layer(g, loc["node"], record.global_id)
    kernel = plan.get("kernel", 3)
    if record.kind == "identity":
        return insert_identity_layer(g, loc["edge"], record.global_id, kernel)
    if record.kind == "shortcut":
        return insert_shortcut_layer(g, loc["edge"], record.global_id, kernel)
    return insert_dense_layer(g, loc["edge"], record.global_id, plan.get("growth"), kernel)


def sample_mutation(
    g: NetworkGraph, config: MorphConfig, rng: np.random.Generator, gid: int
) -> tuple[MutationRecord, NetworkGraph]:
    """Propose and apply one random mutation (in place)."""
    record = propose_mutation(g, config, rng, gid)
    apply_mutation(g, record)
    return record, g


def replay(history, base: NetworkGraph) -> NetworkGraph:
    """Apply a sequence of records to a copy of ``base``."""
    g = base.copy()
    for record in history:
        apply_mutation(g, record)
    return g
