"""Over-parameterized search DAG.

Nodes carry tensors, edges carry one candidate operation each plus the
architecture scalar w and its variance chain (s, gamma, omega, c, hess).
A node's state is the w-weighted sum of its alive incoming edge outputs;
nodes themselves apply no nonlinearity.  Gate edges implement the
prioritized zero operation: one identity edge guarding each non-input
node's entire fan-out, whose switch variance enters every downstream
gamma harmonically.
"""

from __future__ import annotations

import graphlib
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .curvature import propagate_curvature

__all__ = [
    "OP_TAGS",
    "Op",
    "make_op",
    "Edge",
    "SuperGraph",
    "PruneReport",
    "topo_order",
    "mix_output",
    "graph_forward",
    "graph_backward",
    "arch_scalar_hessian",
    "gamma_of_edge",
    "refresh_gammas",
    "entropy_prune_mask",
    "apply_prune_mask",
    "propagate_dependency_prune",
    "restore_widest_path",
    "insert_zero_gates",
    "export_architecture",
    "import_architecture",
]

OP_TAGS = ("identity", "fc", "conv3x3", "conv5x5", "maxpool", "avgpool", "zero_gate")


# ---------------------------------------------------------------------------
# operations


@dataclass
class Op:
    """One candidate operation: a pure map with vjp and curvature backmap.

    identity / zero_gate pass tensors through; every other tag is backed by
    a frozen single-layer template from the network core.
    """

    tag: str
    layers: list | None = None

    def __post_init__(self):
        if self.tag not in OP_TAGS:
            raise ValueError(f"unknown op tag {self.tag!r}")

    @property
    def is_linear_map(self) -> bool:
        """True when the op is a fixed linear map (exact-curvature capable)."""
        return self.tag in ("identity", "zero_gate", "fc")

    def matrix(self):
        """The (d_out, d_in) matrix of a linear op; None for identity-like."""
        if self.tag in ("identity", "zero_gate"):
            return None
        if self.tag == "fc":
            return self.layers[0].masked_weights()
        raise ValueError(f"op {self.tag!r} has no dense matrix form")

    def apply(self, z):
        """Returns (output, cache); cache feeds vjp / hess_backmap."""
        if self.tag in ("identity", "zero_gate"):
            return z, None
        if self.layers is None:
            raise ValueError(f"op {self.tag!r} is a topology stub and cannot run")
        out, caches = nn.forward(self.layers, z)
        return out, caches

    def vjp(self, cache, g):
        if self.tag in ("identity", "zero_gate"):
            return g
        _, gx = nn.backward(self.layers, cache, g)
        return gx

    def hess_backmap(self, cache, h_out):
        """Diagonal output-curvature -> diagonal input-curvature."""
        if self.tag in ("identity", "zero_gate"):
            return h_out
        _, h_in = propagate_curvature(self.layers, cache, h_out, mode="diag")
        return h_in


def make_op(tag, rng=None, dims=None, channels=None, matrix=None):
    """Build an op from its tag.

    fc needs matrix=(d_out, d_in) or dims=(d_in, d_out) with an rng;
    conv3x3/conv5x5 need channels=(c_in, c_out) and an rng (same-padding,
    spatial shape preserved); pools are 2x2 stride-1 windows.
    """
    if tag in ("identity", "zero_gate"):
        return Op(tag)
    if tag == "fc":
        if matrix is not None:
            layer = nn.Layer("fc", weights=np.asarray(matrix, dtype=np.float64))
        elif dims is not None and rng is not None:
            layer = nn.fc_layer(dims[0], dims[1], rng=rng, bias=False)
        else:
            raise ValueError("fc op needs matrix= or (dims=, rng=)")
        return Op(tag, [layer])
    if tag in ("conv3x3", "conv5x5"):
        k = 3 if tag == "conv3x3" else 5
        if channels is None or rng is None:
            raise ValueError(f"{tag} op needs channels=(c_in, c_out) and rng=")
        layer = nn.conv_layer(channels[0], channels[1], k, padding=k // 2,
                              rng=rng, bias=False)
        return Op(tag, [layer])
    if tag == "maxpool":
        return Op(tag, [nn.pool_layer("maxpool2d", 2, 1)])
    if tag == "avgpool":
        return Op(tag, [nn.pool_layer("avgpool2d", 2, 1)])
    raise ValueError(f"unknown op tag {tag!r}")


# ---------------------------------------------------------------------------
# graph structure


@dataclass
class Edge:
    """One (source, target, operation) slot with its variance chain."""

    src: int
    dst: int
    op: Op
    w: float = 1.0
    s: float = 1.0
    gamma: float = 1.0
    omega: float = 0.0
    c: float = 1.0
    hess: float = 0.0
    group: int | None = None
    alive: bool = True
    is_gate: bool = False
    killed_by: str | None = None  # "entropy" or "cascade" once dead


@dataclass
class SuperGraph:
    n_nodes: int
    edges: list
    input_node: int = 0
    output_node: int | None = None
    gate_map: dict = field(default_factory=dict)      # guarded node -> gate edge id
    gate_node_of: dict = field(default_factory=dict)  # auxiliary node -> guarded node
    degenerate: bool = False

    def __post_init__(self):
        if self.output_node is None:
            self.output_node = self.n_nodes - 1
        for eid, e in enumerate(self.edges):
            if not (0 <= e.src < self.n_nodes and 0 <= e.dst < self.n_nodes):
                raise ValueError(f"edge {eid} references a node outside the graph")
            if e.src == e.dst:
                raise ValueError(f"edge {eid} is a self-loop")
        topo_order(self)  # raises on cycles

    def in_edges(self, node, alive_only=True):
        return [eid for eid, e in enumerate(self.edges)
                if e.dst == node and (e.alive or not alive_only)]

    def out_edges(self, node, alive_only=True):
        return [eid for eid, e in enumerate(self.edges)
                if e.src == node and (e.alive or not alive_only)]

    def alive_edge_ids(self):
        return [eid for eid, e in enumerate(self.edges) if e.alive]


def topo_order(graph):
    """Deterministic topological order of all node ids; raises on cycles."""
    sorter = graphlib.TopologicalSorter()
    for node in range(graph.n_nodes):
        sorter.add(node)
    for e in graph.edges:
        sorter.add(e.dst, e.src)
    try:
        return list(sorter.static_order())
    except graphlib.CycleError as err:
        raise ValueError(f"graph contains a cycle: {err.args[1]}") from None


# ---------------------------------------------------------------------------
# forward / backward / curvature


def mix_output(graph, node, upstream, weights=None):
    """z_node = sum over alive in-edges of w_e * op_e(z_src).

    upstream maps node id -> tensor; weights optionally overrides the stored
    per-edge w (keyed by edge id).
    """
    out, _ = _mix(graph, node, upstream, weights)
    return out


def _mix(graph, node, upstream, weights=None, skip_dead=False):
    total = None
    caches = {}
    for eid in graph.in_edges(node):
        e = graph.edges[eid]
        if e.src not in upstream or upstream[e.src] is None:
            if skip_dead and upstream.get(e.src, None) is None and e.src in upstream:
                continue  # source node carries no information flow
            raise ValueError(f"missing upstream output of node {e.src} for edge {eid}")
        w = e.w if weights is None else weights[eid]
        op_out, cache = e.op.apply(upstream[e.src])
        caches[eid] = (op_out, cache)
        term = w * op_out
        total = term if total is None else total + term
    return total, caches


@dataclass
class GraphCache:
    node_z: dict
    edge_out: dict    # edge id -> op output tensor (before w scaling)
    edge_cache: dict  # edge id -> op-internal cache
    order: list


def graph_forward(graph, x):
    """Topological evaluation; returns (output tensor, GraphCache)."""
    order = topo_order(graph)
    node_z = {graph.input_node: np.asarray(x, dtype=np.float64)}
    edge_out, edge_cache = {}, {}
    for node in order:
        if node == graph.input_node:
            continue
        if not graph.in_edges(node):
            node_z[node] = None  # dead node: no information flow
            continue
        z, caches = _mix(graph, node, node_z, skip_dead=True)
        node_z[node] = z
        for eid, (out, cache) in caches.items():
            edge_out[eid] = out
            edge_cache[eid] = cache
    if node_z.get(graph.output_node) is None:
        raise ValueError("output node receives no information flow")
    return node_z[graph.output_node], GraphCache(node_z, edge_out, edge_cache, order)


def graph_backward(graph, gcache, grad_output):
    """Reverse accumulation.

    Returns (dict edge id -> dE/dw scalar, dict node id -> dE/dz_node).
    """
    node_g = {graph.output_node: np.asarray(grad_output, dtype=np.float64)}
    w_grads = {}
    for node in reversed(gcache.order):
        g = node_g.get(node)
        if g is None:
            continue
        for eid in graph.in_edges(node):
            e = graph.edges[eid]
            w_grads[eid] = float(np.sum(g * gcache.edge_out[eid]))
            gx = e.w * e.op.vjp(gcache.edge_cache[eid], g)
            if node_g.get(e.src) is None:
                node_g[e.src] = gx
            else:
                node_g[e.src] = node_g[e.src] + gx
    return w_grads, node_g


def arch_scalar_hessian(graph, gcache, h_seed, mode="exact"):
    """Per-edge curvature of the energy w.r.t. each architecture scalar w.

    exact mode accumulates output Jacobians through the DAG (fixed linear
    ops only) and contracts them against the full energy Hessian seed
    (b, n, n).  approx mode runs the element-wise diagonal recursion, works
    for any op kind, and reduces each edge to (mean |op output|)^2 times the
    summed downstream diagonal.  h_seed carries the 1/batch factor.
    """
    if mode == "exact":
        return _arch_hessian_exact(graph, gcache, h_seed)
    if mode != "approx":
        raise ValueError(f"unknown arch-hessian mode {mode!r}")
    # node diagonals, backward over the topological order
    node_h = {graph.output_node: h_seed}
    hess = {}
    for node in reversed(gcache.order):
        if node == graph.output_node or gcache.node_z.get(node) is None:
            continue
        acc = None
        for eid in graph.out_edges(node):
            e = graph.edges[eid]
            h_dst = node_h.get(e.dst)
            if h_dst is None:
                continue
            contrib = e.w**2 * e.op.hess_backmap(gcache.edge_cache[eid], h_dst)
            acc = contrib if acc is None else acc + contrib
        node_h[node] = acc
    for eid in graph.alive_edge_ids():
        e = graph.edges[eid]
        h_dst = node_h.get(e.dst)
        if h_dst is None or eid not in gcache.edge_out:
            hess[eid] = 0.0
            continue
        u = gcache.edge_out[eid]
        hess[eid] = float(np.mean(np.abs(u)) ** 2 * np.sum(h_dst))
    return hess


def _arch_hessian_exact(graph, gcache, h_seed):
    if h_seed.ndim != 3:
        raise ValueError("exact mode needs per-sample full Hessian seeds (b, n, n)")
    out = gcache.node_z[graph.output_node]
    d_out = out.reshape(out.shape[0], -1).shape[1]
    jac = {graph.output_node: np.eye(d_out)}
    for node in reversed(gcache.order):
        if node == graph.output_node or gcache.node_z.get(node) is None:
            continue
        acc = None
        for eid in graph.out_edges(node):
            e = graph.edges[eid]
            j_dst = jac.get(e.dst)
            if j_dst is None:
                continue
            if not e.op.is_linear_map:
                raise ValueError(
                    f"exact arch-hessian mode requires fixed linear ops; edge {eid} "
                    f"carries {e.op.tag!r} (use mode='approx')"
                )
            m = e.op.matrix()
            contrib = e.w * (j_dst if m is None else j_dst @ m)
            acc = contrib if acc is None else acc + contrib
        jac[node] = acc
    hess = {}
    for eid in graph.alive_edge_ids():
        e = graph.edges[eid]
        j_dst = jac.get(e.dst)
        if j_dst is None or eid not in gcache.edge_out:
            hess[eid] = 0.0
            continue
        u = gcache.edge_out[eid].reshape(h_seed.shape[0], -1)
        ju = u @ j_dst.T  # (b, d_out): d z_out / d w_e per sample
        hess[eid] = float(np.einsum("bi,bij,bj->", ju, h_seed, ju))
    return hess


# ---------------------------------------------------------------------------
# variance algebra and pruning


def gamma_of_edge(graph, eid):
    """Harmonic dependency variance of one edge.

    1/gamma = 1/s_gate + 1/(sum of predecessor switches) + 1/s_edge, with
    the gate term present only when the edge leaves a gated fan-out and the
    predecessor term dropped at the input-node boundary.
    """
    e = graph.edges[eid]
    if e.s <= 0:
        raise ValueError(f"edge {eid} has non-positive switch variance {e.s}")
    inv = 1.0 / e.s
    src = e.src
    if src in graph.gate_node_of:
        guarded = graph.gate_node_of[src]
        gate = graph.edges[graph.gate_map[guarded]]
        if gate.s <= 0:
            raise ValueError(f"gate of node {guarded} has non-positive switch {gate.s}")
        inv += 1.0 / gate.s
        src = guarded  # predecessor mass lives on the guarded node
    if src != graph.input_node:
        pred = 0.0
        for pid in graph.in_edges(src):
            p = graph.edges[pid]
            if p.is_gate:
                continue
            if p.s <= 0:
                raise ValueError(f"edge {pid} has non-positive switch variance {p.s}")
            pred += p.s
        if pred > 0:
            inv += 1.0 / pred
        else:
            return 0.0  # no alive in-flow: the edge is dead weight
    return 1.0 / inv


def refresh_gammas(graph):
    for eid in graph.alive_edge_ids():
        graph.edges[eid].gamma = gamma_of_edge(graph, eid)
    return graph


def entropy_prune_mask(graph, threshold=None):
    """Edges whose dependency variance has nonpositive Gaussian entropy."""
    from .updates import ENTROPY_PRUNE_THRESHOLD
    thr = ENTROPY_PRUNE_THRESHOLD if threshold is None else threshold
    return {eid for eid in graph.alive_edge_ids()
            if graph.edges[eid].gamma <= thr}


def apply_prune_mask(graph, mask, reason="entropy"):
    for eid in mask:
        e = graph.edges[eid]
        if e.alive:
            e.alive = False
            e.killed_by = reason
    return graph


@dataclass
class PruneReport:
    entropy_killed: list
    cascade_killed: list
    degenerate: bool = False
    restored_path: list | None = None


def _reachable_from_input(graph):
    reach = {graph.input_node}
    for node in topo_order(graph):
        if node == graph.input_node:
            continue
        if any(graph.edges[eid].src in reach for eid in graph.in_edges(node)):
            reach.add(node)
    return reach


def propagate_dependency_prune(graph, entropy_killed=()):
    """Cascade: kill every alive edge whose source has no alive in-flow.

    Reachability from the input over alive edges is the fixpoint of the
    node-isolation rule, so one forward sweep suffices.  Returns a report
    listing entropy- and cascade-killed edges separately.
    """
    reach = _reachable_from_input(graph)
    cascade = []
    for eid in graph.alive_edge_ids():
        if graph.edges[eid].src not in reach:
            cascade.append(eid)
    apply_prune_mask(graph, cascade, reason="cascade")
    degenerate = graph.output_node not in _reachable_from_input(graph)
    return PruneReport(sorted(entropy_killed), sorted(cascade), degenerate)


def restore_widest_path(graph):
    """Revive the input->output path with the largest bottleneck gamma.

    Fallback for a fully disconnected prune; marks the graph degenerate.
    Returns the list of revived edge ids.
    """
    best = {graph.input_node: np.inf}
    back = {}
    for node in topo_order(graph):
        if node not in best:
            continue
        for eid in graph.out_edges(node, alive_only=False):
            e = graph.edges[eid]
            cand = min(best[node], e.gamma)
            if cand > best.get(e.dst, -np.inf):
                best[e.dst] = cand
                back[e.dst] = eid
    if graph.output_node not in back:
        raise ValueError("no input->output path exists in the graph at all")
    path = []
    node = graph.output_node
    while node != graph.input_node:
        eid = back[node]
        path.append(eid)
        node = graph.edges[eid].src
    path.reverse()
    for eid in path:
        e = graph.edges[eid]
        e.alive = True
        e.killed_by = None
    graph.degenerate = True
    return path


# ---------------------------------------------------------------------------
# zero gates


def insert_zero_gates(graph):
    """Guard every non-input node's fan-out with a single identity gate.

    Node j with outgoing edges gains an auxiliary node j'; a gate edge
    j -> j' (w = s = 1) is inserted and j's outgoing edges are re-pointed
    to originate at j'.
    """
    if graph.gate_map:
        raise ValueError("zero gates already inserted")
    original_nodes = list(range(graph.n_nodes))
    for node in original_nodes:
        if node == graph.input_node:
            continue
        fan_out = graph.out_edges(node, alive_only=False)
        if not fan_out:
            continue
        aux = graph.n_nodes
        graph.n_nodes += 1
        gate = Edge(node, aux, make_op("zero_gate"), w=1.0, s=1.0, is_gate=True)
        graph.edges.append(gate)
        gate_id = len(graph.edges) - 1
        for eid in fan_out:
            graph.edges[eid].src = aux
        graph.gate_map[node] = gate_id
        graph.gate_node_of[aux] = node
    topo_order(graph)  # re-validate
    return graph


# ---------------------------------------------------------------------------
# export


def export_architecture(graph):
    """Plain-dict record of the final topology, ops and (w, gamma, s)."""
    alive = graph.alive_edge_ids()
    return {
        "schema_version": "1",
        "n_nodes": graph.n_nodes,
        "input_node": graph.input_node,
        "output_node": graph.output_node,
        "degenerate": bool(graph.degenerate or not alive),
        "gate_map": {str(k): v for k, v in graph.gate_map.items()},
        "gate_node_of": {str(k): v for k, v in graph.gate_node_of.items()},
        "edges": [
            {
                "id": eid,
                "src": e.src,
                "dst": e.dst,
                "op": e.op.tag,
                "w": float(e.w),
                "gamma": float(e.gamma),
                "s": float(e.s),
                "alive": bool(e.alive),
                "is_gate": bool(e.is_gate),
            }
            for eid, e in enumerate(graph.edges)
        ],
    }


def import_architecture(record):
    """Rebuild a SuperGraph (topology + op tags) from export_architecture.

    Layer-backed ops come back as topology stubs: the frozen weights are
    not serialized, so the imported graph reproduces structure, not
    numerics.
    """
    edges = []
    for rec in record["edges"]:
        op = Op(rec["op"]) if rec["op"] in ("identity", "zero_gate") else Op(rec["op"], None)
        e = Edge(rec["src"], rec["dst"], op, w=rec["w"], s=rec["s"],
                 is_gate=rec["is_gate"])
        e.gamma = rec["gamma"]
        e.alive = rec["alive"]
        edges.append(e)
    graph = SuperGraph(
        n_nodes=record["n_nodes"],
        edges=edges,
        input_node=record["input_node"],
        output_node=record["output_node"],
        gate_map={int(k): v for k, v in record.get("gate_map", {}).items()},
        gate_node_of={int(k): v for k, v in record.get("gate_node_of", {}).items()},
        degenerate=record.get("degenerate", False),
    )
    return graph
