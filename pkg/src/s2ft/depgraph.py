"""Weight/activation dependency graphs and coupled-structure discovery.

An activation ``A`` couples producer weights ``W1`` and consumer weights
``W2`` when every weight in ``In(A)`` writes only ``A`` (out-degree 1)
and every weight in ``Out(A)`` reads only ``A`` (in-degree 1).  Such a
pair can be co-permuted along ``A``'s feature axis without changing the
network's output.

``Out(A)`` also collects consumers reachable through identity skip
edges (one residual hop), which is how residual streams pick up readers
from the next module.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Literal, Sequence

from .netspec import DeepLinearNet, TransformerBlockSpec

EdgeKind = Literal["produce", "consume", "skip"]
StructureKind = Literal["MhaBasic", "FfnBasic", "LinearBasic", "Residual"]


@dataclass(frozen=True)
class Node:
    id: str
    kind: Literal["weight", "activation"]
    width: int  # feature width of an activation; output dim of a weight
    granule: int = 1  # channels that must move together (d_h for attention heads)


@dataclass(frozen=True)
class Edge:
    src: str
    dst: str
    kind: EdgeKind


@dataclass(frozen=True)
class CoupledStructure:
    kind: StructureKind
    activation: str
    producers: tuple[str, ...]
    consumers: tuple[str, ...]
    axis_len: int
    granule: int = 1
    producer_axis: str = "rows"
    consumer_axis: str = "cols"

    @property
    def slots(self) -> int:
        """Number of independently movable units (heads or channels)."""
        return self.axis_len // self.granule


@dataclass
class DependencyGraph:
    nodes: dict[str, Node] = field(default_factory=dict)
    edges: list[Edge] = field(default_factory=list)

    def add_node(self, node: Node) -> None:
        if node.id in self.nodes:
            raise ValueError(f"duplicate node {node.id}")
        self.nodes[node.id] = node

    def add_edge(self, src: str, dst: str, kind: EdgeKind) -> None:
        for end in (src, dst):
            if end not in self.nodes:
                raise KeyError(f"edge endpoint {end} is not a node")
        self.edges.append(Edge(src, dst, kind))

    def activations(self) -> list[str]:
        return sorted(n for n, node in self.nodes.items() if node.kind == "activation")

    def weights(self) -> list[str]:
        return sorted(n for n, node in self.nodes.items() if node.kind == "weight")

    def in_set(self, act: str) -> set[str]:
        """Weights that directly produce ``act``."""
        return {e.src for e in self.edges if e.kind == "produce" and e.dst == act}

    def direct_consumers(self, act: str) -> set[str]:
        return {e.dst for e in self.edges if e.kind == "consume" and e.src == act}

    def skip_targets(self, act: str) -> set[str]:
        return {e.dst for e in self.edges if e.kind == "skip" and e.src == act}

    def skip_sources(self, act: str) -> set[str]:
        return {e.src for e in self.edges if e.kind == "skip" and e.dst == act}

    def out_set(self, act: str) -> set[str]:
        """Direct consumers plus consumers one skip hop downstream."""
        out = set(self.direct_consumers(act))
        for tgt in self.skip_targets(act):
            out |= self.direct_consumers(tgt)
        return out

    def out_degree(self, weight: str) -> int:
        return sum(1 for e in self.edges if e.kind == "produce" and e.src == weight)

    def in_degree(self, weight: str) -> int:
        return sum(1 for e in self.edges if e.kind == "consume" and e.dst == weight)

    def in_sets(self) -> dict[str, list[str]]:
        return {a: sorted(self.in_set(a)) for a in self.activations()}

    def out_sets(self) -> dict[str, list[str]]:
        return {a: sorted(self.out_set(a)) for a in self.activations()}

    def to_dict(self) -> dict:
        return {
            "nodes": [asdict(self.nodes[n]) for n in sorted(self.nodes)],
            "edges": [asdict(e) for e in self.edges],
            "in_sets": self.in_sets(),
            "out_sets": self.out_sets(),
            "out_degree": {w: self.out_degree(w) for w in self.weights()},
            "in_degree": {w: self.in_degree(w) for w in self.weights()},
        }


def _add_block(g: DependencyGraph, spec: TransformerBlockSpec, prefix: str, x_id: str, y_id: str) -> None:
    d, k, dh = spec.d, spec.k, spec.d_h
    n = lambda name: f"{prefix}{name}"  # noqa: E731
    for w in ("Wq", "Wk", "Wv", "Wo"):
        g.add_node(Node(n(w), "weight", d))
    for w in ("Wup", "Wgate"):
        g.add_node(Node(n(w), "weight", k))
    g.add_node(Node(n("Wdown"), "weight", d))
    g.add_node(Node(n("attn"), "activation", d, granule=dh))
    g.add_node(Node(n("h1"), "activation", d))
    g.add_node(Node(n("ffn_inner"), "activation", k))
    g.add_node(Node(y_id, "activation", d))

    for w in ("Wq", "Wk", "Wv"):
        g.add_edge(x_id, n(w), "consume")
        # Softmax keeps heads separate, so Q, K and V all feed the head-blocked output.
        g.add_edge(n(w), n("attn"), "produce")
    g.add_edge(n("attn"), n("Wo"), "consume")
    g.add_edge(n("Wo"), n("h1"), "produce")
    g.add_edge(x_id, n("h1"), "skip")
    for w in ("Wup", "Wgate"):
        g.add_edge(n("h1"), n(w), "consume")
        g.add_edge(n(w), n("ffn_inner"), "produce")
    g.add_edge(n("ffn_inner"), n("Wdown"), "consume")
    g.add_edge(n("Wdown"), y_id, "produce")
    g.add_edge(n("h1"), y_id, "skip")


def build_graph(model) -> DependencyGraph:
    """Graph for a block, a list of stacked blocks, or a deep linear chain.

    A single block uses bare weight ids (``Wq``); stacked blocks are
    prefixed ``b0.``, ``b1.`` and share residual-stream nodes ``r0..rN``.
    A linear chain has weights ``W1..WL`` and intermediate activations
    ``a1..a{L-1}`` only.
    """
    g = DependencyGraph()
    if isinstance(model, DeepLinearNet):
        dims = model.dims
        for i in range(1, model.L + 1):
            g.add_node(Node(f"W{i}", "weight", dims[i]))
        for i in range(1, model.L):
            g.add_node(Node(f"a{i}", "activation", dims[i]))
            g.add_edge(f"W{i}", f"a{i}", "produce")
            g.add_edge(f"a{i}", f"W{i + 1}", "consume")
        return g

    if isinstance(model, TransformerBlockSpec):
        g.add_node(Node("x", "activation", model.d))
        _add_block(g, model, "", "x", "y")
        return g

    blocks: Sequence[TransformerBlockSpec] = list(model)
    if not blocks:
        raise ValueError("empty block stack")
    g.add_node(Node("r0", "activation", blocks[0].d))
    for i, blk in enumerate(blocks):
        _add_block(g, blk, f"b{i}.", f"r{i}", f"r{i + 1}")
    return g


def _classify(g: DependencyGraph, act: str) -> StructureKind:
    if g.skip_targets(act) or g.skip_sources(act):
        return "Residual"
    base = act.rsplit(".", 1)[-1]
    if base == "attn":
        return "MhaBasic"
    if base == "ffn_inner":
        return "FfnBasic"
    return "LinearBasic"


def discover_coupled(g: DependencyGraph) -> list[CoupledStructure]:
    """All activations whose producers and consumers satisfy the degree rule.

    Results are sorted by activation id.
    """
    found = []
    for act in g.activations():
        prod, cons = g.in_set(act), g.out_set(act)
        if not prod or not cons:
            continue
        if any(g.out_degree(w) != 1 for w in prod):
            continue
        if any(g.in_degree(w) != 1 for w in cons):
            continue
        node = g.nodes[act]
        found.append(
            CoupledStructure(
                kind=_classify(g, act),
                activation=act,
                producers=tuple(sorted(prod)),
                consumers=tuple(sorted(cons)),
                axis_len=node.width,
                granule=node.granule,
            )
        )
    return found


def basic_structures(structures: Sequence[CoupledStructure]) -> list[CoupledStructure]:
    return [s for s in structures if s.kind != "Residual"]


def export_json(g: DependencyGraph, structures: Sequence[CoupledStructure] | None = None) -> str:
    if structures is None:
        structures = discover_coupled(g)
    doc = g.to_dict()
    doc["structures"] = [asdict(s) for s in structures]
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"
