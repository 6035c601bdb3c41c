"""Scene graphs: objects, typed relations, and the single/super partition.

A scene document carries a global prompt, object nodes, and edges labeled
either ``spatial`` or ``interaction``. Interaction pairs become super-nodes
that are optimized jointly; everything else is a single-object node.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import Optional

from splatscene.errors import (
    SceneParseError,
    SceneValidationError,
    UnparseableReplyError,
    UnsupportedInteractionChainError,
)
from splatscene import layout as layout_mod

EDGE_KINDS = ("spatial", "interaction")


@dataclass(frozen=True)
class ScenePrompt:
    """Global scene description text."""

    text: str

    def __post_init__(self):
        if not self.text or not self.text.strip():
            raise SceneValidationError("scene prompt must be non-empty")


@dataclass(frozen=True)
class ObjectNode:
    id: str
    name: str
    prompt: str

    def __post_init__(self):
        if not self.id:
            raise SceneValidationError("node id must be non-empty")
        if not self.prompt or not self.prompt.strip():
            raise SceneValidationError(f"node '{self.id}' has an empty prompt")


@dataclass(frozen=True)
class RelationEdge:
    src: str
    dst: str
    label: str
    kind: str

    def __post_init__(self):
        if self.src == self.dst:
            raise SceneValidationError(
                f"edge '{self.label}' connects node '{self.src}' to itself"
            )
        if self.kind not in EDGE_KINDS:
            raise SceneValidationError(
                f"edge kind must be one of {EDGE_KINDS}, got '{self.kind}'"
            )


@dataclass(frozen=True)
class SceneGraph:
    prompt: ScenePrompt
    nodes: tuple[ObjectNode, ...]
    edges: tuple[RelationEdge, ...]

    def __post_init__(self):
        if not self.nodes:
            raise SceneValidationError("scene graph needs at least one node")
        ids = [n.id for n in self.nodes]
        dupes = {i for i in ids if ids.count(i) > 1}
        if dupes:
            raise SceneValidationError(f"duplicate node ids: {sorted(dupes)}")
        known = set(ids)
        for e in self.edges:
            for endpoint in (e.src, e.dst):
                if endpoint not in known:
                    raise SceneValidationError(
                        f"edge '{e.label}' references unknown node '{endpoint}'"
                    )

    def node(self, node_id: str) -> ObjectNode:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def interaction_edges(self) -> tuple[RelationEdge, ...]:
        return tuple(e for e in self.edges if e.kind == "interaction")

    def interacting_pairs(self) -> set[frozenset]:
        return {frozenset((e.src, e.dst)) for e in self.interaction_edges()}


@dataclass(frozen=True)
class SuperNode:
    """Object-relation-object triplet optimized as one unit."""

    src: str
    dst: str
    edge: RelationEdge

    @property
    def id(self) -> str:
        return f"{self.src}+{self.dst}"

    @property
    def members(self) -> tuple[str, str]:
        return (self.src, self.dst)


@dataclass(frozen=True)
class Partition:
    singles: tuple[str, ...]
    supernodes: tuple[SuperNode, ...]

    def all_node_ids(self) -> tuple[str, ...]:
        out = list(self.singles)
        for s in self.supernodes:
            out.extend(s.members)
        return tuple(out)


def parse_scene_document(document: str):
    """Parse a scene DSL document (JSON text) into a graph + optional layout.

    Returns ``(SceneGraph, LayoutSet | None)``. Syntax errors carry the
    position reported by the JSON parser.
    """
    try:
        raw = json.loads(document)
    except json.JSONDecodeError as e:
        raise SceneParseError(f"invalid scene JSON: {e.msg}", e.lineno, e.colno) from e
    return _graph_from_raw(raw)


def parse_scene_file(path):
    with open(path, "r", encoding="utf-8") as f:
        return parse_scene_document(f.read())


def _graph_from_raw(raw):
    if not isinstance(raw, dict):
        raise SceneParseError("scene document must be a JSON object")
    prompt = ScenePrompt(str(raw.get("prompt", "")))
    nodes = []
    for item in raw.get("nodes", []):
        nodes.append(
            ObjectNode(
                id=str(item["id"]),
                name=str(item.get("name", item["id"])),
                prompt=str(item.get("prompt", "")),
            )
        )
    edges = []
    for item in raw.get("edges", []):
        edges.append(
            RelationEdge(
                src=str(item["src"]),
                dst=str(item["dst"]),
                label=str(item.get("label", "")),
                kind=str(item.get("kind", "")),
            )
        )
    graph = SceneGraph(prompt=prompt, nodes=tuple(nodes), edges=tuple(edges))
    boxes = None
    if "layout" in raw and raw["layout"] is not None:
        boxes = layout_mod.LayoutSet.from_json_dict(raw["layout"])
    return graph, boxes


def serialize_scene(graph: SceneGraph, boxes=None) -> str:
    """Inverse of parse_scene_document for valid graphs (round-trips)."""
    doc = {
        "prompt": graph.prompt.text,
        "nodes": [
            {"id": n.id, "name": n.name, "prompt": n.prompt} for n in graph.nodes
        ],
        "edges": [
            {"src": e.src, "dst": e.dst, "label": e.label, "kind": e.kind}
            for e in graph.edges
        ],
    }
    if boxes is not None:
        doc["layout"] = boxes.to_json_dict()
    return json.dumps(doc, indent=2, sort_keys=True)


def partition_nodes(graph: SceneGraph) -> Partition:
    """Split nodes into singles and interaction super-nodes.

    Connected components of the interaction-edge subgraph of size 2 become
    super-nodes; nodes touched only by spatial edges stay single. Larger
    interaction components are rejected (everything downstream is pairwise).
    """
    adjacency: dict[str, set[str]] = {n.id: set() for n in graph.nodes}
    pair_edge: dict[frozenset, RelationEdge] = {}
    for e in graph.interaction_edges():
        adjacency[e.src].add(e.dst)
        adjacency[e.dst].add(e.src)
        pair_edge.setdefault(frozenset((e.src, e.dst)), e)

    seen: set[str] = set()
    singles: list[str] = []
    supers: list[SuperNode] = []
    for node in sorted(adjacency):
        if node in seen:
            continue
        component = _component(node, adjacency)
        seen |= component
        if len(component) == 1:
            singles.append(node)
        elif len(component) == 2:
            edge = pair_edge[frozenset(component)]
            supers.append(SuperNode(src=edge.src, dst=edge.dst, edge=edge))
        else:
            raise UnsupportedInteractionChainError(component)

    supers.sort(key=lambda s: s.id)
    return Partition(singles=tuple(sorted(singles)), supernodes=tuple(supers))


def _component(start, adjacency):
    stack = [start]
    out = set()
    while stack:
        cur = stack.pop()
        if cur in out:
            continue
        out.add(cur)
        stack.extend(adjacency[cur] - out)
    return out


def _article(name: str) -> str:
    return "an" if name.strip()[:1].lower() in "aeiou" else "a"


def supernode_prompt(super_node: SuperNode, graph: SceneGraph) -> str:
    """Relation prompt for a super-node, e.g. "an astronaut riding a horse"."""
    src = graph.node(super_node.src).name
    dst = graph.node(super_node.dst).name
    label = super_node.edge.label.strip()
    return f"{_article(src)} {src} {label} {_article(dst)} {dst}"


# ---------------------------------------------------------------------------
# LLM-backed composition
# ---------------------------------------------------------------------------

GRAPH_TEMPLATE = (
    "Generate a scene graph with nodes (objects) and edges (relations) for the "
    'scene described by: "{prompt}". Classify every edge as "spatial" or '
    '"interaction". Use the minimum number of edges needed to connect all '
    "nodes. Reply with a JSON object of the form "
    '{{"nodes": [{{"id", "name", "prompt"}}], '
    '"edges": [{{"src", "dst", "label", "kind"}}]}}.'
)

LAYOUT_TEMPLATE = (
    "#ROLE: You are an expert in laying out realistic 3D scenes.\n"
    "#CONTEXT: A scene is described by a scene graph with nodes: {the nodes} "
    "and edges: {the edges}. The floor is the plane y=0 in a right-handed, "
    "y-up coordinate system measured in meters.\n"
    "#OBJECTIVE: Predict an axis-aligned bounding box for every node. Each "
    "box is a rectangular cuboid given by its min and max corners. Respect "
    "all of the following rules:\n"
    "- Relation compliance: positions must realize the edges: {the edges}.\n"
    "- Overlap: boxes of the interacting pairs {the interactions} must "
    "partially overlap, but never entirely; all other pairs must not "
    "overlap.\n"
    "- Grounding: nothing may dip below y=0, and unsupported objects rest "
    "on the floor or on other boxes.\n"
    "- Plausible size: use real-world object sizes, without extreme size "
    "disparities between boxes.\n"
    "- Thickness: every box needs positive extent along x, y, and z.\n"
    "- Reference usage: place each new box relative to the boxes already "
    "chosen.\n"
    'Reply with a JSON object of the form {{"layout": {{id: {{"min": '
    '[x, y, z], "max": [x, y, z]}}}}}}.'
)


class LLMClient:
    """Text-completion contract: one completion per request string."""

    def complete(self, request: str) -> str:
        raise NotImplementedError


class FixtureLLMClient(LLMClient):
    """Replays recorded completions in order. For tests and offline runs."""

    def __init__(self, replies):
        self._replies = list(replies)
        self.requests: list[str] = []

    def complete(self, request: str) -> str:
        self.requests.append(request)
        if not self._replies:
            raise UnparseableReplyError("fixture client ran out of replies", "")
        return self._replies.pop(0)


_FENCE_RE = re.compile(r"```(?:json)?\s*(.*?)```", re.DOTALL)


def _extract_json(reply: str):
    """Pull the first JSON object out of an LLM reply (fenced or inline)."""
    candidates = [m.strip() for m in _FENCE_RE.findall(reply)]
    if not candidates:
        start = reply.find("{")
        end = reply.rfind("}")
        if start >= 0 and end > start:
            candidates = [reply[start : end + 1]]
    for text in candidates:
        try:
            return json.loads(text)
        except json.JSONDecodeError:
            continue
    raise UnparseableReplyError("no parseable JSON object in reply", reply)


def _format_edges(edges):
    return "; ".join(f"{e.src} -[{e.label}]-> {e.dst}" for e in edges) or "none"


def compose_with_llm(prompt: ScenePrompt, client: LLMClient):
    """Build a graph and layout from two LLM completions.

    First request asks for the graph, second for the layout given that
    graph. The returned layout has already passed validation.
    """
    graph_reply = client.complete(GRAPH_TEMPLATE.format(prompt=prompt.text))
    raw_graph = _extract_json(graph_reply)
    if "nodes" not in raw_graph:
        raise UnparseableReplyError("reply is missing the nodes section", graph_reply)
    try:
        graph, _ = _graph_from_raw(
            {"prompt": prompt.text, "nodes": raw_graph["nodes"], "edges": raw_graph.get("edges", [])}
        )
    except (SceneValidationError, KeyError) as e:
        raise UnparseableReplyError(f"graph reply invalid: {e}", graph_reply) from e

    interactions = [e for e in graph.edges if e.kind == "interaction"]
    layout_request = LAYOUT_TEMPLATE.format(**{
        "the nodes": ", ".join(n.id for n in graph.nodes),
        "the edges": _format_edges(graph.edges),
        "the interactions": _format_edges(interactions),
    })
    layout_reply = client.complete(layout_request)
    raw_layout = _extract_json(layout_reply)
    if "layout" not in raw_layout:
        raise UnparseableReplyError("reply is missing the layout section", layout_reply)
    try:
        boxes = layout_mod.LayoutSet.from_json_dict(raw_layout["layout"])
    except (SceneValidationError, ValueError, KeyError, TypeError) as e:
        raise UnparseableReplyError(f"layout reply invalid: {e}", layout_reply) from e

    report = layout_mod.validate_layout(boxes, graph)
    report.raise_if_failed()
    return graph, boxes
