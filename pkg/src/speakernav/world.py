"""Synthetic navigable graph world.

Rooms are clusters of nodes on a coarse grid; every node carries a room type
and a landmark object. Panoramas have 36 views (12 headings x 3 elevations)
whose features are a deterministic function of the node, the viewing
direction and a seeded noise stream. Headings are radians, counter-clockwise
from +x, so a positive relative heading is a left turn.
"""
from __future__ import annotations

import hashlib
import json
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import GenerationError, SamplingError, ValidationError
from .progress import InstructionRecord, assign_progress
from .speaker import PanoramaStep

ROOM_TYPES = ("kitchen", "bedroom", "bathroom", "hallway", "lounge", "office",
              "dining", "garage", "closet", "library", "laundry", "studio")
OBJECTS = ("table", "sofa", "bed", "sink", "lamp", "plant", "chair", "desk", "mirror",
           "painting", "stove", "shelf", "piano", "clock", "rug", "fireplace", "bench",
           "cabinet", "television", "statue")

N_HEADINGS = 12
ELEVATIONS = (-math.pi / 6, 0.0, math.pi / 6)
N_VIEWS = N_HEADINGS * len(ELEVATIONS)
D_V = 64
D_O = 4
TURN_THRESHOLD = math.radians(30)
NOISE_SCALE = 0.1

# feature layout within the d_v = 64 vector
_ROOM = slice(0, 12)
_OBJECT = slice(12, 32)
_NEIGHBOR = 32
_ELEVATION = slice(33, 36)
_NEIGHBOR_ROOM = slice(36, 48)
_NOISE = slice(48, 64)


@dataclass
class Node:
    id: int
    room: int
    room_type: str
    object: str
    position: Tuple[float, float]


@dataclass
class WorldGraph:
    graph_id: str
    seed: int
    nodes: List[Node]
    edges: List[Tuple[int, int]]
    n_rooms: int = 1
    nodes_per_room: int = 1
    _adj: Dict[int, List[int]] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.edges = sorted((min(a, b), max(a, b)) for a, b in self.edges)
        adj = {n.id: [] for n in self.nodes}
        for a, b in self.edges:
            adj[a].append(b)
            adj[b].append(a)
        self._adj = {k: sorted(v) for k, v in adj.items()}

    def neighbors(self, node: int) -> List[int]:
        if node not in self._adj:
            raise IndexError(f"node {node} not in graph {self.graph_id}")
        return self._adj[node]

    def position(self, node: int) -> np.ndarray:
        return np.asarray(self.nodes[node].position)

    def heading(self, a: int, b: int) -> float:
        d = self.position(b) - self.position(a)
        return math.atan2(d[1], d[0])

    def is_connected(self) -> bool:
        return len(bfs_distances(self, 0)) == len(self.nodes)

    def to_dict(self) -> dict:
        return {
            "format": "speakernav.world/1",
            "graph_id": self.graph_id,
            "seed": self.seed,
            "n_rooms": self.n_rooms,
            "nodes_per_room": self.nodes_per_room,
            "nodes": [{"id": n.id, "room": n.room, "room_type": n.room_type,
                       "object": n.object, "position": list(n.position)} for n in self.nodes],
            "edges": [list(e) for e in self.edges],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WorldGraph":
        if d.get("format") != "speakernav.world/1":
            raise ValidationError(f"unknown world format {d.get('format')!r}")
        nodes = [Node(n["id"], n["room"], n["room_type"], n["object"], tuple(n["position"]))
                 for n in d["nodes"]]
        return cls(d["graph_id"], d["seed"], nodes, [tuple(e) for e in d["edges"]],
                   d["n_rooms"], d["nodes_per_room"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


def bfs_distances(graph: WorldGraph, source: int) -> Dict[int, int]:
    dist = {source: 0}
    queue = deque([source])
    while queue:
        u = queue.popleft()
        for v in graph.neighbors(u):
            if v not in dist:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def _wrap(angle: float) -> float:
    """Map an angle to (-pi, pi]."""
    a = math.fmod(angle + math.pi, 2 * math.pi)
    if a <= 0:
        a += 2 * math.pi
    return a - math.pi


# ---------------------------------------------------------------- generation

def generate_world(n_rooms: int, nodes_per_room: int, seed: int, graph_id: Optional[str] = None,
                   max_retries: int = 20) -> WorldGraph:
    if n_rooms < 1 or nodes_per_room < 1:
        raise ValueError("n_rooms and nodes_per_room must be >= 1")
    rng = np.random.default_rng(seed)
    graph_id = graph_id or f"world-{seed}"
    for _ in range(max_retries):
        graph = _try_generate(n_rooms, nodes_per_room, seed, graph_id, rng)
        if graph.is_connected():
            return graph
    raise GenerationError(f"could not build a connected world for seed {seed}")


def _try_generate(n_rooms, per_room, seed, graph_id, rng) -> WorldGraph:
    cols = math.ceil(math.sqrt(n_rooms))
    if n_rooms <= len(ROOM_TYPES):
        types = rng.permutation(len(ROOM_TYPES))[:n_rooms]
    else:
        types = rng.integers(len(ROOM_TYPES), size=n_rooms)
    nodes: List[Node] = []
    edges = set()
    members: List[List[int]] = []
    for r in range(n_rooms):
        center = np.array([(r % cols) * 4.0, (r // cols) * 4.0])
        objs = rng.permutation(len(OBJECTS))
        ids = []
        for k in range(per_room):
            for _ in range(100):
                pos = center + rng.uniform(-1.4, 1.4, size=2)
                if all(np.hypot(*(pos - np.asarray(nodes[i].position))) > 0.6 for i in ids):
                    break
            node_id = len(nodes)
            nodes.append(Node(node_id, r, ROOM_TYPES[types[r]], OBJECTS[objs[k % len(OBJECTS)]],
                              (round(float(pos[0]), 6), round(float(pos[1]), 6))))
            ids.append(node_id)
        members.append(ids)
        # nearest-attachment spanning tree, then a few chords
        pts = {i: np.asarray(nodes[i].position) for i in ids}
        for k in range(1, len(ids)):
            i = ids[k]
            j = min(ids[:k], key=lambda m: np.hypot(*(pts[i] - pts[m])))
            edges.add((min(i, j), max(i, j)))
        for a in ids:
            for b in ids:
                if a < b and (a, b) not in edges and rng.random() < 0.25:
                    edges.add((a, b))
    # inter-room doors: spanning tree over the room grid plus extra doors
    grid_pairs = []
    for r in range(n_rooms):
        if (r % cols) + 1 < cols and r + 1 < n_rooms:
            grid_pairs.append((r, r + 1))
        if r + cols < n_rooms:
            grid_pairs.append((r, r + cols))
    order = rng.permutation(len(grid_pairs)) if grid_pairs else []
    parent = list(range(n_rooms))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for k in order:
        r1, r2 = grid_pairs[k]
        tree = find(r1) != find(r2)
        if tree:
            parent[find(r1)] = find(r2)
        if tree or rng.random() < 0.3:
            a, b = min(((a, b) for a in members[r1] for b in members[r2]),
                       key=lambda ab: np.hypot(*(np.asarray(nodes[ab[0]].position)
                                                 - np.asarray(nodes[ab[1]].position))))
            edges.add((min(a, b), max(a, b)))
    return WorldGraph(graph_id, seed, nodes, sorted(edges), n_rooms, per_room)


# ---------------------------------------------------------------- rendering

def view_angles() -> np.ndarray:
    """Relative (heading, elevation) of the 36 views, heading-major within each elevation."""
    out = np.zeros((N_VIEWS, 2))
    for k in range(N_VIEWS):
        out[k, 0] = _wrap((k % N_HEADINGS) * 2 * math.pi / N_HEADINGS)
        out[k, 1] = ELEVATIONS[k // N_HEADINGS]
    return out


_VIEW_ANGLES = view_angles()


def angle_encoding(rel_heading: float, elevation: float) -> np.ndarray:
    return np.array([math.sin(rel_heading), math.cos(rel_heading),
                     math.sin(elevation), math.cos(elevation)])


def nearest_view(rel_heading: float) -> int:
    """Index of the elevation-0 view closest to ``rel_heading``."""
    h = int(round(_wrap(rel_heading) / (2 * math.pi / N_HEADINGS))) % N_HEADINGS
    return N_HEADINGS + h


def _view_noise(graph: WorldGraph, node: int) -> np.ndarray:
    rng = np.random.default_rng([graph.seed, node, 7919])
    return rng.normal(scale=NOISE_SCALE, size=(N_VIEWS, _NOISE.stop - _NOISE.start))


def render_panorama(graph: WorldGraph, node: int, heading: float,
                    next_node: Optional[int] = None) -> PanoramaStep:
    """Views at ``node`` relative to ``heading``; the action view faces ``next_node``
    (or straight ahead when ``next_node`` is None)."""
    info = graph.nodes[node] if 0 <= node < len(graph.nodes) else None
    if info is None or info.id != node:
        raise IndexError(f"node {node} not in graph {graph.graph_id}")
    feats = np.zeros((N_VIEWS, D_V))
    feats[:, _ROOM.start + ROOM_TYPES.index(info.room_type)] = 1.0
    feats[:, _OBJECT.start + OBJECTS.index(info.object)] = 1.0
    for k in range(N_VIEWS):
        feats[k, _ELEVATION.start + k // N_HEADINGS] = 1.0
    for nb in graph.neighbors(node):
        k = nearest_view(graph.heading(node, nb) - heading)
        feats[k, _NEIGHBOR] = 1.0
        feats[k, _NEIGHBOR_ROOM.start + ROOM_TYPES.index(graph.nodes[nb].room_type)] = 1.0
    feats[:, _NOISE] = _view_noise(graph, node)
    angles = np.stack([angle_encoding(h, e) for h, e in _VIEW_ANGLES])
    if next_node is None:
        rel = 0.0
    else:
        if next_node not in graph.neighbors(node):
            raise ValidationError(f"{next_node} is not adjacent to {node}")
        rel = _wrap(graph.heading(node, next_node) - heading)
    k = nearest_view(rel)
    return PanoramaStep(feats, angles, feats[k].copy(), angle_encoding(rel, 0.0))


def path_headings(graph: WorldGraph, path: Sequence[int]) -> List[float]:
    """Agent heading on arrival at each node; the start faces the first move."""
    if len(path) == 1:
        return [0.0]
    heads = [graph.heading(path[0], path[1])]
    for i in range(1, len(path)):
        heads.append(graph.heading(path[i - 1], path[i]))
    return heads


def render_path(graph: WorldGraph, path: Sequence[int]) -> List[PanoramaStep]:
    heads = path_headings(graph, path)
    return [render_panorama(graph, node, heads[i], path[i + 1] if i + 1 < len(path) else None)
            for i, node in enumerate(path)]


# ---------------------------------------------------------------- language

def turn_at(graph: WorldGraph, path: Sequence[int], i: int) -> Optional[str]:
    """Turn word at interior node ``i`` from the cross product of the two moves."""
    if i < 1 or i > len(path) - 2:
        return None
    u = graph.position(path[i]) - graph.position(path[i - 1])
    v = graph.position(path[i + 1]) - graph.position(path[i])
    cross = u[0] * v[1] - u[1] * v[0]
    angle = math.atan2(cross, float(u @ v))
    if abs(angle) <= TURN_THRESHOLD:
        return None
    return "left" if cross > 0 else "right"


def room_phases(graph: WorldGraph, path: Sequence[int]) -> List[Tuple[int, int]]:
    """Maximal runs of consecutive nodes in the same room, as [start, end) spans."""
    spans, start = [], 0
    for i in range(1, len(path)):
        if graph.nodes[path[i]].room != graph.nodes[path[i - 1]].room:
            spans.append((start, i))
            start = i
    spans.append((start, len(path)))
    return spans


def describe_path(graph: WorldGraph, path: Sequence[int]):
    """Templated instruction: one phrase per room phase.

    Returns (words, segments, sub_paths) where segments index ``words``.
    """
    phases = room_phases(graph, path)
    words: List[str] = []
    segments = []
    n = len(path)
    for j, (s, e) in enumerate(phases):
        phrase: List[str] = []
        final = j == len(phases) - 1
        pivot = (n - 2 if s <= n - 2 else None) if final else e - 1
        turn = turn_at(graph, path, pivot) if pivot is not None else None
        if turn:
            phrase += ["turn", turn, "and"]
        if final:
            phrase += ["stop", "at", "the", graph.nodes[path[-1]].object]
        else:
            phrase += ["walk", "past", "the", graph.nodes[path[e - 1]].object,
                       "and", "enter", "the", graph.nodes[path[e]].room_type]
        segments.append((len(words), len(words) + len(phrase)))
        words += phrase
    return words, segments, phases


def parse_instruction(words: Sequence[str]) -> Optional[List[dict]]:
    """Parse a templated instruction; None when it does not follow the grammar."""
    phrases, i, words = [], 0, list(words)

    def take(expected):
        nonlocal i
        if i < len(words) and (words[i] == expected if isinstance(expected, str)
                               else words[i] in expected):
            i += 1
            return words[i - 1]
        return None

    while i < len(words):
        turn = None
        if take("turn"):
            turn = take(("left", "right"))
            if turn is None or take("and") is None:
                return None
        if take("walk"):
            if not (take("past") and take("the")):
                return None
            obj = take(OBJECTS)
            if obj is None or not (take("and") and take("enter") and take("the")):
                return None
            room = take(ROOM_TYPES)
            if room is None:
                return None
            phrases.append({"turn": turn, "object": obj, "room": room, "final": False})
        elif take("stop"):
            if not (take("at") and take("the")):
                return None
            obj = take(OBJECTS)
            if obj is None or i != len(words):
                return None
            phrases.append({"turn": turn, "object": obj, "room": None, "final": True})
        else:
            return None
    if not phrases or not phrases[-1]["final"]:
        return None
    return phrases


# ---------------------------------------------------------------- episodes

@dataclass
class Episode:
    graph_id: str
    trajectory: List[int]
    instruction: InstructionRecord
    steps: Optional[List[PanoramaStep]] = None

    @property
    def goal(self) -> int:
        return self.trajectory[-1]


def sample_path(graph: WorldGraph, min_len: int, max_len: int, rng: np.random.Generator,
                max_retries: int = 1000) -> List[int]:
    """Self-avoiding random walk (so never an immediate backtrack) of min_len..max_len nodes."""
    if not 2 <= min_len <= max_len:
        raise ValueError("need 2 <= min_len <= max_len")
    n_nodes = len(graph.nodes)
    for _ in range(max_retries):
        length = int(rng.integers(min_len, max_len + 1))
        path = [int(rng.integers(n_nodes))]
        while len(path) < length:
            options = [v for v in graph.neighbors(path[-1]) if v not in path]
            if not options:
                break
            path.append(int(options[rng.integers(len(options))]))
        if len(path) == length:
            return path
    raise SamplingError(f"no walk of {min_len}-{max_len} nodes found in {graph.graph_id}")


def make_episode(graph: WorldGraph, path: Sequence[int], render: bool = True) -> Episode:
    words, segments, phases = describe_path(graph, path)
    record = assign_progress(words, segments, phases)
    return Episode(graph.graph_id, list(path), record, render_path(graph, path) if render else None)


def sample_episode(graph: WorldGraph, min_len: int, max_len: int, rng: np.random.Generator,
                   render: bool = True) -> Episode:
    return make_episode(graph, sample_path(graph, min_len, max_len, rng), render)
