"""Split export and record <-> episode conversion.

Datasets never store feature arrays: each record names the world it was
sampled from (``features_ref``) and panoramas are re-rendered on load.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from .errors import ValidationError
from .fileio import atomic_write, config_hash, read_records, write_jsonl, canonical_json
from .progress import assign_progress, validate_alignment
from .world import (Episode, WorldGraph, generate_world, make_episode, render_path,
                    sample_path)

SPLITS = ("train", "val_seen", "val_unseen")


@dataclass
class SplitSpec:
    train_graphs: List[int] = field(default_factory=lambda: list(range(0, 16)))
    unseen_graphs: List[int] = field(default_factory=lambda: list(range(100, 104)))
    n_train: int = 512
    n_val_seen: int = 128
    n_val_unseen: int = 128
    n_rooms: int = 6
    nodes_per_room: int = 4
    min_len: int = 4
    max_len: int = 7
    seed: int = 0

    def validate(self):
        overlap = sorted(set(self.train_graphs) & set(self.unseen_graphs))
        if overlap:
            raise ValidationError(f"unseen graphs overlap training graphs: {overlap}")
        if not self.train_graphs or not self.unseen_graphs:
            raise ValidationError("both train and unseen graph sets must be non-empty")

    def to_dict(self) -> dict:
        return asdict(self)


def build_world(seed: int, spec: SplitSpec) -> WorldGraph:
    return generate_world(spec.n_rooms, spec.nodes_per_room, seed, graph_id=f"world-{seed}")


def episode_record(ep: Episode, rec_id: str, graph: WorldGraph, pseudo: bool = False) -> dict:
    ins = ep.instruction
    return {
        "id": rec_id,
        "graph_id": graph.graph_id,
        "trajectory": list(ep.trajectory),
        "instruction": list(ins.content),
        "segments": [list(s) for s in ins.segments],
        "sub_paths": [list(s) for s in ins.sub_paths],
        "pseudo": pseudo,
        "features_ref": {"graph_id": graph.graph_id, "seed": graph.seed,
                         "n_rooms": graph.n_rooms, "nodes_per_room": graph.nodes_per_room},
    }


def _sample_split(graphs: Sequence[WorldGraph], n: int, spec: SplitSpec, rng, prefix: str,
                  exclude: set) -> List[dict]:
    out = []
    while len(out) < n:
        g = graphs[int(rng.integers(len(graphs)))]
        path = sample_path(g, spec.min_len, spec.max_len, rng)
        key = (g.graph_id, tuple(path))
        if key in exclude:
            continue
        exclude.add(key)
        ep = make_episode(g, path, render=False)
        validate_alignment(ep.instruction, len(path))
        out.append(episode_record(ep, f"{prefix}-{len(out):05d}", g))
    return out


def export_dataset(spec: SplitSpec, out_dir) -> Dict[str, Path]:
    """Write world files, one JSONL per split and a manifest; return the paths."""
    spec.validate()
    out_dir = Path(out_dir)
    rng = np.random.default_rng(spec.seed)
    train_worlds = [build_world(s, spec) for s in spec.train_graphs]
    unseen_worlds = [build_world(s, spec) for s in spec.unseen_graphs]
    seen = set()
    splits = {
        "train": _sample_split(train_worlds, spec.n_train, spec, rng, "train", seen),
        "val_seen": _sample_split(train_worlds, spec.n_val_seen, spec, rng, "val_seen", seen),
        "val_unseen": _sample_split(unseen_worlds, spec.n_val_unseen, spec, rng, "val_unseen", set()),
    }
    train_ids = {r["graph_id"] for r in splits["train"]}
    if train_ids & {r["graph_id"] for r in splits["val_unseen"]}:
        raise ValidationError("unseen split shares a graph with the training split")
    paths = {}
    for w in train_worlds + unseen_worlds:
        paths[w.graph_id] = atomic_write(out_dir / "worlds" / f"{w.graph_id}.json", w.to_json())
    for name, recs in splits.items():
        paths[name] = write_jsonl(out_dir / f"{name}.jsonl", recs)
    manifest = {"split_spec": spec.to_dict(), "config_hash": config_hash(spec.to_dict()),
                "counts": {k: len(v) for k, v in splits.items()}}
    paths["manifest"] = atomic_write(out_dir / "manifest.json", canonical_json(manifest) + "\n")
    return paths


class WorldStore(dict):
    """graph_id -> WorldGraph, regenerating from ``features_ref`` when not loaded from disk."""

    def __init__(self, world_dir: Optional[Path] = None):
        super().__init__()
        self.world_dir = Path(world_dir) if world_dir else None

    def for_record(self, rec: dict) -> WorldGraph:
        gid = rec["graph_id"]
        if gid not in self:
            path = self.world_dir / f"{gid}.json" if self.world_dir else None
            if path is not None and path.exists():
                import json
                self[gid] = WorldGraph.from_dict(json.loads(path.read_text()))
            else:
                ref = rec["features_ref"]
                self[gid] = generate_world(ref["n_rooms"], ref["nodes_per_room"], ref["seed"], gid)
        return self[gid]


def record_episode(rec: dict, store: WorldStore, render: bool = True) -> Episode:
    graph = store.for_record(rec)
    path = [int(n) for n in rec["trajectory"]]
    for a, b in zip(path, path[1:]):
        if b not in graph.neighbors(a):
            raise ValidationError(f"record {rec['id']}: {a} -> {b} is not an edge")
    if rec["pseudo"] or not rec["segments"]:
        from .progress import InstructionRecord
        from .vocab import BOS, EOS
        ins = InstructionRecord([BOS, *rec["instruction"], EOS], [], [], None)
    else:
        ins = assign_progress(rec["instruction"], rec["segments"], rec["sub_paths"])
        validate_alignment(ins, len(path))
    return Episode(graph.graph_id, path, ins, render_path(graph, path) if render else None)


def load_split(data_dir, name: str, store: Optional[WorldStore] = None, render: bool = True):
    data_dir = Path(data_dir)
    store = store if store is not None else WorldStore(data_dir / "worlds")
    recs = read_records(data_dir / f"{name}.jsonl")
    return [record_episode(r, store, render) for r in recs], store
