"""Command-line entry point.

Every subcommand writes under a run directory named ``<timestamp>-<config hash>``
inside ``--runs`` (or exactly ``--out`` when given) and prints a one-line JSON
summary. Failures print one JSON line ``{"error": <kind>, "message": ...}`` to
stderr and exit 1; usage errors exit 2.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path
from typing import List, Optional

import numpy as np

from .checkpoints import load_follower, load_speaker, save_follower, save_speaker
from .datasets import SplitSpec, WorldStore, export_dataset, load_split, record_episode
from .errors import ValidationError
from .fileio import atomic_write, canonical_json, config_hash, read_jsonl, read_records, write_jsonl
from .metrics import evaluate_captions
from .nn import MfdConfig
from .speaker import TrajectoryBatch, mcd_uncertainty
from .training import (RunConfig, SpeakerData, ab_follower, back_translate, build_vocab,
                       evaluate_follower, evaluate_speaker, follower_episodes, sample_unlabelled_paths,
                       train_follower, train_speaker)
from .world import generate_world, render_path


def _set_path(d: dict, dotted: str, value):
    keys = dotted.split(".")
    for k in keys[:-1]:
        if not isinstance(d.get(k), dict):
            raise ValidationError(f"--set {dotted}: {k!r} is not a config section")
        d = d[k]
    if keys[-1] not in d:
        raise ValidationError(f"--set {dotted}: unknown key {keys[-1]!r}")
    d[keys[-1]] = value


def _overrides(base: dict, pairs: List[str]) -> dict:
    for pair in pairs or []:
        if "=" not in pair:
            raise ValidationError(f"--set expects key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        _set_path(base, key, value)
    return base


def _load_json(path) -> dict:
    if not path:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON config ({exc.msg})") from exc


def run_config(args) -> RunConfig:
    base = RunConfig(**_load_json(getattr(args, "config", None))).to_dict()
    return RunConfig.from_dict(_overrides(base, getattr(args, "set", None)))


def run_dir(args, chash: str) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        out = Path(args.runs) / f"{time.strftime('%Y%m%d-%H%M%S')}-{chash}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(summary: dict):
    print(json.dumps(summary, sort_keys=True))


def _episodes_from_records(records, store, render=True):
    return [record_episode(r, store, render) for r in records]


# ---------------------------------------------------------------- subcommands

def cmd_generate_world(args):
    cfg = {"n_rooms": args.rooms, "nodes_per_room": args.nodes_per_room, "seed": args.seed}
    out = run_dir(args, config_hash(cfg))
    g = generate_world(args.rooms, args.nodes_per_room, args.seed, f"world-{args.seed}")
    path = atomic_write(out / f"{g.graph_id}.json", g.to_json())
    _emit({"world": str(path), "content_hash": g.content_hash(), "nodes": len(g.nodes)})


def cmd_export_dataset(args):
    d = SplitSpec().to_dict()
    d.update(_load_json(args.config))
    spec = SplitSpec(**_overrides(d, args.set))
    out = run_dir(args, config_hash(spec.to_dict()))
    paths = export_dataset(spec, out)
    _emit({"data_dir": str(out), "manifest": str(paths["manifest"]),
           "config_hash": config_hash(spec.to_dict())})


def cmd_train_speaker(args):
    rc = run_config(args)
    data_dir = args.data or rc.data_dir
    out = run_dir(args, rc.hash)
    train, store = load_split(data_dir, "train")
    seen, _ = load_split(data_dir, "val_seen", store)
    unseen, _ = load_split(data_dir, "val_unseen", store)
    vocab = build_vocab(train)
    history_path = out / "history.jsonl"
    lines = []

    def log(rec):
        lines.append(rec)
        write_jsonl(history_path, lines)

    # checkpoint selection on seen-graph validation; unseen graphs are only scored at the end
    run = train_speaker(rc.speaker, vocab, SpeakerData(train, vocab), SpeakerData(seen, vocab),
                        rc.speaker_iterations, rc.speaker_eval_every, rc.seed, log=log)
    report, _ = evaluate_speaker(run.model, SpeakerData(unseen, vocab))
    prov = {"config_hash": rc.hash, "seed": rc.seed, "best_iteration": run.best_iteration,
            "data_dir": str(data_dir)}
    ckpt = save_speaker(out / "speaker.ckpt", run.model, prov)
    atomic_write(out / "run.json", canonical_json({"run_config": rc.to_dict(), **prov,
                                                   "val_unseen": report.to_dict()}) + "\n")
    _emit({"checkpoint": str(ckpt), "history": str(history_path), "best_val_seen_bleu4": run.best_bleu4,
           "val_unseen_bleu4": report.to_dict()["bleu4"], "best_iteration": run.best_iteration,
           "config_hash": rc.hash})


def cmd_speak(args):
    model, header = load_speaker(args.checkpoint)
    out = run_dir(args, header["provenance"]["config_hash"])
    records = read_records(args.trajectory)
    store = WorldStore(args.worlds)
    eps = _episodes_from_records(records, store)
    rng = np.random.default_rng(args.seed)
    gens = model.generate([e.steps for e in eps], mode=args.mode, temperature=args.temperature,
                          rng=rng)
    preds = [dict(r, instruction=g.words, pseudo=True, segments=[], sub_paths=[],
                  progress_trace=[round(x, 6) for x in g.progress], truncated=g.truncated)
             for r, g in zip(records, gens)]
    path = write_jsonl(out / "predictions.jsonl", preds)
    _emit({"predictions": str(path), "count": len(preds)})
    if args.print:
        for p in preds:
            print(" ".join(p["instruction"]))


def cmd_evaluate_speaker(args):
    pred = read_jsonl(args.pred, ("id", "instruction"))
    ref = read_jsonl(args.ref, ("id", "instruction"))
    refs = {}
    for r in ref:
        refs.setdefault(r["id"], []).append(r["instruction"])
    missing = [p["id"] for p in pred if p["id"] not in refs]
    if missing:
        raise ValidationError(f"prediction ids without a reference: {missing[:5]}")
    report = evaluate_captions([p["instruction"] for p in pred], [refs[p["id"]] for p in pred])
    summary = report.to_dict()
    out = run_dir(args, config_hash({"pred": str(args.pred), "ref": str(args.ref)}))
    atomic_write(out / "speaker_eval.json", canonical_json(summary) + "\n")
    _emit(summary)


def cmd_back_translate(args):
    rc = run_config(args)
    model, header = load_speaker(args.checkpoint)
    data_dir = args.data or rc.data_dir
    out = run_dir(args, rc.hash)
    train, store = load_split(data_dir, "train", render=False)
    manifest = json.loads((Path(data_dir) / "manifest.json").read_text())
    spec = manifest["split_spec"]
    graphs = [store[g] for g in sorted({e.graph_id for e in train})]
    taken = {(e.graph_id, tuple(e.trajectory)) for e in train}
    paths = sample_unlabelled_paths(graphs, rc.bt_paths, spec["min_len"], spec["max_len"],
                                    rc.bt_seed, exclude=taken)
    prov = {"config_hash": rc.hash, "bt_seed": rc.bt_seed,
            "speaker_hash": header["provenance"]["content_hash"]}
    recs, stats = back_translate(model, paths, rc.bt_mfd1_rate, rc.bt_seed,
                                 rc.bt_min_content_tokens, provenance=prov)
    path = write_jsonl(out / "pseudo.jsonl", recs)
    atomic_write(out / "back_translate.json", canonical_json({"stats": stats, **prov}) + "\n")
    _emit({"pseudo": str(path), **stats})


def _follower_splits(data_dir, augmented):
    train, store = load_split(data_dir, "train", render=False)
    seen, _ = load_split(data_dir, "val_seen", store, render=False)
    unseen, _ = load_split(data_dir, "val_unseen", store, render=False)
    vocab = build_vocab(train)
    aug = []
    if augmented:
        aug = follower_episodes(_episodes_from_records(read_records(augmented), store, False), vocab)
    return (vocab, store, follower_episodes(train, vocab), aug,
            follower_episodes(seen, vocab), follower_episodes(unseen, vocab))


def cmd_train_follower(args):
    rc = run_config(args)
    out = run_dir(args, rc.hash)
    vocab, store, D, Dp, seen, unseen = _follower_splits(args.data or rc.data_dir, args.augmented)
    run = train_follower(rc.follower, vocab, store, D, Dp, rc.aug_ratio, seen, seed=rc.seed)
    write_jsonl(out / "history.jsonl", run.history)
    ckpt = save_follower(out / "follower.ckpt", run.model,
                         {"config_hash": rc.hash, "seed": rc.seed, "augmented": bool(Dp)})
    _emit({"checkpoint": str(ckpt), "best_val_sr": run.best_sr, "config_hash": rc.hash})


def cmd_evaluate_follower(args):
    model, header = load_follower(args.checkpoint)
    out = run_dir(args, header["provenance"]["config_hash"])
    eps, store = load_split(args.data, args.split, render=False)
    agg, per = evaluate_follower(model, follower_episodes(eps, model.vocab), store)
    atomic_write(out / "follower_eval.json", canonical_json({"aggregate": agg, "per_episode": per}) + "\n")
    _emit({"split": args.split, **agg})


def cmd_ab_run(args):
    rc = run_config(args)
    out = run_dir(args, rc.hash)
    vocab, store, D, Dp, seen, unseen = _follower_splits(args.data or rc.data_dir, args.augmented)
    report = ab_follower(rc.follower, vocab, store, D, Dp, seen, unseen, rc.ab_seeds, rc.aug_ratio)
    report["run_config_hash"] = rc.hash
    atomic_write(out / "ab_report.json", json.dumps(report, sort_keys=True, indent=1) + "\n")
    summary = {f"{arm}_{split}_{m}": report["arms"][arm]["summary"][split][m]["mean"]
               for arm in ("A", "B") for split in ("val_seen", "val_unseen") for m in ("SR", "SPL")}
    _emit({"report": str(out / "ab_report.json"), **summary})


def cmd_mcd_uncertainty(args):
    model, header = load_speaker(args.checkpoint)
    out = run_dir(args, header["provenance"]["config_hash"])
    if args.rate is not None:
        model.set_mfd(MfdConfig.uniform(args.rate))
    records = read_records(args.trajectory)
    store = WorldStore(args.worlds)
    rng = np.random.default_rng(args.seed)
    rows = []
    for r in records:
        ep = record_episode(r, store)
        tokens = model.vocab.encode(r["instruction"]) if r["instruction"] and not args.greedy else None
        var = mcd_uncertainty(model, TrajectoryBatch.from_trajectories([ep.steps]), tokens,
                              args.rounds, rng)
        rows.append({"id": r["id"], "variance": var})
    write_jsonl(out / "mcd.jsonl", rows)
    _emit({"count": len(rows), "mean_variance": float(np.mean([r["variance"] for r in rows]))})


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="speakernav", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text, config=True):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--out", help="exact output directory (overrides --runs naming)")
        sp.add_argument("--runs", default="runs", help="parent of timestamped run directories")
        if config:
            sp.add_argument("--config", help="JSON config file")
            sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                            help="override a config key (dotted path, JSON value)")
        sp.set_defaults(func=fn)
        return sp

    sp = add("generate-world", cmd_generate_world, "generate one world graph", config=False)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--rooms", type=int, default=6)
    sp.add_argument("--nodes-per-room", type=int, default=4)

    add("export-dataset", cmd_export_dataset, "write train/val_seen/val_unseen splits")

    sp = add("train-speaker", cmd_train_speaker, "train the speaker")
    sp.add_argument("--data")

    sp = add("speak", cmd_speak, "generate instructions for trajectories", config=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--trajectory", required=True, help="JSONL dataset records")
    sp.add_argument("--worlds", help="directory of world files (default: regenerate)")
    sp.add_argument("--mode", choices=("greedy", "sample"), default="greedy")
    sp.add_argument("--temperature", type=float, default=1.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--print", action="store_true", help="also print each instruction")

    sp = add("evaluate-speaker", cmd_evaluate_speaker, "BLEU/ROUGE-L/CIDEr of predictions", config=False)
    sp.add_argument("--pred", required=True)
    sp.add_argument("--ref", required=True)

    sp = add("back-translate", cmd_back_translate, "pseudo-instructions for sampled paths")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data")

    for name, fn, text in (("train-follower", cmd_train_follower, "train the follower"),
                           ("ab-run", cmd_ab_run, "follower A/B: D versus D + D'")):
        sp = add(name, fn, text)
        sp.add_argument("--data")
        sp.add_argument("--augmented", help="pseudo-instruction JSONL")

    sp = add("evaluate-follower", cmd_evaluate_follower, "navigation metrics", config=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", choices=("train", "val_seen", "val_unseen"), default="val_unseen")

    sp = add("mcd-uncertainty", cmd_mcd_uncertainty, "Monte-Carlo dropout loss variance", config=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--trajectory", required=True)
    sp.add_argument("--worlds")
    sp.add_argument("--rounds", type=int, default=5)
    sp.add_argument("--rate", type=float, help="set all five dropout rates")
    sp.add_argument("--greedy", action="store_true", help="score the greedy decode, not the record text")
    sp.add_argument("--seed", type=int, default=0)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (ValueError, RuntimeError, OSError, KeyError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
