"""Speaker training, back-translation and follower A/B experiments.

Every stochastic choice in an iteration (minibatch indices, dropout masks)
draws from ``default_rng([seed, iteration])`` so a failing batch can be
replayed from the seed pair alone.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .errors import ContractError, ParameterError, TrainingDivergence
from .fileio import config_hash
from .follower import FollowerConfig, FollowerModel, build_steps, rollout_batch
from .metrics import aggregate_nav, bleu, evaluate_captions, nav_metrics
from .nn import MfdConfig
from .optim import Adam
from .speaker import Generation, SpeakerConfig, SpeakerModel, TokenBatch, TrajectoryBatch, joint_loss
from .vocab import Vocab
from .world import Episode, WorldGraph, render_path, sample_path

NAV_METRICS = ("SR", "SPL", "NE", "TL")


@dataclass
class RunConfig:
    data_dir: str = "data"
    speaker: SpeakerConfig = field(default_factory=SpeakerConfig.desk)
    follower: FollowerConfig = field(default_factory=FollowerConfig)
    speaker_iterations: int = 3000
    speaker_eval_every: int = 250
    seed: int = 0
    ab_seeds: List[int] = field(default_factory=lambda: [0, 1, 2])
    aug_ratio: float = 1.0  # D' batches per D batch
    bt_paths: int = 512
    bt_mfd1_rate: float = 0.3
    bt_min_content_tokens: int = 0  # 0 disables the short-output filter
    bt_seed: int = 1

    def __post_init__(self):
        if isinstance(self.speaker, dict):
            self.speaker = SpeakerConfig.from_dict(self.speaker)
        if isinstance(self.follower, dict):
            self.follower = FollowerConfig(**self.follower)
        if not 0.0 < self.aug_ratio <= 1.0:
            raise ParameterError(f"aug_ratio must lie in (0, 1], got {self.aug_ratio}")
        if self.speaker_iterations < 0 or self.speaker_eval_every < 0:
            raise ParameterError("iteration budgets must be non-negative")
        if not 0.0 <= self.bt_mfd1_rate < 1.0:
            raise ParameterError("bt_mfd1_rate must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ParameterError(f"unknown run config key(s): {', '.join(unknown)}")
        return cls(**d)

    @property
    def hash(self) -> str:
        return config_hash(self.to_dict())


def uses_augmented(iteration: int, ratio: float) -> bool:
    """Alternation schedule: ``ratio`` augmented batches per original batch."""
    share = ratio / (1.0 + ratio)
    return math.floor((iteration + 1) * share + 1e-9) > math.floor(iteration * share + 1e-9)


def build_vocab(episodes: Sequence[Episode]) -> Vocab:
    return Vocab.build(e.instruction.content for e in episodes)


# ---------------------------------------------------------------- speaker

class SpeakerData:
    """Pre-stacked trajectories and token ids for fast minibatch slicing."""

    def __init__(self, episodes: Sequence[Episode], vocab: Vocab):
        if not episodes:
            raise ParameterError("speaker dataset is empty")
        self.traj = TrajectoryBatch.from_trajectories([e.steps for e in episodes])
        self.ids = [vocab.encode(e.instruction.content) for e in episodes]
        self.progress = [e.instruction.content_progress if e.instruction.segments else None
                         for e in episodes]
        self.references = [[list(e.instruction.content)] for e in episodes]

    def __len__(self):
        return len(self.ids)

    def trajectories(self, idx) -> TrajectoryBatch:
        tb = self.traj.select(idx)
        n = int(tb.step_mask.sum(axis=1).max())
        return TrajectoryBatch(tb.env_features[:, :n], tb.env_angles[:, :n],
                               tb.action_features[:, :n], tb.action_angles[:, :n],
                               tb.step_mask[:, :n])

    def batch(self, idx) -> Tuple[TrajectoryBatch, TokenBatch]:
        idx = np.asarray(idx)
        return self.trajectories(idx), TokenBatch.from_ids([self.ids[i] for i in idx],
                                                          [self.progress[i] for i in idx])


def generate_all(model: SpeakerModel, data: SpeakerData, chunk: int = 128, **kwargs) -> List[Generation]:
    out = []
    for start in range(0, len(data), chunk):
        idx = np.arange(start, min(start + chunk, len(data)))
        out.extend(model.generate(data.trajectories(idx), **kwargs))
    return out


def speaker_bleu4(model: SpeakerModel, data: SpeakerData) -> float:
    gens = generate_all(model, data)
    return bleu([g.words for g in gens], data.references)[3]


def evaluate_speaker(model: SpeakerModel, data: SpeakerData):
    gens = generate_all(model, data)
    return evaluate_captions([g.words for g in gens], data.references), gens


def progress_mse(model: SpeakerModel, data: SpeakerData, chunk: int = 128) -> float:
    """Plain mean squared error of teacher-forced progress estimates over labelled tokens.

    This is twice the training loss term, which carries a 1/2 factor.
    """
    total = count = 0.0
    with T.no_grad():
        for start in range(0, len(data), chunk):
            idx = np.arange(start, min(start + chunk, len(data)))
            traj, tokens = data.batch(idx)
            _, prog = model.forward(traj, tokens)
            m = tokens.spm_mask
            total += float((((prog.data - tokens.progress) ** 2) * m).sum())
            count += float(m.sum())
    return total / count if count else float("nan")


@dataclass
class SpeakerRun:
    model: SpeakerModel
    history: List[dict]
    best_bleu4: Optional[float]
    best_iteration: int


def train_speaker(config: SpeakerConfig, vocab: Vocab, train: SpeakerData,
                  eval_data: Optional[SpeakerData] = None, iterations: int = 3000,
                  eval_every: int = 250, seed: int = 0, model: Optional[SpeakerModel] = None,
                  log: Optional[Callable[[dict], None]] = None,
                  extra_eval: Optional[Callable[[SpeakerModel], dict]] = None,
                  stop_when: Optional[Callable[[dict], bool]] = None) -> SpeakerRun:
    """Minibatch joint-loss training; keeps the parameters with the best eval BLEU-4.

    History records ``{iteration, loss_swp, loss_spm, bleu4}`` are emitted every
    ``eval_every`` iterations (losses averaged over the interval). ``extra_eval``
    adds fields to each record; training ends early once ``stop_when(record)``.
    """
    if len(train) == 0:
        raise ParameterError("speaker dataset is empty")
    model = model if model is not None else SpeakerModel(config, vocab)
    params = model.parameters()
    opt = Adam(params, lr=model.config.lr)
    bs = min(model.config.batch_size, len(train))
    lam, omega = model.config.lam, model.config.omega
    history: List[dict] = []
    best = (None, 0, None)  # bleu, iteration, params
    acc_swp, acc_spm, acc_n = 0.0, 0.0, 0

    def evaluate(it):
        nonlocal best, acc_swp, acc_spm, acc_n
        score = speaker_bleu4(model, eval_data) if eval_data is not None else None
        rec = {"iteration": it, "loss_swp": acc_swp / max(acc_n, 1),
               "loss_spm": acc_spm / max(acc_n, 1) if acc_n else None, "bleu4": score}
        if extra_eval is not None:
            rec.update(extra_eval(model))
        history.append(rec)
        if log:
            log(rec)
        acc_swp, acc_spm, acc_n = 0.0, 0.0, 0
        if score is not None and (best[0] is None or score > best[0]):
            best = (score, it, [p.data.copy() for p in params])
        return rec

    for it in range(1, iterations + 1):
        rng = np.random.default_rng([seed, it])
        idx = np.sort(rng.choice(len(train), size=bs, replace=False))
        traj, tokens = train.batch(idx)
        opt.zero_grad()
        logits, prog = model.forward(traj, tokens, training=True, rng=rng)
        total, swp, spm = joint_loss(logits, prog, tokens, lam, omega)
        value = total.item()
        if not math.isfinite(value):
            raise TrainingDivergence(
                f"loss became {value} at iteration {it}; batch seed [{seed}, {it}]")
        total.backward()
        opt.step()
        acc_swp += swp.item()
        acc_spm += spm.item() if spm is not None else 0.0
        acc_n += 1
        if eval_every and (it % eval_every == 0 or it == iterations):
            rec = evaluate(it)
            if stop_when is not None and stop_when(rec):
                break
    if iterations and not eval_every:
        evaluate(iterations)
    if best[2] is not None:
        for p, data in zip(params, best[2]):
            p.data[...] = data
    return SpeakerRun(model, history, best[0], best[1])


# ---------------------------------------------------------------- back-translation

def sample_unlabelled_paths(graphs: Sequence[WorldGraph], n: int, min_len: int, max_len: int,
                            seed: int, exclude: Optional[set] = None) -> List[Tuple[WorldGraph, List[int]]]:
    """Fresh paths on the given graphs; ``exclude`` holds (graph_id, tuple(path)) keys to skip."""
    rng = np.random.default_rng(seed)
    seen = set(exclude or ())
    out = []
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > 50 * n + 1000:
            break
        g = graphs[int(rng.integers(len(graphs)))]
        path = sample_path(g, min_len, max_len, rng)
        key = (g.graph_id, tuple(path))
        if key in seen:
            continue
        seen.add(key)
        out.append((g, path))
    return out


def back_translate(model: SpeakerModel, paths: Sequence[Tuple[WorldGraph, List[int]]],
                   mfd1_rate: float = 0.3, seed: int = 0, min_content_tokens: int = 0,
                   provenance: Optional[dict] = None, chunk: int = 128):
    """Pseudo-instructions for unlabelled paths; returns ``(records, stats)``.

    Only feature dropout is active during generation. Truncated generations and
    (when ``min_content_tokens`` > 0) short ones are dropped and counted.
    """
    if not 0.0 <= mfd1_rate < 1.0:
        raise ParameterError("mfd1_rate must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    records, stats = [], {"input_paths": len(paths), "truncated": 0, "filtered_short": 0}
    with model.mfd_override(replace(model.mfd, p1_env=mfd1_rate)):
        for start in range(0, len(paths), chunk):
            part = paths[start:start + chunk]
            batch = TrajectoryBatch.from_trajectories([render_path(g, p) for g, p in part])
            gens = model.generate(batch, rng=rng, feature_dropout=mfd1_rate > 0)
            for k, ((g, p), gen) in enumerate(zip(part, gens)):
                if gen.truncated:
                    stats["truncated"] += 1
                    continue
                if min_content_tokens and len(gen.words) < min_content_tokens:
                    stats["filtered_short"] += 1
                    continue
                rec = {
                    "id": f"bt-{start + k:05d}",
                    "graph_id": g.graph_id,
                    "trajectory": list(p),
                    "instruction": gen.words,
                    "segments": [],
                    "sub_paths": [],
                    "pseudo": True,
                    "features_ref": {"graph_id": g.graph_id, "seed": g.seed,
                                     "n_rooms": g.n_rooms, "nodes_per_room": g.nodes_per_room},
                    "progress_trace": [round(x, 6) for x in gen.progress],
                }
                if provenance:
                    rec["provenance"] = provenance
                records.append(rec)
    stats["kept"] = len(records)
    return records, stats


# ---------------------------------------------------------------- follower

@dataclass
class FollowerEpisode:
    graph_id: str
    path: List[int]
    tokens: List[int]


def follower_episodes(episodes: Sequence[Episode], vocab: Vocab) -> List[FollowerEpisode]:
    return [FollowerEpisode(e.graph_id, list(e.trajectory), vocab.encode(e.instruction.content))
            for e in episodes]


def evaluate_follower(model: FollowerModel, episodes: Sequence[FollowerEpisode],
                      graphs: Dict[str, WorldGraph], observations: Optional[dict] = None):
    """Greedy rollouts from each reference start; returns (aggregate, per-episode)."""
    if not episodes:
        raise ParameterError("no evaluation episodes")
    preds = rollout_batch(model, [e.tokens for e in episodes], [graphs[e.graph_id] for e in episodes],
                          [e.path[0] for e in episodes], observations=observations)
    per = [nav_metrics(pred, e.path, graphs[e.graph_id]) for pred, e in zip(preds, episodes)]
    return aggregate_nav(per), per


@dataclass
class FollowerRun:
    model: FollowerModel
    history: List[dict]
    best_sr: Optional[float]
    best_iteration: int


def train_follower(config: FollowerConfig, vocab: Vocab, graphs: Dict[str, WorldGraph],
                   train: Sequence[FollowerEpisode],
                   augmented: Sequence[FollowerEpisode] = (), aug_ratio: float = 1.0,
                   val: Sequence[FollowerEpisode] = (), seed: int = 0,
                   observations: Optional[dict] = None,
                   log: Optional[Callable[[dict], None]] = None) -> FollowerRun:
    """Imitation learning on expert actions; D' batches interleave per ``uses_augmented``.

    One feature-dropout mask of width d_v is shared by every view in a batch.
    With validation episodes the parameters with the best SR are kept.
    """
    if not train:
        raise ParameterError("follower dataset is empty")
    cache = observations if observations is not None else {}
    model = FollowerModel(config, vocab)
    params = model.parameters()
    opt = Adam(params, lr=config.lr)
    history: List[dict] = []
    best = (None, 0, None)
    acc, acc_n = 0.0, 0
    p = config.env_dropout
    for it in range(1, config.iterations + 1):
        rng = np.random.default_rng([seed, it])
        source = augmented if augmented and uses_augmented(it - 1, aug_ratio) else train
        idx = np.sort(rng.choice(len(source), size=min(config.batch_size, len(source)), replace=False))
        eps = [source[i] for i in idx]
        steps = build_steps(graphs, [(e.graph_id, e.path) for e in eps], cache)
        fmask = (rng.random(config.d_v) >= p) / (1.0 - p) if p > 0 else None
        opt.zero_grad()
        loss = model.il_loss([e.tokens for e in eps], steps, fmask)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDivergence(
                f"follower loss became {value} at iteration {it}; batch seed [{seed}, {it}]")
        loss.backward()
        opt.step()
        acc += value
        acc_n += 1
        if config.eval_every and (it % config.eval_every == 0 or it == config.iterations):
            rec = {"iteration": it, "loss": acc / acc_n}
            if val:
                rec["val_sr"] = evaluate_follower(model, val, graphs, cache)[0]["SR"]
                if best[0] is None or rec["val_sr"] > best[0]:
                    best = (rec["val_sr"], it, [q.data.copy() for q in params])
            history.append(rec)
            if log:
                log(rec)
            acc, acc_n = 0.0, 0
    if best[2] is not None:
        for q, data in zip(params, best[2]):
            q.data[...] = data
    return FollowerRun(model, history, best[0], best[1])


def _summary(values: Sequence[float]) -> dict:
    arr = np.asarray(values, dtype=float)
    return {"mean": float(arr.mean()), "std": float(arr.std(ddof=1)) if len(arr) > 1 else 0.0}


def ab_follower(config: FollowerConfig, vocab: Vocab, graphs: Dict[str, WorldGraph],
                original: Sequence[FollowerEpisode], augmented: Sequence[FollowerEpisode],
                val_seen: Sequence[FollowerEpisode], val_unseen: Sequence[FollowerEpisode],
                seeds: Sequence[int] = (0, 1, 2), aug_ratio: float = 1.0,
                config_b: Optional[FollowerConfig] = None, select_on: str = "val_seen",
                log: Optional[Callable[[dict], None]] = None) -> dict:
    """Arm A trains on D; arm B alternates D and D'. Same config, seeds and budget.

    Model selection uses ``select_on`` (seen-graph validation by default, so the
    unseen split stays untouched until the final report).
    """
    if config_b is not None and config_b != config:
        raise ContractError("A/B arms must share one follower config")
    if not seeds:
        raise ParameterError("at least one seed is required")
    splits = {"val_seen": val_seen, "val_unseen": val_unseen}
    cache: dict = {}
    report = {"seeds": list(seeds), "aug_ratio": aug_ratio, "config": config.to_dict(),
              "config_hash": config_hash(config.to_dict()),
              "sizes": {"D": len(original), "D_prime": len(augmented)}, "arms": {}}
    for arm, aug in (("A", ()), ("B", augmented)):
        per_seed = {}
        for s in seeds:
            cfg = replace(config, init_seed=s)
            run = train_follower(cfg, vocab, graphs, original, aug, aug_ratio,
                                 splits[select_on], seed=s, observations=cache)
            per_seed[str(s)] = {name: evaluate_follower(run.model, eps, graphs, cache)[0]
                                for name, eps in splits.items()}
            if log:
                log({"arm": arm, "seed": s, **per_seed[str(s)]})
        summary = {name: {m: _summary([per_seed[str(s)][name][m] for s in seeds])
                          for m in NAV_METRICS} for name in splits}
        report["arms"][arm] = {"per_seed": per_seed, "summary": summary}
    return report
