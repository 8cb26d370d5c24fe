"""Small instruction-following policy trained by imitation learning.

At each node the policy scores the adjacent nodes plus STOP. The state is the
current panorama fused by a spatial encoder (the forward view queries the
panorama) plus a step position, which then attends over the encoded
instruction. Candidates are the panorama view facing each neighbour, with the
exact relative heading, projected to the model width; STOP has a learned
candidate vector of the same kind.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import List, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ParameterError
from .nn import (EncoderLayer, LayerNorm, Linear, MfdConfig, Module, MultiHeadAttention,
                 SpatialEncoder, embed, positional_encoding)
from .tensor import Tensor, no_grad
from .vocab import PAD_ID, Vocab
from .world import WorldGraph, _wrap, angle_encoding, nearest_view, render_panorama

START_HEADING = 0.0


@dataclass
class FollowerConfig:
    d_model: int = 64
    heads: int = 4
    head_dim: int = 16
    ffn_hidden: int = 128
    layers: int = 1
    env_dropout: float = 0.3
    lr: float = 1e-3
    batch_size: int = 16
    iterations: int = 1500
    eval_every: int = 250
    max_steps: int = 10
    d_v: int = 64
    d_o: int = 4
    init_seed: int = 0

    def __post_init__(self):
        if not 1 <= self.layers <= 2:
            raise ParameterError("follower uses 1 or 2 instruction-encoder layers")
        if not 0.0 <= self.env_dropout < 1.0:
            raise ParameterError("env_dropout must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StepBatch:
    """Flattened teacher-forced steps."""
    episode_index: np.ndarray  # [S] row into the instruction batch
    position: np.ndarray  # [S] step index along the path
    env_features: np.ndarray  # [S, M, d_v]
    env_angles: np.ndarray  # [S, M, d_o]
    forward_feature: np.ndarray  # [S, d_v]
    forward_angle: np.ndarray  # [S, d_o]
    cand_features: np.ndarray  # [S, C, d_v + d_o]; STOP row is a placeholder
    cand_mask: np.ndarray  # [S, C] True for real candidates
    is_stop: np.ndarray  # [S, C] True at the STOP slot
    candidates: List[List[Optional[int]]]  # node ids, None for STOP
    expert: np.ndarray  # [S] expert candidate index (-1 when unknown)


def observe(graph: WorldGraph, node: int, heading: float):
    """Panorama at ``node`` plus the candidate list (neighbours then STOP)."""
    pano = render_panorama(graph, node, heading, None)
    nbrs = graph.neighbors(node)
    feats = []
    for nb in nbrs:
        rel = _wrap(graph.heading(node, nb) - heading)
        feats.append(np.concatenate([pano.env_features[nearest_view(rel)], angle_encoding(rel, 0.0)]))
    feats.append(np.zeros(pano.env_features.shape[1] + pano.env_angles.shape[1]))
    return pano, list(nbrs) + [None], np.stack(feats)


def build_steps(graph_of, episodes: Sequence, observations: Optional[dict] = None) -> StepBatch:
    """Expand ``(graph_id, path)`` episodes into one row per visited node.

    ``graph_of`` maps graph ids to graphs; ``observations`` is an optional cache.
    """
    cache = observations if observations is not None else {}
    rows = []
    for e, (graph_id, path) in enumerate(episodes):
        graph = graph_of[graph_id]
        heading = START_HEADING
        for t, node in enumerate(path):
            key = (graph_id, node, round(heading, 12))
            if key not in cache:
                cache[key] = observe(graph, node, heading)
            pano, cands, feats = cache[key]
            target = None if t == len(path) - 1 else path[t + 1]
            rows.append((e, t, pano, cands, feats, cands.index(target)))
            if target is not None:
                heading = graph.heading(node, target)
    return _stack_rows(rows)


def _stack_rows(rows) -> StepBatch:
    S = len(rows)
    C = max(len(r[3]) for r in rows)
    d_p = rows[0][4].shape[1]
    cand = np.zeros((S, C, d_p))
    mask = np.zeros((S, C), dtype=bool)
    stop = np.zeros((S, C), dtype=bool)
    for s, r in enumerate(rows):
        n = len(r[3])
        cand[s, :n] = r[4]
        mask[s, :n] = True
        stop[s, n - 1] = True
    return StepBatch(
        episode_index=np.array([r[0] for r in rows]),
        position=np.array([r[1] for r in rows]),
        env_features=np.stack([r[2].env_features for r in rows]),
        env_angles=np.stack([r[2].env_angles for r in rows]),
        forward_feature=np.stack([r[2].action_feature for r in rows]),
        forward_angle=np.stack([r[2].action_angle for r in rows]),
        cand_features=cand, cand_mask=mask, is_stop=stop,
        candidates=[r[3] for r in rows],
        expert=np.array([r[5] for r in rows]),
    )


def pad_instructions(token_lists: Sequence[Sequence[int]]):
    L = max(max(len(t) for t in token_lists), 1)
    ids = np.full((len(token_lists), L), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(token_lists), L), dtype=bool)
    for i, toks in enumerate(token_lists):
        ids[i, :len(toks)] = toks
        mask[i, :max(len(toks), 1)] = True  # empty instructions keep one PAD key
    return ids, mask


class FollowerModel(Module):
    def __init__(self, config: FollowerConfig, vocab: Vocab):
        self.config = config
        self.vocab = vocab
        c = config
        rng = np.random.default_rng(c.init_seed)
        off = MfdConfig.off()
        d_p = c.d_v + c.d_o
        self.token_table = Tensor(rng.standard_normal((len(vocab), c.d_model)), requires_grad=True)
        self.instruction_encoder = [EncoderLayer(c.d_model, c.heads, c.head_dim, c.ffn_hidden, off, rng)
                                    for _ in range(c.layers)]
        self.step_encoder = SpatialEncoder(d_p, c.d_model, c.heads, c.head_dim, off, rng)
        self.read = MultiHeadAttention(c.d_model, c.heads, c.head_dim, rng)
        self.read_norm = LayerNorm(c.d_model)
        self.W_h = Linear(c.d_model, c.d_model, rng)
        self.W_c = Linear(d_p, c.d_model, rng)
        self.stop_feature = Tensor(rng.uniform(-1, 1, size=d_p), requires_grad=True)
        self._pe = positional_encoding(128, c.d_model)

    def encode_instructions(self, ids: np.ndarray, mask: np.ndarray) -> Tensor:
        x = embed(ids, self.token_table) + self._pe[:ids.shape[1]]
        key_mask = mask[:, None, :]
        for layer in self.instruction_encoder:
            x = layer(x, key_mask, False, None)
        return x

    def scores(self, instr: Tensor, instr_mask: np.ndarray, steps: StepBatch,
               feature_mask: Optional[np.ndarray] = None) -> Tensor:
        """Unnormalised candidate scores [S, C]; padded slots are left as-is."""
        fm = 1.0 if feature_mask is None else feature_mask
        state = self.step_encoder(steps.env_features * fm, steps.env_angles,
                                  steps.forward_feature * fm, steps.forward_angle)
        state = state + self._pe[steps.position]
        ctx_in = T.getitem(instr, steps.episode_index)  # [S, L, d]
        key_mask = instr_mask[steps.episode_index][:, None, :]
        q = state.reshape(state.shape[0], 1, state.shape[1])
        ctx = self.read_norm(self.read(q, ctx_in, key_mask) + q)  # [S, 1, d]
        h = self.W_h(ctx)  # [S, 1, d]
        d_p = steps.cand_features.shape[2]
        feats = steps.cand_features.copy()
        feats[..., :self.config.d_v] *= fm
        stop = steps.is_stop[..., None].astype(float)
        cand_in = T.Tensor(feats * (1.0 - stop)) + stop * self.stop_feature.reshape(1, 1, d_p)
        cand = self.W_c(cand_in)  # [S, C, d]
        return T.matmul(h, cand.swapaxes(-1, -2)).reshape(feats.shape[0], feats.shape[1]) \
            * (1.0 / math.sqrt(self.config.d_model))

    def policy(self, instr, instr_mask, steps, feature_mask=None) -> Tensor:
        return T.softmax(self.scores(instr, instr_mask, steps, feature_mask), axis=-1,
                         mask=steps.cand_mask)

    def il_loss(self, token_lists, steps: StepBatch, feature_mask=None) -> Tensor:
        """Sum over steps of -log pi(expert action), averaged over episodes."""
        ids, mask = pad_instructions(token_lists)
        instr = self.encode_instructions(ids, mask)
        s = self.scores(instr, mask, steps, feature_mask)
        # padded candidate slots get zero probability
        logits = s + np.where(steps.cand_mask, 0.0, -1e30)
        nll_mean = T.cross_entropy(logits, steps.expert)
        return nll_mean * (len(steps.expert) / len(token_lists))


def policy_step(model: FollowerModel, instruction: Sequence[int], graph: WorldGraph, node: int,
                heading: float, position: int = 0):
    """Distribution over (neighbours..., STOP) at one node."""
    pano, cands, feats = observe(graph, node, heading)
    steps = _stack_rows([(0, position, pano, cands, feats, -1)])
    ids, mask = pad_instructions([list(instruction)])
    with no_grad():
        probs = model.policy(model.encode_instructions(ids, mask), mask, steps).data[0]
    return cands, probs[:len(cands)]


def rollout(model: FollowerModel, instruction: Sequence[int], graph: WorldGraph, start: int,
            max_steps: Optional[int] = None) -> List[int]:
    """Greedy navigation until STOP or ``max_steps`` moves."""
    return rollout_batch(model, [instruction], [graph], [start], max_steps)[0]


def rollout_batch(model: FollowerModel, instructions: Sequence[Sequence[int]],
                  graphs: Sequence[WorldGraph], starts: Sequence[int],
                  max_steps: Optional[int] = None, observations: Optional[dict] = None
                  ) -> List[List[int]]:
    """Greedy rollouts for many episodes at once, stepping all active episodes together."""
    max_steps = model.config.max_steps if max_steps is None else max_steps
    cache = observations if observations is not None else {}
    paths = [[s] for s in starts]
    headings = [START_HEADING] * len(paths)
    active = list(range(len(paths)))
    ids, mask = pad_instructions([list(t) for t in instructions])
    with no_grad():
        instr = model.encode_instructions(ids, mask)
    for t in range(max_steps):
        if not active:
            break
        rows = []
        for e in active:
            g, node = graphs[e], paths[e][-1]
            key = (g.graph_id, node, round(headings[e], 12))
            if key not in cache:
                cache[key] = observe(g, node, headings[e])
            pano, cands, feats = cache[key]
            rows.append((e, t, pano, cands, feats, -1))
        steps = _stack_rows(rows)
        with no_grad():
            probs = model.policy(instr, mask, steps).data
        still = []
        for r, e in enumerate(active):
            cands = steps.candidates[r]
            choice = cands[int(np.argmax(probs[r, :len(cands)]))]
            if choice is None:
                continue
            headings[e] = graphs[e].heading(paths[e][-1], choice)
            paths[e].append(choice)
            still.append(e)
        active = still
    return paths
