"""Trajectory-to-instruction transformer with word and progress heads.

Pipeline per trajectory of N panorama steps:

* spatial encoder: the action view (query) attends over the M panorama views
  (keys/values) at each step, giving one fused vector per step;
* temporal encoder: sinusoidal positions + self-attention layers across steps;
* decoder: causal self-attention over shifted words, cross-attention to the
  temporal memory;
* heads: word logits (SWP) and a scalar progress estimate (SPM) read off the
  same final decoder state.
"""
from __future__ import annotations

import contextlib
from dataclasses import asdict, dataclass, field, replace
from typing import List, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, ParameterError
from .nn import (DecoderLayer, EncoderLayer, Linear, MfdConfig, Module, SpatialEncoder,
                 causal_mask, embed, positional_encoding, set_mfd)
from .progress import InstructionRecord
from .tensor import Tensor, no_grad
from .vocab import BOS_ID, EOS_ID, PAD_ID, Vocab


@dataclass
class PanoramaStep:
    env_features: np.ndarray  # [M, d_v]
    env_angles: np.ndarray  # [M, d_o]
    action_feature: np.ndarray  # [d_v]
    action_angle: np.ndarray  # [d_o]


@dataclass
class SpeakerConfig:
    d_model: int = 256
    encoder_hidden: int = 512  # width of the progress head's hidden layer
    ffn_hidden: int = 1024
    heads: int = 6
    head_dim: int = 64
    encoder_layers: int = 6
    decoder_layers: int = 6
    mfd: MfdConfig = field(default_factory=MfdConfig)
    lr: float = 5e-5
    batch_size: int = 64
    lam: float = 0.8
    omega: float = 10.0
    max_decode_len: int = 80
    d_vocab: int = 0
    d_v: int = 64
    d_o: int = 4
    n_views: int = 36
    init_seed: int = 0

    def __post_init__(self):
        if isinstance(self.mfd, dict):
            self.mfd = MfdConfig(**self.mfd)
        dims = ("d_model", "encoder_hidden", "ffn_hidden", "heads", "head_dim",
                "encoder_layers", "decoder_layers", "max_decode_len", "d_v", "d_o", "n_views")
        for name in dims:
            if getattr(self, name) <= 0:
                raise ParameterError(f"{name} must be positive")
        if self.d_model % 2:
            raise ParameterError("d_model must be even for sinusoidal positions")
        if not 0.0 <= self.lam <= 1.0:
            raise ParameterError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.omega < 0:
            raise ParameterError("omega must be non-negative")

    @classmethod
    def desk(cls, **overrides) -> "SpeakerConfig":
        """Small preset that trains in minutes on one CPU core."""
        base = dict(d_model=64, encoder_hidden=128, ffn_hidden=128, heads=4, head_dim=16,
                    encoder_layers=2, decoder_layers=2, lr=1e-3, batch_size=32,
                    max_decode_len=80)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SpeakerConfig":
        return cls(**d)


# ---------------------------------------------------------------- batching

@dataclass
class TrajectoryBatch:
    env_features: np.ndarray  # [B, N, M, d_v]
    env_angles: np.ndarray  # [B, N, M, d_o]
    action_features: np.ndarray  # [B, N, d_v]
    action_angles: np.ndarray  # [B, N, d_o]
    step_mask: np.ndarray  # [B, N] True for real steps

    @classmethod
    def from_trajectories(cls, trajectories: Sequence[Sequence[PanoramaStep]]) -> "TrajectoryBatch":
        if not trajectories or any(len(t) == 0 for t in trajectories):
            raise ContractError("every trajectory needs at least one step")
        B = len(trajectories)
        N = max(len(t) for t in trajectories)
        s0 = trajectories[0][0]
        M, d_v = s0.env_features.shape
        d_o = s0.env_angles.shape[1]
        ef = np.zeros((B, N, M, d_v))
        ea = np.zeros((B, N, M, d_o))
        af = np.zeros((B, N, d_v))
        aa = np.zeros((B, N, d_o))
        mask = np.zeros((B, N), dtype=bool)
        for b, traj in enumerate(trajectories):
            for n, step in enumerate(traj):
                ef[b, n] = step.env_features
                ea[b, n] = step.env_angles
                af[b, n] = step.action_feature
                aa[b, n] = step.action_angle
                mask[b, n] = True
        return cls(ef, ea, af, aa, mask)

    def __len__(self):
        return self.step_mask.shape[0]

    def select(self, idx) -> "TrajectoryBatch":
        return TrajectoryBatch(self.env_features[idx], self.env_angles[idx],
                               self.action_features[idx], self.action_angles[idx],
                               self.step_mask[idx])


@dataclass
class TokenBatch:
    inputs: np.ndarray  # [B, L] BOS + content, PAD-filled
    targets: np.ndarray  # [B, L] content + EOS, PAD-filled
    mask: np.ndarray  # [B, L] True where the target is real
    progress: Optional[np.ndarray] = None  # [B, L] progress label of each target
    spm_mask: Optional[np.ndarray] = None  # [B, L] targets that carry a progress label

    @classmethod
    def from_ids(cls, sequences: Sequence[Sequence[int]],
                 progress: Optional[Sequence[Optional[Sequence[float]]]] = None) -> "TokenBatch":
        """``sequences`` are content ids; ``progress`` are content labels (EOS gets 1.0).

        A ``None`` progress row (e.g. a pseudo-instruction) is left out of the SPM loss.
        """
        B = len(sequences)
        L = max(len(s) for s in sequences) + 1
        inputs = np.full((B, L), PAD_ID, dtype=np.int64)
        targets = np.full((B, L), PAD_ID, dtype=np.int64)
        mask = np.zeros((B, L), dtype=bool)
        prog = np.zeros((B, L)) if progress is not None else None
        spm_mask = np.zeros((B, L), dtype=bool) if progress is not None else None
        for b, seq in enumerate(sequences):
            n = len(seq)
            inputs[b, 0] = BOS_ID
            inputs[b, 1:n + 1] = seq
            targets[b, :n] = seq
            targets[b, n] = EOS_ID
            mask[b, :n + 1] = True
            if prog is not None and progress[b] is not None:
                prog[b, :n] = progress[b]
                prog[b, n] = 1.0
                spm_mask[b, :n + 1] = True
        return cls(inputs, targets, mask, prog, spm_mask)

    @classmethod
    def from_records(cls, records: Sequence[InstructionRecord], vocab: Vocab) -> "TokenBatch":
        ids = [vocab.encode(r.content) for r in records]
        return cls.from_ids(ids, [r.content_progress if r.segments else None for r in records])


@dataclass
class Generation:
    token_ids: List[int]  # content ids, EOS excluded
    words: List[str]
    progress: List[float]  # SPM estimate for each emitted token, EOS included
    truncated: bool


# ---------------------------------------------------------------- model

class SpeakerModel(Module):
    def __init__(self, config: SpeakerConfig, vocab: Vocab):
        if config.d_vocab in (0, len(vocab)):
            config = replace(config, d_vocab=len(vocab))
        else:
            raise ParameterError(f"config d_vocab={config.d_vocab} but vocabulary has {len(vocab)}")
        self.config = config
        self.vocab = vocab
        c = config
        rng = np.random.default_rng(c.init_seed)
        d_p = c.d_v + c.d_o
        self.spatial = SpatialEncoder(d_p, c.d_model, c.heads, c.head_dim, c.mfd, rng)
        self.encoder = [EncoderLayer(c.d_model, c.heads, c.head_dim, c.ffn_hidden, c.mfd, rng)
                        for _ in range(c.encoder_layers)]
        self.decoder = [DecoderLayer(c.d_model, c.heads, c.head_dim, c.ffn_hidden, c.mfd, rng)
                        for _ in range(c.decoder_layers)]
        self.token_table = Tensor(rng.standard_normal((c.d_vocab, c.d_model)), requires_grad=True)
        self.swp_head = Linear(c.d_model, c.d_vocab, rng)
        self.spm_hidden = Linear(c.d_model, c.encoder_hidden, rng)  # W_s, b_s
        self.spm_out = Linear(c.encoder_hidden, 1, rng)  # W_p, b_p
        self._pe = positional_encoding(max(c.max_decode_len + 1, 64), c.d_model)

    @property
    def mfd(self) -> MfdConfig:
        return self.config.mfd

    def set_mfd(self, mfd: MfdConfig):
        self.config = replace(self.config, mfd=mfd)
        set_mfd(self, mfd)

    @contextlib.contextmanager
    def mfd_override(self, mfd: MfdConfig):
        prev = self.mfd
        self.set_mfd(mfd)
        try:
            yield self
        finally:
            self.set_mfd(prev)

    def _positions(self, length: int) -> np.ndarray:
        if length > self._pe.shape[0]:
            self._pe = positional_encoding(length, self.config.d_model)
        return self._pe[:length]

    # ------------------------------------------------------------ encoder
    def encode_spatial(self, env_features, env_angles, action_features, action_angles,
                       training: bool = False, rng=None, feature_dropout: Optional[bool] = None):
        """Fuse each step's action view with its panorama.

        Shapes: env [..., M, d_v] / [..., M, d_o], action [..., d_v] / [..., d_o];
        returns [..., d_model]. Angles are never dropped.
        """
        c = self.config
        if env_features.shape[-1] != c.d_v or env_angles.shape[-1] != c.d_o:
            raise ContractError(
                f"feature dims {env_features.shape[-1]}/{env_angles.shape[-1]} do not match "
                f"config d_v={c.d_v}, d_o={c.d_o}")
        return self.spatial(env_features, env_angles, action_features, action_angles,
                            training, rng, feature_dropout)

    def encode_temporal(self, Z: Tensor, step_mask: Optional[np.ndarray] = None,
                        training: bool = False, rng=None) -> Tensor:
        N = Z.shape[-2]
        if N < 1:
            raise ContractError("temporal encoder needs at least one step")
        x = Z + self._positions(N)
        mask = None if step_mask is None else np.asarray(step_mask, bool)[..., None, :]
        for layer in self.encoder:
            x = layer(x, mask, training, rng)
        return x

    def encode(self, batch: TrajectoryBatch, training: bool = False, rng=None,
               feature_dropout: Optional[bool] = None) -> Tensor:
        Z = self.encode_spatial(batch.env_features, batch.env_angles, batch.action_features,
                                batch.action_angles, training, rng, feature_dropout)
        return self.encode_temporal(Z, batch.step_mask, training, rng)

    # ------------------------------------------------------------ decoder
    def decode(self, memory: Tensor, inputs: np.ndarray, memory_mask: Optional[np.ndarray] = None,
               training: bool = False, rng=None) -> Tensor:
        """Teacher-forced decoder pass; returns the last hidden layer [B, L, d_model]."""
        inputs = np.atleast_2d(np.asarray(inputs, dtype=np.int64))
        if memory.shape[-2] == 0:
            raise ContractError("decoder memory is empty")
        if not (inputs[:, 0] == BOS_ID).all():
            raise ContractError("decoder inputs must begin with BOS")
        L = inputs.shape[1]
        if L > self.config.max_decode_len:
            raise ContractError(f"input length {L} exceeds max_decode_len")
        x = embed(inputs, self.token_table) + self._positions(L)
        self_mask = causal_mask(L)
        mem_mask = None if memory_mask is None else np.asarray(memory_mask, bool)[..., None, :]
        for layer in self.decoder:
            x = layer(x, memory, self_mask, mem_mask, training, rng)
        return x

    def swp_logits(self, g: Tensor, training: bool = False, rng=None) -> Tensor:
        return self.swp_head(T.dropout(g, self.mfd.p5_output, training, rng))

    def spm_progress(self, g: Tensor, training: bool = False, rng=None) -> Tensor:
        h = T.relu(self.spm_hidden(g))
        h = T.dropout(h, self.mfd.p5_output, training, rng)
        out = self.spm_out(h)
        return out.reshape(*out.shape[:-1])

    def forward(self, traj: TrajectoryBatch, tokens: TokenBatch, training: bool = False,
                rng=None, with_progress: bool = True):
        memory = self.encode(traj, training, rng)
        g = self.decode(memory, tokens.inputs, traj.step_mask, training, rng)
        logits = self.swp_logits(g, training, rng)
        progress = self.spm_progress(g, training, rng) if with_progress else None
        return logits, progress

    # ------------------------------------------------------------ generation
    def decode_step(self, memory: Tensor, memory_mask, cache: list, token_ids: np.ndarray,
                    position: int, training: bool = False, rng=None) -> Tensor:
        """Advance the decoder by one position. ``cache[l]`` holds layer-l inputs so far."""
        x = embed(np.asarray(token_ids, dtype=np.int64)[:, None], self.token_table)
        x = x + self._positions(position + 1)[position]
        mem_mask = None if memory_mask is None else np.asarray(memory_mask, bool)[:, None, :]
        for l, layer in enumerate(self.decoder):
            cache[l] = x if cache[l] is None else T.concat([cache[l], x], axis=1)
            x = layer(x, memory, None, mem_mask, training, rng, self_kv=cache[l])
        return x[:, 0, :]

    def generate(self, trajectories, mode: str = "greedy", temperature: float = 1.0,
                 rng: Optional[np.random.Generator] = None, feature_dropout: bool = False,
                 max_len: Optional[int] = None) -> List[Generation]:
        """Autoregressive decoding from BOS until EOS or ``max_len`` tokens.

        All dropout sites are inert except MFD-1 when ``feature_dropout`` is set.
        """
        if mode not in ("greedy", "sample"):
            raise ParameterError(f"unknown decode mode {mode!r}")
        if (mode == "sample" or feature_dropout) and rng is None:
            raise ContractError(f"{mode} decoding with feature dropout={feature_dropout} needs an rng")
        batch = trajectories if isinstance(trajectories, TrajectoryBatch) else \
            TrajectoryBatch.from_trajectories(trajectories)
        max_len = max_len or self.config.max_decode_len
        B = len(batch)
        with no_grad():
            memory = self.encode(batch, training=False, rng=rng, feature_dropout=feature_dropout)
            cache = [None] * len(self.decoder)
            tokens = np.full(B, BOS_ID, dtype=np.int64)
            done = np.zeros(B, dtype=bool)
            out_ids = [[] for _ in range(B)]
            out_prog = [[] for _ in range(B)]
            for t in range(max_len):
                g = self.decode_step(memory, batch.step_mask, cache, tokens, t)
                logits = self.swp_logits(g).data
                prog = self.spm_progress(g).data
                if mode == "greedy":
                    nxt = logits.argmax(axis=-1)
                else:
                    z = logits / temperature
                    p = np.exp(z - z.max(axis=-1, keepdims=True))
                    p /= p.sum(axis=-1, keepdims=True)
                    nxt = np.array([rng.choice(p.shape[1], p=row) for row in p])
                for b in np.flatnonzero(~done):
                    out_prog[b].append(float(prog[b]))
                    if nxt[b] == EOS_ID:
                        done[b] = True
                    else:
                        out_ids[b].append(int(nxt[b]))
                if done.all():
                    break
                tokens = nxt
        return [Generation(ids, self.vocab.decode(ids), out_prog[b], not done[b])
                for b, ids in enumerate(out_ids)]


# ---------------------------------------------------------------- losses

def joint_loss(logits: Tensor, progress_pred: Optional[Tensor], tokens: TokenBatch,
               lam: float, omega: float):
    """Return ``(total, swp, spm)`` with total = lam * swp + (1 - lam) * omega * spm.

    When the SPM weight is zero the SPM term stays off the tape; ``spm`` is then
    a detached value for logging (or None if no prediction was given).
    """
    swp = T.cross_entropy(logits, tokens.targets, tokens.mask)
    weight = (1.0 - lam) * omega
    pmask = tokens.mask if tokens.spm_mask is None else tokens.spm_mask
    labelled = tokens.progress is not None and bool(pmask.any())
    spm = None
    if weight > 0:
        if tokens.progress is None or progress_pred is None:
            raise ContractError("SPM weight is positive but progress labels/predictions are missing")
        if labelled:
            spm = T.mse(progress_pred, tokens.progress, pmask)
            total = swp * lam + spm * weight
        else:
            total = swp * lam
    else:
        total = swp * lam if lam != 1.0 else swp
        if progress_pred is not None and labelled:
            spm = Tensor(T.mse(progress_pred.detach(), tokens.progress, pmask).data)
    return total, swp, spm


def mcd_uncertainty(model: SpeakerModel, trajectory, tokens: Optional[Sequence[int]] = None,
                    rounds: int = 5, rng: Optional[np.random.Generator] = None) -> float:
    """Sample variance of the teacher-forced word loss over ``rounds`` dropout passes.

    ``tokens`` are content ids; when omitted the model's greedy decode is the target.
    """
    if rounds < 2:
        raise ParameterError("mcd_uncertainty needs at least 2 rounds")
    rng = rng if rng is not None else np.random.default_rng(0)
    batch = trajectory if isinstance(trajectory, TrajectoryBatch) else \
        TrajectoryBatch.from_trajectories([trajectory])
    if tokens is None:
        # a truncated decode is clipped so BOS + tokens fits the decoder
        tokens = model.generate(batch)[0].token_ids[:model.config.max_decode_len - 1]
    tb = TokenBatch.from_ids([list(tokens)] * len(batch))
    losses = []
    with no_grad():
        for _ in range(rounds):
            logits, _ = model.forward(batch, tb, training=True, rng=rng, with_progress=False)
            losses.append(T.cross_entropy(logits, tb.targets, tb.mask).item())
    # shifting by the first loss keeps identical rounds at exactly zero variance
    shifted = np.asarray(losses) - losses[0]
    return float(np.var(shifted, ddof=1))
