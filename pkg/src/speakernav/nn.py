"""Transformer building blocks on top of :mod:`speakernav.tensor`.

Linear maps follow the row-vector convention ``y = x @ W + b`` with ``W`` of
shape ``(fan_in, fan_out)``. Residual sub-layers are post-norm:
``LayerNorm(sublayer(x) + x)``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterator, Optional, Tuple

import numpy as np

from . import tensor as T
from .errors import ContractError, ParameterError
from .tensor import Tensor


class Module:
    """Minimal parameter container; parameters are discovered by attribute walk."""

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Linear(Module):
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = _uniform(rng, (fan_in, fan_out), fan_in)
        self.bias = _uniform(rng, (fan_out,), fan_in) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.bias = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layernorm(x, self.gain, self.bias, self.eps)


@dataclass
class MfdConfig:
    """Rates of the five dropout sites.

    p1_env: input image features (never angles); p2_activation: inside FFN after
    ReLU; p3_attention: attention weights; p4_qkv: projected Q/K/V; p5_output:
    decoder state before the word projection (also the progress head's dropout).
    """
    p1_env: float = 0.3
    p2_activation: float = 0.2
    p3_attention: float = 0.2
    p4_qkv: float = 0.2
    p5_output: float = 0.2

    def __post_init__(self):
        for key, p in asdict(self).items():
            if not 0.0 <= p < 1.0:
                raise ParameterError(f"{key} must lie in [0, 1), got {p}")

    @classmethod
    def off(cls) -> "MfdConfig":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0)

    @classmethod
    def uniform(cls, p: float) -> "MfdConfig":
        return cls(p, p, p, p, p)


def causal_mask(length: int) -> np.ndarray:
    """Lower-triangular boolean mask; position t may attend to positions <= t."""
    if length < 1:
        raise ParameterError("causal_mask length must be >= 1")
    return np.tril(np.ones((length, length), dtype=bool))


def positional_encoding(length: int, d_model: int) -> np.ndarray:
    """Sinusoidal table: even dims sin(t / 10000^(2i/d)), odd dims cos of the same angle."""
    if d_model % 2:
        raise ParameterError(f"positional encoding needs an even width, got {d_model}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    rates = 10000.0 ** (np.arange(0, d_model, 2, dtype=np.float64) / d_model)
    table = np.empty((length, d_model))
    table[:, 0::2] = np.sin(pos / rates)
    table[:, 1::2] = np.cos(pos / rates)
    return table


def embed(tokens, table: Tensor) -> Tensor:
    return T.take_rows(table, tokens)


class MultiHeadAttention(Module):
    """Scaled dot-product attention with per-head projections packed into one matrix.

    ``W_q`` maps d_model -> heads * head_dim; head ``i`` uses columns
    ``[i*head_dim, (i+1)*head_dim)``. ``W_o`` maps heads * head_dim -> d_model,
    which need not equal d_model.
    """

    def __init__(self, d_model: int, heads: int, head_dim: int, rng: np.random.Generator,
                 attn_dropout_p: float = 0.0, qkv_dropout_p: float = 0.0):
        self.heads = heads
        self.head_dim = head_dim
        inner = heads * head_dim
        self.W_q = Linear(d_model, inner, rng)
        self.W_k = Linear(d_model, inner, rng)
        self.W_v = Linear(d_model, inner, rng)
        self.W_o = Linear(inner, d_model, rng)
        self.attn_dropout_p = attn_dropout_p
        self.qkv_dropout_p = qkv_dropout_p
        self.last_weights: Optional[np.ndarray] = None

    def _split(self, x: Tensor) -> Tensor:
        # [..., T, H*d] -> [..., H, T, d]
        lead = x.shape[:-1]
        return x.reshape(*lead, self.heads, self.head_dim).swapaxes(-2, -3)

    def __call__(self, query: Tensor, key_value: Tensor, mask: Optional[np.ndarray] = None,
                 training: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        return self.attend(query, key_value, mask, training, rng)

    def attend(self, query: Tensor, key_value: Tensor, mask: Optional[np.ndarray] = None,
               training: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        """query [..., Tq, d_m], key_value [..., Tkv, d_m], mask True = attendable."""
        if key_value.shape[-2] == 0:
            raise ContractError("attention over an empty key/value set")
        p4 = self.qkv_dropout_p
        q = T.dropout(self.W_q(query), p4, training, rng)
        k = T.dropout(self.W_k(key_value), p4, training, rng)
        v = T.dropout(self.W_v(key_value), p4, training, rng)
        q, k, v = self._split(q), self._split(k), self._split(v)
        scores = T.matmul(q, k.swapaxes(-1, -2)) * (1.0 / math.sqrt(self.head_dim))
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            mask = np.expand_dims(mask, -3)  # broadcast over heads
            if not np.broadcast_to(mask, scores.shape).any(axis=-1).all():
                raise ContractError("attention mask leaves a query row with no attendable key")
        weights = T.softmax(scores, axis=-1, mask=mask)
        self.last_weights = weights.data
        weights = T.dropout(weights, self.attn_dropout_p, training, rng)
        heads = T.matmul(weights, v).swapaxes(-2, -3)  # [..., Tq, H, d]
        lead = heads.shape[:-2]
        return self.W_o(heads.reshape(*lead, self.heads * self.head_dim))


class FeedForward(Module):
    def __init__(self, d_model: int, hidden: int, rng: np.random.Generator,
                 activation_dropout_p: float = 0.0):
        self.W_1 = Linear(d_model, hidden, rng)
        self.W_2 = Linear(hidden, d_model, rng)
        self.activation_dropout_p = activation_dropout_p

    def __call__(self, x: Tensor, training: bool = False,
                 rng: Optional[np.random.Generator] = None) -> Tensor:
        h = T.relu(self.W_1(x))
        h = T.dropout(h, self.activation_dropout_p, training, rng)
        return self.W_2(h)


class EncoderLayer(Module):
    """Self-attention then FFN, each wrapped as LayerNorm(sublayer(x) + x)."""

    def __init__(self, d_model: int, heads: int, head_dim: int, ffn_hidden: int,
                 mfd: MfdConfig, rng: np.random.Generator):
        self.self_attn = MultiHeadAttention(d_model, heads, head_dim, rng,
                                            mfd.p3_attention, mfd.p4_qkv)
        self.norm1 = LayerNorm(d_model)
        self.ffn = FeedForward(d_model, ffn_hidden, rng, mfd.p2_activation)
        self.norm2 = LayerNorm(d_model)

    def __call__(self, x: Tensor, mask: Optional[np.ndarray], training: bool, rng) -> Tensor:
        x = self.norm1(self.self_attn(x, x, mask, training, rng) + x)
        return self.norm2(self.ffn(x, training, rng) + x)


class DecoderLayer(Module):
    """Masked self-attention, cross-attention to memory, FFN; all post-norm."""

    def __init__(self, d_model: int, heads: int, head_dim: int, ffn_hidden: int,
                 mfd: MfdConfig, rng: np.random.Generator):
        self.self_attn = MultiHeadAttention(d_model, heads, head_dim, rng,
                                            mfd.p3_attention, mfd.p4_qkv)
        self.norm1 = LayerNorm(d_model)
        self.cross_attn = MultiHeadAttention(d_model, heads, head_dim, rng,
                                             mfd.p3_attention, mfd.p4_qkv)
        self.norm2 = LayerNorm(d_model)
        self.ffn = FeedForward(d_model, ffn_hidden, rng, mfd.p2_activation)
        self.norm3 = LayerNorm(d_model)

    def __call__(self, x: Tensor, memory: Tensor, self_mask, memory_mask, training: bool,
                 rng, self_kv: Optional[Tensor] = None) -> Tensor:
        kv = x if self_kv is None else self_kv
        x = self.norm1(self.self_attn(x, kv, self_mask, training, rng) + x)
        x = self.norm2(self.cross_attn(x, memory, memory_mask, training, rng) + x)
        return self.norm3(self.ffn(x, training, rng) + x)


def set_mfd(module: Module, mfd: MfdConfig):
    """Rewrite the dropout rates of every attention/FFN block under ``module``."""
    stack = [module]
    while stack:
        m = stack.pop()
        if isinstance(m, SpatialEncoder):
            m.env_dropout_p = mfd.p1_env
        if isinstance(m, MultiHeadAttention):
            m.attn_dropout_p = mfd.p3_attention
            m.qkv_dropout_p = mfd.p4_qkv
        elif isinstance(m, FeedForward):
            m.activation_dropout_p = mfd.p2_activation
        for value in vars(m).values():
            if isinstance(value, Module):
                stack.append(value)
            elif isinstance(value, (list, tuple)):
                stack.extend(v for v in value if isinstance(v, Module))


class SpatialEncoder(Module):
    """Per-step fusion: the action view queries the panorama views.

    z = LayerNorm(MultiHead(A~ as query, E~ as key/value) + A~) with
    A~ = [drop(V_a); gamma_a] W_a and E~ = [drop(V_e); gamma_e] W_e.
    """

    def __init__(self, d_in: int, d_model: int, heads: int, head_dim: int,
                 mfd: MfdConfig, rng: np.random.Generator):
        self.W_a = Linear(d_in, d_model, rng)
        self.W_e = Linear(d_in, d_model, rng)
        self.attention = MultiHeadAttention(d_model, heads, head_dim, rng,
                                            mfd.p3_attention, mfd.p4_qkv)
        self.norm = LayerNorm(d_model)
        self.env_dropout_p = mfd.p1_env

    def __call__(self, env_features, env_angles, action_features, action_angles,
                 training: bool = False, rng=None, feature_dropout: Optional[bool] = None) -> Tensor:
        drop = training if feature_dropout is None else feature_dropout
        p1 = self.env_dropout_p
        va = T.dropout(T.as_tensor(action_features), p1, drop, rng)
        ve = T.dropout(T.as_tensor(env_features), p1, drop, rng)
        a = self.W_a(T.concat([va, T.as_tensor(action_angles)], axis=-1))
        e = self.W_e(T.concat([ve, T.as_tensor(env_angles)], axis=-1))
        lead = a.shape[:-1]
        q = a.reshape(*lead, 1, a.shape[-1])
        fused = self.attention(q, e, None, training, rng)
        return self.norm(fused.reshape(*lead, a.shape[-1]) + a)
