"""Recurrent and attention building blocks.

All ops are batched over a leading row axis: a single vector is a ``[1, d]``
tensor. Weight matrices are stored ``[out, in]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import ContractError, Rng, ShapeError, Tensor

FORGET_BIAS = 1.0


@dataclass
class LstmCellParams:
    """Gate order along the 4h axis: input, forget, cell candidate, output."""

    w_ih: Tensor
    w_hh: Tensor
    bias: Tensor

    @property
    def hidden_size(self) -> int:
        return self.w_hh.shape[1]

    @property
    def input_size(self) -> int:
        return self.w_ih.shape[1]

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w_ih": self.w_ih, f"{prefix}.w_hh": self.w_hh, f"{prefix}.bias": self.bias}

    @classmethod
    def init(cls, input_size: int, hidden_size: int, rng: Rng, forget_bias: float = FORGET_BIAS):
        bias = np.zeros(4 * hidden_size)
        bias[hidden_size : 2 * hidden_size] = forget_bias
        return cls(
            w_ih=T.xavier_init((4 * hidden_size, input_size), rng),
            w_hh=T.xavier_init((4 * hidden_size, hidden_size), rng),
            bias=Tensor(bias, requires_grad=True),
        )


@dataclass
class StackedLstmParams:
    layers: list[LstmCellParams]

    def __post_init__(self):
        for lower, upper in zip(self.layers, self.layers[1:]):
            if upper.input_size != lower.hidden_size:
                raise ShapeError(
                    f"stacked LSTM: layer input {upper.input_size} != previous hidden {lower.hidden_size}"
                )

    @property
    def hidden_size(self) -> int:
        return self.layers[-1].hidden_size

    def named(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.named(f"{prefix}.layer{i}"))
        return out

    @classmethod
    def init(cls, input_size: int, hidden_size: int, num_layers: int, rng: Rng):
        layers = []
        d = input_size
        for _ in range(num_layers):
            layers.append(LstmCellParams.init(d, hidden_size, rng))
            d = hidden_size
        return cls(layers)


@dataclass
class DenseParams:
    weight: Tensor
    bias: Tensor

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}

    @classmethod
    def init(cls, in_size: int, out_size: int, rng: Rng):
        return cls(T.xavier_init((out_size, in_size), rng), Tensor(np.zeros(out_size), requires_grad=True))


@dataclass
class AttentionParams:
    """Bilinear ("general") score matrix ``[query_dim, memory_dim]``."""

    w_a: Tensor

    @property
    def memory_dim(self) -> int:
        return self.w_a.shape[1]

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w_a": self.w_a}

    @classmethod
    def init(cls, query_dim: int, memory_dim: int, rng: Rng):
        return cls(T.xavier_init((query_dim, memory_dim), rng))


def lstm_cell_step(p: LstmCellParams, x: Tensor, h_prev: Tensor, c_prev: Tensor) -> tuple[Tensor, Tensor]:
    """One LSTM step as a single fused graph node.

    Returns ``(h, c)``; both are slices of one ``[B, 2h]`` node so the
    backward pass handles the gate algebra in one place.
    """
    hs = p.hidden_size
    if x.ndim != 2 or x.shape[1] != p.input_size:
        raise ShapeError(f"lstm input {x.shape} vs expected [B, {p.input_size}]")
    if h_prev.shape != (x.shape[0], hs) or c_prev.shape != h_prev.shape:
        raise ShapeError(f"lstm state {h_prev.shape}/{c_prev.shape} vs [B, {hs}]")
    xd, hd, cd = x.data, h_prev.data, c_prev.data
    wi, wh = p.w_ih.data, p.w_hh.data
    z = xd @ wi.T + hd @ wh.T + p.bias.data
    s = T._sigmoid(z)
    i, f, o = s[:, :hs], s[:, hs : 2 * hs], s[:, 3 * hs :]
    g = np.tanh(z[:, 2 * hs : 3 * hs])
    c = f * cd + i * g
    tc = np.tanh(c)
    h = o * tc

    def bw(grad):
        gh, gc = grad[:, :hs], grad[:, hs:]
        dc = gc + gh * o * (1.0 - tc * tc)
        dz = np.concatenate(
            [
                dc * g * i * (1.0 - i),
                dc * cd * f * (1.0 - f),
                dc * i * (1.0 - g * g),
                gh * tc * o * (1.0 - o),
            ],
            axis=1,
        )
        return (
            dz @ wi,
            dz @ wh,
            dc * f,
            dz.T @ xd,
            dz.T @ hd,
            dz.sum(axis=0),
        )

    both = T.record(np.concatenate([h, c], axis=1), (x, h_prev, c_prev, p.w_ih, p.w_hh, p.bias), bw)
    return T.slice_last(both, 0, hs), T.slice_last(both, hs, 2 * hs)


def zero_state(batch: int, hidden: int) -> tuple[Tensor, Tensor]:
    return Tensor(np.zeros((batch, hidden))), Tensor(np.zeros((batch, hidden)))


def stacked_lstm_step(
    p: StackedLstmParams,
    x: Tensor,
    states: list[tuple[Tensor, Tensor]],
    active: np.ndarray | None = None,
) -> tuple[Tensor, list[tuple[Tensor, Tensor]]]:
    """Advance every layer one step.

    Rows where ``active`` is false keep their previous state, so a padded
    batch carries each sentence's final state past its end.
    """
    new_states = []
    inp = x
    for layer, (h, c) in zip(p.layers, states):
        h2, c2 = lstm_cell_step(layer, inp, h, c)
        if active is not None and not active.all():
            h2 = T.blend(active, h2, h)
            c2 = T.blend(active, c2, c)
        new_states.append((h2, c2))
        inp = h2
    return inp, new_states


def stacked_lstm_forward(
    p: StackedLstmParams,
    inputs: Sequence[Tensor],
    init_states: list[tuple[Tensor, Tensor]] | None = None,
    step_mask: np.ndarray | None = None,
) -> tuple[list[Tensor], list[tuple[Tensor, Tensor]]]:
    """Run a full sequence. ``step_mask`` is ``[B, T]``, true on real tokens."""
    if not inputs:
        raise ContractError("stacked_lstm_forward: empty input sequence")
    batch = inputs[0].shape[0]
    states = init_states or [zero_state(batch, layer.hidden_size) for layer in p.layers]
    outputs = []
    for t, x in enumerate(inputs):
        active = None if step_mask is None else np.asarray(step_mask[:, t], dtype=bool)
        top, states = stacked_lstm_step(p, x, states, active)
        outputs.append(top)
    return outputs, states


def dense_forward(p: DenseParams, x: Tensor) -> Tensor:
    return T.linear(x, p.weight, p.bias)


def embedding_lookup(table: np.ndarray | Tensor, ids) -> Tensor:
    """Copy rows of a frozen table. The result carries no graph edge."""
    arr = table.data if isinstance(table, Tensor) else np.asarray(table)
    ids = np.asarray(ids, dtype=np.int64)
    if np.any((ids < 0) | (ids >= arr.shape[0])):
        raise ContractError(f"embedding id out of range [0, {arr.shape[0]})")
    return Tensor(arr[ids].copy())


def attention_context(
    p: AttentionParams,
    query: Tensor,
    memory: Tensor,
    memory_mask: np.ndarray | None = None,
) -> tuple[Tensor, Tensor]:
    """Luong general attention.

    ``query`` is ``[B, h]``, ``memory`` ``[B, n, d_mem]``, ``memory_mask``
    ``[B, n]`` (true = attendable). Returns ``(context [B, d_mem], weights [B, n])``.
    """
    if memory.ndim != 3 or memory.shape[2] != p.memory_dim:
        raise ShapeError(f"attention memory {memory.shape} vs memory dim {p.memory_dim}")
    if query.ndim != 2 or query.shape[1] != p.w_a.shape[0] or query.shape[0] != memory.shape[0]:
        raise ShapeError(f"attention query {query.shape} vs W_a {p.w_a.shape}")
    if memory_mask is None:
        memory_mask = np.ones(memory.shape[:2], dtype=bool)
    memory_mask = np.asarray(memory_mask, dtype=bool)
    if not memory_mask.any(axis=1).all():
        raise ContractError("attention over fully masked memory")
    projected = T.matmul(query, p.w_a)
    scores = T.einsum("bd,bnd->bn", projected, memory)
    weights = T.softmax(scores, memory_mask)
    context = T.einsum("bn,bnd->bd", weights, memory)
    return context, weights
