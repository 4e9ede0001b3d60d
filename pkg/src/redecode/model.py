"""The iterative re-decoding VAE paraphrase model.

A sampling encoder (one LSTM layer, then two dense heads) yields the latent
Gaussian. A two-layer sentence encoder yields the attention memory for the
first decoder. Each later decoder attends over the complete sequence of
softmax vectors emitted by the decoder before it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .corpus import EOS, PAD, SOS, UNK, Batch
from .layers import (
    AttentionParams,
    DenseParams,
    LstmCellParams,
    StackedLstmParams,
    attention_context,
    dense_forward,
    embedding_lookup,
    lstm_cell_step,
    stacked_lstm_forward,
    stacked_lstm_step,
    zero_state,
)
from .tensor import ContractError, Rng, Tensor

logger = logging.getLogger(__name__)

ATTENTION_MODES = ("memory", "final-state")
FINAL_STATE_KINDS = ("hidden", "cell", "concat")
MULTISAMPLE_CE_MODES = ("first", "mean")

# variant -> (num_decoders, attention_mode, multisample_enabled)
VARIANTS: dict[str, tuple[int, str, bool]] = {
    "vae-s": (1, "final-state", False),
    "vae-var": (1, "memory", True),
    "vae-iterdec2": (2, "memory", False),
    "vae-iterdec3": (3, "memory", False),
    "vae-itervar": (2, "memory", True),
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    embedding_dim: int = 300
    hidden_units: int = 600
    latent_dim: int = 1100
    num_decoders: int = 1
    max_len: int = 15
    attention_mode: str = "memory"
    multisample_enabled: bool = False
    multisample_weight: float = 1.0
    # how the three-sample objective treats cross entropy: sample 1 only, or averaged
    multisample_ce: str = "first"
    final_state_kind: str = "hidden"

    def __post_init__(self):
        for name in ("vocab_size", "embedding_dim", "hidden_units", "latent_dim", "num_decoders", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.attention_mode not in ATTENTION_MODES:
            raise ConfigError(f"attention_mode must be one of {ATTENTION_MODES}")
        if self.multisample_weight < 0:
            raise ConfigError("multisample_weight must be >= 0")
        if self.multisample_ce not in MULTISAMPLE_CE_MODES:
            raise ConfigError(f"multisample_ce must be one of {MULTISAMPLE_CE_MODES}")
        if self.final_state_kind not in FINAL_STATE_KINDS:
            raise ConfigError(f"final_state_kind must be one of {FINAL_STATE_KINDS}")

    @classmethod
    def for_variant(cls, variant: str, **kwargs) -> ModelConfig:
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}; valid variants: {', '.join(VARIANTS)}")
        n, mode, ms = VARIANTS[variant]
        return cls(num_decoders=n, attention_mode=mode, multisample_enabled=ms, **kwargs)

    def to_dict(self) -> dict[str, str]:
        return {f.name: str(getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> ModelConfig:
        kwargs = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            raw = d[f.name]
            if f.type in ("int", int):
                kwargs[f.name] = int(raw)
            elif f.type in ("float", float):
                kwargs[f.name] = float(raw)
            elif f.type in ("bool", bool):
                kwargs[f.name] = raw.strip().lower() in ("1", "true", "yes", "on")
            else:
                kwargs[f.name] = raw
        return cls(**kwargs)


@dataclass
class Decoder:
    lstm: StackedLstmParams
    projection: DenseParams
    attention: AttentionParams | None

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = self.lstm.named(f"{prefix}.lstm")
        out.update(self.projection.named(f"{prefix}.projection"))
        if self.attention is not None:
            out.update(self.attention.named(f"{prefix}.attention"))
        return out


@dataclass
class ReDecodeModel:
    config: ModelConfig
    embedding: np.ndarray
    sampling_encoder: LstmCellParams
    f_mu: DenseParams
    f_logvar: DenseParams
    sentence_encoder: StackedLstmParams
    decoders: list[Decoder]

    def parameters(self) -> dict[str, Tensor]:
        """Trainable tensors by stable name, in a fixed order."""
        out = self.sampling_encoder.named("sampling_encoder")
        out.update(self.f_mu.named("f_mu"))
        out.update(self.f_logvar.named("f_logvar"))
        out.update(self.sentence_encoder.named("sentence_encoder"))
        for i, dec in enumerate(self.decoders):
            out.update(dec.named(f"decoder{i + 1}"))
        return out

    def memory_dim(self, index: int) -> int:
        return self.config.hidden_units if index == 0 else self.config.vocab_size

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None


def build_model(config: ModelConfig, embedding: np.ndarray, rng: Rng) -> ReDecodeModel:
    """Xavier weights, zero biases, forget-gate bias +1."""
    if embedding.shape != (config.vocab_size, config.embedding_dim):
        raise ConfigError(
            f"embedding table {embedding.shape} vs config ({config.vocab_size}, {config.embedding_dim})"
        )
    h, dz, de, v = config.hidden_units, config.latent_dim, config.embedding_dim, config.vocab_size
    sampling = LstmCellParams.init(de, h, rng)
    f_mu = DenseParams.init(h, dz, rng)
    f_logvar = DenseParams.init(h, dz, rng)
    sentence = StackedLstmParams.init(de, h, 2, rng)
    decoders = []
    for i in range(config.num_decoders):
        lstm = StackedLstmParams.init(de + dz, h, 2, rng)
        mem = h if i == 0 else v
        attention = None
        if i > 0 or config.attention_mode == "memory":
            attention = AttentionParams.init(h, mem, rng)
        decoders.append(Decoder(lstm, DenseParams.init(h + mem, v, rng), attention))
    return ReDecodeModel(config, np.asarray(embedding, dtype=np.float64), sampling, f_mu, f_logvar, sentence, decoders)


@dataclass
class LatentSample:
    mu: Tensor
    log_var: Tensor
    epsilon: np.ndarray
    z: Tensor


@dataclass
class DecodeTrace:
    """One decoder's pass over a batch.

    ``softmax_seq`` is ``[B, T, V]``, ``attention_weights`` ``[B, T, n_mem]``
    (None in final-state mode), ``final_state`` ``[B, d]`` taken at each
    row's last real step. ``mask`` marks real output positions.
    """

    token_ids: np.ndarray
    softmax_seq: Tensor
    attention_weights: Tensor | None
    final_state: Tensor
    mask: np.ndarray
    memory_mask: np.ndarray

    @property
    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=1)


@dataclass
class EncodedInput:
    mu: Tensor
    log_var: Tensor
    memory: Tensor
    memory_mask: np.ndarray
    sentence_final: Tensor


def _as_batch_ids(ids) -> tuple[np.ndarray, np.ndarray]:
    arr = np.asarray(ids, dtype=np.int64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.size == 0 or arr.shape[1] == 0:
        raise ContractError("empty input sequence")
    mask = arr != PAD
    if not mask[:, 0].all():
        raise ContractError("input sequence starts with PAD (empty sentence)")
    return arr, mask


def _embed(model: ReDecodeModel, ids: np.ndarray) -> Tensor:
    return embedding_lookup(model.embedding, ids)


def encode_sampling(model: ReDecodeModel, original, mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """Final state of the one-layer sampling LSTM through the mean/log-variance heads."""
    ids, auto_mask = _as_batch_ids(original)
    mask = auto_mask if mask is None else mask
    if ids.shape[1] > model.config.max_len + 1:
        raise ContractError(f"input length {ids.shape[1]} exceeds max_len + EOS")
    h, c = zero_state(ids.shape[0], model.config.hidden_units)
    for t in range(ids.shape[1]):
        h2, c2 = lstm_cell_step(model.sampling_encoder, _embed(model, ids[:, t]), h, c)
        active = mask[:, t]
        if not active.all():
            h2, c2 = T.blend(active, h2, h), T.blend(active, c2, c)
        h, c = h2, c2
    return dense_forward(model.f_mu, h), dense_forward(model.f_logvar, h)


def sample_latent(mu: Tensor, log_var: Tensor, rng: Rng | None = None, epsilon: np.ndarray | None = None) -> LatentSample:
    """Reparameterized draw ``z = mu + exp(log_var / 2) * eps``."""
    if mu.shape != log_var.shape:
        raise T.ShapeError(f"mu {mu.shape} vs log_var {log_var.shape}")
    if epsilon is None:
        if rng is None:
            raise ContractError("sample_latent needs an rng or an explicit epsilon")
        epsilon = rng.normal(mu.shape)
    epsilon = np.asarray(epsilon, dtype=np.float64)
    if epsilon.shape != mu.shape:
        raise T.ShapeError(f"epsilon {epsilon.shape} vs mu {mu.shape}")
    std = T.exp(T.scale(log_var, 0.5))
    z = T.add(mu, T.mul(std, Tensor(epsilon)))
    return LatentSample(mu, log_var, epsilon, z)


def encode_sentence(model: ReDecodeModel, original, mask: np.ndarray | None = None) -> tuple[Tensor, np.ndarray, Tensor]:
    """Top-layer states of the sentence encoder as ``[B, n, h]`` memory.

    Also returns the top-layer hidden state at each row's last real token.
    """
    ids, auto_mask = _as_batch_ids(original)
    mask = auto_mask if mask is None else mask
    inputs = [_embed(model, ids[:, t]) for t in range(ids.shape[1])]
    outputs, states = stacked_lstm_forward(model.sentence_encoder, inputs, step_mask=mask)
    return T.stack(outputs, axis=1), mask, states[-1][0]


def encode(model: ReDecodeModel, original, mask: np.ndarray | None = None) -> EncodedInput:
    ids, auto_mask = _as_batch_ids(original)
    mask = auto_mask if mask is None else mask
    mu, log_var = encode_sampling(model, ids, mask)
    memory, memory_mask, final = encode_sentence(model, ids, mask)
    return EncodedInput(mu, log_var, memory, memory_mask, final)


def _final_state(model: ReDecodeModel, states) -> Tensor:
    h, c = states[-1]
    kind = model.config.final_state_kind
    if kind == "hidden":
        return h
    if kind == "cell":
        return c
    return T.concat([h, c], axis=1)


def _decoder_memory(model: ReDecodeModel, index: int, memory: Tensor | None):
    dec = model.decoders[index]
    if dec.attention is None:
        return
    if memory is None or memory.shape[2] != dec.attention.memory_dim:
        got = None if memory is None else memory.shape
        raise ConfigError(f"decoder {index + 1} expects memory dim {dec.attention.memory_dim}, got {got}")


def _decoder_step(
    model: ReDecodeModel,
    index: int,
    token_ids: np.ndarray,
    z: Tensor,
    states,
    active: np.ndarray | None,
    memory: Tensor | None,
    memory_mask: np.ndarray | None,
    sentence_final: Tensor | None,
):
    dec = model.decoders[index]
    x = T.concat([_embed(model, token_ids), z], axis=1)
    top, states = stacked_lstm_step(dec.lstm, x, states, active)
    if dec.attention is not None:
        context, weights = attention_context(dec.attention, top, memory, memory_mask)
    else:
        context, weights = sentence_final, None
    probs = T.softmax(dense_forward(dec.projection, T.concat([top, context], axis=1)))
    return probs, weights, states


def decode_sequence(
    model: ReDecodeModel,
    index: int,
    z: Tensor,
    memory: Tensor | None,
    memory_mask: np.ndarray | None,
    targets: np.ndarray | None = None,
    target_mask: np.ndarray | None = None,
    sentence_final: Tensor | None = None,
    max_steps: int | None = None,
    rng: Rng | None = None,
    word_dropout: float = 0.0,
) -> DecodeTrace:
    """Run decoder ``index`` (0-based).

    With ``targets`` it is teacher-forced: the inputs are SOS followed by the
    targets shifted right. Without, it feeds back its own argmax from SOS and
    stops a row at EOS or after ``max_steps`` (default ``max_len``).
    """
    _decoder_memory(model, index, memory)
    if model.decoders[index].attention is None and sentence_final is None:
        raise ConfigError("final-state decoder needs the sentence encoder's final state")
    batch = z.shape[0]
    dec = model.decoders[index]
    states = [zero_state(batch, layer.hidden_size) for layer in dec.lstm.layers]
    probs_seq, attn_seq = [], []

    if targets is not None:
        targets = np.asarray(targets, dtype=np.int64)
        if target_mask is None:
            target_mask = targets != PAD
        if targets.shape[1] > model.config.max_len + 1:
            raise ContractError("target sequence longer than max_len + EOS")
        inputs = np.empty_like(targets)
        inputs[:, 0] = SOS
        inputs[:, 1:] = targets[:, :-1]
        if word_dropout > 0:
            if rng is None:
                raise ContractError("word dropout needs an rng")
            drop = rng.generator.random(inputs.shape) < word_dropout
            drop[:, 0] = False
            inputs = np.where(drop, UNK, inputs)
        for t in range(targets.shape[1]):
            active = target_mask[:, t]
            probs, weights, states = _decoder_step(
                model, index, inputs[:, t], z, states, active, memory, memory_mask, sentence_final
            )
            probs_seq.append(probs)
            if weights is not None:
                attn_seq.append(weights)
        token_ids, mask = targets, np.asarray(target_mask, dtype=bool)
    else:
        limit = max_steps or model.config.max_len
        current = np.full(batch, SOS, dtype=np.int64)
        alive = np.ones(batch, dtype=bool)
        emitted, masks = [], []
        for _ in range(limit):
            probs, weights, states = _decoder_step(
                model, index, current, z, states, alive, memory, memory_mask, sentence_final
            )
            probs_seq.append(probs)
            if weights is not None:
                attn_seq.append(weights)
            nxt = probs.data.argmax(axis=1)
            nxt = np.where(alive, nxt, PAD)
            emitted.append(nxt)
            masks.append(alive.copy())
            alive = alive & (nxt != EOS)
            current = np.where(alive, nxt, PAD)
            if not alive.any():
                break
        token_ids = np.stack(emitted, axis=1)
        mask = np.stack(masks, axis=1)

    softmax_seq = T.stack(probs_seq, axis=1)
    attn = T.stack(attn_seq, axis=1) if attn_seq else None
    return DecodeTrace(token_ids, softmax_seq, attn, _final_state(model, states), mask, memory_mask)


def run_chain(
    model: ReDecodeModel,
    z: Tensor,
    enc: EncodedInput,
    targets: np.ndarray | None = None,
    target_mask: np.ndarray | None = None,
    rng: Rng | None = None,
    word_dropout: float = 0.0,
) -> list[DecodeTrace]:
    """All decoders in order; decoder i>1 attends over decoder i-1's softmax outputs."""
    traces: list[DecodeTrace] = []
    memory, memory_mask = enc.memory, enc.memory_mask
    for i in range(model.config.num_decoders):
        trace = decode_sequence(
            model,
            i,
            z,
            memory,
            memory_mask,
            targets=targets,
            target_mask=target_mask,
            sentence_final=enc.sentence_final,
            rng=rng,
            word_dropout=word_dropout,
        )
        traces.append(trace)
        memory, memory_mask = trace.softmax_seq, trace.mask
    return traces


def kl_gaussian(mu: Tensor, log_var: Tensor) -> Tensor:
    """KL(N(mu, exp(log_var)) || N(0, I)), summed over dims, averaged over rows."""
    if mu.shape != log_var.shape:
        raise T.ShapeError(f"mu {mu.shape} vs log_var {log_var.shape}")
    rows = mu.shape[0] if mu.ndim > 1 else 1
    ones = Tensor(np.ones(mu.shape))
    terms = T.sub(T.sub(T.add(T.mul(mu, mu), T.exp(log_var)), ones), log_var)
    return T.scale(T.sum(terms), 0.5 / rows)


def sequence_ce(trace: DecodeTrace, targets: np.ndarray, target_mask: np.ndarray) -> Tensor:
    """Per-sentence mean CE over real positions, then mean over the batch."""
    b, t, v = trace.softmax_seq.shape
    lengths = target_mask.sum(axis=1)
    if np.any(lengths == 0):
        raise ContractError("target with no real positions")
    weights = (target_mask / lengths[:, None] / b).reshape(-1)
    flat = T.reshape(trace.softmax_seq, (b * t, v))
    loss, _ = T.cross_entropy_masked(flat, targets.reshape(-1), target_mask.reshape(-1), weights=weights)
    return loss


@dataclass
class TrainOutput:
    loss: Tensor
    ce: list[float]
    kl: float
    multisample: float
    traces: list[DecodeTrace]
    latent: LatentSample
    terms: dict[str, Tensor] = field(default_factory=dict)


def _batch_arrays(batch: Batch | tuple[np.ndarray, np.ndarray]):
    if isinstance(batch, Batch):
        return batch.src, batch.tgt
    src, tgt = batch
    return np.atleast_2d(np.asarray(src, dtype=np.int64)), np.atleast_2d(np.asarray(tgt, dtype=np.int64))


def forward_train(
    model: ReDecodeModel,
    batch: Batch | tuple[np.ndarray, np.ndarray],
    rng: Rng | None,
    kl_weight: float,
    epsilon: np.ndarray | None = None,
    word_dropout: float = 0.0,
) -> TrainOutput:
    """Mean decoder CE plus weighted KL, all decoders teacher-forced."""
    if not 0.0 <= kl_weight <= 1.0:
        raise ContractError(f"kl_weight {kl_weight} outside [0, 1]")
    src, tgt = _batch_arrays(batch)
    if src.shape[0] == 0:
        raise ContractError("empty batch")
    tgt_mask = tgt != PAD
    enc = encode(model, src)
    latent = sample_latent(enc.mu, enc.log_var, rng, epsilon)
    traces = run_chain(model, latent.z, enc, tgt, tgt_mask, rng, word_dropout)
    ces = [sequence_ce(tr, tgt, tgt_mask) for tr in traces]
    mean_ce = T.scale(T.sum(T.stack(ces)), 1.0 / len(ces)) if len(ces) > 1 else ces[0]
    kl = kl_gaussian(enc.mu, enc.log_var)
    loss = T.add(mean_ce, T.scale(kl, kl_weight))
    return TrainOutput(
        loss,
        [c.item() for c in ces],
        kl.item(),
        0.0,
        traces,
        latent,
        {"ce": mean_ce, "kl": kl, "encoded": enc},
    )


def pairwise_cosine_sum(states: Sequence[Tensor]) -> Tensor:
    """Sum over i<j of row-wise cosine similarity, averaged over rows."""
    terms = []
    for i in range(len(states)):
        for j in range(i + 1, len(states)):
            terms.append(T.cosine_similarity(states[i], states[j]))
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return T.mean(total)


def loss_multisample(
    model: ReDecodeModel,
    batch: Batch | tuple[np.ndarray, np.ndarray],
    rng: Rng | None,
    epsilons: Sequence[np.ndarray] | None = None,
) -> Tensor:
    """Pairwise cosine similarity of the last decoder's final states under three latent draws."""
    if not model.config.multisample_enabled:
        raise ContractError("multisample loss requested but multisample_enabled is off")
    src, tgt = _batch_arrays(batch)
    enc = encode(model, src)
    tgt_mask = tgt != PAD
    finals = []
    for k in range(3):
        eps = None if epsilons is None else epsilons[k]
        latent = sample_latent(enc.mu, enc.log_var, rng, eps)
        finals.append(run_chain(model, latent.z, enc, tgt, tgt_mask)[-1].final_state)
    return pairwise_cosine_sum(finals)


def training_objective(
    model: ReDecodeModel,
    batch: Batch | tuple[np.ndarray, np.ndarray],
    rng: Rng | None,
    kl_weight: float,
    epsilons: Sequence[np.ndarray] | None = None,
    word_dropout: float = 0.0,
) -> TrainOutput:
    """The full training loss: ``forward_train`` plus, when enabled, the weighted multisample term.

    The three latent draws share one encoder pass. Draw 1 is the one
    ``forward_train`` uses; ``multisample_ce="mean"`` averages the CE over
    all three draws instead of using draw 1 alone.
    """
    first_eps = None if epsilons is None else epsilons[0]
    out = forward_train(model, batch, rng, kl_weight, first_eps, word_dropout)
    cfg = model.config
    if not cfg.multisample_enabled:
        return out
    src, tgt = _batch_arrays(batch)
    tgt_mask = tgt != PAD
    enc = out.terms["encoded"]
    finals = [out.traces[-1].final_state]
    extra_ce = []
    for k in (1, 2):
        eps = None if epsilons is None else epsilons[k]
        latent = sample_latent(enc.mu, enc.log_var, rng, eps)
        traces = run_chain(model, latent.z, enc, tgt, tgt_mask, rng, word_dropout)
        finals.append(traces[-1].final_state)
        if cfg.multisample_ce == "mean":
            ces = [sequence_ce(tr, tgt, tgt_mask) for tr in traces]
            extra_ce.append(T.scale(T.sum(T.stack(ces)), 1.0 / len(ces)))
    ms = pairwise_cosine_sum(finals)
    loss = out.loss
    if extra_ce:
        # replace the draw-1 CE with the three-draw average
        total_ce = T.add(T.add(out.terms["ce"], extra_ce[0]), extra_ce[1])
        loss = T.add(T.scale(total_ce, 1.0 / 3.0), T.scale(out.terms["kl"], kl_weight))
    loss = T.add(loss, T.scale(ms, cfg.multisample_weight))
    return replace(out, loss=loss, multisample=ms.item(), terms={**out.terms, "multisample": ms})


@dataclass
class Generation:
    traces: list[DecodeTrace]
    tokens: list[list[list[int]]]  # [decoder][row] -> ids without EOS/PAD


def generate(
    model: ReDecodeModel,
    original,
    rng: Rng | None = None,
    use_mean: bool = False,
    max_steps: int | None = None,
    epsilon: np.ndarray | None = None,
) -> Generation:
    """Greedy free-running generation through the whole decoder chain.

    Each decoder starts only after the previous one has finished, attending
    over its complete softmax sequence. ``use_mean`` decodes from ``z = mu``;
    ``epsilon`` (``[B, latent]``) fixes the reparameterization noise.
    """
    ids, mask = _as_batch_ids(original)
    with T.no_grad():
        enc = encode(model, ids, mask)
        if use_mean:
            z = enc.mu
        else:
            z = sample_latent(enc.mu, enc.log_var, rng if rng is not None else Rng(0), epsilon=epsilon).z
        traces = []
        memory, memory_mask = enc.memory, enc.memory_mask
        for i in range(model.config.num_decoders):
            tr = decode_sequence(
                model, i, z, memory, memory_mask, sentence_final=enc.sentence_final, max_steps=max_steps
            )
            traces.append(tr)
            memory, memory_mask = tr.softmax_seq, tr.mask
    tokens = []
    for tr in traces:
        rows = []
        for r in range(tr.token_ids.shape[0]):
            seq = [int(t) for t, m in zip(tr.token_ids[r], tr.mask[r]) if m]
            if seq and seq[-1] == EOS:
                seq = seq[:-1]
            rows.append(seq)
        tokens.append(rows)
    return Generation(traces, tokens)
