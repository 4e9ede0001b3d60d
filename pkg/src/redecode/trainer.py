"""Adam, KL annealing, the training loop and model persistence."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint as ckpt
from . import tensor as T
from .corpus import SentencePair, Vocabulary, make_batches
from .model import ConfigError, ModelConfig, ReDecodeModel, build_model, training_objective
from .tensor import ContractError, Rng

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-4
    batch_size: int = 32
    epochs: int = 1
    # when set, overrides epochs as the stopping rule
    max_steps: int = 0
    kl_anneal_steps: int = 5000
    kl_schedule: str = "linear"
    checkpoint_every: int = 0
    seed: int = 0
    word_dropout_prob: float = 0.0
    # 0 disables clipping
    gradient_clip_norm: float = 5.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.kl_anneal_steps < 0:
            raise ConfigError("kl_anneal_steps must be >= 0")
        if self.kl_schedule not in ("linear", "sigmoid"):
            raise ConfigError("kl_schedule must be 'linear' or 'sigmoid'")
        if not 0.0 <= self.word_dropout_prob < 1.0:
            raise ConfigError("word_dropout_prob must be in [0, 1)")
        if self.gradient_clip_norm < 0:
            raise ConfigError("gradient_clip_norm must be >= 0")

    def to_dict(self) -> dict[str, str]:
        return {f.name: str(getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> TrainConfig:
        kwargs = {}
        for f in fields(cls):
            if f.name in d:
                kwargs[f.name] = {"int": int, "float": float}.get(f.type, str)(d[f.name])
        return cls(**kwargs)


class TrainingError(RuntimeError):
    pass


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def global_grad_norm(grads: Sequence[np.ndarray]) -> float:
    return math.sqrt(float(np.sum([np.vdot(g, g) for g in grads])))


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Rescale in place so the global norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = global_grad_norm(list(grads.values()))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * factor
    return norm


def adam_step(
    params: dict[str, T.Tensor],
    state: AdamState,
    lr: float,
    clip_norm: float = 0.0,
    grads: dict[str, np.ndarray] | None = None,
) -> float:
    """Bias-corrected Adam update, in place. Returns the pre-clip gradient norm."""
    if grads is None:
        grads = {}
        for name, p in params.items():
            if p.grad is None:
                raise ContractError(f"missing gradient for parameter {name!r}")
            grads[name] = p.grad
    else:
        missing = set(params) - set(grads)
        if missing:
            raise ContractError(f"missing gradient for parameters {sorted(missing)}")
        grads = dict(grads)
    norm = clip_gradients(grads, clip_norm)
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return norm


def kl_anneal_weight(step: int, kl_anneal_steps: int, schedule: str = "linear") -> float:
    if kl_anneal_steps == 0:
        return 1.0
    if schedule == "sigmoid":
        # centred at half the ramp, 0 at step 0 and 1 past the end
        if step >= kl_anneal_steps:
            return 1.0
        k = 10.0 / kl_anneal_steps
        raw = 1.0 / (1.0 + math.exp(-k * (step - kl_anneal_steps / 2)))
        lo = 1.0 / (1.0 + math.exp(k * kl_anneal_steps / 2))
        return max(0.0, (raw - lo) / (1.0 - 2 * lo))
    return min(1.0, step / kl_anneal_steps)


@dataclass
class StepRecord:
    step: int
    ce: list[float]
    kl: float
    multisample: float
    total: float

    def log_line(self) -> str:
        cols = [str(self.step), *(repr(c) for c in self.ce), repr(self.kl), repr(self.multisample), repr(self.total)]
        return "\t".join(cols)


@dataclass
class TrainResult:
    records: list[StepRecord]
    step: int
    optimizer: AdamState


def step_rng(seed: int, step: int) -> Rng:
    return Rng([seed, 0x5EED, step])


def train(
    model: ReDecodeModel,
    pairs: Sequence[SentencePair],
    cfg: TrainConfig,
    optimizer: AdamState | None = None,
    start_step: int = 0,
    checkpoint_dir=None,
    log_path=None,
    vocab: Vocabulary | None = None,
    stop_step: int | None = None,
) -> TrainResult:
    """Run Adam over shuffled batches.

    Step ``s`` always trains batch ``s % n_batches`` of epoch
    ``s // n_batches`` with an rng keyed by ``(seed, s)``, so a run resumed
    from a step-``k`` checkpoint continues exactly like an unbroken one.
    """
    if not pairs:
        raise ContractError("train: empty training set")
    optimizer = optimizer or AdamState()
    n_batches = math.ceil(len(pairs) / cfg.batch_size)
    total_steps = cfg.max_steps if cfg.max_steps > 0 else cfg.epochs * n_batches
    if stop_step is not None:
        total_steps = min(total_steps, stop_step)
    params = model.parameters()
    records: list[StepRecord] = []
    log_fh = open(log_path, "a", encoding="utf-8") if log_path else None
    batches: list = []
    current_epoch = -1
    try:
        for step in range(start_step, total_steps):
            epoch, index = divmod(step, n_batches)
            if epoch != current_epoch:
                batches = make_batches(pairs, cfg.batch_size, cfg.seed, epoch)
                current_epoch = epoch
            batch = batches[index]
            kl_w = kl_anneal_weight(step, cfg.kl_anneal_steps, cfg.kl_schedule)
            model.zero_grad()
            out = training_objective(model, batch, step_rng(cfg.seed, step), kl_w, word_dropout=cfg.word_dropout_prob)
            total = out.loss.item()
            if not math.isfinite(total):
                raise TrainingError(f"non-finite loss {total} at step {step} (epoch {epoch}, batch {index})")
            T.backward(out.loss)
            for name, p in params.items():
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
            adam_step(params, optimizer, cfg.learning_rate, cfg.gradient_clip_norm)
            rec = StepRecord(step, out.ce, out.kl, out.multisample, total)
            records.append(rec)
            if log_fh:
                log_fh.write(rec.log_line() + "\n")
            done = step + 1
            if checkpoint_dir and cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
                save_checkpoint(Path(checkpoint_dir) / f"step_{done:08d}.rdec", model, optimizer, done, cfg, vocab)
            if step % 100 == 0:
                logger.info("step %d total %.4f ce %s kl %.4f", step, total, [round(c, 4) for c in out.ce], out.kl)
    finally:
        if log_fh:
            log_fh.close()
    return TrainResult(records, max(start_step, total_steps), optimizer)


# ---------------------------------------------------------------- persistence


@dataclass
class Checkpoint:
    model: ReDecodeModel
    optimizer: AdamState
    step: int
    train_config: TrainConfig | None
    vocab: Vocabulary | None
    extra: dict[str, str]


def save_checkpoint(
    path,
    model: ReDecodeModel,
    optimizer: AdamState | None,
    step: int,
    train_config: TrainConfig | None = None,
    vocab: Vocabulary | None = None,
    extra: dict[str, str] | None = None,
) -> None:
    config = {f"model.{k}": v for k, v in model.config.to_dict().items()}
    if train_config is not None:
        config.update({f"train.{k}": v for k, v in train_config.to_dict().items()})
    if vocab is not None:
        config["vocab.tokens"] = "\n".join(vocab.itos)
        config["vocab.min_frequency"] = str(vocab.min_frequency)
    for k, v in (extra or {}).items():
        config[f"extra.{k}"] = v
    tensors = {"embedding": model.embedding}
    tensors.update({name: p.data for name, p in model.parameters().items()})
    opt: dict[str, np.ndarray] = {}
    if optimizer is not None:
        config["adam.step"] = str(optimizer.step)
        config["adam.betas"] = f"{optimizer.beta1!r} {optimizer.beta2!r} {optimizer.eps!r}"
        for name in optimizer.m:
            opt[f"m.{name}"] = optimizer.m[name]
            opt[f"v.{name}"] = optimizer.v[name]
    ckpt.write_raw(path, ckpt.RawCheckpoint(config, tensors, opt, step))


def _section(config: dict[str, str], prefix: str) -> dict[str, str]:
    return {k[len(prefix) :]: v for k, v in config.items() if k.startswith(prefix)}


def load_checkpoint(path, expected: ModelConfig | None = None) -> Checkpoint:
    """Rebuild model, optimizer and step from ``path``.

    With ``expected`` the model is built from that config and every stored
    tensor must match its shape.
    """
    raw = ckpt.read_raw(path)
    stored_cfg = ModelConfig.from_dict(_section(raw.config, "model."))
    cfg = expected or stored_cfg
    if "embedding" not in raw.tensors:
        raise ckpt.ShapeMismatchError("checkpoint has no embedding table")
    emb = raw.tensors["embedding"]
    if emb.shape != (cfg.vocab_size, cfg.embedding_dim):
        raise ckpt.ShapeMismatchError(
            f"embedding {emb.shape} vs config ({cfg.vocab_size}, {cfg.embedding_dim})"
        )
    model = build_model(cfg, emb, Rng(0))
    params = model.parameters()
    stored = {k: v for k, v in raw.tensors.items() if k != "embedding"}
    if set(stored) != set(params):
        missing = sorted(set(params) - set(stored))
        unexpected = sorted(set(stored) - set(params))
        raise ckpt.ShapeMismatchError(
            f"parameter set mismatch vs config: missing {missing[:4]}, unexpected {unexpected[:4]}"
        )
    for name, p in params.items():
        if stored[name].shape != p.data.shape:
            raise ckpt.ShapeMismatchError(f"{name}: checkpoint {stored[name].shape} vs config {p.data.shape}")
        p.data[...] = stored[name]
    opt = AdamState()
    if "adam.step" in raw.config:
        opt.step = int(raw.config["adam.step"])
        b1, b2, eps = (float(x) for x in raw.config["adam.betas"].split())
        opt.beta1, opt.beta2, opt.eps = b1, b2, eps
        for name in params:
            if f"m.{name}" in raw.optimizer:
                opt.m[name] = raw.optimizer[f"m.{name}"]
                opt.v[name] = raw.optimizer[f"v.{name}"]
    train_cfg = None
    tsec = _section(raw.config, "train.")
    if tsec:
        train_cfg = TrainConfig.from_dict(tsec)
    vocab = None
    if "vocab.tokens" in raw.config:
        vocab = Vocabulary(tuple(raw.config["vocab.tokens"].split("\n")), int(raw.config.get("vocab.min_frequency", "1")))
        if len(vocab) != cfg.vocab_size:
            raise ckpt.ShapeMismatchError(f"stored vocabulary of {len(vocab)} vs vocab_size {cfg.vocab_size}")
    return Checkpoint(model, opt, raw.step, train_cfg, vocab, _section(raw.config, "extra."))
