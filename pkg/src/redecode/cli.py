"""Command-line entry point: train, generate, eval, attn-dump."""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint as ckpt
from .corpus import (
    EOS,
    MAX_TOKENS,
    DataError,
    Vocabulary,
    build_vocab,
    encode_padded,
    load_caption_groups,
    load_embeddings,
    load_pairs_tsv,
    make_pair,
    pair_sentences,
    prepare_pairs,
    preprocess_sentence,
    random_embeddings,
)
from .metrics.report import evaluate_corpus, format_csv, format_table
from .model import VARIANTS, ConfigError, ModelConfig, build_model, generate
from .tensor import ContractError, Rng, ShapeError
from .trainer import TrainConfig, TrainingError, load_checkpoint, save_checkpoint, train

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_MODEL = 0, 1, 2, 3
SEED_ENV = "REDECODE_SEED"
GEN_CHUNK = 64

# keys fixed by the variant name and therefore not settable in a config file
_VARIANT_KEYS = {"vocab_size", "num_decoders", "attention_mode", "multisample_enabled"}
_MODEL_KEYS = {f.name for f in fields(ModelConfig)} - _VARIANT_KEYS
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
_RUN_KEYS = {"variant", "train_pairs", "data_format", "embeddings", "min_frequency", "lowercase", "max_tokens"}
DATA_FORMATS = ("tsv", "captions")


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    variant: str
    train_pairs: Path
    data_format: str = "tsv"
    embeddings: Path | None = None
    min_frequency: int = 1
    lowercase: bool = True
    max_tokens: int = MAX_TOKENS
    model: dict[str, str] = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)

    def model_config(self, vocab_size: int) -> ModelConfig:
        base = ModelConfig.for_variant(self.variant, vocab_size=vocab_size)
        merged = base.to_dict()
        merged.update(self.model)
        return ModelConfig.from_dict(merged)


def _parse_bool(key: str, raw: str) -> bool:
    v = raw.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"config key {key!r}: expected a boolean, got {raw!r}")


def parse_config_text(text: str, base_dir: Path = Path(".")) -> RunConfig:
    """Flat ``key = value`` lines; ``#`` starts a comment.

    Relative paths resolve against ``base_dir`` (the config file's folder).
    """
    values: dict[str, str] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {line_no}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in _VARIANT_KEYS:
            raise ConfigError(f"config key {key!r} is set by the variant and cannot be overridden")
        if key not in _RUN_KEYS | _MODEL_KEYS | _TRAIN_KEYS:
            raise ConfigError(f"unknown config key {key!r} (line {line_no})")
        if key in values:
            raise ConfigError(f"config key {key!r} given twice")
        values[key] = value
    variant = values.get("variant")
    if variant is None:
        raise ConfigError(f"config needs a variant; valid variants: {', '.join(VARIANTS)}")
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; valid variants: {', '.join(VARIANTS)}")
    if "train_pairs" not in values:
        raise ConfigError("config needs train_pairs")

    def resolve(p: str) -> Path:
        path = Path(p).expanduser()
        return path if path.is_absolute() else base_dir / path

    fmt = values.get("data_format", "tsv")
    if fmt not in DATA_FORMATS:
        raise ConfigError(f"data_format must be one of {DATA_FORMATS}, got {fmt!r}")
    try:
        train_cfg = TrainConfig.from_dict({k: v for k, v in values.items() if k in _TRAIN_KEYS})
        min_freq = int(values.get("min_frequency", "1"))
        max_tokens = int(values.get("max_tokens", str(MAX_TOKENS)))
    except ValueError as exc:
        raise ConfigError(f"bad config value: {exc}") from None
    run = RunConfig(
        variant=variant,
        train_pairs=resolve(values["train_pairs"]),
        data_format=fmt,
        embeddings=resolve(values["embeddings"]) if values.get("embeddings") else None,
        min_frequency=min_freq,
        lowercase=_parse_bool("lowercase", values.get("lowercase", "true")),
        max_tokens=max_tokens,
        model={k: v for k, v in values.items() if k in _MODEL_KEYS},
        train=train_cfg,
    )
    try:
        run.model_config(vocab_size=1)
    except ValueError as exc:
        raise ConfigError(f"bad model setting: {exc}") from None
    return run


def load_run_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    run = parse_config_text(p.read_text(encoding="utf-8"), p.parent)
    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None:
        try:
            seed = int(env_seed)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env_seed!r}") from None
        run.train = TrainConfig.from_dict({**run.train.to_dict(), "seed": str(seed)})
    return run


def _out_dirs(out: Path, *names: str) -> list[Path]:
    dirs = [out / n for n in names]
    for d in dirs:
        d.mkdir(parents=True, exist_ok=True)
    return dirs


# ------------------------------------------------------------------ commands


def cmd_train(config_path, out_dir, stdout=None) -> int:
    stdout = stdout or sys.stdout
    run = load_run_config(config_path)
    seed = run.train.seed
    if run.data_format == "tsv":
        raw = load_pairs_tsv(run.train_pairs)
    else:
        raw = load_caption_groups(run.train_pairs, Rng([seed, 0xC0C0]))
    tokens, rejected = prepare_pairs(raw, run.max_tokens, run.lowercase)
    if not tokens:
        raise DataError(f"{run.train_pairs}: no usable pairs after preprocessing ({rejected} rejected)")
    vocab = build_vocab(pair_sentences(tokens), run.min_frequency)
    cfg = run.model_config(len(vocab))
    rng = Rng([seed, 0xB11D])
    if run.embeddings is not None:
        if not run.embeddings.is_file():
            raise FileNotFoundError(f"embedding file not found: {run.embeddings}")
        emb, report = load_embeddings(run.embeddings, vocab, cfg.embedding_dim, rng.spawn(1))
        print(f"embeddings: {report.hits} hits, {report.misses} misses", file=stdout)
    else:
        emb = random_embeddings(vocab, cfg.embedding_dim, rng.spawn(1))
    pairs = [make_pair(a, b, vocab, run.max_tokens) for a, b in tokens]
    model = build_model(cfg, emb, rng.spawn(2))

    ckpt_dir, log_dir = _out_dirs(Path(out_dir), "checkpoints", "logs")
    result = train(model, pairs, run.train, checkpoint_dir=ckpt_dir, vocab=vocab)
    log = "".join(r.log_line() + "\n" for r in result.records)
    ckpt.atomic_write_text(log_dir / "train.log", log)
    extra = {"variant": run.variant, "max_tokens": str(run.max_tokens), "lowercase": str(run.lowercase)}
    save_checkpoint(ckpt_dir / "final.rdec", model, result.optimizer, result.step, run.train, vocab, extra)
    print(f"pairs: {len(pairs)} kept, {rejected} rejected; vocabulary {len(vocab)}", file=stdout)
    if result.records:
        last = result.records[-1]
        for i, ce in enumerate(last.ce, start=1):
            print(f"decoder{i} ce\t{ce:.6f}", file=stdout)
        print(f"kl\t{last.kl:.6f}", file=stdout)
    print(f"checkpoint\t{ckpt_dir / 'final.rdec'}", file=stdout)
    return EXIT_OK


@dataclass
class _Loaded:
    model: object
    vocab: Vocabulary
    max_tokens: int
    lowercase: bool


def _load_for_inference(path) -> _Loaded:
    if not Path(path).is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        c = load_checkpoint(path)
    except ConfigError as exc:
        raise ckpt.CheckpointError(f"{path}: stored model config is invalid: {exc}") from None
    if c.vocab is None:
        raise ckpt.CheckpointError(f"{path}: checkpoint has no vocabulary")
    max_tokens = int(c.extra.get("max_tokens", str(MAX_TOKENS)))
    lowercase = c.extra.get("lowercase", "True") == "True"
    return _Loaded(c.model, c.vocab, max_tokens, lowercase)


def _tokenize_inputs(lines: Sequence[str], loaded: _Loaded, source: str) -> list[list[str]]:
    out = []
    for line_no, line in enumerate(lines, start=1):
        toks = preprocess_sentence(line, loaded.max_tokens, loaded.lowercase)
        if toks is None:
            raise DataError(f"{source}:{line_no}: empty after preprocessing or longer than {loaded.max_tokens} tokens")
        out.append(toks)
    return out


def _resolve_seed(seed: int | None) -> int:
    if seed is not None:
        return seed
    env_seed = os.environ.get(SEED_ENV)
    if env_seed is None:
        return 0
    try:
        return int(env_seed)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {env_seed!r}") from None


def generate_tokens(loaded: _Loaded, sentences: Sequence[Sequence[str]], seed: int) -> list[list[list[str]]]:
    """Per-decoder outputs for every sentence.

    Input ``i`` always draws its latent noise from ``Rng([seed, i])``, so an
    output depends only on the sentence, its position and the seed.
    """
    model = loaded.model
    latent = model.config.latent_dim
    outputs: list[list[list[str]]] = [[] for _ in range(model.config.num_decoders)]
    for start in range(0, len(sentences), GEN_CHUNK):
        chunk = sentences[start : start + GEN_CHUNK]
        ids = np.stack([encode_padded(s, loaded.vocab, loaded.max_tokens) for s in chunk])
        # trim to the longest sentence in the chunk
        width = max(len(s) for s in chunk) + 1
        eps = np.stack([Rng([seed, start + k]).normal((latent,)) for k in range(len(chunk))])
        g = generate(model, ids[:, :width], epsilon=eps)
        for d, rows in enumerate(g.tokens):
            outputs[d].extend(loaded.vocab.decode(r) for r in rows)
    return outputs


def cmd_generate(ckpt_path, input_path, seed: int | None = None, output=None, stdout=None) -> int:
    stdout = stdout or sys.stdout
    loaded = _load_for_inference(ckpt_path)
    p = Path(input_path)
    if not p.is_file():
        raise FileNotFoundError(f"input file not found: {input_path}")
    lines = [ln for ln in p.read_text(encoding="utf-8").splitlines() if ln.strip()]
    sentences = _tokenize_inputs(lines, loaded, str(input_path))
    outs = generate_tokens(loaded, sentences, _resolve_seed(seed))
    text = "".join(
        f"{d + 1}\t{' '.join(outs[d][i])}\n" for i in range(len(sentences)) for d in range(len(outs))
    )
    if output is not None:
        ckpt.atomic_write_text(output, text)
    else:
        stdout.write(text)
    return EXIT_OK


def cmd_eval(ckpt_path, pairs_path, out_dir, seed: int | None = None, stdout=None) -> int:
    stdout = stdout or sys.stdout
    loaded = _load_for_inference(ckpt_path)
    raw = load_pairs_tsv(pairs_path)
    tokens, rejected = prepare_pairs(raw, loaded.max_tokens, loaded.lowercase)
    if not tokens:
        raise DataError(f"{pairs_path}: no usable pairs after preprocessing ({rejected} rejected)")
    inputs = [a for a, _ in tokens]
    refs = [b for _, b in tokens]
    outs = generate_tokens(loaded, inputs, _resolve_seed(seed))
    report = evaluate_corpus(outs, refs, inputs)
    (rep_dir,) = _out_dirs(Path(out_dir), "reports")
    table = format_table(report)
    ckpt.atomic_write_text(rep_dir / "report.txt", table)
    ckpt.atomic_write_text(rep_dir / "report.csv", format_csv(report))
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(["input", "reference"] + [f"decoder{d + 1}" for d in range(len(outs))])
    for i in range(len(inputs)):
        w.writerow([" ".join(inputs[i]), " ".join(refs[i])] + [" ".join(o[i]) for o in outs])
    ckpt.atomic_write_text(rep_dir / "outputs.tsv", buf.getvalue())
    if rejected:
        print(f"{rejected} pairs rejected by preprocessing", file=stdout)
    stdout.write(table)
    return EXIT_OK


def attention_matrices(loaded: _Loaded, sentence: Sequence[str], seed: int) -> list[tuple[int, list[str], list[str], np.ndarray]]:
    """``(decoder, row labels, column labels, weights)`` for each attending decoder.

    Rows are the generated tokens (ending in ``<eos>``), columns the attended
    memory: the input words for decoder 1, the previous decoder's tokens after.
    """
    ids = encode_padded(sentence, loaded.vocab, loaded.max_tokens)[: len(sentence) + 1]
    eps = Rng([seed, 0]).normal((loaded.model.config.latent_dim,))[None, :]
    g = generate(loaded.model, ids, epsilon=eps)
    itos = loaded.vocab.itos
    cols = [itos[i] for i in ids]
    mats = []
    for d, tr in enumerate(g.traces, start=1):
        n_rows = int(tr.mask[0].sum())
        rows = [itos[int(t)] for t in tr.token_ids[0, :n_rows]]
        if tr.attention_weights is not None:
            n_cols = int(tr.memory_mask[0].sum())
            w = tr.attention_weights.data[0, :n_rows, :n_cols]
            mats.append((d, rows, cols[:n_cols], w))
        cols = rows
    return mats


def cmd_attn_dump(ckpt_path, sentence: str, out_dir, seed: int | None = None, stdout=None) -> int:
    stdout = stdout or sys.stdout
    loaded = _load_for_inference(ckpt_path)
    toks = _tokenize_inputs([sentence], loaded, "sentence")[0]
    mats = attention_matrices(loaded, toks, _resolve_seed(seed))
    if not mats:
        raise ContractError("no decoder attends in this model (final-state mode)")
    (attn_dir,) = _out_dirs(Path(out_dir), "attn")
    for d, rows, cols, w in mats:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow([""] + cols)
        for label, vals in zip(rows, w):
            wr.writerow([label] + [repr(float(v)) for v in vals])
        path = attn_dir / f"decoder{d}.csv"
        ckpt.atomic_write_text(path, buf.getvalue())
        print(f"decoder{d}\t{len(rows)}x{len(cols)}\t{path}", file=stdout)
    return EXIT_OK


# ---------------------------------------------------------------------- main


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="redecode", description="Iterative-decoder VAE paraphrase generation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("generate", help="paraphrase one input sentence per line")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--output", default=None, help="write here instead of stdout")

    p = sub.add_parser("eval", help="score generated paraphrases against references")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("attn-dump", help="write attention matrices as CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--sentence", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None)
    return parser


def _dispatch(args) -> int:
    if args.command == "train":
        return cmd_train(args.config, args.out)
    if args.command == "generate":
        return cmd_generate(args.ckpt, args.input, args.seed, args.output)
    if args.command == "eval":
        return cmd_eval(args.ckpt, args.pairs, args.out, args.seed)
    return cmd_attn_dump(args.ckpt, args.sentence, args.out, args.seed)


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return _dispatch(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ckpt.CheckpointError, ContractError, ShapeError, TrainingError, ValueError) as exc:
        print(f"model error: {exc}", file=sys.stderr)
        return EXIT_MODEL


if __name__ == "__main__":
    sys.exit(main())
