"""Corpus scoring harness: decoder-vs-reference and decoder-vs-decoder reports."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

from ..tensor import ContractError
from .bleu import bleu_corpus, bleu_sentence
from .meteor import SynonymTable, meteor_corpus, meteor_score
from .ter import ter_corpus, ter_score

Tokens = Sequence[str]
CSV_HEADER = ("system", "meteor", "bleu", "ter")


@dataclass
class SentenceScore:
    index: int
    meteor: float
    bleu: float
    ter: float


@dataclass
class ScoreReport:
    """Corpus METEOR, BLEU and TER for one system, all as percentages."""

    system: str
    meteor: float
    bleu: float
    ter: float
    sentences: list[SentenceScore] = field(default_factory=list)

    def __post_init__(self):
        for name in ("meteor", "bleu"):
            v = getattr(self, name)
            if not 0.0 <= v <= 100.0 + 1e-9:
                raise ContractError(f"{name} {v} outside [0, 100]")
        if self.ter < 0:
            raise ContractError(f"negative TER {self.ter}")


def score_system(
    system: str,
    candidates: Sequence[Tokens],
    references: Sequence[Tokens],
    synonyms: SynonymTable | None = None,
    per_sentence: bool = True,
) -> ScoreReport:
    if len(candidates) != len(references):
        raise ContractError(f"{system}: {len(candidates)} outputs vs {len(references)} references")
    sentences = []
    if per_sentence:
        for i, (c, r) in enumerate(zip(candidates, references)):
            # sentence TER is undefined without a reference word; such rows
            # (a decoder that emitted only EOS) count in the corpus scores only
            if not r:
                continue
            sentences.append(
                SentenceScore(i, 100.0 * meteor_score(c, r, synonyms), bleu_sentence(c, r), 100.0 * ter_score(c, r))
            )
    return ScoreReport(
        system,
        meteor_corpus(candidates, references, synonyms),
        bleu_corpus(candidates, references),
        ter_corpus(candidates, references),
        sentences,
    )


@dataclass
class EvaluationReport:
    """Block (a): each decoder against the references.
    Block (b): decoder i against decoder i+1.
    """

    versus_reference: list[ScoreReport]
    between_decoders: list[ScoreReport]
    num_inputs: int

    def all(self) -> list[ScoreReport]:
        return self.versus_reference + self.between_decoders


def evaluate_corpus(
    decoder_outputs: Sequence[Sequence[Tokens]],
    references: Sequence[Tokens],
    inputs: Sequence[Tokens],
    synonyms: SynonymTable | None = None,
    per_sentence: bool = True,
) -> EvaluationReport:
    """Score every decoder against the references, then adjacent decoders pairwise.

    In block (b) decoder i+1's output is the candidate and decoder i's output
    the reference.
    """
    if not decoder_outputs:
        raise ContractError("evaluate_corpus: no decoder outputs")
    n = len(references)
    if len(inputs) != n:
        raise ContractError(f"{len(inputs)} inputs vs {n} references")
    for i, outs in enumerate(decoder_outputs, start=1):
        if len(outs) != n:
            raise ContractError(f"decoder {i}: {len(outs)} outputs vs {n} references")
    if n == 0:
        raise ContractError("evaluate_corpus: empty corpus")
    vs_ref = [
        score_system(f"decoder{i}_vs_reference", outs, references, synonyms, per_sentence)
        for i, outs in enumerate(decoder_outputs, start=1)
    ]
    between = [
        score_system(f"decoder{i}_vs_decoder{i + 1}", decoder_outputs[i], decoder_outputs[i - 1], synonyms, per_sentence)
        for i in range(1, len(decoder_outputs))
    ]
    return EvaluationReport(vs_ref, between, n)


def format_table(report: EvaluationReport) -> str:
    width = max(len(r.system) for r in report.all())
    head = f"{'system':<{width}}  {'METEOR':>8}  {'BLEU':>8}  {'TER':>8}"
    lines = [f"inputs: {report.num_inputs}", ""]
    blocks = [("(a) decoder output vs reference", report.versus_reference)]
    if report.between_decoders:
        blocks.append(("(b) decoder i vs decoder i+1", report.between_decoders))
    for title, rows in blocks:
        lines += [title, head, "-" * len(head)]
        lines += [f"{r.system:<{width}}  {r.meteor:8.2f}  {r.bleu:8.2f}  {r.ter:8.2f}" for r in rows]
        lines.append("")
    return "\n".join(lines)


def format_csv(report: EvaluationReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in report.all():
        w.writerow([r.system, f"{r.meteor:.6f}", f"{r.bleu:.6f}", f"{r.ter:.6f}"])
    return buf.getvalue()
