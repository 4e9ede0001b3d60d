"""BLEU, METEOR and TER plus the corpus report harness."""

from .bleu import bleu_corpus, bleu_sentence
from .meteor import SynonymTable, meteor_corpus, meteor_score
from .report import EvaluationReport, ScoreReport, evaluate_corpus, format_csv, format_table
from .stem import porter_stem
from .ter import ter_corpus, ter_score

__all__ = [
    "EvaluationReport",
    "ScoreReport",
    "SynonymTable",
    "bleu_corpus",
    "bleu_sentence",
    "evaluate_corpus",
    "format_csv",
    "format_table",
    "meteor_corpus",
    "meteor_score",
    "porter_stem",
    "ter_corpus",
    "ter_score",
]
