"""Answer-accuracy evaluation with cohort breakdowns, model comparison, and
attention export.

A prediction is correct when the greedily decoded pre-order label rebuilds
into a tree whose evaluation matches the gold answer within a relative
tolerance of 1e-4 (floored at absolute 1e-4). Malformed decodes and runtime
evaluation failures count as incorrect; they never abort a run.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Optional

import numpy as np

from . import expr, model
from .checkpoint import TrainedModel
from .dataset import BOS, MwpRecord, tokenize
from .expr import TraversalVariant

ANSWER_RTOL = Fraction(1, 10000)

COHORT_ROWS = ("Full Set", "One-Op", "Two-Op", "ADD", "SUB", "MUL", "DIV")
_OP_COHORTS = {"ADD": "+", "SUB": "-", "MUL": "*", "DIV": "/"}


class ComparisonClass(Enum):
    RR = "RR"
    WR = "WR"
    RW = "RW"
    WW = "WW"


@dataclass
class Verdict:
    record_id: str
    predicted_tokens: list[str]
    reconstructed_ok: bool
    predicted_answer: Optional[str]
    correct: bool
    failure_reason: Optional[str]  # decode_malformed | eval_error | wrong_answer


@dataclass
class EvalReport:
    total: int
    correct: int
    cohorts: dict[str, dict]
    verdicts: list[Verdict] = field(default_factory=list)

    @property
    def accuracy(self) -> float:
        return self.correct / self.total if self.total else 0.0

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "correct": self.correct,
            "accuracy": self.accuracy,
            "cohorts": self.cohorts,
            "op_cohort_membership": "inclusion over all operators used",
            "verdicts": [vars(v) for v in self.verdicts],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def render_table(self) -> str:
        width = max(len(r) for r in COHORT_ROWS)
        lines = [f"{'Cohort'.ljust(width)}  Correct/Total  Accuracy"]
        for row in COHORT_ROWS:
            c = self.cohorts[row]
            acc = "n/a" if c["count"] == 0 else f"{c['correct'] / c['count']:.4f}"
            lines.append(f"{row.ljust(width)}  {c['correct']}/{c['count']}  {acc}")
        return "\n".join(lines)


def answers_match(predicted: Fraction, gold: Fraction) -> bool:
    tol = ANSWER_RTOL * max(Fraction(1), abs(gold))
    return abs(predicted - gold) <= tol


def predict_answer(trained: TrainedModel, record: MwpRecord):
    """Greedy pre-order decode, rebuild, evaluate. Returns (answer|None, Verdict)."""
    vocab = trained.vocab
    src = vocab.encode_src(tokenize(record.masked_question))
    ids = model.greedy_decode(trained.params, TraversalVariant.PRE_ORDER, src,
                              max_len=trained.config.max_tgt_len - 2)
    tokens = vocab.decode_tgt([BOS] + ids)
    try:
        tree = expr.tree_from_preorder(tokens)
    except expr.ExprError:
        return None, Verdict(record.id, tokens, False, None, False,
                             "decode_malformed")
    try:
        answer = expr.evaluate(tree, list(record.quantities))
    except expr.ExprError:
        return None, Verdict(record.id, tokens, True, None, False, "eval_error")
    ok = answers_match(answer, record.answer)
    return answer, Verdict(record.id, tokens, True, expr.format_number(answer),
                           ok, None if ok else "wrong_answer")


def score(trained: TrainedModel, records: list[MwpRecord]) -> EvalReport:
    """Answer accuracy over records plus one-op/two-op and operator cohorts."""
    verdicts = []
    cohorts = {row: {"count": 0, "correct": 0} for row in COHORT_ROWS}
    for record in records:
        _, verdict = predict_answer(trained, record)
        verdicts.append(verdict)
        rows = ["Full Set"]
        if record.op_count == 1:
            rows.append("One-Op")
        elif record.op_count == 2:
            rows.append("Two-Op")
        rows += [name for name, op in _OP_COHORTS.items() if op in record.op_types]
        for row in rows:
            cohorts[row]["count"] += 1
            cohorts[row]["correct"] += int(verdict.correct)
    for c in cohorts.values():
        c["accuracy"] = c["correct"] / c["count"] if c["count"] else "n/a"
    return EvalReport(
        total=len(records),
        correct=sum(v.correct for v in verdicts),
        cohorts=cohorts,
        verdicts=verdicts,
    )


def compare_models(report_a: EvalReport, report_b: EvalReport) -> dict:
    """Classify records by (first model, second model) correctness: R or W."""
    a = {v.record_id: v.correct for v in report_a.verdicts}
    b = {v.record_id: v.correct for v in report_b.verdicts}
    if set(a) != set(b):
        raise ValueError("reports cover different record sets")
    per_record = {}
    counts = {c.value: 0 for c in ComparisonClass}
    for rid in a:
        cls = ("R" if a[rid] else "W") + ("R" if b[rid] else "W")
        per_record[rid] = cls
        counts[cls] += 1
    return {"per_record": per_record, "counts": counts}


def export_attention(trained: TrainedModel, record: MwpRecord,
                     task: TraversalVariant = TraversalVariant.PRE_ORDER,
                     path: Optional[str | Path] = None) -> dict:
    """Aggregate cross-attention mass each source token received over a full
    greedy decode (mean over layers and heads, summed over decode steps)."""
    vocab = trained.vocab
    tokens = tokenize(record.masked_question)
    src = vocab.encode_src(tokens)
    ids = model.greedy_decode(trained.params, task, src,
                              max_len=trained.config.max_tgt_len - 2)
    states, _ = model.encode(trained.params, src)
    prefix = [BOS] + ids
    _, trace = model.decode_step(trained.params, task, states, prefix,
                                 capture_attention=True)
    stacked = np.stack(trace.cross)  # (layers, heads, steps, src)
    per_token = stacked.mean(axis=(0, 1)).sum(axis=0)
    report = {
        "record_id": record.id,
        "tokens": tokens,
        "weights": [float(w) for w in per_token],
        "decode_steps": len(prefix),
        "predicted_label": vocab.decode_tgt([BOS] + ids),
    }
    if path is not None:
        Path(path).write_text(json.dumps(report, indent=2, sort_keys=True),
                              encoding="utf-8")
    return report
