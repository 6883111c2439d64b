"""Reduction quality metrics, dataset statistics and length bucketing."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .errors import ConfigError
from .sql import answers_match
from .tables import Instance, count_tokens, linearize_rows, table_fingerprint

REPORT_FORMAT_VERSION = 1

TOKEN_THRESHOLDS = (4096, 8192)


def item_recall(predicted: frozenset[int] | set[int], gold: frozenset[int] | set[int]) -> tuple[float, float, float]:
    """(recall, precision, f1); empty gold gives recall 1, empty pred gives
    precision 1, and f1 is 0 when both components are 0."""
    hit = len(set(predicted) & set(gold))
    recall = 1.0 if not gold else hit / len(gold)
    precision = 1.0 if not predicted else hit / len(predicted)
    f1 = 0.0 if (precision + recall) == 0 else 2 * precision * recall / (precision + recall)
    return recall, precision, f1


@dataclass(frozen=True)
class EvalEntry:
    """One instance's evaluation inputs for a recall report."""

    predicted: frozenset[int]
    gold: frozenset[int]
    kept_fraction: float     # kept cells / total cells
    context_tokens: int


@dataclass(frozen=True)
class RecallReport:
    recall: float
    precision: float
    f1: float
    mean_reduction_ratio: float
    count: int
    per_bucket: tuple[dict, ...] | None = None
    micro_recall: float | None = None
    micro_precision: float | None = None


def _macro(entries: Sequence[EvalEntry]) -> tuple[float, float, float]:
    if not entries:
        return 0.0, 0.0, 0.0
    triples = [item_recall(e.predicted, e.gold) for e in entries]
    n = len(triples)
    return (
        sum(t[0] for t in triples) / n,
        sum(t[1] for t in triples) / n,
        sum(t[2] for t in triples) / n,
    )


def build_recall_report(
    entries: Sequence[EvalEntry],
    bucket_boundaries: Sequence[int] | None = None,
    include_micro: bool = False,
) -> RecallReport:
    """Macro-averaged recall/precision/f1; micro (pooled counts) on request."""
    recall, precision, f1 = _macro(entries)
    ratio = sum(e.kept_fraction for e in entries) / len(entries) if entries else 0.0

    per_bucket = None
    if bucket_boundaries is not None:
        assignments = assign_buckets([e.context_tokens for e in entries], bucket_boundaries)
        buckets = []
        for k in range(len(bucket_boundaries)):
            members = [e for e, a in zip(entries, assignments) if a == k]
            b_recall, b_precision, b_f1 = _macro(members)
            buckets.append(
                {
                    "bucket": k,
                    "min_tokens": int(bucket_boundaries[k]),
                    "count": len(members),
                    "recall": b_recall,
                    "precision": b_precision,
                    "f1": b_f1,
                }
            )
        per_bucket = tuple(buckets)

    micro_r = micro_p = None
    if include_micro:
        hits = sum(len(e.predicted & e.gold) for e in entries)
        gold_total = sum(len(e.gold) for e in entries)
        pred_total = sum(len(e.predicted) for e in entries)
        micro_r = 1.0 if gold_total == 0 else hits / gold_total
        micro_p = 1.0 if pred_total == 0 else hits / pred_total

    return RecallReport(
        recall=recall,
        precision=precision,
        f1=f1,
        mean_reduction_ratio=ratio,
        count=len(entries),
        per_bucket=per_bucket,
        micro_recall=micro_r,
        micro_precision=micro_p,
    )


def report_to_dict(report: RecallReport) -> dict:
    doc = {
        "format_version": REPORT_FORMAT_VERSION,
        "count": report.count,
        "recall": report.recall,
        "precision": report.precision,
        "f1": report.f1,
        "mean_reduction_ratio": report.mean_reduction_ratio,
    }
    if report.per_bucket is not None:
        doc["per_bucket"] = list(report.per_bucket)
    if report.micro_recall is not None:
        doc["micro_recall"] = report.micro_recall
        doc["micro_precision"] = report.micro_precision
    return doc


# ---------------------------------------------------------------------------
# Dataset statistics

@dataclass(frozen=True)
class DatasetStats:
    n_instances: int
    n_tables: int
    avg_columns: float
    max_columns: int
    avg_rows: float
    max_rows: int
    avg_cells: float
    max_cells: int
    avg_context_tokens: float
    max_context_tokens: int
    n_over_4096: int
    n_over_8192: int


def full_context_tokens(instance: Instance) -> int:
    table = instance.table
    if table.n_columns == 0:
        return 0
    return linearize_rows(table, frozenset(range(table.n_columns))).token_count


def dataset_stats(instances: Sequence[Instance]) -> DatasetStats:
    if not instances:
        return DatasetStats(0, 0, 0.0, 0, 0.0, 0, 0.0, 0, 0.0, 0, 0, 0)
    cols = [inst.table.n_columns for inst in instances]
    rows = [inst.table.n_rows for inst in instances]
    cells = [c * r for c, r in zip(cols, rows)]
    tokens = [full_context_tokens(inst) for inst in instances]
    tables = {table_fingerprint(inst.table) for inst in instances}
    n = len(instances)
    return DatasetStats(
        n_instances=n,
        n_tables=len(tables),
        avg_columns=sum(cols) / n,
        max_columns=max(cols),
        avg_rows=sum(rows) / n,
        max_rows=max(rows),
        avg_cells=sum(cells) / n,
        max_cells=max(cells),
        avg_context_tokens=sum(tokens) / n,
        max_context_tokens=max(tokens),
        n_over_4096=sum(1 for t in tokens if t > TOKEN_THRESHOLDS[0]),
        n_over_8192=sum(1 for t in tokens if t > TOKEN_THRESHOLDS[1]),
    )


# ---------------------------------------------------------------------------
# Length buckets and downstream accuracy

def assign_buckets(token_counts: Sequence[int], boundaries: Sequence[int]) -> list[int]:
    """Bucket k holds counts in [boundaries[k], boundaries[k+1]); the last
    bucket is open-ended.  Counts below the first boundary are an error so
    the assignment is always a partition."""
    if not boundaries:
        raise ConfigError("bucket boundaries must be non-empty")
    bounds = list(boundaries)
    if bounds != sorted(bounds) or len(set(bounds)) != len(bounds):
        raise ConfigError("bucket boundaries must be strictly ascending")
    out = []
    for tokens in token_counts:
        if tokens < bounds[0]:
            raise ConfigError(f"token count {tokens} below first boundary {bounds[0]}")
        k = 0
        for i, b in enumerate(bounds):
            if tokens >= b:
                k = i
        out.append(k)
    return out


def bucket_by_length(instances: Sequence[Instance], boundaries: Sequence[int]) -> list[int]:
    return assign_buckets([full_context_tokens(inst) for inst in instances], boundaries)


def parse_answer_text(text: str) -> list[str]:
    """Inverse of the ', '-joined answer rendering; empty text is no answer."""
    text = text.strip()
    if not text:
        return []
    return [part for part in text.split(", ")]


def downstream_accuracy(
    model_answers: Sequence[str], gold_answers: Sequence[Sequence[str]]
) -> float:
    """Exact-match rate under answer normalization."""
    if len(model_answers) != len(gold_answers):
        raise ConfigError("answer lists must align")
    if not model_answers:
        return 0.0
    hits = 0
    for text, gold in zip(model_answers, gold_answers):
        if answers_match(parse_answer_text(text), list(gold)):
            hits += 1
    return hits / len(model_answers)
