"""Gold relevance labels by iterative removal and re-execution.

A column/row is irrelevant exactly when dropping it still lets the gold SQL
query reproduce the gold answers.  The pass is greedy and single-direction
(columns left to right, then rows top to bottom on the column-projected
table), which makes annotation deterministic; removals accumulate, so the
result is 1-minimal: dropping any single kept item breaks the answers.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable

from . import sql
from .tables import Instance, Reduction, Table, project

STATUS_OK = "ok"
SKIP_UNSUPPORTED = "skipped:unsupported_sql"
SKIP_GOLD_MISMATCH = "skipped:gold_mismatch"
SKIP_NO_SQL = "skipped:no_sql"


@dataclass(frozen=True)
class RelevanceAnnotation:
    relevant_columns: frozenset[int]
    relevant_rows: frozenset[int]
    status: str


@dataclass
class SkipStats:
    counts: dict[str, int] = field(default_factory=dict)

    def record(self, status: str) -> None:
        if status != STATUS_OK:
            self.counts[status] = self.counts.get(status, 0) + 1

    @property
    def total(self) -> int:
        return sum(self.counts.values())


def _reproduces_gold(ast: sql.SqlAst, table: Table, gold: list[str]) -> bool:
    try:
        result = sql.execute(ast, table)
    except sql.ExecutionError:
        return False
    return sql.answers_match(result, gold)


def annotate_columns(instance: Instance) -> tuple[frozenset[int] | None, str]:
    """Relevant column indices, or (None, skip reason).

    Columns the SQL references syntactically are kept without a removal
    trial; every other column is tentatively dropped and stays dropped if
    the query still reproduces the gold answers.
    """
    if instance.sql is None:
        return None, SKIP_NO_SQL
    try:
        ast = sql.parse_sql(instance.sql)
    except (sql.UnsupportedQuery, sql.SqlSyntaxError):
        return None, SKIP_UNSUPPORTED

    table = instance.table
    gold = list(instance.answers)
    if not _reproduces_gold(ast, table, gold):
        return None, SKIP_GOLD_MISMATCH

    referenced = sql.referenced_columns(ast, table)
    kept = set(range(table.n_columns))
    all_rows = frozenset(range(table.n_rows))
    for col in range(table.n_columns):
        if col in referenced:
            continue
        trial = kept - {col}
        projected = project(table, Reduction(columns=frozenset(trial), rows=all_rows))
        if _reproduces_gold(ast, projected, gold):
            kept = trial
    return frozenset(kept), STATUS_OK


def annotate_rows(instance: Instance, relevant_columns: frozenset[int]) -> tuple[frozenset[int] | None, str]:
    """Relevant row indices over the column-projected table, or a skip.

    A row is relevant iff removing it from the surviving set makes execution
    fail or stops the result matching the gold answers.
    """
    if instance.sql is None:
        return None, SKIP_NO_SQL
    try:
        ast = sql.parse_sql(instance.sql)
    except (sql.UnsupportedQuery, sql.SqlSyntaxError):
        return None, SKIP_UNSUPPORTED

    gold = list(instance.answers)
    base = project(
        instance.table,
        Reduction(columns=relevant_columns, rows=frozenset(range(instance.table.n_rows))),
    )
    if not _reproduces_gold(ast, base, gold):
        return None, SKIP_GOLD_MISMATCH

    kept = set(range(base.n_rows))
    for row in range(base.n_rows):
        trial = kept - {row}
        projected = project(base, Reduction(columns=frozenset(range(base.n_columns)), rows=frozenset(trial)))
        if _reproduces_gold(ast, projected, gold):
            kept = trial
    return frozenset(kept), STATUS_OK


def annotate_instance(instance: Instance, target: str = "both") -> Instance:
    """Return a copy of the instance with gold relevance fields filled in."""
    if target not in ("columns", "rows", "both"):
        raise ValueError(f"unknown target {target!r}")

    columns: frozenset[int] | None = None
    rows: frozenset[int] | None = None
    status = STATUS_OK

    columns, status = annotate_columns(instance)
    if status == STATUS_OK and target in ("rows", "both"):
        assert columns is not None
        rows, status = annotate_rows(instance, columns)
    if status != STATUS_OK:
        return replace(instance, annotation_status=status)
    if target == "columns":
        return replace(instance, relevant_columns=columns, annotation_status=status)
    if target == "rows":
        return replace(instance, relevant_rows=rows, annotation_status=status)
    return replace(
        instance, relevant_columns=columns, relevant_rows=rows, annotation_status=status
    )


def annotate_dataset(
    instances: Iterable[Instance], target: str = "both", parallelism: int = 1
) -> tuple[list[Instance], SkipStats]:
    """Order-preserving annotation over a dataset, optionally parallel.

    Annotation is pure per instance, so the output is identical for any
    worker count; results are assembled in input order.
    """
    items = list(instances)
    if parallelism <= 1:
        annotated = [annotate_instance(inst, target) for inst in items]
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            annotated = list(pool.map(lambda inst: annotate_instance(inst, target), items))
    stats = SkipStats()
    for inst in annotated:
        stats.record(inst.annotation_status or STATUS_OK)
    return annotated, stats
