"""Table data model, linearization, prompt assembly and token budgeting.

Tables are rectangular grids of string / number / null cells under unique
headers.  A reduction names the column and row indices worth keeping; the
projected sub-table is rendered as ``Row0: (header,value), ...`` text that
downstream prompts embed.  Token counts are whitespace word counts: cheap,
deterministic, and sufficient for relative length comparisons.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

from .errors import EmptySelectionError

Cell = str | int | float | None

COLUMN_PROMPT_TEMPLATE = (
    "Select relevant columns from a table to answer a question. "
    "Output '@' if done generating. "
    "Question: {question}, List of column headers: {headers}"
)
ROW_PROMPT_TEMPLATE = (
    "Select relevant rows from a table to answer a question. "
    "Output '@' if done generating. "
    "Question: {question}, Rows: {rows}"
)


@dataclass(frozen=True)
class Table:
    """Rectangular grid: ``columns`` are headers, ``rows`` are cell lists.

    Every row must have exactly ``len(columns)`` cells.  Header uniqueness
    (after lowercase/trim) and the at-least-one-column rule are enforced by
    :func:`validate_table`, which data loading calls; projections of an
    empty column selection are deliberately allowed to have zero columns.
    """

    columns: tuple[str, ...]
    rows: tuple[tuple[Cell, ...], ...]

    def __post_init__(self) -> None:
        for i, row in enumerate(self.rows):
            if len(row) != len(self.columns):
                raise ValueError(
                    f"row {i} has {len(row)} cells, expected {len(self.columns)}"
                )

    @property
    def n_columns(self) -> int:
        return len(self.columns)

    @property
    def n_rows(self) -> int:
        return len(self.rows)

    def column_index(self, name: str) -> int | None:
        """Resolve a header case-insensitively; None when absent."""
        key = name.strip().lower()
        for i, header in enumerate(self.columns):
            if header.strip().lower() == key:
                return i
        return None


def make_table(columns: list[str] | tuple[str, ...], rows) -> Table:
    """Build and validate a table from plain lists."""
    table = Table(tuple(columns), tuple(tuple(r) for r in rows))
    validate_table(table)
    return table


def validate_table(table: Table) -> None:
    """Enforce the ingestion invariants: >= 1 column, unique headers."""
    if table.n_columns < 1:
        raise ValueError("table needs at least one column")
    seen: set[str] = set()
    for header in table.columns:
        key = header.strip().lower()
        if key in seen:
            raise ValueError(f"duplicate header (case-insensitive): {header!r}")
        seen.add(key)


def table_fingerprint(table: Table) -> str:
    """Content hash used to group instances that share a table."""
    doc = {"columns": list(table.columns), "rows": [list(r) for r in table.rows]}
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha1(blob.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class Instance:
    """One QA item: a question over a table with gold answers.

    ``sql`` is the text-to-SQL annotation used for weak supervision.
    ``relevant_columns`` / ``relevant_rows`` carry gold relevance labels once
    annotated; ``annotation_status`` is ``"ok"`` or ``"skipped:<reason>"``.
    ``extra`` preserves unknown record fields across load/save round-trips.
    """

    id: str
    question: str
    table: Table
    sql: str | None = None
    answers: tuple[str, ...] = ()
    relevant_columns: frozenset[int] | None = None
    relevant_rows: frozenset[int] | None = None
    annotation_status: str | None = None
    extra: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Reduction:
    """Selected column and row indices of a table (the kept context)."""

    columns: frozenset[int]
    rows: frozenset[int]


def full_reduction(table: Table) -> Reduction:
    return Reduction(
        columns=frozenset(range(table.n_columns)),
        rows=frozenset(range(table.n_rows)),
    )


@dataclass(frozen=True)
class LinearizedContext:
    text: str
    token_count: int
    truncated: bool = False


def project(table: Table, reduction: Reduction) -> Table:
    """Keep the selected columns/rows, preserving original relative order.

    An empty column selection yields a zero-column table rather than an
    error; row selection is then irrelevant and the result has zero rows.
    """
    for c in reduction.columns:
        if not 0 <= c < table.n_columns:
            raise IndexError(f"column index {c} out of range")
    for r in reduction.rows:
        if not 0 <= r < table.n_rows:
            raise IndexError(f"row index {r} out of range")
    cols = sorted(reduction.columns)
    rows = sorted(reduction.rows)
    if not cols:
        return Table((), tuple(() for _ in rows))
    return Table(
        tuple(table.columns[c] for c in cols),
        tuple(tuple(table.rows[r][c] for c in cols) for r in rows),
    )


def format_cell(cell: Cell) -> str:
    """Render a cell for linearization; null becomes the empty string."""
    if cell is None:
        return ""
    if isinstance(cell, bool):
        return str(cell).lower()
    if isinstance(cell, float) and cell.is_integer():
        return str(int(cell))
    return str(cell)


def quote_if_needed(text: str) -> str:
    """Double-quote values whose commas/parens would break the pair format."""
    if any(ch in text for ch in ',()'):
        return '"' + text.replace('"', '""') + '"'
    return text


def count_tokens(text: str) -> int:
    """Whitespace-delimited word count."""
    return len(text.split())


def _row_pairs(table: Table, row: tuple[Cell, ...], columns: list[int]) -> str:
    return ", ".join(
        f"({quote_if_needed(table.columns[c])},{quote_if_needed(format_cell(row[c]))})"
        for c in columns
    )


def linearize_rows(table: Table, column_subset: set[int] | frozenset[int]) -> LinearizedContext:
    """Render every row as ``Row{i}: (header,value), ...`` over a column subset.

    Rows keep table order and are joined by single spaces; a zero-row table
    linearizes to the empty string.
    """
    if not column_subset:
        raise EmptySelectionError("column subset must be non-empty")
    for c in column_subset:
        if not 0 <= c < table.n_columns:
            raise IndexError(f"column index {c} out of range")
    cols = sorted(column_subset)
    segments = [
        f"Row{i}: {_row_pairs(table, row, cols)}" for i, row in enumerate(table.rows)
    ]
    text = " ".join(segments)
    return LinearizedContext(text=text, token_count=count_tokens(text))


def row_candidate_text(table: Table, row_index: int, column_subset: set[int] | frozenset[int]) -> str:
    """Single-row linearization (no Row prefix), used as a policy candidate."""
    if not column_subset:
        raise EmptySelectionError("column subset must be non-empty")
    cols = sorted(column_subset)
    return _row_pairs(table, table.rows[row_index], cols)


def build_column_prompt(question: str, table: Table) -> str:
    headers = ", ".join(quote_if_needed(h) for h in table.columns)
    return COLUMN_PROMPT_TEMPLATE.format(question=question, headers=headers)


def build_row_prompt(question: str, table: Table, relevant_columns: set[int] | frozenset[int]) -> str:
    if not relevant_columns:
        raise EmptySelectionError("relevant_columns must be non-empty")
    linearized = linearize_rows(table, relevant_columns)
    return ROW_PROMPT_TEMPLATE.format(question=question, rows=linearized.text)


def truncate_to_budget(table: Table, budget_tokens: int) -> tuple[Table, bool]:
    """Drop trailing rows until the full-column linearization fits the budget.

    Headers are never dropped; kept rows are always a prefix of the input.
    """
    if budget_tokens < 0:
        raise ValueError("budget must be non-negative")
    if table.n_rows == 0:
        return table, False
    all_columns = frozenset(range(table.n_columns))
    cols = sorted(all_columns)
    total = 0
    kept = 0
    for row in table.rows:
        segment = f"Row{kept}: {_row_pairs(table, row, cols)}"
        total += count_tokens(segment)
        if total > budget_tokens:
            break
        kept += 1
    if kept == table.n_rows:
        return table, False
    return Table(table.columns, table.rows[:kept]), True
