"""Parse and execute the SELECT subset used for relevance annotation.

Grammar:

    SELECT column | fn(column)          fn in {count, sum, avg, min, max}
    FROM ident                          (ignored; table supplied at execution)
    [WHERE column op literal [AND ...]] op in {=, !=, <, <=, >, >=}
    [ORDER BY column [ASC|DESC]]
    [LIMIT n]

Anything beyond this (joins, OR, GROUP BY, expressions, ...) raises
``UnsupportedQuery`` with the offending token span.  Execution resolves
column names case-insensitively; a missing column is an ``ExecutionError``
with kind ``missing_column`` — the failure signal relevance annotation
relies on.  Null cells never satisfy a predicate; aggregates skip nulls
except ``count``, which counts non-null cells.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

from .tables import Cell, Table

AGGREGATE_FNS = ("count", "sum", "avg", "min", "max")
COMPARISON_OPS = ("=", "!=", "<", "<=", ">", ">=")

MISSING_COLUMN = "missing_column"
TYPE_MISMATCH = "type_mismatch"
EMPTY_AGGREGATE = "empty_aggregate"


class SqlSyntaxError(ValueError):
    """The query text does not scan/parse as SQL at all."""


class UnsupportedQuery(ValueError):
    """Parseable SQL using a feature outside the supported subset."""

    def __init__(self, message: str, span: tuple[int, int] | None = None):
        super().__init__(message)
        self.span = span


class ExecutionError(RuntimeError):
    """Execution failed; ``kind`` is one of the module's kind constants."""

    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


@dataclass(frozen=True)
class Predicate:
    column: str
    op: str
    literal: str | float


@dataclass(frozen=True)
class SqlAst:
    projection_column: str
    aggregate: str | None = None  # one of AGGREGATE_FNS or None
    predicates: tuple[Predicate, ...] = ()
    order_by: tuple[str, str] | None = None  # (column, "asc"|"desc")
    limit: int | None = None


# ---------------------------------------------------------------------------
# Tokenizer / parser

_TOKEN_RE = re.compile(
    r"\s*(?:"
    r"(?P<string>'(?:[^']|'')*'|\"(?:[^\"]|\"\")*\")"
    r"|(?P<number>-?\d+(?:\.\d+)?)"
    r"|(?P<word>[A-Za-z_][A-Za-z0-9_]*)"
    r"|(?P<op><=|>=|!=|<>|=|<|>)"
    r"|(?P<punct>[(),;*])"
    r")"
)


@dataclass(frozen=True)
class _Token:
    kind: str
    text: str
    start: int
    end: int


def _tokenize(text: str) -> list[_Token]:
    tokens: list[_Token] = []
    pos = 0
    while pos < len(text):
        match = _TOKEN_RE.match(text, pos)
        if match is None:
            if text[pos:].strip() == "":
                break
            raise SqlSyntaxError(f"cannot scan query at position {pos}: {text[pos:pos + 10]!r}")
        kind = match.lastgroup or "punct"
        tokens.append(_Token(kind, match.group(kind), match.start(kind), match.end(kind)))
        pos = match.end()
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.pos = 0

    def peek(self) -> _Token | None:
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def next(self) -> _Token:
        tok = self.peek()
        if tok is None:
            raise SqlSyntaxError("unexpected end of query")
        self.pos += 1
        return tok

    def expect_word(self, word: str) -> _Token:
        tok = self.next()
        if tok.kind != "word" or tok.text.lower() != word:
            raise SqlSyntaxError(f"expected {word!r}, got {tok.text!r}")
        return tok

    def unsupported(self, tok: _Token, feature: str) -> UnsupportedQuery:
        return UnsupportedQuery(
            f"unsupported {feature} at {tok.start}..{tok.end}: {tok.text!r}",
            span=(tok.start, tok.end),
        )

    def column_name(self) -> str:
        tok = self.next()
        if tok.kind == "word":
            return tok.text
        if tok.kind == "string":
            return _unquote(tok.text)
        raise SqlSyntaxError(f"expected column name, got {tok.text!r}")

    def parse(self) -> SqlAst:
        self.expect_word("select")
        tok = self.peek()
        if tok is None:
            raise SqlSyntaxError("empty projection")
        if tok.kind == "punct" and tok.text == "*":
            raise self.unsupported(tok, "star projection")
        if tok.kind == "word" and tok.text.lower() == "distinct":
            raise self.unsupported(tok, "DISTINCT")

        aggregate = None
        nxt = self.tokens[self.pos + 1] if self.pos + 1 < len(self.tokens) else None
        if (
            tok.kind == "word"
            and nxt is not None
            and nxt.kind == "punct"
            and nxt.text == "("
        ):
            fn = tok.text.lower()
            if fn not in AGGREGATE_FNS:
                raise self.unsupported(tok, f"function {tok.text!r}")
            aggregate = fn
            self.next()  # fn
            self.next()  # (
            column = self.column_name()
            closing = self.next()
            if closing.text != ")":
                raise SqlSyntaxError(f"expected ')', got {closing.text!r}")
        else:
            column = self.column_name()

        after = self.peek()
        if after is not None and after.kind == "punct" and after.text == ",":
            raise self.unsupported(after, "multi-column projection")

        # Optional FROM <ident>; the table comes from the caller.
        if self._at_word("from"):
            self.next()
            self.next()  # table name, ignored

        predicates: list[Predicate] = []
        if self._at_word("where"):
            self.next()
            predicates.append(self._predicate())
            while True:
                tok = self.peek()
                if tok is None:
                    break
                if tok.kind == "word" and tok.text.lower() == "and":
                    self.next()
                    predicates.append(self._predicate())
                elif tok.kind == "word" and tok.text.lower() == "or":
                    raise self.unsupported(tok, "OR")
                else:
                    break

        order_by = None
        if self._at_word("order"):
            self.next()
            self.expect_word("by")
            col = self.column_name()
            direction = "asc"
            if self._at_word("asc") or self._at_word("desc"):
                direction = self.next().text.lower()
            order_by = (col, direction)

        limit = None
        if self._at_word("limit"):
            self.next()
            tok = self.next()
            if tok.kind != "number" or not re.fullmatch(r"\d+", tok.text) or int(tok.text) < 1:
                raise SqlSyntaxError(f"LIMIT needs a positive integer, got {tok.text!r}")
            limit = int(tok.text)

        leftover = self.peek()
        if leftover is not None:
            if leftover.kind == "punct" and leftover.text == ";" and self.pos == len(self.tokens) - 1:
                self.next()
            else:
                raise self.unsupported(leftover, "clause")

        return SqlAst(
            projection_column=column,
            aggregate=aggregate,
            predicates=tuple(predicates),
            order_by=order_by,
            limit=limit,
        )

    def _at_word(self, word: str) -> bool:
        tok = self.peek()
        return tok is not None and tok.kind == "word" and tok.text.lower() == word

    def _predicate(self) -> Predicate:
        column = self.column_name()
        op_tok = self.next()
        if op_tok.kind != "op":
            raise SqlSyntaxError(f"expected comparison operator, got {op_tok.text!r}")
        op = "!=" if op_tok.text == "<>" else op_tok.text
        lit_tok = self.next()
        if lit_tok.kind == "number":
            literal: str | float = float(lit_tok.text)
        elif lit_tok.kind == "string":
            literal = _unquote(lit_tok.text)
        elif lit_tok.kind == "word":
            # bare-word literal, e.g. WHERE city = beijing
            literal = lit_tok.text
        else:
            raise SqlSyntaxError(f"expected literal, got {lit_tok.text!r}")
        return Predicate(column=column, op=op, literal=literal)


def _unquote(text: str) -> str:
    quote = text[0]
    return text[1:-1].replace(quote * 2, quote)


def parse_sql(text: str) -> SqlAst:
    """Parse a query in the supported subset.

    Raises ``SqlSyntaxError`` for unscannable text and ``UnsupportedQuery``
    (with the offending token span) for recognizable-but-unsupported SQL.
    """
    if not text or not text.strip():
        raise SqlSyntaxError("empty query")
    return _Parser(text).parse()


# ---------------------------------------------------------------------------
# Execution

_NUMERIC_RE = re.compile(r"-?\d[\d,]*(?:\.\d+)?")


def coerce_number(value: Cell) -> float | None:
    """Numeric view of a cell: numbers pass through, strings like '2,008'
    parse after comma removal, everything else is None."""
    if isinstance(value, bool):
        return None
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        text = value.strip()
        if _NUMERIC_RE.fullmatch(text):
            try:
                return float(text.replace(",", ""))
            except ValueError:
                return None
    return None


def _compare(cell: Cell, op: str, literal: str | float) -> bool:
    if cell is None:
        return False
    cell_num = coerce_number(cell)
    lit_num = coerce_number(literal)
    if cell_num is not None and lit_num is not None:
        if op == "=":
            return math.isclose(cell_num, lit_num, rel_tol=1e-6, abs_tol=1e-9)
        if op == "!=":
            return not math.isclose(cell_num, lit_num, rel_tol=1e-6, abs_tol=1e-9)
        if op == "<":
            return cell_num < lit_num
        if op == "<=":
            return cell_num <= lit_num
        if op == ">":
            return cell_num > lit_num
        if op == ">=":
            return cell_num >= lit_num
    cell_is_str = isinstance(cell, str) and cell_num is None
    lit_is_str = isinstance(literal, str) and lit_num is None
    if cell_is_str and lit_is_str:
        a = cell.strip().lower()
        b = literal.strip().lower()
        if op == "=":
            return a == b
        if op == "!=":
            return a != b
        if op == "<":
            return a < b
        if op == "<=":
            return a <= b
        if op == ">":
            return a > b
        if op == ">=":
            return a >= b
    # mixed number/string: equality is simply false, ordering is an error
    if op == "=":
        return False
    if op == "!=":
        return True
    raise ExecutionError(
        TYPE_MISMATCH, f"cannot order {cell!r} against {literal!r}"
    )


def _resolve(table: Table, name: str) -> int:
    idx = table.column_index(name)
    if idx is None:
        raise ExecutionError(MISSING_COLUMN, f"no column named {name!r}")
    return idx


def _sort_key(cell: Cell):
    num = coerce_number(cell)
    if num is not None:
        return (0, num)
    if isinstance(cell, str):
        return (1, cell.strip().lower())
    return (2, "")  # nulls last


def execute(ast: SqlAst, table: Table) -> list[Cell]:
    """Run the query against a table, returning the projected values.

    Filtering happens first, then ORDER BY / LIMIT, then projection or
    aggregation.  ``count`` of an empty filter set is ``[0]``; the other
    aggregates over an empty (or all-null) set raise ``empty_aggregate``.
    """
    pred_cols = [_resolve(table, p.column) for p in ast.predicates]
    proj_col = _resolve(table, ast.projection_column)

    rows = list(table.rows)
    for pred, col in zip(ast.predicates, pred_cols):
        rows = [row for row in rows if _compare(row[col], pred.op, pred.literal)]

    if ast.order_by is not None:
        order_col = _resolve(table, ast.order_by[0])
        mixed = {(_sort_key(row[order_col])[0]) for row in rows if row[order_col] is not None}
        if len(mixed) > 1:
            raise ExecutionError(TYPE_MISMATCH, "ORDER BY over mixed cell types")
        rows.sort(key=lambda row: _sort_key(row[order_col]), reverse=ast.order_by[1] == "desc")
    if ast.limit is not None:
        rows = rows[: ast.limit]

    values = [row[proj_col] for row in rows]
    if ast.aggregate is None:
        return values

    non_null = [v for v in values if v is not None]
    if ast.aggregate == "count":
        return [len(non_null)]
    if not non_null:
        raise ExecutionError(EMPTY_AGGREGATE, f"{ast.aggregate} of empty set")
    if ast.aggregate in ("sum", "avg"):
        numbers = [coerce_number(v) for v in non_null]
        if any(n is None for n in numbers):
            raise ExecutionError(TYPE_MISMATCH, f"{ast.aggregate} over non-numeric cells")
        total = sum(n for n in numbers if n is not None)
        return [total] if ast.aggregate == "sum" else [total / len(numbers)]
    # min / max: numeric when all cells are numeric, else lexicographic
    keys = [_sort_key(v) for v in non_null]
    if len({k[0] for k in keys}) > 1:
        raise ExecutionError(TYPE_MISMATCH, f"{ast.aggregate} over mixed cell types")
    pick = min(range(len(non_null)), key=lambda i: keys[i]) if ast.aggregate == "min" else max(
        range(len(non_null)), key=lambda i: keys[i]
    )
    return [non_null[pick]]


def referenced_columns(ast: SqlAst, table: Table) -> set[int]:
    """Indices of every column the query touches (projection, WHERE, ORDER BY)."""
    refs = {_resolve(table, ast.projection_column)}
    for pred in ast.predicates:
        refs.add(_resolve(table, pred.column))
    if ast.order_by is not None:
        refs.add(_resolve(table, ast.order_by[0]))
    return refs


# ---------------------------------------------------------------------------
# Answer matching

def normalize_answer(value: Cell) -> tuple[str, float] | tuple[str, str]:
    """Canonical comparison key: numbers (including '2,008' strings) compare
    numerically, everything else as trimmed lowercase text; null is ''."""
    if value is None:
        return ("str", "")
    num = coerce_number(value)
    if num is not None:
        return ("num", num)
    return ("str", str(value).strip().lower())


def answers_match(result: list[Cell], gold: list[str]) -> bool:
    """Multiset equality under normalization, numeric within 1e-6 relative."""
    if len(result) != len(gold):
        return False
    left = sorted(normalize_answer(v) for v in result)
    right = sorted(normalize_answer(v) for v in gold)
    for a, b in zip(left, right):
        if a[0] != b[0]:
            return False
        if a[0] == "num":
            if not math.isclose(a[1], b[1], rel_tol=1e-6, abs_tol=1e-9):
                return False
        elif a[1] != b[1]:
            return False
    return True
