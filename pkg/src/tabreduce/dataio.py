"""JSONL dataset loading/saving, a synthetic generator, and seeded splits.

One record per line with canonical key order (id, question, table, sql,
answers, relevant_columns, relevant_rows, annotation_status, then any extra
keys sorted), so load -> save is a byte-level fixed point.  Splits group by
table content fingerprint: questions over the same table never straddle a
split boundary.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import annotate as annotate_mod
from . import sql as sql_mod
from .errors import ConfigError
from .tables import Instance, Table, make_table, table_fingerprint

_CANONICAL_KEYS = (
    "id", "question", "table", "sql", "answers",
    "relevant_columns", "relevant_rows", "annotation_status",
)


@dataclass(frozen=True)
class LoadError:
    line: int
    message: str


def record_to_instance(record: dict) -> Instance:
    table_doc = record["table"]
    table = make_table(table_doc["columns"], table_doc["rows"])
    question = record["question"]
    if not isinstance(question, str) or not question.strip():
        raise ValueError("question must be a non-empty string")
    extra = {k: v for k, v in record.items() if k not in _CANONICAL_KEYS}
    return Instance(
        id=str(record["id"]),
        question=question,
        table=table,
        sql=record.get("sql"),
        answers=tuple(str(a) for a in record.get("answers", [])),
        relevant_columns=(
            frozenset(record["relevant_columns"])
            if record.get("relevant_columns") is not None
            else None
        ),
        relevant_rows=(
            frozenset(record["relevant_rows"])
            if record.get("relevant_rows") is not None
            else None
        ),
        annotation_status=record.get("annotation_status"),
        extra=extra,
    )


def instance_to_record(instance: Instance) -> dict:
    record: dict = {
        "id": instance.id,
        "question": instance.question,
        "table": {
            "columns": list(instance.table.columns),
            "rows": [list(r) for r in instance.table.rows],
        },
    }
    if instance.sql is not None:
        record["sql"] = instance.sql
    record["answers"] = list(instance.answers)
    if instance.relevant_columns is not None:
        record["relevant_columns"] = sorted(instance.relevant_columns)
    if instance.relevant_rows is not None:
        record["relevant_rows"] = sorted(instance.relevant_rows)
    if instance.annotation_status is not None:
        record["annotation_status"] = instance.annotation_status
    for key in sorted(instance.extra):
        record[key] = instance.extra[key]
    return record


def load_dataset(path) -> tuple[list[Instance], list[LoadError]]:
    """Parse a JSONL dataset; malformed lines are reported, not fatal."""
    instances: list[Instance] = []
    errors: list[LoadError] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                instances.append(record_to_instance(record))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                errors.append(LoadError(line=lineno, message=str(exc)))
    return instances, errors


def save_dataset(instances: Sequence[Instance], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(json.dumps(instance_to_record(inst)) + "\n")


def table_from_csv(path) -> Table:
    """Minimal CSV ingestion: first row is the header, cells stay strings."""
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError("empty CSV file")
    return make_table(rows[0], rows[1:])


# ---------------------------------------------------------------------------
# Synthetic data

HEADER_WORDS = (
    "year", "city", "country", "team", "score", "points", "rank", "name",
    "venue", "coach", "wins", "losses", "attendance", "season", "league",
    "round", "result", "date", "opponent", "medal", "sport", "event",
    "time", "distance", "height", "weight", "age", "games", "goals",
    "assists", "position", "club", "nation", "champion", "winner", "total",
    "gold", "silver", "bronze", "capacity", "region", "state", "county",
    "population", "area", "budget", "revenue", "profit",
)

VALUE_WORDS = (
    "alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golfer",
    "hotel", "india", "juliet", "kilo", "lima", "mike", "november",
    "oscar", "papa", "quebec", "romeo", "sierra", "tango", "uniform",
    "victor", "whiskey", "xray", "yankee", "zulu", "amber", "beryl",
    "coral", "dune", "ember", "fjord", "grove", "haven", "isle", "jade",
    "knoll", "lagoon", "mesa", "nook", "oasis", "pine", "quarry", "reef",
    "summit", "tarn", "vale", "wharf",
)

QUERY_TEMPLATES = ("lookup", "count", "sum", "min", "max")

_QUESTION_TEMPLATES = {
    "lookup": "which {val} where {key} is {lit}?",
    "count": "how many {val} where {key} is {lit}?",
    "sum": "sum of {val} where {key} is {lit}?",
    "min": "lowest {val} where {key} is {lit}?",
    "max": "highest {val} where {key} is {lit}?",
}


@dataclass(frozen=True)
class SynthConfig:
    n_instances: int = 100
    columns_range: tuple[int, int] = (4, 10)
    rows_range: tuple[int, int] = (5, 60)
    value_vocab_size: int = 20
    numeric_range: tuple[int, int] = (1, 40)
    template_mix: tuple[tuple[str, float], ...] = (
        ("lookup", 0.4), ("count", 0.25), ("sum", 0.2), ("min", 0.075), ("max", 0.075),
    )
    seed: int = 0
    annotate: bool = True

    def __post_init__(self) -> None:
        if self.n_instances < 0:
            raise ConfigError("n_instances must be non-negative")
        lo, hi = self.columns_range
        if not (2 <= lo <= hi <= len(HEADER_WORDS)):
            raise ConfigError("columns_range out of supported bounds")
        rlo, rhi = self.rows_range
        if not (1 <= rlo <= rhi):
            raise ConfigError("rows_range out of supported bounds")
        if not 1 <= self.value_vocab_size <= len(VALUE_WORDS):
            raise ConfigError("value_vocab_size out of supported bounds")
        nlo, nhi = self.numeric_range
        if not (0 <= nlo <= nhi):
            raise ConfigError("numeric_range must be non-negative and ordered")
        names = [name for name, _ in self.template_mix]
        if any(name not in QUERY_TEMPLATES for name in names):
            raise ConfigError(f"unknown template in mix: {names}")
        if abs(sum(w for _, w in self.template_mix) - 1.0) > 1e-9:
            raise ConfigError("template mix weights must sum to 1")


def format_answer(value) -> str:
    if isinstance(value, float) and value.is_integer():
        return str(int(value))
    return str(value)


def _sql_literal(value) -> str:
    if isinstance(value, (int, float)):
        return format_answer(value)
    return "'" + str(value).replace("'", "''") + "'"


def _generate_one(cfg: SynthConfig, index: int) -> Instance:
    rng = np.random.default_rng([cfg.seed, index])
    n_cols = int(rng.integers(cfg.columns_range[0], cfg.columns_range[1] + 1))
    n_rows = int(rng.integers(cfg.rows_range[0], cfg.rows_range[1] + 1))
    headers = [HEADER_WORDS[i] for i in rng.choice(len(HEADER_WORDS), size=n_cols, replace=False)]

    # at least one numeric and one string column; the rest are coin flips
    numeric = [bool(rng.integers(0, 2)) for _ in range(n_cols)]
    numeric[0] = True
    numeric[1] = False
    value_pool = VALUE_WORDS[: cfg.value_vocab_size]
    nlo, nhi = cfg.numeric_range
    rows = []
    for _ in range(n_rows):
        row = []
        for c in range(n_cols):
            if numeric[c]:
                row.append(int(rng.integers(nlo, nhi + 1)))
            else:
                row.append(value_pool[int(rng.integers(0, len(value_pool)))])
        rows.append(row)
    table = make_table(headers, rows)

    names = [name for name, _ in cfg.template_mix]
    weights = np.array([w for _, w in cfg.template_mix])
    template = names[int(rng.choice(len(names), p=weights / weights.sum()))]

    # value and key columns get opposite types: the filter literal then never
    # collides with the projected column's cell domain
    numeric_cols = [c for c in range(n_cols) if numeric[c]]
    string_cols = [c for c in range(n_cols) if not numeric[c]]
    if template in ("sum", "min", "max"):
        val_col = int(numeric_cols[int(rng.integers(0, len(numeric_cols)))])
    elif rng.integers(0, 2):
        val_col = int(numeric_cols[int(rng.integers(0, len(numeric_cols)))])
    else:
        val_col = int(string_cols[int(rng.integers(0, len(string_cols)))])
    key_pool = string_cols if numeric[val_col] else numeric_cols
    key_col = int(key_pool[int(rng.integers(0, len(key_pool)))])
    key_value = rows[int(rng.integers(0, n_rows))][key_col]

    projection = headers[val_col] if template == "lookup" else f"{template}({headers[val_col]})"
    query = f"select {projection} from t where {headers[key_col]} = {_sql_literal(key_value)}"
    question = _QUESTION_TEMPLATES[template].format(
        val=headers[val_col], key=headers[key_col], lit=format_answer(key_value)
    )
    result = sql_mod.execute(sql_mod.parse_sql(query), table)
    answers = tuple(format_answer(v) for v in result)

    instance = Instance(
        id=f"synth-{index:05d}",
        question=question,
        table=table,
        sql=query,
        answers=answers,
    )
    if cfg.annotate:
        instance = annotate_mod.annotate_instance(instance, target="both")
    return instance


def generate_synthetic(cfg: SynthConfig) -> list[Instance]:
    """Seed-stable synthetic instances; gold SQL always matches the answers."""
    return [_generate_one(cfg, i) for i in range(cfg.n_instances)]


# ---------------------------------------------------------------------------
# Splits

def split(
    instances: Sequence[Instance],
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> tuple[list[Instance], list[Instance], list[Instance]]:
    """Disjoint, exhaustive, seed-stable split by table fingerprint."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError("ratios must be three non-negative numbers summing to 1")
    groups: dict[str, list[int]] = {}
    for i, inst in enumerate(instances):
        groups.setdefault(table_fingerprint(inst.table), []).append(i)
    keys = sorted(groups)
    rng = np.random.default_rng(seed)
    rng.shuffle(keys)
    n = len(keys)
    cut1 = round(ratios[0] * n)
    cut2 = round((ratios[0] + ratios[1]) * n)
    assignment: dict[str, int] = {}
    for pos, key in enumerate(keys):
        assignment[key] = 0 if pos < cut1 else (1 if pos < cut2 else 2)
    parts: tuple[list[Instance], list[Instance], list[Instance]] = ([], [], [])
    for inst in instances:
        parts[assignment[table_fingerprint(inst.table)]].append(inst)
    return parts
