import numpy as np
import pytest

from tabreduce import dataio, policy, tasks
from tabreduce.errors import ConfigError
from tabreduce.tables import Instance, make_table


def annotated_instance():
    return Instance(
        id="a",
        question="which city in 2008?",
        table=make_table(
            ["year", "city", "noise"],
            [[2004, "athens", "x"], [2008, "beijing", "y"]],
        ),
        sql="select city from t where year = 2008",
        answers=("beijing",),
        relevant_columns=frozenset({0, 1}),
        relevant_rows=frozenset({1}),
        annotation_status="ok",
    )


class TestCandidates:
    def test_column_candidates_are_headers(self):
        inst = annotated_instance()
        assert tasks.candidate_texts(inst, "columns") == ["year", "city", "noise"]

    def test_row_candidates_use_gold_columns_by_default(self):
        inst = annotated_instance()
        texts = tasks.candidate_texts(inst, "rows")
        assert texts[0] == "(year,2004), (city,athens)"
        assert len(texts) == 2

    def test_row_candidates_accept_predicted_columns(self):
        inst = annotated_instance()
        texts = tasks.candidate_texts(inst, "rows", context_columns=frozenset({1, 2}))
        assert texts[1] == "(city,beijing), (noise,y)"

    def test_rows_without_columns_rejected(self):
        inst = Instance(id="x", question="q", table=make_table(["a"], [[1]]), answers=("1",))
        with pytest.raises(ConfigError):
            tasks.candidate_texts(inst, "rows")

    def test_unknown_target_rejected(self):
        with pytest.raises(ConfigError):
            tasks.check_target("cells")


class TestTrainable:
    def test_filters_unannotated_and_skipped(self):
        good = annotated_instance()
        skipped = Instance(
            id="s", question="q", table=good.table, answers=("x",),
            annotation_status="skipped:unsupported_sql",
        )
        bare = Instance(id="b", question="q", table=good.table, answers=("x",))
        assert tasks.trainable([good, skipped, bare], "columns") == [good]

    def test_rows_require_column_context(self):
        no_cols = Instance(
            id="n", question="q", table=annotated_instance().table, answers=("x",),
            relevant_rows=frozenset({0}), annotation_status="ok",
        )
        assert tasks.trainable([no_cols], "rows") == []


class TestGreedyEvaluate:
    def test_greedy_reduction_deterministic(self):
        inst = annotated_instance()
        vocab = tasks.build_vocab([inst], "columns")
        params = policy.init_params(vocab, 8, seed=0)
        r1 = tasks.greedy_reduction(params, inst, "columns")
        r2 = tasks.greedy_reduction(params, inst, "columns")
        assert r1 == r2

    def test_evaluate_recall_bounds(self):
        instances = dataio.generate_synthetic(dataio.SynthConfig(n_instances=10, seed=0))
        usable = tasks.trainable(instances, "columns")
        vocab = tasks.build_vocab(usable, "columns")
        params = policy.init_params(vocab, 8, seed=0)
        recall = tasks.evaluate_recall(params, usable, "columns")
        assert 0.0 <= recall <= 1.0

    def test_evaluate_recall_empty(self):
        vocab = policy.build_vocabulary(["x"])
        params = policy.init_params(vocab, 8, seed=0)
        assert tasks.evaluate_recall(params, [], "columns") == 0.0


def test_vocab_covers_questions_and_candidates():
    inst = annotated_instance()
    vocab = tasks.build_vocab([inst], "rows")
    for token in ("which", "city", "2008", "athens", "year"):
        assert vocab.encode(token) != (0,), token
