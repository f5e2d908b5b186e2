"""Evaluator: grading, the gamma rule, and the error distribution."""

from __future__ import annotations

import numpy as np
import pytest

from fpengine.clients import Answer, Question
from fpengine.datastore import Datastore, QAItem, Sample
from fpengine.evaluator import (
    FailureCase,
    FailurePool,
    GradingError,
    collect_failures,
    dev_metrics,
    error_distribution,
    grade,
    option_index,
)


# -- independent counting oracle ----------------------------------------------


def oracle_error_distribution(pool_labels: list[list[int]], dev_labels: list[list[int]], k: int) -> list[float]:
    """O(n*K) recount, written without numpy for independence."""
    out = []
    for dim in range(k):
        denom = sum(1 for labels in dev_labels if labels[dim] == 1)
        numer = sum(1 for labels in pool_labels if labels[dim] == 1)
        out.append(numer / denom if denom else 0.0)
    return out


# -- scripted model clients ------------------------------------------------------


class ScriptedModel:
    """Wrong on the given (sample_id, run) pairs, correct otherwise."""

    identity = "scripted"

    def __init__(self, store: Datastore, wrong_runs: dict[str, set[int]]):
        self.store = store
        self.wrong_runs = wrong_runs

    def answer(self, image_ref: str, question: Question, run: int = 0) -> Answer:
        sid = next(s.id for s in self.store.samples() if s.image_ref == image_ref)
        gold = self._gold(sid)
        if run in self.wrong_runs.get(sid, set()):
            wrong = next(c for c in question.choices if c != gold)
            return Answer(text=wrong, token_logprobs=[-0.5])
        return Answer(text=gold, token_logprobs=[-0.1])

    def _gold(self, sid: str) -> str:
        return self.store.qa_for(sid)[0].gold_answer


class AlwaysCorrect:
    identity = "perfect"

    def __init__(self, store: Datastore):
        self.store = store

    def answer(self, image_ref: str, question: Question, run: int = 0) -> Answer:
        sid = next(s.id for s in self.store.samples() if s.image_ref == image_ref)
        return Answer(text=self.store.qa_for(sid)[0].gold_answer, token_logprobs=[-0.01])


def make_store(tmp_path, n: int = 6, k: int = 3) -> Datastore:
    store = Datastore(tmp_path / "store", dim=4, k=k)
    rng = np.random.default_rng(0)
    samples, qa = [], []
    for i in range(n):
        sid = f"d{i:03d}"
        labels = [1 if j == i % k else 0 for j in range(k)]
        samples.append(Sample(sid, f"ref://{sid}", "CT", "dev", labels, rng.normal(size=4)))
        qa.append(QAItem(sid, "perception", "what", f"q{i}", ["a", "b", "c"], "b"))
    store.ingest(samples, qa)
    return store


# -- grading ------------------------------------------------------------------


def _qa(choices, gold):
    return QAItem("x", "perception", "what", "?", choices, gold)


def test_grade_exact_letter_match():
    assert grade("B", _qa(["A", "B", "C", "D"], "B")).correct is True


def test_grade_leading_option_letter_wins():
    qa = QAItem("x", "perception", "what", "?", ["clean image", "motion artifact", "ring artifact", "noise"], "motion artifact")
    assert grade("  b) motion artifact", qa).correct is True


def test_grade_letter_choices_with_leading_letter():
    qa = QAItem("x", "perception", "what", "?", ["A", "B", "C", "D"], "B")
    assert grade("  b) motion artifact", qa).correct is True
    assert grade("the answer is c", qa).correct is False


def test_grade_wrong_letter():
    assert grade("A", _qa(["A", "B", "C", "D"], "B")).correct is False


def test_grade_full_text_match():
    qa = _qa(["clean image", "motion artifact"], "motion artifact")
    assert grade("Motion Artifact.", qa).correct is True


def test_grade_unique_containment():
    qa = _qa(["clean image", "motion artifact"], "motion artifact")
    assert grade("the scan shows a motion artifact near the cortex", qa).correct is True


def test_option_index_no_match_is_none():
    assert option_index("completely unrelated", ["alpha", "beta"]) is None


def test_grade_description_needs_scorer():
    qa = QAItem("x", "description", "open_description", "describe", [], "reference text here")
    with pytest.raises(GradingError, match="scorer required"):
        grade("whatever", qa)


def test_grade_description_with_scorer():
    class HalfScorer:
        def score(self, answer_text, reference_text):
            return 0.75 if "artifact" in answer_text else 0.25

    qa = QAItem("x", "description", "open_description", "describe", [], "artifact reference")
    good = grade("clear artifact visible", qa, scorer=HalfScorer())
    bad = grade("nothing to see", qa, scorer=HalfScorer())
    assert good.correct and good.score == 0.75
    assert not bad.correct and bad.score == 0.25


# -- gamma rule -------------------------------------------------------------------


def test_gamma_rule_four_of_five_included(tmp_path):
    store = make_store(tmp_path)
    model = ScriptedModel(store, {"d000": {0, 1, 2, 3}})
    pool = collect_failures(store, model, runs=5, gamma=0.6)
    assert [c.sample_id for c in pool.cases] == ["d000"]
    assert pool.cases[0].error_rate == pytest.approx(0.8)
    assert len(pool.cases[0].transcripts) == 5


def test_gamma_rule_three_of_five_excluded(tmp_path):
    store = make_store(tmp_path)
    model = ScriptedModel(store, {"d000": {0, 1, 2}})
    pool = collect_failures(store, model, runs=5, gamma=0.6)
    assert pool.cases == []


def test_gamma_rule_inclusive_flag(tmp_path):
    store = make_store(tmp_path)
    model = ScriptedModel(store, {"d000": {0, 1, 2}})
    pool = collect_failures(store, model, runs=5, gamma=0.6, inclusive=True)
    assert [c.sample_id for c in pool.cases] == ["d000"]


def test_always_correct_model_empty_pool(tmp_path):
    store = make_store(tmp_path)
    pool = collect_failures(store, AlwaysCorrect(store), runs=3, gamma=0.5)
    assert pool.cases == []


def test_collect_matches_brute_force_recount(tmp_path):
    store = make_store(tmp_path, n=12)
    rng = np.random.default_rng(5)
    wrong_runs = {f"d{i:03d}": {r for r in range(5) if rng.random() < 0.5} for i in range(12)}
    model = ScriptedModel(store, wrong_runs)
    pool = collect_failures(store, model, runs=5, gamma=0.6)
    expected = {sid for sid, runs in wrong_runs.items() if len(runs) / 5 > 0.6}
    assert {c.sample_id for c in pool.cases} == expected
    for c in pool.cases:
        assert c.error_rate == pytest.approx(len(wrong_runs[c.sample_id]) / 5)


def test_failure_client_error_marks_run_wrong(tmp_path):
    store = make_store(tmp_path, n=1)

    class Flaky:
        identity = "flaky"

        def __init__(self):
            self.calls = 0

        def answer(self, image_ref, question, run=0):
            self.calls += 1
            raise RuntimeError("down")

    pool = collect_failures(store, Flaky(), runs=2, gamma=0.4)
    assert [c.sample_id for c in pool.cases] == ["d000"]
    assert pool.cases[0].error_rate == 1.0


# -- error distribution --------------------------------------------------------------


def _dev(labels_list):
    return [
        Sample(f"s{i}", "", "MRI", "dev", labels, None, -1)
        for i, labels in enumerate(labels_list)
    ]


def _pool(labels_list):
    pool = FailurePool()
    for i, labels in enumerate(labels_list):
        pool.cases.append(FailureCase(f"s{i}", 0, 1.0, labels, ["x"]))
    return pool


def test_error_distribution_empty_pool_all_zero():
    dist = error_distribution(FailurePool(), _dev([[1, 0], [0, 1]]), 2)
    assert list(dist.e) == [0.0, 0.0]


def test_error_distribution_half():
    dev_labels = [[0, 0, 1], [0, 0, 1], [0, 1, 1], [0, 1, 1], [1, 0, 0], [1, 0, 0]]
    dev = _dev(dev_labels)
    pool = FailurePool()
    pool.cases.append(FailureCase("s2", 0, 1.0, [0, 1, 1], ["x"]))
    pool.cases.append(FailureCase("s3", 0, 1.0, [0, 1, 1], ["x"]))
    dist = error_distribution(pool, dev, 3)
    assert dist.e[1] == pytest.approx(1.0)  # 2 of 2 labeled dim 1
    assert dist.e[2] == pytest.approx(0.5)  # 2 of 4 labeled dim 2
    assert list(dist.e) == pytest.approx(oracle_error_distribution([c.capability_labels for c in pool.cases], dev_labels, 3))


def test_error_distribution_zero_support_convention():
    dist = error_distribution(FailurePool(), _dev([[1, 0], [1, 0]]), 2)
    assert dist.e[1] == 0.0
    assert dist.support_counts[1] == 0


def test_error_distribution_k_mismatch_errors():
    with pytest.raises(ValueError, match="K="):
        error_distribution(_pool([[1, 0, 1]]), _dev([[1, 0]]), 2)


def test_error_distribution_counts_samples_not_cases():
    """A sample with two failing questions counts once: e stays in [0,1]."""
    dev = _dev([[1], [1]])
    pool = FailurePool()
    pool.cases.append(FailureCase("s0", 0, 1.0, [1], ["x"]))
    pool.cases.append(FailureCase("s0", 1, 0.8, [1], ["x"]))
    dist = error_distribution(pool, dev, 1)
    assert dist.e[0] == pytest.approx(0.5)


def test_error_distribution_matches_oracle_randomized():
    rng = np.random.default_rng(17)
    for trial in range(50):
        k = int(rng.integers(1, 9))
        n_dev = int(rng.integers(k, 60))
        dev_labels = [[int(rng.random() < 0.4) for _ in range(k)] for _ in range(n_dev)]
        dev = _dev(dev_labels)
        member_idx = sorted(set(rng.integers(0, n_dev, size=int(rng.integers(0, n_dev + 1))).tolist()))
        pool = FailurePool()
        for i in member_idx:
            pool.cases.append(FailureCase(f"s{i}", 0, 1.0, dev_labels[i], ["x"]))
        dist = error_distribution(pool, dev, k)
        want = oracle_error_distribution([dev_labels[i] for i in member_idx], dev_labels, k)
        assert list(dist.e) == pytest.approx(want, abs=0)
        assert np.all(dist.e >= 0) and np.all(dist.e <= 1)


def test_monotonicity_adding_failure_never_decreases_e():
    dev = _dev([[1, 0], [1, 0], [0, 1], [0, 1]])
    pool = FailurePool()
    base = error_distribution(pool, dev, 2)
    pool.cases.append(FailureCase("s0", 0, 1.0, [1, 0], ["x"]))
    one = error_distribution(pool, dev, 2)
    assert one.e[0] >= base.e[0] and one.e[1] >= base.e[1]


# -- dev metrics --------------------------------------------------------------------


def test_dev_metrics_always_correct(tmp_path):
    store = make_store(tmp_path)
    snap = dev_metrics(store, AlwaysCorrect(store))
    assert snap.overall_acc == 1.0
    assert snap.per_type_acc == {"what": 1.0}
    assert set(snap.per_modality_acc) == {"CT"}


def test_dev_metrics_random_guess_binomial(tmp_path):
    store = Datastore(tmp_path / "store", dim=4, k=2)
    rng = np.random.default_rng(2)
    samples, qa = [], []
    for i in range(1000):
        sid = f"d{i:04d}"
        samples.append(Sample(sid, f"ref://{sid}", "MRI", "dev", [1, 0], rng.normal(size=4)))
        qa.append(QAItem(sid, "perception", "what", f"q{i}", ["a", "b", "c", "d"], "a"))
    store.ingest(samples, qa)

    class RandomGuess:
        identity = "guess"

        def answer(self, image_ref, question, run=0):
            pick = np.random.default_rng(abs(hash((image_ref, run))) % 2**32).integers(0, 4)
            return Answer(text=question.choices[pick], token_logprobs=[-1.0])

    snap = dev_metrics(store, RandomGuess())
    assert snap.per_type_acc["what"] == pytest.approx(0.25, abs=0.05)


def test_dev_metrics_absent_type_not_reported(tmp_path):
    store = make_store(tmp_path)
    snap = dev_metrics(store, AlwaysCorrect(store))
    assert "how" not in snap.per_type_acc


def test_parallel_evaluation_order_independent(tmp_path):
    from fpengine.evaluator import evaluate_items

    store = make_store(tmp_path, n=12)
    rng = np.random.default_rng(8)
    wrong = {f"d{i:03d}": {int(r) for r in rng.integers(0, 5, size=2)} for i in range(12)}
    model = ScriptedModel(store, wrong)
    serial = evaluate_items(store, model, runs=5, parallelism=1)
    parallel = evaluate_items(store, model, runs=5, parallelism=4)
    assert [(r.sample_id, r.qa_index, r.correct) for r in serial] == [
        (r.sample_id, r.qa_index, r.correct) for r in parallel
    ]
