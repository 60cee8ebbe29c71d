import pytest
from hypothesis import given
from hypothesis import strategies as st

from digrank.dig import (
    CollectParams,
    CollectStats,
    DigCategory,
    DigThresholds,
    DigTriplet,
    QueryCategory,
    TripletWriter,
    categorize_dig,
    categorize_query,
    collect,
    dig,
    read_triplets,
)
from digrank.lm_gateway import GatewayError, MockLM, MockLmSpec, prompt_documents
from digrank.records import Query
from digrank.retrieval import BM25Retriever, Corpus, Document

probs = st.floats(min_value=1e-9, max_value=1.0)


class TestDig:
    def test_examples(self):
        assert dig(0.3, 0.3) == 0.0
        assert dig(0.3, 0.9) == pytest.approx(0.6, abs=1e-12)
        assert categorize_dig(dig(0.3, 0.9)) is DigCategory.POSITIVE
        assert dig(0.8, 0.5) == pytest.approx(-0.3, abs=1e-12)
        assert categorize_dig(dig(0.8, 0.5)) is DigCategory.NEGATIVE

    @pytest.mark.parametrize("pb, pa", [(0.0, 0.5), (0.5, 1.2), (-0.1, 0.5)])
    def test_domain(self, pb, pa):
        with pytest.raises(ValueError):
            dig(pb, pa)

    @given(probs, probs)
    def test_antisymmetric_and_bounded(self, a, b):
        assert dig(a, b) == -dig(b, a)
        assert -1.0 < dig(a, b) < 1.0


class TestCategories:
    def test_query_examples(self):
        assert categorize_query(0.9) is QueryCategory.PROFICIENT
        assert categorize_query(0.05) is QueryCategory.CHALLENGING
        assert categorize_query(0.35, 0.5, 0.2) is QueryCategory.INTERMEDIATE
        assert categorize_query(0.5) is QueryCategory.PROFICIENT
        assert categorize_query(0.2) is QueryCategory.CHALLENGING

    def test_inverted_query_thresholds(self):
        with pytest.raises(ValueError):
            categorize_query(0.3, 0.2, 0.5)

    def test_boundaries(self):
        assert categorize_dig(0.5) is DigCategory.UNLABELED
        assert categorize_dig(0.6) is DigCategory.POSITIVE
        assert categorize_dig(-0.2) is DigCategory.UNLABELED
        assert categorize_dig(0.05) is DigCategory.NEGLIGIBLE
        assert categorize_dig(-0.05) is DigCategory.NEGLIGIBLE

    def test_bad_thresholds(self):
        with pytest.raises(ValueError):
            DigThresholds(b1=0.5, b2=-0.2, band=(-0.3, 0.05))

    @given(st.floats(min_value=-1, max_value=1))
    def test_partition(self, v):
        t = DigThresholds()
        cat = categorize_dig(v, t)
        hits = [v > t.b1, v < t.b2, t.band[0] <= v <= t.band[1]]
        assert sum(hits) <= 1
        expected = [DigCategory.POSITIVE, DigCategory.NEGATIVE, DigCategory.NEGLIGIBLE]
        assert cat is (expected[hits.index(True)] if any(hits) else DigCategory.UNLABELED)


# -- collection ---------------------------------------------------------------

CORPUS = Corpus(
    [
        Document("a1", "", "zorbia capital fact : it is kora lim"),
        Document("a2", "", "zorbia capital rumour : allegedly veda sun"),
        Document("a3", "", "zorbia has capital mountains"),
        Document("b1", "", "velm river is long and the answer is ash pine"),
        Document("b2", "", "velm river rises in the hills"),
        Document("b3", "", "velm river floods"),
    ]
    + [Document(f"f{i}", "", f"filler text number {i}") for i in range(6)]
)
QUERIES = [
    Query("q1", "zorbia capital ?", ("kora lim",)),
    Query("q2", "velm river ?", ("ash pine",)),
]


def expected_conf(p, n_tokens=2):
    # constant per-token probs survive smoothing; all tokens fall in the head
    return p ** (n_tokens * 0.8 * 0.6)


class FlakyLM(MockLM):
    """Mock that fails whenever a chosen document text is in the prompt."""

    def __init__(self, bad_doc_texts, fail_baseline=False):
        super().__init__()
        self.bad = set(bad_doc_texts)
        self.fail_baseline = fail_baseline

    def score_continuation(self, request):
        docs = prompt_documents(request.prompt_text)
        if (not docs and self.fail_baseline) or self.bad & set(docs):
            raise GatewayError("boom")
        return super().score_continuation(request)


def run(provider=None, done=(), workers=1, top_k=3):
    provider = provider or MockLM()
    stats = CollectStats()
    params = CollectParams(top_k=top_k, max_workers=workers)
    out = list(collect(QUERIES, CORPUS, BM25Retriever(CORPUS), provider, params, done, stats))
    return out, stats, provider


class TestCollect:
    def test_counts(self):
        out, stats, lm = run()
        assert len(out) == 6
        assert lm.calls["score"] == 8
        assert (stats.baseline_calls, stats.augmented_calls, stats.triplets) == (2, 6, 6)

    def test_dig_values_match_mock_arithmetic(self):
        out, _, _ = run()
        by_doc = {t.doc_id: t for t in out}
        base = expected_conf(0.3)
        assert by_doc["a1"].p_base == pytest.approx(base, abs=1e-12)
        assert by_doc["a1"].dig == pytest.approx(expected_conf(0.9) - base, abs=1e-12)
        assert by_doc["a2"].dig == pytest.approx(expected_conf(0.05) - base, abs=1e-12)
        for d in ("a3", "b2", "b3"):
            assert by_doc[d].dig == 0.0
        assert by_doc["b1"].dig > 0.5
        for t in out:
            assert t.dig == pytest.approx(t.p_aug - t.p_base, abs=1e-12)

    def test_resume_issues_only_missing_calls(self):
        full, _, _ = run()
        first_three = full[:3]
        out, stats, lm = run(done=first_three)
        assert stats.augmented_calls == 3
        assert stats.resumed == 3
        assert lm.calls["score"] == 4  # q2 still needs its baseline
        assert {t.key for t in first_three + out} == {t.key for t in full}

    def test_resume_reuses_recorded_baseline(self):
        full, _, _ = run()
        out, stats, lm = run(done=full[:2])
        assert stats.baseline_calls == 1
        assert [t.p_base for t in out if t.query_id == "q1"] == [full[0].p_base]

    def test_failures_excluded_and_counted(self):
        out, stats, _ = run(FlakyLM({CORPUS["a2"].full_text}))
        assert len(out) == 5 and stats.failed == 1
        assert stats.failures == [("q1", "a2")]
        assert all(t.doc_id != "a2" for t in out)

    def test_baseline_failure_drops_query(self):
        out, stats, _ = run(FlakyLM((), fail_baseline=True))
        assert out == [] and stats.failed == 6

    def test_multi_answer_uses_max_variant(self):
        spec = MockLmSpec(knowledge={"zorbia capital ?": "kora lim"})
        queries = [Query("q1", "zorbia capital ?", ("wrong one", "kora lim"))]
        out = list(collect(queries, CORPUS, BM25Retriever(CORPUS), MockLM(spec), CollectParams(top_k=1)))
        assert out[0].answer == "kora lim"
        assert out[0].p_base == pytest.approx(expected_conf(0.95), abs=1e-12)

    def test_no_candidates_skipped(self):
        class Empty:
            def search(self, q, k):
                return []

        stats = CollectStats()
        assert list(collect(QUERIES, CORPUS, Empty(), MockLM(), stats=stats)) == []
        assert stats.skipped_queries == 2

    def test_workers_preserve_order(self):
        serial, _, _ = run()
        parallel, _, _ = run(workers=4)
        assert serial == parallel


class TestWriter:
    def test_append_and_idempotent(self, tmp_path):
        out, _, _ = run()
        path = tmp_path / "t.jsonl"
        w = TripletWriter(path, {"config_digest": "x"})
        assert w.write(out[:4]) == 4
        w2 = TripletWriter(path)
        assert w2.header == {"config_digest": "x"} and len(w2.existing) == 4
        assert w2.write(out) == 2
        header, back = read_triplets(path)
        assert back == out and header["config_digest"] == "x"

    def test_triplet_round_trip(self):
        t = DigTriplet("q", "d", "a", 0.2, 0.7, 0.5, "m")
        assert DigTriplet.from_dict(t.to_dict()) == t
