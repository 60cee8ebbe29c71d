import json
import math

import httpx
import pytest
from hypothesis import given
from hypothesis import strategies as st

from digrank.lm_gateway import (
    GatewayError,
    HttpLM,
    HttpLmConfig,
    LmRequest,
    MalformedResponseError,
    MissingLogprobsError,
    MockLM,
    MockLmSpec,
    ProviderTransportError,
    TokenProbSequence,
    UNKNOWN_ANSWER,
    build_prompt,
    mock_lm,
    prompt_documents,
    prompt_question,
)

Q = "what is the capital of zorbia land ?"


def score(lm, docs, answer="alpha beta gamma delta", question=Q):
    return lm.score_continuation(LmRequest(build_prompt(question, docs), answer)).probs


class TestPrompt:
    def test_query_only(self):
        assert build_prompt("q ?") == "Question: q ?\nAnswer:"

    def test_documents_before(self):
        p = build_prompt("q ?", ["first  doc", "second\ndoc"])
        assert p == "Documents:\n[1] first doc\n[2] second doc\n\nQuestion: q ?\nAnswer:"

    def test_documents_after(self):
        p = build_prompt("q ?", ["d"], "after")
        assert p == "Question: q ?\n\nDocuments:\n[1] d\nAnswer:"

    def test_bad_position(self):
        with pytest.raises(ValueError):
            build_prompt("q", ["d"], "middle")

    def test_round_trip(self):
        p = build_prompt(Q, ["one two", "three"])
        assert prompt_documents(p) == ["one two", "three"]
        assert prompt_question(p) == Q


class TestTypes:
    def test_empty_answer_rejected(self):
        with pytest.raises(ValueError):
            LmRequest("p", "  ")

    @pytest.mark.parametrize(
        "tokens, probs", [(("a",), (0.5, 0.5)), ((), ()), (("a",), (0.0,)), (("a",), (1.5,))]
    )
    def test_token_sequence_invariants(self, tokens, probs):
        with pytest.raises(ValueError):
            TokenProbSequence(tokens, probs)


class TestMockScoring:
    def test_base_without_answer(self):
        assert score(MockLM(), ["nothing useful here"]) == (0.3, 0.3, 0.3, 0.3)

    def test_boost_when_answer_present(self):
        assert score(MockLM(), ["it is alpha beta gamma delta indeed"]) == (0.9, 0.9, 0.9, 0.9)

    def test_marker_penalty(self):
        spec = MockLmSpec(base_confidence=0.3, penalty_if_contradiction_marker=0.25)
        assert score(mock_lm(spec), ["allegedly it is something else"]) == (0.05, 0.05, 0.05, 0.05)

    def test_empty_document(self):
        assert score(MockLM(), [""]) == (0.3, 0.3, 0.3, 0.3)

    def test_clamped(self):
        lm = MockLM(MockLmSpec(base_confidence=0.6, boost_if_answer_present=0.6))
        assert score(lm, ["alpha beta gamma delta"]) == (0.99,) * 4
        lm = MockLM(MockLmSpec(base_confidence=0.2, penalty_if_contradiction_marker=0.5))
        assert score(lm, ["allegedly"]) == (0.01,) * 4

    def test_marker_must_be_a_token(self):
        assert score(MockLM(), ["unallegedly phrased"]) == (0.3,) * 4

    def test_known_answer_uses_known_confidence(self):
        lm = MockLM(MockLmSpec(knowledge={Q: "alpha beta"}))
        assert score(lm, [], "alpha beta") == (0.95, 0.95)
        assert score(lm, [], "other thing") == (0.3, 0.3)

    def test_tokens_are_whitespace_split(self):
        seq = MockLM().score_continuation(LmRequest("Question: x\nAnswer:", "new  york city"))
        assert seq.tokens == ("new", "york", "city")

    def test_pure_and_counted(self):
        lm = MockLM(MockLmSpec(jitter=0.05, seed=3))
        a = score(lm, ["doc"])
        b = score(MockLM(MockLmSpec(jitter=0.05, seed=3)), ["doc"])
        assert a == b
        assert lm.calls["score"] == 1
        assert len(set(a)) > 1  # jitter differs per token

    @given(st.text(max_size=60), st.text(min_size=1, max_size=20).filter(str.strip))
    def test_probs_in_range(self, doc, answer):
        seq = MockLM(MockLmSpec(jitter=0.5)).score_continuation(LmRequest(build_prompt(Q, [doc]), answer))
        assert all(0.01 <= p <= 0.99 for p in seq.probs)


class TestMockGenerate:
    def claim(self, value, subject="capital of zorbia land"):
        return f"records say the {subject} is {value} ."

    def test_unknown_without_claims(self):
        assert MockLM().generate(build_prompt(Q, ["no claims"])) == UNKNOWN_ANSWER

    def test_plurality(self):
        docs = [self.claim("kora lim"), self.claim("veda sun"), self.claim("veda sun")]
        assert MockLM().generate(build_prompt(Q, docs)) == "veda sun"

    def test_tie_goes_to_earliest(self):
        docs = [self.claim("kora lim"), self.claim("veda sun")]
        assert MockLM().generate(build_prompt(Q, docs)) == "kora lim"

    def test_other_subject_ignored(self):
        docs = [self.claim("kora lim", "mascot of zorbia land"), self.claim("veda sun")]
        assert MockLM().generate(build_prompt(Q, docs)) == "veda sun"

    def test_knowledge_votes_after_documents(self):
        lm = MockLM(MockLmSpec(knowledge={Q: "real one"}))
        assert lm.generate(build_prompt(Q)) == "real one"
        assert lm.generate(build_prompt(Q, [self.claim("fake one")])) == "fake one"
        assert lm.calls["generate"] == 2


# -- HTTP provider -------------------------------------------------------------

PROMPT = "Question: capital of france?\nAnswer:"


def echo_body(prompt=PROMPT, answer_tokens=(" Paris", " France"), answer_lps=(-0.105361, -0.223144), offsets=True):
    prompt_tokens = ["Question", ":", " capital", " of", " france", "?", "\n", "Answer", ":"]
    assert "".join(prompt_tokens) == prompt
    tokens = prompt_tokens + list(answer_tokens)
    lps = [None] + [-1.0] * (len(prompt_tokens) - 1) + list(answer_lps)
    offs, pos = [], 0
    for t in tokens:
        offs.append(pos)
        pos += len(t)
    lp = {"tokens": tokens, "token_logprobs": lps}
    if offsets:
        lp["text_offset"] = offs
    return {"choices": [{"text": "".join(tokens), "logprobs": lp}]}


def make_client(handler):
    return httpx.Client(transport=httpx.MockTransport(handler))


def http_lm(handler, sleeps=None, **kw):
    cfg = HttpLmConfig(endpoint="http://lm.test/v1/completions", model_id="fixture", **kw)
    return HttpLM(cfg, client=make_client(handler), sleep=(sleeps.append if sleeps is not None else lambda s: None))


class TestHttpScoring:
    def test_fixture_probabilities(self):
        seen = {}

        def handler(request):
            seen.update(json.loads(request.content))
            return httpx.Response(200, json=echo_body())

        seq = http_lm(handler).score_continuation(LmRequest(PROMPT, "Paris France", "fixture"))
        assert seq.tokens == (" Paris", " France")
        assert seq.probs == pytest.approx((0.9, 0.8), abs=1e-6)
        assert seq.probs[0] == pytest.approx(math.exp(-0.105361), abs=1e-9)
        assert seen == {"model": "fixture", "prompt": PROMPT + " Paris France", "echo": True,
                        "max_tokens": 0, "logprobs": 1}

    def test_without_offsets_walks_back(self):
        lm = http_lm(lambda r: httpx.Response(200, json=echo_body(offsets=False)))
        seq = lm.score_continuation(LmRequest(PROMPT, "Paris France", "fixture"))
        assert seq.probs == pytest.approx((0.9, 0.8), abs=1e-6)

    def test_missing_logprobs(self):
        body = {"choices": [{"text": "x", "logprobs": None}]}
        lm = http_lm(lambda r: httpx.Response(200, json=body))
        with pytest.raises(MissingLogprobsError):
            lm.score_continuation(LmRequest(PROMPT, "Paris", "fixture"))

    def test_null_logprob_on_answer_token(self):
        lm = http_lm(lambda r: httpx.Response(200, json=echo_body(answer_lps=(None, -0.2))))
        with pytest.raises(MissingLogprobsError):
            lm.score_continuation(LmRequest(PROMPT, "Paris France", "fixture"))

    @pytest.mark.parametrize(
        "response",
        [
            httpx.Response(200, json={"nothing": 1}),
            httpx.Response(200, text="<html>oops</html>"),
            httpx.Response(200, json={"choices": [{"logprobs": {"tokens": ["a"], "token_logprobs": [-1, -2]}}]}),
        ],
    )
    def test_malformed(self, response):
        lm = http_lm(lambda r: response)
        with pytest.raises(MalformedResponseError):
            lm.score_continuation(LmRequest(PROMPT, "Paris", "fixture"))

    def test_errors_are_distinct_gateway_errors(self):
        kinds = {ProviderTransportError, MalformedResponseError, MissingLogprobsError}
        assert all(issubclass(k, GatewayError) for k in kinds)
        assert not issubclass(MalformedResponseError, MissingLogprobsError)
        assert not issubclass(MissingLogprobsError, MalformedResponseError)


class TestHttpRetries:
    def test_retries_then_succeeds(self):
        attempts = []

        def handler(request):
            attempts.append(1)
            if len(attempts) < 3:
                return httpx.Response(503)
            return httpx.Response(200, json=echo_body())

        sleeps = []
        seq = http_lm(handler, sleeps).score_continuation(LmRequest(PROMPT, "Paris France", "fixture"))
        assert seq.probs == pytest.approx((0.9, 0.8), abs=1e-6)
        assert len(attempts) == 3
        assert sleeps == [0.5, 1.0]

    def test_transport_failure_surfaces_after_bounded_retries(self):
        def handler(request):
            raise httpx.ConnectError("refused", request=request)

        sleeps = []
        with pytest.raises(ProviderTransportError):
            http_lm(handler, sleeps, max_retries=2).score_continuation(LmRequest(PROMPT, "Paris", "fixture"))
        assert sleeps == [0.5, 1.0]

    def test_client_error_not_retried(self):
        attempts = []

        def handler(request):
            attempts.append(1)
            return httpx.Response(400, text="bad request")

        with pytest.raises(ProviderTransportError):
            http_lm(handler).score_continuation(LmRequest(PROMPT, "Paris", "fixture"))
        assert len(attempts) == 1


class TestHttpMisc:
    def test_api_key_from_environment(self, monkeypatch):
        monkeypatch.setenv("DIGRANK_API_KEY", "sekret")
        seen = {}

        def handler(request):
            seen["auth"] = request.headers.get("authorization")
            return httpx.Response(200, json=echo_body())

        http_lm(handler).score_continuation(LmRequest(PROMPT, "Paris France", "fixture"))
        assert seen["auth"] == "Bearer sekret"

    def test_no_key_no_header(self, monkeypatch):
        monkeypatch.delenv("DIGRANK_API_KEY", raising=False)
        seen = {}

        def handler(request):
            seen["auth"] = request.headers.get("authorization")
            return httpx.Response(200, json=echo_body())

        http_lm(handler).score_continuation(LmRequest(PROMPT, "Paris France", "fixture"))
        assert seen["auth"] is None

    def test_generate_first_line(self):
        seen = {}

        def handler(request):
            seen.update(json.loads(request.content))
            return httpx.Response(200, json={"choices": [{"text": " Paris\nExplanation: ..."}]})

        assert http_lm(handler).generate("prompt") == "Paris"
        assert seen["temperature"] == 0 and seen["echo"] is False
