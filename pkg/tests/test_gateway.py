import json

import pytest

from trifuse import gateway as G
from trifuse.errors import RerankFormatError, TransportError, TrifuseError
from trifuse.evaluation import RetrievalRun, recall_at_k, success_at_k
from trifuse.store import PairEntry, PairSet

VALID = "this merged text has more than ten words in it for sure"


class TestChatRequest:
    def test_negative_temperature_rejected(self):
        with pytest.raises(TrifuseError):
            G.ChatRequest(system_prompt="s", user_payload="u", temperature=-0.1)

    def test_defaults_deterministic(self):
        req = G.ChatRequest(system_prompt="s", user_payload="u")
        assert req.temperature == 0.0


class TestMockTransport:
    def test_table_consumed_in_order(self):
        t = G.MockTransport(responses=["a", "b"])
        req = G.ChatRequest(system_prompt="s", user_payload="u")
        assert t.send(req) == "a"
        assert t.send(req) == "b"
        with pytest.raises(TransportError):
            t.send(req)

    def test_handler_and_request_recording(self):
        t = G.MockTransport(handler=lambda req: req.user_payload.upper())
        assert t.send(G.ChatRequest(system_prompt="s", user_payload="hi")) == "HI"
        assert len(t.requests) == 1


class TestPrompts:
    def test_prompts_load(self):
        for name in ("augment", "rerank"):
            text = G.load_prompt(name)
            assert len(text) > 100


def echo_concat_handler(request):
    pairs = json.loads(request.user_payload)["pairs"]
    return json.dumps([" ".join(p for p in (e["text"], e["ocr"]) if p) for e in pairs])


class TestAugment:
    def test_valid_merge_accepted_unchanged(self):
        t = G.MockTransport(handler=echo_concat_handler)
        batch = [("seven words of post text right here", "plus five ocr words too")]
        out, rejected = G.augment_posts(batch, t)
        assert out == ["seven words of post text right here plus five ocr words too"]
        assert rejected == []
        sent = json.loads(t.requests[0].user_payload)
        assert len(sent["pairs"]) == 10  # padded to the fixed batch size

    def test_short_merge_retry_then_fallback(self):
        bad = json.dumps(["too short"] + [VALID] * 9)
        t = G.MockTransport(responses=[bad, bad])
        batch = [("alpha beta gamma delta epsilon zeta", "eta theta iota kappa")]
        out, rejected = G.augment_posts(batch, t)
        assert len(t.requests) == 2
        assert out == ["alpha beta gamma delta epsilon zeta eta theta iota kappa"]
        assert len(rejected) == 1
        assert rejected[0].index == 0
        assert "10 words" in rejected[0].reason

    def test_retry_can_succeed(self):
        bad = json.dumps(["too short"] + [VALID] * 9)
        good = json.dumps([VALID] * 10)
        t = G.MockTransport(responses=[bad, good])
        out, rejected = G.augment_posts([("a b c d e f", "g h i j")], t)
        assert out == [VALID]
        assert rejected == []

    def test_bracket_token_rejected(self):
        tainted = VALID + " [URL]"
        t = G.MockTransport(responses=[json.dumps([tainted] * 10)] * 2)
        out, rejected = G.augment_posts([("a b c d e f", "g h i j")], t)
        assert rejected and "bracket" in rejected[0].reason
        assert out == ["a b c d e f g h i j"]

    def test_hashtag_token_rejected(self):
        tainted = VALID + " #viral"
        t = G.MockTransport(responses=[json.dumps([tainted] * 10)] * 2)
        _, rejected = G.augment_posts([("a b c d e f", "g h i j")], t)
        assert rejected and "hashtag" in rejected[0].reason

    def test_oversized_batch_rejected(self):
        with pytest.raises(TrifuseError):
            G.augment_posts([("t", "o")] * 11, G.MockTransport())

    def test_full_batch_of_ten(self):
        t = G.MockTransport(handler=lambda req: json.dumps([VALID] * 10))
        out, rejected = G.augment_posts([(f"text {i}", f"ocr {i}") for i in range(10)], t)
        assert out == [VALID] * 10
        assert rejected == []


def pool_15():
    return [(f"f{i}", f"claim {i}") for i in range(15)]


class TestRerank:
    def test_pool_size_enforced(self):
        with pytest.raises(TrifuseError):
            G.RerankInput(post_id="p", post_content="c", candidates=pool_15()[:14])

    def test_duplicate_candidates_rejected(self):
        cands = pool_15()
        cands[1] = cands[0]
        with pytest.raises(TrifuseError):
            G.RerankInput(post_id="p", post_content="c", candidates=cands)

    def test_identity(self):
        ids = [f"f{i}" for i in range(10)]
        t = G.MockTransport(responses=[json.dumps({"p": ids})])
        out = G.rerank(G.RerankInput(post_id="p", post_content="c", candidates=pool_15()), t)
        assert out.ranked_fact_ids == ids

    def test_reversed(self):
        ids = [f"f{i}" for i in range(10)][::-1]
        t = G.MockTransport(responses=[json.dumps({"p": ids})])
        out = G.rerank(G.RerankInput(post_id="p", post_content="c", candidates=pool_15()), t)
        assert out.ranked_fact_ids == ids

    def test_foreign_ids_dropped_and_backfilled(self):
        # 8 valid + 2 foreign: keep the 8, backfill with the next engine-ranked
        ids = [f"f{i}" for i in range(8)] + ["alien1", "alien2"]
        t = G.MockTransport(responses=[json.dumps({"p": ids})])
        out = G.rerank(G.RerankInput(post_id="p", post_content="c", candidates=pool_15()), t)
        assert out.ranked_fact_ids == [f"f{i}" for i in range(10)]

    def test_duplicates_keep_first(self):
        ids = ["f3", "f3", "f1", "f1"] + [f"f{i}" for i in range(5, 11)]
        t = G.MockTransport(responses=[json.dumps({"p": ids})])
        out = G.rerank(G.RerankInput(post_id="p", post_content="c", candidates=pool_15()), t)
        assert out.ranked_fact_ids[:2] == ["f3", "f1"]
        assert len(out.ranked_fact_ids) == 10
        assert len(set(out.ranked_fact_ids)) == 10

    def test_malformed_then_valid(self):
        ids = [f"f{i}" for i in range(10)]
        t = G.MockTransport(responses=["not json", json.dumps({"p": ids})])
        out = G.rerank(G.RerankInput(post_id="p", post_content="c", candidates=pool_15()), t)
        assert out.ranked_fact_ids == ids
        assert len(t.requests) == 2

    def test_malformed_after_retry_raises(self):
        t = G.MockTransport(responses=["not json", "[1,2,3]"])
        with pytest.raises(RerankFormatError):
            G.rerank(G.RerankInput(post_id="p", post_content="c", candidates=pool_15()), t)

    def test_request_payload_shape(self):
        ids = [f"f{i}" for i in range(10)]
        t = G.MockTransport(responses=[json.dumps({"p": ids})])
        G.rerank(G.RerankInput(post_id="p", post_content="post body", candidates=pool_15()), t)
        payload = json.loads(t.requests[0].user_payload)
        assert payload["post"] == {"post_id": "p", "post_content": "post body"}
        assert len(payload["factChecks"]) == 15
        assert payload["factChecks"][0] == {"fact_id": "f0", "fact_content": "claim 0"}


def run_of_20(positive_rank=6):
    """One post with its positive at the given 0-based rank among 20."""
    entries = [(f"f{i}", 1.0 - i * 0.01) for i in range(20)]
    run = RetrievalRun(mode="crosslingual", k_max=20, ranked={"p0": entries})
    pairs = PairSet(
        entries=[PairEntry(post_id="p0", fact_ids={f"f{positive_rank}"}, lang="aaa")],
        fact_languages={f"f{i}": "aaa" for i in range(20)},
    )
    return run, pairs


class TestApplyRerank:
    def test_identity_rerank_unchanged(self):
        run, _ = run_of_20()
        out = G.RerankOutput(post_id="p0", ranked_fact_ids=[f"f{i}" for i in range(10)])
        assert G.apply_rerank(run, [out]).ranked == run.ranked

    def test_unknown_post_rejected(self):
        run, _ = run_of_20()
        with pytest.raises(TrifuseError):
            G.apply_rerank(run, [G.RerankOutput(post_id="nope", ranked_fact_ids=["f0"])])

    def test_top20_metrics_bit_identical(self):
        run, pairs = run_of_20(positive_rank=6)
        shuffled = ["f9", "f6", "f0", "f3", "f1", "f8", "f2", "f7", "f5", "f4"]
        new_run = G.apply_rerank(run, [G.RerankOutput(post_id="p0", ranked_fact_ids=shuffled)])
        assert {fid for fid, _ in new_run.ranked["p0"][:20]} == {
            fid for fid, _ in run.ranked["p0"][:20]
        }
        assert success_at_k(new_run, pairs, 20) == success_at_k(run, pairs, 20)
        assert recall_at_k(new_run, pairs, 20) == recall_at_k(run, pairs, 20)

    def test_promotion_flips_s_at_1(self):
        run, pairs = run_of_20(positive_rank=6)
        assert success_at_k(run, pairs, 1) == 0.0
        promoted = ["f6"] + [f"f{i}" for i in range(9)]
        new_run = G.apply_rerank(run, [G.RerankOutput(post_id="p0", ranked_fact_ids=promoted)])
        assert success_at_k(new_run, pairs, 1) == 1.0

    def test_tail_keeps_original_order(self):
        run, _ = run_of_20()
        reversed_head = [f"f{i}" for i in range(10)][::-1]
        new_run = G.apply_rerank(run, [G.RerankOutput(post_id="p0", ranked_fact_ids=reversed_head)])
        tail = [fid for fid, _ in new_run.ranked["p0"][10:]]
        assert tail == [f"f{i}" for i in range(10, 20)]


class TestHttpTransport:
    def test_missing_url_rejected(self, monkeypatch):
        monkeypatch.delenv("GATEWAY_URL", raising=False)
        with pytest.raises(TransportError):
            G.HttpTransport()

    def test_retries_then_fails(self, monkeypatch, tmp_path):
        calls = []

        def fake_post(url, json=None, headers=None, timeout=None):
            calls.append(url)
            raise OSError("connection refused")

        import requests

        monkeypatch.setattr(requests, "post", fake_post)
        transport = G.HttpTransport(url="http://gw.invalid", backoff=0.0)
        with pytest.raises(TransportError):
            transport.send(G.ChatRequest(system_prompt="s", user_payload="u"))
        assert len(calls) == 3

    def test_success_with_audit_log(self, monkeypatch, tmp_path):
        class FakeResponse:
            def raise_for_status(self):
                pass

            def json(self):
                return {"choices": [{"message": {"content": "hello"}}]}

        import requests

        captured = {}

        def fake_post(url, json=None, headers=None, timeout=None):
            captured.update(url=url, body=json, headers=headers)
            return FakeResponse()

        monkeypatch.setattr(requests, "post", fake_post)
        log = tmp_path / "audit.jsonl"
        transport = G.HttpTransport(url="http://gw.invalid", api_key="k", audit_log_path=log)
        text = transport.send(G.ChatRequest(system_prompt="sys", user_payload="usr"))
        assert text == "hello"
        assert captured["headers"]["Authorization"] == "Bearer k"
        assert captured["body"]["messages"][0] == {"role": "system", "content": "sys"}
        entry = json.loads(log.read_text().splitlines()[0])
        assert entry["response"] == "hello"
