"""Chat-completion gateway for post augmentation and listwise reranking.

The transport is abstract: anything with ``send(ChatRequest) -> str``. Tests
use the table-driven mock; production uses the HTTP JSON client configured
via the GATEWAY_URL / GATEWAY_KEY environment variables.
"""

from __future__ import annotations

import json
import os
import re
import time
from dataclasses import dataclass, field
from importlib import resources

from .errors import RerankFormatError, TransportError, TrifuseError
from .evaluation import RetrievalRun

AUGMENT_BATCH_SIZE = 10
RERANK_POOL_SIZE = 15
RERANK_OUTPUT_SIZE = 10

_BRACKET_TOKEN = re.compile(r"\[[^\[\]]*\]")


def load_prompt(name: str) -> str:
    return resources.files("trifuse.prompts").joinpath(f"{name}.txt").read_text(encoding="utf-8")


@dataclass
class ChatRequest:
    system_prompt: str
    user_payload: str
    model_name: str = "gpt-4o"
    temperature: float = 0.0
    max_output_tokens: int = 2048

    def __post_init__(self):
        if self.temperature < 0:
            raise TrifuseError("temperature must be >= 0")


class MockTransport:
    """Deterministic transport fed from a response table.

    ``responses`` is consumed in order; a callable handler may be given
    instead to compute responses from the request.
    """

    def __init__(self, responses: list[str] | None = None, handler=None):
        self.responses = list(responses or [])
        self.handler = handler
        self.requests: list[ChatRequest] = []

    def send(self, request: ChatRequest) -> str:
        self.requests.append(request)
        if self.handler is not None:
            return self.handler(request)
        if not self.responses:
            raise TransportError("mock transport ran out of responses")
        return self.responses.pop(0)


class HttpTransport:
    """JSON chat-completion client with exponential backoff (3 attempts)."""

    def __init__(self, url: str | None = None, api_key: str | None = None,
                 audit_log_path=None, attempts: int = 3, backoff: float = 1.0):
        self.url = url or os.environ.get("GATEWAY_URL")
        self.api_key = api_key or os.environ.get("GATEWAY_KEY")
        if not self.url:
            raise TransportError("no gateway URL (set GATEWAY_URL)")
        self.audit_log_path = audit_log_path
        self.attempts = attempts
        self.backoff = backoff

    def send(self, request: ChatRequest) -> str:
        import requests

        body = {
            "model": request.model_name,
            "messages": [
                {"role": "system", "content": request.system_prompt},
                {"role": "user", "content": request.user_payload},
            ],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        last_error = None
        for attempt in range(self.attempts):
            try:
                resp = requests.post(self.url, json=body, headers=headers, timeout=120)
                resp.raise_for_status()
                text = resp.json()["choices"][0]["message"]["content"]
                self._audit(body, text)
                return text
            except Exception as exc:  # noqa: BLE001 - every failure is retried
                last_error = exc
                time.sleep(self.backoff * (2**attempt))
        raise TransportError(f"gateway unreachable after {self.attempts} attempts: {last_error}")

    def _audit(self, body: dict, response: str) -> None:
        if not self.audit_log_path:
            return
        with open(self.audit_log_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps({"request": body, "response": response}) + "\n")


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


@dataclass
class RejectedAugmentation:
    index: int
    reason: str
    response: str


def _valid_merge(text: str) -> str | None:
    """Reason the merged text is invalid, or None when it passes."""
    if len(text.split()) < 10:
        return "fewer than 10 words"
    if _BRACKET_TOKEN.search(text):
        return "contains a bracket token"
    if any(tok.startswith("#") for tok in text.split()):
        return "contains a hashtag token"
    return None


def _parse_merges(response: str) -> list[str]:
    data = json.loads(response)
    if not isinstance(data, list) or not all(isinstance(t, str) for t in data):
        raise ValueError("expected a JSON list of strings")
    return data


def augment_posts(
    batch: list[tuple[str, str]], transport
) -> tuple[list[str], list[RejectedAugmentation]]:
    """Merge (text, ocr_text) pairs into single enhanced texts via the gateway.

    The request always carries exactly 10 pairs (the final batch is padded
    with empty sentinels, dropped on return). Each merged text is validated;
    a failing item gets one retry, then falls back to plain concatenation
    with a RejectedAugmentation record.
    """
    if len(batch) > AUGMENT_BATCH_SIZE:
        raise TrifuseError(f"augmentation batches hold at most {AUGMENT_BATCH_SIZE} pairs")
    n_real = len(batch)
    padded = list(batch) + [("", "")] * (AUGMENT_BATCH_SIZE - n_real)
    prompt = load_prompt("augment")

    def ask() -> list[str]:
        payload = json.dumps(
            {"pairs": [{"text": text, "ocr": ocr} for text, ocr in padded]}, ensure_ascii=False
        )
        response = transport.send(ChatRequest(system_prompt=prompt, user_payload=payload))
        merges = _parse_merges(response)
        if len(merges) != AUGMENT_BATCH_SIZE:
            raise ValueError(f"expected {AUGMENT_BATCH_SIZE} merges, got {len(merges)}")
        return merges

    merges = ask()
    reasons = [_valid_merge(m) for m in merges[:n_real]]
    if any(reasons):
        retry = ask()
        for i, reason in enumerate(reasons):
            if reason is not None:
                merges[i] = retry[i]
                reasons[i] = _valid_merge(retry[i])
    rejected = []
    out = []
    for i in range(n_real):
        if reasons[i] is None:
            out.append(merges[i])
        else:
            rejected.append(RejectedAugmentation(index=i, reason=reasons[i], response=merges[i]))
            text, ocr = batch[i]
            out.append(" ".join(part for part in (text, ocr) if part))
    return out, rejected


# ---------------------------------------------------------------------------
# Reranking
# ---------------------------------------------------------------------------


@dataclass
class RerankInput:
    post_id: str
    post_content: str
    candidates: list[tuple[str, str]]  # (fact_id, fact_content), engine order

    def __post_init__(self):
        if len(self.candidates) != RERANK_POOL_SIZE:
            raise TrifuseError(
                f"rerank pool must hold exactly {RERANK_POOL_SIZE} candidates, got {len(self.candidates)}"
            )
        ids = [fid for fid, _ in self.candidates]
        if len(set(ids)) != len(ids):
            raise TrifuseError("duplicate candidate ids in rerank pool")


@dataclass
class RerankOutput:
    post_id: str
    ranked_fact_ids: list[str]


def _extract_id_list(response: str, post_id: str) -> list:
    data = json.loads(response)
    if not isinstance(data, dict) or len(data) != 1:
        raise ValueError("expected a single-key JSON object")
    value = data.get(post_id, next(iter(data.values())))
    if not isinstance(value, list):
        raise ValueError("expected a JSON list of fact ids")
    return value


def rerank(rerank_input: RerankInput, transport) -> RerankOutput:
    """Ask the gateway for the 10 most relevant candidates, descending.

    Foreign IDs are dropped, duplicates keep their first occurrence, and the
    list is backfilled from the engine's original ranking to length 10.
    """
    prompt = load_prompt("rerank")
    payload = json.dumps(
        {
            "post": {"post_id": rerank_input.post_id, "post_content": rerank_input.post_content},
            "factChecks": [
                {"fact_id": fid, "fact_content": content} for fid, content in rerank_input.candidates
            ],
        },
        ensure_ascii=False,
    )
    request = ChatRequest(system_prompt=prompt, user_payload=payload)
    raw_ids = None
    for attempt in range(2):
        try:
            raw_ids = _extract_id_list(transport.send(request), rerank_input.post_id)
            break
        except (ValueError, json.JSONDecodeError) as exc:
            if attempt == 1:
                raise RerankFormatError(
                    f"post {rerank_input.post_id!r}: malformed rerank response after retry: {exc}"
                ) from exc
    pool = [fid for fid, _ in rerank_input.candidates]
    pool_set = set(pool)
    ranked: list[str] = []
    for fid in raw_ids:
        fid = str(fid)
        if fid in pool_set and fid not in ranked:
            ranked.append(fid)
    for fid in pool:  # backfill from the engine order
        if len(ranked) >= RERANK_OUTPUT_SIZE:
            break
        if fid not in ranked:
            ranked.append(fid)
    return RerankOutput(post_id=rerank_input.post_id, ranked_fact_ids=ranked[:RERANK_OUTPUT_SIZE])


def apply_rerank(run: RetrievalRun, outputs: list[RerankOutput]) -> RetrievalRun:
    """Splice rerank orders into a run without changing any candidate set.

    Positions 1-10 follow the rerank order; the remaining original candidates
    keep their original relative order below. The top-20 set per post is
    unchanged, so metrics at K=20 are identical before and after.
    """
    new_run = RetrievalRun(mode=run.mode, k_max=run.k_max, ranked=dict(run.ranked))
    for output in outputs:
        if output.post_id not in run.ranked:
            raise TrifuseError(f"rerank output for unknown post {output.post_id!r}")
        original = run.ranked[output.post_id]
        scores = dict(original)
        head = [(fid, scores[fid]) for fid in output.ranked_fact_ids]
        head_set = set(output.ranked_fact_ids)
        tail = [(fid, score) for fid, score in original if fid not in head_set]
        new_run.ranked[output.post_id] = head + tail
    return new_run
