"""
Chat-completions client for layout planning and the optional 3D judge.

Any endpoint that speaks the chat-completions JSON protocol works. In
offline mode every answer comes from fixture files keyed by the sha256 of
the prompt and the transport is never touched.
"""
import base64
import hashlib
import json
import logging
import math
import os
import re
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import httpx
from pydantic import ValidationError
from tenacity import Retrying, retry_if_exception_type, stop_after_attempt, wait_exponential

from errors import RubricParseError, SchemaError, TransportError
from layout import layout_from_dict, validate_layout
from models import LlmConfig, PlannerTranscript, SemanticLayout

logger = logging.getLogger(__name__)

PROMPTS_DIR = Path(__file__).resolve().parent / "prompts"
PLANNER_PROMPT = "layout_planner_v1.txt"
JUDGE_PROMPT = "judge_3d_v1.txt"

_FENCE_RE = re.compile(r"```(?:json|JSON)?\s*(.*?)(?:```|$)", re.DOTALL)
_SCORE_RE = re.compile(r"^\s*(?:score\s*[:=]\s*)?([012])\s*\.?\s*$", re.IGNORECASE)


class _Retryable(Exception):
    pass


def load_instructions(name: str) -> str:
    return (PROMPTS_DIR / name).read_text(encoding="utf-8")


# ================== Fixtures ==================

def fixture_key(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def judge_fixture_key(prompt: str, image_bytes: bytes) -> str:
    return "judge_" + fixture_key(prompt + "\n" + hashlib.sha256(image_bytes).hexdigest())


class FixtureStore:
    """Canned responses on disk: <dir>/<key>.json = {"prompt", "responses": [...]}."""

    def __init__(self, directory):
        self.directory = Path(directory)
        self._served: Dict[str, int] = {}

    def path(self, key: str) -> Path:
        return self.directory / f"{key}.json"

    def has(self, key: str) -> bool:
        return self.path(key).is_file()

    def next_response(self, key: str) -> str:
        """Responses are served in order; the last one repeats."""
        if not self.has(key):
            raise TransportError(f"offline mode and no fixture {self.path(key)}")
        responses = json.loads(self.path(key).read_text(encoding="utf-8"))["responses"]
        index = self._served.get(key, 0)
        self._served[key] = index + 1
        return responses[min(index, len(responses) - 1)]

    def save(self, key: str, prompt: str, responses: List[str], kind: str = "plan") -> Path:
        self.directory.mkdir(parents=True, exist_ok=True)
        path = self.path(key)
        path.write_text(json.dumps({"kind": kind, "prompt": prompt, "responses": list(responses)}, indent=2))
        return path


# ================== Transport ==================

class LlmClient:
    def __init__(self, config: LlmConfig = LlmConfig(), transport: Optional[httpx.BaseTransport] = None,
                 fixtures: Optional[FixtureStore] = None):
        self.config = config
        self.fixtures = fixtures or FixtureStore(config.fixtures_dir)
        self._http = httpx.Client(transport=transport, timeout=config.timeout_seconds)

    def close(self) -> None:
        self._http.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _headers(self) -> Dict[str, str]:
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(self.config.api_key_env_var_name)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        return headers

    def _post(self, payload: dict) -> str:
        try:
            response = self._http.post(self.config.endpoint_url, json=payload, headers=self._headers())
        except httpx.TimeoutException as exc:
            raise _Retryable(f"timeout after {self.config.timeout_seconds}s") from exc
        except httpx.TransportError as exc:
            raise _Retryable(f"transport failure: {exc}") from exc
        if response.status_code == 429 or response.status_code >= 500:
            raise _Retryable(f"endpoint returned {response.status_code}")
        if response.status_code >= 400:
            raise TransportError(f"endpoint returned {response.status_code}: {response.text[:200]}")
        try:
            return response.json()["choices"][0]["message"]["content"] or ""
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"unexpected completion body: {response.text[:200]}") from exc

    def complete(self, messages: List[dict], fixture: str) -> str:
        """One completion: from the fixture store offline, else POST with retries."""
        if self.config.offline:
            return self.fixtures.next_response(fixture)

        payload = {
            "model": self.config.model_name,
            "messages": messages,
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_tokens,
        }
        retrying = Retrying(
            stop=stop_after_attempt(self.config.max_retries + 1),
            wait=wait_exponential(multiplier=self.config.retry_backoff_seconds, max=8),
            retry=retry_if_exception_type(_Retryable),
            reraise=True,
        )
        try:
            for attempt in retrying:
                with attempt:
                    return self._post(payload)
        except _Retryable as exc:
            raise TransportError(f"{exc} (after {self.config.max_retries + 1} attempts)") from exc


# ================== JSON repair ==================

def _balance(text: str) -> str:
    """Close open strings, arrays and objects in one pass; never adds values."""
    stack, in_string, escaped = [], False, False
    for char in text:
        if in_string:
            if escaped:
                escaped = False
            elif char == "\\":
                escaped = True
            elif char == '"':
                in_string = False
        elif char == '"':
            in_string = True
        elif char in "{[":
            stack.append("}" if char == "{" else "]")
        elif char in "}]" and stack and stack[-1] == char:
            stack.pop()
    repaired = text + ('"' if in_string else "")
    repaired = re.sub(r"[,\s]+$", "", repaired)
    return repaired + "".join(reversed(stack))


def _json_span(raw_text: str) -> Optional[Tuple[int, str]]:
    """(start offset, candidate text) of the first object, fences removed."""
    fence = _FENCE_RE.search(raw_text)
    body = fence.group(1) if fence else raw_text
    start = body.find("{")
    if start < 0:
        return None
    offset = (fence.start(1) if fence else 0) + start
    return offset, body[start:]


def repair_json(raw_text: str) -> Optional[dict]:
    """Parse the first JSON object in a model reply, or None when that fails even after repair."""
    span = _json_span(raw_text or "")
    if span is None:
        return None
    _, candidate = span
    try:
        document, _ = json.JSONDecoder().raw_decode(candidate)
    except json.JSONDecodeError:
        try:
            document = json.loads(_balance(candidate.rstrip().rstrip("`")))
        except json.JSONDecodeError:
            return None
    return document if isinstance(document, dict) else None


def reasoning_text(raw_text: str) -> str:
    span = _json_span(raw_text or "")
    if span is None:
        return (raw_text or "").strip()
    return raw_text[:span[0]].replace("```json", "").replace("```", "").strip()


# ================== Planning ==================

def clamp_layout_document(document: dict) -> Tuple[dict, List[str]]:
    """Clip box values into [0, 1]; returns the new document and the clamped field names."""
    clamped = []
    objects = []
    for index, item in enumerate(document.get("objects", [])):
        item = dict(item)
        box = list(item.get("box", []))
        for k, value in enumerate(box):
            if not math.isfinite(float(value)):
                raise ValueError(f"objects[{index}].box[{k}] is not a finite number: {value!r}")
            fixed = min(1.0, max(0.0, float(value)))
            if fixed != float(value):
                name = f"objects[{index}].box[{k}]"
                logger.warning("clamped %s from %s to %s", name, value, fixed)
                clamped.append(name)
            box[k] = fixed
        item["box"] = box
        objects.append(item)
    return {**document, "objects": objects}, clamped


def layout_from_response(document: dict, canvas_size: int, patch_size: int = 2) -> Tuple[SemanticLayout, List[str]]:
    """Schema check + clamping; raises ValueError describing the first problem."""
    if not isinstance(document.get("objects"), list) or not document["objects"]:
        raise ValueError("'objects' must be a non-empty list")
    for item in document["objects"]:
        if not isinstance(item, dict) or not {"caption", "box", "depth"} <= set(item):
            raise ValueError(f"object entry {item!r} needs caption, box and depth")
        if not isinstance(item["box"], list) or len(item["box"]) != 4:
            raise ValueError(f"box {item['box']!r} must have four numbers")
    document, clamped = clamp_layout_document(document)
    document = {"background": "a plain gray background", **document, "canvas": canvas_size}
    if "base" not in document:
        raise ValueError("missing 'base' caption")
    layout = layout_from_dict(document)
    violations = validate_layout(layout, patch_size)
    if violations:
        raise ValueError("; ".join(f"{v.field}: {v.rule}" for v in violations))
    return layout, clamped


def plan_llm(prompt: str, config: LlmConfig = LlmConfig(), canvas_size: int = 32, patch_size: int = 2,
             client: Optional[LlmClient] = None) -> Tuple[SemanticLayout, PlannerTranscript]:
    instructions = load_instructions(PLANNER_PROMPT)
    messages = [{"role": "system", "content": instructions}, {"role": "user", "content": prompt}]
    transcript = PlannerTranscript(prompt=prompt, request_text=f"{instructions}\n\n{prompt}")
    owned = client is None
    client = client or LlmClient(config)
    try:
        problems = []
        for attempt in range(config.max_retries + 1):
            try:
                raw = client.complete(messages, fixture_key(prompt))
            except TransportError as exc:
                raise TransportError(str(exc), transcript) from exc
            transcript.responses.append(raw)
            transcript.raw_response_text = raw
            transcript.reasoning_text = reasoning_text(raw)

            document = repair_json(raw)
            if document is None:
                problems.append("no JSON object in response")
            else:
                try:
                    layout, clamped = layout_from_response(document, canvas_size, patch_size)
                except (ValueError, TypeError, ValidationError) as exc:
                    problems.append(str(exc))
                else:
                    transcript.parsed_layout = layout
                    transcript.clamped_fields = clamped
                    transcript.repair_attempts = attempt
                    logger.info("planned %d objects for %r after %d repair attempts",
                                len(layout.objects), prompt, attempt)
                    return layout, transcript
            logger.info("planner response %d rejected: %s", attempt + 1, problems[-1])
            transcript.repair_attempts = attempt + 1
        raise SchemaError(f"no valid layout after {config.max_retries + 1} responses: {problems[-1]}", transcript)
    finally:
        if owned:
            client.close()


def llm_planner(config: LlmConfig = LlmConfig(), canvas_size: int = 32, patch_size: int = 2,
                client: Optional[LlmClient] = None):
    def _plan(prompt: str):
        return plan_llm(prompt, config, canvas_size, patch_size, client)
    return _plan


# ================== 3D judge ==================

def parse_rubric_score(text: str) -> int:
    document = repair_json(text)
    score = document.get("score") if document is not None else None
    if type(score) is int and score in (0, 1, 2):
        return score
    for line in (text or "").strip().splitlines()[::-1]:
        match = _SCORE_RE.match(line)
        if match:
            return int(match.group(1))
    raise RubricParseError(f"cannot read a 0/1/2 score from {text[:80]!r}")


def judge_3d(image_path, prompt: str, config: LlmConfig = LlmConfig(),
             client: Optional[LlmClient] = None) -> int:
    image_bytes = Path(image_path).read_bytes()
    encoded = base64.b64encode(image_bytes).decode("ascii")
    messages = [
        {"role": "system", "content": load_instructions(JUDGE_PROMPT)},
        {"role": "user", "content": [
            {"type": "text", "text": prompt},
            {"type": "image_url", "image_url": {"url": f"data:image/png;base64,{encoded}"}},
        ]},
    ]
    owned = client is None
    client = client or LlmClient(config)
    try:
        return parse_rubric_score(client.complete(messages, judge_fixture_key(prompt, image_bytes)))
    finally:
        if owned:
            client.close()
