"""Chat and embedding backends behind one small interface.

Three chat flavors: `remote` speaks the OpenAI-style HTTP API (chat
completions and embeddings endpoints), `heuristic` is a deterministic
rule based driver for offline runs and tests, `scripted` replays canned
replies.  Embeddings come either from the remote endpoint or from a
local hashing embedder whose vectors are stable across processes and
platforms.

Decision decoding also lives here so that every consumer (the reasoning
loop, the memory consistency check, the heuristic itself) shares one
parser.
"""

from __future__ import annotations

import os
import re
import threading
import time
from dataclasses import dataclass
from hashlib import blake2b
from typing import List, Optional, Protocol, Sequence, Union

import numpy as np
import requests

from . import params
from .descriptor import lane_ordinal, parse_scenario_text
from .sim_core import MetaAction


class GatewayError(Exception):
    """Base for everything raised by chat and embedding backends."""


class TransportError(GatewayError):
    """Network failure that survived the retry budget."""


class BackendProtocolError(GatewayError):
    """The server answered, but not in the shape we asked for."""


class MalformedSceneError(GatewayError):
    """The heuristic driver got a prompt that is not a scene description."""


class DecodeError(GatewayError):
    """No usable decision line in a model reply."""


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def as_dict(self) -> dict:
        return {"role": self.role, "content": self.content}


Message = Union[ChatMessage, dict]


def _message_dicts(messages: Sequence[Message]) -> List[dict]:
    out = []
    for m in messages:
        if isinstance(m, ChatMessage):
            out.append(m.as_dict())
        else:
            out.append({"role": m["role"], "content": m["content"]})
    return out


@dataclass(frozen=True)
class BackendConfig:
    """Connection and retry settings for one backend role."""

    kind: str = "heuristic"  # remote | heuristic | scripted
    base_url: str = "http://localhost:8000/v1"
    model_name: str = "gpt-3.5-turbo"
    api_key_env: str = "OPENAI_API_KEY"
    temperature: float = 0.0
    timeout: float = 60.0
    max_retries: int = 3
    retry_base_delay: float = 1.0
    max_in_flight: int = 4

    def __post_init__(self):
        if self.kind not in ("remote", "heuristic", "scripted"):
            raise ValueError(f"unknown backend kind {self.kind!r}")
        if self.max_retries < 0 or self.max_in_flight < 1:
            raise ValueError("bad retry or concurrency limits")


# Decision decoding ----------------------------------------------------------

_DECISION_LINE_RE = re.compile(r"decision\s*[:\-]\s*(.+)$", re.IGNORECASE)

# Normalized phrase -> action.  Keys must already be lowercase with
# single spaces and no punctuation.
_SYNONYMS = {
    "lane left": MetaAction.LANE_LEFT,
    "lane right": MetaAction.LANE_RIGHT,
    "idle": MetaAction.IDLE,
    "faster": MetaAction.FASTER,
    "slower": MetaAction.SLOWER,
    "accelerate": MetaAction.FASTER,
    "speed up": MetaAction.FASTER,
    "decelerate": MetaAction.SLOWER,
    "slow down": MetaAction.SLOWER,
    "brake": MetaAction.SLOWER,
    "keep speed": MetaAction.IDLE,
    "keep current speed": MetaAction.IDLE,
    "maintain": MetaAction.IDLE,
    "maintain speed": MetaAction.IDLE,
    "maintain current speed": MetaAction.IDLE,
    "hold speed": MetaAction.IDLE,
    "change lane left": MetaAction.LANE_LEFT,
    "change lane right": MetaAction.LANE_RIGHT,
    "change to the left lane": MetaAction.LANE_LEFT,
    "change to the right lane": MetaAction.LANE_RIGHT,
    "turn left": MetaAction.LANE_LEFT,
    "turn right": MetaAction.LANE_RIGHT,
}


def _normalize_phrase(raw: str) -> str:
    s = raw.strip().replace("_", " ")       # before emphasis stripping, action
    s = re.sub(r"[*`\"']", "", s)           # names carry real underscores
    s = re.sub(r"[.,;:!?)\]}]+$", "", s.strip())
    return re.sub(r"\s+", " ", s.strip().lower())


def decode_decision(text: str) -> MetaAction:
    """Extract the action from a model reply.

    Lines are scanned from the end; the last line carrying a decision
    marker wins, and its payload must normalize to an action name or one
    of the accepted synonyms.  Raises DecodeError otherwise.
    """
    if not isinstance(text, str):
        raise DecodeError("reply is not text")
    for line in reversed(text.splitlines()):
        stripped = re.sub(r"^[\s>*#`_-]+", "", line)
        m = _DECISION_LINE_RE.search(stripped)
        if m is None:
            continue
        phrase = _normalize_phrase(m.group(1))
        action = _SYNONYMS.get(phrase)
        if action is None:
            raise DecodeError(f"unrecognized decision {m.group(1).strip()!r}")
        return action
    raise DecodeError("no decision line found")


# Rule based driver ----------------------------------------------------------

TTC_DANGER = 3.0       # s, brake below this
TTC_AHEAD_CLEAR = 6.0  # s, lane change needs this much margin ahead
TTC_BEHIND_CLEAR = 2.0  # s, and this much from the follower
CLEAR_AHEAD_DIST = 60.0  # m, no leader this close means open road
GAP_PRESSURE = 1.5     # times the desired headway distance


def _ttc_from(gap: float, closing: float) -> float:
    if gap <= 0.0:
        return 0.0
    if closing <= 0.0:
        return float("inf")
    return gap / closing


def heuristic_drive(scene_text: str) -> str:
    """Deterministic driving reply for a rendered scene description.

    Produces a few sentences of reasoning and a final decision line, the
    same wire format a language model is asked for.  Raises
    MalformedSceneError when the prompt does not contain a scene.
    """
    try:
        scene = parse_scenario_text(scene_text)
    except ValueError as exc:
        raise MalformedSceneError(str(exc)) from None

    v = scene.speed
    car_len = params.VEHICLE_LENGTH
    safe_gap = params.T_HEADWAY * v
    top_speed = params.SPEED_LEVELS[-1]

    leader = scene.nearest("same lane ahead")
    lines = [
        f"I am driving at {v:.2f} m/s in the {lane_ordinal(scene.ego_lane)} "
        f"lane of a {scene.lanes} lane road."
    ]

    if leader is not None:
        gap = max(0.0, leader.distance - car_len)
        ttc = _ttc_from(gap, v - leader.speed)
        ttc_str = f"{ttc:.2f} s" if ttc != float("inf") else "no closing risk"
        lines.append(
            f"Vehicle {leader.id} is ahead in my lane with {gap:.2f} m of "
            f"clear road, moving at {leader.speed:.2f} m/s, time to "
            f"collision {ttc_str}."
        )
    else:
        gap = float("inf")
        ttc = float("inf")

    def lane_option(side: str) -> bool:
        if side == "left" and scene.ego_lane == 0:
            return False
        if side == "right" and scene.ego_lane >= scene.lanes - 1:
            return False
        ahead = scene.nearest(f"{side} lane ahead")
        behind = scene.nearest(f"{side} lane behind")
        if ahead is not None:
            a_gap = ahead.distance - car_len
            if a_gap <= 0.0 or _ttc_from(a_gap, v - ahead.speed) < TTC_AHEAD_CLEAR:
                return False
        if behind is not None:
            b_gap = behind.distance - car_len
            if b_gap <= 0.0 or _ttc_from(b_gap, behind.speed - v) < TTC_BEHIND_CLEAR:
                return False
        return True

    if leader is not None and (ttc < TTC_DANGER or gap < safe_gap):
        lines.append(
            f"That is too close at my speed: I need {safe_gap:.2f} m of "
            "headway, so I should back off before anything else."
        )
        decision = MetaAction.SLOWER
    elif leader is not None and gap < GAP_PRESSURE * safe_gap and lane_option("left"):
        lines.append(
            "The gap ahead is getting tight while the left lane is clear in "
            "both directions, so moving left is the better option."
        )
        decision = MetaAction.LANE_LEFT
    elif leader is not None and gap < GAP_PRESSURE * safe_gap and lane_option("right"):
        lines.append(
            "The gap ahead is getting tight while the right lane is clear in "
            "both directions, so moving right is the better option."
        )
        decision = MetaAction.LANE_RIGHT
    elif (leader is None or leader.distance >= CLEAR_AHEAD_DIST) and v < top_speed:
        lines.append(
            "The road ahead is clear for a long stretch and I am below the "
            "top speed level, so I can safely pick up speed."
        )
        decision = MetaAction.FASTER
    else:
        lines.append(
            "Nothing requires a maneuver right now, so holding my lane and "
            "speed is the safe choice."
        )
        decision = MetaAction.IDLE

    lines.append(f"decision: {decision.value}")
    return "\n".join(lines)


REFLECTION_MARKER = "A prior driving decision ended in a collision and needs review."


def heuristic_correct(prompt_text: str) -> str:
    """Deterministic stand-in for the reflection model.

    Re-runs the rule based driver on the embedded scene; if that simply
    repeats the original action, falls back to braking (or holding speed
    when braking itself caused the crash).  The reply follows the three
    section correction format.
    """
    original: Optional[MetaAction]
    try:
        original = decode_decision(prompt_text)
    except DecodeError:
        original = None
    reasoning = heuristic_drive(prompt_text)
    corrected = decode_decision(reasoning)
    if original is not None and corrected is original:
        fallback = (
            MetaAction.IDLE if original is MetaAction.SLOWER else MetaAction.SLOWER
        )
        reasoning = "\n".join(
            reasoning.splitlines()[:-1]
            + [
                "Repeating the same choice would repeat the crash, so the "
                "cautious override applies here.",
                f"decision: {fallback.value}",
            ]
        )
        corrected = fallback
    analysis = (
        "Error analysis: The chosen maneuver ignored how little room was "
        "actually available, and the scene left no margin for it."
    )
    tips = (
        "Tips: Before committing to a maneuver, check the clear distance and "
        "closing speed for every lane involved, and prefer easing off when "
        "the margin is thin."
    )
    return "\n".join([analysis, "Corrected reasoning:", reasoning, tips])


# Chat backends --------------------------------------------------------------

class ChatBackend(Protocol):
    def chat(self, messages: Sequence[Message]) -> str: ...


class EmbeddingBackend(Protocol):
    def embed(self, text: str) -> np.ndarray: ...


class HeuristicChatBackend:
    """Offline driver: answers scene prompts with the rule table and
    correction prompts with the scripted review format."""

    def __init__(self, config: Optional[BackendConfig] = None):
        self.config = config or BackendConfig(kind="heuristic")
        self.calls: List[List[dict]] = []

    def chat(self, messages: Sequence[Message]) -> str:
        msgs = _message_dicts(messages)
        self.calls.append(msgs)
        users = [m["content"] for m in msgs if m["role"] == "user"]
        if not users:
            raise MalformedSceneError("no user message to answer")
        prompt = users[-1]
        if REFLECTION_MARKER in prompt:
            return heuristic_correct(prompt)
        return heuristic_drive(prompt)


class ScriptedChatBackend:
    """Replays canned replies in order; handy for tests and fixtures."""

    def __init__(self, replies: Sequence[str], repeat_last: bool = True):
        if not replies:
            raise ValueError("need at least one scripted reply")
        self.replies = list(replies)
        self.repeat_last = repeat_last
        self.calls: List[List[dict]] = []
        self._lock = threading.Lock()

    def chat(self, messages: Sequence[Message]) -> str:
        with self._lock:
            self.calls.append(_message_dicts(messages))
            i = len(self.calls) - 1
        if i < len(self.replies):
            return self.replies[i]
        if self.repeat_last:
            return self.replies[-1]
        raise TransportError("scripted backend ran out of replies")


class RemoteChatBackend:
    """OpenAI style chat completions client.

    Retries transport failures and 429/5xx answers with exponential
    backoff; concurrent use is capped by a semaphore so a parallel
    harness cannot stampede the server.
    """

    def __init__(self, config: BackendConfig, session: Optional[requests.Session] = None):
        self.config = config
        self._session = session or requests.Session()
        self._slots = threading.Semaphore(config.max_in_flight)

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.config.api_key_env, "")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _post(self, path: str, payload: dict) -> dict:
        url = self.config.base_url.rstrip("/") + path
        last_error: Optional[Exception] = None
        with self._slots:
            for attempt in range(self.config.max_retries + 1):
                if attempt:
                    time.sleep(self.config.retry_base_delay * 2 ** (attempt - 1))
                try:
                    resp = self._session.post(
                        url, json=payload, headers=self._headers(),
                        timeout=self.config.timeout,
                    )
                except requests.RequestException as exc:
                    last_error = exc
                    continue
                if resp.status_code == 429 or resp.status_code >= 500:
                    last_error = BackendProtocolError(
                        f"server answered {resp.status_code}"
                    )
                    continue
                if resp.status_code != 200:
                    raise BackendProtocolError(
                        f"server answered {resp.status_code}: {resp.text[:200]}"
                    )
                try:
                    return resp.json()
                except ValueError as exc:
                    raise BackendProtocolError("response is not JSON") from exc
        raise TransportError(
            f"gave up on {url} after {self.config.max_retries + 1} attempts: "
            f"{last_error}"
        )

    def chat(self, messages: Sequence[Message]) -> str:
        data = self._post(
            "/chat/completions",
            {
                "model": self.config.model_name,
                "messages": _message_dicts(messages),
                "temperature": self.config.temperature,
            },
        )
        try:
            content = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendProtocolError(f"malformed chat response: {exc}") from exc
        if not isinstance(content, str):
            raise BackendProtocolError("chat content is not text")
        return content


def make_chat_backend(config: BackendConfig) -> "ChatBackend":
    if config.kind == "heuristic":
        return HeuristicChatBackend(config)
    if config.kind == "remote":
        return RemoteChatBackend(config)
    raise ValueError("scripted backends are constructed directly with replies")


# Embeddings -----------------------------------------------------------------

DEFAULT_EMBED_DIM = 256
DEFAULT_EMBED_MODEL = "text-embedding-ada-002"

_TOKEN_RE = re.compile(r"[0-9a-z]+")


class HashingEmbedder:
    """Deterministic local embedder.

    Lowercases, splits on non-alphanumerics, hashes each token with
    blake2b (8 byte digest, big endian) to a 64-bit value, buckets it at
    h mod dim with a sign from bit 63, and L2-normalizes the result.  A
    text with no tokens (or a fully cancelled sum) maps to the first
    basis vector so every embedding has unit norm.
    """

    def __init__(self, dim: int = DEFAULT_EMBED_DIM):
        if dim < 1:
            raise ValueError("dim must be positive")
        self.dim = dim
        self.n_calls = 0

    def embed(self, text: str) -> np.ndarray:
        self.n_calls += 1
        vec = np.zeros(self.dim, dtype=np.float64)
        for token in _TOKEN_RE.findall(text.lower()):
            h = int.from_bytes(blake2b(token.encode("utf-8"), digest_size=8).digest(), "big")
            sign = -1.0 if (h >> 63) & 1 else 1.0
            vec[h % self.dim] += sign
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:
            vec[0] = 1.0
            return vec
        return vec / norm


class RemoteEmbedder:
    """Embeddings endpoint client sharing the retry machinery."""

    def __init__(self, config: BackendConfig, model: str = DEFAULT_EMBED_MODEL,
                 session: Optional[requests.Session] = None):
        self._client = RemoteChatBackend(config, session=session)
        self.model = model
        self.n_calls = 0

    def embed(self, text: str) -> np.ndarray:
        self.n_calls += 1
        data = self._client._post(
            "/embeddings", {"model": self.model, "input": text}
        )
        try:
            vec = data["data"][0]["embedding"]
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendProtocolError(f"malformed embedding response: {exc}") from exc
        arr = np.asarray(vec, dtype=np.float64)
        if arr.ndim != 1 or arr.size == 0:
            raise BackendProtocolError("embedding is not a flat vector")
        return arr


@dataclass
class BackendSet:
    """The three roles the loop needs: a driver, an embedder, and a
    reviewer for reflection (defaults to the driver)."""

    chat: "ChatBackend"
    embedder: "EmbeddingBackend"
    corrector: Optional["ChatBackend"] = None

    def __post_init__(self):
        if self.corrector is None:
            self.corrector = self.chat
