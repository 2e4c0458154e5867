"""Turn finished episodes into memory updates.

A completed episode contributes a handful of success memories: the
reasoning that was actually followed at its key frames.  A crashed
episode sends its decisive frame, the last decision before contact, to a
reviewer backend that explains the error and rewrites the reasoning; the
rewritten version becomes a correction memory filed under the same scene
description, replacing nothing unless that exact scene was already
known.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field as dc_field
from functools import lru_cache
from importlib import resources
from typing import Callable, List, Optional, Sequence

from .gateway import (
    BackendSet,
    ChatMessage,
    DecodeError,
    REFLECTION_MARKER,
    decode_decision,
)
from .memory import Experience, MemoryStore, now_rfc3339, store_experience
from .reasoning import DecisionRecord, EpisodeRecord
from .sim_core import MetaAction

REFLECTION_PROMPT_ASSET = "reflection_system_v1.txt"

# Key frame sampling: every frame with a maneuver first, then these
# probe frames to round out quiet episodes, at most this many total.
KEY_FRAME_CAP = 3
PAD_FRAMES = (0, 10, 20)


class ReflectionFormatError(RuntimeError):
    """The reviewer's reply did not contain the three expected sections."""


@lru_cache(maxsize=None)
def load_reflection_prompt(name: str = REFLECTION_PROMPT_ASSET) -> str:
    return (resources.files("memdrive") / "assets" / name).read_text(
        encoding="utf-8"
    ).strip()


def classify_episode(episode: EpisodeRecord) -> str:
    """safe, unsafe, or inconclusive (decoder failures teach nothing)."""
    if episode.terminated_by == "completed":
        return "safe"
    if episode.terminated_by == "collision":
        return "unsafe"
    return "inconclusive"


def sample_key_frames(episode: EpisodeRecord, cap: int = KEY_FRAME_CAP) -> List[DecisionRecord]:
    """Pick the decision frames worth remembering from a safe episode.

    Frames where the driver actually maneuvered come first, earliest
    first; if fewer than cap, the fixed probe frames pad the sample so
    even an all-IDLE cruise leaves a trace.  The result is sorted by
    frame number.
    """
    chosen: List[int] = []
    for record in episode.records:
        if record.action is not MetaAction.IDLE and not record.decoder_failure:
            chosen.append(record.frame)
        if len(chosen) >= cap:
            break
    if len(chosen) < cap:
        by_frame = {r.frame: r for r in episode.records}
        for pad in PAD_FRAMES:
            if len(chosen) >= cap:
                break
            if pad in by_frame and pad not in chosen and not by_frame[pad].decoder_failure:
                chosen.append(pad)
    chosen.sort()
    by_frame = {r.frame: r for r in episode.records}
    return [by_frame[f] for f in chosen]


def build_reflection_prompt(record: DecisionRecord) -> List[ChatMessage]:
    """Messages for the reviewer: system prompt plus one user turn holding
    the decisive scene and the reasoning that crashed."""
    user = "\n".join(
        [
            REFLECTION_MARKER,
            "Scene at the decisive moment:",
            record.scenario.text,
            "Reasoning that was followed:",
            record.response,
            "Review the mistake and reply with the three sections.",
        ]
    )
    return [ChatMessage("system", load_reflection_prompt()), ChatMessage("user", user)]


_SECTION_RE = re.compile(
    r"^[\s>*#`-]*(error analysis|corrected reasoning|tips)\s*:",
    re.IGNORECASE | re.MULTILINE,
)


def parse_correction_reply(text: str) -> dict:
    """Split a reviewer reply into its three sections, case-insensitive.

    Returns {"error_analysis", "corrected_reasoning", "tips"}.  Raises
    ReflectionFormatError when any section is missing or empty.
    """
    found = {}
    matches = list(_SECTION_RE.finditer(text))
    for i, m in enumerate(matches):
        name = m.group(1).lower().replace(" ", "_")
        end = matches[i + 1].start() if i + 1 < len(matches) else len(text)
        if name not in found:  # first occurrence wins
            found[name] = text[m.end():end].strip()
    missing = [s for s in ("error_analysis", "corrected_reasoning", "tips") if not found.get(s)]
    if missing:
        raise ReflectionFormatError(
            f"correction reply is missing sections: {', '.join(missing)}"
        )
    return found


@dataclass(frozen=True)
class CorrectionResult:
    record: DecisionRecord
    error_analysis: str
    corrected_reasoning: str
    tips: str
    corrected_action: MetaAction


REFLECTION_FORMAT_REMINDER = (
    "Your previous reply could not be parsed. Answer again with exactly the "
    "three sections Error analysis:, Corrected reasoning: and Tips:, where "
    "the corrected reasoning ends with a final line of the form "
    "`decision: <ACTION>`."
)


def correct_unsafe(episode: EpisodeRecord, backends: BackendSet) -> CorrectionResult:
    """Ask the reviewer to repair the decisive frame of a crashed episode.

    The decisive frame is the last decision taken, the one whose step
    ended in contact.  One malformed reply earns a format reminder retry;
    a second one raises ReflectionFormatError.
    """
    if classify_episode(episode) != "unsafe":
        raise ValueError("only collision episodes have a decisive frame to correct")
    record = episode.records[-1]
    messages = build_reflection_prompt(record)
    last_error: Optional[Exception] = None
    for attempt in range(2):
        reply = backends.corrector.chat(messages)
        try:
            sections = parse_correction_reply(reply)
            action = decode_decision(sections["corrected_reasoning"])
            return CorrectionResult(
                record=record,
                error_analysis=sections["error_analysis"],
                corrected_reasoning=sections["corrected_reasoning"],
                tips=sections["tips"],
                corrected_action=action,
            )
        except (ReflectionFormatError, DecodeError) as exc:
            last_error = exc
            messages = messages + [
                ChatMessage("assistant", reply),
                ChatMessage("user", REFLECTION_FORMAT_REMINDER),
            ]
    raise ReflectionFormatError(f"reviewer never produced usable sections: {last_error}")


@dataclass
class ReflectionOutcome:
    success_added: int = 0
    corrections_added: int = 0
    skipped: int = 0
    experiences: List[Experience] = dc_field(default_factory=list)
    corrections: List[CorrectionResult] = dc_field(default_factory=list)


def apply_reflection(
    episodes: Sequence[EpisodeRecord],
    store: MemoryStore,
    backends: BackendSet,
    clock: Optional[Callable[[], str]] = None,
) -> ReflectionOutcome:
    """Fold a batch of episodes into the store.

    Safe episodes add one success experience per sampled key frame;
    unsafe ones add a single correction for the decisive frame.
    Episodes cut short by decoder failures are skipped.  Descriptions
    already present are replaced per store semantics, so reflecting the
    same episode twice cannot duplicate entries.
    """
    clock = clock or now_rfc3339
    outcome = ReflectionOutcome()
    for episode in episodes:
        verdict = classify_episode(episode)
        if verdict == "safe":
            for record in sample_key_frames(episode):
                exp = Experience(
                    id=f"{episode.episode_id}-f{record.frame}",
                    key=backends.embedder.embed(record.scenario.key_text.strip()),
                    description=record.scenario.key_text,
                    reasoning=record.response,
                    action=record.action,
                    kind="success",
                    created_at=clock(),
                    source="sim",
                )
                store_experience(store, exp)
                outcome.experiences.append(exp)
                outcome.success_added += 1
        elif verdict == "unsafe":
            correction = correct_unsafe(episode, backends)
            exp = Experience(
                id=f"{episode.episode_id}-corr",
                key=backends.embedder.embed(
                    correction.record.scenario.key_text.strip()
                ),
                description=correction.record.scenario.key_text,
                reasoning=correction.corrected_reasoning,
                action=correction.corrected_action,
                kind="correction",
                created_at=clock(),
                source="sim",
            )
            store_experience(store, exp)
            outcome.experiences.append(exp)
            outcome.corrections.append(correction)
            outcome.corrections_added += 1
        else:
            outcome.skipped += 1
    return outcome
