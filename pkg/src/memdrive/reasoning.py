"""Few-shot reasoning loop: describe, recall, prompt, decode, step.

Retrieved experiences become in-context examples, ordered so the most
similar one sits closest to the live question.  Replies must end with a
`decision: <ACTION>` line; a reply that does not decode earns up to two
format-reminder retries before the frame falls back to braking and the
episode stops.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field as dc_field
from functools import lru_cache
from importlib import resources
from typing import List, Optional, Sequence, Union

from .descriptor import (
    ACTIONS_SENTENCE,
    DEFAULT_INTENTION,
    ScenarioText,
    describe_scenario,
)
from .gateway import (
    BackendSet,
    ChatMessage,
    DecodeError,
    decode_decision,
)
from .memory import MemoryStore, RecallResult, recall
from .sim_core import (
    EnvConfig,
    MetaAction,
    ScenarioObservation,
    StepEvents,
    WorldState,
    observe,
    spawn_traffic,
    step_env,
)

SYSTEM_PROMPT_ASSET = "reasoning_system_v1.txt"

# One initial reply plus this many format-reminder retries.
MAX_DECODE_RETRIES = 2

FORMAT_REMINDER = (
    "Your previous reply did not contain a readable decision. Answer again, "
    "and end with a single final line of the form `decision: <ACTION>` where "
    "<ACTION> is one of LANE_LEFT, IDLE, LANE_RIGHT, FASTER, SLOWER."
)

FALLBACK_ACTION = MetaAction.SLOWER


@lru_cache(maxsize=None)
def load_system_prompt(name: str = SYSTEM_PROMPT_ASSET) -> str:
    return (resources.files("memdrive") / "assets" / name).read_text(
        encoding="utf-8"
    ).strip()


@dataclass(frozen=True)
class PromptBundle:
    """System prompt, few-shot pairs (user, assistant), live user message."""

    system: str
    shots: tuple
    user: str

    def messages(self) -> List[ChatMessage]:
        out = [ChatMessage("system", self.system)]
        for shot_user, shot_assistant in self.shots:
            out.append(ChatMessage("user", shot_user))
            out.append(ChatMessage("assistant", shot_assistant))
        out.append(ChatMessage("user", self.user))
        return out


@dataclass
class DecisionRecord:
    """Everything about one decision frame, filled in as the loop runs."""

    frame: int
    observation: ScenarioObservation
    scenario: ScenarioText
    recalled: tuple
    prompt: PromptBundle
    response: str
    action: MetaAction
    latency: float
    retries: int = 0
    decoder_failure: bool = False
    events: Optional[StepEvents] = None


@dataclass
class EpisodeRecord:
    episode_id: str
    seed: int
    config: EnvConfig
    records: List[DecisionRecord] = dc_field(default_factory=list)
    success_steps: int = 0
    terminated_by: str = "completed"  # completed | collision | decoder_failure

    @property
    def completed(self) -> bool:
        return self.terminated_by == "completed"


def decode_action(text: str) -> MetaAction:
    """Parse the final decision line of a reply; raises DecodeError."""
    return decode_decision(text)


def build_prompt(
    scenario: ScenarioText,
    recalled: Sequence[RecallResult],
    system_prompt: Optional[str] = None,
) -> PromptBundle:
    """Assemble the few-shot prompt for one frame.

    recalled arrives most similar first (recall order); shots are emitted
    in reverse so the most similar example is the last thing the model
    reads before the live scene.  Each shot's user turn is the stored
    scene description completed with the standard action list and the
    default intention.
    """
    system = system_prompt if system_prompt is not None else load_system_prompt()
    shots = []
    for result in reversed(list(recalled)):
        exp = result.experience
        shot_user = exp.description + " " + ACTIONS_SENTENCE + DEFAULT_INTENTION
        shots.append((shot_user, exp.reasoning))
    return PromptBundle(system=system, shots=tuple(shots), user=scenario.text)


def decide_frame(
    world: Union[WorldState, ScenarioObservation],
    store: MemoryStore,
    backends: BackendSet,
    k: int = 3,
    intention: str = DEFAULT_INTENTION,
    frame: int = 0,
    system_prompt: Optional[str] = None,
) -> DecisionRecord:
    """Run one describe/recall/prompt/decode cycle.

    With k == 0 the embedder is never invoked and the prompt carries no
    shots.  Decode failures retry with an appended format reminder; after
    MAX_DECODE_RETRIES extra rounds the frame records the braking
    fallback and flags decoder_failure.  Transport errors propagate.
    """
    obs = observe(world) if isinstance(world, WorldState) else world
    scenario = describe_scenario(obs, intention)
    if k > 0 and len(store) > 0:
        # Keys embed the canonical stripped key text, mirrored at store time.
        query = backends.embedder.embed(scenario.key_text.strip())
        recalled = tuple(recall(store, query, k))
    else:
        recalled = ()
    bundle = build_prompt(scenario, recalled, system_prompt)
    messages = bundle.messages()

    action: Optional[MetaAction] = None
    response = ""
    retries = 0
    start = time.perf_counter()
    for attempt in range(MAX_DECODE_RETRIES + 1):
        response = backends.chat.chat(messages)
        try:
            action = decode_action(response)
            break
        except DecodeError:
            if attempt == MAX_DECODE_RETRIES:
                break
            retries += 1
            messages = messages + [
                ChatMessage("assistant", response),
                ChatMessage("user", FORMAT_REMINDER),
            ]
    latency = time.perf_counter() - start

    failure = action is None
    return DecisionRecord(
        frame=frame,
        observation=obs,
        scenario=scenario,
        recalled=recalled,
        prompt=bundle,
        response=response,
        action=FALLBACK_ACTION if failure else action,
        latency=latency,
        retries=retries,
        decoder_failure=failure,
    )


def run_episode(
    config: EnvConfig,
    store: MemoryStore,
    backends: BackendSet,
    k: int = 3,
    intention: str = DEFAULT_INTENTION,
    world: Optional[WorldState] = None,
    episode_id: Optional[str] = None,
    system_prompt: Optional[str] = None,
) -> EpisodeRecord:
    """Drive one episode to completion, collision, or decoder failure.

    success_steps counts frames survived without collision; an episode is
    completed exactly when that reaches config.max_frames.  A frame whose
    reply never decoded ends the episode before the action is applied, so
    it does not count as survived.
    """
    state = world if world is not None else spawn_traffic(config)
    episode = EpisodeRecord(
        episode_id=episode_id or f"seed-{config.seed}",
        seed=config.seed,
        config=config,
    )
    terminated = "completed"
    for frame in range(config.max_frames):
        record = decide_frame(
            state, store, backends, k=k, intention=intention, frame=frame,
            system_prompt=system_prompt,
        )
        episode.records.append(record)
        if record.decoder_failure:
            terminated = "decoder_failure"
            break
        state, events = step_env(state, record.action)
        record.events = events
        if events.collision:
            terminated = "collision"
            break
    episode.terminated_by = terminated
    episode.success_steps = sum(
        1 for r in episode.records
        if r.events is not None and not r.events.collision
    )
    return episode


def decision_dict(record: DecisionRecord) -> dict:
    """JSON-ready export of one decision, embedding vectors elided."""
    return {
        "frame": record.frame,
        "scenario": record.scenario.text,
        "recalled": [
            {"id": r.experience.id, "similarity": round(r.similarity, 9)}
            for r in record.recalled
        ],
        "prompt": {
            "system": record.prompt.system,
            "shots": [list(pair) for pair in record.prompt.shots],
            "user": record.prompt.user,
        },
        "response": record.response,
        "action": record.action.value,
        "retries": record.retries,
        "decoder_failure": record.decoder_failure,
        "latency": round(record.latency, 6),
    }
