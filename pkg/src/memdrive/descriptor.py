"""Render observations as natural language scene descriptions.

The wording is canonical: downstream prompts, memory keys and the rule
based driver all parse or embed these exact sentences, so the templates
here are the single source of truth.  Distances quoted in the text are
center to center; safety math converts to bumper gaps.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Optional

from . import params
from .sim_core import ScenarioObservation, VehicleState

DEFAULT_INTENTION = "Your driving intention is to drive safely and avoid collisions."

ACTIONS_SENTENCE = (
    "Your available actions are: LANE_LEFT, IDLE, LANE_RIGHT, FASTER, SLOWER. "
)

EGO_SENTENCE = (
    "You are driving on a road with {lanes} lanes, and you are currently "
    "driving in the {ordinal} lane from the left. Your current position is "
    "{x:.2f} m, your speed is {v:.2f} m/s, and your acceleration is "
    "{a:.2f} m/s². "
)

VEHICLE_SENTENCE = (
    "Vehicle {id} is in the {relation} at {d:.2f} m, driving at {v:.2f} m/s "
    "with acceleration {a:.2f} m/s². "
)

NO_VEHICLES_SENTENCE = "There are no other vehicles driving near you. "

# Slot order fixes the sentence order in every description.
RELATIONS = (
    "same lane ahead",
    "same lane behind",
    "left lane ahead",
    "left lane behind",
    "right lane ahead",
    "right lane behind",
)

_ORDINALS = (
    "first", "second", "third", "fourth", "fifth", "sixth",
    "seventh", "eighth", "ninth", "tenth", "eleventh", "twelfth",
)


def lane_ordinal(index: int) -> str:
    """One-based ordinal word for a zero-based lane index, counted from
    the left edge."""
    if 0 <= index < len(_ORDINALS):
        return _ORDINALS[index]
    n = index + 1
    suffix = {1: "st", 2: "nd", 3: "rd"}.get(n % 10 if n % 100 not in (11, 12, 13) else 0, "th")
    return f"{n}{suffix}"


@dataclass(frozen=True)
class ScenarioText:
    """Rendered description plus the prefix used as the memory key.

    key_text strips the action list and intention so retrieval matches on
    the situation, not on boilerplate shared by every scene.
    """

    text: str
    key_text: str


@dataclass(frozen=True)
class SafetyAssessment:
    leader_id: Optional[str]
    gap: float
    closing_speed: float
    ttc: float
    safe_gap: float


def select_key_vehicles(obs: ScenarioObservation) -> tuple:
    """Nearest vehicle per relation slot, in RELATIONS order.

    Ahead means a non-negative center offset along the road.  Only the
    ego lane and its immediate neighbors are described; anything further
    out stays in the observation but not in the text.
    """
    ego = obs.ego
    slots = {}
    for other in obs.others:  # already sorted nearest first
        if abs(other.lane_index - ego.lane_index) > 1:
            continue
        relation = key_vehicle_relation(obs, other)
        if relation not in slots:
            slots[relation] = other
    return tuple(slots[r] for r in RELATIONS if r in slots)


def key_vehicle_relation(obs: ScenarioObservation, vehicle: VehicleState) -> str:
    dlane = vehicle.lane_index - obs.ego.lane_index
    side = {0: "same lane", -1: "left lane", 1: "right lane"}[dlane]
    longi = "ahead" if vehicle.position - obs.ego.position >= 0.0 else "behind"
    return f"{side} {longi}"


def describe_scenario(
    obs: ScenarioObservation, intention: str = DEFAULT_INTENTION
) -> ScenarioText:
    """Render the canonical description of an observation.

    Layout: ego sentence, one sentence per key vehicle in slot order (or
    the no-traffic sentence), the action list, then the intention.  The
    key text is everything before the action list, trailing space
    included.
    """
    ego = obs.ego
    parts = [
        EGO_SENTENCE.format(
            lanes=obs.lanes,
            ordinal=lane_ordinal(ego.lane_index),
            x=ego.position,
            v=ego.speed,
            a=ego.accel,
        )
    ]
    key = select_key_vehicles(obs)
    if key:
        for vehicle in key:
            parts.append(
                VEHICLE_SENTENCE.format(
                    id=vehicle.id,
                    relation=key_vehicle_relation(obs, vehicle),
                    d=abs(vehicle.position - ego.position),
                    v=vehicle.speed,
                    a=vehicle.accel,
                )
            )
    else:
        parts.append(NO_VEHICLES_SENTENCE)
    key_text = "".join(parts)
    text = key_text + ACTIONS_SENTENCE + intention
    return ScenarioText(text=text, key_text=key_text)


def assess_safety(
    obs: ScenarioObservation, lane: Optional[int] = None
) -> SafetyAssessment:
    """Quantify the threat from the nearest leader in a lane.

    gap is bumper to bumper, floored at zero; ttc is gap over closing
    speed when actually closing, otherwise infinite.  safe_gap is the
    desired headway distance at the current ego speed.
    """
    ego = obs.ego
    if lane is None:
        lane = ego.lane_index
    leader = None
    leader_dx = math.inf
    for other in obs.others:
        dx = other.position - ego.position
        if other.lane_index == lane and dx >= 0.0 and dx < leader_dx:
            leader = other
            leader_dx = dx
    safe_gap = params.T_HEADWAY * ego.speed
    if leader is None:
        return SafetyAssessment(None, math.inf, 0.0, math.inf, safe_gap)
    gap = max(0.0, leader_dx - 0.5 * (ego.length + leader.length))
    closing = ego.speed - leader.speed
    ttc = gap / closing if closing > 0.0 else math.inf
    return SafetyAssessment(leader.id, gap, closing, ttc, safe_gap)


# Parsing support for consumers that only see the rendered text (the rule
# based driver, prompt fixtures).

@dataclass(frozen=True)
class ParsedVehicle:
    id: str
    relation: str
    distance: float
    speed: float
    accel: float


@dataclass(frozen=True)
class ParsedScene:
    lanes: int
    ego_lane: int  # zero-based from the left
    position: float
    speed: float
    accel: float
    vehicles: tuple

    def nearest(self, relation: str) -> Optional[ParsedVehicle]:
        for v in self.vehicles:
            if v.relation == relation:
                return v
        return None


_EGO_RE = re.compile(
    r"You are driving on a road with (\d+) lanes, and you are currently "
    r"driving in the (\w+) lane from the left\. Your current position is "
    r"(-?[\d.]+) m, your speed is (-?[\d.]+) m/s, and your acceleration is "
    r"(-?[\d.]+) m/s²\."
)

_VEHICLE_RE = re.compile(
    r"Vehicle (\S+) is in the (same|left|right) lane (ahead|behind) at "
    r"(-?[\d.]+) m, driving at (-?[\d.]+) m/s with acceleration "
    r"(-?[\d.]+) m/s²\."
)


def parse_scenario_text(text: str) -> ParsedScene:
    """Recover the structured scene from a rendered description.

    Raises ValueError when the ego sentence is missing or malformed; a
    scene with no vehicle sentences parses to an empty vehicle tuple.
    """
    m = _EGO_RE.search(text)
    if m is None:
        raise ValueError("not a scene description: ego sentence not found")
    ordinal = m.group(2).lower()
    if ordinal in _ORDINALS:
        ego_lane = _ORDINALS.index(ordinal)
    else:
        digits = re.match(r"(\d+)", ordinal)
        if digits is None:
            raise ValueError(f"unreadable lane ordinal {ordinal!r}")
        ego_lane = int(digits.group(1)) - 1
    vehicles = tuple(
        ParsedVehicle(
            id=vm.group(1),
            relation=f"{vm.group(2)} lane {vm.group(3)}",
            distance=float(vm.group(4)),
            speed=float(vm.group(5)),
            accel=float(vm.group(6)),
        )
        for vm in _VEHICLE_RE.finditer(text)
    )
    return ParsedScene(
        lanes=int(m.group(1)),
        ego_lane=ego_lane,
        position=float(m.group(3)),
        speed=float(m.group(4)),
        accel=float(m.group(5)),
        vehicles=vehicles,
    )
