"""Seeded multi-lane highway simulator.

World model: straight road with `lanes` parallel lanes, lane 0 leftmost.
Background vehicles follow the Intelligent Driver Model longitudinally
(Treiber's formulation) and MOBIL for lane changes.  The ego vehicle is
driven externally through five meta actions at the decision rate; between
decisions everything integrates with forward Euler substeps.

Determinism: a single numpy PCG64 generator seeded from the scenario seed
drives every spawn draw in a documented order (per lane: start offset,
then per slot the speed draw for background cars followed by the spacing
draw).  Dynamics after spawn are closed form in the state, so an entire
episode is a pure function of (config, seed, action sequence).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import kernels, params


class MetaAction(str, enum.Enum):
    """High level ego maneuvers issued once per decision frame."""

    LANE_LEFT = "LANE_LEFT"
    IDLE = "IDLE"
    LANE_RIGHT = "LANE_RIGHT"
    FASTER = "FASTER"
    SLOWER = "SLOWER"


ACTION_NAMES = tuple(a.value for a in MetaAction)


class CollidedStateError(RuntimeError):
    """Raised when stepping a world whose episode already ended in contact."""


@dataclass(frozen=True)
class EnvConfig:
    """Scenario parameters.

    density scales the vehicle count: ceil(5 * lanes * density) background
    cars, split round robin over lanes.  decision_hz and substeps fix the
    integration step at 1 / (decision_hz * substeps) seconds.
    """

    lanes: int = 4
    density: float = 2.0
    seed: int = 0
    max_frames: int = 30
    decision_hz: float = 1.0
    substeps: int = 10
    perception_range: float = params.PERCEPTION_RANGE
    max_observed: int = params.MAX_OBSERVED
    lane_width: float = params.LANE_WIDTH
    speed_levels: tuple = params.SPEED_LEVELS
    npc_speed_min: float = params.NPC_SPEED_MIN
    npc_speed_max: float = params.NPC_SPEED_MAX
    vehicle_length: float = params.VEHICLE_LENGTH
    vehicle_width: float = params.VEHICLE_WIDTH

    def __post_init__(self):
        if self.lanes < 1:
            raise ValueError("lanes must be at least 1")
        if self.density < 0.0:
            raise ValueError("density must be non-negative")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")
        if self.max_frames < 1:
            raise ValueError("max_frames must be positive")
        if self.decision_hz <= 0.0 or self.substeps < 1:
            raise ValueError("decision_hz and substeps must be positive")
        levels = tuple(float(v) for v in self.speed_levels)
        if len(levels) < 1 or any(b <= a for a, b in zip(levels, levels[1:])):
            raise ValueError("speed_levels must be strictly increasing")
        object.__setattr__(self, "speed_levels", levels)
        if self.npc_speed_min > self.npc_speed_max or self.npc_speed_min < 0.0:
            raise ValueError("bad npc speed range")
        if min(self.perception_range, self.lane_width,
               self.vehicle_length, self.vehicle_width) <= 0.0:
            raise ValueError("geometry values must be positive")
        if self.max_observed < 0:
            raise ValueError("max_observed must be non-negative")

    @property
    def dt(self) -> float:
        return 1.0 / (self.decision_hz * self.substeps)

    @property
    def npc_count(self) -> int:
        return int(math.ceil(5.0 * self.lanes * self.density))


@dataclass(frozen=True)
class VehicleState:
    """Snapshot of one vehicle.

    position is the longitudinal center in meters; lateral_offset is
    measured from the center of lane_index and is zero except mid change.
    """

    id: str
    lane_index: int
    position: float
    speed: float
    accel: float = 0.0
    lateral_offset: float = 0.0
    length: float = params.VEHICLE_LENGTH
    width: float = params.VEHICLE_WIDTH


@dataclass(frozen=True)
class StepEvents:
    collision: bool = False
    collided_with: Optional[str] = None
    off_road: bool = False


@dataclass(frozen=True)
class ScenarioObservation:
    """Ego centric view handed to the describer: nearby cars sorted by
    absolute longitudinal distance, truncated to the perception budget."""

    time: float
    lanes: int
    ego: VehicleState
    others: tuple


@dataclass
class WorldState:
    """Full mutable simulator state.  Index 0 is always the ego vehicle.

    Value semantics: step_env never mutates its input, it works on a copy,
    so states can be stored, compared and replayed freely.
    """

    config: EnvConfig
    ids: tuple
    pos: np.ndarray
    speed: np.ndarray
    accel: np.ndarray
    lat: np.ndarray
    v_des: np.ndarray
    lane: np.ndarray
    lane_to: np.ndarray
    length: np.ndarray
    width: np.ndarray
    cooldown: np.ndarray = None
    time: float = 0.0
    frame: int = 0
    ego_level: int = params.EGO_START_LEVEL
    collided: bool = False

    def copy(self) -> "WorldState":
        return WorldState(
            config=self.config,
            ids=self.ids,
            pos=self.pos.copy(),
            speed=self.speed.copy(),
            accel=self.accel.copy(),
            lat=self.lat.copy(),
            v_des=self.v_des.copy(),
            lane=self.lane.copy(),
            lane_to=self.lane_to.copy(),
            length=self.length.copy(),
            width=self.width.copy(),
            cooldown=self.cooldown.copy(),
            time=self.time,
            frame=self.frame,
            ego_level=self.ego_level,
            collided=self.collided,
        )

    def vehicle(self, index: int) -> VehicleState:
        return VehicleState(
            id=self.ids[index],
            lane_index=int(self.lane[index]),
            position=float(self.pos[index]),
            speed=float(self.speed[index]),
            accel=float(self.accel[index]),
            lateral_offset=float(self.lat[index]),
            length=float(self.length[index]),
            width=float(self.width[index]),
        )


def idm_acceleration(
    v: float,
    v_des: float,
    gap: float,
    dv: float,
    *,
    a_max: float = params.A_MAX,
    b_comfort: float = params.B_COMFORT,
    b_max: float = params.B_MAX,
    delta: float = params.DELTA,
    t_headway: float = params.T_HEADWAY,
    s0: float = params.S0,
) -> float:
    """IDM acceleration for a follower.

    Parameters
    ----------
    v : current speed, m/s (non-negative).
    v_des : desired free-flow speed, m/s (positive).
    gap : bumper to bumper distance to the leader, m.  Pass math.inf when
        the lane ahead is empty.
    dv : closing speed v - v_leader, m/s.

    Returns the acceleration in m/s^2 clamped to [-b_max, a_max]:

        a = a_max * (1 - (v / v_des)**delta - (s_star / gap)**2)
        s_star = s0 + v * t_headway + v * dv / (2 * sqrt(a_max * b_comfort))

    Raises ValueError for a non-positive finite gap: bumpers touching or
    overlapping is a pre-collision state the model has nothing sane to say
    about, the caller must handle it.
    """
    if v < 0.0:
        raise ValueError("speed must be non-negative")
    if v_des <= 0.0:
        raise ValueError("desired speed must be positive")
    if gap <= 0.0:
        raise ValueError("gap must be positive (leader already overlaps)")
    s_star = s0 + v * t_headway + v * dv / (2.0 * math.sqrt(a_max * b_comfort))
    ratio = s_star / gap
    a = a_max * (1.0 - (v / v_des) ** delta - ratio * ratio)
    return min(max(a, -b_max), a_max)


@dataclass(frozen=True)
class LaneNeighbor:
    """A vehicle adjacent to the subject in some lane.

    gap is bumper to bumper and non-negative for any legal neighbor;
    v_des only matters when the neighbor acts as a follower.
    """

    gap: float
    speed: float
    v_des: float = 25.0


@dataclass(frozen=True)
class MobilEgoContext:
    speed: float
    v_des: float
    length: float = params.VEHICLE_LENGTH
    leader: Optional[LaneNeighbor] = None
    follower: Optional[LaneNeighbor] = None


@dataclass(frozen=True)
class MobilLaneContext:
    leader: Optional[LaneNeighbor] = None
    follower: Optional[LaneNeighbor] = None


def _neighbor_accel(nb: Optional[LaneNeighbor], ahead: Optional[LaneNeighbor],
                    extra_gap: float) -> float:
    # Acceleration of follower nb when `ahead` leads it at nb.gap + extra_gap
    # + ahead.gap (inf when either is absent appropriately).
    if nb is None:
        return 0.0
    if ahead is None:
        return idm_acceleration(nb.speed, nb.v_des, math.inf, nb.speed)
    gap = nb.gap + extra_gap + ahead.gap
    if gap <= 0.0:
        return -params.B_MAX
    return idm_acceleration(nb.speed, nb.v_des, gap, nb.speed - ahead.speed)


def _follower_accel(nb: Optional[LaneNeighbor], subject_speed: float) -> float:
    if nb is None:
        return 0.0
    if nb.gap <= 0.0:
        return -params.B_MAX
    return idm_acceleration(nb.speed, nb.v_des, nb.gap, nb.speed - subject_speed)


def _leader_accel(speed: float, v_des: float, leader: Optional[LaneNeighbor]) -> float:
    if leader is None:
        return idm_acceleration(speed, v_des, math.inf, speed)
    if leader.gap <= 0.0:
        return -params.B_MAX
    return idm_acceleration(speed, v_des, leader.gap, speed - leader.speed)


def mobil_should_change(ego: MobilEgoContext, target: MobilLaneContext) -> bool:
    """MOBIL gate for one candidate lane.

    Safety first: the prospective follower must not be forced below
    -B_SAFE.  Then the incentive test, own gain plus POLITENESS times the
    gains of the prospective and abandoned followers, must clear
    DELTA_A_THRESHOLD.
    """
    a_nf_after = _follower_accel(target.follower, ego.speed)
    if target.follower is not None and a_nf_after < -params.B_SAFE:
        return False

    a_self_now = _leader_accel(ego.speed, ego.v_des, ego.leader)
    a_self_new = _leader_accel(ego.speed, ego.v_des, target.leader)

    nf_gain = 0.0
    if target.follower is not None:
        a_nf_now = _neighbor_accel(target.follower, target.leader, ego.length)
        nf_gain = a_nf_after - a_nf_now
    of_gain = 0.0
    if ego.follower is not None:
        a_of_now = _follower_accel(ego.follower, ego.speed)
        a_of_after = _neighbor_accel(ego.follower, ego.leader, ego.length)
        of_gain = a_of_after - a_of_now

    gain = (a_self_new - a_self_now) + params.POLITENESS * (nf_gain + of_gain)
    return gain > params.DELTA_A_THRESHOLD


def detect_collision(a: VehicleState, b: VehicleState,
                     lane_width: float = params.LANE_WIDTH) -> bool:
    """Strict axis-aligned rectangle overlap; touching edges do not count."""
    dx = abs(a.position - b.position)
    ya = a.lane_index * lane_width + a.lateral_offset
    yb = b.lane_index * lane_width + b.lateral_offset
    dy = abs(ya - yb)
    return dx < 0.5 * (a.length + b.length) and dy < 0.5 * (a.width + b.width)


def _world_from_arrays(config, ids, pos, speed, lane, v_des, ego_level):
    n = len(ids)
    return WorldState(
        config=config,
        ids=tuple(ids),
        pos=np.asarray(pos, dtype=np.float64),
        speed=np.asarray(speed, dtype=np.float64),
        accel=np.zeros(n, dtype=np.float64),
        lat=np.zeros(n, dtype=np.float64),
        v_des=np.asarray(v_des, dtype=np.float64),
        lane=np.asarray(lane, dtype=np.int64),
        lane_to=np.asarray(lane, dtype=np.int64).copy(),
        length=np.full(n, config.vehicle_length, dtype=np.float64),
        width=np.full(n, config.vehicle_width, dtype=np.float64),
        cooldown=np.zeros(n, dtype=np.int64),
        ego_level=ego_level,
    )


def spawn_traffic(config: EnvConfig) -> WorldState:
    """Build the initial world for (config.seed, config).

    Placement walks each lane front to back: a uniform start offset in
    [0, 10), then consecutive slots spaced 15 m center to center plus a
    uniform extra of up to 50 / density meters, which keeps at least 10 m
    of clear road between bumpers.  Background speeds (also their desired
    speeds) draw uniformly from the npc speed range.  The ego takes the
    middle slot of the middle lane at speed level EGO_START_LEVEL.
    """
    rng = np.random.Generator(np.random.PCG64(config.seed))
    n_npc = config.npc_count
    lanes = config.lanes
    counts = [n_npc // lanes + (1 if l < n_npc % lanes else 0) for l in range(lanes)]
    ego_lane = lanes // 2
    ego_slot = counts[ego_lane] // 2
    extra_max = 50.0 / config.density if config.density > 0.0 else 0.0
    start_level = min(params.EGO_START_LEVEL, len(config.speed_levels) - 1)

    ids, pos, speed, lane, v_des = [], [], [], [], []
    ego_entry = None
    next_id = 101
    for l in range(lanes):
        x = rng.uniform(0.0, 10.0)
        slots = counts[l] + (1 if l == ego_lane else 0)
        for s in range(slots):
            if l == ego_lane and s == ego_slot:
                ego_entry = (x, config.speed_levels[start_level], l)
            else:
                v = rng.uniform(config.npc_speed_min, config.npc_speed_max)
                ids.append(str(next_id))
                next_id += 1
                pos.append(x)
                speed.append(v)
                lane.append(l)
                v_des.append(v)
            x += 15.0 + rng.uniform(0.0, extra_max)
    assert ego_entry is not None
    ex, ev, el = ego_entry
    ids = ["ego"] + ids
    pos = [ex] + pos
    speed = [ev] + speed
    lane = [el] + lane
    v_des = [ev] + v_des
    return _world_from_arrays(config, ids, pos, speed, lane, v_des, start_level)


def build_world(config: EnvConfig, vehicles: Sequence[dict]) -> WorldState:
    """Assemble a world from explicit vehicle dicts, ego first.

    Each dict needs id, lane, position and speed; v_des defaults to the
    given speed (for the ego, to the nearest speed level).  Meant for
    tests and scripted scenarios.
    """
    if not vehicles:
        raise ValueError("need at least the ego vehicle")
    ids, pos, speed, lane, v_des = [], [], [], [], []
    levels = config.speed_levels
    ego_speed = float(vehicles[0]["speed"])
    ego_level = min(range(len(levels)), key=lambda i: abs(levels[i] - ego_speed))
    for k, veh in enumerate(vehicles):
        ids.append(str(veh["id"]))
        lane.append(int(veh["lane"]))
        pos.append(float(veh["position"]))
        speed.append(float(veh["speed"]))
        if k == 0:
            v_des.append(levels[ego_level])
        else:
            v_des.append(float(veh.get("v_des", veh["speed"])))
        if not 0 <= int(veh["lane"]) < config.lanes:
            raise ValueError(f"vehicle {veh['id']} off the road")
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate vehicle ids")
    return _world_from_arrays(config, ids, pos, speed, lane, v_des, ego_level)


def observe(state: WorldState) -> ScenarioObservation:
    """Ego view of the world: vehicles within perception_range of the ego
    by center distance, nearest first (stable on ties), at most
    max_observed entries."""
    dx = np.abs(state.pos - state.pos[0])
    order = np.argsort(dx, kind="stable")
    others = []
    for i in order:
        i = int(i)
        if i == 0:
            continue
        if dx[i] > state.config.perception_range:
            break
        others.append(state.vehicle(i))
        if len(others) >= state.config.max_observed:
            break
    return ScenarioObservation(
        time=state.time,
        lanes=state.config.lanes,
        ego=state.vehicle(0),
        others=tuple(others),
    )


def step_env(state: WorldState, action: MetaAction):
    """Advance one decision frame.

    Order of operations: apply the meta action to the ego targets
    (saturating at the speed ladder ends and at the road edges), run the
    MOBIL pass for background vehicles on the frame-start state, then
    integrate the substeps through the selected kernel backend.  Contact
    with the ego ends the frame at the offending substep.

    Returns (new_state, StepEvents).  The input state is not modified.
    Raises CollidedStateError if the episode already ended.
    """
    if state.collided:
        raise CollidedStateError("episode already ended in a collision")
    action = MetaAction(action)
    new = state.copy()
    cfg = new.config

    if action is MetaAction.FASTER:
        new.ego_level = min(new.ego_level + 1, len(cfg.speed_levels) - 1)
    elif action is MetaAction.SLOWER:
        new.ego_level = max(new.ego_level - 1, 0)
    new.v_des[0] = cfg.speed_levels[new.ego_level]

    ego_target = int(new.lane[0])
    if action is MetaAction.LANE_LEFT:
        ego_target = max(ego_target - 1, 0)
    elif action is MetaAction.LANE_RIGHT:
        ego_target = min(ego_target + 1, cfg.lanes - 1)

    lane_to = kernels.mobil_pass(
        new.pos, new.speed, new.lane, new.v_des, new.length, cfg.lanes,
        allowed=new.cooldown == 0,
    )
    lane_to[0] = ego_target
    new.lane_to = lane_to
    started_change = lane_to != new.lane
    started_change[0] = False  # the ego has no refractory period

    done, hit = kernels.advance_frame(
        new.pos, new.speed, new.accel, new.lane, new.lane_to, new.lat,
        new.v_des, new.length, new.width,
        cfg.substeps, cfg.dt, cfg.lane_width,
    )
    new.time = new.time + done * cfg.dt
    new.frame += 1
    if hit >= 0:
        new.collided = True
        events = StepEvents(collision=True, collided_with=new.ids[hit])
    else:
        new.cooldown = np.where(
            started_change, params.LANE_CHANGE_COOLDOWN,
            np.maximum(new.cooldown - 1, 0),
        )
        events = StepEvents()
    return new, events


def _vehicle_dict(v: VehicleState) -> dict:
    return {
        "id": v.id,
        "lane": v.lane_index,
        "x": round(v.position, 6),
        "v": round(v.speed, 6),
        "a": round(v.accel, 6),
        "lat": round(v.lateral_offset, 6),
    }


def frame_record(frame: int, obs: ScenarioObservation, action: MetaAction,
                 events: Optional[StepEvents]) -> dict:
    """One trace row per decision frame, JSON ready.

    events stays null for a frame that was never stepped (the decoder
    gave up before the action reached the road), so step counts
    recomputed from traces agree with the in-process ones.
    """
    return {
        "frame": frame,
        "time": round(obs.time, 6),
        "ego": _vehicle_dict(obs.ego),
        "others": [_vehicle_dict(o) for o in obs.others],
        "action": action.value if isinstance(action, MetaAction) else str(action),
        "events": None if events is None else {
            "collision": events.collision,
            "collided_with": events.collided_with,
            "off_road": events.off_road,
        },
    }
