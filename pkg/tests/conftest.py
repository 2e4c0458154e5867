import pytest

from memdrive.descriptor import describe_scenario
from memdrive.gateway import BackendSet, HashingEmbedder, HeuristicChatBackend
from memdrive.memory import init_store, store_from_template
from memdrive.reasoning import DecisionRecord, EpisodeRecord, PromptBundle
from memdrive.sim_core import (
    EnvConfig,
    MetaAction,
    ScenarioObservation,
    StepEvents,
    VehicleState,
    build_world,
)

from importlib.resources import files


@pytest.fixture
def embedder():
    return HashingEmbedder(dim=256)


@pytest.fixture
def heuristic_backends(embedder):
    return BackendSet(chat=HeuristicChatBackend(), embedder=embedder)


@pytest.fixture
def seed_template_text():
    return (files("memdrive") / "assets" / "seed_memory_v1.txt").read_text(
        encoding="utf-8"
    )


@pytest.fixture
def seed_store(seed_template_text, embedder):
    return store_from_template(seed_template_text, embedder)


@pytest.fixture
def empty_store():
    return init_store(dim=256)


def make_vehicle(vid, lane, pos, speed, accel=0.0, lat=0.0):
    return VehicleState(
        id=vid, lane_index=lane, position=pos, speed=speed,
        accel=accel, lateral_offset=lat,
    )


@pytest.fixture
def two_car_world():
    """Ego plus one slow leader 40 m ahead in a 3 lane world."""
    config = EnvConfig(lanes=3, density=1.0, seed=0, max_frames=30)
    vehicles = [
        {"id": "ego", "lane": 1, "position": 100.0, "speed": 25.0},
        {"id": "101", "lane": 1, "position": 140.0, "speed": 18.0,
         "v_des": 18.0},
    ]
    return build_world(config, vehicles)


def fake_record(frame, action="IDLE", collision=False, failure=False,
                ego_pos=None):
    """A hand-built decision record with a real rendered scene."""
    obs = ScenarioObservation(
        time=float(frame), lanes=3,
        ego=make_vehicle("ego", 1, ego_pos if ego_pos is not None
                         else 100.0 + 25.0 * frame, 25.0),
        others=(make_vehicle("101", 1, 140.0 + 25.0 * frame, 20.0),),
    )
    scenario = describe_scenario(obs)
    response = f"thinking about frame {frame}.\ndecision: {action}"
    events = None if failure else StepEvents(
        collision=collision, collided_with="101" if collision else None
    )
    return DecisionRecord(
        frame=frame, observation=obs, scenario=scenario, recalled=(),
        prompt=PromptBundle(system="s", shots=(), user=scenario.text),
        response=response, action=MetaAction(action), latency=0.0,
        decoder_failure=failure, events=events,
    )


def fake_episode(episode_id, actions, terminated_by="completed",
                 max_frames=None, seed=0, pos_base=100.0):
    """A hand-built episode whose last record reflects how it ended."""
    config = EnvConfig(lanes=3, density=1.0, seed=seed,
                       max_frames=max_frames or max(len(actions), 1))
    ep = EpisodeRecord(episode_id=episode_id, seed=seed, config=config)
    for frame, action in enumerate(actions):
        last = frame == len(actions) - 1
        ep.records.append(fake_record(
            frame, action,
            collision=(terminated_by == "collision" and last),
            failure=(terminated_by == "decoder_failure" and last),
            ego_pos=pos_base + 25.0 * frame,
        ))
    ep.terminated_by = terminated_by
    ep.success_steps = sum(
        1 for r in ep.records if r.events is not None and not r.events.collision
    )
    return ep


# Verdict lines for the release-gate tests in test_acceptance.py: the
# terminal summary ends with one PASS/FAIL line per gate.
_GATE_RESULTS = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    name = report.nodeid.rsplit("::", 1)[-1]
    if report.when == "call":
        _GATE_RESULTS[name] = report.outcome == "passed"
    elif report.when == "setup" and report.outcome == "failed":
        _GATE_RESULTS[name] = False


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _GATE_RESULTS:
        return
    terminalreporter.section("acceptance gates")
    for name, ok in _GATE_RESULTS.items():
        label = name.removeprefix("test_").replace("_", " ")
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {label}")
