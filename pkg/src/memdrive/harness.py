"""Batch evaluation: run seeded episodes, score them, write artifacts.

Scoring follows the survival convention: an episode's success steps are
the decision frames survived without contact, and an episode succeeds
outright when that count reaches the horizon.  Batches are summarized by
the success-step quartiles and the success rate.

evaluate mode treats the memory as read-only and runs episodes
concurrently (results are assembled in seed order, so outputs do not
depend on scheduling).  evolve mode is sequential: each finished episode
passes through reflection before the next one starts, and the grown
memory is saved at the end.
"""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field, replace
from typing import Callable, List, Optional, Sequence

import numpy as np

from .descriptor import DEFAULT_INTENTION
from .gateway import BackendSet, TransportError
from .memory import MemoryStore, save_store
from .reasoning import EpisodeRecord, decision_dict, run_episode
from .reflection import ReflectionFormatError, ReflectionOutcome, apply_reflection
from .sim_core import EnvConfig, WorldState, frame_record

MODES = ("evaluate", "evolve")


@dataclass(frozen=True)
class ExperimentConfig:
    lanes: int = 4
    density: float = 2.0
    seeds: tuple = (0,)
    max_frames: int = 30
    shots: int = 3
    intention: str = DEFAULT_INTENTION
    mode: str = "evaluate"
    label: Optional[str] = None
    max_parallel: int = 4

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not self.seeds:
            raise ValueError("need at least one seed")
        if self.shots < 0 or self.max_parallel < 1:
            raise ValueError("bad shots or parallelism")

    @property
    def resolved_label(self) -> str:
        if self.label:
            return self.label
        return f"lane-{self.lanes}-density-{self.density:g}"

    def env_for(self, seed: int) -> EnvConfig:
        return EnvConfig(
            lanes=self.lanes,
            density=self.density,
            seed=seed,
            max_frames=self.max_frames,
        )


def compute_success_steps(episode: EpisodeRecord) -> int:
    """Frames survived before the first collision (all of them when the
    episode ran its full horizon)."""
    return sum(
        1 for r in episode.records if r.events is not None and not r.events.collision
    )


def quartile_stats(values: Sequence[float]) -> dict:
    """Five-number summary using linear interpolation (the numpy default,
    matching spreadsheet-style quartiles)."""
    if len(values) == 0:
        raise ValueError("no values to summarize")
    q = np.quantile(np.asarray(values, dtype=np.float64), [0.0, 0.25, 0.5, 0.75, 1.0])
    return {
        "min": float(q[0]),
        "q1": float(q[1]),
        "median": float(q[2]),
        "q3": float(q[3]),
        "max": float(q[4]),
    }


def success_rate(ss_values: Sequence[int], max_frames: int) -> float:
    """Fraction of episodes that survived the whole horizon."""
    if len(ss_values) == 0:
        raise ValueError("no episodes to rate")
    return sum(1 for s in ss_values if s == max_frames) / len(ss_values)


@dataclass
class ExperimentStats:
    label: str
    ss_values: List[int]
    min: float
    q1: float
    median: float
    q3: float
    max: float
    success_rate: float

    def to_dict(self) -> dict:
        return {
            "ss_values": list(self.ss_values),
            "min": self.min,
            "q1": self.q1,
            "median": self.median,
            "q3": self.q3,
            "max": self.max,
            "success_rate": self.success_rate,
            "label": self.label,
        }


def summarize(label: str, episodes: Sequence[EpisodeRecord], max_frames: int) -> ExperimentStats:
    ss = [compute_success_steps(ep) for ep in episodes]
    quart = quartile_stats(ss)
    return ExperimentStats(
        label=label,
        ss_values=ss,
        success_rate=success_rate(ss, max_frames),
        **quart,
    )


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    stats: ExperimentStats
    episodes: List[EpisodeRecord]
    memory_size_start: int
    incomplete: bool = False
    abort_reason: Optional[str] = None
    reflection: ReflectionOutcome = dc_field(default_factory=ReflectionOutcome)
    reflection_failures: int = 0


def run_experiment(
    config: ExperimentConfig,
    store: MemoryStore,
    backends: BackendSet,
    world_factory: Optional[Callable[[EnvConfig], WorldState]] = None,
    clock: Optional[Callable[[], str]] = None,
    memory_path: Optional[str] = None,
) -> ExperimentResult:
    """Run one batch over config.seeds.

    world_factory, when given, builds the starting world for each episode
    instead of the seeded spawner (tests use this to script scenes).  In
    evolve mode the store grows through reflection after every episode
    and is written to memory_path at the end when one is given.

    A transport failure stops the batch early: whatever finished is
    summarized and the result is flagged incomplete.
    """
    episodes: List[EpisodeRecord] = []
    memory_size_start = len(store)
    incomplete = False
    abort_reason: Optional[str] = None
    reflection_totals = ReflectionOutcome()
    reflection_failures = 0

    def one(index: int, seed: int) -> EpisodeRecord:
        env = config.env_for(seed)
        world = world_factory(env) if world_factory is not None else None
        return run_episode(
            env, store, backends,
            k=config.shots,
            intention=config.intention,
            world=world,
            episode_id=f"ep-{index:03d}",
        )

    if config.mode == "evaluate":
        workers = min(config.max_parallel, len(config.seeds))
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(one, i, seed) for i, seed in enumerate(config.seeds)
            ]
            for future in futures:
                try:
                    episodes.append(future.result())
                except TransportError as exc:
                    incomplete = True
                    abort_reason = str(exc)
                    for later in futures:
                        later.cancel()
                    break
    else:
        for i, seed in enumerate(config.seeds):
            try:
                episode = one(i, seed)
            except TransportError as exc:
                incomplete = True
                abort_reason = str(exc)
                break
            episodes.append(episode)
            try:
                outcome = apply_reflection([episode], store, backends, clock=clock)
            except ReflectionFormatError:
                reflection_failures += 1
            else:
                reflection_totals.success_added += outcome.success_added
                reflection_totals.corrections_added += outcome.corrections_added
                reflection_totals.skipped += outcome.skipped
                reflection_totals.experiences.extend(outcome.experiences)
                reflection_totals.corrections.extend(outcome.corrections)
        if memory_path is not None:
            save_store(store, memory_path)

    if not episodes:
        raise TransportError(
            f"no episode finished: {abort_reason or 'unknown failure'}"
        )
    stats = summarize(config.resolved_label, episodes, config.max_frames)
    return ExperimentResult(
        config=config,
        stats=stats,
        episodes=episodes,
        memory_size_start=memory_size_start,
        incomplete=incomplete,
        abort_reason=abort_reason,
        reflection=reflection_totals,
        reflection_failures=reflection_failures,
    )


# Artifact writers -----------------------------------------------------------

def write_stats(result: ExperimentResult, path) -> None:
    payload = result.stats.to_dict()
    if result.incomplete:
        payload["incomplete"] = True
        payload["abort_reason"] = result.abort_reason
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def write_episode_traces(result: ExperimentResult, path) -> None:
    """episodes.jsonl: one row per decision frame across the whole batch."""
    with open(path, "w", encoding="utf-8") as fh:
        for episode in result.episodes:
            for record in episode.records:
                row = {
                    "episode": episode.episode_id,
                    "seed": episode.seed,
                }
                row.update(
                    frame_record(record.frame, record.observation, record.action,
                                 record.events)
                )
                fh.write(json.dumps(row, separators=(",", ":")) + "\n")


def write_decisions(result: ExperimentResult, path) -> None:
    """decisions.jsonl: prompts, replies and retrieval metadata per frame."""
    with open(path, "w", encoding="utf-8") as fh:
        for episode in result.episodes:
            for record in episode.records:
                row = {"episode": episode.episode_id, "seed": episode.seed}
                row.update(decision_dict(record))
                fh.write(json.dumps(row, separators=(",", ":")) + "\n")


def write_summary_csv(result: ExperimentResult, path) -> None:
    stats = result.stats
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["label", "k", "memory_size", "min", "q1", "median", "q3", "max", "sr"]
        )
        writer.writerow(
            [
                stats.label,
                result.config.shots,
                result.memory_size_start,
                stats.min,
                stats.q1,
                stats.median,
                stats.q3,
                stats.max,
                stats.success_rate,
            ]
        )


def write_outputs(result: ExperimentResult, out_dir) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "stats": os.path.join(out_dir, "stats.json"),
        "episodes": os.path.join(out_dir, "episodes.jsonl"),
        "decisions": os.path.join(out_dir, "decisions.jsonl"),
        "summary": os.path.join(out_dir, "summary.csv"),
    }
    write_stats(result, paths["stats"])
    write_episode_traces(result, paths["episodes"])
    write_decisions(result, paths["decisions"])
    write_summary_csv(result, paths["summary"])
    return paths
