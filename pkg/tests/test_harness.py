"""Batch orchestration: scoring, quartiles, parallel evaluation,
sequential evolution and artifact files."""

import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from memdrive.gateway import (
    BackendSet,
    HashingEmbedder,
    ScriptedChatBackend,
    TransportError,
)
from memdrive.harness import (
    ExperimentConfig,
    compute_success_steps,
    quartile_stats,
    run_experiment,
    success_rate,
    summarize,
    write_outputs,
)
from memdrive.memory import load_store, memory_stats, save_store

from conftest import fake_episode


class TestQuartiles:
    def test_one_to_five(self):
        q = quartile_stats([1, 2, 3, 4, 5])
        assert q == {"min": 1.0, "q1": 2.0, "median": 3.0, "q3": 4.0,
                     "max": 5.0}

    def test_one_to_four_interpolates(self):
        q = quartile_stats([1, 2, 3, 4])
        assert q == {"min": 1.0, "q1": 1.75, "median": 2.5, "q3": 3.25,
                     "max": 4.0}

    def test_single_value(self):
        q = quartile_stats([7])
        assert set(q.values()) == {7.0}

    def test_empty_raises(self):
        with pytest.raises(ValueError):
            quartile_stats([])

    @given(st.lists(st.integers(0, 30), min_size=1, max_size=25),
           st.randoms())
    @settings(max_examples=100, deadline=None)
    def test_permutation_invariant(self, values, rnd):
        shuffled = list(values)
        rnd.shuffle(shuffled)
        assert quartile_stats(values) == quartile_stats(shuffled)


class TestSuccessRate:
    def test_seven_of_ten(self):
        ss = [30] * 7 + [5, 12, 0]
        assert success_rate(ss, 30) == 0.7

    def test_empty_raises(self):
        with pytest.raises(ValueError):
            success_rate([], 30)

    @given(st.lists(st.integers(0, 30), min_size=1, max_size=40))
    @settings(max_examples=100, deadline=None)
    def test_rate_times_count_is_integral(self, ss):
        sr = success_rate(ss, 30)
        assert 0.0 <= sr <= 1.0
        assert round(sr * len(ss), 9) == int(round(sr * len(ss)))


class TestScoring:
    def test_completed_episode_scores_full(self):
        ep = fake_episode("e", ["IDLE"] * 30)
        assert compute_success_steps(ep) == 30

    def test_collision_frame_does_not_count(self):
        ep = fake_episode("e", ["IDLE"] * 10, terminated_by="collision")
        assert compute_success_steps(ep) == 9

    def test_decoder_failure_frame_does_not_count(self):
        ep = fake_episode("e", ["IDLE"] * 10,
                          terminated_by="decoder_failure")
        assert compute_success_steps(ep) == 9

    def test_summarize_collects_everything(self):
        eps = [fake_episode(f"e{i}", ["IDLE"] * n)
               for i, n in enumerate([30, 30, 12])]
        stats = summarize("lbl", eps, max_frames=30)
        assert stats.ss_values == [30, 30, 12]
        assert stats.label == "lbl"
        assert stats.success_rate == pytest.approx(2 / 3)
        assert stats.to_dict()["max"] == 30.0
        assert list(stats.to_dict()) == [
            "ss_values", "min", "q1", "median", "q3", "max",
            "success_rate", "label",
        ]


class TestExperimentConfig:
    def test_label_defaults_to_environment(self):
        cfg = ExperimentConfig(lanes=5, density=3.0, seeds=(1,))
        assert cfg.resolved_label == "lane-5-density-3"
        assert ExperimentConfig(seeds=(1,), label="x").resolved_label == "x"

    def test_env_for_carries_settings(self):
        cfg = ExperimentConfig(lanes=2, density=1.5, seeds=(4, 5),
                               max_frames=7)
        env = cfg.env_for(5)
        assert (env.lanes, env.density, env.seed, env.max_frames) == \
            (2, 1.5, 5, 7)

    @pytest.mark.parametrize("kwargs", [
        dict(mode="train"), dict(seeds=()), dict(shots=-1),
        dict(max_parallel=0),
    ])
    def test_rejects_bad_values(self, kwargs):
        base = dict(seeds=(0,))
        base.update(kwargs)
        with pytest.raises(ValueError):
            ExperimentConfig(**base)


class TestRunExperiment:
    def test_evaluate_is_order_stable_and_read_only(self, seed_store,
                                                    heuristic_backends):
        cfg = dict(lanes=4, density=2.0, seeds=(0, 1, 2, 3),
                   max_frames=6, shots=2, mode="evaluate")
        serial = run_experiment(ExperimentConfig(max_parallel=1, **cfg),
                                seed_store, heuristic_backends)
        parallel = run_experiment(ExperimentConfig(max_parallel=4, **cfg),
                                  seed_store, heuristic_backends)
        assert serial.stats.ss_values == parallel.stats.ss_values
        assert [e.episode_id for e in parallel.episodes] == \
            ["ep-000", "ep-001", "ep-002", "ep-003"]
        assert len(seed_store) == 5
        assert parallel.memory_size_start == 5

    def test_evolve_grows_and_saves_memory(self, tmp_path, seed_store,
                                           heuristic_backends):
        mem = tmp_path / "memory.jsonl"
        cfg = ExperimentConfig(lanes=4, density=0.0, seeds=(0, 1),
                               max_frames=5, shots=2, mode="evolve")
        result = run_experiment(cfg, seed_store, heuristic_backends,
                                memory_path=str(mem))
        assert result.memory_size_start == 5
        assert len(seed_store) > 5
        reloaded = load_store(mem)
        assert memory_stats(reloaded) == memory_stats(seed_store)
        assert result.reflection.success_added == len(seed_store) - 5

    def test_transport_failure_flags_incomplete(self, seed_store):
        # two clean free-road episodes, then the backend goes dark
        replies = ["open road. decision: IDLE"] * 4
        chat = ScriptedChatBackend(replies, repeat_last=False)
        backends = BackendSet(chat=chat, embedder=HashingEmbedder())
        cfg = ExperimentConfig(lanes=4, density=0.0, seeds=(0, 1, 2, 3),
                               max_frames=2, shots=0, mode="evaluate",
                               max_parallel=1)
        result = run_experiment(cfg, seed_store, backends)
        assert result.incomplete
        assert result.abort_reason
        assert len(result.episodes) == 2
        assert result.stats.ss_values == [2, 2]

    def test_nothing_finished_raises(self, seed_store):
        chat = ScriptedChatBackend(["x"], repeat_last=False)
        backends = BackendSet(chat=chat, embedder=HashingEmbedder())
        cfg = ExperimentConfig(lanes=4, density=0.0, seeds=(0,),
                               max_frames=3, shots=0, mode="evaluate")
        with pytest.raises(TransportError):
            run_experiment(cfg, seed_store, backends)


class TestArtifacts:
    @pytest.fixture
    def result(self, seed_store, heuristic_backends):
        cfg = ExperimentConfig(lanes=4, density=2.0, seeds=(0, 1),
                               max_frames=4, shots=2, mode="evaluate")
        return run_experiment(cfg, seed_store, heuristic_backends)

    def test_file_set_and_stats_shape(self, tmp_path, result):
        paths = write_outputs(result, tmp_path / "out")
        stats = json.loads(open(paths["stats"]).read())
        assert stats["label"] == "lane-4-density-2"
        assert "incomplete" not in stats
        assert stats["ss_values"] == result.stats.ss_values

    def test_episode_rows_cover_all_frames(self, tmp_path, result):
        paths = write_outputs(result, tmp_path / "out")
        rows = [json.loads(l) for l in open(paths["episodes"])]
        assert len(rows) == sum(len(e.records) for e in result.episodes)
        assert rows[0]["episode"] == "ep-000"
        assert {"frame", "time", "ego", "others", "action",
                "events"} <= set(rows[0])

    def test_decision_rows_have_prompts(self, tmp_path, result):
        paths = write_outputs(result, tmp_path / "out")
        row = json.loads(open(paths["decisions"]).readline())
        assert row["prompt"]["user"].startswith("You are driving on")
        assert len(row["recalled"]) == 2

    def test_summary_csv_columns(self, tmp_path, result):
        paths = write_outputs(result, tmp_path / "out")
        with open(paths["summary"]) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["label", "k", "memory_size", "min", "q1",
                           "median", "q3", "max", "sr"]
        assert rows[1][0] == "lane-4-density-2"
        assert rows[1][1] == "2"
        assert rows[1][2] == "5"

    def test_incomplete_flag_lands_in_stats_json(self, tmp_path, seed_store):
        replies = ["cruise. decision: IDLE"] * 2
        chat = ScriptedChatBackend(replies, repeat_last=False)
        backends = BackendSet(chat=chat, embedder=HashingEmbedder())
        cfg = ExperimentConfig(lanes=4, density=0.0, seeds=(0, 1),
                               max_frames=2, shots=0, mode="evaluate",
                               max_parallel=1)
        result = run_experiment(cfg, seed_store, backends)
        paths = write_outputs(result, tmp_path / "out")
        stats = json.loads(open(paths["stats"]).read())
        assert stats["incomplete"] is True
        assert stats["abort_reason"]


class TestMemoryFileUntouchedInEvaluate:
    def test_hash_stable(self, tmp_path, seed_store, heuristic_backends):
        import hashlib

        mem = tmp_path / "mem.jsonl"
        save_store(seed_store, mem)
        before = hashlib.sha256(mem.read_bytes()).hexdigest()
        cfg = ExperimentConfig(lanes=4, density=0.0, seeds=(0, 1),
                               max_frames=3, shots=2, mode="evaluate")
        run_experiment(cfg, load_store(mem), heuristic_backends)
        after = hashlib.sha256(mem.read_bytes()).hexdigest()
        assert before == after
