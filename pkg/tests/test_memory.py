"""Experience store: validation, replacement, exact recall against a
brute-force oracle, file round trips and the authoring template."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from memdrive.gateway import HashingEmbedder
from memdrive.memory import (
    Experience,
    MemoryFormatError,
    MemoryStore,
    format_template,
    init_store,
    load_store,
    memory_stats,
    merge_store,
    parse_template,
    recall,
    save_store,
    store_experience,
    store_from_template,
)
from memdrive.sim_core import MetaAction

DIM = 8


def unit(vec):
    arr = np.asarray(vec, dtype=np.float64)
    return arr / np.linalg.norm(arr)


def make_exp(i, desc=None, action="IDLE", key=None, kind="seed",
             source="external", reasoning=None):
    rng = np.random.default_rng(1000 + i)
    return Experience(
        id=f"x-{i:03d}",
        key=key if key is not None else unit(rng.normal(size=DIM)),
        description=desc if desc is not None else f"scene number {i}",
        reasoning=reasoning if reasoning is not None
        else f"Looked around carefully.\ndecision: {action}",
        action=MetaAction(action),
        kind=kind,
        source=source,
        created_at="2026-01-01T00:00:00Z",
    )


@pytest.fixture
def store():
    s = init_store(DIM)
    for i in range(5):
        store_experience(s, make_exp(i))
    return s


def brute_force(store: MemoryStore, query, k):
    query = np.asarray(query, dtype=np.float64)
    sims = []
    for e in store.experiences:
        denom = float(np.linalg.norm(e.key)) * float(np.linalg.norm(query))
        sims.append(float(e.key @ query) / denom if denom > 0 else 0.0)
    order = sorted(range(len(sims)), key=lambda i: (-sims[i], i))[:k]
    return [(store.experiences[i].id, sims[i]) for i in order]


class TestValidation:
    def test_key_dim_must_match(self, store):
        with pytest.raises(MemoryFormatError):
            store_experience(store, make_exp(99, key=np.ones(DIM + 1)))

    @pytest.mark.parametrize("field,value", [("kind", "mystery"),
                                             ("source", "dreams")])
    def test_vocabulary_is_closed(self, store, field, value):
        with pytest.raises(MemoryFormatError):
            store_experience(store, make_exp(99, **{field: value}))

    def test_reasoning_must_carry_decision(self, store):
        with pytest.raises(MemoryFormatError):
            store_experience(
                store, make_exp(99, reasoning="it seemed fine at the time")
            )

    def test_reasoning_must_agree_with_action(self, store):
        with pytest.raises(MemoryFormatError):
            store_experience(
                store,
                make_exp(99, action="FASTER",
                         reasoning="thinking.\ndecision: SLOWER"),
            )

    def test_whitespace_is_canonicalized(self, store):
        exp = make_exp(99, desc="  padded scene  ",
                       reasoning="  why not.\ndecision: IDLE \n")
        stored = store_experience(store, exp)
        assert stored.description == "padded scene"
        assert stored.reasoning.startswith("why not.")


class TestReplacement:
    def test_new_description_appends(self, store):
        n = len(store)
        store_experience(store, make_exp(50))
        assert len(store) == n + 1

    def test_same_description_replaces_in_slot(self, store):
        first_ids = [e.id for e in store.experiences]
        replacement = make_exp(50, desc="scene number 2", action="SLOWER",
                               reasoning="too close now.\ndecision: SLOWER")
        store_experience(store, replacement)
        assert len(store) == len(first_ids)
        assert store.experiences[2].id == "x-050"
        assert store.experiences[2].action is MetaAction.SLOWER
        assert store.audit[-1] == {"id": "x-002", "superseded_by": "x-050"}

    def test_self_update_leaves_no_audit_entry(self, store):
        same = make_exp(2, desc="scene number 2", action="FASTER",
                        reasoning="road is clear.\ndecision: FASTER")
        same.id = "x-002"
        store_experience(store, same)
        assert store.audit == []

    def test_duplicate_id_new_description_rejected(self, store):
        clash = make_exp(60, desc="a brand new scene")
        clash.id = "x-001"
        with pytest.raises(MemoryFormatError):
            store_experience(store, clash)

    def test_stats_count_kinds(self, store):
        store_experience(store, make_exp(70, kind="success", source="sim"))
        store_experience(store, make_exp(71, kind="correction", source="sim"))
        stats = memory_stats(store)
        assert stats["size"] == 7
        assert stats["by_kind"] == {"seed": 5, "success": 1, "correction": 1}


class TestRecall:
    def test_matches_brute_force_on_random_queries(self):
        rng = np.random.default_rng(42)
        s = init_store(DIM)
        for i in range(50):
            store_experience(s, make_exp(i))
        for qi in range(20):
            q = rng.normal(size=DIM)
            for k in (1, 3, 5, 50):
                got = [(r.experience.id, r.similarity) for r in recall(s, q, k)]
                want = brute_force(s, q, k)
                assert [g[0] for g in got] == [w[0] for w in want]
                np.testing.assert_allclose(
                    [g[1] for g in got], [w[1] for w in want], atol=1e-12
                )

    def test_exact_match_ranks_first(self, store):
        target = store.experiences[3]
        got = recall(store, target.key, 2)
        assert got[0].experience.id == target.id
        assert got[0].similarity == pytest.approx(1.0)

    def test_ties_keep_insertion_order(self):
        s = init_store(DIM)
        shared = unit(np.arange(1, DIM + 1))
        for i in range(3):
            store_experience(s, make_exp(i, key=shared.copy()))
        got = recall(s, shared, 3)
        assert [r.experience.id for r in got] == ["x-000", "x-001", "x-002"]

    def test_k_zero_and_empty_store(self, store):
        assert recall(store, np.ones(DIM), 0) == []
        assert recall(init_store(DIM), np.ones(DIM), 3) == []

    def test_k_beyond_size_returns_all(self, store):
        assert len(recall(store, np.ones(DIM), 99)) == len(store)

    def test_rejects_bad_queries(self, store):
        with pytest.raises(MemoryFormatError):
            recall(store, np.ones(DIM + 2), 3)
        with pytest.raises(ValueError):
            recall(store, np.ones(DIM), -1)

    def test_zero_query_returns_zero_similarity(self, store):
        got = recall(store, np.zeros(DIM), 3)
        assert all(r.similarity == 0.0 for r in got)

    @given(st.integers(0, 2**32 - 1), st.integers(1, 12))
    @settings(max_examples=50, deadline=None)
    def test_order_always_matches_oracle(self, seed, k):
        rng = np.random.default_rng(seed)
        s = init_store(DIM)
        for i in range(12):
            store_experience(s, make_exp(i))
        q = rng.normal(size=DIM)
        got = [r.experience.id for r in recall(s, q, k)]
        want = [w[0] for w in brute_force(s, q, k)]
        assert got == want


class TestPersistence:
    def test_round_trip_is_field_identical(self, tmp_path, store):
        path = tmp_path / "mem.jsonl"
        save_store(store, path)
        loaded = load_store(path)
        assert loaded.dim == store.dim
        assert len(loaded) == len(store)
        for a, b in zip(store.experiences, loaded.experiences):
            assert a.id == b.id
            assert a.description == b.description
            assert a.reasoning == b.reasoning
            assert a.action is b.action
            assert a.kind == b.kind
            assert a.source == b.source
            assert a.created_at == b.created_at
            np.testing.assert_array_equal(a.key, b.key)

    def test_header_is_first_line(self, tmp_path, store):
        path = tmp_path / "mem.jsonl"
        save_store(store, path)
        first = path.read_text().splitlines()[0]
        assert first == f'{{"schema":1,"dim":{DIM}}}'

    def test_rejects_unknown_schema(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"schema":99,"dim":8}\n')
        with pytest.raises(MemoryFormatError):
            load_store(path)

    def test_bad_record_reports_line_number(self, tmp_path, store):
        path = tmp_path / "mem.jsonl"
        save_store(store, path)
        lines = path.read_text().splitlines()
        lines[2] = "{not json"
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(MemoryFormatError, match=":3"):
            load_store(path)

    def test_empty_file_rejected(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        with pytest.raises(MemoryFormatError):
            load_store(path)

    def test_merge_applies_replacement(self, tmp_path, store):
        other = init_store(DIM)
        store_experience(other, make_exp(80))
        store_experience(
            other, make_exp(81, desc="scene number 0", action="SLOWER",
                            reasoning="tight gap.\ndecision: SLOWER")
        )
        n = merge_store(store, other)
        assert n == 2
        assert len(store) == 6  # one new, one replaced
        assert store.experiences[0].id == "x-081"

    def test_merge_rejects_dim_mismatch(self, store):
        with pytest.raises(MemoryFormatError):
            merge_store(store, init_store(DIM + 1))


class TestTemplate:
    TEMPLATE = (
        "A quiet road scene.\n---\nNothing nearby.\ndecision: IDLE\n===\n"
        "A crowded scene.\n---\nLeader is close.\ndecision: SLOWER\n"
    )

    def test_parse_pairs(self):
        pairs = parse_template(self.TEMPLATE)
        assert [p["description"] for p in pairs] == [
            "A quiet road scene.", "A crowded scene.",
        ]

    def test_parse_rejects_missing_separator(self):
        with pytest.raises(MemoryFormatError):
            parse_template("just one line of text")

    def test_parse_rejects_empty(self):
        with pytest.raises(MemoryFormatError):
            parse_template("\n===\n")

    def test_store_from_template_embeds_and_decodes(self):
        emb = HashingEmbedder(dim=32)
        s = store_from_template(self.TEMPLATE, emb,
                                clock=lambda: "2026-02-02T00:00:00Z")
        assert s.dim == 32
        assert [e.id for e in s.experiences] == ["seed-001", "seed-002"]
        assert s.experiences[1].action is MetaAction.SLOWER
        assert s.experiences[0].created_at == "2026-02-02T00:00:00Z"
        np.testing.assert_array_equal(
            s.experiences[0].key, emb.embed("A quiet road scene.")
        )

    def test_format_parse_round_trip(self):
        emb = HashingEmbedder(dim=32)
        s = store_from_template(self.TEMPLATE, emb)
        again = parse_template(format_template(s))
        assert again == parse_template(self.TEMPLATE)

    def test_packaged_seeds_load(self, seed_store):
        stats = memory_stats(seed_store)
        assert stats["size"] == 5
        assert stats["by_kind"]["seed"] == 5
        actions = {e.action for e in seed_store.experiences}
        assert actions == set(MetaAction)
