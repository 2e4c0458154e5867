"""Experience memory keyed by scene embeddings.

A store is a flat list of experiences, each holding the embedding key of
its scene description, the description itself, the reasoning that was
followed, and the action that reasoning ends in.  Recall is exact cosine
similarity over every key: stores stay small (tens to hundreds of
entries), so there is nothing to gain from approximate indexes, and
exactness keeps retrieval reproducible.

Persistence is JSON Lines: a header object {"schema": 1, "dim": D}
followed by one record per experience, vectors stored as plain number
lists so files round trip exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field
from datetime import datetime, timezone
from typing import Callable, List, Optional

import numpy as np

from .gateway import DecodeError, decode_decision
from .sim_core import MetaAction

SCHEMA_VERSION = 1
KINDS = ("seed", "success", "correction")
SOURCES = ("sim", "external")


class MemoryFormatError(ValueError):
    """A memory file or record violates the schema."""


def now_rfc3339() -> str:
    return datetime.now(timezone.utc).isoformat()


@dataclass
class Experience:
    id: str
    key: np.ndarray
    description: str
    reasoning: str
    action: MetaAction
    kind: str = "success"
    created_at: str = ""
    source: str = "sim"


@dataclass
class MemoryStore:
    dim: int
    experiences: List[Experience] = dc_field(default_factory=list)
    # Replacement history: {"id": old, "superseded_by": new}.
    audit: List[dict] = dc_field(default_factory=list)

    def __len__(self) -> int:
        return len(self.experiences)


@dataclass(frozen=True)
class RecallResult:
    experience: Experience
    similarity: float


def init_store(dim: int) -> MemoryStore:
    if dim < 1:
        raise MemoryFormatError("dim must be positive")
    return MemoryStore(dim=dim)


def _validate(store: MemoryStore, exp: Experience) -> Experience:
    # Canonical whitespace: descriptions match by exact equality and feed
    # the embedder, so surrounding blanks must never distinguish records.
    exp.description = exp.description.strip()
    exp.reasoning = exp.reasoning.strip()
    key = np.asarray(exp.key, dtype=np.float64)
    if key.ndim != 1 or key.shape[0] != store.dim:
        raise MemoryFormatError(
            f"experience {exp.id!r}: key length {key.shape} does not match "
            f"store dim {store.dim}"
        )
    if exp.kind not in KINDS:
        raise MemoryFormatError(f"experience {exp.id!r}: unknown kind {exp.kind!r}")
    if exp.source not in SOURCES:
        raise MemoryFormatError(f"experience {exp.id!r}: unknown source {exp.source!r}")
    action = MetaAction(exp.action)
    try:
        decoded = decode_decision(exp.reasoning)
    except DecodeError as exc:
        raise MemoryFormatError(
            f"experience {exp.id!r}: reasoning has no decision line ({exc})"
        ) from None
    if decoded is not action:
        raise MemoryFormatError(
            f"experience {exp.id!r}: reasoning decodes to {decoded.value}, "
            f"action field says {action.value}"
        )
    exp.key = key
    exp.action = action
    return exp


def store_experience(store: MemoryStore, exp: Experience) -> Experience:
    """Insert or replace by exact description match.

    A new description appends; a known one updates that slot in place
    (insertion order, and with it recall tie breaking, is preserved) and
    the replaced id goes to the audit trail.  Duplicate ids across
    different descriptions are rejected.
    """
    exp = _validate(store, exp)
    slot = None
    for i, old in enumerate(store.experiences):
        if old.description == exp.description:
            slot = i
        elif old.id == exp.id:
            raise MemoryFormatError(
                f"id {exp.id!r} already used by a different experience"
            )
    if slot is None:
        store.experiences.append(exp)
    else:
        replaced = store.experiences[slot]
        if replaced.id != exp.id:
            store.audit.append({"id": replaced.id, "superseded_by": exp.id})
        store.experiences[slot] = exp
    return exp


def recall(store: MemoryStore, query: np.ndarray, k: int) -> List[RecallResult]:
    """Top-k most similar experiences by exact cosine similarity.

    Sorted most similar first; equal similarities keep insertion order.
    k of zero returns nothing, k beyond the store size returns everything.
    """
    if k < 0:
        raise ValueError("k must be non-negative")
    query = np.asarray(query, dtype=np.float64)
    if query.ndim != 1 or query.shape[0] != store.dim:
        raise MemoryFormatError(
            f"query length {query.shape} does not match store dim {store.dim}"
        )
    if k == 0 or not store.experiences:
        return []
    # One np.dot per key, not a matrix product: BLAS gemv rounds rows
    # differently by position, which would break exact ties between
    # identical keys. The scalar path is position-independent.
    qn = float(np.linalg.norm(query))
    sims = np.empty(len(store.experiences), dtype=np.float64)
    for i, e in enumerate(store.experiences):
        denom = float(np.linalg.norm(e.key)) * qn
        sims[i] = float(np.dot(e.key, query)) / denom if denom > 0.0 else 0.0
    order = np.argsort(-sims, kind="stable")[:k]
    return [
        RecallResult(store.experiences[int(i)], float(sims[int(i)])) for i in order
    ]


def memory_stats(store: MemoryStore) -> dict:
    counts = {kind: 0 for kind in KINDS}
    for e in store.experiences:
        counts[e.kind] += 1
    return {"size": len(store), "dim": store.dim, "by_kind": counts}


# Persistence ----------------------------------------------------------------

def _record_dict(exp: Experience) -> dict:
    return {
        "id": exp.id,
        "description": exp.description,
        "reasoning": exp.reasoning,
        "action": exp.action.value,
        "kind": exp.kind,
        "created_at": exp.created_at,
        "source": exp.source,
        "key": [float(x) for x in exp.key],
    }


def save_store(store: MemoryStore, path) -> None:
    lines = [json.dumps({"schema": SCHEMA_VERSION, "dim": store.dim},
                        separators=(",", ":"))]
    for exp in store.experiences:
        lines.append(json.dumps(_record_dict(exp), separators=(",", ":")))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_store(path) -> MemoryStore:
    with open(path, "r", encoding="utf-8") as fh:
        raw_lines = [line for line in fh.read().splitlines() if line.strip()]
    if not raw_lines:
        raise MemoryFormatError(f"{path}: empty memory file")
    try:
        header = json.loads(raw_lines[0])
    except json.JSONDecodeError as exc:
        raise MemoryFormatError(f"{path}: bad header: {exc}") from None
    if not isinstance(header, dict) or "schema" not in header or "dim" not in header:
        raise MemoryFormatError(f"{path}: header must carry schema and dim")
    if header["schema"] != SCHEMA_VERSION:
        raise MemoryFormatError(
            f"{path}: schema {header['schema']} not supported "
            f"(this build reads {SCHEMA_VERSION})"
        )
    store = init_store(int(header["dim"]))
    for n, line in enumerate(raw_lines[1:], start=2):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise MemoryFormatError(f"{path}:{n}: bad record: {exc}") from None
        try:
            exp = Experience(
                id=str(rec["id"]),
                key=np.asarray(rec["key"], dtype=np.float64),
                description=str(rec["description"]),
                reasoning=str(rec["reasoning"]),
                action=MetaAction(rec["action"]),
                kind=str(rec["kind"]),
                created_at=str(rec["created_at"]),
                source=str(rec["source"]),
            )
        except (KeyError, ValueError) as exc:
            raise MemoryFormatError(f"{path}:{n}: {exc}") from None
        store_experience(store, exp)
    return store


def merge_store(store: MemoryStore, incoming: MemoryStore) -> int:
    """Fold the incoming experiences into store, replacement rules apply.
    Returns the number of records processed."""
    if incoming.dim != store.dim:
        raise MemoryFormatError(
            f"cannot merge dim {incoming.dim} records into a dim {store.dim} store"
        )
    for exp in incoming.experiences:
        store_experience(store, exp)
    return len(incoming.experiences)


# Plain text template format for human authored seed memories ---------------

TEMPLATE_BLOCK_SEP = "==="
TEMPLATE_FIELD_SEP = "---"


def parse_template(text: str) -> List[dict]:
    """Split a seed template into {description, reasoning} pairs.

    Format: description, a line "---", reasoning (ending with a decision
    line), with blocks separated by "===" lines.  Blank blocks are
    ignored so trailing separators are harmless.
    """
    pairs = []
    for block in text.split(f"\n{TEMPLATE_BLOCK_SEP}\n"):
        block = block.strip().removesuffix(TEMPLATE_BLOCK_SEP).strip()
        if not block:
            continue
        if f"\n{TEMPLATE_FIELD_SEP}\n" not in block:
            raise MemoryFormatError(
                "template block lacks the --- separator between description "
                "and reasoning"
            )
        desc, reasoning = block.split(f"\n{TEMPLATE_FIELD_SEP}\n", 1)
        pairs.append({"description": desc.strip(), "reasoning": reasoning.strip()})
    if not pairs:
        raise MemoryFormatError("template contains no experiences")
    return pairs


def format_template(store: MemoryStore) -> str:
    blocks = []
    for exp in store.experiences:
        blocks.append(
            f"{exp.description}\n{TEMPLATE_FIELD_SEP}\n{exp.reasoning}"
        )
    return f"\n{TEMPLATE_BLOCK_SEP}\n".join(blocks) + "\n"


def store_from_template(
    text: str,
    embedder,
    kind: str = "seed",
    source: str = "external",
    clock: Optional[Callable[[], str]] = None,
) -> MemoryStore:
    """Embed and load a plain text template into a fresh store."""
    clock = clock or now_rfc3339
    pairs = parse_template(text)
    probe = embedder.embed(pairs[0]["description"])
    store = init_store(int(probe.shape[0]))
    for i, pair in enumerate(pairs):
        key = probe if i == 0 else embedder.embed(pair["description"])
        exp = Experience(
            id=f"seed-{i + 1:03d}",
            key=key,
            description=pair["description"],
            reasoning=pair["reasoning"],
            action=decode_decision(pair["reasoning"]),
            kind=kind,
            created_at=clock(),
            source=source,
        )
        store_experience(store, exp)
    return store
