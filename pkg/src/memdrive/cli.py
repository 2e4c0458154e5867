"""Command line front end.

Subcommands:
  run     drive a batch of episodes and write result artifacts
  memory  create, inspect, export or merge experience files
  stats   recompute batch statistics from a saved trace file
"""

from __future__ import annotations

import argparse
import json
import sys
from importlib.resources import files
from typing import List, Optional

from .descriptor import DEFAULT_INTENTION
from .gateway import (
    BackendConfig,
    BackendSet,
    GatewayError,
    HashingEmbedder,
    HeuristicChatBackend,
    RemoteChatBackend,
    RemoteEmbedder,
    DEFAULT_EMBED_DIM,
)
from .harness import (
    ExperimentConfig,
    quartile_stats,
    run_experiment,
    success_rate,
    write_outputs,
)
from .memory import (
    MemoryFormatError,
    format_template,
    init_store,
    load_store,
    memory_stats,
    merge_store,
    save_store,
    store_from_template,
)

SEED_TEMPLATE_ASSET = "seed_memory_v1.txt"


def _seed_template_text() -> str:
    return (files("memdrive") / "assets" / SEED_TEMPLATE_ASSET).read_text(
        encoding="utf-8"
    )


def _parse_seeds(args) -> List[int]:
    if args.seeds:
        return [int(tok) for tok in args.seeds.split(",") if tok.strip()]
    return list(range(args.seed, args.seed + args.episodes))


def _build_backends(args) -> BackendSet:
    if args.backend == "heuristic":
        return BackendSet(chat=HeuristicChatBackend(),
                          embedder=HashingEmbedder(dim=args.dim))
    if not args.model:
        raise SystemExit("error: --backend remote requires --model")

    def remote_config(model: str) -> BackendConfig:
        kwargs = dict(kind="remote", model_name=model,
                      api_key_env=args.api_key_env)
        if args.api_base:
            kwargs["base_url"] = args.api_base
        return BackendConfig(**kwargs)

    chat = RemoteChatBackend(remote_config(args.model))
    corrector = None
    if args.reflect_model and args.reflect_model != args.model:
        corrector = RemoteChatBackend(remote_config(args.reflect_model))
    if args.embed_model:
        embedder = RemoteEmbedder(remote_config(args.embed_model),
                                  model=args.embed_model)
    else:
        embedder = HashingEmbedder(dim=args.dim)
    return BackendSet(chat=chat, embedder=embedder, corrector=corrector)


def _load_or_seed_store(args, backends: BackendSet):
    import os

    if args.memory and os.path.exists(args.memory):
        return load_store(args.memory)
    return store_from_template(_seed_template_text(), backends.embedder)


def cmd_run(args) -> int:
    backends = _build_backends(args)
    store = _load_or_seed_store(args, backends)
    seeds = _parse_seeds(args)
    config = ExperimentConfig(
        lanes=args.lanes,
        density=args.density,
        seeds=tuple(seeds),
        max_frames=args.max_frames,
        shots=args.shots,
        intention=args.intention,
        mode=args.mode,
        max_parallel=args.parallel,
    )
    memory_path: Optional[str] = None
    if config.mode == "evolve":
        if args.memory:
            memory_path = args.memory
        elif args.out:
            import os

            memory_path = os.path.join(args.out, "memory.jsonl")
            os.makedirs(args.out, exist_ok=True)
    result = run_experiment(config, store, backends, memory_path=memory_path)
    if args.out:
        write_outputs(result, args.out)
    payload = result.stats.to_dict()
    if result.incomplete:
        payload["incomplete"] = True
        payload["abort_reason"] = result.abort_reason
    json.dump(payload, sys.stdout, indent=2)
    sys.stdout.write("\n")
    return 1 if result.incomplete else 0


def _is_store_file(path) -> bool:
    # store files lead with a schema header, templates are plain text
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            try:
                head = json.loads(line)
            except json.JSONDecodeError:
                return False
            return isinstance(head, dict) and "schema" in head
    return False


def cmd_memory(args) -> int:
    if args.memory_cmd == "init":
        embedder = HashingEmbedder(dim=args.dim)
        if args.template:
            with open(args.template, "r", encoding="utf-8") as fh:
                text = fh.read()
        else:
            text = _seed_template_text()
        store = store_from_template(text, embedder)
        save_store(store, args.out)
        print(f"wrote {len(store)} experiences to {args.out}")
        return 0
    if args.memory_cmd == "stats":
        store = load_store(args.memory)
        json.dump(memory_stats(store), sys.stdout, indent=2)
        sys.stdout.write("\n")
        return 0
    if args.memory_cmd == "export":
        store = load_store(args.memory)
        text = format_template(store)
        if args.out:
            with open(args.out, "w", encoding="utf-8") as fh:
                fh.write(text)
        else:
            sys.stdout.write(text)
        return 0
    if args.memory_cmd == "import":
        store = load_store(args.memory)
        if _is_store_file(args.source):
            incoming = load_store(args.source)
        else:
            with open(args.source, "r", encoding="utf-8") as fh:
                incoming = store_from_template(fh.read(),
                                               HashingEmbedder(dim=store.dim))
        added = merge_store(store, incoming)
        save_store(store, args.memory)
        print(f"merged {added} experiences into {args.memory} "
              f"(now {len(store)})")
        return 0
    raise SystemExit(f"unknown memory command {args.memory_cmd!r}")


def cmd_stats(args) -> int:
    by_episode: dict = {}
    with open(args.episodes, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            frames = by_episode.setdefault(row["episode"], [])
            frames.append(row)
    if not by_episode:
        raise SystemExit("error: trace file holds no frames")
    ss_values = []
    for frames in by_episode.values():
        ss_values.append(
            sum(1 for r in frames
                if r.get("events") is not None and not r["events"]["collision"])
        )
    quart = quartile_stats(ss_values)
    payload = {
        "ss_values": ss_values,
        **quart,
        "success_rate": success_rate(ss_values, args.max_frames),
        "label": args.label,
    }
    json.dump(payload, sys.stdout, indent=2)
    sys.stdout.write("\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="memdrive",
        description="Memory-augmented highway driving experiments.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run a batch of episodes")
    run_p.add_argument("--lanes", type=int, default=4)
    run_p.add_argument("--density", type=float, default=2.0)
    run_p.add_argument("--seed", type=int, default=0,
                       help="base seed; episode i uses seed+i")
    run_p.add_argument("--seeds", type=str, default=None,
                       help="explicit comma separated seed list (overrides "
                            "--seed/--episodes)")
    run_p.add_argument("--episodes", type=int, default=1)
    run_p.add_argument("--max-frames", type=int, default=30)
    run_p.add_argument("--shots", "-k", type=int, default=3,
                       help="recalled experiences per prompt")
    run_p.add_argument("--memory", type=str, default=None,
                       help="experience file; missing file starts from the "
                            "built-in seeds")
    run_p.add_argument("--mode", choices=["evaluate", "evolve"],
                       default="evaluate")
    run_p.add_argument("--backend", choices=["heuristic", "remote"],
                       default="heuristic")
    run_p.add_argument("--api-base", type=str, default=None)
    run_p.add_argument("--model", type=str, default=None)
    run_p.add_argument("--reflect-model", type=str, default=None)
    run_p.add_argument("--embed-model", type=str, default=None)
    run_p.add_argument("--api-key-env", type=str, default="OPENAI_API_KEY")
    run_p.add_argument("--intention", type=str, default=DEFAULT_INTENTION)
    run_p.add_argument("--out", type=str, default=None,
                       help="directory for stats.json, episodes.jsonl, "
                            "decisions.jsonl and summary.csv")
    run_p.add_argument("--parallel", type=int, default=4)
    run_p.add_argument("--dim", type=int, default=DEFAULT_EMBED_DIM,
                       help="hashing embedder dimension")
    run_p.set_defaults(func=cmd_run)

    mem_p = sub.add_parser("memory", help="manage experience files")
    mem_sub = mem_p.add_subparsers(dest="memory_cmd", required=True)

    init_p = mem_sub.add_parser("init", help="build a store from a template")
    init_p.add_argument("--out", type=str, required=True)
    init_p.add_argument("--template", type=str, default=None,
                        help="plain-text experience template (default: "
                             "built-in seeds)")
    init_p.add_argument("--dim", type=int, default=DEFAULT_EMBED_DIM)
    init_p.set_defaults(func=cmd_memory)

    stats_mp = mem_sub.add_parser("stats", help="summarize a store")
    stats_mp.add_argument("--memory", type=str, required=True)
    stats_mp.set_defaults(func=cmd_memory)

    export_p = mem_sub.add_parser("export", help="write a store back out as "
                                                 "an editable template")
    export_p.add_argument("--memory", type=str, required=True)
    export_p.add_argument("--out", type=str, default=None)
    export_p.set_defaults(func=cmd_memory)

    import_p = mem_sub.add_parser("import", help="merge experiences from a "
                                                 "store or template file")
    import_p.add_argument("--memory", type=str, required=True)
    import_p.add_argument("--source", type=str, required=True)
    import_p.set_defaults(func=cmd_memory)

    stats_p = sub.add_parser("stats", help="recompute statistics from a "
                                           "trace file")
    stats_p.add_argument("--episodes", type=str, required=True,
                         help="episodes.jsonl from a previous run")
    stats_p.add_argument("--max-frames", type=int, default=30)
    stats_p.add_argument("--label", type=str, default="recomputed")
    stats_p.set_defaults(func=cmd_stats)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (GatewayError, MemoryFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
