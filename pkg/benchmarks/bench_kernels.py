"""Compare the compiled and pure-numpy frame kernels.

Runs identical seeded rollouts through both implementations, checks the
states stay bit-identical, and reports per-frame timings.

Usage: python3 benchmarks/bench_kernels.py [--frames 200] [--repeat 5]
"""

from __future__ import annotations

import argparse
import statistics
import time

import numpy as np

from memdrive import kernels
from memdrive.sim_core import EnvConfig, MetaAction, spawn_traffic, step_env


def rollout(config: EnvConfig, frames: int, use_numba: bool):
    saved = kernels.advance_frame
    kernels.advance_frame = (
        kernels.advance_frame_numba if use_numba else kernels.advance_frame_numpy
    )
    try:
        world = spawn_traffic(config)
        actions = [MetaAction.IDLE, MetaAction.FASTER, MetaAction.LANE_LEFT,
                   MetaAction.IDLE, MetaAction.SLOWER]
        start = time.perf_counter()
        for frame in range(frames):
            if world.collided:
                break
            world, _ = step_env(world, actions[frame % len(actions)])
        elapsed = time.perf_counter() - start
        return world, elapsed
    finally:
        kernels.advance_frame = saved


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--frames", type=int, default=200)
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--lanes", type=int, default=4)
    parser.add_argument("--density", type=float, default=2.0)
    args = parser.parse_args()

    config = EnvConfig(lanes=args.lanes, density=args.density, seed=42,
                       max_frames=args.frames)
    print(f"vehicles: {config.npc_count + 1}, frames: {args.frames}, "
          f"repeats: {args.repeat}")

    if not kernels.HAS_NUMBA:
        print("numba unavailable; timing the numpy path only")

    # correctness first: both paths must land on the same state
    w_np, _ = rollout(config, args.frames, use_numba=False)
    if kernels.HAS_NUMBA:
        w_nb, _ = rollout(config, args.frames, use_numba=True)
        same = (
            np.array_equal(w_np.pos, w_nb.pos)
            and np.array_equal(w_np.speed, w_nb.speed)
            and np.array_equal(w_np.lane, w_nb.lane)
            and np.array_equal(w_np.lat, w_nb.lat)
            and w_np.collided == w_nb.collided
        )
        print(f"states bit-identical: {same}")
        if not same:
            return 1
        rollout(config, 3, use_numba=True)  # warm the JIT cache

    results = {}
    paths = [("numpy", False)] + ([("numba", True)] if kernels.HAS_NUMBA else [])
    for name, use_numba in paths:
        times = []
        for _ in range(args.repeat):
            _, elapsed = rollout(config, args.frames, use_numba)
            times.append(elapsed)
        per_frame = statistics.median(times) / args.frames * 1e6
        results[name] = per_frame
        print(f"{name:>6}: median {statistics.median(times)*1e3:8.2f} ms total, "
              f"{per_frame:8.2f} us/frame")

    if len(results) == 2:
        print(f"speedup (numpy/numba): {results['numpy'] / results['numba']:.2f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
