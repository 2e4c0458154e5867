"""Numeric kernels for the per-frame physics advance.

Two interchangeable implementations of the hot inner loop live here: a
numba compiled scalar version and a vectorized pure numpy twin.  The twin
mirrors the compiled arithmetic operation for operation (same expression
shapes, same tie breaks, no reductions that could reassociate floating
point work), so both backends produce bit-identical trajectories.  Tests
assert that equality; the benchmark in benchmarks/bench_kernels.py
compares their speed.

Backend selection: the MEMDRIVE_NUMBA environment variable.  Unset or
truthy picks the compiled path when numba imports, "0"/"false"/"off"/"no"
forces the numpy path.  `ACTIVE_BACKEND` records the choice.

The MOBIL lane-change pass runs once per decision frame, far off the hot
path, so it has a single shared numpy implementation; keeping one copy
guarantees identical background-traffic decisions under either backend.
"""

from __future__ import annotations

import os

import numpy as np

from .params import (
    A_MAX,
    B_MAX,
    B_SAFE,
    DELTA_A_THRESHOLD,
    POLITENESS,
    S0,
    TWO_SQRT_AB,
    T_HEADWAY,
)

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba installed
    HAS_NUMBA = False


def _idm_vec(v, v_des, gap, dv):
    """Vectorized IDM acceleration, clamped to [-B_MAX, A_MAX].

    A non-positive finite gap means the bumpers already touch or overlap;
    that returns the hard braking floor outright.  An infinite gap encodes
    "no leader" and collapses the interaction term to zero.
    """
    vr = v / v_des
    vr2 = vr * vr
    free = 1.0 - vr2 * vr2
    blocked = gap <= 0.0
    gap_safe = np.where(blocked, 1.0, gap)
    s_star = S0 + v * T_HEADWAY + v * dv / TWO_SQRT_AB
    ratio = s_star / gap_safe
    a = A_MAX * (free - ratio * ratio)
    a = np.where(blocked, -B_MAX, a)
    return np.minimum(np.maximum(a, -B_MAX), A_MAX)


def _nearest_ahead(dpos, mask):
    """Index, center distance and presence of the closest masked vehicle ahead."""
    n = dpos.shape[0]
    d = np.where(mask & (dpos > 0.0), dpos, np.inf)
    j = np.argmin(d, axis=1)
    dist = d[np.arange(n), j]
    return j, dist, np.isfinite(dist)


def _nearest_behind(dpos, mask):
    """Like _nearest_ahead for the closest vehicle at or behind (dpos <= 0)."""
    n = dpos.shape[0]
    d = np.where(mask & (dpos <= 0.0), dpos, -np.inf)
    j = np.argmax(d, axis=1)
    dist = d[np.arange(n), j]
    return j, dist, np.isfinite(dist)


def mobil_pass(pos, speed, lane, v_des, length, lanes, allowed=None):
    """Simultaneous MOBIL evaluation for every vehicle.

    Reads the frame-start state only, so the outcome is independent of
    iteration order.  Returns a fresh lane_to array; entries equal lane
    where no change is warranted or where `allowed` is False.  The caller
    overrides the ego entry, index 0, with the commanded maneuver.

    Left changes are preferred: a right change wins only on strictly
    larger incentive.
    """
    n = pos.shape[0]
    dpos = pos[None, :] - pos[:, None]
    eye = np.eye(n, dtype=bool)
    same = (lane[None, :] == lane[:, None]) & ~eye

    cl_j, cl_d, cl_ok = _nearest_ahead(dpos, same)
    cf_j, cf_d, cf_ok = _nearest_behind(dpos, same)
    cl_gap = np.where(cl_ok, cl_d - 0.5 * (length + length[cl_j]), np.inf)
    cl_speed = np.where(cl_ok, speed[cl_j], 0.0)
    cf_gap = np.where(cf_ok, -cf_d - 0.5 * (length + length[cf_j]), np.inf)
    cf_speed = np.where(cf_ok, speed[cf_j], 0.0)
    cf_vdes = np.where(cf_ok, v_des[cf_j], 1.0)

    a_self_now = _idm_vec(speed, v_des, cl_gap, speed - cl_speed)
    # Old follower today, and after we vacate the slot between it and our
    # current leader.
    a_of_now = _idm_vec(cf_speed, cf_vdes, cf_gap, cf_speed - speed)
    a_of_after = _idm_vec(
        cf_speed, cf_vdes, cf_gap + length + cl_gap, cf_speed - cl_speed
    )
    of_gain = np.where(cf_ok, a_of_after - a_of_now, 0.0)

    gains = []
    oks = []
    for shift in (-1, 1):
        target = lane + shift
        valid = (target >= 0) & (target <= lanes - 1)
        tmask = (lane[None, :] == target[:, None]) & ~eye
        nl_j, nl_d, nl_ok = _nearest_ahead(dpos, tmask)
        nf_j, nf_d, nf_ok = _nearest_behind(dpos, tmask)
        nl_gap = np.where(nl_ok, nl_d - 0.5 * (length + length[nl_j]), np.inf)
        nl_speed = np.where(nl_ok, speed[nl_j], 0.0)
        nf_gap = np.where(nf_ok, -nf_d - 0.5 * (length + length[nf_j]), np.inf)
        nf_speed = np.where(nf_ok, speed[nf_j], 0.0)
        nf_vdes = np.where(nf_ok, v_des[nf_j], 1.0)

        a_self_new = _idm_vec(speed, v_des, nl_gap, speed - nl_speed)
        a_nf_after = _idm_vec(nf_speed, nf_vdes, nf_gap, nf_speed - speed)
        # The prospective follower currently trails the prospective leader
        # directly; nothing sits between them in the target lane.
        a_nf_now = _idm_vec(
            nf_speed, nf_vdes, nf_gap + length + nl_gap, nf_speed - nl_speed
        )
        nf_gain = np.where(nf_ok, a_nf_after - a_nf_now, 0.0)

        safe = (~nf_ok) | (a_nf_after >= -B_SAFE)
        gain = (a_self_new - a_self_now) + POLITENESS * (nf_gain + of_gain)
        oks.append(valid & safe & (gain > DELTA_A_THRESHOLD))
        gains.append(gain)

    ok_left, ok_right = oks
    gain_left, gain_right = gains
    go_left = ok_left & (~ok_right | (gain_left >= gain_right))
    go_right = ok_right & ~go_left
    if allowed is not None:
        go_left &= allowed
        go_right &= allowed
    lane_to = lane.copy()
    lane_to[go_left] = lane[go_left] - 1
    lane_to[go_right] = lane[go_right] + 1
    return lane_to


def advance_frame_numpy(
    pos, speed, accel, lane, lane_to, lat, v_des, length, width,
    n_sub, dt, lane_width,
):
    """Advance one decision frame with forward Euler substeps, numpy path.

    Mutates the arrays in place.  Per substep: accelerations for every
    vehicle from the shared pre-substep state (vehicles mid change take
    the more cautious of their origin and target lane), longitudinal
    integration with position updated from the old speed, lateral creep
    for changers, then an ego-only collision scan.  The first contact
    ends the frame early; otherwise pending lane changes commit at the
    frame boundary.

    Returns (substeps_done, hit_index); hit_index is -1 without contact.
    """
    n = pos.shape[0]
    eye = np.eye(n, dtype=bool)
    dlat = lane_width / n_sub
    changing = lane_to != lane
    step = np.where(lane_to > lane, dlat, -dlat)

    for s in range(n_sub):
        dpos = pos[None, :] - pos[:, None]

        def lane_accel(target_lane):
            occ = (
                (lane[None, :] == target_lane[:, None])
                | (lane_to[None, :] == target_lane[:, None])
            ) & ~eye
            j, dist, found = _nearest_ahead(dpos, occ)
            gap = np.where(found, dist - 0.5 * (length + length[j]), np.inf)
            lv = np.where(found, speed[j], 0.0)
            return _idm_vec(speed, v_des, gap, speed - lv)

        acc = np.minimum(lane_accel(lane), lane_accel(lane_to))
        accel[:] = acc
        pos += speed * dt
        v2 = speed + acc * dt
        speed[:] = np.where(v2 < 0.0, 0.0, v2)
        lat[:] = np.where(changing, lat + step, lat)

        y = lane * lane_width + lat
        dx = np.abs(pos - pos[0])
        dy = np.abs(y - y[0])
        hit = (dx < 0.5 * (length[0] + length)) & (dy < 0.5 * (width[0] + width))
        hit[0] = False
        if hit.any():
            return s + 1, int(np.argmax(hit))

    lane[changing] = lane_to[changing]
    lat[changing] = 0.0
    return n_sub, -1


if HAS_NUMBA:

    @njit(cache=True)
    def _accel_in_lane(i, target_lane, pos, speed, lane, lane_to, v_des, length):
        best = np.inf
        bj = -1
        pi = pos[i]
        for j in range(pos.shape[0]):
            if j == i:
                continue
            if lane[j] == target_lane or lane_to[j] == target_lane:
                d = pos[j] - pi
                if d > 0.0 and d < best:
                    best = d
                    bj = j
        if bj < 0:
            gap = np.inf
            lv = 0.0
        else:
            gap = best - 0.5 * (length[i] + length[bj])
            lv = speed[bj]
        if gap <= 0.0:
            return -B_MAX
        v = speed[i]
        dv = v - lv
        vr = v / v_des[i]
        vr2 = vr * vr
        free = 1.0 - vr2 * vr2
        s_star = S0 + v * T_HEADWAY + v * dv / TWO_SQRT_AB
        ratio = s_star / gap
        a = A_MAX * (free - ratio * ratio)
        if a < -B_MAX:
            a = -B_MAX
        elif a > A_MAX:
            a = A_MAX
        return a

    @njit(cache=True)
    def advance_frame_numba(
        pos, speed, accel, lane, lane_to, lat, v_des, length, width,
        n_sub, dt, lane_width,
    ):
        n = pos.shape[0]
        dlat = lane_width / n_sub
        for s in range(n_sub):
            for i in range(n):
                a1 = _accel_in_lane(i, lane[i], pos, speed, lane, lane_to, v_des, length)
                a2 = _accel_in_lane(i, lane_to[i], pos, speed, lane, lane_to, v_des, length)
                accel[i] = a1 if a1 < a2 else a2
            for i in range(n):
                pos[i] = pos[i] + speed[i] * dt
                v2 = speed[i] + accel[i] * dt
                if v2 < 0.0:
                    v2 = 0.0
                speed[i] = v2
                if lane_to[i] != lane[i]:
                    if lane_to[i] > lane[i]:
                        lat[i] = lat[i] + dlat
                    else:
                        lat[i] = lat[i] - dlat
            y0 = lane[0] * lane_width + lat[0]
            for j in range(1, n):
                dx = pos[j] - pos[0]
                if dx < 0.0:
                    dx = -dx
                dy = lane[j] * lane_width + lat[j] - y0
                if dy < 0.0:
                    dy = -dy
                if dx < 0.5 * (length[0] + length[j]) and dy < 0.5 * (width[0] + width[j]):
                    return s + 1, j
        for i in range(n):
            if lane_to[i] != lane[i]:
                lane[i] = lane_to[i]
                lat[i] = 0.0
        return n_sub, -1

else:  # pragma: no cover
    advance_frame_numba = None


def _pick_backend():
    flag = os.environ.get("MEMDRIVE_NUMBA", "").strip().lower()
    if flag in ("0", "false", "off", "no"):
        return "numpy"
    if not HAS_NUMBA:
        return "numpy"
    return "numba"


ACTIVE_BACKEND = _pick_backend()
advance_frame = (
    advance_frame_numba if ACTIVE_BACKEND == "numba" else advance_frame_numpy
)
