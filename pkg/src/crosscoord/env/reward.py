"""Per-agent reward decomposition.

Each component is returned unweighted alongside the weighted total so
training logs can attribute changes to a single term.  Everything is
computed from (previous frame, applied action, new frame); the function
holds no state of its own.

Collision-risk terms use narrow proxy discs (half the vehicle width plus
a small margin) rather than full bounding discs: with full half-diagonal
discs every pass between opposing lanes reads as an imminent collision,
which drowns the task signal.  Rectangle overlap remains the actual
collision test in the simulator.
"""
from __future__ import annotations

import math
from typing import Dict, Tuple

import numpy as np

from crosscoord.config import ScenarioConfig
from crosscoord.env.geometry import MapGeometry, time_to_collision
from crosscoord.env.world import ARRIVAL_ZONE, WorldState
from crosscoord.spaces import ACTION_RANGE

BLOCKED_SPEED = 0.3
YIELD_DECEL = -0.1


def _risk_radius(half_wid: float) -> float:
    return half_wid + 0.2


def _safety_metrics(state: WorldState, vid: int,
                    config: ScenarioConfig) -> Tuple[float, float]:
    """(min time-to-collision, min centre distance) over nearby traffic."""
    me = state.vehicle(vid)
    p1 = np.array([me.x, me.y])
    v1 = me.velocity()
    r1 = _risk_radius(me.half_wid)
    min_ttc = math.inf
    min_dist = math.inf
    for o in state.vehicles:
        if o.vid == vid or o.exited:
            continue
        p2 = np.array([o.x, o.y])
        d = float(np.hypot(*(p2 - p1)))
        if d > config.vehicle_sense_radius:
            continue
        min_dist = min(min_dist, d)
        ttc = time_to_collision(p1, v1, r1, p2, o.velocity(), _risk_radius(o.half_wid))
        min_ttc = min(min_ttc, ttc)
    for p in state.peds:
        p2 = np.array([p.x, p.y])
        d = float(np.hypot(*(p2 - p1)))
        if d > config.ped_sense_radius:
            continue
        min_dist = min(min_dist, d)
        ttc = time_to_collision(p1, v1, r1, p2, p.velocity(), p.radius)
        min_ttc = min(min_ttc, ttc)
    return min_ttc, min_dist


def _conflicting_traffic_in_box(state: WorldState, vid: int,
                                geometry: MapGeometry) -> bool:
    me = state.vehicle(vid)
    my_route = geometry.route(me.entry, me.maneuver)
    for o in state.vehicles:
        if o.vid == vid or o.exited:
            continue
        r = geometry.route(o.entry, o.maneuver)
        if not geometry.routes_conflict(my_route, r):
            continue
        if r.s_box_entry <= o.route_s < r.s_box_exit:
            return True
    return False


def _blocked_cav_pair(state: WorldState, geometry: MapGeometry) -> bool:
    cavs = [v for v in state.cavs() if v.done == "running" and not v.succeeded]
    for i in range(len(cavs)):
        for j in range(i + 1, len(cavs)):
            a, b = cavs[i], cavs[j]
            if a.speed >= BLOCKED_SPEED or b.speed >= BLOCKED_SPEED:
                continue
            ra = geometry.route(a.entry, a.maneuver)
            rb = geometry.route(b.entry, b.maneuver)
            if not geometry.routes_conflict(ra, rb):
                continue
            if (a.route_s >= ra.s_box_entry - ARRIVAL_ZONE
                    and b.route_s >= rb.s_box_entry - ARRIVAL_ZONE):
                return True
    return False


def compute_reward(prev: WorldState, action: np.ndarray, new: WorldState,
                   vid: int, config: ScenarioConfig,
                   geometry: MapGeometry) -> Tuple[float, Dict[str, float]]:
    w = config.weights
    me_prev = prev.vehicle(vid)
    me_new = new.vehicle(vid)

    min_ttc, min_dist = _safety_metrics(new, vid, config)
    ttc_term = max(0.0, 1.0 - min_ttc / config.ttc_threshold) if math.isfinite(min_ttc) else 0.0
    dist_term = max(0.0, 1.0 - min_dist / config.distance_threshold) if math.isfinite(min_dist) else 0.0
    r_safety = -ttc_term - dist_term

    r_efficiency = float(np.clip(me_new.speed / config.v_target - 1.0, -1.0, 0.0))

    da = np.asarray(action, dtype=np.float64) - me_prev.last_action
    r_comfort = -(abs(da[0]) / ACTION_RANGE[0] + abs(da[1]) / ACTION_RANGE[1])

    r_task = 0.0
    if me_new.succeeded and not me_prev.succeeded:
        r_task += 1.0
    if new.all_cavs_succeeded() and not prev.all_cavs_succeeded():
        r_task += 1.0

    r_yield = 0.0
    prev_route = geometry.route(me_prev.entry, me_prev.maneuver)
    if (action[0] < YIELD_DECEL and me_prev.route_s < prev_route.s_box_entry
            and _conflicting_traffic_in_box(prev, vid, geometry)):
        r_yield = 0.1

    r_coop = -0.05 if _blocked_cav_pair(new, geometry) else 0.0

    r_penalty = 0.0
    if vid in new.colliding or me_new.done == "timeout":
        r_penalty = -1.0

    components = {
        "safety": r_safety,
        "efficiency": r_efficiency,
        "comfort": r_comfort,
        "task": r_task,
        "yielding": r_yield,
        "cooperation": r_coop,
        "penalty": r_penalty,
    }
    total = (w.safety * r_safety + w.efficiency * r_efficiency
             + w.comfort * r_comfort + w.task * r_task
             + w.yielding * r_yield + w.cooperation * r_coop
             + w.penalty * r_penalty)
    return total, components


def reward_bound(config: ScenarioConfig) -> float:
    """Largest possible |weighted total| for a single step."""
    w = config.weights
    return (2.0 * w.safety + 1.0 * w.efficiency + 2.0 * w.comfort
            + 2.0 * w.task + 0.1 * w.yielding + 0.05 * w.cooperation
            + 1.0 * w.penalty)
