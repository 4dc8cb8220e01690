"""Per-agent observation construction.

Pure function of the world state, so the in-process control loop and the
roadside unit build bit-identical vectors from the same snapshot.  Optional
sensing noise is drawn from a counter-based generator keyed on (step,
agent), which keeps the function stateless and replays exact.
"""
from __future__ import annotations

import math

import numpy as np

from crosscoord.config import ScenarioConfig
from crosscoord.env.geometry import MapGeometry, wrap_angle
from crosscoord.env.world import WorldState
from crosscoord.spaces import (PED_DIST_SCALE, POS_SCALE, REL_POS_SCALE,
                               REL_SPEED_SCALE, SPEED_SCALE, ObsLayout)

_NOISE_STREAM = 0x6F62736E  # arbitrary tag separating this noise stream


def _noise_rng(step_idx: int, vid: int) -> np.random.Generator:
    key = np.array([np.uint64(step_idx), np.uint64(vid), np.uint64(_NOISE_STREAM),
                    np.uint64(0)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def build_observation(state: WorldState, vid: int, config: ScenarioConfig,
                      geometry: MapGeometry) -> np.ndarray:
    """Flat observation for one controlled vehicle; see spaces.ObsLayout."""
    layout = config.layout()
    me = state.vehicle(vid)
    obs = np.zeros(layout.dim)

    obs[0] = me.speed / SPEED_SCALE
    obs[1] = me.x / POS_SCALE
    obs[2] = me.y / POS_SCALE
    obs[3] = me.heading / math.pi
    obs[4] = math.hypot(me.x, me.y) / POS_SCALE
    obs[5] = 1.0 if geometry.in_junction(me.x, me.y) else 0.0

    noise = None
    if config.obs_noise_sigma > 0.0:
        noise = _noise_rng(state.step_idx, vid)

    my_vel = me.velocity()
    cands = []
    for o in state.vehicles:
        if o.vid == vid or o.exited:
            continue
        d = math.hypot(o.x - me.x, o.y - me.y)
        if d <= config.vehicle_sense_radius:
            cands.append((d, o.vid, o))
    cands.sort(key=lambda t: (t[0], t[1]))
    for slot, (_, _, o) in enumerate(cands[:layout.n_vehicle_slots]):
        sl = layout.veh_slot(slot)
        rel_p = np.array([o.x - me.x, o.y - me.y])
        rel_v = o.velocity() - my_vel
        if noise is not None:
            rel_p = rel_p + noise.normal(0.0, config.obs_noise_sigma, size=2)
            rel_v = rel_v + noise.normal(0.0, config.obs_noise_sigma, size=2)
        obs[sl.start] = 1.0
        obs[sl.start + 1] = rel_p[0] / REL_POS_SCALE
        obs[sl.start + 2] = rel_p[1] / REL_POS_SCALE
        obs[sl.start + 3] = rel_v[0] / REL_SPEED_SCALE
        obs[sl.start + 4] = rel_v[1] / REL_SPEED_SCALE

    ped_cands = []
    for p in state.peds:
        d = math.hypot(p.x - me.x, p.y - me.y)
        if d <= config.ped_sense_radius:
            ped_cands.append((d, p.pid, p))
    ped_cands.sort(key=lambda t: (t[0], t[1]))
    for slot, (d, _, p) in enumerate(ped_cands[:layout.n_ped_slots]):
        sl = layout.ped_slot(slot)
        bearing = float(wrap_angle(math.atan2(p.y - me.y, p.x - me.x) - me.heading))
        if noise is not None:
            d = abs(d + noise.normal(0.0, config.obs_noise_sigma))
            bearing = float(wrap_angle(bearing + noise.normal(0.0, config.obs_noise_sigma / 10.0)))
        obs[sl.start] = 1.0
        obs[sl.start + 1] = d / PED_DIST_SCALE
        obs[sl.start + 2] = bearing / math.pi

    obs[layout.role_start:layout.role_start + 3] = layout.role_onehot(me.maneuver)
    obs[layout.ctx_start:layout.ctx_start + 3] = layout.ctx_onehot(state.n_controlled)
    return obs
