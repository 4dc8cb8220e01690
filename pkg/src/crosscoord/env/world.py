"""Deterministic kinematic intersection simulator.

All randomness is consumed at reset(); step() is a pure function of state
and actions, which makes logged episodes bit-exactly replayable.  Scripted
vehicles (the background traffic, and controlled vehicles after they reach
their goal) follow a yield-and-go controller: track the route centerline
by pure pursuit, keep headway to leaders, serialize junction entry by
arrival order, stop for crossing pedestrians, and brake hard when a
collision becomes imminent.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from crosscoord.config import ScenarioConfig
from crosscoord.env import geometry as geo
from crosscoord.env.geometry import (ARMS, MANEUVERS, MapGeometry, RouteSpec,
                                     disc_rect_overlap, rect_corners, rects_overlap,
                                     time_to_collision, wrap_angle)
from crosscoord.spaces import ACC_MIN, STEER_RATE_MAX, clamp_action

# scripted-controller tuning
ARRIVAL_ZONE = 12.0         # m before the box edge where arrival order is stamped
STOP_MARGIN = 1.2           # m before the box edge to hold when yielding
CROSSWALK_CLEAR = 2.6       # nose-to-crosswalk clearance when holding for pedestrians
COMFORT_ACC = 2.5
COMFORT_DEC = -4.5
SPEED_GAIN = 1.8
HEADWAY_T = 2.0
EMERGENCY_TTC = 1.0


@dataclass
class VehicleState:
    vid: int
    kind: str                      # "cav" | "background"
    entry: str
    maneuver: str                  # left | straight | right
    x: float
    y: float
    heading: float
    speed: float
    route_s: float
    half_len: float
    half_wid: float
    last_action: np.ndarray = field(default_factory=lambda: np.zeros(2))
    arrival_time: float | None = None
    done: str = "running"          # cavs: running|success|collision|timeout
    succeeded: bool = False
    exited: bool = False
    spawn_step: int = 0
    success_step: int | None = None

    def velocity(self) -> np.ndarray:
        return np.array([self.speed * math.cos(self.heading),
                         self.speed * math.sin(self.heading)])

    def disc_radius(self) -> float:
        # bounding disc, used by coarse broad-phase checks
        return math.hypot(self.half_len, self.half_wid)

    def corners(self) -> np.ndarray:
        return rect_corners(self.x, self.y, self.heading, self.half_len, self.half_wid)

    def clone(self) -> "VehicleState":
        return replace(self, last_action=self.last_action.copy())


@dataclass
class PedestrianState:
    pid: int
    x: float
    y: float
    heading: float
    speed: float
    radius: float
    crosswalk: int                 # index into MapGeometry.crosswalks
    start_time: float
    target: tuple[float, float]
    phase: str = "waiting"         # waiting | crossing | done

    @property
    def crossing(self) -> bool:
        return self.phase == "crossing"

    def velocity(self) -> np.ndarray:
        if self.phase != "crossing":
            return np.zeros(2)
        return np.array([self.speed * math.cos(self.heading),
                         self.speed * math.sin(self.heading)])

    def clone(self) -> "PedestrianState":
        return replace(self)


@dataclass
class WorldState:
    time: float
    step_idx: int
    n_controlled: int
    vehicles: list[VehicleState]
    peds: list[PedestrianState]
    episode_done: bool = False
    outcome: str = ""              # success | collision | timeout (set when done)
    colliding: tuple[int, ...] = ()

    def vehicle(self, vid: int) -> VehicleState:
        for v in self.vehicles:
            if v.vid == vid:
                return v
        raise KeyError(f"no vehicle with id {vid}")

    def cavs(self) -> list[VehicleState]:
        return [v for v in self.vehicles if v.kind == "cav"]

    def all_cavs_succeeded(self) -> bool:
        return all(v.succeeded for v in self.cavs())

    def clone(self) -> "WorldState":
        return WorldState(
            time=self.time, step_idx=self.step_idx, n_controlled=self.n_controlled,
            vehicles=[v.clone() for v in self.vehicles],
            peds=[p.clone() for p in self.peds],
            episode_done=self.episode_done, outcome=self.outcome,
            colliding=tuple(self.colliding))


@dataclass
class StepResult:
    reward: float
    components: dict[str, float]
    done: bool                     # this agent's trajectory ended on this step
    info: dict


# -- scripted yield-and-go controller --------------------------------------------


def _route_of(v: VehicleState, geometry: MapGeometry) -> RouteSpec:
    return geometry.route(v.entry, v.maneuver)


def _leader_gap(state: WorldState, me: VehicleState,
                geometry: MapGeometry) -> tuple[float, float] | None:
    """Center-to-center gap and speed of the nearest vehicle ahead on the
    same lane (shared entry approach, identical route, or shared exit lane)."""
    my_route = _route_of(me, geometry)
    my_exit = geo.exit_arm(me.entry, me.maneuver)
    best = None
    for o in state.vehicles:
        if o.vid == me.vid or o.exited:
            continue
        gap = None
        if o.entry == me.entry and o.maneuver == me.maneuver:
            gap = o.route_s - me.route_s
        elif o.entry == me.entry:
            # shared approach lane; paths diverge inside the box, so track the
            # leader by straight-line distance until it is well past the edge
            o_route = _route_of(o, geometry)
            if (me.route_s <= my_route.s_box_entry + 4.0
                    and me.route_s < o.route_s <= o_route.s_box_entry + 10.0):
                gap = math.hypot(o.x - me.x, o.y - me.y)
        elif (geo.exit_arm(o.entry, o.maneuver) == my_exit
              and o.route_s >= _route_of(o, geometry).s_box_exit - 2.0
              and me.route_s >= my_route.s_box_exit - 6.0):
            o_remaining = _route_of(o, geometry).length - o.route_s
            gap = (my_route.length - me.route_s) - o_remaining
        if gap is not None and gap > 0.0 and (best is None or gap < best[0]):
            best = (gap, o.speed)
    return best


def _must_yield(state: WorldState, me: VehicleState, geometry: MapGeometry) -> bool:
    """All-way-stop arbitration: wait if a conflicting route's vehicle is in
    the box, or arrived at the junction earlier (ties go to the lower id)."""
    my_route = _route_of(me, geometry)
    my_key = (me.arrival_time if me.arrival_time is not None else math.inf, me.vid)
    for o in state.vehicles:
        if o.vid == me.vid or o.exited:
            continue
        o_route = _route_of(o, geometry)
        if not geometry.routes_conflict(my_route, o_route):
            continue
        if o_route.s_box_entry <= o.route_s < o_route.s_box_exit:
            return True
        if o.route_s < o_route.s_box_entry and o.arrival_time is not None:
            if (o.arrival_time, o.vid) < my_key:
                return True
    return False


def _ped_blocking_crosswalk(state: WorldState, arm: str) -> bool:
    return any(p.crossing and state_ped_arm(p) == arm for p in state.peds)


def state_ped_arm(p: PedestrianState) -> str:
    # crosswalk index equals the arm index by construction
    return ARMS[p.crosswalk]


def _ped_ahead(state: WorldState, me: VehicleState) -> bool:
    """A crossing pedestrian inside my braking corridor."""
    cos_h, sin_h = math.cos(me.heading), math.sin(me.heading)
    reach = me.half_len + 0.6 + me.speed * 1.1
    for p in state.peds:
        if not p.crossing:
            continue
        rx, ry = p.x - me.x, p.y - me.y
        lon = rx * cos_h + ry * sin_h
        lat = -rx * sin_h + ry * cos_h
        if -0.2 <= lon - me.half_len and lon <= reach and abs(lat) <= me.half_wid + 0.6:
            return True
    return False


def _min_contact_ttc(state: WorldState, me: VehicleState) -> float:
    """Near-contact TTC used only for the scripted emergency brake.

    Only frontal contacts count: a stopped vehicle cannot mitigate anything
    by braking, and someone closing on our flank is their problem to time,
    not a reason to freeze in the middle of the junction."""
    if me.speed < 0.3:
        return math.inf
    best = math.inf
    p1, v1 = np.array([me.x, me.y]), me.velocity()
    heading = np.array([math.cos(me.heading), math.sin(me.heading)])

    def frontal(t: float, p2: np.ndarray, v2: np.ndarray) -> bool:
        at_contact = (p2 - p1) + (v2 - v1) * t
        n = float(np.hypot(*at_contact))
        if n < 1e-9:
            return True
        return float(at_contact @ heading) / n > math.cos(math.radians(80.0))

    for o in state.vehicles:
        if o.vid == me.vid or o.exited:
            continue
        p2, v2 = np.array([o.x, o.y]), o.velocity()
        t = time_to_collision(p1, v1, me.half_wid + 0.2, p2, v2, o.half_wid + 0.2)
        if t < best and frontal(t, p2, v2):
            best = t
    for p in state.peds:
        if p.phase == "done":
            continue
        p2, v2 = np.array([p.x, p.y]), p.velocity()
        t = time_to_collision(p1, v1, me.half_wid + 0.2, p2, v2, p.radius)
        if t < best and frontal(t, p2, v2):
            best = t
    return best


def background_controller(state: WorldState, vid: int, config: ScenarioConfig,
                          geometry: MapGeometry) -> np.ndarray:
    """Deterministic yield-and-go action for one vehicle on the current state."""
    me = state.vehicle(vid)
    route = _route_of(me, geometry)
    s = me.route_s

    # curvature-limited desired speed, slowing ahead of the turn
    v_des = config.v_target
    if route.turn_radius is not None:
        v_turn = min(config.v_target, 0.9 * STEER_RATE_MAX * route.turn_radius)
        brake_dist = (max(me.speed, v_turn) ** 2 - v_turn ** 2) / (2.0 * 2.0) + 3.0
        if route.s_box_entry - brake_dist <= s <= route.s_box_exit:
            v_des = v_turn

    # mandatory stop points: junction arbitration, then pedestrian crosswalks.
    # The crosswalk hold keeps the nose clear of the crossing; once the nose
    # is past the line the right move is to clear it, not to stop on it.
    stop_s = None
    if s < route.s_box_entry and _must_yield(state, me, geometry):
        stop_s = route.s_box_entry - STOP_MARGIN
        entry_cw = route.crosswalk_s.get(me.entry)
        if entry_cw is not None:
            # hold behind the entry crosswalk, not on top of it
            stop_s = min(stop_s, entry_cw - me.half_len - 0.8)
    for arm, s_cw in route.crosswalk_s.items():
        if _ped_blocking_crosswalk(state, arm):
            cand = s_cw - me.half_len - CROSSWALK_CLEAR
            limit = s_cw - me.half_len - 0.4
            if s <= cand + 0.2:
                stop_s = cand if stop_s is None else min(stop_s, cand)
            elif s <= limit and me.speed ** 2 <= 2.0 * 4.2 * (limit - s) + 0.25:
                # drifted past the mark but a stop short of the line is still
                # possible: stand where we are instead of clearing through
                hold = max(s, cand)
                stop_s = hold if stop_s is None else min(stop_s, hold)

    a_cmd = min(max(SPEED_GAIN * (v_des - me.speed), COMFORT_DEC), COMFORT_ACC)

    lead = _leader_gap(state, me, geometry)
    if lead is not None:
        gap, lead_speed = lead
        bumper = gap - 2.0 * me.half_len
        if bumper < 1.5:
            a_cmd = ACC_MIN
        elif bumper / max(me.speed, 0.1) < HEADWAY_T:
            a_cmd = min(a_cmd, SPEED_GAIN * (lead_speed - me.speed) - 0.5)

    if stop_s is not None:
        d = stop_s - s
        if d <= 0.35 and me.speed < 0.6:
            a_cmd = -2.5                     # kill residual creep dead
        elif d <= 0.1:
            a_cmd = ACC_MIN
        else:
            a_req = -(me.speed ** 2) / (2.0 * d)
            if a_req <= -0.8 or d < 2.0:
                a_cmd = min(a_cmd, max(a_req * 1.15, ACC_MIN))

    if _ped_ahead(state, me) or _min_contact_ttc(state, me) < EMERGENCY_TTC:
        a_cmd = ACC_MIN

    # pure pursuit steering toward a speed-scaled lookahead point
    lookahead = 2.0 + 0.6 * me.speed
    target = route.point_at(s + lookahead)
    desired = math.atan2(target[1] - me.y, target[0] - me.x)
    err = wrap_angle(desired - me.heading)
    steer = 2.0 * me.speed * math.sin(err) / lookahead
    steer = min(max(steer, -STEER_RATE_MAX), STEER_RATE_MAX)

    return np.array([a_cmd, steer])


# -- pedestrian phase machine ----------------------------------------------------


def _ped_may_start(state: WorldState, p: PedestrianState, config: ScenarioConfig,
                   geometry: MapGeometry) -> bool:
    """Gap acceptance at the curb.  Once this passes, the walkway is clear
    and every approaching vehicle has ample room to hold behind its line,
    so the crossing itself is unconditional: she never has to negotiate
    with traffic mid-walk, and vehicles never have to reason about her
    beyond "hold while the walkway is in use"."""
    arm = state_ped_arm(p)
    for v in state.vehicles:
        if v.exited:
            continue
        route = _route_of(v, geometry)
        s_cw = route.crosswalk_s.get(arm)
        if s_cw is None:
            continue
        ds = s_cw - v.route_s
        if -v.half_len - 1.0 < ds <= v.half_len + 0.8:
            return False                      # body on or poking into the band
        if ds > 0.0 and v.speed >= 0.05:
            if ds < max(config.ped_gap_time * max(v.speed, 0.8), 12.0):
                return False                  # approaching with too little room
    return True


def detect_collisions(state: WorldState) -> tuple[set[int], bool]:
    """Ids of vehicles in contact, plus whether any contact involves a pedestrian.

    Vehicle pairs are tested rectangle against rectangle, pedestrians as
    discs against vehicle rectangles; exited vehicles and pedestrians that
    finished crossing are ignored."""
    live = [v for v in state.vehicles if not v.exited]
    corners = {v.vid: v.corners() for v in live}
    colliding: set[int] = set()
    for i in range(len(live)):
        for j in range(i + 1, len(live)):
            if rects_overlap(corners[live[i].vid], corners[live[j].vid]):
                colliding.add(live[i].vid)
                colliding.add(live[j].vid)
    ped_hit = False
    for p in state.peds:
        if p.phase == "done":
            continue
        for v in live:
            if disc_rect_overlap(p.x, p.y, p.radius, v.x, v.y, v.heading,
                                 v.half_len, v.half_wid):
                colliding.add(v.vid)
                ped_hit = True
    return colliding, ped_hit


def _advance_peds(state: WorldState, config: ScenarioConfig, geometry: MapGeometry) -> None:
    for p in state.peds:
        if p.phase == "waiting":
            if state.time >= p.start_time and _ped_may_start(state, p, config, geometry):
                p.phase = "crossing"
                p.heading = math.atan2(p.target[1] - p.y, p.target[0] - p.x)
                p.speed = config.ped_speed
        elif p.phase == "crossing":
            step = p.speed * config.dt
            dx, dy = p.target[0] - p.x, p.target[1] - p.y
            dist = math.hypot(dx, dy)
            if dist <= step:
                p.x, p.y = p.target
                p.phase = "done"
                p.speed = 0.0
            else:
                p.x += step * dx / dist
                p.y += step * dy / dist


# -- the environment -------------------------------------------------------------


class SpawnError(RuntimeError):
    """Could not place the requested population without overlaps."""


class IntersectionEnv:
    """Seeded, deterministic multi-agent intersection episode generator."""

    def __init__(self, config: ScenarioConfig, seed: int = 0):
        self.config = config
        self.geometry = config.geometry()
        self.layout = config.layout()
        self.root_seed = int(seed)
        self.episode_idx = -1
        self.state: WorldState | None = None
        self.episode_seed: int | None = None

    # -- reset -----------------------------------------------------------------

    def reset(self, seed: int | None = None, n_controlled: int | None = None,
              snapshot: WorldState | None = None) -> dict[int, np.ndarray]:
        """Start a new episode; returns initial observations per agent id.

        With a snapshot, the world restarts from a copy of that exact state
        (used for dataset replays and closed-loop comparisons)."""
        self.episode_idx += 1
        if snapshot is not None:
            self.state = snapshot.clone()
            self.episode_seed = seed
            return self._observations()
        if seed is None:
            seed_seq = np.random.SeedSequence((self.root_seed, self.episode_idx))
        else:
            seed_seq = np.random.SeedSequence(int(seed))
        self.episode_seed = seed
        rng = np.random.default_rng(seed_seq)
        n_cav = self.config.n_controlled if n_controlled is None else int(n_controlled)
        if not 1 <= n_cav <= 3:
            raise ValueError(f"n_controlled must be 1..3, got {n_cav}")
        for _ in range(24):
            state = self._sample_layout(rng, n_cav)
            if state is not None:
                self.state = state
                return self._observations()
        raise SpawnError("could not sample a non-overlapping spawn layout")

    def _sample_layout(self, rng: np.random.Generator, n_cav: int) -> WorldState | None:
        cfg, geometry = self.config, self.geometry
        n_bg = cfg.n_vehicles_total - n_cav
        if n_bg < 0:
            raise ValueError("n_vehicles_total is smaller than the controlled count")

        cav_entries = [str(a) for a in rng.choice(ARMS, size=min(n_cav, 4), replace=False)]
        entries = cav_entries + [str(a) for a in rng.choice(ARMS, size=n_bg, replace=True)]
        maneuvers = [str(m) for m in rng.choice(MANEUVERS, size=len(entries), replace=True)]

        # stagger spawn distances per arm; fail the attempt if an arm is full
        by_arm: dict[str, list[int]] = {}
        for i, arm in enumerate(entries):
            by_arm.setdefault(arm, []).append(i)
        lo = cfg.spawn_frac_lo * cfg.arm_length
        hi = cfg.spawn_frac_hi * cfg.arm_length
        dists = np.zeros(len(entries))
        for arm, idxs in by_arm.items():
            placed: list[float] = []
            arm_hi = min(hi + cfg.spawn_min_gap * (len(idxs) - 1),
                         cfg.arm_length - cfg.vehicle_half_len - 1.0)
            for i in idxs:
                ok = False
                for _ in range(40):
                    d = rng.uniform(lo, arm_hi)
                    if all(abs(d - q) >= cfg.spawn_min_gap for q in placed):
                        placed.append(d)
                        dists[i] = d
                        ok = True
                        break
                if not ok:
                    return None

        vehicles = []
        for i, (arm, man) in enumerate(zip(entries, maneuvers)):
            route = geometry.route(arm, man)
            s = cfg.arm_length - dists[i]
            pt = route.point_at(s)
            vehicles.append(VehicleState(
                vid=i, kind="cav" if i < n_cav else "background",
                entry=arm, maneuver=man,
                x=float(pt[0]), y=float(pt[1]),
                heading=route.heading_at(s),
                speed=float(rng.uniform(cfg.speed_init_lo, cfg.speed_init_hi)),
                route_s=float(s),
                half_len=cfg.vehicle_half_len, half_wid=cfg.vehicle_half_wid))

        corners = [v.corners() for v in vehicles]
        for i in range(len(vehicles)):
            for j in range(i + 1, len(vehicles)):
                if rects_overlap(corners[i], corners[j]):
                    return None

        n_peds = int(rng.integers(0, cfg.n_pedestrians_max + 1))
        peds = []
        for k in range(n_peds):
            cw_idx = int(rng.integers(0, len(geometry.crosswalks)))
            cw = geometry.crosswalks[cw_idx]
            if rng.integers(0, 2) == 0:
                start, target = cw.end_a, cw.end_b
            else:
                start, target = cw.end_b, cw.end_a
            peds.append(PedestrianState(
                pid=k, x=start[0], y=start[1],
                heading=math.atan2(target[1] - start[1], target[0] - start[0]),
                speed=0.0, radius=cfg.ped_radius, crosswalk=cw_idx,
                start_time=float(rng.uniform(0.0, cfg.ped_start_window)),
                target=target))

        return WorldState(time=0.0, step_idx=0, n_controlled=n_cav,
                          vehicles=vehicles, peds=peds)

    # -- step ------------------------------------------------------------------

    def active_agents(self) -> list[int]:
        return [v.vid for v in self.state.cavs() if v.done == "running"]

    def expert_action(self, vid: int) -> np.ndarray:
        """Scripted yield-and-go action for a controlled vehicle."""
        return background_controller(self.state, vid, self.config, self.geometry)

    def step(self, actions: dict[int, np.ndarray]) -> tuple[dict[int, np.ndarray],
                                                            dict[int, StepResult]]:
        from crosscoord.env.reward import compute_reward

        cfg, geometry = self.config, self.geometry
        state = self.state
        if state is None or state.episode_done:
            raise RuntimeError("step() called before reset() or after episode end")
        unknown = set(actions) - set(self.active_agents())
        if unknown:
            raise KeyError(f"actions for unknown agents: {sorted(unknown)}")
        prev = state.clone()

        applied: dict[int, np.ndarray] = {}
        for v in state.vehicles:
            if v.exited:
                continue
            if v.kind == "cav" and v.done == "running":
                if v.vid not in actions:
                    raise KeyError(f"missing action for agent {v.vid}")
                a = np.asarray(actions[v.vid], dtype=np.float64)
                if a.shape != (2,):
                    raise ValueError(f"action for agent {v.vid} has shape {a.shape}, want (2,)")
                if not np.all(np.isfinite(a)):
                    raise ValueError(f"action for agent {v.vid} is not finite: {a}")
                applied[v.vid] = clamp_action(a)
            else:
                applied[v.vid] = clamp_action(
                    background_controller(prev, v.vid, cfg, geometry))

        bound = cfg.arm_length + geometry.half_size
        for v in state.vehicles:
            if v.exited:
                continue
            a = applied[v.vid]
            v.speed = min(max(v.speed + a[0] * cfg.dt, 0.0), cfg.v_max)
            v.heading = float(wrap_angle(v.heading + a[1] * cfg.dt))
            v.x = min(max(v.x + v.speed * math.cos(v.heading) * cfg.dt, -bound), bound)
            v.y = min(max(v.y + v.speed * math.sin(v.heading) * cfg.dt, -bound), bound)
            v.last_action = a
            route = _route_of(v, geometry)
            v.route_s = route.project(v.x, v.y, s_hint=v.route_s)
            if v.arrival_time is None and v.route_s >= route.s_box_entry - ARRIVAL_ZONE:
                v.arrival_time = state.time + cfg.dt

        state.time += cfg.dt
        state.step_idx += 1
        _advance_peds(state, cfg, geometry)

        colliding, ped_hit = detect_collisions(state)
        state.colliding = tuple(sorted(colliding))

        for v in state.cavs():
            if v.done == "running" and not v.succeeded:
                route = _route_of(v, geometry)
                if route.in_goal(v.x, v.y):
                    v.succeeded = True
                    v.done = "success"
                    v.success_step = state.step_idx
        for v in state.vehicles:
            if not v.exited and v.route_s >= _route_of(v, geometry).length - 0.6:
                v.exited = True
                if v.kind == "cav" and v.done == "running":
                    v.done = "timeout"       # left the map without reaching the goal

        if colliding or ped_hit:
            state.episode_done = True
            state.outcome = "collision"
        elif state.all_cavs_succeeded():
            state.episode_done = True
            state.outcome = "success"
        elif not any(v.done == "running" for v in state.cavs()):
            state.episode_done = True        # every CAV ended, at least one without success
            state.outcome = "timeout"
        elif state.step_idx >= cfg.max_steps:
            state.episode_done = True
            state.outcome = "timeout"
        if state.episode_done and state.outcome in ("collision", "timeout"):
            for v in state.cavs():
                if v.done == "running":
                    v.done = state.outcome

        results: dict[int, StepResult] = {}
        for v in prev.cavs():
            if v.done != "running":
                continue
            vid = v.vid
            total, comps = compute_reward(prev, applied[vid], state, vid, cfg, geometry)
            now = state.vehicle(vid)
            results[vid] = StepResult(
                reward=total, components=comps, done=now.done != "running",
                info={"reason": now.done, "outcome": state.outcome,
                      "colliding": vid in state.colliding})
        return self._observations(), results

    def _observations(self) -> dict[int, np.ndarray]:
        from crosscoord.env.observation import build_observation

        if self.state.episode_done:
            return {}
        return {v.vid: build_observation(self.state, v.vid, self.config, self.geometry)
                for v in self.state.cavs() if v.done == "running"}
