"""Roadside coordination layer: wire codec, impaired-link simulation, role
assignment from approach reports, and the per-tick dispatcher that turns a
ground-truth snapshot into per-vehicle control commands.

Wire format (all little-endian, fixed length per message type):

    offset  size  field
    0       2     magic "CX"
    2       1     message type: 1 = state report, 2 = command
    3       ...   payload (below)
    -2      2     CRC-16/CCITT (poly 0x1021, init 0xFFFF) over magic+type+payload

    REPORT payload (49 bytes):
        u32 vehicle id | u64 timestamp ms | f64 x | f64 y | f64 heading
        | f64 speed | u8 declared entry arm (0 = undeclared, else 1-based
        index into the arm tuple) | u32 sequence number
    COMMAND payload (40 bytes):
        u32 vehicle id | u64 timestamp ms | f64 accel | f64 steer rate
        | u32 sequence number | u64 valid-until ms

Floats cross the wire as IEEE-754 doubles, so an encode/decode round trip
is bit-exact; with ideal links the through-protocol control loop produces
trajectories identical to calling the actors in process.
"""

from __future__ import annotations

import binascii
import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from crosscoord.config import ScenarioConfig
from crosscoord.env.geometry import ARMS, ENTRY_HEADING, MANEUVERS, MapGeometry, exit_arm
from crosscoord.env.observation import build_observation
from crosscoord.env.reward import _safety_metrics
from crosscoord.env.world import IntersectionEnv, WorldState
from crosscoord.nets import GaussianActor
from crosscoord.spaces import ACC_MIN, clamp_action
from crosscoord.trajlog import TrajectoryWriter, rows_from_state

MAGIC = b"CX"
MSG_REPORT = 1
MSG_COMMAND = 2

_REPORT_FMT = "<IQddddBI"
_COMMAND_FMT = "<IQddIQ"
_REPORT_LEN = 2 + 1 + struct.calcsize(_REPORT_FMT) + 2
_COMMAND_LEN = 2 + 1 + struct.calcsize(_COMMAND_FMT) + 2

MONITOR_COLUMNS = ("tick", "min_ttc", "commands_sent", "stale_count")


class DecodeError(ValueError):
    """Base class for anything decode() can reject."""


class TruncatedMessage(DecodeError):
    pass


class BadMagic(DecodeError):
    pass


class ChecksumError(DecodeError):
    pass


class UnknownMessageType(DecodeError):
    pass


def crc16(data: bytes) -> int:
    """CRC-16/CCITT, polynomial 0x1021, initial value 0xFFFF."""
    return binascii.crc_hqx(data, 0xFFFF)


@dataclass(frozen=True)
class V2iStateReport:
    vehicle_id: int
    timestamp_ms: int
    x: float
    y: float
    heading: float
    speed: float
    entry: str              # declared entry arm, "" when undeclared
    seq: int


@dataclass(frozen=True)
class V2iCommand:
    vehicle_id: int
    timestamp_ms: int
    a_acc: float
    a_steer: float
    seq: int
    valid_until_ms: int


def encode(msg) -> bytes:
    if isinstance(msg, V2iStateReport):
        if msg.entry and msg.entry not in ARMS:
            raise ValueError(f"unknown entry arm {msg.entry!r}")
        entry_code = ARMS.index(msg.entry) + 1 if msg.entry else 0
        body = MAGIC + bytes([MSG_REPORT]) + struct.pack(
            _REPORT_FMT, msg.vehicle_id, msg.timestamp_ms, msg.x, msg.y,
            msg.heading, msg.speed, entry_code, msg.seq)
    elif isinstance(msg, V2iCommand):
        if msg.valid_until_ms <= msg.timestamp_ms:
            raise ValueError("valid-until must lie after the timestamp")
        body = MAGIC + bytes([MSG_COMMAND]) + struct.pack(
            _COMMAND_FMT, msg.vehicle_id, msg.timestamp_ms, msg.a_acc,
            msg.a_steer, msg.seq, msg.valid_until_ms)
    else:
        raise TypeError(f"cannot encode {type(msg).__name__}")
    return body + struct.pack("<H", crc16(body))


def decode(data: bytes):
    if len(data) < 3:
        raise TruncatedMessage(f"{len(data)} bytes is shorter than any message")
    if data[:2] != MAGIC:
        raise BadMagic(f"bad magic {data[:2]!r}")
    msg_type = data[2]
    if msg_type == MSG_REPORT:
        expected = _REPORT_LEN
    elif msg_type == MSG_COMMAND:
        expected = _COMMAND_LEN
    else:
        raise UnknownMessageType(f"message type {msg_type}")
    if len(data) != expected:
        raise TruncatedMessage(f"type {msg_type} needs {expected} bytes, got {len(data)}")
    (stored,) = struct.unpack("<H", data[-2:])
    if crc16(data[:-2]) != stored:
        raise ChecksumError("CRC mismatch")
    payload = data[3:-2]
    if msg_type == MSG_REPORT:
        vid, ts, x, y, heading, speed, entry_code, seq = struct.unpack(
            _REPORT_FMT, payload)
        entry = ARMS[entry_code - 1] if entry_code else ""
        return V2iStateReport(vid, ts, x, y, heading, speed, entry, seq)
    vid, ts, a_acc, a_steer, seq, valid_until = struct.unpack(_COMMAND_FMT, payload)
    return V2iCommand(vid, ts, a_acc, a_steer, seq, valid_until)


# -- link impairment ---------------------------------------------------------------


@dataclass(frozen=True)
class LinkConfig:
    latency_ms: float = 0.0
    jitter_ms: float = 0.0
    drop_prob: float = 0.0
    fifo: bool = True

    def __post_init__(self):
        if self.latency_ms < 0 or self.jitter_ms < 0:
            raise ValueError("latency and jitter must be non-negative")
        if not 0.0 <= self.drop_prob < 1.0:
            raise ValueError("drop probability must lie in [0, 1)")


class Link:
    """One directed link: seeded latency/jitter/drop with optional FIFO order.

    The ideal configuration (zero latency, jitter and drop) never touches
    the random generator, so impairment-free runs stay bit-reproducible
    regardless of how many messages pass through.
    """

    def __init__(self, config: LinkConfig, rng: np.random.Generator | None = None):
        self.config = config
        self.rng = rng or np.random.default_rng(0)
        self._queue: list[tuple[float, int, bytes]] = []
        self._order = 0
        self._last_delivery = -math.inf
        self.dropped = 0

    def send(self, data: bytes, now_ms: float) -> float | None:
        """Schedule a message; returns its delivery time, None when dropped."""
        cfg = self.config
        if cfg.drop_prob > 0.0 and self.rng.uniform() < cfg.drop_prob:
            self.dropped += 1
            return None
        latency = cfg.latency_ms
        if cfg.jitter_ms > 0.0:
            latency = max(0.0, latency + cfg.jitter_ms * self.rng.standard_normal())
        when = now_ms + latency
        if cfg.fifo:
            when = max(when, self._last_delivery)
            self._last_delivery = when
        self._queue.append((when, self._order, data))
        self._order += 1
        return when

    def poll(self, now_ms: float) -> list[bytes]:
        """Messages due by now, in delivery order."""
        due = sorted(t for t in self._queue if t[0] <= now_ms)
        self._queue = [t for t in self._queue if t[0] > now_ms]
        return [data for _, _, data in due]


# -- role assignment ---------------------------------------------------------------

DRIFT_THRESHOLD_M = 0.8


def assign_role(reports: list[V2iStateReport], geometry: MapGeometry,
                goal_arm: str | None = None) -> str:
    """Maneuver class for a vehicle from its report history.

    With a declared goal arm the role is pure geometry (exit arm relative
    to the declared entry).  Otherwise the sign of the lateral drift across
    the history decides: leftward (counter-clockwise) drift means a left
    turn, rightward a right turn, and anything under DRIFT_THRESHOLD_M
    falls back to straight.
    """
    if not reports:
        raise ValueError("no reports to assign a role from")
    entry = next((r.entry for r in reversed(reports) if r.entry), "")
    if not entry:
        raise ValueError("no report declares an entry arm")
    if goal_arm is not None:
        for maneuver in MANEUVERS:
            if exit_arm(entry, maneuver) == goal_arm:
                return maneuver
        raise ValueError(f"no maneuver leads from {entry} to {goal_arm}")
    heading = ENTRY_HEADING[entry]
    fwd = (math.cos(heading), math.sin(heading))
    first, last = reports[0], reports[-1]
    dx, dy = last.x - first.x, last.y - first.y
    lateral = fwd[0] * dy - fwd[1] * dx      # >0 drifts left of the entry axis
    if abs(lateral) < DRIFT_THRESHOLD_M:
        return "straight"
    return "left" if lateral > 0 else "right"


# -- per-tick coordination ----------------------------------------------------------


@dataclass
class MonitorRecord:
    tick: int
    min_ttc: float
    occupancy: int                       # vehicles currently inside the junction
    staleness: dict[int, int]            # per-vehicle ticks since last report
    commands_sent: int                   # cumulative
    stale_count: int                     # cumulative


@dataclass
class RsuState:
    """Everything the coordinator remembers between ticks."""

    actors: dict[str, GaussianActor]
    scenario: ScenarioConfig
    geometry: MapGeometry
    stale_after: int = 3
    roles: dict[int, str] = field(default_factory=dict)
    reports: dict[int, V2iStateReport] = field(default_factory=dict)
    histories: dict[int, list[V2iStateReport]] = field(default_factory=dict)
    report_tick: dict[int, int] = field(default_factory=dict)
    tick_idx: int = 0
    last_snapshot_step: int = -1
    seq: int = 0
    min_ttc: float = math.inf
    commands_sent: int = 0
    stale_count: int = 0


def make_rsu(actors: dict[str, GaussianActor], scenario: ScenarioConfig,
             stale_after: int = 3,
             declared_roles: dict[int, str] | None = None) -> RsuState:
    """Coordinator with loaded weights; ``declared_roles`` models vehicles
    that announce their route out of band (roles lock on first use either
    way)."""
    return RsuState(actors=dict(actors), scenario=scenario,
                    geometry=scenario.geometry(), stale_after=stale_after,
                    roles=dict(declared_roles or {}))


def tick(rsu: RsuState, inbox: list[V2iStateReport], snapshot: WorldState,
         ) -> tuple[list[V2iCommand], MonitorRecord]:
    """Ingest reports, command every fresh CAV, and log monitoring data.

    Vehicles whose newest report is older than ``stale_after`` ticks (or
    that never reported) get a safe-stop command: full braking, zero
    steering rate.
    """
    if not rsu.actors:
        raise RuntimeError("no actor weights loaded")
    if snapshot.step_idx < rsu.last_snapshot_step:
        raise ValueError(
            f"stale world snapshot: step {snapshot.step_idx} after "
            f"{rsu.last_snapshot_step}")
    rsu.last_snapshot_step = snapshot.step_idx

    for rep in inbox:
        prev = rsu.reports.get(rep.vehicle_id)
        if prev is not None and (rep.seq <= prev.seq
                                 or rep.timestamp_ms < prev.timestamp_ms):
            continue                    # duplicate or out-of-order report
        rsu.reports[rep.vehicle_id] = rep
        rsu.report_tick[rep.vehicle_id] = rsu.tick_idx
        rsu.histories.setdefault(rep.vehicle_id, []).append(rep)

    now_ms = int(round(snapshot.time * 1000.0))
    ttl_ms = max(1, int(round(3 * rsu.scenario.dt * 1000.0)))
    commands: list[V2iCommand] = []
    staleness: dict[int, int] = {}
    for v in snapshot.cavs():
        if v.done != "running":
            continue
        age = rsu.tick_idx - rsu.report_tick.get(v.vid, -10 ** 9)
        staleness[v.vid] = min(age, 10 ** 9)
        if v.vid not in rsu.roles and v.vid in rsu.histories:
            try:
                rsu.roles[v.vid] = assign_role(rsu.histories[v.vid], rsu.geometry)
            except ValueError:
                pass
        if age > rsu.stale_after or v.vid not in rsu.roles:
            rsu.stale_count += 1
            if v.vid not in rsu.report_tick:
                continue                # nothing heard yet: no channel to command
            action = np.array([ACC_MIN, 0.0])
        else:
            obs = build_observation(snapshot, v.vid, rsu.scenario, rsu.geometry)
            action = clamp_action(rsu.actors[rsu.roles[v.vid]].mean_action(obs))
        rsu.seq += 1
        rsu.commands_sent += 1
        commands.append(V2iCommand(
            vehicle_id=v.vid, timestamp_ms=now_ms, a_acc=float(action[0]),
            a_steer=float(action[1]), seq=rsu.seq,
            valid_until_ms=now_ms + ttl_ms))

    ttcs = [_safety_metrics(snapshot, v.vid, rsu.scenario)[0]
            for v in snapshot.cavs() if v.done == "running"]
    min_ttc_now = min(ttcs) if ttcs else math.inf
    rsu.min_ttc = min(rsu.min_ttc, min_ttc_now)
    occupancy = sum(1 for v in snapshot.vehicles
                    if not v.exited and rsu.geometry.in_junction(v.x, v.y))
    record = MonitorRecord(tick=rsu.tick_idx, min_ttc=min_ttc_now,
                           occupancy=occupancy, staleness=staleness,
                           commands_sent=rsu.commands_sent,
                           stale_count=rsu.stale_count)
    rsu.tick_idx += 1
    return commands, record


def write_monitor_log(path: str | Path, records: list[MonitorRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MONITOR_COLUMNS)
        for r in records:
            writer.writerow([r.tick, repr(float(r.min_ttc)), r.commands_sent,
                             r.stale_count])


# -- closed-loop drivers ------------------------------------------------------------


def _log_initial(writer, episode: int, state) -> None:
    if writer is not None:
        for row in rows_from_state(episode, state):
            writer.write(row)


def _log_step(writer, episode: int, state, applied, already_exited) -> None:
    if writer is not None:
        for row in rows_from_state(episode, state, applied=applied,
                                   skip_ids=already_exited):
            writer.write(row)


def run_policy_episode(env: IntersectionEnv, actors: dict[str, GaussianActor],
                       episode: int = 0, writer: TrajectoryWriter | None = None,
                       **reset_kwargs) -> WorldState:
    """In-process reference loop: deterministic mean actions, no protocol."""
    obs = env.reset(**reset_kwargs)
    _log_initial(writer, episode, env.state)
    exited_logged: set[int] = set()
    while obs:
        acts = {vid: clamp_action(actors[env.state.vehicle(vid).maneuver]
                                  .mean_action(ob))
                for vid, ob in obs.items()}
        already = set(exited_logged)
        obs, _ = env.step(acts)
        _log_step(writer, episode, env.state, acts, already)
        exited_logged |= {v.vid for v in env.state.vehicles if v.exited}
    return env.state


def run_rsu_episode(env: IntersectionEnv, rsu: RsuState, episode: int = 0,
                    writer: TrajectoryWriter | None = None,
                    link_config: LinkConfig | None = None,
                    link_seed: int = 0,
                    monitor: list[MonitorRecord] | None = None,
                    declare_entries: bool = True,
                    declare_routes: bool = True,
                    **reset_kwargs) -> WorldState:
    """Closed loop through the protocol: vehicles report over per-vehicle
    uplinks, the coordinator ticks on the ground-truth snapshot, commands
    return over downlinks, and every message crosses the binary codec.

    One RsuState serves one episode (roles lock once assigned).  With
    ``declare_routes`` the vehicles announce their maneuver out of band at
    spawn, as a route declaration would; without it the coordinator falls
    back to lateral-drift inference over the report history.  A vehicle
    holding no in-date command applies the safe stop.  With the default
    ideal links the resulting trajectory is bit-identical to
    ``run_policy_episode``.
    """
    link_config = link_config or LinkConfig()
    obs = env.reset(**reset_kwargs)
    if declare_routes:
        for v in env.state.cavs():
            rsu.roles.setdefault(v.vid, v.maneuver)
    _log_initial(writer, episode, env.state)
    seq_ctr: dict[int, int] = {}
    uplinks: dict[int, Link] = {}
    downlinks: dict[int, Link] = {}
    link_root = np.random.SeedSequence((link_seed, episode))
    latest_cmd: dict[int, V2iCommand] = {}
    exited_logged: set[int] = set()

    def link_for(table: dict[int, Link], vid: int, side: int) -> Link:
        if vid not in table:
            table[vid] = Link(link_config, np.random.default_rng(
                np.random.SeedSequence((link_seed, episode, vid, side))))
        return table[vid]

    while obs:
        state = env.state
        now_ms = int(round(state.time * 1000.0))
        inbox: list[V2iStateReport] = []
        for v in state.cavs():
            if v.done != "running":
                continue
            seq_ctr[v.vid] = seq_ctr.get(v.vid, 0) + 1
            rep = V2iStateReport(
                vehicle_id=v.vid, timestamp_ms=now_ms, x=v.x, y=v.y,
                heading=v.heading, speed=v.speed,
                entry=v.entry if declare_entries else "", seq=seq_ctr[v.vid])
            link_for(uplinks, v.vid, 0).send(encode(rep), now_ms)
        for link in uplinks.values():
            inbox.extend(decode(data) for data in link.poll(now_ms))

        commands, record = tick(rsu, inbox, state)
        if monitor is not None:
            monitor.append(record)
        for cmd in commands:
            link_for(downlinks, cmd.vehicle_id, 1).send(encode(cmd), now_ms)
        for vid, link in downlinks.items():
            for data in link.poll(now_ms):
                cmd = decode(data)
                held = latest_cmd.get(vid)
                if held is None or cmd.seq > held.seq:
                    latest_cmd[vid] = cmd

        acts = {}
        for vid in obs:
            cmd = latest_cmd.get(vid)
            if cmd is None or cmd.valid_until_ms <= now_ms:
                acts[vid] = np.array([ACC_MIN, 0.0])     # no usable command
            else:
                acts[vid] = np.array([cmd.a_acc, cmd.a_steer])
        already = set(exited_logged)
        obs, _ = env.step(acts)
        _log_step(writer, episode, env.state, acts, already)
        exited_logged |= {v.vid for v in env.state.vehicles if v.exited}
    return env.state
