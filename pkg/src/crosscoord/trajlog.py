"""Comma-separated trajectory logs, one row per (step, entity).

The same schema is used for simulator rollout logs and for the files the
offline stage ingests, so anything the simulator writes can be fed straight
back into dataset construction.  Column order:

    episode, step, time, id, kind, role, x, y, heading, speed, a_acc, a_steer

- episode: int, episode index within the file
- step:    int, frame index within the episode (0 = initial state)
- time:    float seconds since episode start
- id:      entity id; unique among vehicles (resp. pedestrians) of an episode
- kind:    cav | background | ped
- role:    maneuver label (left | straight | right) for vehicles, empty for peds
- x, y:    position in meters, world frame
- heading: rad, world frame
- speed:   m/s (pedestrians: 0 while waiting or finished)
- a_acc, a_steer: the action applied by a controlled vehicle during the step
  that produced this row; empty on step-0 rows and on uncontrolled entities

A row describes the state *after* `step` simulation steps.  Vehicles stop
being logged after they leave the map (one final row is written with the
exit pose).  Floats are written with repr precision, so write-then-read
reproduces every value bit for bit.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

log = logging.getLogger(__name__)

COLUMNS = ("episode", "step", "time", "id", "kind", "role",
           "x", "y", "heading", "speed", "a_acc", "a_steer")

KINDS = ("cav", "background", "ped")
ROLES = ("left", "straight", "right", "")


class SchemaError(ValueError):
    """File header does not match the trajectory log schema."""


@dataclass
class LogRow:
    episode: int
    step: int
    time: float
    id: int
    kind: str
    role: str
    x: float
    y: float
    heading: float
    speed: float
    a_acc: float | None = None
    a_steer: float | None = None


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def _row_to_fields(r: LogRow) -> list[str]:
    return [str(r.episode), str(r.step), _fmt(r.time), str(r.id), r.kind, r.role,
            _fmt(r.x), _fmt(r.y), _fmt(r.heading), _fmt(r.speed),
            _fmt(r.a_acc), _fmt(r.a_steer)]


def _parse_fields(rec: list[str]) -> LogRow:
    if len(rec) != len(COLUMNS):
        raise ValueError(f"expected {len(COLUMNS)} fields, got {len(rec)}")
    kind, role = rec[4], rec[5]
    if kind not in KINDS:
        raise ValueError(f"unknown kind {kind!r}")
    if role not in ROLES:
        raise ValueError(f"unknown role {role!r}")
    return LogRow(
        episode=int(rec[0]), step=int(rec[1]), time=float(rec[2]),
        id=int(rec[3]), kind=kind, role=role,
        x=float(rec[6]), y=float(rec[7]),
        heading=float(rec[8]), speed=float(rec[9]),
        a_acc=float(rec[10]) if rec[10] else None,
        a_steer=float(rec[11]) if rec[11] else None)


class TrajectoryWriter:
    """Streams log rows to a file; writes the header up front."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w", newline="")
        self._fh.write(",".join(COLUMNS) + "\n")

    def write(self, row: LogRow) -> None:
        self._fh.write(",".join(_row_to_fields(row)) + "\n")

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def write_log(path, rows) -> None:
    with TrajectoryWriter(path) as w:
        for r in rows:
            w.write(r)


def read_log(path) -> list[LogRow]:
    """Parse a trajectory log.

    Raises SchemaError when the header is missing or wrong.  Malformed data
    rows are skipped with a warning naming their line numbers; everything
    parseable is returned in file order.
    """
    rows: list[LogRow] = []
    bad: list[int] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise SchemaError(f"{path}: empty file, expected header "
                              + ",".join(COLUMNS))
        if [h.strip() for h in header] != list(COLUMNS):
            raise SchemaError(f"{path}: header {header} does not match "
                              f"expected columns {list(COLUMNS)}")
        for lineno, rec in enumerate(reader, start=2):
            if not rec or (len(rec) == 1 and not rec[0].strip()):
                continue
            try:
                rows.append(_parse_fields(rec))
            except ValueError:
                bad.append(lineno)
    if bad:
        shown = ", ".join(str(n) for n in bad[:10])
        more = "" if len(bad) <= 10 else f" (+{len(bad) - 10} more)"
        log.warning("%s: skipped %d malformed row(s) at line(s) %s%s",
                    path, len(bad), shown, more)
    return rows


def rows_from_state(episode: int, state, applied=None,
                    skip_ids=None) -> list[LogRow]:
    """Snapshot every entity of a world state as log rows.

    `applied` maps a controlled vehicle's id to the action that produced this
    state; pass None for the initial state.  `skip_ids` suppresses vehicles
    whose exit row was already written.
    """
    applied = applied or {}
    skip = skip_ids or ()
    rows = []
    for v in state.vehicles:
        if v.vid in skip:
            continue
        a = applied.get(v.vid)
        rows.append(LogRow(
            episode=episode, step=state.step_idx, time=state.time,
            id=v.vid, kind=v.kind, role=v.maneuver,
            x=v.x, y=v.y, heading=v.heading, speed=v.speed,
            a_acc=None if a is None else float(a[0]),
            a_steer=None if a is None else float(a[1])))
    for p in state.peds:
        rows.append(LogRow(
            episode=episode, step=state.step_idx, time=state.time,
            id=p.pid, kind="ped", role="",
            x=p.x, y=p.y, heading=p.heading, speed=p.speed))
    return rows
