"""Intersection map geometry, fixed turning routes, and collision helpers.

The map is a four-arm unsignalized intersection centered at the origin,
one lane per direction (right-hand traffic).  The junction box is the
square of half-extent 2 * lane_width; every legal route is an entry arm
plus one of three maneuvers, with turns realized as circular arcs tangent
to the lane centerlines.  All routes are sampled into dense polylines so
controllers and conflict tests work purely on arclength.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

ARMS = ("south", "east", "north", "west")
MANEUVERS = ("left", "straight", "right")

# heading of a vehicle ENTERING from each arm
ENTRY_HEADING = {"south": math.pi / 2, "east": math.pi, "north": -math.pi / 2, "west": 0.0}

# counterclockwise arm order, used to derive exit arms
_CCW = ("east", "north", "west", "south")
_OPPOSITE = {"south": "north", "north": "south", "east": "west", "west": "east"}


def exit_arm(entry: str, maneuver: str) -> str:
    """Side of the map a vehicle leaves through."""
    opp = _OPPOSITE[entry]
    i = _CCW.index(opp)
    if maneuver == "straight":
        return opp
    if maneuver == "left":
        return _CCW[(i + 1) % 4]
    if maneuver == "right":
        return _CCW[(i - 1) % 4]
    raise ValueError(f"unknown maneuver {maneuver!r}")


def wrap_angle(theta) -> float | np.ndarray:
    """Wrap an angle to (-pi, pi]."""
    return math.pi - (math.pi - np.asarray(theta)) % (2.0 * math.pi)


def _rotation(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class Crosswalk:
    """Pedestrian crossing spanning one arm, just outside the junction box."""

    arm: str
    end_a: tuple[float, float]   # curbside waiting spots (off the roadway)
    end_b: tuple[float, float]
    center: tuple[float, float]
    radial: float                # distance of the crossing line from map center


@dataclass
class RouteSpec:
    """One entry-arm/maneuver route as a dense centerline polyline."""

    entry: str
    maneuver: str
    points: np.ndarray                  # (N, 2), spacing <= 0.5 m
    cum: np.ndarray                     # (N,) cumulative arclength, cum[0] = 0
    s_box_entry: float                  # arclength where the junction box starts
    s_box_exit: float
    turn_radius: float | None           # None for straight routes
    goal_center: np.ndarray
    goal_heading: float
    goal_half_len: float
    goal_half_wid: float
    crosswalk_s: dict[str, float] = field(default_factory=dict)  # arm -> arclength

    @property
    def length(self) -> float:
        return float(self.cum[-1])

    def point_at(self, s: float) -> np.ndarray:
        s = min(max(s, 0.0), self.length)
        i = int(np.searchsorted(self.cum, s, side="right")) - 1
        i = min(max(i, 0), len(self.points) - 2)
        seg = self.cum[i + 1] - self.cum[i]
        t = 0.0 if seg <= 0 else (s - self.cum[i]) / seg
        return self.points[i] * (1.0 - t) + self.points[i + 1] * t

    def heading_at(self, s: float) -> float:
        s = min(max(s, 0.0), self.length)
        i = int(np.searchsorted(self.cum, s, side="right")) - 1
        i = min(max(i, 0), len(self.points) - 2)
        d = self.points[i + 1] - self.points[i]
        return math.atan2(d[1], d[0])

    def project(self, x: float, y: float, s_hint: float | None = None,
                window: float = 20.0) -> float:
        """Arclength of the nearest point on the polyline, optionally restricted
        to a window around a previous estimate so progress stays monotone."""
        pts = self.points
        lo, hi = 0, len(pts)
        if s_hint is not None:
            lo = int(np.searchsorted(self.cum, s_hint - 2.0))
            hi = int(np.searchsorted(self.cum, s_hint + window)) + 1
            lo, hi = max(lo, 0), min(hi, len(pts))
            if hi - lo < 2:
                lo, hi = 0, len(pts)
        p = np.array([x, y])
        d = pts[lo:hi] - p
        i = lo + int(np.argmin(np.einsum("ij,ij->i", d, d)))
        best_s = float(self.cum[i])
        best_d2 = float(d[i - lo] @ d[i - lo])
        # refine on the two segments adjacent to the winning vertex
        for j in (i - 1, i):
            if j < 0 or j + 1 >= len(pts):
                continue
            ab = pts[j + 1] - pts[j]
            den = float(ab @ ab)
            if den <= 0.0:
                continue
            t = min(max(float((p - pts[j]) @ ab) / den, 0.0), 1.0)
            q = pts[j] + t * ab
            d2 = float((p - q) @ (p - q))
            if d2 < best_d2:
                best_d2 = d2
                best_s = float(self.cum[j] + t * (self.cum[j + 1] - self.cum[j]))
        return best_s

    def in_goal(self, x: float, y: float) -> bool:
        return point_in_rect(x, y, self.goal_center[0], self.goal_center[1],
                             self.goal_heading, self.goal_half_len, self.goal_half_wid)


class MapGeometry:
    """Derived geometry for one intersection variant."""

    def __init__(self, arm_length: float = 40.0, lane_width: float = 3.5,
                 crosswalk_offset: float = 1.0, goal_offset: float = 6.0):
        self.arm_length = float(arm_length)
        self.lane_width = float(lane_width)
        self.crosswalk_offset = float(crosswalk_offset)
        self.goal_offset = float(goal_offset)
        self.half_size = 2.0 * self.lane_width          # junction box half-extent
        self.lane_offset = 0.5 * self.lane_width        # lane centerline offset
        self.map_half = self.half_size + self.arm_length
        self.routes: dict[tuple[str, str], RouteSpec] = {}
        for entry in ARMS:
            for man in MANEUVERS:
                self.routes[(entry, man)] = self._build_route(entry, man)
        self.crosswalks: list[Crosswalk] = [self._build_crosswalk(arm) for arm in ARMS]
        self._conflict: dict[tuple[tuple[str, str], tuple[str, str]], bool] = {}

    # -- construction -----------------------------------------------------

    def _canonical_route(self, maneuver: str) -> tuple[np.ndarray, float | None]:
        """South-entry route polyline (heading north), before rotation."""
        o, h, arm = self.lane_offset, self.half_size, self.arm_length
        step = 0.5
        ys = np.arange(-(h + arm), -h, step)
        approach = np.column_stack([np.full_like(ys, o), ys])
        if maneuver == "straight":
            ys2 = np.arange(-h, h + arm + step / 2, step)
            inner = np.column_stack([np.full_like(ys2, o), ys2])
            return np.vstack([approach, inner]), None
        if maneuver == "left":
            center, radius = np.array([-h, -h]), h + o
            a0, a1 = 0.0, math.pi / 2                    # counterclockwise
        else:
            center, radius = np.array([h, -h]), h - o
            a0, a1 = math.pi, math.pi / 2                # clockwise
        n_arc = max(int(abs(a1 - a0) * radius / step), 8)
        angles = np.linspace(a0, a1, n_arc + 1)
        arc = center + radius * np.column_stack([np.cos(angles), np.sin(angles)])
        if maneuver == "left":
            xs = np.arange(-h, -(h + arm) - step / 2, -step)
            tail = np.column_stack([xs, np.full_like(xs, o)])
        else:
            xs = np.arange(h, h + arm + step / 2, step)
            tail = np.column_stack([xs, np.full_like(xs, -o)])
        return np.vstack([approach, arc, tail[1:]]), radius

    def _build_route(self, entry: str, maneuver: str) -> RouteSpec:
        pts, radius = self._canonical_route(maneuver)
        rot = _rotation(ENTRY_HEADING[entry] - math.pi / 2)
        pts = pts @ rot.T
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        cum = np.concatenate([[0.0], np.cumsum(seg)])

        h, arm = self.half_size, self.arm_length
        radial = np.max(np.abs(pts), axis=1)
        inside = radial <= h + 1e-9
        s_box_entry = float(cum[np.argmax(inside)])
        last_inside = len(inside) - 1 - np.argmax(inside[::-1])
        s_box_exit = float(cum[last_inside])

        exit_a = exit_arm(entry, maneuver)
        exit_heading = ENTRY_HEADING[_OPPOSITE[exit_a]]
        # goal rectangle sits on the exit lane, goal_offset past the box
        goal_s = s_box_exit + self.goal_offset
        i = min(int(np.searchsorted(cum, goal_s)), len(pts) - 1)
        goal_center = pts[i].copy()

        crosswalk_s = {}
        for arm_name in (entry, exit_a):
            target = h + self.crosswalk_offset
            r = np.max(np.abs(pts), axis=1)
            # entry crossing: radial decreasing through target; exit: increasing
            if arm_name == entry:
                idx = np.argmax(r <= target)
            else:
                after = np.argmax(inside)
                rr = r.copy()
                rr[:last_inside] = 0.0
                idx = np.argmax(rr >= target)
            crosswalk_s[arm_name] = float(cum[idx])

        return RouteSpec(
            entry=entry, maneuver=maneuver, points=pts, cum=cum,
            s_box_entry=s_box_entry, s_box_exit=s_box_exit, turn_radius=radius,
            goal_center=goal_center, goal_heading=exit_heading,
            goal_half_len=2.0, goal_half_wid=self.lane_width / 2.0,
            crosswalk_s=crosswalk_s)

    def _build_crosswalk(self, arm: str) -> Crosswalk:
        d = self.half_size + self.crosswalk_offset
        side = self.lane_width + 1.5   # waiting spot, off the roadway
        canonical_a = np.array([-side, -d])
        canonical_b = np.array([side, -d])
        rot = _rotation(ENTRY_HEADING[arm] - math.pi / 2)
        a, b = canonical_a @ rot.T, canonical_b @ rot.T
        center = (a + b) / 2.0
        return Crosswalk(arm=arm, end_a=(float(a[0]), float(a[1])),
                         end_b=(float(b[0]), float(b[1])),
                         center=(float(center[0]), float(center[1])), radial=d)

    # -- queries ------------------------------------------------------------

    def route(self, entry: str, maneuver: str) -> RouteSpec:
        return self.routes[(entry, maneuver)]

    def in_junction(self, x: float, y: float) -> bool:
        return abs(x) <= self.half_size and abs(y) <= self.half_size

    def routes_conflict(self, a: RouteSpec, b: RouteSpec) -> bool:
        """True when rectangles tracking the two routes through the box could
        pass within 0.8 m of each other (swept-body clearance, which catches
        corner overhang on tight arcs that a centerline test misses).

        Same-entry routes share the approach lane and are handled by
        car-following, not arbitration, so they report False here."""
        ka, kb = (a.entry, a.maneuver), (b.entry, b.maneuver)
        if ka == kb:
            return False
        if a.entry == b.entry:
            return False
        key = (ka, kb) if ka < kb else (kb, ka)
        hit = self._conflict.get(key)
        if hit is None:
            pa = self._swept_outline(a)
            pb = self._swept_outline(b)
            d2 = ((pa[:, None, :] - pb[None, :, :]) ** 2).sum(axis=2)
            hit = bool(d2.min() < 0.8 ** 2)
            self._conflict[key] = hit
        return hit

    # fleet footprint used for the swept-clearance conflict test
    _SWEEP_HALF_LEN = 2.4
    _SWEEP_HALF_WID = 1.0

    def _swept_outline(self, r: RouteSpec) -> np.ndarray:
        pad = 2.0  # include a little of the approach/exit
        samples = np.arange(max(r.s_box_entry - pad, 0.0),
                            min(r.s_box_exit + pad, r.length), 0.4)
        pts = []
        for s in samples:
            x, y = r.point_at(s)
            c = rect_corners(x, y, r.heading_at(s),
                             self._SWEEP_HALF_LEN, self._SWEEP_HALF_WID)
            pts.append(c)
            pts.append((c + np.roll(c, -1, axis=0)) / 2.0)  # edge midpoints
        return np.concatenate(pts, axis=0)


@lru_cache(maxsize=8)
def get_geometry(arm_length: float, lane_width: float, crosswalk_offset: float,
                 goal_offset: float) -> MapGeometry:
    return MapGeometry(arm_length, lane_width, crosswalk_offset, goal_offset)


# -- oriented rectangles -------------------------------------------------------


def rect_corners(cx: float, cy: float, heading: float,
                 half_len: float, half_wid: float) -> np.ndarray:
    c, s = math.cos(heading), math.sin(heading)
    rot = np.array([[c, -s], [s, c]])
    local = np.array([[half_len, half_wid], [half_len, -half_wid],
                      [-half_len, -half_wid], [-half_len, half_wid]])
    return local @ rot.T + np.array([cx, cy])


def _project(corners: np.ndarray, axis: np.ndarray) -> tuple[float, float]:
    d = corners @ axis
    return float(d.min()), float(d.max())


def rects_overlap(corners_a: np.ndarray, corners_b: np.ndarray) -> bool:
    """Separating-axis test for two oriented rectangles (touching counts)."""
    for corners in (corners_a, corners_b):
        for i in range(2):
            edge = corners[i + 1] - corners[i]
            axis = np.array([-edge[1], edge[0]])
            n = np.linalg.norm(axis)
            if n == 0.0:
                continue
            axis /= n
            lo_a, hi_a = _project(corners_a, axis)
            lo_b, hi_b = _project(corners_b, axis)
            if hi_a < lo_b or hi_b < lo_a:
                return False
    return True


def disc_rect_overlap(px: float, py: float, radius: float, cx: float, cy: float,
                      heading: float, half_len: float, half_wid: float) -> bool:
    """Disc against oriented rectangle, via the rectangle's local frame."""
    c, s = math.cos(heading), math.sin(heading)
    dx, dy = px - cx, py - cy
    lx = c * dx + s * dy
    ly = -s * dx + c * dy
    qx = min(max(lx, -half_len), half_len)
    qy = min(max(ly, -half_wid), half_wid)
    return (lx - qx) ** 2 + (ly - qy) ** 2 <= radius ** 2


def point_in_rect(px: float, py: float, cx: float, cy: float, heading: float,
                  half_len: float, half_wid: float) -> bool:
    c, s = math.cos(heading), math.sin(heading)
    dx, dy = px - cx, py - cy
    lx = c * dx + s * dy
    ly = -s * dx + c * dy
    return abs(lx) <= half_len and abs(ly) <= half_wid


def time_to_collision(p1, v1, r1: float, p2, v2, r2: float) -> float:
    """First time two constant-velocity discs touch; inf if they never do.

    Solves |dp + dv t| = r1 + r2 for the smallest t >= 0.  Already
    overlapping discs return 0."""
    dp = np.asarray(p2, dtype=np.float64) - np.asarray(p1, dtype=np.float64)
    dv = np.asarray(v2, dtype=np.float64) - np.asarray(v1, dtype=np.float64)
    rr = r1 + r2
    c = float(dp @ dp) - rr * rr
    if c <= 0.0:
        return 0.0
    a = float(dv @ dv)
    b = 2.0 * float(dp @ dv)
    if a == 0.0:
        return math.inf
    disc = b * b - 4.0 * a * c
    if disc < 0.0:
        return math.inf
    t = (-b - math.sqrt(disc)) / (2.0 * a)
    return t if t >= 0.0 else math.inf
