"""Scenario types, frame rotation, observation tokens, and dataset files.

A scenario is expressed in the ego frame: the ego vehicle sits at the
origin with heading zero, the road continues straight for a stretch
behind it, and every other element (agents, drivable cells, lanes,
route, lights) is positioned relative to that.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from .geom import (
    IDENTITY_POSE,
    ConvexPolygon,
    Point2,
    Pose2,
    Trajectory,
    normalize_angle,
    rotate_point,
    rotate_trajectory,
)
from .vocab import VocabSpec

DATASET_FORMAT_VERSION = 1

# Angular half-width of the observation mask for 1/3/5 camera rigs.
FOV_1CAM = math.pi / 3.0
FOV_3CAM = 3.0 * math.pi / 4.0
FOV_5CAM = math.pi
DEFAULT_FOV = FOV_3CAM

TOKEN_KINDS = ("ego", "agent", "lane", "light", "boundary")
TOKEN_DIM = 7


class FormatVersionMismatch(ValueError):
    """Dataset file written by an incompatible format version."""


class GenerationFailed(RuntimeError):
    """Rejection sampling could not produce a valid scenario."""


class NoSafeTrajectory(RuntimeError):
    """Every vocabulary entry scores zero; the scenario is discarded."""


@dataclass(frozen=True)
class Agent:
    """A vehicle moving at constant velocity along its heading."""

    pose: Pose2
    speed: float  # [m/s]
    length: float = 4.6
    width: float = 1.9

    def __post_init__(self):
        if not 0.0 <= self.speed <= 20.0:
            raise ValueError(f"agent speed {self.speed} outside [0, 20]")

    def velocity(self) -> np.ndarray:
        return self.speed * np.array(
            [math.cos(self.pose.heading), math.sin(self.pose.heading)]
        )


@dataclass(frozen=True)
class TrafficLight:
    stop_line: tuple[Point2, Point2]
    state: str  # "red" or "green"

    def __post_init__(self):
        if self.state not in ("red", "green"):
            raise ValueError(f"unknown light state {self.state!r}")

    @property
    def is_red(self) -> bool:
        return self.state == "red"


@dataclass(frozen=True)
class EgoHistory:
    """Last half second of ego motion."""

    prev_position: Point2  # ego center one history step ago
    speed: float  # current speed [m/s]
    accel: float  # current longitudinal accel [m/s^2]


@dataclass(frozen=True)
class Lane:
    """Centerline polyline with an explicit tangent heading per point."""

    points: tuple[Point2, ...]
    directions: tuple[float, ...]

    def __post_init__(self):
        if len(self.points) < 2 or len(self.points) != len(self.directions):
            raise ValueError("lane needs >= 2 points with matching directions")

    @cached_property
    def xy(self) -> np.ndarray:
        out = np.array([[p.x, p.y] for p in self.points], dtype=np.float64)
        out.setflags(write=False)
        return out

    @cached_property
    def dir_array(self) -> np.ndarray:
        out = np.array(self.directions, dtype=np.float64)
        out.setflags(write=False)
        return out


@dataclass(frozen=True)
class GenConfig:
    """Knobs of the procedural generator."""

    vocab: VocabSpec = field(default_factory=VocabSpec)
    turn_fraction: float = 0.08
    curve_fraction: float = 0.22
    tee_fraction: float = 0.18
    agent_count: int = 3  # hard cap; 0 disables all agents
    light_prob: float = 0.3
    red_prob: float = 0.7
    lead_prob: float = 0.55
    oncoming_prob: float = 0.5
    crossing_prob: float = 0.85
    # History comfort tolerates at most ~2 m/s of start-speed mismatch, so
    # the ego speed range stays below the band where every entry fails it.
    ego_speed_min: float = 2.0
    ego_speed_max: float = 8.0
    lane_width: float = 3.5
    road_length: float = 75.0
    road_back: float = 25.0
    # Gentle curvatures keep even the longest expert under a 30 degree
    # turning angle; sharp ones push every unobstructed expert past it.
    gentle_kappa_min: float = 0.004
    gentle_kappa_max: float = 0.0146
    turn_kappa_min: float = 0.04
    turn_kappa_max: float = 0.06
    stop_line_min: float = 14.0
    stop_line_max: float = 26.0
    max_scenario_attempts: int = 8

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "vocab"}
        d["vocab"] = self.vocab.to_dict()
        return d

    @staticmethod
    def from_dict(d: dict) -> "GenConfig":
        d = dict(d)
        d["vocab"] = VocabSpec.from_dict(d["vocab"])
        return GenConfig(**d)


@dataclass(frozen=True)
class Scenario:
    seed: int
    kind: str
    ego_speed: float
    ego_history: EgoHistory
    agents: tuple[Agent, ...]
    drivable: tuple[ConvexPolygon, ...]
    lanes: tuple[Lane, ...]
    route: tuple[Point2, ...]
    lights: tuple[TrafficLight, ...]
    expert: Trajectory | None = None

    def __post_init__(self):
        if len(self.route) < 2:
            raise ValueError("route needs at least 2 points")
        r0 = self.route[0]
        if math.hypot(r0.x, r0.y) > 1e-9:
            raise ValueError("route must start at the origin")
        if not self.drivable or not self.lanes:
            raise ValueError("scenario needs drivable cells and lanes")

    @property
    def ego_pose(self) -> Pose2:
        return IDENTITY_POSE

    @cached_property
    def route_xy(self) -> np.ndarray:
        out = np.array([[p.x, p.y] for p in self.route], dtype=np.float64)
        out.setflags(write=False)
        return out

    @cached_property
    def route_cumlen(self) -> np.ndarray:
        seg = np.diff(self.route_xy, axis=0)
        out = np.concatenate([[0.0], np.cumsum(np.hypot(seg[:, 0], seg[:, 1]))])
        out.setflags(write=False)
        return out

    @cached_property
    def lane_segments(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Concatenated (starts, ends, directions) over all lanes.

        A segment's direction is the stored heading of its start point, so
        lane orientation never depends on point ordering.
        """
        starts, ends, dirs = [], [], []
        for lane in self.lanes:
            xy = lane.xy
            starts.append(xy[:-1])
            ends.append(xy[1:])
            dirs.append(lane.dir_array[:-1])
        return (
            np.concatenate(starts, axis=0),
            np.concatenate(ends, axis=0),
            np.concatenate(dirs, axis=0),
        )

    @cached_property
    def drivable_halfplanes(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Per cell (A, b) with inside(p) == all(A @ p >= b)."""
        out = []
        for cell in self.drivable:
            v = cell.array
            e = np.roll(v, -1, axis=0) - v
            A = np.stack([-e[:, 1], e[:, 0]], axis=1)
            b = np.einsum("ij,ij->i", A, v)
            out.append((A, b))
        return out

    @cached_property
    def drivable_bounds(self) -> np.ndarray:
        """Per cell (xmin, ymin, xmax, ymax), a cheap point prefilter."""
        out = np.array(
            [
                [
                    cell.array[:, 0].min(),
                    cell.array[:, 1].min(),
                    cell.array[:, 0].max(),
                    cell.array[:, 1].max(),
                ]
                for cell in self.drivable
            ]
        )
        out.setflags(write=False)
        return out


def sample_rotation(rng: np.random.Generator, theta_max: float) -> float:
    """Draw a rotation angle uniformly from [-theta_max, theta_max]."""
    return float(rng.uniform(-theta_max, theta_max))


def rotate_scenario(s: Scenario, theta: float) -> Scenario:
    """Re-express the scenario with the ego rotated left by `theta`.

    The world rotates by -theta about the origin; the ego stays at the
    identity pose. The expert trajectory is rigidly rotated rather than
    re-derived, matching how augmented training samples are built.
    """
    a = -theta
    origin = Point2(0.0, 0.0)

    def rp(p: Point2) -> Point2:
        return rotate_point(p, origin, a)

    agents = tuple(
        replace(ag, pose=Pose2(rp(ag.pose.position), ag.pose.heading + a))
        for ag in s.agents
    )
    drivable = tuple(
        ConvexPolygon(tuple(rp(v) for v in cell.vertices)) for cell in s.drivable
    )
    lanes = tuple(
        Lane(
            tuple(rp(p) for p in lane.points),
            tuple(normalize_angle(d + a) for d in lane.directions),
        )
        for lane in s.lanes
    )
    route = tuple(rp(p) for p in s.route)
    lights = tuple(
        TrafficLight((rp(l.stop_line[0]), rp(l.stop_line[1])), l.state) for l in s.lights
    )
    history = replace(s.ego_history, prev_position=rp(s.ego_history.prev_position))
    expert = rotate_trajectory(s.expert, a) if s.expert is not None else None
    return replace(
        s,
        agents=agents,
        drivable=drivable,
        lanes=lanes,
        route=route,
        lights=lights,
        ego_history=history,
        expert=expert,
    )


@dataclass(frozen=True)
class ObservationTokens:
    """Deterministic token set describing what the planner may see."""

    kinds: np.ndarray  # (T,) int, indices into TOKEN_KINDS
    features: np.ndarray  # (T, TOKEN_DIM) float64
    fov_halfangle: float

    def __len__(self) -> int:
        return len(self.kinds)


def _bearing(x: float, y: float) -> float:
    return math.atan2(y, x)


def observe(
    s: Scenario,
    fov_halfangle: float = DEFAULT_FOV,
    max_lane_points: int = 12,
    max_boundary_points: int = 12,
) -> ObservationTokens:
    """Tokenize a scenario under an angular observation mask.

    Emits the ego state plus every agent/lane point/light/boundary point
    whose source position has |bearing| <= fov_halfangle. Lane and
    boundary points keep the nearest max_*_points. Tokens are ordered by
    (kind, distance, bearing) so the output is reproducible.
    """
    if not 0.0 < fov_halfangle <= math.pi:
        raise ValueError("fov_halfangle must lie in (0, pi]")
    rows: list[tuple[int, float, float, np.ndarray]] = []

    def visible(p: Point2) -> bool:
        return abs(_bearing(p.x, p.y)) <= fov_halfangle

    def push(kind: int, p: Point2, feat: list[float]):
        f = np.zeros(TOKEN_DIM)
        f[: len(feat)] = feat
        rows.append((kind, math.hypot(p.x, p.y), _bearing(p.x, p.y), f))

    push(0, Point2(0.0, 0.0), [s.ego_speed, s.ego_history.accel])

    for ag in s.agents:
        p = ag.pose.position
        if visible(p):
            push(
                1,
                p,
                [p.x, p.y, math.cos(ag.pose.heading), math.sin(ag.pose.heading),
                 ag.speed, ag.length, ag.width],
            )

    lane_rows = []
    for lane in s.lanes:
        for p, d in zip(lane.points, lane.directions):
            if visible(p):
                lane_rows.append((math.hypot(p.x, p.y), _bearing(p.x, p.y), p, d))
    lane_rows.sort(key=lambda r: (r[0], r[1]))
    for dist, ang, p, d in lane_rows[:max_lane_points]:
        push(2, p, [p.x, p.y, math.cos(d), math.sin(d)])

    for light in s.lights:
        a, b = light.stop_line
        mid = Point2(0.5 * (a.x + b.x), 0.5 * (a.y + b.y))
        if visible(mid):
            push(3, mid, [a.x, a.y, b.x, b.y, 1.0 if light.is_red else 0.0])

    seen = set()
    boundary_rows = []
    for cell in s.drivable:
        for v in cell.vertices:
            key = (round(v.x, 6), round(v.y, 6))
            if key in seen:
                continue
            seen.add(key)
            if visible(v):
                boundary_rows.append((math.hypot(v.x, v.y), _bearing(v.x, v.y), v))
    boundary_rows.sort(key=lambda r: (r[0], r[1]))
    for dist, ang, v in boundary_rows[:max_boundary_points]:
        push(4, v, [v.x, v.y])

    rows.sort(key=lambda r: (r[0], r[1], r[2]))
    kinds = np.array([r[0] for r in rows], dtype=np.int64)
    feats = np.stack([r[3] for r in rows], axis=0)
    kinds.setflags(write=False)
    feats.setflags(write=False)
    return ObservationTokens(kinds, feats, fov_halfangle)


# Serialization. Floats go through JSON untouched (repr round-trips exactly).


def _point(p: Point2) -> list:
    return [p.x, p.y]


def _traj_to_dict(t: Trajectory) -> dict:
    return {
        "waypoints": [_point(p) for p in t.waypoints],
        "dt": t.dt,
        "start": [t.start_pose.position.x, t.start_pose.position.y, t.start_pose.heading],
        "headings": list(t.headings) if t.headings is not None else None,
    }


def _traj_from_dict(d: dict) -> Trajectory:
    sx, sy, sh = d["start"]
    return Trajectory(
        tuple(Point2(x, y) for x, y in d["waypoints"]),
        d["dt"],
        Pose2(Point2(sx, sy), sh),
        tuple(d["headings"]) if d["headings"] is not None else None,
    )


def scenario_to_dict(s: Scenario) -> dict:
    return {
        "seed": s.seed,
        "kind": s.kind,
        "ego_speed": s.ego_speed,
        "ego_history": {
            "prev_position": _point(s.ego_history.prev_position),
            "speed": s.ego_history.speed,
            "accel": s.ego_history.accel,
        },
        "agents": [
            {
                "position": _point(a.pose.position),
                "heading": a.pose.heading,
                "speed": a.speed,
                "length": a.length,
                "width": a.width,
            }
            for a in s.agents
        ],
        "drivable": [[_point(v) for v in cell.vertices] for cell in s.drivable],
        "lanes": [
            {"points": [_point(p) for p in lane.points], "directions": list(lane.directions)}
            for lane in s.lanes
        ],
        "route": [_point(p) for p in s.route],
        "lights": [
            {"stop_line": [_point(l.stop_line[0]), _point(l.stop_line[1])], "state": l.state}
            for l in s.lights
        ],
        "expert": _traj_to_dict(s.expert) if s.expert is not None else None,
    }


def scenario_from_dict(d: dict) -> Scenario:
    hist = d["ego_history"]
    return Scenario(
        seed=d["seed"],
        kind=d["kind"],
        ego_speed=d["ego_speed"],
        ego_history=EgoHistory(
            Point2(*hist["prev_position"]), hist["speed"], hist["accel"]
        ),
        agents=tuple(
            Agent(
                Pose2(Point2(*a["position"]), a["heading"]),
                a["speed"],
                a["length"],
                a["width"],
            )
            for a in d["agents"]
        ),
        drivable=tuple(
            ConvexPolygon(tuple(Point2(x, y) for x, y in cell)) for cell in d["drivable"]
        ),
        lanes=tuple(
            Lane(
                tuple(Point2(x, y) for x, y in lane["points"]),
                tuple(lane["directions"]),
            )
            for lane in d["lanes"]
        ),
        route=tuple(Point2(x, y) for x, y in d["route"]),
        lights=tuple(
            TrafficLight(
                (Point2(*l["stop_line"][0]), Point2(*l["stop_line"][1])), l["state"]
            )
            for l in d["lights"]
        ),
        expert=_traj_from_dict(d["expert"]) if d["expert"] is not None else None,
    )


@dataclass(frozen=True)
class DatasetRecord:
    split: str  # "train" or "test"
    scenario: Scenario


@dataclass
class DatasetFile:
    gen_config: GenConfig
    seed_range: tuple[int, int] | None
    records: list[DatasetRecord]
    sha256: str = ""

    def split(self, name: str) -> list[Scenario]:
        return [r.scenario for r in self.records if r.split == name]


def save_dataset(
    path,
    records: list[DatasetRecord],
    gen_config: GenConfig,
    seed_range: tuple[int, int] | None = None,
) -> str:
    """Write a line-delimited dataset file; returns its sha256 digest."""
    header = {
        "format_version": DATASET_FORMAT_VERSION,
        "gen_config": gen_config.to_dict(),
        "seed_range": list(seed_range) if seed_range is not None else None,
    }
    lines = [json.dumps(header, sort_keys=True)]
    for rec in records:
        lines.append(
            json.dumps({"split": rec.split, "scenario": scenario_to_dict(rec.scenario)},
                       sort_keys=True)
        )
    blob = ("\n".join(lines) + "\n").encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(blob)
    return hashlib.sha256(blob).hexdigest()


def load_dataset(path) -> DatasetFile:
    with open(path, "rb") as fh:
        blob = fh.read()
    lines = blob.decode("utf-8").splitlines()
    if not lines:
        raise FormatVersionMismatch("empty dataset file")
    header = json.loads(lines[0])
    version = header.get("format_version")
    if version != DATASET_FORMAT_VERSION:
        raise FormatVersionMismatch(
            f"dataset format {version!r}, expected {DATASET_FORMAT_VERSION}"
        )
    records = []
    for line in lines[1:]:
        if not line.strip():
            continue
        d = json.loads(line)
        records.append(DatasetRecord(d["split"], scenario_from_dict(d["scenario"])))
    rng = header.get("seed_range")
    return DatasetFile(
        gen_config=GenConfig.from_dict(header["gen_config"]),
        seed_range=tuple(rng) if rng is not None else None,
        records=records,
        sha256=hashlib.sha256(blob).hexdigest(),
    )
