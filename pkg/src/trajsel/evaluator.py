"""Rule-based trajectory scoring: per-metric subscores and their aggregates.

All rules are desk-scale proxies with configurable thresholds. Penalties
are binary {0, 1}; averaged metrics lie in [0, 1]. The engine scores the
whole vocabulary of a scenario in one vectorized pass.

Collision-style rules (collision, drivable area, traffic light) run on a
densified sample set that includes segment midpoints so fast entries
cannot step over an obstacle between waypoints.
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
import weakref
from dataclasses import dataclass

import numpy as np

from .geom import normalize_angles
from .scenario import NoSafeTrajectory, Scenario
from .vocab import (
    TrajectoryVocabulary,
    l2_to_entries,
    normalized_distance,
)
from .geom import Trajectory

METRICS = ("nc", "dac", "ddc", "tlc", "ep", "ttc", "lk", "hc", "ec", "c")
_MIDX = {m: i for i, m in enumerate(METRICS)}


class KOutOfRange(ValueError):
    """Top-K request outside [1, N]."""


@dataclass(frozen=True)
class EvaluatorConfig:
    """Thresholds and weight tables of the rule evaluator."""

    ego_length: float = 4.6
    ego_width: float = 1.9
    ttc_checks: tuple[float, ...] = (0.5, 1.0)  # [s] constant-velocity lookaheads
    max_long_accel: float = 4.0  # [m/s^2]
    max_lat_accel: float = 4.9  # [m/s^2]
    max_jerk: float = 8.4  # [m/s^3]
    max_yaw_rate: float = 0.95  # [rad/s]
    lk_max_offset: float = 0.5  # [m] lateral offset from nearest centerline
    ec_window: float = 1.0  # [s]
    ec_max_delta: float = 2.0  # [m/s^2] mean accel change between windows
    ep_min_ref_progress: float = 0.5  # [m] below this progress ratio degenerates to 1
    ddc_max_dev: float = math.pi / 2  # [rad] heading deviation from lane direction
    moving_eps: float = 0.1  # [m/s] direction checks skip slower samples
    # Version 1 aggregate: product over penalties, weighted mean over the rest.
    penalties_v1: tuple[str, ...] = ("nc", "dac")
    average_v1: tuple[tuple[str, float], ...] = (("ep", 5.0), ("ttc", 5.0), ("c", 2.0))
    # Version 2 adds direction/light penalties and swaps comfort terms.
    penalties_v2: tuple[str, ...] = ("nc", "dac", "ddc", "tlc")
    average_v2: tuple[tuple[str, float], ...] = (
        ("ep", 5.0),
        ("ttc", 5.0),
        ("lk", 2.0),
        ("hc", 1.0),
        ("ec", 1.0),
    )

    def penalties(self, version: str) -> tuple[str, ...]:
        return self.penalties_v1 if version == "v1" else self.penalties_v2

    def average(self, version: str) -> tuple[tuple[str, float], ...]:
        return self.average_v1 if version == "v1" else self.average_v2

    def to_dict(self) -> dict:
        return {
            k: (list(v) if isinstance(v := getattr(self, k), tuple) else v)
            for k in self.__dataclass_fields__
        }


DEFAULT_EVAL_CONFIG = EvaluatorConfig()


@dataclass(frozen=True)
class SubscoreVector:
    nc: float
    dac: float
    ddc: float
    tlc: float
    ep: float
    ttc: float
    lk: float
    hc: float
    ec: float
    c: float

    def as_dict(self) -> dict[str, float]:
        return {m: getattr(self, m) for m in METRICS}

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, m) for m in METRICS], dtype=np.float64)


def aggregate(sub, cfg: EvaluatorConfig = DEFAULT_EVAL_CONFIG, version: str = "v2") -> float:
    """Driving score in [0, 1]: (product of penalties) x (weighted mean).

    `sub` may be a SubscoreVector or a metric->value mapping. Version
    "v1" uses the collision/drivable penalties with progress, time-to-
    collision and comfort in the average; "v2" adds direction and light
    penalties and the lane-keeping/history/extended comfort terms.
    """
    vals = sub.as_dict() if isinstance(sub, SubscoreVector) else dict(sub)
    pen = 1.0
    for m in cfg.penalties(version):
        pen *= vals[m]
    num = sum(w * vals[m] for m, w in cfg.average(version))
    den = sum(w for _, w in cfg.average(version))
    return pen * num / den


def _aggregate_matrix(mat: np.ndarray, cfg: EvaluatorConfig, version: str) -> np.ndarray:
    pen = np.ones(mat.shape[0])
    for m in cfg.penalties(version):
        pen = pen * mat[:, _MIDX[m]]
    num = np.zeros(mat.shape[0])
    den = 0.0
    for m, w in cfg.average(version):
        num += w * mat[:, _MIDX[m]]
        den += w
    return pen * num / den


@dataclass
class LabelSet:
    """Ground-truth labels of every vocabulary entry for one scenario."""

    subscores: np.ndarray  # (N, len(METRICS)) float64
    progress: np.ndarray  # (N,) route arc length [m]
    pdms: np.ndarray  # (N,) version-1 aggregate
    epdms: np.ndarray  # (N,) version-2 aggregate
    l2: np.ndarray | None = None  # (N,) RMS distance to the expert [m]
    nd: np.ndarray | None = None  # (N,) normalized distance in (0, 1]

    def metric(self, name: str) -> np.ndarray:
        return self.subscores[:, _MIDX[name]]

    def gt(self, version: str | int = "v2") -> np.ndarray:
        # both spellings appear: the evaluator keys on "v1"/"v2", the
        # inference coefficients on 1/2
        if version in ("v1", 1):
            return self.pdms
        if version in ("v2", 2):
            return self.epdms
        raise ValueError(f"unknown scoring version {version!r}")

    def __len__(self) -> int:
        return self.subscores.shape[0]


# Dense sample assembly ------------------------------------------------------


def _assemble_samples(start_xy, start_heading, positions, headings):
    """Sample positions/headings including the shared start pose.

    positions (B, L, 2), headings (B, L) -> (B, L+1, 2), (B, L+1).
    """
    B, L, _ = positions.shape
    pos = np.empty((B, L + 1, 2))
    pos[:, 0] = start_xy
    pos[:, 1:] = positions
    head = np.empty((B, L + 1))
    head[:, 0] = start_heading
    head[:, 1:] = headings
    return pos, head


def _densify(pos, head):
    """Insert segment midpoints for collision-style checks.

    Midpoint headings use the segment direction (previous sample heading
    when the segment is near stationary).
    """
    B, S, _ = pos.shape
    mid = 0.5 * (pos[:, :-1] + pos[:, 1:])
    seg = pos[:, 1:] - pos[:, :-1]
    seg_len = np.hypot(seg[..., 0], seg[..., 1])
    mid_head = np.where(seg_len > 1e-9, np.arctan2(seg[..., 1], seg[..., 0]), head[:, :-1])
    dense_pos = np.empty((B, 2 * S - 1, 2))
    dense_pos[:, 0::2] = pos
    dense_pos[:, 1::2] = mid
    dense_head = np.empty((B, 2 * S - 1))
    dense_head[:, 0::2] = head
    dense_head[:, 1::2] = mid_head
    return dense_pos, dense_head


def _axes(headings):
    """Forward and left unit vectors, shape headings.shape + (2, 2)."""
    c, s = np.cos(headings), np.sin(headings)
    out = np.empty(np.shape(headings) + (2, 2))
    out[..., 0, 0] = c
    out[..., 0, 1] = s
    out[..., 1, 0] = -s
    out[..., 1, 1] = c
    return out


def _rects_overlap(ce, ae, he, ca, aa, ha):
    """Separating-axis overlap of oriented rectangle batches.

    ce (B, T, 2) ego centers, ae (B, T, 2, 2) ego axes, he (2,) half extents;
    ca (T, 2), aa (T, 2, 2), ha (2,) for the agent. Boundary contact counts
    as overlap. Returns (B, T) bool.
    """
    d = ce - ca  # (B, T, 2)
    overlap = None
    for k in range(2):  # ego axes
        u = ae[..., k, :]  # (B, T, 2)
        dist = np.abs(np.einsum("btx,btx->bt", d, u))
        ra = ha[0] * np.abs(np.einsum("tx,btx->bt", aa[:, 0, :], u)) + ha[1] * np.abs(
            np.einsum("tx,btx->bt", aa[:, 1, :], u)
        )
        ok = dist <= he[k] + ra
        overlap = ok if overlap is None else (overlap & ok)
    for k in range(2):  # agent axes
        u = aa[:, k, :]  # (T, 2)
        dist = np.abs(np.einsum("btx,tx->bt", d, u))
        re = he[0] * np.abs(np.einsum("btx,tx->bt", ae[..., 0, :], u)) + he[1] * np.abs(
            np.einsum("btx,tx->bt", ae[..., 1, :], u)
        )
        ok = dist <= re + ha[k]
        overlap &= ok
    return overlap


def _collision_flags(s, cfg, dense_pos, dense_head, dense_vel, times):
    """(no_collision, ttc_ok) bool arrays of shape (B,)."""
    B, T, _ = dense_pos.shape
    ego_axes = _axes(dense_head)
    he = np.array([0.5 * cfg.ego_length, 0.5 * cfg.ego_width])
    collide = np.zeros(B, dtype=bool)
    ttc_hit = np.zeros(B, dtype=bool)
    for ag in s.agents:
        ha = np.array([0.5 * ag.length, 0.5 * ag.width])
        aa = _axes(np.full(T, ag.pose.heading))
        vel = ag.velocity()
        base = ag.pose.position.as_array()[None, :] + times[:, None] * vel[None, :]
        collide |= np.any(_rects_overlap(dense_pos, ego_axes, he, base, aa, ha), axis=1)
        for tau in cfg.ttc_checks:
            ego_fut = dense_pos + tau * dense_vel
            ag_fut = base + tau * vel[None, :]
            ttc_hit |= np.any(
                _rects_overlap(ego_fut, ego_axes, he, ag_fut, aa, ha), axis=1
            )
    return ~collide, ~(ttc_hit | collide)


def _drivable_flags(s, cfg, dense_pos, dense_head):
    """Every footprint corner stays in the drivable union; shape (B,)."""
    from .geom import oriented_rect_corners

    corners = oriented_rect_corners(dense_pos, dense_head, cfg.ego_length, cfg.ego_width)
    B, T = dense_pos.shape[:2]
    flat = corners.reshape(-1, 2)
    inside = np.zeros(flat.shape[0], dtype=bool)
    x, y = flat[:, 0], flat[:, 1]
    # Bounding-box prefilter: a point can only belong to cells whose box
    # contains it, and points already claimed need no further tests.
    for (A, b), (x0, y0, x1, y1) in zip(s.drivable_halfplanes, s.drivable_bounds):
        cand = np.flatnonzero(~inside & (x >= x0) & (x <= x1) & (y >= y0) & (y <= y1))
        if cand.size == 0:
            continue
        ok = np.all(flat[cand] @ A.T >= b[None, :], axis=1)
        inside[cand[ok]] = True
    return np.all(inside.reshape(B, T * 4), axis=1)


def _light_flags(s, pos):
    """True when the center path never crosses a red stop line; (B,)."""
    B = pos.shape[0]
    ok = np.ones(B, dtype=bool)
    p0 = pos[:, :-1]
    p1 = pos[:, 1:]
    seg = p1 - p0
    for light in s.lights:
        if not light.is_red:
            continue
        q1 = light.stop_line[0].as_array()
        q2 = light.stop_line[1].as_array()
        d = q2 - q1
        c1 = d[0] * (p0[..., 1] - q1[1]) - d[1] * (p0[..., 0] - q1[0])
        c2 = d[0] * (p1[..., 1] - q1[1]) - d[1] * (p1[..., 0] - q1[0])
        c3 = seg[..., 0] * (q1[1] - p0[..., 1]) - seg[..., 1] * (q1[0] - p0[..., 0])
        c4 = seg[..., 0] * (q2[1] - p0[..., 1]) - seg[..., 1] * (q2[0] - p0[..., 0])
        crossing = (c1 * c2 < 0.0) & (c3 * c4 < 0.0)
        ok &= ~np.any(crossing, axis=1)
    return ok


def route_progress(points: np.ndarray, route_xy: np.ndarray, cumlen: np.ndarray) -> np.ndarray:
    """Arc-length position of each point's projection onto the route."""
    a = route_xy[:-1]
    d = np.diff(route_xy, axis=0)
    len2 = np.maximum(np.einsum("rx,rx->r", d, d), 1e-12)
    rel = points[:, None, :] - a[None, :, :]
    t = np.clip(np.einsum("brx,rx->br", rel, d) / len2, 0.0, 1.0)
    proj = a[None] + t[..., None] * d[None]
    dist2 = np.sum((points[:, None, :] - proj) ** 2, axis=-1)
    best = np.argmin(dist2, axis=1)
    rows = np.arange(points.shape[0])
    return cumlen[best] + t[rows, best] * np.sqrt(len2[best])


def _lane_keep_and_direction(s, cfg, pos, head, speeds):
    """(lk_ok, ddc_ok) from lateral offset and heading deviation; (B,)."""
    starts, ends, dirs = s.lane_segments
    d = ends - starts
    len2 = np.maximum(np.einsum("sx,sx->s", d, d), 1e-12)
    B, S = head.shape
    pts = pos.reshape(-1, 2)
    n = pts.shape[0]
    best = np.full(n, np.inf)
    best_idx = np.zeros(n, dtype=np.intp)
    rows = np.arange(n)
    # Chunk over segments to keep the (points x segments) temporaries small.
    chunk = max(1, int(2_000_000 // max(n, 1)))
    for k in range(0, starts.shape[0], chunk):
        sl = slice(k, k + chunk)
        rel = pts[:, None, :] - starts[None, sl]
        t = np.clip(np.einsum("psx,sx->ps", rel, d[sl]) / len2[sl], 0.0, 1.0)
        diff = rel - t[..., None] * d[None, sl]
        dist2 = np.einsum("psx,psx->ps", diff, diff)
        arg = np.argmin(dist2, axis=1)
        val = dist2[rows, arg]
        upd = val < best
        best[upd] = val[upd]
        best_idx[upd] = arg[upd] + k
    lk_ok = np.all((best <= cfg.lk_max_offset**2).reshape(B, S), axis=1)
    dev = np.abs(normalize_angles(head.reshape(-1) - dirs[best_idx]))
    ddc = (dev <= cfg.ddc_max_dev) | (speeds.reshape(-1) < cfg.moving_eps)
    ddc_ok = np.all(ddc.reshape(B, S), axis=1)
    return lk_ok, ddc_ok


def _comfort_pass(pos, head, dt, cfg):
    """Accel/jerk/yaw-rate limits on a sampled path; (B,) bool."""
    w = (pos[:, 1:] - pos[:, :-1]) / dt  # segment velocities (B, S-1, 2)
    speeds = np.hypot(w[..., 0], w[..., 1])
    acc = (w[:, 1:] - w[:, :-1]) / dt  # (B, S-2, 2)
    # Longitudinal/lateral split about the motion direction; slow segments
    # fall back to the sampled heading.
    unit = np.where(
        (speeds[:, :-1] > 1e-9)[..., None],
        w[:, :-1] / np.maximum(speeds[:, :-1], 1e-12)[..., None],
        np.stack([np.cos(head[:, :-2]), np.sin(head[:, :-2])], axis=-1),
    )
    a_long = np.einsum("bsx,bsx->bs", acc, unit)
    a_lat = unit[..., 0] * acc[..., 1] - unit[..., 1] * acc[..., 0]
    ok = np.all(np.abs(a_long) <= cfg.max_long_accel, axis=1)
    ok &= np.all(np.abs(a_lat) <= cfg.max_lat_accel, axis=1)
    if acc.shape[1] >= 2:
        jerk = np.linalg.norm(acc[:, 1:] - acc[:, :-1], axis=-1) / dt
        ok &= np.all(jerk <= cfg.max_jerk, axis=1)
    yaw = np.abs(normalize_angles(head[:, 1:] - head[:, :-1])) / dt
    ok &= np.all(yaw <= cfg.max_yaw_rate, axis=1)
    return ok


def _ec_pass(pos, dt, cfg):
    """Mean accel vector change between consecutive windows is bounded."""
    w = (pos[:, 1:] - pos[:, :-1]) / dt
    acc = (w[:, 1:] - w[:, :-1]) / dt  # (B, n_acc, 2)
    per_window = max(1, int(round(cfg.ec_window / dt)))
    n_acc = acc.shape[1]
    means = []
    for k in range(0, n_acc, per_window):
        means.append(acc[:, k : k + per_window].mean(axis=1))
    if len(means) < 2:
        return np.ones(pos.shape[0], dtype=bool)
    means = np.stack(means, axis=1)
    delta = np.linalg.norm(means[:, 1:] - means[:, :-1], axis=-1)
    return np.all(delta <= cfg.ec_max_delta, axis=1)


# Vocabulary-intrinsic comfort flags are scenario independent; cache them.
_intrinsic_cache: "weakref.WeakKeyDictionary" = weakref.WeakKeyDictionary()


def _intrinsic_flags(vocabulary: TrajectoryVocabulary, cfg: EvaluatorConfig):
    key = (
        cfg.max_long_accel,
        cfg.max_lat_accel,
        cfg.max_jerk,
        cfg.max_yaw_rate,
        cfg.ec_window,
        cfg.ec_max_delta,
    )
    per_vocab = _intrinsic_cache.setdefault(vocabulary, {})
    if key not in per_vocab:
        pos = vocabulary.sample_positions
        head = vocabulary.sample_headings
        per_vocab[key] = (
            _comfort_pass(pos, head, vocabulary.dt, cfg),
            _ec_pass(pos, vocabulary.dt, cfg),
        )
    return per_vocab[key]


def _score_arrays(
    s: Scenario,
    positions: np.ndarray,
    headings: np.ndarray,
    dt: float,
    cfg: EvaluatorConfig,
    ep_reference: str,
    start_xy=(0.0, 0.0),
    start_heading: float = 0.0,
    comfort_flags=None,
    ec_flags=None,
):
    """Score a batch of trajectories sharing one start pose.

    Returns (subscore matrix (B, len(METRICS)), progress (B,)).
    """
    start_xy = np.asarray(start_xy, dtype=np.float64)
    pos, head = _assemble_samples(start_xy, start_heading, positions, headings)
    B, S, _ = pos.shape
    seg_v = (pos[:, 1:] - pos[:, :-1]) / dt
    speeds = np.empty((B, S))
    sv = np.hypot(seg_v[..., 0], seg_v[..., 1])
    speeds[:, 0] = sv[:, 0]
    speeds[:, 1:] = sv

    dense_pos, dense_head = _densify(pos, head)
    # Velocity at each dense sample for constant-velocity propagation:
    # waypoints carry their outgoing segment (last one its incoming),
    # midpoints the segment they sit on.
    dense_vel = np.empty_like(dense_pos)
    dense_vel[:, 0::2] = np.concatenate([seg_v, seg_v[:, -1:]], axis=1)
    dense_vel[:, 1::2] = seg_v
    dense_t = np.arange(dense_pos.shape[1]) * (0.5 * dt)

    nc_ok, ttc_ok = _collision_flags(s, cfg, dense_pos, dense_head, dense_vel, dense_t)
    dac_ok = _drivable_flags(s, cfg, dense_pos, dense_head)
    tlc_ok = _light_flags(s, dense_pos)
    lk_ok, ddc_ok = _lane_keep_and_direction(s, cfg, pos, head, speeds)

    if comfort_flags is None:
        comfort_flags = _comfort_pass(pos, head, dt, cfg)
    if ec_flags is None:
        ec_flags = _ec_pass(pos, dt, cfg)

    # History comfort prepends the previous ego position so the first
    # step's accel and jerk count.
    hpos = np.empty((B, S + 1, 2))
    hpos[:, 0] = s.ego_history.prev_position.as_array()
    hpos[:, 1:] = pos
    hv = hpos[:, 1] - hpos[:, 0]
    hhead = np.empty((B, S + 1))
    hhead[:, 0] = math.atan2(hv[0, 1], hv[0, 0]) if np.hypot(*hv[0]) > 1e-9 else start_heading
    hhead[:, 1:] = head
    hc_flags = _comfort_pass(hpos, hhead, dt, cfg)

    progress = route_progress(pos[:, -1], s.route_xy, s.route_cumlen)
    if ep_reference == "expert":
        if s.expert is None:
            raise ValueError("scenario has no expert trajectory for progress reference")
        ref = float(
            route_progress(s.expert.xy[-1:], s.route_xy, s.route_cumlen)[0]
        )
    elif ep_reference == "max":
        # Achievable progress: the best progress among penalty-clean
        # entries, so rule breakers (running a light, leaving the road)
        # don't deflate everyone else's progress ratio.
        legal = nc_ok & dac_ok & ddc_ok & tlc_ok
        ref = float(progress[legal].max()) if legal.any() else float(progress.max())
    else:
        raise ValueError(f"unknown ep_reference {ep_reference!r}")
    if ref < cfg.ep_min_ref_progress:
        ep = np.ones(B)
    else:
        ep = np.clip(progress / ref, 0.0, 1.0)

    mat = np.empty((B, len(METRICS)))
    mat[:, _MIDX["nc"]] = nc_ok
    mat[:, _MIDX["dac"]] = dac_ok
    mat[:, _MIDX["ddc"]] = ddc_ok
    mat[:, _MIDX["tlc"]] = tlc_ok
    mat[:, _MIDX["ep"]] = ep
    mat[:, _MIDX["ttc"]] = ttc_ok
    mat[:, _MIDX["lk"]] = lk_ok
    mat[:, _MIDX["hc"]] = hc_flags & comfort_flags
    mat[:, _MIDX["ec"]] = ec_flags
    mat[:, _MIDX["c"]] = comfort_flags
    return mat, progress


def label_vocabulary(
    s: Scenario,
    vocabulary: TrajectoryVocabulary,
    cfg: EvaluatorConfig = DEFAULT_EVAL_CONFIG,
    ep_reference: str = "expert",
) -> LabelSet:
    """Ground-truth subscores and aggregates for every entry."""
    comfort_flags, ec_flags = _intrinsic_flags(vocabulary, cfg)
    mat, progress = _score_arrays(
        s,
        vocabulary.positions,
        vocabulary.headings,
        vocabulary.dt,
        cfg,
        ep_reference,
        comfort_flags=comfort_flags,
        ec_flags=ec_flags,
    )
    l2 = nd = None
    if s.expert is not None:
        l2 = l2_to_entries(vocabulary.positions, s.expert.xy)
        nd = normalized_distance(l2)
    return LabelSet(
        subscores=mat,
        progress=progress,
        pdms=_aggregate_matrix(mat, cfg, "v1"),
        epdms=_aggregate_matrix(mat, cfg, "v2"),
        l2=l2,
        nd=nd,
    )


def subscores(s: Scenario, t: Trajectory, cfg: EvaluatorConfig = DEFAULT_EVAL_CONFIG) -> SubscoreVector:
    """Score one trajectory against a scenario (expert-relative progress)."""
    mat, _ = _score_arrays(
        s,
        t.xy[None, :, :],
        t.heading_array[None, :],
        t.dt,
        cfg,
        "expert",
        start_xy=t.start_pose.position.as_array(),
        start_heading=t.start_pose.heading,
    )
    return SubscoreVector(*(float(x) for x in mat[0]))


def _make_single(metric: str):
    def fn(s: Scenario, t: Trajectory, cfg: EvaluatorConfig = DEFAULT_EVAL_CONFIG) -> float:
        return getattr(subscores(s, t, cfg), metric)

    fn.__name__ = f"score_{metric}"
    fn.__doc__ = f"The {metric} subscore of one trajectory."
    return fn


score_nc = _make_single("nc")
score_dac = _make_single("dac")
score_ddc = _make_single("ddc")
score_tlc = _make_single("tlc")
score_ep = _make_single("ep")
score_ttc = _make_single("ttc")
score_lk = _make_single("lk")
score_hc = _make_single("hc")
score_ec = _make_single("ec")
score_comfort = _make_single("c")


def expert_trajectory(
    s: Scenario,
    vocabulary: TrajectoryVocabulary,
    cfg: EvaluatorConfig = DEFAULT_EVAL_CONFIG,
) -> tuple[int, Trajectory]:
    """The entry maximizing the version-2 aggregate under max-normalized progress.

    Progress is normalized by the best progress over the vocabulary since
    no expert exists yet; ties break toward higher progress, then lower
    index. Raises NoSafeTrajectory when every entry scores zero.
    """
    labels = label_vocabulary(s, vocabulary, cfg, ep_reference="max")
    scores = labels.epdms
    if float(scores.max()) <= 0.0:
        raise NoSafeTrajectory(f"seed {s.seed}: all {len(labels)} entries score zero")
    order = np.lexsort((np.arange(len(labels)), -labels.progress, -scores))
    idx = int(order[0])
    return idx, vocabulary.entry(idx)


def oracle_topk(gt: np.ndarray, ranking: np.ndarray, k: int) -> float:
    """Best ground-truth score among the K entries ranked highest.

    Ties in the ranking prefer the lower index. K must lie in [1, N].
    """
    gt = np.asarray(gt, dtype=np.float64)
    ranking = np.asarray(ranking, dtype=np.float64)
    if gt.shape != ranking.shape or gt.ndim != 1:
        raise ValueError("gt and ranking must be equal-length vectors")
    n = gt.shape[0]
    if not 1 <= k <= n:
        raise KOutOfRange(f"K={k} outside [1, {n}]")
    order = np.argsort(-ranking, kind="stable")
    return float(gt[order[:k]].max())


# Label sidecar cache --------------------------------------------------------

LABELS_FORMAT_VERSION = 1


class LabelCacheMismatch(ValueError):
    """Sidecar was built for a different dataset, grid, or config."""


def config_digest(cfg: EvaluatorConfig = DEFAULT_EVAL_CONFIG) -> str:
    """sha256 of the scoring thresholds and weights; keys label caches."""
    parts = []
    for f in dataclasses.fields(cfg):
        parts.append("%s=%r" % (f.name, getattr(cfg, f.name)))
    return hashlib.sha256(";".join(parts).encode("utf-8")).hexdigest()


def save_labels(
    path,
    label_sets: list[LabelSet],
    *,
    dataset_sha: str,
    vocabulary: TrajectoryVocabulary,
    cfg: EvaluatorConfig = DEFAULT_EVAL_CONFIG,
) -> str:
    """Write every scenario's LabelSet to one compressed sidecar file.

    The file records the dataset digest, grid digest and config digest it
    was built from; load_labels refuses to serve it to anything else.
    Returns the file's sha256.
    """
    if not label_sets:
        raise ValueError("nothing to save")
    arrays = {
        "format_version": np.array(LABELS_FORMAT_VERSION),
        "dataset_sha": np.array(dataset_sha),
        "vocab_digest": np.array(vocabulary.spec.digest()),
        "config_digest": np.array(config_digest(cfg)),
        "subscores": np.stack([ls.subscores for ls in label_sets]),
        "progress": np.stack([ls.progress for ls in label_sets]),
        "pdms": np.stack([ls.pdms for ls in label_sets]),
        "epdms": np.stack([ls.epdms for ls in label_sets]),
    }
    if all(ls.l2 is not None for ls in label_sets):
        arrays["l2"] = np.stack([ls.l2 for ls in label_sets])
        arrays["nd"] = np.stack([ls.nd for ls in label_sets])
    np.savez_compressed(path, **arrays)
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def load_labels(
    path,
    *,
    dataset_sha: str | None = None,
    vocabulary: TrajectoryVocabulary | None = None,
    cfg: EvaluatorConfig | None = None,
) -> list[LabelSet]:
    """Read a sidecar; any provided key must match what the file records."""
    with np.load(path) as z:
        version = int(z["format_version"])
        if version != LABELS_FORMAT_VERSION:
            raise LabelCacheMismatch(f"unsupported format version {version}")
        checks = (
            ("dataset_sha", dataset_sha),
            ("vocab_digest", None if vocabulary is None else vocabulary.spec.digest()),
            ("config_digest", None if cfg is None else config_digest(cfg)),
        )
        for key, want in checks:
            got = str(z[key])
            if want is not None and got != want:
                raise LabelCacheMismatch(f"{key} mismatch: file has {got[:12]}..")
        subs, prog = z["subscores"], z["progress"]
        pdms, epdms = z["pdms"], z["epdms"]
        l2 = z["l2"] if "l2" in z else None
        nd = z["nd"] if "nd" in z else None
    out = []
    for i in range(subs.shape[0]):
        out.append(
            LabelSet(
                subscores=subs[i],
                progress=prog[i],
                pdms=pdms[i],
                epdms=epdms[i],
                l2=None if l2 is None else l2[i],
                nd=None if nd is None else nd[i],
            )
        )
    return out
