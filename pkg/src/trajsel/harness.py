"""Score combination, evaluation campaigns, analyses, and reporting.

The selection scalar mixes predicted per-metric scores log-linearly; the
campaign helpers run a model over datasets and emit table/CSV/SVG reports
for the oracle, turning-split, heading-distribution, and FOV studies.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import evaluator
from .evaluator import DEFAULT_EVAL_CONFIG, LabelSet, aggregate, oracle_topk
from .geom import DegenerateTrajectory, turning_angle
from .scenario import FOV_1CAM, FOV_3CAM, FOV_5CAM, Scenario, observe
from .vocab import TrajectoryVocabulary

SCORE_CLAMP = 1e-7


class DomainError(ValueError):
    """A combination input is outside its legal domain."""


class EmptyDataset(ValueError):
    """An analysis was asked to run over zero scenarios."""


@dataclass(frozen=True)
class InferenceCoefficients:
    """Log-linear mixing weights for one scoring version."""

    imi: float
    penalties: tuple[tuple[str, float], ...]
    average: tuple[tuple[str, float], ...]
    lambda_avg: float
    version: int

    def metric_names(self) -> tuple[str, ...]:
        return ("imi",) + tuple(m for m, _ in self.penalties) + tuple(
            m for m, _ in self.average
        )


COEFFS_V1 = InferenceCoefficients(
    imi=0.05,
    penalties=(("nc", 0.5), ("dac", 0.5)),
    average=(("ep", 5.0), ("ttc", 5.0), ("c", 2.0)),
    lambda_avg=8.0,
    version=1,
)

COEFFS_V2 = InferenceCoefficients(
    imi=0.02,
    penalties=(("nc", 0.5), ("dac", 0.5), ("ddc", 0.3), ("tlc", 0.1)),
    average=(("ep", 5.0), ("ttc", 5.0), ("lk", 2.0), ("hc", 1.0)),
    lambda_avg=6.0,
    version=2,
)


def coefficients_for(version: int) -> InferenceCoefficients:
    if version == 1:
        return COEFFS_V1
    if version == 2:
        return COEFFS_V2
    raise DomainError(f"unknown scoring version {version}")


def combine_score(scores, coeffs: InferenceCoefficients):
    """Log-linear combination of per-metric scores; higher is better.

    `scores` maps metric name to a scalar or (N,) array in (0, 1]. Every
    used score is clamped up to 1e-7 before the logs.
    """
    def pick(name):
        s = np.asarray(scores[name], dtype=np.float64)
        if np.any(s < 0.0) or not np.all(np.isfinite(s)):
            raise DomainError(f"score {name!r} outside [0, 1]")
        return np.maximum(s, SCORE_CLAMP)

    total = coeffs.imi * np.log(pick("imi"))
    for name, lam in coeffs.penalties:
        total = total + lam * np.log(pick(name))
    avg = None
    for name, lam in coeffs.average:
        term = lam * pick(name)
        avg = term if avg is None else avg + term
    total = total + coeffs.lambda_avg * np.log(avg)
    return float(total) if np.ndim(total) == 0 else total


# ---- evaluation campaigns ----


@dataclass
class EvalReport:
    """Mean subscores (percent) plus per-scenario rows for one model run."""

    version: int
    n_scenarios: int
    subscore_means: dict[str, float]
    aggregate_mean: float
    rows: list[dict] = field(repr=False, default_factory=list)
    config_hash: str = ""
    checkpoint_id: str = ""

    def to_text(self) -> str:
        names = list(self.subscore_means)
        w = max(len(n) for n in names + ["aggregate"]) + 2
        out = [f"scenarios: {self.n_scenarios}   scoring: v{self.version}"]
        for n in names:
            out.append(f"  {n:<{w}}{self.subscore_means[n]:6.2f}")
        out.append(f"  {'aggregate':<{w}}{self.aggregate_mean:6.2f}")
        if self.config_hash:
            out.append(f"  config {self.config_hash[:12]}")
        return "\n".join(out)

    def to_csv(self) -> str:
        buf = io.StringIO()
        names = list(self.subscore_means)
        writer = csv.writer(buf)
        writer.writerow(["row"] + names + ["aggregate"])
        writer.writerow(
            ["mean"] + [f"{self.subscore_means[n]:.4f}" for n in names]
            + [f"{self.aggregate_mean:.4f}"]
        )
        for i, row in enumerate(self.rows):
            writer.writerow(
                [i] + [f"{row['subscores'][n] * 100.0:.2f}" for n in names]
                + [f"{row['aggregate'] * 100.0:.2f}"]
            )
        return buf.getvalue()


def _label_for(s: Scenario, vocabulary, labels, i, eval_cfg):
    if labels is not None and labels[i] is not None:
        return labels[i]
    return evaluator.label_vocabulary(s, vocabulary, eval_cfg)


def evaluate(model, scenarios, labels=None, version: int = 2,
             use_teacher: bool = True, eval_cfg=DEFAULT_EVAL_CONFIG,
             config_hash: str = "", checkpoint_id: str = "") -> EvalReport:
    """Ground-truth subscores of each selected entry, averaged."""
    from . import planner

    if not scenarios:
        raise EmptyDataset("no scenarios to evaluate")
    names = list(evaluator.METRICS)
    rows = []
    for i, s in enumerate(scenarios):
        lab = _label_for(s, model.vocabulary, labels, i, eval_cfg)
        res = planner.infer(model, s, use_teacher=use_teacher)
        sub = lab.subscores[res.selected]
        agg = lab.gt(version)[res.selected]
        rows.append(
            {
                "selected": int(res.selected),
                "subscores": {n: float(sub[j]) for j, n in enumerate(names)},
                "aggregate": float(agg),
            }
        )
    means = {
        n: 100.0 * float(np.mean([r["subscores"][n] for r in rows])) for n in names
    }
    return EvalReport(
        version=version,
        n_scenarios=len(rows),
        subscore_means=means,
        aggregate_mean=100.0 * float(np.mean([r["aggregate"] for r in rows])),
        rows=rows,
        config_hash=config_hash,
        checkpoint_id=checkpoint_id,
    )


def model_ranking(model, s: Scenario, use_teacher: bool = True) -> np.ndarray:
    """Full-vocabulary ranking scores: refined order on top, coarse below."""
    from . import planner

    res = planner.infer(model, s, use_teacher=use_teacher)
    rank = res.coarse_combined.astype(np.float64).copy()
    if res.topk is not None and res.refine_combined is not None:
        offset = rank.max() - res.refine_combined.min() + 1.0
        rank[res.topk] = res.refine_combined + offset
    return rank


def oracle_study(model, scenarios, labels=None, ks=(1, 4, 16, 256),
                 version: int = 2, use_teacher: bool = True,
                 eval_cfg=DEFAULT_EVAL_CONFIG) -> dict[int, float]:
    """Mean best-in-top-K ground-truth aggregate per K, in percent."""
    if not scenarios:
        raise EmptyDataset("no scenarios")
    sums = {k: 0.0 for k in ks}
    for i, s in enumerate(scenarios):
        lab = _label_for(s, model.vocabulary, labels, i, eval_cfg)
        gt = lab.gt(version)
        rank = model_ranking(model, s, use_teacher=use_teacher)
        for k in ks:
            sums[k] += oracle_topk(gt, rank, min(k, len(gt)))
    return {k: 100.0 * sums[k] / len(scenarios) for k in ks}


def turn_bucket(s: Scenario, threshold_deg: float = 30.0) -> str:
    """left / forward / right by the expert's signed turning angle."""
    try:
        ang = turning_angle(s.expert)
    except DegenerateTrajectory:
        return "forward"
    if ang > threshold_deg:
        return "left"
    if ang < -threshold_deg:
        return "right"
    return "forward"


def split_eval(model, scenarios, labels=None, version: int = 2,
               use_teacher: bool = True,
               eval_cfg=DEFAULT_EVAL_CONFIG) -> dict[str, EvalReport | None]:
    """Separate reports for left-turn, forward, and right-turn scenarios."""
    buckets: dict[str, list] = {"left": [], "forward": [], "right": []}
    label_buckets: dict[str, list] = {"left": [], "forward": [], "right": []}
    for i, s in enumerate(scenarios):
        b = turn_bucket(s)
        buckets[b].append(s)
        label_buckets[b].append(labels[i] if labels is not None else None)
    out: dict[str, EvalReport | None] = {}
    for name in ("left", "forward", "right"):
        if buckets[name]:
            out[name] = evaluate(
                model, buckets[name], label_buckets[name], version=version,
                use_teacher=use_teacher, eval_cfg=eval_cfg,
            )
        else:
            out[name] = None
    return out


# ---- heading-distribution study ----


def qualifying_entries(labels: LabelSet, version: int = 2,
                       score_floor: float = 0.99, top_n: int = 3) -> np.ndarray:
    """Indices whose ground truth clears the floor or ranks in the top_n."""
    gt = labels.gt(version)
    order = np.argsort(-gt, kind="stable")
    keep = np.zeros(len(gt), dtype=bool)
    keep[gt > score_floor] = True
    keep[order[:top_n]] = True
    return np.flatnonzero(keep)


def heading_histogram(label_sets, vocabulary: TrajectoryVocabulary,
                      bins: int = 24, version: int = 2) -> dict:
    """Final-heading histogram of qualifying entries, max bin scaled to 1."""
    if not label_sets:
        raise EmptyDataset("no labeled scenarios")
    finals = vocabulary.sample_headings[:, -1]
    lo, hi = float(finals.min()), float(finals.max())
    span = max(hi - lo, 1e-9)
    edges = lo + span * np.arange(bins + 1) / bins
    counts = np.zeros(bins, dtype=np.int64)
    for lab in label_sets:
        for idx in qualifying_entries(lab, version=version):
            b = min(int((finals[idx] - lo) / span * bins), bins - 1)
            counts[b] += 1
    peak = counts.max()
    freqs = counts / peak if peak > 0 else counts.astype(np.float64)
    return {"edges": edges, "counts": counts, "frequencies": freqs}


def rotation_augmented_labels(scenarios, vocabulary: TrajectoryVocabulary,
                              seed: int = 0, theta: float = math.pi / 6,
                              copies: int = 1,
                              eval_cfg=DEFAULT_EVAL_CONFIG) -> list:
    """LabelSets of every scenario plus `copies` rotated variants each.

    Pooling originals with rotated copies is how the augmented heading
    distribution is measured; the rotations draw from the same
    uniform(-theta, theta) range used during training.
    """
    from .scenario import rotate_scenario, sample_rotation

    rng = np.random.default_rng([seed, 202])
    out = []
    for s in scenarios:
        out.append(evaluator.label_vocabulary(s, vocabulary, eval_cfg))
        for _ in range(copies):
            s_rot = rotate_scenario(s, sample_rotation(rng, theta))
            out.append(evaluator.label_vocabulary(s_rot, vocabulary, eval_cfg))
    return out


def kl_to_uniform(counts: np.ndarray) -> float:
    """KL(empirical bin distribution || uniform), natural log."""
    c = np.asarray(counts, dtype=np.float64)
    total = c.sum()
    if total <= 0:
        raise EmptyDataset("empty histogram")
    p = c / total
    nz = p > 0
    return float(np.sum(p[nz] * np.log(p[nz] * len(c))))


def fov_sweep(scenarios, model=None, labels=None, version: int = 2,
              fovs=((1, FOV_1CAM), (3, FOV_3CAM), (5, FOV_5CAM)),
              use_teacher: bool = True) -> list[dict]:
    """Mean token count (and score, when a model is given) per mask width."""
    from . import planner

    if not scenarios:
        raise EmptyDataset("no scenarios")
    rows = []
    for cams, fov in fovs:
        tokens = float(np.mean([len(observe(s, fov)) for s in scenarios]))
        score = None
        if model is not None:
            agg = []
            for i, s in enumerate(scenarios):
                lab = _label_for(s, model.vocabulary, labels, i, DEFAULT_EVAL_CONFIG)
                res = planner.infer(model, s, use_teacher=use_teacher, fov=fov)
                agg.append(lab.gt(version)[res.selected])
            score = 100.0 * float(np.mean(agg))
        rows.append({"cameras": cams, "fov_halfangle": fov,
                     "mean_tokens": tokens, "score": score})
    return rows


# ---- report output ----


def table_text(headers, rows) -> str:
    """Plain fixed-width table."""
    cells = [[str(h) for h in headers]] + [[str(c) for c in row] for row in rows]
    widths = [max(len(r[j]) for r in cells) for j in range(len(headers))]
    lines = []
    for i, row in enumerate(cells):
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def table_csv(headers, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(headers)
    writer.writerows(rows)
    return buf.getvalue()


def svg_bars(values, labels=None, width: int = 640, height: int = 320,
             title: str = "") -> str:
    """Minimal self-contained SVG bar chart."""
    vals = [float(v) for v in values]
    n = max(len(vals), 1)
    vmax = max([abs(v) for v in vals] + [1e-9])
    pad, label_h = 28, 18
    plot_w, plot_h = width - 2 * pad, height - 2 * pad - label_h
    bw = plot_w / n
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    if title:
        parts.append(
            f'<text x="{width / 2:.1f}" y="{pad - 8}" text-anchor="middle" '
            f'font-size="13">{title}</text>'
        )
    for i, v in enumerate(vals):
        h = plot_h * abs(v) / vmax
        x = pad + i * bw
        y = pad + plot_h - h
        parts.append(
            f'<rect x="{x + 1:.1f}" y="{y:.1f}" width="{max(bw - 2, 1):.1f}" '
            f'height="{h:.1f}" fill="#4878a8"/>'
        )
        if labels is not None:
            parts.append(
                f'<text x="{x + bw / 2:.1f}" y="{height - pad + 4:.1f}" '
                f'text-anchor="middle" font-size="10">{labels[i]}</text>'
            )
    parts.append("</svg>")
    return "\n".join(parts)


def save_report(path_base, headers, rows, plots: bool = False,
                plot_values=None, plot_labels=None, title: str = "") -> list[str]:
    """Write .txt and .csv (and optional .svg); returns written paths."""
    written = []
    txt = str(path_base) + ".txt"
    with open(txt, "w") as fh:
        fh.write(table_text(headers, rows) + "\n")
    written.append(txt)
    csv_path = str(path_base) + ".csv"
    with open(csv_path, "w") as fh:
        fh.write(table_csv(headers, rows))
    written.append(csv_path)
    if plots and plot_values is not None:
        svg = str(path_base) + ".svg"
        with open(svg, "w") as fh:
            fh.write(svg_bars(plot_values, plot_labels, title=title))
        written.append(svg)
    return written
