"""Coarse-to-fine trajectory selection model and its training loop.

A token encoder embeds the observation, a trajectory encoder embeds every
vocabulary entry, a cross-attention decoder scores all entries, the top-k
survivors pass through a self-attending refinement decoder with per-layer
heads, and the last layer's combined score picks the output. Training mixes
the original scene, a rotated copy with freshly computed labels, and
soft labels distilled from an EMA teacher.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import evaluator
from .diffcore import (
    AdamState,
    NonFiniteDetected,
    ParamStore,
    Tape,
    adam_step,
    ema_update,
    load_checkpoint,
    save_checkpoint,
)
from .evaluator import KOutOfRange, LabelSet
from .geom import Trajectory
from .harness import coefficients_for, combine_score
from .scenario import (
    DEFAULT_FOV,
    TOKEN_DIM,
    TOKEN_KINDS,
    Scenario,
    observe,
    rotate_scenario,
    sample_rotation,
)
from .vocab import TrajectoryVocabulary, l2_to_entries

# Every aggregate subscore gets a linear head except energy consistency;
# the imitation head is a two-layer perceptron whose raw output doubles as
# the logit vector for the imitation distribution.
HEAD_METRICS = ("nc", "dac", "ddc", "tlc", "ep", "ttc", "lk", "hc", "c")


class LabelCacheMiss(KeyError):
    """A scenario had no precomputed labels; callers label on the fly."""


@dataclass(frozen=True)
class PlannerConfig:
    hidden_dim: int = 256
    coarse_layers: int = 3
    refine_layers: int = 3
    attn_heads: int = 4
    ff_dim: int = 512
    top_k: int = 256
    theta: float = math.pi / 6.0
    delta: float = 0.15
    imi_temperature: float = 1.0
    lr: float = 7.5e-5
    batch_size: int = 4
    epochs: int = 6
    ema_mode: str = "pretrained"
    score_version: int = 2
    coarse_self_attn: bool = False
    refine_self_attn: bool = True
    single_stage: bool = False
    augment: bool = True
    soft_labels: bool = True
    fov: float = DEFAULT_FOV
    feat_scale: float = 0.05

    def __post_init__(self):
        if self.refine_layers < 1:
            raise ValueError("refine_layers must be >= 1")
        if not 0.0 <= self.delta <= 1.0:
            raise ValueError("delta must be in [0, 1]")
        if self.top_k < 1:
            raise KOutOfRange(f"top_k {self.top_k}")
        if self.imi_temperature <= 0.0:
            raise ValueError("imi_temperature must be positive")
        if self.ema_mode not in ("pretrained", "scratch"):
            raise ValueError(f"unknown ema_mode {self.ema_mode!r}")
        if self.hidden_dim % self.attn_heads != 0:
            raise ValueError("attn_heads must divide hidden_dim")

    def to_dict(self) -> dict:
        return {
            "hidden_dim": self.hidden_dim,
            "coarse_layers": self.coarse_layers,
            "refine_layers": self.refine_layers,
            "attn_heads": self.attn_heads,
            "ff_dim": self.ff_dim,
            "top_k": self.top_k,
            "theta": self.theta,
            "delta": self.delta,
            "imi_temperature": self.imi_temperature,
            "lr": self.lr,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "ema_mode": self.ema_mode,
            "score_version": self.score_version,
            "coarse_self_attn": self.coarse_self_attn,
            "refine_self_attn": self.refine_self_attn,
            "single_stage": self.single_stage,
            "augment": self.augment,
            "soft_labels": self.soft_labels,
            "fov": self.fov,
            "feat_scale": self.feat_scale,
        }

    @staticmethod
    def from_dict(d: dict) -> "PlannerConfig":
        return PlannerConfig(**d)


@dataclass(frozen=True)
class EmaSchedule:
    """Piecewise-linear teacher momentum over (fractional) epochs."""

    mode: str = "pretrained"

    def momentum(self, epoch: float) -> float:
        e = max(float(epoch), 0.0)
        if self.mode == "pretrained":
            if e <= 3.0:
                m = 0.992 + (0.996 - 0.992) * e / 3.0
            else:
                m = 0.998
        elif self.mode == "scratch":
            if e < 3.0:
                m = 0.0
            elif e <= 6.0:
                m = 0.992 + (0.996 - 0.992) * (e - 3.0) / 3.0
            else:
                m = 0.998
        else:
            raise ValueError(f"unknown ema mode {self.mode!r}")
        if not 0.0 <= m <= 1.0:
            raise ValueError(f"momentum {m} outside [0, 1]")
        return m


@dataclass
class ScoreTable:
    """Per-entry sigmoid scores for one stage ('coarse' or 'refine:L')."""

    stage: str
    scores: dict[str, np.ndarray]

    def combined(self, version: int) -> np.ndarray:
        return combine_score(self.scores, coefficients_for(version))


@dataclass
class PlannerModel:
    """A config plus student/teacher parameters bound to one vocabulary."""

    cfg: PlannerConfig
    vocabulary: TrajectoryVocabulary
    student: ParamStore
    teacher: ParamStore

    def save(self, path, adam: AdamState | None = None, *, step: int = 0,
             config_hash: str = "") -> str:
        return save_checkpoint(
            path, self.student, adam, self.teacher, step=step,
            config_hash=config_hash,
            extra={"planner_config": self.cfg.to_dict(),
                   "vocab_spec": self.vocabulary.spec.to_dict()},
        )

    @staticmethod
    def load(path, vocabulary: TrajectoryVocabulary) -> "PlannerModel":
        student, _adam, teacher, meta = load_checkpoint(path)
        cfg = PlannerConfig.from_dict(meta["extra"]["planner_config"])
        if teacher is None:
            teacher = student.copy()
        return PlannerModel(cfg, vocabulary, student, teacher)


# ---- parameters ----


def _linear_init(rng, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.standard_normal((fan_in, fan_out)) / math.sqrt(fan_in)


def _add_mlp(store, rng, prefix, d_in, d_mid, d_out):
    store.add(f"{prefix}.w1", _linear_init(rng, d_in, d_mid))
    store.add(f"{prefix}.b1", np.zeros((1, d_mid)))
    store.add(f"{prefix}.w2", _linear_init(rng, d_mid, d_out))
    store.add(f"{prefix}.b2", np.zeros((1, d_out)))


def _add_attn(store, rng, prefix, h):
    store.add(f"{prefix}.lng", np.ones((1, h)))
    store.add(f"{prefix}.lnb", np.zeros((1, h)))
    for name in ("wq", "wk", "wv", "wo"):
        store.add(f"{prefix}.{name}", _linear_init(rng, h, h))


def _add_ff(store, rng, prefix, h, ff):
    store.add(f"{prefix}.lng", np.ones((1, h)))
    store.add(f"{prefix}.lnb", np.zeros((1, h)))
    _add_mlp(store, rng, prefix, h, ff, h)


def _add_heads(store, rng, prefix, h):
    _add_mlp(store, rng, f"{prefix}.imi", h, h, 1)
    # One matrix holds every linear subscore head, a column per metric.
    store.add(f"{prefix}.sub.w", _linear_init(rng, h, len(HEAD_METRICS)))
    store.add(f"{prefix}.sub.b", np.zeros((1, len(HEAD_METRICS))))


def init_params(cfg: PlannerConfig, vocabulary: TrajectoryVocabulary,
                seed: int) -> ParamStore:
    """Deterministic parameter initialization for one model."""
    rng = np.random.default_rng([seed, 17])
    h = cfg.hidden_dim
    store = ParamStore()
    for kind in TOKEN_KINDS:
        _add_mlp(store, rng, f"tok.{kind}", TOKEN_DIM, h, h)
    _add_mlp(store, rng, "traj", vocabulary.flat_waypoints.shape[1], h, h)
    for l in range(cfg.coarse_layers):
        if cfg.coarse_self_attn:
            _add_attn(store, rng, f"coarse{l}.self", h)
        _add_attn(store, rng, f"coarse{l}.cross", h)
        _add_ff(store, rng, f"coarse{l}.ff", h, cfg.ff_dim)
    store.add("coarse.out.lng", np.ones((1, h)))
    store.add("coarse.out.lnb", np.zeros((1, h)))
    _add_heads(store, rng, "head", h)
    for l in range(cfg.refine_layers):
        if cfg.refine_self_attn:
            _add_attn(store, rng, f"refine{l}.self", h)
        _add_attn(store, rng, f"refine{l}.cross", h)
        _add_ff(store, rng, f"refine{l}.ff", h, cfg.ff_dim)
        store.add(f"refine{l}.out.lng", np.ones((1, h)))
        store.add(f"refine{l}.out.lnb", np.zeros((1, h)))
        _add_heads(store, rng, f"refine{l}.head", h)
    return store


# ---- forward ----


def _mlp(tape, bound, prefix, x):
    pre = tape.add(tape.matmul(x, bound[f"{prefix}.w1"]), bound[f"{prefix}.b1"])
    return tape.add(
        tape.matmul(tape.relu(pre), bound[f"{prefix}.w2"]), bound[f"{prefix}.b2"]
    )


def _ln(tape, bound, prefix, x):
    return tape.layer_norm(x, bound[f"{prefix}.lng"], bound[f"{prefix}.lnb"])


def _attn_block(tape, bound, prefix, x, kv, heads):
    q_in = _ln(tape, bound, prefix, x)
    q = tape.matmul(q_in, bound[f"{prefix}.wq"])
    k = tape.matmul(kv, bound[f"{prefix}.wk"])
    v = tape.matmul(kv, bound[f"{prefix}.wv"])
    out = tape.matmul(tape.attention(q, k, v, heads), bound[f"{prefix}.wo"])
    return tape.add(x, out)


def _ff_block(tape, bound, prefix, x):
    return tape.add(x, _mlp(tape, bound, prefix, _ln(tape, bound, prefix, x)))


def encode_observation(tape: Tape, bound, tokens, cfg: PlannerConfig):
    """Per-kind two-layer embedding of observation tokens; (T, hidden)."""
    feats = tokens.features * cfg.feat_scale
    x = tape.var(feats)
    perm = []
    parts = []
    for ki, kind in enumerate(TOKEN_KINDS):
        idx = np.flatnonzero(tokens.kinds == ki)
        if idx.size == 0:
            continue
        perm.append(idx)
        parts.append(_mlp(tape, bound, f"tok.{kind}", tape.gather_rows(x, idx)))
    stacked = parts[0] if len(parts) == 1 else tape.concat(parts, axis=0)
    perm = np.concatenate(perm)
    inverse = np.empty_like(perm)
    inverse[perm] = np.arange(perm.size)
    return tape.gather_rows(stacked, inverse)


def encode_trajectories(tape: Tape, bound, vocabulary: TrajectoryVocabulary,
                        cfg: PlannerConfig):
    """Two-layer embedding of flattened entry waypoints; (N, hidden)."""
    return _mlp(tape, bound, "traj", tape.var(vocabulary.flat_waypoints * cfg.feat_scale))


def _heads_forward(tape, bound, prefix, x_norm):
    return {
        "imi": _mlp(tape, bound, f"{prefix}.imi", x_norm),
        "sub": tape.add(
            tape.matmul(x_norm, bound[f"{prefix}.sub.w"]), bound[f"{prefix}.sub.b"]
        ),
    }


def _table(logits) -> dict[str, np.ndarray]:
    out = {"imi": 1.0 / (1.0 + np.exp(-logits["imi"].value[:, 0]))}
    sub = 1.0 / (1.0 + np.exp(-logits["sub"].value))
    for j, m in enumerate(HEAD_METRICS):
        out[m] = sub[:, j]
    return out


def coarse_stage(tape: Tape, bound, E, F, cfg: PlannerConfig):
    """Cross-attention decoding of all entries; returns (g, logits dict)."""
    x = F
    for l in range(cfg.coarse_layers):
        if cfg.coarse_self_attn:
            h = _ln(tape, bound, f"coarse{l}.self", x)
            x = tape.add(x, tape.matmul(
                tape.attention(
                    tape.matmul(h, bound[f"coarse{l}.self.wq"]),
                    tape.matmul(h, bound[f"coarse{l}.self.wk"]),
                    tape.matmul(h, bound[f"coarse{l}.self.wv"]),
                    cfg.attn_heads,
                ),
                bound[f"coarse{l}.self.wo"],
            ))
        x = _attn_block(tape, bound, f"coarse{l}.cross", x, E, cfg.attn_heads)
        x = _ff_block(tape, bound, f"coarse{l}.ff", x)
    logits = _heads_forward(tape, bound, "head", _ln(tape, bound, "coarse.out", x))
    return x, logits


def topk_filter(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores; ties broken by ascending index."""
    n = len(scores)
    if not 1 <= k <= n:
        raise KOutOfRange(f"k={k} for {n} entries")
    order = np.argsort(-scores, kind="stable")
    return order[:k]


def refine_stage(tape: Tape, bound, E, g_filtered, cfg: PlannerConfig):
    """Self- and cross-attention over the survivors; per-layer head logits."""
    x = g_filtered
    per_layer = []
    for l in range(cfg.refine_layers):
        if cfg.refine_self_attn:
            h = _ln(tape, bound, f"refine{l}.self", x)
            x = tape.add(x, tape.matmul(
                tape.attention(
                    tape.matmul(h, bound[f"refine{l}.self.wq"]),
                    tape.matmul(h, bound[f"refine{l}.self.wk"]),
                    tape.matmul(h, bound[f"refine{l}.self.wv"]),
                    cfg.attn_heads,
                ),
                bound[f"refine{l}.self.wo"],
            ))
        x = _attn_block(tape, bound, f"refine{l}.cross", x, E, cfg.attn_heads)
        x = _ff_block(tape, bound, f"refine{l}.ff", x)
        x_norm = _ln(tape, bound, f"refine{l}.out", x)
        per_layer.append(_heads_forward(tape, bound, f"refine{l}.head", x_norm))
    return per_layer


@dataclass
class ForwardPass:
    coarse_logits: dict
    coarse_table: dict[str, np.ndarray]
    coarse_combined: np.ndarray
    topk: np.ndarray | None
    refine_logits: list
    refine_tables: list[dict[str, np.ndarray]]
    refine_combined: np.ndarray | None


def forward(tape: Tape, bound, model_cfg: PlannerConfig,
            vocabulary: TrajectoryVocabulary, s: Scenario,
            fov: float | None = None) -> ForwardPass:
    """Full pipeline on one scenario; selection arrays are plain numpy."""
    cfg = model_cfg
    tokens = observe(s, fov if fov is not None else cfg.fov)
    E = encode_observation(tape, bound, tokens, cfg)
    F = encode_trajectories(tape, bound, vocabulary, cfg)
    g, coarse_logits = coarse_stage(tape, bound, E, F, cfg)
    coarse_table = _table(coarse_logits)
    coeffs = coefficients_for(cfg.score_version)
    coarse_combined = combine_score(coarse_table, coeffs)
    if cfg.single_stage:
        return ForwardPass(coarse_logits, coarse_table, coarse_combined,
                           None, [], [], None)
    k = min(cfg.top_k, len(vocabulary))
    idx = topk_filter(coarse_combined, k)
    refine_logits = refine_stage(tape, bound, E, tape.gather_rows(g, idx), cfg)
    refine_tables = [_table(lg) for lg in refine_logits]
    refine_combined = combine_score(refine_tables[-1], coeffs)
    return ForwardPass(coarse_logits, coarse_table, coarse_combined,
                       idx, refine_logits, refine_tables, refine_combined)


@dataclass
class InferResult:
    selected: int
    trajectory: Trajectory
    coarse_combined: np.ndarray
    topk: np.ndarray | None
    refine_combined: np.ndarray | None
    coarse_table: dict[str, np.ndarray]
    refine_tables: list[dict[str, np.ndarray]]


def infer(model: PlannerModel, s: Scenario, use_teacher: bool = True,
          fov: float | None = None) -> InferResult:
    """Select one vocabulary entry for a scenario."""
    store = model.teacher if use_teacher else model.student
    tape = Tape()
    bound = store.bind(tape)
    fwd = forward(tape, bound, model.cfg, model.vocabulary, s, fov=fov)
    if fwd.topk is None:
        selected = int(np.argmax(fwd.coarse_combined))
    else:
        selected = int(fwd.topk[int(np.argmax(fwd.refine_combined))])
    return InferResult(
        selected=selected,
        trajectory=model.vocabulary.entry(selected),
        coarse_combined=fwd.coarse_combined,
        topk=fwd.topk,
        refine_combined=fwd.refine_combined,
        coarse_table=fwd.coarse_table,
        refine_tables=fwd.refine_tables,
    )


# ---- targets and losses ----


def imitation_targets(distances: np.ndarray, temperature: float) -> np.ndarray:
    """softmax(-d^2 / temperature) over the vocabulary."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    z = -np.square(np.asarray(distances, dtype=np.float64)) / temperature
    z -= z.max()
    e = np.exp(z)
    return e / e.sum()


def _metric_matrix(labels: LabelSet) -> np.ndarray:
    """(N, n_heads) label matrix with columns in HEAD_METRICS order."""
    return np.stack([labels.metric(m) for m in HEAD_METRICS], axis=1)


def _stage_loss(tape, logits, y_matrix, targets):
    """Imitation cross-entropy plus summed per-metric binary cross-entropy."""
    ce = tape.cross_entropy(tape.transpose(logits["imi"]), targets.reshape(1, -1))
    return tape.add(ce, tape.bce(tape.sigmoid(logits["sub"]), y_matrix, "sum"))


def loss_coarse(tape, fwd: ForwardPass, labels: LabelSet,
                targets: np.ndarray):
    return _stage_loss(tape, fwd.coarse_logits, _metric_matrix(labels), targets)


def loss_refine(tape, fwd: ForwardPass, labels: LabelSet,
                distances: np.ndarray, temperature: float):
    """The coarse-form loss per refinement layer, on the filtered set.

    Imitation targets are the softmax restricted to the surviving
    entries. Computing it from the distances (rather than renormalizing
    the full-vocabulary probabilities) keeps it well defined even when
    the filter misses the entire probability mass.
    """
    if not fwd.refine_logits:
        return None
    idx = fwd.topk
    sub_targets = imitation_targets(distances[idx], temperature)
    y_sub = _metric_matrix(labels)[idx]
    total = None
    for logits in fwd.refine_logits:
        ls = _stage_loss(tape, logits, y_sub, sub_targets)
        total = ls if total is None else tape.add(total, ls)
    return total


def make_soft_labels(teacher_table: dict[str, np.ndarray], labels: LabelSet,
                     delta: float) -> dict[str, np.ndarray]:
    """yhat = y + clip(teacher - y, -delta, +delta), per metric and entry."""
    out = {}
    for m in HEAD_METRICS:
        y = labels.metric(m)
        out[m] = y + np.clip(teacher_table[m] - y, -delta, delta)
    return out


def shift_toward(expert_xy: np.ndarray, selected_xy: np.ndarray,
                 max_shift: float = 1.0) -> np.ndarray:
    """Move each expert waypoint toward the selection by at most max_shift."""
    off = selected_xy - expert_xy
    norm = np.hypot(off[:, 0], off[:, 1])
    step = np.minimum(norm, max_shift)
    scale = np.divide(step, norm, out=np.zeros_like(norm), where=norm > 1e-12)
    return expert_xy + off * scale[:, None]


def loss_soft(tape, fwd: ForwardPass, yhat: dict[str, np.ndarray],
              soft_targets: np.ndarray):
    """Distillation loss on the coarse stage against teacher-derived labels."""
    ce = tape.cross_entropy(
        tape.transpose(fwd.coarse_logits["imi"]), soft_targets.reshape(1, -1)
    )
    yh = np.stack([yhat[m] for m in HEAD_METRICS], axis=1)
    return tape.add(ce, tape.bce(tape.sigmoid(fwd.coarse_logits["sub"]), yh, "sum"))


# ---- training ----


@dataclass
class TrainResult:
    model: PlannerModel
    adam: AdamState
    steps: int
    log: list[dict] = field(repr=False, default_factory=list)
    aborted: bool = False


def _expert_targets(s: Scenario, vocabulary, temperature: float) -> np.ndarray:
    d = l2_to_entries(vocabulary.positions, s.expert.xy)
    return imitation_targets(d, temperature)


def train(scenarios: list[Scenario], vocabulary: TrajectoryVocabulary,
          cfg: PlannerConfig, seed: int, labels=None,
          eval_cfg=evaluator.DEFAULT_EVAL_CONFIG, log_path=None,
          progress=None) -> TrainResult:
    """Train a student/EMA-teacher pair; deterministic for a fixed seed."""
    if not scenarios:
        raise ValueError("empty training set")
    if labels is None:
        labels = [None] * len(scenarios)
    labels = list(labels)

    def label_of(i: int) -> LabelSet:
        if labels[i] is None:
            labels[i] = evaluator.label_vocabulary(
                scenarios[i], vocabulary, eval_cfg, ep_reference="expert"
            )
        return labels[i]

    student = init_params(cfg, vocabulary, seed)
    teacher = student.copy()
    adam = AdamState(student, lr=cfg.lr)
    schedule = EmaSchedule(cfg.ema_mode)
    shuffle_rng = np.random.default_rng([seed, 101])
    aug_rng = np.random.default_rng([seed, 202])
    model = PlannerModel(cfg, vocabulary, student, teacher)

    n = len(scenarios)
    batch = max(1, min(cfg.batch_size, n))
    steps_per_epoch = (n + batch - 1) // batch
    log: list[dict] = []
    log_fh = open(log_path, "w") if log_path is not None else None
    snapshot = (student.copy(), teacher.copy())
    step = 0
    aborted = False
    try:
        for epoch in range(cfg.epochs):
            order = shuffle_rng.permutation(n)
            for b0 in range(0, n, batch):
                items = order[b0 : b0 + batch]
                t_start = time.perf_counter()
                epoch_frac = step / steps_per_epoch
                m = schedule.momentum(epoch_frac)
                student.zero_grads()
                sums = {"ori": 0.0, "aug": 0.0, "soft": 0.0}
                try:
                    for i in items:
                        s = scenarios[i]
                        lab = label_of(i)
                        d_exp = l2_to_entries(vocabulary.positions, s.expert.xy)
                        targets = imitation_targets(d_exp, cfg.imi_temperature)

                        tape = Tape()
                        bound = student.bind(tape)
                        fwd = forward(tape, bound, cfg, vocabulary, s)
                        l_ori = loss_coarse(tape, fwd, lab, targets)
                        lr_ref = loss_refine(tape, fwd, lab, d_exp,
                                             cfg.imi_temperature)
                        if lr_ref is not None:
                            l_ori = tape.add(l_ori, lr_ref)
                        total = l_ori
                        l_aug = None
                        if cfg.augment:
                            theta = sample_rotation(aug_rng, cfg.theta)
                            s_rot = rotate_scenario(s, theta)
                            lab_rot = evaluator.label_vocabulary(
                                s_rot, vocabulary, eval_cfg, ep_reference="expert"
                            )
                            d_rot = l2_to_entries(vocabulary.positions, s_rot.expert.xy)
                            targets_rot = imitation_targets(d_rot, cfg.imi_temperature)
                            fwd_rot = forward(tape, bound, cfg, vocabulary, s_rot)
                            l_aug = loss_coarse(tape, fwd_rot, lab_rot, targets_rot)
                            lr_rot = loss_refine(tape, fwd_rot, lab_rot, d_rot,
                                                 cfg.imi_temperature)
                            if lr_rot is not None:
                                l_aug = tape.add(l_aug, lr_rot)
                            total = tape.add(total, l_aug)
                        l_soft = None
                        if cfg.soft_labels:
                            t_res = infer(model, s, use_teacher=True)
                            yhat = make_soft_labels(t_res.coarse_table, lab, cfg.delta)
                            shifted = shift_toward(
                                s.expert.xy, t_res.trajectory.xy
                            )
                            d_soft = l2_to_entries(vocabulary.positions, shifted)
                            soft_targets = imitation_targets(
                                d_soft, cfg.imi_temperature
                            )
                            l_soft = loss_soft(tape, fwd, yhat, soft_targets)
                            total = tape.add(total, l_soft)
                        total = tape.scale(total, 1.0 / len(items))
                        tape.backward(total)
                        student.collect(bound)
                        sums["ori"] += float(l_ori.value[0, 0])
                        if l_aug is not None:
                            sums["aug"] += float(l_aug.value[0, 0])
                        if l_soft is not None:
                            sums["soft"] += float(l_soft.value[0, 0])
                    adam_step(student, adam)
                    ema_update(teacher, student, m)
                except NonFiniteDetected:
                    student, teacher = snapshot
                    model.student, model.teacher = student, teacher
                    aborted = True
                    break
                step += 1
                rec = {
                    "step": step,
                    "L_ori": sums["ori"] / len(items),
                    "L_aug": sums["aug"] / len(items),
                    "L_soft": sums["soft"] / len(items),
                    "ema_m": m,
                    "wall_ms": 1000.0 * (time.perf_counter() - t_start),
                }
                log.append(rec)
                if log_fh is not None:
                    log_fh.write(json.dumps(rec) + "\n")
                if progress is not None:
                    progress(rec)
            if aborted:
                break
            snapshot = (student.copy(), teacher.copy())
    finally:
        if log_fh is not None:
            log_fh.close()
    return TrainResult(model=model, adam=adam, steps=step, log=log,
                       aborted=aborted)
