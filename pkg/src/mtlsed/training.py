"""Losses, schedule, and the two-stage training pipeline.

Stage 1 trains a clip-level tagger on strong labels collapsed to presence
plus the weak set; its confident predictions on unlabeled clips become
pseudo-weak labels. Stage 2 trains the two-branch network jointly, weighting
the detection loss against the auxiliary coarse-class loss by alpha:

    L_MTL = alpha * L_SED + (1 - alpha) * L_ACC

Strong clips are supervised per frame, weak (and pseudo-weak) clips per clip,
and the coarse targets are the taxonomy projection of the event targets at
the same granularity. Everything is deterministic given (config, data, seed):
parameters come from the model builder's seeded init and batch order from a
per-epoch generator seeded with (seed, epoch).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .model import ModelConfig, Posteriors, TwoBranchCRNN, build, save_checkpoint
from .postprocess import rasterize_events
from .taxonomy import ACC_CLASSES, EVENT_CLASSES, TaxonomyMap, resolve_taxonomy

METRIC_COLUMNS = (
    "epoch",
    "lr",
    "l_sed_strong",
    "l_sed_weak",
    "l_acc_strong",
    "l_acc_weak",
    "L_SED",
    "L_ACC",
    "L_MTL",
)

_KINDS = ("strong", "weak", "unlabeled")


class TrainingError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    """Optimization knobs. Full-scale defaults; desk() shrinks them."""

    alpha: float = 0.5
    batch_size: int = 48
    max_lr: float = 0.001
    ramp_epochs: int = 50
    stage1_epochs: int = 100
    stage2_epochs: int = 200
    pseudo_threshold: float = 0.5
    taxonomy: str = "proposed"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise TrainingError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not 0.0 < self.pseudo_threshold < 1.0:
            raise TrainingError("pseudo_threshold must lie in (0, 1)")
        for name in ("batch_size", "ramp_epochs", "stage1_epochs", "stage2_epochs"):
            if getattr(self, name) < 1:
                raise TrainingError(f"{name} must be at least 1")
        if self.max_lr <= 0:
            raise TrainingError("max_lr must be positive")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Single-core scale: small batches, short stages, proportional ramp."""
        values = dict(batch_size=8, ramp_epochs=10, stage1_epochs=30, stage2_epochs=60)
        values.update(overrides)
        return cls(**values)


@dataclass(frozen=True)
class Example:
    """One clip's features plus its supervision, if any.

    kind is "strong" (frame-level events), "weak" (clip-level tags), or
    "unlabeled". Features are a (frames, mel) float tensor.
    """

    clip_id: str
    features: torch.Tensor
    kind: str
    events: tuple = ()
    tags: tuple = ()

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise TrainingError(f"unknown example kind {self.kind!r}")
        if self.kind != "strong" and self.events:
            raise TrainingError("only strong examples carry events")
        if self.kind != "weak" and self.tags:
            raise TrainingError("only weak examples carry tags")
        if self.features.ndim != 2:
            raise TrainingError("features must be a (frames, mel) matrix")
        object.__setattr__(self, "events", tuple(self.events))
        object.__setattr__(self, "tags", tuple(self.tags))


@dataclass(frozen=True)
class TrainingData:
    strong: tuple
    weak: tuple
    unlabeled: tuple
    hop_seconds: float
    class_order: tuple = EVENT_CLASSES

    def __post_init__(self):
        object.__setattr__(self, "strong", tuple(self.strong))
        object.__setattr__(self, "weak", tuple(self.weak))
        object.__setattr__(self, "unlabeled", tuple(self.unlabeled))
        if self.hop_seconds <= 0:
            raise TrainingError("hop_seconds must be positive")
        for name in ("strong", "weak", "unlabeled"):
            for example in getattr(self, name):
                if example.kind != name:
                    raise TrainingError(
                        f"{name} split holds a {example.kind!r} example"
                    )


@dataclass(frozen=True)
class Batch:
    """Stacked features and masked targets at the pooled frame rate."""

    features: torch.Tensor     # (B, frames, mel)
    sed_frame: torch.Tensor    # (B, pooled, n_event_classes)
    sed_clip: torch.Tensor     # (B, n_event_classes)
    acc_frame: torch.Tensor    # (B, pooled, n_groups)
    acc_clip: torch.Tensor     # (B, n_groups)
    strong_mask: torch.Tensor  # (B,) bool
    weak_mask: torch.Tensor    # (B,) bool

    def __post_init__(self):
        for name in ("sed_frame", "sed_clip", "acc_frame", "acc_clip"):
            t = getattr(self, name)
            if not bool(((t == 0) | (t == 1)).all()):
                raise TrainingError(f"{name} targets must be binary")
        if bool((self.strong_mask & self.weak_mask).any()):
            raise TrainingError("a clip cannot be both strong- and weak-masked")


@dataclass(frozen=True)
class LossBreakdown:
    l_sed_strong: float
    l_sed_weak: float
    l_acc_strong: float
    l_acc_weak: float
    L_SED: float
    L_ACC: float
    L_MTL: float


@dataclass(frozen=True)
class TrainLog:
    """Per-epoch CSV rows plus every step's loss terms."""

    rows: tuple
    breakdowns: tuple
    steps: int


# ---- losses ------------------------------------------------------------------

def bce(p: torch.Tensor, t: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean of -[t*ln(p) + (1-t)*ln(1-p)] over mask-selected entries; 0 if none.

    mask must broadcast against p; the zero for an empty mask keeps the graph
    alive so gradients are exact zeros rather than missing.
    """
    if p.shape != t.shape:
        raise TrainingError(f"probability shape {tuple(p.shape)} != target {tuple(t.shape)}")
    try:
        selected = torch.broadcast_to(mask, p.shape)
    except RuntimeError as exc:
        raise TrainingError(f"mask does not broadcast to {tuple(p.shape)}") from exc
    if not bool(selected.any()):
        return p.sum() * 0.0
    values = -(t * torch.log(p) + (1.0 - t) * torch.log(1.0 - p))
    return values[selected].mean()


def sed_loss(post: Posteriors, batch: Batch) -> tuple:
    """(frame term on strong clips, clip term on weak clips, their sum)."""
    l_strong = bce(post.sed_frame, batch.sed_frame, batch.strong_mask[:, None, None])
    l_weak = bce(post.sed_clip, batch.sed_clip, batch.weak_mask[:, None])
    return l_strong, l_weak, l_strong + l_weak


def acc_loss(post: Posteriors, batch: Batch) -> tuple:
    """Same structure as sed_loss over the projected coarse-class targets."""
    if post.acc_frame is None or post.acc_clip is None:
        raise TrainingError("auxiliary branch is stripped; no coarse posteriors")
    l_strong = bce(post.acc_frame, batch.acc_frame, batch.strong_mask[:, None, None])
    l_weak = bce(post.acc_clip, batch.acc_clip, batch.weak_mask[:, None])
    return l_strong, l_weak, l_strong + l_weak


def combine_losses(l_sed, l_acc, alpha: float):
    if not 0.0 <= alpha <= 1.0:
        raise TrainingError(f"alpha must lie in [0, 1], got {alpha}")
    return alpha * l_sed + (1.0 - alpha) * l_acc


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Exponential ramp to max_lr over ramp_epochs, then flat."""
    if epoch < 0:
        raise TrainingError("epoch must be nonnegative")
    x = min(epoch / cfg.ramp_epochs, 1.0)
    return cfg.max_lr * math.exp(-5.0 * (1.0 - x) ** 2)


# ---- batch assembly ----------------------------------------------------------

def pooled_frames(config: ModelConfig, frames: int) -> int:
    """Output frame count of the ceil-mode pooling chain."""
    out = frames
    for pool_t in [config.shared_block[2][0]] + [b[2][0] for b in config.branch_blocks]:
        out = -(-out // pool_t)
    return out


def collapse_to_tags(example: Example) -> Example:
    """Strong example as a weak one: tags = the set of event classes present."""
    if example.kind == "weak":
        return example
    if example.kind != "strong":
        raise TrainingError("only strong or weak examples can be collapsed")
    tags = tuple(sorted({e.klass for e in example.events}))
    return Example(example.clip_id, example.features, "weak", tags=tags)


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    """Replayable shuffle: a fresh generator keyed by (seed, epoch)."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def build_batch(
    examples: Sequence[Example],
    taxonomy: TaxonomyMap,
    pooled_hop: float,
    n_pooled: int,
    class_order: Sequence[str] = EVENT_CLASSES,
    groups: Sequence[str] = ACC_CLASSES,
) -> Batch:
    """Stack features and rasterize targets at the pooled frame rate.

    Strong examples get frame targets and the strong mask; weak examples get
    clip targets and the weak mask. Coarse targets are the taxonomy
    projection: a group is active wherever any of its event classes is.
    """
    if not examples:
        raise TrainingError("batch must contain at least one example")
    shape = examples[0].features.shape
    membership = np.zeros((len(class_order), len(groups)), dtype=np.int8)
    group_col = {g: j for j, g in enumerate(groups)}
    for i, klass in enumerate(class_order):
        membership[i, group_col[taxonomy(klass)]] = 1

    feats, sed_f, sed_c, acc_f, acc_c, strong_m, weak_m = [], [], [], [], [], [], []
    for ex in examples:
        if ex.features.shape != shape:
            raise TrainingError("all features in a batch must share one shape")
        if ex.kind == "unlabeled":
            raise TrainingError("unlabeled examples cannot be batched for training")
        feats.append(ex.features)
        frame = np.zeros((n_pooled, len(class_order)), dtype=np.int8)
        clip = np.zeros(len(class_order), dtype=np.int8)
        if ex.kind == "strong":
            frame = rasterize_events(ex.events, pooled_hop, n_pooled, class_order)
        else:
            for tag in ex.tags:
                clip[class_order.index(tag)] = 1
        sed_f.append(frame)
        sed_c.append(clip)
        acc_f.append((frame @ membership > 0).astype(np.int8))
        acc_c.append((clip @ membership > 0).astype(np.int8))
        strong_m.append(ex.kind == "strong")
        weak_m.append(ex.kind == "weak")

    return Batch(
        features=torch.stack(feats),
        sed_frame=torch.from_numpy(np.stack(sed_f)).float(),
        sed_clip=torch.from_numpy(np.stack(sed_c)).float(),
        acc_frame=torch.from_numpy(np.stack(acc_f)).float(),
        acc_clip=torch.from_numpy(np.stack(acc_c)).float(),
        strong_mask=torch.tensor(strong_m, dtype=torch.bool),
        weak_mask=torch.tensor(weak_m, dtype=torch.bool),
    )


# ---- pseudo-labeling ---------------------------------------------------------

def pseudo_label(
    tagger: TwoBranchCRNN,
    unlabeled: Sequence[Example],
    threshold: float,
    class_order: Sequence[str] = EVENT_CLASSES,
) -> tuple:
    """Confident clip predictions become weak examples; the rest are dropped.

    Every class whose clip probability reaches the threshold becomes a tag;
    clips where no class does are omitted from the result.
    """
    if not 0.0 < threshold < 1.0:
        raise TrainingError("pseudo_threshold must lie in (0, 1)")
    out = []
    with torch.no_grad():
        for ex in unlabeled:
            probs = tagger(ex.features).sed_clip
            tags = tuple(
                sorted(
                    class_order[i]
                    for i in range(len(class_order))
                    if float(probs[i]) >= threshold
                )
            )
            if tags:
                out.append(Example(ex.clip_id, ex.features, "weak", tags=tags))
    return tuple(out)


# ---- training loops ----------------------------------------------------------

def _mean(values) -> float:
    values = list(values)
    return sum(values) / len(values)


def _epoch_row(epoch: int, lr: float, breakdowns: Sequence[LossBreakdown]) -> dict:
    row = {"epoch": epoch, "lr": lr}
    for name in METRIC_COLUMNS[2:]:
        row[name] = _mean(getattr(b, name) for b in breakdowns)
    return row


def write_metrics_csv(rows: Sequence[Mapping], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for row in rows:
            writer.writerow([repr(row[c]) if c != "epoch" else row[c] for c in METRIC_COLUMNS])


def _train_loop(model, cfg, examples, epochs, step_fn, taxonomy, pooled_hop, n_pooled, class_order):
    torch.set_num_threads(1)
    optimizer = torch.optim.Adam(
        model.parameters(), lr=cfg.max_lr, betas=(0.9, 0.999), eps=1e-8
    )
    rows, breakdowns, steps = [], [], 0
    for epoch in range(epochs):
        lr = lr_schedule(epoch, cfg)
        for group in optimizer.param_groups:
            group["lr"] = lr
        order = epoch_order(cfg.seed, epoch, len(examples))
        epoch_breakdowns = []
        for start in range(0, len(order), cfg.batch_size):
            picked = [examples[i] for i in order[start : start + cfg.batch_size]]
            batch = build_batch(picked, taxonomy, pooled_hop, n_pooled, class_order)
            optimizer.zero_grad()
            loss, breakdown = step_fn(model, batch)
            loss.backward()
            optimizer.step()
            epoch_breakdowns.append(breakdown)
            breakdowns.append(breakdown)
            steps += 1
        rows.append(_epoch_row(epoch, lr, epoch_breakdowns))
    return TrainLog(tuple(rows), tuple(breakdowns), steps)


def _geometry(model_cfg: ModelConfig, data: TrainingData, examples) -> tuple:
    frames = examples[0].features.shape[0]
    return data.hop_seconds * model_cfg.time_pool, pooled_frames(model_cfg, frames)


def train_stage1(
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    data: TrainingData,
    out_dir=None,
) -> tuple:
    """Clip-level tagger on strong-collapsed plus weak clips.

    Returns (model, TrainLog); with out_dir set, also writes
    stage1_metrics.csv and stage1.ckpt there.
    """
    examples = tuple(collapse_to_tags(e) for e in data.strong) + data.weak
    if not examples:
        raise TrainingError("stage 1 needs strong or weak training clips")
    model = build(model_cfg, cfg.seed)
    taxonomy = resolve_taxonomy(cfg.taxonomy)
    pooled_hop, n_pooled = _geometry(model_cfg, data, examples)

    def step(m, batch):
        post = m(batch.features)
        loss = bce(post.sed_clip, batch.sed_clip, batch.weak_mask[:, None])
        value = float(loss.detach())
        return loss, LossBreakdown(0.0, value, 0.0, 0.0, value, 0.0, value)

    log = _train_loop(
        model, cfg, examples, cfg.stage1_epochs, step,
        taxonomy, pooled_hop, n_pooled, data.class_order,
    )
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(log.rows, out_dir / "stage1_metrics.csv")
        save_checkpoint(out_dir / "stage1.ckpt", model, cfg.seed, log.steps)
    return model, log


def train_stage2(
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    data: TrainingData,
    pseudo_weak: Sequence[Example] = (),
    out_dir=None,
    sed_only: bool = False,
) -> tuple:
    """Joint two-branch training on strong plus combined weak clips.

    pseudo_weak examples are treated exactly like real weak ones, coarse
    supervision included. With sed_only the auxiliary term is omitted from
    the optimized loss entirely (the alpha = 1 control). Returns
    (model, TrainLog); with out_dir set, also writes stage2_metrics.csv and
    stage2.ckpt there.
    """
    if model_cfg.acc_classes == 0 and not sed_only:
        raise TrainingError("joint training needs the auxiliary branch")
    examples = data.strong + data.weak + tuple(pseudo_weak)
    if not examples:
        raise TrainingError("stage 2 needs strong or weak training clips")
    model = build(model_cfg, cfg.seed)
    taxonomy = resolve_taxonomy(cfg.taxonomy)
    pooled_hop, n_pooled = _geometry(model_cfg, data, examples)

    def step(m, batch):
        post = m(batch.features)
        l_sed_strong, l_sed_weak, l_sed = sed_loss(post, batch)
        if sed_only:
            loss = l_sed
            breakdown = LossBreakdown(
                float(l_sed_strong.detach()), float(l_sed_weak.detach()),
                0.0, 0.0, float(l_sed.detach()), 0.0, float(l_sed.detach()),
            )
        else:
            l_acc_strong, l_acc_weak, l_acc = acc_loss(post, batch)
            loss = combine_losses(l_sed, l_acc, cfg.alpha)
            breakdown = LossBreakdown(
                float(l_sed_strong.detach()), float(l_sed_weak.detach()),
                float(l_acc_strong.detach()), float(l_acc_weak.detach()),
                float(l_sed.detach()), float(l_acc.detach()), float(loss.detach()),
            )
        return loss, breakdown

    log = _train_loop(
        model, cfg, examples, cfg.stage2_epochs, step,
        taxonomy, pooled_hop, n_pooled, data.class_order,
    )
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(log.rows, out_dir / "stage2_metrics.csv")
        save_checkpoint(out_dir / "stage2.ckpt", model, cfg.seed, log.steps)
    return model, log
