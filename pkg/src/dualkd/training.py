"""Optimizer, training step and training loop for the student / mean-student / teacher triple."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import parameter_hash, save_checkpoint
from .distill import (
    COUPLING_MODES,
    LossBreakdown,
    cdtd_loss,
    classification_loss,
    consistency_loss,
    eefd_loss,
    ema_update,
    mu_schedule,
    takd_loss,
)
from .errors import ConfigurationError, DivergenceError
from .models import PRESETS, SECRNN

MODES = ("supervised_only", "mean_teacher", "CDTD", "TAKD", "TAKD+EEFD")
TEACHER_MODES = ("CDTD", "TAKD", "TAKD+EEFD")
AUGMENTATIONS = ("none", "mixup", "time_mask", "both")
METRIC_COLUMNS = (
    "epoch", "mu", "l_cls", "l_con", "l_takd", "l_eefd", "l_total",
    "val_segment_f1", "val_event_f1", "psds_lite",
)


@dataclass
class TrainConfig:
    ema_alpha: float = 0.999
    lr: float = 0.001
    batch_size: int = 48
    epochs: int = 200
    ramp_epochs: int = 50
    mode: str = "TAKD+EEFD"
    ema_gradient_coupling: str = "coupled"
    seed: int = 0
    batch_composition: tuple = (12, 12, 24)
    augmentation: str = "none"
    student: str = "SE-CRNN-8"
    dropout: float = 0.5
    steps_per_epoch: int = 0  # 0: derived from split sizes
    max_val_clips: int = 0  # 0: all

    def __post_init__(self):
        self.batch_composition = tuple(int(c) for c in self.batch_composition)
        if not 0.0 <= self.ema_alpha <= 1.0:
            raise ConfigurationError(f"ema_alpha {self.ema_alpha} outside [0, 1]")
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.ema_gradient_coupling not in COUPLING_MODES:
            raise ConfigurationError(f"ema_gradient_coupling must be one of {COUPLING_MODES}")
        if self.augmentation not in AUGMENTATIONS:
            raise ConfigurationError(f"augmentation must be one of {AUGMENTATIONS}")
        if self.epochs < 1 or not 1 <= self.ramp_epochs <= self.epochs:
            raise ConfigurationError("need 1 <= ramp_epochs <= epochs")
        if len(self.batch_composition) != 3 or min(self.batch_composition) < 0:
            raise ConfigurationError("batch_composition is three nonnegative counts (strong, weak, unlabeled)")
        if sum(self.batch_composition) != self.batch_size:
            raise ConfigurationError(
                f"batch_composition {self.batch_composition} does not sum to batch_size {self.batch_size}"
            )
        if self.lr <= 0:
            raise ConfigurationError("lr must be positive")
        if self.student not in PRESETS:
            raise ConfigurationError(f"student must be one of {sorted(PRESETS)}")

    @property
    def uses_teacher(self) -> bool:
        return self.mode in TEACHER_MODES

    @property
    def uses_embeddings(self) -> bool:
        return self.mode == "TAKD+EEFD"

    # key=value run-config files
    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, items, base: "TrainConfig | None" = None) -> "TrainConfig":
        base = base or cls()
        kinds = {f.name: type(getattr(base, f.name)) for f in fields(cls)}
        updates = {}
        for k, v in items.items():
            if k not in kinds:
                raise ConfigurationError(f"unknown run-config key {k!r}")
            if not isinstance(v, str):
                updates[k] = v
                continue
            kind = kinds[k]
            try:
                if kind is tuple:
                    updates[k] = tuple(int(x) for x in v.split(","))
                elif kind is int:
                    updates[k] = int(v)
                elif kind is float:
                    updates[k] = float(v)
                else:
                    updates[k] = v
            except ValueError:
                raise ConfigurationError(f"run-config value {k}={v!r} is not a valid {kind.__name__}") from None
        return replace(base, **updates)


def parse_key_values(text: str) -> dict[str, str]:
    items = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {n}: expected key=value, got {raw!r}")
        k, v = line.split("=", 1)
        items[k.strip()] = v.strip()
    return items


def load_run_config(path, overrides=None) -> TrainConfig:
    items = parse_key_values(Path(path).read_text(encoding="utf-8")) if path else {}
    items.update(overrides or {})
    return TrainConfig.from_mapping(items)


# -- optimizer ----------------------------------------------------------------------

class Adam:
    def __init__(self, params: dict, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr, self.betas, self.eps = lr, betas, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            step = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data = (p.data - step).astype(p.data.dtype, copy=False)


# -- augmentation --------------------------------------------------------------------

def augment(batch, kind: str, rng: np.random.Generator, lam: float | None = None):
    """Return an augmented copy of ``batch``.

    ``mixup`` pairs each clip with another clip of the same split and blends
    features, labels and embeddings with one ``lam ~ Beta(0.2, 0.2)``.
    ``time_mask`` zeroes up to 5% of frames per clip, features only.
    """
    if kind not in AUGMENTATIONS:
        raise ConfigurationError(f"unknown augmentation {kind!r}")
    if kind == "none":
        return batch
    out = replace(batch)
    if kind in ("mixup", "both"):
        lam = float(rng.beta(0.2, 0.2)) if lam is None else float(lam)
        perm = np.arange(len(batch))
        for mask in (batch.strong_mask, batch.weak_mask, batch.unlabeled_mask):
            idx = np.flatnonzero(mask > 0)
            perm[idx] = idx[rng.permutation(len(idx))]

        def mix(a):
            return None if a is None else (lam * a + (1 - lam) * a[perm]).astype(a.dtype)

        out = replace(out, features=mix(out.features), frame_labels=mix(out.frame_labels),
                      clip_labels=mix(out.clip_labels), embeddings=mix(out.embeddings))
    if kind in ("time_mask", "both"):
        feats = out.features.copy()
        T = feats.shape[2]
        longest = int(0.05 * T)
        for b in range(len(feats)):
            width = int(rng.integers(0, longest + 1))
            start = int(rng.integers(0, T - width + 1))
            feats[b, :, start : start + width] = 0.0
        out = replace(out, features=feats)
    return out


# -- training step --------------------------------------------------------------------

@dataclass
class ModelTriple:
    student: SECRNN
    mean_student: SECRNN
    teacher: SECRNN | None = None

    def __post_init__(self):
        if self.student.cfg != self.mean_student.cfg:
            raise ConfigurationError("mean student must share the student architecture")


def _check_finite(parts: dict, step: int):
    for name, value in parts.items():
        v = float(value.item() if isinstance(value, Tensor) else value)
        if not math.isfinite(v):
            raise DivergenceError(name, step)


def forward_losses(triple: ModelTriple, batch, cfg: TrainConfig, global_step: int, ramp_steps: int,
                   rng: np.random.Generator, exclude=()):
    """Steps (1)-(6) of a training step: losses in order, EMA update included.

    Returns ``(breakdown, total)`` with ``total`` a differentiable tensor.
    Terms named in ``exclude`` are left out of ``total`` and reported as 0.
    """
    s, ms = triple.student, triple.mean_student
    x = Tensor(batch.features.astype(s.dtype, copy=False))
    zero = Tensor(np.zeros((), dtype=s.dtype))

    # (1)-(2) student predictions and classification loss
    s_out = s.forward(x, "train", rng=rng)
    l_cls = classification_loss(s_out, batch)

    # (3) pre-update mean student, constant targets for consistency
    l_con = zero
    if cfg.mode != "supervised_only":
        with ad.no_grad():
            ms_pre = ms.forward(x, "eval", bn_mode="train", dropout=False)
        l_con = consistency_loss(s_out, ms_pre)

    # (4) EMA update
    new_params = ema_update(ms, s, cfg.ema_alpha, cfg.ema_gradient_coupling)

    # (5) post-update mean student against teacher and embeddings
    l_takd, l_eefd = zero, zero
    if cfg.uses_teacher:
        if triple.teacher is None:
            raise ConfigurationError(f"mode {cfg.mode} needs a teacher model")
        with ad.no_grad():
            t_out = triple.teacher.forward(x.astype(triple.teacher.dtype), "eval")
        if cfg.mode == "CDTD":
            l_takd = cdtd_loss(s_out, t_out)
        else:
            ms_post = ms.forward(x, "eval", params=new_params, bn_mode="train", dropout=False,
                                 update_stats=False)
            l_takd = takd_loss(ms_post, t_out)
            if cfg.uses_embeddings:
                if batch.embeddings is None:
                    raise ConfigurationError("TAKD+EEFD needs embeddings in every batch")
                l_eefd = eefd_loss(ms_post.transformed_feats, batch.embeddings)

    # (6) combined loss
    mu = mu_schedule(global_step, ramp_steps)
    parts = {"l_cls": l_cls, "l_con": l_con, "l_takd": l_takd, "l_eefd": l_eefd}
    for name in exclude:
        parts[name] = zero
    _check_finite(parts, global_step)
    total = parts["l_cls"] + (parts["l_con"] + parts["l_takd"] + parts["l_eefd"]) * mu
    breakdown = LossBreakdown.from_parts(parts["l_cls"], parts["l_con"], parts["l_takd"], parts["l_eefd"], mu, global_step)
    _check_finite({"l_total": breakdown.l_total}, global_step)
    return breakdown, total


def train_step(triple: ModelTriple, batch, cfg: TrainConfig, optimizer: Adam, global_step: int,
               ramp_steps: int, rng: np.random.Generator) -> LossBreakdown:
    """One optimization step; only the student's parameters move (plus the EMA)."""
    breakdown, total = forward_losses(triple, batch, cfg, global_step, ramp_steps, rng)
    triple.student.zero_grad()
    total.backward()
    optimizer.step()
    return breakdown


def student_gradients(triple: ModelTriple, batch, cfg: TrainConfig, global_step=0, ramp_steps=1, seed=0,
                      exclude=()) -> dict[str, np.ndarray]:
    """Student gradients of one step's total loss, without an optimizer update."""
    triple.student.zero_grad()
    _, total = forward_losses(triple, batch, cfg, global_step, ramp_steps, np.random.default_rng(seed), exclude)
    total.backward()
    return {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for k, p in triple.student.params.items()}


# -- training loop ----------------------------------------------------------------------

@dataclass
class RunArtifacts:
    out_dir: Path
    metrics_path: Path
    best_checkpoint: Path
    final_checkpoint: Path
    history: list = field(default_factory=list)
    teacher_hash_start: str | None = None
    teacher_hash_end: str | None = None
    best_epoch: int = 0
    best_val_segment_f1: float = -1.0
    student: SECRNN | None = None
    mean_student: SECRNN | None = None


def build_student(cfg: TrainConfig, n_mels: int, n_classes: int, embedding_dim: int = 768) -> SECRNN:
    model_cfg = PRESETS[cfg.student](
        n_mels=n_mels, n_classes=n_classes, dropout=cfg.dropout,
        eefd_enabled=cfg.uses_embeddings, embedding_dim=embedding_dim,
    )
    return SECRNN(model_cfg, seed=cfg.seed)


def _fmt(v) -> str:
    return str(v) if isinstance(v, int) else f"{v:.10g}"


def train_loop(cfg: TrainConfig, train_store, out_dir, val_store=None, teacher: SECRNN | None = None,
               log=None) -> RunArtifacts:
    """Train a student under ``cfg`` and write metrics and checkpoints to ``out_dir``.

    Validation metrics come from the student in eval mode on ``val_store``
    (every clip with ground truth); the best epoch by segment F1 is kept.
    """
    from .metrics import evaluate_model

    if cfg.uses_teacher and teacher is None:
        raise ConfigurationError(f"mode {cfg.mode} needs a pre-trained teacher")
    if cfg.uses_embeddings and not train_store.embeddings:
        raise ConfigurationError("mode TAKD+EEFD needs an embedding provider for the training data")
    from .synth import BatchSampler

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run.cfg").write_text(cfg.to_text(), encoding="utf-8")

    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    sampler = BatchSampler(train_store, cfg.batch_composition, np.random.default_rng(seeds[0]))
    dropout_rng = np.random.default_rng(seeds[1])
    aug_rng = np.random.default_rng(seeds[2])

    emb_dim = next(iter(train_store.embeddings.values())).shape[1] if train_store.embeddings else 768
    student = build_student(cfg, train_store.cfg.n_mels, train_store.K, emb_dim)
    triple = ModelTriple(student, student.copy(), teacher)
    optimizer = Adam(student.params, lr=cfg.lr)
    spe = cfg.steps_per_epoch or sampler.steps_per_epoch()
    ramp_steps = cfg.ramp_epochs * spe

    art = RunArtifacts(out_dir, out_dir / "metrics.csv", out_dir / "best.ckpt", out_dir / "final.ckpt")
    if teacher is not None:
        art.teacher_hash_start = parameter_hash(teacher)

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_COLUMNS)
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        sums = np.zeros(5)
        for _ in range(spe):
            step += 1
            batch = augment(sampler.next_batch(), cfg.augmentation, aug_rng)
            b = train_step(triple, batch, cfg, optimizer, step, ramp_steps, dropout_rng)
            sums += (b.l_cls, b.l_con, b.l_takd, b.l_eefd, b.l_total)
        means = sums / spe
        if val_store is not None:
            report = evaluate_model(student, val_store, max_clips=cfg.max_val_clips or None)
            seg, evt, psds = report["segment_f1"], report["event_f1"], report["psds_lite"]
        else:
            seg = evt = psds = float("nan")
        row = dict(zip(METRIC_COLUMNS, (epoch, b.mu, *means[:4], means[4], seg, evt, psds)))
        art.history.append(row)
        writer.writerow([_fmt(row[c]) for c in METRIC_COLUMNS])
        if log:
            log(" ".join(f"{c}={_fmt(row[c])}" for c in METRIC_COLUMNS))
        if val_store is not None and seg > art.best_val_segment_f1:
            art.best_val_segment_f1, art.best_epoch = seg, epoch
            save_checkpoint(art.best_checkpoint, {"student": student, "mean_student": triple.mean_student},
                            {"epoch": str(epoch), "mode": cfg.mode, "seed": str(cfg.seed)})
    art.metrics_path.write_text(buf.getvalue(), encoding="utf-8")
    save_checkpoint(art.final_checkpoint, {"student": student, "mean_student": triple.mean_student},
                    {"epoch": str(cfg.epochs), "mode": cfg.mode, "seed": str(cfg.seed)})
    if val_store is None:
        art.best_checkpoint = art.final_checkpoint
    if teacher is not None:
        art.teacher_hash_end = parameter_hash(teacher)
    art.student, art.mean_student = student, triple.mean_student
    return art
