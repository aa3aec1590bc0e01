"""Loss terms, EMA update and loss-weight ramp for dual knowledge distillation.

Prediction tensors follow :class:`dualkd.models.ModelOutput`: frame
probabilities ``[B, T, K]`` and clip probabilities ``[B, K]``.  Squared-error
terms average over frames and classes inside each clip and then over clips,
so their magnitude does not depend on the time resolution.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ArchitectureError, ConfigurationError, DimensionError, InputError

BCE_EPS = 1e-7
COUPLING_MODES = ("detached", "coupled")


def _t(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _frames(out):
    return out[0] if isinstance(out, tuple) else out.frame_probs


def _clips(out):
    return out[1] if isinstance(out, tuple) else out.clip_probs


# -- EMA ------------------------------------------------------------------------

def ema_update(mean_model, student_model, alpha: float, coupling: str = "coupled") -> dict[str, Tensor]:
    """Move ``mean_model`` towards ``student_model`` in place.

    Returns the parameter tensors the post-update mean student should run with.
    ``coupled`` keeps ``(1 - alpha) * s`` differentiable with respect to the
    student; ``detached`` returns constants.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ConfigurationError(f"EMA factor {alpha} outside [0, 1]")
    if coupling not in COUPLING_MODES:
        raise ConfigurationError(f"unknown EMA coupling {coupling!r}")
    mp, sp = mean_model.params, student_model.params
    if mp.keys() != sp.keys():
        missing = sorted(set(mp) ^ set(sp))
        raise ArchitectureError(f"parameter {missing[0]!r} is not shared by mean student and student")
    updated = {}
    for name, m in mp.items():
        s = sp[name]
        if m.shape != s.shape:
            raise ArchitectureError(f"parameter {name!r}: shape {m.shape} != {s.shape}")
        if coupling == "coupled":
            new = Tensor(m.data.copy()) * alpha + s * (1.0 - alpha)
        else:
            with ad.no_grad():
                new = Tensor(m.data * alpha + s.data * (1.0 - alpha))
        m.data = new.data.copy()
        updated[name] = new
    return updated


def mu_schedule(global_step, ramp_steps) -> float:
    """Loss weight ``exp(-5 (1 - r)^2)`` with ``r = min(1, step / ramp_steps)``."""
    if ramp_steps < 1:
        raise ConfigurationError("ramp_steps must be at least 1")
    r = min(1.0, max(0.0, global_step / ramp_steps))
    return float(math.exp(-5.0 * (1.0 - r) ** 2))


# -- loss terms -------------------------------------------------------------------

def _bce(p: Tensor, y: Tensor) -> Tensor:
    p = ad.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    return -(y * ad.log(p) + (1.0 - y) * ad.log(1.0 - p))


def _masked_mean(values: Tensor, mask: np.ndarray) -> Tensor:
    """Mean of ``values`` over the clips selected by ``mask`` (clip axis first)."""
    idx = np.flatnonzero(mask > 0)
    return ad.mean(ad.getitem(values, idx))


def classification_loss(out, batch) -> Tensor:
    """BCE on strong frame labels and on clip labels of strong and weak clips.

    The two terms are averaged when both are present.  Unlabeled clips are
    excluded by the masks carried in ``batch``.
    """
    frames, clips = _frames(out), _clips(out)
    fy, cy = np.asarray(batch.frame_labels), np.asarray(batch.clip_labels)
    if frames.shape != fy.shape or clips.shape != cy.shape:
        raise InputError(
            f"label shapes {fy.shape}/{cy.shape} do not match predictions {frames.shape}/{clips.shape}"
        )
    strong = np.asarray(batch.strong_mask)
    labelled = strong + np.asarray(batch.weak_mask)
    terms = []
    if strong.any():
        terms.append(_masked_mean(_bce(frames, Tensor(fy.astype(frames.dtype))), strong))
    if labelled.any():
        terms.append(_masked_mean(_bce(clips, Tensor(cy.astype(clips.dtype))), labelled))
    if not terms:
        return Tensor(np.zeros((), dtype=frames.dtype))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def _sq(a: Tensor, b: Tensor) -> Tensor:
    d = a - b
    return ad.mean(d * d)


def consistency_loss(student_out, mean_out) -> Tensor:
    """Frame plus clip MSE against constant mean-student targets, over every clip."""
    return _sq(_frames(student_out), _frames(mean_out).detach()) + _sq(_clips(student_out), _clips(mean_out).detach())


def takd_loss(mean_out, teacher_out) -> Tensor:
    """Clip-level plus frame-level squared error between the mean student and the teacher."""
    fm, ft = _frames(mean_out), _frames(teacher_out).detach()
    cm, ct = _clips(mean_out), _clips(teacher_out).detach()
    if fm.shape != ft.shape or cm.shape != ct.shape:
        raise DimensionError(f"prediction shapes differ: {fm.shape}/{cm.shape} vs {ft.shape}/{ct.shape}")
    return _sq(cm, ct) + _sq(fm, ft)


def cdtd_loss(student_out, teacher_out) -> Tensor:
    """Same squared-error form as :func:`takd_loss`, applied to the student itself."""
    return takd_loss(student_out, teacher_out)


def eefd_loss(transformed, embeddings) -> Tensor:
    """Squared error between time-pooled projected features and frozen embeddings."""
    transformed = _t(transformed)
    emb = _t(embeddings).detach()
    if transformed.ndim != 3 or emb.ndim != 3:
        raise DimensionError(f"expected [B, T, E] tensors, got {transformed.shape} and {emb.shape}")
    if transformed.shape[2] != emb.shape[2] or transformed.shape[0] != emb.shape[0]:
        raise DimensionError(f"feature width/batch mismatch: {transformed.shape} vs {emb.shape}")
    pooled = ad.adaptive_avg_time(transformed, emb.shape[1], axis=1)
    return _sq(pooled, Tensor(emb.data.astype(pooled.dtype, copy=False)))


def total_loss(l_cls, l_con, l_takd, l_eefd, mu):
    """``l_cls + mu * (l_con + l_takd + l_eefd)``; works on tensors and floats."""
    return l_cls + mu * (l_con + l_takd + l_eefd)


@dataclass
class LossBreakdown:
    l_cls: float = 0.0
    l_con: float = 0.0
    l_takd: float = 0.0
    l_eefd: float = 0.0
    mu: float = 0.0
    l_total: float = 0.0
    step: int = 0

    @classmethod
    def from_parts(cls, l_cls, l_con, l_takd, l_eefd, mu, step):
        parts = [float(v.item() if isinstance(v, Tensor) else v) for v in (l_cls, l_con, l_takd, l_eefd)]
        return cls(*parts, float(mu), float(total_loss(*parts, float(mu))), int(step))

    def recompute_total(self) -> float:
        return total_loss(self.l_cls, self.l_con, self.l_takd, self.l_eefd, self.mu)

    def as_dict(self) -> Mapping[str, float]:
        return asdict(self)
