"""Finite-difference gradient checks for every differentiable op and a small full model.

Each case builds a scalar loss from freshly drawn 64-bit inputs.  Losses
weight outputs with a fixed random tensor so that no gradient is trivially
uniform.
"""

from __future__ import annotations

import time

import numpy as np

from . import autodiff as ad
from .autodiff import finite_diff_gradcheck, nudge_from_kinks
from .autodiff.gradcheck import leaf

OP_LIMIT = 1e-3
MODEL_LIMIT = 1e-2


def _weighted(out, rng):
    w = ad.Tensor(rng.normal(size=out.shape))
    return ad.sum_(out * w)


def _unary(op, positive=False, kink=False):
    def build(rng):
        x = rng.normal(size=(3, 4))
        if positive:
            x = np.abs(x) + 0.5
        if kink:
            x = nudge_from_kinks(x, 1e-6)
        a = leaf(x)
        return (lambda: _weighted(op(a), np.random.default_rng(1))), [a]

    return build


def _binary(op, positive_b=False):
    def build(rng):
        a = leaf(rng.normal(size=(3, 4)))
        b_data = rng.normal(size=(4,))
        b = leaf(np.abs(b_data) + 0.5 if positive_b else b_data)
        return (lambda: _weighted(op(a, b), np.random.default_rng(1))), [a, b]

    return build


def _case_matmul(rng):
    a, b = leaf(rng.normal(size=(2, 3, 4))), leaf(rng.normal(size=(4, 5)))
    return (lambda: _weighted(ad.matmul(a, b), np.random.default_rng(1))), [a, b]


def _case_linear(rng):
    x, w, b = leaf(rng.normal(size=(2, 3, 4))), leaf(rng.normal(size=(4, 5))), leaf(rng.normal(size=5))
    return (lambda: _weighted(ad.linear(x, w, b), np.random.default_rng(1))), [x, w, b]


def _case_conv(stride):
    def build(rng):
        x, w, b = leaf(rng.normal(size=(2, 2, 6, 5))), leaf(rng.normal(size=(3, 2, 3, 3))), leaf(rng.normal(size=3))
        return (lambda: _weighted(ad.conv2d(x, w, b, padding=1, stride=stride), np.random.default_rng(1))), [x, w, b]

    return build


def _case_bn(mode):
    def build(rng):
        x = leaf(rng.normal(size=(3, 2, 4, 3)))
        g, b = leaf(rng.uniform(0.5, 1.5, 2)), leaf(rng.normal(size=2))
        rs = ad.RunningStats(2, np.float64)
        rs.mean, rs.var = rng.normal(size=2), rng.uniform(0.5, 2, 2)
        return (lambda: _weighted(ad.batch_norm(x, g, b, rs, mode=mode, update_running=False),
                                  np.random.default_rng(1))), [x, g, b]

    return build


def _case_avg_pool(rng):
    x = leaf(rng.normal(size=(2, 2, 4, 6)))
    return (lambda: _weighted(ad.avg_pool2d(x, (1, 2)), np.random.default_rng(1))), [x]


def _case_adaptive(rng):
    x = leaf(rng.normal(size=(2, 11, 3)))
    return (lambda: _weighted(ad.adaptive_avg_time(x, 4, axis=1), np.random.default_rng(1))), [x]


def _case_dropout(rng):
    x = leaf(rng.normal(size=(4, 5)))
    return (lambda: _weighted(ad.dropout(x, 0.4, np.random.default_rng(3), True), np.random.default_rng(1))), [x]


def _gru_params(rng, D, H):
    s = 1 / np.sqrt(H)
    return [leaf(rng.uniform(-s, s, shape)) for shape in ((D, 3 * H), (H, 3 * H), (3 * H,), (3 * H,))]


def _case_gru(reverse):
    def build(rng):
        x = leaf(rng.normal(size=(2, 5, 3)))
        p = _gru_params(rng, 3, 4)
        return (lambda: _weighted(ad.gru(x, *p, reverse=reverse), np.random.default_rng(1))), [x, *p]

    return build


def _case_bigru(rng):
    x = leaf(rng.normal(size=(2, 4, 3)))
    fwd, bwd = _gru_params(rng, 3, 2), _gru_params(rng, 3, 2)
    return (lambda: _weighted(ad.bidirectional_gru(x, fwd, bwd), np.random.default_rng(1))), [x, *fwd, *bwd]


def _case_getitem(rng):
    x = leaf(rng.normal(size=(5, 3)))
    idx = np.array([0, 2, 2, 4])
    return (lambda: _weighted(ad.getitem(x, idx), np.random.default_rng(1))), [x]


def _case_concat(rng):
    a, b = leaf(rng.normal(size=(2, 3))), leaf(rng.normal(size=(2, 2)))
    return (lambda: _weighted(ad.concat([a, b], axis=1), np.random.default_rng(1))), [a, b]


def _model_blocks():
    from .models import clip_pooling, context_gating, embedding_distillation_transform, se_block, tfw_se_block

    def se(fn):
        def build(rng):
            x = leaf(rng.normal(size=(2, 4, 3, 4)))
            p = [leaf(rng.normal(size=(4, 2))), leaf(rng.normal(size=2)),
                 leaf(rng.normal(size=(2, 4))), leaf(rng.normal(size=4))]
            return (lambda: _weighted(fn(x, *p), np.random.default_rng(1))), [x, *p]

        return build

    def gating(rng):
        x, w, b = leaf(rng.normal(size=(2, 3, 4))), leaf(rng.normal(size=(4, 4))), leaf(rng.normal(size=4))
        return (lambda: _weighted(context_gating(x, w, b), np.random.default_rng(1))), [x, w, b]

    def pooling(rng):
        p, z = leaf(rng.uniform(size=(2, 5, 3))), leaf(rng.normal(size=(2, 5, 3)))
        return (lambda: _weighted(clip_pooling(p, z), np.random.default_rng(1))), [p, z]

    def eefd(rng):
        h = leaf(rng.normal(size=(2, 3, 4, 1)))
        wt, bt = leaf(rng.normal(size=(3, 5))), leaf(rng.normal(size=5))
        wm, bm = leaf(rng.normal(size=(8, 3))), leaf(rng.normal(size=3))

        def f():
            merged, transformed = embedding_distillation_transform(h, wt, bt, wm, bm)
            return _weighted(merged, np.random.default_rng(1)) + _weighted(transformed, np.random.default_rng(2))

        return f, [h, wt, bt, wm, bm]

    return {
        "se_block": se(se_block),
        "tfw_se_block": se(tfw_se_block),
        "context_gating": gating,
        "clip_pooling": pooling,
        "eefd_transform": eefd,
    }


def _loss_cases():
    from .distill import classification_loss, consistency_loss, eefd_loss, takd_loss
    from .models import ModelOutput
    from .synth import Batch

    def outputs(rng):
        return ModelOutput(leaf(rng.uniform(0.05, 0.95, (3, 4, 2))), leaf(rng.uniform(0.05, 0.95, (3, 2))))

    def cls(rng):
        o = outputs(rng)
        fy = (rng.uniform(size=(3, 4, 2)) > 0.5).astype(float)
        b = Batch([0, 1, 2], np.zeros((3, 1, 4, 1)), fy, fy.max(axis=1), np.array([1.0, 0, 0]),
                  np.array([0, 1.0, 0]), np.array([0, 0, 1.0]))
        return (lambda: classification_loss(o, b)), [o.frame_probs, o.clip_probs]

    def pair(fn):
        def build(rng):
            a, b = outputs(rng), outputs(rng)
            return (lambda: fn(a, b)), [a.frame_probs, a.clip_probs]

        return build

    def eefd(rng):
        x, e = leaf(rng.normal(size=(2, 7, 3))), leaf(rng.normal(size=(2, 3, 3)), requires_grad=False)
        return (lambda: eefd_loss(x, e)), [x]

    return {
        "classification_loss": cls,
        "consistency_loss": pair(consistency_loss),
        "takd_loss": pair(takd_loss),
        "eefd_loss": eefd,
    }


OP_CASES = {
    "add": _binary(ad.add),
    "sub": _binary(ad.sub),
    "mul": _binary(ad.mul),
    "div": _binary(ad.div, positive_b=True),
    "neg": _unary(ad.neg),
    "power": _unary(lambda a: ad.power(a, 3.0)),
    "sigmoid": _unary(ad.sigmoid),
    "tanh": _unary(ad.tanh),
    "relu": _unary(ad.relu, kink=True),
    "leaky_relu": _unary(lambda a: ad.leaky_relu(a, 0.1), kink=True),
    "exp": _unary(ad.exp),
    "log": _unary(ad.log, positive=True),
    "sum": _unary(lambda a: ad.sum_(a, axis=1, keepdims=True)),
    "mean": _unary(lambda a: ad.mean(a, axis=0)),
    "softmax": _unary(lambda a: ad.softmax(a, axis=-1)),
    "reshape": _unary(lambda a: ad.reshape(a, (4, 3))),
    "transpose": _unary(lambda a: ad.transpose(a, (1, 0))),
    "flip": _unary(lambda a: ad.flip(a, 1)),
    "getitem": _case_getitem,
    "concat": _case_concat,
    "matmul": _case_matmul,
    "linear": _case_linear,
    "conv2d": _case_conv(1),
    "conv2d_stride2": _case_conv(2),
    "batch_norm_train": _case_bn("train"),
    "batch_norm_eval": _case_bn("eval"),
    "avg_pool2d": _case_avg_pool,
    "adaptive_avg_time": _case_adaptive,
    "dropout": _case_dropout,
    "gru": _case_gru(False),
    "gru_reverse": _case_gru(True),
    "bidirectional_gru": _case_bigru,
}


def _clip_case(rng):
    # keep values away from the clamp bounds
    x = rng.uniform(-1, 1, (3, 4))
    x[np.abs(x + 0.5) < 0.05] += 0.1
    x[np.abs(x - 0.7) < 0.05] += 0.1
    a = leaf(x)
    return (lambda: _weighted(ad.clip(a, -0.5, 0.7), np.random.default_rng(1))), [a]


OP_CASES["clip"] = _clip_case


def model_case(rng):
    from .models import SECRNN, se_crnn_tiny

    cfg = se_crnn_tiny(conv_channels=(2,) * 7, n_mels=8, n_classes=3, dropout=0.0, embedding_dim=4,
                       eefd_enabled=True)
    m = SECRNN(cfg, seed=5, dtype=np.float64)
    x = leaf(rng.normal(size=(2, 1, 5, 8)), requires_grad=False)
    fy = (rng.uniform(size=(2, 5, 3)) > 0.5).astype(float)
    cy = fy.max(axis=1)
    emb = rng.normal(size=(2, 2, 4))

    def f():
        from .distill import eefd_loss

        out = m.forward(x, "train", update_stats=False)

        def bce(p, y):
            p = ad.clip(p, 1e-7, 1 - 1e-7)
            return -ad.mean(y * ad.log(p) + (1.0 - y) * ad.log(1.0 - p))

        return bce(out.frame_probs, ad.Tensor(fy)) + bce(out.clip_probs, ad.Tensor(cy)) + eefd_loss(
            out.transformed_feats, emb)

    return f, list(m.params.values())


def all_cases():
    cases = dict(OP_CASES)
    cases.update(_model_blocks())
    cases.update(_loss_cases())
    return cases


def run_suite(include_model=True, seed=0, log=None):
    """Run every case; returns ``[(name, max_rel_error, limit, seconds), ...]``."""
    rows = []
    for name, build in all_cases().items():
        t0 = time.perf_counter()
        f, inputs = build(np.random.default_rng(seed))
        err = finite_diff_gradcheck(f, inputs)
        rows.append((name, err, OP_LIMIT, time.perf_counter() - t0))
        if log:
            log(rows[-1])
    if include_model:
        t0 = time.perf_counter()
        f, inputs = model_case(np.random.default_rng(seed))
        err = finite_diff_gradcheck(f, inputs)
        rows.append(("se_crnn_tiny_full", err, MODEL_LIMIT, time.perf_counter() - t0))
        if log:
            log(rows[-1])
    return rows


def format_table(rows) -> str:
    lines = [f"{'op':<22} {'max_rel_err':>12} {'limit':>8} {'ok':>3}"]
    for name, err, limit, _ in rows:
        lines.append(f"{name:<22} {err:12.3e} {limit:8.0e} {'yes' if err < limit else 'NO':>3}")
    return "\n".join(lines)
