import math

import numpy as np
import pytest

from dualkd.autodiff import Tensor
from dualkd.distill import (
    LossBreakdown,
    cdtd_loss,
    classification_loss,
    consistency_loss,
    eefd_loss,
    ema_update,
    mu_schedule,
    takd_loss,
    total_loss,
)
from dualkd.errors import ArchitectureError, DimensionError, InputError
from dualkd.models import SECRNN, ModelOutput, se_crnn_tiny
from dualkd.synth import Batch

from oracles import naive_eefd, naive_pair_sq


def out(frames, clips, grad=False):
    return ModelOutput(Tensor(np.asarray(frames, float), requires_grad=grad), Tensor(np.asarray(clips, float), requires_grad=grad))


# -- EMA ---------------------------------------------------------------------------

def pair(seed=0):
    cfg = se_crnn_tiny(n_mels=16, n_classes=3)
    return SECRNN(cfg, seed=seed, dtype=np.float64), SECRNN(cfg, seed=seed + 1, dtype=np.float64)


@pytest.mark.parametrize("coupling", ["coupled", "detached"])
def test_ema_boundaries(coupling):
    m, s = pair()
    before = {k: v.data.copy() for k, v in m.params.items()}
    ema_update(m, s, 1.0, coupling)
    for k, v in m.params.items():
        assert np.array_equal(v.data, before[k])
    ema_update(m, s, 0.0, coupling)
    for k, v in m.params.items():
        assert np.array_equal(v.data, s.params[k].data)


@pytest.mark.parametrize("coupling", ["coupled", "detached"])
def test_ema_linear_identity(coupling):
    m, s = pair(3)
    for alpha in (0.5, 0.9, 0.999):
        before = {k: v.data.copy() for k, v in m.params.items()}
        new = ema_update(m, s, alpha, coupling)
        for k, v in m.params.items():
            assert np.max(np.abs(v.data - alpha * before[k] - (1 - alpha) * s.params[k].data)) <= 1e-12
            assert np.array_equal(new[k].data, v.data)


def test_ema_hand_value():
    m, s = pair()
    for p in m.params.values():
        p.data[...] = 0.0
    for p in s.params.values():
        p.data[...] = 1.0
    ema_update(m, s, 0.999)
    assert np.allclose(m.params["conv0.weight"].data, 0.001, atol=1e-15)


def test_ema_coupled_graph_scaled_by_one_minus_alpha():
    m, s = pair()
    new = ema_update(m, s, 0.9, "coupled")
    (new["cg.bias"] * new["cg.bias"]).sum().backward()
    np.testing.assert_allclose(s.params["cg.bias"].grad, 2 * 0.1 * new["cg.bias"].data, rtol=1e-12)
    assert m.params["cg.bias"].grad is None


def test_ema_detached_has_no_graph():
    m, s = pair()
    new = ema_update(m, s, 0.9, "detached")
    assert all(not t.requires_grad for t in new.values())


def test_ema_mismatch():
    m, _ = pair()
    other = SECRNN(se_crnn_tiny(n_mels=16, n_classes=4), dtype=np.float64)
    with pytest.raises(ArchitectureError):
        ema_update(m, other, 0.9)


# -- mu ------------------------------------------------------------------------------

def test_mu_schedule_values():
    assert mu_schedule(0, 100) == pytest.approx(math.exp(-5), abs=1e-15)
    assert abs(mu_schedule(0, 100) - 0.006738) < 1e-6
    assert mu_schedule(100, 100) == 1.0 and mu_schedule(5000, 100) == 1.0
    vals = [mu_schedule(i, 37) for i in range(60)]
    assert all(a <= b for a, b in zip(vals, vals[1:]))


# -- classification ----------------------------------------------------------------------

def make_batch(fy, cy, strong, weak):
    B = len(strong)
    strong, weak = np.asarray(strong, float), np.asarray(weak, float)
    return Batch(list(range(B)), np.zeros((B, 1, 1, 1)), np.asarray(fy, float), np.asarray(cy, float),
                 strong, weak, 1 - strong - weak)


def test_classification_ln2():
    r = np.random.default_rng(0)
    fy = (r.uniform(size=(4, 6, 3)) > 0.5).astype(float)
    cy = (r.uniform(size=(4, 3)) > 0.5).astype(float)
    b = make_batch(fy, cy, [1, 1, 0, 0], [0, 0, 1, 0])
    loss = classification_loss(out(np.full((4, 6, 3), 0.5), np.full((4, 3), 0.5)), b)
    assert abs(loss.item() - math.log(2)) < 1e-12


def test_classification_perfect():
    r = np.random.default_rng(1)
    fy = (r.uniform(size=(3, 6, 2)) > 0.5).astype(float)
    cy = fy.max(axis=1)
    b = make_batch(fy, cy, [1, 1, 0], [0, 0, 1])
    assert classification_loss(out(fy, cy), b).item() < 1e-6


def test_classification_matches_hand_bce():
    r = np.random.default_rng(2)
    for _ in range(20):
        B, T, K = 5, 4, 3
        fp, cp = r.uniform(0.01, 0.99, (B, T, K)), r.uniform(0.01, 0.99, (B, K))
        fy = (r.uniform(size=(B, T, K)) > 0.5).astype(float)
        cy = (r.uniform(size=(B, K)) > 0.5).astype(float)
        strong, weak = np.array([1, 0, 1, 0, 0]), np.array([0, 1, 0, 0, 1])
        fy[strong == 0] = 0
        cy[(strong + weak) == 0] = 0
        bce = lambda p, y: -(y * np.log(p) + (1 - y) * np.log(1 - p))
        frame_term = np.mean([bce(fp[b], fy[b]).mean() for b in range(B) if strong[b]])
        clip_term = np.mean([bce(cp[b], cy[b]).mean() for b in range(B) if strong[b] or weak[b]])
        got = classification_loss(out(fp, cp), make_batch(fy, cy, strong, weak)).item()
        assert abs(got - (frame_term + clip_term) / 2) < 1e-10


def test_unlabeled_contributes_nothing():
    r = np.random.default_rng(3)
    fp, cp = r.uniform(0.1, 0.9, (4, 5, 2)), r.uniform(0.1, 0.9, (4, 2))
    b = make_batch(np.zeros((4, 5, 2)), np.zeros((4, 2)), [1, 0, 0, 0], [0, 1, 0, 0])
    o = out(fp, cp, grad=True)
    a = classification_loss(o, b)
    a.backward()
    assert not o.frame_probs.grad[1:].any() and not o.clip_probs.grad[2:].any()
    fp2, cp2 = fp.copy(), cp.copy()
    fp2[2:], cp2[2:] = 0.77, 0.13
    assert classification_loss(out(fp2, cp2), b).item() == a.item()
    assert classification_loss(out(fp, cp), make_batch(np.zeros((4, 5, 2)), np.zeros((4, 2)), [0] * 4, [0] * 4)).item() == 0.0


def test_classification_shape_mismatch():
    b = make_batch(np.zeros((2, 5, 2)), np.zeros((2, 2)), [1, 0], [0, 1])
    with pytest.raises(InputError):
        classification_loss(out(np.zeros((2, 4, 2)), np.zeros((2, 2))), b)


# -- consistency / takd / cdtd ----------------------------------------------------------------

def test_consistency_values_and_detach():
    assert consistency_loss(out(np.ones((1, 1, 1)), [[0.5]]), out(np.ones((1, 1, 1)), [[0.1]])).item() == pytest.approx(0.16, abs=1e-15)
    r = np.random.default_rng(0)
    f, c = r.uniform(size=(2, 3, 2)), r.uniform(size=(2, 2))
    assert consistency_loss(out(f, c), out(f, c)).item() == 0.0
    s, m = out(f, c, grad=True), out(f[::-1].copy(), c[::-1].copy(), grad=True)
    loss = consistency_loss(s, m)
    assert loss.item() == consistency_loss(m, s).item()
    loss.backward()
    assert s.frame_probs.grad is not None and m.frame_probs.grad is None and m.clip_probs.grad is None


def test_takd_hand_value():
    v = takd_loss(out([[[0.3]]], [[0.5]]), out([[[0.3]]], [[0.1]])).item()
    assert v == pytest.approx(0.16, abs=1e-15)
    assert takd_loss(out([[[0.3]]], [[0.5]]), out([[[0.3]]], [[0.5]])).item() == 0.0


def test_takd_and_cdtd_match_naive_loops():
    r = np.random.default_rng(42)
    for _ in range(100):
        B, T, K = r.integers(1, 5), r.integers(1, 9), r.integers(1, 6)
        af, bf = r.uniform(size=(B, T, K)), r.uniform(size=(B, T, K))
        ac, bc = r.uniform(size=(B, K)), r.uniform(size=(B, K))
        ref = naive_pair_sq(ac, bc, af, bf)
        assert abs(takd_loss(out(af, ac), out(bf, bc)).item() - ref) <= 1e-12
        assert cdtd_loss(out(af, ac), out(bf, bc)).item() == takd_loss(out(af, ac), out(bf, bc)).item()


def test_takd_gradient_only_into_first_argument():
    r = np.random.default_rng(0)
    m = out(r.uniform(size=(2, 3, 2)), r.uniform(size=(2, 2)), grad=True)
    t = out(r.uniform(size=(2, 3, 2)), r.uniform(size=(2, 2)), grad=True)
    cdtd_loss(m, t).backward()
    assert np.linalg.norm(m.frame_probs.grad) > 0 and t.frame_probs.grad is None


# -- eefd ------------------------------------------------------------------------------------

def test_eefd_hand_values():
    x = np.random.default_rng(0).normal(size=(2, 6, 4))
    assert eefd_loss(x, x).item() == 0.0
    assert eefd_loss(np.ones((2, 10, 768)), np.full((2, 5, 768), 3.0)).item() == 4.0


def test_eefd_matches_naive_loop():
    r = np.random.default_rng(7)
    for _ in range(100):
        B, E = r.integers(1, 3), r.integers(1, 5)
        T = r.integers(1, 12)
        Te = r.integers(1, T + 1)
        x, e = r.normal(size=(B, T, E)), r.normal(size=(B, Te, E))
        assert abs(eefd_loss(x, e).item() - naive_eefd(x, e)) <= 1e-12


def test_eefd_width_mismatch():
    with pytest.raises(DimensionError):
        eefd_loss(np.zeros((1, 4, 768)), np.zeros((1, 2, 512)))


# -- total -----------------------------------------------------------------------------------

def test_total_hand_values():
    assert total_loss(1.0, 0.2, 0.3, 0.5, 0.5) == pytest.approx(1.5, abs=1e-15)
    assert total_loss(0.7, 0.2, 0.3, 0.5, 0.0) == 0.7
    assert total_loss(0.7, 0.2, 0.0, 0.0, 0.4) == 0.7 + 0.4 * 0.2


def test_total_matches_naive_and_breakdown_identity():
    r = np.random.default_rng(9)
    for step in range(100):
        c = r.uniform(0, 3, 4)
        mu = r.uniform()
        ref = c[0]
        acc = 0.0
        for v in c[1:]:
            acc += v
        ref += mu * acc
        assert abs(total_loss(*c, mu) - ref) <= 1e-12
        t = total_loss(*(Tensor(v) for v in c), mu)
        assert abs(t.item() - ref) <= 1e-12
        b = LossBreakdown.from_parts(*c, mu, step)
        assert abs(b.l_total - b.recompute_total()) <= 1e-9
