import math

import numpy as np
import pytest
import torch

from tinytrack.distill.losses import (Discriminator, DistillGate, LossBundle, LossWeights, NumericGuardError,
                                      consistency_loss, dis_loss, gen_loss, iou_distill_loss, rdm,
                                      score_distill_loss, total_loss)

D = torch.float64


def val(t):
    return float(t.detach())


def half_discriminator(in_features=32):
    d = Discriminator(in_features).double()
    with torch.no_grad():
        d.fc3.weight.zero_()
        d.fc3.bias.zero_()
    return d


def rois(n, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(n, 2, 4, 4, generator=g, dtype=D)


def test_rdm_examples():
    assert float(rdm(0.7, 0.5)) == pytest.approx(0.2, abs=1e-15)
    assert float(rdm(0.5, 0.7)) == 0.0
    assert float(rdm(0.3, 0.3)) == 0.0
    s = torch.tensor(2.0, requires_grad=True)
    assert not rdm(s * 2, torch.tensor(1.0)).requires_grad
    with pytest.raises(FloatingPointError):
        rdm(float("nan"), 0.1)
    with pytest.raises(ValueError):
        DistillGate(rdm_iou=-0.1)


def test_gen_loss_examples():
    d = half_discriminator()
    assert val(gen_loss(d, rois(4))) == pytest.approx(4 * math.log(2), abs=1e-12)
    x = rois(3, 1)
    assert val(gen_loss(d, torch.cat([x, x]))) == pytest.approx(2 * val(gen_loss(d, x)), rel=1e-12)
    with torch.no_grad():
        d.fc3.bias.fill_(1e3)
    assert val(gen_loss(d, rois(4))) < 1e-5
    with pytest.raises(ValueError):
        gen_loss(d, rois(0))


def test_discriminator_output_strictly_inside_unit_interval():
    d = Discriminator(32).double()
    with torch.no_grad():
        d.fc3.bias.fill_(1e6)
    out = d(rois(5) * 1e3)
    assert bool(((out > 0) & (out < 1)).all())


def test_dis_loss_examples():
    d = half_discriminator()
    assert val(dis_loss(d, rois(2), rois(2, 1))) == pytest.approx(4 * math.log(2), abs=1e-12)
    with pytest.raises(ValueError):
        dis_loss(d, rois(2), rois(3))
    # a discriminator that separates by the sign of one feature
    sharp = Discriminator(32).double()
    with torch.no_grad():
        for p in sharp.parameters():
            p.zero_()
        sharp.fc1.weight[0, 0] = 1.0
        sharp.fc2.weight[0, 0] = 1.0
        sharp.fc3.weight[0, 0] = 1e4
    t = torch.zeros(3, 2, 4, 4, dtype=D)
    t[:, 0, 0, 0] = 1.0
    s = torch.zeros(3, 2, 4, 4, dtype=D)
    s[:, 0, 0, 0] = -1.0
    assert val(dis_loss(sharp, t, s)) < 1e-5


def test_l1_examples():
    t = rois(4)
    assert float(consistency_loss(t, t)) == 0.0
    assert float(consistency_loss(t + 1, t)) == pytest.approx(32, rel=1e-12)
    s = rois(4, 3)
    assert float(consistency_loss(s, t)) == float(consistency_loss(t, s))
    m = torch.rand(3, 5, 5, dtype=D)
    assert float(score_distill_loss(m, m)) == 0.0
    assert float(score_distill_loss(m + 0.5, m)) == pytest.approx(12.5, rel=1e-12)
    assert float(score_distill_loss(m, m - 0.5)) == float(score_distill_loss(m - 0.5, m))
    a, b = torch.tensor([0.9, 0.5], dtype=D), torch.tensor([0.7, 0.9], dtype=D)
    assert float(iou_distill_loss(a, a)) == 0.0
    assert float(iou_distill_loss(a, b)) == pytest.approx(0.3, abs=1e-15)
    assert float(iou_distill_loss(b, a)) == float(iou_distill_loss(a, b))
    with pytest.raises(ValueError):
        consistency_loss(t, t[:, :1])
    with pytest.raises(ValueError):
        score_distill_loss(m, m[:, :4])
    with pytest.raises(ValueError):
        iou_distill_loss(a, b[:1])


def test_gradients_of_all_distillation_losses():
    torch.manual_seed(0)
    d = Discriminator(32, hidden=(8, 4)).double()
    s = rois(3, 5).requires_grad_(True)
    t = rois(3, 6)
    kw = dict(eps=1e-6, atol=1e-8, rtol=1e-4)
    torch.autograd.gradcheck(lambda x: gen_loss(d, x), (s,), **kw)
    torch.autograd.gradcheck(lambda x: dis_loss(d, t, x), (s,), **kw)
    torch.autograd.gradcheck(lambda x: consistency_loss(x, t), (s,), **kw)
    torch.autograd.gradcheck(lambda x: score_distill_loss(x, t), (s,), **kw)
    torch.autograd.gradcheck(lambda x: iou_distill_loss(x.flatten(), t.flatten()), (s,), **kw)


def unit_bundle(**over):
    one = torch.tensor(1.0, dtype=D)
    parts = {k: one for k in ("l_cls", "l_iou", "l_gen", "l_dis", "l_cons", "l_score_d", "l_iou_d")}
    parts.update(over)
    return LossBundle(**parts)


def test_total_loss_examples():
    assert float(total_loss(unit_bundle(), DistillGate(1.0, 1.0))) == pytest.approx(108.11, abs=1e-9)
    assert float(total_loss(unit_bundle(), DistillGate(0.0, 0.0))) == pytest.approx(100.01, abs=1e-12)
    base = float(total_loss(unit_bundle(), DistillGate(1.0, 1.0)))
    doubled = float(total_loss(unit_bundle(), DistillGate(1.0, 2.0)))
    assert doubled - base == pytest.approx(2.0, abs=1e-12)
    w = LossWeights(1, 1, 1, 1, 1)
    assert float(total_loss(unit_bundle(), DistillGate(1.0, 1.0), w, terms=("score",))) == pytest.approx(3.0)
    with pytest.raises(FloatingPointError):
        total_loss(unit_bundle(l_cons=torch.tensor(float("inf"))), DistillGate(1.0, 1.0))
    with pytest.raises(ValueError):
        total_loss(unit_bundle(), terms=("pixel",))
    with pytest.raises(ValueError):
        LossWeights(alpha=0)


def test_closed_gates_give_exact_zero_gradients():
    torch.manual_seed(0)
    p = torch.randn(6, dtype=D, requires_grad=True)
    d = Discriminator(32, hidden=(8, 4)).double()
    t = rois(2, 1)

    def bundle():
        s = p.sum() * rois(2)
        return LossBundle(l_cls=(p ** 2).sum(), l_iou=p.sin().sum(), l_gen=gen_loss(d, s),
                          l_dis=dis_loss(d, t, s), l_cons=consistency_loss(s, t),
                          l_score_d=score_distill_loss(p[None] * 3, p[None].detach()),
                          l_iou_d=iou_distill_loss(p * 2, p.detach()))

    gate = DistillGate.from_losses(student_cls=0.4, teacher_cls=0.9, student_iou=-1.0, teacher_iou=-0.5)
    assert float(gate.rdm_cls) == 0.0 and float(gate.rdm_iou) == 0.0
    (g_tot,) = torch.autograd.grad(total_loss(bundle(), gate), p)
    b = bundle()
    (g_base,) = torch.autograd.grad(100 * b.l_cls + 0.01 * b.l_iou, p)
    assert torch.equal(g_tot, g_base)
    b = bundle()
    for name in ("l_gen", "l_cons", "l_score_d", "l_iou_d"):
        term = getattr(b, name) * (gate.rdm_cls if name == "l_score_d" else gate.rdm_iou)
        (g,) = torch.autograd.grad(term, p, retain_graph=True)
        assert torch.count_nonzero(g) == 0


def test_discriminator_loss_drops_on_frozen_batch():
    torch.manual_seed(0)
    d = Discriminator(32).double()
    t, s = rois(8, 1) + 0.5, rois(8, 2) - 0.5
    opt = torch.optim.SGD(d.parameters(), lr=1e-3)
    losses = []
    for _ in range(11):
        opt.zero_grad()
        loss = dis_loss(d, t, s)
        losses.append(float(loss.detach()))
        loss.backward()
        opt.step()
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_optimal_discriminator_on_identical_distributions_is_half():
    torch.manual_seed(1)
    d = Discriminator(32, hidden=(16, 8)).double()
    x = rois(16, 4)
    opt = torch.optim.Adam(d.parameters(), lr=1e-2)
    for _ in range(300):
        opt.zero_grad()
        dis_loss(d, x, x).backward()
        opt.step()
    np.testing.assert_allclose(d(x).detach().numpy(), 0.5, atol=1e-3)
    assert val(dis_loss(d, x, x)) == pytest.approx(32 * math.log(2), rel=1e-5)


def test_bundle_helpers():
    b = unit_bundle()
    b.check()
    f = b.as_floats()
    assert f["l_cls"] == 1.0 and f["rdm_iou"] == 0.0
    with pytest.raises(NumericGuardError):
        unit_bundle(l_dis=torch.tensor(float("nan"))).check()
