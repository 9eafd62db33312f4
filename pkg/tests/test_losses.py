import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

import oracles
from svsgan import losses as L
from svsgan.errors import DimensionError, ValidationError

D = torch.float64


def rand_case(seed, n=3, b=2, h=3, w=4):
    g = torch.Generator().manual_seed(seed)
    labels = torch.randint(0, n, (b, h, w), generator=g)
    real = torch.randn(b, n + 1, h, w, generator=g, dtype=D) * 2
    fake = torch.randn(b, n + 1, h, w, generator=g, dtype=D) * 2
    return labels, real, fake


def test_class_weights_examples():
    assert L.class_weights(torch.zeros(2, 3, dtype=torch.long), 1).tolist() == [1.0]
    alpha = L.class_weights(torch.tensor([0, 0, 0, 1]), 2)
    assert torch.allclose(alpha, torch.tensor([2 / 3, 2.0], dtype=D))
    assert L.class_weights(torch.tensor([0, 1, 1]), 3)[2] == 0
    with pytest.raises(ValidationError):
        L.class_weights(torch.zeros(0, dtype=torch.long), 2)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=1, max_size=16))
def test_class_weights_oracle_and_normalisation(values):
    labels = torch.tensor(values)
    alpha = L.class_weights(labels, 5)
    assert alpha.tolist() == pytest.approx(oracles.class_weights(values, 5), abs=1e-12)
    freq = torch.bincount(labels, minlength=5).double() / len(values)
    assert float((alpha * freq).sum()) == pytest.approx(1.0, abs=1e-12)


def test_oasis_uniform_logits():
    labels = torch.zeros(1, 1, 1, dtype=torch.long)
    z = torch.zeros(1, 3, 1, 1, dtype=D)
    alpha = torch.ones(2, dtype=D)
    assert L.oasis_d_loss(z, z, labels, alpha).item() == pytest.approx(2 * math.log(3), abs=1e-12)
    assert L.oasis_g_loss(z, labels, alpha).item() == pytest.approx(math.log(3), abs=1e-12)


def test_oasis_saturated_limit():
    labels = torch.tensor([[[0, 1]]])
    real = torch.zeros(1, 3, 1, 2, dtype=D)
    real[0, 0, 0, 0] = real[0, 1, 0, 1] = 20
    fake = torch.zeros(1, 3, 1, 2, dtype=D)
    fake[0, 2] = 20
    alpha = L.class_weights(labels, 2)
    assert L.oasis_d_loss(real, fake, labels, alpha) < 1e-3
    assert L.oasis_g_loss(real, labels, alpha) < 1e-3


def test_doubling_alpha_doubles_real_term_only():
    labels, real, fake = rand_case(3)
    alpha = L.class_weights(labels, 3)
    fake_term = L.oasis_d_loss(real, fake, labels, torch.zeros(3, dtype=D))
    real_term = L.oasis_d_loss(real, fake, labels, alpha) - fake_term
    doubled = L.oasis_d_loss(real, fake, labels, 2 * alpha)
    assert doubled.item() == pytest.approx((2 * real_term + fake_term).item(), abs=1e-12)


def test_g_loss_equals_d_real_term_at_fake_logits():
    labels, _, fake = rand_case(4)
    alpha = L.class_weights(labels, 3)
    zero_fake = torch.full_like(fake, 0.0)
    zero_fake[:, -1] = 1e4  # fake term -> 0
    d_real_part = L.oasis_d_loss(fake, zero_fake, labels, alpha)
    assert L.oasis_g_loss(fake, labels, alpha).item() == pytest.approx(d_real_part.item(), abs=1e-9)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 4), st.integers(1, 4), st.integers(1, 4))
def test_oasis_losses_match_loop_oracle(seed, n, h, w):
    labels, real, fake = rand_case(seed, n=n, h=h, w=w)
    alpha = L.class_weights(labels, n)
    a = alpha.tolist()
    assert L.oasis_d_loss(real, fake, labels, alpha).item() == pytest.approx(
        oracles.oasis_d(real.numpy(), fake.numpy(), labels.numpy(), a), abs=1e-6)
    assert L.oasis_g_loss(fake, labels, alpha).item() == pytest.approx(
        oracles.oasis_g(fake.numpy(), labels.numpy(), a), abs=1e-6)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(-50, 50))
def test_oasis_shift_invariance(seed, c):
    labels, real, fake = rand_case(seed)
    alpha = L.class_weights(labels, 3)
    base = L.oasis_d_loss(real, fake, labels, alpha)
    assert abs(L.oasis_d_loss(real + c, fake + c, labels, alpha) - base) < 1e-5
    assert abs(L.oasis_g_loss(fake + c, labels, alpha) - L.oasis_g_loss(fake, labels, alpha)) < 1e-5


def test_oasis_channel_check():
    labels = torch.zeros(1, 2, 2, dtype=torch.long)
    with pytest.raises(DimensionError):
        L.oasis_d_loss(torch.zeros(1, 3, 2, 2), torch.zeros(1, 4, 2, 2), labels, torch.ones(3))
    with pytest.raises(DimensionError):
        L.oasis_g_loss(torch.zeros(1, 3, 2, 2), labels, torch.ones(3))


def test_hinge_examples():
    ones = [torch.ones(2, 1, 2, 2)]
    d, _ = L.video_adv_losses(ones, [-o for o in ones])
    assert d.item() == 0
    d, g = L.video_adv_losses([torch.zeros(1, 1, 4, 4)], [torch.zeros(1, 1, 4, 4)])
    assert (d.item(), g.item()) == (2.0, 0.0)
    levels = [[torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 2, 2)]]
    d2, _ = L.video_adv_losses(levels, levels)
    assert d2.item() == 4.0  # summed over patch levels
    with pytest.raises(ValidationError):
        L.video_adv_losses(levels, levels, mode="wgan")


@settings(max_examples=20, deadline=None)
@given(st.floats(-5, 5), st.floats(0.01, 3))
def test_generator_hinge_strictly_decreasing(v, dv):
    g1 = L.video_adv_losses([torch.zeros(3)], [torch.full((3,), v)])[1]
    g2 = L.video_adv_losses([torch.zeros(3)], [torch.full((3,), v + dv)])[1]
    assert g2 < g1


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_hinge_matches_oracle(seed):
    g = torch.Generator().manual_seed(seed)
    real = [torch.randn(2, 1, 4, 4, generator=g, dtype=D), torch.randn(2, 1, 2, 2, generator=g, dtype=D)]
    fake = [torch.randn(2, 1, 4, 4, generator=g, dtype=D), torch.randn(2, 1, 2, 2, generator=g, dtype=D)]
    d, gl = L.video_adv_losses(real, fake)
    od, og = oracles.hinge([r.numpy() for r in real], [f.numpy() for f in fake])
    assert d.item() == pytest.approx(od, abs=1e-9) and gl.item() == pytest.approx(og, abs=1e-9)
    assert L.generator_adv_loss(fake).item() == pytest.approx(og, abs=1e-9)


def test_bce_form_is_saturating_cross_entropy():
    r, f = torch.tensor([0.3, -1.2], dtype=D), torch.tensor([0.5], dtype=D)
    d, g = L.video_adv_losses([r], [f], mode="bce")
    expected_d = -torch.log(torch.sigmoid(r)).mean() - torch.log(1 - torch.sigmoid(f)).mean()
    assert d.item() == pytest.approx(expected_d.item(), abs=1e-12)
    assert g.item() == pytest.approx(-torch.log(torch.sigmoid(f)).mean().item(), abs=1e-12)


def test_perceptual_examples():
    identity = lambda x: [x]  # noqa: E731
    x = torch.randn(1, 3, 4, 4, dtype=D)
    assert L.perceptual_loss(x, x, identity, [1.0]).item() == 0
    assert L.perceptual_loss(x + 0.5, x, identity, [1.0]).item() == pytest.approx(0.5, abs=1e-12)
    assert L.perceptual_loss(x + 0.5, x, identity, [3.0]).item() == pytest.approx(1.5, abs=1e-12)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_perceptual_and_fm_match_oracle(seed):
    g = torch.Generator().manual_seed(seed)
    a = [torch.randn(1, 2, 4, 4, generator=g, dtype=D), torch.randn(1, 3, 2, 2, generator=g, dtype=D)]
    b = [torch.randn(1, 2, 4, 4, generator=g, dtype=D), torch.randn(1, 3, 2, 2, generator=g, dtype=D)]
    weights = [0.3, 1.7]
    expected = oracles.layer_l1([t.numpy() for t in a], [t.numpy() for t in b], weights)
    assert L.feature_matching_loss(a, b, weights).item() == pytest.approx(expected, abs=1e-9)
    assert L.perceptual_loss(a, b, lambda feats: feats, weights).item() == pytest.approx(expected, abs=1e-9)
    uniform = oracles.layer_l1([t.numpy() for t in a], [t.numpy() for t in b], [0.5, 0.5])
    assert L.feature_matching_loss(a, b).item() == pytest.approx(uniform, abs=1e-9)


def test_fm_detaches_real_branch():
    fake = torch.randn(1, 2, 2, 2, requires_grad=True)
    real = torch.randn(1, 2, 2, 2, requires_grad=True)
    L.feature_matching_loss([fake], [real]).backward()
    assert fake.grad is not None and real.grad is None
    with pytest.raises(DimensionError):
        L.feature_matching_loss([fake], [real, real])


def test_flow_warp_examples():
    z = torch.zeros(1, 2, 1, 1, dtype=D)
    img = torch.zeros(1, 3, 1, 1, dtype=D)
    assert L.flow_warp_loss(z, z, img, img).item() == 0
    err = torch.tensor([1.0, 0.0], dtype=D).view(1, 2, 1, 1)
    assert L.flow_warp_loss(err, z, img + 0.5, img, 1.0, 1.0).item() == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(DimensionError):
        L.flow_warp_loss(z, torch.zeros(1, 2, 2, 1), img, img)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 20), st.floats(0, 20))
def test_flow_warp_matches_oracle(seed, lf, lw):
    g = torch.Generator().manual_seed(seed)
    p, q = torch.randn(2, 2, 2, 3, 4, generator=g, dtype=D)
    a, b = torch.randn(2, 2, 3, 3, 4, generator=g, dtype=D)
    got = L.flow_warp_loss(p, q, a, b, lf, lw).item()
    assert got == pytest.approx(oracles.flow_warp(p.numpy(), q.numpy(), a.numpy(), b.numpy(), lf, lw), abs=1e-6)


def test_flow_warp_gradcheck():
    g = torch.Generator().manual_seed(2)
    p = torch.randn(1, 2, 3, 3, generator=g, dtype=D, requires_grad=True)
    gt = torch.randn(1, 2, 3, 3, generator=g, dtype=D)
    a = torch.randn(1, 3, 3, 3, generator=g, dtype=D, requires_grad=True)
    b = torch.randn(1, 3, 3, 3, generator=g, dtype=D)
    assert torch.autograd.gradcheck(lambda p_, a_: L.flow_warp_loss(p_, gt, a_, b, 10.0, 10.0), (p, a),
                                    eps=1e-6, atol=1e-8, rtol=1e-6)


def test_flow_warp_gradient_float32():
    g = torch.Generator().manual_seed(5)
    p = torch.randn(1, 2, 3, 3, generator=g, requires_grad=True)
    gt = torch.randn(1, 2, 3, 3, generator=g)
    img = torch.zeros(1, 3, 3, 3)
    L.flow_warp_loss(p, gt, img, img, 2.0, 1.0).backward()
    fd = torch.zeros_like(p)
    eps = 1e-3
    for i in range(p.numel()):
        e = torch.zeros(p.numel())
        e[i] = eps
        e = e.view_as(p)
        with torch.no_grad():
            fd.view(-1)[i] = (L.flow_warp_loss(p + e, gt, img, img, 2.0, 1.0)
                              - L.flow_warp_loss(p - e, gt, img, img, 2.0, 1.0)) / (2 * eps)
    assert ((p.grad - fd).norm() / fd.norm()) < 1e-3


def test_total_generator_loss():
    w = L.LossWeights()
    zero = {k: 0.0 for k in ("image_adv", "adv", "vgg", "fm", "flow_warp")}
    assert L.total_generator_loss(zero, w) == 0
    one = {k: 1.0 for k in zero}
    assert L.total_generator_loss(one, w) == 23


def test_default_weights_and_validation():
    w = L.LossWeights()
    assert (w.vgg, w.fm, w.flow, w.warp) == (10.0, 10.0, 10.0, 10.0)
    with pytest.raises(ValidationError):
        L.LossWeights(fm=-1).validate()
    with pytest.raises(ValidationError):
        L.LossWeights(perceptual_layers=[1, -1]).validate()


def test_perceptual_extractor_frozen_and_fixed():
    a, b = L.PerceptualExtractor(), L.PerceptualExtractor()
    assert all(not p.requires_grad for p in a.parameters())
    x = torch.randn(1, 3, 16, 16)
    fa, fb = a(x), b(x)
    assert len(fa) == 5 and all(torch.equal(p, q) for p, q in zip(fa, fb))


def test_losses_non_negative_on_random_inputs():
    labels, real, fake = rand_case(9)
    alpha = L.class_weights(labels, 3)
    assert L.oasis_d_loss(real, fake, labels, alpha) >= 0
    assert L.oasis_g_loss(fake, labels, alpha) >= 0
    d, _ = L.video_adv_losses([real], [fake])
    assert d >= 0
