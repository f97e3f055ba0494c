import math

import numpy as np
import pytest

from cagan.core import Rng, Tensor, no_grad
from cagan.core import ops as T
from cagan.gan import (
    DEFAULT_LOCAL_PLACEMENT,
    CondAugment,
    Discriminator,
    Generator,
    ModelVariant,
    SNLinear,
    SpectralNormState,
    discriminator_loss,
    discriminator_loss_terms,
    generator_loss,
    generator_stage_loss,
    kl_divergence,
    spectral_normalize,
)

from conftest import gradcheck


def logit(p):
    return math.log(p / (1 - p))


# -- conditioning augmentation -------------------------------------------------------------


def test_kl_of_standard_normal_is_exactly_zero():
    assert float(kl_divergence(Tensor(np.zeros((3, 4))), Tensor(np.zeros((3, 4)))).data) == 0.0


def test_kl_hand_value():
    kl = kl_divergence(Tensor(np.array([[1.0, 0.0]])), Tensor(np.zeros((1, 2))))
    assert abs(float(kl.data) - 0.5) < 1e-15


def test_kl_general_formula(rng):
    mu, lv = rng.normal(size=(1, 5)), rng.normal(size=(1, 5))
    ref = 0.5 * np.sum(mu ** 2 + np.exp(lv) - lv - 1)
    assert abs(float(kl_divergence(Tensor(mu), Tensor(lv)).data) - ref) < 1e-12


def test_ca_zero_eps_gives_mean(rng):
    ca = CondAugment(6, 3, Rng(0))
    s = rng.normal(size=(2, 6))
    c, _ = ca(Tensor(s), eps=np.zeros((2, 3)))
    assert np.array_equal(c.data, s @ ca.w_mu.data.T)


def test_ca_sampling_is_reparameterised(rng):
    ca = CondAugment(4, 2, Rng(0))
    s = rng.normal(size=(1, 4))
    eps = np.array([[0.3, -1.0]])
    c, _ = ca(Tensor(s), eps=eps)
    mu, lv = s @ ca.w_mu.data.T, s @ ca.w_logvar.data.T
    assert np.allclose(c.data, mu + np.exp(0.5 * lv) * eps, atol=1e-14)


def test_ca_gradcheck(rng):
    ca = CondAugment(4, 2, Rng(1))
    eps = rng.normal(size=(2, 2))

    def f(s, wm, wl):
        ca.w_mu, ca.w_logvar = wm, wl
        c, kl = ca(s, eps=eps)
        return T.tsum(c) + kl

    assert gradcheck(f, rng.normal(size=(2, 4)), ca.w_mu.data, ca.w_logvar.data) < 1e-4


# -- spectral normalisation ----------------------------------------------------------------


def _sn(w, iters, seed=0):
    state = SpectralNormState(Rng(seed).normal(w.shape[0]), iters)
    state.u /= np.linalg.norm(state.u)
    return spectral_normalize(Tensor(w), state), state


def test_sn_identity_is_fixed_point():
    out, state = _sn(np.eye(4), 1)
    assert abs(state.sigma - 1.0) < 1e-12 and np.allclose(out.data, np.eye(4), atol=1e-12)


def test_sn_diagonal_converges():
    out, state = _sn(np.diag([3.0, 1.0]), 30)
    assert abs(state.sigma - 3.0) < 1e-9
    assert np.allclose(out.data, np.diag([1.0, 1.0 / 3.0]), atol=1e-9)
    assert abs(np.linalg.norm(state.u) - 1.0) < 1e-12


def test_sn_random_8x8_matches_svd(rng):
    w = rng.normal(size=(8, 8))
    out, state = _sn(w, 30)
    sigma = np.linalg.svd(w, compute_uv=False)[0]
    assert abs(state.sigma - sigma) / sigma < 1e-3
    assert abs(np.linalg.svd(out.data, compute_uv=False)[0] - 1.0) < 1e-3


def test_sn_zero_matrix_is_unchanged():
    out, state = _sn(np.zeros((3, 3)), 2)
    assert np.array_equal(out.data, np.zeros((3, 3))) and state.sigma == 1e-12


def test_sn_conv_kernel_is_flattened(rng):
    w = rng.normal(size=(4, 2, 3, 3))
    out, state = _sn(w, 200)
    assert out.shape == w.shape
    assert abs(np.linalg.svd(out.data.reshape(4, -1), compute_uv=False)[0] - 1.0) < 1e-6


def test_sn_u_persists_across_calls():
    lin = SNLinear(5, 3, Rng(0))
    x = Tensor(np.ones((1, 5)))
    u0 = lin.u.copy()
    lin(x)
    u1 = lin.u.copy()
    lin(x)
    assert not np.allclose(u0, u1) and not np.array_equal(u1, lin.u)
    assert abs(np.linalg.norm(lin.u) - 1.0) < 1e-12


def test_sn_gradcheck(rng):
    # u and v are held constant in backward; that is exact once they have converged
    u = rng.normal(size=3)
    u /= np.linalg.norm(u)

    def f(w):
        return spectral_normalize(w, SpectralNormState(u.copy(), 200))

    assert gradcheck(f, rng.normal(size=(3, 4))) < 1e-4


# -- objectives -------------------------------------------------------------------------------


def test_stage_loss_at_half_is_log2():
    zeros = Tensor(np.zeros(5))
    assert abs(float(generator_stage_loss(zeros, zeros).data) - math.log(2)) < 1e-12


def test_stage_loss_hand_value():
    u, c = Tensor(np.array([logit(0.9)])), Tensor(np.array([logit(0.8)]))
    ref = -0.5 * math.log(0.9) - 0.5 * math.log(0.8)
    assert abs(float(generator_stage_loss(u, c).data) - ref) < 1e-12
    assert abs(ref - 0.164252) < 1e-6


def test_generator_loss_sums_stages_and_weights():
    zeros = Tensor(np.zeros(2))
    total = generator_loss([(zeros, zeros)] * 3, 2.0, 0.5, lam=5.0, kl_weight=1.0)
    assert abs(float(total.data) - (3 * math.log(2) + 10.0 + 0.5)) < 1e-12


def test_generator_loss_errors():
    zeros = Tensor(np.zeros(2))
    with pytest.raises(ValueError):
        generator_loss([(zeros, zeros)] * 3, 1.0, 0.0, lam=-1.0)
    with pytest.raises(ValueError):
        generator_loss([(zeros, zeros)] * 2, 1.0, 0.0, lam=1.0)


def test_discriminator_loss_at_half():
    z = Tensor(np.zeros(4))
    uncond, cond = discriminator_loss_terms(z, z, z, z, z)
    assert abs(float(uncond.data) - math.log(2)) < 1e-12
    assert abs(float(cond.data) - math.log(2)) < 1e-12


def test_perfect_discriminator_has_near_zero_loss():
    hi, lo = Tensor(np.full(3, 40.0)), Tensor(np.full(3, -40.0))
    assert float(discriminator_loss(hi, lo, hi, lo, lo).data) < 1e-15


def test_discriminator_loss_hand_values(rng):
    logits = [rng.normal(size=3) * 0.5 for _ in range(5)]
    ru, fu, rc, fc, wc = logits
    sig = lambda x: 1 / (1 + np.exp(-x))  # noqa: E731
    ref = (-np.mean(np.log(sig(ru))) - np.mean(np.log(1 - sig(fu)))) / 2
    ref += (-np.mean(np.log(sig(rc))) - np.mean(np.log(1 - sig(fc))) - np.mean(np.log(1 - sig(wc)))) / 3
    got = float(discriminator_loss(*[Tensor(x) for x in logits]).data)
    assert abs(got - ref) < 1e-12


# -- generator / discriminator structure --------------------------------------------------


def tiny_generator(kind="se", **kw):
    if kind == "se":
        variant = ModelVariant("se", r=1, lam=0.1, stage_h0=8)
    else:
        variant = ModelVariant("l+se", r=2, lam=5.0, stage_h0=8, placement=DEFAULT_LOCAL_PLACEMENT)
    return Generator(variant, text_dim=6, rng=Rng(0), nz=5, base=4, n_res=1, **kw)


def tiny_text(rng, n=2, L=3):
    words = Tensor(rng.normal(size=(n, 6, L)))
    return words, Tensor(rng.normal(size=(n, 6))), np.ones((n, L), bool)


def test_stages_double_and_images_in_range(rng):
    G = tiny_generator()
    words, sent, mask = tiny_text(rng)
    stages, kl = G(words, sent, mask, rng.normal(size=(2, 5)), rng=Rng(1))
    assert [s.image.shape for s in stages] == [(2, 3, 8, 8), (2, 3, 16, 16), (2, 3, 32, 32)]
    assert [s.h.shape[1] for s in stages] == list(G.channels)
    for s in stages:
        assert np.all(np.abs(s.image.data) <= 1.0)
    assert np.isfinite(float(kl.data))


def test_se_variant_has_no_local_attention():
    names = list(tiny_generator("se").state_dict())
    assert not any(n.startswith("lattn.") for n in names)
    assert any(n.startswith("se.") for n in names)
    lse = list(tiny_generator("l+se").state_dict())
    assert {n.split(".")[1] for n in lse if n.startswith("lattn.")} == set(DEFAULT_LOCAL_PLACEMENT)


def test_variant_validation():
    with pytest.raises(ValueError):
        ModelVariant("se", placement=("f1_attn",))
    with pytest.raises(ValueError):
        ModelVariant("bogus")
    with pytest.raises(ValueError):
        ModelVariant("se", lam=-0.1)
    with pytest.raises(ValueError):
        Generator(ModelVariant("l+se", stage_h0=8, placement=("f0_up3",)), 6, Rng(0), base=4)


def test_generation_is_deterministic(rng):
    words, sent, mask = tiny_text(rng)
    noise = rng.normal(size=(2, 5))
    a = tiny_generator("l+se")(words, sent, mask, noise, rng=Rng(3))[0]
    b = tiny_generator("l+se")(words, sent, mask, noise, rng=Rng(3))[0]
    for x, y in zip(a, b):
        assert np.array_equal(x.image.data, y.image.data)


def test_generator_rejects_bad_inputs(rng):
    G = tiny_generator()
    words, sent, mask = tiny_text(rng)
    with pytest.raises(ValueError):
        G(words, sent, mask, rng.normal(size=(2, 4)), rng=Rng(0))
    with pytest.raises(ValueError):
        G(Tensor(np.zeros((2, 5, 3))), Tensor(np.zeros((2, 5))), mask, rng.normal(size=(2, 5)), rng=Rng(0))


def test_caption_changes_output(rng):
    G = tiny_generator().eval()
    words, sent, mask = tiny_text(rng, n=1)
    noise = rng.normal(size=(1, 5))
    with no_grad():
        a = G(words, sent, mask, noise, eps=np.zeros((1, 3)))[0][2].image.data
        b = G(words, Tensor(sent.data + 1.0), mask, noise, eps=np.zeros((1, 3)))[0][2].image.data
    assert not np.allclose(a, b)


def test_discriminator_shapes(rng):
    D = Discriminator(16, 6, Rng(0), ndf=4)
    feats = D.features(Tensor(rng.normal(size=(3, 3, 16, 16))))
    assert feats.shape == (3, 8, 4, 4)
    assert D.uncond_logit(feats).shape == (3,)
    assert D.cond_logit(feats, Tensor(rng.normal(size=(3, 6)))).shape == (3,)
    with pytest.raises(ValueError):
        D.features(Tensor(np.zeros((1, 3, 8, 8))))
    with pytest.raises(ValueError):
        Discriminator(12, 6, Rng(0))
