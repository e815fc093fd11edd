"""Noise schedule laws, forward/reverse chain algebra, and the denoiser."""

import numpy as np
import pytest

from helpers import module_gradcheck
from tadiff import autodiff as ad
from tadiff import diffusion as dif
from tadiff.autodiff import Tensor
from tadiff.errors import ConfigError


def rng_for(name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(name.encode())))


# -- schedule ------------------------------------------------------------------

def test_schedule_hand_case():
    sched = dif.build_schedule(3, 0.1, 0.3)
    assert np.allclose(sched.betas, [0.1, 0.2, 0.3], atol=1e-15)
    assert np.allclose(sched.alpha_bar, [1.0, 0.9, 0.72, 0.504], atol=1e-12)


def test_schedule_monotone_on_random_configs():
    rng = rng_for("sched")
    for _ in range(100):
        steps = int(rng.integers(1, 50))
        lo = float(rng.uniform(1e-4, 0.5))
        hi = float(rng.uniform(lo, 0.999))
        sched = dif.build_schedule(steps, lo, hi)
        assert sched.alpha_bar[0] == 1.0
        assert sched.alpha_bar.shape == (steps + 1,)
        assert np.all(np.diff(sched.alpha_bar) < 0)
        assert sched.alpha_bar[-1] > 0.0


def test_schedule_zero_steps_is_identity_chain():
    sched = dif.build_schedule(0, 0.1, 0.3)
    assert sched.steps == 0
    assert np.array_equal(sched.alpha_bar, [1.0])
    f = Tensor(np.ones((4, 2)))
    out = dif.refine(f, sched, predictor=None, rng=None)
    assert out is f


@pytest.mark.parametrize("steps,lo,hi,eta", [
    (-1, 0.1, 0.3, 0.0),
    (3, 0.0, 0.3, 0.0),
    (3, 0.4, 0.3, 0.0),
    (3, 0.1, 1.0, 0.0),
    (3, 0.1, 0.3, -0.1),
    (3, 0.1, 0.3, 1.5),
])
def test_schedule_rejects_invalid_configs(steps, lo, hi, eta):
    with pytest.raises(ConfigError):
        dif.build_schedule(steps, lo, hi, eta)


def test_sigma_zero_when_deterministic_and_bounded_otherwise():
    det = dif.build_schedule(3, 0.1, 0.3, eta=0.0)
    assert all(det.sigma(s) == 0.0 for s in (1, 2, 3))
    sto = dif.build_schedule(3, 0.1, 0.3, eta=1.0)
    for s in (1, 2, 3):
        ab_prev, ab = sto.alpha_bar[s - 1], sto.alpha_bar[s]
        expect = np.sqrt((1 - ab_prev) / (1 - ab) * (1 - ab / ab_prev))
        assert np.isclose(sto.sigma(s), expect, atol=1e-15)
        assert sto.sigma(s) ** 2 <= 1 - ab_prev + 1e-12
    with pytest.raises(ConfigError):
        sto.sigma(0)
    with pytest.raises(ConfigError):
        sto.sigma(4)


# -- forward diffusion ---------------------------------------------------------

def test_forward_diffuse_matches_closed_form():
    rng = rng_for("fwd")
    sched = dif.build_schedule(3, 0.1, 0.3)
    f = rng.standard_normal((5, 4))
    eps = rng.standard_normal((5, 4))
    for s in range(4):
        out = dif.forward_diffuse(Tensor(f), s, eps, sched)
        ab = sched.alpha_bar[s]
        ref = np.sqrt(ab) * f + (np.sqrt(1 - ab) * eps if s else 0.0)
        assert np.allclose(out.data, ref, atol=1e-15)


def test_forward_diffuse_monte_carlo_moments():
    # E[x_s] = sqrt(ab) f and Var[x_s] = 1 - ab, per coordinate
    rng = rng_for("fwd-mc")
    sched = dif.build_schedule(3, 0.1, 0.3)
    f = np.full((1, 1), 2.0)
    draws = np.array([
        dif.forward_diffuse(Tensor(f), 3, rng.standard_normal((1, 1)),
                            sched).data[0, 0]
        for _ in range(20000)
    ])
    ab = sched.alpha_bar[3]
    assert abs(draws.mean() - 2.0 * np.sqrt(ab)) < 0.02
    assert abs(draws.var() - (1.0 - ab)) < 0.02


def test_forward_diffuse_validates_inputs():
    sched = dif.build_schedule(2, 0.1, 0.2)
    f = Tensor(np.ones((3, 2)))
    with pytest.raises(ConfigError):
        dif.forward_diffuse(f, 3, np.ones((3, 2)), sched)
    with pytest.raises(ad.ShapeError):
        dif.forward_diffuse(f, 1, np.ones((2, 3)), sched)


# -- reverse chain -------------------------------------------------------------

def oracle_predictor(f0: np.ndarray, sched: dif.DiffusionSchedule):
    """True-noise predictor: recovers eps exactly from x_s and the known f0."""

    def predict(x_s: Tensor, s: int):
        ab = sched.alpha_bar[s]
        eps = (x_s.data - np.sqrt(ab) * f0) / np.sqrt(1.0 - ab)
        eps_hat = Tensor(eps)
        x0_hat = dif.recover_clean(x_s, s, eps_hat, sched)
        return eps_hat, x0_hat

    return predict


@pytest.mark.parametrize("steps", [1, 3, 5])
def test_ddim_oracle_inversion(steps):
    rng = rng_for(f"oracle-{steps}")
    sched = dif.build_schedule(steps, 0.1, 0.3, eta=0.0)
    f0 = rng.standard_normal((6, 3))
    out = dif.refine(Tensor(f0), sched, oracle_predictor(f0, sched),
                     rng_for("oracle-noise"))
    assert np.max(np.abs(out.data - f0)) <= 1e-8


def test_recover_clean_inverts_forward():
    rng = rng_for("recover")
    sched = dif.build_schedule(4, 0.05, 0.2)
    f0 = rng.standard_normal((5, 2))
    eps = rng.standard_normal((5, 2))
    x3 = dif.forward_diffuse(Tensor(f0), 3, eps, sched)
    x0 = dif.recover_clean(x3, 3, Tensor(eps), sched)
    assert np.allclose(x0.data, f0, atol=1e-12)


def test_ddim_step_requires_z_only_when_stochastic():
    rng = rng_for("ddim-z")
    sched = dif.build_schedule(3, 0.1, 0.3, eta=1.0)
    x = Tensor(rng.standard_normal((4, 2)))
    eps_hat = Tensor(rng.standard_normal((4, 2)))
    x0_hat = Tensor(rng.standard_normal((4, 2)))
    with pytest.raises(ConfigError):
        dif.ddim_step(x, 2, eps_hat, x0_hat, None, sched)
    out = dif.ddim_step(x, 2, eps_hat, x0_hat,
                        rng.standard_normal((4, 2)), sched)
    assert out.shape == (4, 2)
    det = dif.build_schedule(3, 0.1, 0.3, eta=0.0)
    ref = (np.sqrt(det.alpha_bar[1]) * x0_hat.data
           + np.sqrt(1 - det.alpha_bar[1]) * eps_hat.data)
    got = dif.ddim_step(x, 2, eps_hat, x0_hat, None, det)
    assert np.allclose(got.data, ref, atol=1e-15)


def test_refine_eta_override_and_determinism():
    rng = rng_for("refine-det")
    sched = dif.build_schedule(3, 0.1, 0.3, eta=1.0)
    f0 = rng.standard_normal((5, 3))
    pred = oracle_predictor(f0, sched)

    def run(eta, seed):
        return dif.refine(Tensor(f0), sched, pred,
                          np.random.default_rng(seed), eta=eta).data

    # eta forced to 0 plus the oracle makes the chain exact
    assert np.max(np.abs(run(0.0, 1) - f0)) <= 1e-8
    # same seed -> bitwise equal; different seed -> different draw
    a, b = run(None, 7), run(None, 7)
    assert np.array_equal(a, b)
    assert not np.array_equal(run(None, 7), run(None, 8))


def test_refine_toggles():
    rng = rng_for("refine-toggles")
    sched = dif.build_schedule(3, 0.1, 0.3)
    f0 = rng.standard_normal((6, 2))
    pred = oracle_predictor(f0, sched)
    f = Tensor(f0)
    # both off: unchanged object
    assert dif.refine(f, sched, pred, None, noise=False, denoise=False) is f
    # noise only: the forward-diffused features at step S
    noisy = dif.refine(f, sched, pred, np.random.default_rng(3),
                       noise=True, denoise=False)
    eps = np.random.default_rng(3).standard_normal(f0.shape)
    ab = sched.alpha_bar[3]
    assert np.allclose(noisy.data,
                       np.sqrt(ab) * f0 + np.sqrt(1 - ab) * eps, atol=1e-15)
    # denoise only: reverse chain applied to the clean features
    den = dif.refine(f, sched, pred, None, noise=False, denoise=True)
    assert den.shape == f0.shape
    # noise=True without an rng is an error
    with pytest.raises(ConfigError):
        dif.refine(f, sched, pred, None, noise=True, denoise=True)


# -- denoiser network ----------------------------------------------------------

def test_denoiser_initial_output_is_zero():
    # zero-initialized output conv means eps_hat = 0 at start, so the
    # clean-feature estimate is a pure rescaling of x_s
    rng = rng_for("net-init")
    net = dif.DenoiserNet(dim=4, steps=3, embed_dim=5, rng=rng)
    sched = dif.build_schedule(3, 0.1, 0.3)
    x = Tensor(rng.standard_normal((6, 4)))
    eps_hat, x0_hat = dif.predict_noise(net, x, 2, sched)
    assert np.array_equal(eps_hat.data, np.zeros((6, 4)))
    assert np.allclose(x0_hat.data,
                       x.data / np.sqrt(sched.alpha_bar[2]), atol=1e-15)


def test_denoiser_step_conditioning_changes_output():
    rng = rng_for("net-step")
    net = dif.DenoiserNet(dim=4, steps=3, embed_dim=5, rng=rng)
    # give the zero-initialized layers signal so steps can differ
    for _, p in net.named_parameters():
        p.data = p.data + 0.3 * rng_for("net-fill").standard_normal(p.data.shape)
    sched = dif.build_schedule(3, 0.1, 0.3)
    x = Tensor(rng.standard_normal((6, 4)))
    outs = [net(x, s).data for s in (1, 2, 3)]
    assert not np.allclose(outs[0], outs[1])
    assert not np.allclose(outs[1], outs[2])
    with pytest.raises(ConfigError):
        net(x, 0)
    with pytest.raises(ConfigError):
        net(x, 4)


def test_denoiser_gradients_through_film():
    rng = rng_for("net-grad")
    net = dif.DenoiserNet(dim=3, steps=2, embed_dim=4, rng=rng)
    params = net.parameters()
    for n, p in params.items():
        p.data = p.data + 0.25 * rng_for(f"fill-{n}").standard_normal(
            p.data.shape)
    x0 = rng.standard_normal((5, 3))
    w = rng.standard_normal((5, 3))

    def loss_fn():
        out = net(Tensor(x0), 2)
        return ad.tsum(ad.mul_const_array(out, w))

    module_gradcheck(params, loss_fn, tol=1e-5)


def test_refine_chain_gradients():
    # gradients flow through noise mixing, the denoiser, and S ddim steps
    rng = rng_for("chain-grad")
    sched = dif.build_schedule(2, 0.1, 0.2)
    net = dif.DenoiserNet(dim=2, steps=2, embed_dim=3, rng=rng)
    params = net.parameters()
    for n, p in params.items():
        p.data = p.data + 0.3 * rng_for(f"cfill-{n}").standard_normal(
            p.data.shape)
    f0 = rng.standard_normal((4, 2))
    w = rng.standard_normal((4, 2))
    params["input"] = Tensor(f0, requires_grad=True)

    def loss_fn():
        out = dif.refine(params["input"], sched,
                         lambda x, s: dif.predict_noise(net, x, s, sched),
                         np.random.default_rng(11))
        return ad.tsum(ad.mul_const_array(out, w))

    module_gradcheck(params, loss_fn, tol=1e-5)
