"""Pyramid geometry, encoder/head shapes, and the assembled localizer."""

import numpy as np
import pytest

from helpers import module_gradcheck
from tadiff import autodiff as ad
from tadiff import diffusion as dif
from tadiff.autodiff import Tensor
from tadiff.errors import ConfigError
from tadiff.model import (LocalizerModel, ModelConfig, PredictionHeads,
                          PyramidEncoder, pyramid_lengths, pyramid_strides)


def rng_for(name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(name.encode())))


def tiny_cfg(**kw) -> ModelConfig:
    kw.setdefault("input_dim", 3)
    kw.setdefault("width", 8)
    kw.setdefault("levels", 3)
    kw.setdefault("window", 3)
    kw.setdefault("step_embed_dim", 4)
    return ModelConfig(**kw)


# -- geometry -------------------------------------------------------------------

def test_pyramid_lengths_power_of_two():
    assert pyramid_lengths(256, 6) == [256, 128, 64, 32, 16, 8]
    assert pyramid_strides(6) == [1, 2, 4, 8, 16, 32]


def test_pyramid_lengths_ceil_chain():
    assert pyramid_lengths(100, 3) == [100, 50, 25]
    assert pyramid_lengths(7, 3) == [7, 4, 2]
    assert pyramid_lengths(5, 1) == [5]


def test_model_config_validation():
    with pytest.raises(ConfigError):
        tiny_cfg(levels=0).validate()
    with pytest.raises(ConfigError):
        tiny_cfg(window=4).validate()
    with pytest.raises(ConfigError):
        tiny_cfg(width=0).validate()
    with pytest.raises(ConfigError):
        tiny_cfg(cls_prior=0.0).validate()
    with pytest.raises(ConfigError):
        tiny_cfg(head_layers=0).validate()
    tiny_cfg().validate()


# -- encoder ---------------------------------------------------------------------

def test_encoder_level_shapes_follow_ceil_chain():
    cfg = tiny_cfg(levels=4)
    enc = PyramidEncoder(cfg, rng_for("enc"))
    x = Tensor(rng_for("enc-x").standard_normal((11, 3)))
    pyr = enc(x)
    assert pyr.strides == [1, 2, 4, 8]
    assert [lv.shape for lv in pyr.levels] == [(11, 8), (6, 8), (3, 8), (2, 8)]
    assert all(np.all(np.isfinite(lv.data)) for lv in pyr.levels)


def test_encoder_rejects_short_sequences():
    enc = PyramidEncoder(tiny_cfg(levels=4), rng_for("enc-short"))
    with pytest.raises(ConfigError):
        enc(Tensor(np.zeros((7, 3))))  # needs T >= 2^(L-1) = 8
    enc(Tensor(np.zeros((8, 3))))


def test_encoder_gradients():
    cfg = tiny_cfg(levels=2, width=4)
    enc = PyramidEncoder(cfg, rng_for("enc-grad"))
    params = enc.parameters()
    x0 = rng_for("enc-grad-x").standard_normal((6, 3))
    params["input"] = Tensor(x0, requires_grad=True)
    weights = [rng_for(f"enc-w{i}").standard_normal((n, 4))
               for i, n in enumerate([6, 3])]

    def loss_fn():
        pyr = enc(params["input"])
        terms = [ad.tsum(ad.mul_const_array(lv, w))
                 for lv, w in zip(pyr.levels, weights)]
        return ad.add(*terms)

    # spot-check a third of the parameters to keep runtime low
    sample = [(n, i) for n, p in params.items()
              for i in range(0, p.data.size, 3)]
    module_gradcheck(params, loss_fn, tol=1e-5, sample=sample)


# -- heads ------------------------------------------------------------------------

def test_head_shapes_and_nonnegative_offsets():
    cfg = tiny_cfg()
    heads = PredictionHeads(cfg, rng_for("heads"))
    levels = [Tensor(rng_for(f"hl{i}").standard_normal((n, 8)))
              for i, n in enumerate([9, 5, 3])]
    out = heads(levels)
    assert [l.shape for l in out.logits] == [(9, 1), (5, 1), (3, 1)]
    assert [o.shape for o in out.offsets] == [(9, 2), (5, 2), (3, 2)]
    assert all(np.all(o.data >= 0.0) for o in out.offsets)


def test_head_initial_scores_match_prior():
    cfg = tiny_cfg(cls_prior=0.01)
    heads = PredictionHeads(cfg, rng_for("heads-prior"))
    feat = Tensor(rng_for("heads-prior-x").standard_normal((50, 8)) * 0.1)
    logits = heads([feat]).logits[0].data
    probs = 1.0 / (1.0 + np.exp(-logits))
    # final conv starts near zero-mean, so scores hover around the prior
    assert 0.001 < probs.mean() < 0.1


def test_unshared_heads_check_level_count():
    cfg = tiny_cfg(share_heads=False)
    heads = PredictionHeads(cfg, rng_for("heads-unshared"))
    levels = [Tensor(np.zeros((4, 8))) for _ in range(2)]
    with pytest.raises(ConfigError):
        heads(levels)
    heads(levels + [Tensor(np.zeros((2, 8)))])


def test_shared_heads_reuse_parameters():
    shared = PredictionHeads(tiny_cfg(share_heads=True), rng_for("h1"))
    unshared = PredictionHeads(tiny_cfg(share_heads=False), rng_for("h2"))
    assert len(unshared.parameters()) == 3 * len(shared.parameters())


# -- assembled model ---------------------------------------------------------------

def make_model(steps=2, **kw) -> LocalizerModel:
    cfg = tiny_cfg(**kw)
    sched = dif.build_schedule(steps, 0.1, 0.3)
    return LocalizerModel(cfg, sched, rng_for("model"))


def test_model_output_structure():
    model = make_model()
    out = model(Tensor(rng_for("mx").standard_normal((12, 3))), (0, 2, 0, 0))
    assert out.strides == [1, 2, 4]
    assert [l.shape for l in out.logits] == [(12, 1), (6, 1), (3, 1)]
    assert [o.shape for o in out.offsets] == [(12, 2), (6, 2), (3, 2)]
    assert [f.shape for f in out.levels] == [f.shape for f in out.pre_levels]


def test_model_noise_key_determinism():
    model = make_model()
    x = rng_for("mdet").standard_normal((10, 3))
    a = model(Tensor(x), (0, 2, 1, 5))
    b = model(Tensor(x), (0, 2, 1, 5))
    c = model(Tensor(x), (0, 2, 1, 6))
    for la, lb, lc in zip(a.logits, b.logits, c.logits):
        assert np.array_equal(la.data, lb.data)
    assert any(not np.array_equal(la.data, lc.data)
               for la, lc in zip(a.logits, c.logits))


def test_model_zero_steps_has_no_denoiser_and_passthrough():
    model = make_model(steps=0)
    assert model.denoiser is None
    x = rng_for("mzs").standard_normal((9, 3))
    out = model(Tensor(x), (0, 2, 0, 0))
    for pre, post in zip(out.pre_levels, out.levels):
        assert pre is post
    # no-op toggles agree with the structural baseline
    out2 = make_model(steps=2)(Tensor(x), None, noise=False, denoise=False)
    for pre, post in zip(out2.pre_levels, out2.levels):
        assert pre is post


def test_model_refinement_changes_features():
    model = make_model(steps=2)
    x = rng_for("mrc").standard_normal((9, 3))
    out = model(Tensor(x), (0, 2, 0, 0), noise=True, denoise=True)
    assert any(not np.array_equal(pre.data, post.data)
               for pre, post in zip(out.pre_levels, out.levels))


def test_model_parameters_cover_all_components():
    model = make_model(steps=2)
    names = set(model.parameters())
    assert any(n.startswith("encoder.") for n in names)
    assert any(n.startswith("denoiser.") for n in names)
    assert any(n.startswith("heads.") for n in names)
    baseline = make_model(steps=0)
    assert not any(n.startswith("denoiser.") for n in baseline.parameters())


def test_model_load_parameters_roundtrip():
    model = make_model()
    params = {n: p.data + 0.1 for n, p in model.parameters().items()}
    model.load_parameters(params)
    for n, p in model.parameters().items():
        assert np.array_equal(p.data, params[n])
    with pytest.raises(KeyError):
        model.load_parameters({})
