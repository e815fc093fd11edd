"""Multi-scale temporal localizer: pyramid encoder, per-level feature
refinement chain, and shared confidence/boundary prediction heads."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import diffusion as dif
from .autodiff import Tensor
from .errors import ConfigError
from .nn import Conv1d, ConvStack, DepthwiseConv1d, LayerNorm, \
    LocalAttentionBlock, Module


@dataclass
class ModelConfig:
    input_dim: int
    width: int = 128
    levels: int = 6
    window: int = 9
    ffn_mult: int = 2
    head_layers: int = 3
    head_kernel: int = 3
    share_heads: bool = True
    cls_prior: float = 0.01
    step_embed_dim: int = 64

    def validate(self) -> None:
        if self.input_dim < 1 or self.width < 1:
            raise ConfigError(
                f"model: input_dim/width must be positive, got "
                f"({self.input_dim}, {self.width})"
            )
        if self.levels < 1:
            raise ConfigError(f"model: levels must be >= 1, got {self.levels}")
        if self.window < 1 or self.window % 2 == 0:
            raise ConfigError(
                f"model: attention window must be odd and positive, got "
                f"{self.window}"
            )
        if self.head_layers < 1:
            raise ConfigError(
                f"model: head_layers must be >= 1, got {self.head_layers}"
            )
        if not 0.0 < self.cls_prior < 1.0:
            raise ConfigError(
                f"model: cls_prior must lie in (0, 1), got {self.cls_prior}"
            )


def pyramid_lengths(t: int, levels: int) -> list[int]:
    """Position counts per level for a stride-2 chain starting at stride 1."""
    lens = [t]
    for _ in range(levels - 1):
        lens.append(-(-lens[-1] // 2))
    return lens


def pyramid_strides(levels: int) -> list[int]:
    return [2 ** l for l in range(levels)]


@dataclass
class PyramidFeatures:
    levels: list[Tensor]
    strides: list[int]


class PyramidEncoder(Module):
    """Projects frame features and builds the stride-2 level chain.

    Each level is a local-window transformer block; levels past the first
    are fed by a depthwise stride-2 downsampling convolution.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        cfg.validate()
        self.in_proj = Conv1d(3, cfg.input_dim, cfg.width, rng, padding=1)
        self.in_norm = LayerNorm(cfg.width)
        self.blocks = [
            LocalAttentionBlock(cfg.width, cfg.window, rng,
                                ffn_mult=cfg.ffn_mult)
            for _ in range(cfg.levels)
        ]
        self.downsamples = [
            DepthwiseConv1d(3, cfg.width, rng, stride=2, padding=1)
            for _ in range(cfg.levels - 1)
        ]
        self.num_levels = cfg.levels

    def __call__(self, x: Tensor) -> PyramidFeatures:
        t = x.shape[0]
        top_stride = 2 ** (self.num_levels - 1)
        if t < top_stride:
            raise ConfigError(
                f"pyramid: sequence length {t} is shorter than the top-level "
                f"stride {top_stride} for {self.num_levels} levels"
            )
        h = self.in_norm(ad.relu(self.in_proj(x)))
        levels = [self.blocks[0](h)]
        for l in range(1, self.num_levels):
            h = self.downsamples[l - 1](levels[-1])
            levels.append(self.blocks[l](h))
        return PyramidFeatures(levels=levels,
                               strides=pyramid_strides(self.num_levels))


@dataclass
class HeadOutputs:
    logits: list[Tensor]
    offsets: list[Tensor]


class PredictionHeads(Module):
    """Conv stacks mapping level features to confidence logits and
    non-negative boundary offsets (softplus, in level-stride units)."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        cfg.validate()
        prior_bias = math.log(cfg.cls_prior / (1.0 - cfg.cls_prior))
        copies = 1 if cfg.share_heads else cfg.levels
        self.cls_stacks = [
            ConvStack(cfg.width, 1, rng, layers=cfg.head_layers,
                      kernel_size=cfg.head_kernel, final_bias=prior_bias)
            for _ in range(copies)
        ]
        self.reg_stacks = [
            ConvStack(cfg.width, 2, rng, layers=cfg.head_layers,
                      kernel_size=cfg.head_kernel)
            for _ in range(copies)
        ]
        self.shared = cfg.share_heads

    def __call__(self, levels: list[Tensor]) -> HeadOutputs:
        if not self.shared and len(levels) != len(self.cls_stacks):
            raise ConfigError(
                f"heads: built for {len(self.cls_stacks)} levels, got "
                f"{len(levels)}"
            )
        logits, offsets = [], []
        for i, feat in enumerate(levels):
            j = 0 if self.shared else i
            logits.append(self.cls_stacks[j](feat))
            offsets.append(ad.softplus(self.reg_stacks[j](feat)))
        return HeadOutputs(logits=logits, offsets=offsets)


@dataclass
class ModelOutputs:
    pre_levels: list[Tensor]
    levels: list[Tensor]
    strides: list[int]
    logits: list[Tensor]
    offsets: list[Tensor]


class LocalizerModel(Module):
    """Encoder + per-level refinement chain + prediction heads.

    One denoiser is shared across levels.  During refinement every level
    draws from an independent stream derived from ``noise_key`` and the
    level index, so results do not depend on evaluation order.
    """

    def __init__(self, cfg: ModelConfig, sched: dif.DiffusionSchedule,
                 rng: np.random.Generator):
        cfg.validate()
        self.encoder = PyramidEncoder(cfg, rng)
        self.denoiser = (
            dif.DenoiserNet(cfg.width, sched.steps, cfg.step_embed_dim, rng)
            if sched.steps > 0 else None
        )
        self.heads = PredictionHeads(cfg, rng)
        self.sched = sched
        self.cfg = cfg

    def refine_levels(self, pre: PyramidFeatures,
                      noise_key: tuple[int, ...] | None, *,
                      noise: bool = True, denoise: bool = True,
                      eta: float | None = None) -> list[Tensor]:
        if self.sched.steps == 0 or (not noise and not denoise):
            return list(pre.levels)
        refined = []
        for idx, feat in enumerate(pre.levels):
            rng = None
            if noise_key is not None:
                seq = np.random.SeedSequence(list(noise_key) + [idx])
                rng = np.random.default_rng(seq)
            refined.append(
                dif.refine(feat, self.sched, self._predict, rng,
                           noise=noise, denoise=denoise, eta=eta)
            )
        return refined

    def _predict(self, x_s: Tensor, s: int) -> tuple[Tensor, Tensor]:
        return dif.predict_noise(self.denoiser, x_s, s, self.sched)

    def __call__(self, x: Tensor, noise_key: tuple[int, ...] | None, *,
                 noise: bool = True, denoise: bool = True,
                 eta: float | None = None) -> ModelOutputs:
        pre = self.encoder(x)
        levels = self.refine_levels(pre, noise_key, noise=noise,
                                    denoise=denoise, eta=eta)
        heads = self.heads(levels)
        return ModelOutputs(pre_levels=pre.levels, levels=levels,
                            strides=pre.strides, logits=heads.logits,
                            offsets=heads.offsets)
