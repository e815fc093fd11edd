"""Temporal artifact diffuser: noise schedule, forward feature perturbation,
FiLM-conditioned temporal-convolutional noise predictor, and the
deterministic implicit reverse chain."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError
from .nn import Conv1d, Linear, Module


@dataclass
class DiffusionSchedule:
    """Linear beta schedule with cumulative signal-retention coefficients.

    ``alpha_bar`` has ``steps + 1`` entries with ``alpha_bar[0] == 1`` so
    index ``s`` is the retention after ``s`` noising steps.
    """

    steps: int
    beta_start: float
    beta_end: float
    eta: float
    betas: np.ndarray = field(repr=False)
    alpha_bar: np.ndarray = field(repr=False)

    def sigma(self, s: int) -> float:
        """Stochasticity of the reverse step s -> s-1 (0 when eta is 0)."""
        if not 1 <= s <= self.steps:
            raise ConfigError(f"sigma: step {s} outside [1, {self.steps}]")
        ab_prev = self.alpha_bar[s - 1]
        ab = self.alpha_bar[s]
        var = (self.eta ** 2) * ((1.0 - ab_prev) / (1.0 - ab)) * (1.0 - ab / ab_prev)
        sigma = math.sqrt(max(var, 0.0))
        if sigma ** 2 > (1.0 - ab_prev) + 1e-12:
            raise ConfigError(
                f"sigma: step {s} variance {sigma**2:.3e} exceeds 1 - alpha_bar"
                f"[{s - 1}] = {1.0 - ab_prev:.3e}"
            )
        return sigma


def build_schedule(steps: int, beta_start: float, beta_end: float,
                   eta: float = 0.0) -> DiffusionSchedule:
    """Linear schedule; steps = 0 yields the identity chain (no refinement)."""
    if steps < 0:
        raise ConfigError(f"build_schedule: steps must be >= 0, got {steps}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(
            f"build_schedule: need 0 < beta_start <= beta_end < 1, got "
            f"({beta_start}, {beta_end})"
        )
    if not (0.0 <= eta <= 1.0):
        raise ConfigError(f"build_schedule: eta must lie in [0, 1], got {eta}")
    betas = np.linspace(beta_start, beta_end, steps)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return DiffusionSchedule(steps=steps, beta_start=beta_start,
                             beta_end=beta_end, eta=eta,
                             betas=betas, alpha_bar=alpha_bar)


def forward_diffuse(f: Tensor, s: int, eps: np.ndarray,
                    sched: DiffusionSchedule) -> Tensor:
    """Noising step: sqrt(a_bar_s) * f + sqrt(1 - a_bar_s) * eps.

    ``eps`` is caller-supplied standard normal noise (a constant for the
    tape); gradients flow only through ``f``.  s = 0 is the identity.
    """
    if not 0 <= s <= sched.steps:
        raise ConfigError(f"forward_diffuse: step {s} outside [0, {sched.steps}]")
    ab = sched.alpha_bar[s]
    signal = ad.scale(f, math.sqrt(ab))
    if s == 0:
        return signal
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != f.shape:
        raise ad.ShapeError(
            f"forward_diffuse: noise shape {eps.shape} does not match {f.shape}"
        )
    return ad.add_const_array(signal, math.sqrt(1.0 - ab) * eps)


class DenoiserNet(Module):
    """Step-conditioned temporal-convolutional noise predictor.

    A learned embedding of the diffusion step feeds two zero-initialized
    linear maps producing per-channel scale/shift (identity at init), which
    modulate the hidden activations between two kernel-3 convolutions.  The
    final convolution is zero-initialized so the chain starts as a pure
    rescaling.
    """

    def __init__(self, dim: int, steps: int, embed_dim: int,
                 rng: np.random.Generator):
        if steps < 1:
            raise ConfigError(f"DenoiserNet: steps must be >= 1, got {steps}")
        self.step_embed = Tensor(rng.standard_normal((steps, embed_dim)) * 0.02,
                                 requires_grad=True)
        self.film_scale = Linear(embed_dim, dim, rng, zero_init=True)
        self.film_shift = Linear(embed_dim, dim, rng, zero_init=True)
        self.conv_in = Conv1d(3, dim, dim, rng, padding=1)
        self.conv_out = Conv1d(3, dim, dim, rng, padding=1, zero_init=True)
        self.steps = steps

    def __call__(self, x_s: Tensor, s: int) -> Tensor:
        if not 1 <= s <= self.steps:
            raise ConfigError(f"DenoiserNet: step {s} outside [1, {self.steps}]")
        emb = ad.embed_row(self.step_embed, s - 1)
        gain = ad.add_scalar(self.film_scale(emb), 1.0)
        shift = self.film_shift(emb)
        h = self.conv_in(x_s)
        h = ad.relu(_film(h, gain, shift))
        return self.conv_out(h)


def _film(x: Tensor, gain_row: Tensor, shift_row: Tensor) -> Tensor:
    # gain/shift come out of the linears as [1, C]; row_affine wants [C]
    return ad.row_affine(x, _flatten_row(gain_row), _flatten_row(shift_row))


def _flatten_row(row: Tensor) -> Tensor:
    t, c = row.shape
    if t != 1:
        raise ad.ShapeError(f"expected a [1, C] row, got {row.shape}")

    def backward(g):
        if row.requires_grad:
            row.grad += g[None, :]

    return ad._make(row.data[0], (row,), backward)


def predict_noise(net: DenoiserNet, x_s: Tensor, s: int,
                  sched: DiffusionSchedule) -> tuple[Tensor, Tensor]:
    """Predicted residual noise and the clean-feature estimate it implies."""
    if not 1 <= s <= sched.steps:
        raise ConfigError(f"predict_noise: step {s} outside [1, {sched.steps}]")
    eps_hat = net(x_s, s)
    x0_hat = recover_clean(x_s, s, eps_hat, sched)
    return eps_hat, x0_hat


def recover_clean(x_s: Tensor, s: int, eps_hat: Tensor,
                  sched: DiffusionSchedule) -> Tensor:
    """Invert the noising step: (x_s - sqrt(1 - a_bar_s) * eps) / sqrt(a_bar_s)."""
    ab = sched.alpha_bar[s]
    num = ad.sub(x_s, ad.scale(eps_hat, math.sqrt(1.0 - ab)))
    return ad.scale(num, 1.0 / math.sqrt(ab))


def ddim_step(x_s: Tensor, s: int, eps_hat: Tensor, x0_hat: Tensor,
              z: np.ndarray | None, sched: DiffusionSchedule) -> Tensor:
    """One reverse update producing x_{s-1}; deterministic when eta is 0."""
    if not 1 <= s <= sched.steps:
        raise ConfigError(f"ddim_step: step {s} outside [1, {sched.steps}]")
    ab_prev = sched.alpha_bar[s - 1]
    sigma = sched.sigma(s)
    dir_coef_sq = 1.0 - ab_prev - sigma ** 2
    if dir_coef_sq < -1e-12:
        raise ConfigError(
            f"ddim_step: sigma^2 = {sigma**2:.3e} exceeds 1 - alpha_bar"
            f"[{s - 1}] = {1.0 - ab_prev:.3e}"
        )
    out = ad.add(ad.scale(x0_hat, math.sqrt(ab_prev)),
                 ad.scale(eps_hat, math.sqrt(max(dir_coef_sq, 0.0))))
    if sigma > 0.0:
        if z is None:
            raise ConfigError("ddim_step: eta > 0 requires a noise draw z")
        z = np.asarray(z, dtype=np.float64)
        out = ad.add_const_array(out, sigma * z)
    return out


Predictor = Callable[[Tensor, int], tuple[Tensor, Tensor]]


def refine(f: Tensor, sched: DiffusionSchedule, predictor: Predictor,
           rng: np.random.Generator | None, *, noise: bool = True,
           denoise: bool = True, eta: float | None = None) -> Tensor:
    """Run the perturb-then-denoise chain on one feature sequence.

    ``predictor`` maps (x_s, s) to (eps_hat, x0_hat); in the model it wraps
    :class:`DenoiserNet` but tests may inject an oracle.  With ``noise``
    the features are diffused to step S first; with ``denoise`` the S
    reverse updates run.  Disabling both returns ``f`` unchanged.  ``eta``
    overrides the schedule's stochasticity (evaluation forces 0).
    """
    if sched.steps == 0 or (not noise and not denoise):
        return f
    if eta is not None and eta != sched.eta:
        sched = DiffusionSchedule(steps=sched.steps, beta_start=sched.beta_start,
                                  beta_end=sched.beta_end, eta=eta,
                                  betas=sched.betas, alpha_bar=sched.alpha_bar)
    steps = sched.steps
    if noise:
        if rng is None:
            raise ConfigError("refine: noise injection requires an rng")
        eps = rng.standard_normal(f.shape)
        x = forward_diffuse(f, steps, eps, sched)
    else:
        x = f
    if not denoise:
        return x
    for s in range(steps, 0, -1):
        eps_hat, x0_hat = predictor(x, s)
        z = None
        if sched.sigma(s) > 0.0:
            if rng is None:
                raise ConfigError("refine: eta > 0 requires an rng")
            z = rng.standard_normal(f.shape)
        x = ddim_step(x, s, eps_hat, x0_hat, z, sched)
    return x
