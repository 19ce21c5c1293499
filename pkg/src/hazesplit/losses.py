"""The five loss terms and their weighted total, each switchable for ablation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import physics
from .autograd import ShapeError

NORM_MODES = ("mean_of_squares", "sum_of_squares")


@dataclass
class LossConfig:
    """Term switches and weighting of the total objective.

    ``norm_mode`` applies to the reconstruction and hint terms. The sum
    default keeps them on the same scale as the summed KL term; with
    per-element means the KL term dwarfs everything else and forces the
    latent to pure noise, which makes the airlight output jitter.
    """

    lambda_reg: float = 0.1
    enable_rec: bool = True
    enable_j: bool = True
    enable_h: bool = True
    enable_kl: bool = True
    enable_reg: bool = True
    norm_mode: str = "sum_of_squares"

    def __post_init__(self):
        if self.lambda_reg < 0:
            raise ValueError(f"lambda_reg must be >= 0, got {self.lambda_reg}")
        if self.norm_mode not in NORM_MODES:
            raise ValueError(f"norm_mode must be one of {NORM_MODES}, got {self.norm_mode!r}")


@dataclass
class LossBreakdown:
    """Scalar value of every term at one optimization step (0.0 when disabled)."""

    rec: float = 0.0
    j: float = 0.0
    h: float = 0.0
    kl: float = 0.0
    reg: float = 0.0
    total: float = 0.0


def _squared_norm(diff, cfg):
    sq = diff.square()
    return sq.mean() if cfg.norm_mode == "mean_of_squares" else sq.sum()


def loss_rec(reconstructed, hazy, cfg):
    """Squared Frobenius distance between the re-composed and observed image."""
    if reconstructed.shape != hazy.shape:
        raise ShapeError(f"reconstruction {reconstructed.shape} vs input {hazy.shape}")
    return _squared_norm(reconstructed - hazy, cfg)


def loss_j(radiance, cfg):
    """Color-attenuation term: push brightness toward saturation on the radiance.

    Always the per-pixel mean of (V - S)^2; as a raw sum this term is
    strong enough to drag the radiance onto the V = S manifold and undo
    the disentanglement.
    """
    v = physics.hsv_value(radiance)
    s = physics.hsv_saturation(radiance)
    return (v - s).square().mean()


def loss_hint(airlight_out, hint, cfg):
    """Pull the predicted airlight plane toward the precomputed global hint."""
    hint = np.asarray(hint, dtype=airlight_out.data.dtype)
    if hint.shape == (3,):
        hint = hint.reshape(1, 3, 1, 1)
    target = ag.constant(np.broadcast_to(hint, airlight_out.shape))
    if target.shape != airlight_out.shape:
        raise ShapeError(f"hint {hint.shape} does not broadcast to {airlight_out.shape}")
    return _squared_norm(airlight_out - target, cfg)


def loss_kl(latent):
    """KL divergence of the latent Gaussian from the standard normal, summed."""
    mu, lv = latent.mu, latent.log_var
    return (mu.square() + lv.exp() - lv - 1.0).sum() * 0.5


def loss_reg(airlight_out):
    """Smoothness penalty: mean squared gap to the 8-neighbour average.

    Neighborhoods are clipped at borders (3 neighbours in corners, 5 at
    edges); gradient flows through the pixel and its neighbourhood mean.
    """
    n, c, h, w = airlight_out.shape
    if h < 2 or w < 2:
        raise ShapeError(f"smoothness penalty needs at least 2x2, got {h}x{w}")
    dtype = airlight_out.data.dtype
    kernel = np.zeros((c, c, 3, 3), dtype=dtype)
    for ch in range(c):
        kernel[ch, ch] = 1.0
    box = ag.conv2d(airlight_out, ag.constant(kernel), padding=1)
    ones = np.ones((1, 1, h, w), dtype=dtype)
    counts = ag.conv2d(ag.constant(ones), ag.constant(np.ones((1, 1, 3, 3), dtype=dtype)), padding=1)
    neighbour_mean = (box - airlight_out) / ag.constant(counts.data - 1.0)
    m = airlight_out.data.size
    return (airlight_out - neighbour_mean).square().sum() * (1.0 / (2.0 * m))


def combine_terms(rec, j, h, kl, reg, cfg):
    """Weighted sum of present terms; absent terms contribute exactly zero."""
    parts = []
    values = LossBreakdown()
    if rec is not None:
        parts.append(rec)
        values.rec = float(rec.data)
    if j is not None:
        parts.append(j)
        values.j = float(j.data)
    if h is not None:
        parts.append(h)
        values.h = float(h.data)
    if kl is not None:
        parts.append(kl)
        values.kl = float(kl.data)
    if reg is not None:
        parts.append(reg * cfg.lambda_reg)
        values.reg = float(reg.data)
    if not parts:
        total = ag.constant(np.zeros((), dtype=ag.get_default_dtype()))
    else:
        total = parts[0]
        for p in parts[1:]:
            total = total + p
    values.total = float(total.data)
    return total, values


def loss_total(reconstructed, hazy, radiance, airlight_out, latent, hint, cfg):
    """Evaluate every enabled term and return (scalar tensor, breakdown)."""
    rec = loss_rec(reconstructed, hazy, cfg) if cfg.enable_rec else None
    j = loss_j(radiance, cfg) if cfg.enable_j else None
    h = loss_hint(airlight_out, hint, cfg) if cfg.enable_h else None
    kl = loss_kl(latent) if cfg.enable_kl else None
    reg = loss_reg(airlight_out) if cfg.enable_reg else None
    return combine_terms(rec, j, h, kl, reg, cfg)
