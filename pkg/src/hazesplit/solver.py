"""Per-image optimization: Adam over the three subnetworks jointly.

One call to ``dehaze`` owns its networks, its rng streams and its compute
graphs; nothing is shared between calls, so independent images can be
solved from independent threads.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from threadpoolctl import threadpool_limits

from . import autograd as ag
from . import losses, nets, physics
from .losses import LossBreakdown, LossConfig

ABLATABLE_TERMS = ("h", "kl", "j", "reg")


class NumericalError(RuntimeError):
    """Non-finite loss or gradient; carries whatever outputs were still good."""

    def __init__(self, message, record=None, disentanglement=None):
        super().__init__(message)
        self.record = record
        self.disentanglement = disentanglement


@dataclass
class SolverConfig:
    epochs: int = 500
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    dtype: str = "float32"
    blas_threads: int | None = 1  # None leaves the BLAS pool alone

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0.0 <= b < 1.0:
                raise ValueError(f"{name} must be in [0, 1), got {b}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    def numpy_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


@dataclass
class Disentanglement:
    """The three planes recovered for one input image (HxWxC, values in (0,1))."""

    radiance: np.ndarray
    transmission: np.ndarray
    airlight: np.ndarray


@dataclass
class RunRecord:
    breakdowns: list[LossBreakdown]
    epoch_ms: list[float]
    seed: int
    config: dict
    airlight_hint: tuple[float, float, float]
    final: Disentanglement | None = None


class AdamState:
    """First/second moment buffers per parameter plus the shared step count."""

    def __init__(self, named_params):
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in named_params}
        self.v = {name: np.zeros_like(p.data) for name, p in named_params}


def adam_step(named_params, state, cfg):
    """One bias-corrected Adam update; zeroes every gradient afterwards."""
    state.t += 1
    t = state.t
    for name, p in named_params:
        g = p.grad
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in parameter {name!r} at step {t}")
        dt = p.data.dtype.type
        b1, b2 = dt(cfg.beta1), dt(cfg.beta2)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (dt(1.0) - b1) * g
        v *= b2
        v += (dt(1.0) - b2) * (g * g)
        m_hat = m / (dt(1.0) - dt(cfg.beta1) ** t)
        v_hat = v / (dt(1.0) - dt(cfg.beta2) ** t)
        p.data -= dt(cfg.learning_rate) * m_hat / (np.sqrt(v_hat) + dt(cfg.adam_eps))
        p.zero_grad()


_BLAS_LIMIT = None


def _pin_blas(limit):
    # applied process-wide and sticky; per-call contexts would race under --jobs
    global _BLAS_LIMIT
    if limit is not None and limit != _BLAS_LIMIT:
        threadpool_limits(limits=int(limit))
        _BLAS_LIMIT = limit


def _to_plane(tensor):
    arr = tensor.data[0].transpose(1, 2, 0)
    return np.ascontiguousarray(arr)


def _check_input(hazy):
    img = np.asarray(hazy)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 image, got shape {img.shape}")
    h, w = img.shape[:2]
    if min(h, w) < 32:
        raise ValueError(f"image too small to dehaze: {h}x{w} (need >= 32)")
    if h % nets.DOWNSAMPLE_FACTOR or w % nets.DOWNSAMPLE_FACTOR:
        raise ValueError(
            f"spatial dims must be multiples of {nets.DOWNSAMPLE_FACTOR}, got {h}x{w}; "
            "pad first (see imgio.pad_to_multiple)"
        )
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError(f"image values must lie in [0,1], got [{img.min()}, {img.max()}]")
    return img


def dehaze(hazy, cfg=None):
    """Optimize the three networks against one hazy image.

    Returns (Disentanglement, RunRecord). The final planes come from a
    deterministic forward pass (latent fixed at its mean), so they are a
    pure function of the learned parameters.
    """
    cfg = cfg or SolverConfig()
    img = _check_input(hazy)
    dtype = cfg.numpy_dtype()
    _pin_blas(cfg.blas_threads)

    seeds = np.random.SeedSequence(cfg.seed).generate_state(4)
    jnet = nets.build_jnet(int(seeds[0]), dtype=dtype)
    tnet = nets.build_tnet(int(seeds[1]), dtype=dtype)
    anet = nets.build_anet(int(seeds[2]), dtype=dtype)
    noise_rng = np.random.default_rng(int(seeds[3]))

    hint = physics.estimate_airlight_hint(img)
    x = ag.constant(np.ascontiguousarray(img.transpose(2, 0, 1))[None].astype(dtype))

    named = [
        (f"{net.kind}.{name}", p) for net in (jnet, tnet, anet) for name, p in net.named()
    ]
    state = AdamState(named)
    record = RunRecord(
        breakdowns=[],
        epoch_ms=[],
        seed=cfg.seed,
        config=asdict(cfg),
        airlight_hint=tuple(float(v) for v in hint),
    )

    def snapshot():
        j = nets.forward_jnet(jnet, x)
        t = nets.forward_tnet(tnet, x)
        a, _ = nets.forward_anet(anet, x, sample=False)
        return Disentanglement(
            radiance=_to_plane(j), transmission=_to_plane(t), airlight=_to_plane(a)
        )

    def salvage(err):
        # parameters still hold the last finite state; hand back its outputs
        err.record = record
        try:
            candidate = snapshot()
        except (FloatingPointError, ValueError):
            return
        planes = (candidate.radiance, candidate.transmission, candidate.airlight)
        if all(np.all(np.isfinite(p)) for p in planes):
            err.disentanglement = candidate

    for epoch in range(cfg.epochs):
        started = time.perf_counter()
        j = nets.forward_jnet(jnet, x)
        t = nets.forward_tnet(tnet, x)
        a, latent = nets.forward_anet(anet, x, rng=noise_rng)
        recon = physics.compose(j, t, a)
        total, breakdown = losses.loss_total(recon, x, j, a, latent, hint, cfg.loss)
        if not np.isfinite(breakdown.total):
            err = NumericalError(f"non-finite loss at epoch {epoch + 1}: {breakdown}")
            salvage(err)
            raise err
        total.backward()
        try:
            adam_step(named, state, cfg)
        except NumericalError as err:
            salvage(err)
            raise
        record.breakdowns.append(breakdown)
        record.epoch_ms.append((time.perf_counter() - started) * 1000.0)

    result = snapshot()
    record.final = result
    return result, record


def ablate(hazy, cfg, disabled_term):
    """Run dehaze with one loss term switched off; all else identical."""
    term = disabled_term.lower()
    if term not in ABLATABLE_TERMS:
        raise ValueError(f"unknown term {disabled_term!r}; expected one of {ABLATABLE_TERMS}")
    loss_cfg = replace(cfg.loss, **{f"enable_{term}": False})
    return dehaze(hazy, replace(cfg, loss=loss_cfg))
