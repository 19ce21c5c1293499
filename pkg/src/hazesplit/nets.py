"""The three per-image subnetworks and their forward passes.

Two full-resolution backbones estimate the radiance and the transmission
map (identical hidden stacks, different output widths). The airlight is
modelled variationally: an encoder/decoder pair with a spatial Gaussian
latent in between, sampled via the reparameterization trick.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import ShapeError

HIDDEN_WIDTH = 64
HIDDEN_DEPTH = 4
LEAKY_SLOPE = 0.2
NORM_EPS = 1e-5
ENCODER_CHANNELS = (3, 16, 32, 64, 128)
DECODER_CHANNELS = (128, 64, 32, 16, 16)
LATENT_CHANNELS = 128
DOWNSAMPLE_FACTOR = 16

SNAPSHOT_VERSION = 1


@dataclass
class NetworkParams:
    """Named learnable tensors of one subnetwork."""

    kind: str  # "jnet" | "tnet" | "anet"
    params: dict[str, ag.Tensor] = field(default_factory=dict)

    def add(self, name, data):
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        self.params[name] = ag.parameter(data)

    def __getitem__(self, name):
        return self.params[name]

    def tensors(self):
        return list(self.params.values())

    def named(self):
        return list(self.params.items())

    def count(self):
        return sum(t.data.size for t in self.params.values())


@dataclass
class LatentGaussian:
    """Mean and log-variance tensors of the spatial latent code."""

    mu: ag.Tensor
    log_var: ag.Tensor


def _kaiming(rng, cout, cin, k, dtype):
    std = np.sqrt(2.0 / (cin * k * k))
    return rng.normal(0.0, std, size=(cout, cin, k, k)).astype(dtype)


def _add_conv(net, name, rng, cin, cout, k, dtype):
    net.add(f"{name}.kernel", _kaiming(rng, cout, cin, k, dtype))
    net.add(f"{name}.bias", np.zeros(cout, dtype=dtype))


def _add_norm(net, name, cout, dtype):
    net.add(f"{name}.gamma", np.ones(cout, dtype=dtype))
    net.add(f"{name}.beta", np.zeros(cout, dtype=dtype))


def _build_image_net(kind, out_channels, seed, dtype):
    dtype = np.dtype(dtype or ag.get_default_dtype())
    rng = np.random.default_rng(seed)
    net = NetworkParams(kind=kind)
    cin = 3
    for i in range(1, HIDDEN_DEPTH + 1):
        _add_conv(net, f"conv{i}", rng, cin, HIDDEN_WIDTH, 3, dtype)
        _add_norm(net, f"norm{i}", HIDDEN_WIDTH, dtype)
        cin = HIDDEN_WIDTH
    _add_conv(net, "head", rng, HIDDEN_WIDTH, out_channels, 3, dtype)
    return net


def build_jnet(seed, dtype=None):
    """Radiance network: stride-1, same-padding, no downsampling anywhere."""
    return _build_image_net("jnet", 3, seed, dtype)


def build_tnet(seed, dtype=None):
    """Transmission network: same hidden stack as the radiance net, 1-channel head."""
    return _build_image_net("tnet", 1, seed, dtype)


def build_anet(seed, dtype=None):
    """Airlight network: 4-block encoder, Gaussian latent heads, 4-block decoder."""
    dtype = np.dtype(dtype or ag.get_default_dtype())
    rng = np.random.default_rng(seed)
    net = NetworkParams(kind="anet")
    for i in range(4):
        _add_conv(net, f"enc{i + 1}", rng, ENCODER_CHANNELS[i], ENCODER_CHANNELS[i + 1], 3, dtype)
    _add_conv(net, "mu", rng, LATENT_CHANNELS, LATENT_CHANNELS, 1, dtype)
    _add_conv(net, "log_var", rng, LATENT_CHANNELS, LATENT_CHANNELS, 1, dtype)
    for i in range(4):
        _add_conv(net, f"dec{i + 1}", rng, DECODER_CHANNELS[i], DECODER_CHANNELS[i + 1], 3, dtype)
        _add_norm(net, f"dec_norm{i + 1}", DECODER_CHANNELS[i + 1], dtype)
    _add_conv(net, "out", rng, DECODER_CHANNELS[-1], 3, 3, dtype)
    return net


def _forward_backbone(net, x):
    h = x
    for i in range(1, HIDDEN_DEPTH + 1):
        h = ag.conv2d(h, net[f"conv{i}.kernel"], net[f"conv{i}.bias"])
        h = ag.batch_norm(h, net[f"norm{i}.gamma"], net[f"norm{i}.beta"], eps=NORM_EPS)
        h = ag.leaky_relu(h, LEAKY_SLOPE)
    h = ag.conv2d(h, net["head.kernel"], net["head.bias"])
    return ag.sigmoid(h)


def forward_jnet(net, x):
    """Predict the radiance layer (N,3,H,W in (0,1)) from the hazy input."""
    return _forward_backbone(net, x)


def forward_tnet(net, x):
    """Predict the transmission map (N,1,H,W in (0,1)) from the hazy input."""
    return _forward_backbone(net, x)


def forward_anet(net, x, rng=None, noise=None, sample=True):
    """Predict the airlight plane; returns (output, LatentGaussian).

    With ``sample`` the latent is mu + exp(log_var/2) * eps where eps comes
    from ``noise`` (an array) or is drawn from ``rng``; gradient flows
    through mu and log_var only. With ``sample=False`` the latent is mu,
    which makes the forward a pure function of the parameters.
    """
    if x.shape[2] % DOWNSAMPLE_FACTOR or x.shape[3] % DOWNSAMPLE_FACTOR:
        raise ShapeError(
            f"airlight net needs spatial dims divisible by {DOWNSAMPLE_FACTOR}, got {x.shape}"
        )
    h = x
    for i in range(1, 5):
        h = ag.conv2d(h, net[f"enc{i}.kernel"], net[f"enc{i}.bias"])
        h = ag.relu(h)
        h = ag.max_pool2(h)
    mu = ag.conv2d(h, net["mu.kernel"], net["mu.bias"])
    log_var = ag.conv2d(h, net["log_var.kernel"], net["log_var.bias"])

    if sample:
        if noise is None:
            if rng is None:
                raise ValueError("sampling requires rng or noise")
            noise = rng.standard_normal(mu.shape)
        eps = ag.constant(np.asarray(noise, dtype=mu.data.dtype))
        z = mu + (log_var * 0.5).exp() * eps
    else:
        z = mu

    h = z
    for i in range(1, 5):
        h = ag.upsample_nearest2(h)
        h = ag.conv2d(h, net[f"dec{i}.kernel"], net[f"dec{i}.bias"])
        h = ag.batch_norm(h, net[f"dec_norm{i}.gamma"], net[f"dec_norm{i}.beta"], eps=NORM_EPS)
        h = ag.relu(h)
    out = ag.conv2d(h, net["out.kernel"], net["out.bias"])
    return ag.sigmoid(out), LatentGaussian(mu=mu, log_var=log_var)


def save_params(net, path):
    """Write a versioned name->array snapshot of one network."""
    arrays = {name: t.data for name, t in net.params.items()}
    np.savez(path, __version__=np.int64(SNAPSHOT_VERSION), __kind__=net.kind, **arrays)


def load_params(path):
    """Read a snapshot back into a NetworkParams with fresh gradient buffers."""
    with np.load(path, allow_pickle=False) as f:
        version = int(f["__version__"])
        if version != SNAPSHOT_VERSION:
            raise ValueError(f"unsupported snapshot version {version} in {path}")
        kind = str(f["__kind__"])
        net = NetworkParams(kind=kind)
        for name in f.files:
            if name in ("__version__", "__kind__"):
                continue
            net.add(name, f[name])
    return net
