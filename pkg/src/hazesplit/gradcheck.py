"""Finite-difference verification of analytic gradients.

Every differentiable primitive gets probed at random coordinates against a
central difference; inputs are generated away from non-smooth points
(activation kinks, pooling ties) so the comparison is meaningful.
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag

REL_TOL = 1e-3


def max_rel_error(f, inputs, probes=100, rng=None, step=1e-6):
    """Largest relative error between analytic and central-difference grads.

    ``f`` rebuilds the forward pass from ``inputs`` (float64 leaf tensors
    with requires_grad) and returns a scalar Tensor. Each probe perturbs
    one random coordinate; the step grows until the function difference
    clears the float64 cancellation floor, and probes whose two
    evaluations land on different smooth pieces (a relu kink or an argmax
    tie in between) are discarded and redrawn.
    """
    rng = rng or np.random.default_rng(0)
    for t in inputs:
        t.zero_grad()
    root = f()
    base = abs(float(root.data))
    root.backward()
    analytic = [t.grad.copy() for t in inputs]
    for t in inputs:
        t.zero_grad()

    # below this, (up - down) is mostly rounding noise of the two sums
    df_floor = 2000.0 * np.finfo(np.float64).eps * max(1.0, base)

    def probe_at(flat, j, orig, h):
        flat[j] = orig + h
        with ag.record_kinks() as up_k:
            up = float(f().data)
        flat[j] = orig - h
        with ag.record_kinks() as down_k:
            down = float(f().data)
        flat[j] = orig
        return up, down, up_k.signature == down_k.signature

    worst = 0.0
    sizes = np.array([t.data.size for t in inputs])
    weights = sizes / sizes.sum()
    done = 0
    attempts = 0
    while done < probes and attempts < probes * 20:
        attempts += 1
        i = int(rng.choice(len(inputs), p=weights))
        j = int(rng.integers(inputs[i].data.size))
        flat = inputs[i].data.reshape(-1)
        orig = flat[j]
        expected = analytic[i].reshape(-1)[j]
        h = step * max(1.0, abs(orig))
        numeric = None
        for _ in range(4):
            up, down, smooth = probe_at(flat, j, orig, h)
            if not smooth:
                break
            df = up - down
            if df == 0.0 and expected == 0.0:
                numeric = 0.0
                break
            if abs(df) >= df_floor:
                numeric = df / (2.0 * h)
                break
            h *= 10.0
        if numeric is None:
            continue
        worst = max(worst, abs(expected - numeric) / (abs(numeric) + 1e-8))
        done += 1
    if done < probes:
        raise RuntimeError(f"could not find {probes} usable probe points ({done} found)")
    return worst


def _away_from_zero(rng, shape, margin=0.1, scale=2.0):
    """Uniform values with |x| in [margin, scale]; keeps kinks out of reach."""
    mag = rng.uniform(margin, scale, size=shape)
    sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    return mag * sign


def _distinct(rng, shape, gap=0.05):
    """Values with pairwise gaps >= gap - jitter, so argmax ties never occur."""
    n = int(np.prod(shape))
    base = rng.permutation(n).astype(np.float64) * gap
    jitter = rng.uniform(0.0, gap * 0.2, size=n)
    return (base + jitter).reshape(shape)


def standard_suite(probes=100, seed=0, include_end_to_end=True):
    """Gradient-check every primitive; returns {op_name: max_rel_error}.

    Runs in float64. ``include_end_to_end`` adds the full objective on a
    16x16 image, which exercises all three networks jointly.
    """
    rng = np.random.default_rng(seed)
    results = {}

    def leaf(data):
        return ag.parameter(np.asarray(data, dtype=np.float64))

    def check(name, builder, inputs):
        results[name] = max_rel_error(builder, inputs, probes=probes, rng=rng)

    a = leaf(rng.normal(size=(2, 3, 4)))
    b = leaf(rng.normal(size=(2, 3, 4)))
    c = leaf(rng.normal(size=(1, 3, 1)))  # broadcast operand
    check("add", lambda: (ag.add(a, c) + b).sum(), [a, b, c])
    check("sub", lambda: ag.sub(a, c).square().sum(), [a, c])
    check("mul", lambda: ag.mul(a, c).sum(), [a, c])

    d = leaf(_away_from_zero(rng, (2, 3, 4), margin=0.5))
    check("div", lambda: ag.div(a, d).sum(), [a, d])

    e = leaf(rng.normal(size=(3, 5)))
    check("exp", lambda: e.exp().sum(), [e])
    pos = leaf(rng.uniform(0.1, 2.0, size=(3, 5)))
    check("log", lambda: pos.log().sum(), [pos])
    check("sqrt", lambda: pos.sqrt().sum(), [pos])
    check("square", lambda: e.square().sum(), [e])
    check("sum_axis", lambda: e.sum(axis=1).square().sum(), [e])
    check("mean_axis", lambda: e.mean(axis=0).square().sum(), [e])
    check("mean_full", lambda: e.square().mean(), [e])

    r = leaf(_away_from_zero(rng, (2, 3, 4)))
    check("relu", lambda: ag.relu(r).sum(), [r])
    check("leaky_relu", lambda: ag.leaky_relu(r, 0.2).square().sum(), [r])
    s = leaf(rng.normal(size=(2, 3, 4)))
    check("sigmoid", lambda: ag.sigmoid(s).square().sum(), [s])

    img = leaf(_distinct(rng, (1, 3, 4, 4)))
    check("channel_max", lambda: ag.channel_max(img).square().sum(), [img])
    check("channel_min", lambda: ag.channel_min(img).square().sum(), [img])

    # the random 1x2x5x5 / 4x2x3x3 convolution case
    cx = leaf(rng.normal(size=(1, 2, 5, 5)))
    cw = leaf(rng.normal(size=(4, 2, 3, 3)))
    cb = leaf(rng.normal(size=(4,)))
    check("conv2d", lambda: ag.conv2d(cx, cw, cb).sum(), [cx, cw, cb])
    check("conv2d_stride2", lambda: ag.conv2d(cx, cw, cb, stride=2, padding=1).square().sum(), [cx, cw, cb])

    bx = leaf(rng.normal(size=(1, 3, 5, 5)))
    bg = leaf(rng.uniform(0.5, 1.5, size=(3,)))
    bb = leaf(rng.normal(size=(3,)))
    # weighting breaks the invariance of sum(xhat^2) to the input
    bw = ag.constant(rng.normal(size=(1, 3, 5, 5)))
    check("batch_norm", lambda: (ag.batch_norm(bx, bg, bb, eps=1e-5) * bw).sum(), [bx, bg, bb])

    px = leaf(_distinct(rng, (1, 2, 4, 4)))
    check("max_pool2", lambda: ag.max_pool2(px).square().sum(), [px])
    ux = leaf(rng.normal(size=(1, 2, 3, 3)))
    check("upsample_nearest2", lambda: ag.upsample_nearest2(ux).square().sum(), [ux])

    # full block: conv -> batch_norm -> leaky_relu -> sigmoid
    hx = leaf(rng.normal(size=(1, 2, 6, 6)))
    hw = leaf(rng.normal(size=(3, 2, 3, 3)))
    hb = leaf(rng.normal(size=(3,)))
    hg = leaf(rng.uniform(0.5, 1.5, size=(3,)))
    hbeta = leaf(rng.normal(size=(3,)))

    def chain():
        y = ag.conv2d(hx, hw, hb)
        y = ag.batch_norm(y, hg, hbeta)
        y = ag.leaky_relu(y, 0.2)
        return ag.sigmoid(y).square().sum()

    check("conv_bn_lrelu_sigmoid", chain, [hx, hw, hb, hg, hbeta])

    if include_end_to_end:
        results["total_objective"] = end_to_end_check(probes=probes, seed=seed + 1)
    return results


def end_to_end_check(probes=100, seed=1, size=16):
    """Gradient-check the full objective through all three networks."""
    from . import losses, nets, physics

    rng = np.random.default_rng(seed)
    old = ag.get_default_dtype()
    ag.set_default_dtype(np.float64)
    try:
        jnet = nets.build_jnet(seed=seed, dtype=np.float64)
        tnet = nets.build_tnet(seed=seed + 1, dtype=np.float64)
        anet = nets.build_anet(seed=seed + 2, dtype=np.float64)
        hazy = rng.uniform(0.1, 0.9, size=(size, size, 3))
        x = ag.constant(np.ascontiguousarray(hazy.transpose(2, 0, 1))[None].astype(np.float64))
        hint = physics.estimate_airlight_hint(hazy)
        eps_noise = rng.standard_normal((1, 128, size // 16, size // 16))
        cfg = losses.LossConfig()

        def objective():
            j = nets.forward_jnet(jnet, x)
            t = nets.forward_tnet(tnet, x)
            a, latent = nets.forward_anet(anet, x, noise=eps_noise)
            recon = physics.compose(j, t, a)
            total, _ = losses.loss_total(recon, x, j, a, latent, hint, cfg)
            return total

        params = [p for net in (jnet, tnet, anet) for p in net.tensors()]
        return max_rel_error(objective, params, probes=probes, rng=rng)
    finally:
        ag.set_default_dtype(old)
