"""Gradient-check cases covering every registered autodiff op.

Each case returns (name, f, x) where f maps one DiffValue leaf to a scalar
and x is the point to probe. Shared between the unit tests and the
acceptance suite.
"""

import numpy as np

from rppglab import autodiff as ad


def _rng(i):
    return np.random.default_rng(1000 + i)


def op_cases():
    cases = []

    def case(name, f, x):
        cases.append((name, f, x))

    r = _rng(0)
    a6 = r.normal(size=6)
    b6 = ad.DiffValue(r.normal(size=6))
    m34 = r.normal(size=(3, 4))
    w43 = ad.DiffValue(r.normal(size=(4, 3)))

    case("add", lambda x: ad.sum(ad.add(x, b6)), a6)
    case("subtract", lambda x: ad.sum(ad.subtract(b6, x)), a6)
    case("multiply", lambda x: ad.sum(ad.multiply(x, b6)), a6)
    case("divide", lambda x: ad.sum(ad.divide(b6, x)), a6 + 3.0)
    case("scale", lambda x: ad.sum(ad.scale(x, -2.5)), a6)
    case("square", lambda x: ad.sum(ad.square(x)), a6)
    case("sqrt", lambda x: ad.sum(ad.sqrt(x)), np.abs(a6) + 0.5)
    case("exp", lambda x: ad.sum(ad.exp(x)), a6)
    case("log", lambda x: ad.sum(ad.log(x)), np.abs(a6) + 0.5)
    case("absolute", lambda x: ad.sum(ad.absolute(x)), a6 + 0.3)
    case("sigmoid", lambda x: ad.sum(ad.sigmoid(x)), a6)
    case("silu", lambda x: ad.sum(ad.silu(x)), a6)
    case("softplus", lambda x: ad.sum(ad.softplus(x)), a6)
    case("mean", lambda x: ad.mean(ad.square(x)), m34)
    case("mean_axis", lambda x: ad.sum(ad.square(ad.mean(x, axis=0))), m34)
    case("sum", lambda x: ad.sum(ad.square(ad.sum(x, axis=1, keepdims=True))), m34)
    case("reshape", lambda x: ad.sum(ad.square(ad.reshape(x, (4, 3)))), m34)
    case("transpose", lambda x: ad.sum(ad.square(ad.transpose(x, (1, 0)))), m34)
    case("getitem", lambda x: ad.sum(ad.square(x[1:, ::2])), m34)
    case("concat", lambda x: ad.sum(ad.square(ad.concat([x, ad.scale(x, 2.0)], axis=1))), m34)
    case("broadcast_to", lambda x: ad.sum(ad.square(ad.broadcast_to(x, (5, 6)))), a6)
    case("matmul", lambda x: ad.sum(ad.square(ad.matmul(x, w43))), m34)

    taps = np.array([0.2, -0.5, 0.8, -0.5, 0.2])
    sig = _rng(1).normal(size=16)
    case("conv1d_same", lambda x: ad.sum(ad.square(ad.conv1d_same(x, taps))), sig)

    tc = _rng(2).normal(size=(10, 3))
    ker = ad.DiffValue(_rng(3).normal(size=(5, 3)))
    case("depthwise_conv1d_x",
         lambda x: ad.sum(ad.square(ad.depthwise_conv1d(x, ker))), tc)
    case("depthwise_conv1d_k",
         lambda k: ad.sum(ad.square(ad.depthwise_conv1d(ad.DiffValue(tc), k))),
         _rng(4).normal(size=(5, 3)))

    img = _rng(5).normal(size=(2, 4, 4, 2))
    w2 = ad.DiffValue(_rng(6).normal(size=(3, 3, 2, 2)))
    b2 = ad.DiffValue(_rng(7).normal(size=2))
    case("conv2d_x", lambda x: ad.sum(ad.square(ad.conv2d(x, w2, b2))), img)
    case("conv2d_w",
         lambda w: ad.sum(ad.square(ad.conv2d(ad.DiffValue(img), w, b2))),
         _rng(8).normal(size=(3, 3, 2, 2)))
    case("conv2d_b",
         lambda b: ad.sum(ad.square(ad.conv2d(ad.DiffValue(img), w2, b))),
         _rng(9).normal(size=2))

    vol = _rng(10).normal(size=(3, 4, 4, 2))
    w3 = ad.DiffValue(_rng(11).normal(size=(3, 3, 3, 2, 2)) * 0.3)
    case("conv3d_x", lambda x: ad.sum(ad.square(ad.conv3d(x, w3))), vol)
    case("conv3d_w",
         lambda w: ad.sum(ad.square(ad.conv3d(ad.DiffValue(vol), w))),
         _rng(12).normal(size=(3, 3, 3, 2, 2)) * 0.3)

    case("blur2", lambda x: ad.sum(ad.square(ad.blur2(x))), img)
    case("down2", lambda x: ad.sum(ad.square(ad.down2(x))), img)
    case("up2zero", lambda x: ad.sum(ad.square(ad.up2zero(x))), img)
    case("repeat2", lambda x: ad.sum(ad.square(ad.repeat2(x))), img)

    dec = _rng(13).uniform(0.1, 0.9, size=(8, 4))
    drv = ad.DiffValue(_rng(14).normal(size=(8, 4)))
    case("scan_decay", lambda d: ad.sum(ad.square(ad.scan(d, drv))), dec)
    case("scan_drive",
         lambda u: ad.sum(ad.square(ad.scan(ad.DiffValue(dec), u))),
         _rng(15).normal(size=(8, 4)))

    case("softmax", lambda x: ad.sum(ad.square(ad.softmax(x, axis=1))), m34)
    return cases
