"""Pulse extractors.

Classical baselines (GREEN, CHROM, POS) operate on the masked spatial-mean
RGB series. The trainable extractor is a compact temporal regression
network: per-pixel detrend/variance normalization, a small spatio-temporal
conv stem, a first-order temporal-difference prior, four gated state-space
blocks with input-dependent discretization, one multi-head attention layer
over time, and a linear head emitting one sample per frame.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .signals import Waveform, bandpass
from .synth import VideoClip

# assert discretized decay factors stay in (0, 1) on every forward pass
DEBUG_CHECKS = False


class WeightsFormatError(ValueError):
    """The weights container on disk is not readable."""


@dataclass
class ExtractorConfig:
    token_dim: int = 32
    num_blocks: int = 4
    state_dim: int = 8
    conv_kernel: int = 5
    attention_heads: int = 2
    dropout_rate: float = 0.1
    input_pool: int = 4          # spatial mean-pool factor applied before the stem
    stem_channels: tuple = (8, 16)

    def __post_init__(self):
        if self.conv_kernel % 2 == 0:
            raise ValueError("conv_kernel must be odd")
        if self.token_dim % self.attention_heads:
            raise ValueError("token_dim must divide evenly across attention heads")


# ---------------------------------------------------------------------------
# classical extractors

def mean_rgb_series(clip: VideoClip, mask=None) -> np.ndarray:
    """Spatial mean RGB over the mask per frame; shape (T, 3)."""
    m = clip.skin_mask if mask is None else np.asarray(mask, dtype=np.float64)
    total = m.sum()
    if total <= 0:
        raise ValueError("empty mask")
    return np.tensordot(clip.frames, m, axes=([1, 2], [0, 1])) / total


def _green(rgb):
    # negated so systole (green absorption) reads as a waveform peak
    g = -rgb[:, 1]
    return g - g.mean()


def _chrom(rgb):
    norm = rgb / rgb.mean(axis=0, keepdims=True)
    xs = 3.0 * norm[:, 0] - 2.0 * norm[:, 1]
    ys = 1.5 * norm[:, 0] + norm[:, 1] - 1.5 * norm[:, 2]
    alpha = xs.std() / (ys.std() + 1e-9)
    s = xs - alpha * ys
    return s - s.mean()


def _pos(rgb, fps):
    t = rgb.shape[0]
    win = min(int(1.6 * fps), t - 1)
    out = np.zeros(t)
    for end in range(win, t):
        start = end - win + 1
        c = rgb[start:end + 1].T
        cn = c / (c.mean(axis=1, keepdims=True) + 1e-9)
        s1 = cn[1] - cn[2]
        s2 = cn[1] + cn[2] - 2.0 * cn[0]
        h = s1 + (s1.std() / (s2.std() + 1e-9)) * s2
        out[start:end + 1] += h - h.mean()
    # blood-volume orientation: systole as a peak
    return -out


def classical_extract(clip: VideoClip, mask=None, method="pos") -> Waveform:
    """GREEN / CHROM / POS on the masked mean series, band-passed to the pulse band."""
    rgb = mean_rgb_series(clip, mask)
    if method == "green":
        raw = _green(rgb)
    elif method == "chrom":
        raw = _chrom(rgb)
    elif method == "pos":
        raw = _pos(rgb, clip.fps)
    else:
        raise ValueError(f"unknown classical method {method!r}")
    return bandpass(Waveform(raw, clip.fps))


# ---------------------------------------------------------------------------
# temporal normalization

def temporal_normalize(voxels: np.ndarray) -> np.ndarray:
    """Per-pixel detrend and variance normalization along the time axis.

    voxels: (T, ...) array. Constant pixels map to zeros.
    """
    x = np.asarray(voxels, dtype=np.float64)
    t = x.shape[0]
    flat = x.reshape(t, -1)
    tc = np.arange(t) - (t - 1) / 2.0
    stt = np.dot(tc, tc)
    xc = flat - flat.mean(axis=0, keepdims=True)
    beta = (tc @ xc) / stt
    xd = xc - tc[:, None] * beta[None, :]
    std = np.sqrt((xd * xd).mean(axis=0, keepdims=True))
    return (xd / (std + 1e-6)).reshape(x.shape)


def _normalize_graph(x, t):
    """Engine-side temporal_normalize on a flat (T, P) DiffValue."""
    tc = (np.arange(t) - (t - 1) / 2.0)[:, None]
    stt = float((tc * tc).sum())
    xm = ad.mean(x, axis=0, keepdims=True)
    xc = ad.subtract(x, xm)
    beta = ad.scale(ad.sum(ad.multiply(ad.DiffValue(tc), xc), axis=0, keepdims=True),
                    1.0 / stt)
    xd = ad.subtract(xc, ad.multiply(ad.DiffValue(tc), beta))
    var = ad.mean(ad.square(xd), axis=0, keepdims=True)
    std = ad.sqrt(ad.add(var, np.full((1, x.shape[1]), 1e-24)))
    return ad.divide(xd, ad.add(std, np.full((1, x.shape[1]), 1e-6)))


# ---------------------------------------------------------------------------
# parameters

def init_params(cfg: ExtractorConfig, seed=0):
    """Fresh parameter set. The head starts near zero so the initial
    hypothesis is noise; projections use small uniform ranges."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 101]))
    d, n = cfg.token_dim, cfg.state_dim
    c1, c2 = cfg.stem_channels
    params = {}

    def uni(name, shape, fan_in):
        lim = 1.0 / np.sqrt(fan_in)
        params[name] = ad.DiffValue(rng.uniform(-lim, lim, size=shape),
                                    requires_grad=True)

    uni("stem1_w", (3, 3, 3, 3, c1), 27 * 3)
    params["stem1_b"] = ad.DiffValue(np.zeros(c1), requires_grad=True)
    uni("stem2_w", (3, 3, 3, c1, c2), 27 * c1)
    params["stem2_b"] = ad.DiffValue(np.zeros(c2), requires_grad=True)
    uni("proj_w", (16 * c2, d), 16 * c2)
    params["proj_b"] = ad.DiffValue(np.zeros(d), requires_grad=True)

    for i in range(cfg.num_blocks):
        p = f"block{i}_"
        uni(p + "in_w", (d, 2 * d), d)
        params[p + "in_b"] = ad.DiffValue(np.zeros(2 * d), requires_grad=True)
        uni(p + "conv", (cfg.conv_kernel, d), cfg.conv_kernel)
        uni(p + "dt_w", (d, d), d)
        dt0 = rng.uniform(0.01, 0.1, size=d)
        params[p + "dt_b"] = ad.DiffValue(np.log(np.expm1(dt0)), requires_grad=True)
        uni(p + "B_w", (d, n), d)
        uni(p + "C_w", (d, n), d)
        alog = np.tile(np.log(np.arange(1, n + 1, dtype=np.float64)), (d, 1))
        params[p + "Alog"] = ad.DiffValue(alog, requires_grad=True)
        params[p + "D"] = ad.DiffValue(np.ones(d), requires_grad=True)
        uni(p + "out_w", (d, d), d)
        params[p + "out_b"] = ad.DiffValue(np.zeros(d), requires_grad=True)

    uni("attn_q_w", (d, d), d)
    uni("attn_k_w", (d, d), d)
    uni("attn_v_w", (d, d), d)
    uni("attn_o_w", (d, d), d)
    params["attn_o_b"] = ad.DiffValue(np.zeros(d), requires_grad=True)
    params["head_w"] = ad.DiffValue(rng.normal(0.0, 1e-2, size=(d, 1)),
                                    requires_grad=True)
    params["head_b"] = ad.DiffValue(np.zeros(1), requires_grad=True)
    return params


def zero_grads(params):
    for v in params.values():
        v.grad = None


# ---------------------------------------------------------------------------
# forward pieces

def _pool_spatial(x, factor):
    t, h, w, c = x.shape
    r = ad.reshape(x, (t, h // factor, factor, w // factor, factor, c))
    return ad.mean(ad.mean(r, axis=4), axis=2)


def tokenize(params, cfg: ExtractorConfig, x, train_rng=None):
    """Conv stem + per-frame flatten + linear projection (with dropout)."""
    t = x.shape[0]
    z = ad.silu(ad.conv3d(x, params["stem1_w"], params["stem1_b"]))
    z = _pool_spatial(z, 2)
    z = ad.silu(ad.conv3d(z, params["stem2_w"], params["stem2_b"]))
    z = _pool_spatial(z, 2)
    z = ad.reshape(z, (t, z.shape[1] * z.shape[2] * z.shape[3]))
    z = ad.add(ad.matmul(z, params["proj_w"]), params["proj_b"])
    if train_rng is not None and cfg.dropout_rate > 0:
        keep = 1.0 - cfg.dropout_rate
        mask = (train_rng.random(z.shape) < keep) / keep
        z = ad.multiply(z, mask)
    return z


def temporal_difference(z):
    """z_t <- 2 z_t - z_{t-1}, first frame unchanged."""
    shifted = ad.concat([z[0:1], z[:-1]], axis=0)
    return ad.subtract(ad.scale(z, 2.0), shifted)


def gtss_forward(params, prefix, cfg: ExtractorConfig, z):
    """Gated temporal state-space block with residual connection."""
    d, n = cfg.token_dim, cfg.state_dim
    t = z.shape[0]
    zi = ad.add(ad.matmul(z, params[prefix + "in_w"]), params[prefix + "in_b"])
    x_core = zi[:, :d]
    gate = zi[:, d:]
    x_core = ad.silu(ad.depthwise_conv1d(x_core, params[prefix + "conv"]))
    dt = ad.softplus(ad.add(ad.matmul(x_core, params[prefix + "dt_w"]),
                            params[prefix + "dt_b"]))
    a_neg = ad.scale(ad.exp(params[prefix + "Alog"]), -1.0)
    dt3 = ad.reshape(dt, (t, d, 1))
    decay = ad.exp(ad.multiply(dt3, ad.reshape(a_neg, (1, d, n))))
    if DEBUG_CHECKS:
        assert decay.data.min() > 0.0 and decay.data.max() < 1.0, \
            "state decay left (0, 1)"
    b_in = ad.reshape(ad.matmul(x_core, params[prefix + "B_w"]), (t, 1, n))
    x3 = ad.reshape(x_core, (t, d, 1))
    drive = ad.multiply(ad.multiply(dt3, b_in), x3)
    h = ad.scan(ad.reshape(decay, (t, d * n)), ad.reshape(drive, (t, d * n)))
    h = ad.reshape(h, (t, d, n))
    c_out = ad.reshape(ad.matmul(x_core, params[prefix + "C_w"]), (t, 1, n))
    y = ad.sum(ad.multiply(h, c_out), axis=2)
    y = ad.add(y, ad.multiply(ad.reshape(params[prefix + "D"], (1, d)), x_core))
    y = ad.multiply(y, ad.silu(gate))
    out = ad.add(ad.matmul(y, params[prefix + "out_w"]), params[prefix + "out_b"])
    return ad.add(z, out)


def global_attention(params, cfg: ExtractorConfig, z):
    """Single multi-head self-attention over time, residual added."""
    d = cfg.token_dim
    heads = cfg.attention_heads
    dh = d // heads
    q = ad.matmul(z, params["attn_q_w"])
    k = ad.matmul(z, params["attn_k_w"])
    v = ad.matmul(z, params["attn_v_w"])
    ctx = []
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        scores = ad.scale(ad.matmul(q[:, sl], ad.transpose(k[:, sl], (1, 0))),
                          1.0 / np.sqrt(dh))
        att = ad.softmax(scores, axis=1)
        ctx.append(ad.matmul(att, v[:, sl]))
    out = ad.add(ad.matmul(ad.concat(ctx, axis=1), params["attn_o_w"]),
                 params["attn_o_b"])
    return ad.add(z, out)


def attention_weights(params, cfg: ExtractorConfig, z_data):
    """Per-head softmax attention matrices for inspection; no gradients."""
    z = ad.DiffValue(np.asarray(z_data))
    d = cfg.token_dim
    heads = cfg.attention_heads
    dh = d // heads
    q = ad.matmul(z, params["attn_q_w"]).data
    k = ad.matmul(z, params["attn_k_w"]).data
    mats = []
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        scores = q[:, sl] @ k[:, sl].T / np.sqrt(dh)
        e = np.exp(scores - scores.max(axis=1, keepdims=True))
        mats.append(e / e.sum(axis=1, keepdims=True))
    return mats


def net_forward(params, cfg: ExtractorConfig, frames, train_rng=None):
    """Raw per-frame regression output as a DiffValue of shape (T,).

    frames: numpy (T, H, W, 3) treated as constant input, or a DiffValue with
    the same layout when gradients must flow into the pixels.
    """
    if isinstance(frames, ad.DiffValue):
        x = frames
        t = x.shape[0]
        x = _pool_spatial(x, cfg.input_pool)
        hw = x.shape[1] * x.shape[2] * 3
        flat = _normalize_graph(ad.reshape(x, (t, hw)), t)
        x = ad.reshape(flat, (t, x.shape[1], x.shape[2], 3))
    else:
        arr = np.asarray(frames, dtype=np.float64)
        t, h, w, _ = arr.shape
        p = cfg.input_pool
        pooled = arr.reshape(t, h // p, p, w // p, p, 3).mean(axis=(2, 4))
        x = ad.DiffValue(temporal_normalize(pooled))
    z = tokenize(params, cfg, x, train_rng)
    z = temporal_difference(z)
    for i in range(cfg.num_blocks):
        z = gtss_forward(params, f"block{i}_", cfg, z)
    z = global_attention(params, cfg, z)
    out = ad.add(ad.matmul(z, params["head_w"]), params["head_b"])
    return ad.reshape(out, (t,))


def extract_waveform(params, cfg: ExtractorConfig, clip: VideoClip,
                     region_mask=None) -> Waveform:
    """Inference path: optional region masking, forward pass, band-pass."""
    frames = clip.frames
    if region_mask is not None:
        m = np.asarray(region_mask, dtype=np.float64)
        if m.sum() <= 0:
            raise ValueError("empty region mask")
        frames = frames * m[None, :, :, None]
    raw = net_forward(params, cfg, frames).data
    return bandpass(Waveform(raw, clip.fps))


def masked_extract(clip: VideoClip, region_mask, params, cfg: ExtractorConfig) -> Waveform:
    return extract_waveform(params, cfg, clip, region_mask=region_mask)


# ---------------------------------------------------------------------------
# weights container (magic "RPWT", little endian)

_WMAGIC = b"RPWT"
_WVERSION = 1


def write_named_arrays(path, arrays):
    """Versioned binary container of named float64 arrays."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", _WMAGIC, _WVERSION, len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype=np.float64)
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(arr.astype("<f8").tobytes())


def read_named_arrays(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12:
        raise WeightsFormatError(f"{path}: malformed weights header")
    magic, version, count = struct.unpack_from("<4sII", blob)
    if magic != _WMAGIC:
        raise WeightsFormatError(f"{path}: not a weights container")
    if version != _WVERSION:
        raise WeightsFormatError(f"{path}: unsupported weights version {version}")
    off = 12
    arrays = {}
    for _ in range(count):
        try:
            (nlen,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off:off + nlen].decode()
            off += nlen
            (ndim,) = struct.unpack_from("<B", blob, off)
            off += 1
            shape = []
            for _ in range(ndim):
                (dim,) = struct.unpack_from("<I", blob, off)
                off += 4
                shape.append(dim)
            n = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off)
            if arr.size != n:
                raise WeightsFormatError(f"{path}: truncated weights payload")
            off += 8 * n
            arrays[name] = arr.reshape(shape).astype(np.float64)
        except struct.error as exc:
            raise WeightsFormatError(f"{path}: truncated weights payload") from exc
    return arrays


def save_weights(path, params, cfg: ExtractorConfig):
    arrays = {
        "__cfg_token_dim": [cfg.token_dim],
        "__cfg_num_blocks": [cfg.num_blocks],
        "__cfg_state_dim": [cfg.state_dim],
        "__cfg_conv_kernel": [cfg.conv_kernel],
        "__cfg_attention_heads": [cfg.attention_heads],
        "__cfg_dropout_rate": [cfg.dropout_rate],
        "__cfg_input_pool": [cfg.input_pool],
        "__cfg_stem_channels": list(cfg.stem_channels),
    }
    arrays.update({k: v.data for k, v in params.items()})
    write_named_arrays(path, arrays)


def load_weights(path):
    arrays = read_named_arrays(path)
    try:
        cfg = ExtractorConfig(
            token_dim=int(arrays.pop("__cfg_token_dim")[0]),
            num_blocks=int(arrays.pop("__cfg_num_blocks")[0]),
            state_dim=int(arrays.pop("__cfg_state_dim")[0]),
            conv_kernel=int(arrays.pop("__cfg_conv_kernel")[0]),
            attention_heads=int(arrays.pop("__cfg_attention_heads")[0]),
            dropout_rate=float(arrays.pop("__cfg_dropout_rate")[0]),
            input_pool=int(arrays.pop("__cfg_input_pool")[0]),
            stem_channels=tuple(int(v) for v in arrays.pop("__cfg_stem_channels")),
        )
    except KeyError as exc:
        raise WeightsFormatError(f"{path}: missing extractor config entry {exc}")
    params = {k: ad.DiffValue(v, requires_grad=True) for k, v in arrays.items()}
    return params, cfg
