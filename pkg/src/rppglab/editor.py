"""Controllable chrominance-domain pulse editor.

Edits live only in the low-frequency pyramid base, only in chrominance, and
only where the perturbation support map allows: an anatomical prior gated by
an 8x8 consensus grid of correlations between local carrier signals and the
current pulse hypothesis. The analytic edit path is the deterministic
reference; a small learned encoder-decoder generator reproduces it after
training and is modulated by a strength scalar through per-layer
scale/shift parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import pyramid as pyr
from .signals import Waveform, pearson, DegenerateSignalError
from .synth import VideoClip, PULSE_DIRECTION, default_layout

GRID = 8
# Injection depth per unit of a unit-RMS target at strength 1, calibrated so
# one strength unit matches the default embedded pulse as read through the
# support map.
EDIT_GAIN = 0.004

# Unit chrominance direction of the pulse axis (luma removed), signed the way
# systole moves the skin color: a positive target sample deepens the pulse.
_e = pyr.luminance_suppress(PULSE_DIRECTION)
EDIT_DIRECTION = -_e / np.linalg.norm(_e)


class UntrainedEditorError(RuntimeError):
    """A learned generator was used before training."""


@dataclass
class PerturbationSupportMap:
    A: np.ndarray            # anatomical prior at low-base resolution, [0,1]
    W_static: np.ndarray     # 8x8 consensus grid, [0,1]
    psm: np.ndarray          # elementwise product at low-base resolution


@dataclass
class EditState:
    """Per-clip cache: pyramid split plus the support map for one hypothesis."""

    clip: VideoClip
    highs: list
    low: np.ndarray
    psm: np.ndarray
    _pattern_full: np.ndarray = None

    @property
    def pattern_full(self):
        # reconstruction is linear, so the full-resolution footprint of a
        # unit injection is fixed per state and each edit reduces to a
        # waveform-times-pattern update
        if self._pattern_full is None:
            base = self.psm[None, :, :, None] * EDIT_DIRECTION
            self._pattern_full = pyr.upsample_to_full(base)[0]
        return self._pattern_full


def anatomical_prior(clip: VideoClip, layout=None) -> np.ndarray:
    """Full-resolution prior: 1 in forehead/cheeks, 0 in the eye/mouth
    analogue rectangles and off skin, 0.5 elsewhere on skin."""
    lay = layout or default_layout()
    h, w = clip.skin_mask.shape
    strong = np.clip(lay["forehead"].mask(h, w) + lay["cheek_left"].mask(h, w)
                     + lay["cheek_right"].mask(h, w), 0, 1)
    excl = np.clip(lay["eye_left"].mask(h, w) + lay["eye_right"].mask(h, w)
                   + lay["mouth"].mask(h, w), 0, 1)
    a = 0.5 * (clip.skin_mask > 0.5)
    a = np.where(strong > 0, 1.0, a)
    a = np.where(excl > 0, 0.0, a)
    a = np.where(clip.skin_mask > 0.5, a, 0.0)
    return a


def _pool_to(arr, h2, w2):
    h, w = arr.shape
    return arr.reshape(h2, h // h2, w2, w // w2).mean(axis=(1, 3))


def cell_series(low_base) -> np.ndarray:
    """Green-channel carrier series averaged on the consensus grid.

    Returns (grid, grid, T). The grid shrinks for very small frames.
    """
    carrier = pyr.luminance_suppress(low_base)
    green = carrier[..., 1]
    t, h, w = green.shape
    g = min(GRID, h, w)
    cells = green.reshape(t, g, h // g, g, w // g).mean(axis=(2, 4))
    return np.transpose(cells, (1, 2, 0))


def compute_psm(clip: VideoClip, s0: Waveform, layout=None,
                k_pyr=pyr.K_PYR, low_base=None) -> PerturbationSupportMap:
    """Support map = anatomical prior x consensus grid of |corr(cell, s0)|."""
    if len(s0) != clip.frames.shape[0]:
        raise ValueError(f"hypothesis length {len(s0)} != clip length {clip.frames.shape[0]}")
    if low_base is None:
        low_base = pyr.laplacian_decompose(clip.frames, k_pyr).low_base
    cells = cell_series(low_base)
    g = cells.shape[0]
    w_static = np.zeros((g, g))
    for i in range(g):
        for j in range(g):
            try:
                r = pearson(Waveform(cells[i, j], clip.fps), s0)
            except DegenerateSignalError:
                r = 0.0
            w_static[i, j] = min(abs(r), 1.0)
    h2, w2 = low_base.shape[1:3]
    a_low = _pool_to(anatomical_prior(clip, layout), h2, w2)
    w_up = np.repeat(np.repeat(w_static, h2 // g, axis=0), w2 // g, axis=1)
    return PerturbationSupportMap(a_low, w_static, a_low * w_up)


def prepare_edit_state(clip: VideoClip, s0: Waveform, layout=None,
                       k_pyr=pyr.K_PYR) -> EditState:
    pd = pyr.laplacian_decompose(clip.frames, k_pyr)
    psm = compute_psm(clip, s0, layout, k_pyr).psm
    return EditState(clip, pd.high_layers, pd.low_base, psm)


def analytic_delta(state: EditState, s_target: Waveform, strength: float):
    pattern = state.psm[None, :, :, None] * EDIT_DIRECTION
    return strength * EDIT_GAIN * s_target.samples[:, None, None, None] * pattern


def apply_edit(state: EditState, s_target: Waveform, strength: float) -> VideoClip:
    """Inject the target along the pulse chrominance axis, gated by the
    support map. Equivalent to adding the perturbation to the low base and
    reconstructing; pixels are clamped only at the end."""
    t = state.clip.frames.shape[0]
    if len(s_target) != t:
        raise ValueError(f"target length {len(s_target)} != clip length {t}")
    scale = strength * EDIT_GAIN
    frames = state.clip.frames + (scale * s_target.samples)[:, None, None, None] \
        * state.pattern_full[None]
    return VideoClip(np.clip(frames, 0.0, 1.0), state.clip.fps,
                     state.clip.skin_mask.copy())


def analytic_edit(clip: VideoClip, s_target: Waveform, strength: float,
                  s0: Waveform = None, layout=None) -> VideoClip:
    """One-shot edit; the support map is computed from s0 (defaults to the
    target itself)."""
    state = prepare_edit_state(clip, s0 if s0 is not None else s_target, layout)
    return apply_edit(state, s_target, strength)


# ---------------------------------------------------------------------------
# fidelity metrics

PSNR_SENTINEL = 99.0


def psnr(a: VideoClip, b: VideoClip) -> float:
    """Peak signal-to-noise ratio over all frames, peak 1.0, capped at the
    identity sentinel."""
    if a.frames.shape != b.frames.shape:
        raise ValueError(f"shape mismatch {a.frames.shape} vs {b.frames.shape}")
    mse = float(np.mean((a.frames - b.frames) ** 2))
    if mse <= 10.0 ** (-PSNR_SENTINEL / 10.0):
        return PSNR_SENTINEL
    return min(-10.0 * np.log10(mse), PSNR_SENTINEL)


def _gauss_kernel(size=11, sigma=1.5):
    x = np.arange(size) - size // 2
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def ssim(a: VideoClip, b: VideoClip) -> float:
    """Mean structural similarity, 11x11 Gaussian window, standard constants,
    averaged over frames and channels (valid region only)."""
    if a.frames.shape != b.frames.shape:
        raise ValueError(f"shape mismatch {a.frames.shape} vs {b.frames.shape}")
    k = _gauss_kernel()
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    kl = len(k)

    def win_mean(x):
        # separable valid-mode filtering over H then W via shifted sums
        h, w = x.shape[1], x.shape[2]
        y = np.zeros((x.shape[0], h - kl + 1, w))
        for j in range(kl):
            y += k[j] * x[:, j:j + h - kl + 1, :]
        z = np.zeros((x.shape[0], h - kl + 1, w - kl + 1))
        for j in range(kl):
            z += k[j] * y[:, :, j:j + w - kl + 1]
        return z

    x = np.transpose(a.frames, (0, 3, 1, 2)).reshape(-1, *a.frames.shape[1:3])
    y = np.transpose(b.frames, (0, 3, 1, 2)).reshape(-1, *b.frames.shape[1:3])
    mx, my = win_mean(x), win_mean(y)
    mxy = win_mean(x * y)
    mxx, myy = win_mean(x * x), win_mean(y * y)
    vx = mxx - mx * mx
    vy = myy - my * my
    cxy = mxy - mx * my
    num = (2 * mx * my + c1) * (2 * cxy + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# learned residual generator

@dataclass
class GeneratorConfig:
    in_channels: int = 4          # carrier (3) + broadcast target (1)
    enc_channels: tuple = (16, 32)
    mod_hidden: int = 16


@dataclass
class EditorGenerator:
    """Small encoder-decoder with skip connections; a two-layer perceptron
    maps the strength scalar to per-decoder-layer (scale, shift) pairs."""

    params: dict
    cfg: GeneratorConfig = field(default_factory=GeneratorConfig)
    trained: bool = False


def init_generator(seed=0, cfg: GeneratorConfig = None) -> EditorGenerator:
    cfg = cfg or GeneratorConfig()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 77]))
    c1, c2 = cfg.enc_channels
    params = {}

    def uni(name, shape, fan_in):
        lim = 1.0 / np.sqrt(fan_in)
        params[name] = ad.DiffValue(rng.uniform(-lim, lim, size=shape),
                                    requires_grad=True)

    uni("enc1_w", (3, 3, cfg.in_channels, c1), 9 * cfg.in_channels)
    params["enc1_b"] = ad.DiffValue(np.zeros(c1), requires_grad=True)
    uni("enc2_w", (3, 3, c1, c2), 9 * c1)
    params["enc2_b"] = ad.DiffValue(np.zeros(c2), requires_grad=True)
    uni("dec2_w", (3, 3, c2, c2), 9 * c2)
    params["dec2_b"] = ad.DiffValue(np.zeros(c2), requires_grad=True)
    uni("dec1_w", (3, 3, c2 + c1, c1), 9 * (c2 + c1))
    params["dec1_b"] = ad.DiffValue(np.zeros(c1), requires_grad=True)
    # zero-init output layer: an untrained generator perturbs nothing
    params["out_w"] = ad.DiffValue(np.zeros((1, 1, c1, 3)), requires_grad=True)
    params["out_b"] = ad.DiffValue(np.zeros(3), requires_grad=True)
    uni("mod1_w", (1, cfg.mod_hidden), 1)
    params["mod1_b"] = ad.DiffValue(np.zeros(cfg.mod_hidden), requires_grad=True)
    uni("mod2_w", (cfg.mod_hidden, 2 * (c2 + c1)), cfg.mod_hidden)
    params["mod2_b"] = ad.DiffValue(np.zeros(2 * (c2 + c1)), requires_grad=True)
    return EditorGenerator(params, cfg)


def _film(feat, scale_row, shift_row, t, h, w, c):
    s = ad.reshape(scale_row, (1, 1, 1, c))
    b = ad.reshape(shift_row, (1, 1, 1, c))
    return ad.add(ad.multiply(feat, ad.add(s, np.ones((1, 1, 1, c)))), b)


def generator_delta_graph(gen: EditorGenerator, carrier, s_target, psm, alpha):
    """Low-base chrominance perturbation as a DiffValue (T, h, w, 3).

    carrier may be a constant array or a DiffValue (chained edits); the
    strength scalar modulates decoder features through the perceptron.
    """
    p = gen.params
    c1, c2 = gen.cfg.enc_channels
    t, h, w, _ = carrier.shape
    target_ch = np.broadcast_to(
        np.asarray(s_target.samples)[:, None, None, None], (t, h, w, 1)).copy()
    if isinstance(carrier, ad.DiffValue):
        x = ad.concat([carrier, ad.DiffValue(target_ch)], axis=3)
    else:
        x = ad.DiffValue(np.concatenate([carrier, target_ch], axis=3))

    mod_in = ad.DiffValue(np.array([[float(alpha)]]))
    hid = ad.silu(ad.add(ad.matmul(mod_in, p["mod1_w"]), p["mod1_b"]))
    mods = ad.add(ad.matmul(hid, p["mod2_w"]), p["mod2_b"])

    e1 = ad.silu(ad.conv2d(x, p["enc1_w"], p["enc1_b"]))
    e1d = ad.mean(ad.reshape(e1, (t, h // 2, 2, w // 2, 2, c1)), axis=(2, 4))
    e2 = ad.silu(ad.conv2d(e1d, p["enc2_w"], p["enc2_b"]))

    d2 = ad.silu(ad.conv2d(e2, p["dec2_w"], p["dec2_b"]))
    d2 = _film(d2, mods[:, :c2], mods[:, c2:2 * c2], t, h // 2, w // 2, c2)
    d2u = ad.repeat2(d2)
    cat = ad.concat([d2u, e1], axis=3)
    d1 = ad.silu(ad.conv2d(cat, p["dec1_w"], p["dec1_b"]))
    d1 = _film(d1, mods[:, 2 * c2:2 * c2 + c1], mods[:, 2 * c2 + c1:], t, h, w, c1)
    out = ad.conv2d(d1, p["out_w"], p["out_b"])
    out = pyr.luminance_suppress_graph(out)
    gated = ad.multiply(out, psm[None, :, :, None])
    return ad.scale(gated, EDIT_GAIN)


def learned_delta_graph(gen: EditorGenerator, low, s_target, psm, alpha):
    """Generator perturbation for a low base given as array or DiffValue."""
    if isinstance(low, ad.DiffValue):
        carrier = pyr.luminance_suppress_graph(low)
    else:
        carrier = pyr.luminance_suppress(low)
    return generator_delta_graph(gen, carrier, s_target, psm, alpha)


def learned_edit_graph(gen: EditorGenerator, state: EditState,
                       s_target: Waveform, alpha: float):
    """Differentiable edited frames (T, H, W, 3) for generator training."""
    delta = learned_delta_graph(gen, state.low, s_target, state.psm, alpha)
    low2 = ad.add(ad.DiffValue(state.low), delta)
    return pyr.reconstruct_graph(low2, state.highs)


def learned_edit(clip_or_state, s_target: Waveform, alpha: float,
                 gen: EditorGenerator, s0: Waveform = None) -> VideoClip:
    """Inference-mode learned edit; rejects untrained generators."""
    if not gen.trained:
        raise UntrainedEditorError("generator has not been trained")
    if isinstance(clip_or_state, EditState):
        state = clip_or_state
    else:
        state = prepare_edit_state(clip_or_state,
                                   s0 if s0 is not None else s_target)
    frames = learned_edit_graph(gen, state, s_target, alpha).data
    return VideoClip(np.clip(frames, 0.0, 1.0), state.clip.fps,
                     state.clip.skin_mask.copy())


class AnalyticEditor:
    """Editor protocol wrapper for the deterministic reference path."""

    trainable = False

    def prepare(self, clip, s0, layout=None):
        return prepare_edit_state(clip, s0, layout)

    def edit(self, state, s_target, strength):
        return apply_edit(state, s_target, strength)

    def parameter_bytes(self):
        return b""


class LearnedEditor:
    """Editor protocol wrapper around a trained generator."""

    trainable = True

    def __init__(self, gen: EditorGenerator):
        self.gen = gen

    def prepare(self, clip, s0, layout=None):
        return prepare_edit_state(clip, s0, layout)

    def edit(self, state, s_target, strength):
        return learned_edit(state, s_target, strength, self.gen)

    def parameter_bytes(self):
        return b"".join(v.data.tobytes() for _, v in sorted(self.gen.params.items()))
