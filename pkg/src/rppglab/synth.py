"""Synthetic skin-patch video bench.

Generates small face-patch clips with a known embedded pulse: a seeded
value-noise texture, a chrominance pulse concentrated in forehead/cheek
regions, optional periodic illumination flicker or rhythmic motion
nuisances, and a lossless binary container for interchange. The declared
rectangle layout stands in for face-landmark detection.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .signals import Waveform

# Pulse chrominance axis: systole absorbs green, so the skin moves against
# this direction while the pulse is high.
PULSE_DIRECTION = np.array([-0.3, 1.0, -0.2])
PULSE_DIRECTION = PULSE_DIRECTION / np.linalg.norm(PULSE_DIRECTION)

SKIN_TONE = np.array([0.62, 0.48, 0.42])
BACKGROUND_TONE = np.array([0.38, 0.40, 0.45])
TEXTURE_CONTRAST = 0.15
SOFT_SKIN_WEIGHT = 0.35   # pulse strength on skin outside forehead/cheeks


class ClipFormatError(ValueError):
    """The clip container on disk is not readable."""


@dataclass(frozen=True)
class Rect:
    """Half-open pixel rectangle [r0, r1) x [c0, c1)."""

    r0: int
    r1: int
    c0: int
    c1: int

    def mask(self, h, w):
        m = np.zeros((h, w))
        m[self.r0:self.r1, self.c0:self.c1] = 1.0
        return m

    def area(self):
        return (self.r1 - self.r0) * (self.c1 - self.c0)


def default_layout():
    return {
        "skin": Rect(2, 50, 10, 54),
        "forehead": Rect(4, 14, 18, 46),
        "cheek_left": Rect(30, 44, 13, 25),
        "cheek_right": Rect(30, 44, 39, 51),
        "eye_left": Rect(18, 26, 14, 29),
        "eye_right": Rect(18, 26, 35, 50),
        "mouth": Rect(44, 50, 24, 40),
        "background": Rect(54, 64, 2, 62),
    }


@dataclass
class SynthConfig:
    hr_bpm: float = 72.0
    pulse_amplitude: float = 0.004
    base_texture_seed: int = 0
    sensor_noise_sigma: float = 0.003
    T: int = 300
    H: int = 64
    W: int = 64
    fps: float = 30.0
    cycle_jitter: float = 0.02
    harmonic_amplitude: float = 0.3
    region_layout: dict = field(default_factory=default_layout)

    def __post_init__(self):
        if not 40.0 <= self.hr_bpm <= 240.0:
            raise ValueError(f"hr_bpm {self.hr_bpm} outside [40, 240]")


@dataclass(frozen=True)
class NuisanceSpec:
    kind: str                 # "illumination_flicker" | "rhythmic_motion"
    freq_bpm: float
    amplitude: float
    phase: float = 0.0

    def __post_init__(self):
        if self.kind not in ("illumination_flicker", "rhythmic_motion"):
            raise ValueError(f"unknown nuisance kind {self.kind!r}")


@dataclass
class VideoClip:
    """T x H x W x 3 frames in [0, 1] plus frame rate and skin mask."""

    frames: np.ndarray
    fps: float
    skin_mask: np.ndarray

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        self.skin_mask = np.asarray(self.skin_mask, dtype=np.float64)
        t, h, w, c = self.frames.shape
        if c != 3:
            raise ValueError(f"frames must be T,H,W,3; got {self.frames.shape}")
        if t < 64:
            raise ValueError(f"clips need at least 64 frames, got {t}")
        if h % 8 or w % 8:
            raise ValueError(f"H and W must be multiples of 8, got {h}x{w}")
        if self.skin_mask.shape != (h, w):
            raise ValueError(f"skin_mask shape {self.skin_mask.shape} != {(h, w)}")
        lo, hi = self.frames.min(), self.frames.max()
        if lo < -1e-9 or hi > 1.0 + 1e-9:
            raise ValueError(f"pixel values outside [0,1]: min {lo}, max {hi}")

    @property
    def shape(self):
        return self.frames.shape


def synth_pulse(config: SynthConfig) -> Waveform:
    """Unit-RMS quasi-periodic pulse: fundamental plus a second harmonic,
    with small per-cycle period jitter."""
    rng = np.random.default_rng(np.random.SeedSequence([config.base_texture_seed, 11]))
    f0 = config.hr_bpm / 60.0
    phase = 0.0
    cycle = 0
    freq = f0 * (1.0 + rng.uniform(-config.cycle_jitter, config.cycle_jitter))
    phases = np.zeros(config.T)
    for t in range(config.T):
        phases[t] = phase
        phase += 2.0 * np.pi * freq / config.fps
        if phase >= 2.0 * np.pi * (cycle + 1):
            cycle += 1
            freq = f0 * (1.0 + rng.uniform(-config.cycle_jitter, config.cycle_jitter))
    s = np.sin(phases) + config.harmonic_amplitude * np.sin(2.0 * phases)
    rms = np.sqrt(np.mean(s * s))
    return Waveform(s / rms, config.fps)


def _value_noise(rng, h, w, cells):
    """Smooth noise: random grid bilinearly interpolated up to h x w."""
    grid = rng.uniform(-1.0, 1.0, size=(cells + 1, cells + 1, 3))
    ys = np.linspace(0, cells, h, endpoint=False)
    xs = np.linspace(0, cells, w, endpoint=False)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    g = grid
    top = g[y0][:, x0] * (1 - fx) + g[y0][:, x0 + 1] * fx
    bot = g[y0 + 1][:, x0] * (1 - fx) + g[y0 + 1][:, x0 + 1] * fx
    return top * (1 - fy) + bot * fy


def base_image(config: SynthConfig) -> np.ndarray:
    """Static textured base: skin tone inside the skin rectangle, a cooler
    background outside, with two octaves of chromatic value noise."""
    rng = np.random.default_rng(np.random.SeedSequence([config.base_texture_seed, 7]))
    h, w = config.H, config.W
    skin = config.region_layout["skin"].mask(h, w)[..., None]
    base = skin * SKIN_TONE + (1.0 - skin) * BACKGROUND_TONE
    noise = 0.7 * _value_noise(rng, h, w, 8) + 0.3 * _value_noise(rng, h, w, 32)
    base = base + TEXTURE_CONTRAST * 0.5 * noise
    return np.clip(base, 0.12, 0.88)


def pulse_weight_map(config: SynthConfig) -> np.ndarray:
    """Spatial pulse strength: 1 in forehead/cheeks, weaker elsewhere on skin,
    zero in the eye/mouth analogue rectangles and off skin."""
    lay = config.region_layout
    h, w = config.H, config.W
    skin = lay["skin"].mask(h, w)
    strong = np.clip(lay["forehead"].mask(h, w) + lay["cheek_left"].mask(h, w)
                     + lay["cheek_right"].mask(h, w), 0, 1)
    excl = np.clip(lay["eye_left"].mask(h, w) + lay["eye_right"].mask(h, w)
                   + lay["mouth"].mask(h, w), 0, 1)
    weight = skin * SOFT_SKIN_WEIGHT
    weight = np.where(strong > 0, 1.0, weight)
    weight = np.where(excl > 0, 0.0, weight)
    return weight


def render_clip(pulse: Waveform, config: SynthConfig) -> VideoClip:
    """Embed the pulse as a chrominance modulation over a static base image."""
    if len(pulse) != config.T:
        raise ValueError(f"pulse length {len(pulse)} != clip length {config.T}")
    base = base_image(config)
    weight = pulse_weight_map(config)
    rngn = np.random.default_rng(np.random.SeedSequence([config.base_texture_seed, 23]))
    mod = (pulse.samples[:, None, None, None] * config.pulse_amplitude
           * weight[None, :, :, None] * PULSE_DIRECTION)
    frames = base[None] - mod
    if config.sensor_noise_sigma > 0:
        frames = frames + rngn.normal(0.0, config.sensor_noise_sigma, size=frames.shape)
    frames = np.clip(frames, 0.0, 1.0)
    skin = config.region_layout["skin"].mask(config.H, config.W)
    return VideoClip(frames, config.fps, skin)


def add_nuisance(clip: VideoClip, spec: NuisanceSpec) -> VideoClip:
    """Inject periodic illumination flicker or rhythmic horizontal motion."""
    t = np.arange(clip.frames.shape[0]) / clip.fps
    osc = np.sin(2.0 * np.pi * (spec.freq_bpm / 60.0) * t + spec.phase)
    if spec.kind == "illumination_flicker":
        frames = clip.frames * (1.0 + spec.amplitude * osc)[:, None, None, None]
        return VideoClip(np.clip(frames, 0.0, 1.0), clip.fps, clip.skin_mask.copy())
    # rhythmic horizontal translation with bilinear resampling, edge clamped
    shift = spec.amplitude * osc
    w = clip.frames.shape[2]
    cols = np.arange(w)
    frames = np.empty_like(clip.frames)
    for i in range(clip.frames.shape[0]):
        src = np.clip(cols - shift[i], 0.0, w - 1.0)
        c0 = np.floor(src).astype(int)
        c1 = np.minimum(c0 + 1, w - 1)
        f = (src - c0)[None, :, None]
        frames[i] = clip.frames[i][:, c0] * (1 - f) + clip.frames[i][:, c1] * f
    return VideoClip(np.clip(frames, 0.0, 1.0), clip.fps, clip.skin_mask.copy())


# ---------------------------------------------------------------------------
# clip container (magic "RPCL", little endian)

_MAGIC = b"RPCL"
_VERSION = 1
_HEADER = struct.Struct("<4sIIIIfB")


def write_clip(clip: VideoClip, path):
    t, h, w, _ = clip.frames.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, t, h, w, clip.fps, 1))
        fh.write(clip.frames.astype("<f4").tobytes())
        fh.write(clip.skin_mask.astype("<f4").tobytes())


def read_clip(path) -> VideoClip:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise ClipFormatError(f"{path}: malformed clip header")
    magic, version, t, h, w, fps, has_mask = _HEADER.unpack_from(blob)
    if magic != _MAGIC:
        raise ClipFormatError(f"{path}: not a clip container")
    if version != _VERSION:
        raise ClipFormatError(f"{path}: unsupported clip container version {version}")
    n_frame = t * h * w * 3
    n_mask = h * w if has_mask else 0
    expected = _HEADER.size + 4 * (n_frame + n_mask)
    if len(blob) < expected:
        raise ClipFormatError(f"{path}: truncated payload")
    frames = np.frombuffer(blob, dtype="<f4", count=n_frame, offset=_HEADER.size)
    frames = frames.reshape(t, h, w, 3).astype(np.float64)
    if has_mask:
        mask = np.frombuffer(blob, dtype="<f4", count=n_mask,
                             offset=_HEADER.size + 4 * n_frame).reshape(h, w)
        mask = mask.astype(np.float64)
    else:
        mask = np.ones((h, w))
    return VideoClip(frames, float(fps), mask)
