"""Band-limited waveform analysis and signal-domain transforms.

Provides the fixed FIR band-pass used everywhere (0.67-4.0 Hz, the 40-240
bpm pulse band), periodogram spectra with heart-rate readout, Pearson
correlation, spectral entropy / Jensen-Shannon divergence, and the
amplitude / phase / frequency transform operators applied to pulse
hypotheses. All functions are pure; inputs are never mutated.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .autodiff import _correlate_same_1d

HR_BAND = (0.67, 4.0)        # Hz, 40-240 bpm
FIR_TAPS = 127               # odd length keeps the group delay integral
LOG_EPS = 1e-8


class DegenerateSignalError(ValueError):
    """A signal has no usable variance or spectral content."""


@dataclass(frozen=True)
class Waveform:
    """Uniformly sampled 1-D signal."""

    samples: np.ndarray
    sample_rate: float

    def __post_init__(self):
        object.__setattr__(self, "samples", np.asarray(self.samples, dtype=np.float64))
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self):
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class Spectrum:
    """Normalized power distribution over an ascending frequency grid."""

    freqs: np.ndarray
    power: np.ndarray
    band: tuple

    def __post_init__(self):
        object.__setattr__(self, "freqs", np.asarray(self.freqs, dtype=np.float64))
        object.__setattr__(self, "power", np.asarray(self.power, dtype=np.float64))
        if len(self.freqs) != len(self.power):
            raise ValueError("freqs and power lengths differ")


@dataclass(frozen=True)
class TransformSpec:
    """One signal-domain transform: amplitude scale, frame shift, or frequency warp."""

    kind: str                     # "amplitude" | "phase" | "frequency"
    alpha: float = 1.0
    tau: int = 0
    rho: float = 1.0

    def __post_init__(self):
        if self.kind not in ("amplitude", "phase", "frequency"):
            raise ValueError(f"unknown transform kind {self.kind!r}")


# ---------------------------------------------------------------------------
# FIR band-pass

_taps_cache: dict = {}


def design_bandpass(sample_rate, band=HR_BAND, numtaps=FIR_TAPS):
    """Windowed-sinc band-pass taps (Hamming window), peak gain normalized to 1."""
    key = (float(sample_rate), band, numtaps)
    if key in _taps_cache:
        return _taps_cache[key]
    f_lo, f_hi = band
    m = numtaps // 2
    n = np.arange(numtaps) - m

    def lowpass(fc):
        h = np.zeros(numtaps)
        nz = n != 0
        h[nz] = np.sin(2 * np.pi * fc / sample_rate * n[nz]) / (np.pi * n[nz])
        h[~nz] = 2.0 * fc / sample_rate
        return h

    taps = lowpass(f_hi) - lowpass(f_lo)
    window = 0.54 - 0.46 * np.cos(2 * np.pi * np.arange(numtaps) / (numtaps - 1))
    taps = taps * window
    fc = np.sqrt(f_lo * f_hi)
    gain = np.abs(np.sum(taps * np.exp(-2j * np.pi * fc / sample_rate * np.arange(numtaps))))
    taps = taps / gain
    taps.setflags(write=False)
    _taps_cache[key] = taps
    return taps


def bandpass(w: Waveform, band=HR_BAND) -> Waveform:
    """Linear-phase FIR band-pass; output aligned with input (no group delay).

    The mean is removed first: the filter kills DC asymptotically anyway, and
    on short signals this suppresses the zero-padding edge transient a raw
    offset would otherwise smear across the output. The whole operation stays
    linear.
    """
    if w.sample_rate < 10.0:
        raise ValueError(f"bandpass requires sample_rate >= 10 Hz, got {w.sample_rate}")
    taps = design_bandpass(w.sample_rate, band)
    if len(w) < len(taps) - 1:
        raise ValueError(
            f"signal of length {len(w)} is shorter than the filter order {len(taps) - 1}")
    x = w.samples - w.samples.mean()
    return Waveform(_correlate_same_1d(x, taps), w.sample_rate)


def bandpass_array(x, sample_rate, band=HR_BAND):
    """bandpass() on a bare array; convenience for loss code."""
    return bandpass(Waveform(x, sample_rate), band).samples


def bandpass_multi(x, sample_rate, band=HR_BAND):
    """Band-pass every column of a (T, ...) array in one pass."""
    arr = np.asarray(x, dtype=np.float64)
    t = arr.shape[0]
    taps = design_bandpass(sample_rate, band)
    if t < len(taps) - 1:
        raise ValueError(
            f"signal of length {t} is shorter than the filter order {len(taps) - 1}")
    flat = arr.reshape(t, -1)
    flat = flat - flat.mean(axis=0, keepdims=True)
    half = len(taps) // 2
    xp = np.zeros((t + 2 * half, flat.shape[1]))
    xp[half:half + t] = flat
    out = np.zeros_like(flat)
    for j in range(len(taps)):
        out += taps[j] * xp[j:j + t]
    return out.reshape(arr.shape)


# ---------------------------------------------------------------------------
# spectra

def psd(w: Waveform, band=HR_BAND, nfft=None) -> Spectrum:
    """Hann-windowed periodogram of the mean-removed signal, restricted to band
    and normalized to sum 1. Pass a larger nfft to interpolate the grid."""
    x = w.samples
    if len(x) < 64:
        raise ValueError(f"psd requires at least 64 samples, got {len(x)}")
    if nfft is None:
        nfft = len(x)
    win = np.hanning(len(x))
    xw = (x - x.mean()) * win
    spec = np.abs(np.fft.rfft(xw, n=nfft)) ** 2
    freqs = np.fft.rfftfreq(nfft, d=1.0 / w.sample_rate)
    keep = (freqs >= band[0]) & (freqs <= band[1])
    if not keep.any():
        raise ValueError(f"band {band} contains no frequency bins at fs={w.sample_rate}")
    power = spec[keep]
    total = power.sum()
    if total > 0:
        power = power / total
    return Spectrum(freqs[keep], power, band)


def estimate_hr(w: Waveform, band=HR_BAND) -> float:
    """Dominant in-band frequency expressed in beats per minute.

    The periodogram is zero-padded so the peak location resolves well below
    one natural bin even on short clips.
    """
    if np.var(w.samples) < 1e-12:
        raise DegenerateSignalError("signal has no variance; no dominant peak")
    nfft = 1 << max(12, int(np.ceil(np.log2(8 * len(w.samples)))))
    sp = psd(w, band, nfft=nfft)
    return 60.0 * float(sp.freqs[int(np.argmax(sp.power))])


def pearson(a: Waveform, b: Waveform) -> float:
    """Pearson correlation coefficient; rejects zero-variance inputs so that
    degenerate signals surface instead of silently reading as uncorrelated."""
    xa, xb = a.samples, b.samples
    if len(xa) != len(xb):
        raise ValueError(f"length mismatch: {len(xa)} vs {len(xb)}")
    xa = xa - xa.mean()
    xb = xb - xb.mean()
    va, vb = np.dot(xa, xa), np.dot(xb, xb)
    if va < 1e-24 or vb < 1e-24:
        raise DegenerateSignalError("zero-variance input to pearson")
    return float(np.dot(xa, xb) / np.sqrt(va * vb))


def spectral_entropy(sp: Spectrum) -> float:
    p = sp.power
    return float(-np.sum(p * np.log(p + LOG_EPS)))


def js_divergence(p: Spectrum, q: Spectrum) -> float:
    """Jensen-Shannon divergence between two spectra on identical bins."""
    if len(p.freqs) != len(q.freqs) or not np.allclose(p.freqs, q.freqs):
        raise ValueError("spectra are on mismatched frequency bins")
    pp, qq = p.power, q.power
    m = 0.5 * (pp + qq)

    def kl(u, v):
        return float(np.sum(u * (np.log(u + LOG_EPS) - np.log(v + LOG_EPS))))

    return 0.5 * kl(pp, m) + 0.5 * kl(qq, m)


# ---------------------------------------------------------------------------
# signal-domain transforms

def transform_signal(s: Waveform, spec: TransformSpec) -> Waveform:
    """Apply an amplitude scale, circular frame shift, or frequency warp.

    Frequency warping resamples the signal on a time axis compressed by rho
    with linear interpolation, treating the signal as periodic so the output
    keeps the original length.
    """
    x = s.samples
    if spec.kind == "amplitude":
        return Waveform(spec.alpha * x, s.sample_rate)
    if spec.kind == "phase":
        if abs(spec.tau) >= len(x):
            raise ValueError(f"|tau|={abs(spec.tau)} must be < length {len(x)}")
        return Waveform(np.roll(x, spec.tau), s.sample_rate)
    # frequency
    if not 0.5 <= spec.rho <= 3.0:
        raise ValueError(f"rho={spec.rho} outside [0.5, 3.0]")
    t = len(x)
    # tile at a whole-period boundary so the seam stays phase continuous;
    # otherwise the phase jump splits the spectral peak
    tile = float(t)
    if t >= 64 and np.var(x) > 1e-12:
        try:
            period = s.sample_rate * 60.0 / estimate_hr(s)
            cycles = int(np.floor(t / period))
            if cycles >= 1:
                tile = cycles * period
        except DegenerateSignalError:
            pass
    pos = (spec.rho * np.arange(t)) % tile
    i0 = np.floor(pos).astype(int)
    frac = pos - i0
    hi = x[np.minimum(i0 + 1, t - 1)]
    return Waveform(x[i0] * (1.0 - frac) + hi * frac, s.sample_rate)


# ---------------------------------------------------------------------------
# waveform CSV interchange

def write_waveform_csv(w: Waveform, path):
    with open(path, "w", newline="") as fh:
        fh.write(waveform_csv_text(w))


def waveform_csv_text(w: Waveform) -> str:
    buf = io.StringIO()
    buf.write("t_seconds,value\n")
    for i, v in enumerate(w.samples):
        buf.write(f"{i / w.sample_rate:.9f},{float(v)!r}\n")
    return buf.getvalue()


def read_waveform_csv(path) -> Waveform:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["t_seconds", "value"]:
        raise ValueError(f"{path}: not a waveform CSV (missing header)")
    body = rows[1:]
    if len(body) < 2:
        raise ValueError(f"{path}: waveform CSV needs at least two samples")
    t = np.array([float(r[0]) for r in body])
    v = np.array([float(r[1]) for r in body])
    dt = np.diff(t)
    if dt.min() <= 0 or (dt.max() - dt.min()) > 1e-6:
        raise ValueError(f"{path}: waveform CSV is not uniformly sampled")
    return Waveform(v, 1.0 / dt.mean())
