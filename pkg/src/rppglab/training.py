"""Self-supervised training loop for the pulse extractor.

Stage 1 trains a supervised reference extractor from labeled clips. Stage 3
trains a fresh extractor from unlabeled clips with a frozen editor: per
clip, hypothesize a pulse, search the nulling strength that best cancels it,
then score falsifiability (residual band energy after nulling), equivariance
(amplitude / phase / frequency interventions must transform the readout
accordingly), and spatio-temporal priors (consensus correlation, multi-region
agreement, background suppression, spectral concentration).

Hypotheses driving interventions are detached: gradients flow through the
extractor's readouts of the edited clips, never backward through the editor
into the hypothesis, so the extractor cannot shrink its own targets.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import editor as ed
from . import pyramid as pyr
from .extractor import (ExtractorConfig, WeightsFormatError, classical_extract,
                        init_params, net_forward, read_named_arrays,
                        write_named_arrays, zero_grads)
from .optim import AdamW, cosine_lr
from .signals import (HR_BAND, Waveform, TransformSpec, bandpass,
                      bandpass_array, bandpass_multi, design_bandpass,
                      transform_signal)
from .synth import VideoClip


@dataclass
class TrainConfig:
    warmup_epochs: int = 5
    epochs: int = 100
    batch_size: int = 4
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    alpha_range: tuple = (0.0, 2.0)
    tau_range: tuple = (-12, 12)
    rho_range: tuple = (0.8, 2.0)
    nulling_range: tuple = (-2.0, 0.0)
    top_K_cells: int = 8
    seed: int = 0
    crop_len: int = 160
    lr_ramp_epochs: int = 0   # linear ramp to the peak rate, then cosine
    dropout: bool = True
    amplitude_target_mode: str = "total"   # "total": (1+a)*BP(s0); "literal": a*BP(s0)
    w_nul: float = 1.0
    w_equ: float = 1.0
    w_forward: float = 1.0
    w_multiregion: float = 1.0
    w_background: float = 1.0
    w_wave: float = 1.0

    def __post_init__(self):
        if self.warmup_epochs >= self.epochs:
            raise ValueError("warmup_epochs must be smaller than epochs")
        for name in ("alpha_range", "tau_range", "rho_range", "nulling_range"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ValueError(f"{name} is degenerate: {(lo, hi)}")


LOSS_FIELDS = ("l_nul", "l_equ_amp", "l_equ_phase", "l_equ_freq",
               "l_forward", "l_multiregion", "l_background", "l_wave")


@dataclass
class LossBreakdown:
    l_nul: float = 0.0
    l_equ_amp: float = 0.0
    l_equ_phase: float = 0.0
    l_equ_freq: float = 0.0
    l_forward: float = 0.0
    l_multiregion: float = 0.0
    l_background: float = 0.0
    l_wave: float = 0.0

    @property
    def total(self):
        return float(sum(getattr(self, f) for f in LOSS_FIELDS))

    def as_dict(self):
        d = {f: getattr(self, f) for f in LOSS_FIELDS}
        d["total"] = self.total
        return d


def unit_rms(x):
    x = np.asarray(x, dtype=np.float64)
    rms = np.sqrt(np.mean(x * x))
    return x / rms if rms > 0 else x


# ---------------------------------------------------------------------------
# engine-side loss building blocks

def bp_graph(x, fs):
    """Engine-side counterpart of signals.bandpass (mean removal + FIR)."""
    taps = design_bandpass(fs)
    return ad.conv1d_same(ad.subtract(x, ad.mean(x)), taps)


def pearson_graph(a, b):
    """Differentiable Pearson correlation; returns None when either side is
    numerically degenerate (callers substitute the worst-case constant)."""
    a = a if isinstance(a, ad.DiffValue) else ad.DiffValue(np.asarray(a, float))
    b = b if isinstance(b, ad.DiffValue) else ad.DiffValue(np.asarray(b, float))
    if np.var(a.data) < 1e-18 or np.var(b.data) < 1e-18:
        return None
    ac = ad.subtract(a, ad.mean(a))
    bc = ad.subtract(b, ad.mean(b))
    num = ad.sum(ad.multiply(ac, bc))
    den = ad.sqrt(ad.add(ad.multiply(ad.sum(ad.square(ac)), ad.sum(ad.square(bc))),
                         np.asarray(1e-24)))
    return ad.divide(num, den)


def psd_graph(x, fs, band=HR_BAND):
    """Differentiable band-restricted periodogram, normalized to sum 1."""
    t = x.shape[0]
    freqs = np.fft.rfftfreq(t, d=1.0 / fs)
    keep = (freqs >= band[0]) & (freqs <= band[1])
    grid = freqs[keep]
    win = np.hanning(t)
    angles = 2.0 * np.pi * np.outer(grid, np.arange(t)) / fs
    cosm = np.cos(angles) * win
    sinm = np.sin(angles) * win
    xc = ad.subtract(x, ad.mean(x))
    col = ad.reshape(xc, (t, 1))
    re = ad.matmul(cosm, col)
    im = ad.matmul(sinm, col)
    p = ad.add(ad.square(re), ad.square(im))
    total = ad.add(ad.sum(p), np.asarray(1e-24))
    return ad.reshape(ad.divide(p, total), (len(grid),))


def entropy_graph(p):
    return ad.scale(ad.sum(ad.multiply(p, ad.log(ad.add(p, np.asarray(1e-8))))), -1.0)


def js_graph(p, q):
    m = ad.scale(ad.add(p, q), 0.5)

    def kl(u, v):
        lu = ad.log(ad.add(u, np.asarray(1e-8)))
        lv = ad.log(ad.add(v, np.asarray(1e-8)))
        return ad.sum(ad.multiply(u, ad.subtract(lu, lv)))

    return ad.scale(ad.add(kl(p, m), kl(q, m)), 0.5)


# ---------------------------------------------------------------------------
# energy probes

def band_energy(samples, fs):
    bp = bandpass_array(np.asarray(samples, float), fs)
    return float(np.mean(bp * bp))


def pos_probe(clip: VideoClip, state=None) -> float:
    sig = classical_extract(clip, method="pos")
    return float(np.mean(sig.samples ** 2))


def make_net_probe(params, ecfg: ExtractorConfig):
    def probe(clip: VideoClip, state=None) -> float:
        raw = net_forward(params, ecfg, clip.frames).data
        return band_energy(raw, clip.fps)
    return probe


def cell_chroma_energy(clip: VideoClip, skin_cells=None, low_base=None) -> float:
    """Cell-resolved chrominance band energy on the low base: two fixed
    luminance-free projections per consensus cell, band-passed and summed.
    Spatially resolved so that a single global edit cannot cancel artifacts
    whose spatial pattern it cannot reproduce."""
    if low_base is None:
        low_base = pyr.laplacian_decompose(clip.frames).low_base
    rel = low_base / (low_base.mean(axis=0, keepdims=True) + 1e-9)
    s1 = rel[..., 1] - rel[..., 2]
    s2 = rel[..., 1] + rel[..., 2] - 2.0 * rel[..., 0]
    chroma = np.stack([s1, s2], axis=-1)
    bp = bandpass_multi(chroma, clip.fps)
    per_cell = (bp ** 2).mean(axis=0).sum(axis=-1)
    if skin_cells is not None:
        per_cell = per_cell[skin_cells]
    return float(per_cell.sum())


def make_cell_probe(clip: VideoClip, layout=None):
    """Falsifiability probe: spatially resolved chroma band energy over the
    cells inside the anatomical support of this clip."""
    skin_cells = _anat_low(clip, layout) > 0

    def probe(c: VideoClip, state=None) -> float:
        low = state.low if state is not None else None
        return cell_chroma_energy(c, skin_cells, low_base=low)
    return probe


def _anat_low(clip, layout=None):
    h2 = clip.frames.shape[1] >> (pyr.K_PYR - 1)
    w2 = clip.frames.shape[2] >> (pyr.K_PYR - 1)
    a = ed.anatomical_prior(clip, layout)
    return a.reshape(h2, a.shape[0] // h2, w2, a.shape[1] // w2).mean(axis=(1, 3))


# ---------------------------------------------------------------------------
# nulling search

@dataclass
class NullingResult:
    alpha_star: float
    clip_nul: VideoClip
    state_nul: ed.EditState
    residual_energy: float
    pre_energy: float
    degenerate: bool = False

    @property
    def residual_ratio(self):
        return self.residual_energy / self.pre_energy if self.pre_energy > 0 else 1.0


def _edit_with_state(editor_obj, state: ed.EditState, s_target, strength):
    clip = editor_obj.edit(state, s_target, strength)
    if isinstance(editor_obj, ed.AnalyticEditor):
        low2 = state.low + ed.analytic_delta(state, s_target, strength)
        new_state = ed.EditState(clip, state.highs, low2, state.psm,
                                 state.pattern_full)
    else:
        low2 = pyr.laplacian_decompose(clip.frames).low_base
        new_state = ed.EditState(clip, state.highs, low2, state.psm)
    return clip, new_state


def nulling_search(clip: VideoClip, s0: Waveform, editor_obj, probe,
                   nulling_range=(-2.0, 0.0), state: ed.EditState = None,
                   coarse=5, refine=3) -> NullingResult:
    """Coarse-to-fine search for the strength that minimizes in-band energy
    of the probe readout on the edited clip."""
    rms = float(np.sqrt(np.mean(s0.samples ** 2)))
    if state is None:
        state = editor_obj.prepare(clip, s0)
    pre = probe(clip, state)
    if rms < 1e-8:
        return NullingResult(0.0, clip, state, pre, pre, degenerate=True)
    cache = {}

    def evaluate(alpha):
        key = round(alpha, 9)
        if key not in cache:
            c, st = _edit_with_state(editor_obj, state, s0, alpha)
            cache[key] = (probe(c, st), c, st)
        return cache[key]

    lo, hi = nulling_range
    grid = np.linspace(lo, hi, coarse)
    best_alpha = min(grid, key=lambda a: evaluate(a)[0])
    step = (hi - lo) / (coarse - 1)
    for _ in range(refine):
        step /= 2.0
        candidates = [best_alpha - step, best_alpha, best_alpha + step]
        candidates = [a for a in candidates if lo - 1e-12 <= a <= hi + 1e-12]
        best_alpha = min(candidates, key=lambda a: evaluate(a)[0])
    energy, clip_nul, state_nul = evaluate(best_alpha)
    return NullingResult(float(best_alpha), clip_nul, state_nul, energy, pre)


# ---------------------------------------------------------------------------
# loss terms

def loss_nul(s_nul, fs):
    """Mean squared band-passed amplitude; accepts arrays or graph values."""
    if isinstance(s_nul, ad.DiffValue):
        return ad.mean(ad.square(bp_graph(s_nul, fs)))
    return ad.DiffValue(np.asarray(band_energy(s_nul, fs)))


def equivariance_targets(s0_np, fs, specs, alpha_mode="total"):
    """Band-passed transformed targets for the three intervention branches."""
    bp0 = bandpass_array(s0_np, fs)
    amp_spec, phase_spec, freq_spec = specs
    scale = (1.0 + amp_spec.alpha) if alpha_mode == "total" else amp_spec.alpha
    t_amp = scale * bp0
    t_phase = np.roll(bp0, phase_spec.tau)
    t_freq = transform_signal(Waveform(bp0, fs),
                              TransformSpec("frequency", rho=freq_spec.rho)).samples
    return t_amp, t_phase, t_freq


def loss_equ(params, ecfg, editor_obj, clip, nulres: NullingResult,
             s0: Waveform, specs, cfg: TrainConfig, state: ed.EditState,
             train_rng=None, branches=("amplitude", "phase", "frequency")):
    """Mean absolute deviation between the band-passed readout of each edited
    clip and its transformed target. The amplitude branch edits the original
    clip; phase and frequency re-add onto the nulled clip at the removed
    amplitude."""
    fs = clip.fps
    amp_spec, phase_spec, freq_spec = specs
    t_amp, t_phase, t_freq = equivariance_targets(
        s0.samples, fs, specs, cfg.amplitude_target_mode)
    # the nulling strength measures this clip's pulse in editor units, so
    # injections scaled by it read back at the hypothesis scale
    unit = abs(nulres.alpha_star)
    if nulres.degenerate or unit < 0.25:
        unit = 1.0
    out = {}
    for branch in branches:
        if branch == "amplitude":
            edited = editor_obj.edit(state, s0, amp_spec.alpha * unit)
            target = t_amp
        elif branch == "phase":
            sig = Waveform(np.roll(s0.samples, phase_spec.tau), fs)
            edited = editor_obj.edit(nulres.state_nul, sig, unit)
            target = t_phase
        else:
            sig = transform_signal(s0, TransformSpec("frequency", rho=freq_spec.rho))
            edited = editor_obj.edit(nulres.state_nul, sig, unit)
            target = t_freq
        pred = net_forward(params, ecfg, edited.frames, train_rng=train_rng)
        out[branch] = ad.mean(ad.absolute(ad.subtract(bp_graph(pred, fs), target)))
    return out


def top_cells(psm_map: ed.PerturbationSupportMap, k):
    """Indices of the k strongest consensus cells inside the prior support."""
    w = psm_map.W_static.copy()
    g = w.shape[0]
    a_cells = psm_map.A.reshape(g, psm_map.A.shape[0] // g,
                                g, psm_map.A.shape[1] // g).mean(axis=(1, 3))
    w[a_cells < 0.25] = -1.0
    order = np.argsort(w.ravel())[::-1]
    picks = [divmod(int(i), g) for i in order[:k] if w.ravel()[i] > 0]
    return picks


def cell_block_mask(clip: VideoClip, cell, dilate=1):
    """Full-resolution mask for one consensus cell, dilated by whole cells."""
    h, w = clip.skin_mask.shape
    g = min(8, h >> (pyr.K_PYR - 1), w >> (pyr.K_PYR - 1))
    ch, cw = h // g, w // g
    i, j = cell
    mask = np.zeros((h, w))
    r0 = max(0, (i - dilate) * ch)
    r1 = min(h, (i + 1 + dilate) * ch)
    c0 = max(0, (j - dilate) * cw)
    c1 = min(w, (j + 1 + dilate) * cw)
    mask[r0:r1, c0:c1] = 1.0
    return mask


def consensus_reference(state: ed.EditState, psm_map, fs, k):
    """C_obs: band-passed pointwise median of the top-k cell carrier series."""
    cells = ed.cell_series(state.low)
    picks = top_cells(psm_map, k)
    if not picks:
        return None, []
    series = np.stack([cells[i, j] for i, j in picks])
    med = np.median(series, axis=0)
    return bandpass_array(med, fs), picks


@dataclass
class StDiagnostics:
    degenerate_correlations: int = 0


def loss_st(s0_value, clip, params, ecfg, state, psm_map, cfg: TrainConfig,
            train_rng=None, diagnostics: StDiagnostics = None):
    """Spatio-temporal prior terms.

    s0_value: DiffValue (trains the extractor through its own hypothesis) or
    a constant array during warm-up.
    """
    diagnostics = diagnostics if diagnostics is not None else StDiagnostics()
    fs = clip.fps

    def as_dv(x):
        return x if isinstance(x, ad.DiffValue) else ad.DiffValue(np.asarray(x, float))

    s0 = as_dv(s0_value)
    c_obs, picks = consensus_reference(state, psm_map, fs, cfg.top_K_cells)

    # forward consistency with the observed chrominance consensus
    if c_obs is None:
        l_forward = ad.DiffValue(np.asarray(1.0))
        diagnostics.degenerate_correlations += 1
    else:
        r = pearson_graph(s0, c_obs)
        if r is None:
            l_forward = ad.DiffValue(np.asarray(1.0))
            diagnostics.degenerate_correlations += 1
        else:
            l_forward = ad.subtract(np.asarray(1.0), ad.absolute(r))

    # multi-region agreement across the top cells
    terms = []
    for cell in picks:
        mask = cell_block_mask(clip, cell)
        frames = clip.frames * mask[None, :, :, None]
        c_k = net_forward(params, ecfg, frames, train_rng=train_rng)
        r = pearson_graph(s0, c_k)
        if r is None:
            terms.append(ad.DiffValue(np.asarray(1.0)))
            diagnostics.degenerate_correlations += 1
        else:
            terms.append(ad.subtract(np.asarray(1.0), ad.absolute(r)))
    if terms:
        acc = terms[0]
        for extra in terms[1:]:
            acc = ad.add(acc, extra)
        l_multi = ad.scale(acc, 1.0 / len(terms))
    else:
        l_multi = ad.DiffValue(np.asarray(1.0))
        diagnostics.degenerate_correlations += 1

    # background suppression: low correlation and low band energy
    bg_mask = (clip.skin_mask < 0.5).astype(np.float64)
    frames = clip.frames * bg_mask[None, :, :, None]
    c_bg = net_forward(params, ecfg, frames, train_rng=train_rng)
    r = pearson_graph(s0, c_bg)
    if r is None:
        corr_term = ad.DiffValue(np.asarray(0.0))
        diagnostics.degenerate_correlations += 1
    else:
        corr_term = ad.absolute(r)
    l_background = ad.add(corr_term, ad.mean(ad.square(bp_graph(c_bg, fs))))

    # waveform prior: concentrated, stationary spectrum
    p_full = psd_graph(s0, fs)
    half = s0.shape[0] // 2
    p1 = psd_graph(s0[:half], fs)
    p2 = psd_graph(s0[half:2 * half], fs)
    l_wave = ad.add(entropy_graph(p_full), js_graph(p1, p2))

    return {"forward": l_forward, "multiregion": l_multi,
            "background": l_background, "wave": l_wave}, diagnostics


def sample_interventions(cfg: TrainConfig, rng):
    """One spec per intervention family, drawn uniformly from the ranges."""
    alpha = float(rng.uniform(*cfg.alpha_range))
    tau = int(rng.integers(cfg.tau_range[0], cfg.tau_range[1] + 1))
    rho = float(rng.uniform(*cfg.rho_range))
    return (TransformSpec("amplitude", alpha=alpha),
            TransformSpec("phase", tau=tau),
            TransformSpec("frequency", rho=rho))


# ---------------------------------------------------------------------------
# metrics log

def breakdown_csv(rows):
    buf = io.StringIO()
    headers = ["epoch"] + list(LOSS_FIELDS) + ["total"]
    buf.write(",".join(headers) + "\n")
    for i, row in enumerate(rows):
        d = row.as_dict()
        buf.write(",".join([str(i)] + [repr(d[h]) for h in headers[1:]]) + "\n")
    return buf.getvalue()


# ---------------------------------------------------------------------------
# stage 1: supervised reference extractor

def supervised_loss(params, ecfg, clip, s_gt: Waveform, train_rng=None):
    """Scale-free waveform agreement plus an out-of-band energy penalty."""
    fs = clip.fps
    pred = net_forward(params, ecfg, clip.frames, train_rng=train_rng)
    bp_pred = bp_graph(pred, fs)
    target = bandpass_array(unit_rms(s_gt.samples), fs)
    r = pearson_graph(bp_pred, target)
    if r is None:
        corr_loss = ad.DiffValue(np.asarray(1.0))
    else:
        corr_loss = ad.subtract(np.asarray(1.0), r)
    oob = ad.divide(ad.mean(ad.square(ad.subtract(pred, bp_pred))),
                    ad.add(ad.mean(ad.square(pred)), np.asarray(1e-12)))
    return ad.add(corr_loss, ad.scale(oob, 0.1))


def _crop(clip: VideoClip, pulse, crop_len, rng):
    t = clip.frames.shape[0]
    if crop_len is None or t <= crop_len:
        return clip, pulse
    start = int(rng.integers(0, t - crop_len + 1))
    sub = VideoClip(clip.frames[start:start + crop_len], clip.fps, clip.skin_mask)
    if pulse is None:
        return sub, None
    return sub, Waveform(pulse.samples[start:start + crop_len], pulse.sample_rate)


def train_stage1(labeled_clips, cfg: TrainConfig, ecfg: ExtractorConfig = None,
                 progress=None):
    """Supervised reference extractor from (clip, ground-truth pulse) pairs."""
    ecfg = ecfg or ExtractorConfig()
    params = init_params(ecfg, seed=cfg.seed)
    opt = AdamW(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    history = []
    snapshot = {k: v.data.copy() for k, v in params.items()}
    for epoch in range(cfg.epochs):
        lr = cosine_lr(cfg.learning_rate, epoch, cfg.epochs)
        if cfg.lr_ramp_epochs > 0:
            lr *= min(1.0, (epoch + 1) / cfg.lr_ramp_epochs)
        losses = []
        pending = 0
        for idx, (clip, s_gt) in enumerate(labeled_clips):
            rng = np.random.default_rng(np.random.SeedSequence(
                [cfg.seed, 31, epoch, idx]))
            sub, gt = _crop(clip, s_gt, cfg.crop_len, rng)
            loss = supervised_loss(params, ecfg, sub, gt,
                                   train_rng=rng if cfg.dropout else None)
            if not np.isfinite(loss.data):
                for k, v in params.items():
                    v.data = snapshot[k]
                raise FloatingPointError(
                    f"supervised training diverged at epoch {epoch}")
            ad.backward(loss)
            losses.append(float(loss.data))
            pending += 1
            if pending == cfg.batch_size or idx == len(labeled_clips) - 1:
                opt.step(lr=lr, grad_scale=1.0 / pending)
                opt.zero_grad()
                pending = 0
        history.append(float(np.mean(losses)))
        snapshot = {k: v.data.copy() for k, v in params.items()}
        if progress:
            progress(epoch, history[-1])
    return params, ecfg, history


# ---------------------------------------------------------------------------
# stage 3: label-free training with a frozen editor

def _epoch_breakdown(rows):
    agg = LossBreakdown()
    for f in LOSS_FIELDS:
        setattr(agg, f, float(np.mean([getattr(r, f) for r in rows])))
    return agg


def train_stage3(clips, editor_obj, cfg: TrainConfig,
                 ecfg: ExtractorConfig = None, progress=None):
    """Label-free extractor training against a frozen editor.

    clips carry no ground-truth field; the only supervision is the
    hypothesis-intervention-verification loop plus the priors.
    """
    ecfg = ecfg or ExtractorConfig()
    params = init_params(ecfg, seed=cfg.seed)
    opt = AdamW(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    editor_before = editor_obj.parameter_bytes()

    # fixed per-clip crops keep the pyramid cache valid across epochs
    crops = []
    pyramids = []
    for idx, clip in enumerate(clips):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 47, idx]))
        sub, _ = _crop(clip, None, cfg.crop_len, rng)
        crops.append(sub)
        pyramids.append(pyr.laplacian_decompose(sub.frames))

    history = []
    diagnostics = StDiagnostics()
    snapshot = {k: v.data.copy() for k, v in params.items()}
    branches = ("amplitude", "phase", "frequency")
    for epoch in range(cfg.epochs):
        lr = cosine_lr(cfg.learning_rate, epoch, cfg.epochs)
        if cfg.lr_ramp_epochs > 0:
            lr *= min(1.0, (epoch + 1) / cfg.lr_ramp_epochs)
        warm = epoch < cfg.warmup_epochs
        probe = pos_probe if warm else make_net_probe(params, ecfg)
        rows = []
        pending = 0
        for idx, clip in enumerate(crops):
            rng = np.random.default_rng(np.random.SeedSequence(
                [cfg.seed, 53, epoch, idx]))
            drop_rng = rng if cfg.dropout else None
            fs = clip.fps

            if warm:
                s0_np = unit_rms(classical_extract(clip, method="pos").samples)
                s0_value = s0_np
            else:
                s0_dv = net_forward(params, ecfg, clip.frames, train_rng=drop_rng)
                s0_np = unit_rms(s0_dv.data)
                s0_value = s0_dv
            s0 = Waveform(s0_np, fs)

            pd = pyramids[idx]
            psm_map = ed.compute_psm(clip, s0, low_base=pd.low_base)
            state = ed.EditState(clip, pd.high_layers, pd.low_base, psm_map.psm)

            nul = nulling_search(clip, s0, editor_obj, probe,
                                 cfg.nulling_range, state=state)
            s_nul = net_forward(params, ecfg, nul.clip_nul.frames,
                                train_rng=drop_rng)
            l_nul = ad.scale(loss_nul(s_nul, fs), cfg.w_nul)

            specs = sample_interventions(cfg, rng)
            branch = branches[(epoch * len(crops) + idx) % 3]
            equ = loss_equ(params, ecfg, editor_obj, clip, nul, s0, specs,
                           cfg, state, train_rng=drop_rng, branches=(branch,))
            l_equ = ad.scale(equ[branch], cfg.w_equ)

            st, diagnostics = loss_st(s0_value, clip, params, ecfg, state,
                                      psm_map, cfg, train_rng=drop_rng,
                                      diagnostics=diagnostics)
            total = l_nul
            total = ad.add(total, l_equ)
            total = ad.add(total, ad.scale(st["forward"], cfg.w_forward))
            total = ad.add(total, ad.scale(st["multiregion"], cfg.w_multiregion))
            total = ad.add(total, ad.scale(st["background"], cfg.w_background))
            total = ad.add(total, ad.scale(st["wave"], cfg.w_wave))

            if not np.isfinite(total.data):
                for k, v in params.items():
                    v.data = snapshot[k]
                raise FloatingPointError(
                    f"self-supervised training diverged at epoch {epoch}")
            ad.backward(total)

            row = LossBreakdown(
                l_nul=float(l_nul.data),
                l_forward=float(st["forward"].data) * cfg.w_forward,
                l_multiregion=float(st["multiregion"].data) * cfg.w_multiregion,
                l_background=float(st["background"].data) * cfg.w_background,
                l_wave=float(st["wave"].data) * cfg.w_wave)
            equ_field = {"amplitude": "l_equ_amp", "phase": "l_equ_phase",
                         "frequency": "l_equ_freq"}[branch]
            setattr(row, equ_field, float(l_equ.data))
            rows.append(row)

            pending += 1
            if pending == cfg.batch_size or idx == len(crops) - 1:
                opt.step(lr=lr, grad_scale=1.0 / pending)
                opt.zero_grad()
                pending = 0

        history.append(_epoch_breakdown(rows))
        snapshot = {k: v.data.copy() for k, v in params.items()}
        if progress:
            progress(epoch, history[-1])

    if editor_obj.parameter_bytes() != editor_before:
        raise RuntimeError("editor parameters changed during extractor training")
    return params, ecfg, history, diagnostics


# ---------------------------------------------------------------------------
# stage 2: editor generator training under a frozen reference extractor

def _freeze(params):
    return {k: ad.DiffValue(v.data.copy()) for k, v in params.items()}


def reference_scale(ref_params, ref_cfg, pairs, crop_len):
    """Median band-passed output RMS of the frozen reference on the training
    clips; its readouts are divided by this so targets are unit commensurate."""
    vals = []
    for clip, _ in pairs[:8]:
        frames = clip.frames[:crop_len] if crop_len else clip.frames
        raw = net_forward(ref_params, ref_cfg, frames).data
        vals.append(np.sqrt(np.mean(bandpass_array(raw, clip.fps) ** 2)))
    gamma = float(np.median(vals))
    return gamma if gamma > 1e-9 else 1.0


def train_editor(labeled_clips, ref_params, ref_cfg: ExtractorConfig,
                 cfg: TrainConfig, gen: ed.EditorGenerator = None,
                 progress=None):
    """Train the residual generator to reconstruct, null, and execute the
    amplitude/phase/frequency interventions under the frozen reference.

    Per step the reconstruction and nulling terms are always scored; one of
    the three intervention branches is scored in rotation.
    """
    gen = gen or ed.init_generator(seed=cfg.seed)
    ref = _freeze(ref_params)
    opt = AdamW(gen.params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)

    crops = []
    for idx, (clip, pulse) in enumerate(labeled_clips):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 61, idx]))
        sub, gt = _crop(clip, pulse, cfg.crop_len, rng)
        gt_unit = Waveform(unit_rms(bandpass(Waveform(gt.samples, sub.fps)).samples),
                           sub.fps)
        pd = pyr.laplacian_decompose(sub.frames)
        psm_map = ed.compute_psm(sub, gt_unit, low_base=pd.low_base)
        state = ed.EditState(sub, pd.high_layers, pd.low_base, psm_map.psm)
        crops.append((sub, gt_unit, state))

    gamma = reference_scale(ref, ref_cfg, [(c, g) for c, g, _ in crops],
                            crop_len=None)
    branches = ("amplitude", "phase", "frequency")
    history = []
    snapshot = {k: v.data.copy() for k, v in gen.params.items()}
    for epoch in range(cfg.epochs):
        lr = cosine_lr(cfg.learning_rate, epoch, cfg.epochs)
        if cfg.lr_ramp_epochs > 0:
            lr *= min(1.0, (epoch + 1) / cfg.lr_ramp_epochs)
        losses = []
        pending = 0
        for idx, (clip, gt, state) in enumerate(crops):
            rng = np.random.default_rng(np.random.SeedSequence(
                [cfg.seed, 67, epoch, idx]))
            fs = clip.fps
            bp_gt = bandpass_array(gt.samples, fs)

            # reconstruction at zero strength
            x_rec = ed.learned_edit_graph(gen, state, gt, 0.0)
            l_rec = ad.mean(ad.square(ad.subtract(x_rec, clip.frames)))

            # nulling: inject the anti-signal and read residual band energy
            delta_nul = ed.learned_delta_graph(gen, state.low, gt, state.psm, -1.0)
            low_nul = ad.add(ad.DiffValue(state.low), delta_nul)
            x_nul = pyr.reconstruct_graph(low_nul, state.highs)
            s_nul = ad.scale(net_forward(ref, ref_cfg, x_nul, train_rng=None),
                             1.0 / gamma)
            l_nul = ad.mean(ad.square(bp_graph(s_nul, fs)))

            # one intervention branch per step, rotated
            specs = sample_interventions(cfg, rng)
            branch = branches[(epoch * len(crops) + idx) % 3]
            if branch == "amplitude":
                alpha = specs[0].alpha
                x_edit = ed.learned_edit_graph(gen, state, gt, alpha)
                scale = 1.0 + alpha if cfg.amplitude_target_mode == "total" else alpha
                target = scale * bp_gt
            else:
                if branch == "phase":
                    sig = Waveform(np.roll(gt.samples, specs[1].tau), fs)
                    target = np.roll(bp_gt, specs[1].tau)
                else:
                    sig = transform_signal(gt, TransformSpec(
                        "frequency", rho=specs[2].rho))
                    target = transform_signal(Waveform(bp_gt, fs), TransformSpec(
                        "frequency", rho=specs[2].rho)).samples
                delta2 = ed.learned_delta_graph(gen, low_nul, sig, state.psm, 1.0)
                x_edit = pyr.reconstruct_graph(ad.add(low_nul, delta2),
                                               state.highs)
            s_pred = ad.scale(net_forward(ref, ref_cfg, x_edit, train_rng=None),
                              1.0 / gamma)
            l_equ = ad.mean(ad.absolute(ad.subtract(bp_graph(s_pred, fs), target)))

            total = ad.add(ad.add(ad.scale(l_rec, 100.0), l_nul), l_equ)
            if not np.isfinite(total.data):
                for k, v in gen.params.items():
                    v.data = snapshot[k]
                raise FloatingPointError(
                    f"editor training diverged at epoch {epoch}")
            ad.backward(total)
            losses.append(float(total.data))
            pending += 1
            if pending == cfg.batch_size or idx == len(crops) - 1:
                opt.step(lr=lr, grad_scale=1.0 / pending)
                opt.zero_grad()
                pending = 0
        history.append(float(np.mean(losses)))
        snapshot = {k: v.data.copy() for k, v in gen.params.items()}
        if progress:
            progress(epoch, history[-1])
    gen.trained = True
    return gen, history


GENERATOR_KEYS = ("enc1_w", "enc1_b", "enc2_w", "enc2_b", "dec2_w", "dec2_b",
                  "dec1_w", "dec1_b", "out_w", "out_b", "mod1_w", "mod1_b",
                  "mod2_w", "mod2_b")


def save_generator(path, gen: ed.EditorGenerator):
    arrays = {"__gen_trained": [1.0 if gen.trained else 0.0],
              "__gen_in_channels": [gen.cfg.in_channels],
              "__gen_enc_channels": list(gen.cfg.enc_channels),
              "__gen_mod_hidden": [gen.cfg.mod_hidden]}
    arrays.update({k: v.data for k, v in gen.params.items()})
    write_named_arrays(path, arrays)


def load_generator(path) -> ed.EditorGenerator:
    arrays = read_named_arrays(path)
    if "__gen_trained" not in arrays:
        raise WeightsFormatError(f"{path}: not an editor generator container")
    cfg = ed.GeneratorConfig(
        in_channels=int(arrays.pop("__gen_in_channels")[0]),
        enc_channels=tuple(int(v) for v in arrays.pop("__gen_enc_channels")),
        mod_hidden=int(arrays.pop("__gen_mod_hidden")[0]))
    trained = bool(arrays.pop("__gen_trained")[0])
    params = {k: ad.DiffValue(v, requires_grad=True) for k, v in arrays.items()}
    return ed.EditorGenerator(params, cfg, trained=trained)
