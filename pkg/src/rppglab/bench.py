"""Dataset synthesis and the evaluation harness.

Builds deterministic clip corpora on disk (clips, pulse sidecars, manifest),
runs benchmark sweeps over extractors and nuisance scenarios, scores editing
fidelity, and produces the falsifiability and flicker-lock diagnostics.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import editor as ed
from . import training as tr
from .extractor import classical_extract, extract_waveform, load_weights
from .signals import (Waveform, TransformSpec, bandpass, estimate_hr,
                      transform_signal, read_waveform_csv, write_waveform_csv)
from .synth import (NuisanceSpec, SynthConfig, VideoClip, add_nuisance,
                    read_clip, render_clip, synth_pulse, write_clip)

FLICKER_AMPLITUDE = 0.02
MOTION_AMPLITUDE = 1.5   # pixels


class DataError(RuntimeError):
    """Missing or inconsistent dataset inputs."""


@dataclass
class DatasetConfig:
    n_train: int = 20
    n_test: int = 10
    train_flicker: int = 3     # unlabeled nuisance members of the train split
    train_motion: int = 3
    hr_range: tuple = (50.0, 110.0)
    T: int = 300
    H: int = 64
    W: int = 64
    fps: float = 30.0
    pulse_amplitude: float = 0.004
    sensor_noise_sigma: float = 0.003
    seed: int = 0


@dataclass
class MetricsRow:
    method: str
    scenario: str
    mae: float
    rmse: float
    r: float
    n_clips: int


@dataclass
class FidelityRow:
    mode: str
    psnr: float
    ssim: float
    n_frames: int


def _nuisance_freq(hr, seed, lo=70.0, hi=110.0):
    """Deterministic nuisance rate, kept at least 15 bpm away from the pulse."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 313]))
    for _ in range(32):
        f = float(rng.uniform(lo, hi))
        if abs(f - hr) >= 15.0:
            return f
    return hr + 25.0 if hr + 25.0 <= hi else hr - 25.0


def make_clip(cfg: DatasetConfig, seed, hr, scenario="clean"):
    scfg = SynthConfig(hr_bpm=hr, pulse_amplitude=cfg.pulse_amplitude,
                       base_texture_seed=int(seed),
                       sensor_noise_sigma=cfg.sensor_noise_sigma,
                       T=cfg.T, H=cfg.H, W=cfg.W, fps=cfg.fps)
    pulse = synth_pulse(scfg)
    clip = render_clip(pulse, scfg)
    if scenario == "flicker":
        clip = add_nuisance(clip, NuisanceSpec(
            "illumination_flicker", _nuisance_freq(hr, seed), FLICKER_AMPLITUDE))
    elif scenario == "motion":
        clip = add_nuisance(clip, NuisanceSpec(
            "rhythmic_motion", _nuisance_freq(hr, seed, 60.0, 100.0),
            MOTION_AMPLITUDE))
    elif scenario != "clean":
        raise ValueError(f"unknown scenario {scenario!r}")
    return clip, pulse


def synth_dataset(cfg: DatasetConfig, outdir):
    """Write train/test clips, pulse sidecars, and the manifest. Returns rows."""
    out = Path(outdir)
    (out / "train").mkdir(parents=True, exist_ok=True)
    (out / "test").mkdir(parents=True, exist_ok=True)
    rows = []
    n_clean = cfg.n_train - cfg.train_flicker - cfg.train_motion
    if n_clean < 0:
        raise ValueError("nuisance train members exceed n_train")
    scenarios = (["clean"] * n_clean + ["flicker"] * cfg.train_flicker
                 + ["motion"] * cfg.train_motion)
    train_hrs = np.linspace(cfg.hr_range[0], cfg.hr_range[1], cfg.n_train)
    test_hrs = np.linspace(cfg.hr_range[0], cfg.hr_range[1], cfg.n_test)
    specs = [("train", i, scenarios[i], train_hrs[i]) for i in range(cfg.n_train)]
    specs += [("test", i, "clean", test_hrs[i]) for i in range(cfg.n_test)]
    for split, i, scenario, hr in specs:
        seed = cfg.seed * 100000 + (0 if split == "train" else 50000) + i
        clip, pulse = make_clip(cfg, seed, float(hr), scenario)
        name = f"clip_{split}_{i:03d}.rpcl"
        write_clip(clip, out / split / name)
        write_waveform_csv(pulse, out / split / f"clip_{split}_{i:03d}.pulse.csv")
        rows.append({"filename": f"{split}/{name}", "split": split,
                     "scenario": scenario, "seed": seed,
                     "hr_bpm": float(hr), "fps": cfg.fps,
                     "T": cfg.T, "H": cfg.H, "W": cfg.W})
    write_csv(out / "manifest.csv",
              ["filename", "split", "scenario", "seed", "hr_bpm", "fps", "T", "H", "W"],
              rows)
    return rows


def load_manifest(dataset_dir):
    path = Path(dataset_dir) / "manifest.csv"
    if not path.exists():
        raise DataError(f"{path}: manifest not found")
    return read_csv(path)


def load_unlabeled(dataset_dir, split="train"):
    """Clips only; the ground-truth sidecars are never opened."""
    clips = []
    for row in load_manifest(dataset_dir):
        if row["split"] == split:
            clips.append(read_clip(Path(dataset_dir) / row["filename"]))
    if not clips:
        raise DataError(f"no {split} clips in {dataset_dir}")
    return clips


def load_labeled(dataset_dir, split="train"):
    pairs = []
    for row in load_manifest(dataset_dir):
        if row["split"] != split:
            continue
        clip_path = Path(dataset_dir) / row["filename"]
        pulse_path = clip_path.with_suffix("").with_suffix(".pulse.csv")
        if not pulse_path.exists():
            raise DataError(f"{pulse_path}: pulse sidecar not found")
        pairs.append((read_clip(clip_path), read_waveform_csv(pulse_path)))
    if not pairs:
        raise DataError(f"no {split} clips in {dataset_dir}")
    return pairs


def load_manifest_rows(dataset_dir, split):
    return [r for r in load_manifest(dataset_dir) if r["split"] == split]


# ---------------------------------------------------------------------------
# extractor registry

def method_fn(name, weights_path=None):
    """Callable clip -> Waveform for classical names or a weights file."""
    if name in ("green", "chrom", "pos"):
        return lambda clip: classical_extract(clip, method=name)
    if weights_path is None:
        raise DataError(f"method {name!r} needs a weights file")
    params, ecfg = load_weights(weights_path)
    return lambda clip: extract_waveform(params, ecfg, clip)


SCENARIOS = ("clean", "illum", "motion")


def _scenario_clip(clip, scenario, hr, seed):
    if scenario == "clean":
        return clip
    if scenario == "illum":
        return add_nuisance(clip, NuisanceSpec(
            "illumination_flicker", _nuisance_freq(hr, seed + 17),
            FLICKER_AMPLITUDE))
    if scenario == "motion":
        return add_nuisance(clip, NuisanceSpec(
            "rhythmic_motion", _nuisance_freq(hr, seed + 29, 60.0, 100.0),
            MOTION_AMPLITUDE))
    raise ValueError(f"unknown scenario {scenario!r}")


def hr_metrics(truths, preds):
    truths = np.asarray(truths, float)
    preds = np.asarray(preds, float)
    err = preds - truths
    mae = float(np.mean(np.abs(err)))
    rmse = float(np.sqrt(np.mean(err * err)))
    if len(truths) >= 2 and np.var(truths) > 0 and np.var(preds) > 0:
        r = float(np.corrcoef(truths, preds)[0, 1])
    else:
        r = 0.0
    return mae, rmse, r


def benchmark(dataset_dir, methods, scenarios=SCENARIOS, split="test"):
    """Run every method on every scenario variant of the held-out clips.

    methods: dict name -> callable(clip) -> Waveform.
    Returns (summary MetricsRow list, detail rows, avg_delta_mae dict).
    """
    rows = load_manifest_rows(dataset_dir, split)
    clips = [(read_clip(Path(dataset_dir) / r["filename"]),
              float(r["hr_bpm"]), int(r["seed"])) for r in rows]
    detail = []
    summary = []
    mae_by = {}
    for name, fn in methods.items():
        for scenario in scenarios:
            truths, preds = [], []
            for idx, (clip, hr, seed) in enumerate(clips):
                variant = _scenario_clip(clip, scenario, hr, seed)
                pred = estimate_hr(fn(variant))
                truths.append(hr)
                preds.append(pred)
                detail.append({"method": name, "scenario": scenario,
                               "clip_index": idx, "hr_true": hr,
                               "hr_pred": pred, "abs_err": abs(pred - hr)})
            mae, rmse, r = hr_metrics(truths, preds)
            mae_by[(name, scenario)] = mae
            summary.append(MetricsRow(name, scenario, mae, rmse, r, len(clips)))
    avg_delta = {}
    for name in methods:
        deltas = [mae_by[(name, s)] - mae_by[(name, "clean")]
                  for s in scenarios if s != "clean"]
        avg_delta[name] = float(np.mean(deltas)) if deltas else 0.0
    return summary, detail, avg_delta


FIDELITY_MODES = ("null", "amplitude", "phase", "frequency")
FIDELITY_ALPHA = 0.5
FIDELITY_TAU = 5
FIDELITY_RHO = 1.5


def edit_for_mode(clip, s0, mode, alpha=FIDELITY_ALPHA, tau=FIDELITY_TAU,
                  rho=FIDELITY_RHO, editor_obj=None, state=None):
    """Canonical edit per mode: amplitude edits the clip directly, phase and
    frequency re-add a transformed target onto the nulled clip."""
    editor_obj = editor_obj or ed.AnalyticEditor()
    state = state or editor_obj.prepare(clip, s0)
    if mode == "amplitude":
        return editor_obj.edit(state, s0, alpha)
    probe = tr.make_cell_probe(clip)
    nul = tr.nulling_search(clip, s0, editor_obj, probe, state=state)
    if mode == "null":
        return nul.clip_nul
    if mode == "phase":
        sig = Waveform(np.roll(s0.samples, tau), clip.fps)
    elif mode == "frequency":
        sig = transform_signal(s0, TransformSpec("frequency", rho=rho))
    else:
        raise ValueError(f"unknown edit mode {mode!r}")
    return editor_obj.edit(nul.state_nul, sig, 1.0)


def fidelity(dataset_dir, modes=FIDELITY_MODES, split="test", editor_obj=None,
             max_clips=None):
    """PSNR/SSIM of each edit mode against the originals, averaged over clips."""
    pairs = load_labeled(dataset_dir, split)
    if max_clips:
        pairs = pairs[:max_clips]
    acc = {m: [] for m in modes}
    for clip, pulse in pairs:
        s0 = Waveform(tr.unit_rms(bandpass(pulse).samples), clip.fps)
        state = (editor_obj or ed.AnalyticEditor()).prepare(clip, s0)
        for mode in modes:
            edited = edit_for_mode(clip, s0, mode, editor_obj=editor_obj,
                                   state=state)
            acc[mode].append((ed.psnr(clip, edited), ed.ssim(clip, edited)))
    rows = []
    for mode in modes:
        vals = np.array(acc[mode])
        rows.append(FidelityRow(mode, float(vals[:, 0].mean()),
                                float(vals[:, 1].mean()),
                                n_frames=sum(p[0].frames.shape[0] for p in pairs)))
    return rows


def falsifiability(n_seeds=10, seed0=0, cfg: DatasetConfig = None):
    """Nulling residuals for true-pulse hypotheses vs motion-artifact
    hypotheses; the separation is the falsifiability demonstration."""
    cfg = cfg or DatasetConfig()
    rows = []
    for k in range(n_seeds):
        seed = seed0 * 1000 + k
        hr = 55.0 + 5.0 * k
        clip, pulse = make_clip(cfg, seed, hr, "clean")
        s_true = Waveform(tr.unit_rms(bandpass(pulse).samples), clip.fps)
        probe = tr.make_cell_probe(clip)
        res_true = tr.nulling_search(clip, s_true, ed.AnalyticEditor(), probe)

        mcfg = DatasetConfig(**{**cfg.__dict__, "pulse_amplitude": 0.0})
        mclip, _ = make_clip(mcfg, seed + 500, hr, "motion")
        pos = classical_extract(mclip, method="pos")
        s_art = Waveform(tr.unit_rms(pos.samples), mclip.fps)
        probe_m = tr.make_cell_probe(mclip)
        res_art = tr.nulling_search(mclip, s_art, ed.AnalyticEditor(), probe_m)
        rows.append({"seed": seed, "true_residual": res_true.residual_ratio,
                     "artifact_residual": res_art.residual_ratio,
                     "true_alpha": res_true.alpha_star,
                     "artifact_alpha": res_art.alpha_star})
    return rows


def flicker_lock_dataset(n_clips=10, seed0=0, cfg: DatasetConfig = None):
    """Held-out clips with a 60 bpm pulse and 100 bpm illumination flicker."""
    cfg = cfg or DatasetConfig()
    out = []
    for k in range(n_clips):
        scfg = SynthConfig(hr_bpm=60.0, pulse_amplitude=cfg.pulse_amplitude,
                           base_texture_seed=seed0 * 777 + k,
                           sensor_noise_sigma=cfg.sensor_noise_sigma,
                           T=cfg.T, H=cfg.H, W=cfg.W, fps=cfg.fps)
        clip = render_clip(synth_pulse(scfg), scfg)
        out.append(add_nuisance(clip, NuisanceSpec(
            "illumination_flicker", 100.0, FLICKER_AMPLITUDE)))
    return out


def flicker_lock_eval(methods, n_clips=10, seed0=0, cfg: DatasetConfig = None):
    """Per-method HR estimates on the 60 bpm pulse / 100 bpm flicker bench."""
    clips = flicker_lock_dataset(n_clips, seed0, cfg)
    rows = []
    for name, fn in methods.items():
        for idx, clip in enumerate(clips):
            hr = estimate_hr(fn(clip))
            rows.append({"method": name, "clip_index": idx, "hr_pred": hr,
                         "pulse_bpm": 60.0, "flicker_bpm": 100.0,
                         "nearer_pulse": int(abs(hr - 60.0) < abs(hr - 100.0))})
    return rows


def amplitude_sweep(clip, s0, alphas=(-3.0, -1.0, 0.0, 1.0, 3.0)):
    """Remove-then-add sweep: null the clip, then inject alpha * s0 and read
    back with the plane-orthogonal extractor. Returns {alpha: Waveform}."""
    probe = tr.make_cell_probe(clip)
    nul = tr.nulling_search(clip, s0, ed.AnalyticEditor(), probe)
    out = {}
    for alpha in alphas:
        edited = ed.apply_edit(nul.state_nul, s0, float(alpha))
        out[float(alpha)] = classical_extract(edited, method="pos")
    return out


# ---------------------------------------------------------------------------
# CSV interchange (repr round-trip for floats)

def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def csv_text(header, rows):
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    for row in rows:
        if isinstance(row, dict):
            buf.write(",".join(_fmt(row[h]) for h in header) + "\n")
        else:
            buf.write(",".join(_fmt(v) for v in row) + "\n")
    return buf.getvalue()


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        fh.write(csv_text(header, rows))


def read_csv(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = []
        for raw in reader:
            row = {}
            for k, v in raw.items():
                try:
                    num = float(v)
                    row[k] = int(num) if num.is_integer() and "." not in v and "e" not in v.lower() else num
                except (TypeError, ValueError):
                    row[k] = v
            rows.append(row)
    return rows


def metrics_rows_to_csv(summary, avg_delta):
    header = ["method", "scenario", "mae_bpm", "rmse_bpm", "pearson_r",
              "n_clips", "delta_mae_bpm", "avg_delta_mae_bpm"]
    by_clean = {m.method: m.mae for m in summary if m.scenario == "clean"}
    rows = []
    for m in summary:
        delta = m.mae - by_clean.get(m.method, 0.0) if m.scenario != "clean" else 0.0
        rows.append([m.method, m.scenario, m.mae, m.rmse, m.r, m.n_clips,
                     delta, avg_delta.get(m.method, 0.0)])
    return header, rows
