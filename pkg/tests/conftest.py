"""Session fixtures: one standard bench dataset plus trained models shared by
the acceptance suite and the heavier example tests. Training runs once per
session; the weights land in a session temp dir so CLI paths can reuse them.
"""

import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from rppglab import bench, editor, training
from rppglab.extractor import save_weights

ACCEPT_SEED = 0

DATASET_CFG = dict(n_train=20, n_test=10, train_flicker=4, train_motion=3,
                   seed=ACCEPT_SEED)

STAGE1_CFG = dict(epochs=30, warmup_epochs=1, learning_rate=3e-3,
                  crop_len=160, batch_size=4, seed=ACCEPT_SEED)

STAGE3_CFG = dict(epochs=40, warmup_epochs=12, learning_rate=3e-3,
                  crop_len=160, batch_size=4, top_K_cells=3,
                  w_wave=0.3, w_background=2.0, seed=ACCEPT_SEED)

STAGE2_CFG = dict(epochs=25, warmup_epochs=1, learning_rate=1e-2,
                  crop_len=160, batch_size=4, seed=ACCEPT_SEED)


@pytest.fixture(scope="session")
def workspace(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="session")
def dataset_dir(workspace):
    out = workspace / "dataset"
    bench.synth_dataset(bench.DatasetConfig(**DATASET_CFG), out)
    return out


@pytest.fixture(scope="session")
def stage1_model(dataset_dir, workspace):
    pairs = bench.load_labeled(dataset_dir, "train")
    rows = bench.load_manifest_rows(dataset_dir, "train")
    clean_pairs = [p for p, r in zip(pairs, rows) if r["scenario"] == "clean"]
    t0 = time.time()
    params, ecfg, history = training.train_stage1(
        clean_pairs, training.TrainConfig(**STAGE1_CFG))
    path = workspace / "stage1.rpwt"
    save_weights(path, params, ecfg)
    return {"params": params, "ecfg": ecfg, "history": history,
            "path": path, "minutes": (time.time() - t0) / 60}


@pytest.fixture(scope="session")
def stage3_model(dataset_dir, workspace):
    clips = bench.load_unlabeled(dataset_dir, "train")
    t0 = time.time()
    params, ecfg, history, diag = training.train_stage3(
        clips, editor.AnalyticEditor(), training.TrainConfig(**STAGE3_CFG))
    path = workspace / "stage3.rpwt"
    save_weights(path, params, ecfg)
    (workspace / "stage3_metrics.csv").write_text(
        training.breakdown_csv(history))
    return {"params": params, "ecfg": ecfg, "history": history, "diag": diag,
            "path": path, "minutes": (time.time() - t0) / 60}


@pytest.fixture(scope="session")
def stage2_generator(dataset_dir, stage1_model, workspace):
    pairs = bench.load_labeled(dataset_dir, "train")
    rows = bench.load_manifest_rows(dataset_dir, "train")
    clean_pairs = [p for p, r in zip(pairs, rows) if r["scenario"] == "clean"][:10]
    gen, history = training.train_editor(
        clean_pairs, stage1_model["params"], stage1_model["ecfg"],
        training.TrainConfig(**STAGE2_CFG))
    path = workspace / "generator.rpwt"
    training.save_generator(path, gen)
    return {"gen": gen, "history": history, "path": path,
            "pairs": clean_pairs, "ref": stage1_model}
