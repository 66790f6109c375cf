"""Shared fixtures: the toy corpus, trained checkpoints, a 2-D sanity model.

The four acceptance checkpoints (full model plus three ablations) are
trained once per session through the CLI, two subprocesses at a time.
"""

import json
import subprocess
import sys
from dataclasses import dataclass

import numpy as np
import pytest

from cosynorm import autodiff as ad
from cosynorm.autodiff import Module, SGD, Tensor
from cosynorm.datagen import DatasetConfig, build_dataset
from cosynorm.layers import Linear
from cosynorm.pipeline import ConversionModel
from cosynorm.seeding import derive_rng

SMOKE_STEPS = 8000


@pytest.fixture(scope="session")
def dataset_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("toyds")
    build_dataset(DatasetConfig(), path)
    return path


@dataclass
class Checkpoint:
    model: ConversionModel
    final_val_cfm: float
    path: str


def _train_cli(dataset_dir, ckpt_path, ablate=None):
    cmd = [sys.executable, "-m", "cosynorm.cli", "train",
           "--data", str(dataset_dir), "--out", str(ckpt_path),
           "--steps", str(SMOKE_STEPS)]
    if ablate:
        cmd += ["--ablate", ablate]
    return subprocess.Popen(cmd, stdout=subprocess.DEVNULL, stderr=subprocess.PIPE)


def _collect(proc, ckpt_path) -> Checkpoint:
    _, err = proc.communicate()
    if proc.returncode != 0:
        raise RuntimeError(f"training subprocess failed: {err.decode()[-2000:]}")
    log = json.loads((ckpt_path.parent / (ckpt_path.name + ".log.json")).read_text())
    return Checkpoint(ConversionModel.load(ckpt_path), log["final_val_cfm"], str(ckpt_path))


@pytest.fixture(scope="session")
def checkpoints(dataset_dir, tmp_path_factory):
    """Full model plus the three ablations, trained two at a time."""
    root = tmp_path_factory.mktemp("ckpt")
    jobs = [("full", None), ("speaker", "speaker"), ("ctc", "ctc"),
            ("posscale", "posscale")]
    out = {}
    for pair in (jobs[:2], jobs[2:]):
        procs = [(name, ckpt, _train_cli(dataset_dir, ckpt, ablate))
                 for name, ablate in pair
                 for ckpt in [root / f"{name}.bin"]]
        for name, ckpt, proc in procs:
            out[name] = _collect(proc, ckpt)
    return out


@pytest.fixture(scope="session")
def trained(checkpoints):
    return checkpoints["full"]


@pytest.fixture(scope="session")
def trained_ablations(checkpoints):
    return {k: v for k, v in checkpoints.items() if k != "full"}


class GaussianVelocityNet(Module):
    """Per-frame velocity MLP for flow sanity checks on a fixed 2-D Gaussian.

    Frames are independent, so one sampling call with N rows draws N
    independent samples.
    """

    def __init__(self, seed=0, hidden=32, dtype=np.float64):
        super().__init__()
        rng = derive_rng(seed, "gauss2d")
        self.dtype = dtype
        self.cfg = type("Cfg", (), {"feature_dim": 2})()
        self.fc1 = self.add_child("fc1", Linear("fc1", 4, hidden, rng, dtype))
        self.fc2 = self.add_child("fc2", Linear("fc2", hidden, hidden, rng, dtype))
        self.fc3 = self.add_child("fc3", Linear("fc3", hidden, 2, rng, dtype))

    def __call__(self, x_t, t, content=None, speaker=None, mask=None):
        n = x_t.shape[0]
        t_col = Tensor(np.full((n, 2), (t, t * t), dtype=self.dtype))
        h = ad.concat([x_t, t_col], axis=1)
        h = ad.silu(self.fc1(h))
        h = ad.silu(self.fc2(h))
        return self.fc3(h)


def train_gaussian_model(mean=(1.0, -1.0), steps=2500, batch=64, lr=0.05, seed=0):
    from cosynorm.decoder import KEEP_ALL
    from cosynorm.flow import cfm_loss

    model = GaussianVelocityNet(seed=seed)
    opt = SGD(model.parameters(), lr=lr, momentum=0.9)
    mu = np.asarray(mean)
    rng = derive_rng(seed, "gauss2d-train")
    for _ in range(steps):
        x1 = mu + rng.standard_normal((batch, 2))
        loss = cfm_loss(model, x1, None, None, KEEP_ALL, rng)
        opt.zero_grad()
        loss.backward()
        opt.step()
    return model


@pytest.fixture(scope="session")
def gaussian_model():
    return train_gaussian_model()
