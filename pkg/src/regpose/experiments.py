"""Desk-scale experiment pipeline shared by the acceptance suite and scripts/.

Trains the volume-pose (stage 1, then geodesic and L2-only stage-2 branches),
correction and slice-pose networks once per configuration and caches them
under a directory keyed by a hash of the configuration.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import torch

from .phantom import SampleStream, build_subjects, subject_specs
from .regress import (
    PoseNetwork, TrainConfig, build_network, load_network, read_history_csv, save_network, train,
    write_history_csv,
)

log = logging.getLogger(__name__)

CACHE_ENV = "REGPOSE_CACHE"
# bump when training code changes in a way that invalidates cached models
PIPELINE_VERSION = 1


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    train_subjects: int = 36
    # fresh samples per subject per epoch
    volume_per_subject: int = 60
    correction_per_subject: int = 40
    slice_per_subject: int = 100
    epochs_stage1: int = 10
    epochs_stage2: int = 10
    batch_size: int = 16
    learning_rate: float = 1e-3
    lam: float = 0.01
    noise_sigma: float = 0.01
    volume_blur_max: float = 1.0

    def train_config(self, stage2_loss: str = "geodesic") -> TrainConfig:
        return TrainConfig(self.epochs_stage1, self.epochs_stage2, self.batch_size, self.learning_rate,
                           self.lam, self.seed, stage2_loss)

    def key(self) -> str:
        blob = json.dumps({**asdict(self), "pipeline": PIPELINE_VERSION}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


def default_cache_root() -> Path:
    return Path(os.environ.get(CACHE_ENV, Path.cwd() / ".regpose_cache"))


@dataclass
class TrainedModels:
    volume_stage1: PoseNetwork
    volume_geodesic: PoseNetwork
    volume_l2: PoseNetwork
    correction: PoseNetwork
    slice: PoseNetwork
    directory: Path

    def nets(self, volume: str = "geodesic") -> dict:
        return {"volume_pose": getattr(self, f"volume_{volume}"), "correction": self.correction,
                "slice_pose": self.slice}


def _stream(cfg: ExperimentConfig, kind: str, per_subject: int) -> SampleStream:
    subjects = build_subjects(subject_specs("train", cfg.train_subjects, cfg.seed))
    blur = cfg.volume_blur_max if kind == "volume" else 0.0
    return SampleStream(subjects, kind, per_subject, seed=cfg.seed, noise_sigma=cfg.noise_sigma, blur_sigma_max=blur)


def _cached(path: Path, make):
    if path.is_file():
        return load_network(path)
    result = make()
    save_network(path, result.net)
    write_history_csv(path.with_suffix(".history.csv"), result.history)
    return result.net


def train_models(cfg: ExperimentConfig = ExperimentConfig(), cache_root: Path | None = None) -> TrainedModels:
    """Train (or load from cache) every network the benchmarks need."""
    root = Path(cache_root or default_cache_root()) / cfg.key()
    root.mkdir(parents=True, exist_ok=True)
    (root / "config.json").write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n")

    vol_stream = _stream(cfg, "volume", cfg.volume_per_subject)
    stage1_path = root / "volume_stage1.rpn"
    opt_path = root / "volume_stage1.optim.pt"
    if stage1_path.is_file() and opt_path.is_file():
        stage1 = load_network(stage1_path)
        opt_state = torch.load(opt_path, weights_only=False)
    else:
        log.info("training volume_pose stage 1")
        res = train(build_network("volume_pose", cfg.seed), vol_stream, cfg.train_config(), stages=(1,))
        stage1, opt_state = res.net, res.optimizer_state
        save_network(stage1_path, stage1)
        write_history_csv(stage1_path.with_suffix(".history.csv"), res.history)
        torch.save(opt_state, opt_path)

    def finetune(loss):
        def make():
            log.info("training volume_pose stage 2 (%s)", loss)
            net = load_network(stage1_path)
            return train(net, vol_stream, cfg.train_config(loss), start_epoch=cfg.epochs_stage1,
                         stages=(2,), optimizer_state=opt_state)
        return make

    geo = _cached(root / "volume_geodesic.rpn", finetune("geodesic"))
    l2 = _cached(root / "volume_l2.rpn", finetune("l2"))

    def full(tag, kind, per):
        def make():
            log.info("training %s", tag)
            return train(build_network(tag, cfg.seed), _stream(cfg, kind, per), cfg.train_config())
        return make

    corr = _cached(root / "correction.rpn", full("correction", "correction", cfg.correction_per_subject))
    sl = _cached(root / "slice.rpn", full("slice_pose", "slice", cfg.slice_per_subject))
    return TrainedModels(stage1, geo, l2, corr, sl, root)


def histories(models: TrainedModels) -> dict:
    return {p.stem.removesuffix(".history"): read_history_csv(p) for p in sorted(models.directory.glob("*.history.csv"))}
