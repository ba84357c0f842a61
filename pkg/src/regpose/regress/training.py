"""Two-stage training (rotation-vector L2, then geodesic) and gradient checks."""
from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .. import so3
from ..phantom import SampleStream, TrainingSample
from .losses import loss_total
from .networks import PoseNetwork, samples_to_tensor

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs_stage1: int = 10
    epochs_stage2: int = 10
    batch_size: int = 16
    learning_rate: float = 1e-3
    lam: float = 0.01
    seed: int = 0
    # 'geodesic' per the two-stage schedule; 'l2' gives the MSE-only baseline
    stage2_loss: str = "geodesic"
    betas: tuple[float, float] = (0.9, 0.999)

    def __post_init__(self):
        if self.epochs_stage1 < 0 or self.epochs_stage2 < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("batch_size and learning_rate must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.stage2_loss not in ("geodesic", "l2"):
            raise ValueError(f"unknown stage2_loss {self.stage2_loss!r}")


@dataclass
class EpochRecord:
    epoch: int
    stage: int
    mean_loss: float
    mean_geodesic_deg: float


@dataclass
class TrainResult:
    net: PoseNetwork
    history: list[EpochRecord] = field(default_factory=list)
    optimizer_state: dict | None = None


def _targets(net: PoseNetwork, batch: Sequence[TrainingSample]):
    gt_rot = torch.as_tensor(np.stack([s.gt_rotation for s in batch]), dtype=torch.float32)
    if net.tag == "correction":
        gt_t = torch.as_tensor(np.stack([s.gt_translation for s in batch]), dtype=torch.float32)
    elif net.tag == "slice_pose":
        gt_t = torch.as_tensor([s.gt_slice_z for s in batch], dtype=torch.float32)
    else:
        gt_t = None
    return gt_rot, gt_t


def batch_loss(net: PoseNetwork, batch: Sequence[TrainingSample], stage: int, lam: float,
               rotation_loss: str | None = None, dtype=torch.float32):
    x = samples_to_tensor(net, batch, dtype=dtype)
    rot, trans, z = net(x)
    gt_rot, gt_t = _targets(net, batch)
    pred_t = trans if trans is not None else z
    loss = loss_total(rot, gt_rot.to(dtype), stage, lam, pred_t, None if gt_t is None else gt_t.to(dtype),
                      rotation_loss=rotation_loss)
    return loss, rot


def _epoch_samples(data, epoch: int, seed: int) -> Iterable[TrainingSample]:
    if isinstance(data, SampleStream) or hasattr(data, "epoch"):
        return data.epoch(epoch)
    order = np.random.default_rng([seed, epoch]).permutation(len(data))
    return (data[i] for i in order)


def _batches(samples: Iterable[TrainingSample], size: int):
    buf = []
    for s in samples:
        buf.append(s)
        if len(buf) == size:
            yield buf
            buf = []
    if buf:
        yield buf


def _geodesic_deg(pred: torch.Tensor, batch: Sequence[TrainingSample]) -> list[float]:
    v = pred.detach().double().numpy()
    return [np.degrees(so3.geodesic_distance(so3.rotvec_to_matrix(vi), s.gt_matrix)) for vi, s in zip(v, batch)]


def train(net: PoseNetwork, data, cfg: TrainConfig, start_epoch: int = 0,
          stages: Sequence[int] = (1, 2), optimizer_state: dict | None = None) -> TrainResult:
    """Run epochs_stage1 epochs of L2 rotation loss, then epochs_stage2 of cfg.stage2_loss.

    `data` is a SampleStream (fresh samples every epoch) or a fixed sequence
    of samples (reshuffled every epoch). Single-threaded and deterministic
    for a fixed cfg.seed.
    """
    if hasattr(data, "__len__") and len(data) == 0:
        raise ValueError("training data is empty")
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    torch.manual_seed(cfg.seed)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate, betas=cfg.betas)
    if optimizer_state is not None:
        opt.load_state_dict(optimizer_state)
    history: list[EpochRecord] = []
    epoch = start_epoch
    plan = []
    if 1 in stages:
        plan += [1] * cfg.epochs_stage1
    if 2 in stages:
        plan += [2] * cfg.epochs_stage2
    try:
        for stage in plan:
            rot_loss = None if stage == 1 else cfg.stage2_loss
            losses, errs = [], []
            net.train(True)
            for batch in _batches(_epoch_samples(data, epoch, cfg.seed), cfg.batch_size):
                loss, rot = batch_loss(net, batch, stage, cfg.lam, rot_loss)
                if not torch.isfinite(loss):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch} (stage {stage}); "
                                           f"lr={cfg.learning_rate}, last finite loss={losses[-1] if losses else None}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                losses.append(float(loss.detach()) * len(batch))
                errs.extend(_geodesic_deg(rot, batch))
            n = len(errs)
            rec = EpochRecord(epoch, stage, sum(losses) / max(n, 1), float(np.mean(errs)) if n else math.nan)
            log.info("epoch %d stage %d loss %.4f geodesic %.2f deg", rec.epoch, rec.stage, rec.mean_loss, rec.mean_geodesic_deg)
            history.append(rec)
            epoch += 1
    finally:
        torch.set_num_threads(threads)
    net.eval()
    return TrainResult(net, history, opt.state_dict())


def write_history_csv(path, history: Sequence[EpochRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "stage", "mean_loss", "mean_geodesic_deg"])
        for r in history:
            w.writerow([r.epoch, r.stage, repr(r.mean_loss), repr(r.mean_geodesic_deg)])
    tmp.replace(path)


def read_history_csv(path) -> list[EpochRecord]:
    with Path(path).open() as fh:
        return [EpochRecord(int(r["epoch"]), int(r["stage"]), float(r["mean_loss"]), float(r["mean_geodesic_deg"]))
                for r in csv.DictReader(fh)]


def gradient_check(net: PoseNetwork, samples: Sequence[TrainingSample], stage: int,
                   h: float = 1e-6, lam: float = 0.01, max_params: int | None = None,
                   seed: int = 0, per_entry: bool = False) -> float:
    """Max relative error between reverse-mode and central-difference parameter gradients.

    Runs on a float64 copy in train mode (batch statistics), so `net` is not
    modified. By default the error of each parameter tensor is
    ||g - fd|| / max(||g||, ||fd||, 1e-6) over its checked entries; with
    `per_entry` it is |g - fd| / max(|g|, |fd|, 1e-6) for every entry.
    ReLU and max-pool kinks crossed by the +-h probe make single entries
    noisy, which is why the step is small and the per-tensor form is default.
    """
    net = copy.deepcopy(net).double()
    net.train(True)
    params = [p for p in net.parameters()]
    net.zero_grad()
    loss, _ = batch_loss(net, samples, stage, lam, dtype=torch.float64)
    loss.backward()
    grads = [p.grad.detach().clone() for p in params]

    entries = [(pi, j) for pi, p in enumerate(params) for j in range(p.numel())]
    if max_params is not None and len(entries) > max_params:
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(entries), size=max_params, replace=False)
        entries = [entries[i] for i in sorted(pick)]
    pairs: dict[int, list[tuple[float, float]]] = {}
    with torch.no_grad():
        for pi, j in entries:
            flat = params[pi].data.view(-1)
            orig = flat[j].item()
            flat[j] = orig + h
            fp = float(batch_loss(net, samples, stage, lam, dtype=torch.float64)[0])
            flat[j] = orig - h
            fm = float(batch_loss(net, samples, stage, lam, dtype=torch.float64)[0])
            flat[j] = orig
            fd = (fp - fm) / (2 * h)
            g = float(grads[pi].view(-1)[j])
            if not (math.isfinite(g) and math.isfinite(fd)):
                return math.inf
            pairs.setdefault(pi, []).append((g, fd))
    worst = 0.0
    for vals in pairs.values():
        g, fd = np.array(vals).T
        if per_entry:
            rel = np.abs(g - fd) / np.maximum(np.maximum(np.abs(g), np.abs(fd)), 1e-6)
            worst = max(worst, float(rel.max()))
        else:
            scale = max(np.linalg.norm(g), np.linalg.norm(fd), 1e-6)
            worst = max(worst, float(np.linalg.norm(g - fd) / scale))
    return worst


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
