"""Rotation and translation losses.

Stage 1 penalises the Euclidean distance between rotation vectors, stage 2
the geodesic distance between the corresponding rotation matrices. The
translation term is a mean squared error in mm^2 weighted by lambda.
"""
from __future__ import annotations

import numpy as np
import torch

from .. import so3


class GeodesicLoss(torch.autograd.Function):
    """Per-sample geodesic distance; backward uses the analytic SO(3) gradient."""

    @staticmethod
    def forward(ctx, v_pred: torch.Tensor, R_gt: torch.Tensor):
        v = v_pred.detach().cpu().double().numpy()
        R = R_gt.detach().cpu().double().numpy()
        d = np.empty(len(v))
        g = np.empty((len(v), 3))
        flags = 0
        for i in range(len(v)):
            d[i] = so3.geodesic_distance(so3.rotvec_to_matrix(v[i]), R[i])
            g[i], flagged = so3.geodesic_loss_grad(v[i], R[i])
            flags += flagged
        ctx.save_for_backward(torch.as_tensor(g, dtype=v_pred.dtype))
        ctx.flagged = flags
        return torch.as_tensor(d, dtype=v_pred.dtype)

    @staticmethod
    def backward(ctx, grad_out):
        (g,) = ctx.saved_tensors
        return grad_out[:, None] * g, None


def geodesic_loss(v_pred: torch.Tensor, R_gt: torch.Tensor) -> torch.Tensor:
    return GeodesicLoss.apply(v_pred, R_gt)


def rotvec_l2_loss(v_pred: torch.Tensor, v_gt: torch.Tensor) -> torch.Tensor:
    """Per-sample ||v_pred - v_gt||_2, with a zero subgradient at exact agreement."""
    sq = ((v_pred - v_gt) ** 2).sum(dim=-1)
    zero = sq == 0
    safe = torch.where(zero, torch.ones_like(sq), sq)
    # non-finite values must propagate so that divergence is detected
    return torch.where(zero, torch.zeros_like(sq), torch.sqrt(safe))


def loss_total(pred_rot: torch.Tensor, gt_rot: torch.Tensor, stage: int, lam: float = 0.0,
               pred_trans: torch.Tensor | None = None, gt_trans: torch.Tensor | None = None,
               rotation_loss: str | None = None) -> torch.Tensor:
    """Batch-mean of rotation term + lam * translation MSE.

    `rotation_loss` overrides the stage's default ('l2' for stage 1,
    'geodesic' for stage 2); it exists for the MSE-only fine-tuning baseline.
    """
    if stage not in (1, 2):
        raise ValueError(f"stage must be 1 or 2, got {stage}")
    kind = rotation_loss or ("l2" if stage == 1 else "geodesic")
    if kind == "l2":
        rot = rotvec_l2_loss(pred_rot, gt_rot)
    elif kind == "geodesic":
        R_gt = torch.as_tensor(np.stack([so3.rotvec_to_matrix(v) for v in gt_rot.detach().double().numpy()]))
        rot = geodesic_loss(pred_rot, R_gt)
    else:
        raise ValueError(f"unknown rotation loss {kind!r}")
    total = rot.mean()
    if pred_trans is not None and gt_trans is not None:
        diff = (pred_trans - gt_trans).reshape(len(pred_trans), -1)
        total = total + lam * (diff ** 2).mean(dim=-1).mean()
    return total


def sample_loss(pred_rot, gt_rot, stage: int, lam: float = 0.0, pred_trans=None, gt_trans=None) -> float:
    """Scalar loss for a single prediction given as numpy arrays."""
    t = lambda a: None if a is None else torch.as_tensor(np.atleast_2d(np.asarray(a, dtype=float)))
    return float(loss_total(t(pred_rot), t(gt_rot), stage, lam, t(pred_trans), t(gt_trans)))
