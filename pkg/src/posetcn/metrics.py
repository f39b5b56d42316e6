"""Pose errors, evaluation protocols and training losses.

Poses are ``[..., J, D]`` arrays; every metric averages over all leading
axes and joints.  Losses come with a ``*_backward`` returning the gradient
with respect to the prediction.
"""
from __future__ import annotations

import numpy as np

from .errors import DegenerateBatchError, ShapeError
from .skeleton import Skeleton


def _check_pair(pred, gt):
    pred = np.asarray(pred, np.float64)
    gt = np.asarray(gt, np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction shape {pred.shape} != ground-truth shape {gt.shape}")
    return pred, gt


def _safe_unit(diff):
    norm = np.linalg.norm(diff, axis=-1, keepdims=True)
    return np.divide(diff, norm, out=np.zeros_like(diff), where=norm > 0)


def mpjpe(pred, gt) -> float:
    """Mean per-joint position error (Protocol 1)."""
    pred, gt = _check_pair(pred, gt)
    return float(np.linalg.norm(pred - gt, axis=-1).mean())


def mpjpe_backward(pred, gt, weights=None):
    """Gradient of :func:`mpjpe` (or its ``weights``-weighted mean over leading axes)."""
    pred, gt = _check_pair(pred, gt)
    unit = _safe_unit(pred - gt)
    if weights is None:
        return unit / (unit.size // unit.shape[-1])
    w = np.asarray(weights, np.float64)
    per_sample = np.prod(unit.shape[w.ndim:-1])
    w = w.reshape(w.shape + (1,) * (unit.ndim - w.ndim))
    return unit * w / (w.sum() * per_sample)


def procrustes_align(pred, gt):
    """Per-frame similarity alignment of ``pred`` onto ``gt``, both ``[..., J, 3]``.

    Closed-form least squares (Umeyama): both poses are centered on their
    mean joint, the rotation comes from an SVD of the cross-covariance with
    the determinant forced to +1, then scale and translation follow.
    """
    pred, gt = _check_pair(pred, gt)
    if pred.shape[-2] < 3:
        raise ShapeError("Procrustes alignment needs at least 3 joints per frame")
    mu_p = pred.mean(axis=-2, keepdims=True)
    mu_g = gt.mean(axis=-2, keepdims=True)
    p0, g0 = pred - mu_p, gt - mu_g
    norm_p = np.sqrt((p0 ** 2).sum(axis=(-2, -1), keepdims=True))
    norm_g = np.sqrt((g0 ** 2).sum(axis=(-2, -1), keepdims=True))
    bad = np.argwhere((norm_p[..., 0, 0] < 1e-12) | (norm_g[..., 0, 0] < 1e-12))
    if bad.size:
        raise DegenerateBatchError(f"degenerate frame {tuple(int(i) for i in bad[0])}: all joints coincide")
    p0 = p0 / norm_p
    g0 = g0 / norm_g

    h = np.swapaxes(g0, -1, -2) @ p0
    u, s, vt = np.linalg.svd(h)
    v = np.swapaxes(vt, -1, -2)
    sign = np.sign(np.linalg.det(v @ np.swapaxes(u, -1, -2)))
    v[..., :, -1] *= sign[..., None]
    s[..., -1] *= sign
    rot = v @ np.swapaxes(u, -1, -2)

    scale = s.sum(axis=-1)[..., None, None] * norm_g / norm_p
    return scale * (pred - mu_p) @ rot + mu_g


def p_mpjpe(pred, gt) -> float:
    """MPJPE after per-frame rotation, translation and scale alignment (Protocol 2)."""
    return mpjpe(procrustes_align(pred, gt), gt)


def scale_align(pred, gt):
    """Per-frame least-squares scale ``<pred, gt> / <pred, pred>`` applied to ``pred``."""
    pred, gt = _check_pair(pred, gt)
    pp = (pred * pred).sum(axis=(-2, -1), keepdims=True)
    bad = np.argwhere(pp[..., 0, 0] <= 0)
    if bad.size:
        raise DegenerateBatchError(f"zero-norm prediction at frame {tuple(int(i) for i in bad[0])}")
    return pred * ((pred * gt).sum(axis=(-2, -1), keepdims=True) / pp)


def n_mpjpe(pred, gt) -> float:
    """MPJPE after per-frame scale-only alignment (Protocol 3)."""
    return mpjpe(scale_align(pred, gt), gt)


def mpjve(pred, gt, fps=None) -> float:
    """MPJPE of first temporal differences, in units per frame.

    ``pred`` and ``gt`` are ``[T, J, 3]``.  ``fps`` is accepted for callers
    that carry it but does not rescale the result.
    """
    pred, gt = _check_pair(pred, gt)
    if pred.shape[0] < 2:
        raise ShapeError("velocity error needs at least 2 frames")
    return mpjpe(np.diff(pred, axis=0), np.diff(gt, axis=0))


def _check_depths(gt_traj):
    bad = np.argwhere(gt_traj[..., 2] <= 0)
    if bad.size:
        raise ShapeError(f"non-positive ground-truth depth at frame {tuple(int(i) for i in bad[0])}")


def wmpjpe(pred_traj, gt_traj) -> float:
    """Depth-weighted trajectory error: mean of ``||pred - gt|| / gt_z``."""
    pred, gt = _check_pair(pred_traj, gt_traj)
    _check_depths(gt)
    return float((np.linalg.norm(pred - gt, axis=-1) / gt[..., 2]).mean())


def wmpjpe_backward(pred_traj, gt_traj):
    pred, gt = _check_pair(pred_traj, gt_traj)
    _check_depths(gt)
    unit = _safe_unit(pred - gt)
    return unit / gt[..., 2:3] / gt[..., 0].size


def bone_lengths(pose, skeleton: Skeleton):
    """Lengths of every parent-child edge, ``[..., num_bones]``."""
    pose = np.asarray(pose, np.float64)
    child, parent = map(list, zip(*skeleton.bones))
    return np.linalg.norm(pose[..., child, :] - pose[..., parent, :], axis=-1)


def _check_batches(unlabeled, labeled):
    if len(unlabeled) == 0 or len(labeled) == 0:
        raise ShapeError("bone-length loss needs non-empty labeled and unlabeled batches")


def bone_length_loss(unlabeled, labeled, skeleton: Skeleton) -> float:
    """Squared L2 distance between batch-mean bone-length vectors.

    Both inputs are ``[N, J, 3]``; the labeled side acts as a constant target.
    """
    _check_batches(unlabeled, labeled)
    diff = bone_lengths(unlabeled, skeleton).mean(axis=0) - bone_lengths(labeled, skeleton).mean(axis=0)
    return float((diff ** 2).sum())


def bone_length_loss_backward(unlabeled, labeled, skeleton: Skeleton):
    """Gradient of :func:`bone_length_loss` with respect to the unlabeled poses."""
    _check_batches(unlabeled, labeled)
    unlabeled = np.asarray(unlabeled, np.float64)
    n = unlabeled.shape[0]
    diff = bone_lengths(unlabeled, skeleton).mean(axis=0) - bone_lengths(labeled, skeleton).mean(axis=0)
    grad = np.zeros_like(unlabeled)
    for b, (child, parent) in enumerate(skeleton.bones):
        unit = _safe_unit(unlabeled[:, child] - unlabeled[:, parent])
        g = 2 * diff[b] / n * unit
        grad[:, child] += g
        grad[:, parent] -= g
    return grad


def reprojection_loss(projected_2d, input_2d) -> float:
    """Mean per-joint 2D distance between projected and observed keypoints."""
    return mpjpe(projected_2d, input_2d)


def reprojection_loss_backward(projected_2d, input_2d):
    return mpjpe_backward(projected_2d, input_2d)
