"""Semi-supervised training by back-projection.

Each step feeds a batch whose first half is labeled and second half
unlabeled through a pose network and a separate trajectory network.  The
labeled half is supervised in 3D (MPJPE for the pose, depth-weighted error
for the trajectory).  The unlabeled half's pose plus trajectory is projected
through the camera and compared with the 2D input, and its mean bone lengths
are pulled toward those of the labeled half.
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from . import metrics
from .camera import normalize_screen_coordinates, project, project_backward
from .errors import ConfigError, DataFormatError, NonFiniteError
from .model import TemporalModel, predict_sequence
from .skeleton import Skeleton
from .training import (
    MM_PER_UNIT,
    AMSGrad,
    ClipSampler,
    TrainPlan,
    backward_pass,
    bn_momentum_schedule,
    evaluate,
    lr_schedule,
    make_batches,
    model_pass,
    restore,
    snapshot,
)

log = logging.getLogger(__name__)

# warmup defaults: 1 epoch for large labeled sets, 20 otherwise
LARGE_LABELED_SET = 50_000


@dataclass
class SemiSupPlan:
    base: TrainPlan = field(default_factory=TrainPlan)
    warmup_epochs: int | None = None  # None -> chosen from the labeled set size
    bone_loss_weight: float = 1.0
    reprojection_weight: float = 1.0
    traj_loss_weight: float = 1.0

    labeled_fraction_per_batch = 0.5

    def __post_init__(self):
        if self.warmup_epochs is not None and self.warmup_epochs < 0:
            raise ConfigError("warmup_epochs must be >= 0")
        if min(self.bone_loss_weight, self.reprojection_weight, self.traj_loss_weight) < 0:
            raise ConfigError("loss weights must be >= 0")

    def resolved_warmup(self, labeled_frames: int) -> int:
        if self.warmup_epochs is not None:
            return self.warmup_epochs
        return 1 if labeled_frames >= LARGE_LABELED_SET else 20

    def to_dict(self) -> dict:
        d = {k: v for k, v in dataclasses.asdict(self).items() if k != "base"}
        d["base"] = self.base.to_dict()
        return d


class _Stream:
    """Endless reshuffled stream of chunk indices."""

    def __init__(self, size, rng):
        self.size, self.rng = size, rng
        self.order, self.pos = rng.permutation(size), 0

    def take(self, n):
        out = []
        while n:
            if self.pos == self.size:
                self.order, self.pos = self.rng.permutation(self.size), 0
            k = min(n, self.size - self.pos)
            out.append(self.order[self.pos:self.pos + k])
            self.pos += k
            n -= k
        return np.concatenate(out)


@dataclass
class UnlabeledLosses:
    reprojection: float
    bone: float
    grad_pose: np.ndarray  # [N, C, J, 3]
    grad_traj: np.ndarray  # [N, C, 1, 3]
    frames: int
    skipped: int


def unlabeled_losses(pred, traj, batch, cameras, labeled_pose, skeleton: Skeleton, plan: SemiSupPlan):
    """Back-projection and bone-length terms for the unlabeled half, with gradients.

    ``pred`` is ``[N, C, J, 3]`` root-relative (model units), ``traj`` is
    ``[N, C, 1, 3]``.  Frames with a joint at or behind the camera plane are
    dropped from both terms.  The reprojection error is measured in pixels
    divided by the image width.
    """
    points = (pred.astype(np.float64) + traj) * MM_PER_UNIT
    valid = (batch["mask"] > 0) & (points[..., 2] > 0).all(axis=-1)
    skipped = int(((batch["mask"] > 0) & ~valid).sum())
    n_valid = int(valid.sum())
    grad_pose = np.zeros(pred.shape)
    grad_traj = np.zeros(traj.shape)
    if n_valid == 0:
        return UnlabeledLosses(0.0, 0.0, grad_pose, grad_traj, 0, skipped)

    cam_of = np.array([cameras[i].name for i in batch["seq_index"]])
    reproj = 0.0
    n_joints = pred.shape[2]
    for name in np.unique(cam_of):
        cam = next(cameras[i] for i in batch["seq_index"] if cameras[i].name == name)
        sel = (cam_of == name)[:, None] & valid
        pts = points[sel]
        proj = project(pts, cam)
        diff = proj - batch["target_2d"][sel]
        dist = np.linalg.norm(diff, axis=-1)
        reproj += dist.sum() / cam.width
        g2d = metrics._safe_unit(diff) / (cam.width * n_valid * n_joints)
        g_pts = project_backward(g2d, pts, cam) * (plan.reprojection_weight * MM_PER_UNIT)
        grad_pose[sel] += g_pts
        grad_traj[sel] += g_pts.sum(axis=1, keepdims=True)
    reproj /= n_valid * n_joints

    unl = pred[valid].astype(np.float64)
    bone = metrics.bone_length_loss(unl, labeled_pose, skeleton)
    grad_pose[valid] += plan.bone_loss_weight * metrics.bone_length_loss_backward(unl, labeled_pose, skeleton)
    return UnlabeledLosses(reproj, bone, grad_pose, grad_traj, n_valid, skipped)


def trajectory_loss(traj, target, mask):
    """WMPJPE over valid frames and its gradient; ``traj`` is ``[N, C, 1, 3]``."""
    sel = mask > 0
    loss = metrics.wmpjpe(traj[sel][:, 0], target[sel])
    grad = np.zeros(traj.shape)
    grad[sel] = metrics.wmpjpe_backward(traj[sel][:, 0], target[sel])[:, None]
    return loss, grad


def _check_unlabeled(sequences):
    for s in sequences:
        if s.camera is None:
            raise DataFormatError(f"unlabeled sequence {s.id} has no camera intrinsics")
        if s.frames_2d is None:
            raise DataFormatError(f"unlabeled sequence {s.id} has no 2D keypoints")


def train_semisupervised(pose_model: TemporalModel, traj_model: TemporalModel, labeled, unlabeled,
                         plan: SemiSupPlan, skeleton: Skeleton, eval_seqs=(), on_epoch=None):
    """Jointly train pose and trajectory networks; returns the per-epoch log.

    With no unlabeled sequences every step reduces to a supervised pose step
    (identical random stream to :func:`~posetcn.training.train_supervised`)
    plus trajectory regression on the labeled data.
    """
    base = plan.base
    if traj_model.config.joints_out != 1:
        raise ConfigError("trajectory model must regress a single joint")
    pose_ids = {id(p.value) for p in pose_model.parameters()}
    if any(id(p.value) in pose_ids for p in traj_model.parameters()):
        raise ConfigError("pose and trajectory networks must not share parameters")
    _check_unlabeled(unlabeled)
    for s in labeled:
        if s.pose is None:
            raise DataFormatError(f"labeled sequence {s.id} needs 3D poses and a trajectory")
    pairs = skeleton.left_right_pairs
    rng = np.random.default_rng(base.seed)
    ss = np.random.SeedSequence(base.seed).spawn(2)
    traj_rng, unl_rng = np.random.default_rng(ss[0]), np.random.default_rng(ss[1])

    rf, c = pose_model.receptive_field, base.chunk_size
    lab_sampler = ClipSampler(labeled, rf, c, pose_model.config.causal, pairs)
    unl_sampler = ClipSampler(unlabeled, rf, c, pose_model.config.causal, pairs, with_targets=False) \
        if unlabeled else None
    unl_cameras = [s.camera for s in unlabeled]
    stream = _Stream(len(unl_sampler), unl_rng) if unl_sampler else None
    pose_opt = AMSGrad(pose_model.parameters(), base.optimizer_betas)
    traj_opt = AMSGrad(traj_model.parameters(), base.optimizer_betas)
    labeled_frames = sum(s.num_frames for s in labeled)
    warmup = plan.resolved_warmup(labeled_frames)
    if not unlabeled:
        log.warning("no unlabeled sequences: semi-supervised training reduces to supervised training")

    history, skipped_total = [], 0
    for epoch in range(base.epochs):
        lr = lr_schedule(epoch, base.lr_init, base.lr_decay)
        beta = bn_momentum_schedule(epoch, base.epochs, base.bn_momentum_start, base.bn_momentum_end)
        pose_model.set_bn_momentum(beta)
        traj_model.set_bn_momentum(beta)
        good = snapshot([pose_model, traj_model])
        semi = stream is not None and epoch >= warmup
        sums = dict.fromkeys(("pose", "traj", "reproj", "bone"), 0.0)
        lab_frames = unl_frames = 0.0
        skipped_epoch = 0
        n_steps = 0
        for batch in make_batches(lab_sampler, base, rng):
            w = batch["mask"]
            x_lab = batch["inputs"].astype(np.float32)
            pose_model.zero_grad()
            traj_model.zero_grad()
            if semi:
                ub = unl_sampler.gather(stream.take(len(w)))
                x = np.concatenate([x_lab, ub["inputs"].astype(np.float32)])
            else:
                x = x_lab
            n_lab = len(w)
            pred = model_pass(pose_model, x, True, rng, c)
            traj = model_pass(traj_model, x, True, traj_rng, c)

            pose_loss = float((np.linalg.norm(pred[:n_lab] - batch["pose"], axis=-1).mean(-1) * w).sum() / w.sum())
            grad_pose = np.zeros(pred.shape)
            grad_pose[:n_lab] = metrics.mpjpe_backward(pred[:n_lab], batch["pose"], w)
            grad_traj = np.zeros(traj.shape)
            traj_loss, grad_traj[:n_lab] = trajectory_loss(traj[:n_lab], batch["trajectory"], w)
            grad_traj *= plan.traj_loss_weight
            if semi:
                lab_pose = pred[:n_lab][w > 0].astype(np.float64)
                u = unlabeled_losses(pred[n_lab:], traj[n_lab:], ub, unl_cameras, lab_pose, skeleton, plan)
                grad_pose[n_lab:] = u.grad_pose
                grad_traj[n_lab:] = u.grad_traj
                sums["reproj"] += u.reprojection
                sums["bone"] += u.bone
                unl_frames += u.frames
                skipped_epoch += u.skipped
            if not (np.isfinite(pose_loss) and np.isfinite(traj_loss)):
                restore([pose_model, traj_model], good)
                raise NonFiniteError(f"semi-supervised training diverged at epoch {epoch}")
            backward_pass(pose_model, grad_pose)
            backward_pass(traj_model, grad_traj)
            try:
                pose_opt.step(lr)
                traj_opt.step(lr)
            except NonFiniteError:
                restore([pose_model, traj_model], good)
                raise
            sums["pose"] += pose_loss * w.sum()
            sums["traj"] += traj_loss * w.sum()
            lab_frames += w.sum()
            n_steps += 1

        row = {
            "epoch": epoch,
            "train_loss": sums["pose"] / lab_frames * MM_PER_UNIT,
            "lr": lr,
            "bn_momentum": beta,
            "reproj_loss": sums["reproj"] / n_steps if semi else 0.0,
            "bone_loss": sums["bone"] / n_steps if semi else 0.0,
            "traj_wmpjpe": sums["traj"] / lab_frames,
            "labeled_frames": int(lab_frames),
            "unlabeled_frames": int(unl_frames),
            "unlabeled_skipped": skipped_epoch,
        }
        if eval_seqs:
            ev = evaluate(pose_model, eval_seqs, base.flip_test, pairs)
            row.update(eval_mpjpe=ev["mpjpe"], eval_pmpjpe=ev["p_mpjpe"], eval_mpjve=ev["mpjve"])
        else:
            row.update(eval_mpjpe=float("nan"), eval_pmpjpe=float("nan"), eval_mpjve=float("nan"))
        history.append(row)
        skipped_total += skipped_epoch
        log.info("epoch %d pose %.2f mm reproj %.4f bone %.5f", epoch, row["train_loss"], row["reproj_loss"],
                 row["bone_loss"])
        if on_epoch is not None:
            on_epoch(epoch, row)
    if skipped_total:
        log.info("dropped %d unlabeled frames with joints behind the camera", skipped_total)
    return history


def regress_trajectory(traj_model: TemporalModel, keypoints_2d, camera) -> np.ndarray:
    """Camera-space root position ``[T, 3]`` in mm for pixel keypoints ``[T, J, 2]``."""
    if traj_model.config.joints_out != 1:
        raise ConfigError("trajectory model must regress a single joint")
    inputs = normalize_screen_coordinates(np.asarray(keypoints_2d, np.float64), camera.width, camera.height)
    return predict_sequence(traj_model, inputs)[:, 0] * MM_PER_UNIT
