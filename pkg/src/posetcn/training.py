"""Supervised training: AMSGrad, schedules, clip batching and the epoch loop."""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from . import metrics
from .camera import normalize_screen_coordinates
from .dataio import DatasetFile
from .errors import ConfigError, NonFiniteError
from .model import TemporalModel, flip_permutation, flip_poses, predict_sequence

log = logging.getLogger(__name__)

# model outputs are in meters, stored data in millimeters
MM_PER_UNIT = 1000.0


# -- optimizer ---------------------------------------------------------------


@dataclass
class AMSGradState:
    m: list
    v: list
    v_max: list
    step: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AMSGradState":
        z = [np.zeros_like(p) for p in params]
        return cls([a.copy() for a in z], [a.copy() for a in z], z)


def amsgrad_step(params, grads, state: AMSGradState, lr: float, betas=(0.9, 0.999), eps=1e-8, names=None):
    """In-place AMSGrad update of ``params`` (list of arrays).

    Adam with the bias-corrected second moment replaced by its running
    maximum, which keeps per-coordinate step sizes non-increasing.
    """
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    for i, g in enumerate(grads):
        if g.shape != params[i].shape:
            raise ConfigError(f"gradient {i} shape {g.shape} != parameter shape {params[i].shape}")
        if not np.all(np.isfinite(g)):
            name = names[i] if names else f"#{i}"
            raise NonFiniteError(f"non-finite gradient in parameter block {name}")
    b1, b2 = betas
    state.step += 1
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for p, g, m, v, vmax in zip(params, grads, state.m, state.v, state.v_max):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        np.maximum(vmax, v, out=vmax)
        p -= lr * (m / c1) / (np.sqrt(vmax / c2) + eps)


class AMSGrad:
    """AMSGrad over a list of :class:`~posetcn.numerics.Parameter`."""

    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.betas, self.eps = tuple(betas), eps
        self.state = AMSGradState.zeros_like([p.value for p in self.params])

    @property
    def step_count(self) -> int:
        return self.state.step

    def step(self, lr: float):
        amsgrad_step([p.value for p in self.params], [p.grad for p in self.params], self.state, lr,
                     self.betas, self.eps, names=[p.name for p in self.params])

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for p, m, v, vmax in zip(self.params, self.state.m, self.state.v, self.state.v_max):
            out[f"m/{p.name}"] = m
            out[f"v/{p.name}"] = v
            out[f"v_max/{p.name}"] = vmax
        return out

    def load_state_dict(self, arrays: dict[str, np.ndarray], step: int):
        for p, m, v, vmax in zip(self.params, self.state.m, self.state.v, self.state.v_max):
            m[...] = arrays[f"m/{p.name}"]
            v[...] = arrays[f"v/{p.name}"]
            vmax[...] = arrays[f"v_max/{p.name}"]
        self.state.step = step


# -- schedules ---------------------------------------------------------------


def lr_schedule(epoch: int, lr_init: float = 1e-3, lr_decay: float = 0.95) -> float:
    return lr_init * lr_decay ** epoch


def bn_momentum_schedule(epoch: int, total_epochs: int, start: float = 0.1, end: float = 0.001) -> float:
    """Exponential decay from ``start`` at epoch 0 to ``end`` at the last epoch."""
    if not 0 <= epoch < total_epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {total_epochs})")
    if total_epochs == 1:
        return start
    return start * (end / start) ** (epoch / (total_epochs - 1))


# -- plan and data -----------------------------------------------------------


@dataclass
class TrainPlan:
    epochs: int = 80
    lr_init: float = 1e-3
    lr_decay: float = 0.95
    batch_frames: int = 1024
    chunk_size: int = 1
    bn_momentum_start: float = 0.1
    bn_momentum_end: float = 0.001
    flip_train: bool = True
    flip_test: bool = True
    seed: int = 0
    optimizer_betas: tuple[float, float] = (0.9, 0.999)
    amsgrad: bool = True
    eval_fraction: float = 0.1

    def __post_init__(self):
        if not 0 < self.lr_decay <= 1:
            raise ConfigError(f"lr_decay must be in (0, 1], got {self.lr_decay}")
        if self.chunk_size < 1 or self.batch_frames < 1:
            raise ConfigError("chunk_size and batch_frames must be >= 1")
        if self.batch_frames % self.chunk_size:
            raise ConfigError(f"batch_frames {self.batch_frames} not divisible by chunk_size {self.chunk_size}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not self.amsgrad:
            raise ConfigError("only AMSGrad is supported")
        if not 0 <= self.eval_fraction < 1:
            raise ConfigError("eval_fraction must be in [0, 1)")
        self.optimizer_betas = tuple(self.optimizer_betas)

    @property
    def samples_per_batch(self) -> int:
        return self.batch_frames // self.chunk_size

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["optimizer_betas"] = list(self.optimizer_betas)
        return d


@dataclass
class PreparedSequence:
    """Model-ready arrays for one sequence (normalized 2D, 3D in meters)."""

    id: str
    inputs: np.ndarray  # [T, J, 2] float32, x in [-1, 1]
    pose: np.ndarray | None  # [T, J, 3] float32 root-relative
    trajectory: np.ndarray | None  # [T, 3] float32
    camera: object = None
    frames_2d: np.ndarray | None = field(default=None, repr=False)  # raw pixels

    @property
    def num_frames(self) -> int:
        return self.inputs.shape[0]


def prepare(ds: DatasetFile, eval_fraction: float = 0.0, labeled: bool = True):
    """Split every sequence into a training head and a held-out tail (last ``eval_fraction``)."""
    train, held_out = [], []
    for seq in ds.sequences:
        cam = ds.cameras[seq.camera]
        inputs = normalize_screen_coordinates(seq.frames_2d, cam.width, cam.height).astype(np.float32)
        pose = traj = None
        if labeled and seq.labeled:
            pose = (seq.frames_3d / MM_PER_UNIT).astype(np.float32)
            traj = (seq.trajectory / MM_PER_UNIT).astype(np.float32)
        n_eval = int(round(seq.num_frames * eval_fraction))
        cut = seq.num_frames - n_eval

        def part(a, sl):
            return None if a is None else a[sl]

        parts = [(train, slice(0, cut), "")] if cut > 0 else []
        if n_eval > 0:
            parts.append((held_out, slice(cut, None), ":eval"))
        for target, sl, suffix in parts:
            target.append(PreparedSequence(seq.id + suffix, inputs[sl], part(pose, sl), part(traj, sl), cam,
                                           seq.frames_2d[sl]))
    return train, held_out


class ClipSampler:
    """Cuts sequences into chunks of ``chunk_size`` target frames with their receptive fields.

    Inputs are padded by replicating boundary frames; a chunk that runs
    past the end of its sequence is padded too and its extra targets are
    masked out, so every frame is targeted exactly once per epoch.
    """

    def __init__(self, sequences, receptive_field: int, chunk_size: int = 1, causal: bool = False,
                 left_right_pairs=(), with_targets: bool = True):
        if not sequences:
            raise ConfigError("clip sampler needs at least one sequence")
        self.rf, self.chunk_size, self.causal = receptive_field, chunk_size, causal
        self.sequences = sequences
        left = receptive_field - 1 if causal else (receptive_field - 1) // 2
        right = receptive_field - 1 - left + chunk_size - 1
        self._inputs = [np.pad(s.inputs, ((left, right), (0, 0), (0, 0)), mode="edge") for s in sequences]
        self._with_targets = with_targets
        self._pose = self._traj = None
        if with_targets:
            extra = ((0, chunk_size - 1), (0, 0), (0, 0))
            self._pose = [np.pad(s.pose, extra, mode="edge") for s in sequences]
            self._traj = [np.pad(s.trajectory, extra[:2], mode="edge") for s in sequences]
        self._pixels = None
        if all(s.frames_2d is not None for s in sequences):
            self._pixels = [np.pad(s.frames_2d, ((0, chunk_size - 1), (0, 0), (0, 0)), mode="edge")
                            for s in sequences]
        self.chunks = np.array([(i, start) for i, s in enumerate(sequences)
                                for start in range(0, s.num_frames, chunk_size)], dtype=np.int64)
        self.num_joints = sequences[0].inputs.shape[1]
        self.perm = flip_permutation(self.num_joints, left_right_pairs)

    def __len__(self) -> int:
        return len(self.chunks)

    def num_batches(self, samples_per_batch: int) -> int:
        return -(-len(self.chunks) // samples_per_batch)

    def gather(self, idx, flip_mask=None):
        """Assemble samples ``idx`` into a batch dict.

        Keys: ``inputs [N, 2J, RF + C - 1]``, ``mask [N, C]``, ``seq_index [N]``,
        plus ``pose``/``trajectory`` targets and raw-pixel ``target_2d`` when
        available.  ``flip_mask`` mirrors the selected samples (pixel
        targets are left untouched).
        """
        c, span = self.chunk_size, self.rf + self.chunk_size - 1
        clips, poses, trajs, masks = [], [], [], []
        for seq_i, start in self.chunks[idx]:
            clips.append(self._inputs[seq_i][start:start + span])
            valid = np.arange(start, start + c) < self.sequences[seq_i].num_frames
            masks.append(valid)
            if self._with_targets:
                poses.append(self._pose[seq_i][start:start + c])
                trajs.append(self._traj[seq_i][start:start + c])
        clips = np.stack(clips)
        out = {"mask": np.stack(masks).astype(np.float64), "seq_index": self.chunks[idx, 0]}
        if self._pixels is not None:
            out["target_2d"] = np.stack([self._pixels[i][start:start + c] for i, start in self.chunks[idx]])
        if self._with_targets:
            out["pose"] = np.stack(poses)
            out["trajectory"] = np.stack(trajs)
        if flip_mask is not None and flip_mask.any():
            clips[flip_mask] = flip_poses(clips[flip_mask], self.perm)
            if self._with_targets:
                out["pose"][flip_mask] = flip_poses(out["pose"][flip_mask], self.perm)
                out["trajectory"][flip_mask] = flip_poses(out["trajectory"][flip_mask][..., None, :])[..., 0, :]
        n = clips.shape[0]
        out["inputs"] = np.ascontiguousarray(clips.reshape(n, span, -1).transpose(0, 2, 1))
        return out

    def epoch(self, rng: np.random.Generator, samples_per_batch: int):
        """Seeded permutation of all chunks, cut into batches of sample indices."""
        order = rng.permutation(len(self.chunks))
        for b in range(0, len(order), samples_per_batch):
            yield order[b:b + samples_per_batch]


def make_batches(sampler: ClipSampler, plan: TrainPlan, rng: np.random.Generator):
    """One epoch of batches as produced by :meth:`ClipSampler.gather`, with train-time flips."""
    for idx in sampler.epoch(rng, plan.samples_per_batch):
        flip = rng.random(len(idx)) < 0.5 if plan.flip_train else None
        yield sampler.gather(idx, flip)


def model_pass(model: TemporalModel, inputs, training, rng, chunk_size):
    """Forward a batch; single-frame batches take the strided path."""
    if chunk_size == 1:
        out = model.forward_strided_single(inputs, training=training, rng=rng)
    else:
        out = model.forward(inputs, training=training, rng=rng)
    n = out.shape[0]
    return out.transpose(0, 2, 1).reshape(n, chunk_size, model.config.joints_out, 3)


def backward_pass(model: TemporalModel, grad):
    n, c = grad.shape[:2]
    model.backward(np.ascontiguousarray(grad.reshape(n, c, -1).transpose(0, 2, 1)).astype(np.float32))


# -- evaluation --------------------------------------------------------------


def evaluate(model: TemporalModel, sequences, flip_test=False, left_right_pairs=()) -> dict:
    """Frame-weighted MPJPE / P-MPJPE / N-MPJPE / MPJVE in mm over ``sequences``."""
    totals = {"mpjpe": 0.0, "p_mpjpe": 0.0, "n_mpjpe": 0.0, "mpjve": 0.0}
    frames = vel_frames = 0
    for seq in sequences:
        pred = predict_sequence(model, seq.inputs, flip_test, left_right_pairs) * MM_PER_UNIT
        gt = seq.pose * MM_PER_UNIT
        t = seq.num_frames
        totals["mpjpe"] += metrics.mpjpe(pred, gt) * t
        totals["p_mpjpe"] += metrics.p_mpjpe(pred, gt) * t
        totals["n_mpjpe"] += metrics.n_mpjpe(pred, gt) * t
        frames += t
        if t >= 2:
            totals["mpjve"] += metrics.mpjve(pred, gt) * (t - 1)
            vel_frames += t - 1
    out = {k: v / max(frames, 1) for k, v in totals.items()}
    out["mpjve"] = totals["mpjve"] / vel_frames if vel_frames else float("nan")
    return out


# -- loop --------------------------------------------------------------------


@dataclass
class TrainState:
    """Everything needed to resume a run at an epoch boundary."""

    epoch: int
    rng: np.random.Generator
    optimizer: AMSGrad


def snapshot(models) -> list[dict]:
    return [{k: v.copy() for k, v in m.state_dict().items()} for m in models]


def restore(models, snaps):
    for m, s in zip(models, snaps):
        m.load_state_dict(s)


def train_supervised(model: TemporalModel, train_seqs, plan: TrainPlan, eval_seqs=(), left_right_pairs=(),
                     state: TrainState | None = None, on_epoch=None):
    """Minimize MPJPE on ``train_seqs``; returns the per-epoch log (list of dicts).

    ``state`` resumes an interrupted run; ``on_epoch(epoch, state, row)`` is
    called after every epoch (checkpointing, progress output).
    """
    if state is None:
        state = TrainState(0, np.random.default_rng(plan.seed), AMSGrad(model.parameters(), plan.optimizer_betas))
    sampler = ClipSampler(train_seqs, model.receptive_field, plan.chunk_size, model.config.causal,
                          left_right_pairs)
    history = []
    while state.epoch < plan.epochs:
        epoch = state.epoch
        lr = lr_schedule(epoch, plan.lr_init, plan.lr_decay)
        beta = bn_momentum_schedule(epoch, plan.epochs, plan.bn_momentum_start, plan.bn_momentum_end)
        model.set_bn_momentum(beta)
        good = snapshot([model])
        loss_sum = frames = 0.0
        for batch in make_batches(sampler, plan, state.rng):
            model.zero_grad()
            pred = model_pass(model, batch["inputs"].astype(np.float32), True, state.rng, plan.chunk_size)
            weights = batch["mask"]
            loss = float((np.linalg.norm(pred - batch["pose"], axis=-1).mean(-1) * weights).sum() / weights.sum())
            if not np.isfinite(loss):
                restore([model], good)
                raise NonFiniteError(f"training diverged at epoch {epoch} (loss {loss})")
            backward_pass(model, metrics.mpjpe_backward(pred, batch["pose"], weights))
            try:
                state.optimizer.step(lr)
            except NonFiniteError:
                restore([model], good)
                raise
            loss_sum += loss * weights.sum()
            frames += weights.sum()
        row = {"epoch": epoch, "train_loss": loss_sum / frames * MM_PER_UNIT, "lr": lr, "bn_momentum": beta}
        if eval_seqs:
            ev = evaluate(model, eval_seqs, plan.flip_test, left_right_pairs)
            row.update(eval_mpjpe=ev["mpjpe"], eval_pmpjpe=ev["p_mpjpe"], eval_mpjve=ev["mpjve"])
        else:
            row.update(eval_mpjpe=float("nan"), eval_pmpjpe=float("nan"), eval_mpjve=float("nan"))
        history.append(row)
        log.info("epoch %d loss %.2f mm eval %.2f mm", epoch, row["train_loss"], row["eval_mpjpe"])
        state.epoch += 1
        if on_epoch is not None:
            on_epoch(epoch, state, row)
    return history
