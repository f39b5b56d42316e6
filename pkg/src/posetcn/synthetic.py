"""Procedural motion-capture data: articulated 17-joint skeletons seen by random cameras.

World frame: x right, y forward, z up (mm).  Every subject gets fixed,
left/right-symmetric bone lengths; joint angles follow sums of sinusoids;
the root wanders smoothly near the world origin, where all cameras look.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .camera import CameraModel, project, world_to_camera
from .dataio import DatasetFile, SequenceRecord
from .errors import ConfigError
from .skeleton import H36M_17, Skeleton

# rest-pose offsets from the parent joint, body frame facing +y
_REST_OFFSETS = np.array([
    [0, 0, 0],
    [-130, 0, 0], [0, 0, -440], [0, 0, -440],
    [130, 0, 0], [0, 0, -440], [0, 0, -440],
    [0, 0, 230], [0, 0, 250], [0, 20, 100], [0, 0, 110],
    [150, 0, 0], [0, 0, -280], [0, 0, -250],
    [-150, 0, 0], [0, 0, -280], [0, 0, -250],
], dtype=np.float64)

# joint-angle amplitude (radians) per joint; index 0 (root) is driven separately
_AMPLITUDE = np.array([0, 0.3, 0.6, 0.3, 0.3, 0.6, 0.3, 0.15, 0.15, 0.2, 0.2,
                       0.4, 0.8, 0.4, 0.4, 0.8, 0.4])
_SKELETONS = {"h36m17": H36M_17}


@dataclass(frozen=True)
class SynthSpec:
    num_sequences: int = 8
    frames_per_sequence: int = 500
    skeleton: str = "h36m17"
    num_cameras: int = 4
    noise_std_px: float = 0.0
    seed: int = 0
    fps: float = 50.0
    distortion: bool = True
    motion_speed: float = 1.0

    def __post_init__(self):
        if self.num_sequences < 1 or self.frames_per_sequence < 1 or self.num_cameras < 1:
            raise ConfigError("num_sequences, frames_per_sequence and num_cameras must be >= 1")
        if self.noise_std_px < 0:
            raise ConfigError(f"noise_std_px must be >= 0, got {self.noise_std_px}")
        if self.skeleton not in _SKELETONS:
            raise ConfigError(f"unknown skeleton {self.skeleton!r}; available: {sorted(_SKELETONS)}")


def subject_bone_offsets(rng, skeleton: Skeleton = H36M_17):
    """Per-subject rest offsets: global size times a per-bone jitter shared by mirrored bones."""
    scale = rng.uniform(0.9, 1.1)
    jitter = rng.uniform(0.95, 1.05, skeleton.num_joints)
    for left, right in skeleton.left_right_pairs:
        jitter[right] = jitter[left]
    return _REST_OFFSETS * (scale * jitter)[:, None]


def forward_kinematics(offsets, local_rotvecs, root_rotvecs, root_positions, skeleton: Skeleton = H36M_17):
    """World joint positions ``[T, J, 3]`` from per-joint local rotations ``[T, J, 3]``."""
    t = local_rotvecs.shape[0]
    glob = [None] * skeleton.num_joints
    pos = np.zeros((t, skeleton.num_joints, 3))
    glob[skeleton.root] = Rotation.from_rotvec(root_rotvecs)
    pos[:, skeleton.root] = root_positions
    for j, parent in enumerate(skeleton.parents):  # parents precede children
        if parent < 0:
            continue
        pos[:, j] = pos[:, parent] + glob[parent].apply(offsets[j])
        glob[j] = glob[parent] * Rotation.from_rotvec(local_rotvecs[:, j])
    return pos


def _sinusoids(rng, t, shape, amp, speed):
    freq = rng.uniform(0.2, 1.2, shape + (2,)) * speed
    phase = rng.uniform(0, 2 * np.pi, shape + (2,))
    weight = rng.uniform(0.3, 1.0, shape + (2,))
    waves = np.sin(2 * np.pi * freq[None] * t[:, None, None, None] + phase[None]) * weight[None]
    return waves.sum(-1) * amp


def synthesize_motion(rng, num_frames, fps=50.0, speed=1.0, skeleton: Skeleton = H36M_17):
    """One subject's world-space motion; returns ``(world_joints [T,J,3], offsets [J,3])``."""
    offsets = subject_bone_offsets(rng, skeleton)
    t = np.arange(num_frames) / fps
    local = _sinusoids(rng, t, (skeleton.num_joints, 3), 1.0, speed) * _AMPLITUDE[None, :, None] / 1.5
    yaw = rng.uniform(0, 2 * np.pi) + _sinusoids(rng, t, (1, 1), 0.8, 0.3 * speed)[:, 0, 0]
    root_rot = np.zeros((num_frames, 3))
    root_rot[:, 2] = yaw
    root_rot[:, :2] = _sinusoids(rng, t, (1, 2), 0.08, speed)[:, 0]
    root_pos = np.zeros((num_frames, 3))
    root_pos[:, :2] = _sinusoids(rng, t, (1, 2), 400.0, 0.25 * speed)[:, 0]
    root_pos[:, 2] = 950 + _sinusoids(rng, t, (1, 1), 20.0, speed)[:, 0, 0]
    return forward_kinematics(offsets, local, root_rot, root_pos, skeleton), offsets


def look_at_quaternion(center, target, up=(0.0, 0.0, 1.0)):
    """Unit quaternion mapping world axes to camera axes (x right, y down, z forward)."""
    z = np.asarray(target, float) - np.asarray(center, float)
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    q = Rotation.from_matrix(np.stack([x, y, z])).as_quat(scalar_first=True)
    return q / np.linalg.norm(q)


def random_camera(rng, name, distortion=True):
    azimuth = rng.uniform(0, 2 * np.pi)
    radius = rng.uniform(4000, 5000)
    center = np.array([radius * np.cos(azimuth), radius * np.sin(azimuth), rng.uniform(1200, 1800)])
    target = np.array([0.0, 0.0, 900.0]) + rng.normal(0, 50, 3)
    f = rng.uniform(1100, 1200)
    coeffs = dict(
        radial=tuple(rng.uniform(-1, 1, 3) * [0.05, 0.02, 0.005]) if distortion else (0.0, 0.0, 0.0),
        tangential=tuple(rng.uniform(-1, 1, 2) * 0.001) if distortion else (0.0, 0.0),
    )
    return CameraModel(
        name=name,
        focal=(f, f * rng.uniform(0.99, 1.01)),
        principal=tuple(500 + rng.normal(0, 5, 2)),
        image_size=(1000, 1000),
        rotation=tuple(look_at_quaternion(center, target)),
        translation=tuple(center),
        **coeffs,
    )


def generate_synthetic(spec: SynthSpec) -> DatasetFile:
    """Generate a fully labeled dataset; 2D keypoints are projections plus optional pixel noise."""
    skeleton = _SKELETONS[spec.skeleton]
    rng = np.random.default_rng(spec.seed)
    cameras = {f"cam{i}": random_camera(rng, f"cam{i}", spec.distortion) for i in range(spec.num_cameras)}
    cam_list = list(cameras.values())
    sequences = []
    for i in range(spec.num_sequences):
        world, _ = synthesize_motion(rng, spec.frames_per_sequence, spec.fps, spec.motion_speed, skeleton)
        cam = cam_list[i % len(cam_list)]
        cam_joints = world_to_camera(world, cam)
        frames_2d = project(cam_joints, cam)
        if spec.noise_std_px > 0:
            frames_2d = frames_2d + rng.normal(0, spec.noise_std_px, frames_2d.shape)
        root = cam_joints[:, skeleton.root]
        sequences.append(SequenceRecord(f"seq{i:03d}", cam.name, frames_2d,
                                        cam_joints - root[:, None], root.copy()))
    return DatasetFile(skeleton, cameras, sequences, fps=spec.fps, meta={"generator": asdict(spec)})
