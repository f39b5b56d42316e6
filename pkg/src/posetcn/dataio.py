"""Dataset and checkpoint containers.

Both formats are little-endian and byte-stable; the layouts are documented
in ``docs/formats.md``.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import CameraModel
from .errors import CheckpointError, ConfigError, DataFormatError, PoseError
from .skeleton import Skeleton

DATASET_MAGIC = "POSETCN-DATASET"
DATASET_VERSION = 1
CHECKPOINT_MAGIC = b"PTCNCKPT"
CHECKPOINT_VERSION = 1

_BLOCKS = ("frames_2d", "frames_3d", "trajectory")


@dataclass
class SequenceRecord:
    id: str
    camera: str
    frames_2d: np.ndarray  # [T, J, 2] pixels
    frames_3d: np.ndarray | None = None  # [T, J, 3] mm, camera space, root-relative
    trajectory: np.ndarray | None = None  # [T, 3] mm, camera-space root position

    @property
    def labeled(self) -> bool:
        return self.frames_3d is not None

    @property
    def num_frames(self) -> int:
        return self.frames_2d.shape[0]

    def validate(self, num_joints: int):
        t = self.frames_2d.shape[0]
        if self.frames_2d.shape != (t, num_joints, 2) or t < 1:
            raise DataFormatError(f"sequence {self.id}: frames_2d shape {self.frames_2d.shape} invalid")
        if (self.frames_3d is None) != (self.trajectory is None):
            raise DataFormatError(f"sequence {self.id}: labeled records need both frames_3d and trajectory")
        if self.frames_3d is not None:
            if self.frames_3d.shape != (t, num_joints, 3):
                raise DataFormatError(f"sequence {self.id}: frames_3d shape {self.frames_3d.shape} invalid")
            if self.trajectory.shape != (t, 3):
                raise DataFormatError(f"sequence {self.id}: trajectory shape {self.trajectory.shape} invalid")

    def unlabeled_copy(self) -> "SequenceRecord":
        return SequenceRecord(self.id, self.camera, self.frames_2d)

    def slice(self, start: int, stop: int, suffix: str = "") -> "SequenceRecord":
        def cut(a):
            return None if a is None else a[start:stop]
        return SequenceRecord(self.id + suffix, self.camera, cut(self.frames_2d), cut(self.frames_3d),
                              cut(self.trajectory))


@dataclass
class DatasetFile:
    skeleton: Skeleton
    cameras: dict[str, CameraModel]
    sequences: list[SequenceRecord]
    fps: float = 50.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self):
        ids = set()
        for seq in self.sequences:
            if seq.camera not in self.cameras:
                raise DataFormatError(f"sequence {seq.id}: references undeclared camera {seq.camera!r}")
            if seq.id in ids:
                raise DataFormatError(f"duplicate sequence id {seq.id!r}")
            ids.add(seq.id)
            seq.validate(self.skeleton.num_joints)

    @property
    def num_frames(self) -> int:
        return sum(s.num_frames for s in self.sequences)

    def header(self) -> dict:
        return {
            "format_version": DATASET_VERSION,
            "skeleton": self.skeleton.to_dict(),
            "fps": self.fps,
            "units": {"frames_2d": "px", "frames_3d": "mm", "trajectory": "mm"},
            "meta": self.meta,
        }


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def save_dataset(ds: DatasetFile, path):
    """Write ``ds`` as a text preamble (magic line + NDJSON records) followed by raw float64 blocks."""
    ds.validate()
    lines, payload, offset = [], [], 0
    for seq in ds.sequences:
        blocks = {}
        for name in _BLOCKS:
            arr = getattr(seq, name)
            if arr is None:
                continue
            raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            blocks[name] = {"offset": offset, "shape": list(arr.shape), "crc32": zlib.crc32(raw)}
            payload.append(raw)
            offset += len(raw)
        lines.append({"sequence": {"id": seq.id, "camera": seq.camera, "labeled": seq.labeled,
                                   "blocks": blocks}})
    header = ds.header()
    header.update(num_cameras=len(ds.cameras), num_sequences=len(ds.sequences), payload_bytes=offset)
    text = [f"{DATASET_MAGIC} {DATASET_VERSION}", _dumps({"header": header})]
    text += [_dumps({"camera": cam.to_dict()}) for cam in ds.cameras.values()]
    text += [_dumps(rec) for rec in lines]
    text.append("END")
    with open(path, "wb") as f:
        f.write(("\n".join(text) + "\n").encode("utf-8"))
        for raw in payload:
            f.write(raw)


def _read_line(f, lineno):
    line = f.readline()
    if not line.endswith(b"\n"):
        raise DataFormatError(f"line {lineno}: unexpected end of file")
    return line[:-1].decode("utf-8")


def _parse_record(text, key, lineno):
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise DataFormatError(f"line {lineno}: malformed JSON ({e.msg})") from None
    if not isinstance(obj, dict) or set(obj) != {key}:
        raise DataFormatError(f"line {lineno}: expected a {key!r} record")
    return obj[key]


def load_dataset(path) -> DatasetFile:
    """Read and validate a dataset file.  Any defect raises :class:`DataFormatError`."""
    try:
        f = open(path, "rb")
    except OSError as e:
        raise DataFormatError(f"cannot read dataset {path}: {e}") from None
    with f:
        magic = _read_line(f, 1).split(" ")
        if len(magic) != 2 or magic[0] != DATASET_MAGIC:
            raise DataFormatError(f"{path}: not a dataset file (bad magic line)")
        if magic[1] != str(DATASET_VERSION):
            raise DataFormatError(f"{path}: unsupported dataset version {magic[1]}")
        header = _parse_record(_read_line(f, 2), "header", 2)
        lineno = 2
        try:
            skeleton = Skeleton.from_dict(header["skeleton"])
            n_cam, n_seq, n_bytes = header["num_cameras"], header["num_sequences"], header["payload_bytes"]
            if header["format_version"] != DATASET_VERSION:
                raise DataFormatError(f"header format_version {header['format_version']} unsupported")
            cameras = {}
            for _ in range(n_cam):
                lineno += 1
                cam = CameraModel.from_dict(_parse_record(_read_line(f, lineno), "camera", lineno))
                cameras[cam.name] = cam
            records = []
            for _ in range(n_seq):
                lineno += 1
                records.append((lineno, _parse_record(_read_line(f, lineno), "sequence", lineno)))
            lineno += 1
            if _read_line(f, lineno) != "END":
                raise DataFormatError(f"line {lineno}: expected END marker")
        except (KeyError, TypeError, ValueError, ConfigError) as e:
            if isinstance(e, DataFormatError):
                raise
            raise DataFormatError(f"line {lineno}: invalid record ({e})") from None
        payload = f.read()
    if len(payload) != n_bytes:
        raise DataFormatError(f"{path}: truncated payload ({len(payload)} of {n_bytes} bytes)")

    sequences = []
    for lineno, rec in records:
        arrays = {}
        for name, blk in rec["blocks"].items():
            if name not in _BLOCKS:
                raise DataFormatError(f"line {lineno}: unknown block {name!r}")
            count = int(np.prod(blk["shape"]))
            raw = payload[blk["offset"]:blk["offset"] + 8 * count]
            if len(raw) != 8 * count or zlib.crc32(raw) != blk["crc32"]:
                raise DataFormatError(f"sequence {rec['id']}: block {name} is corrupt")
            arrays[name] = np.frombuffer(raw, dtype="<f8").reshape(blk["shape"]).astype(np.float64)
        seq = SequenceRecord(rec["id"], rec["camera"], arrays.get("frames_2d"), arrays.get("frames_3d"),
                             arrays.get("trajectory"))
        if seq.frames_2d is None:
            raise DataFormatError(f"sequence {rec['id']}: missing frames_2d block")
        if seq.labeled != rec["labeled"]:
            raise DataFormatError(f"sequence {rec['id']}: labeled flag disagrees with stored blocks")
        sequences.append(seq)
    return DatasetFile(skeleton, cameras, sequences, fps=header["fps"], meta=header.get("meta", {}))


def split_corrupted(sequence: SequenceRecord, valid_mask) -> list[SequenceRecord]:
    """Cut a sequence into its maximal runs of valid frames."""
    mask = np.asarray(valid_mask, bool)
    if mask.shape != (sequence.num_frames,):
        raise DataFormatError(f"mask length {mask.shape} != sequence length {sequence.num_frames}")
    edges = np.diff(np.concatenate([[0], mask.astype(np.int8), [0]]))
    starts, stops = np.flatnonzero(edges == 1), np.flatnonzero(edges == -1)
    return [sequence.slice(a, b, f"#{k}") for k, (a, b) in enumerate(zip(starts, stops))]


# -- checkpoints -------------------------------------------------------------


@dataclass
class Checkpoint:
    configs: dict[str, dict]
    arrays: dict[str, np.ndarray]
    epoch: int = 0
    rng_state: dict | None = None
    optimizer_step: int | None = None
    extra: dict = field(default_factory=dict)

    def model_state(self, name: str) -> dict[str, np.ndarray]:
        prefix = f"{name}/"
        return {k[len(prefix):]: v for k, v in self.arrays.items() if k.startswith(prefix)}

    def optimizer_state(self) -> dict[str, np.ndarray] | None:
        if self.optimizer_step is None:
            return None
        prefix = "optim/"
        return {k[len(prefix):]: v for k, v in self.arrays.items() if k.startswith(prefix)}

    def load_into(self, name: str, model):
        """Copy stored weights into ``model``; its config must match the stored one exactly."""
        stored = self.configs.get(name)
        if stored is None:
            raise CheckpointError(f"checkpoint has no model named {name!r}")
        if stored != model.config.to_dict():
            raise CheckpointError(f"model {name!r}: checkpoint config {stored} != model config "
                                  f"{model.config.to_dict()}")
        try:
            model.load_state_dict(self.model_state(name))
        except PoseError as e:
            raise CheckpointError(f"model {name!r}: {e}") from None


def save_checkpoint(path, models: dict, optimizer=None, epoch: int = 0, rng_state=None, extra=None):
    arrays = {}
    for name, model in models.items():
        for key, arr in model.state_dict().items():
            arrays[f"{name}/{key}"] = arr
    optimizer_step = None
    if optimizer is not None:
        optimizer_step = optimizer.step_count
        for key, arr in optimizer.state_dict().items():
            arrays[f"optim/{key}"] = arr
    meta = {
        "configs": {name: m.config.to_dict() for name, m in models.items()},
        "epoch": epoch,
        "rng_state": rng_state,
        "optimizer_step": optimizer_step,
        "extra": extra or {},
    }
    meta_raw = _dumps(meta).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(meta_raw)))
        f.write(meta_raw)
        f.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            key = name.encode("utf-8")
            f.write(struct.pack("<H", len(key)) + key)
            f.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(struct.pack("<II", zlib.crc32(raw), len(raw)))
            f.write(raw)


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.path}: truncated while reading {what}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from None
    r = _Reader(data, path)
    if r.take(len(CHECKPOINT_MAGIC), "magic") != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes, not a checkpoint")
    version, meta_len = r.unpack("<II", "header")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        meta = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError(f"{path}: metadata block is corrupt") from None
    (count,) = r.unpack("<I", "blob count")
    arrays = {}
    for _ in range(count):
        (key_len,) = r.unpack("<H", "blob name")
        name = r.take(key_len, "blob name").decode("utf-8", errors="replace")
        (ndim,) = r.unpack("<B", f"shape of {name}")
        shape = r.unpack(f"<{ndim}I", f"shape of {name}")
        crc, nbytes = r.unpack("<II", f"header of {name}")
        if nbytes != 4 * int(np.prod(shape)):
            raise CheckpointError(f"parameter {name}: byte count {nbytes} does not match shape {shape}")
        raw = r.take(nbytes, f"parameter {name}")
        if zlib.crc32(raw) != crc:
            raise CheckpointError(f"parameter {name}: checksum mismatch, blob is corrupt")
        arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(data):
        raise CheckpointError(f"{path}: trailing bytes after last blob")
    return Checkpoint(meta["configs"], arrays, meta["epoch"], meta["rng_state"], meta["optimizer_step"],
                      meta["extra"])
