import dataclasses
import json

import numpy as np
import pytest

from conftest import small_model
from posetcn.camera import project
from posetcn.dataio import (
    DatasetFile,
    SequenceRecord,
    load_checkpoint,
    load_dataset,
    save_checkpoint,
    save_dataset,
    split_corrupted,
)
from posetcn.errors import CheckpointError, DataFormatError
from posetcn.metrics import bone_lengths
from posetcn.skeleton import H36M_17
from posetcn.synthetic import SynthSpec, generate_synthetic
from posetcn.training import AMSGrad


def arrays_equal(a, b):
    if a is None or b is None:
        return a is None and b is None
    return a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()


def assert_same_dataset(a: DatasetFile, b: DatasetFile):
    assert a.skeleton == b.skeleton
    assert a.cameras == b.cameras
    assert a.fps == b.fps and a.meta == b.meta
    assert [s.id for s in a.sequences] == [s.id for s in b.sequences]
    for s, t in zip(a.sequences, b.sequences):
        assert s.camera == t.camera
        for name in ("frames_2d", "frames_3d", "trajectory"):
            assert arrays_equal(getattr(s, name), getattr(t, name)), (s.id, name)


@pytest.fixture
def ds_path(tmp_path, tiny_dataset):
    path = tmp_path / "d.ptd"
    save_dataset(tiny_dataset, path)
    return path


class TestDataset:
    def test_round_trip_bitwise(self, tmp_path, ds_path, tiny_dataset):
        loaded = load_dataset(ds_path)
        assert_same_dataset(loaded, tiny_dataset)
        again = tmp_path / "again.ptd"
        save_dataset(loaded, again)
        assert again.read_bytes() == ds_path.read_bytes()

    def test_mixed_labeled_and_unlabeled(self, tmp_path, tiny_dataset):
        seqs = list(tiny_dataset.sequences)
        seqs[1] = seqs[1].unlabeled_copy()
        ds = dataclasses.replace(tiny_dataset, sequences=seqs)
        save_dataset(ds, tmp_path / "m.ptd")
        loaded = load_dataset(tmp_path / "m.ptd")
        assert [s.labeled for s in loaded.sequences] == [True, False, True]
        assert_same_dataset(loaded, ds)

    def test_header_is_readable_text(self, ds_path):
        lines = ds_path.read_bytes().split(b"\n")
        assert lines[0] == b"POSETCN-DATASET 1"
        header = json.loads(lines[1])["header"]
        assert header["units"]["frames_3d"] == "mm"
        assert header["num_sequences"] == 3

    def test_undeclared_camera(self, tiny_dataset):
        seq = dataclasses.replace(tiny_dataset.sequences[0], camera="nope")
        with pytest.raises(DataFormatError, match="undeclared camera"):
            DatasetFile(tiny_dataset.skeleton, tiny_dataset.cameras, [seq])

    def test_half_labeled_record_rejected(self, tiny_dataset):
        seq = dataclasses.replace(tiny_dataset.sequences[0], trajectory=None)
        with pytest.raises(DataFormatError):
            DatasetFile(tiny_dataset.skeleton, tiny_dataset.cameras, [seq])

    def test_shape_mismatch(self, tiny_dataset):
        seq = tiny_dataset.sequences[0]
        bad = dataclasses.replace(seq, frames_3d=seq.frames_3d[:-1])
        with pytest.raises(DataFormatError):
            DatasetFile(tiny_dataset.skeleton, tiny_dataset.cameras, [bad])

    def test_truncated_payload(self, ds_path):
        data = ds_path.read_bytes()
        ds_path.write_bytes(data[:-8])
        with pytest.raises(DataFormatError, match="truncated"):
            load_dataset(ds_path)

    def test_truncated_preamble(self, ds_path):
        data = ds_path.read_bytes()
        ds_path.write_bytes(data[:data.index(b"END") - 5])
        with pytest.raises(DataFormatError):
            load_dataset(ds_path)

    def test_flipped_payload_byte(self, ds_path):
        data = bytearray(ds_path.read_bytes())
        data[-3] ^= 0xFF
        ds_path.write_bytes(bytes(data))
        with pytest.raises(DataFormatError, match="corrupt"):
            load_dataset(ds_path)

    def test_version_mismatch(self, ds_path):
        data = ds_path.read_bytes().replace(b"POSETCN-DATASET 1", b"POSETCN-DATASET 9", 1)
        ds_path.write_bytes(data)
        with pytest.raises(DataFormatError, match="version"):
            load_dataset(ds_path)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x"
        p.write_bytes(b"hello\n")
        with pytest.raises(DataFormatError, match="magic"):
            load_dataset(p)

    def test_malformed_json_names_line(self, ds_path):
        lines = ds_path.read_bytes().split(b"\n")
        lines[3] = b"{not json"
        ds_path.write_bytes(b"\n".join(lines))
        with pytest.raises(DataFormatError, match="line 4"):
            load_dataset(ds_path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataFormatError):
            load_dataset(tmp_path / "absent")


class TestSplitCorrupted:
    def make(self, t):
        rng = np.random.default_rng(0)
        return SequenceRecord("s", "c", rng.normal(size=(t, 17, 2)), rng.normal(size=(t, 17, 3)),
                              rng.normal(size=(t, 3)))

    def test_example(self):
        parts = split_corrupted(self.make(4), [1, 1, 0, 1])
        assert [p.num_frames for p in parts] == [2, 1]
        assert [p.id for p in parts] == ["s#0", "s#1"]

    def test_against_scan(self, rng):
        for _ in range(50):
            mask = rng.random(30) < 0.7
            runs, cur = [], []
            for i, m in enumerate(mask):
                if m:
                    cur.append(i)
                elif cur:
                    runs.append(cur)
                    cur = []
            if cur:
                runs.append(cur)
            seq = self.make(30)
            parts = split_corrupted(seq, mask)
            assert len(parts) == len(runs)
            for p, r in zip(parts, runs):
                np.testing.assert_array_equal(p.frames_2d, seq.frames_2d[r])
                np.testing.assert_array_equal(p.trajectory, seq.trajectory[r])

    def test_all_invalid(self):
        assert split_corrupted(self.make(3), [0, 0, 0]) == []

    def test_length_mismatch(self):
        with pytest.raises(DataFormatError):
            split_corrupted(self.make(3), [1, 1])


class TestCheckpoint:
    def test_bitwise_round_trip(self, tmp_path, rng):
        model = small_model()
        opt = AMSGrad(model.parameters())
        for p in model.parameters():
            p.grad[...] = rng.normal(size=p.value.shape)
        opt.step(0.01)
        gen = np.random.default_rng(3)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, {"pose": model}, opt, epoch=4, rng_state=gen.bit_generator.state,
                        extra={"kind": "supervised"})
        ck = load_checkpoint(path)
        assert ck.epoch == 4 and ck.extra == {"kind": "supervised"} and ck.optimizer_step == 1
        restored = small_model(seed=9)
        ck.load_into("pose", restored)
        for k, v in model.state_dict().items():
            assert arrays_equal(restored.state_dict()[k], v), k
        for k, v in opt.state_dict().items():
            assert arrays_equal(ck.optimizer_state()[k], v), k
        g2 = np.random.default_rng()
        g2.bit_generator.state = ck.rng_state
        assert g2.integers(1 << 62) == gen.integers(1 << 62)
        # re-saving reproduces the exact bytes
        save_checkpoint(tmp_path / "b.ckpt", {"pose": restored}, opt, epoch=4, rng_state=ck.rng_state,
                        extra=ck.extra)
        assert (tmp_path / "b.ckpt").read_bytes() == path.read_bytes()

    def test_config_mismatch(self, tmp_path):
        save_checkpoint(tmp_path / "m.ckpt", {"pose": small_model()})
        with pytest.raises(CheckpointError, match="config"):
            load_checkpoint(tmp_path / "m.ckpt").load_into("pose", small_model(channels=16))

    def test_unknown_model_name(self, tmp_path):
        save_checkpoint(tmp_path / "m.ckpt", {"pose": small_model()})
        with pytest.raises(CheckpointError, match="traj"):
            load_checkpoint(tmp_path / "m.ckpt").load_into("traj", small_model())

    def test_corrupt_blob_names_parameter(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, {"pose": small_model()})
        data = bytearray(path.read_bytes())
        data[-2] ^= 0x55  # inside the last blob
        path.write_bytes(bytes(data))
        last = list(small_model().state_dict())[-1]
        with pytest.raises(CheckpointError, match=f"pose/{last}"):
            load_checkpoint(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, {"pose": small_model()})
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x").write_bytes(b"NOTACKPT" + bytes(20))
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(tmp_path / "x")


class TestSynthetic:
    def test_self_consistency(self, tiny_dataset):
        for seq in tiny_dataset.sequences:
            cam = tiny_dataset.cameras[seq.camera]
            world_cam = seq.frames_3d + seq.trajectory[:, None]
            np.testing.assert_allclose(project(world_cam, cam), seq.frames_2d, atol=1e-9)
            np.testing.assert_array_equal(seq.frames_3d[:, 0], 0)

    def test_seed_determinism(self):
        spec = SynthSpec(num_sequences=2, frames_per_sequence=20, seed=3)
        a, b = generate_synthetic(spec), generate_synthetic(spec)
        assert_same_dataset(a, b)
        c = generate_synthetic(dataclasses.replace(spec, seed=4))
        assert not np.array_equal(a.sequences[0].frames_2d, c.sequences[0].frames_2d)

    def test_rigid_bones(self, tiny_dataset):
        for seq in tiny_dataset.sequences:
            lengths = bone_lengths(seq.frames_3d, H36M_17)
            np.testing.assert_allclose(lengths, lengths[:1].repeat(len(lengths), 0), rtol=1e-9)

    def test_noise_level(self):
        clean = generate_synthetic(SynthSpec(num_sequences=1, frames_per_sequence=400, seed=2))
        noisy = generate_synthetic(SynthSpec(num_sequences=1, frames_per_sequence=400, seed=2, noise_std_px=3.0))
        diff = noisy.sequences[0].frames_2d - clean.sequences[0].frames_2d
        assert abs(diff.std() - 3.0) < 0.1
        assert noisy.meta["generator"]["noise_std_px"] == 3.0

    def test_joints_in_front_of_cameras(self):
        ds = generate_synthetic(SynthSpec(num_sequences=8, frames_per_sequence=200, seed=11))
        for seq in ds.sequences:
            assert ((seq.frames_3d + seq.trajectory[:, None])[..., 2] > 1000).all()
