"""Checkpoint round trips must be bit-exact, including frozen teachers."""

import numpy as np
import pytest

from streamnav.checkpoint import (CheckpointError, load_checkpoint,
                                  restore_model, save_checkpoint)
from streamnav.encoders import EncoderDims
from streamnav.policy import PolicyConfig, StreamPolicy

DIMS = EncoderDims(height=8, width=8, channels=3, patch=4,
                   d2=12, d3=12, d_pre=12, d_state=16, d_pose=8)


def tiny_policy(seed=0, **kw):
    pc = PolicyConfig(layers=1, heads=2, d_model=16, window=8, keyframes=8,
                      queries_per_modality=1, masked_tokens_per_modality=4,
                      dims=DIMS, **kw)
    return StreamPolicy(pc, seed=seed, teacher_seed=seed + 1)


@pytest.fixture()
def ckpt(tmp_path):
    model = tiny_policy(seed=3)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, model, "a" * 64)
    return model, path


class TestRoundTrip:
    def test_bit_exact_params_and_teachers(self, ckpt):
        model, path = ckpt
        arrays, stored = load_checkpoint(path, expect_hash="a" * 64)
        assert stored == "a" * 64
        fresh = tiny_policy(seed=99)
        restore_model(fresh, arrays)
        for k, v in model.params.items():
            assert np.array_equal(fresh.params[k], v), k
        a = model.teachers.state_dict()
        b = fresh.teachers.state_dict()
        assert set(a) == set(b)
        for k in a:
            assert np.array_equal(a[k], b[k]), k

    def test_save_load_save_identical_bytes(self, ckpt, tmp_path):
        model, path = ckpt
        arrays, stored = load_checkpoint(path)
        fresh = tiny_policy(seed=5)
        restore_model(fresh, arrays)
        again = tmp_path / "again.ckpt"
        save_checkpoint(again, fresh, stored)
        assert again.read_bytes() == path.read_bytes()

    def test_restored_model_behaves_identically(self, ckpt):
        model, path = ckpt
        arrays, _ = load_checkpoint(path)
        fresh = tiny_policy(seed=123)
        restore_model(fresh, arrays)
        rng = np.random.default_rng(0)
        obs = rng.random((DIMS.height, DIMS.width, DIMS.channels))
        inst = [2, 5, 7]
        sa = model.begin_episode(inst)
        sb = fresh.begin_episode(inst)
        la, _, _ = model.step(sa, obs)
        lb, _, _ = fresh.step(sb, obs)
        assert np.array_equal(la, lb)


class TestValidation:
    def test_hash_mismatch_raises(self, ckpt):
        _, path = ckpt
        with pytest.raises(CheckpointError, match="hash mismatch"):
            load_checkpoint(path, expect_hash="b" * 64)

    def test_no_expectation_skips_check(self, ckpt):
        _, path = ckpt
        _, stored = load_checkpoint(path, expect_hash=None)
        assert stored == "a" * 64

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.ckpt"
        p.write_bytes(b"not a checkpoint\nPAYLOAD\n")
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(p)

    def test_missing_marker(self, tmp_path):
        p = tmp_path / "x.ckpt"
        p.write_bytes(b"streamnav-checkpoint v1\nconfig ab\n")
        with pytest.raises(CheckpointError, match="marker"):
            load_checkpoint(p)

    def test_corrupt_manifest_line(self, ckpt):
        _, path = ckpt
        raw = path.read_bytes()
        head, _, tail = raw.partition(b"PAYLOAD\n")
        lines = head.decode().splitlines()
        lines.insert(2, "array broken")
        path.write_bytes(("\n".join(lines) + "\n").encode() + b"PAYLOAD\n" + tail)
        with pytest.raises(CheckpointError, match="manifest"):
            load_checkpoint(path)

    def test_truncated_payload(self, ckpt):
        _, path = ckpt
        raw = path.read_bytes()
        path.write_bytes(raw[:-16])
        with pytest.raises(CheckpointError, match="overruns"):
            load_checkpoint(path)

    def test_param_set_mismatch(self, ckpt):
        _, path = ckpt
        arrays, _ = load_checkpoint(path)
        other = tiny_policy(seed=0, predictive=False)
        with pytest.raises(CheckpointError, match="parameter set"):
            restore_model(other, arrays)

    def test_shape_mismatch(self, ckpt):
        _, path = ckpt
        arrays, _ = load_checkpoint(path)
        fresh = tiny_policy(seed=0)
        name = next(k for k in arrays if k.startswith("param/"))
        arrays[name] = arrays[name].reshape(-1)[:4]
        with pytest.raises(CheckpointError):
            restore_model(fresh, arrays)
