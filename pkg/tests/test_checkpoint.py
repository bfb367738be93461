import numpy as np
import pytest

from multitap.checkpoint import (
    ContainerError,
    EmbeddingDump,
    load_checkpoint,
    load_dump,
    save_checkpoint,
    save_dump,
)


class TestCheckpointContainer:
    def test_round_trip(self, tmp_path):
        arrays = {
            "student/encoder/w": np.arange(12, dtype=np.float32).reshape(3, 4),
            "opt/m/student/encoder/w": np.zeros((3, 4), dtype=np.float32),
        }
        path = tmp_path / "c.ckpt"
        save_checkpoint(path, step=7, config={"train": {"seed": 1}}, config_hash="abc",
                        arrays=arrays, extra={"opt_t": 7})
        ck = load_checkpoint(path)
        assert ck.step == 7
        assert ck.config == {"train": {"seed": 1}}
        assert ck.extra["opt_t"] == 7
        np.testing.assert_array_equal(ck.arrays["student/encoder/w"], arrays["student/encoder/w"])

    def test_float32_little_endian_storage(self, tmp_path):
        path = tmp_path / "c.ckpt"
        save_checkpoint(path, 0, {}, "h", {"a": np.array([1.5, -2.25], dtype=np.float64)})
        ck = load_checkpoint(path)
        assert ck.arrays["a"].dtype == np.float32
        raw = path.read_bytes()
        assert np.frombuffer(raw[-8:], dtype="<f4").tolist() == [1.5, -2.25]

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 32)
        with pytest.raises(ContainerError):
            load_checkpoint(path)


class TestEmbeddingDump:
    def _dump(self):
        rng = np.random.default_rng(0)
        layers = {
            "tokenizer": rng.normal(size=(3, 4, 8)).astype(np.float32),
            "block_1": rng.normal(size=(3, 4, 8)).astype(np.float32),
        }
        return EmbeddingDump(layer_names=["tokenizer", "block_1"], layers=layers,
                             grid_h=2, grid_w=2, source_hash="deadbeef")

    def test_round_trip(self, tmp_path):
        dump = self._dump()
        path = tmp_path / "d.dump"
        save_dump(path, dump)
        loaded = load_dump(path)
        assert loaded.layer_names == dump.layer_names
        assert loaded.source_hash == "deadbeef"
        for name in dump.layer_names:
            np.testing.assert_array_equal(loaded.layers[name], dump.layers[name])

    def test_grid_mismatch_rejected(self, tmp_path):
        dump = self._dump()
        dump.grid_h = 3
        with pytest.raises(ContainerError):
            save_dump(tmp_path / "d.dump", dump)

    def test_checkpoint_magic_not_accepted_as_dump(self, tmp_path):
        path = tmp_path / "c.ckpt"
        save_checkpoint(path, 0, {}, "h", {"a": np.zeros(2, dtype=np.float32)})
        with pytest.raises(ContainerError):
            load_dump(path)
