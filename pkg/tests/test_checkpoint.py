import numpy as np
import pytest

from diffkit.checkpoint import MAGIC, Checkpoint, dumps, load_checkpoint, loads, save_checkpoint
from diffkit.config import parse_config
from diffkit.errors import DataFormatError


@pytest.fixture
def ckpt(rng):
    cfg = parse_config("seed = 9\nunet_ch = 32", env={})
    tensors = {"model/a.weight": rng.normal((2, 3, 3, 3)).astype(np.float32), "model/b": np.arange(4.0),
               "scalar": np.array(2.5)}
    return Checkpoint(cfg, tensors, step=123, latent_scale=0.25, meta={"kind": "diffusion", "names": ["x"]})


class TestRoundTrip:
    def test_all_fields(self, ckpt, tmp_path):
        save_checkpoint(tmp_path / "c.dfck", ckpt)
        got = load_checkpoint(tmp_path / "c.dfck")
        assert got.config == ckpt.config and got.step == 123 and got.latent_scale == 0.25
        assert got.meta == ckpt.meta
        assert list(got.tensors) == list(ckpt.tensors)
        for k, v in ckpt.tensors.items():
            np.testing.assert_array_equal(got.tensors[k], v.astype(np.float32))
            assert got.tensors[k].shape == np.shape(v)

    def test_no_scale(self, ckpt):
        ckpt.latent_scale = None
        assert loads(dumps(ckpt)).latent_scale is None

    def test_group(self, ckpt):
        assert sorted(ckpt.group("model")) == ["a.weight", "b"]

    def test_bytes_stable(self, ckpt):
        assert dumps(ckpt) == dumps(loads(dumps(ckpt)))
        assert dumps(ckpt)[:4] == MAGIC


class TestCorruption:
    def test_bad_magic(self, ckpt):
        with pytest.raises(DataFormatError, match="magic"):
            loads(b"XXXX" + dumps(ckpt)[4:])

    def test_bad_version(self, ckpt):
        raw = dumps(ckpt)
        with pytest.raises(DataFormatError, match="version"):
            loads(raw[:4] + (2).to_bytes(4, "little") + raw[8:])

    @pytest.mark.parametrize("cut", [3, 10, 40, -1])
    def test_truncated(self, ckpt, cut):
        with pytest.raises(DataFormatError):
            loads(dumps(ckpt)[:cut])

    def test_trailing(self, ckpt):
        with pytest.raises(DataFormatError, match="trailing"):
            loads(dumps(ckpt) + b"\0")

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "nope.dfck")
