"""Binary checkpoint container."""

import struct

import numpy as np
import pytest

from depthstack.checkpoint import MAGIC, CheckpointError, from_bytes, load_checkpoint, save_checkpoint, to_bytes
from depthstack.model import build_networks, desk_spec
from depthstack.selfcheck import tiny_spec


def nets(spec, seed=0):
    coarse, fine = build_networks(spec, np.float32)
    rng = np.random.default_rng(seed)
    coarse.init_random(rng, output_bias=0.7)
    fine.init_random(rng)
    return coarse, fine


class TestCheckpoint:
    def test_round_trip_exact(self, tmp_path):
        spec = desk_spec(64, 48).with_lr_mults({"coarse1": 0.01})
        coarse, fine = nets(spec)
        save_checkpoint(tmp_path / "m.ckpt", spec, coarse, fine)
        spec2, c2, f2 = load_checkpoint(tmp_path / "m.ckpt")
        assert spec2 == spec
        for a, b in zip(coarse.state() + fine.state(), c2.state() + f2.state()):
            assert a.dtype == b.dtype == np.float32 and a.tobytes() == b.tobytes()
        x = np.random.default_rng(1).normal(size=(1, 3, 48, 64))
        assert coarse.forward(x).data.tobytes() == c2.forward(x).data.tobytes()

    def test_float64_parameters_narrowed(self):
        spec = tiny_spec()
        coarse, fine = build_networks(spec, np.float64)
        coarse.init_random(np.random.default_rng(0))
        _, c2, _ = from_bytes(to_bytes(spec, coarse, fine), np.float64)
        for a, b in zip(coarse.state(), c2.state()):
            np.testing.assert_array_equal(b, a.astype(np.float32))

    def test_bytes_deterministic(self):
        spec = tiny_spec()
        assert to_bytes(spec, *nets(spec)) == to_bytes(spec, *nets(spec))
        assert to_bytes(spec, *nets(spec)) != to_bytes(spec, *nets(spec, seed=1))

    def test_header_layout(self):
        spec = tiny_spec()
        buf = to_bytes(spec, *nets(spec))
        assert buf[:8] == MAGIC and buf[8] == 1
        (n,) = struct.unpack("<I", buf[9:13])
        assert buf[13:13 + n].decode("utf-8") == spec.to_json()

    def test_bad_magic(self):
        spec = tiny_spec()
        buf = to_bytes(spec, *nets(spec))
        with pytest.raises(CheckpointError, match="magic"):
            from_bytes(b"X" + buf[1:])

    def test_bad_version(self):
        spec = tiny_spec()
        buf = bytearray(to_bytes(spec, *nets(spec)))
        buf[8] = 9
        with pytest.raises(CheckpointError, match="version"):
            from_bytes(bytes(buf))

    @pytest.mark.parametrize("cut", [3, 12, 40, 1000])
    def test_truncated(self, cut):
        spec = tiny_spec()
        buf = to_bytes(spec, *nets(spec))
        with pytest.raises(CheckpointError):
            from_bytes(buf[:-cut] if cut < len(buf) else buf[:cut])

    def test_trailing_bytes(self):
        spec = tiny_spec()
        with pytest.raises(CheckpointError, match="trailing"):
            from_bytes(to_bytes(spec, *nets(spec)) + b"\0")

    def test_tensor_count_mismatch(self):
        spec = tiny_spec()
        coarse, fine = nets(spec)
        buf = bytearray(to_bytes(spec, coarse, fine))
        (n,) = struct.unpack("<I", buf[9:13])
        pos = 13 + n
        (count,) = struct.unpack("<I", buf[pos:pos + 4])
        # drop the final tensor (fine output bias, shape (1,)) and fix the count
        buf = buf[:-(1 + 4 + 4)]
        buf[pos:pos + 4] = struct.pack("<I", count - 1)
        with pytest.raises(CheckpointError, match="tensors"):
            from_bytes(bytes(buf))
