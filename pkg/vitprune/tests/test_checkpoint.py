import struct

import numpy as np
import pytest

from .. import checkpoint as ckpt
from ..checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from ..errors import (BadMagicError, CheckpointError, CheckpointMismatchError,
                      TruncatedCheckpointError, UnsupportedVersionError)
from ..params import ModelDims, init_params

DIMS = ModelDims(layers=2, heads=2, width=16, patch=4, image_size=16,
                 channels=3, classes=4)


@pytest.fixture
def state():
    params = init_params(DIMS, np.random.default_rng(0), gated_layers=(2,))
    return Checkpoint.from_params(params, "sparse", seed=7)


def test_round_trip_is_bit_exact(state, tmp_path):
    path = tmp_path / "checkpoint.bin"
    save_checkpoint(state, path)
    loaded = load_checkpoint(path)
    assert loaded.dims == DIMS
    assert loaded.stage == "sparse"
    assert loaded.seed == 7
    assert sorted(loaded.tensors) == sorted(state.tensors)
    for name, value in state.tensors.items():
        assert loaded.tensors[name].tobytes() == value.tobytes()
    again = tmp_path / "again.bin"
    save_checkpoint(loaded, again)
    assert again.read_bytes() == path.read_bytes()
    assert not (tmp_path / "checkpoint.bin.tmp").exists()


def test_header_layout(state):
    data = ckpt.dumps(state)
    assert data[:8] == b"VITPRUNE"
    assert struct.unpack("<I", data[8:12]) == (1,)
    assert struct.unpack("<7I", data[12:40]) == (2, 2, 16, 4, 16, 3, 4)


def test_params_view(state):
    params = ckpt.loads(ckpt.dumps(state)).params
    assert params.gated_layers == (2,)
    assert params.gate_design(2) == "mlp2"


def test_truncated_file(state):
    data = ckpt.dumps(state)
    for size in (3, 20, len(data) // 2, len(data) - 1):
        with pytest.raises(TruncatedCheckpointError):
            ckpt.loads(data[:size])


def test_bad_magic(state):
    data = b"NOTPRUNE" + ckpt.dumps(state)[8:]
    with pytest.raises(BadMagicError):
        ckpt.loads(data)


def test_version_bump(state):
    data = bytearray(ckpt.dumps(state))
    data[8:12] = struct.pack("<I", 2)
    with pytest.raises(UnsupportedVersionError) as info:
        ckpt.loads(bytes(data))
    assert info.value.version == 2


def test_trailing_bytes(state):
    with pytest.raises(CheckpointError):
        ckpt.loads(ckpt.dumps(state) + b"\x00")


def test_shapes_are_validated_on_load(state):
    tensors = dict(state.tensors)
    tensors["head.b"] = np.zeros(5)
    data = ckpt.dumps(Checkpoint(DIMS, tensors, "dense", 0))
    with pytest.raises(CheckpointMismatchError) as info:
        ckpt.loads(data)
    assert info.value.name == "head.b"


def test_unknown_stage(state):
    with pytest.raises(CheckpointError):
        ckpt.dumps(Checkpoint(DIMS, state.tensors, "finetuned", 0))


def test_undecodable_stage(state):
    data = bytearray(ckpt.dumps(state))
    assert data[40] == len("sparse")
    data[41] = 0xFF
    with pytest.raises(CheckpointError) as info:
        ckpt.loads(bytes(data))
    assert "stage" in str(info.value)


def test_undecodable_tensor_name(state):
    data = ckpt.dumps(state)
    name = sorted(state.tensors)[0].encode("utf-8")
    index = data.index(name)
    corrupt = data[:index] + b"\xff" + data[index + 1:]
    with pytest.raises(CheckpointError):
        ckpt.loads(corrupt)


@pytest.mark.parametrize("field,value", [(3, 0), (1, 0), (1, 3)])
def test_invalid_stored_dims(state, field, value):
    data = bytearray(ckpt.dumps(state))
    offset = 12 + 4 * field
    data[offset:offset + 4] = struct.pack("<I", value)
    with pytest.raises(CheckpointError) as info:
        ckpt.loads(bytes(data))
    assert not isinstance(info.value, CheckpointMismatchError)
