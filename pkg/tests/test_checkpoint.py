import json
import struct

import numpy as np
import pytest

from caslm.architecture import ArchDescriptor
from caslm.checkpoint import MAGIC, CheckpointError, load_checkpoint, save_model

from conftest import tiny_model


def test_round_trip_restores_model(tmp_path, rng):
    model = tiny_model(seed=3)
    path = tmp_path / "m.ckpt"
    save_model(path, model, {"note": "x"})
    ckpt = load_checkpoint(path)
    assert ckpt.descriptor == model.descriptor and ckpt.config == model.config
    assert ckpt.meta == {"note": "x"}
    restored = ckpt.to_model()
    ids = rng.integers(0, 11, (2, 6))
    np.testing.assert_array_equal(restored(ids)[0].data, model(ids)[0].data)


def test_layout(tmp_path):
    model = tiny_model()
    path = tmp_path / "m.ckpt"
    save_model(path, model)
    raw = path.read_bytes()
    assert raw[:8] == MAGIC
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + n])
    assert ArchDescriptor.from_dict(header["descriptor"]) == model.descriptor
    payload = raw[16 + n :]
    assert len(payload) == header["payload_bytes"] == 8 * model.parameter_count()
    entry = next(e for e in header["params"] if e["name"] == "lstm.0.w_hh")
    count = int(np.prod(entry["shape"]))
    stored = np.frombuffer(payload, dtype="<f8", count=count, offset=entry["offset"]).reshape(entry["shape"])
    np.testing.assert_array_equal(stored, model.params()["lstm.0.w_hh"].data)


def test_saving_twice_is_byte_identical(tmp_path):
    model = tiny_model()
    save_model(tmp_path / "a", model)
    save_model(tmp_path / "b", model)
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_corrupt_files_rejected(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTACKPT" + b"\0" * 20)
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    model = tiny_model()
    save_model(tmp_path / "t.ckpt", model)
    raw = (tmp_path / "t.ckpt").read_bytes()
    (tmp_path / "trunc.ckpt").write_bytes(raw[:-8])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "trunc.ckpt")
