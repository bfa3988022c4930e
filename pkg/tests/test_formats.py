import struct

import numpy as np
import pytest

from sydnet import tensor as T
from sydnet.backbone import (
    BackboneShapeError,
    FeatureFormatError,
    FeatureWriter,
    ReferenceCNN,
    load_feature_arrays,
    load_features,
    write_features,
)
from sydnet.checkpoint import CheckpointError, load_checkpoint, save_checkpoint

HEADER = 24
REC = 4 + 4 * 2 * 2 * 3


@pytest.fixture
def sydf(tmp_path):
    feats = np.random.default_rng(0).normal(size=(3, 2, 2, 3)).astype(np.float32)
    path = tmp_path / "f.sydf"
    write_features(path, feats, [0, 2, 1])
    return path, feats


def test_sydf_round_trip_layout(sydf):
    path, feats = sydf
    raw = path.read_bytes()
    assert raw[:4] == b"SYDF" and len(raw) == HEADER + 3 * REC
    assert struct.unpack_from("<IIIII", raw, 4) == (1, 3, 2, 2, 3)
    arr, labels = load_feature_arrays(path)
    assert np.array_equal(arr, feats) and labels.tolist() == [0, 2, 1]


def test_sydf_records_are_read_only(sydf):
    feat, _ = next(load_features(sydf[0]))
    with pytest.raises(ValueError):
        feat[0, 0, 0] = 1.0


def test_sydf_truncated_record_reports_offset(sydf):
    path, _ = sydf
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(FeatureFormatError) as info:
        load_feature_arrays(path)
    assert info.value.offset == HEADER + 2 * REC
    assert "truncated record 2" in str(info.value)


def test_sydf_trailing_data_reports_offset(sydf):
    path, _ = sydf
    path.write_bytes(path.read_bytes() + b"\0")
    with pytest.raises(FeatureFormatError) as info:
        load_feature_arrays(path)
    assert info.value.offset == HEADER + 3 * REC


@pytest.mark.parametrize("mutate,offset", [
    (lambda b: b"XXXX" + b[4:], 0),
    (lambda b: b[:4] + struct.pack("<I", 9) + b[8:], 4),
    (lambda b: b[:10], 10),
])
def test_sydf_header_errors(sydf, mutate, offset):
    path, _ = sydf
    path.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(FeatureFormatError) as info:
        load_feature_arrays(path)
    assert info.value.offset == offset


def test_streaming_writer_matches_bulk_writer(tmp_path, sydf):
    path, feats = sydf
    with FeatureWriter(tmp_path / "s.sydf") as w:
        for f, y in zip(feats, [0, 2, 1]):
            w.write(f, y)
    assert (tmp_path / "s.sydf").read_bytes() == path.read_bytes()
    with pytest.raises(ValueError):
        with FeatureWriter(tmp_path / "bad.sydf") as w:
            w.write(feats[0], 0)
            w.write(np.zeros((3, 3, 3)), 0)


def test_write_features_validation(tmp_path):
    with pytest.raises(ValueError):
        write_features(tmp_path / "x", np.zeros((2, 2, 2)), [0, 1])
    with pytest.raises(ValueError):
        write_features(tmp_path / "x", np.zeros((2, 1, 1, 1)), [0])
    with pytest.raises(ValueError):
        write_features(tmp_path / "x", np.zeros((1, 1, 1, 1)), [-1])


def test_reference_cnn_geometry_and_errors():
    cnn = ReferenceCNN(np.random.default_rng(0), (2, 2, 2, 2, 4), np.float64)
    out = cnn(T.Tensor(np.random.default_rng(1).normal(size=(2, 64, 64, 3))), training=False)
    assert out.shape == (2, 2, 2, 4) and (out.data >= 0).all()
    assert cnn.output_geometry(224) == (7, 7, 4)
    with pytest.raises(BackboneShapeError):
        cnn.output_geometry(100)
    with pytest.raises(BackboneShapeError):
        cnn(T.Tensor(np.zeros((1, 48, 48, 3))), training=False)
    with pytest.raises(BackboneShapeError):
        cnn(T.Tensor(np.zeros((1, 64, 64, 1))), training=False)


def _tensors():
    rng = np.random.default_rng(2)
    return {"head.w": rng.normal(size=(3, 2)), "head.b": rng.normal(size=2).astype(np.float32),
            "scalar": np.asarray(1.5)}


def test_checkpoint_round_trip_bitwise(tmp_path):
    path = tmp_path / "c.sydw"
    save_checkpoint(path, _tensors(), epoch=7, config_hash=0xDEADBEEFCAFEF00D)
    ck = load_checkpoint(path)
    assert ck.epoch == 7 and ck.config_hash == 0xDEADBEEFCAFEF00D
    assert list(ck.tensors) == ["head.w", "head.b", "scalar"]
    for k, v in _tensors().items():
        assert ck.tensors[k].dtype == v.dtype and np.array_equal(ck.tensors[k], v)
    assert not (tmp_path / "c.sydw.tmp").exists()


def test_checkpoint_errors(tmp_path):
    path = tmp_path / "c.sydw"
    save_checkpoint(path, _tensors(), 1, 5)
    blob = path.read_bytes()
    for bad, msg in [(b"SYDX" + blob[4:], "magic"), (blob[:-3], "truncated"), (blob + b"\0", "trailing"),
                     (blob[:4] + struct.pack("<I", 2) + blob[8:], "version")]:
        path.write_bytes(bad)
        with pytest.raises(CheckpointError, match=msg):
            load_checkpoint(path)
    with pytest.raises(CheckpointError):
        save_checkpoint(path, {"i": np.zeros(2, dtype=np.int32)}, 0, 0)
