import hashlib
import json

import numpy as np
import pytest
from PIL import Image

from sydnet.data import (
    DataError,
    SynthSpec,
    batch_iterator,
    generate_synthetic,
    load_image,
    scan_dataset,
)


def _png(path, value=100, size=8):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.full((size, size, 3), value, dtype=np.uint8)).save(path)


def _tree(root, layout):
    for split, classes in layout.items():
        for name, count in classes.items():
            for i in range(count):
                _png(root / split / name / f"{i:03d}.png", value=10 * i)


def test_scan_two_classes(tmp_path):
    _tree(tmp_path, {"train": {"salsa": 2, "ballet": 3}, "test": {"ballet": 1, "salsa": 1}})
    m = scan_dataset(tmp_path)
    assert m.classes == ["ballet", "salsa"] and m.n_classes == 2
    assert len(m.split("train")) == 5 and len(m.split("test")) == 2
    assert {e.label for e in m.split("test")} == {0, 1}
    paths = [e.path for e in m.entries]
    assert paths == sorted(paths)


def test_scan_is_lexicographic_and_stable(tmp_path):
    _tree(tmp_path, {"train": {"zeta": 1, "Alpha": 1, "mid": 1}})
    a, b = scan_dataset(tmp_path), scan_dataset(tmp_path)
    assert a.classes == ["Alpha", "mid", "zeta"]
    assert a.entries == b.entries


def test_class_only_in_one_split_still_indexed(tmp_path):
    _tree(tmp_path, {"train": {"a": 1, "b": 1}, "test": {"b": 1, "c": 1}})
    m = scan_dataset(tmp_path)
    assert m.classes == ["a", "b", "c"]
    assert {e.label for e in m.split("test")} == {1, 2}


def test_corrupt_image_skipped_and_empty_class_warned(tmp_path, caplog):
    _tree(tmp_path, {"train": {"a": 2}})
    (tmp_path / "train" / "a" / "bad.png").write_bytes(b"not a png")
    (tmp_path / "train" / "empty").mkdir()
    with caplog.at_level("WARNING"):
        m = scan_dataset(tmp_path)
    assert m.skipped == ["train/a/bad.png"]
    assert len(m.entries) == 2
    assert "empty class directory" in caplog.text


def test_scan_errors(tmp_path):
    with pytest.raises(DataError):
        scan_dataset(tmp_path / "missing")
    with pytest.raises(DataError):
        scan_dataset(tmp_path)


def test_split_file_layout(tmp_path):
    for name in ("a", "b"):
        for i in range(2):
            _png(tmp_path / name / f"{i}.png")
    split = tmp_path / "split.txt"
    split.write_text("# comment\na/0.png train\na/1.png test\nb/0.png train\n")
    m = scan_dataset(tmp_path, split)
    assert [(e.path, e.split) for e in m.entries] == [("a/0.png", "train"), ("a/1.png", "test"), ("b/0.png", "train")]
    split.write_text("a/0.png validation\n")
    with pytest.raises(DataError):
        scan_dataset(tmp_path, split)


def test_manifest_jsonl_and_class_check(tmp_path):
    _tree(tmp_path / "d", {"train": {"a": 1, "b": 1}})
    m = scan_dataset(tmp_path / "d")
    m.to_jsonl(tmp_path / "m.jsonl")
    rows = [json.loads(l) for l in (tmp_path / "m.jsonl").read_text().splitlines()]
    assert rows[0] == {"path": "train/a/000.png", "class": "a", "split": "train"}
    m.check_class_count(2)
    with pytest.raises(DataError):
        m.check_class_count(102)


def test_load_image_resizes_to_rgb(tmp_path):
    Image.fromarray(np.zeros((10, 20), dtype=np.uint8)).save(tmp_path / "g.png")
    img = load_image(tmp_path / "g.png", 16)
    assert img.shape == (16, 16, 3) and img.dtype == np.uint8


def _digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*.png")):
        h.update(p.relative_to(root).as_posix().encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def test_synthetic_counts_match_80_20_split(tmp_path):
    root = generate_synthetic(SynthSpec(4, 100, 64, seed=7), tmp_path / "s")
    m = scan_dataset(root)
    assert m.n_classes == 4
    assert len(m.split("train")) == 400 and len(m.split("test")) == 100
    per_class = np.bincount([e.label for e in m.split("train")])
    assert per_class.tolist() == [100] * 4


def test_synthetic_is_byte_identical_per_seed(tmp_path):
    a = generate_synthetic(SynthSpec(3, 6, 32, seed=1), tmp_path / "a")
    b = generate_synthetic(SynthSpec(3, 6, 32, seed=1), tmp_path / "b")
    c = generate_synthetic(SynthSpec(3, 6, 32, seed=2), tmp_path / "c")
    assert _digest(a) == _digest(b) != _digest(c)


@pytest.mark.parametrize("kw", [dict(num_classes=1), dict(num_classes=9), dict(samples_per_class=0),
                                dict(test_fraction=1.0)])
def test_synth_spec_validation(kw):
    with pytest.raises(ValueError):
        SynthSpec(**kw)


@pytest.fixture
def ten_images(tmp_path):
    _tree(tmp_path, {"train": {"a": 5, "b": 5}})
    return scan_dataset(tmp_path)


def test_batch_remainder_kept(ten_images):
    sizes = [len(imgs) for imgs, _, _ in batch_iterator(ten_images, "train", 8, source_size=8)]
    assert sizes == [8, 2]


def test_batch_order_and_shuffle(ten_images):
    plain = [i for _, _, idx in batch_iterator(ten_images, "train", 4, source_size=8) for i in idx]
    assert plain == list(range(10))
    s1 = [i for _, _, idx in batch_iterator(ten_images, "train", 4, shuffle_seed=3, source_size=8) for i in idx]
    s2 = [i for _, _, idx in batch_iterator(ten_images, "train", 4, shuffle_seed=3, source_size=8) for i in idx]
    s3 = [i for _, _, idx in batch_iterator(ten_images, "train", 4, shuffle_seed=3, epoch=1, source_size=8) for i in idx]
    assert s1 == s2 and sorted(s1) == plain and s1 != s3


def test_batch_labels_and_decode_failures(ten_images):
    (ten_images.root / "train" / "a" / "002.png").write_bytes(b"broken")
    batches = list(batch_iterator(ten_images, "train", 4, source_size=8))
    labels = np.concatenate([l for _, l, _ in batches])
    assert len(labels) == 9 and labels.max() < 2
    assert all(img.shape == (8, 8, 3) for imgs, _, _ in batches for img in imgs)
    with pytest.raises(DataError):
        next(batch_iterator(ten_images, "test", 4))
