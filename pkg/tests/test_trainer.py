import numpy as np
import pytest

from sydnet import tensor as T
from sydnet.attention import GeometryMismatch
from sydnet.config import load_config
from sydnet.layers import SgdState
from sydnet.model import analytic_head_parameters, build_model, count_parameters
from sydnet.trainer import (
    ABLATION_HEADER,
    ArraySource,
    NumericAbort,
    evaluate,
    load_model,
    make_sources,
    run_ablation,
    train,
    train_step,
)

from helpers import random_head_model


def test_one_epoch_smoke(tiny_image_cfg, tiny_manifest, tmp_path):
    res = train(tiny_image_cfg("train.epochs=1"), tiny_manifest, tmp_path / "run", log=lambda m: None)
    assert [r.split for r in res.history] == ["train", "test"]
    assert all(np.isfinite(r.loss) for r in res.history)
    for name in ("metrics.csv", "confusion.csv", "checkpoints/final.sydw", "checkpoints/best.sydw"):
        assert (tmp_path / "run" / name).exists()
    assert res.confusion.sum() == len(tiny_manifest.split("test"))


def test_seeded_runs_write_identical_metrics(tiny_image_cfg, tiny_manifest, tmp_path):
    for name in ("a", "b"):
        train(tiny_image_cfg("train.epochs=3"), tiny_manifest, tmp_path / name, log=lambda m: None)
    a = (tmp_path / "a" / "metrics.csv").read_bytes()
    assert a == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert len(a.splitlines()) == 1 + 6
    train(tiny_image_cfg("train.epochs=3", "train.seed=1"), tiny_manifest, tmp_path / "c", log=lambda m: None)
    assert (tmp_path / "c" / "metrics.csv").read_bytes() != a


def test_checkpoint_reload_is_bitwise(tiny_image_cfg, tiny_manifest, tmp_path):
    cfg = tiny_image_cfg("train.epochs=2")
    res = train(cfg, tiny_manifest, tmp_path, log=lambda m: None)
    _, test, _ = make_sources(cfg, tiny_manifest)
    x = np.concatenate([b for b, _ in test.batches(0, 32, training=False)])
    before = res.model(T.Tensor(x), training=False).y_pred.data
    model = load_model(tmp_path / "checkpoints" / "final.sydw", cfg, tiny_manifest.n_classes)
    after = model(T.Tensor(x), training=False).y_pred.data
    assert np.array_equal(before, after)
    with pytest.raises(ValueError, match="config hash"):
        load_model(tmp_path / "checkpoints" / "final.sydw", tiny_image_cfg("train.seed=9"), tiny_manifest.n_classes)
    with pytest.raises(GeometryMismatch):
        load_model(tmp_path / "checkpoints" / "final.sydw", cfg, 5, check_hash=False)


def test_tiny_step_decreases_loss_every_time():
    decreased = 0
    for seed in range(20):
        model = random_head_model(n=3, seed=seed, scale=0.3)
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(6, 2, 2, 4))
        y = rng.integers(0, 3, size=6)
        loss0, _ = train_step(model, x, y, SgdState(learning_rate=1e-5), np.random.default_rng(99))
        out = model(T.Tensor(x), training=True, rng=np.random.default_rng(99))
        decreased += T.cross_entropy(out.y_pred, y).item() < loss0
    assert decreased == 20


def test_parameter_count_matches_hand_count():
    cfg = load_config(None, ["train.mode=frozen_features", "backbone.kind=imported", "patches.set=P20"])
    model = build_model(cfg, 4, (7, 7, 128))
    counts = count_parameters(model)
    # CA 2*128*16 + 2*16 + 128 + 4; SA 2*20*49*128 + 128 + 256; classifier 256 + 512 + 4.
    assert counts["head"] == 256296 == counts["total"]
    assert counts["attention"] == 4260 + 251264
    assert analytic_head_parameters(20, 7, 7, 128, 4) == 256296


def test_doubling_classes_adds_only_classifier_weights():
    cfg = load_config(None, ["train.mode=frozen_features", "backbone.kind=imported"])
    a = count_parameters(build_model(cfg, 4, (7, 7, 128)))["total"]
    b = count_parameters(build_model(cfg, 8, (7, 7, 128)))["total"]
    assert b - a == 4 * 128 + 4


def test_gap_baseline_has_no_attention_parameters():
    cfg = load_config(None, ["train.mode=frozen_features", "backbone.kind=imported", "train.baseline=gap"])
    counts = count_parameters(build_model(cfg, 4, (7, 7, 128)))
    assert counts["attention"] == 0 and counts["total"] == 2 * 128 + 128 * 4 + 4
    cfg = load_config(None, ["train.mode=frozen_features", "backbone.kind=imported", "train.baseline=attention"])
    assert count_parameters(build_model(cfg, 4, (7, 7, 128)))["attention"] == 2 * 128 * 16 + 2 * 16 + 128 + 4


def test_nan_weights_abort():
    model = random_head_model(n=3)
    model.head.head.dense.weight.data[0, 0] = np.nan
    with pytest.raises(NumericAbort):
        train_step(model, np.ones((2, 2, 2, 4)), np.array([0, 1]), SgdState(), np.random.default_rng(0))


def test_frozen_features_learn(tiny_feature_cfg):
    res = train(tiny_feature_cfg("train.epochs=15", "train.lr=0.05", "train.precision=float64"), log=lambda m: None)
    assert res.final_test.top1 > 60.0
    assert res.history[-2].loss < res.history[0].loss


def test_evaluate_checks_class_count(tiny_feature_cfg):
    train_src, _, geometry = make_sources(tiny_feature_cfg())
    model = build_model(tiny_feature_cfg(), 3, geometry)
    with pytest.raises(GeometryMismatch):
        evaluate(model, ArraySource(train_src.x, train_src.y, 4))


def test_ablation_grid_rows_and_reproducibility(tiny_feature_cfg, tmp_path):
    cfg = tiny_feature_cfg("train.epochs=1")
    sets, variants = ["P12", "P20", "P30"], ["ca_only", "sa_only", "full"]
    rows = run_ablation(cfg, None, sets, variants, tmp_path / "a.csv")
    assert len(rows) == 9 and all(r[3] == "ok" for r in rows)
    assert [r[2] for r in rows] == [p for p in sets for _ in variants]
    again = run_ablation(cfg, None, sets, variants, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == ",".join(ABLATION_HEADER)
    assert rows == again
    with pytest.raises(ValueError):
        run_ablation(cfg, None, sets, ["nope"])


def test_ablation_failed_variant_recorded(tiny_feature_cfg):
    rows = run_ablation(tiny_feature_cfg("train.epochs=1", "patches.grid=48"), None, ["P30"], ["full"])
    assert rows[0][3].startswith("failed")
