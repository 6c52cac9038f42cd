import numpy as np
import pytest
import torch

from eofm.backbone import Encoder, EncoderConfig
from eofm.bench import (
    FrozenEncoderError,
    ProbeConfig,
    Report,
    TaskDataError,
    average_precision,
    evaluate_task,
    iou_per_class,
    knn_predict,
    linear_probe_features,
    load_task,
    make_synthetic_task,
    masked_l1,
    mean_iou,
    overall_accuracy,
    rmse,
    run_seeds,
    tap_indices,
)


def test_average_precision_example():
    assert average_precision([0.9, 0.8, 0.7, 0.1], [1, 0, 1, 0]) == pytest.approx(5 / 6)
    with pytest.raises(ValueError):
        average_precision([0.1], [0])


def test_iou_example():
    pred = np.array([[0, 1], [1, 1]])
    target = np.array([[0, 0], [1, 0]])
    ious = iou_per_class(pred, target, 3)
    assert ious[0] == pytest.approx(1 / 3) and ious[1] == pytest.approx(1 / 3) and np.isnan(ious[2])
    with pytest.warns(UserWarning):
        assert mean_iou(pred, target, 3) == pytest.approx(1 / 3)


def test_rmse_and_masked_l1_skip_nan():
    assert rmse([1.0, 2.0, 5.0], [1.0, np.nan, 1.0]) == pytest.approx(np.sqrt(8))
    assert masked_l1(torch.tensor([1.0, 0.0]), torch.tensor([3.0, float("nan")])).item() == 2.0
    with pytest.raises(TaskDataError):
        masked_l1(torch.zeros(2), torch.full((2,), float("nan")))


def test_knn_small_cases():
    train = np.array([[1.0, 0.0], [0.9, 0.1], [0.0, 1.0]])
    labels = np.array([0, 0, 1])
    assert knn_predict(train, labels, np.array([[0.1, 1.0]]), k=1).tolist() == [1]
    assert knn_predict(train, labels, np.array([[0.1, 1.0]]), k=3).tolist() == [0]
    # 1-1 tie: nearest voter wins
    assert knn_predict(train[1:], labels[1:], np.array([[0.2, 1.0]]), k=2).tolist() == [1]
    # identical points everywhere: tie goes to the lower class index
    assert knn_predict(np.ones((2, 2)), np.array([1, 0]), np.ones((1, 2)), k=2).tolist() == [0]
    assert knn_predict(train, labels, train, k=1, exclude_self=True).tolist() == [0, 0, 0]
    with pytest.raises(ValueError):
        knn_predict(train, labels, train, k=4)


def test_constant_features_give_majority_rate():
    rng = np.random.default_rng(0)
    y_train = np.array([0] * 30 + [1] * 10 + [2] * 8)
    y_test = rng.integers(0, 3, 40)
    x = np.ones((48, 4))
    pred = knn_predict(x, y_train, np.ones((40, 4)), k=48)
    assert overall_accuracy(pred, y_test) == pytest.approx(np.mean(y_test == 0))


def test_tap_indices():
    assert tap_indices(12) == [3, 6, 9, 12]
    assert tap_indices(3) == [1, 2, 2, 3]
    assert tap_indices(1) == [1, 1, 1, 1]


def test_linear_probe_separable():
    rng = np.random.default_rng(0)
    def make(n):
        y = rng.integers(0, 2, n)
        return 0.5 * rng.normal(size=(n, 4)) + 3 * y[:, None] - 1.5, y
    res = linear_probe_features(make(64), make(32), make(32), "cls", 2, ProbeConfig(epochs=10))
    assert res.test > 0.95 and set(res.val_by_lr) == {1e-2, 1e-1, 1.0, 10.0}


def test_task_round_trip_and_metadata(tmp_path, desk_mods):
    make_synthetic_task(tmp_path / "t", "reg", desk_mods["s1_grd"], sizes=(4, 2, 2), seed=0)
    task = load_task(tmp_path / "t")
    assert task.splits["train"].images.shape == (4, 2, 64, 64)
    assert np.isnan(task.splits["train"].targets[0]).any()
    meta = task.splits["val"].metas[0]
    assert meta.lon is None and meta.area_km2 == pytest.approx(0.4096)


def test_random_encoder_on_cls_and_frozen_check(tmp_path, desk_mods, monkeypatch):
    make_synthetic_task(tmp_path / "c", "cls", desk_mods["s1_grd"], sizes=(24, 8, 8), seed=0)
    task = load_task(tmp_path / "c")
    torch.manual_seed(0)
    enc = Encoder(EncoderConfig(embed_dim=48, depth=2, num_heads=3, enc_dim=32))
    knn = evaluate_task(enc, task, "knn", ProbeConfig(knn_k=5))
    assert knn.test >= 0.75
    import eofm.bench as bench_mod
    real = bench_mod.pooled_features

    def tamper(encoder, *a, **kw):
        with torch.no_grad():
            encoder.cls_token.add_(1.0)
        return real(encoder, *a, **kw)

    monkeypatch.setattr(bench_mod, "pooled_features", tamper)
    with pytest.raises(FrozenEncoderError):
        evaluate_task(enc, task, "knn", ProbeConfig(knn_k=5))


def test_report_population_std(tmp_path):
    rep = Report("t", "linear", "OA", [{"seed": s, "test": v} for s, v in zip(range(3), (0.5, 0.7, 0.9))])
    assert rep.mean == pytest.approx(0.7) and rep.std == pytest.approx(np.std([0.5, 0.7, 0.9]))
    rep.write(tmp_path)
    back = Report.from_records(tmp_path / "results.jsonl", "t", "linear", "OA")
    assert back.to_dict() == rep.to_dict()
    assert (tmp_path / "table.txt").read_text() == rep.table()
