import numpy as np
import pytest

from eofm.climate import (
    GeometryError,
    GridEmbedding,
    embedding_map,
    export_embedding_map,
    feature_sets,
    fit_ols,
    load_embedding_map,
    pca_rgb,
    read_embeddings,
    regress,
    write_embeddings,
)
from eofm.data import GridGeometry


def test_exact_recovery():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(50, 4))
    beta = rng.normal(size=(4, 2))
    y = 1.5 + x @ beta
    fit = fit_ols(x, y)
    assert not fit.ridge
    np.testing.assert_allclose(fit.coef[0], 1.5, atol=1e-10)
    np.testing.assert_allclose(fit.coef[1:], beta, atol=1e-10)


def test_affine_feature_change_keeps_predictions():
    rng = np.random.default_rng(1)
    x, y = rng.normal(size=(40, 3)), rng.normal(size=(40, 2))
    a = rng.normal(size=(3, 3)) + 3 * np.eye(3)
    p1 = fit_ols(x, y).predict(x)
    x2 = x @ a + 7.0
    p2 = fit_ols(x2, y).predict(x2)
    np.testing.assert_allclose(p1, p2, atol=1e-8)


def test_rank_deficient_falls_back_to_ridge():
    x = np.ones((10, 2))
    x[:, 1] = np.arange(10)
    x = np.concatenate([x, x[:, 1:] * 2], axis=1)
    fit = fit_ols(x, np.arange(10.0))
    assert fit.ridge
    np.testing.assert_allclose(fit.predict(x)[:, 0], np.arange(10.0), atol=1e-4)


def test_feature_sets_and_table(tmp_path):
    rng = np.random.default_rng(2)
    lon, lat, emb = rng.uniform(-180, 180, 60), rng.uniform(-60, 60, 60), rng.normal(size=(60, 5))
    feats = feature_sets(lon, lat, emb, fe_dim=8)
    assert feats["coords_fe"].shape == (60, 16) and feats["embed_coords"].shape == (60, 7)
    table = regress(feats, rng.normal(size=(60, 2)), ("a", "b"), seeds=(0, 1))
    assert table.test["embed"].shape == (2, 2)
    table.write(tmp_path)
    assert (tmp_path / "rmse.txt").read_text().splitlines()[0].split() == ["features", "a", "b"]


def test_map_zero_fill_and_round_trip(tmp_path):
    geom = GridGeometry(2, 2, 10.0, 0.0, 1.0)
    embs = [GridEmbedding(i, np.full(3, i + 1.0), 1) for i in (0, 1, 3)]
    values, present = embedding_map(embs, geom)
    assert present.tolist() == [[True, True], [False, True]]
    assert np.all(values[1, 0] == 0)
    np.testing.assert_array_equal(values[1, 1], [4, 4, 4])
    export_embedding_map(embs, geom, tmp_path)
    m, p, g = load_embedding_map(tmp_path)
    np.testing.assert_array_equal(m, values)
    assert g == geom and (tmp_path / "map_pca.png").exists()
    with pytest.raises(ValueError):
        embedding_map(embs + [GridEmbedding(3, np.zeros(3), 1)], geom)
    with pytest.raises(GeometryError):
        embedding_map([GridEmbedding(9, np.zeros(3), 1)], geom)


def test_constant_pca_is_grey():
    values = np.ones((2, 2, 4))
    present = np.array([[True, True], [True, False]])
    rgb = pca_rgb(values, present)
    assert np.all(rgb[present] == 128) and np.all(rgb[1, 1] == 0)


def test_embeddings_round_trip(tmp_path):
    embs = [GridEmbedding(5, np.arange(3.0), 2), GridEmbedding(2, np.ones(3), 1)]
    write_embeddings(tmp_path / "e.npz", embs, {"k": 1})
    back, manifest = read_embeddings(tmp_path / "e.npz")
    assert [e.grid_id for e in back] == [5, 2] and manifest["k"] == 1
    np.testing.assert_array_equal(back[0].vector, embs[0].vector)
