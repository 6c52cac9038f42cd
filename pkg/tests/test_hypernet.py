import numpy as np
import pytest
import torch

from eofm.encodings import EncodingRangeRegistry, fourier_features
from eofm.hypernet import (
    DynamicPatchEmbed,
    DynamicPatchPredictor,
    EmbeddingStore,
    InvalidSpecError,
    SpectralBandSpec,
    VariableEncoder,
    VariableSpec,
    bilinear_matrix,
    bilinear_matrix_1d,
    load_band_tables,
    patches,
    patchify,
    pi_resize_matrix,
    random_hash_embedding,
    resize_kernel,
    spectral_encode,
)
import torch.nn.functional as F


def test_band_tables():
    t = load_band_tables()
    assert t["s2_toa"].num_channels == 13 and t["s2_toa"].wavelengths[:3] == (440.0, 490.0, 560.0)
    assert t["s1_grd"].num_channels == 2
    assert t["s3_olci"].num_channels == 21


def test_spectral_encode_s1_rows_identical():
    enc = spectral_encode(load_band_tables()["s1_grd"], 32)
    assert enc.shape == (2, 32)
    assert torch.equal(enc[0], enc[1])


def test_spectral_encode_composition():
    reg = EncodingRangeRegistry()
    enc = spectral_encode(SpectralBandSpec((500.0,), (500.0,)), 16, reg)
    x = torch.tensor([500.0], dtype=torch.float64)
    expected = fourier_features(x, reg.config("wavelength", 16)) + fourier_features(x, reg.config("bandwidth", 16))
    torch.testing.assert_close(enc, expected.float())


def test_spectral_encode_permutation_equivariant():
    spec = load_band_tables()["s2_toa"]
    perm = np.random.default_rng(0).permutation(13)
    a = spectral_encode(spec, 24)
    b = spectral_encode(spec.subset(perm), 24)
    assert torch.equal(a[perm], b)


def test_invalid_band_spec():
    with pytest.raises(InvalidSpecError):
        SpectralBandSpec((1.0, 2.0), (1.0,))
    with pytest.raises(InvalidSpecError):
        SpectralBandSpec((0.0,), (1.0,))
    with pytest.raises(InvalidSpecError):
        VariableSpec("x", "telepathy")


def test_bilinear_matrix_matches_interpolate():
    rng = np.random.default_rng(0)
    for n_in, n_out in [(16, 4), (16, 8), (16, 32), (16, 64), (5, 3)]:
        x = rng.standard_normal((n_in, n_in))
        ref = F.interpolate(torch.from_numpy(x)[None, None], size=(n_out, n_out), mode="bilinear",
                            align_corners=False)[0, 0].numpy()
        np.testing.assert_allclose((bilinear_matrix(n_in, n_out) @ x.ravel()).reshape(n_out, n_out), ref, atol=1e-12)
    assert np.allclose(bilinear_matrix_1d(4, 2).sum(1), 1.0)


@pytest.mark.parametrize("target", [4, 8, 32, 64])
def test_pi_resize_equals_pinv(target):
    np.testing.assert_allclose(pi_resize_matrix(16, target), np.linalg.pinv(bilinear_matrix(16, target)), atol=1e-8)


def test_resize_identity_and_shape():
    k = torch.randn(6, 3, 16, 16)
    assert resize_kernel(k, 16) is k
    assert resize_kernel(k, 4).shape == (6, 3, 4, 4)


def test_upsize_preserves_all_inputs():
    m = torch.from_numpy(pi_resize_matrix(16, 32))
    b = torch.from_numpy(bilinear_matrix(16, 32))
    k = torch.randn(5, 256, dtype=torch.float64)
    x = torch.randn(256, 3, dtype=torch.float64)
    torch.testing.assert_close((k @ m) @ (b @ x), k @ x)


def test_generate_kernel_shapes():
    torch.manual_seed(0)
    emb = DynamicPatchEmbed(32, 48, 16, (4, 8, 16, 32, 64), num_heads=4)
    enc = spectral_encode(load_band_tables()["s2_toa"], 32)
    k16 = emb.generate_kernel(enc, 16)
    assert k16.weights.shape == (48, 13, 16, 16) and k16.bias.shape == (48,)
    assert emb.generate_kernel(torch.randn(1, 32), 4).weights.shape == (48, 1, 4, 4)
    with pytest.raises(Exception):
        emb.generate_kernel(enc, 12)
    again = emb.generate_kernel(enc, 16)
    assert torch.equal(again.weights, k16.weights)
    other = emb.generate_kernel(torch.randn(13, 32), 16)
    assert not torch.allclose(other.weights, k16.weights)


def test_patchify_linearity_and_shapes():
    torch.manual_seed(1)
    emb = DynamicPatchEmbed(16, 24, 16, (4, 8, 16, 32, 64), num_heads=4)
    k = emb.generate_kernel(torch.randn(3, 16), 8)
    x, y = torch.randn(3, 96, 96, dtype=torch.float64), torch.randn(3, 96, 96, dtype=torch.float64)
    k64 = type(k)(k.weights.double(), k.bias.double(), 8)
    assert patchify(x, k64).shape == (144, 24)
    a, b = 0.7, -1.3
    lhs = patchify(a * x + b * y, k64)
    rhs = a * patchify(x, k64) + b * patchify(y, k64) - (a + b - 1) * k64.bias
    torch.testing.assert_close(lhs, rhs)
    with pytest.raises(ValueError):
        patchify(torch.randn(3, 90, 96), k)
    with pytest.raises(ValueError):
        patchify(torch.randn(2, 96, 96), k)


def test_patches_order():
    img = torch.arange(2 * 4 * 4, dtype=torch.float32).reshape(1, 2, 4, 4)
    p = patches(img, 2)
    assert p.shape == (1, 4, 8)
    torch.testing.assert_close(p[0, 1], torch.tensor([2.0, 3, 6, 7, 18, 19, 22, 23]))


def test_predictor_shape():
    pred = DynamicPatchPredictor(16, 32, 16, 4)
    out = pred(torch.randn(2, 9, 32), torch.randn(3, 16), 4)
    assert out.shape == (2, 9, 3 * 16)


def test_variable_strategies(tmp_path):
    enc = VariableEncoder(32)
    dem = VariableSpec("Copernicus DEM elevation", "language")
    assert enc(dem).shape == (1, 32)
    names = ["Sentinel 5P Carbon Monoxide", "Sentinel 5P Nitrogen Dioxide", "Sentinel 5P Sulfur Dioxide",
             "Sentinel 5P Ozone", "Copernicus DEM elevation"]
    hashed = [random_hash_embedding(n, 2048) for n in names]
    np.testing.assert_array_equal(hashed[0], random_hash_embedding(names[0], 2048))
    for i in range(5):
        for j in range(i + 1, 5):
            assert not np.allclose(hashed[i], hashed[j])
    spec_out = enc(VariableSpec("Sentinel 5P Ozone", "spectroscopy"))
    assert spec_out.shape == (1, 32) and torch.isfinite(spec_out).all()
    with pytest.raises(FileNotFoundError, match="Unknown gas"):
        enc(VariableSpec("Unknown gas", "language"))


def test_embedding_store_round_trip(tmp_path):
    vecs = {"a b": np.arange(4, dtype=np.float32), "c": np.ones(4, dtype=np.float32)}
    EmbeddingStore.write(tmp_path, vecs)
    store = EmbeddingStore(tmp_path)
    np.testing.assert_array_equal(store.load("a b"), vecs["a b"])
