import math

import numpy as np
import pytest
import torch

from eofm.backbone import Encoder, EncoderConfig, default_modalities
from eofm.metadata import MetadataRecord
from eofm.pretrain import (
    DecoderConfig,
    DegenerateMaskError,
    MaskedModel,
    PretrainConfig,
    TeacherSpec,
    build_pretrainer,
    distill_loss,
    learning_rate,
    make_mask,
    masked_mse,
    normalize_patches,
    num_masked,
    weight_hash,
)
from eofm.data import generate_synthetic, GridGeometry


@pytest.mark.parametrize("n, ratio, k", [(196, 0.7, 137), (49, 0.7, 34), (144, 0.7, 101), (4, 0.5, 2), (3, 0.5, 2)])
def test_num_masked(n, ratio, k):
    assert num_masked(n, ratio) == k


@pytest.mark.parametrize("n, ratio", [(10, 0.0), (10, 1.0), (1, 0.5), (3, 0.1), (3, 0.9)])
def test_degenerate_masks(n, ratio):
    with pytest.raises(DegenerateMaskError):
        num_masked(n, ratio)


def test_mask_uniform_and_exact():
    g = torch.Generator().manual_seed(0)
    plan = make_mask(16, 0.75, g, batch=4000)
    assert torch.all(plan.mask.sum(1) == 12)
    freq = plan.mask.float().mean(0)
    assert torch.all((freq - 0.75).abs() < 0.03)


def test_normalize_patches_stats():
    x = torch.randn(2, 5, 48, dtype=torch.float64) * 3 + 7
    y = normalize_patches(x)
    torch.testing.assert_close(y.mean(-1), torch.zeros(2, 5, dtype=torch.float64), atol=1e-12, rtol=0)
    torch.testing.assert_close(y.var(-1, unbiased=False), torch.ones(2, 5, dtype=torch.float64), atol=1e-6, rtol=0)
    const = normalize_patches(torch.full((1, 1, 4), 3.0))
    assert torch.equal(const, torch.zeros(1, 1, 4))


def test_masked_mse_ignores_visible():
    pred, target = torch.zeros(1, 3, 2), torch.tensor([[[1.0, 1.0], [2.0, 2.0], [100.0, 100.0]]])
    mask = torch.tensor([[True, True, False]])
    assert masked_mse(pred, target, mask).item() == pytest.approx(2.5)


def test_distill_values():
    a = torch.tensor([[1.0, 0.0], [0.0, 2.0]])
    assert distill_loss(a, a.clone()).item() == 0.0
    assert distill_loss(a, -a).item() == 2.0
    assert distill_loss(a, torch.tensor([[0.0, 1.0], [3.0, 0.0]])).item() == pytest.approx(1.0)
    assert torch.isfinite(distill_loss(torch.zeros(1, 2), torch.ones(1, 2)))
    with pytest.raises(ValueError):
        distill_loss(torch.ones(1, 3), torch.ones(1, 2))


def test_learning_rate_schedule():
    assert learning_rate(0, 100, 10, 1.0) == pytest.approx(0.1)
    assert learning_rate(9, 100, 10, 1.0) == pytest.approx(1.0)
    assert learning_rate(10, 100, 10, 1.0) == pytest.approx(1.0)
    assert learning_rate(55, 100, 10, 1.0) == pytest.approx(0.5)
    assert learning_rate(100, 100, 10, 1.0, 0.01) == pytest.approx(0.01)


def test_config_reports_all_problems():
    with pytest.raises(ValueError) as info:
        PretrainConfig(mask_ratio=1.5, batch_size=0, missing="ignore")
    msg = str(info.value)
    assert "mask_ratio" in msg and "batch_size" in msg and "missing" in msg
    assert PretrainConfig.preset("paper").peak_lr == pytest.approx(1.5e-4)


def _small_trainer(mods, **kw):
    enc = EncoderConfig(embed_dim=48, depth=2, num_heads=3, enc_dim=32)
    return build_pretrainer("desk", mods, 4, enc, seed=0, batch_size=4, **kw)


def test_total_is_weighted_sum():
    mods = {k: v for k, v in default_modalities("desk").items() if k in ("s1_grd", "s2_toa", "s5p_co")}
    grids = generate_synthetic(None, 4, mods, seed=1, geometry=GridGeometry(4, 4, 10, 10, 0.25))
    tr = _small_trainer(mods)
    terms = tr.evaluate(grids)
    expected = sum(v for k, v in terms.items() if k.startswith("mim/"))
    expected += 0.1 * terms["distill/rgb"] + 0.2 * terms["distill/s1s2"]
    assert terms["total"] == pytest.approx(expected, rel=1e-6)
    assert set(terms) == {"mim/s1_grd", "mim/s2_toa", "mim/s5p_co", "distill/rgb", "distill/s1s2", "total"}


def test_orthogonal_teachers_add_point_three():
    mods = {k: v for k, v in default_modalities("desk").items() if k in ("s1_grd", "s2_toa")}
    grids = generate_synthetic(None, 4, mods, seed=1, geometry=GridGeometry(4, 4, 10, 10, 0.25))
    tr = _small_trainer(mods)
    for proj in tr.projectors.values():
        torch.nn.init.zeros_(proj.weight)
        torch.nn.init.zeros_(proj.bias)
    terms = tr.evaluate(grids)
    mim = sum(v for k, v in terms.items() if k.startswith("mim/"))
    assert terms["distill/rgb"] == 1.0 and terms["distill/s1s2"] == 1.0
    # float32 sum of terms of order 1: a few ulps of slack
    assert terms["total"] - mim == pytest.approx(0.3, abs=1e-4)


def test_teachers_frozen_and_excluded_from_optimizer():
    mods = {k: v for k, v in default_modalities("desk").items() if k in ("s1_grd", "s2_toa")}
    grids = generate_synthetic(None, 4, mods, seed=2, geometry=GridGeometry(4, 4, 10, 10, 0.25))
    tr = _small_trainer(mods)
    before = weight_hash(tr.teachers)
    tr.train_step(grids)
    assert weight_hash(tr.teachers) == before
    opt_ids = {id(p) for g in tr.optimizer.param_groups for p in g["params"]}
    assert not any(id(p) in opt_ids for p in tr.teachers.parameters())


def test_mim_forward_shapes():
    torch.manual_seed(0)
    mods = default_modalities("desk")
    enc = Encoder(EncoderConfig(embed_dim=48, depth=1, num_heads=3, enc_dim=32))
    model = MaskedModel(enc, DecoderConfig(32, 1, 4))
    spec = mods["s3_olci"]
    x = torch.randn(2, 21, 32, 32)
    mask = make_mask(spec.num_patches, 0.7, torch.Generator().manual_seed(0), 2)
    out = model.forward_mim(x, [MetadataRecord()] * 2, spec, mask)
    assert out.pred.shape == (2, 16, 21 * 64) and out.pooled.shape == (2, 48)
    bad = make_mask(spec.num_patches, 0.7, torch.Generator().manual_seed(0), 1)
    with pytest.raises(ValueError):
        model.forward_mim(x, [MetadataRecord()] * 2, spec, bad)
