import numpy as np
import pytest
import torch

from eofm.backbone import Encoder, EncoderConfig, load_encoder, save_encoder
from eofm.metadata import MetadataRecord

META = MetadataRecord(12.5, 41.9, 0.4096, 18000.0)


def test_token_shapes(tiny_encoder, desk_mods):
    tiny_encoder.eval()
    s2 = tiny_encoder(torch.randn(13, 64, 64), META, desk_mods["s2_toa"])
    assert s2.tokens.shape == (17, 192) and s2.pooled.shape == (192,)
    co = tiny_encoder(torch.randn(1, 28, 28), META, desk_mods["s5p_co"])
    assert co.tokens.shape == (50, 192)
    dem = tiny_encoder(torch.randn(2, 1, 128, 128), [META, META], desk_mods["dem"], taps=(1, 3, 3))
    assert dem.tokens.shape == (2, 17, 192) and len(dem.hidden) == 3
    assert torch.equal(dem.hidden[1], dem.hidden[2])


def test_pooled_is_patch_mean(tiny_encoder, desk_mods):
    out = tiny_encoder(torch.randn(2, 2, 64, 64), [META, META], desk_mods["s1_grd"])
    torch.testing.assert_close(out.pooled, out.tokens[:, 1:].mean(1))


def test_channel_mismatch_and_bad_taps(tiny_encoder, desk_mods):
    with pytest.raises(ValueError):
        tiny_encoder(torch.randn(3, 64, 64), META, desk_mods["s2_toa"])
    with pytest.raises(ValueError):
        tiny_encoder(torch.randn(2, 64, 64), META, desk_mods["s1_grd"], taps=(4,))


def test_eval_forward_deterministic(tiny_encoder, desk_mods):
    x = torch.randn(21, 32, 32)
    a = tiny_encoder(x, META, desk_mods["s3_olci"]).tokens
    b = tiny_encoder(x, META, desk_mods["s3_olci"]).tokens
    assert torch.equal(a, b)


def test_checkpoint_round_trip(tmp_path, tiny_encoder, desk_mods):
    path = tmp_path / "enc.ckpt"
    save_encoder(path, tiny_encoder, desk_mods, {"extra/x": np.arange(3)}, {"note": "hi"})
    enc2, mods2, arrays, manifest = load_encoder(path)
    assert list(mods2) == list(desk_mods) and mods2 == desk_mods
    assert manifest["note"] == "hi" and np.array_equal(arrays["extra/x"], np.arange(3))
    x = torch.randn(2, 64, 64)
    assert torch.equal(tiny_encoder(x, META, desk_mods["s1_grd"]).tokens, enc2(x, META, desk_mods["s1_grd"]).tokens)
    save_encoder(tmp_path / "again.ckpt", enc2, mods2, {"extra/x": np.arange(3)}, {"note": "hi"})
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_presets():
    assert EncoderConfig.preset("base").embed_dim == 768
    assert EncoderConfig.preset("tiny", depth=2).depth == 2
