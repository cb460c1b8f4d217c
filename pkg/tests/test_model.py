import dataclasses

import numpy as np
import pytest
import torch

from smplgait.errors import ConfigError, ShapeError
from smplgait.model import (
    HorizontalPyramidPooling, ModelConfig, SMPLGait, apply_spatial_transform, embed_sequence,
    load_checkpoint, save_checkpoint, set_pool, sln_forward, stn_forward,
)

from conftest import TINY_MODEL, random_sample


@pytest.mark.parametrize("size, hw, g_len", [((128, 88), (32, 22), 704), ((64, 44), (16, 11), 176)])
def test_shape_trace(size, hw, g_len):
    cfg = ModelConfig(input_size=size)
    assert cfg.feature_hw == hw and cfg.transform_dim == g_len
    model = SMPLGait(cfg).eval()
    fmap = sln_forward(model, np.zeros((2,) + size, np.uint8))
    assert tuple(fmap.shape) == (2, 256) + hw
    g = stn_forward(model, np.random.default_rng(0).normal(size=(2, 85)))
    assert tuple(g.shape) == (2, g_len)


def test_zero_frame_gives_zero_map():
    model = SMPLGait(TINY_MODEL).eval()
    fmap = sln_forward(model, np.zeros((1, 32, 24), np.uint8))
    assert torch.count_nonzero(fmap) == 0


def test_stn_eval_deterministic():
    model = SMPLGait(TINY_MODEL).eval()
    y = np.random.default_rng(1).normal(size=(5, 85))
    assert torch.equal(stn_forward(model, y), stn_forward(model, y))


def test_transform_two_by_two():
    f = torch.tensor([[[[1.0, 2.0], [3.0, 4.0]]]])
    g = torch.tensor([[0.0, 1.0, 0.0, 0.0]])
    out = apply_spatial_transform(f, g)
    torch.testing.assert_close(out[0, 0], torch.tensor([[1.0, 3.0], [3.0, 7.0]]), rtol=0, atol=0)


def test_transform_identity_and_broadcast():
    gen = torch.Generator().manual_seed(0)
    fmap = torch.randn(3, 4, 6, 6, generator=gen, dtype=torch.float64)
    assert torch.equal(apply_spatial_transform(fmap, torch.zeros(3, 36, dtype=torch.float64)), fmap)

    g = torch.randn(1, 36, generator=gen, dtype=torch.float64)
    eye = torch.eye(6, dtype=torch.float64).expand(1, 2, 6, 6)
    out = apply_spatial_transform(eye, g)
    torch.testing.assert_close(out[0, 0], torch.eye(6, dtype=torch.float64) + g.reshape(6, 6))
    # one G per frame, shared by every channel
    assert torch.equal(out[0, 0], out[0, 1])


def test_transform_pads_non_square_maps():
    fmap = torch.ones(1, 1, 4, 3)
    out = apply_spatial_transform(fmap, torch.zeros(1, 12))
    assert out.shape == (1, 1, 4, 4)
    assert out[..., 3].abs().sum() == 0
    with pytest.raises(ShapeError):
        apply_spatial_transform(fmap, torch.zeros(1, 11))


def test_set_pool_examples():
    maps = torch.tensor([[[1.0, 5.0], [3.0, 2.0], [0.0, 4.0]]])
    assert torch.equal(set_pool(maps), torch.tensor([[3.0, 5.0]]))
    single = torch.randn(1, 1, 3, 4, 4)
    assert torch.equal(set_pool(single), single[:, 0])


def test_hpp_constant_map_identity_projection():
    hpp = HorizontalPyramidPooling((1, 2, 4, 8, 16), 3, 3)
    assert hpp.weight.shape[0] == 31
    with torch.no_grad():
        hpp.weight.copy_(torch.eye(3).expand(31, 3, 3))
    v = torch.tensor([0.5, -1.0, 2.0])
    x = v.view(1, 3, 1, 1).expand(1, 3, 16, 16)
    out = hpp(x)
    assert out.shape == (1, 31, 3)
    torch.testing.assert_close(out[0], (2 * v).expand(31, 3))


def test_hpp_single_scale():
    hpp = HorizontalPyramidPooling((1,), 4, 5)
    assert hpp(torch.randn(2, 4, 8, 8)).shape == (2, 1, 5)


def test_embedding_shape_default_config():
    model = SMPLGait(ModelConfig()).eval()
    emb = embed_sequence(model, random_sample(np.random.default_rng(0), length=3, size=(64, 44)))
    assert tuple(emb.shape) == (31, 256)


def test_embedding_frame_order_invariant():
    model = SMPLGait(TINY_MODEL).double().eval()
    sample = random_sample(np.random.default_rng(2), length=9)
    perm = np.random.default_rng(3).permutation(9)
    a = embed_sequence(model, sample)
    b = embed_sequence(model, sample.take(perm))
    torch.testing.assert_close(a, b, rtol=0, atol=0)


def test_chunked_eval_matches_single_pass():
    # float64 keeps batch-size dependent conv rounding far below the tolerance
    model = SMPLGait(TINY_MODEL).double().eval()
    sample = random_sample(np.random.default_rng(4), length=20)
    torch.testing.assert_close(embed_sequence(model, sample, chunk=3), embed_sequence(model, sample, chunk=64),
                               rtol=0, atol=1e-12)


def test_zeroed_stn_matches_no3d():
    with_3d = SMPLGait(TINY_MODEL).double()
    without = SMPLGait(dataclasses.replace(TINY_MODEL, enable_3d_branch=False)).double()
    without.load_state_dict({k: v for k, v in with_3d.state_dict().items() if not k.startswith("stn.")})
    with_3d.stn.zero_output_()
    with_3d.eval(), without.eval()
    sample = random_sample(np.random.default_rng(5), length=7)
    assert torch.equal(embed_sequence(with_3d, sample), embed_sequence(without, sample))


def test_ablation_has_no_transform_params():
    model = SMPLGait(dataclasses.replace(TINY_MODEL, enable_3d_branch=False))
    assert model.stn is None
    assert not any(name.startswith("stn") for name, _ in model.named_parameters())


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(input_size=(62, 44))
    with pytest.raises(ConfigError, match="divisible"):
        ModelConfig(input_size=(32, 24), hpp_scales=(1, 16))
    assert ModelConfig.from_dict(TINY_MODEL.to_dict()) == TINY_MODEL


def test_frame_size_mismatch_raises():
    model = SMPLGait(TINY_MODEL).eval()
    with pytest.raises(ShapeError):
        embed_sequence(model, random_sample(np.random.default_rng(0), size=(64, 44)))


def test_checkpoint_round_trip_bit_exact(tmp_path):
    model = SMPLGait(TINY_MODEL).eval()
    sample = random_sample(np.random.default_rng(6))
    before = embed_sequence(model, sample)
    save_checkpoint(tmp_path / "m.pt", model, iteration=3)
    loaded, ckpt = load_checkpoint(tmp_path / "m.pt")
    assert ckpt["iteration"] == 3 and loaded.cfg == TINY_MODEL
    assert torch.equal(embed_sequence(loaded, sample), before)


def test_load_checkpoint_rejects_foreign_file(tmp_path):
    torch.save({"hello": 1}, tmp_path / "x.pt")
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path / "x.pt")
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.pt")
