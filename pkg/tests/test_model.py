import struct

import numpy as np
import pytest

from ltnseg import autodiff as ad
from ltnseg.model import (CKPT_MAGIC, CheckpointError, SegModel, SegModelConfig, layer_shapes, load_checkpoint,
                          param_count, predict_mask, save_checkpoint)


@pytest.fixture(scope="module")
def model():
    return SegModel.init(SegModelConfig(seed=3))


def test_default_parameter_count(model):
    assert model.n_params() == param_count(SegModelConfig()) == 14283


@pytest.mark.parametrize("width,depth", [(4, 1), (8, 2), (6, 3)])
def test_closed_form_count_matches_layers(width, depth):
    cfg = SegModelConfig(width=width, depth=depth)
    by_layers = sum(int(np.prod(shape)) + shape[3] for _, shape in layer_shapes(cfg))
    assert param_count(cfg) == by_layers == SegModel.init(cfg).n_params()


def test_forward_is_a_distribution(model):
    x = np.random.default_rng(0).uniform(size=(2, 16, 16))
    probs = model.forward(x).data
    assert probs.shape == (2, 3, 16, 16)
    assert np.all(probs > 0)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)


def test_indivisible_size_rejected(model):
    with pytest.raises(ad.ShapeError):
        model.forward(np.zeros((1, 10, 12)))


def test_channel_mismatch_rejected(model):
    with pytest.raises(ad.ShapeError):
        model.forward(np.zeros((1, 8, 8, 2)))


def test_init_is_deterministic():
    a = SegModel.init(SegModelConfig(seed=5))
    b = SegModel.init(SegModelConfig(seed=5))
    c = SegModel.init(SegModelConfig(seed=6))
    assert all(np.array_equal(p.data, q.data) for p, q in zip(a.params, b.params))
    assert not np.array_equal(a.params[0].data, c.params[0].data)


def test_end_to_end_gradient():
    cfg = SegModelConfig(width=2, depth=1, seed=0)
    m = SegModel.init(cfg)
    x = np.random.default_rng(1).uniform(size=(1, 4, 4))
    proj = np.random.default_rng(2).normal(size=(1, 3, 4, 4))
    slot = m._names.index("dec1") * 2
    original = m.params[slot]

    def f(t):
        m.params[slot] = t
        try:
            return (m.forward(x) * ad.Tensor(proj)).sum()
        finally:
            m.params[slot] = original

    assert ad.gradient_check(f, original.data.copy(), tol=1e-5).passed


def test_predict_mask_axes():
    probs = np.zeros((3, 2, 2))
    probs[2] = 1
    assert predict_mask(probs).tolist() == [[2, 2], [2, 2]]
    assert predict_mask(probs[None]).shape == (1, 2, 2)


class TestCheckpoint:
    def test_roundtrip_is_bit_exact(self, model, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        back = load_checkpoint(path)
        assert back.config == model.config
        assert all(np.array_equal(p.data, q.data) for p, q in zip(model.params, back.params))

    def test_byte_layout(self, model, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        raw = path.read_bytes()
        assert raw[:8] == CKPT_MAGIC
        assert struct.unpack_from("<I", raw, 8)[0] == 1
        assert struct.unpack_from("<IIIIq", raw, 12) == (1, 8, 2, 3, 3)
        assert struct.unpack_from("<I", raw, 36)[0] == len(model.params)
        rank = struct.unpack_from("<I", raw, 40)[0]
        assert struct.unpack_from(f"<{rank}I", raw, 44) == model.params[0].shape

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOTACKPT" + bytes(40))
        with pytest.raises(CheckpointError) as err:
            load_checkpoint(path)
        assert err.value.offset == 0

    def test_truncated_reports_offset(self, model, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-10])
        with pytest.raises(CheckpointError, match="truncated") as err:
            load_checkpoint(path)
        assert 0 < err.value.offset < len(raw)
