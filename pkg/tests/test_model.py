import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmtsvit import tensor as T
from mmtsvit.checkpoint import load_checkpoint, save_checkpoint
from mmtsvit.errors import ConfigError, DataError, ParseError
from mmtsvit.fusion import init_mm_params
from mmtsvit.model import (
    ModelConfig,
    TokenizerConfig,
    embed_and_prepend,
    init_tsvit,
    patchify,
    segmentation_head,
    sm_tsvit_forward,
    temporal_encode,
    unpatchify,
)
from mmtsvit.tensor import Tensor
from mmtsvit.train import cross_entropy_loss


class TestPatchify:
    def test_shape(self):
        cfg = TokenizerConfig(t=1, h=2, w=2, d=8, channels=1)
        out = patchify(Tensor(np.zeros((2, 4, 4, 1))), cfg)
        assert out.shape == (4, 2, 4)

    def test_indivisible_extent_names_axis(self):
        cfg = TokenizerConfig(t=1, h=2, w=2, d=8, channels=1)
        with pytest.raises(ConfigError, match="axis H"):
            patchify(Tensor(np.zeros((2, 5, 4, 1))), cfg)

    def test_constant_input_gives_constant_patches(self):
        cfg = TokenizerConfig(t=2, h=2, w=2, d=8, channels=3)
        out = patchify(Tensor(np.full((4, 4, 4, 3), 1.25)), cfg)
        assert (out.data == 1.25).all()

    @given(
        n_t=st.integers(1, 3), t=st.integers(1, 2),
        n_h=st.integers(1, 3), h=st.integers(1, 2),
        n_w=st.integers(1, 3), w=st.integers(1, 2),
        c=st.integers(1, 3), seed=st.integers(0, 1000),
    )
    @settings(max_examples=40, deadline=None)
    def test_roundtrip_bit_exact(self, n_t, t, n_h, h, n_w, w, c, seed):
        rng = np.random.default_rng(seed)
        shape = (n_t * t, n_h * h, n_w * w, c)
        x = rng.normal(size=shape)
        cfg = TokenizerConfig(t=t, h=h, w=w, d=4, channels=c)
        back = unpatchify(patchify(Tensor(x), cfg), cfg, shape)
        assert (back.data == x).all()

    def test_ordering_row_major_over_patch_grid(self):
        # encode the patch-grid coordinate into the pixel values
        cfg = TokenizerConfig(t=1, h=1, w=1, d=4, channels=1)
        x = np.arange(6.0).reshape(1, 2, 3, 1)
        out = patchify(Tensor(x), cfg)
        np.testing.assert_array_equal(out.data.reshape(-1), np.arange(6.0))


class TestEmbed:
    def _params(self, cfg, channels, seed=0):
        return init_tsvit(cfg, channels, np.random.default_rng(seed))

    def test_output_shape(self):
        cfg = ModelConfig(t=1, h=2, w=2, d=8, k=3, depth_temporal=1, depth_spatial=1, heads=2)
        p = self._params(cfg, 1)
        patches = patchify(Tensor(np.zeros((2, 4, 4, 1))), cfg.tokenizer(1))
        out = embed_and_prepend(patches, [10, 40], p)
        assert out.shape == (4, 5, 8)

    def test_date_out_of_range(self):
        cfg = ModelConfig(t=1, h=2, w=2, d=8, k=3, depth_temporal=1, depth_spatial=1, heads=2)
        p = self._params(cfg, 1)
        patches = patchify(Tensor(np.zeros((2, 4, 4, 1))), cfg.tokenizer(1))
        with pytest.raises(DataError):
            embed_and_prepend(patches, [10, 400], p)

    def test_dates_change_embedding(self):
        cfg = ModelConfig(t=1, h=2, w=2, d=8, k=3, depth_temporal=1, depth_spatial=1, heads=2)
        p = self._params(cfg, 1)
        patches = patchify(Tensor(np.ones((2, 4, 4, 1))), cfg.tokenizer(1))
        a = embed_and_prepend(patches, [10, 40], p).data
        b = embed_and_prepend(patches, [11, 40], p).data
        assert np.abs(a - b).max() > 0

    def test_class_tokens_prepended_identically_per_patch(self):
        cfg = ModelConfig(t=1, h=2, w=2, d=8, k=3, depth_temporal=1, depth_spatial=1, heads=2)
        p = self._params(cfg, 1)
        patches = patchify(Tensor(np.ones((2, 4, 4, 1))), cfg.tokenizer(1))
        out = embed_and_prepend(patches, [10, 40], p).data
        for n in range(4):
            np.testing.assert_array_equal(out[n, :3], p.class_tokens.data)


class TestEncodersAndHead:
    def _setup(self, seed=0, k=3):
        cfg = ModelConfig(
            t=1, h=2, w=2, d=8, k=k, depth_temporal=2, depth_spatial=1, heads=2,
            max_spatial_tokens=16,
        )
        p = init_tsvit(cfg, 2, np.random.default_rng(seed))
        return cfg, p

    def test_identity_layers_return_class_tokens(self):
        cfg, p = self._setup()
        for layer in p.temporal_layers:
            layer.attention.w_o.data[:] = 0.0
            layer.mlp_out.weight.data[:] = 0.0
            layer.mlp_out.bias.data[:] = 0.0
        patches = patchify(Tensor(np.zeros((2, 4, 4, 2))), cfg.tokenizer(2))
        z0 = embed_and_prepend(patches, [10, 40], p)
        cls = temporal_encode(z0, p.temporal_layers, cfg.k)
        for n in range(4):
            np.testing.assert_array_equal(cls.data[n], p.class_tokens.data)

    def test_head_per_pixel_simplex(self):
        cfg, p = self._setup()
        rng = np.random.default_rng(1)
        z = Tensor(rng.normal(size=(3, 4, 8)))
        y = segmentation_head(z, p.head, cfg, 4, 4)
        assert y.data.min() >= 0
        np.testing.assert_allclose(y.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_zero_head_uniform(self):
        cfg, p = self._setup()
        p.head.weight.data[:] = 0.0
        p.head.bias.data[:] = 0.0
        rng = np.random.default_rng(2)
        y = segmentation_head(Tensor(rng.normal(size=(3, 4, 8))), p.head, cfg, 4, 4)
        np.testing.assert_allclose(y.data, 1.0 / 3.0, atol=1e-15)

    def test_head_index_map(self):
        # rearrangement oracle: pre-softmax logits of each class channel
        # must land exactly where unpatchify puts the projected vectors
        cfg, p = self._setup(k=2)
        rng = np.random.default_rng(3)
        z = rng.normal(size=(2, 4, 8))
        logits = z @ p.head.weight.data + p.head.bias.data  # (2, 4, h*w)
        tok = TokenizerConfig(1, 2, 2, 8, 1)
        maps = [
            unpatchify(Tensor(logits[c].reshape(4, 1, 4)), tok, (1, 4, 4, 1)).data[0, :, :, 0]
            for c in range(2)
        ]
        stacked = np.stack(maps, axis=-1)
        e = np.exp(stacked - stacked.max(axis=-1, keepdims=True))
        expected = e / e.sum(axis=-1, keepdims=True)
        y = segmentation_head(Tensor(z), p.head, cfg, 4, 4)
        np.testing.assert_allclose(y.data, expected, atol=1e-12)
        # patch (0, 0) is filled from the first projected vector
        np.testing.assert_allclose(
            stacked[:2, :2, 0], logits[0, 0].reshape(2, 2), atol=1e-15
        )


class TestForward:
    def _tiny(self, seed=0):
        cfg = ModelConfig(
            t=1, h=2, w=2, d=8, k=3, depth_temporal=2, depth_spatial=1, heads=2,
            max_spatial_tokens=16,
        )
        p = init_tsvit(cfg, 2, np.random.default_rng(seed))
        rng = np.random.default_rng(seed + 100)
        x = rng.normal(size=(4, 4, 4, 2))
        dates = [5, 15, 25, 35]
        return cfg, p, x, dates

    def test_output_shape_and_simplex(self):
        cfg, p, x, dates = self._tiny()
        y = sm_tsvit_forward(Tensor(x), dates, p, cfg)
        assert y.shape == (4, 4, 3)
        np.testing.assert_allclose(y.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_deterministic(self):
        cfg1, p1, x1, dates = self._tiny()
        cfg2, p2, x2, _ = self._tiny()
        a = sm_tsvit_forward(Tensor(x1), dates, p1, cfg1)
        b = sm_tsvit_forward(Tensor(x2), dates, p2, cfg2)
        np.testing.assert_array_equal(a.data, b.data)

    def test_timestep_swap_with_dates_is_invariant(self):
        cfg, p, x, dates = self._tiny()
        y1 = sm_tsvit_forward(Tensor(x), dates, p, cfg).data
        perm = [2, 0, 3, 1]
        y2 = sm_tsvit_forward(
            Tensor(x[perm]), [dates[i] for i in perm], p, cfg
        ).data
        np.testing.assert_allclose(y1, y2, atol=1e-10)

    def test_full_gradient_check(self):
        cfg, p, x, dates = self._tiny()
        rng = np.random.default_rng(5)
        labels = rng.integers(0, 3, size=(4, 4))

        def f(_):
            y = sm_tsvit_forward(Tensor(x), dates, p, cfg)
            return cross_entropy_loss(y, labels)

        report = T.grad_check(
            f, p.named(), tol=1e-4, max_entries_per_tensor=12,
            rng=np.random.default_rng(0),
        )
        assert report["passed"], report


class TestCheckpoint:
    def test_roundtrip_byte_identical(self, tmp_path):
        cfg = ModelConfig(t=1, h=2, w=2, d=8, k=3, depth_temporal=1, depth_spatial=1,
                          heads=2, max_spatial_tokens=16)
        params = init_mm_params("SCTF", cfg, [2, 3], seed=4)
        path = tmp_path / "a.ckpt"
        save_checkpoint(params, cfg, {"channels": [2, 3]}, str(path))
        loaded, cfg2, meta = load_checkpoint(str(path))
        path2 = tmp_path / "b.ckpt"
        save_checkpoint(loaded, cfg2, meta, str(path2))
        assert path.read_bytes() == path2.read_bytes()
        for name, t in params.named().items():
            np.testing.assert_array_equal(t.data, loaded.named()[name].data)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(ParseError, match="TSVC"):
            load_checkpoint(str(path))

    def test_truncated(self, tmp_path):
        cfg = ModelConfig(t=1, h=2, w=2, d=8, k=2, depth_temporal=1, depth_spatial=1,
                          heads=2, max_spatial_tokens=16)
        params = init_mm_params("SM", cfg, [1], seed=0)
        path = tmp_path / "c.ckpt"
        save_checkpoint(params, cfg, {"channels": [1]}, str(path))
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) - 100])
        with pytest.raises(ParseError, match="truncated"):
            load_checkpoint(str(path))
