"""Encoder: patch extraction, position handling, attention, pooling."""

import numpy as np
import pytest

from comim import autodiff as ad
from comim.encoder import (EncoderConfig, encode, init_encoder_params,
                           patchify, pool, unpatchify)
from comim.rng import RngStreams


def small_cfg(**kw):
    base = dict(image_size=16, channels=3, patch_size=8, dim=16, heads=2,
                depth=2, mlp_ratio=2.0)
    base.update(kw)
    return EncoderConfig(**base)


def make_params(cfg, seed=0):
    return init_encoder_params(cfg, RngStreams(seed)["init"])


def test_patchify_raster_order_oracle():
    rng = np.random.default_rng(0)
    imgs = rng.random((2, 8, 8, 3)).astype(np.float32)
    got = patchify(imgs, 4)
    assert got.shape == (2, 4, 48)
    for b in range(2):
        idx = 0
        for r in range(2):
            for c in range(2):
                block = imgs[b, r * 4:(r + 1) * 4, c * 4:(c + 1) * 4, :]
                np.testing.assert_array_equal(got[b, idx], block.reshape(-1))
                idx += 1


def test_patchify_flatten_order_row_col_channel():
    img = np.zeros((1, 4, 4, 2), dtype=np.float32)
    img[0, 0, 1, 0] = 5.0  # row 0, col 1, channel 0
    flat = patchify(img, 4)[0, 0]
    # (row, col, chan) raster: offset = (row*4 + col)*2 + chan
    assert flat[(0 * 4 + 1) * 2 + 0] == 5.0
    assert flat.sum() == 5.0


def test_unpatchify_inverts_patchify():
    rng = np.random.default_rng(1)
    imgs = rng.random((3, 16, 16, 3)).astype(np.float32)
    back = unpatchify(patchify(imgs, 8), 16, 8, 3)
    np.testing.assert_array_equal(back, imgs)


def test_patchify_rejects_indivisible():
    with pytest.raises(ValueError):
        patchify(np.zeros((1, 10, 10, 1), dtype=np.float32), 4)


def test_config_validation():
    with pytest.raises(ValueError):
        small_cfg(patch_size=5)  # 16 % 5 != 0
    with pytest.raises(ValueError):
        small_cfg(dim=15)  # heads must divide dim
    with pytest.raises(ValueError):
        small_cfg(depth=0)
    with pytest.raises(ValueError):
        small_cfg(pooling="max")
    assert small_cfg(pooling="cls").use_cls  # cls pooling implies the token
    with pytest.raises(ValueError):
        small_cfg(pooling="cls", use_cls=False)
    cfg = small_cfg()
    assert cfg.n_patches == 4 and cfg.patch_dim == 192 and cfg.mlp_dim == 32


def test_init_shapes_and_truncation():
    cfg = small_cfg(use_cls=True)
    params = make_params(cfg)
    assert params["enc/pos"].data.shape == (cfg.n_patches + 1, cfg.dim)
    assert params["enc/cls"].data.shape == (cfg.dim,)
    assert params["enc/patch_proj/w"].data.shape == (cfg.patch_dim, cfg.dim)
    for name in ("enc/block0/ln1/g", "enc/block1/ln2/g", "enc/ln_f/g"):
        np.testing.assert_array_equal(params[name].data, np.ones(cfg.dim, dtype=np.float32))
    # every gaussian draw clipped at 2 sigma of std 0.02
    for name, p in params.items():
        leaf = name.rsplit("/", 1)[-1]
        if leaf.startswith("w") or name in ("enc/pos", "enc/cls"):
            assert float(np.abs(p.data).max()) <= 0.04 + 1e-12, name
    cfg_plain = small_cfg()
    assert make_params(cfg_plain)["enc/pos"].data.shape == (cfg.n_patches, cfg.dim)


def test_visible_none_equals_full_arange():
    cfg = small_cfg()
    params = make_params(cfg)
    rng = np.random.default_rng(2)
    imgs = rng.random((2, 16, 16, 3)).astype(np.float32)
    a = encode(imgs, params, cfg).data
    b = encode(imgs, params, cfg, visible=np.arange(4)).data
    np.testing.assert_array_equal(a, b)


def test_positions_follow_original_grid():
    """A patch keeps its own positional row no matter where it lands in the
    visible subsequence."""
    cfg = small_cfg(depth=1)
    params = make_params(cfg)
    rng = np.random.default_rng(3)
    imgs = rng.random((1, 16, 16, 3)).astype(np.float32)
    full = encode(imgs, params, cfg).data
    sub = encode(imgs, params, cfg, visible=np.array([2])).data
    # self-attention over a single token: its embedding row is the same one
    # the full pass built for position 2, so both runs start from the same
    # projected vector; check the embedding stage via a depth-independent
    # probe: positions enter additively before block 0.
    emb_full = _embedding_stage(imgs, params, cfg, np.arange(4))
    emb_sub = _embedding_stage(imgs, params, cfg, np.array([2]))
    # different sequence lengths hit different BLAS kernels; values agree to
    # rounding but not bitwise
    np.testing.assert_allclose(emb_full[:, 2], emb_sub[:, 0], rtol=0, atol=1e-6)
    assert full.shape == (1, 4, cfg.dim) and sub.shape == (1, 1, cfg.dim)


def _embedding_stage(imgs, params, cfg, vis):
    patches = patchify(imgs, cfg.patch_size)
    gathered = patches[:, vis]
    x = gathered @ params["enc/patch_proj/w"].data + params["enc/patch_proj/b"].data
    return x + params["enc/pos"].data[vis]


def test_visible_validation():
    cfg = small_cfg()
    params = make_params(cfg)
    imgs = np.zeros((1, 16, 16, 3), dtype=np.float32)
    with pytest.raises(ValueError):
        encode(imgs, params, cfg, visible=np.array([1, 1]))
    with pytest.raises(IndexError):
        encode(imgs, params, cfg, visible=np.array([4]))


def test_masked_patches_cannot_influence_visible_outputs():
    cfg = small_cfg()
    params = make_params(cfg)
    rng = np.random.default_rng(4)
    imgs = rng.random((1, 16, 16, 3)).astype(np.float32)
    visible = np.array([0, 3])
    base = encode(imgs, params, cfg, visible=visible).data
    tampered = imgs.copy()
    tampered[0, 0:8, 8:16, :] = 7.0  # patch 1 is masked; flip it hard
    after = encode(tampered, params, cfg, visible=visible).data
    np.testing.assert_array_equal(base, after)


def test_attention_rows_are_distributions():
    cfg = small_cfg(depth=2, use_cls=True)
    params = make_params(cfg)
    rng = np.random.default_rng(5)
    imgs = rng.random((2, 16, 16, 3)).astype(np.float32)
    capture = {}
    encode(imgs, params, cfg, capture=capture)
    assert len(capture["attention"]) == cfg.depth
    for attn in capture["attention"]:
        assert attn.shape == (2, cfg.heads, 5, 5)
        assert (attn >= 0).all()
        np.testing.assert_allclose(attn.sum(axis=-1), np.ones((2, cfg.heads, 5)),
                                   atol=1e-6)


def test_cls_token_prepended():
    cfg = small_cfg(use_cls=True)
    params = make_params(cfg)
    imgs = np.zeros((2, 16, 16, 3), dtype=np.float32)
    out = encode(imgs, params, cfg).data
    assert out.shape == (2, 5, cfg.dim)
    np.testing.assert_array_equal(out[0], out[1])  # identical inputs, identical rows


def test_gap_pooling_is_order_invariant():
    cfg = small_cfg()
    params = make_params(cfg)
    rng = np.random.default_rng(6)
    imgs = rng.random((1, 16, 16, 3)).astype(np.float32)
    a = pool(encode(imgs, params, cfg, visible=np.array([0, 1, 2, 3])), "gap").data
    b = pool(encode(imgs, params, cfg, visible=np.array([3, 1, 0, 2])), "gap").data
    assert np.abs(a - b).max() < 1e-5


def test_pool_modes():
    cfg = small_cfg(use_cls=True, pooling="cls")
    params = make_params(cfg)
    rng = np.random.default_rng(7)
    imgs = rng.random((2, 16, 16, 3)).astype(np.float32)
    enc = encode(imgs, params, cfg)
    cls_pool = pool(enc, "cls", has_cls=True).data
    np.testing.assert_array_equal(cls_pool, enc.data[:, 0])
    gap_pool = pool(enc, "gap", has_cls=True).data
    np.testing.assert_allclose(gap_pool, enc.data[:, 1:].mean(axis=1), atol=1e-6)
    with pytest.raises(ValueError):
        pool(enc, "cls", has_cls=False)


def test_encode_is_deterministic():
    cfg = small_cfg(depth=2)
    params = make_params(cfg, seed=9)
    rng = np.random.default_rng(8)
    imgs = rng.random((2, 16, 16, 3)).astype(np.float32)
    np.testing.assert_array_equal(encode(imgs, params, cfg).data,
                                  encode(imgs, params, cfg).data)


def test_gradients_flow_through_full_encoder():
    """One small FD check through the whole encoder stack in float64."""
    from oracles import assert_gradcheck, finite_difference

    cfg = EncoderConfig(image_size=8, channels=1, patch_size=4, dim=8,
                        heads=2, depth=1, mlp_ratio=2.0)
    params = make_params(cfg, seed=1)
    for p in params.values():
        p.data = p.data.astype(np.float64)
    imgs = np.random.default_rng(10).random((1, 8, 8, 1))
    w = np.random.default_rng(11).normal(size=(1, 4, 8))

    def loss_tensor():
        out = encode(imgs, params, cfg)
        return ad.reduce(ad.mul(out, ad.Tensor(w)), "sum")

    with ad.Tape():
        loss = loss_tensor()
    store = ad.backward(loss)
    for name in ("enc/patch_proj/w", "enc/pos", "enc/block0/attn/wq", "enc/ln_f/g"):
        arr = params[name].data
        fd = finite_difference(lambda: float(loss_tensor().data), [arr])[0]
        assert_gradcheck(store.wrt(params[name]), fd, label=name)
