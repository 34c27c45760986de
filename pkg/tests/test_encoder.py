import numpy as np
import pytest

from s2gs import autodiff as ad
from s2gs import encoder as enc_mod
from s2gs.camera import CameraParams
from s2gs.config import Config
from s2gs.encoder import CausalEncoder, build_causal_mask
from s2gs.errors import ContractError, DimensionError

from helpers import assert_grads_close

SMALL = Config(image_size=16, patch_size=8, embed_dim=32, encoder_heads=4, head_hidden=16)


@pytest.fixture(scope="module")
def small_encoder():
    return CausalEncoder(SMALL, seed=1)


def rand_frames(n, size, seed=0):
    return np.random.default_rng(seed).random((n, size, size, 3)).astype(np.float32)


def test_causal_mask_three_frames():
    ninf = ad.neg_inf()
    want = np.array([[0, ninf, ninf], [0, 0, ninf], [0, 0, 0]], dtype=np.float32)
    assert np.array_equal(build_causal_mask(3), want)


def test_causal_mask_single_frame():
    assert np.array_equal(build_causal_mask(1), np.array([[0.0]], dtype=np.float32))


def test_causal_mask_token_granularity_zero_counts():
    ppf = 4
    mask = build_causal_mask(5, tokens_per_frame=ppf)
    for row in range(5 * ppf):
        frame = row // ppf  # 0-based; frame t has (t+1)*ppf visible tokens
        assert (mask[row] == 0).sum() == (frame + 1) * ppf


def test_streaming_matches_batched(small_encoder):
    frames = rand_frames(8, SMALL.image_size)
    with ad.no_grad():
        batched = small_encoder.forward_batched(frames).data
    cache = small_encoder.new_cache()
    outs = []
    for t in range(8):
        feats, cache = small_encoder.encode_step(frames[t], cache)
        outs.append(feats)
    stream = np.stack(outs)
    dev = np.abs(stream - batched).max() / max(np.abs(stream).max(), np.abs(batched).max())
    assert dev <= 1e-5


def test_single_frame_streaming_equals_batch(small_encoder):
    frames = rand_frames(1, SMALL.image_size, seed=3)
    with ad.no_grad():
        batched = small_encoder.forward_batched(frames).data[0]
    feats, _ = small_encoder.encode_step(frames[0], small_encoder.new_cache())
    np.testing.assert_allclose(feats, batched, rtol=1e-5, atol=1e-6)


def test_cache_grows_append_only(small_encoder):
    frames = rand_frames(4, SMALL.image_size, seed=4)
    cache = small_encoder.new_cache()
    snapshots = []
    for t in range(4):
        _, cache = small_encoder.encode_step(frames[t], cache)
        assert cache.length() == (t + 1) * small_encoder.tokens_per_frame
        snapshots.append(cache.keys[0].copy())
    for t in range(3):
        n = snapshots[t].shape[0]
        assert np.array_equal(snapshots[-1][:n], snapshots[t])


def test_causality_bit_exact(small_encoder):
    frames = rand_frames(6, SMALL.image_size, seed=5)
    perturbed = frames.copy()
    perturbed[4] += 0.25

    def run(fs):
        cache = small_encoder.new_cache()
        return [small_encoder.encode_step(f, cache)[0] for f in fs]

    a = run(frames)
    b = run(perturbed)
    for t in range(4):
        assert np.array_equal(a[t], b[t])
    assert not np.array_equal(a[4], b[4])


def test_frame_size_mismatch(small_encoder):
    with pytest.raises(DimensionError):
        small_encoder.encode_step(np.zeros((8, 8, 3), dtype=np.float32),
                                  small_encoder.new_cache())


def test_mac_counter_affine_in_t(small_encoder):
    frames = rand_frames(64, SMALL.image_size, seed=6)
    cache = small_encoder.new_cache()
    macs = []
    for t in range(64):
        enc_mod.mac_counter.reset()
        small_encoder.encode_step(frames[t], cache)
        macs.append(enc_mod.mac_counter.total)
    ts = np.arange(1, 65)
    a, b = np.polyfit(ts, macs, 1)
    pred = a * ts + b
    r2 = 1 - ((macs - pred) ** 2).sum() / ((macs - np.mean(macs)) ** 2).sum()
    assert r2 > 0.999
    assert a > 0


def test_heads_zero_features_default_depth(small_encoder):
    zero = ad.Tensor(np.zeros((small_encoder.tokens_per_frame, SMALL.embed_dim), np.float32))
    with ad.no_grad():
        out = small_encoder.heads_forward(zero)
    np.testing.assert_allclose(out.depth.data, np.log(2.0), atol=1e-5)


def test_heads_quaternion_unit_norm(small_encoder):
    rng = np.random.default_rng(7)
    feats = ad.Tensor(rng.normal(size=(small_encoder.tokens_per_frame, SMALL.embed_dim)).astype(np.float32))
    with ad.no_grad():
        out = small_encoder.heads_forward(feats)
    q = out.camera.data[4:8]
    assert abs(np.linalg.norm(q) - 1.0) <= 1e-6
    assert (out.depth.data > 0).all()


def test_heads_attribute_channel_count(small_encoder):
    assert enc_mod.ATTRS_PER_PIXEL == 3 + 4 + 1 + 3
    feats = ad.Tensor(np.zeros((small_encoder.tokens_per_frame, SMALL.embed_dim), np.float32))
    with ad.no_grad():
        out = small_encoder.heads_forward(feats)
    assert out.attrs.shape == (SMALL.image_size, SMALL.image_size, 11)


def _teacher_cam(size):
    return CameraParams(fx=size, fy=size, cx=size / 2, cy=size / 2,
                        quat=np.array([1.0, 0, 0, 0]), trans=np.zeros(3))


def test_distill_zero_for_perfect_prediction(small_encoder):
    size = SMALL.image_size
    frames = rand_frames(1, size, seed=8)
    with ad.no_grad():
        feats = small_encoder.forward_batched(frames)
        heads = small_encoder.heads_forward(feats[0])
    cam = heads.to_camera()
    valid = np.ones((size, size), dtype=bool)
    losses = small_encoder.distill_losses(heads, heads.depth.data, cam, valid)
    assert float(losses.depth.data) == 0.0
    assert float(losses.camera.data) < 1e-10


def test_distill_constant_depth_residual(small_encoder):
    size = SMALL.image_size
    frames = rand_frames(1, size, seed=9)
    with ad.no_grad():
        feats = small_encoder.forward_batched(frames)
        heads = small_encoder.heads_forward(feats[0])
    teacher = heads.depth.data - 2.0
    losses = small_encoder.distill_losses(heads, teacher, heads.to_camera(),
                                          np.ones((size, size), dtype=bool))
    np.testing.assert_allclose(float(losses.depth.data), 4.0, rtol=1e-5)


def test_distill_huber_single_component():
    # residual of 2 with delta=1 contributes |r| - delta/2 = 1.5
    r = ad.Tensor(np.array([2.0], dtype=np.float32))
    assert float(ad.huber(r, 1.0).data[0]) == pytest.approx(1.5)
    r_small = ad.Tensor(np.array([0.5], dtype=np.float32))
    assert float(ad.huber(r_small, 1.0).data[0]) == pytest.approx(0.125)


def test_distill_empty_valid_mask_flags(small_encoder):
    size = SMALL.image_size
    frames = rand_frames(1, size, seed=10)
    with ad.no_grad():
        feats = small_encoder.forward_batched(frames)
        heads = small_encoder.heads_forward(feats[0])
    losses = small_encoder.distill_losses(heads, heads.depth.data, heads.to_camera(),
                                          np.zeros((size, size), dtype=bool))
    assert losses.depth_valid is False
    assert float(losses.depth.data) == 0.0


def test_distill_sign_flip_invariance(small_encoder):
    size = SMALL.image_size
    frames = rand_frames(1, size, seed=11)
    with ad.no_grad():
        feats = small_encoder.forward_batched(frames)
        heads = small_encoder.heads_forward(feats[0])
    cam = _teacher_cam(size)
    flipped = CameraParams(fx=cam.fx, fy=cam.fy, cx=cam.cx, cy=cam.cy,
                           quat=-cam.quat, trans=cam.trans)
    valid = np.ones((size, size), dtype=bool)
    a = small_encoder.distill_losses(heads, heads.depth.data, cam, valid)
    b = small_encoder.distill_losses(heads, heads.depth.data, flipped, valid)
    assert float(a.camera.data) == float(b.camera.data)


def test_distill_losses_gradcheck():
    cfg = Config(image_size=8, patch_size=4, embed_dim=16, encoder_heads=2, head_hidden=8)
    enc = CausalEncoder(cfg, seed=2)
    frames = rand_frames(1, 8, seed=12)
    teacher_depth = np.full((8, 8), 1.5)
    teacher_cam = _teacher_cam(8)
    valid = np.ones((8, 8), dtype=bool)
    rng = np.random.default_rng(13)
    feats0 = rng.uniform(-1, 1, (enc.tokens_per_frame, cfg.embed_dim))

    def loss_fn(feats):
        heads = enc.heads_forward(feats)
        losses = enc.distill_losses(heads, teacher_depth, teacher_cam, valid)
        return ad.add(losses.depth, losses.camera)

    assert_grads_close(loss_fn, [feats0], rtol=2e-4)
