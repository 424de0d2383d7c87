import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsnlab import data as D


@pytest.fixture(scope="module")
def glyphs():
    return D.generate(D.default_spec("glyph16", n_train=200, n_eval=50, seed=3))


@pytest.fixture(scope="module")
def poses():
    return D.generate(D.default_spec("pose_glyph", n_train=100, n_eval=20, seed=1))


def _linear_fit(x, y, c, steps=2000):
    # plain softmax regression by full-batch gradient descent
    xb = np.c_[x, np.ones(len(x))]
    w, onehot = np.zeros((xb.shape[1], c)), np.eye(c)[y]
    for _ in range(steps):
        z = xb @ w
        p = np.exp(z - z.max(1, keepdims=True))
        p /= p.sum(1, keepdims=True)
        w -= 0.5 * xb.T @ (p - onehot) / len(x)
    return w


def _accuracy(w, ds):
    return float(np.mean(np.argmax(np.c_[ds.images, np.ones(len(ds))] @ w, 1) == ds.labels))


def test_same_seed_is_bitwise_identical(glyphs):
    again = D.generate(D.default_spec("glyph16", n_train=200, n_eval=50, seed=3))
    for a, b in ((glyphs.source_train, again.source_train), (glyphs.target_eval, again.target_eval)):
        assert a.images.tobytes() == b.images.tobytes()
        assert a.labels.tobytes() == b.labels.tobytes()


def test_different_seeds_differ(glyphs):
    other = D.generate(D.default_spec("glyph16", n_train=200, n_eval=50, seed=4))
    assert glyphs.target_train.images.tobytes() != other.target_train.images.tobytes()


def test_target_pixels_inside_mask_are_inverted_background(glyphs):
    imgs, _, _, masks, bgs = glyphs.raw[1]["train"]
    m = masks[..., None].repeat(3, axis=3)
    assert np.array_equal(imgs[m], 1.0 - bgs[m])
    assert np.array_equal(imgs[~m], bgs[~m])


def test_source_is_white_glyph_on_black(glyphs):
    imgs, _, _, masks, _ = glyphs.raw[0]["train"]
    assert np.array_equal(imgs[..., 0], masks.astype(float))
    assert np.array_equal(imgs[..., 0], imgs[..., 2])


def test_class_marginals_uniform(glyphs):
    assert np.bincount(glyphs.source_train.labels).tolist() == [20] * 10
    assert np.bincount(glyphs.target_train.labels).tolist() == [20] * 10


@pytest.mark.parametrize("scenario", ["glyph16", "pose_glyph"])
def test_images_in_range_and_centred(scenario):
    pair = D.generate(D.default_spec(scenario, n_train=100, n_eval=20, seed=0))
    for ds in (pair.source_train, pair.target_train, pair.source_eval, pair.target_eval):
        assert ds.images.min() >= -1.0 and ds.images.max() <= 1.0
    for ds in (pair.source_train, pair.target_train):
        assert abs(ds.images.mean()) < 1e-12
    assert -0.5 <= pair.target_eval.images.mean() <= 0.5


def test_pose_quaternions():
    assert D.pose_quaternion(0.0).tolist() == [1.0, 0.0, 0.0, 0.0]
    np.testing.assert_allclose(D.pose_quaternion(90.0), [np.cos(np.pi / 4), 0, 0, np.sin(np.pi / 4)], atol=1e-15)
    # 270 degrees is stored with w >= 0
    assert D.pose_quaternion(270.0)[0] >= 0


def test_pose_scenario_labels(poses):
    assert poses.source_train.poses.shape == (100, 4)
    np.testing.assert_allclose(np.linalg.norm(poses.target_eval.poses, axis=1), 1.0, atol=1e-12)
    assert set(poses.source_train.labels) == set(range(5))


def test_blobs_zero_shift_same_distribution():
    spec = D.default_spec("blobs2d", target_rotation=0.0, target_shift=(0.0, 0.0), target_noise=0.0,
                          n_train=3000)
    pair = D.generate(spec)
    for c in range(3):
        a = pair.source_train.images[pair.source_train.labels == c].mean(0)
        b = pair.target_train.images[pair.target_train.labels == c].mean(0)
        assert np.abs(a - b).max() < 0.05


@pytest.mark.parametrize("seed", range(3))
def test_blobs_linear_separation_regression(seed):
    pair = D.generate(D.default_spec("blobs2d", seed=seed))
    w = _linear_fit(pair.source_train.images, pair.source_train.labels, 3)
    # frozen from measurement: source 1.00, target 0.67-0.73 on seeds 0-4
    assert _accuracy(w, pair.source_eval) > 0.95
    assert _accuracy(w, pair.target_eval) < 0.80


def _small_set(n, domain, seed=0):
    rng = np.random.default_rng(seed)
    return D.DomainSet(rng.normal(size=(n, 2)), np.arange(n) % 3, domain, None, 3)


def test_one_epoch_visits_every_sample():
    src, tgt = _small_set(12, 0), _small_set(8, 1)
    src.images[:, 0] = np.arange(12)
    it = D.batch_iterator(src, tgt, 4, seed=0)
    seen = np.concatenate([next(it).source_x[:, 0] for _ in range(3)])
    assert sorted(seen.tolist()) == list(range(12))


def test_iterators_are_deterministic():
    src, tgt = _small_set(12, 0), _small_set(8, 1)
    a, b = D.batch_iterator(src, tgt, 4, 5), D.batch_iterator(src, tgt, 4, 5)
    for _ in range(7):
        x, y = next(a), next(b)
        assert x.source_x.tobytes() == y.source_x.tobytes()
        assert x.target_x.tobytes() == y.target_x.tobytes()


def test_target_batches_carry_no_labels():
    batch = next(D.batch_iterator(_small_set(6, 0), _small_set(6, 1), 3, 0))
    assert not hasattr(batch, "target_y")
    assert batch.domain_labels.ravel().tolist() == [0, 0, 0, 1, 1, 1]


def test_oversized_batch_rejected():
    with pytest.raises(ValueError):
        D.batch_iterator(_small_set(6, 0), _small_set(4, 1), 5, 0)


def test_unknown_scenario():
    with pytest.raises(ValueError):
        D.default_spec("svhn")


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6))
def test_value_noise_in_unit_range(seed, cells):
    tex = D.value_noise(D.philox(seed, 0), 16, 3, cells)
    assert tex.shape == (16, 16, 3)
    assert tex.min() >= 0.0 and tex.max() <= 1.0


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=4, max_size=4))
def test_to_bytes_clamps(vals):
    out = D.to_bytes(np.array(vals))
    assert out.dtype == np.uint8
    assert D.to_bytes(np.array([-1.0, 1.0, -7.0, 7.0])).tolist() == [0, 255, 0, 255]


def test_pnm_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    rgb = rng.integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
    gray = rng.integers(0, 256, size=(4, 3), dtype=np.uint8)
    D.write_pnm(tmp_path / "a.ppm", rgb)
    D.write_pnm(tmp_path / "b.pgm", gray)
    assert np.array_equal(D.read_pnm(tmp_path / "a.ppm"), rgb)
    assert np.array_equal(D.read_pnm(tmp_path / "b.pgm"), gray)
    assert (tmp_path / "a.ppm").read_bytes().startswith(b"P6\n7 5\n255\n")


def test_dump_dataset(tmp_path, poses):
    D.dump_dataset(poses, tmp_path, limit=4)
    for dom in ("source", "target"):
        lines = (tmp_path / dom / "labels.txt").read_text().splitlines()
        assert len(lines) == 4
        fname, label, *quat = lines[0].split("\t")
        assert len(quat) == 4
        img = D.read_pnm(tmp_path / dom / fname)
        assert img.shape == (16, 16, 3)
