import struct

import numpy as np
import pytest

from omnifer.data import (CorruptHeader, HeaderMismatch, LabeledDataset, SyntheticSpec, TruncatedPayload,
                          UnlabeledPool, concat, load_dataset, make_synthetic, save_dataset, split)


def quantized(rng, shape):
    return rng.integers(0, 256, size=shape).astype(np.float32) / 255


@pytest.fixture
def small(tmp_path):
    rng = np.random.default_rng(0)
    ds = LabeledDataset(quantized(rng, (12, 5, 6, 3)), rng.integers(0, 4, 12), 4, "small")
    path = tmp_path / "small.odim"
    save_dataset(ds, path)
    return ds, path


def test_round_trip_bit_exact(small):
    ds, path = small
    back = load_dataset(path)
    assert np.array_equal(back.images, ds.images)
    assert np.array_equal(back.labels, ds.labels)
    assert back.num_classes == 4


def test_round_trip_pool(tmp_path):
    pool = UnlabeledPool(quantized(np.random.default_rng(1), (7, 4, 4, 1)))
    save_dataset(pool, tmp_path / "p.odim")
    back = load_dataset(tmp_path / "p.odim")
    assert isinstance(back, UnlabeledPool)
    assert np.array_equal(back.images, pool.images)


def test_resave_is_byte_identical(small, tmp_path):
    _, path = small
    save_dataset(load_dataset(path), tmp_path / "again.odim")
    assert (tmp_path / "again.odim").read_bytes() == path.read_bytes()


def test_pixels_in_unit_range(small):
    back = load_dataset(small[1])
    assert back.images.min() >= 0 and back.images.max() <= 1


def test_truncated_file(small, tmp_path):
    raw = small[1].read_bytes()
    bad = tmp_path / "bad.odim"
    bad.write_bytes(raw[:-5])
    with pytest.raises(TruncatedPayload):
        load_dataset(bad)


def test_header_count_mismatch(small, tmp_path):
    raw = bytearray(small[1].read_bytes())
    # the sample count sits after magic(4) version(2) flags(2) classes(2)
    n = struct.unpack_from("<I", raw, 10)[0]
    struct.pack_into("<I", raw, 10, n - 1)
    bad = tmp_path / "bad.odim"
    bad.write_bytes(bytes(raw))
    with pytest.raises(HeaderMismatch):
        load_dataset(bad)


def test_bad_magic(small, tmp_path):
    raw = b"XXXX" + small[1].read_bytes()[4:]
    (tmp_path / "bad.odim").write_bytes(raw)
    with pytest.raises(CorruptHeader):
        load_dataset(tmp_path / "bad.odim")


def test_label_out_of_range_rejected():
    with pytest.raises(ValueError):
        LabeledDataset(np.zeros((2, 2, 2, 1)), [0, 3], 3)


def test_synthetic_deterministic():
    spec = SyntheticSpec(num_classes=3, per_class=10, pool_size=20, seed=4, brightness=0.1)
    a, b = make_synthetic(spec), make_synthetic(spec)
    assert np.array_equal(a.anchor.images, b.anchor.images)
    assert np.array_equal(a.pool.images, b.pool.images)
    c = make_synthetic(SyntheticSpec(num_classes=3, per_class=10, seed=5))
    assert not np.array_equal(a.anchor.images, c.anchor.images)


def test_zero_shift_pool_matches_anchor_distribution():
    spec = SyntheticSpec(num_classes=3, per_class=300, pool_size=900, noise=0.2, seed=2)
    draw = make_synthetic(spec)
    a = draw.anchor.images.reshape(len(draw.anchor), -1).mean(axis=1)
    p = draw.pool.images.reshape(len(draw.pool), -1).mean(axis=1)
    se = np.sqrt(a.var(ddof=1) / len(a) + p.var(ddof=1) / len(p))
    assert abs(a.mean() - p.mean()) < 3 * se


@pytest.mark.parametrize("kind", ["gaussian-blobs", "bars-and-stripes", "shifted-domain"])
def test_nearest_centroid_learnable(kind):
    draw = make_synthetic(SyntheticSpec(kind=kind, num_classes=3, per_class=200, test_per_class=100,
                                        seed=0, rotation=10 if kind == "shifted-domain" else 0))
    x = draw.anchor.images.reshape(len(draw.anchor), -1)
    centers = np.stack([x[draw.anchor.labels == k].mean(0) for k in range(3)])
    xt = draw.test.images.reshape(len(draw.test), -1)
    pred = np.argmin(((xt[:, None] - centers[None]) ** 2).sum(-1), axis=1)
    assert (pred == draw.test.labels).mean() >= 0.9


def test_templates_are_mirror_symmetric():
    draw = make_synthetic(SyntheticSpec(num_classes=4, per_class=200, noise=0.0, seed=3))
    x = draw.anchor.images
    assert np.abs(x - x[:, :, ::-1]).max() <= 1 / 255 + 1e-6


def test_spec_from_text():
    spec = SyntheticSpec.from_text("kind = bars-and-stripes\nnum_classes=4  # comment\nnoise=0.2\n")
    assert spec.kind == "bars-and-stripes" and spec.num_classes == 4 and spec.noise == 0.2
    with pytest.raises(ValueError):
        SyntheticSpec.from_text("colour = red")


def _seven_by_six():
    rng = np.random.default_rng(0)
    return LabeledDataset(rng.random((42, 4, 4, 1)), np.repeat(np.arange(7), 6), 7)


def test_split_42_at_5_to_1():
    train, test = split(_seven_by_six(), (5, 1), seed=0)
    assert (len(train), len(test)) == (35, 7)
    assert sorted(test.labels.tolist()) == list(range(7))


def test_split_all_train():
    train, test = split(_seven_by_six(), (1, 0))
    assert len(train) == 42 and len(test) == 0


def test_split_partition_and_determinism():
    ds = _seven_by_six()
    train, test = split(ds, (5, 1), seed=3)
    rows = lambda d: sorted(map(tuple, np.c_[d.images.reshape(len(d), -1), d.labels]))
    assert rows(concat(train, test)) == rows(ds)
    again, _ = split(ds, (5, 1), seed=3)
    assert np.array_equal(again.images, train.images)
