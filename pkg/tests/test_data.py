import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from fedeu import data as D
from fedeu.errors import ConfigError, FormatError


def spec_with(*clients, **kw):
    return D.SyntheticTaskSpec(clients=tuple(clients), **kw)


def test_generation_deterministic():
    spec = D.default_task_spec(seed=5)
    a, b = D.generate_task(spec), D.generate_task(spec)
    assert all(x.equal(y) for x, y in zip(a, b))
    c = D.generate_task(spec, seed=6)
    assert not a[0].equal(c[0])


def test_sample_invariants():
    spec = D.default_task_spec(seed=1)
    for ds in D.generate_task(spec):
        assert ds.train_images.shape == (64, 1, 32, 32) and ds.test_images.shape == (32, 1, 32, 32)
        assert ds.train_images.dtype == np.float32 and ds.train_masks.dtype == np.uint8
        assert np.all((ds.train_images >= 0) & (ds.train_images <= 1))
        assert ds.train_masks.max() < spec.num_classes
        assert len(ds.train) == 64 and ds.train[0].image.shape == (1, 32, 32)


def test_density_zero_gives_background():
    spec = spec_with(D.ClientSpec("blobs", (0.0,), 0.05, 0.0, 1.0),
                     D.ClientSpec("rings", (0.1,), 0.05, 0.0, 1.0), n_train=6, n_test=2)
    for ds in D.generate_task(spec):
        assert not ds.train_masks.any() and not ds.test_masks.any()


def test_noise_free_disk_matches_analytic_raster():
    client = D.ClientSpec("blobs", (0.0,), 0.0, 1.0, 1.0)
    spec = spec_with(client, D.ClientSpec("rings"), image_size=16)
    disk = D.Shape("ellipse", 7.5, 7.5, 4.0, 4.0)
    sample = D.render_sample([disk], client, spec, np.random.default_rng(0))
    yy, xx = np.mgrid[0:16, 0:16]
    expected = ((xx - 7.5) ** 2 + (yy - 7.5) ** 2 <= 16.0).astype(np.uint8)
    np.testing.assert_array_equal(sample.mask, expected)
    np.testing.assert_allclose(sample.image[0], D.BACKGROUND_LEVEL + D.CONTRAST * expected, atol=1e-7)


def test_shift_changes_mean_within_sampling_error():
    sigma, n, size = 0.05, 64, 32
    spec = spec_with(D.ClientSpec("blobs", (0.0,), sigma, 0.0, 1.0),
                     D.ClientSpec("blobs", (0.2,), sigma, 0.0, 1.0), n_train=n, n_test=0, image_size=size)
    a, b = D.generate_task(spec)
    diff = float(b.train_images.mean() - a.train_images.mean())
    # difference of two independent sample means: sd sigma * sqrt(2 / (n H W))
    assert abs(diff - 0.2) <= 3 * sigma * np.sqrt(2.0 / (n * size * size))


def test_clients_are_heterogeneous():
    means = [ds.train_images.mean() for ds in D.generate_task(D.default_task_spec(0))]
    floor = 0.04  # half the smallest configured shift gap
    assert min(abs(x - y) for i, x in enumerate(means) for y in means[i + 1:]) > floor


def test_noisy_task_spec():
    spec = D.noisy_client_task_spec(seed=0)
    assert spec.clients[2].noise == pytest.approx(4 * spec.clients[0].noise)
    assert spec.clients[0].noise == spec.clients[1].noise


@pytest.mark.parametrize("kw", [
    dict(clients=(D.ClientSpec(),)),
    dict(clients=(D.ClientSpec(), D.ClientSpec())),
    dict(clients=(D.ClientSpec(), D.ClientSpec("rings")), n_train=0),
])
def test_spec_validation(kw):
    with pytest.raises(ConfigError):
        D.SyntheticTaskSpec(**kw)


def test_client_spec_validation():
    with pytest.raises(ConfigError):
        D.ClientSpec("triangles")
    with pytest.raises(ConfigError):
        D.ClientSpec(noise=-1.0)


def test_rasterize_shapes():
    strip = D.rasterize(D.Shape("strip", 4, 4, 3, 0.5), 9)
    assert strip.sum() == 7 and strip[4].sum() == 7
    ring = D.rasterize(D.Shape("ring", 4, 4, 3, 2), 9)
    assert not ring[4, 4] and ring[4, 1]
    with pytest.raises(ConfigError):
        D.rasterize(D.Shape("hexagon", 0, 0, 1, 1), 4)


class TestMetrics:
    def test_iou_examples(self):
        assert D.iou([1, 1, 0, 0], [1, 0, 1, 0]) == pytest.approx(1 / 3)
        assert D.iou([1, 0, 1], [1, 0, 1]) == 1.0
        assert D.iou([1, 0, 0], [0, 1, 0]) == 0.0
        assert D.iou([0, 0], [0, 0]) == 1.0

    def test_oa_examples(self):
        assert D.overall_accuracy([1, 0, 1, 0], [1, 0, 1, 0]) == 1.0
        assert D.overall_accuracy([1, 1, 0, 0], [1, 0, 1, 0]) == 0.5
        assert D.overall_accuracy([1, 0, 0, 1], [0, 1, 1, 0]) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            D.iou([1, 0], [1, 0, 0])
        with pytest.raises(ValueError):
            D.overall_accuracy([1, 0], [1])

    @settings(max_examples=100)
    @given(arrays(np.uint8, (8, 8), elements=st.integers(0, 1)),
           arrays(np.uint8, (8, 8), elements=st.integers(0, 1)))
    def test_brute_force(self, pred, gt):
        inter = union = correct = 0
        for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
            inter += p == 1 and g == 1
            union += p == 1 or g == 1
            correct += p == g
        assert D.iou(pred, gt) == (inter / union if union else 1.0)
        assert D.overall_accuracy(pred, gt) == correct / 64


class TestContainer:
    def test_round_trip(self, tmp_path):
        clients = D.generate_task(D.default_task_spec(seed=2, n_train=5, n_test=3))
        path = tmp_path / "ds.bin"
        D.write_dataset(path, clients)
        back = D.read_dataset(path)
        assert len(back) == 3 and all(a.equal(b) for a, b in zip(clients, back))

    def test_header_layout(self, tmp_path):
        clients = D.generate_task(D.default_task_spec(seed=2, n_train=1, n_test=0, image_size=8))
        path = tmp_path / "ds.bin"
        D.write_dataset(path, clients)
        raw = path.read_bytes()
        assert raw[:8] == b"FEDEU-DS"
        assert struct.unpack_from("<HH", raw, 8) == (1, 3)
        assert struct.unpack_from("<II", raw, 12) == (1, 0)
        assert struct.unpack_from("<HHH", raw, 20) == (1, 8, 8)
        per_sample = 6 + 4 * 64 + 64
        assert len(raw) == 12 + 3 * (8 + per_sample)

    def test_truncated(self, tmp_path):
        clients = D.generate_task(D.default_task_spec(seed=2, n_train=2, n_test=1, image_size=8))
        path = tmp_path / "ds.bin"
        D.write_dataset(path, clients)
        raw = path.read_bytes()
        for cut in (5, 11, 17, 30, len(raw) - 1):
            path.write_bytes(raw[:cut])
            with pytest.raises(FormatError, match="offset"):
                D.read_dataset(path)

    def test_bad_magic_version_and_trailing(self, tmp_path):
        clients = D.generate_task(D.default_task_spec(seed=2, n_train=1, n_test=1, image_size=8))
        path = tmp_path / "ds.bin"
        D.write_dataset(path, clients)
        raw = path.read_bytes()
        path.write_bytes(b"XXXXXXXX" + raw[8:])
        with pytest.raises(FormatError, match="offset 0"):
            D.read_dataset(path)
        path.write_bytes(raw[:8] + struct.pack("<H", 7) + raw[10:])
        with pytest.raises(FormatError, match="offset 8"):
            D.read_dataset(path)
        path.write_bytes(raw + b"\0")
        with pytest.raises(FormatError):
            D.read_dataset(path)

    def test_empty_client_list(self, tmp_path):
        path = tmp_path / "ds.bin"
        path.write_bytes(b"FEDEU-DS" + struct.pack("<HH", 1, 0))
        with pytest.raises(FormatError):
            D.read_dataset(path)
        with pytest.raises(FormatError):
            D.write_dataset(path, [])
