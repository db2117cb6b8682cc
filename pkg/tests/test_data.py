import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from countr.data import (AnnotationError, DensityMap, ImageSample, generate_density_map,
                         load_annotations, load_density_map, rescale_sample, resize_to_height,
                         save_density_map, save_image, write_annotations)

from conftest import make_sample


def test_empty_dots_give_zero_grid():
    d = generate_density_map([], 30, 40)
    assert d.shape == (30, 40) and d.count == 0.0


def test_single_centre_dot_has_unit_mass():
    d = generate_density_map([[192, 192]], 384, 384, sigma=4)
    assert abs(d.count - 1.0) <= 1e-6


def test_fifty_six_random_dots():
    rng = np.random.default_rng(3)
    d = generate_density_map(rng.uniform(0, 384, (56, 2)), 384, 384)
    assert abs(d.count - 56) <= 1e-3
    assert (d.grid >= 0).all()


@pytest.mark.parametrize("sigma", [1.0, 4.0, 16.0])
def test_corner_dots_keep_mass(sigma):
    dots = [[0, 0], [np.nextafter(50, 0), 0], [0, np.nextafter(40, 0)], [49.99, 39.99]]
    assert abs(generate_density_map(dots, 40, 50, sigma).count - 4) <= 1e-9


def test_out_of_bounds_dot_rejected():
    with pytest.raises(ValueError, match="outside"):
        generate_density_map([[10, 5], [50, 5]], 20, 50)


def test_kernel_matches_brute_force():
    # direct 2-D evaluation of a truncated, renormalised Gaussian
    H, W, s = 25, 31, 2.0
    x, y = 7.3, 20.9
    yy, xx = np.mgrid[0:H, 0:W] + 0.5
    wy = np.exp(-0.5 * ((yy - y) / s) ** 2) * (np.abs(yy - y) <= 4 * s)
    wx = np.exp(-0.5 * ((xx - x) / s) ** 2) * (np.abs(xx - x) <= 4 * s)
    ref = wy * wx
    ref /= ref.sum()
    np.testing.assert_allclose(generate_density_map([[x, y]], H, W, s).grid, ref, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 63.99), st.floats(0, 47.99)), max_size=40),
       st.sampled_from([1.0, 4.0, 16.0]), st.randoms(use_true_random=False))
def test_density_sum_and_permutation(dots, sigma, rnd):
    d = generate_density_map(dots, 48, 64, sigma)
    assert abs(d.count - len(dots)) <= 1e-3
    shuffled = list(dots)
    rnd.shuffle(shuffled)
    np.testing.assert_allclose(generate_density_map(shuffled, 48, 64, sigma).grid, d.grid, atol=1e-9)


def test_dmap_roundtrip_and_layout(tmp_path):
    grid = np.arange(12, dtype=np.float32).reshape(3, 4)
    path = tmp_path / "d.dmap"
    save_density_map(DensityMap(grid), path)
    raw = path.read_bytes()
    assert raw[:4] == b"DMAP" and len(raw) == 16 + 48
    assert np.frombuffer(raw[4:16], "<u4").tolist() == [3, 4, 0]
    np.testing.assert_array_equal(load_density_map(path).grid, grid)


def test_dmap_bad_magic(tmp_path):
    p = tmp_path / "x.dmap"
    p.write_bytes(b"NOPE" + bytes(12))
    with pytest.raises(ValueError, match="magic"):
        load_density_map(p)


def test_rescale_identity_and_halving():
    s = make_sample(500, H=96, W=96, seed=1)
    same = rescale_sample(s, 96, 96)
    np.testing.assert_allclose(same.dots, s.dots, atol=1e-9)
    big = make_sample(50, H=768, W=768, seed=2)
    half = rescale_sample(big, 384, 384)
    np.testing.assert_allclose(half.dots, big.dots / 2, atol=1e-9)
    np.testing.assert_allclose(half.boxes, big.boxes / 2, atol=1e-9)
    assert rescale_sample(s, 40, 70).count == 500


@settings(max_examples=25, deadline=None)
@given(st.integers(16, 120), st.integers(16, 120), st.integers(0, 60))
def test_rescale_preserves_count_and_k(h, w, n):
    s = make_sample(n, H=50, W=60, seed=n)
    r = rescale_sample(s, h, w)
    assert r.count == n and r.num_exemplars == s.num_exemplars and r.pixels.shape == (h, w, 3)


def test_rescale_rejects_tiny():
    with pytest.raises(ValueError):
        rescale_sample(make_sample(), 8, 40)


def test_resize_to_height_keeps_aspect():
    r = resize_to_height(make_sample(H=100, W=250), 50)
    assert r.pixels.shape[:2] == (50, 125)


def test_sample_views(sample):
    assert sample.count == 10 and sample.num_exemplars == 3
    assert sample.exemplars[0].height == pytest.approx(10)
    assert len(sample.dot_annotations) == 10
    with pytest.raises(ValueError):
        sample.dots[0, 0] = 1.0  # immutable


def _write_dataset(tmp_path, entries, splits=None, images=()):
    (tmp_path / "images").mkdir()
    for name in images:
        save_image(np.zeros((20, 30, 3)), tmp_path / "images" / name)
    (tmp_path / "ann.json").write_text(json.dumps(entries))
    if splits is not None:
        (tmp_path / "splits.json").write_text(json.dumps(splits))
        return tmp_path / "splits.json"
    return None


def test_load_empty(tmp_path):
    _write_dataset(tmp_path, {})
    assert load_annotations(tmp_path / "ann.json", tmp_path / "images") == []


def test_load_truncates_and_clamps(tmp_path):
    boxes = [[1, 1, 5, 5]] * 4 + [[-3, -2, 50, 60]]
    entries = {"a.png": {"points": [[2, 3], [40, 1]], "boxes": boxes[::-1], "class": "c"}}
    split = _write_dataset(tmp_path, entries, {"train": ["a.png"], "val": [], "test": []}, ["a.png"])
    (s,) = load_annotations(tmp_path / "ann.json", tmp_path / "images", split)
    assert s.num_exemplars == 3
    assert s.boxes[0].tolist() == [0, 0, 20, 30]
    assert s.dots[1, 0] < 30 and s.class_label == "c"


def test_load_fsc_corner_boxes(tmp_path):
    entries = {"a.png": {"points": [[2, 3]], "class": "c",
                         "box_examples_coordinates": [[[1, 2], [1, 9], [8, 9], [8, 2]]]}}
    _write_dataset(tmp_path, entries, images=["a.png"])
    (s,) = load_annotations(tmp_path / "ann.json", tmp_path / "images")
    assert s.boxes.tolist() == [[2, 1, 9, 8]]


def test_missing_image_is_recorded(tmp_path):
    entries = {"a.png": {"points": [], "boxes": [], "class": "c"},
               "b.png": {"points": [], "boxes": [], "class": "c"}}
    _write_dataset(tmp_path, entries, images=["a.png"])
    out = load_annotations(tmp_path / "ann.json", tmp_path / "images")
    assert [s.image_id for s in out] == ["a.png"]
    assert [e.image_id for e in out.errors] == ["b.png"]


def test_malformed_json_is_fatal(tmp_path):
    (tmp_path / "ann.json").write_text("{not json")
    with pytest.raises(AnnotationError):
        load_annotations(tmp_path / "ann.json", tmp_path)


def test_bad_entry_names_key(tmp_path):
    _write_dataset(tmp_path, {"bad.png": {"points": "oops", "boxes": []}}, images=["bad.png"])
    with pytest.raises(AnnotationError, match="bad.png"):
        load_annotations(tmp_path / "ann.json", tmp_path / "images")


def test_write_then_load_roundtrip(tmp_path):
    samples = [make_sample(5, H=20, W=30, seed=i, image_id=f"{i}.png",
                           split=["train", "val"][i % 2]) for i in range(4)]
    (tmp_path / "images").mkdir()
    for s in samples:
        save_image(s.pixels, tmp_path / "images" / s.image_id)
    write_annotations(samples, tmp_path / "ann.json", tmp_path / "splits.json")
    val = load_annotations(tmp_path / "ann.json", tmp_path / "images", tmp_path / "splits.json", "val")
    assert sorted(s.image_id for s in val) == ["1.png", "3.png"]
    np.testing.assert_allclose(val[0].dots, samples[1].dots)


def test_lazy_loading(tmp_path):
    _write_dataset(tmp_path, {"a.png": {"points": [[1, 1]], "boxes": [], "class": "c"}},
                   images=["a.png"])
    (s,) = load_annotations(tmp_path / "ann.json", tmp_path / "images", lazy=True)
    assert s.image is None and s.pixels.shape == (20, 30, 3)


def test_toy_split_classes_disjoint(tmp_path):
    from countr.toy import make_toy_data
    samples = make_toy_data(40, (7, 12), seed=0, out_dir=tmp_path, size=(48, 48))
    by = {sp: {s.class_label for s in samples if s.split == sp} for sp in ("train", "val", "test")}
    assert not by["train"] & by["test"] and not by["train"] & by["val"]
