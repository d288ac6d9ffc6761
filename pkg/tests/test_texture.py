import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from ricpr.dataset import DatasetManifest, DatasetRecord, save_image_gray, load_manifest, write_manifest
from ricpr.shapes import AnnotatedShape, FaceBox
from ricpr.texture import (
    Gallery,
    LbpConfig,
    TextureError,
    analysis_image,
    build_gallery,
    histogram_matrix,
    label_table,
    lbp_label,
    pearson_distance,
    select_texture_init,
)

ALL_ONES = 2**8 - 1


def test_uniform_table_has_59_bins():
    table = label_table(8)
    assert len(np.unique(table)) == 59
    assert LbpConfig().n_labels == 59
    for code in range(256):
        assert table[code] == oracles.uniform_bin_of(code, 8)


def test_constant_patch_is_all_ones():
    img = np.full((5, 5), 77.0)
    assert lbp_label(img, (2, 2)) == oracles.uniform_bin_of(ALL_ONES, 8)


def test_center_above_all_neighbors_is_zero_pattern():
    img = np.zeros((3, 3))
    img[1, 1] = 10
    assert lbp_label(img, (1, 1)) == oracles.uniform_bin_of(0, 8) == 0


def test_alternating_pattern_is_miscellaneous():
    # neighbors k = 0..7 start at +x and go counter-clockwise; raise every odd one
    img = np.full((5, 5), 0.0)
    img[2, 2] = 50
    offsets = [(0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1)]
    for k, (dy, dx) in enumerate(offsets):
        if k % 2:
            img[2 + dy, 2 + dx] = 200.0
    assert oracles.circular_transitions(0b10101010, 8) == 8
    assert lbp_label(img, (2, 2)) == 58


def test_lbp_label_near_edge_is_rejected():
    with pytest.raises(TextureError):
        lbp_label(np.zeros((5, 5)), (0, 2))
    with pytest.raises(TextureError):
        lbp_label(np.zeros((5, 5)), (2, 4))


@pytest.mark.parametrize("p,r", [(8, 1.0), (8, 2.0), (4, 1.0), (8, 1.5)])
def test_lbp_matches_pixel_oracle_on_random_images(p, r):
    rng = np.random.default_rng(p * 10 + int(r * 10))
    img = rng.random((9, 9)) * 255
    cfg = LbpConfig(points=p, radius=r)
    m = int(np.ceil(r))
    rows = img.tolist()
    for y in range(m, 9 - m):
        for x in range(m, 9 - m):
            assert lbp_label(img, (x, y), cfg) == oracles.uniform_bin_of(oracles.lbp_code(rows, y, x, p, r), p)


def test_uniform_gray_crop_concentrates_in_all_ones_bin():
    img = np.full((200, 200), 120, dtype=np.uint8)
    h = histogram_matrix(img, FaceBox(30, 40, 100, 90))
    all_ones = label_table(8)[ALL_ONES]
    assert np.all(h[:, all_ones] == 256)
    assert h.sum() == 128 * 128


def test_rows_sum_to_block_pixel_count():
    rng = np.random.default_rng(3)
    img = rng.integers(0, 256, size=(150, 170)).astype(np.uint8)
    h = histogram_matrix(img, FaceBox(10.3, 5.7, 120.2, 99.9))
    assert h.shape == (64, 59)
    assert np.all(h.sum(axis=1) == 16 * 16)


def test_aligned_box_analysis_image_is_the_crop():
    rng = np.random.default_rng(4)
    cfg = LbpConfig()
    m = cfg.margin
    img = rng.random((128 + 2 * m, 128 + 2 * m))
    a = analysis_image(img, FaceBox(m, m, 128, 128), cfg)
    np.testing.assert_allclose(a, img, atol=1e-12)


def test_four_region_image_matches_brute_force_histograms():
    rng = np.random.default_rng(5)
    cfg = LbpConfig(blocks_per_side=2)
    m = cfg.margin
    size = 128 + 2 * m
    img = np.zeros((size, size))
    half = size // 2
    # four regions with different textures: noise, horizontal ramp, checker, stripes
    img[:half, :half] = rng.random((half, half)) * 255
    img[:half, half:] = np.linspace(0, 255, size - half)[None, :] + rng.random((half, size - half))
    yy, xx = np.mgrid[0 : size - half, 0:half]
    img[half:, :half] = ((yy + xx) % 2) * 100 + rng.random(yy.shape)
    img[half:, half:] = (np.arange(size - half) % 4 < 2)[None, :] * 80 + rng.random((size - half, size - half))
    box = FaceBox(m, m, 128, 128)
    got = histogram_matrix(img, box, cfg)
    want = oracles.block_histograms(analysis_image(img, box, cfg).tolist(), m, 128, 2)
    np.testing.assert_array_equal(got, np.array(want))


def test_box_outside_raster_is_rejected():
    img = np.zeros((50, 50))
    with pytest.raises(TextureError):
        histogram_matrix(img, FaceBox(60, 60, 20, 20))


def test_tiny_box_is_rejected():
    with pytest.raises(TextureError):
        histogram_matrix(np.zeros((50, 50)), FaceBox(10, 10, 4, 4))


def test_partially_outside_box_is_clamped():
    rng = np.random.default_rng(6)
    img = rng.random((80, 80)) * 255
    np.testing.assert_array_equal(histogram_matrix(img, FaceBox(-20, -10, 70, 60)), histogram_matrix(img, FaceBox(0, 0, 50, 50)))


@given(st.integers(0, 2**32 - 1))
def test_histogram_mass_is_content_independent(seed):
    rng = np.random.default_rng(seed)
    img = rng.integers(0, 256, size=(60, 70))
    w, h = rng.uniform(10, 50, size=2)
    h_mat = histogram_matrix(img, FaceBox(rng.uniform(0, 10), rng.uniform(0, 10), w, h))
    assert h_mat.sum() == 128 * 128
    assert np.all(h_mat.sum(axis=1) == 256)


# -- Pearson distance


def test_distance_to_self_is_zero():
    a = np.random.default_rng(0).integers(0, 50, size=(64, 59))
    assert pearson_distance(a, a) == pytest.approx(0.0, abs=1e-12)


def test_anti_correlated_is_two():
    a = np.random.default_rng(1).random((4, 6))
    b = -a + 2 * a.mean()
    assert pearson_distance(a, b) == pytest.approx(2.0, abs=1e-12)


def test_hand_computed_2x3():
    a = [[1, 2, 3], [4, 5, 6]]
    b = [[2, 1, 4], [3, 7, 5]]
    # means 3.5 and 11/3; sxy = 48/3, sxx = 17.5, syy = 210/9
    expected = 1 - 16.0 / np.sqrt(17.5 * 210 / 9)
    assert pearson_distance(np.array(a), np.array(b)) == pytest.approx(expected, abs=1e-12)
    assert pearson_distance(np.array(a), np.array(b)) == pytest.approx(1 - oracles.pearson(a, b), abs=1e-12)


def test_shape_mismatch_and_constant_matrix_are_errors():
    with pytest.raises(TextureError):
        pearson_distance(np.ones((2, 3)), np.ones((3, 2)))
    with pytest.raises(TextureError):
        pearson_distance(np.ones((2, 3)), np.arange(6).reshape(2, 3))


pairs = st.integers(0, 2**32 - 1).map(lambda s: np.random.default_rng(s).random((2, 5, 7)) * 100)


@given(pairs)
def test_pearson_symmetric(m):
    assert abs(pearson_distance(m[0], m[1]) - pearson_distance(m[1], m[0])) <= 1e-12


@given(pairs, st.floats(1e-3, 1e3), st.floats(-1e3, 1e3))
def test_pearson_positive_affine_invariance(m, alpha, beta):
    assert abs(pearson_distance(m[0], alpha * m[1] + beta) - pearson_distance(m[0], m[1])) <= 1e-9


@given(pairs)
def test_pearson_range_and_oracle(m):
    d = pearson_distance(m[0], m[1])
    assert 0.0 <= d <= 2.0
    assert d == pytest.approx(1 - oracles.pearson(m[0].tolist(), m[1].tolist()), abs=1e-12)


# -- gallery and selection


def _gallery_from(images, boxes, shapes):
    return Gallery(
        matrices=np.stack([histogram_matrix(im, b) for im, b in zip(images, boxes)]),
        points=np.stack([s.points for s in shapes]),
        occluded=np.stack([s.occluded for s in shapes]),
        boxes=np.array([b.to_list() for b in boxes]),
        record_ids=[str(i) for i in range(len(images))],
    )


def test_test_face_in_gallery_is_selected_first(faces):
    g = _gallery_from([f.image for f in faces[:10]], [f.box for f in faces[:10]], [f.shape for f in faces[:10]])
    c = select_texture_init(faces[6].image, faces[6].box, g, 3)
    assert c[0].source_index == 6 and c[0].distance == pytest.approx(0.0, abs=1e-12)
    assert c[0].shape == faces[6].shape
    assert c[0].transferred(faces[6].box) == faces[6].shape


def test_l_equals_gallery_size_returns_all_sorted(faces):
    g = _gallery_from([f.image for f in faces[:8]], [f.box for f in faces[:8]], [f.shape for f in faces[:8]])
    c = select_texture_init(faces[20].image, faces[20].box, g, 8)
    assert sorted(x.source_index for x in c) == list(range(8))
    d = [x.distance for x in c]
    assert d == sorted(d)


def test_planted_near_duplicate_ranks_first(faces):
    rng = np.random.default_rng(9)
    imgs = [f.image for f in faces[:10]]
    test = faces[30]
    dup = np.clip(test.image.astype(float) + rng.normal(scale=2.0, size=test.image.shape), 0, 255).astype(np.uint8)
    imgs[4] = dup
    boxes = [f.box for f in faces[:10]]
    boxes[4] = test.box
    shapes = [f.shape for f in faces[:10]]
    g = _gallery_from(imgs, boxes, shapes)
    c = select_texture_init(test.image, test.box, g, 10)
    # full pairwise table oracle
    q = histogram_matrix(test.image, test.box)
    table = [1 - oracles.pearson(q.tolist(), g.matrices[i].tolist()) for i in range(10)]
    assert c[0].source_index == 4 == int(np.argmin(table))
    np.testing.assert_allclose([x.distance for x in c], sorted(table), atol=1e-12)


def test_ties_break_on_lower_index(faces):
    f = faces[0]
    g = _gallery_from([f.image] * 4, [f.box] * 4, [f.shape] * 4)
    assert [c.source_index for c in select_texture_init(f.image, f.box, g, 4)] == [0, 1, 2, 3]


def test_selection_errors(faces):
    g = _gallery_from([faces[0].image], [faces[0].box], [faces[0].shape])
    with pytest.raises(TextureError):
        select_texture_init(faces[1].image, faces[1].box, g, 2)
    empty = Gallery(np.zeros((0, 64, 59), dtype=np.int64), np.zeros((0, 29, 2)), np.zeros((0, 29), bool), np.zeros((0, 4)), [])
    with pytest.raises(TextureError):
        select_texture_init(faces[1].image, faces[1].box, empty, 1)


def _manifest(tmp_path, faces, broken=()):
    recs = []
    for i, f in enumerate(faces):
        path = tmp_path / f"{i}.png"
        save_image_gray(path, f.image)
        if i in broken:
            path.write_bytes(b"garbage")
        recs.append(DatasetRecord(f"r{i}", path, f.box, f.shape, None, "train"))
    write_manifest(recs, tmp_path / "m.jsonl")
    return load_manifest(tmp_path / "m.jsonl")


def test_build_gallery_order_and_recompute(tmp_path, faces):
    m = _manifest(tmp_path, faces[:3])
    g, report = build_gallery(m)
    assert g.record_ids == ["r0", "r1", "r2"] and not report.errors
    for i in range(3):
        np.testing.assert_array_equal(g.matrices[i], histogram_matrix(faces[i].image, faces[i].box))
        assert g.shape(i) == faces[i].shape


def test_gallery_file_is_deterministic_and_round_trips(tmp_path, faces):
    m = _manifest(tmp_path, faces[:3])
    build_gallery(m)[0].save(tmp_path / "a.bin")
    build_gallery(m)[0].save(tmp_path / "b.bin")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    g = Gallery.load(tmp_path / "a.bin")
    np.testing.assert_array_equal(g.matrices, build_gallery(m)[0].matrices)
    assert g.lbp_config() == LbpConfig()


def test_unreadable_record_is_reported(tmp_path, faces):
    m = _manifest(tmp_path, faces[:3], broken={1})
    g, report = build_gallery(m)
    assert g.record_ids == ["r0", "r2"]
    assert [rid for rid, _ in report.errors] == ["r1"]


def test_record_without_ground_truth_is_reported(tmp_path, faces):
    save_image_gray(tmp_path / "x.png", faces[0].image)
    m = DatasetManifest([DatasetRecord("x", tmp_path / "x.png", faces[0].box)])
    g, report = build_gallery(m)
    assert len(g) == 0 and report.errors[0][0] == "x"
