import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from cephmark.data import (CSV_HEADER, LANDMARKS, AnnotationError, FoldError, FoldPlan,
                           ImageDecodeError, LandmarkAnnotation, MissingLandmarkError,
                           UnsupportedFormatError, encode_targets, gaussian_heatmap,
                           jitter_annotations, landmark_template, load_image, make_folds,
                           read_annotations, resize_bilinear, save_pgm, scale_landmark,
                           synth_generate, write_annotations)
from cephmark.evaluation import decode_stack

from oracles import resize_loops, template_match


def full_annotation(rng, hw=(2400, 2000), image_id="im", annotator="d1"):
    h, w = hw
    pts = {n: (float(rng.uniform(0, w - 1)), float(rng.uniform(0, h - 1))) for n in LANDMARKS}
    return LandmarkAnnotation(image_id, annotator, pts, hw)


# --- annotations ------------------------------------------------------------------

def test_landmark_list_is_the_27_table_rows():
    assert len(LANDMARKS) == 27 and len(set(LANDMARKS)) == 27
    assert LANDMARKS[0] == "A" and LANDMARKS[-1] == "n"


def test_validate_missing_and_out_of_bounds(rng):
    ann = full_annotation(rng)
    ann.validate()
    del ann.points["Go"]
    with pytest.raises(MissingLandmarkError, match="Go"):
        ann.validate()
    ann = full_annotation(rng)
    ann.points["S"] = (2000.0, 5.0)
    with pytest.raises(AnnotationError, match="outside"):
        ann.validate()


def test_annotation_csv_round_trip(tmp_path, rng):
    anns = [full_annotation(rng, image_id=f"im{i}", annotator=a) for i in range(3) for a in ("d1", "d2")]
    path = tmp_path / "ann.csv"
    write_annotations(path, anns)
    assert path.read_text().splitlines()[0] == ",".join(CSV_HEADER)
    back = read_annotations(path)
    assert back == anns


def test_annotation_csv_errors(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("image,annotator\n")
    with pytest.raises(AnnotationError, match="header"):
        read_annotations(bad)
    bad.write_text(",".join(CSV_HEADER) + "\nim,d1,A,1,2,10,10\nim,d1,A,1,2,10,10\n")
    with pytest.raises(AnnotationError, match="duplicate"):
        read_annotations(bad)
    bad.write_text(",".join(CSV_HEADER) + "\nim,d1,A,x,2,10,10\n")
    with pytest.raises(AnnotationError):
        read_annotations(bad)


def test_header_only_csv_is_empty(tmp_path):
    p = tmp_path / "a.csv"
    write_annotations(p, [])
    assert read_annotations(p) == []


# --- images ---------------------------------------------------------------------------

@pytest.mark.parametrize("bits", [8, 16])
def test_pgm_round_trip(tmp_path, rng, bits):
    img = rng.random((7, 5))
    save_pgm(tmp_path / "x.pgm", img, bits=bits)
    back = load_image(tmp_path / "x.pgm")
    assert back.shape == (1, 7, 5)
    np.testing.assert_allclose(back[0], img, atol=0.5 / (255 if bits == 8 else 65535) + 1e-12)


def test_pgm_with_comment_header(tmp_path):
    raster = bytes([0, 255, 128, 64])
    (tmp_path / "c.pgm").write_bytes(b"P5\n# made by hand\n2 2\n255\n" + raster)
    np.testing.assert_allclose(load_image(tmp_path / "c.pgm")[0], np.array([[0, 255], [128, 64]]) / 255)


def test_truncated_pgm_reports_offset(tmp_path):
    (tmp_path / "t.pgm").write_bytes(b"P5\n4 4\n255\n" + bytes(5))
    with pytest.raises(ImageDecodeError, match="byte offset"):
        load_image(tmp_path / "t.pgm")


@pytest.mark.parametrize("dtype,scale", [(np.uint8, 255), (np.uint16, 65535)])
def test_png_grayscale(tmp_path, dtype, scale):
    arr = (np.arange(12).reshape(3, 4) * (scale // 11)).astype(dtype)
    Image.fromarray(arr).save(tmp_path / "g.png")
    np.testing.assert_allclose(load_image(tmp_path / "g.png")[0], arr / scale)


def test_rgb_png_and_unknown_format_rejected(tmp_path):
    Image.new("RGB", (4, 4)).save(tmp_path / "c.png")
    with pytest.raises(UnsupportedFormatError):
        load_image(tmp_path / "c.png")
    (tmp_path / "x.bmp").write_bytes(b"BM" + bytes(20))
    with pytest.raises(UnsupportedFormatError):
        load_image(tmp_path / "x.bmp")


def test_resize_matches_loop_oracle(rng):
    img = rng.random((1, 9, 7))
    for hw in [(4, 5), (18, 14), (9, 7), (3, 11)]:
        np.testing.assert_allclose(resize_bilinear(img, hw)[0], resize_loops(img[0], *hw), atol=1e-12)


def test_resize_constant_image_stays_constant(rng):
    for _ in range(100):
        h, w, th, tw = rng.integers(1, 40, size=4)
        c = rng.uniform(-3, 3)
        out = resize_bilinear(np.full((1, h, w), c), (th, tw))
        assert out.shape == (1, th, tw)
        np.testing.assert_allclose(out, c, atol=1e-12)


def test_resize_published_geometry():
    out = resize_bilinear(np.zeros((1, 2400, 2000)), (512, 432))
    assert out.shape == (1, 512, 432)


# --- coordinate scaling --------------------------------------------------------------

def test_scale_landmark_examples():
    assert scale_landmark((0, 0), (2400, 2000), (512, 432)) == (0, 0)
    # x * 432 / 2000 = 216.0, y * 512 / 2400 = 256.0
    assert scale_landmark((1000, 1200), (2400, 2000), (512, 432)) == (216, 256)
    # 2.5 rounds away from zero
    assert scale_landmark((5, 5), (20, 20), (10, 10)) == (3, 3)
    with pytest.raises(ValueError):
        scale_landmark((2000, 0), (2400, 2000), (512, 432))


def test_scale_round_trip_bound(rng):
    src, dst = (2400, 2000), (512, 432)
    bound = math.ceil(max(src[0] / dst[0], src[1] / dst[1]))
    for _ in range(1000):
        x, y = rng.uniform(0, 2000), rng.uniform(0, 2400)
        xs, ys = scale_landmark((x, y), src, dst)
        xb, yb = scale_landmark((xs, ys), dst, src)
        assert abs(xb - x) <= bound and abs(yb - y) <= bound


# --- heatmaps ----------------------------------------------------------------------------

def test_gaussian_peak_and_value_at_sigma():
    hm = gaussian_heatmap((20, 30), (64, 64), 3.0)
    assert hm[30, 20] == 1.0
    assert np.unravel_index(hm.argmax(), hm.shape) == (30, 20)
    assert hm[30, 23] == pytest.approx(math.exp(-0.5), rel=1e-15)


def test_gaussian_truncation_and_symmetry():
    sigma = 2.0
    hm = gaussian_heatmap((20, 20), (48, 48), sigma)
    r = int(3 * sigma)
    assert np.all(hm >= 0)
    window = np.zeros_like(hm, dtype=bool)
    window[20 - r:20 + r + 1, 20 - r:20 + r + 1] = True
    assert np.all(hm[~window] == 0.0) and np.all(hm[window] > 0)
    patch = hm[20 - r:20 + r + 1, 20 - r:20 + r + 1]
    np.testing.assert_array_equal(patch, patch[::-1])
    np.testing.assert_array_equal(patch, patch[:, ::-1])


def test_gaussian_clipped_at_border():
    hm = gaussian_heatmap((0, 63), (64, 64), 5.0)
    assert hm[63, 0] == 1.0 and hm.shape == (64, 64)


def test_gaussian_mass_matches_closed_form():
    sigma = 2.5
    r = int(3 * sigma)
    one_d = sum(math.exp(-(k * k) / (2 * sigma**2)) for k in range(-r, r + 1))
    hm = gaussian_heatmap((30, 30), (64, 64), sigma)
    assert hm.sum() == pytest.approx(one_d**2, abs=1e-9)


def test_gaussian_errors():
    with pytest.raises(ValueError):
        gaussian_heatmap((64, 0), (64, 64), 2.0)
    with pytest.raises(ValueError):
        gaussian_heatmap((1, 1), (64, 64), 0.0)


def test_encode_targets_channels_and_locality(rng):
    ann = full_annotation(rng)
    stack = encode_targets(ann, (64, 64), 2.0)
    assert stack.data.shape == (27, 64, 64)
    assert np.all(stack.data.max(axis=(1, 2)) == 1.0)
    moved = LandmarkAnnotation(ann.image_id, ann.annotator_id, dict(ann.points), ann.original_hw)
    x, y = moved.points["Me"]
    moved.points["Me"] = ((x + 500) % 2000, y)
    other = encode_targets(moved, (64, 64), 2.0)
    changed = [i for i in range(27) if not np.array_equal(stack.data[i], other.data[i])]
    assert changed == [LANDMARKS.index("Me")]


def test_encode_missing_landmark(rng):
    ann = full_annotation(rng)
    del ann.points["Pt"]
    with pytest.raises(MissingLandmarkError, match="Pt"):
        encode_targets(ann, (64, 64), 2.0)


def test_encode_decode_identity_1000(rng):
    for i in range(1000):
        ann = full_annotation(rng, image_id=f"i{i}")
        stack = encode_targets(ann, (64, 64), float(rng.uniform(0.5, 5)))
        assert decode_stack(stack.data) == stack.peak_coords


# --- folds ----------------------------------------------------------------------------------

def test_make_folds_published_layout():
    plan = make_folds(100, 5)
    for i, (train, test) in enumerate(plan.folds):
        np.testing.assert_array_equal(test, np.arange(20 * i, 20 * (i + 1)))
        np.testing.assert_array_equal(train, np.setdiff1d(np.arange(100), test))
        assert len(train) == 80


def test_make_folds_ten_by_five():
    assert [f[1].tolist() for f in make_folds(10, 5).folds] == [[0, 1], [2, 3], [4, 5], [6, 7], [8, 9]]


@settings(max_examples=100, deadline=None)
@given(k=st.integers(2, 12), m=st.integers(1, 15))
def test_fold_plan_contract(k, m):
    n = k * m
    plan = make_folds(n, k)
    tests = [t for _, t in plan.folds]
    np.testing.assert_array_equal(np.concatenate(tests), np.arange(n))
    for train, test in plan.folds:
        assert np.all(np.diff(test) == 1)
        assert not set(train) & set(test)
        np.testing.assert_array_equal(np.sort(np.concatenate([train, test])), np.arange(n))
        assert np.all(np.diff(train) > 0)


def test_fold_errors_and_json_round_trip():
    with pytest.raises(FoldError):
        make_folds(11, 5)
    with pytest.raises(FoldError):
        make_folds(3, 5)
    plan = make_folds(10, 5)
    back = FoldPlan.from_json(plan.to_json())
    assert all(np.array_equal(a[1], b[1]) for a, b in zip(plan.folds, back.folds))


# --- synthetic data -----------------------------------------------------------------------

def test_synth_is_deterministic():
    a_imgs, a_anns = synth_generate(7, 4, (64, 64), 5)
    b_imgs, b_anns = synth_generate(7, 4, (64, 64), 5)
    assert a_anns == b_anns
    for a, b in zip(a_imgs, b_imgs):
        assert a.tobytes() == b.tobytes()
    c_imgs, _ = synth_generate(8, 4, (64, 64), 5)
    assert c_imgs[0].tobytes() != a_imgs[0].tobytes()


def test_synth_positions_in_bounds_10k():
    _, anns = synth_generate(3, 2000, (64, 48), 5)
    pts = np.array([p for a in anns for p in a.points.values()])
    assert len(pts) == 10_000
    assert pts[:, 0].min() >= 0 and pts[:, 0].max() < 48
    assert pts[:, 1].min() >= 0 and pts[:, 1].max() < 64


def test_synth_argument_checks():
    with pytest.raises(ValueError):
        synth_generate(0, 1, (16, 64), 5)
    with pytest.raises(ValueError):
        synth_generate(0, 1, (64, 64), 28)


def test_templates_are_distinct():
    temps = [landmark_template(i) for i in range(27)]
    for i in range(27):
        for j in range(i):
            assert not np.array_equal(temps[i], temps[j])


def test_template_matching_baseline_finds_landmarks():
    imgs, anns = synth_generate(0, 4, (64, 64), 5)
    names = LANDMARKS[:5]
    for img, ann in zip(imgs, anns):
        for k, name in enumerate(names):
            x, y = template_match(img[0], landmark_template(k))
            tx, ty = ann.points[name]
            assert math.hypot(x - tx, y - ty) <= 2


def test_jitter_annotations_bounded_and_seeded():
    _, anns = synth_generate(0, 5, (64, 64), 5)
    j1 = jitter_annotations(anns, "d2", seed=3, max_px=2)
    j2 = jitter_annotations(anns, "d2", seed=3, max_px=2)
    assert j1 == j2
    for a, b in zip(anns, j1):
        assert b.annotator_id == "d2"
        for name, (x, y) in a.points.items():
            bx, by = b.points[name]
            assert abs(bx - x) <= 2 and abs(by - y) <= 2
