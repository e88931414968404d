import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from twnv.dataprep import (
    DegenerateDepths,
    DepthFormatError,
    DepthMap,
    InsufficientValidPixels,
    InvalidScale,
    PairRecord,
    assign_bucket,
    bucket_grid,
    counts_matcher,
    filter_pairs,
    metric_scale,
    parse_pose,
    prep_pairs,
    read_depth,
    read_depth_png,
    read_pfm,
    read_pose_file,
    relative_pose,
    rescale_motion,
    write_depth_png,
    write_pfm,
)
from twnv.geometry import CameraMotion, GimbalLock, PoseTransform, motion_allclose, rotation_matrix, to_transform


def golden_section(f, lo, hi, tol=1e-12):
    inv = (math.sqrt(5) - 1) / 2
    a, b = lo, hi
    c, d = b - inv * (b - a), a + inv * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol * max(1.0, abs(a)):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - inv * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv * (b - a)
            fd = f(d)
    return (a + b) / 2


def brute_force_scale(rec, met):
    obj = lambda s: float(np.sum((s * rec - met) ** 2))
    # the objective is convex in s, so the grid argmin's neighbours bracket the minimum
    grid = np.logspace(-3, 3, 1201)
    i = int(np.argmin(np.sum((grid[:, None] * rec - met) ** 2, axis=1)))
    return golden_section(obj, grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)])


# --- filter ---

def pair(pid, n=None):
    return PairRecord(pid, f"{pid}_s.png", f"{pid}_t.png", match_count=n)


def test_filter_threshold_boundary():
    kept, discarded = filter_pairs([pair("a", 9), pair("b", 10)])
    assert [p.pair_id for p in kept] == ["b"]
    assert [p.pair_id for p in discarded] == ["a"]
    assert "9 < 10" in discarded[0].reason


def test_filter_empty():
    assert filter_pairs([]) == ([], [])


def test_filter_matcher_failure_is_discarded():
    kept, discarded = filter_pairs([pair("a"), pair("b")], counts_matcher({"b": 12}))
    assert [p.pair_id for p in kept] == ["b"]
    assert discarded[0].reason.startswith("unmatched:")


@given(st.lists(st.one_of(st.none(), st.integers(0, 30)), max_size=30), st.integers(0, 20))
def test_filter_partitions(counts, threshold):
    pairs = [pair(f"p{i}", n) for i, n in enumerate(counts)]
    kept, discarded = filter_pairs(pairs, min_matches=threshold)
    ids = lambda ps: {p.pair_id for p in ps}
    assert ids(kept) | ids(discarded) == ids(pairs)
    assert not ids(kept) & ids(discarded)
    assert all(p.match_count >= threshold for p in kept)


# --- metric scale ---

@pytest.mark.parametrize("rec,met,s", [([1, 2, 3], [2, 4, 6], 2.0), ([1, 2], [3, 5], 2.6), ([4, 5, 6], [4, 5, 6], 1.0)])
def test_metric_scale_hand_cases(rec, met, s):
    assert metric_scale(DepthMap(rec), DepthMap(met), min_valid=1) == s


def test_metric_scale_matches_brute_force_oracle():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        n = int(rng.integers(30, 400))
        rec = rng.uniform(0.1, 20.0, n)
        true_s = float(np.exp(rng.uniform(np.log(0.01), np.log(100))))
        met = true_s * rec * rng.normal(1.0, 0.1, n)
        met = np.abs(met) + 1e-3
        got = metric_scale(DepthMap(rec), DepthMap(met))
        assert abs(got - brute_force_scale(rec, met)) <= 1e-6 * max(1.0, got)


@given(st.floats(1e-2, 1e2), st.integers(0, 1000))
def test_metric_scale_equivariant(k, seed):
    rng = np.random.default_rng(seed)
    rec, met = rng.uniform(0.5, 5, 40), rng.uniform(0.5, 5, 40)
    s = metric_scale(DepthMap(rec), DepthMap(met))
    assert metric_scale(DepthMap(k * rec), DepthMap(met)) == pytest.approx(s / k, rel=1e-12)


def test_metric_scale_masks_invalid_pixels():
    rec = np.array([[1.0, 2.0, 0.0], [np.nan, 3.0, 7.0]])
    met = np.array([[2.0, 4.0, 9.0], [9.0, 6.0, -1.0]])
    assert metric_scale(DepthMap(rec), DepthMap(met), min_valid=3) == 2.0
    mask = np.array([[True, True, True], [True, False, True]])
    assert metric_scale(DepthMap(rec, mask), DepthMap(met), min_valid=2) == 2.0


def test_metric_scale_errors():
    with pytest.raises(InsufficientValidPixels):
        metric_scale(DepthMap(np.ones(29)), DepthMap(np.ones(29)))
    assert metric_scale(DepthMap(np.ones(30)), DepthMap(np.ones(30))) == 1.0
    with pytest.raises(ValueError):
        metric_scale(DepthMap([1, 2]), DepthMap([1, 2, 3]), min_valid=1)
    with pytest.raises(ValueError):
        metric_scale(DepthMap([1.0]), DepthMap([1.0]), mode="mean", min_valid=1)
    with pytest.raises(DegenerateDepths):
        metric_scale(DepthMap([1e-200]), DepthMap([1.0]), min_valid=1)


def test_median_mode_resists_outliers():
    rec = np.ones(31)
    met = np.full(31, 2.0)
    met[0] = 1e6
    assert metric_scale(DepthMap(rec), DepthMap(met), mode="median") == 2.0
    assert metric_scale(DepthMap(rec), DepthMap(met)) > 1000


# --- rescale ---

def test_rescale_examples():
    assert rescale_motion(CameraMotion(dx=1, yaw=30), 2) == CameraMotion(dx=2, yaw=30)
    m = CameraMotion(0.3, -1.2, 4.4, 10, -20, 33)
    assert rescale_motion(m, 1) == m
    back = rescale_motion(rescale_motion(m, 2), 0.5)
    assert max(abs(a - b) for a, b in zip(back.as_dict().values(), m.as_dict().values())) <= 1e-12


@given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3), st.floats(-1e3, 1e3), st.floats(1e-6, 1e6))
def test_rescale_keeps_rotations_bitwise(yaw, pitch, roll, s):
    m = CameraMotion(1.0, 2.0, 3.0, yaw, pitch, roll)
    r = rescale_motion(m, s)
    assert [v.hex() for v in r.angles] == [v.hex() for v in m.angles]


@pytest.mark.parametrize("s", [0, -1, float("nan"), float("inf")])
def test_rescale_rejects_bad_scale(s):
    with pytest.raises(InvalidScale):
        rescale_motion(CameraMotion(dx=1), s)


def test_pair_record_scale_invariant():
    with pytest.raises(InvalidScale):
        PairRecord("p", "a", "b", scale=0.0)


# --- relative pose ---

def random_pose(rng):
    return PoseTransform(rotation_matrix(*rng.uniform(-80, 80, 3)), rng.uniform(-5, 5, 3))


def test_relative_pose_identity():
    rng = np.random.default_rng(0)
    p = random_pose(rng)
    assert motion_allclose(relative_pose(p, p), CameraMotion(), tol=1e-9)


def test_relative_pose_forward_step():
    rng = np.random.default_rng(1)
    src = random_pose(rng)
    forward = src.rotation[:, 2]  # source camera's +z in world coordinates
    tgt = PoseTransform(src.rotation, src.translation + forward)
    assert motion_allclose(relative_pose(src, tgt), CameraMotion(dz=1.0), tol=1e-9)


def test_relative_pose_round_trip():
    rng = np.random.default_rng(7)
    for _ in range(200):
        a, b = random_pose(rng), random_pose(rng)
        rel = relative_pose(a, b)
        assert (a @ to_transform(rel)).allclose(b, tol=1e-9)


def test_relative_pose_gimbal_lock_names_pair():
    src = PoseTransform.identity()
    tgt = to_transform(CameraMotion(pitch=90))
    with pytest.raises(GimbalLock, match="pair p7"):
        relative_pose(src, tgt, pair_id="p7")


# --- buckets ---

def brute_bucket(w, h, base):
    cands = [(bw, bh) for bw in range(64, 4 * base + 1, 64) for bh in range(64, 4 * base + 1, 64)
             if 0.25 <= bw / bh <= 4 and 0.85 * base * base <= bw * bh <= 1.15 * base * base]
    return min(cands, key=lambda c: (abs(math.log(c[0] / c[1]) - math.log(w / h)), abs(c[0] * c[1] - base * base), c))


@pytest.mark.parametrize("w,h,expected", [(1024, 1024, (1024, 1024)), (2048, 2048, (1024, 1024)), (1920, 1080, (1344, 768))])
def test_bucket_examples(w, h, expected):
    assert assign_bucket(w, h) == expected == brute_bucket(w, h, 1024)


def test_bucket_1920x1080_area_and_ratio():
    bw, bh = assign_bucket(1920, 1080)
    assert abs(bw * bh - 1024 ** 2) / 1024 ** 2 <= 0.08
    best = min(abs(math.log(w / h / (16 / 9))) for w, h in bucket_grid(1024))
    assert abs(math.log(bw / bh / (16 / 9))) == best


def test_bucket_grid_matches_enumeration():
    assert sorted(bucket_grid(1024)) == sorted(
        (w, h) for w in range(64, 4097, 64) for h in range(64, 4097, 64)
        if 0.25 <= w / h <= 4 and 0.85 * 1024**2 <= w * h <= 1.15 * 1024**2
    )


def worst_case_bound(grid):
    logs = sorted(math.log(w / h) for w, h in grid)
    gaps = [b - a for a, b in zip(logs, logs[1:])]
    return max(max(gaps) / 2, 0.0)


@given(st.integers(64, 8000), st.integers(64, 8000))
def test_bucket_properties(w, h):
    grid = bucket_grid(1024)
    out = assign_bucket(w, h)
    assert out in grid
    assert out == brute_bucket(w, h, 1024)
    ratio = w / h
    logs = [math.log(a / b) for a, b in grid]
    if min(logs) <= math.log(ratio) <= max(logs):
        assert abs(math.log(out[0] / out[1] / ratio)) <= worst_case_bound(grid) + 1e-12


def test_bucket_rejects_tiny():
    with pytest.raises(ValueError):
        assign_bucket(32, 100)


# --- file formats ---

def test_pfm_round_trip(tmp_path):
    v = np.arange(12, dtype=np.float32).reshape(3, 4) + 0.5
    write_pfm(tmp_path / "d.pfm", v)
    assert np.array_equal(read_pfm(tmp_path / "d.pfm"), v)
    assert read_depth(tmp_path / "d.pfm").width == 4


def test_pfm_big_endian_and_bad_header(tmp_path):
    v = np.array([[1.0, 2.0]], dtype=">f4")
    (tmp_path / "b.pfm").write_bytes(b"Pf\n2 1\n1.0\n" + v.tobytes())
    assert read_pfm(tmp_path / "b.pfm").tolist() == [[1.0, 2.0]]
    (tmp_path / "c.pfm").write_bytes(b"PF\n1 1\n-1\n" + b"\0" * 12)
    with pytest.raises(DepthFormatError):
        read_pfm(tmp_path / "c.pfm")


def test_depth_png_millimetres(tmp_path):
    metres = np.array([[0.0, 1.234], [65.535, np.nan]])
    write_depth_png(tmp_path / "d.png", metres)
    back = read_depth_png(tmp_path / "d.png")
    assert back.tolist() == [[0.0, 1.234], [65.535, 0.0]]
    assert read_depth(tmp_path / "d.png").valid().tolist() == [[False, True], [True, False]]


def test_depth_unknown_format(tmp_path):
    (tmp_path / "d.exr").write_bytes(b"")
    with pytest.raises(DepthFormatError):
        read_depth(tmp_path / "d.exr")


def test_pose_parsing(tmp_path):
    m = np.eye(4)
    m[:3, 3] = [1, 2, 3]
    flat = " ".join(str(x) for x in m.ravel())
    assert parse_pose(flat).translation.tolist() == [1, 2, 3]
    assert parse_pose(m.tolist()).allclose(parse_pose(flat))
    (tmp_path / "poses.txt").write_text(f"# id then matrix\nimg0 {flat}\n")
    assert list(read_pose_file(tmp_path / "poses.txt")) == ["img0"]


# --- composed pass ---

def test_prep_pairs_end_to_end(tmp_path):
    rng = np.random.default_rng(3)
    rec = rng.uniform(1, 4, (8, 8))
    np.save(tmp_path / "rec.npy", rec)
    np.save(tmp_path / "met.npy", 2.5 * rec)
    src = np.eye(4)
    tgt = to_transform(CameraMotion(dx=0.4, yaw=15)).matrix()
    rows = [
        {"pair_id": "p0", "source_image": "a.png", "target_image": "b.png", "match_count": 9,
         "pose_source": src.tolist(), "pose_target": tgt.tolist(), "width": 1920, "height": 1080},
        {"pair_id": "p1", "source_image": "a.png", "target_image": "b.png", "match_count": 10,
         "pose_source": src.tolist(), "pose_target": tgt.tolist(), "width": 1920, "height": 1080,
         "depth_rec": "rec.npy", "depth_met": "met.npy"},
        {"pair_id": "p2", "source_image": "a.png", "target_image": "b.png", "match_count": 50,
         "pose_source": src.tolist(), "pose_target": to_transform(CameraMotion(pitch=90)).matrix().tolist(),
         "width": 1024, "height": 1024},
    ]
    (tmp_path / "pairs.jsonl").write_text("".join(json.dumps(r) + "\n" for r in rows))
    out = prep_pairs(tmp_path / "pairs.jsonl", workers=2)
    assert [p.disposition for p in out] == ["discarded", "kept", "failed"]
    kept = out[1]
    assert kept.scale == pytest.approx(2.5)
    assert motion_allclose(kept.relative_motion, CameraMotion(dx=1.0, yaw=15), tol=1e-9)
    assert kept.bucket == (1344, 768)
    assert kept.to_dict()["instruction"].startswith("move x:+1.00m")
    assert "GimbalLock" in out[2].reason
