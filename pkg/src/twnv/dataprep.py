"""Training-pair preparation: overlap filtering, relative pose, metric scale, buckets."""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from PIL import Image

from twnv.geometry import CameraMotion, GimbalLock, PoseTransform, from_transform
from twnv.instructions import render_numerical

MIN_MATCHES = 10
MIN_VALID_PIXELS = 30
BUCKET_STEP = 64
BUCKET_RATIO_RANGE = (0.25, 4.0)
BUCKET_AREA_RANGE = (0.85, 1.15)


class PrepError(ValueError):
    pass


class InsufficientValidPixels(PrepError):
    pass


class DegenerateDepths(PrepError):
    pass


class InvalidScale(PrepError):
    pass


class DepthFormatError(PrepError):
    pass


# --- depth maps ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DepthMap:
    """Row-major depth values; a pixel is valid when finite and > 0 (and unmasked)."""

    values: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 1:
            v = v.reshape(1, -1)
        if v.ndim != 2:
            raise ValueError("depth values must be 1-D or 2-D")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        if self.mask is not None:
            m = np.asarray(self.mask, dtype=bool).reshape(v.shape).copy()
            m.setflags(write=False)
            object.__setattr__(self, "mask", m)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def valid(self) -> np.ndarray:
        with np.errstate(invalid="ignore"):
            ok = np.isfinite(self.values) & (self.values > 0)
        return ok if self.mask is None else ok & self.mask


def metric_scale(
    depth_rec: DepthMap,
    depth_met: DepthMap,
    mode: str = "lstsq",
    min_valid: int = MIN_VALID_PIXELS,
) -> float:
    """Scale ``s`` mapping reconstructed depths onto metric depths.

    ``lstsq`` minimizes sum((s*rec - met)^2) over jointly valid pixels, whose
    closed form is sum(rec*met) / sum(rec^2). ``median`` takes the median of
    per-pixel ratios met/rec instead.
    """
    if depth_rec.values.shape != depth_met.values.shape:
        raise ValueError(f"depth shapes differ: {depth_rec.values.shape} vs {depth_met.values.shape}")
    joint = depth_rec.valid() & depth_met.valid()
    count = int(joint.sum())
    if count < min_valid:
        raise InsufficientValidPixels(f"{count} jointly valid pixels, need {min_valid}")
    rec = depth_rec.values[joint]
    met = depth_met.values[joint]
    if mode == "lstsq":
        den = float(np.dot(rec, rec))
        if den == 0.0:
            raise DegenerateDepths("sum of squared reconstructed depths is zero")
        s = float(np.dot(rec, met)) / den
    elif mode == "median":
        s = float(np.median(met / rec))
    else:
        raise ValueError(f"unknown scale mode {mode!r}")
    if not math.isfinite(s) or s <= 0:
        raise DegenerateDepths(f"scale {s} is not a positive finite number")
    return s


def rescale_motion(m: CameraMotion, s: float) -> CameraMotion:
    """Scale translations by ``s``; rotations pass through untouched."""
    if not (isinstance(s, (int, float)) and math.isfinite(s) and s > 0):
        raise InvalidScale(f"scale must be a positive finite number, got {s!r}")
    return replace(m, dx=m.dx * s, dy=m.dy * s, dz=m.dz * s)


def relative_pose(pose_source: PoseTransform, pose_target: PoseTransform, pair_id: str | None = None) -> CameraMotion:
    """Target camera expressed in the source camera frame (both camera-to-world)."""
    rel = pose_source.inverse() @ pose_target
    return from_transform(rel, pair_id=pair_id)


# --- resolution buckets -------------------------------------------------------------------


def bucket_grid(base: int = 1024) -> list[tuple[int, int]]:
    """All (w, h) multiples of 64 with aspect ratio in [1/4, 4] and area near base^2."""
    lo_r, hi_r = BUCKET_RATIO_RANGE
    lo_a, hi_a = (f * base * base for f in BUCKET_AREA_RANGE)
    out = []
    limit = int(math.isqrt(int(hi_a * hi_r))) + BUCKET_STEP
    for w in range(BUCKET_STEP, limit + 1, BUCKET_STEP):
        for h in range(BUCKET_STEP, limit + 1, BUCKET_STEP):
            if lo_r <= w / h <= hi_r and lo_a <= w * h <= hi_a:
                out.append((w, h))
    return out


def assign_bucket(width: int, height: int, base: int = 1024) -> tuple[int, int]:
    """Nearest bucket by |log aspect difference|, then pixel-count distance, then (w, h)."""
    if width < 64 or height < 64:
        raise ValueError("width and height must be >= 64")
    target = math.log(width / height)
    area = base * base
    grid = bucket_grid(base)
    return min(grid, key=lambda wh: (abs(math.log(wh[0] / wh[1]) - target), abs(wh[0] * wh[1] - area), wh))


# --- overlap filtering --------------------------------------------------------------------


@dataclass
class PairRecord:
    pair_id: str
    source_image: str
    target_image: str
    pose_source: PoseTransform | None = None
    pose_target: PoseTransform | None = None
    match_count: int | None = None
    depth_rec: str | None = None
    depth_met: str | None = None
    scale: float | None = None
    relative_motion: CameraMotion | None = None
    bucket: tuple[int, int] | None = None
    disposition: str = "pending"
    reason: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.scale is not None and not (math.isfinite(self.scale) and self.scale > 0):
            raise InvalidScale(f"scale must be finite and > 0, got {self.scale!r}")

    def to_dict(self) -> dict:
        motion = self.relative_motion
        return {
            "pair_id": self.pair_id,
            "source_image": self.source_image,
            "target_image": self.target_image,
            "match_count": self.match_count,
            "disposition": self.disposition,
            "reason": self.reason,
            "scale": self.scale,
            "relative_motion": motion.as_dict() if motion else None,
            "instruction": render_numerical(motion) if motion else None,
            "bucket": list(self.bucket) if self.bucket else None,
        }


Matcher = Callable[[PairRecord], int]


def precomputed_matcher(pair: PairRecord) -> int:
    """Use the match count carried on the record itself."""
    if pair.match_count is None:
        raise LookupError("no precomputed match_count")
    return pair.match_count


def counts_matcher(counts: Mapping[str, int]) -> Matcher:
    def match(pair: PairRecord) -> int:
        return counts[pair.pair_id]

    return match


def filter_pairs(
    pairs: Iterable[PairRecord], matcher: Matcher = precomputed_matcher, min_matches: int = MIN_MATCHES
) -> tuple[list[PairRecord], list[PairRecord]]:
    """Keep pairs with at least ``min_matches`` verified matches."""
    kept, discarded = [], []
    for pair in pairs:
        try:
            n = matcher(pair)
            if not isinstance(n, (int, np.integer)) or n < 0:
                raise ValueError(f"matcher returned {n!r}")
        except Exception as exc:  # any matcher failure routes the pair to discarded
            pair.disposition = "discarded"
            pair.reason = f"unmatched: {exc}"
            discarded.append(pair)
            continue
        pair.match_count = int(n)
        if n >= min_matches:
            pair.disposition = "kept"
            kept.append(pair)
        else:
            pair.disposition = "discarded"
            pair.reason = f"too few verified matches ({n} < {min_matches})"
            discarded.append(pair)
    return kept, discarded


# --- file formats -------------------------------------------------------------------------


def read_pfm(path: str | Path) -> np.ndarray:
    """Single-channel PFM (``Pf``); rows are returned top to bottom."""
    with open(path, "rb") as fh:
        header = fh.readline().strip()
        if header != b"Pf":
            raise DepthFormatError(f"{path}: expected a single-channel 'Pf' file, got {header!r}")
        dims = fh.readline().split()
        scale_line = fh.readline().strip()
        try:
            w, h = int(dims[0]), int(dims[1])
            scale = float(scale_line)
        except (IndexError, ValueError) as exc:
            raise DepthFormatError(f"{path}: bad PFM header") from exc
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(), dtype=dtype)
    if data.size != w * h:
        raise DepthFormatError(f"{path}: expected {w * h} floats, found {data.size}")
    return np.flipud(data.reshape(h, w)).astype(np.float64)


def write_pfm(path: str | Path, values: np.ndarray) -> None:
    v = np.asarray(values, dtype="<f4")
    h, w = v.shape
    with open(path, "wb") as fh:
        fh.write(b"Pf\n" + f"{w} {h}\n".encode() + b"-1.0\n")
        fh.write(np.flipud(v).tobytes())


def read_depth_png(path: str | Path) -> np.ndarray:
    """16-bit grayscale PNG in millimetres -> metres; 0 stays 0 (invalid)."""
    with Image.open(path) as im:
        if im.mode not in ("I;16", "I;16B", "I;16L", "I"):
            raise DepthFormatError(f"{path}: expected a 16-bit grayscale PNG, got mode {im.mode}")
        arr = np.array(im, dtype=np.float64)
    return arr / 1000.0


def write_depth_png(path: str | Path, metres: np.ndarray) -> None:
    mm = np.nan_to_num(np.asarray(metres, dtype=np.float64) * 1000.0, nan=0.0, posinf=0.0, neginf=0.0)
    mm = np.clip(np.rint(mm), 0, 65535).astype(np.uint16)
    Image.fromarray(mm).save(path, format="PNG")


def read_depth(path: str | Path) -> DepthMap:
    suffix = Path(path).suffix.lower()
    if suffix == ".pfm":
        return DepthMap(read_pfm(path))
    if suffix == ".png":
        return DepthMap(read_depth_png(path))
    if suffix == ".npy":
        return DepthMap(np.load(path))
    raise DepthFormatError(f"{path}: unsupported depth format {suffix!r}")


def parse_pose(value) -> PoseTransform:
    """A camera-to-world pose: 16 numbers row-major (list or whitespace string) or a 4x4 list."""
    if isinstance(value, str):
        value = [float(x) for x in re.split(r"[\s,]+", value.strip()) if x]
    return PoseTransform.from_matrix(np.asarray(value, dtype=np.float64))


def read_pose_file(path: str | Path) -> dict[str, PoseTransform]:
    """Lines of ``image_id m00 m01 ... m33``; ``#`` starts a comment."""
    poses = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 17:
            raise PrepError(f"{path}:{lineno}: expected an id and 16 numbers, got {len(parts)} fields")
        poses[parts[0]] = parse_pose(" ".join(parts[1:]))
    return poses


# --- the composed preparation pass --------------------------------------------------------


def _resolve(base: Path, p: str) -> Path:
    path = Path(p)
    return path if path.is_absolute() else base / path


def load_pairs(path: str | Path) -> list[tuple[PairRecord, dict]]:
    """Read a pairs file; returns each record with its raw row for lazy pose/depth loading."""
    out = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                pair_id = str(row["pair_id"])
                rec = PairRecord(pair_id, row["source_image"], row["target_image"], match_count=row.get("match_count"))
            except (json.JSONDecodeError, KeyError) as exc:
                raise PrepError(f"{path}:{lineno}: bad pair line ({exc})") from exc
            if pair_id in seen:
                raise PrepError(f"{path}:{lineno}: duplicate pair_id {pair_id!r}")
            seen.add(pair_id)
            rec.depth_rec = row.get("depth_rec")
            rec.depth_met = row.get("depth_met")
            out.append((rec, row))
    return out


def _poses(row: dict, base: Path, pose_files: dict) -> tuple[PoseTransform, PoseTransform]:
    if "pose_source" in row and "pose_target" in row:
        return parse_pose(row["pose_source"]), parse_pose(row["pose_target"])
    if "pose_file" in row:
        ref = str(_resolve(base, row["pose_file"]))
        if ref not in pose_files:
            pose_files[ref] = read_pose_file(ref)
        table = pose_files[ref]
        src_id = row.get("source_id", Path(row["source_image"]).stem)
        tgt_id = row.get("target_id", Path(row["target_image"]).stem)
        try:
            return table[src_id], table[tgt_id]
        except KeyError as exc:
            raise PrepError(f"pose for {exc.args[0]!r} not in {ref}") from exc
    raise PrepError("no poses: give pose_source/pose_target or pose_file")


def _image_size(path: Path) -> tuple[int, int]:
    with Image.open(path) as im:
        return im.size


def prepare_pair(
    rec: PairRecord,
    row: dict,
    base: Path,
    scale_mode: str = "lstsq",
    min_valid: int = MIN_VALID_PIXELS,
    bucket_base: int = 1024,
    pose_files: dict | None = None,
) -> PairRecord:
    """Relative pose -> metric scale -> rescale -> bucket, for one kept pair. Errors mark the pair failed."""
    try:
        rec.pose_source, rec.pose_target = _poses(row, base, pose_files if pose_files is not None else {})
        motion = relative_pose(rec.pose_source, rec.pose_target, rec.pair_id)
        if rec.depth_rec and rec.depth_met:
            rec.scale = metric_scale(
                read_depth(_resolve(base, rec.depth_rec)), read_depth(_resolve(base, rec.depth_met)),
                mode=scale_mode, min_valid=min_valid,
            )
        elif "scale" in row:
            rec.scale = float(row["scale"])
        if rec.scale is not None:
            motion = rescale_motion(motion, rec.scale)
        rec.relative_motion = motion
        if "width" in row and "height" in row:
            size = (int(row["width"]), int(row["height"]))
        else:
            size = _image_size(_resolve(base, rec.source_image))
        rec.bucket = assign_bucket(*size, base=bucket_base)
        rec.disposition = "kept"
    except (PrepError, GimbalLock, ValueError, OSError) as exc:
        rec.disposition = "failed"
        rec.reason = f"{type(exc).__name__}: {exc}"
    return rec


def prep_pairs(
    pairs_path: str | Path,
    scale_mode: str = "lstsq",
    min_matches: int = MIN_MATCHES,
    min_valid: int = MIN_VALID_PIXELS,
    bucket_base: int = 1024,
    matcher: Matcher = precomputed_matcher,
    workers: int = 1,
) -> list[PairRecord]:
    """Run the full pass over a pairs file; output keeps input order."""
    pairs_path = Path(pairs_path)
    base = pairs_path.parent
    loaded = load_pairs(pairs_path)
    rows = {rec.pair_id: row for rec, row in loaded}
    kept, _ = filter_pairs([rec for rec, _ in loaded], matcher, min_matches)
    pose_files: dict = {}

    def work(rec: PairRecord) -> PairRecord:
        return prepare_pair(rec, rows[rec.pair_id], base, scale_mode, min_valid, bucket_base, pose_files)

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        # pose files are read up front so workers never race on the cache
        for rec in kept:
            if "pose_file" in rows[rec.pair_id]:
                ref = str(_resolve(base, rows[rec.pair_id]["pose_file"]))
                if ref not in pose_files:
                    try:
                        pose_files[ref] = read_pose_file(ref)
                    except (OSError, PrepError):
                        pass
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(work, kept))
    else:
        for rec in kept:
            work(rec)
    return [rec for rec, _ in loaded]


def write_pair_records(path: str | Path, records: Sequence[PairRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
