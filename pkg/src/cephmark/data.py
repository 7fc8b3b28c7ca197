"""Dataset formation: images, annotations, heatmap targets, folds, synthesis."""
from __future__ import annotations

import csv
import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .tensor import interp_matrix

LANDMARKS = (
    "A", "Ar", "B", "Ba", "C", "DT pog", "EN pn", "Gn", "Go", "LL", "Me", "N",
    "Or", "Po", "Pog", "Pt", "S", "SNA", "SNP pm", "Se", "Sn", "UL", "aii",
    "ais", "ii", "is", "n",
)

CSV_HEADER = ("image_id", "annotator_id", "landmark", "x", "y", "orig_w", "orig_h")


class AnnotationError(ValueError):
    pass


class MissingLandmarkError(AnnotationError):
    pass


class ImageDecodeError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class UnsupportedFormatError(ValueError):
    pass


class FoldError(ValueError):
    pass


# annotations -----------------------------------------------------------------

@dataclass
class LandmarkAnnotation:
    """One annotator's points on one image, in original-resolution pixels."""

    image_id: str
    annotator_id: str
    points: dict[str, tuple[float, float]]
    original_hw: tuple[int, int]

    def validate(self, landmarks: Sequence[str] = LANDMARKS) -> None:
        unknown = set(self.points) - set(LANDMARKS)
        if unknown:
            raise AnnotationError(f"{self.image_id}/{self.annotator_id}: unknown landmarks {sorted(unknown)}")
        for name in landmarks:
            if name not in self.points:
                raise MissingLandmarkError(
                    f"{self.image_id}/{self.annotator_id}: landmark {name!r} is missing")
        h, w = self.original_hw
        for name, (x, y) in self.points.items():
            if not (0 <= x < w and 0 <= y < h):
                raise AnnotationError(f"{self.image_id}/{self.annotator_id}: {name} at "
                                      f"({x}, {y}) outside {w}x{h}")


def _fmt_num(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def write_annotations(path, annotations: Iterable[LandmarkAnnotation]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for ann in annotations:
            h, wd = ann.original_hw
            for name in LANDMARKS:
                if name in ann.points:
                    x, y = ann.points[name]
                    w.writerow([ann.image_id, ann.annotator_id, name, _fmt_num(x),
                                _fmt_num(y), wd, h])


def read_annotations(path) -> list[LandmarkAnnotation]:
    """Parse the per-point CSV; rows are grouped by (image_id, annotator_id) in file order."""
    out: dict[tuple[str, str], LandmarkAnnotation] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != CSV_HEADER:
            raise AnnotationError(f"{path}: expected header {','.join(CSV_HEADER)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(CSV_HEADER):
                raise AnnotationError(f"{path}:{lineno}: expected {len(CSV_HEADER)} fields")
            image_id, annotator_id, name, x, y, ow, oh = row
            try:
                pt = (float(x), float(y))
                hw = (int(oh), int(ow))
            except ValueError as exc:
                raise AnnotationError(f"{path}:{lineno}: {exc}") from None
            key = (image_id, annotator_id)
            ann = out.get(key)
            if ann is None:
                ann = out[key] = LandmarkAnnotation(image_id, annotator_id, {}, hw)
            elif ann.original_hw != hw:
                raise AnnotationError(f"{path}:{lineno}: inconsistent size for {image_id}")
            if name in ann.points:
                raise AnnotationError(f"{path}:{lineno}: duplicate landmark {name!r}")
            ann.points[name] = pt
    for ann in out.values():
        ann.validate(landmarks=())
    return list(out.values())


# images -------------------------------------------------------------------------

def _parse_pgm(blob: bytes) -> np.ndarray:
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        tok = blob[start:pos]
        if not tok.isdigit():
            raise ImageDecodeError(f"bad PGM header token {tok!r}", start)
        fields.append(int(tok))
    pos += 1  # single whitespace byte before raster
    w, h, maxval = fields
    if not (0 < maxval < 65536):
        raise ImageDecodeError(f"PGM maxval {maxval} out of range", pos)
    dtype = ">u2" if maxval > 255 else "u1"
    need = w * h * np.dtype(dtype).itemsize
    if len(blob) - pos < need:
        raise ImageDecodeError(f"PGM raster truncated: need {need} bytes", len(blob))
    raster = np.frombuffer(blob, dtype=dtype, count=w * h, offset=pos).reshape(h, w)
    return raster.astype(np.float64) / maxval


def _parse_png(blob: bytes, path) -> np.ndarray:
    from PIL import Image

    pos = 8
    while pos + 8 <= len(blob):
        length, ctype = struct.unpack(">I4s", blob[pos:pos + 8])
        if ctype == b"IHDR":
            depth, color = blob[pos + 16], blob[pos + 17]
            if color != 0 or depth not in (8, 16):
                raise UnsupportedFormatError(
                    f"{path}: only 8/16-bit grayscale PNG supported (color type {color}, depth {depth})")
            break
        pos += 12 + length
    else:
        raise ImageDecodeError("PNG has no IHDR chunk", pos)
    try:
        img = Image.open(io.BytesIO(blob))
        img.load()
    except Exception as exc:  # Pillow raises several unrelated types
        raise ImageDecodeError(f"PNG decode failed: {exc}", pos) from None
    arr = np.asarray(img, dtype=np.float64)
    return arr / (65535.0 if depth == 16 else 255.0)


def load_image(path) -> np.ndarray:
    """Read an 8/16-bit grayscale PGM (P5) or PNG into ``[1, H, W]`` floats in [0, 1]."""
    blob = Path(path).read_bytes()
    if blob[:2] == b"P5":
        arr = _parse_pgm(blob)
    elif blob[:8] == b"\x89PNG\r\n\x1a\n":
        arr = _parse_png(blob, path)
    else:
        raise UnsupportedFormatError(f"{path}: not a binary PGM or PNG file")
    return arr[None]


def save_pgm(path, image: np.ndarray, bits: int = 8) -> None:
    """Write ``[H, W]`` or ``[1, H, W]`` floats in [0, 1] as binary PGM."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img[0]
    maxval = 255 if bits == 8 else 65535
    codes = np.clip(np.rint(img * maxval), 0, maxval)
    raster = codes.astype("u1" if bits == 8 else ">u2").tobytes()
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n{maxval}\n".encode() + raster)


def resize_bilinear(image: np.ndarray, target_hw: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of ``[C, H, W]`` with half-pixel (align-corners-false) sampling."""
    th, tw = target_hw
    if th < 1 or tw < 1:
        raise ValueError(f"target size must be positive, got {target_hw}")
    img = np.asarray(image, dtype=np.float64)
    _, h, w = img.shape
    if (h, w) == (th, tw):
        return img.copy()
    return np.einsum("ih,chw,jw->cij", interp_matrix(h, th), img, interp_matrix(w, tw),
                     optimize=True)


def _round_half_away(v: float) -> int:
    return int(math.floor(abs(v) + 0.5)) * (1 if v >= 0 else -1)


def scale_landmark(coord: tuple[float, float], from_hw: tuple[int, int],
                   to_hw: tuple[int, int]) -> tuple[int, int]:
    """Map an original-resolution point to integer pixels at ``to_hw``."""
    x, y = coord
    fh, fw = from_hw
    th, tw = to_hw
    if not (0 <= x < fw and 0 <= y < fh):
        raise ValueError(f"point ({x}, {y}) outside source {fw}x{fh}")
    xs = min(max(_round_half_away(x * tw / fw), 0), tw - 1)
    ys = min(max(_round_half_away(y * th / fh), 0), th - 1)
    return xs, ys


# targets ---------------------------------------------------------------------

def gaussian_heatmap(coord: tuple[int, int], hw: tuple[int, int], sigma: float) -> np.ndarray:
    """Unit-peak Gaussian bump truncated to a square of half-width 3*sigma."""
    x0, y0 = coord
    h, w = hw
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if not (0 <= x0 < w and 0 <= y0 < h):
        raise ValueError(f"coordinate ({x0}, {y0}) outside {w}x{h}")
    if x0 != int(x0) or y0 != int(y0):
        raise ValueError(f"coordinate ({x0}, {y0}) must be integer pixels")
    x0, y0 = int(x0), int(y0)
    r = int(math.floor(3 * sigma))
    out = np.zeros((h, w))
    ys = np.arange(max(0, y0 - r), min(h, y0 + r + 1))
    xs = np.arange(max(0, x0 - r), min(w, x0 + r + 1))
    gy = np.exp(-((ys - y0) ** 2) / (2 * sigma**2))
    gx = np.exp(-((xs - x0) ** 2) / (2 * sigma**2))
    out[ys[0]:ys[-1] + 1, xs[0]:xs[-1] + 1] = np.outer(gy, gx)
    return out


@dataclass
class HeatmapStack:
    data: np.ndarray  # [L, H, W]
    peak_coords: list[tuple[int, int]]
    sigma: float
    landmarks: tuple[str, ...] = LANDMARKS


def encode_targets(annotation: LandmarkAnnotation, target_hw: tuple[int, int], sigma: float,
                   landmarks: Sequence[str] = LANDMARKS) -> HeatmapStack:
    annotation.validate(landmarks)
    peaks = [scale_landmark(annotation.points[name], annotation.original_hw, target_hw)
             for name in landmarks]
    data = np.stack([gaussian_heatmap(p, target_hw, sigma) for p in peaks]) if peaks \
        else np.zeros((0, *target_hw))
    return HeatmapStack(data, peaks, sigma, tuple(landmarks))


# folds -------------------------------------------------------------------------

@dataclass
class FoldPlan:
    n_items: int
    k: int
    folds: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({
            "n_items": self.n_items,
            "k": self.k,
            "folds": [{"train": tr.tolist(), "test": te.tolist()} for tr, te in self.folds],
        }, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "FoldPlan":
        d = json.loads(text)
        folds = [(np.array(f["train"], dtype=int), np.array(f["test"], dtype=int))
                 for f in d["folds"]]
        return cls(d["n_items"], d["k"], folds)


def make_folds(n_items: int, k: int) -> FoldPlan:
    """Contiguous, unshuffled k-way split; fold i tests on ``[i*n/k, (i+1)*n/k)``."""
    if k < 2:
        raise FoldError(f"k must be >= 2, got {k}")
    if n_items < k or n_items % k:
        raise FoldError(f"n_items={n_items} is not a positive multiple of k={k}")
    size = n_items // k
    idx = np.arange(n_items)
    folds = []
    for i in range(k):
        test = idx[i * size:(i + 1) * size]
        train = np.concatenate([idx[:i * size], idx[(i + 1) * size:]])
        folds.append((train, test))
    return FoldPlan(n_items, k, folds)


# synthetic data ----------------------------------------------------------------

TEMPLATE_RADIUS = 3
_N_SHAPES = 9


def _shape_mask(kind: int) -> np.ndarray:
    r = TEMPLATE_RADIUS
    dy, dx = np.mgrid[-r:r + 1, -r:r + 1]
    dist = np.hypot(dx, dy)
    masks = [
        dist <= 2.5,                                   # disc
        (dist >= 1.8) & (dist <= 3.2) | (dist == 0),   # ring with centre dot
        (dx == 0) | (dy == 0),                         # plus
        np.abs(dx) == np.abs(dy),                      # saltire
        (np.maximum(np.abs(dx), np.abs(dy)) == r) | (dist == 0),  # box
        (np.abs(dy) <= 1) & (np.abs(dx) <= r),         # horizontal bar
        (np.abs(dx) <= 1) & (np.abs(dy) <= r),         # vertical bar
        ((dy == 0) & (dx >= 0)) | ((dx == 0) & (dy >= 0)),   # corner opening down-right
        ((dy == 0) & (dx <= 0)) | ((dx == 0) & (dy <= 0)),   # corner opening up-left
    ]
    return masks[kind].astype(np.float64)


def landmark_template(index: int) -> np.ndarray:
    """``(2r+1)^2`` intensity patch for landmark ``index``; centre is the landmark."""
    if not 0 <= index < len(LANDMARKS):
        raise ValueError(f"landmark index {index} out of range")
    return _shape_mask(index % _N_SHAPES) * (1.0 - 0.025 * index)


def _place(rng: np.random.Generator, hw, n: int, min_sep: float) -> np.ndarray:
    h, w = hw
    m = TEMPLATE_RADIUS + 1
    pts = np.zeros((n, 2), dtype=int)
    for i in range(n):
        for _ in range(10_000):
            p = np.array([rng.integers(m, w - m), rng.integers(m, h - m)])
            if i == 0 or np.min(np.hypot(*(pts[:i] - p).T)) >= min_sep:
                break
        else:
            raise RuntimeError(f"could not place {n} landmarks in {w}x{h}")
        pts[i] = p
    return pts


def synth_generate(seed: int, n_images: int, hw: tuple[int, int] = (64, 64),
                   n_landmarks: int = 5, noise: float = 0.0,
                   annotator_id: str = "synth") -> tuple[list[np.ndarray], list[LandmarkAnnotation]]:
    """Images with one distinct stamped structure per landmark at random positions.

    Each image gets a faint random linear ramp as background.  Annotations hold
    the exact stamp centres.  Output is a pure function of the arguments.
    """
    if not 0 <= n_landmarks <= len(LANDMARKS):
        raise ValueError(f"n_landmarks must be in [0, {len(LANDMARKS)}]")
    h, w = hw
    if h < 32 or w < 32:
        raise ValueError(f"synthetic images must be at least 32x32, got {w}x{h}")
    rng = np.random.default_rng(seed)
    r = TEMPLATE_RADIUS
    min_sep = 2 * r + 3
    names = LANDMARKS[:n_landmarks]
    yy, xx = np.mgrid[0:h, 0:w]
    images, anns = [], []
    for i in range(n_images):
        gx, gy = rng.uniform(-1, 1, size=2)
        ramp = 0.08 + 0.06 * (gx * (xx / w - 0.5) + gy * (yy / h - 0.5))
        img = ramp.copy()
        pts = _place(rng, hw, n_landmarks, min_sep)
        for k, (x, y) in enumerate(pts):
            patch = img[y - r:y + r + 1, x - r:x + r + 1]
            np.maximum(patch, landmark_template(k), out=patch)
        if noise > 0:
            img = img + noise * rng.standard_normal(img.shape)
        img = np.clip(img, 0.0, 1.0)
        images.append(img[None])
        anns.append(LandmarkAnnotation(
            f"img{i:04d}", annotator_id,
            {name: (int(x), int(y)) for name, (x, y) in zip(names, pts)}, (h, w)))
    return images, anns


def jitter_annotations(annotations: Sequence[LandmarkAnnotation], annotator_id: str,
                       seed: int, max_px: int) -> list[LandmarkAnnotation]:
    """Copies of ``annotations`` with integer offsets in ``[-max_px, max_px]``, clamped."""
    rng = np.random.default_rng(seed)
    out = []
    for ann in annotations:
        h, w = ann.original_hw
        pts = {}
        for name in LANDMARKS:
            if name not in ann.points:
                continue
            x, y = ann.points[name]
            dx, dy = rng.integers(-max_px, max_px + 1, size=2)
            pts[name] = (int(min(max(x + dx, 0), w - 1)), int(min(max(y + dy, 0), h - 1)))
        out.append(LandmarkAnnotation(ann.image_id, annotator_id, pts, ann.original_hw))
    return out
