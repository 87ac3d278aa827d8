"""Synthetic hyperspectral driving scenes, per-pixel normalization, band presets, IoU."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, asdict
from typing import BinaryIO

import numpy as np
import yaml

CLASS_NAMES = ("Road", "Marks", "Vegetation", "Sky", "Other")
ROAD, MARKS, VEGETATION, SKY, OTHER = range(5)
N_BANDS = 25

# 0-based indices; the 1-based sensor numbering is index + 1.
SINGLE_BAND = (12,)
TRIPLE_BANDS = (8, 21, 24)
BAND_PRESETS = {1: SINGLE_BAND, 3: TRIPLE_BANDS, 25: tuple(range(N_BANDS))}
# Documented filter peaks (nm); secondary peaks are notes only, never mixed into the signal.
BAND_NOTES = {
    8: {"peak_nm": 770.576},
    12: {"peak_nm": 731.883},
    21: {"peak_nm": 858.948, "secondary_nm": 577.147},
    24: {"peak_nm": 944.485, "secondary_nm": 657.995},
}

PN_FLOOR = 1e-8


@dataclass
class HsiScene:
    cube: np.ndarray  # [H, W, B] reflectance
    labels: np.ndarray | None  # [H, W] uint8
    illumination: np.ndarray | None = None  # [H, W] gain > 0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.cube = np.asarray(self.cube, dtype=np.float64)
        if self.cube.ndim != 3:
            raise ValueError(f"cube must be [H, W, B], got {self.cube.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels)
            if self.labels.shape != self.cube.shape[:2]:
                raise ValueError(f"labels {self.labels.shape} do not match cube {self.cube.shape}")
            if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= len(CLASS_NAMES)):
                raise ValueError("labels must lie in [0, 5)")
        if self.illumination is not None and np.any(self.illumination <= 0):
            raise ValueError("illumination must be positive everywhere")

    @property
    def bands(self) -> int:
        return self.cube.shape[2]


def _normalize_pixel(values: list[float]) -> list[float]:
    # exact integer sum, then one correctly rounded division per band
    ratios = [v.as_integer_ratio() for v in values]
    den = max(d for _, d in ratios)
    nums = [n * (den // d) for n, d in ratios]
    total = sum(nums)
    if total < PN_FLOOR * den:
        return [1.0 / len(values)] * len(values)
    return [n / total for n in nums]


def per_pixel_normalize(cube: np.ndarray) -> np.ndarray:
    """Divide each pixel's spectrum by its component sum.

    The sum is formed exactly and each ratio is rounded once, so a positive
    gain g with exactly representable products g*x (e.g. 32-bit data) leaves
    the output bit-identical.  Pixels whose sum is below 1e-8 become the
    uniform vector 1/B.
    """
    cube = np.asarray(cube, dtype=np.float64)
    if cube.ndim != 3 or cube.shape[2] < 1:
        raise ValueError(f"cube must be [H, W, B] with B >= 1, got {cube.shape}")
    if not np.all(np.isfinite(cube)):
        raise ValueError("cube contains NaN or Inf")
    rows = [_normalize_pixel(px) for px in cube.reshape(-1, cube.shape[2]).tolist()]
    return np.array(rows, dtype=np.float64).reshape(cube.shape)


def select_bands(cube: np.ndarray, indices) -> np.ndarray:
    cube = np.asarray(cube)
    indices = list(indices)
    if not indices:
        raise ValueError("need at least one band index")
    bad = [i for i in indices if not 0 <= i < cube.shape[2]]
    if bad:
        raise ValueError(f"band indices {bad} out of range for {cube.shape[2]} bands")
    return cube[:, :, indices]


def prepare(scene: HsiScene, bands: int = 25, pn: bool | None = None) -> HsiScene:
    """Band preset selection followed by optional PN (default: PN only for 25 bands)."""
    if bands not in BAND_PRESETS:
        raise ValueError(f"bands must be one of {sorted(BAND_PRESETS)}, got {bands}")
    pn = (bands == 25) if pn is None else pn
    cube = select_bands(scene.cube, BAND_PRESETS[bands])
    if pn:
        cube = per_pixel_normalize(cube)
    meta = dict(scene.metadata, bands=bands, pn=pn)
    return HsiScene(cube, scene.labels, scene.illumination, meta)


# ---------------------------------------------------------------------------
# scene synthesis


def _t(bands: int) -> np.ndarray:
    return np.linspace(0.0, 1.0, bands)


def default_signatures(bands: int = N_BANDS, metameric: bool = True) -> dict[int, np.ndarray]:
    """Mean reflectance per class.

    Road and Marks are grey materials of nearly the same spectral shape and
    different brightness.  With ``metameric`` the Other signature is built to
    equal Vegetation at the single-band preset while differing elsewhere.
    """
    t = _t(bands)
    road = 0.10 + 0.02 * t
    marks = 0.45 + 0.22 * t
    veg = 0.05 + 0.45 / (1.0 + np.exp(-(t - 0.35) / 0.05))
    sky = 0.40 - 0.22 * t
    if metameric:
        centre = bands // 2
        other = veg[centre] + 0.8 * (t - t[centre]) ** 2
    else:
        other = 0.30 - 0.35 * t + 0.45 * t ** 2
    return {ROAD: road, MARKS: marks, VEGETATION: veg, SKY: sky, OTHER: other}


@dataclass
class SceneSpec:
    height: int = 32
    width: int = 32
    bands: int = N_BANDS
    template: str = "metameric"  # urban | metameric | two_region
    signatures: dict = field(default_factory=dict)
    jitter: float = 0.03  # relative per-band std
    jitter_floor: float = 0.01  # absolute per-band std
    sky_fraction: tuple = (0.15, 0.3)
    vegetation_blobs: tuple = (2, 4)
    other_objects: tuple = (1, 3)
    zebra_probability: float = 0.5
    shadow_count: tuple = (1, 3)
    shadow_softness: float = 0.25  # blob radius as a fraction of the width
    shadow_gain: tuple = (0.25, 1.0)
    two_region_classes: tuple = (ROAD, VEGETATION)

    def __post_init__(self):
        if not self.signatures:
            self.signatures = default_signatures(self.bands, metameric=self.template != "urban")
        self.signatures = {int(k): np.asarray(v, dtype=np.float64) for k, v in self.signatures.items()}
        validate_spec(self)

    def jitter_scale(self, c: int) -> np.ndarray:
        return np.maximum(self.jitter * self.signatures[c], self.jitter_floor)


def validate_spec(spec: SceneSpec) -> None:
    if spec.template not in ("urban", "metameric", "two_region"):
        raise ValueError(f"unknown template {spec.template!r}")
    if spec.height % 4 or spec.width % 4 or spec.height < 4 or spec.width < 4:
        raise ValueError(f"scene extents must be positive multiples of 4, got {spec.height}x{spec.width}")
    sigs = spec.signatures
    if set(sigs) != set(range(len(CLASS_NAMES))):
        raise ValueError("need one signature per class 0..4")
    for c, s in sigs.items():
        if s.shape != (spec.bands,):
            raise ValueError(f"signature {c} has shape {s.shape}, expected ({spec.bands},)")
        if np.any(s < 0):
            raise ValueError(f"signature {c} has negative entries")
    if spec.bands > 1:
        for a in sigs:
            for b in sigs:
                if a < b and cosine(sigs[a], sigs[b]) >= 0.999:
                    raise ValueError(f"signatures of {CLASS_NAMES[a]} and {CLASS_NAMES[b]} are collinear")
    lo, hi = spec.shadow_gain
    if not 0 < lo <= hi <= 1:
        raise ValueError(f"shadow gain range must satisfy 0 < lo <= hi <= 1, got {spec.shadow_gain}")


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def _ellipse(h: int, w: int, cy: float, cx: float, ry: float, rx: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _layout(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.height, spec.width
    if spec.template == "two_region":
        labels = np.full((h, w), spec.two_region_classes[0], dtype=np.uint8)
        labels[:, w // 2:] = spec.two_region_classes[1]
        return labels

    labels = np.full((h, w), VEGETATION, dtype=np.uint8)
    horizon = int(round(h * rng.uniform(*spec.sky_fraction)))
    ground = h - horizon

    # buildings, cars, kerbs: rectangles of the Other class
    for _ in range(rng.integers(spec.other_objects[0], spec.other_objects[1] + 1)):
        y0 = int(rng.integers(horizon, h - 2))
        x0 = int(rng.integers(0, w - 2))
        dy = int(round(rng.uniform(0.15, 0.4) * ground))
        dx = int(round(rng.uniform(0.1, 0.3) * w))
        labels[y0:y0 + max(dy, 2), x0:x0 + max(dx, 2)] = OTHER
    for _ in range(rng.integers(spec.vegetation_blobs[0], spec.vegetation_blobs[1] + 1)):
        blob = _ellipse(h, w, rng.uniform(horizon, h), rng.uniform(0, w),
                        rng.uniform(0.06, 0.15) * h, rng.uniform(0.06, 0.15) * w)
        labels[blob] = VEGETATION

    # road trapezoid widening towards the bottom, flanked by sidewalks
    cx = w * rng.uniform(0.35, 0.65)
    top_half, bottom_half = w * rng.uniform(0.04, 0.1), w * rng.uniform(0.25, 0.4)
    rows = np.arange(h)
    frac = np.clip((rows - horizon) / max(ground - 1, 1), 0.0, 1.0)
    half = top_half + (bottom_half - top_half) * frac
    xx = np.arange(w)[None, :]
    below = rows[:, None] >= horizon
    kerb = half[:, None] + 1.0 + rng.uniform(0.03, 0.12) * w * (0.3 + frac[:, None])
    labels[(np.abs(xx - cx) <= kerb) & below] = OTHER
    road = (np.abs(xx - cx) <= half[:, None]) & below
    labels[road] = ROAD

    # dashed centre line, 2 px wide
    dash = max(2, h // 8)
    centre = (np.abs(xx + 0.5 - cx) <= 1.0) & road & ((rows[:, None] // dash) % 2 == 0)
    labels[centre] = MARKS
    if rng.uniform() < spec.zebra_probability:
        y0 = int(horizon + rng.uniform(0.45, 0.7) * ground)
        band = (rows[:, None] >= y0) & (rows[:, None] < min(h, y0 + max(2, h // 10)))
        stripes = (xx // 2) % 2 == 0
        labels[band & stripes & road] = MARKS

    labels[:horizon] = SKY
    return labels


def _illumination(spec: SceneSpec, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    h, w = labels.shape
    illum = np.ones((h, w))
    if spec.template == "two_region":
        return illum
    lo, hi = spec.shadow_gain
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(rng.integers(spec.shadow_count[0], spec.shadow_count[1] + 1)):
        gain = rng.uniform(lo, min(hi, lo + 0.35))
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        r = spec.shadow_softness * w * rng.uniform(0.6, 1.4)
        # flat-topped blob with a soft edge
        d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2) / r
        weight = 1.0 / (1.0 + np.exp((d - 1.0) / 0.15))
        illum = np.minimum(illum, 1.0 - (1.0 - gain) * weight)
    illum[labels == SKY] = 1.0
    return np.clip(illum, lo, 1.0)


def synth_scene(spec: SceneSpec, seed: int) -> HsiScene:
    """Scene drawn deterministically from ``(spec, seed)``."""
    validate_spec(spec)
    rng = np.random.default_rng(seed)
    labels = _layout(spec, rng)
    illum = _illumination(spec, labels, rng)
    h, w = labels.shape
    cube = np.empty((h, w, spec.bands))
    noise = rng.standard_normal((h, w, spec.bands))
    for c, sig in spec.signatures.items():
        mask = labels == c
        cube[mask] = sig + spec.jitter_scale(c) * noise[mask]
    cube = np.maximum(cube, 0.0) * illum[:, :, None]
    meta = {"seed": int(seed), "template": spec.template, "bands": spec.bands}
    return HsiScene(cube, labels, illum, meta)


def scene_split(spec: SceneSpec, count: int, first_seed: int) -> list[HsiScene]:
    return [synth_scene(spec, first_seed + i) for i in range(count)]


def permute_labels(scene: HsiScene, seed: int) -> HsiScene:
    """Shuffle the pixel labels of a scene (data-randomization control)."""
    rng = np.random.default_rng(seed)
    flat = scene.labels.reshape(-1)
    labels = flat[rng.permutation(flat.size)].reshape(scene.labels.shape)
    return HsiScene(scene.cube, labels, scene.illumination, dict(scene.metadata, permuted_seed=seed))


def spec_to_text(spec: SceneSpec) -> str:
    doc = asdict(spec)
    doc["signatures"] = {CLASS_NAMES[c]: [float(v) for v in s] for c, s in spec.signatures.items()}
    for key, value in doc.items():
        if isinstance(value, tuple):
            doc[key] = list(value)
    return yaml.safe_dump(doc, sort_keys=False)


def spec_from_text(text: str) -> SceneSpec:
    doc = yaml.safe_load(text) or {}
    if not isinstance(doc, dict):
        raise ValueError("scene spec must be a mapping")
    known = set(SceneSpec.__dataclass_fields__)
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"unknown scene spec keys: {sorted(unknown)}")
    if "signatures" in doc:
        doc["signatures"] = {CLASS_NAMES.index(k) if isinstance(k, str) else int(k): v
                             for k, v in doc["signatures"].items()}
    for key, value in doc.items():
        if isinstance(value, list) and key != "signatures":
            doc[key] = tuple(value)
    return SceneSpec(**doc)


# ---------------------------------------------------------------------------
# classifiers used to check the metameric construction


def nearest_signature(pixels: np.ndarray, signatures: dict[int, np.ndarray], classes) -> np.ndarray:
    classes = list(classes)
    means = np.stack([signatures[c] for c in classes])
    d = ((pixels[:, None, :] - means[None]) ** 2).sum(axis=2)
    return np.asarray(classes)[d.argmin(axis=1)]


def gaussian_bayes_fit(values: np.ndarray, labels: np.ndarray, classes) -> dict:
    return {c: (values[labels == c].mean(), values[labels == c].std(), np.mean(labels == c)) for c in classes}


def gaussian_bayes_predict(model: dict, values: np.ndarray) -> np.ndarray:
    classes = list(model)
    scores = []
    for c in classes:
        mu, sd, prior = model[c]
        scores.append(-0.5 * ((values - mu) / sd) ** 2 - np.log(sd) + np.log(prior))
    return np.asarray(classes)[np.argmax(np.stack(scores), axis=0)]


# ---------------------------------------------------------------------------
# metrics


def iou(pred: np.ndarray, truth: np.ndarray, c: int) -> float | None:
    """Intersection over union for class ``c``; None when the class is absent from both."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"extent mismatch: {pred.shape} vs {truth.shape}")
    p, t = pred == c, truth == c
    union = np.count_nonzero(p | t)
    if union == 0:
        return None
    return np.count_nonzero(p & t) / union


def mean_iou(pred: np.ndarray, truth: np.ndarray, classes=range(len(CLASS_NAMES))) -> float | None:
    values = [v for v in (iou(pred, truth, c) for c in classes) if v is not None]
    return float(np.mean(values)) if values else None


def dataset_iou(preds, truths, classes=range(len(CLASS_NAMES))) -> dict[int, float | None]:
    """Per-class IoU pooled over a list of scenes."""
    pred = np.concatenate([np.asarray(p).reshape(-1) for p in preds])
    truth = np.concatenate([np.asarray(t).reshape(-1) for t in truths])
    return {c: iou(pred, truth, c) for c in classes}


# ---------------------------------------------------------------------------
# cube files

CUBE_MAGIC = b"HSIC"
CUBE_VERSION = 1
HAS_LABELS, HAS_ILLUMINATION = 0x01, 0x02


class CubeFileError(ValueError):
    pass


class CubeMagicError(CubeFileError):
    pass


class CubeVersionError(CubeFileError):
    pass


class CubeTruncatedError(CubeFileError):
    pass


def cube_bytes(scene: HsiScene) -> bytes:
    h, w, b = scene.cube.shape
    flags = (HAS_LABELS if scene.labels is not None else 0) | (HAS_ILLUMINATION if scene.illumination is not None else 0)
    parts = [CUBE_MAGIC, struct.pack("<HIIIB", CUBE_VERSION, h, w, b, flags), scene.cube.astype("<f4").tobytes()]
    if scene.labels is not None:
        parts.append(scene.labels.astype(np.uint8).tobytes())
    if scene.illumination is not None:
        parts.append(scene.illumination.astype("<f4").tobytes())
    return b"".join(parts)


def cube_from_bytes(data: bytes) -> HsiScene:
    header = struct.calcsize("<HIIIB")
    if len(data) < 4:
        raise CubeTruncatedError("cube stream shorter than its magic")
    if data[:4] != CUBE_MAGIC:
        raise CubeMagicError("not an HSIC cube stream")
    if len(data) < 4 + header:
        raise CubeTruncatedError("cube stream truncated inside the header")
    version, h, w, b, flags = struct.unpack_from("<HIIIB", data, 4)
    if version != CUBE_VERSION:
        raise CubeVersionError(f"cube stream version {version}, expected {CUBE_VERSION}")
    need = 4 * h * w * b + (h * w if flags & HAS_LABELS else 0) + (4 * h * w if flags & HAS_ILLUMINATION else 0)
    pos = 4 + header
    if len(data) < pos + need:
        raise CubeTruncatedError(f"cube stream truncated: {len(data)} bytes, expected {pos + need}")
    if len(data) > pos + need:
        raise CubeFileError(f"{len(data) - pos - need} trailing bytes after the cube payload")
    cube = np.frombuffer(data, "<f4", h * w * b, pos).astype(np.float64).reshape(h, w, b)
    pos += 4 * h * w * b
    labels = illum = None
    if flags & HAS_LABELS:
        labels = np.frombuffer(data, np.uint8, h * w, pos).reshape(h, w).copy()
        pos += h * w
    if flags & HAS_ILLUMINATION:
        illum = np.frombuffer(data, "<f4", h * w, pos).astype(np.float64).reshape(h, w)
    return HsiScene(cube, labels, illum, {"bands": b})


def save_cube(scene: HsiScene, stream: BinaryIO) -> None:
    stream.write(cube_bytes(scene))


def load_cube(stream: BinaryIO) -> HsiScene:
    return cube_from_bytes(stream.read())
