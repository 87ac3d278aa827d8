"""Conservativeness audits, sanity randomization checks, and head-layer analytics."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from camaudit.model import ModelGraph, forward, layer_table, randomize_parameters
from camaudit.saliency import METHODS, Attribution, RoI, attribute
from camaudit.tensor import Tensor, backward

DEFAULT_TOLERANCE = 1e-4
REL_FLOOR = 1e-8
CONSISTENCY_TOLERANCE = 1e-9
ROI_POLICIES = ("predicted", "single-pixel", "full-image")


@dataclass
class AuditReport:
    method: str
    tap: str
    class_index: int
    scene: str = ""
    tolerance: float = DEFAULT_TOLERANCE
    status: str = "ok"  # ok | empty RoI
    pixels: list = field(default_factory=list)
    logits: np.ndarray | None = None  # y_rs per RoI pixel
    deviation: np.ndarray | None = None  # sum_ij L_ijrs - y_rs
    relative: np.ndarray | None = None
    logit_mass: float = 0.0
    attribution_mass: float = 0.0
    class_deviation: float = 0.0

    @property
    def roi_size(self) -> int:
        return len(self.pixels)

    @property
    def has_pixels(self) -> bool:
        return self.deviation is not None

    @property
    def class_relative(self) -> float:
        return abs(self.class_deviation) / max(abs(self.logit_mass), REL_FLOOR)

    @property
    def pixel_verdicts(self) -> np.ndarray:
        return np.abs(self.relative) <= self.tolerance

    @property
    def max_abs(self) -> float:
        return float(np.max(np.abs(self.deviation)))

    @property
    def mean_abs(self) -> float:
        return float(np.mean(np.abs(self.deviation)))

    @property
    def max_rel(self) -> float:
        return float(np.max(np.abs(self.relative)))

    @property
    def fraction_within(self) -> float:
        return float(np.mean(self.pixel_verdicts))

    @property
    def consistency_gap(self) -> float:
        """|class deviation - sum of pixel deviations|."""
        return abs(self.class_deviation - math.fsum(self.deviation.tolist()))

    @property
    def class_verdict(self) -> str:
        if self.status != "ok":
            return self.status
        return "conservative" if self.class_relative <= self.tolerance else "non-conservative"

    @property
    def verdict(self) -> str:
        if self.status != "ok":
            return self.status
        if not self.has_pixels:
            return self.class_verdict
        return "conservative" if self.max_rel <= self.tolerance else "non-conservative"


def _array(t) -> np.ndarray:
    return t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)


def _roi_logits(logits: np.ndarray, roi: RoI) -> np.ndarray:
    rows, cols = np.array(roi.pixels).T
    return logits[rows, cols, roi.class_index]


def _exact_difference(values: np.ndarray, y) -> float:
    """Correctly rounded sum(values) - sum(y), so huge masses do not drown the deviation."""
    return math.fsum(np.concatenate([np.ravel(values), -np.ravel(y)]).tolist())


def audit_pixel(attribution: Attribution, logits, tolerance: float = DEFAULT_TOLERANCE,
                scene: str = "") -> AuditReport:
    """Per-pixel check that each pixel map sums to its logit, plus the class-level check."""
    if attribution.pixel_maps is None:
        raise ValueError("audit_pixel needs an attribution with per-pixel maps")
    logits = _array(logits)
    roi = attribution.roi
    roi.check(logits.shape)
    y = _roi_logits(logits, roi)
    maps = attribution.pixel_maps
    deviation = np.array([_exact_difference(m, v) for m, v in zip(maps, y)])
    relative = deviation / np.maximum(np.abs(y), REL_FLOOR)
    logit_mass = math.fsum(y.tolist())
    attr_mass = math.fsum(maps.ravel().tolist())
    report = AuditReport(attribution.method, attribution.tap, roi.class_index, scene, tolerance, "ok",
                         list(roi.pixels), y, deviation, relative, logit_mass, attr_mass,
                         _exact_difference(maps, y))
    if report.consistency_gap > CONSISTENCY_TOLERANCE * max(1.0, abs(logit_mass)):
        raise ArithmeticError(f"class deviation {report.class_deviation} disagrees with the summed pixel "
                              f"deviations by {report.consistency_gap}")
    return report


def audit_class(attribution: Attribution, logits, roi: RoI | None = None,
                tolerance: float = DEFAULT_TOLERANCE, scene: str = "") -> AuditReport:
    """Class-level check: attribution mass against the RoI logit mass.

    Uses the pixel audit (and its consistency check) when pixel maps exist.
    """
    if attribution.pixel_maps is not None and roi in (None, attribution.roi):
        return audit_pixel(attribution, logits, tolerance, scene)
    logits = _array(logits)
    roi = attribution.roi if roi is None else roi
    roi.check(logits.shape)
    y = _roi_logits(logits, roi)
    cmap = attribution.class_map
    return AuditReport(attribution.method, attribution.tap, roi.class_index, scene, tolerance, "ok",
                       list(roi.pixels), logit_mass=math.fsum(y.tolist()),
                       attribution_mass=math.fsum(cmap.ravel().tolist()),
                       class_deviation=_exact_difference(cmap, y))


def _policy_roi(policy: str, logits: np.ndarray, c: int) -> RoI | None:
    h, w, _ = logits.shape
    if policy == "predicted":
        mask = logits.argmax(axis=2) == c
        return RoI.from_mask(c, mask) if mask.any() else None
    if policy == "single-pixel":
        r, s = np.unravel_index(np.argmax(logits[:, :, c]), (h, w))
        return RoI.single(c, r, s)
    if policy == "full-image":
        return RoI.full(c, h, w)
    raise ValueError(f"unknown RoI policy {policy!r}; expected one of {ROI_POLICIES}")


def _method_spec(method) -> tuple[str, dict]:
    if isinstance(method, str):
        name, kwargs = method, {}
    else:
        name, kwargs = method[0], dict(method[1])
    if name not in METHODS:
        raise ValueError(f"unknown method descriptor {name!r}; expected one of {METHODS}")
    return name, kwargs


def audit_method(model: ModelGraph, scenes, method, tap: str, roi_policy: str = "predicted",
                 classes=None, tolerance: float = DEFAULT_TOLERANCE, jobs: int = 1,
                 scene_names=None) -> list[AuditReport]:
    """One report per (scene, class), in that order.

    ``scenes`` are model-ready inputs (arrays or scenes with a ``cube``).
    ``method`` is a tag from :data:`METHODS` or ``(tag, kwargs)``.
    """
    name, kwargs = _method_spec(method)
    if roi_policy not in ROI_POLICIES:
        raise ValueError(f"unknown RoI policy {roi_policy!r}; expected one of {ROI_POLICIES}")
    if tap not in model.taps:
        raise ValueError(f"unknown tap {tap!r}; expected one of {sorted(model.taps)}")
    inputs = [getattr(s, "cube", s) for s in scenes]
    if not inputs:
        raise ValueError("no scenes to audit")
    names = list(scene_names) if scene_names is not None else [str(i) for i in range(len(inputs))]
    classes = list(range(model.classes)) if classes is None else list(classes)

    def run(job):
        i, c = job
        logits = forward(model, inputs[i])[0].data
        roi = _policy_roi(roi_policy, logits, c)
        if roi is None:
            return AuditReport(name, tap, c, names[i], tolerance, status="empty RoI")
        attribution = attribute(name, model, inputs[i], tap, roi, per_pixel=True, **kwargs)
        return audit_pixel(attribution, logits, tolerance, names[i])

    work = [(i, c) for i in range(len(inputs)) for c in classes]
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(run, work))
    return [run(job) for job in work]


# ---------------------------------------------------------------------------
# sanity checks


@dataclass
class SanityScore:
    rank_correlation: float | None
    l1_distance: float
    note: str = ""

    @property
    def degenerate(self) -> bool:
        return self.rank_correlation is None


def similarity(a: np.ndarray, b: np.ndarray) -> SanityScore:
    """Spearman rank correlation and max-normalized mean L1 distance between two maps."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"maps differ in size: {a.size} vs {b.size}")

    def scaled(v):
        m = np.max(np.abs(v))
        return v / m if m > 0 else v

    l1 = float(np.mean(np.abs(scaled(a) - scaled(b))))
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        return SanityScore(None, l1, "degenerate: constant map")
    if np.array_equal(a, b):
        return SanityScore(1.0, 0.0)
    rho = float(stats.spearmanr(a, b).statistic)
    return SanityScore(float(np.clip(rho, -1.0, 1.0)), l1)


def _sanity_spec(method) -> tuple[str, dict]:
    # compare pre-ReLU maps unless asked otherwise: a map clipped to all zeros has no ranks
    name, kwargs = _method_spec(method)
    kwargs.setdefault("relu_clipped", False)
    return name, kwargs


def sanity_param_randomization(model: ModelGraph, method, x, tap: str, roi: RoI, seed: int) -> SanityScore:
    """Similarity between attributions of the trained model and a re-initialized copy.

    Maps are compared before any ReLU clipping unless ``method`` carries
    ``relu_clipped`` explicitly.
    """
    name, kwargs = _sanity_spec(method)
    trained = attribute(name, model, x, tap, roi, **kwargs)
    randomized = attribute(name, randomize_parameters(model, seed), x, tap, roi, **kwargs)
    return similarity(trained.class_map, randomized.class_map)


def sanity_data_randomization(model_true: ModelGraph, model_permuted: ModelGraph, method, x, tap: str,
                              roi: RoI) -> SanityScore:
    """Similarity between a model trained on true labels and one trained on permuted labels."""
    if layer_table(model_true) != layer_table(model_permuted):
        raise ValueError("models have different topologies")
    name, kwargs = _sanity_spec(method)
    a = attribute(name, model_true, x, tap, roi, **kwargs)
    b = attribute(name, model_permuted, x, tap, roi, **kwargs)
    return similarity(a.class_map, b.class_map)


# ---------------------------------------------------------------------------
# brute-force oracle

ORACLE_MAX_EXTENT = 32


def oracle_attribution(model: ModelGraph, x, tap: str, roi: RoI, mode: str = "autodiff",
                       eps: float = 1e-4) -> Attribution:
    """L_ijrs = sum_k A_ijk * dy_rs/dA_ijk, one scalar target at a time.

    ``mode="autodiff"`` runs a fresh forward and backward pass per RoI pixel;
    ``mode="finite-diff"`` perturbs each tap entry through a forward override
    and reads every RoI logit from the same pair of passes.
    """
    logits, taps, _ = forward(model, x, taps=(tap,))
    A = taps[tap].data
    if A.shape[0] > ORACLE_MAX_EXTENT or A.shape[1] > ORACLE_MAX_EXTENT:
        raise ValueError(f"oracle limited to {ORACLE_MAX_EXTENT}x{ORACLE_MAX_EXTENT} taps, got {A.shape[:2]}")
    roi.check(logits.shape)
    c = roi.class_index
    maps = np.empty((len(roi),) + A.shape[:2])
    if mode == "autodiff":
        for m, (r, s) in enumerate(roi.pixels):
            out, t, trace = forward(model, x, taps=(tap,))
            seed = np.zeros(out.shape)
            seed[r, s, c] = 1.0
            g = backward(trace, out, seed, wrt=[t[tap]])[t[tap].id]
            maps[m] = (A * g).sum(axis=2)
    elif mode == "finite-diff":
        rows, cols = np.array(roi.pixels).T
        grad = np.empty((len(roi),) + A.shape)
        for idx in np.ndindex(*A.shape):
            hi, lo = A.copy(), A.copy()
            hi[idx] += eps
            lo[idx] -= eps
            up = forward(model, x, override={tap: hi})[0].data[rows, cols, c]
            down = forward(model, x, override={tap: lo})[0].data[rows, cols, c]
            grad[(slice(None),) + idx] = (up - down) / (2 * eps)
        maps = (A[None] * grad).sum(axis=3)
    else:
        raise ValueError(f"unknown oracle mode {mode!r}")
    return Attribution(maps.sum(axis=0), f"oracle-{mode}", tap, roi, False, maps)


# ---------------------------------------------------------------------------
# head-layer analytics


@dataclass
class ChannelProfile:
    weights: np.ndarray  # [channels, classes]
    biases: np.ndarray  # [classes]
    ranking: np.ndarray  # [classes, channels], descending signed weight
    label: str = ""

    @property
    def classes(self) -> int:
        return self.weights.shape[1]


def extract_channel_profile(model: ModelGraph, label: str = "") -> ChannelProfile:
    head = model.layer(model.taps["head_1x1"])
    if head.kind != "conv" or head.weight.shape[:2] != (1, 1):
        raise ValueError(f"expected a 1x1 convolution head, got {head.kind} {getattr(head.weight, 'shape', None)}")
    w = head.weight[0, 0]
    # stable sort on the negated weight: ties keep ascending channel order
    ranking = np.stack([np.argsort(-w[:, c], kind="stable") for c in range(w.shape[1])])
    return ChannelProfile(w.copy(), head.bias.copy(), ranking, label)


def channel_ablation_drops(model: ModelGraph, inputs, tap: str = "dec_penultimate") -> np.ndarray:
    """Mean-logit drop [channels, classes] when each tap channel is zeroed, averaged over inputs."""
    drops = None
    for x in inputs:
        x = getattr(x, "cube", x)
        base, taps, _ = forward(model, x, taps=(tap,))
        A = taps[tap].data
        d = np.empty((A.shape[2], model.classes))
        for k in range(A.shape[2]):
            ablated = A.copy()
            ablated[:, :, k] = 0.0
            out = forward(model, x, override={tap: ablated})[0].data
            d[k] = (base.data - out).mean(axis=(0, 1))
        drops = d if drops is None else drops + d
    return drops / len(inputs)


@dataclass
class ChannelMatch:
    channel: int
    match: int | None
    correlation: float | None


def channel_correlation_match(profile_a: ChannelProfile, profile_b: ChannelProfile,
                              mode: str = "cross-model") -> list[ChannelMatch]:
    """Best Pearson-correlated channel in ``profile_b`` for each channel of ``profile_a``.

    Correlation is over the per-class weight vectors.  ``intra-model`` mode
    skips matching a channel with itself.
    """
    if mode not in ("cross-model", "intra-model"):
        raise ValueError(f"unknown mode {mode!r}")
    if profile_a.classes != profile_b.classes:
        raise ValueError(f"class counts differ: {profile_a.classes} vs {profile_b.classes}")
    a, b = profile_a.weights, profile_b.weights
    out = []
    for i, va in enumerate(a):
        best, best_r = None, None
        if np.ptp(va) > 0:
            for j, vb in enumerate(b):
                if (mode == "intra-model" and i == j) or np.ptp(vb) == 0:
                    continue
                r = float(np.corrcoef(va, vb)[0, 1])
                if best_r is None or r > best_r:
                    best, best_r = j, r
        out.append(ChannelMatch(i, best, best_r))
    return out
