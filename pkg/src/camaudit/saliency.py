"""CAM-family attributions for segmentation outputs.

Every method returns an :class:`Attribution` holding the class-level map over
the tap's spatial grid.  With ``per_pixel=True`` the method is evaluated once
per RoI pixel (a single-pixel RoI each) and the class map is the sum of those
pixel maps; this is the form the conservativeness audit needs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from camaudit import lrp
from camaudit.model import ModelGraph, forward
from camaudit.tensor import Tensor, backward

METHODS = ("gradcam", "seggradcam", "seggradcam-spatial", "segxrescam", "relevancecam", "scorecam")


@dataclass(frozen=True)
class RoI:
    class_index: int
    pixels: tuple[tuple[int, int], ...]

    def __post_init__(self):
        pixels = tuple((int(r), int(s)) for r, s in self.pixels)
        object.__setattr__(self, "pixels", pixels)
        if not pixels:
            raise ValueError("empty RoI")
        if len(set(pixels)) != len(pixels):
            raise ValueError("RoI contains duplicate pixels")

    @classmethod
    def single(cls, c: int, r: int, s: int) -> RoI:
        return cls(c, ((r, s),))

    @classmethod
    def from_mask(cls, c: int, mask: np.ndarray) -> RoI:
        return cls(c, tuple(zip(*np.nonzero(mask))))

    @classmethod
    def full(cls, c: int, height: int, width: int) -> RoI:
        return cls.from_mask(c, np.ones((height, width), dtype=bool))

    def __len__(self) -> int:
        return len(self.pixels)

    def check(self, logits_shape: tuple[int, ...]) -> None:
        h, w, classes = logits_shape
        if not 0 <= self.class_index < classes:
            raise ValueError(f"class {self.class_index} out of range for {classes} classes")
        for r, s in self.pixels:
            if not (0 <= r < h and 0 <= s < w):
                raise ValueError(f"RoI pixel {(r, s)} outside the {h}x{w} output")

    def seed(self, logits_shape: tuple[int, ...]) -> np.ndarray:
        seed = np.zeros(logits_shape)
        rows, cols = np.array(self.pixels).T
        seed[rows, cols, self.class_index] = 1.0
        return seed

    def mask(self, height: int, width: int) -> np.ndarray:
        m = np.zeros((height, width), dtype=bool)
        rows, cols = np.array(self.pixels).T
        m[rows, cols] = True
        return m


@dataclass
class Attribution:
    class_map: np.ndarray  # [I, J]
    method: str
    tap: str
    roi: RoI
    relu_clipped: bool = False
    pixel_maps: np.ndarray | None = None  # [|M|, I, J], RoI order
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.pixel_maps is not None and self.pixel_maps.shape != (len(self.roi),) + self.class_map.shape:
            raise ValueError(f"pixel maps {self.pixel_maps.shape} do not match RoI size {len(self.roi)} "
                             f"and map {self.class_map.shape}")
        if self.relu_clipped and np.any(self.class_map < 0):
            raise ValueError("clipped attribution has negative entries")


class _Pass:
    """One forward pass with the tap activation retained."""

    def __init__(self, model: ModelGraph, x, tap: str):
        if tap not in model.taps:
            raise ValueError(f"unknown tap {tap!r}; expected one of {sorted(model.taps)}")
        self.model, self.tap = model, tap
        self.logits, taps, self.trace = forward(model, x, taps=(tap,))
        self.input = self.trace.labels["input"]
        self.tap_tensor: Tensor = taps[tap]
        self.A = self.tap_tensor.data

    def grad(self, seed: np.ndarray) -> np.ndarray:
        g = backward(self.trace, self.logits, seed, wrt=[self.tap_tensor])
        return g.get(self.tap_tensor.id, np.zeros_like(self.A))

    def targets(self, roi: RoI, per_pixel: bool):
        roi.check(self.logits.shape)
        if per_pixel:
            return [RoI.single(roi.class_index, r, s) for r, s in roi.pixels]
        return [roi]


def _relu(m: np.ndarray, clip: bool) -> np.ndarray:
    return np.maximum(m, 0.0) if clip else m


def _assemble(maps: list[np.ndarray], method: str, tap: str, roi: RoI, clip: bool, per_pixel: bool,
              **meta) -> Attribution:
    if per_pixel:
        stack = np.stack(maps)
        return Attribution(stack.sum(axis=0), method, tap, roi, clip, stack, meta)
    return Attribution(maps[0], method, tap, roi, clip, None, meta)


def seg_grad_cam(model: ModelGraph, x, tap: str, roi: RoI, relu_clipped: bool = False,
                 per_pixel: bool = False, _method: str = "seggradcam") -> Attribution:
    """Channel weights from the spatially averaged gradient of the RoI logit sum."""
    p = _Pass(model, x, tap)
    maps = []
    for target in p.targets(roi, per_pixel):
        alpha = p.grad(target.seed(p.logits.shape)).mean(axis=(0, 1))
        maps.append(_relu(p.A @ alpha, relu_clipped))
    return _assemble(maps, _method, tap, roi, relu_clipped, per_pixel)


def grad_cam(model: ModelGraph, x, tap: str, c: int, pixel: tuple[int, int] | None = None,
             relu_clipped: bool = False) -> Attribution:
    """GradCAM with a classification-style target.

    The target is the spatial sum of the class-``c`` logits, or the single
    logit at ``pixel``.
    """
    h, w = (x.shape if isinstance(x, Tensor) else np.shape(x))[:2]
    roi = RoI.single(c, *pixel) if pixel is not None else RoI.full(c, h, w)
    return seg_grad_cam(model, x, tap, roi, relu_clipped, _method="gradcam")


def seg_grad_cam_spatial(model: ModelGraph, x, tap: str, roi: RoI, relu_clipped: bool = False,
                         per_pixel: bool = False) -> Attribution:
    """Element-wise product of activations and un-averaged gradients, summed over channels.

    ``per_pixel=True`` runs one backward pass per RoI pixel and keeps the
    pixel maps; otherwise a single backward pass on the RoI logit sum gives
    the class map directly.
    """
    p = _Pass(model, x, tap)
    maps = [_relu((p.A * p.grad(t.seed(p.logits.shape))).sum(axis=2), relu_clipped)
            for t in p.targets(roi, per_pixel)]
    return _assemble(maps, "seggradcam-spatial", tap, roi, relu_clipped, per_pixel)


def _pool_unpool(g: np.ndarray, window: int) -> np.ndarray:
    h, w, c = g.shape
    pooled = g.reshape(h // window, window, w // window, window, c).mean(axis=(1, 3))
    return np.repeat(np.repeat(pooled, window, axis=0), window, axis=1)


def seg_xres_cam(model: ModelGraph, x, tap: str, roi: RoI, pool_window: int = 2, relu_clipped: bool = True,
                 per_pixel: bool = False) -> Attribution:
    """Gradient field average-pooled then nearest-unpooled before the product with activations."""
    if pool_window < 1:
        raise ValueError(f"pool_window must be positive, got {pool_window}")
    p = _Pass(model, x, tap)
    h, w, _ = p.A.shape
    if h % pool_window or w % pool_window:
        raise ValueError(f"tap extents {h}x{w} not divisible by pool_window {pool_window}")
    maps = []
    for target in p.targets(roi, per_pixel):
        g = _pool_unpool(p.grad(target.seed(p.logits.shape)), pool_window)
        maps.append(_relu((p.A * g).sum(axis=2), relu_clipped))
    return _assemble(maps, "segxrescam", tap, roi, relu_clipped, per_pixel, pool_window=pool_window)


def lrp_relevance(model: ModelGraph, x, target: RoI, epsilon: float = 1e-6,
                  until: str | None = None) -> lrp.RelevanceMaps:
    """Epsilon-LRP from the RoI logits back to the input (or to tap ``until``)."""
    logits, _, trace = forward(model, x)
    target.check(logits.shape)
    init = target.seed(logits.shape) * logits.data
    stop = trace.labels[model.taps[until]] if until is not None else None
    rel = lrp.propagate(trace, logits, init, epsilon, stop)
    maps = {name: rel[t.id] for name, t in trace.labels.items() if "." not in name and t.id in rel}
    return lrp.RelevanceMaps(maps, epsilon)


def relevance_cam(model: ModelGraph, x, tap: str, roi: RoI, epsilon: float = 1e-6, relu_clipped: bool = False,
                  per_pixel: bool = False) -> Attribution:
    """Channel weights from the spatial sum of tap-layer relevance."""
    p = _Pass(model, x, tap)
    maps = []
    for target in p.targets(roi, per_pixel):
        init = target.seed(p.logits.shape) * p.logits.data
        rel = lrp.propagate(p.trace, p.logits, init, epsilon, stop=p.tap_tensor)
        r_tap = rel.get(p.tap_tensor.id, np.zeros_like(p.A))
        maps.append(_relu(p.A @ r_tap.sum(axis=(0, 1)), relu_clipped))
    return _assemble(maps, "relevancecam", tap, roi, relu_clipped, per_pixel, epsilon=epsilon)


def score_masks(A: np.ndarray, input_shape: tuple[int, ...]) -> np.ndarray:
    """Per-channel upsampled, min-max normalized masks [K, H, W]; constant channels give zeros."""
    h, w, _ = A.shape
    fy, fx = input_shape[0] // h, input_shape[1] // w
    if fy * h != input_shape[0] or fx * w != input_shape[1]:
        raise ValueError(f"tap extents {h}x{w} do not divide the input {input_shape[:2]}")
    up = np.repeat(np.repeat(A, fy, axis=0), fx, axis=1).transpose(2, 0, 1)
    lo = up.min(axis=(1, 2), keepdims=True)
    span = up.max(axis=(1, 2), keepdims=True) - lo
    return np.where(span > 0, (up - lo) / np.where(span > 0, span, 1.0), 0.0)


def score_cam(model: ModelGraph, x, tap: str, roi: RoI, baseline: np.ndarray | None = None,
              relu_clipped: bool = True, per_pixel: bool = False) -> Attribution:
    """Channel weights from the RoI logit gain of activation-masked inputs over the baseline."""
    p = _Pass(model, x, tap)
    xin = p.input.data
    baseline = np.zeros_like(xin) if baseline is None else np.asarray(baseline, dtype=np.float64)
    if baseline.shape != xin.shape:
        raise ValueError(f"baseline shape {baseline.shape} does not match input {xin.shape}")
    masks = score_masks(p.A, xin.shape)
    base = forward(model, baseline)[0].data
    # logit gain per channel at every output pixel
    gains = np.stack([forward(model, baseline + m[:, :, None] * (xin - baseline))[0].data - base for m in masks])
    maps = []
    for target in p.targets(roi, per_pixel):
        rows, cols = np.array(target.pixels).T
        weights = gains[:, rows, cols, target.class_index].sum(axis=1)
        maps.append(_relu(p.A @ weights, relu_clipped))
    return _assemble(maps, "scorecam", tap, roi, relu_clipped, per_pixel)


def aggregate_roi(attributions: list[Attribution]) -> Attribution:
    """Sum pixel-level attributions (one per RoI pixel, or already stacked) into a class map."""
    if not attributions:
        raise ValueError("nothing to aggregate")
    first = attributions[0]
    for a in attributions[1:]:
        if a.tap != first.tap:
            raise ValueError(f"mixed taps: {first.tap!r} and {a.tap!r}")
        if a.roi.class_index != first.roi.class_index:
            raise ValueError("mixed classes")
        if a.class_map.shape != first.class_map.shape:
            raise ValueError(f"mixed extents: {first.class_map.shape} and {a.class_map.shape}")
    stacks = []
    for a in attributions:
        if a.pixel_maps is not None:
            stacks.append(a.pixel_maps)
        elif len(a.roi) == 1:
            stacks.append(a.class_map[None])
        else:
            raise ValueError("aggregate_roi needs pixel-level maps")
    pixel_maps = np.concatenate(stacks)
    pixels = tuple(p for a in attributions for p in a.roi.pixels)
    roi = RoI(first.roi.class_index, pixels)
    clipped = all(a.relu_clipped for a in attributions)
    return Attribution(pixel_maps.sum(axis=0), first.method, first.tap, roi, clipped, pixel_maps, dict(first.meta))


def attribute(method: str, model: ModelGraph, x, tap: str, roi: RoI, per_pixel: bool = False,
              pool_window: int = 2, epsilon: float = 1e-6, baseline=None,
              relu_clipped: bool | None = None) -> Attribution:
    """Dispatch by method tag; ``relu_clipped=None`` keeps each method's default."""
    kw = {} if relu_clipped is None else {"relu_clipped": relu_clipped}
    if method == "gradcam":
        return seg_grad_cam(model, x, tap, roi, per_pixel=per_pixel, _method="gradcam", **kw)
    if method == "seggradcam":
        return seg_grad_cam(model, x, tap, roi, per_pixel=per_pixel, **kw)
    if method == "seggradcam-spatial":
        return seg_grad_cam_spatial(model, x, tap, roi, per_pixel=per_pixel, **kw)
    if method == "segxrescam":
        return seg_xres_cam(model, x, tap, roi, pool_window, per_pixel=per_pixel, **kw)
    if method == "relevancecam":
        return relevance_cam(model, x, tap, roi, epsilon, per_pixel=per_pixel, **kw)
    if method == "scorecam":
        return score_cam(model, x, tap, roi, baseline, per_pixel=per_pixel, **kw)
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
