"""Diverging red-white-blue heatmaps written as binary PPM (P6) or PNG."""

from __future__ import annotations

import io

import numpy as np

LEGEND_HEIGHT = 6


def diverging_rgb(values: np.ndarray, scale: float | None = None) -> np.ndarray:
    """Map values to uint8 RGB: 0 -> white, +scale -> red, -scale -> blue.

    ``scale`` defaults to max |value|; an all-zero map renders white.
    """
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise FloatingPointError("attribution contains NaN or Inf")
    scale = float(np.max(np.abs(values))) if scale is None else float(scale)
    t = values / scale if scale > 0 else np.zeros_like(values)
    t = np.clip(t, -1.0, 1.0)
    pos, neg = np.clip(t, 0, 1), np.clip(-t, 0, 1)
    r = 1.0 - neg
    g = 1.0 - pos - neg
    b = 1.0 - pos
    rgb = np.stack([r, g, b], axis=-1)
    return np.rint(rgb * 255.0).astype(np.uint8)


def legend_strip(width: int, vmin: float, vmax: float, scale: float) -> np.ndarray:
    """Gradient strip from -scale to +scale with black ticks at vmin, 0 and vmax."""
    ramp = np.linspace(-scale, scale, width) if scale > 0 else np.zeros(width)
    strip = np.repeat(diverging_rgb(ramp, scale)[None], LEGEND_HEIGHT, axis=0)
    if scale > 0:
        for v in (vmin, 0.0, vmax):
            col = int(round((v + scale) / (2 * scale) * (width - 1)))
            strip[LEGEND_HEIGHT // 2:, col] = 0
    return strip


def heatmap(values: np.ndarray, legend: bool = False) -> tuple[np.ndarray, dict]:
    values = np.asarray(values, dtype=np.float64)
    rgb = diverging_rgb(values)
    scale = float(np.max(np.abs(values)))
    info = {"min": float(values.min()), "max": float(values.max()), "scale": scale}
    if legend:
        rgb = np.concatenate([rgb, legend_strip(rgb.shape[1], info["min"], info["max"], scale)], axis=0)
    return rgb, info


def ppm_bytes(rgb: np.ndarray, comment: str | None = None) -> bytes:
    h, w, _ = rgb.shape
    header = "P6\n"
    if comment:
        header += "".join(f"# {line}\n" for line in comment.splitlines())
    header += f"{w} {h}\n255\n"
    return header.encode("ascii") + np.ascontiguousarray(rgb, dtype=np.uint8).tobytes()


def png_bytes(rgb: np.ndarray) -> bytes:
    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(rgb, dtype=np.uint8), "RGB").save(buf, format="PNG")
    return buf.getvalue()


def render_heatmap(values: np.ndarray, fmt: str = "ppm", legend: bool = False) -> bytes:
    """Encoded raster of an attribution map; the PPM header carries min/0/max notes."""
    rgb, info = heatmap(values, legend)
    if fmt == "ppm":
        note = f"min {info['min']!r} zero 0.0 max {info['max']!r}" if legend else None
        return ppm_bytes(rgb, note)
    if fmt == "png":
        return png_bytes(rgb)
    raise ValueError(f"unknown raster format {fmt!r}")
