"""Dense [H, W, C] tensors with a recorded trace for reverse-mode gradients.

Every primitive takes an optional ``trace``; when given, the call is appended
to it together with the forward context needed by :func:`backward` (padding
geometry, max-pool winners).  Tensors are read-only once built.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

_ids = itertools.count()


class Tensor:
    """Immutable float64 array with an identity used by :class:`Trace`."""

    __slots__ = ("data", "id")

    def __init__(self, data, *, copy: bool = True):
        arr = np.array(data, dtype=np.float64, copy=copy) if copy else np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if any(n < 1 for n in arr.shape):
            raise ValueError(f"tensor extents must all be >= 1, got {arr.shape}")
        if not copy and arr.flags.writeable:
            arr = arr.view()
        arr.flags.writeable = False
        self.data = arr
        self.id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(id={self.id}, shape={self.shape})"


def _wrap(arr: np.ndarray) -> Tensor:
    return Tensor(arr, copy=False)


@dataclass
class Op:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    ctx: dict = field(default_factory=dict)


class Trace:
    """Ordered record of executed primitives."""

    def __init__(self) -> None:
        self.ops: list[Op] = []
        self.producer: dict[int, Op] = {}
        self.labels: dict[str, Tensor] = {}

    def record(self, kind: str, inputs: tuple[Tensor, ...], output: Tensor, **ctx) -> None:
        op = Op(kind, inputs, output, ctx)
        self.ops.append(op)
        self.producer[output.id] = op

    def __contains__(self, t: Tensor) -> bool:
        return t.id in self.producer

    def __len__(self) -> int:
        return len(self.ops)

    def replay(self) -> dict[int, np.ndarray]:
        """Re-run every op forward from the recorded leaves; returns outputs by tensor id."""
        values: dict[int, np.ndarray] = {}

        def value(t: Tensor) -> np.ndarray:
            return values.get(t.id, t.data)

        for op in self.ops:
            args = [value(t) for t in op.inputs]
            values[op.output.id] = _FORWARD[op.kind](args, op.ctx)
        return values


# ---------------------------------------------------------------------------
# forward kernels (pure numpy)


def _same_pads(n: int, k: int, stride: int) -> tuple[int, int]:
    out = -(-n // stride)
    total = max((out - 1) * stride + k - n, 0)
    return total // 2, total - total // 2


def _conv_geometry(x: np.ndarray, k: np.ndarray, stride: int, padding: str):
    kh, kw = k.shape[:2]
    if padding == "same":
        pt, pb = _same_pads(x.shape[0], kh, stride)
        pl, pr = _same_pads(x.shape[1], kw, stride)
    elif padding == "valid":
        pt = pb = pl = pr = 0
    else:
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    return pt, pb, pl, pr


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # (H', W', Kh, Kw, Cin)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(0, 1))
    win = win[::stride, ::stride]
    return win.transpose(0, 1, 3, 4, 2)


def _conv_fwd(x: np.ndarray, k: np.ndarray, b: np.ndarray, stride: int, padding: str) -> np.ndarray:
    pt, pb, pl, pr = _conv_geometry(x, k, stride, padding)
    xp = np.pad(x, ((pt, pb), (pl, pr), (0, 0)))
    kh, kw, cin, cout = k.shape
    if xp.shape[0] < kh or xp.shape[1] < kw:
        raise ValueError(f"input {x.shape} smaller than kernel {k.shape} under {padding!r} padding")
    cols = _windows(xp, kh, kw, stride)
    ho, wo = cols.shape[:2]
    out = cols.reshape(ho * wo, kh * kw * cin) @ k.reshape(kh * kw * cin, cout)
    return out.reshape(ho, wo, cout) + b


def _conv_bwd_input(g: np.ndarray, x_shape, k: np.ndarray, stride: int, padding: str) -> np.ndarray:
    kh, kw, cin, cout = k.shape
    pt, pb, pl, pr = _conv_geometry(np.empty(x_shape[:2] + (0,)), k, stride, padding)
    ho, wo = g.shape[:2]
    dcols = (g.reshape(ho * wo, cout) @ k.reshape(kh * kw * cin, cout).T).reshape(ho, wo, kh, kw, cin)
    dxp = np.zeros((x_shape[0] + pt + pb, x_shape[1] + pl + pr, cin))
    for i in range(kh):
        for j in range(kw):
            dxp[i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += dcols[:, :, i, j]
    return dxp[pt:pt + x_shape[0], pl:pl + x_shape[1]]


def _conv_bwd_kernel(g: np.ndarray, x: np.ndarray, k_shape, stride: int, padding: str) -> np.ndarray:
    kh, kw, cin, cout = k_shape
    pt, pb, pl, pr = _conv_geometry(x, np.empty(k_shape), stride, padding)
    cols = _windows(np.pad(x, ((pt, pb), (pl, pr), (0, 0))), kh, kw, stride)
    ho, wo = cols.shape[:2]
    return (cols.reshape(ho * wo, -1).T @ g.reshape(ho * wo, cout)).reshape(k_shape)


def _pool_fwd(x: np.ndarray, window: int):
    h, w, c = x.shape
    blocks = x.reshape(h // window, window, w // window, window, c).transpose(0, 2, 4, 1, 3)
    blocks = blocks.reshape(h // window, w // window, c, window * window)
    # np.argmax returns the first maximum: row-major tie-break inside the window
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _pool_scatter(g: np.ndarray, idx: np.ndarray, window: int) -> np.ndarray:
    ho, wo, c = g.shape
    flat = np.zeros((ho, wo, c, window * window))
    np.put_along_axis(flat, idx[..., None], g[..., None], axis=-1)
    flat = flat.reshape(ho, wo, c, window, window).transpose(0, 3, 1, 4, 2)
    return flat.reshape(ho * window, wo * window, c)


def _upsample_fwd(x: np.ndarray, factor: int) -> np.ndarray:
    return np.repeat(np.repeat(x, factor, axis=0), factor, axis=1)


def _upsample_bwd(g: np.ndarray, factor: int) -> np.ndarray:
    h, w, c = g.shape
    return g.reshape(h // factor, factor, w // factor, factor, c).sum(axis=(1, 3))


_FORWARD: dict[str, Callable] = {
    "conv2d": lambda a, ctx: _conv_fwd(a[0], a[1], a[2], ctx["stride"], ctx["padding"]),
    "relu": lambda a, ctx: np.maximum(a[0], 0.0),
    "maxpool2d": lambda a, ctx: _pool_fwd(a[0], ctx["window"])[0],
    "upsample_nearest": lambda a, ctx: _upsample_fwd(a[0], ctx["factor"]),
    "concat_channels": lambda a, ctx: np.concatenate(a, axis=2),
}


# ---------------------------------------------------------------------------
# primitives


def _check_hwc(t: Tensor, what: str) -> None:
    if len(t.shape) != 3:
        raise ValueError(f"{what} must be [H, W, C], got shape {t.shape}")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: str = "same",
           trace: Trace | None = None) -> Tensor:
    """Cross-correlation of an [H, W, Cin] input with a [Kh, Kw, Cin, Cout] kernel plus bias."""
    _check_hwc(x, "conv2d input")
    if len(kernel.shape) != 4 or kernel.shape[2] != x.shape[2]:
        raise ValueError(f"conv2d shape mismatch: input {x.shape} vs kernel {kernel.shape}")
    if bias.shape != (kernel.shape[3],):
        raise ValueError(f"conv2d shape mismatch: bias {bias.shape} vs kernel {kernel.shape}")
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    out = _wrap(_conv_fwd(x.data, kernel.data, bias.data, stride, padding))
    if trace is not None:
        trace.record("conv2d", (x, kernel, bias), out, stride=stride, padding=padding)
    return out


def relu(x: Tensor, trace: Trace | None = None) -> Tensor:
    out = _wrap(np.maximum(x.data, 0.0))
    if trace is not None:
        trace.record("relu", (x,), out)
    return out


def maxpool2d(x: Tensor, window: int = 2, trace: Trace | None = None) -> tuple[Tensor, np.ndarray]:
    """Non-overlapping max-pool.

    Returns the pooled tensor and the winner coordinates, an int array of shape
    [H/window, W/window, C, 2] holding the (row, col) of each winner in ``x``.
    """
    _check_hwc(x, "maxpool2d input")
    h, w, _ = x.shape
    if h % window or w % window:
        raise ValueError(f"maxpool2d needs extents divisible by {window}, got {x.shape}")
    pooled, idx = _pool_fwd(x.data, window)
    out = _wrap(pooled)
    if trace is not None:
        trace.record("maxpool2d", (x,), out, window=window, winners=idx)
    return out, winner_coordinates(idx, window)


def winner_coordinates(idx: np.ndarray, window: int) -> np.ndarray:
    ho, wo, c = idx.shape
    rows = np.arange(ho)[:, None, None] * window + idx // window
    cols = np.arange(wo)[None, :, None] * window + idx % window
    return np.stack([rows, cols], axis=-1)


def upsample_nearest(x: Tensor, factor: int = 2, trace: Trace | None = None) -> Tensor:
    _check_hwc(x, "upsample input")
    out = _wrap(_upsample_fwd(x.data, factor))
    if trace is not None:
        trace.record("upsample_nearest", (x,), out, factor=factor)
    return out


def concat_channels(a: Tensor, b: Tensor, trace: Trace | None = None) -> Tensor:
    _check_hwc(a, "concat input a")
    _check_hwc(b, "concat input b")
    if a.shape[:2] != b.shape[:2]:
        raise ValueError(f"concat spatial mismatch: {a.shape} vs {b.shape}")
    out = _wrap(np.concatenate([a.data, b.data], axis=2))
    if trace is not None:
        trace.record("concat_channels", (a, b), out, split=a.shape[2])
    return out


# ---------------------------------------------------------------------------
# reverse mode


def _dependents(trace: Trace, wrt: Iterable[Tensor]) -> set[int]:
    live = {t.id for t in wrt}
    for op in trace.ops:
        if any(t.id in live for t in op.inputs):
            live.add(op.output.id)
    return live


def _input_grads(op: Op, g: np.ndarray, need: list[bool]) -> list[np.ndarray | None]:
    kind, ctx = op.kind, op.ctx
    if kind == "conv2d":
        x, k, _ = op.inputs
        return [
            _conv_bwd_input(g, x.shape, k.data, ctx["stride"], ctx["padding"]) if need[0] else None,
            _conv_bwd_kernel(g, x.data, k.shape, ctx["stride"], ctx["padding"]) if need[1] else None,
            g.sum(axis=(0, 1)) if need[2] else None,
        ]
    if kind == "relu":
        return [g * (op.inputs[0].data > 0)]
    if kind == "maxpool2d":
        return [_pool_scatter(g, ctx["winners"], ctx["window"])]
    if kind == "upsample_nearest":
        return [_upsample_bwd(g, ctx["factor"])]
    if kind == "concat_channels":
        s = ctx["split"]
        return [g[:, :, :s], g[:, :, s:]]
    raise ValueError(f"no backward rule for {kind!r}")


def backward(trace: Trace, output: Tensor, seed: np.ndarray,
             wrt: Iterable[Tensor] | None = None) -> dict[int, np.ndarray]:
    """Gradients of ``sum(seed * output)`` with respect to traced tensors.

    ``seed`` has the shape of ``output`` and encodes the scalar selector as a
    linear combination of its entries.  With ``wrt`` given, only the ops on a
    path from those tensors to ``output`` are differentiated.
    """
    if output.id not in trace.producer:
        raise ValueError(f"selector references {output!r}, which is not produced by this trace")
    seed = np.asarray(seed, dtype=np.float64)
    if seed.shape != output.shape:
        raise ValueError(f"seed shape {seed.shape} does not match output {output.shape}")
    live = None if wrt is None else _dependents(trace, wrt)
    grads: dict[int, np.ndarray] = {output.id: seed}
    stop = trace.ops.index(trace.producer[output.id])
    for op in reversed(trace.ops[:stop + 1]):
        g = grads.get(op.output.id)
        if g is None:
            continue
        need = [live is None or t.id in live for t in op.inputs]
        if not any(need):
            continue
        for t, gi, n in zip(op.inputs, _input_grads(op, g, need), need):
            if not n or gi is None:
                continue
            if t.id in grads:
                grads[t.id] = grads[t.id] + gi
            else:
                grads[t.id] = gi
    return grads


def finite_diff_grad(f: Callable[[np.ndarray], float], x, eps: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar functional, one entry at a time."""
    x = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.empty_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f(x.copy())
        flat[i] = orig - eps
        down = f(x.copy())
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return grad
