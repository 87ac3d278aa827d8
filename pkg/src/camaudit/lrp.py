"""Epsilon-rule layer-wise relevance propagation over a recorded trace."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from camaudit.tensor import Tensor, Trace, _conv_bwd_input, _pool_scatter, _upsample_bwd


def _stabilize(z: np.ndarray, epsilon: float) -> np.ndarray:
    if epsilon == 0 and np.any(z == 0):
        raise ValueError("epsilon = 0 with a zero pre-activation: relevance split undefined")
    return z + epsilon * np.where(z >= 0, 1.0, -1.0)


def propagate(trace: Trace, output: Tensor, relevance: np.ndarray, epsilon: float = 1e-6,
              stop: Tensor | None = None) -> dict[int, np.ndarray]:
    """Relevance per traced tensor id, starting from ``relevance`` at ``output``.

    Convolutions split relevance in proportion to a_i * w_ij over the
    stabilized pre-activation; ReLU passes it through; max-pool sends it to
    the recorded winner; upsampling and concatenation route it like gradients.
    Propagation ends once ``stop`` has received all of its relevance.
    """
    if output.id not in trace.producer:
        raise ValueError(f"{output!r} is not produced by this trace")
    relevance = np.asarray(relevance, dtype=np.float64)
    if relevance.shape != output.shape:
        raise ValueError(f"relevance shape {relevance.shape} does not match output {output.shape}")
    rel = {output.id: relevance}
    last = trace.ops.index(trace.producer[output.id])
    for op in reversed(trace.ops[:last + 1]):
        if stop is not None and op.output.id == stop.id:
            break
        r = rel.get(op.output.id)
        if r is None:
            continue
        if op.kind == "conv2d":
            x, k, _ = op.inputs
            s = r / _stabilize(op.output.data, epsilon)
            c = _conv_bwd_input(s, x.shape, k.data, op.ctx["stride"], op.ctx["padding"])
            parts = [(x, x.data * c)]
        elif op.kind == "relu":
            parts = [(op.inputs[0], r)]
        elif op.kind == "maxpool2d":
            parts = [(op.inputs[0], _pool_scatter(r, op.ctx["winners"], op.ctx["window"]))]
        elif op.kind == "upsample_nearest":
            parts = [(op.inputs[0], _upsample_bwd(r, op.ctx["factor"]))]
        elif op.kind == "concat_channels":
            split = op.ctx["split"]
            parts = [(op.inputs[0], r[:, :, :split]), (op.inputs[1], r[:, :, split:])]
        else:
            raise ValueError(f"no relevance rule for {op.kind!r}")
        for t, value in parts:
            rel[t.id] = rel[t.id] + value if t.id in rel else value
    return rel


@dataclass
class RelevanceMaps:
    """Relevance per named layer output, from the logits back to ``stop``."""

    maps: dict[str, np.ndarray] = field(default_factory=dict)
    epsilon: float = 1e-6

    @property
    def totals(self) -> dict[str, float]:
        return {name: float(r.sum()) for name, r in self.maps.items()}
