"""Micro U-Net: two pooling stages, one skip connection, three named taps."""

from __future__ import annotations

import copy
import struct
from dataclasses import dataclass, field

import numpy as np

from camaudit.tensor import (
    Tensor,
    Trace,
    backward,
    concat_channels,
    conv2d,
    maxpool2d,
    relu,
    upsample_nearest,
)

TAPS = ("enc_early", "dec_penultimate", "head_1x1")
PENULTIMATE_CHANNELS = 32
VALID_BANDS = (1, 3, 25)


@dataclass
class Layer:
    name: str
    kind: str  # conv | relu | maxpool | upsample | concat
    inputs: tuple[str, ...]
    params: dict = field(default_factory=dict)
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None
    use_bias: bool = True


@dataclass
class ModelGraph:
    layers: list[Layer]
    taps: dict[str, str]
    input_channels: int
    classes: int
    base_width: int

    def layer(self, name: str) -> Layer:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    @property
    def convs(self) -> list[Layer]:
        return [layer for layer in self.layers if layer.kind == "conv"]

    @property
    def skips(self) -> list[tuple[str, str]]:
        """(source, concat layer) edges that bypass the sequential chain."""
        edges = []
        names = [layer.name for layer in self.layers]
        for pos, layer in enumerate(self.layers):
            for src in layer.inputs:
                if src != "input" and names.index(src) != pos - 1:
                    edges.append((src, layer.name))
        return edges

    def downstream(self, name: str) -> list[str]:
        """Layers whose output depends on ``name`` (excluding itself), in graph order."""
        reached = {name}
        out = []
        for layer in self.layers:
            if any(src in reached for src in layer.inputs):
                reached.add(layer.name)
                out.append(layer.name)
        return out

    def copy(self) -> ModelGraph:
        return copy.deepcopy(self)


def _glorot(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    kh, kw, cin, cout = shape
    limit = np.sqrt(6.0 / (kh * kw * cin + kh * kw * cout))
    return rng.uniform(-limit, limit, size=shape)


def _topology(input_channels: int, classes: int, base_width: int) -> list[Layer]:
    w = base_width
    layers: list[Layer] = []
    prev = "input"

    def conv(name: str, cin: int, cout: int, k: int = 3, src: str | None = None):
        nonlocal prev
        layers.append(Layer(name, "conv", (src or prev,), {"stride": 1, "padding": "same"},
                            np.zeros((k, k, cin, cout)), np.zeros(cout)))
        prev = name

    def act(name: str):
        nonlocal prev
        layers.append(Layer(name, "relu", (prev,)))
        prev = name

    def block(stem: str, cin: int, cout: int, mid: int | None = None):
        mid = cout if mid is None else mid
        conv(f"{stem}_conv1", cin, mid)
        act(f"{stem}_relu1")
        conv(f"{stem}_conv2", mid, cout)
        act(f"{stem}_relu2")

    def simple(name: str, kind: str, **params):
        nonlocal prev
        layers.append(Layer(name, kind, (prev,), params))
        prev = name

    block("enc1", input_channels, w)
    simple("pool1", "maxpool", window=2)
    block("enc2", w, 2 * w)
    simple("pool2", "maxpool", window=2)
    block("mid", 2 * w, 4 * w)
    simple("up2", "upsample", factor=2)
    block("dec2", 4 * w, 2 * w)
    simple("up1", "upsample", factor=2)
    layers.append(Layer("skip_concat", "concat", ("up1", "enc1_relu2")))
    prev = "skip_concat"
    block("dec1", 3 * w, PENULTIMATE_CHANNELS, mid=w)
    conv("head", PENULTIMATE_CHANNELS, classes, k=1)
    return layers


def build_unet_micro(input_channels: int = 25, classes: int = 5, base_width: int = 16, seed: int = 0,
                     bias_free_after: str | None = None) -> ModelGraph:
    """Build and initialize the micro encoder-decoder.

    ``bias_free_after`` names a tap; every convolution downstream of it gets a
    bias frozen at zero, so the subnetwork past the tap is positively
    homogeneous.
    """
    if input_channels not in VALID_BANDS:
        raise ValueError(f"input_channels must be one of {VALID_BANDS}, got {input_channels}")
    if base_width < 8:
        raise ValueError(f"base_width must be >= 8, got {base_width}")
    if classes < 1:
        raise ValueError(f"classes must be positive, got {classes}")
    model = ModelGraph(
        layers=_topology(input_channels, classes, base_width),
        taps={"enc_early": "enc1_relu2", "dec_penultimate": "dec1_relu2", "head_1x1": "head"},
        input_channels=input_channels,
        classes=classes,
        base_width=base_width,
    )
    _init(model, np.random.default_rng(seed))
    if bias_free_after is not None:
        set_bias_free(model, bias_free_after)
    return model


def _init(model: ModelGraph, rng: np.random.Generator) -> None:
    for layer in model.convs:
        layer.weight = _glorot(rng, layer.weight.shape)
        layer.bias = np.zeros(layer.weight.shape[3])


def set_bias_free(model: ModelGraph, tap: str) -> ModelGraph:
    """Zero and freeze all biases downstream of ``tap`` (in place)."""
    if tap not in model.taps:
        raise ValueError(f"unknown tap {tap!r}; expected one of {sorted(model.taps)}")
    for name in model.downstream(model.taps[tap]):
        layer = model.layer(name)
        if layer.kind == "conv":
            layer.use_bias = False
            layer.bias = np.zeros_like(layer.bias)
    return model


def randomize_parameters(model: ModelGraph, seed: int) -> ModelGraph:
    """Copy of ``model`` with every weight redrawn from the initialization distribution."""
    out = model.copy()
    _init(out, np.random.default_rng(seed))
    return out


def forward(model: ModelGraph, x, taps=(), override: dict[str, np.ndarray] | None = None,
            zero_skip: bool = False) -> tuple[Tensor, dict[str, Tensor], Trace]:
    """Run the network on an [H, W, B] input.

    Returns pre-softmax logits [H, W, C], the requested tap activations and the
    trace.  ``override`` replaces the named layer (or tap) outputs with the given
    arrays; ``zero_skip`` feeds zeros through the skip edge instead of the
    encoder activations.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    if len(x.shape) != 3 or x.shape[2] != model.input_channels:
        raise ValueError(f"expected input [H, W, {model.input_channels}], got {x.shape}")
    if x.shape[0] % 4 or x.shape[1] % 4:
        raise ValueError(f"input extents must be divisible by 4, got {x.shape[:2]}")
    unknown = set(taps) - set(model.taps)
    if unknown:
        raise ValueError(f"unknown taps {sorted(unknown)}; expected some of {sorted(model.taps)}")
    override = {model.taps.get(k, k): v for k, v in (override or {}).items()}
    skip_sources = {src for src, _ in model.skips}

    trace = Trace()
    trace.labels["input"] = x
    out: dict[str, Tensor] = {"input": x}
    for layer in model.layers:
        args = [out[src] for src in layer.inputs]
        if layer.kind == "conv":
            k = Tensor(layer.weight, copy=False)
            b = Tensor(layer.bias, copy=False)
            trace.labels[f"{layer.name}.weight"] = k
            trace.labels[f"{layer.name}.bias"] = b
            y = conv2d(args[0], k, b, layer.params["stride"], layer.params["padding"], trace)
        elif layer.kind == "relu":
            y = relu(args[0], trace)
        elif layer.kind == "maxpool":
            y, _ = maxpool2d(args[0], layer.params["window"], trace)
        elif layer.kind == "upsample":
            y = upsample_nearest(args[0], layer.params["factor"], trace)
        elif layer.kind == "concat":
            if zero_skip:
                args = [Tensor(np.zeros(a.shape)) if src in skip_sources else a
                        for src, a in zip(layer.inputs, args)]
            y = concat_channels(args[0], args[1], trace)
        else:
            raise ValueError(f"unknown layer kind {layer.kind!r}")
        if layer.name in override:
            value = np.asarray(override[layer.name], dtype=np.float64)
            if value.shape != y.shape:
                raise ValueError(f"override for {layer.name} has shape {value.shape}, expected {y.shape}")
            y = Tensor(value)
        out[layer.name] = y
        trace.labels[layer.name] = y
    tapped = {t: out[model.taps[t]] for t in taps}
    return out[model.taps["head_1x1"]], tapped, trace


def predict(model: ModelGraph, x) -> np.ndarray:
    logits, _, _ = forward(model, x)
    return logits.data.argmax(axis=2)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 4
    learning_rate: float = 0.005
    optimizer: str = "adam"  # sgd | momentum | adam
    momentum: float = 0.9
    beta2: float = 0.999
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.optimizer not in ("sgd", "momentum", "adam"):
            raise ValueError(f"optimizer must be 'sgd', 'momentum' or 'adam', got {self.optimizer!r}")


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean per-pixel cross-entropy and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=2, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=2, keepdims=True)
    h, w, c = logits.shape
    onehot = np.eye(c)[labels]
    loss = -np.mean(np.log(np.sum(p * onehot, axis=2) + 1e-300))
    return float(loss), (p - onehot) / (h * w)


def train(model: ModelGraph, dataset, config: TrainConfig) -> tuple[ModelGraph, list[float]]:
    """Mini-batch training on a list of scenes whose cubes already match the model input."""
    if not dataset:
        raise ValueError("dataset is empty")
    for scene in dataset:
        labels = np.asarray(scene.labels)
        if labels.min() < 0 or labels.max() >= model.classes:
            raise ValueError(f"labels must lie in [0, {model.classes}), got range "
                             f"[{labels.min()}, {labels.max()}]")
    model = model.copy()
    rng = np.random.default_rng(config.seed)
    velocity = {layer.name: [np.zeros_like(layer.weight), np.zeros_like(layer.bias)] for layer in model.convs}
    second = {layer.name: [np.zeros_like(layer.weight), np.zeros_like(layer.bias)] for layer in model.convs}
    history = []
    step = 0
    for _ in range(config.epochs):
        order = rng.permutation(len(dataset))
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = [dataset[i] for i in order[start:start + config.batch_size]]
            grads = {layer.name: [np.zeros_like(layer.weight), np.zeros_like(layer.bias)]
                     for layer in model.convs}
            for scene in batch:
                logits, _, trace = forward(model, scene.cube)
                loss, seed = softmax_cross_entropy(logits.data, np.asarray(scene.labels))
                losses.append(loss)
                params = [trace.labels[f"{layer.name}.{p}"] for layer in model.convs for p in ("weight", "bias")]
                g = backward(trace, logits, seed / len(batch), wrt=params)
                for layer in model.convs:
                    for slot, p in enumerate(("weight", "bias")):
                        gp = g.get(trace.labels[f"{layer.name}.{p}"].id)
                        if gp is not None:
                            grads[layer.name][slot] += gp
            step += 1
            for layer in model.convs:
                gw, gb = grads[layer.name]
                if not layer.use_bias:
                    gb = np.zeros_like(gb)
                update = []
                for slot, g in enumerate((gw, gb)):
                    v = velocity[layer.name][slot]
                    if config.optimizer == "sgd":
                        update.append(g)
                    elif config.optimizer == "momentum":
                        v *= config.momentum
                        v += g
                        update.append(v)
                    else:
                        s2 = second[layer.name][slot]
                        v *= config.momentum
                        v += (1 - config.momentum) * g
                        s2 *= config.beta2
                        s2 += (1 - config.beta2) * g * g
                        vhat = v / (1 - config.momentum ** step)
                        shat = s2 / (1 - config.beta2 ** step)
                        update.append(vhat / (np.sqrt(shat) + 1e-8))
                layer.weight = layer.weight - config.learning_rate * update[0]
                layer.bias = layer.bias - config.learning_rate * update[1]
        history.append(float(np.mean(losses)))
    return model, history


# ---------------------------------------------------------------------------
# weight files

MAGIC = b"CAMW"
VERSION = 1
KIND_CODES = {"conv": 1, "conv_nobias": 2, "relu": 3, "maxpool": 4, "upsample": 5, "concat": 6}
_KIND_NAMES = {v: k for k, v in KIND_CODES.items()}


class WeightFileError(ValueError):
    pass


class BadMagicError(WeightFileError):
    pass


class VersionMismatchError(WeightFileError):
    pass


class TruncatedError(WeightFileError):
    pass


def layer_table(model: ModelGraph) -> list[tuple[str, str, tuple[int, ...]]]:
    """(name, kind code name, weight shape) per layer, as stored in a weight file."""
    rows = []
    for layer in model.layers:
        if layer.kind == "conv":
            rows.append((layer.name, "conv" if layer.use_bias else "conv_nobias", layer.weight.shape))
        else:
            rows.append((layer.name, layer.kind, ()))
    return rows


def save_weights(model: ModelGraph) -> bytes:
    parts = [MAGIC, struct.pack("<HH", VERSION, len(model.layers))]
    for name, kind, shape in layer_table(model):
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", KIND_CODES[kind], len(shape)))
        parts.append(struct.pack(f"<{len(shape)}I", *shape))
        if shape:
            layer = model.layer(name)
            parts.append(layer.weight.astype("<f4").tobytes())
            parts.append(layer.bias.astype("<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError(f"weight stream truncated at byte {len(self.data)} (needed {self.pos + n})")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return bytes(chunk)

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_weights(data: bytes) -> ModelGraph:
    r = _Reader(data)
    if len(data) < 4:
        raise TruncatedError("weight stream shorter than its magic")
    if r.take(4) != MAGIC:
        raise BadMagicError("not a CAMW weight stream")
    version, count = r.unpack("<HH")
    if version != VERSION:
        raise VersionMismatchError(f"weight stream version {version}, expected {VERSION}")
    rows = []
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode("utf-8")
        code, rank = r.unpack("<BB")
        if code not in _KIND_NAMES:
            raise WeightFileError(f"unknown layer kind code {code} for {name!r}")
        shape = r.unpack(f"<{rank}I") if rank else ()
        weight = bias = None
        if shape:
            size = int(np.prod(shape))
            weight = np.frombuffer(r.take(4 * size), dtype="<f4").astype(np.float64).reshape(shape)
            bias = np.frombuffer(r.take(4 * shape[-1]), dtype="<f4").astype(np.float64)
        rows.append((name, _KIND_NAMES[code], shape, weight, bias))
    if r.pos != len(data):
        raise WeightFileError(f"{len(data) - r.pos} trailing bytes after the last layer")

    convs = [row for row in rows if row[2]]
    if not convs:
        raise WeightFileError("weight stream holds no convolution layers")
    first, head = convs[0][2], convs[-1][2]
    model = build_unet_micro(first[2], head[3], first[3], seed=0)
    expected = [(name, kind if kind != "conv_nobias" else "conv") for name, kind, _ in layer_table(model)]
    found = [(name, "conv" if kind == "conv_nobias" else kind) for name, kind, *_ in rows]
    if expected != found:
        raise WeightFileError("layer table does not match the micro U-Net topology")
    for name, kind, shape, weight, bias in rows:
        if not shape:
            continue
        layer = model.layer(name)
        if layer.weight.shape != shape:
            raise WeightFileError(f"{name}: stored shape {shape}, expected {layer.weight.shape}")
        layer.weight, layer.bias = weight, bias
        layer.use_bias = kind == "conv"
    return model
