"""Command-line entry point: ``camaudit <command> [flags]``.

Exit status: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import math
import os
import sys

import numpy as np

from camaudit import __version__
from camaudit.audit import (DEFAULT_TOLERANCE, ROI_POLICIES, _policy_roi, audit_method, channel_ablation_drops,
                            channel_correlation_match, extract_channel_profile, sanity_data_randomization,
                            sanity_param_randomization, similarity)
from camaudit.hsi import (CLASS_NAMES, BAND_PRESETS, CubeFileError, HsiScene, SceneSpec, cube_bytes,
                          cube_from_bytes, dataset_iou, mean_iou, permute_labels, prepare, scene_split,
                          spec_from_text, synth_scene)
from camaudit.model import (TAPS, TrainConfig, WeightFileError, build_unet_micro, forward, load_weights, predict,
                            save_weights, set_bias_free, train)
from camaudit.render import render_heatmap
from camaudit.report import atomic_write, attribution_bytes, build_document, dumps
from camaudit.saliency import METHODS, RoI, attribute

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
JOBS_ENV = "CAM_AUDIT_JOBS"


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


class NumericError(Exception):
    pass


# ---------------------------------------------------------------------------
# argument parsing


def _positive_float(text: str) -> float:
    value = float(text)
    if not value > 0 or not math.isfinite(value):
        raise argparse.ArgumentTypeError(f"expected a positive finite number, got {text!r}")
    return value


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}")
    return value


def _model_flags(p: argparse.ArgumentParser, train_mode: bool = False) -> None:
    p.add_argument("--bands", type=int, choices=sorted(BAND_PRESETS), default=25 if train_mode else None,
                   help="band preset (1, 3 or 25); inference commands take it from the weights")
    p.add_argument("--pn", choices=("auto", "on", "off"), default="auto",
                   help="per-pixel normalization; auto = on for 25 bands only")
    p.add_argument("--bias-free-head", action="store_true",
                   help="zero and freeze every bias downstream of --tap")
    p.add_argument("--seed", type=int, default=0)


def _tap_flag(p: argparse.ArgumentParser) -> None:
    p.add_argument("--tap", choices=TAPS, default="dec_penultimate")


def _scene_source(p: argparse.ArgumentParser) -> None:
    p.add_argument("--input", nargs="+", default=None, metavar="CUBE", help="scene cube files (.hsic)")
    p.add_argument("--template", choices=("urban", "metameric", "two_region"), default=None,
                   help="synthesize scenes from this template instead of --input")
    p.add_argument("--scenes", type=_positive_int, default=20, help="number of synthesized scenes")
    p.add_argument("--scene-seed", type=int, default=1000, help="seed of the first synthesized scene")
    p.add_argument("--size", type=_positive_int, default=32, help="synthesized scene extent (multiple of 4)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="camaudit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"camaudit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="synthesize one hyperspectral scene")
    p.add_argument("--template", choices=("urban", "metameric", "two_region"), default=None)
    p.add_argument("--spec", default=None, help="YAML scene specification (overrides --template/--size)")
    p.add_argument("--size", type=_positive_int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a micro U-Net and write its weights")
    _model_flags(p, train_mode=True)
    _tap_flag(p)
    _scene_source(p)
    p.add_argument("--epochs", type=_positive_int, default=60)
    p.add_argument("--batch-size", type=_positive_int, default=4)
    p.add_argument("--lr", type=float, default=0.005)
    p.add_argument("--optimizer", choices=("sgd", "momentum", "adam"), default="adam")
    p.add_argument("--base-width", type=_positive_int, default=8)
    p.add_argument("--permute-labels", type=int, default=None, metavar="SEED",
                   help="shuffle training labels with this seed (data-randomization control)")
    p.add_argument("--history", default=None, help="write the per-epoch loss history here (JSON)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("cam", help="compute one attribution map and render it")
    _model_flags(p)
    _tap_flag(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--method", choices=METHODS, required=True)
    p.add_argument("--class", dest="class_index", type=int, choices=range(len(CLASS_NAMES)), required=True)
    p.add_argument("--roi-policy", choices=ROI_POLICIES, default="predicted")
    p.add_argument("--pixel", type=int, nargs=2, default=None, metavar=("ROW", "COL"),
                   help="single-pixel RoI at this location (overrides --roi-policy)")
    p.add_argument("--per-pixel", action="store_true", help="evaluate per RoI pixel and sum the maps")
    p.add_argument("--format", choices=("ppm", "png"), default="ppm")
    p.add_argument("--legend", action="store_true", help="append a legend strip")
    p.add_argument("--export", default=None, help="also write the raw map (binary float64 export)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("audit", help="conservativeness audit over scenes, classes and methods")
    _model_flags(p)
    _tap_flag(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--input", nargs="+", required=True)
    p.add_argument("--method", action="append", choices=METHODS + ("all",), default=None)
    p.add_argument("--class", dest="class_index", action="append", type=int,
                   choices=range(len(CLASS_NAMES)), default=None)
    p.add_argument("--roi-policy", choices=ROI_POLICIES, default="predicted")
    p.add_argument("--tolerance", type=_positive_float, default=DEFAULT_TOLERANCE)
    p.add_argument("--jobs", type=_positive_int, default=None, help=f"worker threads (fallback ${JOBS_ENV})")
    p.add_argument("--out", required=True)

    p = sub.add_parser("sanity", help="parameter- and data-randomization sanity scores")
    _model_flags(p)
    _tap_flag(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--permuted-weights", default=None, help="model trained on permuted labels")
    p.add_argument("--input", required=True)
    p.add_argument("--method", action="append", choices=METHODS + ("all",), default=None)
    p.add_argument("--class", dest="class_index", type=int, choices=range(len(CLASS_NAMES)), required=True)
    p.add_argument("--roi-policy", choices=ROI_POLICIES, default="predicted")
    p.add_argument("--out", required=True)

    p = sub.add_parser("profile", help="head-layer channel profiles and cross-model matches")
    p.add_argument("--weights", nargs="+", required=True)
    p.add_argument("--input", nargs="*", default=None, help="scenes for the channel ablation check")
    p.add_argument("--pn", choices=("auto", "on", "off"), default="auto")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="per-class IoU of a trained model")
    p.add_argument("--weights", required=True)
    p.add_argument("--pn", choices=("auto", "on", "off"), default="auto")
    p.add_argument("--bands", type=int, choices=sorted(BAND_PRESETS), default=None)
    _scene_source(p)
    p.add_argument("--out", required=True)
    return parser


# ---------------------------------------------------------------------------
# helpers


def _pn(flag: str) -> bool | None:
    return {"auto": None, "on": True, "off": False}[flag]


def _jobs(value: int | None) -> int:
    if value is not None:
        return value
    env = os.environ.get(JOBS_ENV)
    if env is None or env == "":
        return 1
    try:
        jobs = int(env)
    except ValueError:
        raise ConfigError(f"{JOBS_ENV}={env!r} is not an integer") from None
    if jobs < 1:
        raise ConfigError(f"{JOBS_ENV} must be positive, got {jobs}")
    return jobs


def _read(path: str) -> bytes:
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror or exc}") from None


def _load_model(args, path: str | None = None):
    try:
        model = load_weights(_read(path or args.weights))
    except WeightFileError as exc:
        raise DataError(f"{path or args.weights}: {exc}") from None
    if getattr(args, "bands", None) is not None and args.bands != model.input_channels:
        raise ConfigError(f"--bands {args.bands} does not match the model's {model.input_channels} input bands")
    if getattr(args, "bias_free_head", False):
        set_bias_free(model, args.tap)
    return model


def _load_scene(path: str) -> HsiScene:
    try:
        return cube_from_bytes(_read(path))
    except CubeFileError as exc:
        raise DataError(f"{path}: {exc}") from None


def _model_input(scene: HsiScene, bands: int, pn: bool | None, name: str) -> HsiScene:
    if scene.bands != max(BAND_PRESETS):
        raise DataError(f"{name}: expected a {max(BAND_PRESETS)}-band cube, got {scene.bands} bands")
    if scene.cube.shape[0] % 4 or scene.cube.shape[1] % 4:
        raise DataError(f"{name}: extents {scene.cube.shape[:2]} are not multiples of 4")
    return prepare(scene, bands, pn)


def _scenes(args) -> tuple[list[HsiScene], list[str]]:
    if args.input and args.template:
        raise ConfigError("give either --input or --template, not both")
    if args.input:
        return [_load_scene(p) for p in args.input], list(args.input)
    if not args.template:
        raise ConfigError("need --input files or a --template to synthesize from")
    spec = _spec(args.template, args.size)
    names = [f"{args.template}-{args.scene_seed + i}" for i in range(args.scenes)]
    return scene_split(spec, args.scenes, args.scene_seed), names


def _spec(template: str, size: int) -> SceneSpec:
    try:
        return SceneSpec(height=size, width=size, template=template)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _methods(selected) -> list[str]:
    if not selected or "all" in selected:
        return list(METHODS)
    return list(dict.fromkeys(selected))


def _finite(values, what: str) -> None:
    if not np.all(np.isfinite(values)):
        raise NumericError(f"{what} contains NaN or Inf")


def _metadata(args, keys) -> dict:
    meta = {"tool": "camaudit", "version": __version__, "command": args.command}
    for key in keys:
        meta[key.replace("_", "-")] = getattr(args, key)
    return meta


def _write_json(path: str, doc: dict) -> None:
    try:
        text = dumps(doc)
    except ValueError as exc:
        raise NumericError(f"cannot serialize: {exc}") from None
    atomic_write(path, text.encode("utf-8"))


def _roi(args, logits: np.ndarray) -> RoI:
    h, w, _ = logits.shape
    if getattr(args, "pixel", None) is not None:
        r, s = args.pixel
        if not (0 <= r < h and 0 <= s < w):
            raise ConfigError(f"--pixel {r} {s} outside the {h}x{w} scene")
        return RoI.single(args.class_index, r, s)
    roi = _policy_roi(args.roi_policy, logits, args.class_index)
    if roi is None:
        raise DataError(f"class {CLASS_NAMES[args.class_index]} is not predicted anywhere (empty RoI)")
    return roi


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> None:
    if args.spec:
        try:
            text = _read(args.spec).decode("utf-8")
            spec = spec_from_text(text)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{args.spec}: {exc}") from None
    else:
        spec = _spec(args.template or "metameric", args.size)
    scene = synth_scene(spec, args.seed)
    atomic_write(args.out, cube_bytes(scene))
    print(f"wrote {args.out}: {spec.height}x{spec.width}x{spec.bands} {spec.template} seed {args.seed}")


def cmd_train(args) -> None:
    if not (args.lr >= 0 and math.isfinite(args.lr)):
        raise ConfigError(f"--lr must be a non-negative finite number, got {args.lr}")
    scenes, names = _scenes(args)
    pn = _pn(args.pn)
    data = [_model_input(s, args.bands, pn, n) for s, n in zip(scenes, names)]
    if args.permute_labels is not None:
        data = [permute_labels(s, args.permute_labels + i) for i, s in enumerate(data)]
    try:
        model = build_unet_micro(args.bands, len(CLASS_NAMES), args.base_width, seed=args.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if args.bias_free_head:
        set_bias_free(model, args.tap)
    config = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr,
                         optimizer=args.optimizer, seed=args.seed)
    with np.errstate(over="ignore", invalid="ignore"):
        model, history = train(model, data, config)
    _finite(history, "training loss")
    for layer in model.convs:
        _finite(layer.weight, f"{layer.name} weights")
    atomic_write(args.out, save_weights(model))
    if args.history:
        doc = {"run": _metadata(args, ("bands", "pn", "bias_free_head", "tap", "seed", "epochs", "batch_size",
                                       "lr", "optimizer", "base_width")),
               "loss": history}
        _write_json(args.history, doc)
    print(f"wrote {args.out}: {len(data)} scenes, {args.epochs} epochs, final loss {history[-1]:.6f}")


def cmd_cam(args) -> None:
    model = _load_model(args)
    scene = _model_input(_load_scene(args.input), model.input_channels, _pn(args.pn), args.input)
    logits = forward(model, scene.cube)[0].data
    _finite(logits, "logits")
    roi = _roi(args, logits)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        attribution = attribute(args.method, model, scene.cube, args.tap, roi, per_pixel=args.per_pixel)
    _finite(attribution.class_map, "attribution")
    raster = render_heatmap(attribution.class_map, args.format, args.legend)
    export = attribution_bytes(attribution) if args.export else None
    atomic_write(args.out, raster)
    if export is not None:
        atomic_write(args.export, export)
    m = attribution.class_map
    print(f"{args.method} @ {args.tap}, class {CLASS_NAMES[args.class_index]}, RoI {len(roi)} px: "
          f"sum {m.sum():.6g}, min {m.min():.6g}, max {m.max():.6g}")


def cmd_audit(args) -> None:
    jobs = _jobs(args.jobs)
    model = _load_model(args)
    pn = _pn(args.pn)
    inputs = [_model_input(_load_scene(p), model.input_channels, pn, p).cube for p in args.input]
    methods = _methods(args.method)
    classes = sorted(set(args.class_index)) if args.class_index else None
    reports = []
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for method in methods:
            reports += audit_method(model, inputs, method, args.tap, args.roi_policy, classes, args.tolerance,
                                    jobs, scene_names=args.input)
    for r in reports:
        if r.has_pixels:
            _finite(r.deviation, f"{r.method} deviations")
    meta = _metadata(args, ("weights", "input", "tap", "roi_policy", "tolerance", "bias_free_head", "pn"))
    meta["methods"] = methods
    meta["classes"] = classes if classes is not None else list(range(model.classes))
    doc = build_document(reports, meta, CLASS_NAMES)
    _write_json(args.out, doc)
    for r in reports:
        extra = f" max rel {r.max_rel:.3e}" if r.has_pixels else ""
        print(f"{r.scene} {CLASS_NAMES[r.class_index]:<10} {r.method:<18} {r.verdict}{extra}")


def _score_doc(score) -> dict:
    return {"rank_correlation": score.rank_correlation, "l1_distance": score.l1_distance, "note": score.note}


def cmd_sanity(args) -> None:
    model = _load_model(args)
    permuted = _load_model(args, args.permuted_weights) if args.permuted_weights else None
    scene = _model_input(_load_scene(args.input), model.input_channels, _pn(args.pn), args.input)
    logits = forward(model, scene.cube)[0].data
    roi = _roi(args, logits)
    results = {}
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for method in _methods(args.method):
            own = attribute(method, model, scene.cube, args.tap, roi, relu_clipped=False).class_map
            entry = {"self": _score_doc(similarity(own, own)),
                     "parameter_randomization": _score_doc(
                         sanity_param_randomization(model, method, scene.cube, args.tap, roi, args.seed))}
            if permuted is not None:
                entry["data_randomization"] = _score_doc(
                    sanity_data_randomization(model, permuted, method, scene.cube, args.tap, roi))
            results[method] = entry
            print(f"{method:<18} param-rand rho {entry['parameter_randomization']['rank_correlation']}")
    meta = _metadata(args, ("weights", "permuted_weights", "input", "tap", "class_index", "roi_policy", "seed",
                            "bias_free_head", "pn"))
    _write_json(args.out, {"run": meta, "roi_size": len(roi), "scores": results})


def cmd_profile(args) -> None:
    models = [(p, _load_model(args, p)) for p in args.weights]
    profiles = [extract_channel_profile(m, p) for p, m in models]
    doc = {"run": _metadata(args, ("weights", "input", "pn")), "models": []}
    for (path, model), prof in zip(models, profiles):
        entry = {"label": path, "weights": prof.weights.tolist(), "biases": prof.biases.tolist(),
                 "ranking": {CLASS_NAMES[c]: prof.ranking[c].tolist() for c in range(prof.classes)}}
        if args.input:
            inputs = [_model_input(_load_scene(p), model.input_channels, _pn(args.pn), p).cube for p in args.input]
            drops = channel_ablation_drops(model, inputs)
            _finite(drops, "ablation drops")
            entry["ablation"] = {
                CLASS_NAMES[c]: {"top_weight_channel": int(prof.ranking[c][0]),
                                 "top_ablation_channel": int(np.argmax(drops[:, c])),
                                 "drops": drops[:, c].tolist()}
                for c in range(prof.classes)}
        doc["models"].append(entry)
    if len(profiles) >= 2:
        doc["matches"] = [{"channel": m.channel, "match": m.match, "correlation": m.correlation}
                          for m in channel_correlation_match(profiles[0], profiles[1], "cross-model")]
    _write_json(args.out, doc)
    print(f"wrote {args.out}: {len(profiles)} profile(s)")


def cmd_eval(args) -> None:
    model = _load_model(args)
    scenes, names = _scenes(args)
    pn = _pn(args.pn)
    data = [_model_input(s, model.input_channels, pn, n) for s, n in zip(scenes, names)]
    if any(s.labels is None for s in data):
        raise DataError("evaluation needs labelled scenes")
    preds = [predict(model, s.cube) for s in data]
    ious = dataset_iou(preds, [s.labels for s in data])
    doc = {"run": _metadata(args, ("weights", "input", "template", "scenes", "scene_seed", "size", "pn")),
           "iou": {CLASS_NAMES[c]: v for c, v in ious.items()},
           "mean_iou": mean_iou(np.concatenate([p.ravel() for p in preds]),
                                np.concatenate([s.labels.ravel() for s in data]))}
    _write_json(args.out, doc)
    for c, v in ious.items():
        print(f"{CLASS_NAMES[c]:<10} {'n/a' if v is None else f'{v:.4f}'}")


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "cam": cmd_cam, "audit": cmd_audit, "sanity": cmd_sanity,
            "profile": cmd_profile, "eval": cmd_eval}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError, ArithmeticError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
