"""Reusable fixtures and experiment drivers shared by the CLI and the test suite."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from camaudit.hsi import (CLASS_NAMES, OTHER, VEGETATION, SceneSpec, cosine, dataset_iou, gaussian_bayes_fit,
                          gaussian_bayes_predict, nearest_signature, permute_labels, prepare, scene_split,
                          synth_scene)
from camaudit.model import ModelGraph, TrainConfig, build_unet_micro, predict, set_bias_free, train

FIXTURE_TAP = "dec_penultimate"


def two_region_fixture(size: int = 64, base_width: int = 8, epochs: int = 8, seed: int = 0,
                       tap: str = FIXTURE_TAP, permute_seed: int | None = None
                       ) -> tuple[ModelGraph, np.ndarray, np.ndarray]:
    """Bias-free-head micro model trained briefly on Road | Vegetation scenes.

    Returns ``(model, x, labels)`` where ``x`` is the PN'd 25-band input of the
    audited scene and ``labels`` its true labels.  ``permute_seed`` trains on
    pixel-shuffled labels instead (data-randomization control).
    """
    spec = SceneSpec(height=size, width=size, template="two_region")
    scenes = [prepare(s, 25) for s in scene_split(spec, 3, seed)]
    truth = scenes[0].labels
    if permute_seed is not None:
        scenes = [permute_labels(s, permute_seed + i) for i, s in enumerate(scenes)]
    model = set_bias_free(build_unet_micro(25, len(CLASS_NAMES), base_width, seed=seed), tap)
    model, _ = train(model, scenes, TrainConfig(epochs=epochs, batch_size=1, seed=seed))
    return model, scenes[0].cube, truth


def random_fixture(seed: int, size: int = 8, bands: int = 3, base_width: int = 8, tap: str = "head_1x1"):
    """Untrained bias-free model plus a random positive input, for randomized checks."""
    rng = np.random.default_rng(seed)
    model = set_bias_free(build_unet_micro(bands, len(CLASS_NAMES), base_width, seed=seed), tap)
    return model, rng.uniform(0.05, 1.0, (size, size, bands))


# ---------------------------------------------------------------------------
# spectral richness: 1 vs 3 vs 25+PN bands on the metameric template


@dataclass
class RichnessConfig:
    train_scenes: int = 40
    test_scenes: int = 20
    size: int = 32
    base_width: int = 8
    epochs: int = 80
    learning_rate: float = 0.005
    train_seed: int = 1000
    test_seed: int = 5000
    seed: int = 0


def train_band_model(bands: int, config: RichnessConfig, pn: bool | None = None):
    spec = SceneSpec(height=config.size, width=config.size, template="metameric")
    data = [prepare(s, bands, pn) for s in scene_split(spec, config.train_scenes, config.train_seed)]
    model = build_unet_micro(bands, len(CLASS_NAMES), config.base_width, seed=config.seed)
    tc = TrainConfig(epochs=config.epochs, batch_size=4, learning_rate=config.learning_rate, seed=config.seed)
    return train(model, data, tc)


def evaluate_iou(model: ModelGraph, bands: int, config: RichnessConfig, pn: bool | None = None):
    spec = SceneSpec(height=config.size, width=config.size, template="metameric")
    test = [prepare(s, bands, pn) for s in scene_split(spec, config.test_scenes, config.test_seed)]
    return dataset_iou([predict(model, s.cube) for s in test], [s.labels for s in test])


def spectral_richness(config: RichnessConfig | None = None) -> dict[int, dict[int, float | None]]:
    """Per-class test IoU for the 1-band, 3-band and 25-band + PN models."""
    config = config or RichnessConfig()
    out = {}
    for bands in (1, 3, 25):
        model, _ = train_band_model(bands, config)
        out[bands] = evaluate_iou(model, bands, config)
    return out


# ---------------------------------------------------------------------------
# metameric pair: Vegetation vs Other


def metameric_monte_carlo(pixels: int = 100_000, jitter: float = 0.02, seed: int = 0) -> dict[str, float]:
    """Pixel error on the Vegetation/Other pair: full-spectrum nearest signature vs single-band Bayes.

    Unit illumination, equal class priors, Gaussian jitter with absolute std ``jitter``.
    """
    spec = SceneSpec(template="metameric")
    sigs = spec.signatures
    rng = np.random.default_rng(seed)
    labels = np.where(rng.uniform(size=pixels) < 0.5, VEGETATION, OTHER)
    spectra = np.stack([sigs[c] for c in (VEGETATION, OTHER)])[(labels == OTHER).astype(int)]
    spectra = spectra + jitter * rng.standard_normal(spectra.shape)
    pair = (VEGETATION, OTHER)
    full = nearest_signature(spectra, sigs, pair)
    half = pixels // 2
    band = spec.bands // 2
    fit = gaussian_bayes_fit(spectra[:half, band], labels[:half], pair)
    single = gaussian_bayes_predict(fit, spectra[half:, band])
    return {
        "full_spectrum_error": float(np.mean(full != labels)),
        "single_band_error": float(np.mean(single != labels[half:])),
        "signature_cosine": cosine(sigs[VEGETATION], sigs[OTHER]),
        "single_band_gap": float(abs(sigs[VEGETATION][band] - sigs[OTHER][band])),
    }


def demo_scene(template: str = "metameric", seed: int = 0, size: int = 32):
    return synth_scene(SceneSpec(height=size, width=size, template=template), seed)
