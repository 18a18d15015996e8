"""End-to-end runs that stitch data preparation, training and evaluation."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from gradspace.distort import CHALLENGES
from gradspace.errors import DomainError, ManifestError
from gradspace.imageio import load_image
from gradspace.manifest import DatasetManifest
from gradspace.models import init_sae, init_vae
from gradspace.ood import OodDatasets, OodExperimentConfig, build_datasets, run_experiment
from gradspace.synthetic import image_set
from gradspace.tensor import child_seed, make_rng
from gradspace.training import (
    OptimizerConfig,
    apply_zca,
    extract_patches,
    fit_zca,
    resize_bilinear,
    train,
)


@dataclass
class SaeSettings:
    patch_size: int = 8
    patches_per_image: int = 400
    latent: int = 400
    zca_epsilon: float = 0.1
    beta: float = 3.0
    lam: float = 3e-3
    epochs: int = 200
    batch_size: int = 100
    learning_rate: float = 1e-3


@dataclass
class VaeSettings:
    image_size: int = 28
    hidden: int = 512
    latent: int = 32
    epochs: int = 150
    batch_size: int = 32
    learning_rate: float = 1e-3


@dataclass
class SyntheticOodSettings:
    n_train: int = 500
    n_test: int = 200
    vae: VaeSettings = field(default_factory=lambda: VaeSettings(image_size=16, hidden=128, latent=16))


def train_sae_on_images(images, settings: SaeSettings = SaeSettings(), seed: int = 0):
    """Random patches, ZCA fit, SAE training. Returns ``(model, zca, report)``."""
    rng = make_rng(child_seed(seed, 1))
    patches = np.array([p for im in images
                        for p in extract_patches(im, settings.patch_size, settings.patches_per_image, rng)])
    zca = fit_zca(patches, settings.zca_epsilon)
    data = apply_zca(zca, patches)
    model = init_sae(data.shape[1], settings.latent, seed=child_seed(seed, 0),
                     beta=settings.beta, lam=settings.lam)
    opt = OptimizerConfig(learning_rate=settings.learning_rate, epochs=settings.epochs,
                          batch_size=settings.batch_size, seed=child_seed(seed, 2))
    model, report = train(model, data, opt)
    return model, zca, report


def to_channels(image: np.ndarray, channels: int) -> np.ndarray:
    c = image.shape[2]
    if c == channels:
        return image
    if c == 1 and channels == 3:
        return np.repeat(image, 3, axis=2)
    if c == 3 and channels == 1:
        return image.mean(axis=2, keepdims=True)
    raise DomainError(f"cannot convert {c} channels to {channels}")


def vae_input(image: np.ndarray, size: int, channels: int = 3) -> np.ndarray:
    return to_channels(resize_bilinear(image, size, size), channels)


def train_vae_on_images(images, settings: VaeSettings = VaeSettings(), seed: int = 0):
    """Returns ``(model, report)``; images are resized to ``settings.image_size``."""
    data = [vae_input(im, settings.image_size).ravel() for im in images]
    model = init_vae(len(data[0]), settings.hidden, settings.latent, seed=child_seed(seed, 0))
    opt = OptimizerConfig(learning_rate=settings.learning_rate, epochs=settings.epochs,
                          batch_size=settings.batch_size, seed=child_seed(seed, 2))
    return train(model, data, opt)


def run_synthetic_ood(settings: SyntheticOodSettings = SyntheticOodSettings(),
                      cfg: OodExperimentConfig | None = None):
    """Procedural sign images, VAE training and the OOD accuracy report.

    Returns ``(report, model, train_report)``.
    """
    cfg = cfg or OodExperimentConfig()
    size = settings.vae.image_size
    train_imgs = image_set("sign", settings.n_train, child_seed(cfg.seed, 10), size)
    test_imgs = image_set("sign", settings.n_test, child_seed(cfg.seed, 11), size)
    model, train_report = train_vae_on_images(train_imgs, settings.vae, seed=cfg.seed)
    data = build_datasets(train_imgs, test_imgs, cfg)
    return run_experiment(cfg, model, data), model, train_report


_KIND_TO_CODE = {v: k for k, v in CHALLENGES.items()}


def ood_datasets_from_manifest(manifest: DatasetManifest, size: int, cfg: OodExperimentConfig,
                               channels: int = 3) -> OodDatasets:
    """Group manifest records into the OOD splits.

    Undistorted records (no ``distortion_kind``) are in-distribution; training
    records of kind ``gaussian_blur`` (or ``LB``) form the OOD training split;
    test records carry a challenge code or kind name plus a level.
    """
    def load(rec):
        return vae_input(load_image(rec.image_path), size, channels)

    train_clean = [load(r) for r in manifest.select("train", None)]
    train_blur = [load(r) for r in manifest.records
                  if r.role == "train" and r.distortion_kind in ("gaussian_blur", "LB")]
    test_clean = [load(r) for r in manifest.select("test", None)]
    challenges: dict = {}
    for r in manifest.select("test"):
        if r.distortion_kind is None:
            continue
        code = r.distortion_kind if r.distortion_kind in CHALLENGES else _KIND_TO_CODE.get(r.distortion_kind)
        if code is None:
            raise ManifestError(f"{r.image_path}: unknown challenge {r.distortion_kind!r}")
        challenges.setdefault((code, r.distortion_level), []).append(load(r))
    return OodDatasets(train_clean, train_blur, test_clean, challenges)


def settings_dict(obj) -> dict:
    return asdict(obj)
