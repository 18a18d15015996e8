"""Out-of-distribution classification with VAE gradient features.

A VAE trained on clean images supplies four kinds of per-image features:
the latent mean, the reconstruction-loss gradient of the decoder output
layer, the regularization-loss gradient of the encoder heads, and both
gradients concatenated. A logistic-regression classifier is fitted once on
clean versus Gaussian-blurred training images and then scored on every
challenge type.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from gradspace.distort import BLUR_CATEGORY, CHALLENGES, DistortionSpec, apply_distortion
from gradspace.errors import DomainError, ManifestError, ShapeError
from gradspace.gradients import LayerSelector, backprop_split, last_layer_features
from gradspace.models import VaeModel, vae_encode, vae_forward
from gradspace.tensor import child_seed, make_rng


class FeatureKind(str, Enum):
    ACTIVATION = "Activation"
    RECON_DECODER_GRAD = "ReconDecoderGrad"
    REG_ENCODER_GRAD = "RegEncoderGrad"
    BOTH_GRADS = "BothGrads"


ALL_KINDS = tuple(FeatureKind)
IN, OUT = 0, 1


def _flat_input(model: VaeModel, image) -> np.ndarray:
    x = np.asarray(image, dtype=float).ravel()
    if x.size != model.d_x:
        raise ShapeError(f"image has {x.size} values, model expects {model.d_x}")
    return x


def extract_features(model: VaeModel, image, kind: FeatureKind | str,
                     rng: np.random.Generator, sampled_activation: bool = False) -> np.ndarray:
    kind = FeatureKind(kind)
    return _features(model, _flat_input(model, image), [kind], rng, sampled_activation)[kind]


def _features(model, x, kinds, rng, sampled_activation=False):
    out = {}
    eps = rng.standard_normal(model.d_z)
    if FeatureKind.ACTIVATION in kinds:
        if sampled_activation:
            out[FeatureKind.ACTIVATION] = vae_forward(model, x, eps=eps).z
        else:
            out[FeatureKind.ACTIVATION] = vae_encode(model, x)[0]
    if any(k is not FeatureKind.ACTIVATION for k in kinds):
        bundle = backprop_split(model, x, eps=eps)
        recon = last_layer_features(bundle, LayerSelector.RECON_DECODER_LAST)
        reg = last_layer_features(bundle, LayerSelector.REG_ENCODER_LAST)
        if FeatureKind.RECON_DECODER_GRAD in kinds:
            out[FeatureKind.RECON_DECODER_GRAD] = recon
        if FeatureKind.REG_ENCODER_GRAD in kinds:
            out[FeatureKind.REG_ENCODER_GRAD] = reg
        if FeatureKind.BOTH_GRADS in kinds:
            out[FeatureKind.BOTH_GRADS] = np.concatenate([recon, reg])
    return out


def feature_matrices(model: VaeModel, images: Sequence, kinds: Iterable[FeatureKind],
                     seed: int, sampled_activation: bool = False) -> dict[FeatureKind, np.ndarray]:
    """Features for many images; image ``i`` draws its noise from stream ``i`` of ``seed``."""
    kinds = [FeatureKind(k) for k in kinds]
    rows: dict[FeatureKind, list] = {k: [] for k in kinds}
    for i, image in enumerate(images):
        f = _features(model, _flat_input(model, image), kinds,
                      make_rng(child_seed(seed, i)), sampled_activation)
        for k in kinds:
            rows[k].append(f[k])
    return {k: np.stack(v) for k, v in rows.items()}


# ---------------------------------------------------------------------------
# classifier


@dataclass(frozen=True, eq=False)
class LinearClassifier:
    weights: np.ndarray
    bias: float
    feature_mean: np.ndarray
    feature_std: np.ndarray
    iterations: int = 0
    grad_norm: float = 0.0

    def decision_function(self, features) -> np.ndarray:
        x = (np.asarray(features, dtype=float) - self.feature_mean) / self.feature_std
        return x @ self.weights + self.bias

    def predict_proba(self, features) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.decision_function(features)))

    def predict(self, features) -> np.ndarray:
        """1 (out-of-distribution) where the logistic output is >= 0.5."""
        return (self.predict_proba(features) >= 0.5).astype(int)


def encode_labels(labels) -> np.ndarray:
    out = []
    for lab in labels:
        if lab in ("in", IN, False):
            out.append(IN)
        elif lab in ("out", OUT, True):
            out.append(OUT)
        else:
            raise DomainError(f"label must be 'in' or 'out', got {lab!r}")
    return np.array(out, dtype=float)


def _top_eigenvalue(k: np.ndarray, seed: int, iters: int = 200) -> float:
    v = make_rng(seed).standard_normal(k.shape[0])
    lam = 0.0
    for _ in range(iters):
        w = k @ v
        lam = float(np.linalg.norm(w))
        if lam == 0:
            return 0.0
        v = w / lam
    return lam


def train_classifier(features, labels, seed: int = 0, l2: float = 1e-4,
                     tol: float = 1e-6, max_iter: int = 5000) -> LinearClassifier:
    """L2-regularized logistic regression by full-batch gradient descent.

    Minimizes ``mean(logloss) + l2/2 * |w|^2`` on standardized features, with
    an unpenalized bias. Starting from zero, every iterate of ``w`` lies in
    the row space of the data, so descent runs on the coefficients ``alpha``
    of ``w = X^T alpha`` using the Gram matrix; the iterates are identical to
    plain gradient descent on ``w``. ``seed`` fixes the start vector of the
    power iteration that sets the step size.
    """
    x = np.asarray(features, dtype=float)
    y = encode_labels(labels)
    if x.ndim != 2 or x.shape[0] != y.size:
        raise ShapeError(f"features {x.shape} do not match {y.size} labels")
    if np.unique(y).size < 2:
        raise DomainError("classifier training needs both 'in' and 'out' examples")
    n = x.shape[0]
    mean = x.mean(axis=0)
    std = np.maximum(x.std(axis=0), 1e-8)
    xs = (x - mean) / std
    gram = xs @ xs.T
    # curvature bound for the logistic loss over [x, 1]
    lip = (_top_eigenvalue(gram, seed) * 1.05 + n) / (4 * n) + l2
    step = 1.0 / lip

    alpha = np.zeros(n)
    bias = 0.0
    margin = np.zeros(n)  # X w
    g_norm = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        p = 1.0 / (1.0 + np.exp(-(margin + bias)))
        r = (p - y) / n
        u = r + l2 * alpha  # grad_w = X^T u
        g_b = float(r.sum())
        gu = gram @ u
        g_norm = float(np.sqrt(max(float(u @ gu), 0.0) + g_b * g_b))
        if g_norm < tol:
            break
        alpha -= step * u
        margin -= step * gu
        bias -= step * g_b
    weights = xs.T @ alpha
    return LinearClassifier(weights, bias, mean, std, it, g_norm)


def evaluate_accuracy(clf: LinearClassifier, features, labels) -> float:
    y = encode_labels(labels)
    if y.size == 0:
        raise DomainError("accuracy of an empty set is undefined")
    return float(np.mean(clf.predict(features) == y))


# ---------------------------------------------------------------------------
# experiment


@dataclass
class OodExperimentConfig:
    challenge_types: tuple[str, ...] = tuple(CHALLENGES)
    levels: tuple[int, ...] = (5,)
    feature_kinds: tuple[str, ...] = tuple(k.value for k in ALL_KINDS)
    seed: int = 0
    sampled_activation: bool = False

    def __post_init__(self):
        self.challenge_types = tuple(self.challenge_types)
        self.levels = tuple(int(v) for v in self.levels)
        self.feature_kinds = tuple(FeatureKind(k).value for k in self.feature_kinds)
        bad = [c for c in self.challenge_types if c not in CHALLENGES]
        if bad:
            raise DomainError(f"unknown challenge types {bad}; expected among {list(CHALLENGES)}")
        if not self.levels or any(not 1 <= v <= 5 for v in self.levels):
            raise DomainError(f"levels must lie in 1..5, got {self.levels}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class OodDatasets:
    """Images for one experiment. ``challenges`` maps (code, level) to images."""

    train_clean: list
    train_blur: list
    test_clean: list
    challenges: dict = field(default_factory=dict)

    def require(self, cfg: OodExperimentConfig) -> None:
        missing = [name for name in ("train_clean", "train_blur", "test_clean")
                   if not getattr(self, name)]
        missing += [f"test/{c}/level{lv}" for c in cfg.challenge_types for lv in cfg.levels
                    if not self.challenges.get((c, lv))]
        if missing:
            raise ManifestError("missing dataset splits: " + ", ".join(missing))


@dataclass
class OodReport:
    accuracy: dict  # (feature_kind, challenge) -> mean accuracy over levels
    counts: dict  # (challenge, level) -> number of test images
    feature_kinds: tuple
    challenge_types: tuple
    train_accuracy: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["feature_kind", *self.challenge_types])
        for k in self.feature_kinds:
            w.writerow([k, *(f"{self.accuracy[(k, c)]:.4f}" for c in self.challenge_types)])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "accuracy": {k: {c: self.accuracy[(k, c)] for c in self.challenge_types}
                         for k in self.feature_kinds},
            "train_accuracy": dict(self.train_accuracy),
            "test_counts": {f"{c}/L{lv}": n for (c, lv), n in self.counts.items()},
            "blur_category": [c for c in self.challenge_types if c in BLUR_CATEGORY],
        }


def run_experiment(cfg: OodExperimentConfig, model: VaeModel, data: OodDatasets) -> OodReport:
    """Train one classifier per feature kind on clean vs. blurred training
    images and score it on balanced clean-vs-challenge test sets."""
    data.require(cfg)
    kinds = [FeatureKind(k) for k in cfg.feature_kinds]
    seeds = {name: child_seed(cfg.seed, i) for i, name in
             enumerate(("train_clean", "train_blur", "test_clean", "classifier"))}

    def feats(images, seed):
        return feature_matrices(model, images, kinds, seed, cfg.sampled_activation)

    f_clean = feats(data.train_clean, seeds["train_clean"])
    f_blur = feats(data.train_blur, seeds["train_blur"])
    y_train = [IN] * len(data.train_clean) + [OUT] * len(data.train_blur)
    clfs, train_acc = {}, {}
    for k in kinds:
        xk = np.vstack([f_clean[k], f_blur[k]])
        clfs[k] = train_classifier(xk, y_train, seed=seeds["classifier"])
        train_acc[k.value] = evaluate_accuracy(clfs[k], xk, y_train)

    f_test_clean = feats(data.test_clean, seeds["test_clean"])
    acc = {(k.value, c): [] for k in kinds for c in cfg.challenge_types}
    counts = {}
    for ci, c in enumerate(cfg.challenge_types):
        for lv in cfg.levels:
            images = data.challenges[(c, lv)]
            f_ch = feats(images, child_seed(cfg.seed, 100 + 10 * ci + lv))
            y = [IN] * len(data.test_clean) + [OUT] * len(images)
            counts[(c, lv)] = len(y)
            for k in kinds:
                acc[(k.value, c)].append(
                    evaluate_accuracy(clfs[k], np.vstack([f_test_clean[k], f_ch[k]]), y))
    table = {key: float(np.mean(v)) for key, v in acc.items()}
    return OodReport(table, counts, tuple(k.value for k in kinds),
                     tuple(cfg.challenge_types), train_acc)


def distorted_copies(images: Sequence, code: str, level: int, seed: int) -> list:
    kind = CHALLENGES[code]
    return [apply_distortion(im, DistortionSpec(kind, level, child_seed(seed, i)))
            for i, im in enumerate(images)]


def build_datasets(train_clean: Sequence, test_clean: Sequence, cfg: OodExperimentConfig
                   ) -> OodDatasets:
    """Blurred training copies and per-challenge test copies made with the
    distortion generators. Blur levels for training cycle through ``cfg.levels``."""
    blur = [apply_distortion(im, DistortionSpec("gaussian_blur", cfg.levels[i % len(cfg.levels)],
                                                child_seed(cfg.seed, 50_000 + i)))
            for i, im in enumerate(train_clean)]
    challenges = {(c, lv): distorted_copies(test_clean, c, lv, child_seed(cfg.seed, 1000 + 10 * ci + lv))
                  for ci, c in enumerate(cfg.challenge_types) for lv in cfg.levels}
    return OodDatasets(list(train_clean), blur, list(test_clean), challenges)
