"""Patch pipeline, ZCA whitening, optimizers and the training loop."""

from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from gradspace.errors import DomainError, ShapeError, TrainingDivergedError
from gradspace.gradients import batch_objective
from gradspace.models import LossBreakdown
from gradspace.tensor import DTYPE, child_seed, make_rng

log = logging.getLogger(__name__)

DEFAULT_ZCA_EPSILON = 0.1


# ---------------------------------------------------------------------------
# patches and whitening


def extract_patches(image: np.ndarray, size: int, count: int,
                    rng: np.random.Generator) -> list[np.ndarray]:
    """``count`` random ``size x size`` crops, each flattened row-major (H, W, C)."""
    image = np.asarray(image, dtype=DTYPE)
    if image.ndim != 3:
        raise ShapeError(f"image must be H x W x C, got shape {image.shape}")
    h, w, _ = image.shape
    if size > min(h, w):
        raise DomainError(f"patch size {size} exceeds image size {h}x{w}")
    if count < 1:
        raise DomainError("count must be at least 1")
    rows = rng.integers(0, h - size + 1, size=count)
    cols = rng.integers(0, w - size + 1, size=count)
    return [image[r:r + size, c:c + size, :].reshape(-1).copy() for r, c in zip(rows, cols)]


def tile_patches(image: np.ndarray, size: int, stride: int) -> np.ndarray:
    """Aligned patches on a regular grid, shape ``(n_patches, size*size*C)``."""
    image = np.asarray(image, dtype=DTYPE)
    h, w, _ = image.shape
    if size > min(h, w):
        raise DomainError(f"patch size {size} exceeds image size {h}x{w}")
    if stride < 1:
        raise DomainError("stride must be >= 1")
    out = [image[r:r + size, c:c + size, :].reshape(-1)
           for r in range(0, h - size + 1, stride)
           for c in range(0, w - size + 1, stride)]
    return np.stack(out)


@dataclass(frozen=True, eq=False)
class ZcaTransform:
    mean: np.ndarray
    whitening_matrix: np.ndarray
    epsilon: float = DEFAULT_ZCA_EPSILON

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def fit_zca(patches, epsilon: float = DEFAULT_ZCA_EPSILON) -> ZcaTransform:
    """Mean and symmetric whitening matrix ``U diag(1/sqrt(s + eps)) U^T``.

    The covariance is the biased sample covariance (divides by n).
    """
    x = np.asarray(patches, dtype=DTYPE)
    if x.ndim != 2:
        raise ShapeError(f"patches must be (n, d), got {x.shape}")
    n, d = x.shape
    if n < d + 1:
        raise DomainError(f"need at least {d + 1} patches to whiten dimension {d}, got {n}")
    if epsilon <= 0:
        raise DomainError("epsilon must be positive")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / n
    s, u = np.linalg.eigh((cov + cov.T) / 2)
    s = np.clip(s, 0.0, None)
    w = (u * (1.0 / np.sqrt(s + epsilon))) @ u.T
    return ZcaTransform(mean, (w + w.T) / 2, float(epsilon))


def apply_zca(t: ZcaTransform, patch) -> np.ndarray:
    """``W (patch - mean)`` for a single patch or a batch of rows."""
    p = np.asarray(patch, dtype=DTYPE)
    if p.shape[-1] != t.dim or p.ndim > 2:
        raise ShapeError(f"patch has shape {p.shape}, transform expects dimension {t.dim}")
    return (p - t.mean) @ t.whitening_matrix.T


def coloring_matrix(t: ZcaTransform) -> np.ndarray:
    """Inverse of the whitening matrix."""
    s, u = np.linalg.eigh(t.whitening_matrix)
    return (u / s) @ u.T


def resize_bilinear(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize with half-pixel centers and edge clamping."""
    image = np.asarray(image, dtype=DTYPE)
    h, w = image.shape[:2]
    if (h, w) == (height, width):
        return image.copy()

    def axis(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    r0, r1, fr = axis(h, height)
    c0, c1, fc = axis(w, width)
    top = image[r0] * (1 - fr)[:, None, None] + image[r1] * fr[:, None, None]
    return top[:, c0] * (1 - fc)[None, :, None] + top[:, c1] * fc[None, :, None]


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class OptimizerConfig:
    kind: str = "adam"  # "adam" | "sgd_momentum"
    learning_rate: float = 1e-3
    momentum: float = 0.9  # beta1 for adam
    beta2: float = 0.999
    epochs: int = 10
    batch_size: int = 64
    seed: int = 0
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("adam", "sgd_momentum"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if not (np.isfinite(self.learning_rate) and self.learning_rate >= 0):
            raise ValueError("learning_rate must be finite and non-negative")
        if not (0 <= self.momentum < 1 and 0 <= self.beta2 < 1):
            raise ValueError("momentum and beta2 must lie in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")


class SgdMomentum:
    def __init__(self, cfg: OptimizerConfig):
        self.lr = cfg.learning_rate
        self.mu = cfg.momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params, grads):
        out = {}
        for k, p in params.items():
            v = self.mu * self.velocity.get(k, 0.0) + grads[k]
            self.velocity[k] = v
            out[k] = p - self.lr * v
        return out


class Adam:
    def __init__(self, cfg: OptimizerConfig):
        self.lr = cfg.learning_rate
        self.b1, self.b2, self.eps = cfg.momentum, cfg.beta2, cfg.adam_eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        out = {}
        for k, p in params.items():
            g = grads[k]
            m = self.b1 * self.m.get(k, 0.0) + (1 - self.b1) * g
            v = self.b2 * self.v.get(k, 0.0) + (1 - self.b2) * g * g
            self.m[k], self.v[k] = m, v
            out[k] = p - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out


def make_optimizer(cfg: OptimizerConfig):
    return Adam(cfg) if cfg.kind == "adam" else SgdMomentum(cfg)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainReport:
    epoch_losses: list[LossBreakdown] = field(default_factory=list)
    checksum: str = ""
    seconds: float = 0.0

    @property
    def totals(self) -> list[float]:
        return [float(lb.total) for lb in self.epoch_losses]

    def to_dict(self) -> dict:
        return {
            "epochs": [{"recon": float(lb.recon), "reg": float(lb.reg), "total": float(lb.total)}
                       for lb in self.epoch_losses],
            "checksum": self.checksum,
            "seconds": self.seconds,
        }


def model_checksum(model) -> str:
    h = hashlib.sha256()
    for name, value in model.params.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(value, dtype="<f8").tobytes())
    return h.hexdigest()


Objective = Callable[[object, np.ndarray, np.random.Generator], tuple[LossBreakdown, dict]]


def train(model, dataset: Sequence[np.ndarray], config: OptimizerConfig,
          objective: Objective | None = None):
    """Minibatch descent on the total loss; returns ``(model, TrainReport)``.

    Epoch order is a seeded permutation of the data and the last partial
    batch is kept. The reported epoch loss is the example-weighted mean of
    the batch losses, each measured before its update.
    """
    data = np.asarray(dataset, dtype=DTYPE)
    if data.ndim != 2 or data.shape[0] == 0:
        raise DomainError("dataset must be a non-empty list of flat vectors")
    objective = objective or batch_objective
    shuffle_rng = make_rng(child_seed(config.seed, 0))
    noise_rng = make_rng(child_seed(config.seed, 1))
    opt = make_optimizer(config)
    report = TrainReport()
    start = time.perf_counter()
    n = data.shape[0]
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(n)
        recon = reg = 0.0
        for lo in range(0, n, config.batch_size):
            batch = data[order[lo:lo + config.batch_size]]
            lb, grads = objective(model, batch, noise_rng)
            recon += float(lb.recon) * len(batch)
            reg += float(lb.reg) * len(batch)
            if config.learning_rate > 0:
                model = model.with_params(opt.step(model.params, grads))
        mean = LossBreakdown(recon / n, reg / n)
        if not np.isfinite(mean.total):
            raise TrainingDivergedError(f"epoch {epoch}: mean loss became non-finite ({mean.total})")
        report.epoch_losses.append(mean)
        log.debug("epoch %d  recon %.6g  reg %.6g", epoch, mean.recon, mean.reg)
    report.seconds = time.perf_counter() - start
    report.checksum = model_checksum(model)
    return model, report
