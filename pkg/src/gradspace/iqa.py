"""Full-reference quality estimation by projection onto decoder gradients.

Both images are cut into aligned patches and whitened with the SAE's
training transform. A decoder weight gradient (d_x x d_z, same layout as the
decoder weights) acts as a projection matrix: a patch's latent code, mapped
back through the sigmoid inverse, is multiplied by it. The Spearman
correlation between the reference and distorted projections is the patch
score; the image score is the mean over patches.

Anchor modes choose whose gradient each patch is projected on:

``self``       each patch on its own gradient (default)
``distorted``  both patches on the distorted patch's gradient
``per_image``  no projection; the two flattened gradients are correlated

With the distorted anchor the reconstruction part of the gradient is the
rank-one matrix ``2 (x_rec - x) z^T``, so both projections are nearly
parallel and the score stays within ~1e-6 of 1 regardless of distortion.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from gradspace.errors import DegenerateProjectionError, DomainError, ShapeError
from gradspace.gradients import backprop_split
from gradspace.metrics import spearman
from gradspace.models import SaeModel, sae_encode_pre
from gradspace.tensor import logit, sigmoid
from gradspace.training import ZcaTransform, apply_zca, tile_patches

LATENT_CLAMP = 1e-6
ANCHORS = ("self", "distorted", "per_image")


@dataclass(frozen=True)
class IqaConfig:
    patch_size: int = 8
    patch_stride: int = 8
    gradient_source: str = "decoder_total"  # or "decoder_recon"
    gradient_anchor: str = "self"  # "self" | "distorted" | "per_image"
    invert_nonlinearity: bool = True

    def __post_init__(self):
        if self.patch_stride < 1 or self.patch_size < 1:
            raise DomainError("patch_size and patch_stride must be >= 1")
        if self.gradient_source not in ("decoder_total", "decoder_recon"):
            raise DomainError(f"unknown gradient_source {self.gradient_source!r}")
        if self.gradient_anchor not in ANCHORS:
            raise DomainError(f"unknown gradient_anchor {self.gradient_anchor!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def decoder_gradient(model: SaeModel, patch, source: str = "decoder_total") -> np.ndarray:
    """Gradient of the chosen loss w.r.t. the decoder weight matrix."""
    bundle = backprop_split(model, patch)
    g = bundle.recon_dec["dec_w"]
    if source == "decoder_total":
        g = g + bundle.reg_dec["dec_w"]
    return g


def latent_code(model: SaeModel, patch, invert_nonlinearity: bool = True) -> np.ndarray:
    """Sigmoid latent, or its clamped logit when inverting the nonlinearity."""
    z = sigmoid(sae_encode_pre(model, patch))
    return logit(z, LATENT_CLAMP) if invert_nonlinearity else z


def gradient_projection(model: SaeModel, anchor_patch, target_patch,
                        cfg: IqaConfig = IqaConfig()) -> np.ndarray:
    """Project ``target_patch`` onto the decoder gradient taken at ``anchor_patch``.

    Both patches must already be whitened. Raises
    DegenerateProjectionError when the gradient is identically zero.
    """
    g = decoder_gradient(model, anchor_patch, cfg.gradient_source)
    if not np.any(g):
        raise DegenerateProjectionError(
            f"decoder gradient ({cfg.gradient_source}) is zero at the anchor patch")
    return g @ latent_code(model, target_patch, cfg.invert_nonlinearity)


def _projection_with_fallback(model, anchor, target, cfg):
    try:
        return gradient_projection(model, anchor, target, cfg)
    except DegenerateProjectionError:
        if cfg.gradient_source == "decoder_total":
            raise
        total = IqaConfig(**{**cfg.to_dict(), "gradient_source": "decoder_total"})
        return gradient_projection(model, anchor, target, total)


def patch_score(model: SaeModel, ref_patch, dist_patch, cfg: IqaConfig = IqaConfig()) -> float:
    if cfg.gradient_anchor == "self":
        p_ref = _projection_with_fallback(model, ref_patch, ref_patch, cfg)
        p_dist = _projection_with_fallback(model, dist_patch, dist_patch, cfg)
        return spearman(p_ref, p_dist)
    if cfg.gradient_anchor == "distorted":
        p_ref = _projection_with_fallback(model, dist_patch, ref_patch, cfg)
        p_dist = _projection_with_fallback(model, dist_patch, dist_patch, cfg)
        return spearman(p_ref, p_dist)
    g_ref = decoder_gradient(model, ref_patch, cfg.gradient_source)
    g_dist = decoder_gradient(model, dist_patch, cfg.gradient_source)
    return spearman(g_ref.ravel(), g_dist.ravel())


def patch_scores(model: SaeModel, zca: ZcaTransform, ref_image, dist_image,
                 cfg: IqaConfig = IqaConfig()) -> np.ndarray:
    ref_image = np.asarray(ref_image, dtype=float)
    dist_image = np.asarray(dist_image, dtype=float)
    if ref_image.shape != dist_image.shape:
        raise ShapeError(f"image shapes differ: {ref_image.shape} vs {dist_image.shape}")
    ref = apply_zca(zca, tile_patches(ref_image, cfg.patch_size, cfg.patch_stride))
    dist = apply_zca(zca, tile_patches(dist_image, cfg.patch_size, cfg.patch_stride))
    if len(ref) < 2:
        raise DomainError(f"need at least 2 patches, image yields {len(ref)}")
    return np.array([patch_score(model, r, d, cfg) for r, d in zip(ref, dist)])


def iqa_score(model: SaeModel, zca: ZcaTransform, ref_image, dist_image,
              cfg: IqaConfig = IqaConfig()) -> float:
    """Mean patch Spearman correlation; 1.0 for identical images."""
    return float(np.mean(patch_scores(model, zca, ref_image, dist_image, cfg)))


def evaluate_pairs(model: SaeModel, zca: ZcaTransform, pairs, subjective, subjective_std=None,
                   cfg: IqaConfig = IqaConfig(), seed: int = 0):
    """Score (reference, distorted) image pairs and compare with subjective scores.

    Returns ``(raw_scores, mapped_scores, EvalMetrics, LogisticFit)``. Raw
    scores are the correlations themselves; only the metric block uses the
    logistic mapping.
    """
    from gradspace.metrics import evaluate_scores

    raw = np.array([iqa_score(model, zca, ref, dist, cfg) for ref, dist in pairs])
    metrics, fit, mapped = evaluate_scores(raw, subjective, subjective_std, seed=seed)
    return raw, mapped, metrics, fit
