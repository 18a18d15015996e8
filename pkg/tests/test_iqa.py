from dataclasses import replace

import numpy as np
import pytest

from gradspace.distort import DistortionSpec, apply_distortion
from gradspace.errors import DegenerateProjectionError, DomainError, ShapeError
from gradspace.iqa import (
    IqaConfig,
    decoder_gradient,
    evaluate_pairs,
    gradient_projection,
    iqa_score,
    latent_code,
    patch_score,
)
from gradspace.models import init_sae
from gradspace.synthetic import image_set
from gradspace.tensor import make_rng, sigmoid
from gradspace.training import fit_zca, tile_patches

FIXTURES = image_set("natural", 4, seed=300, size=32)


def direct_decoder_gradient(m, x, total=True):
    """d/dD of |x - (D s + c)|^2 (+ lam |D|^2), written out by hand."""
    s = 1.0 / (1.0 + np.exp(-(m.enc_w @ x + m.enc_b)))
    g = 2.0 * np.outer(m.dec_w @ s + m.dec_b - x, s)
    return g + 2 * m.lam * m.dec_w if total else g


class TestProjection:
    def test_matches_direct_oracle(self, rng):
        m = init_sae(12, 5, seed=3)
        a, b = rng.normal(size=12), rng.normal(size=12)
        cfg = IqaConfig(invert_nonlinearity=False)
        s_b = 1.0 / (1.0 + np.exp(-(m.enc_w @ b + m.enc_b)))
        np.testing.assert_allclose(gradient_projection(m, a, b, cfg),
                                   direct_decoder_gradient(m, a) @ s_b, rtol=1e-12)
        np.testing.assert_allclose(decoder_gradient(m, a, "decoder_recon"),
                                   direct_decoder_gradient(m, a, total=False), rtol=1e-12)

    def test_linear_in_latent(self, rng):
        m = init_sae(10, 6, seed=4)
        a = rng.normal(size=10)
        g = decoder_gradient(m, a)
        y1, y2 = rng.normal(size=6), rng.normal(size=6)
        np.testing.assert_allclose(g @ (2 * y1 - 3 * y2), 2 * (g @ y1) - 3 * (g @ y2), atol=1e-12)

    def test_inverted_latent(self, rng):
        m = init_sae(8, 4, seed=5)
        x = rng.normal(size=8)
        np.testing.assert_allclose(latent_code(m, x), m.enc_w @ x + m.enc_b, atol=1e-9)
        np.testing.assert_allclose(latent_code(m, x, False), sigmoid(m.enc_w @ x + m.enc_b))

    def test_degenerate_projection(self):
        m = init_sae(6, 3, seed=1)
        m = replace(m, dec_w=np.zeros((6, 3)))
        x = np.linspace(-1, 1, 6)
        m = replace(m, dec_b=x.copy())
        with pytest.raises(DegenerateProjectionError):
            gradient_projection(m, x, x)
        with pytest.raises(DegenerateProjectionError):
            patch_score(m, x, x, IqaConfig(gradient_source="decoder_recon"))


class TestScore:
    def test_identical_images(self, trained_sae):
        model, zca, _ = trained_sae
        for img in FIXTURES:
            for anchor in ("self", "distorted", "per_image"):
                assert iqa_score(model, zca, img, img, IqaConfig(gradient_anchor=anchor)) == 1.0

    def test_noise_lowers_score(self, trained_sae):
        model, zca, _ = trained_sae
        img = FIXTURES[0]
        scores = [iqa_score(model, zca, img,
                            apply_distortion(img, DistortionSpec("gaussian_noise", lv, seed=lv)))
                  for lv in range(6)]
        assert all(b < a for a, b in zip(scores, scores[1:])), scores

    def test_range(self, trained_sae):
        model, zca, _ = trained_sae
        r = make_rng(1)
        s = iqa_score(model, zca, FIXTURES[1], r.uniform(size=FIXTURES[1].shape))
        assert -1.0 <= s <= 1.0

    def test_offset_invariance_with_refit_whitening(self, trained_sae, rng):
        model, _, _ = trained_sae
        ref, dist = FIXTURES[2], apply_distortion(FIXTURES[2], DistortionSpec("gaussian_blur", 3))
        train = np.vstack([tile_patches(im, 8, 4) for im in FIXTURES])
        zca = fit_zca(train)
        shifted = fit_zca(train + 0.2)
        a = iqa_score(model, zca, ref, dist)
        b = iqa_score(model, shifted, ref + 0.2, dist + 0.2)
        assert b == pytest.approx(a, abs=1e-6)

    def test_too_few_patches(self, trained_sae):
        model, zca, _ = trained_sae
        img = FIXTURES[0][:8, :8]
        with pytest.raises(DomainError):
            iqa_score(model, zca, img, img)

    def test_shape_mismatch(self, trained_sae):
        model, zca, _ = trained_sae
        with pytest.raises(ShapeError):
            iqa_score(model, zca, FIXTURES[0], FIXTURES[0][:16])

    def test_config_validation(self):
        with pytest.raises(DomainError):
            IqaConfig(gradient_anchor="reference")
        with pytest.raises(DomainError):
            IqaConfig(gradient_source="encoder")

    def test_evaluate_pairs(self, trained_sae):
        model, zca, _ = trained_sae
        pairs, mos = [], []
        for i, img in enumerate(FIXTURES[:2]):
            for lv in (1, 2, 3, 4):
                pairs.append((img, apply_distortion(img, DistortionSpec("gaussian_noise", lv, seed=i))))
                mos.append(10.0 - 2 * lv + 0.1 * i)
        raw, mapped, metrics, fit = evaluate_pairs(model, zca, pairs, mos)
        assert raw.shape == mapped.shape == (8,)
        assert metrics.srcc > 0.8
