"""Acceptance suite: one test per numbered criterion.

A PASS/FAIL line for every criterion is printed in the terminal summary
(see ``conftest.py``). Run alone with ``pytest tests/test_acceptance.py``.
"""

import math
import time

import numpy as np
import pytest
from scipy.stats import norm

from gradspace.checkpoint import dumps_checkpoint, loads_checkpoint
from gradspace.distort import KINDS, DistortionSpec, apply_distortion
from gradspace.gradients import backprop_split, backprop_total, finite_diff_check, grad_total
from gradspace.iqa import IqaConfig, iqa_score, patch_scores
from gradspace.metrics import kendall, spearman
from gradspace.models import init_sae, init_vae, kl_diag_gaussian, sae_encode_pre
from gradspace.ood import OodExperimentConfig, build_datasets, feature_matrices, run_experiment
from gradspace.pipelines import SaeSettings, SyntheticOodSettings, run_synthetic_ood, train_sae_on_images
from gradspace.synthetic import image_set
from gradspace.tensor import make_rng
from gradspace.training import OptimizerConfig, apply_zca, tile_patches, train

from test_metrics import brute_kendall, brute_spearman, random_pair

FIXTURES = image_set("natural", 10, seed=200, size=32)
OOD_SEED = 0


def detail(request, text):
    request.node.user_properties.append(("detail", text))


def random_model(family, i):
    r = make_rng(10_000 + i)
    d_x, d_z = int(r.integers(2, 33)), int(r.integers(1, 17))
    if family == "sae":
        m = init_sae(d_x, d_z, seed=i)
        # random biases so every gradient path is non-trivial
        m = m.with_params({"enc_b": r.normal(0, 0.5, d_z), "dec_b": r.normal(0, 0.5, d_x)})
        return m, r.standard_normal(d_x)
    m = init_vae(d_x, int(r.integers(1, 17)), d_z, seed=i)
    m = m.with_params({k: r.normal(0, 0.5, getattr(m, k).shape)
                       for k in ("enc_b", "mu_b", "lv_b", "dec_b")})
    return m, r.uniform(0, 1, d_x)


@pytest.mark.acceptance(1, "finite-difference gradient oracle")
def test_gradient_oracle(request):
    start = time.perf_counter()
    worst = {}
    for family in ("sae", "vae"):
        for i in range(20):
            model, x = random_model(family, i)
            for term in ("recon", "reg", "total"):
                rep = finite_diff_check(model, x, 1e-5, term, seed=i, n_params=10**6)
                assert rep.n_checked == model.num_params()
                key = (family, term)
                worst[key] = max(worst.get(key, 0.0), rep.max_rel_error)
                assert rep.max_rel_error < 1e-5, (family, i, term, rep)
    elapsed = time.perf_counter() - start
    detail(request, f"worst {max(worst.values()):.2e}, {elapsed:.1f}s")
    assert elapsed < 60


@pytest.mark.acceptance(2, "analytic gradient identities")
def test_gradient_identities(request):
    for i in range(20):
        sae, x = random_model("sae", i)
        b = backprop_split(sae, x)
        for name in sae.DECODER:
            np.testing.assert_allclose(b.reg_dec[name], 2 * sae.lam * getattr(sae, name),
                                       rtol=0, atol=1e-12)
        vae, xv = random_model("vae", i)
        eps = make_rng(i).standard_normal(vae.d_z)
        bv = backprop_split(vae, xv, eps=eps)
        for g in bv.reg_dec.values():
            assert not np.any(g)
        for model, inp, e in ((sae, x, None), (vae, xv, eps)):
            split = grad_total(backprop_split(model, inp, eps=e))
            one_pass = backprop_total(model, inp, eps=e)
            for name in model.param_names():
                np.testing.assert_allclose(split[name], one_pass[name], rtol=0, atol=1e-12)
    detail(request, "20 SAE + 20 VAE models")


@pytest.mark.acceptance(3, "rank metrics match brute force exactly")
def test_rank_metric_oracles(request):
    r = make_rng(31337)
    pairs = ties = 0
    while pairs < 1000:
        a, b = random_pair(r)
        if len(set(a)) < 2 or len(set(b)) < 2:
            continue
        ties += len(set(a)) < len(a) or len(set(b)) < len(b)
        al, bl = a.tolist(), b.tolist()
        assert spearman(a, b) == brute_spearman(al, bl)
        assert kendall(a, b) == brute_kendall(al, bl)
        pairs += 1
    detail(request, f"{pairs} pairs, {ties} with ties")


@pytest.mark.acceptance(4, "IQA identity and noise monotonicity")
def test_iqa_identity_and_monotonicity(request, trained_sae):
    start = time.perf_counter()
    model, zca, _ = trained_sae
    for img in FIXTURES:
        assert iqa_score(model, zca, img, img) == 1.0
    levels = [1, 2, 3, 4, 5]
    means, baseline = [], []
    for lv in levels:
        scores, act = [], []
        for i, img in enumerate(FIXTURES):
            dist = apply_distortion(img, DistortionSpec("gaussian_noise", lv, seed=i))
            scores.append(iqa_score(model, zca, img, dist))
            # activation baseline for the report: rank correlation of latent codes
            ref_p = apply_zca(zca, tile_patches(img, 8, 8))
            dist_p = apply_zca(zca, tile_patches(dist, 8, 8))
            act.append(np.mean([spearman(sae_encode_pre(model, p), sae_encode_pre(model, q))
                                for p, q in zip(ref_p, dist_p)]))
        means.append(float(np.mean(scores)))
        baseline.append(float(np.mean(act)))
    rho = spearman(levels, means)
    elapsed = time.perf_counter() - start
    detail(request, "means " + ", ".join(f"{m:.3f}" for m in means)
           + f"; spearman {rho:.2f}; activation baseline "
           + ", ".join(f"{m:.3f}" for m in baseline) + f"; {elapsed:.1f}s + training")
    assert all(b < a for a, b in zip(means, means[1:])), means
    assert rho <= -0.9
    assert elapsed < 600


def test_iqa_training_setup(trained_sae):
    """The shared SAE fixture matches the criterion's training budget."""
    model, zca, report = trained_sae
    assert len(report.epoch_losses) == 200
    assert SaeSettings(patches_per_image=400).patches_per_image * 5 >= 2000
    assert (model.d_x, zca.dim) == (192, 192)


@pytest.mark.acceptance(5, "KL closed form vs Monte-Carlo")
def test_kl_monte_carlo(request):
    r = make_rng(0)
    worst = 0.0
    for i in range(50):
        d = int(r.integers(2, 9))
        mu = r.uniform(1.0, 2.0, d) * r.choice([-1.0, 1.0], d)
        logvar = r.uniform(-1.5, 1.5, d)
        closed = kl_diag_gaussian(mu, logvar)
        # 1e5 draws as 5e4 antithetic pairs; densities from scipy
        e = make_rng(1000 + i).standard_normal((50_000, d))
        e = np.vstack([e, -e])
        sd = np.exp(0.5 * logvar)
        z = mu + sd * e
        estimate = float(np.mean((norm.logpdf(z, mu, sd) - norm.logpdf(z)).sum(axis=1)))
        worst = max(worst, abs(estimate - closed) / closed)
    detail(request, f"worst relative error {worst:.2%}")
    assert worst < 0.01


@pytest.fixture(scope="module")
def ood_runs():
    settings = SyntheticOodSettings()
    cfg = OodExperimentConfig(seed=OOD_SEED)
    start = time.perf_counter()
    first = run_synthetic_ood(settings, cfg)
    second = run_synthetic_ood(settings, cfg)
    return settings, first, second, time.perf_counter() - start


@pytest.mark.acceptance(6, "desk-scale OOD pipeline")
def test_ood_pipeline(request, ood_runs):
    settings, (report, _, _), (again, _, _), elapsed = ood_runs
    assert settings.n_train >= 500
    csv_text = report.to_csv()
    lines = csv_text.splitlines()
    assert lines[0] == "feature_kind,DE,CE,NO,LB,DL,RA"
    assert [ln.split(",")[0] for ln in lines[1:]] == [
        "Activation", "ReconDecoderGrad", "RegEncoderGrad", "BothGrads"]
    assert csv_text.encode() == again.to_csv().encode()
    n = report.counts[("LB", 5)]
    floor = 0.5 + 3 / math.sqrt(n)
    both = {c: report.accuracy[("BothGrads", c)] for c in ("LB", "DL", "RA")}
    detail(request, "BothGrads " + ", ".join(f"{c} {v:.4f}" for c, v in both.items())
           + f"; floor {floor:.3f}; {elapsed:.0f}s for two runs")
    assert both["LB"] >= 0.90
    for c in ("LB", "DL", "RA"):
        assert both[c] >= floor, c


@pytest.mark.acceptance(7, "training sanity")
def test_training_sanity(request, trained_sae):
    _, _, report = trained_sae
    first, last = report.totals[0], report.totals[-1]
    detail(request, f"J {first:.2f} -> {last:.2f}")
    assert last <= 0.5 * first
    data = make_rng(2).standard_normal((50, 16))
    model = init_sae(16, 6, seed=3)
    frozen, _ = train(model, data, OptimizerConfig(learning_rate=0.0, epochs=2, batch_size=8))
    for name in model.param_names():
        assert getattr(model, name).tobytes() == getattr(frozen, name).tobytes()
    vae = init_vae(16, 8, 4, seed=3)
    frozen_v, _ = train(vae, make_rng(4).uniform(size=(30, 16)),
                        OptimizerConfig(learning_rate=0.0, epochs=2, batch_size=8))
    for name in vae.param_names():
        assert getattr(vae, name).tobytes() == getattr(frozen_v, name).tobytes()


@pytest.mark.acceptance(8, "determinism and persistence")
def test_determinism_and_persistence(request, trained_sae, ood_runs):
    images = image_set("natural", 2, seed=100, size=32)
    small = SaeSettings(patches_per_image=100, latent=20, epochs=3, batch_size=50)
    a = train_sae_on_images(images, small, seed=5)
    b = train_sae_on_images(images, small, seed=5)
    assert a[2].totals == b[2].totals and a[2].checksum == b[2].checksum

    # checkpoint round trip preserves IQA patch scores bit-exactly
    model, zca, _ = trained_sae
    model2, zca2, _ = loads_checkpoint(dumps_checkpoint(model, zca))
    ref = FIXTURES[0]
    dist = apply_distortion(ref, DistortionSpec("gaussian_noise", 3, seed=0))
    for anchor in ("self", "distorted", "per_image"):
        cfg = IqaConfig(gradient_anchor=anchor)
        assert (patch_scores(model, zca, ref, dist, cfg).tobytes()
                == patch_scores(model2, zca2, ref, dist, cfg).tobytes())

    # same for the OOD model: features and the whole report
    _, (report, vae, train_report), (_, _, train_again), _ = ood_runs
    assert train_report.totals == train_again.totals
    vae2, _, _ = loads_checkpoint(dumps_checkpoint(vae))
    imgs = [np.asarray(im) for im in image_set("sign", 8, seed=9, size=16)]
    kinds = ["Activation", "BothGrads"]
    f1 = feature_matrices(vae, imgs, kinds, seed=1)
    f2 = feature_matrices(vae2, imgs, kinds, seed=1)
    for k in f1:
        assert f1[k].tobytes() == f2[k].tobytes()
    cfg = OodExperimentConfig(challenge_types=("LB", "RA"), seed=2)
    train_imgs = image_set("sign", 20, seed=3, size=16)
    data = build_datasets(train_imgs, imgs, cfg)
    assert run_experiment(cfg, vae, data).to_csv() == run_experiment(cfg, vae2, data).to_csv()
    detail(request, "train reports, IQA scores, OOD features and CSVs identical")


@pytest.mark.acceptance(9, "distortion generators")
def test_distortion_generators(request):
    for kind in KINDS:
        for i, img in enumerate(FIXTURES):
            assert apply_distortion(img, DistortionSpec(kind, 0, seed=i)).tobytes() == img.tobytes()
            mse = [float(np.mean((apply_distortion(img, DistortionSpec(kind, lv, seed=i)) - img) ** 2))
                   for lv in range(6)]
            assert all(b >= a for a, b in zip(mse, mse[1:])), (kind, i, mse)
    detail(request, f"{len(KINDS)} kinds x {len(FIXTURES)} images")
