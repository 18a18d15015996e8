"""Loss-term separated backpropagation for the SAE and VAE.

A single forward pass is followed by two backward passes, one per loss term
(reconstruction and regularization). Each pass yields gradients for both the
encoder and the decoder parameters, so a test input produces four gradient
sets. Their sum is the gradient of the total loss.

Batched inputs ``(n, d_x)`` give gradients of the batch-mean loss.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from gradspace.errors import DomainError
from gradspace.models import (
    LossBreakdown,
    SaeModel,
    VaeModel,
    _as_batch,
    _vae_cache,
    loss,
)
from gradspace.tensor import make_rng, sigmoid

Grads = dict[str, np.ndarray]


@dataclass(frozen=True)
class GradientBundle:
    family: str
    recon_enc: Grads
    recon_dec: Grads
    reg_enc: Grads
    reg_dec: Grads

    def recon(self) -> Grads:
        return {**self.recon_enc, **self.recon_dec}

    def reg(self) -> Grads:
        return {**self.reg_enc, **self.reg_dec}

    def term(self, name: str) -> Grads:
        if name == "recon":
            return self.recon()
        if name == "reg":
            return self.reg()
        if name == "total":
            return grad_total(self)
        raise ValueError(f"unknown loss term {name!r}")


def grad_total(bundle: GradientBundle) -> Grads:
    """Per-parameter gradient of the total loss: recon block plus reg block."""
    recon, reg = bundle.recon(), bundle.reg()
    return {k: recon[k] + reg[k] for k in recon}


def _split(grads: Grads, model) -> tuple[Grads, Grads]:
    return ({k: grads[k] for k in model.ENCODER}, {k: grads[k] for k in model.DECODER})


# ---------------------------------------------------------------------------
# SAE


def _sae_backward(model: SaeModel, xb, z, up_z, up_xrec) -> Grads:
    """Backward through decoder (from ``up_xrec``) and encoder (from ``up_z``)."""
    n = xb.shape[0]
    g_dec_w = up_xrec.T @ z / n
    g_dec_b = up_xrec.sum(axis=0) / n
    d_a = (up_z + up_xrec @ model.dec_w) * z * (1.0 - z)
    g_enc_w = d_a.T @ xb / n
    g_enc_b = d_a.sum(axis=0) / n
    return {"enc_w": g_enc_w, "enc_b": g_enc_b, "dec_w": g_dec_w, "dec_b": g_dec_b}


def _sae_split(model: SaeModel, x):
    xb, _ = _as_batch(x, model.d_x)
    z = sigmoid(xb @ model.enc_w.T + model.enc_b)
    x_rec = z @ model.dec_w.T + model.dec_b
    zeros_z = np.zeros_like(z)
    zeros_x = np.zeros_like(x_rec)

    recon = _sae_backward(model, xb, z, zeros_z, 2.0 * (x_rec - xb))
    # reg: beta * |z|_1 reaches the encoder through z; sign(0) := 0
    reg = _sae_backward(model, xb, z, model.beta * np.sign(z), zeros_x)
    for k, v in model.params.items():
        reg[k] = reg[k] + 2.0 * model.lam * v
    return recon, reg


def _sae_total(model: SaeModel, x) -> Grads:
    xb, _ = _as_batch(x, model.d_x)
    z = sigmoid(xb @ model.enc_w.T + model.enc_b)
    x_rec = z @ model.dec_w.T + model.dec_b
    g = _sae_backward(model, xb, z, model.beta * np.sign(z), 2.0 * (x_rec - xb))
    return {k: g[k] + 2.0 * model.lam * v for k, v in model.params.items()}


# ---------------------------------------------------------------------------
# VAE


def _vae_backward(model: VaeModel, c, up_mu, up_lv, up_logits) -> Grads:
    n = c.x.shape[0]
    g_dec_w = up_logits.T @ c.z / n
    g_dec_b = up_logits.sum(axis=0) / n
    d_z = up_logits @ model.dec_w
    std = np.exp(0.5 * c.logvar)
    d_mu = up_mu + d_z
    clamp = model.logvar_clamp
    inside = (c.logvar_raw > -clamp) & (c.logvar_raw < clamp)
    d_lv = (up_lv + d_z * c.eps * 0.5 * std) * inside
    d_h = d_mu @ model.mu_w + d_lv @ model.lv_w
    d_ah = d_h * c.h * (1.0 - c.h)
    return {
        "enc_w": d_ah.T @ c.x / n,
        "enc_b": d_ah.sum(axis=0) / n,
        "mu_w": d_mu.T @ c.h / n,
        "mu_b": d_mu.sum(axis=0) / n,
        "lv_w": d_lv.T @ c.h / n,
        "lv_b": d_lv.sum(axis=0) / n,
        "dec_w": g_dec_w,
        "dec_b": g_dec_b,
    }


def _vae_split(model: VaeModel, x, eps):
    c = _vae_cache(model, x, eps=eps)
    zeros_z = np.zeros_like(c.mu)
    recon = _vae_backward(model, c, zeros_z, zeros_z, sigmoid(c.logits) - c.x)
    reg = _vae_backward(model, c, c.mu, 0.5 * (np.exp(c.logvar) - 1.0),
                        np.zeros_like(c.logits))
    return recon, reg


def _vae_total(model: VaeModel, x, eps) -> Grads:
    c = _vae_cache(model, x, eps=eps)
    return _vae_backward(model, c, c.mu, 0.5 * (np.exp(c.logvar) - 1.0),
                         sigmoid(c.logits) - c.x)


# ---------------------------------------------------------------------------
# public entry points


def _resolve_eps(model, x, rng, eps):
    if not isinstance(model, VaeModel) or eps is not None:
        return eps
    if rng is None:
        raise ValueError("VAE gradients need rng or eps so the noise draw is explicit")
    xb = np.asarray(x)
    shape = (model.d_z,) if xb.ndim == 1 else (xb.shape[0], model.d_z)
    return rng.standard_normal(shape)


def backprop_split(model, x, rng: np.random.Generator | None = None,
                   eps: np.ndarray | None = None) -> GradientBundle:
    """The four loss-term gradient sets for input ``x``.

    For the VAE one noise draw serves both backward passes; pass ``eps`` to
    pin it, otherwise it is drawn from ``rng``.
    """
    if isinstance(model, SaeModel):
        recon, reg = _sae_split(model, x)
    elif isinstance(model, VaeModel):
        recon, reg = _vae_split(model, x, _resolve_eps(model, x, rng, eps))
    else:
        raise TypeError(f"unsupported model {type(model).__name__}")
    r_enc, r_dec = _split(recon, model)
    g_enc, g_dec = _split(reg, model)
    return GradientBundle(model.family, r_enc, r_dec, g_enc, g_dec)


def backprop_total(model, x, rng=None, eps=None) -> Grads:
    """Gradient of the total loss in a single backward pass."""
    if isinstance(model, SaeModel):
        return _sae_total(model, x)
    if isinstance(model, VaeModel):
        return _vae_total(model, x, _resolve_eps(model, x, rng, eps))
    raise TypeError(f"unsupported model {type(model).__name__}")


def batch_objective(model, xb: np.ndarray, rng: np.random.Generator | None = None
                    ) -> tuple[LossBreakdown, Grads]:
    """Batch-mean loss and its total gradient; the training objective."""
    eps = _resolve_eps(model, xb, rng, None)
    return loss(model, xb, eps=eps), backprop_total(model, xb, eps=eps)


# ---------------------------------------------------------------------------
# last-layer features


class LayerSelector(str, Enum):
    RECON_DECODER_LAST = "ReconDecoderLast"
    REG_ENCODER_LAST = "RegEncoderLast"


def last_layer_features(bundle: GradientBundle, selector: LayerSelector | str) -> np.ndarray:
    """Flattened final-layer weight gradient of one loss-term block.

    ``ReconDecoderLast``: reconstruction-loss gradient of the decoder output
    layer, weights then bias. ``RegEncoderLast``: regularization-loss gradient
    of the encoder heads, ordered mu weights, mu bias, logvar weights, logvar
    bias. Each tensor is flattened row-major.
    """
    selector = LayerSelector(selector)
    if bundle.family != "vae":
        raise DomainError(f"{selector.value} features are defined for VAE bundles, got {bundle.family}")
    if selector is LayerSelector.RECON_DECODER_LAST:
        parts = [bundle.recon_dec["dec_w"], bundle.recon_dec["dec_b"]]
    else:
        parts = [bundle.reg_enc[k] for k in ("mu_w", "mu_b", "lv_w", "lv_b")]
    return np.concatenate([p.ravel() for p in parts])


# ---------------------------------------------------------------------------
# finite-difference oracle


@dataclass(frozen=True)
class FiniteDiffReport:
    max_rel_error: float
    worst_parameter: str
    epsilon: float
    term: str = "total"
    n_checked: int = 0


def _term_value(lb: LossBreakdown, term: str):
    return {"recon": lb.recon, "reg": lb.reg, "total": lb.recon + lb.reg}[term]


def finite_diff_check(model, x, epsilon: float = 1e-5, term: str = "total",
                      seed: int | None = None, n_params: int = 200,
                      sample_seed: int = 0, dtype=np.longdouble) -> FiniteDiffReport:
    """Compare analytic gradients against central differences.

    ``n_params`` scalar parameters are sampled without replacement (all of
    them when the model is smaller). Loss evaluations run in ``dtype``;
    the default extended precision keeps cancellation error well below the
    truncation error at the given ``epsilon``. For the VAE ``seed`` is
    required: it fixes the noise draw shared by every evaluation.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon must lie in [1e-7, 1e-3], got {epsilon}")
    if term not in ("recon", "reg", "total"):
        raise ValueError(f"unknown loss term {term!r}")
    eps = None
    if isinstance(model, VaeModel):
        if seed is None:
            raise ValueError("finite-difference check of a VAE requires a fixed seed")
        xb = np.asarray(x)
        eps = make_rng(seed).standard_normal(
            (model.d_z,) if xb.ndim == 1 else (xb.shape[0], model.d_z))

    analytic = backprop_split(model, x, eps=eps).term(term)

    hi = model.astype(dtype)
    x_hi = np.asarray(x, dtype=dtype)
    eps_hi = None if eps is None else np.asarray(eps, dtype=dtype)
    h = dtype(epsilon)

    def evaluate(m):
        return _term_value(loss(m, x_hi, eps=eps_hi), term)

    index = [(name, i) for name in model.param_names() for i in range(getattr(model, name).size)]
    rng = make_rng(sample_seed)
    if len(index) > n_params:
        picks = rng.choice(len(index), size=n_params, replace=False)
        index = [index[i] for i in sorted(picks)]

    worst, worst_name = 0.0, ""
    base = hi.params
    for name, i in index:
        p = base[name]
        flat = p.ravel().copy()
        w0 = flat[i]
        flat[i] = w0 + h
        plus = evaluate(hi.with_params({name: flat.reshape(p.shape)}))
        flat[i] = w0 - h
        minus = evaluate(hi.with_params({name: flat.reshape(p.shape)}))
        numeric = float((plus - minus) / (2 * h))
        a = float(analytic[name].ravel()[i])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        if rel > worst or not worst_name:
            worst, worst_name = rel, f"{name}[{i}]"
    return FiniteDiffReport(worst, worst_name, epsilon, term, len(index))
