"""Sparse and variational autoencoders: parameters, forward passes, losses.

Both families use fully connected layers. The SAE has a sigmoid hidden
layer and a linear decoder and is trained on whitened patches; the VAE has a
sigmoid trunk, linear mean / log-variance heads, and a sigmoid decoder over
pixels in [0, 1]. Forward functions accept a single vector ``(d_x,)`` or a
batch ``(n, d_x)``; losses are per-example values, averaged over a batch.

All functions work in whatever float dtype the parameters carry, which lets
the finite-difference oracle evaluate them in extended precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import ClassVar, NamedTuple

import numpy as np

from gradspace.errors import DomainError, ShapeError
from gradspace.tensor import DTYPE, make_rng, sample_gaussian, sigmoid, softplus

DEFAULT_BETA = 3.0
DEFAULT_LAMBDA = 3e-3
LOGVAR_CLAMP = 10.0


@dataclass(frozen=True)
class LossBreakdown:
    recon: float
    reg: float
    total: float = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.total is None:
            object.__setattr__(self, "total", self.recon + self.reg)


class _ParamModel:
    """Shared parameter plumbing; subclasses list their parameter names."""

    family: ClassVar[str]
    ENCODER: ClassVar[tuple[str, ...]]
    DECODER: ClassVar[tuple[str, ...]]

    @classmethod
    def param_names(cls) -> tuple[str, ...]:
        return cls.ENCODER + cls.DECODER

    @property
    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.param_names()}

    def with_params(self, params: dict[str, np.ndarray]):
        for name, value in params.items():
            if name not in self.param_names():
                raise KeyError(f"unknown parameter {name!r}")
            if np.shape(value) != getattr(self, name).shape:
                raise ShapeError(
                    f"parameter {name} has shape {np.shape(value)}, "
                    f"expected {getattr(self, name).shape}"
                )
        return replace(self, **params)

    def astype(self, dtype):
        return replace(self, **{k: np.asarray(v, dtype=dtype) for k, v in self.params.items()})

    def num_params(self) -> int:
        return sum(v.size for v in self.params.values())


@dataclass(frozen=True, eq=False)
class SaeModel(_ParamModel):
    enc_w: np.ndarray  # (d_z, d_x)
    enc_b: np.ndarray  # (d_z,)
    dec_w: np.ndarray  # (d_x, d_z)
    dec_b: np.ndarray  # (d_x,)
    beta: float = DEFAULT_BETA
    lam: float = DEFAULT_LAMBDA

    family: ClassVar[str] = "sae"
    ENCODER: ClassVar[tuple[str, ...]] = ("enc_w", "enc_b")
    DECODER: ClassVar[tuple[str, ...]] = ("dec_w", "dec_b")

    def __post_init__(self):
        d_z, d_x = np.shape(self.enc_w)
        _expect(self.enc_b, (d_z,), "enc_b")
        _expect(self.dec_w, (d_x, d_z), "dec_w")
        _expect(self.dec_b, (d_x,), "dec_b")
        if not (self.beta > 0 and self.lam > 0):
            raise DomainError(f"beta and lam must be positive, got {self.beta}, {self.lam}")

    @property
    def d_x(self) -> int:
        return self.enc_w.shape[1]

    @property
    def d_z(self) -> int:
        return self.enc_w.shape[0]


@dataclass(frozen=True, eq=False)
class VaeModel(_ParamModel):
    enc_w: np.ndarray  # (d_h, d_x)
    enc_b: np.ndarray
    mu_w: np.ndarray  # (d_z, d_h)
    mu_b: np.ndarray
    lv_w: np.ndarray  # (d_z, d_h)
    lv_b: np.ndarray
    dec_w: np.ndarray  # (d_x, d_z)
    dec_b: np.ndarray
    logvar_clamp: float = LOGVAR_CLAMP

    family: ClassVar[str] = "vae"
    ENCODER: ClassVar[tuple[str, ...]] = ("enc_w", "enc_b", "mu_w", "mu_b", "lv_w", "lv_b")
    DECODER: ClassVar[tuple[str, ...]] = ("dec_w", "dec_b")

    def __post_init__(self):
        d_h, d_x = np.shape(self.enc_w)
        d_z = np.shape(self.mu_w)[0]
        _expect(self.enc_b, (d_h,), "enc_b")
        _expect(self.mu_w, (d_z, d_h), "mu_w")
        _expect(self.mu_b, (d_z,), "mu_b")
        _expect(self.lv_w, (d_z, d_h), "lv_w")
        _expect(self.lv_b, (d_z,), "lv_b")
        _expect(self.dec_w, (d_x, d_z), "dec_w")
        _expect(self.dec_b, (d_x,), "dec_b")

    @property
    def d_x(self) -> int:
        return self.enc_w.shape[1]

    @property
    def d_h(self) -> int:
        return self.enc_w.shape[0]

    @property
    def d_z(self) -> int:
        return self.mu_w.shape[0]


def _expect(arr, shape, name):
    if np.shape(arr) != shape:
        raise ShapeError(f"{name} has shape {np.shape(arr)}, expected {shape}")


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_sae(d_x: int = 192, d_z: int = 400, seed: int = 0,
             beta: float = DEFAULT_BETA, lam: float = DEFAULT_LAMBDA) -> SaeModel:
    """Weights uniform in +-1/sqrt(fan_in), biases zero."""
    rng = make_rng(seed)
    return SaeModel(
        enc_w=_uniform(rng, d_x, (d_z, d_x)),
        enc_b=np.zeros(d_z, dtype=DTYPE),
        dec_w=_uniform(rng, d_z, (d_x, d_z)),
        dec_b=np.zeros(d_x, dtype=DTYPE),
        beta=beta,
        lam=lam,
    )


def init_vae(d_x: int = 2352, d_h: int = 512, d_z: int = 32, seed: int = 0) -> VaeModel:
    rng = make_rng(seed)
    return VaeModel(
        enc_w=_uniform(rng, d_x, (d_h, d_x)),
        enc_b=np.zeros(d_h, dtype=DTYPE),
        mu_w=_uniform(rng, d_h, (d_z, d_h)),
        mu_b=np.zeros(d_z, dtype=DTYPE),
        lv_w=_uniform(rng, d_h, (d_z, d_h)),
        lv_b=np.zeros(d_z, dtype=DTYPE),
        dec_w=_uniform(rng, d_z, (d_x, d_z)),
        dec_b=np.zeros(d_x, dtype=DTYPE),
    )


# ---------------------------------------------------------------------------
# SAE


def _as_batch(x, d_x: int, name: str = "x") -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.ndim != 2 or xb.shape[1] != d_x:
        raise ShapeError(f"{name} has shape {x.shape}, expected ({d_x},) or (n, {d_x})")
    if not np.all(np.isfinite(xb)):
        raise DomainError(f"{name} contains non-finite values")
    return xb, single


def sae_encode_pre(model: SaeModel, x) -> np.ndarray:
    """Hidden pre-activations ``enc_w @ x + enc_b``."""
    xb, single = _as_batch(x, model.d_x)
    a = xb @ model.enc_w.T + model.enc_b
    return a[0] if single else a


def sae_forward(model: SaeModel, x):
    """Returns ``(z_s, x_rec)``: sigmoid latent and linear reconstruction."""
    xb, single = _as_batch(x, model.d_x)
    z = sigmoid(xb @ model.enc_w.T + model.enc_b)
    x_rec = z @ model.dec_w.T + model.dec_b
    if single:
        return z[0], x_rec[0]
    return z, x_rec


def weight_sq_norm(model: _ParamModel):
    return sum(np.sum(v * v) for v in model.params.values())


def sae_loss(model: SaeModel, x) -> LossBreakdown:
    """Squared reconstruction error plus elastic-net style regularizer.

    For a batch, the per-example losses are averaged; the weight penalty is
    per-example, so it appears once in the mean.
    """
    xb, _ = _as_batch(x, model.d_x)
    z, x_rec = sae_forward(model, xb)
    recon = np.mean(np.sum((xb - x_rec) ** 2, axis=1))
    reg = model.beta * np.mean(np.sum(np.abs(z), axis=1)) + model.lam * weight_sq_norm(model)
    return LossBreakdown(recon=recon, reg=reg)


# ---------------------------------------------------------------------------
# VAE


class VaeForward(NamedTuple):
    mu: np.ndarray
    logvar: np.ndarray
    z: np.ndarray
    x_rec: np.ndarray


class _VaeCache(NamedTuple):
    x: np.ndarray
    h: np.ndarray
    mu: np.ndarray
    logvar_raw: np.ndarray
    logvar: np.ndarray
    eps: np.ndarray
    z: np.ndarray
    logits: np.ndarray
    single: bool


def check_unit_range(x, name: str = "x") -> None:
    x = np.asarray(x)
    if np.any(x < 0) or np.any(x > 1) or not np.all(np.isfinite(x)):
        raise DomainError(f"{name} must lie in [0, 1] (Bernoulli likelihood)")


def draw_eps(model: VaeModel, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    shape = (model.d_z,) if n is None else (n, model.d_z)
    return sample_gaussian(rng, shape)


def vae_encode(model: VaeModel, x):
    """Posterior mean and clamped log-variance."""
    xb, single = _as_batch(x, model.d_x)
    h = sigmoid(xb @ model.enc_w.T + model.enc_b)
    mu = h @ model.mu_w.T + model.mu_b
    logvar = np.clip(h @ model.lv_w.T + model.lv_b, -model.logvar_clamp, model.logvar_clamp)
    if single:
        return mu[0], logvar[0]
    return mu, logvar


def _vae_cache(model: VaeModel, x, rng=None, eps=None) -> _VaeCache:
    xb, single = _as_batch(x, model.d_x)
    check_unit_range(xb)
    n = xb.shape[0]
    if eps is None:
        if rng is None:
            raise ValueError("vae forward needs either rng or eps")
        eps = draw_eps(model, rng, None if single else n)
    eps = np.asarray(eps)
    eb = eps[None, :] if eps.ndim == 1 else eps
    if eb.shape != (n, model.d_z):
        raise ShapeError(f"eps has shape {eps.shape}, expected ({n}, {model.d_z})")
    h = sigmoid(xb @ model.enc_w.T + model.enc_b)
    mu = h @ model.mu_w.T + model.mu_b
    lv_raw = h @ model.lv_w.T + model.lv_b
    lv = np.clip(lv_raw, -model.logvar_clamp, model.logvar_clamp)
    z = mu + np.exp(0.5 * lv) * eb
    logits = z @ model.dec_w.T + model.dec_b
    return _VaeCache(xb, h, mu, lv_raw, lv, eb, z, logits, single)


def vae_forward(model: VaeModel, x, rng: np.random.Generator | None = None,
                eps: np.ndarray | None = None) -> VaeForward:
    """Reparameterized forward pass; ``eps`` overrides the draw from ``rng``."""
    c = _vae_cache(model, x, rng, eps)
    out = VaeForward(c.mu, c.logvar, c.z, sigmoid(c.logits))
    if c.single:
        return VaeForward(*(a[0] for a in out))
    return out


def kl_diag_gaussian(mu, logvar) -> float:
    """KL(N(mu, diag(exp(logvar))) || N(0, I))."""
    mu = np.asarray(mu)
    logvar = np.asarray(logvar)
    if mu.shape != logvar.shape:
        raise ShapeError(f"mu {mu.shape} and logvar {logvar.shape} differ")
    return 0.5 * np.sum(mu * mu + np.exp(logvar) - logvar - 1.0)


def _vae_terms(c: _VaeCache):
    # Bernoulli NLL in logit form: softplus(a) - x * a
    recon = np.mean(np.sum(softplus(c.logits) - c.x * c.logits, axis=1))
    kl = 0.5 * np.sum(c.mu * c.mu + np.exp(c.logvar) - c.logvar - 1.0, axis=1)
    return recon, np.mean(kl)


def vae_loss(model: VaeModel, x, rng: np.random.Generator | None = None,
             eps: np.ndarray | None = None) -> LossBreakdown:
    """Single-sample Bernoulli reconstruction NLL plus closed-form KL."""
    recon, reg = _vae_terms(_vae_cache(model, x, rng, eps))
    return LossBreakdown(recon=recon, reg=reg)


def loss(model, x, rng=None, eps=None) -> LossBreakdown:
    """Loss breakdown for either family."""
    if isinstance(model, SaeModel):
        return sae_loss(model, x)
    if isinstance(model, VaeModel):
        return vae_loss(model, x, rng, eps)
    raise TypeError(f"unsupported model {type(model).__name__}")
