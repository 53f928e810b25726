"""Deterministic fixed-weight surrogate networks.

A seeded random-weight encoder-decoder stands in for the face-swapping
generator, and a seeded random-weight CNN embedder provides the identity
representation behind the cosine-similarity metric. Freezing random
weights keeps every experiment bit-reproducible; the perturbation method
only needs the generator to be differentiable and nontrivial.

The ``blur_bottleneck`` swap variant prepends a fixed Gaussian blur so the
generator discards high-frequency content; it is the standard rig for
exercising blur-family defensive bottlenecks in tests.
"""

from __future__ import annotations

import numpy as np

from .autodiff import (
    DEFAULT_DTYPE,
    Clamp01,
    Conv2d,
    DiffStage,
    GlobalAvgPool,
    Linear,
    Pipeline,
    ReLU,
    Sigmoid,
    Upsample2x,
)
from .errors import ShapeError
from .seeding import rng_from
from .transforms import gaussian_psf, stencil_forward, stencil_vjp

EMBED_DIM = 64


def he_conv(rng, out_ch, in_ch, k, dtype, zero_dc=False):
    fan_in = in_ch * k * k
    w = rng.standard_normal((out_ch, in_ch, k, k)) * np.sqrt(2.0 / fan_in)
    if zero_dc:
        # zero filter means: band-pass filters respond to structure, not to
        # the smooth content natural images mostly differ in
        w = w - w.mean(axis=(2, 3), keepdims=True)
    return w.astype(dtype)


def he_linear(rng, out_n, in_n, dtype):
    return (rng.standard_normal((out_n, in_n)) * np.sqrt(2.0 / in_n)).astype(dtype)


CALIBRATION_SEED = 0xE017  # fixed internal seed; calibration is data-free
_N_CALIB = 32


def _calibration_images(dtype):
    """Seeded face-like composites matching the synthetic data statistics."""
    from .images import synth_image

    return [synth_image(CALIBRATION_SEED, i, 32, 32, dtype) for i in range(_N_CALIB)]


class FixedGaussBlur(DiffStage):
    """Non-trainable Gaussian blur stage (replicate padding, exact VJP)."""

    name = "fixed_gaussblur"

    def __init__(self, sigma: float, dtype=DEFAULT_DTYPE):
        self.psf = gaussian_psf(sigma, dtype)

    def forward(self, x):
        return stencil_forward(x, self.psf), x.shape

    def vjp(self, ctx, grad_out):
        return stencil_vjp(grad_out, self.psf, ctx[1], ctx[2])


class NormalizeL2(DiffStage):
    name = "l2_normalize"

    def forward(self, x):
        norm = float(np.linalg.norm(x))
        norm = max(norm, 1e-12)
        y = x / norm
        return y, (y, norm)

    def vjp(self, ctx, grad_out):
        y, norm = ctx
        return (grad_out - y * np.dot(y, grad_out)) / norm


def _check_swap_shape(x, name):
    if x.ndim != 3 or x.shape[0] != 3:
        raise ShapeError(f"{name}: expected (3,H,W), got {x.shape}")
    h, w = x.shape[1], x.shape[2]
    if not (8 <= h <= 256 and 8 <= w <= 256) or h % 4 or w % 4:
        raise ShapeError(f"{name}: H,W must be multiples of 4 in [8,256], got {h}x{w}")


SWAP_VARIANTS = ("toy", "blur_bottleneck")


class SwapModel:
    """Frozen generator; ``target`` input reserved, unused.

    Mirrors the structure of identity-conditioned face swappers at desk
    scale. The encoder's pooled features form an "identity code" that
    drives a bounded per-channel color shift; the output keeps the input's
    channel means (identity preservation) plus that shift plus a textured
    decoder residual:

        F(x) = clamp01(mean_c(x) + s_c * tanh(W (gap(enc(x)) - ref))
                                  + s_r * (dec(enc(x)) - 0.5))

    W is rescaled at construction (on a seeded calibration batch) so
    natural images land in tanh's linear region: clean swaps track the
    source's color statistics, while perturbations that steer the code
    saturate the shift and corrupt them. The ``blur_bottleneck`` variant
    low-passes the encoder input, so only blur-surviving perturbations
    reach the code.
    """

    def __init__(self, seed: int = 0, variant: str = "toy", dtype=DEFAULT_DTYPE,
                 residual_scale: float = 0.4, shift_scale: float = 0.6,
                 target_pre_std: float = 0.6):
        if variant not in SWAP_VARIANTS:
            raise ValueError(f"unknown swap variant {variant!r}; expected one of {SWAP_VARIANTS}")
        rng = rng_from(seed, "swap-model", variant)
        enc_stages = []
        if variant == "blur_bottleneck":
            enc_stages.append(FixedGaussBlur(1.5, dtype))
        enc_stages += [
            Conv2d(he_conv(rng, 16, 3, 3, dtype, zero_dc=True), stride=2, padding="same"),
            ReLU(),
            Conv2d(he_conv(rng, 32, 16, 3, dtype, zero_dc=True), stride=2, padding="same"),
            ReLU(),
        ]
        self.enc = Pipeline(enc_stages, name=f"swap-enc-{variant}")
        self.gap = GlobalAvgPool()
        self.code_weight = he_linear(rng, 3, 32, dtype)
        self.dec = Pipeline(
            [
                Upsample2x(),
                Conv2d(he_conv(rng, 16, 32, 3, dtype), stride=1, padding="same"),
                ReLU(),
                Upsample2x(),
                Conv2d(he_conv(rng, 3, 16, 3, dtype), stride=1, padding="same"),
                Sigmoid(),
            ],
            name="swap-dec",
        )
        self.residual_scale = residual_scale
        self.shift_scale = shift_scale
        # seeded calibration: center the code and normalize the pre-tanh std
        codes = []
        for img in _calibration_images(dtype):
            codes.append(self.enc.forward(img)[0].mean(axis=(1, 2)))
        codes = np.stack(codes)
        self.code_ref = codes.mean(axis=0)
        pre = (self.code_weight @ (codes - self.code_ref).T)
        scale = target_pre_std / max(float(pre.std()), 1e-9)
        self.code_weight = (self.code_weight * scale).astype(dtype)
        self.seed = seed
        self.variant = variant
        self.dtype = np.dtype(dtype)

    @property
    def descriptor(self) -> dict:
        precision = "f32" if self.dtype == np.float32 else "f64"
        return {"name": f"swap-{self.variant}", "seed": self.seed, "precision": precision}

    def forward(self, x, target=None):
        _check_swap_shape(x, "swap model")
        z, enc_ctx = self.enc.forward(x)
        code, gap_ctx = self.gap.forward(z)
        pre = self.code_weight @ (code - self.code_ref)
        shift = np.tanh(pre)
        y_dec, dec_ctx = self.dec.forward(z)
        raw = (
            x.mean(axis=(1, 2))[:, None, None]
            + self.shift_scale * shift[:, None, None]
            + self.residual_scale * (y_dec - 0.5)
        )
        y = np.clip(raw, 0.0, 1.0)
        mask = (raw > 0.0) & (raw < 1.0)
        return y, (enc_ctx, gap_ctx, dec_ctx, pre, mask, x.shape)

    def vjp(self, ctx, grad_out):
        enc_ctx, gap_ctx, dec_ctx, pre, mask, xshape = ctx
        g = grad_out * mask
        pooled = g.sum(axis=(1, 2))
        g_shift = self.shift_scale * pooled * (1.0 - np.tanh(pre) ** 2)
        g_code = self.code_weight.T @ g_shift
        gz = self.gap.vjp(gap_ctx, g_code) + self.dec.vjp(dec_ctx, self.residual_scale * g)
        gx = self.enc.vjp(enc_ctx, gz)
        gx += (pooled / (xshape[1] * xshape[2]))[:, None, None]
        return gx

    def __call__(self, x):
        return self.forward(x)[0]


class IdentityEmbedder:
    """Frozen CNN mapping an image to a unit vector of dimension 64.

    ReLU features after global pooling are all-positive, which would pin
    every cosine similarity near 1; the head bias is therefore set to
    -W @ mean(feature) over a seeded calibration batch of smooth random
    images, centering the embedding space deterministically.
    """

    def __init__(self, seed: int = 0, dtype=DEFAULT_DTYPE):
        rng = rng_from(seed, "identity-embedder")
        head = Linear(he_linear(rng, EMBED_DIM, 16, dtype), np.zeros(EMBED_DIM, dtype=dtype))
        self.net = Pipeline(
            [
                Conv2d(he_conv(rng, 8, 3, 3, dtype), stride=2, padding="same"),
                ReLU(),
                Conv2d(he_conv(rng, 16, 8, 3, dtype), stride=2, padding="same"),
                ReLU(),
                GlobalAvgPool(),
                head,
                NormalizeL2(),
            ],
            name="identity-embedder",
        )
        mean_feat = np.zeros(16, dtype=dtype)
        calib = _calibration_images(dtype)
        for img in calib:
            f = img
            for stage in self.net.stages[:5]:
                f = stage.forward(f)[0]
            mean_feat += f
        mean_feat /= len(calib)
        head.bias = (-head.weight @ mean_feat).astype(dtype)
        self.seed = seed
        self.dtype = np.dtype(dtype)

    @property
    def descriptor(self) -> dict:
        precision = "f32" if self.dtype == np.float32 else "f64"
        return {"name": "identity-embedder", "seed": self.seed, "precision": precision}

    def embed(self, x) -> np.ndarray:
        _check_swap_shape(x, "embedder")
        return self.net.forward(x)[0]

    def forward(self, x):
        _check_swap_shape(x, "embedder")
        return self.net.forward(x)

    def vjp(self, ctx, grad_out):
        return self.net.vjp(ctx, grad_out)


def id_similarity(embedder: IdentityEmbedder, a, b) -> float:
    """Cosine similarity of the identity embeddings of two images."""
    return float(np.dot(embedder.embed(a), embedder.embed(b)))


class LinearToyModel:
    """y = reshape(A @ x.flat): analytically tractable stand-in generator.

    ``mix=0`` gives the identity map; positive ``mix`` blends in a fixed
    random matrix so PGD and FGSM trajectories genuinely differ.
    """

    def __init__(self, shape, seed: int = 0, mix: float = 0.0, dtype=DEFAULT_DTYPE):
        self.shape = tuple(shape)
        n = int(np.prod(shape))
        a = np.eye(n, dtype=dtype)
        if mix > 0:
            rng = rng_from(seed, "linear-toy")
            a = a + (mix / np.sqrt(n)) * rng.standard_normal((n, n)).astype(dtype)
        self.matrix = a
        self.descriptor = {"name": "linear-toy", "seed": seed, "precision": str(np.dtype(dtype))}

    def forward(self, x, target=None):
        if x.shape != self.shape:
            raise ShapeError(f"linear toy model: expected {self.shape}, got {x.shape}")
        return (self.matrix @ x.ravel()).reshape(self.shape), None

    def vjp(self, ctx, grad_out):
        return (self.matrix.T @ grad_out.ravel()).reshape(self.shape)

    def __call__(self, x):
        return self.forward(x)[0]
