"""Catalog of 30 image transformations in six categories.

Each transformation is discretized into 9 magnitude levels; a
(transformation, magnitude) pair is a *sub-policy*, the unit the sampling
policy distributes over. Parameterless transforms (hflip, vflip) occupy
all 9 slots with identical effect so every transform contributes the same
number of logits.

Every transform provides ``apply`` (forward, output clamped to [0,1]) and
``vjp`` (gradient to the input image). Gradients are exact where the map
is differentiable; median/salt/pepper/precision and the rounding inside
jpeg use straight-through conventions, and hsv/lab/poisson pass gradients
through their nonlinear/noise branches unchanged (all flagged via
``gradient_exact = False``). Realized randomness is stored in the context
so a forward pass can be replayed bit-exactly on a different input.

Magnitude grids (index i in 0..8):
  normal      additive N(0, s^2), s = 0.02 + 0.01*i
  uniform     additive U(-a, a), a = 0.02 + 0.01*i
  speckle     x*(1+n), n ~ N(0, s^2), s = 0.05 + 0.025*i
  poisson     x + sqrt(max(x,1e-4)/lam)*z, lam = 256/2^(i/2)
  salt/pepper elementwise replace to 1/0 with p = 0.01 + 0.005*i
  hsv/lab     chroma scale f = 0.6 + 0.1*i (+0.05 when i = 4)
  xyz/yuv     non-luma channel scale, same f grid
  graymix     (1-w)*x + w*luma, w = 0.1*(i+1)
  boxblur     k x k mean, k = 3 + 2*(i//2)
  medblur     k x k median, same k grid
  motionblur  horizontal mean of length 3 + 2*i
  gaussblur   sigma = 0.5 + 0.25*i, radius ceil(3*sigma)
  brightness  x*f, f = 0.5 + 0.125*i           (identity at i = 4)
  contrast    (x-0.5)*f + 0.5, same f grid
  saturation  luma + f*(x-luma), same f grid
  hue         chroma-plane rotation by th = -0.5 + 0.125*i rad (YIQ)
  gamma       x^g, g = 2^((i-4)/4)             (identity at i = 4)
  solarize    invert pixels above tau = 0.95 - 0.05*i
  sharp       x + a*(x - gaussblur_{sigma=1}(x)), a = 0.25*(i+1)
  jpeg        8x8 DCT quantization at quality q = 90 - 10*i
  fft         zero frequencies above rho*Nyquist, rho = 0.9 - 0.1*i
  precision   quantize to b bits, b = 8 - (i*7)//8
  affine      rotation by 2 + 2*i degrees, bilinear
  crop        central crop to fraction 0.95 - 0.04*i, resized back
  hflip/vflip parameterless
  swirl       radial swirl, strength 0.5*(i+1), radius min(H,W)/2
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import ShapeError, UnsupportedSizeError

N_MAGNITUDES = 9

CATEGORY_MEMBERS = {
    "Noise": ["normal", "uniform", "speckle", "poisson", "salt", "pepper"],
    "Color-space": ["hsv", "lab", "xyz", "yuv", "graymix"],
    "Blur": ["boxblur", "medblur", "motionblur", "gaussblur"],
    "Stylization": ["brightness", "contrast", "saturation", "hue", "gamma", "solarize", "sharp"],
    "Compression": ["jpeg", "fft", "precision"],
    "Geometric": ["affine", "crop", "hflip", "vflip", "swirl"],
}
CATEGORY_ORDER = list(CATEGORY_MEMBERS)
ALL_TRANSFORM_NAMES = [n for cat in CATEGORY_ORDER for n in CATEGORY_MEMBERS[cat]]
CATEGORY_OF = {n: cat for cat, names in CATEGORY_MEMBERS.items() for n in names}


@dataclass(frozen=True)
class TransformId:
    name: str
    category: str


@dataclass(frozen=True)
class SubPolicy:
    transform: TransformId
    magnitude: int


@dataclass
class TransformContext:
    """Saved forward values: realized randomness, VJP inputs, clamp mask."""

    name: str
    magnitude: int
    rng_draw: tuple
    saved: tuple
    clamp_mask: np.ndarray


def _luma_weights(dtype):
    return np.asarray([0.299, 0.587, 0.114], dtype=dtype)


def _check_image(x):
    if x.ndim != 3 or x.shape[0] != 3:
        raise ShapeError(f"expected a (3,H,W) image, got {x.shape}")


class Transform:
    """One named transformation over all 9 magnitudes."""

    name = "?"
    gradient_exact = True
    gradient_note = "exact"
    stochastic = False

    @property
    def category(self) -> str:
        return CATEGORY_OF[self.name]

    def min_size(self, magnitude: int) -> tuple[int, int]:
        return (2, 2)

    def param_label(self, magnitude: int) -> str:
        return "-"

    def _draw(self, x, magnitude, rng) -> tuple:
        return ()

    def _forward(self, x, magnitude, draws):
        raise NotImplementedError

    def _vjp(self, ctx: TransformContext, g):
        raise NotImplementedError

    def _validate(self, x, magnitude):
        _check_image(x)
        if not 0 <= magnitude < N_MAGNITUDES:
            raise ValueError(f"{self.name}: magnitude {magnitude} outside [0, {N_MAGNITUDES - 1}]")
        mh, mw = self.min_size(magnitude)
        if x.shape[1] < mh or x.shape[2] < mw:
            raise UnsupportedSizeError(
                f"{self.name}: image {x.shape[1]}x{x.shape[2]} below minimum {mh}x{mw} at magnitude {magnitude}"
            )

    def apply(self, x, magnitude: int, rng) -> tuple[np.ndarray, TransformContext]:
        self._validate(x, magnitude)
        draws = self._draw(x, magnitude, rng)
        y_raw, saved = self._forward(x, magnitude, draws)
        y = np.clip(y_raw, 0.0, 1.0)
        mask = (y_raw > 0.0) & (y_raw < 1.0)
        return y, TransformContext(self.name, magnitude, draws, saved, mask)

    def replay(self, ctx: TransformContext, x) -> np.ndarray:
        """Forward pass with the context's frozen randomness."""
        y_raw, _ = self._forward(x, ctx.magnitude, ctx.rng_draw)
        return np.clip(y_raw, 0.0, 1.0)

    def vjp(self, ctx: TransformContext, grad_out) -> np.ndarray:
        if grad_out.shape != ctx.clamp_mask.shape:
            raise ShapeError(f"{self.name} vjp: grad {grad_out.shape} vs context {ctx.clamp_mask.shape}")
        return self._vjp(ctx, grad_out * ctx.clamp_mask)


# -- noise ------------------------------------------------------------------


class NormalNoise(Transform):
    name = "normal"
    stochastic = True

    @staticmethod
    def sigma(i):
        return 0.02 + 0.01 * i

    def param_label(self, i):
        return f"sigma={self.sigma(i):.3g}"

    def _draw(self, x, i, rng):
        return (rng.standard_normal(x.shape).astype(x.dtype),)

    def _forward(self, x, i, draws):
        return x + self.sigma(i) * draws[0], ()

    def _vjp(self, ctx, g):
        return g


class UniformNoise(Transform):
    name = "uniform"
    stochastic = True

    @staticmethod
    def amp(i):
        return 0.02 + 0.01 * i

    def param_label(self, i):
        return f"amp={self.amp(i):.3g}"

    def _draw(self, x, i, rng):
        return (rng.uniform(-1.0, 1.0, x.shape).astype(x.dtype),)

    def _forward(self, x, i, draws):
        return x + self.amp(i) * draws[0], ()

    def _vjp(self, ctx, g):
        return g


class SpeckleNoise(Transform):
    name = "speckle"
    stochastic = True

    @staticmethod
    def sigma(i):
        return 0.05 + 0.025 * i

    def param_label(self, i):
        return f"sigma={self.sigma(i):.3g}"

    def _draw(self, x, i, rng):
        return (rng.standard_normal(x.shape).astype(x.dtype),)

    def _forward(self, x, i, draws):
        gain = 1.0 + self.sigma(i) * draws[0]
        return x * gain, (gain,)

    def _vjp(self, ctx, g):
        return g * ctx.saved[0]


class PoissonNoise(Transform):
    """Gaussian shot-noise approximation; noise treated as constant in VJP."""

    name = "poisson"
    stochastic = True
    gradient_exact = False
    gradient_note = "reparameterized-noise gradient (identity), skipped"

    @staticmethod
    def lam(i):
        return 256.0 / 2.0 ** (i / 2.0)

    def param_label(self, i):
        return f"lambda={self.lam(i):.4g}"

    def _draw(self, x, i, rng):
        return (rng.standard_normal(x.shape).astype(x.dtype),)

    def _forward(self, x, i, draws):
        noise = np.sqrt(np.maximum(x, 1e-4) / self.lam(i)) * draws[0]
        return x + noise, ()

    def _vjp(self, ctx, g):
        return g


class _ReplacementNoise(Transform):
    stochastic = True
    gradient_exact = False
    gradient_note = "straight-through on kept pixels"
    fill = 1.0

    @staticmethod
    def prob(i):
        return 0.01 + 0.005 * i

    def param_label(self, i):
        return f"p={self.prob(i):.3g}"

    def _draw(self, x, i, rng):
        return (rng.random(x.shape).astype(x.dtype),)

    def _forward(self, x, i, draws):
        mask = draws[0] < self.prob(i)
        return np.where(mask, self.fill, x), (mask,)

    def _vjp(self, ctx, g):
        return g * ~ctx.saved[0]


class SaltNoise(_ReplacementNoise):
    name = "salt"
    fill = 1.0


class PepperNoise(_ReplacementNoise):
    name = "pepper"
    fill = 0.0


# -- color-space ------------------------------------------------------------


def chroma_factor(i: int) -> float:
    return 0.6 + 0.1 * i + (0.05 if i == 4 else 0.0)


def _rgb_to_hsv(x):
    r, g, b = x[0], x[1], x[2]
    mx = np.max(x, axis=0)
    mn = np.min(x, axis=0)
    d = mx - mn
    s = np.where(mx > 1e-12, d / np.maximum(mx, 1e-12), 0.0)
    safe = np.maximum(d, 1e-12)
    h = np.zeros_like(mx)
    h = np.where((mx == r) & (d > 0), ((g - b) / safe) % 6.0, h)
    h = np.where((mx == g) & (d > 0), (b - r) / safe + 2.0, h)
    h = np.where((mx == b) & (d > 0), (r - g) / safe + 4.0, h)
    return np.stack([h / 6.0, s, mx])


def _hsv_to_rgb(hsv):
    h, s, v = hsv[0] * 6.0, hsv[1], hsv[2]
    c = v * s
    xcomp = c * (1.0 - np.abs(h % 2.0 - 1.0))
    m = v - c
    sector = np.floor(h).astype(int) % 6
    zeros = np.zeros_like(c)
    r = np.choose(sector, [c, xcomp, zeros, zeros, xcomp, c])
    g = np.choose(sector, [xcomp, c, c, xcomp, zeros, zeros])
    b = np.choose(sector, [zeros, zeros, xcomp, c, c, xcomp])
    return np.stack([r, g, b]) + m


class HsvScale(Transform):
    name = "hsv"
    gradient_exact = False
    gradient_note = "nonlinear color branches, straight-through identity"

    def param_label(self, i):
        return f"sat_scale={chroma_factor(i):.3g}"

    def _forward(self, x, i, draws):
        hsv = _rgb_to_hsv(np.clip(x, 0.0, 1.0))
        hsv[1] = np.clip(hsv[1] * chroma_factor(i), 0.0, 1.0)
        return _hsv_to_rgb(hsv), ()

    def _vjp(self, ctx, g):
        return g


_M_RGB2XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_D65 = np.array([0.95047, 1.0, 1.08883])


def _lab_f(t):
    d = 6.0 / 29.0
    return np.where(t > d**3, np.cbrt(np.maximum(t, 0.0)), t / (3 * d * d) + 4.0 / 29.0)


def _lab_finv(p):
    d = 6.0 / 29.0
    return np.where(p > d, p**3, 3 * d * d * (p - 4.0 / 29.0))


class LabScale(Transform):
    name = "lab"
    gradient_exact = False
    gradient_note = "nonlinear color branches, straight-through identity"

    def param_label(self, i):
        return f"ab_scale={chroma_factor(i):.3g}"

    def _forward(self, x, i, draws):
        f = chroma_factor(i)
        xyz = np.einsum("cd,dhw->chw", _M_RGB2XYZ, np.clip(x, 0.0, 1.0)) / _D65[:, None, None]
        fx, fy, fz = _lab_f(xyz[0]), _lab_f(xyz[1]), _lab_f(xyz[2])
        lum, a, b = 116.0 * fy - 16.0, 500.0 * (fx - fy) * f, 200.0 * (fy - fz) * f
        fy2 = (lum + 16.0) / 116.0
        fx2 = fy2 + a / 500.0
        fz2 = fy2 - b / 200.0
        xyz2 = np.stack([_lab_finv(fx2), _lab_finv(fy2), _lab_finv(fz2)]) * _D65[:, None, None]
        rgb = np.einsum("cd,dhw->chw", np.linalg.inv(_M_RGB2XYZ), xyz2)
        return rgb, ()

    def _vjp(self, ctx, g):
        return g


class _ChannelMix(Transform):
    """Linear per-pixel channel mixing y = A x; VJP is A^T."""

    def matrix(self, i) -> np.ndarray:
        raise NotImplementedError

    def _forward(self, x, i, draws):
        a = self.matrix(i).astype(x.dtype)
        return np.einsum("cd,dhw->chw", a, x), (a,)

    def _vjp(self, ctx, g):
        return np.einsum("dc,dhw->chw", ctx.saved[0], g)


_M_YUV = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.14713, -0.28886, 0.436],
        [0.615, -0.51499, -0.10001],
    ]
)
_M_YIQ = np.array(
    [
        [0.299, 0.587, 0.114],
        [0.595716, -0.274453, -0.321263],
        [0.211456, -0.522591, 0.311135],
    ]
)


class XyzScale(_ChannelMix):
    name = "xyz"

    def param_label(self, i):
        return f"xz_scale={chroma_factor(i):.3g}"

    def matrix(self, i):
        f = chroma_factor(i)
        return np.linalg.inv(_M_RGB2XYZ) @ np.diag([f, 1.0, f]) @ _M_RGB2XYZ


class YuvScale(_ChannelMix):
    name = "yuv"

    def param_label(self, i):
        return f"uv_scale={chroma_factor(i):.3g}"

    def matrix(self, i):
        f = chroma_factor(i)
        return np.linalg.inv(_M_YUV) @ np.diag([1.0, f, f]) @ _M_YUV


class GrayMix(Transform):
    name = "graymix"

    @staticmethod
    def weight(i):
        return 0.1 * (i + 1)

    def param_label(self, i):
        return f"w={self.weight(i):.2g}"

    def _forward(self, x, i, draws):
        w = self.weight(i)
        lw = _luma_weights(x.dtype)
        gray = np.einsum("c,chw->hw", lw, x)
        return (1.0 - w) * x + w * gray[None], (w, lw)

    def _vjp(self, ctx, g):
        w, lw = ctx.saved
        pooled = g.sum(axis=0)
        return (1.0 - w) * g + w * lw[:, None, None] * pooled[None]


# -- blur -------------------------------------------------------------------


def edge_pad(x, ph, pw):
    return np.pad(x, ((0, 0), (ph, ph), (pw, pw)), mode="edge")


def _foldedge_pad(g, h, w, ph, pw):
    if ph:
        t = g[:, ph : ph + h, :].copy()
        t[:, 0, :] += g[:, :ph, :].sum(axis=1)
        t[:, -1, :] += g[:, ph + h :, :].sum(axis=1)
        g = t
    if pw:
        t = g[:, :, pw : pw + w].copy()
        t[:, :, 0] += g[:, :, :pw].sum(axis=2)
        t[:, :, -1] += g[:, :, pw + w :].sum(axis=2)
        g = t
    return np.ascontiguousarray(g)


def stencil_forward(x, psf):
    ph, pw = psf.shape[0] // 2, psf.shape[1] // 2
    return _kernels.depthwise_valid(edge_pad(x, ph, pw), psf)


def stencil_vjp(g, psf, h, w):
    # adjoint of edge-pad + valid correlation: full correlation with the
    # flipped stencil, then fold the padding back onto the edges
    kh, kw = psf.shape
    ph, pw = kh // 2, kw // 2
    gz = np.pad(g, ((0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
    gp = _kernels.depthwise_valid(gz, psf[::-1, ::-1].copy())
    return _foldedge_pad(gp, h, w, ph, pw)


class _StencilBlur(Transform):
    def psf(self, i, dtype) -> np.ndarray:
        raise NotImplementedError

    def min_size(self, i):
        kh, kw = self.psf(i, np.float64).shape
        return (kh, kw)

    def _forward(self, x, i, draws):
        psf = self.psf(i, x.dtype)
        return stencil_forward(x, psf), (psf, x.shape)

    def _vjp(self, ctx, g):
        psf, shape = ctx.saved
        return stencil_vjp(g, psf, shape[1], shape[2])


class BoxBlur(_StencilBlur):
    name = "boxblur"

    @staticmethod
    def k(i):
        return 3 + 2 * (i // 2)

    def param_label(self, i):
        return f"k={self.k(i)}"

    def psf(self, i, dtype):
        k = self.k(i)
        return np.full((k, k), 1.0 / (k * k), dtype=dtype)


class MotionBlur(_StencilBlur):
    name = "motionblur"

    @staticmethod
    def length(i):
        return 3 + 2 * i

    def param_label(self, i):
        return f"len={self.length(i)}"

    def min_size(self, i):
        return (1, self.length(i))

    def psf(self, i, dtype):
        n = self.length(i)
        return np.full((1, n), 1.0 / n, dtype=dtype)


def gaussian_psf(sigma: float, dtype=np.float64) -> np.ndarray:
    r = math.ceil(3.0 * sigma)
    grid = np.arange(-r, r + 1, dtype=dtype)
    g1 = np.exp(-(grid**2) / (2.0 * sigma * sigma))
    g1 /= g1.sum()
    return np.outer(g1, g1)


class GaussBlur(_StencilBlur):
    name = "gaussblur"

    @staticmethod
    def sigma(i):
        return 0.5 + 0.25 * i

    def param_label(self, i):
        return f"sigma={self.sigma(i):.3g}"

    def psf(self, i, dtype):
        return gaussian_psf(self.sigma(i), dtype)


class MedianBlur(Transform):
    name = "medblur"
    gradient_exact = False
    gradient_note = "median selection, straight-through identity"

    @staticmethod
    def k(i):
        return 3 + 2 * (i // 2)

    def param_label(self, i):
        return f"k={self.k(i)}"

    def min_size(self, i):
        k = self.k(i)
        return (k, k)

    def _forward(self, x, i, draws):
        k = self.k(i)
        return _kernels.median_filter_valid(edge_pad(x, k // 2, k // 2), k), ()

    def _vjp(self, ctx, g):
        return g


# -- stylization ------------------------------------------------------------


def style_factor(i: int) -> float:
    return 0.5 + 0.125 * i


class Brightness(Transform):
    name = "brightness"

    def param_label(self, i):
        return f"f={style_factor(i):.3g}"

    def _forward(self, x, i, draws):
        return x * style_factor(i), ()

    def _vjp(self, ctx, g):
        return g * style_factor(ctx.magnitude)


class Contrast(Transform):
    name = "contrast"

    def param_label(self, i):
        return f"f={style_factor(i):.3g}"

    def _forward(self, x, i, draws):
        return (x - 0.5) * style_factor(i) + 0.5, ()

    def _vjp(self, ctx, g):
        return g * style_factor(ctx.magnitude)


class Saturation(Transform):
    name = "saturation"

    def param_label(self, i):
        return f"f={style_factor(i):.3g}"

    def _forward(self, x, i, draws):
        f = style_factor(i)
        lw = _luma_weights(x.dtype)
        gray = np.einsum("c,chw->hw", lw, x)
        return gray[None] + f * (x - gray[None]), (f, lw)

    def _vjp(self, ctx, g):
        f, lw = ctx.saved
        pooled = g.sum(axis=0)
        return f * g + (1.0 - f) * lw[:, None, None] * pooled[None]


class HueRotate(_ChannelMix):
    name = "hue"

    @staticmethod
    def theta(i):
        return -0.5 + 0.125 * i

    def param_label(self, i):
        return f"theta={self.theta(i):.3g}rad"

    def matrix(self, i):
        t = self.theta(i)
        rot = np.array([[1, 0, 0], [0, math.cos(t), -math.sin(t)], [0, math.sin(t), math.cos(t)]])
        return np.linalg.inv(_M_YIQ) @ rot @ _M_YIQ


class Gamma(Transform):
    name = "gamma"

    @staticmethod
    def gamma(i):
        return 2.0 ** ((i - 4) / 4.0)

    def param_label(self, i):
        return f"gamma={self.gamma(i):.4g}"

    def _forward(self, x, i, draws):
        g = self.gamma(i)
        xc = np.clip(x, 0.0, 1.0)
        return xc**g, (xc,)

    def _vjp(self, ctx, g):
        gam = self.gamma(ctx.magnitude)
        base = np.maximum(ctx.saved[0], 1e-8)
        return g * gam * base ** (gam - 1.0)


class Solarize(Transform):
    name = "solarize"

    @staticmethod
    def tau(i):
        return 0.95 - 0.05 * i

    def param_label(self, i):
        return f"tau={self.tau(i):.3g}"

    def _forward(self, x, i, draws):
        inv = x > self.tau(i)
        return np.where(inv, 1.0 - x, x), (inv,)

    def _vjp(self, ctx, g):
        return np.where(ctx.saved[0], -g, g)


class Sharpen(Transform):
    name = "sharp"

    @staticmethod
    def amount(i):
        return 0.25 * (i + 1)

    def param_label(self, i):
        return f"a={self.amount(i):.3g}"

    def min_size(self, i):
        k = gaussian_psf(1.0).shape[0]
        return (k, k)

    def _forward(self, x, i, draws):
        a = self.amount(i)
        psf = gaussian_psf(1.0, x.dtype)
        return x + a * (x - stencil_forward(x, psf)), (a, psf, x.shape)

    def _vjp(self, ctx, g):
        a, psf, shape = ctx.saved
        return (1.0 + a) * g - a * stencil_vjp(g, psf, shape[1], shape[2])


# -- compression ------------------------------------------------------------

_JPEG_LUMA_TABLE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)


def _dct8_matrix(dtype=np.float64):
    n = np.arange(8.0)
    d = np.cos(np.pi * (2 * n[None, :] + 1) * n[:, None] / 16.0)
    d[0] *= math.sqrt(1.0 / 8.0)
    d[1:] *= math.sqrt(2.0 / 8.0)
    return d.astype(dtype)


def jpeg_quant_table(quality: int) -> np.ndarray:
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    return np.clip(np.floor((_JPEG_LUMA_TABLE * scale + 50.0) / 100.0), 1.0, 255.0)


class Jpeg(Transform):
    name = "jpeg"
    gradient_exact = False
    gradient_note = "quantization rounding, straight-through identity"

    @staticmethod
    def quality(i):
        return 90 - 10 * i

    def param_label(self, i):
        return f"q={self.quality(i)}"

    def min_size(self, i):
        return (8, 8)

    def _forward(self, x, i, draws):
        table = jpeg_quant_table(self.quality(i)).astype(x.dtype)
        d = _dct8_matrix(x.dtype)
        c, h, w = x.shape
        ph, pw = (-h) % 8, (-w) % 8
        z = np.pad(x, ((0, 0), (0, ph), (0, pw)), mode="edge") * 255.0 - 128.0
        hb, wb = z.shape[1] // 8, z.shape[2] // 8
        blocks = z.reshape(c, hb, 8, wb, 8).transpose(0, 1, 3, 2, 4)
        coeff = np.einsum("ij,cbqjk,lk->cbqil", d, blocks, d, optimize=True)
        coeff = np.round(coeff / table) * table
        rec = np.einsum("ji,cbqjk,kl->cbqil", d, coeff, d, optimize=True)
        z2 = rec.transpose(0, 1, 3, 2, 4).reshape(c, hb * 8, wb * 8)
        return (z2[:, :h, :w] + 128.0) / 255.0, ()

    def _vjp(self, ctx, g):
        return g


class FftLowPass(Transform):
    """Radial low-pass; self-adjoint real linear operator."""

    name = "fft"

    @staticmethod
    def rho(i):
        return 0.9 - 0.1 * i

    def param_label(self, i):
        return f"rho={self.rho(i):.2g}"

    @staticmethod
    def _mask(h, w, rho):
        fy = np.fft.fftfreq(h)[:, None]
        fx = np.fft.fftfreq(w)[None, :]
        return (np.hypot(fy, fx) <= rho * 0.5).astype(np.float64)

    def _lowpass(self, x, rho):
        mask = self._mask(x.shape[1], x.shape[2], rho)
        return np.real(np.fft.ifft2(np.fft.fft2(x, axes=(1, 2)) * mask[None], axes=(1, 2))).astype(x.dtype)

    def _forward(self, x, i, draws):
        return self._lowpass(x, self.rho(i)), ()

    def _vjp(self, ctx, g):
        return self._lowpass(g, self.rho(ctx.magnitude))


class Precision(Transform):
    name = "precision"
    gradient_exact = False
    gradient_note = "bit quantization, straight-through identity"

    @staticmethod
    def bits(i):
        return 8 - (i * 7) // 8

    def param_label(self, i):
        return f"bits={self.bits(i)}"

    def _forward(self, x, i, draws):
        levels = 2 ** self.bits(i) - 1
        return np.round(np.clip(x, 0.0, 1.0) * levels) / levels, ()

    def _vjp(self, ctx, g):
        return g


# -- geometric --------------------------------------------------------------


class _Warp(Transform):
    def grid(self, h, w, i, dtype) -> np.ndarray:
        raise NotImplementedError

    def _forward(self, x, i, draws):
        grid = self.grid(x.shape[1], x.shape[2], i, x.dtype)
        return _kernels.grid_sample(x, grid), (grid, x.shape)

    def _vjp(self, ctx, g):
        grid, shape = ctx.saved
        return _kernels.grid_sample_vjp(grid, g, shape[1], shape[2])


def _offset_grids(h, w, dtype):
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    dy = np.arange(h, dtype=dtype)[:, None] - cy
    dx = np.arange(w, dtype=dtype)[None, :] - cx
    return cy, cx, np.broadcast_to(dy, (h, w)), np.broadcast_to(dx, (h, w))


class AffineRotate(_Warp):
    name = "affine"

    @staticmethod
    def degrees(i):
        return 2.0 + 2.0 * i

    def param_label(self, i):
        return f"angle={self.degrees(i):.3g}deg"

    def grid(self, h, w, i, dtype):
        t = math.radians(self.degrees(i))
        cy, cx, dy, dx = _offset_grids(h, w, dtype)
        sy = cy + math.cos(t) * dy - math.sin(t) * dx
        sx = cx + math.sin(t) * dy + math.cos(t) * dx
        return np.ascontiguousarray(np.stack([sy, sx], axis=-1))


class CenterCropZoom(_Warp):
    name = "crop"

    @staticmethod
    def fraction(i):
        return 0.95 - 0.04 * i

    def param_label(self, i):
        return f"frac={self.fraction(i):.3g}"

    def grid(self, h, w, i, dtype):
        c = self.fraction(i)
        cy, cx, dy, dx = _offset_grids(h, w, dtype)
        return np.ascontiguousarray(np.stack([cy + c * dy, cx + c * dx], axis=-1))


class _Flip(Transform):
    axis = 1

    def param_label(self, i):
        return "-"

    def _forward(self, x, i, draws):
        return np.flip(x, axis=self.axis).copy(), ()

    def _vjp(self, ctx, g):
        return np.flip(g, axis=self.axis).copy()


class HFlip(_Flip):
    name = "hflip"
    axis = 2


class VFlip(_Flip):
    name = "vflip"
    axis = 1


class Swirl(_Warp):
    name = "swirl"

    @staticmethod
    def strength(i):
        return 0.5 * (i + 1)

    def param_label(self, i):
        return f"s={self.strength(i):.3g}"

    def grid(self, h, w, i, dtype):
        s = self.strength(i)
        radius = min(h, w) / 2.0
        cy, cx, dy, dx = _offset_grids(h, w, dtype)
        rho = np.hypot(dy, dx)
        phi = s * np.maximum(1.0 - rho / radius, 0.0)
        sy = cy + np.cos(phi) * dy - np.sin(phi) * dx
        sx = cx + np.sin(phi) * dy + np.cos(phi) * dx
        return np.ascontiguousarray(np.stack([sy, sx], axis=-1))


# -- registry & catalog -----------------------------------------------------

TRANSFORMS: dict[str, Transform] = {
    t.name: t
    for t in [
        NormalNoise(), UniformNoise(), SpeckleNoise(), PoissonNoise(), SaltNoise(), PepperNoise(),
        HsvScale(), LabScale(), XyzScale(), YuvScale(), GrayMix(),
        BoxBlur(), MedianBlur(), MotionBlur(), GaussBlur(),
        Brightness(), Contrast(), Saturation(), HueRotate(), Gamma(), Solarize(), Sharpen(),
        Jpeg(), FftLowPass(), Precision(),
        AffineRotate(), CenterCropZoom(), HFlip(), VFlip(), Swirl(),
    ]
}

assert list(TRANSFORMS) == ALL_TRANSFORM_NAMES


class Catalog:
    """Ordered transform subset; sub-policy index = transform * 9 + magnitude."""

    M = N_MAGNITUDES

    def __init__(self, names=None):
        names = list(names) if names is not None else list(ALL_TRANSFORM_NAMES)
        unknown = [n for n in names if n not in TRANSFORMS]
        if unknown:
            raise ValueError(f"unknown transforms: {unknown}")
        if len(set(names)) != len(names):
            raise ValueError("duplicate transform names in catalog")
        self.entries = [TransformId(n, CATEGORY_OF[n]) for n in names]

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    @property
    def logit_count(self) -> int:
        return len(self.entries) * self.M

    def decode(self, index: int) -> SubPolicy:
        if not 0 <= index < self.logit_count:
            raise IndexError(f"sub-policy index {index} outside [0, {self.logit_count})")
        return SubPolicy(self.entries[index // self.M], index % self.M)

    def encode(self, sp: SubPolicy) -> int:
        return self.names.index(sp.transform.name) * self.M + sp.magnitude

    def subpolicies(self) -> list[SubPolicy]:
        return [self.decode(i) for i in range(self.logit_count)]

    def transform(self, name: str) -> Transform:
        return TRANSFORMS[name]

    def apply(self, x, sp: SubPolicy, rng):
        return TRANSFORMS[sp.transform.name].apply(x, sp.magnitude, rng)

    def vjp(self, ctx: TransformContext, grad_out):
        return TRANSFORMS[ctx.name].vjp(ctx, grad_out)

    def describe(self) -> str:
        """Canonical human-readable catalog block (names + magnitude grids)."""
        lines = [f"transforms={len(self.entries)} magnitudes={self.M}"]
        for e in self.entries:
            t = TRANSFORMS[e.name]
            grid = ", ".join(t.param_label(i) for i in range(self.M))
            lines.append(f"{e.name} [{e.category}] {grid}")
        return "\n".join(lines) + "\n"

    def fingerprint(self) -> str:
        return hashlib.sha256(self.describe().encode("utf-8")).hexdigest()


INTRA_VAL = ["poisson", "lab", "medblur", "hue", "fft", "affine"]
INTRA_TRAIN = ["speckle", "pepper", "yuv", "graymix", "boxblur", "motionblur",
               "brightness", "saturation", "sharp", "jpeg", "hflip", "vflip"]
INTRA_TEST = ["normal", "uniform", "salt", "hsv", "xyz", "gaussblur",
              "contrast", "gamma", "solarize", "precision", "crop", "swirl"]

SPLIT_KINDS = ("all_seen", "intra", "inter")


def build_split(kind: str, catalog: Catalog) -> tuple[list[str], list[str], list[str]]:
    """(S_p, S_v, S_t) transform-name sets for a split kind.

    Fixed membership is intersected with the catalog (order preserved) so
    subset catalogs stay usable.
    """
    if kind not in SPLIT_KINDS:
        raise ValueError(f"unknown split kind {kind!r}; expected one of {SPLIT_KINDS}")
    names = self_names = catalog.names
    if kind == "all_seen":
        return list(names), list(names), list(names)
    if kind == "intra":
        groups = (INTRA_TRAIN, INTRA_VAL, INTRA_TEST)
    else:
        blur_styl = CATEGORY_MEMBERS["Blur"] + CATEGORY_MEMBERS["Stylization"]
        noise_geo = CATEGORY_MEMBERS["Noise"] + CATEGORY_MEMBERS["Geometric"]
        color_comp = CATEGORY_MEMBERS["Color-space"] + CATEGORY_MEMBERS["Compression"]
        groups = (blur_styl, noise_geo, color_comp)
    return tuple([n for n in self_names if n in grp] for grp in groups)
