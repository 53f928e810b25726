"""Dense-tensor ops with hand-written vector-Jacobian products.

Arrays are plain contiguous numpy ndarrays (float64 by default, float32
optional). There is no tape: every pipeline stage implements

    forward(x) -> (y, ctx)      # ctx: values saved for the backward pass
    vjp(ctx, grad_out) -> grad_in

and fixed pipelines chain them explicitly. Stages that own weights
additionally expose ``params()`` and ``vjp_params(ctx, grad_out)`` so
trainable networks (the policy net) can get parameter gradients.

Stages marked ``straight_through`` pass upstream gradients unchanged and
are flagged (not numerically tested) by ``finite_diff_check``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import NonFiniteError, ShapeError
from .seeding import rng_from

DEFAULT_DTYPE = np.float64


def _check_finite(arr, where: str):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {where}")


# ---------------------------------------------------------------------------
# functional ops
# ---------------------------------------------------------------------------


def _resolve_pad(padding, kh: int, kw: int) -> tuple[int, int]:
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"'same' padding needs odd kernel, got {kh}x{kw}")
        return (kh - 1) // 2, (kw - 1) // 2
    if padding == "valid":
        return 0, 0
    return int(padding), int(padding)


def conv2d(x: np.ndarray, kernel: np.ndarray, stride: int = 1, padding="same") -> np.ndarray:
    """Cross-correlation of a (C,H,W) image with an (O,C,kh,kw) bank."""
    if x.ndim != 3 or kernel.ndim != 4 or x.shape[0] != kernel.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} vs kernel {kernel.shape}")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    ph, pw = _resolve_pad(padding, kernel.shape[2], kernel.shape[3])
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
    if xp.shape[1] < kernel.shape[2] or xp.shape[2] < kernel.shape[3]:
        raise ShapeError(f"conv2d: padded input {xp.shape} smaller than kernel {kernel.shape}")
    return _kernels.conv2d_valid(xp, kernel, stride)


def linear(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """w @ x + b for a flat feature vector."""
    if x.ndim != 1 or weight.ndim != 2 or weight.shape[1] != x.shape[0] or bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: input {x.shape}, weight {weight.shape}, bias {bias.shape}")
    return weight @ x + bias


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    if x.ndim != 3:
        raise ShapeError(f"global_avg_pool: expected (C,H,W), got {x.shape}")
    return x.mean(axis=(1, 2))


def softmax(logits: np.ndarray) -> np.ndarray:
    """Max-subtracted softmax; output sums to 1 within 1e-9."""
    _check_finite(logits, "softmax input")
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    return z - np.log(np.exp(z).sum())


def clamp01(x: np.ndarray) -> np.ndarray:
    return np.clip(x, 0.0, 1.0)


def bilinear_grid_sample(x: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Sample (C,H,W) at (H',W',2) source pixel coordinates (row, col).

    Out-of-bounds coordinates replicate the border.
    """
    if grid.ndim != 3 or grid.shape[-1] != 2:
        raise ShapeError(f"grid last dimension must be 2, got {grid.shape}")
    return _kernels.grid_sample(x, grid)


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


class DiffStage:
    """forward/vjp pair; subclasses set ``name`` and ``straight_through``."""

    name = "stage"
    straight_through = False

    def forward(self, x):
        raise NotImplementedError

    def vjp(self, ctx, grad_out):
        raise NotImplementedError

    def params(self) -> dict:
        return {}

    def vjp_params(self, ctx, grad_out) -> dict:
        return {}


class Conv2d(DiffStage):
    name = "conv2d"

    def __init__(self, weight: np.ndarray, stride: int = 1, padding="same"):
        self.weight = np.ascontiguousarray(weight)
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        kh, kw = self.weight.shape[2], self.weight.shape[3]
        ph, pw = _resolve_pad(self.padding, kh, kw)
        if x.shape[0] != self.weight.shape[1]:
            raise ShapeError(f"conv2d: input {x.shape} vs kernel {self.weight.shape}")
        xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw))) if (ph or pw) else np.ascontiguousarray(x)
        y = _kernels.conv2d_valid(xp, self.weight, self.stride)
        return y, (xp, ph, pw, x.shape)

    def vjp(self, ctx, grad_out):
        xp, ph, pw, xshape = ctx
        gp = _kernels.conv2d_vjp_input(grad_out, self.weight, self.stride, xp.shape[1], xp.shape[2])
        if ph or pw:
            gp = gp[:, ph : ph + xshape[1], pw : pw + xshape[2]]
        return np.ascontiguousarray(gp)

    def params(self):
        return {"weight": self.weight}

    def vjp_params(self, ctx, grad_out):
        xp = ctx[0]
        gk = _kernels.conv2d_vjp_kernel(xp, grad_out, self.stride, self.weight.shape[2], self.weight.shape[3])
        return {"weight": gk}


class Linear(DiffStage):
    name = "linear"

    def __init__(self, weight: np.ndarray, bias: np.ndarray):
        self.weight = weight
        self.bias = bias

    def forward(self, x):
        return linear(x, self.weight, self.bias), x

    def vjp(self, ctx, grad_out):
        return self.weight.T @ grad_out

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def vjp_params(self, ctx, grad_out):
        return {"weight": np.outer(grad_out, ctx), "bias": grad_out.copy()}


class ReLU(DiffStage):
    # subgradient 0 at the kink
    name = "relu"

    def forward(self, x):
        return np.maximum(x, 0.0), x > 0

    def vjp(self, ctx, grad_out):
        return grad_out * ctx


class Sigmoid(DiffStage):
    name = "sigmoid"

    def forward(self, x):
        y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        return y, y

    def vjp(self, ctx, grad_out):
        return grad_out * ctx * (1.0 - ctx)


class Clamp01(DiffStage):
    # gradient passes only strictly inside (0,1)
    name = "clamp01"

    def forward(self, x):
        return np.clip(x, 0.0, 1.0), (x > 0.0) & (x < 1.0)

    def vjp(self, ctx, grad_out):
        return grad_out * ctx


class GlobalAvgPool(DiffStage):
    name = "global_avg_pool"

    def forward(self, x):
        return x.mean(axis=(1, 2)), x.shape

    def vjp(self, ctx, grad_out):
        c, h, w = ctx
        return np.broadcast_to(grad_out[:, None, None] / (h * w), ctx).copy()


class Softmax(DiffStage):
    name = "softmax"

    def forward(self, x):
        s = softmax(x)
        return s, s

    def vjp(self, ctx, grad_out):
        s = ctx
        return s * (grad_out - np.dot(s, grad_out))


class Upsample2x(DiffStage):
    """Nearest-neighbor 2x upsample; adjoint sums each 2x2 block."""

    name = "upsample2x"

    def forward(self, x):
        return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2), x.shape

    def vjp(self, ctx, grad_out):
        c, h, w = ctx
        return grad_out.reshape(c, h, 2, w, 2).sum(axis=(2, 4))


class ReplicatePad2d(DiffStage):
    """Edge-replication padding; adjoint folds the border back in."""

    name = "replicate_pad"

    def __init__(self, pad_h: int, pad_w: int | None = None):
        self.ph = pad_h
        self.pw = pad_h if pad_w is None else pad_w

    def forward(self, x):
        return np.pad(x, ((0, 0), (self.ph, self.ph), (self.pw, self.pw)), mode="edge"), x.shape

    def vjp(self, ctx, grad_out):
        _, h, w = ctx
        ph, pw = self.ph, self.pw
        g = grad_out
        if ph:
            t = g[:, ph : ph + h, :].copy()
            t[:, 0, :] += g[:, :ph, :].sum(axis=1)
            t[:, -1, :] += g[:, ph + h :, :].sum(axis=1)
            g = t
        else:
            g = g.copy()
        if pw:
            t = g[:, :, pw : pw + w].copy()
            t[:, :, 0] += g[:, :, :pw].sum(axis=2)
            t[:, :, -1] += g[:, :, pw + w :].sum(axis=2)
            g = t
        return g


class GridSample(DiffStage):
    """Bilinear warp with a fixed grid; gradient flows to the image only."""

    name = "grid_sample"

    def __init__(self, grid: np.ndarray):
        if grid.ndim != 3 or grid.shape[-1] != 2:
            raise ShapeError(f"grid last dimension must be 2, got {grid.shape}")
        self.grid = np.ascontiguousarray(grid)

    def forward(self, x):
        return _kernels.grid_sample(x, self.grid), x.shape

    def vjp(self, ctx, grad_out):
        _, h, w = ctx
        return _kernels.grid_sample_vjp(self.grid, grad_out, h, w)


def resize_grid(h_in: int, w_in: int, h_out: int, w_out: int, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Pixel-center-aligned source grid for bilinear resizing."""
    ys = (np.arange(h_out, dtype=dtype) + 0.5) * (h_in / h_out) - 0.5
    xs = (np.arange(w_out, dtype=dtype) + 0.5) * (w_in / w_out) - 0.5
    return np.ascontiguousarray(np.stack(np.meshgrid(ys, xs, indexing="ij"), axis=-1))


class Resize(DiffStage):
    name = "resize"

    def __init__(self, h_in: int, w_in: int, h_out: int, w_out: int, dtype=DEFAULT_DTYPE):
        self._inner = GridSample(resize_grid(h_in, w_in, h_out, w_out, dtype))
        self.in_shape = (h_in, w_in)

    def forward(self, x):
        return self._inner.forward(x)

    def vjp(self, ctx, grad_out):
        return self._inner.vjp(ctx, grad_out)


class Pipeline(DiffStage):
    """Sequential composition; ctx is the list of member contexts."""

    name = "pipeline"

    def __init__(self, stages, name="pipeline"):
        self.stages = list(stages)
        self.name = name

    @property
    def straight_through(self):  # a chain is exact only if every link is
        return any(s.straight_through for s in self.stages)

    def forward(self, x):
        ctxs = []
        for s in self.stages:
            x, ctx = s.forward(x)
            ctxs.append(ctx)
        return x, ctxs

    def vjp(self, ctx, grad_out):
        g = grad_out
        for s, c in zip(reversed(self.stages), reversed(ctx)):
            g = s.vjp(c, g)
        return g

    def params(self):
        out = {}
        for i, s in enumerate(self.stages):
            for k, v in s.params().items():
                out[f"{i}.{k}"] = v
        return out

    def vjp_with_params(self, ctx, grad_out):
        """Backward pass returning (grad_in, {param_name: grad})."""
        g = grad_out
        grads = {}
        for i in range(len(self.stages) - 1, -1, -1):
            s, c = self.stages[i], ctx[i]
            for k, v in s.vjp_params(c, g).items():
                grads[f"{i}.{k}"] = v
            g = s.vjp(c, g)
        return g, grads

    def set_params(self, values: dict):
        for i, s in enumerate(self.stages):
            own = s.params()
            for k in own:
                full = f"{i}.{k}"
                if full in values:
                    setattr(s, k, values[full])


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------


@dataclass
class FiniteDiffReport:
    stage: str
    max_rel_error: float | None
    skipped: bool
    message: str

    def passed(self, tolerance: float) -> bool:
        return self.skipped or (self.max_rel_error is not None and self.max_rel_error <= tolerance)


def _rel_err(a: float, b: float) -> float:
    scale = max(abs(a), abs(b), 1e-10)
    return abs(a - b) / scale


def finite_diff_check(stage: DiffStage, x: np.ndarray, probes: int = 8,
                      tolerance: float = 1e-6, seed: int = 0, step: float = 1e-6) -> FiniteDiffReport:
    """Max relative error of the analytic VJP against central differences.

    Probes random (cotangent, direction) pairs: <vjp(u), v> must match the
    directional derivative of <u, forward(x)> along v. The stage's forward
    must be deterministic (freeze stochastic transforms first).
    """
    if probes < 1:
        raise ValueError("probes must be >= 1")
    if stage.straight_through:
        return FiniteDiffReport(stage.name, None, True, "identity-gradient, skipped")
    rng = rng_from(seed, "fdcheck", stage.name)
    y, ctx = stage.forward(x)
    _check_finite(y, f"{stage.name} forward")
    worst = 0.0
    for _ in range(probes):
        u = rng.standard_normal(np.shape(y)).astype(x.dtype, copy=False)
        v = rng.standard_normal(np.shape(x)).astype(x.dtype, copy=False)
        gx = stage.vjp(ctx, u)
        _check_finite(gx, f"{stage.name} vjp")
        analytic = float(np.vdot(gx, v))
        yp, _ = stage.forward(x + step * v)
        ym, _ = stage.forward(x - step * v)
        numeric = float(np.vdot(u, (yp - ym))) / (2.0 * step)
        if not np.isfinite(numeric):
            raise NonFiniteError(f"finite differences diverged for {stage.name}")
        worst = max(worst, _rel_err(analytic, numeric))
    status = "ok" if worst <= tolerance else "FAIL"
    return FiniteDiffReport(stage.name, worst, False, status)


def finite_diff_gradient_check(f, grad: np.ndarray, theta: np.ndarray, probes: int = 8,
                               seed: int = 0, step: float = 1e-6) -> float:
    """Max relative error of an analytic gradient of a scalar function."""
    rng = rng_from(seed, "fdgrad")
    worst = 0.0
    for _ in range(probes):
        v = rng.standard_normal(theta.shape)
        analytic = float(np.vdot(grad, v))
        numeric = (f(theta + step * v) - f(theta - step * v)) / (2.0 * step)
        worst = max(worst, _rel_err(analytic, float(numeric)))
    return worst


# ---------------------------------------------------------------------------
# binary tensor file
# ---------------------------------------------------------------------------

_MAGIC = b"EOLT"
_DTYPE_CODES = {0: np.float64, 1: np.float32}
_CODE_FOR = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    code = _CODE_FOR.get(arr.dtype)
    if code is None:
        raise ValueError(f"unsupported dtype {arr.dtype}; use float64 or float32")
    if arr.ndim > 255:
        raise ValueError("too many dimensions")
    head = _MAGIC + struct.pack("<BBB", 1, code, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
    payload = np.ascontiguousarray(arr, dtype=arr.dtype).astype(arr.dtype.newbyteorder("<")).tobytes()
    return head + dims + payload


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor record; returns (array, next offset)."""
    if buf[offset : offset + 4] != _MAGIC:
        raise ValueError("bad tensor file magic")
    version, code, ndim = struct.unpack_from("<BBB", buf, offset + 4)
    if version != 1:
        raise ValueError(f"unsupported tensor file version {version}")
    if code not in _DTYPE_CODES:
        raise ValueError(f"unknown dtype code {code}")
    pos = offset + 7
    shape = struct.unpack_from(f"<{ndim}I", buf, pos) if ndim else ()
    pos += 4 * ndim
    dtype = np.dtype(_DTYPE_CODES[code]).newbyteorder("<")
    count = int(np.prod(shape)) if ndim else 1
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=pos).astype(_DTYPE_CODES[code]).reshape(shape)
    return arr, pos + count * dtype.itemsize


def save_tensor(path, arr: np.ndarray):
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(arr))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        arr, _ = tensor_from_bytes(fh.read())
    return arr
