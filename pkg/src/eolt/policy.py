"""Input-conditioned sampling policy over sub-policies.

A small CNN backbone plus a linear head produces one logit per
(transform, magnitude) pair. The softmax of the logits is capped by
iterative clip-and-renormalize water-filling so no single sub-policy can
absorb excessive probability mass, and trajectories are sampled from the
capped distribution with replacement.

Gradient convention: sampling uses the capped distribution, while
REINFORCE gradients flow through the *uncapped* log-softmax (clipped
entries would otherwise have zero local sensitivity). Trajectory
log-probabilities are reported under the sampling (capped) distribution.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    DEFAULT_DTYPE,
    Conv2d,
    DiffStage,
    GlobalAvgPool,
    Linear,
    Pipeline,
    ReLU,
    Resize,
    log_softmax,
    softmax,
    tensor_from_bytes,
    tensor_to_bytes,
)
from .attack import draw_indices
from .errors import InfeasibleCapError, ShapeError
from .models import he_conv, he_linear
from .seeding import rng_from
from .transforms import Catalog, SubPolicy

DEFAULT_CAP = 1.0 / 6.0
TRAJ_LEN = 6  # sub-policies per trajectory
N_TRAJ = 10  # trajectories per image

BACKBONES = ("small-cnn", "preact-resnet18-equivalent")


@dataclass
class CappedDistribution:
    probs: np.ndarray
    cap: float


@dataclass
class Trajectory:
    subpolicies: list[SubPolicy]
    indices: np.ndarray
    log_prob: float
    reward: float | None = None
    advantage: float | None = None


def cap_probabilities(p: np.ndarray, c: float) -> CappedDistribution:
    """Water-fill: clip entries above c, renormalize the rest, repeat.

    Preserves the relative order of unclipped entries; the fixed point is
    min(t * p, c) with t chosen so the result sums to 1.
    """
    p = np.asarray(p, dtype=np.float64)
    n = p.size
    if c < 1.0 / n - 1e-12:
        raise InfeasibleCapError(f"cap {c} below 1/{n}; no distribution can satisfy it")
    if np.any(p < 0) or abs(float(p.sum()) - 1.0) > 1e-6:
        raise ValueError("input must be a probability vector")
    p = p / p.sum()
    q = p.copy()
    frozen = np.zeros(n, dtype=bool)
    for _ in range(n):
        over = (q > c * (1 + 1e-12)) & ~frozen
        if not over.any():
            break
        frozen |= over
        residual = 1.0 - c * frozen.sum()
        free = ~frozen
        q[frozen] = c
        s = p[free].sum()
        if s <= 0.0:
            q[free] = residual / max(free.sum(), 1)
        else:
            q[free] = p[free] * (residual / s)
    return CappedDistribution(probs=q, cap=c)


def sample_trajectory(dist: CappedDistribution, traj_len: int, rng, catalog: Catalog) -> Trajectory:
    """traj_len independent draws with replacement from the capped policy."""
    if traj_len < 1:
        raise ValueError("traj_len must be >= 1")
    idx = draw_indices(rng, dist.probs, traj_len)
    log_prob = float(np.sum(np.log(np.maximum(dist.probs[idx], 1e-300))))
    return Trajectory(
        subpolicies=[catalog.decode(int(i)) for i in idx],
        indices=np.asarray(idx, dtype=np.int64),
        log_prob=log_prob,
    )


class PreactBlock(DiffStage):
    """Pre-activation residual block: conv(relu(.)) x2 plus a shortcut."""

    name = "preact_block"

    def __init__(self, w1, w2, w_skip=None, stride=1):
        self.conv1 = Conv2d(w1, stride=stride, padding="same")
        self.conv2 = Conv2d(w2, stride=1, padding="same")
        self.skip = Conv2d(w_skip, stride=stride, padding="same") if w_skip is not None else None

    def forward(self, x):
        mask_x = x > 0
        h = np.maximum(x, 0.0)
        a, c1 = self.conv1.forward(h)
        mask_a = a > 0
        b = np.maximum(a, 0.0)
        c, c2 = self.conv2.forward(b)
        if self.skip is not None:
            s, cs = self.skip.forward(h)
        else:
            s, cs = x, None
        return c + s, (mask_x, c1, mask_a, c2, cs)

    def vjp(self, ctx, grad_out):
        mask_x, c1, mask_a, c2, cs = ctx
        gb = self.conv2.vjp(c2, grad_out)
        gh = self.conv1.vjp(c1, gb * mask_a)
        if self.skip is not None:
            gh = gh + self.skip.vjp(cs, grad_out)
            return gh * mask_x
        return gh * mask_x + grad_out

    def params(self):
        out = {"conv1.weight": self.conv1.weight, "conv2.weight": self.conv2.weight}
        if self.skip is not None:
            out["skip.weight"] = self.skip.weight
        return out

    def vjp_params(self, ctx, grad_out):
        mask_x, c1, mask_a, c2, cs = ctx
        gb = self.conv2.vjp(c2, grad_out)
        out = {
            "conv2.weight": self.conv2.vjp_params(c2, grad_out)["weight"],
            "conv1.weight": self.conv1.vjp_params(c1, gb * mask_a)["weight"],
        }
        if self.skip is not None:
            out["skip.weight"] = self.skip.vjp_params(cs, grad_out)["weight"]
        return out

    def __setattr__(self, key, value):
        # route param assignment (e.g. "conv1.weight") back to the stages
        if key in ("conv1.weight", "conv2.weight", "skip.weight"):
            stage = getattr(self, key.split(".")[0])
            stage.weight = value
        else:
            object.__setattr__(self, key, value)


def _build_backbone(kind: str, rng, dtype):
    if kind == "small-cnn":
        stages = [
            Conv2d(he_conv(rng, 16, 3, 3, dtype), stride=2, padding="same"),
            ReLU(),
            Conv2d(he_conv(rng, 32, 16, 3, dtype), stride=2, padding="same"),
            ReLU(),
            Conv2d(he_conv(rng, 64, 32, 3, dtype), stride=2, padding="same"),
            ReLU(),
            GlobalAvgPool(),
        ]
        return Pipeline(stages, name="small-cnn"), 64
    if kind == "preact-resnet18-equivalent":
        stages = [
            Conv2d(he_conv(rng, 16, 3, 3, dtype), stride=1, padding="same"),
            PreactBlock(
                he_conv(rng, 32, 16, 3, dtype), he_conv(rng, 32, 32, 3, dtype),
                he_conv(rng, 32, 16, 1, dtype), stride=2,
            ),
            PreactBlock(
                he_conv(rng, 64, 32, 3, dtype), he_conv(rng, 64, 64, 3, dtype),
                he_conv(rng, 64, 32, 1, dtype), stride=2,
            ),
            PreactBlock(
                he_conv(rng, 64, 64, 3, dtype), he_conv(rng, 64, 64, 3, dtype),
                he_conv(rng, 64, 64, 1, dtype), stride=2,
            ),
            ReLU(),
            GlobalAvgPool(),
        ]
        return Pipeline(stages, name="preact-resnet18-equivalent"), 64
    raise ValueError(f"unknown backbone {kind!r}; expected one of {BACKBONES}")


class PolicyNet:
    """Backbone + linear head producing one logit per sub-policy."""

    def __init__(self, logit_count: int, backbone: str = "small-cnn",
                 input_size: int = 64, seed: int = 0, dtype=DEFAULT_DTYPE):
        if input_size % 8:
            raise ValueError(f"policy input size must be a multiple of 8, got {input_size}")
        rng = rng_from(seed, "policy-net", backbone)
        self.backbone_kind = backbone
        self.backbone, feat_dim = _build_backbone(backbone, rng, dtype)
        self.head = Linear(he_linear(rng, logit_count, feat_dim, dtype), np.zeros(logit_count, dtype=dtype))
        self.logit_count = logit_count
        self.input_size = input_size
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self._resizers: dict = {}

    def _resize(self, x):
        h, w = x.shape[1], x.shape[2]
        if (h, w) == (self.input_size, self.input_size):
            return x
        key = (h, w)
        if key not in self._resizers:
            self._resizers[key] = Resize(h, w, self.input_size, self.input_size, self.dtype)
        return self._resizers[key].forward(x)[0]

    def forward_logits(self, x):
        xr = self._resize(np.asarray(x, dtype=self.dtype))
        feats, bctx = self.backbone.forward(xr)
        logits, hctx = self.head.forward(feats)
        if logits.shape != (self.logit_count,):
            raise ShapeError(f"policy head produced {logits.shape}, catalog expects ({self.logit_count},)")
        return logits, (bctx, hctx)

    def backward_params(self, ctx, grad_logits) -> dict[str, np.ndarray]:
        bctx, hctx = ctx
        grads = {f"head.{k}": v for k, v in self.head.vjp_params(hctx, grad_logits).items()}
        gfeat = self.head.vjp(hctx, grad_logits)
        _, bgrads = self.backbone.vjp_with_params(bctx, gfeat)
        grads.update({f"backbone.{k}": v for k, v in bgrads.items()})
        return grads

    def params(self) -> dict[str, np.ndarray]:
        out = {f"backbone.{k}": v for k, v in self.backbone.params().items()}
        out["head.weight"] = self.head.weight
        out["head.bias"] = self.head.bias
        return out

    def set_params(self, values: dict):
        for name, arr in values.items():
            if name == "head.weight":
                self.head.weight = arr
            elif name == "head.bias":
                self.head.bias = arr
            elif name.startswith("backbone."):
                rest = name[len("backbone."):]
                idx, key = rest.split(".", 1)
                stage = self.backbone.stages[int(idx)]
                setattr(stage, key, arr)
            else:
                raise KeyError(f"unknown parameter {name}")


def policy_forward(net: PolicyNet, x) -> np.ndarray:
    """Deterministic logits over the catalog's sub-policies."""
    return net.forward_logits(x)[0]


def policy_distribution(net: PolicyNet, x, cap: float | None = None) -> CappedDistribution:
    return cap_probabilities(softmax(policy_forward(net, x)), DEFAULT_CAP if cap is None else cap)


def trajectory_logit_grad(indices: np.ndarray, probs_uncapped: np.ndarray) -> np.ndarray:
    """d/d(logits) of sum_draws log softmax(logits)[draw]."""
    counts = np.bincount(indices, minlength=len(probs_uncapped)).astype(probs_uncapped.dtype)
    return counts - len(indices) * probs_uncapped


def log_prob_gradient(net: PolicyNet, x, trajectory: Trajectory) -> dict[str, np.ndarray]:
    """Parameter gradient of the trajectory's uncapped log-probability."""
    logits, ctx = net.forward_logits(x)
    if trajectory.indices.max(initial=0) >= net.logit_count:
        raise IndexError("trajectory draw index outside the catalog")
    glogits = trajectory_logit_grad(trajectory.indices, softmax(logits))
    return net.backward_params(ctx, glogits)


def uncapped_log_prob(net: PolicyNet, x, indices: np.ndarray) -> float:
    """log prod softmax(logits)[i]; the quantity log_prob_gradient differentiates."""
    return float(log_softmax(policy_forward(net, x))[indices].sum())


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"EOLP"


def save_policy(path, net: PolicyNet, catalog: Catalog):
    meta = (
        f"backbone={net.backbone_kind}\n"
        f"input_size={net.input_size}\n"
        f"logit_count={net.logit_count}\n"
        f"seed={net.seed}\n"
        f"dtype={'f32' if net.dtype == np.float32 else 'f64'}\n"
        f"catalog_sha256={catalog.fingerprint()}\n"
    ).encode("utf-8")
    params = net.params()
    blob = bytearray()
    blob += _CKPT_MAGIC + struct.pack("<B", 1)
    blob += struct.pack("<I", len(meta)) + meta
    blob += struct.pack("<I", len(params))
    for name in sorted(params):
        nb = name.encode("utf-8")
        blob += struct.pack("<H", len(nb)) + nb
        blob += tensor_to_bytes(params[name])
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load_policy(path, catalog: Catalog) -> PolicyNet:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != _CKPT_MAGIC:
        raise ValueError("bad policy checkpoint magic")
    (version,) = struct.unpack_from("<B", buf, 4)
    if version != 1:
        raise ValueError(f"unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack_from("<I", buf, 5)
    pos = 9
    meta = dict(
        line.split("=", 1)
        for line in buf[pos : pos + meta_len].decode("utf-8").strip().splitlines()
    )
    pos += meta_len
    if meta["catalog_sha256"] != catalog.fingerprint():
        raise ValueError("checkpoint was trained for a different catalog (fingerprint mismatch)")
    dtype = np.float32 if meta["dtype"] == "f32" else np.float64
    net = PolicyNet(
        logit_count=int(meta["logit_count"]),
        backbone=meta["backbone"],
        input_size=int(meta["input_size"]),
        seed=int(meta["seed"]),
        dtype=dtype,
    )
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    values = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos : pos + nlen].decode("utf-8")
        pos += nlen
        arr, pos = tensor_from_bytes(buf, pos)
        values[name] = arr.astype(dtype)
    net.set_params(values)
    return net
