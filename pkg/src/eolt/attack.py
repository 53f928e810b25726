"""Gradient-based protective-perturbation attacks.

The adversarial objective is the per-element mean squared difference
between the generator output for the transformed, perturbed image and its
cached output for the clean image; maximizing it drives the swapped
result away from what the clean source would produce. FGSM takes one
signed step of size epsilon; PGD iterates signed steps of size alpha with
projection onto the l-inf epsilon ball and the valid pixel box. EOT draws
transforms uniformly each iteration; EOLT draws them from a learned,
input-conditioned capped distribution computed once per image.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteError, ShapeError
from .transforms import Catalog, SubPolicy

L_INF = "linf"


@dataclass(frozen=True)
class AttackBudget:
    epsilon: float
    alpha: float
    steps: int
    samples_per_step: int = 1
    norm: str = L_INF
    # delta starts at 0 by default; the no-transform objective has an exact
    # saddle there (F(x+0) equals the cached clean output), so the plain-PGD
    # baseline needs a seeded uniform start inside the epsilon ball
    random_start: bool = False

    def __post_init__(self):
        if not (0.0 < self.alpha <= self.epsilon <= 1.0):
            raise ValueError(f"need 0 < alpha <= epsilon <= 1, got alpha={self.alpha}, epsilon={self.epsilon}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.samples_per_step < 1:
            raise ValueError("samples_per_step must be >= 1")
        if self.norm != L_INF:
            raise ValueError("only the l-inf norm is supported")


# paper-protocol defaults: 150 iterations, step 0.01, budget 0.05
DEFAULT_BUDGET = AttackBudget(epsilon=0.05, alpha=0.01, steps=150)


def draw_indices(rng, probs: np.ndarray, m: int) -> np.ndarray:
    """m inverse-CDF draws; shared by every sampler so equal distributions
    consume the rng stream identically."""
    cdf = np.cumsum(probs)
    cdf[-1] = 1.0
    return np.minimum(np.searchsorted(cdf, rng.random(m), side="right"), len(probs) - 1)


class TransformSampler:
    """Yields the sub-policies (or None = identity) used at one PGD step."""

    mode = "none"

    def draw(self, rng, m: int) -> list[SubPolicy | None]:
        return [None] * m


class NoTransformSampler(TransformSampler):
    mode = "none"


class FixedSampler(TransformSampler):
    """Always returns the given sub-policies (cycled to length m)."""

    mode = "fixed"

    def __init__(self, subpolicies):
        subpolicies = list(subpolicies) if isinstance(subpolicies, (list, tuple)) else [subpolicies]
        if not subpolicies:
            raise ValueError("FixedSampler needs at least one sub-policy")
        self.subpolicies = subpolicies

    def draw(self, rng, m):
        return [self.subpolicies[i % len(self.subpolicies)] for i in range(m)]


class UniformSampler(TransformSampler):
    """Equal probability over every sub-policy of the given transforms."""

    mode = "uniform"

    def __init__(self, catalog: Catalog, transform_names=None):
        names = list(transform_names) if transform_names is not None else catalog.names
        unknown = [n for n in names if n not in catalog.names]
        if unknown:
            raise ValueError(f"transforms not in catalog: {unknown}")
        self.catalog = catalog
        self.subpolicies = [
            SubPolicy(e, m) for e in catalog.entries if e.name in names for m in range(catalog.M)
        ]
        self.probs = np.full(len(self.subpolicies), 1.0 / len(self.subpolicies))

    def draw(self, rng, m):
        idx = draw_indices(rng, self.probs, m)
        return [self.subpolicies[i] for i in idx]


class PolicySampler(TransformSampler):
    """Draws sub-policy indices from a capped policy distribution."""

    mode = "policy"

    def __init__(self, catalog: Catalog, probs: np.ndarray):
        if len(probs) != catalog.logit_count:
            raise ShapeError(f"policy probs {len(probs)} vs catalog logits {catalog.logit_count}")
        self.catalog = catalog
        self.probs = np.asarray(probs, dtype=np.float64)

    def draw(self, rng, m):
        idx = draw_indices(rng, self.probs, m)
        return [self.catalog.decode(int(i)) for i in idx]


@dataclass
class AttackResult:
    x_adv: np.ndarray
    delta: np.ndarray
    loss_trace: list[float] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.loss_trace[-1]


def adv_loss(y_clean_output: np.ndarray, y_perturbed_transformed: np.ndarray) -> float:
    """Per-element mean squared difference between generator outputs."""
    if y_clean_output.shape != y_perturbed_transformed.shape:
        raise ShapeError(f"adv_loss: {y_clean_output.shape} vs {y_perturbed_transformed.shape}")
    d = y_perturbed_transformed - y_clean_output
    return float(np.mean(d * d))


def _objective_and_grad(model, catalog, x, delta, y_clean, sampler, rng, m):
    """Mean loss and mean input gradient over m sampler draws.

    Pipeline per draw: clamp01(x + delta) -> transform -> model -> MSE
    against the cached clean output; the backward pass retraces it.
    """
    x_raw = x + delta
    x_adv = np.clip(x_raw, 0.0, 1.0)
    interior = (x_raw > 0.0) & (x_raw < 1.0)
    total_loss = 0.0
    grad = np.zeros_like(x)
    n = y_clean.size
    for sp in sampler.draw(rng, m):
        if sp is None:
            t_out, t_ctx = x_adv, None
        else:
            t_out, t_ctx = catalog.apply(x_adv, sp, rng)
        y, m_ctx = model.forward(t_out)
        diff = y - y_clean
        total_loss += float(np.mean(diff * diff))
        gy = (2.0 / n) * diff
        gt = model.vjp(m_ctx, gy)
        gx = gt if t_ctx is None else catalog.vjp(t_ctx, gt)
        grad += gx * interior
    return total_loss / m, grad / m


def eot_gradient(model, x, delta, sampler, rng, catalog=None, m=1, y_clean=None):
    """Monte-Carlo estimate of the expected objective's input gradient."""
    if y_clean is None:
        y_clean = model.forward(x)[0]
    _, grad = _objective_and_grad(model, catalog or Catalog(), x, delta, y_clean, sampler, rng, m)
    return grad


def _check_feasible(x, delta, epsilon, step):
    if float(np.max(np.abs(delta))) > epsilon + 1e-9:
        raise AssertionError(f"step {step}: ||delta||_inf exceeds epsilon")
    xa = x + delta
    if float(xa.min()) < -1e-12 or float(xa.max()) > 1.0 + 1e-12:
        raise AssertionError(f"step {step}: x_adv left [0,1]")


def fgsm(model, x, sampler, budget: AttackBudget, rng=None, catalog=None) -> AttackResult:
    """Single signed step of size epsilon; the sampler is consulted once."""
    rng = rng if rng is not None else np.random.default_rng(0)
    catalog = catalog or Catalog()
    y_clean = model.forward(x)[0]
    loss0, grad = _objective_and_grad(model, catalog, x, np.zeros_like(x), y_clean,
                                      sampler, rng, budget.samples_per_step)
    delta = budget.epsilon * np.sign(grad)
    x_adv = np.clip(x + delta, 0.0, 1.0)
    loss1, _ = _objective_and_grad(model, catalog, x, np.clip(x_adv - x, -budget.epsilon, budget.epsilon),
                                   y_clean, sampler, rng, budget.samples_per_step)
    return AttackResult(x_adv=x_adv, delta=delta, loss_trace=[loss0, loss1])


def pgd(model, x, sampler, budget: AttackBudget, rng, catalog=None, final_eval=True) -> AttackResult:
    """Projected gradient ascent from delta = 0.

    Each step draws ``samples_per_step`` fresh sub-policies, averages their
    input gradients, applies the signed step, projects onto the epsilon
    ball, and clips x + delta back into the pixel box. The trace holds the
    objective before each step plus (with ``final_eval``) one evaluation of
    the finished perturbation, so steps + 1 values.
    """
    catalog = catalog or Catalog()
    y_clean = model.forward(x)[0]
    if budget.random_start:
        delta = rng.uniform(-budget.epsilon, budget.epsilon, size=x.shape).astype(x.dtype)
        delta = np.clip(delta, -x, 1.0 - x)
    else:
        delta = np.zeros_like(x)
    trace = []
    m = budget.samples_per_step
    for step in range(budget.steps):
        loss, grad = _objective_and_grad(model, catalog, x, delta, y_clean, sampler, rng, m)
        if not np.all(np.isfinite(grad)):
            raise NonFiniteError(f"pgd: non-finite gradient at step {step}")
        trace.append(loss)
        delta = delta + budget.alpha * np.sign(grad)
        delta = np.clip(delta, -budget.epsilon, budget.epsilon)
        delta = np.clip(delta, -x, 1.0 - x)
        _check_feasible(x, delta, budget.epsilon, step)
    if final_eval:
        final_loss, _ = _objective_and_grad(model, catalog, x, delta, y_clean, sampler, rng, m)
        trace.append(final_loss)
    return AttackResult(x_adv=np.clip(x + delta, 0.0, 1.0), delta=delta, loss_trace=trace)


def eolt_attack(model, x, policy, budget: AttackBudget, rng, catalog=None, cap=None) -> AttackResult:
    """PGD with sub-policies resampled each step from the policy's capped
    distribution, which is computed once per image from the clean input."""
    from .policy import policy_distribution  # local import to avoid a cycle

    catalog = catalog or Catalog()
    dist = policy_distribution(policy, x, cap=cap)
    return pgd(model, x, PolicySampler(catalog, dist.probs), budget, rng, catalog=catalog)
