"""REINFORCE training of the transformation policy.

Per image: sample trajectories from the capped policy distribution, roll
each into a one-step perturbation whose gradient averages the
trajectory's sub-policies, score the perturbed image against every
validation transform (at the fixed mid magnitude), and update the policy
weights with advantage-weighted log-probability gradients under SGD with
momentum and a warmup+cosine learning-rate schedule.

Because all trajectories of an image share one policy forward pass, their
weighted log-prob gradients are combined into a single logits cotangent
and backpropagated once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .attack import AttackBudget, FixedSampler, pgd
from .autodiff import softmax
from .errors import NonFiniteError
from .policy import (
    PolicyNet,
    cap_probabilities,
    sample_trajectory,
    save_policy,
    trajectory_logit_grad,
)
from .transforms import TRANSFORMS, Catalog

REWARD_MAGNITUDE = 4  # validation transforms are scored at their mid level


@dataclass(frozen=True)
class TrainerConfig:
    epochs: int = 5
    batch_size: int = 8
    n_traj: int = 10
    traj_len: int = 6
    lr: float = 0.001
    momentum: float = 0.9
    warmup_epochs: int = 2
    cap: float = 1.0 / 6.0
    inner_pgd_steps: int = 1

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        positives = {
            "batch_size": self.batch_size,
            "n_traj": self.n_traj,
            "traj_len": self.traj_len,
            "lr": self.lr,
            "cap": self.cap,
            "inner_pgd_steps": self.inner_pgd_steps,
        }
        for name, value in positives.items():
            if value <= 0:
                raise ValueError(f"{name} must be positive, got {value}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")
        if self.epochs > 0 and self.warmup_epochs >= self.epochs:
            raise ValueError("warmup_epochs must be < epochs")


@dataclass
class RewardRecord:
    rewards: list[float]
    baseline: float
    advantages: list[float]
    policy_loss: float


@dataclass
class TrainLogRow:
    epoch: int
    step: int
    lr: float
    mean_reward: float
    policy_loss: float


def compute_reward(model, x, x_adv, val_transforms, rng, y_clean=None,
                   magnitude: int = REWARD_MAGNITUDE) -> float:
    """Mean squared generator-output deviation over the validation set."""
    names = list(val_transforms)
    if not names:
        raise ValueError("validation transform set is empty")
    if y_clean is None:
        y_clean = model.forward(x)[0]
    n = y_clean.size
    total = 0.0
    for name in names:
        t_out, _ = TRANSFORMS[name].apply(x_adv, magnitude, rng)
        y, _ = model.forward(t_out)
        d = y - y_clean
        total += float(np.mean(d * d))
    return total / len(names)


def advantages(rewards) -> list[float]:
    r = np.asarray(list(rewards), dtype=np.float64)
    if r.size == 0:
        raise ValueError("need at least one reward")
    return list(r - r.mean())


def policy_loss(advs, log_probs) -> float:
    a = np.asarray(list(advs), dtype=np.float64)
    lp = np.asarray(list(log_probs), dtype=np.float64)
    if a.shape != lp.shape:
        raise ValueError(f"length mismatch: {a.shape} advantages vs {lp.shape} log-probs")
    return float(-(a * lp).mean())


def lr_schedule(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warmup from 0 to base_lr, then cosine decay toward 0."""
    if warmup_steps >= total_steps:
        raise ValueError(f"warmup_steps {warmup_steps} must be < total_steps {total_steps}")
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def sgd_momentum_update(theta, grad, velocity, lr, momentum, name="param"):
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError(f"non-finite gradient for {name}")
    v_new = momentum * velocity + grad
    return theta - lr * v_new, v_new


def _inner_budget(attack_budget: AttackBudget, config: TrainerConfig) -> AttackBudget:
    return AttackBudget(
        epsilon=attack_budget.epsilon,
        alpha=attack_budget.alpha,
        steps=config.inner_pgd_steps,
        samples_per_step=config.traj_len,
    )


def train_step(net: PolicyNet, model, x_batch, policy_catalog: Catalog, s_v,
               config: TrainerConfig, rng, attack_budget: AttackBudget,
               lr: float, velocity: dict) -> tuple[list[RewardRecord], float, float]:
    """One batched REINFORCE update; returns (records, mean_reward, mean_loss)."""
    if config.cap < 1.0 / policy_catalog.logit_count:
        raise ValueError("probability cap infeasible for this catalog")
    inner = _inner_budget(attack_budget, config)
    grad_total: dict[str, np.ndarray] = {}
    records = []
    for x in x_batch:
        y_clean = model.forward(x)[0]
        logits, ctx = net.forward_logits(x)
        p_uncapped = softmax(logits)
        dist = cap_probabilities(p_uncapped, config.cap)
        trajs = [sample_trajectory(dist, config.traj_len, rng, policy_catalog)
                 for _ in range(config.n_traj)]
        for tr in trajs:
            result = pgd(model, x, FixedSampler(tr.subpolicies), inner, rng,
                         catalog=policy_catalog, final_eval=False)
            tr.reward = compute_reward(model, x, result.x_adv, s_v, rng, y_clean=y_clean)
        advs = advantages([tr.reward for tr in trajs])
        for tr, a in zip(trajs, advs):
            tr.advantage = a
        loss_val = policy_loss(advs, [tr.log_prob for tr in trajs])
        glogits = np.zeros_like(p_uncapped)
        for tr in trajs:
            glogits += (-tr.advantage / config.n_traj) * trajectory_logit_grad(tr.indices, p_uncapped)
        for name, g in net.backward_params(ctx, glogits).items():
            if name in grad_total:
                grad_total[name] += g
            else:
                grad_total[name] = g.copy()
        records.append(RewardRecord(
            rewards=[tr.reward for tr in trajs],
            baseline=float(np.mean([tr.reward for tr in trajs])),
            advantages=advs,
            policy_loss=loss_val,
        ))
    n_img = len(x_batch)
    params = net.params()
    updated = {}
    for name in params:
        g = grad_total[name] / n_img
        if name not in velocity:
            velocity[name] = np.zeros_like(g)
        updated[name], velocity[name] = sgd_momentum_update(
            params[name], g, velocity[name], lr, config.momentum, name=name)
    net.set_params(updated)
    mean_reward = float(np.mean([r.baseline for r in records]))
    mean_loss = float(np.mean([r.policy_loss for r in records]))
    return records, mean_reward, mean_loss


@dataclass
class TrainResult:
    net: PolicyNet
    curve: list[float] = field(default_factory=list)  # mean validation reward per epoch
    log_rows: list[TrainLogRow] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)


def train(net: PolicyNet, model, images, policy_catalog: Catalog, s_v,
          config: TrainerConfig, rng, attack_budget: AttackBudget,
          checkpoint_dir=None) -> TrainResult:
    """Epoch loop over seeded shuffles of the image set."""
    images = list(images)
    if not images:
        raise ValueError("dataset is empty")
    result = TrainResult(net=net)
    if config.epochs == 0:
        return result
    n_batches = math.ceil(len(images) / config.batch_size)
    total_steps = config.epochs * n_batches
    warmup_steps = config.warmup_epochs * n_batches
    velocity: dict = {}
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(images))
        epoch_rewards = []
        for b in range(n_batches):
            batch_idx = order[b * config.batch_size : (b + 1) * config.batch_size]
            batch = [images[i] for i in batch_idx]
            lr = lr_schedule(step, total_steps, warmup_steps, config.lr)
            _, mean_reward, mean_loss = train_step(
                net, model, batch, policy_catalog, s_v, config, rng, attack_budget, lr, velocity)
            result.log_rows.append(TrainLogRow(epoch, step, lr, mean_reward, mean_loss))
            epoch_rewards.append(mean_reward)
            step += 1
        result.curve.append(float(np.mean(epoch_rewards)))
        if checkpoint_dir is not None:
            from pathlib import Path

            path = Path(checkpoint_dir) / f"policy_epoch{epoch + 1}.ckpt"
            save_policy(path, net, policy_catalog)
            result.checkpoints.append(str(path))
    return result
