"""Single-round PGD with an exact L-infinity budget, optionally averaging
gradients over random pixel shifts.

Update order per step: gradient-sign step, clamp the perturbation relative
to the attack `baseline` into [-eps, eps], rebuild the iterate from the
baseline, clamp to the valid intensity range. The budget relative to the
baseline therefore holds after every step, not just at the end, and is
re-checked in 64-bit inside the loop.

All image arithmetic is float32. Per-sample RNG streams are derived from
(seed, sample id) so results do not depend on how a batch is partitioned.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import ULP32
from .transforms import sample_eot

# slack for float32 storage of iterates when budgets are checked in float64
BUDGET_TOL = 4 * ULP32


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 8 / 255
    step_size: float | None = None      # resolved to epsilon/4
    num_steps: int = 40
    num_eot: int = 10
    max_shift: int = 2                  # EOT pixel-shift radius
    clamp_lo: float = 0.0
    clamp_hi: float = 1.0
    seed: int = 0
    random_start: bool = False
    targeted: bool = False
    target_labels: tuple | None = None

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.step_size is None:
            default = self.epsilon / 4 if self.epsilon > 0 else 1 / 255
            object.__setattr__(self, "step_size", default)
        if self.step_size <= 0:
            raise ValueError(f"step size must be positive, got {self.step_size}")
        if self.num_steps < 1:
            raise ValueError(f"num_steps must be >= 1, got {self.num_steps}")
        if self.num_eot < 1:
            raise ValueError(f"num_eot must be >= 1, got {self.num_eot}")
        if self.max_shift < 0:
            raise ValueError(f"max_shift must be >= 0, got {self.max_shift}")
        if not self.clamp_lo < self.clamp_hi:
            raise ValueError(f"need clamp_lo < clamp_hi, got [{self.clamp_lo}, {self.clamp_hi}]")
        if self.seed < 0:
            raise ValueError(f"seed must be >= 0, got {self.seed}")
        if self.target_labels is not None:
            object.__setattr__(self, "target_labels", tuple(int(t) for t in self.target_labels))


@dataclass
class AttackResult:
    x_adv: np.ndarray          # float32, same shape as the input batch
    success: np.ndarray        # bool per sample
    loss_trace: np.ndarray     # per step, EOT-averaged summed cross-entropy
    predicted: np.ndarray      # labels the model assigns to x_adv


def rng_streams(seed: int, sample_ids, round_index: int | None = None) -> list:
    """One independent generator per sample, keyed by (seed[, round], id)."""
    streams = []
    for sid in sample_ids:
        sid = int(sid)
        if sid < 0:
            raise ValueError(f"sample ids must be >= 0, got {sid}")
        key = [int(seed), sid] if round_index is None else [int(seed), int(round_index), sid]
        streams.append(np.random.default_rng(np.random.SeedSequence(key)))
    return streams


def _eot_loss_grad(model, x, y, rngs, num_eot, max_shift):
    """Average loss and input gradient over per-sample random shifts.

    Accumulates in float64 so that with identity transforms the average is
    exactly the plain gradient. Gradients are routed through the shift by
    its adjoint (the opposite shift).
    """
    acc = np.zeros(x.shape, dtype=np.float64)
    loss_acc = 0.0
    for _ in range(num_eot):
        shifts = [sample_eot(r, max_shift) for r in rngs]
        shifted = np.stack([t.apply(x[i]) for i, t in enumerate(shifts)])
        loss, g = model.loss_and_grad(shifted, y)
        acc += np.stack([t.adjoint(g[i]) for i, t in enumerate(shifts)])
        loss_acc += loss
    return loss_acc / num_eot, (acc / num_eot).astype(np.float32)


def eot_gradient(model, x, y, num_eot: int, rngs, max_shift: int = 2) -> np.ndarray:
    """(1/num_eot) * sum of input gradients at randomly shifted copies of x."""
    if num_eot < 1:
        raise ValueError(f"num_eot must be >= 1, got {num_eot}")
    _, g = _eot_loss_grad(model, x, y, rngs, num_eot, max_shift)
    return g


def _check_labels(labels, n, num_classes, what):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ValueError(f"{what} shape {labels.shape} != ({n},)")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"{what} out of range [0, {num_classes})")
    return labels


def pgd_attack(model, images: np.ndarray, labels, cfg: AttackConfig,
               baseline: np.ndarray | None = None, rngs=None,
               sample_ids=None, target_labels=None) -> AttackResult:
    """Run PGD on a batch; the L-inf ball is centered on `baseline`.

    `baseline` defaults to `images` (cold start). Warm starts pass the
    current adversarial images as `images` and the ball center as
    `baseline`; the start must already lie in the ball.
    """
    x0 = np.array(images, dtype=np.float32)
    base = x0.copy() if baseline is None else np.array(baseline, dtype=np.float32)
    if base.shape != x0.shape:
        raise ValueError(f"baseline shape {base.shape} != images shape {x0.shape}")
    n = x0.shape[0]
    labels = _check_labels(labels, n, model.num_classes, "labels")
    if cfg.targeted:
        targets = target_labels if target_labels is not None else cfg.target_labels
        if targets is None:
            raise ValueError("targeted attack needs target labels")
        targets = _check_labels(targets, n, model.num_classes, "target labels")
    elif target_labels is not None:
        raise ValueError("target labels given but cfg.targeted is off")

    eps = float(cfg.epsilon)
    eps32 = np.float32(eps)
    step32 = np.float32(cfg.step_size)
    lo32, hi32 = np.float32(cfg.clamp_lo), np.float32(cfg.clamp_hi)
    if x0.size:
        if x0.min() < cfg.clamp_lo or x0.max() > cfg.clamp_hi:
            raise ValueError(f"images outside clamp range [{cfg.clamp_lo}, {cfg.clamp_hi}]")
        start_dist = float(np.max(np.abs(x0.astype(np.float64) - base.astype(np.float64))))
        if start_dist > eps + BUDGET_TOL:
            raise ValueError(f"warm start lies {start_dist:.6g} from baseline, beyond epsilon {eps:.6g}")

    if rngs is None:
        if sample_ids is None:
            sample_ids = range(n)
        rngs = rng_streams(cfg.seed, sample_ids)
    if len(rngs) != n:
        raise ValueError(f"{len(rngs)} RNG streams for {n} samples")

    def project(x):
        eta = np.clip(x - base, -eps32, eps32)
        return np.clip(base + eta, lo32, hi32)

    def check_budget(x):
        if x.size == 0:
            return
        dist = float(np.max(np.abs(x.astype(np.float64) - base.astype(np.float64))))
        if dist > eps + BUDGET_TOL:
            raise RuntimeError(f"budget invariant broken: {dist:.9g} > {eps:.9g}")
        if x.min() < cfg.clamp_lo or x.max() > cfg.clamp_hi:
            raise RuntimeError("iterate left the clamp range")

    x = project(x0)  # no-op within tolerance; pins warm starts to the ball exactly
    if cfg.random_start and eps > 0:
        noise = np.stack([r.uniform(-eps, eps, x.shape[1:]) for r in rngs])
        x = project(x + noise.astype(np.float32))
    check_budget(x)

    attack_labels = targets if cfg.targeted else labels
    trace = np.zeros(cfg.num_steps, dtype=np.float64)
    for step in range(cfg.num_steps):
        loss, g = _eot_loss_grad(model, x, attack_labels, rngs, cfg.num_eot, cfg.max_shift)
        if not np.all(np.isfinite(g)):
            raise RuntimeError(f"non-finite attack gradient at step {step}")
        sgn = np.sign(g)
        x = x - step32 * sgn if cfg.targeted else x + step32 * sgn
        x = project(x)
        check_budget(x)
        trace[step] = loss

    predicted = model.predict_labels(x)
    success = (predicted == targets) if cfg.targeted else (predicted != labels)
    return AttackResult(x, success, trace, predicted)
