"""Adversarial example generation: FGSM, PGD with restarts, FAB-as-attack,
and worst-case-ensemble robust accuracy.

All attacks work on the perturbation delta, project it onto the epsilon
ball before adding it to x, then clip into the box; a sample counts as
attacked-successfully when its logit margin is <= 0 at the returned point.
Per-sample seeds derive from (spec.seed, sample index, restart), so results
do not depend on how a dataset is sharded into batches.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .losses import cross_entropy
from .margins import (
    FabFailure,
    MarginEstimate,
    NormSpec,
    batch_logit_margins,
    fab_margins,
)

ATTACK_KINDS = ("fgsm", "pgd", "fab")
FAB_PUSH = 1e-3  # input units past the boundary point


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    norm: NormSpec = NormSpec()
    epsilon: float = 8.0 / 255.0
    steps: int = 20
    step_size: float | None = None  # pgd default: 2.5 * epsilon / steps
    restarts: int = 1
    random_start: bool = True
    clip_min: float | None = None
    clip_max: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"AttackSpec: unknown kind {self.kind!r}")
        if self.epsilon < 0:
            raise ValueError("AttackSpec: epsilon must be >= 0")
        if self.steps < 1:
            raise ValueError("AttackSpec: steps must be >= 1")
        if self.restarts < 1:
            raise ValueError("AttackSpec: restarts must be >= 1")
        lo, hi = self.box
        if not lo < hi:
            raise ValueError("AttackSpec: clip_min must be below clip_max")
        if self.kind == "pgd" and self.epsilon > 0 and self.resolved_step_size <= 0:
            raise ValueError("AttackSpec: step_size must be > 0 for pgd")

    @property
    def box(self) -> tuple[float, float]:
        lo = -np.inf if self.clip_min is None else float(self.clip_min)
        hi = np.inf if self.clip_max is None else float(self.clip_max)
        return lo, hi

    @property
    def resolved_step_size(self) -> float:
        if self.step_size is not None:
            return float(self.step_size)
        return 2.5 * self.epsilon / self.steps

    def label(self) -> str:
        return f"{self.kind}-{self.norm.name}-eps{self.epsilon:g}"

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "norm": self.norm.name,
            "epsilon": self.epsilon,
            "steps": self.steps,
            "step_size": self.step_size,
            "restarts": self.restarts,
            "random_start": self.random_start,
            "clip_min": self.clip_min,
            "clip_max": self.clip_max,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AttackSpec":
        d = dict(d)
        norm = d.pop("norm", "linf")
        return cls(norm=NormSpec.from_name(norm), **d)


@dataclass
class AttackResult:
    adversarial: np.ndarray
    success_mask: np.ndarray  # per-sample: misclassified after the attack
    loss_achieved: np.ndarray  # per-sample CE at the returned point
    fab_margins: list | None = None
    fab_failed: np.ndarray | None = None


def _per_sample_ce(net, points, labels) -> np.ndarray:
    z = net(points).data
    m = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - m).sum(axis=1)) + m[:, 0]
    return lse - z[np.arange(len(labels)), labels]


def _ce_input_grad(net, points, labels) -> np.ndarray:
    x_t = Tensor(points, requires_grad=True)
    # sum (not mean) so each row's gradient is its own sample's CE gradient
    loss = cross_entropy(net(x_t), labels) * float(len(labels))
    (grad,) = ad.gradients(loss, [x_t])
    return grad


def _project_ball(delta_flat: np.ndarray, epsilon: float, norm: NormSpec) -> np.ndarray:
    if np.isinf(norm.p):
        return np.clip(delta_flat, -epsilon, epsilon)
    norms = np.sqrt((delta_flat * delta_flat).sum(axis=1))
    over = norms > epsilon
    if over.any():
        scale = np.ones_like(norms)
        scale[over] = epsilon / norms[over]
        delta_flat = delta_flat * scale[:, None]
    return delta_flat


def _apply(x: np.ndarray, delta_flat: np.ndarray, box) -> np.ndarray:
    adv = x + delta_flat.reshape(x.shape)
    lo, hi = box
    return np.clip(adv, lo, hi)


def _misclassified(net, points, labels) -> np.ndarray:
    phi, _ = batch_logit_margins(net(points).data, labels)
    return phi <= 0.0


def _grad_step_direction(grad_flat: np.ndarray, norm: NormSpec) -> np.ndarray:
    if np.isinf(norm.p):
        return np.sign(grad_flat)
    norms = np.sqrt((grad_flat * grad_flat).sum(axis=1, keepdims=True))
    safe = np.where(norms > 0, norms, 1.0)
    return grad_flat / safe


def fgsm(net, batch, labels, spec: AttackSpec) -> AttackResult:
    """Single signed-gradient step of size epsilon, clipped to ball and box."""
    if spec.kind != "fgsm":
        raise ValueError("fgsm: spec.kind must be 'fgsm'")
    x = np.asarray(batch, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    grad = _ce_input_grad(net, x, y).reshape(len(x), -1)
    delta = spec.epsilon * _grad_step_direction(grad, spec.norm)
    # zero-gradient rows keep x unchanged (sign(0) == 0 handles linf; l2 is
    # explicit via the safe divisor, but the direction is then 0 as well)
    adv = _apply(x, delta, spec.box)
    return AttackResult(adv, _misclassified(net, adv, y), _per_sample_ce(net, adv, y))


def _random_start(rng, shape_flat, epsilon, norm: NormSpec) -> np.ndarray:
    d = shape_flat[1]
    if np.isinf(norm.p):
        return rng.uniform(-epsilon, epsilon, size=shape_flat)
    direction = rng.normal(size=shape_flat)
    norms = np.sqrt((direction * direction).sum(axis=1, keepdims=True))
    direction = direction / np.where(norms > 0, norms, 1.0)
    radius = epsilon * rng.uniform(0.0, 1.0, size=(shape_flat[0], 1)) ** (1.0 / d)
    return direction * radius


def pgd(net, batch, labels, spec: AttackSpec) -> AttackResult:
    """Iterated signed-gradient ascent on CE inside the epsilon ball.

    Each restart runs `steps` projected iterations from a fresh start; the
    per-sample iterate with the highest CE across restarts is kept. Restart
    r of sample i draws from seed (spec.seed, i, r), so adding restarts
    extends the search without changing earlier ones.
    """
    if spec.kind != "pgd":
        raise ValueError("pgd: spec.kind must be 'pgd'")
    x = np.asarray(batch, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    n = len(x)
    x_flat = x.reshape(n, -1)
    step = spec.resolved_step_size
    best_adv = np.array(x)
    best_ce = np.full(n, -np.inf)
    for restart in range(spec.restarts):
        if spec.random_start or restart > 0:
            starts = np.stack([
                _random_start(np.random.default_rng([spec.seed, i, restart]),
                              (1, x_flat.shape[1]), spec.epsilon, spec.norm)[0]
                for i in range(n)
            ])
            delta = _project_ball(starts, spec.epsilon, spec.norm)
        else:
            delta = np.zeros_like(x_flat)
        adv = _apply(x, delta, spec.box)
        delta = (adv - x).reshape(n, -1)
        for _ in range(spec.steps):
            grad = _ce_input_grad(net, adv, y).reshape(n, -1)
            delta = delta + step * _grad_step_direction(grad, spec.norm)
            delta = _project_ball(delta, spec.epsilon, spec.norm)
            adv = _apply(x, delta, spec.box)
            delta = (adv - x).reshape(n, -1)
        ce = _per_sample_ce(net, adv, y)
        better = ce > best_ce
        best_ce[better] = ce[better]
        best_adv[better] = adv[better]
    return AttackResult(best_adv, _misclassified(net, best_adv, y), best_ce)


def fab_attack(net, batch, labels, spec: AttackSpec) -> AttackResult:
    """Minimum-distance attack: success iff the FAB boundary distance <= epsilon.

    Successful samples return the boundary point pushed slightly past the
    boundary, projected back into the epsilon ball and the box; search
    failures are flagged and count as unsuccessful.
    """
    if spec.kind != "fab":
        raise ValueError("fab_attack: spec.kind must be 'fab'")
    x = np.asarray(batch, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    n = len(x)
    results = fab_margins(net, x, y, spec.norm, steps=spec.steps)
    adv = np.array(x)
    failed = np.zeros(n, dtype=bool)
    for i, res in enumerate(results):
        if isinstance(res, FabFailure):
            failed[i] = True
            continue
        if abs(res.value) > spec.epsilon:
            continue
        xhat = res.boundary_point.reshape(-1)
        xi = x[i].reshape(-1)
        direction = xhat - xi
        length = np.sqrt((direction * direction).sum())
        if length > 0:
            pushed = xhat + FAB_PUSH * direction / length
        else:
            pushed = xhat
        delta = _project_ball((pushed - xi)[np.newaxis], spec.epsilon, spec.norm)[0]
        adv[i] = _apply(x[i : i + 1], delta[np.newaxis], spec.box)[0]
    success = _misclassified(net, adv, y)
    success[failed] = False
    margins = [r if isinstance(r, MarginEstimate) else None for r in results]
    return AttackResult(adv, success, _per_sample_ce(net, adv, y),
                        fab_margins=margins, fab_failed=failed)


def run_attack(net, batch, labels, spec: AttackSpec) -> AttackResult:
    return {"fgsm": fgsm, "pgd": pgd, "fab": fab_attack}[spec.kind](net, batch, labels, spec)


def robust_accuracy(net, dataset, specs: list[AttackSpec]) -> float:
    """Fraction correctly classified clean AND surviving every listed attack."""
    if not specs:
        raise ValueError("robust_accuracy: specs must be non-empty")
    inputs, labels = dataset.inputs, dataset.labels
    surviving = ~_misclassified(net, inputs, labels)
    for spec in specs:
        if not surviving.any():
            break
        result = run_attack(net, inputs, labels, spec)
        surviving &= ~result.success_mask
    return float(surviving.mean())
