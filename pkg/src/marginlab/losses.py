"""Hybrid training losses: cross-entropy plus a margin-maximization term.

Two MM variants: the hinge loss max(0, gamma - R) averaged over the whole
batch, and the exponential loss (1/alpha) exp(-alpha R) applied only to
correctly classified samples with R < gamma. Margins come from the Taylor
approximation or from FAB (hard or soft boundary); Taylor denominators are
treated as constants during back-propagation, so no second derivatives are
ever needed.

When use_margin_param_gradient is on, the MM gradient with respect to the
parameters is the implicit-function-theorem expression evaluated at the
boundary point instead of the Taylor surrogate.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .margins import (
    BOUNDARY_TOL,
    DegenerateGradientError,
    FabFailure,
    MarginEstimate,
    NormSpec,
    batch_logit_margins,
    fab_margins,
    phi_graph_hard,
    phi_graph_soft,
    taylor_margins_batch,
)

VARIANTS = ("ce-only", "elsayed-hinge", "exp-loss")
MARGIN_SOURCES = ("taylor", "fab", "fab-soft")
AGGREGATORS = ("max", "sum", "highest-nonlabel")

DEFAULT_LAMBDA = {"elsayed-hinge": 25.0, "exp-loss": 1000.0}


@dataclass(frozen=True)
class LossConfig:
    """Variant selector plus hyperparameters for the hybrid loss."""

    variant: str = "ce-only"
    margin_source: str = "taylor"
    gamma: float = 16.0 / 255.0
    lam: float | None = None  # serialized as "lambda"; None = variant default
    alpha: float = 3.0
    beta: float = 5.0
    aggregator: str = "highest-nonlabel"
    norm: NormSpec = NormSpec()
    use_margin_param_gradient: bool = False
    fab_steps: int = 20

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"LossConfig: unknown variant {self.variant!r}")
        if self.margin_source not in MARGIN_SOURCES:
            raise ValueError(f"LossConfig: unknown margin_source {self.margin_source!r}")
        if self.aggregator not in AGGREGATORS:
            raise ValueError(f"LossConfig: unknown aggregator {self.aggregator!r}")
        if self.gamma <= 0:
            raise ValueError("LossConfig: gamma must be > 0")
        if self.lam is not None and self.lam < 0:
            raise ValueError("LossConfig: lambda must be >= 0")
        if self.alpha <= 0:
            raise ValueError("LossConfig: alpha must be > 0")
        if self.beta <= 0:
            raise ValueError("LossConfig: beta must be > 0")
        if self.fab_steps < 1:
            raise ValueError("LossConfig: fab_steps must be >= 1")
        if self.use_margin_param_gradient and self.margin_source not in ("fab", "fab-soft"):
            raise ValueError(
                "LossConfig: use_margin_param_gradient needs a boundary point; "
                "set margin_source to 'fab' or 'fab-soft'"
            )
        if self.use_margin_param_gradient and self.aggregator != "highest-nonlabel":
            raise ValueError(
                "LossConfig: the implicit margin gradient only supports the "
                "highest-nonlabel aggregator"
            )
        if self.aggregator != "highest-nonlabel":
            if self.margin_source != "taylor":
                raise ValueError(
                    "LossConfig: sum/max aggregation over all competitors is only "
                    "defined for taylor margins"
                )
            if self.variant == "exp-loss":
                raise ValueError(
                    "LossConfig: the exponential loss uses one margin per sample; "
                    "set aggregator to 'highest-nonlabel'"
                )

    @property
    def mm_weight(self) -> float:
        if self.lam is not None:
            return float(self.lam)
        return DEFAULT_LAMBDA.get(self.variant, 0.0)

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "margin_source": self.margin_source,
            "gamma": self.gamma,
            "lambda": self.mm_weight,
            "alpha": self.alpha,
            "beta": self.beta,
            "aggregator": self.aggregator,
            "norm": self.norm.name,
            "use_margin_param_gradient": self.use_margin_param_gradient,
            "fab_steps": self.fab_steps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        d = dict(d)
        lam = d.pop("lambda", None)
        norm = d.pop("norm", "linf")
        return cls(lam=lam, norm=NormSpec.from_name(norm), **d)


@dataclass
class BatchLossReport:
    """Values of one hybrid-loss evaluation plus its backward-ready graph root."""

    total: float
    ce_part: float
    mm_part: float
    correct_count: int
    skipped_degenerate: int
    per_sample_margins: list
    loss: Tensor  # graph root; loss.data == total
    pin: dict | None = None  # stop-gradient constants, reusable by FD oracles


def cross_entropy(logits, labels) -> Tensor:
    """Mean over the batch of -log softmax(z)[y], max-shifted."""
    z = logits if isinstance(logits, Tensor) else Tensor(logits)
    y = np.asarray(labels, dtype=np.int64)
    if y.min() < 0 or y.max() >= z.shape[1]:
        raise ValueError("cross_entropy: label out of range")
    m = z.data.max(axis=1, keepdims=True)  # constant shift
    shifted = z - Tensor(m)
    lse = ad.log(ad.tsum(ad.exp(shifted), axis=1)) + Tensor(m[:, 0])
    return ad.tmean(lse - ad.pick(z, y))


def hinge_mm_term(margin: float, gamma: float) -> float:
    """max(0, gamma - margin); active for both signs of the margin."""
    if gamma <= 0:
        raise ValueError("hinge_mm_term: gamma must be > 0")
    return max(0.0, gamma - margin)


def exp_mm_term(margin: float, gamma: float, alpha: float) -> float:
    """(1/alpha) exp(-alpha margin) for margin < gamma, else 0.

    Callers must pass margins of correctly classified samples only.
    """
    if alpha <= 0:
        raise ValueError("exp_mm_term: alpha must be > 0")
    if margin < gamma:
        return float(np.exp(-alpha * margin) / alpha)
    return 0.0


def _unpack_batch(batch):
    if isinstance(batch, tuple):
        inputs, labels = batch
    else:
        inputs, labels = batch.inputs, batch.labels
    return np.asarray(inputs, dtype=np.float64), np.asarray(labels, dtype=np.int64)


def _surrogate_margins_graph(net, logits_t, inputs, labels, config: LossConfig, pin):
    """Per-sample margin tensors (N,) whose values match the configured margin
    source and whose gradients realize the configured training signal.

    Returns (margin_graph, values, estimates, skip_mask, pin_record).
    """
    n = len(labels)
    norm = config.norm
    record: dict = {}

    if config.margin_source == "taylor":
        if pin is None:
            values, numer, denom, comps, degenerate = taylor_margins_batch(
                net, inputs, labels, norm
            )
            record.update(competitors=comps, denominators=denom, degenerate=degenerate)
        else:
            comps = pin["competitors"]
            denom = pin["denominators"]
            degenerate = pin["degenerate"]
            rows = np.arange(n)
            numer = logits_t.data[rows, labels] - logits_t.data[rows, comps]
            values = np.where(degenerate, np.nan, numer / np.where(degenerate, 1.0, denom))
        safe_denom = np.where(degenerate, 1.0, denom)
        margin_graph = phi_graph_hard(logits_t, labels, comps) / Tensor(safe_denom)
        estimates = [
            None if degenerate[i] else MarginEstimate(float(values[i]), "taylor", int(comps[i]))
            for i in range(n)
        ]
        return margin_graph, values, estimates, degenerate, record

    # FAB-sourced margins: value from the boundary search, gradient from the
    # Taylor-style surrogate at x (frozen denominator), or from the implicit
    # parameter gradient when configured.
    use_soft = config.margin_source == "fab-soft"
    if pin is None:
        results = fab_margins(net, inputs, labels, norm, steps=config.fab_steps,
                              use_soft=use_soft, beta=config.beta)
        skip = np.array([isinstance(r, FabFailure) for r in results])
        values = np.array([np.nan if s else r.value for r, s in zip(results, skip)])
        record.update(fab_values=values, fab_skip=skip)
    else:
        skip = pin["fab_skip"]
        values = pin["fab_values"]
        results = pin.get("fab_results", [None] * n)

    if config.use_margin_param_gradient:
        params = net.params
        if pin is None:
            boundary_pts = np.stack([
                inputs[i] if skip[i] else results[i].boundary_point for i in range(n)
            ])
            denom = _boundary_input_grad_norms(
                net, boundary_pts, labels, norm,
                config.beta if use_soft else None,
            )
            bad = denom < 1e-12
            skip = skip | bad
            record.update(fab_results=results, boundary_points=boundary_pts,
                          boundary_denoms=denom, fab_skip=skip, fab_values=values)
        else:
            boundary_pts = pin["boundary_points"]
            denom = pin["boundary_denoms"]
        # graph term c_i * phi(x_hat_i; theta): gradient is the implicit
        # dR/dtheta = grad_theta phi / ||grad_x phi||_q, per sample
        coeff = np.where(skip, 0.0, 1.0 / np.where(skip, 1.0, denom))
        z_hat = net(boundary_pts)
        if use_soft:
            phi_hat = phi_graph_soft(z_hat, labels, config.beta)
        else:
            _, comps_hat = batch_logit_margins(z_hat.data, labels)
            if pin is None:
                record.update(boundary_competitors=comps_hat)
            else:
                comps_hat = pin["boundary_competitors"]
            phi_hat = phi_graph_hard(z_hat, labels, comps_hat)
        lin = phi_hat * Tensor(coeff)
        if pin is None:
            offset = np.where(skip, 0.0, values) - lin.data
            record["margin_offset"] = offset
        else:
            offset = pin["margin_offset"]
        margin_graph = lin + Tensor(offset)
    else:
        # Taylor surrogate at x with the FAB value patched in additively
        if use_soft:
            phi_t = phi_graph_soft(logits_t, labels, config.beta)
            comps = np.full(n, -1)
        else:
            if pin is None:
                _, comps = batch_logit_margins(logits_t.data, labels)
                record.update(surrogate_competitors=comps)
            else:
                comps = pin["surrogate_competitors"]
            phi_t = phi_graph_hard(logits_t, labels, comps)
        if pin is None:
            x_t = Tensor(inputs, requires_grad=True)
            z2 = net(x_t)
            phi2 = phi_graph_soft(z2, labels, config.beta) if use_soft \
                else phi_graph_hard(z2, labels, comps)
            (grad_x,) = ad.gradients(ad.tsum(phi2), [x_t])
            denom = norm.dual(grad_x.reshape(n, -1))
            bad = denom < 1e-12
            skip = skip | bad
            record.update(surrogate_denoms=denom, fab_skip=skip, fab_values=values)
        else:
            denom = pin["surrogate_denoms"]
        safe_denom = np.where(denom < 1e-12, 1.0, denom)
        lin = phi_t / Tensor(safe_denom)
        if pin is None:
            offset = np.where(skip, 0.0, values) - lin.data
            record["margin_offset"] = offset
        else:
            offset = pin["margin_offset"]
        margin_graph = lin + Tensor(offset)

    estimates = [None if skip[i] else
                 (results[i] if isinstance(results[i], MarginEstimate)
                  else MarginEstimate(float(values[i]), config.margin_source, -1))
                 for i in range(n)]
    return margin_graph, values, estimates, skip, record


def batch_loss(net, batch, config: LossConfig, pin: dict | None = None) -> BatchLossReport:
    """Hybrid loss over a batch: ce_part + lambda * mm_part.

    ce_part always covers the full batch. The hinge variant averages MM
    terms over all non-degenerate samples; the exponential variant averages
    over correctly classified, non-degenerate samples (empty set -> 0).
    Degenerate margins (vanishing linearization denominators, failed FAB
    searches) are skipped from the MM mean and counted in the report.

    `pin` replays a previous evaluation's stop-gradient constants (masks,
    competitors, denominators, FAB values); finite-difference oracles use it
    so probes see the same surrogate objective the backward pass
    differentiates.
    """
    inputs, labels = _unpack_batch(batch)
    if len(inputs) == 0:
        raise ValueError("batch_loss: empty batch")
    n = len(labels)
    logits_t = net(inputs)
    ce = cross_entropy(logits_t, labels)
    phi, _ = batch_logit_margins(logits_t.data, labels)
    correct = phi > 0.0
    lam = config.mm_weight

    if config.variant == "ce-only":
        return BatchLossReport(
            total=float(ce.data), ce_part=float(ce.data), mm_part=0.0,
            correct_count=int(correct.sum()), skipped_degenerate=0,
            per_sample_margins=[], loss=ce, pin={},
        )

    record: dict = {}
    if config.variant == "elsayed-hinge" and config.aggregator != "highest-nonlabel" \
            and config.margin_source == "taylor":
        margin_graph, values, estimates, skip, record = _aggregated_hinge_margins(
            net, logits_t, inputs, labels, config, pin
        )
    else:
        margin_graph, values, estimates, skip, record = _surrogate_margins_graph(
            net, logits_t, inputs, labels, config, pin
        )

    if config.variant == "elsayed-hinge":
        include = ~skip
        gate = (config.gamma - np.where(skip, config.gamma, values)) > 0.0
        active = include & gate
        if pin is not None:
            active = pin["hinge_active"]
            include = pin["hinge_include"]
        record["hinge_active"] = active
        record["hinge_include"] = include
        denom_count = max(int(include.sum()), 1)
        weights = active.astype(np.float64) / denom_count
        mm = ad.tsum((Tensor(config.gamma) - margin_graph) * Tensor(weights))
    else:  # exp-loss: correctly classified samples only, margins below gamma
        member = correct & ~skip
        gate = member & (values < config.gamma)
        if pin is not None:
            member = pin["exp_member"]
            gate = pin["exp_gate"]
        record["exp_member"] = member
        record["exp_gate"] = gate
        m_count = int(member.sum())
        if m_count == 0:
            mm = Tensor(0.0)
        else:
            weights = gate.astype(np.float64) / m_count
            # exp(-alpha R) only where gated; elsewhere contribute exactly 0
            safe_margin = margin_graph * Tensor(gate.astype(np.float64))
            terms = ad.exp(-safe_margin * config.alpha) * Tensor(1.0 / config.alpha)
            mm = ad.tsum(terms * Tensor(weights))

    total = ce + mm * lam
    margins_out = [e for e in estimates if e is not None]
    return BatchLossReport(
        total=float(total.data), ce_part=float(ce.data), mm_part=float(mm.data),
        correct_count=int(correct.sum()), skipped_degenerate=int(np.asarray(skip).sum()),
        per_sample_margins=margins_out, loss=total, pin=record,
    )


def _aggregated_hinge_margins(net, logits_t, inputs, labels, config: LossConfig, pin):
    """sum/max aggregation of hinge terms over every non-label competitor.

    Computes Taylor margins to each competitor class; `max` keeps the
    largest hinge term per sample (the subgradient of the max), `sum` adds
    all of them. Returns the same tuple shape as _surrogate_margins_graph
    with margin_graph arranged so that gamma - margin_graph equals the
    aggregated hinge value.
    """
    n = len(labels)
    k = logits_t.shape[1]
    rows = np.arange(n)
    per_comp_graphs = []
    per_comp_values = np.full((n, k), np.nan)
    per_comp_denoms = np.ones((n, k))
    degenerate_mat = np.zeros((n, k), dtype=bool)
    degenerate_raw = np.zeros((n, k), dtype=bool)
    for c in range(k):
        comps = np.full(n, c)
        if pin is None:
            _, _, denom, _, degenerate = taylor_margins_batch(
                net, inputs, labels, config.norm, competitors=comps
            )
        else:
            denom = pin["agg_denoms"][:, c]
            degenerate = pin["agg_degenerate_raw"][:, c]
        safe = np.where(degenerate, 1.0, denom)
        numer = logits_t.data[rows, labels] - logits_t.data[rows, c]
        values = np.where(degenerate, np.nan, numer / safe)
        nonlabel = labels != c
        per_comp_values[:, c] = np.where(nonlabel, values, np.nan)
        per_comp_denoms[:, c] = denom
        degenerate_raw[:, c] = degenerate
        degenerate_mat[:, c] = degenerate & nonlabel
        per_comp_graphs.append(phi_graph_hard(logits_t, labels, comps) / Tensor(safe))
    record = {"agg_denoms": per_comp_denoms, "agg_degenerate_raw": degenerate_raw}
    skip = degenerate_mat.any(axis=1)

    hinge_vals = np.maximum(0.0, config.gamma - per_comp_values)  # nan in the label slot
    if config.aggregator == "sum":
        agg_values = np.nansum(hinge_vals, axis=1)
        active = np.zeros((n, k), dtype=bool)
        for c in range(k):
            active[:, c] = (~np.isnan(hinge_vals[:, c])) & (hinge_vals[:, c] > 0) & ~skip
    else:  # max
        filled = np.where(np.isnan(hinge_vals), -np.inf, hinge_vals)
        choice = np.argmax(filled, axis=1)
        agg_values = hinge_vals[rows, choice]
        active = np.zeros((n, k), dtype=bool)
        active[rows, choice] = (agg_values > 0) & ~skip
        record["agg_choice"] = choice
    if pin is not None:
        active = pin["agg_active"]
    record["agg_active"] = active

    agg_graph = Tensor(np.zeros(n))
    for c in range(k):
        weight = active[:, c].astype(np.float64)
        if weight.any():
            agg_graph = agg_graph + (Tensor(config.gamma) - per_comp_graphs[c]) * Tensor(weight)

    margin_graph = Tensor(np.full(n, config.gamma)) - agg_graph
    values = config.gamma - agg_values
    estimates = []
    for i in range(n):
        if skip[i]:
            estimates.append(None)
        else:
            masked = np.where(np.isnan(per_comp_values[i]), np.inf, per_comp_values[i])
            best = int(np.argmin(masked))
            estimates.append(MarginEstimate(float(per_comp_values[i, best]), "taylor", best))
    return margin_graph, values, estimates, skip, record


def _boundary_input_grad_norms(net, boundary_pts, labels, norm: NormSpec, beta):
    """||grad_x phi(x_hat; beta)||_q per sample (hard phi when beta is None)."""
    x_t = Tensor(boundary_pts, requires_grad=True)
    z = net(x_t)
    if beta is None:
        _, comps = batch_logit_margins(z.data, labels)
        phi_t = phi_graph_hard(z, labels, comps)
    else:
        phi_t = phi_graph_soft(z, labels, beta)
    (grad,) = ad.gradients(ad.tsum(phi_t), [x_t])
    return norm.dual(grad.reshape(len(labels), -1))


def margin_param_gradient(net, x, boundary: MarginEstimate, y: int, beta: float | None,
                          norm: NormSpec = NormSpec()) -> list[np.ndarray]:
    """Implicit margin gradient: grad_theta phi(x_hat; beta) / ||grad_x phi(x_hat; beta)||_q.

    Evaluated at the fixed boundary point x_hat; increasing the returned
    direction increases the signed margin of x. beta=None uses the hard phi.
    """
    if boundary.boundary_point is None:
        raise ValueError("margin_param_gradient: estimate carries no boundary point")
    xhat = np.asarray(boundary.boundary_point, dtype=np.float64)
    labels = np.array([y])
    x_t = Tensor(xhat[np.newaxis], requires_grad=True)
    z = net(x_t)
    if beta is None:
        _, comps = batch_logit_margins(z.data, labels)
        phi_t = phi_graph_hard(z, labels, comps)
    else:
        phi_t = phi_graph_soft(z, labels, beta)
    phi_val = float(phi_t.data[0])
    if abs(phi_val) >= BOUNDARY_TOL:
        raise ValueError(
            f"margin_param_gradient: |phi(x_hat)| = {abs(phi_val):.3e} is not "
            f"within the boundary tolerance {BOUNDARY_TOL}"
        )
    params = net.params
    grads = ad.gradients(ad.tsum(phi_t), params + [x_t])
    grad_x = grads[-1].reshape(-1)
    denom = float(norm.dual(grad_x))
    if denom < 1e-12:
        raise DegenerateGradientError(
            "margin_param_gradient: input gradient norm vanished at the boundary point"
        )
    return [g / denom for g in grads[:-1]]


def ce_only(config: LossConfig) -> LossConfig:
    """The same config with the MM term switched off (burn-in phase)."""
    return replace(config, variant="ce-only", use_margin_param_gradient=False,
                   margin_source="taylor")
