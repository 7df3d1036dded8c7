"""Margin quantities: logit margin, soft logit margin, Taylor and FAB
input-space margin estimates, and a brute-force exact-margin oracle for
low-dimensional verification.

Margin estimates default to the highest predicted non-label class. All
estimators are signed: positive iff the sample is correctly classified.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

BOUNDARY_TOL = 1e-3  # |phi| at a reported boundary point, logit units
ON_BOUNDARY_TOL = 1e-9  # |phi| below this counts as exactly on the boundary
DEGENERATE_DENOM = 1e-12


class DegenerateGradientError(ValueError):
    """Gradient-difference norm too small for the linearization to mean anything."""


class FabNoConvergenceError(RuntimeError):
    """FAB found no boundary crossing; carries the best iterate seen."""

    def __init__(self, message, best_iterate, best_abs_phi):
        super().__init__(message)
        self.best_iterate = best_iterate
        self.best_abs_phi = best_abs_phi


class UnboundedMarginError(RuntimeError):
    """No decision boundary within the searched radius."""

    def __init__(self, message, radius):
        super().__init__(message)
        self.radius = radius


@dataclass(frozen=True)
class NormSpec:
    """Attack norm p and its dual q (1/p + 1/q = 1; p=inf pairs with q=1)."""

    p: float = np.inf

    def __post_init__(self):
        if self.p not in (2.0, np.inf):
            raise ValueError(f"NormSpec: p must be 2 or inf, got {self.p}")

    @property
    def q(self) -> float:
        return 1.0 if np.isinf(self.p) else 2.0

    @property
    def name(self) -> str:
        return "linf" if np.isinf(self.p) else "l2"

    @classmethod
    def from_name(cls, name: str) -> "NormSpec":
        if name == "linf":
            return cls(np.inf)
        if name == "l2":
            return cls(2.0)
        raise ValueError(f"NormSpec: unknown norm name {name!r} (use 'linf' or 'l2')")

    def primal(self, vecs: np.ndarray) -> np.ndarray:
        """||v||_p along the last axis."""
        if np.isinf(self.p):
            return np.abs(vecs).max(axis=-1)
        return np.sqrt((vecs * vecs).sum(axis=-1))

    def dual(self, vecs: np.ndarray) -> np.ndarray:
        """||v||_q along the last axis."""
        if np.isinf(self.p):
            return np.abs(vecs).sum(axis=-1)
        return np.sqrt((vecs * vecs).sum(axis=-1))


@dataclass
class MarginEstimate:
    """A signed input-space margin with its method tag and competitor class."""

    value: float
    method: str  # taylor | fab | oracle
    competitor: int
    boundary_point: np.ndarray | None = None


# ----------------------------------------------------------------------
# logit-space margins
# ----------------------------------------------------------------------


def logit_margin(logits_row, y: int) -> float:
    """z_y minus the highest other logit; zero exactly on the boundary."""
    z = np.asarray(logits_row, dtype=np.float64)
    if z.ndim != 1 or z.size < 2:
        raise ValueError(f"logit_margin: need a row of K >= 2 logits, got shape {z.shape}")
    others = np.delete(z, y)
    return float(z[y] - others.max())


def highest_nonlabel_class(logits_row, y: int) -> int:
    """argmax over classes other than y; ties toward the lowest index."""
    z = np.asarray(logits_row, dtype=np.float64)
    if z.ndim != 1 or z.size < 2:
        raise ValueError(f"highest_nonlabel_class: need K >= 2 logits, got shape {z.shape}")
    masked = z.copy()
    masked[y] = -np.inf
    return int(np.argmax(masked))


def soft_logit_margin(logits_row, y: int, beta: float) -> float:
    """z_y - (1/beta) * log sum_{y' != y} exp(beta z_y'), max-shifted.

    Computed as phi - lse_scaled/beta with a shared max shift, so the
    log-sum-exp never overflows and the value never exceeds the hard margin.
    """
    if beta <= 0:
        raise ValueError(f"soft_logit_margin: beta must be positive, got {beta}")
    z = np.asarray(logits_row, dtype=np.float64)
    if z.ndim != 1 or z.size < 2:
        raise ValueError(f"soft_logit_margin: need K >= 2 logits, got shape {z.shape}")
    others = np.delete(z, y)
    m = others.max()
    lse_scaled = np.log(np.exp(beta * (others - m)).sum())
    return float(z[y] - m - lse_scaled / beta)


def batch_logit_margins(logit_matrix: np.ndarray, labels: np.ndarray):
    """Vectorized logit margins and highest non-label competitors for a batch."""
    z = np.asarray(logit_matrix, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    rows = np.arange(len(z))
    masked = z.copy()
    masked[rows, y] = -np.inf
    competitors = np.argmax(masked, axis=1)
    phi = z[rows, y] - masked[rows, competitors]
    return phi, competitors


def batch_soft_margins(logit_matrix: np.ndarray, labels: np.ndarray, beta: float) -> np.ndarray:
    if beta <= 0:
        raise ValueError(f"batch_soft_margins: beta must be positive, got {beta}")
    z = np.asarray(logit_matrix, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    rows = np.arange(len(z))
    masked = z.copy()
    masked[rows, y] = -np.inf
    m = masked.max(axis=1)
    expd = np.exp(beta * (masked - m[:, None]))
    expd[rows, y] = 0.0
    lse_scaled = np.log(expd.sum(axis=1))
    return z[rows, y] - m - lse_scaled / beta


# ----------------------------------------------------------------------
# differentiable phi graphs (shared by FAB, losses, attacks)
# ----------------------------------------------------------------------


def phi_graph_hard(logits_t: Tensor, labels: np.ndarray, competitors: np.ndarray) -> Tensor:
    """Graph of z_y - z_c per row, with fixed competitor indices."""
    return ad.pick(logits_t, labels) - ad.pick(logits_t, competitors)


def phi_graph_soft(logits_t: Tensor, labels: np.ndarray, beta: float) -> Tensor:
    """Graph of the soft logit margin per row (Eq. 7 form), overflow-safe.

    Label entries are masked out of the log-sum-exp before the exp so a
    dominant true-class logit cannot overflow into the masked slot.
    """
    z = logits_t.data
    n, k = z.shape
    rows = np.arange(n)
    mask = np.ones((n, k))
    mask[rows, labels] = 0.0
    masked_vals = z.copy()
    masked_vals[rows, labels] = -np.inf
    m = masked_vals.max(axis=1)
    # pin the label slot at (m - 1) so its exp stays finite; the mask then
    # removes its contribution exactly
    fill = np.zeros((n, k))
    fill[rows, labels] = m - 1.0 - z[rows, labels]
    z_eff = logits_t + Tensor(fill)
    shifted = (z_eff - Tensor(m[:, None])) * beta
    expd = ad.exp(shifted) * Tensor(mask)
    lse_scaled = ad.log(ad.tsum(expd, axis=1))
    return ad.pick(logits_t, labels) - Tensor(m) - lse_scaled / beta


def _flatten_rows(arr: np.ndarray) -> np.ndarray:
    return arr.reshape(len(arr), -1)


def _phi_and_grad(net, points: np.ndarray, labels: np.ndarray, use_soft: bool, beta: float):
    """phi values and per-sample input gradients of phi at the given points."""
    x_t = Tensor(points, requires_grad=True)
    z = net(x_t)
    if use_soft:
        phi_t = phi_graph_soft(z, labels, beta)
        _, competitors = batch_logit_margins(z.data, labels)
    else:
        _, competitors = batch_logit_margins(z.data, labels)
        phi_t = phi_graph_hard(z, labels, competitors)
    (grad,) = ad.gradients(ad.tsum(phi_t), [x_t])
    return phi_t.data, _flatten_rows(grad), competitors


def _phi_values(net, points: np.ndarray, labels: np.ndarray, use_soft: bool, beta: float):
    z = net(points).data
    if use_soft:
        return batch_soft_margins(z, labels, beta)
    phi, _ = batch_logit_margins(z, labels)
    return phi


# ----------------------------------------------------------------------
# Taylor margin
# ----------------------------------------------------------------------


def taylor_margins_batch(net, inputs: np.ndarray, labels: np.ndarray, norm: NormSpec,
                         competitors: np.ndarray | None = None):
    """Vectorized first-order margins for a batch.

    Returns (values, numerators, denominators, competitors, degenerate_mask);
    degenerate rows (denominator < 1e-12) carry value nan.
    """
    x_t = Tensor(inputs, requires_grad=True)
    z = net(x_t)
    if competitors is None:
        _, competitors = batch_logit_margins(z.data, labels)
    rows = np.arange(len(inputs))
    numer = z.data[rows, labels] - z.data[rows, competitors]
    phi_t = phi_graph_hard(z, labels, competitors)
    (grad,) = ad.gradients(ad.tsum(phi_t), [x_t])
    denom = norm.dual(_flatten_rows(grad))
    degenerate = denom < DEGENERATE_DENOM
    values = np.where(degenerate, np.nan, numer / np.where(degenerate, 1.0, denom))
    return values, numer, denom, competitors, degenerate


def taylor_margin(net, x, y: int, competitor: int | None = None,
                  norm: NormSpec = NormSpec()) -> MarginEstimate:
    """First-order margin: (z_y - z_c) / ||grad_x z_y - grad_x z_c||_q.

    Exact for linear networks. Raises DegenerateGradientError when the
    gradient-difference norm vanishes instead of reporting a huge margin.
    """
    x_arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if x_arr.shape != tuple(getattr(net, "input_shape", x_arr.shape)):
        raise ValueError(
            f"taylor_margin: expected a single sample of shape {net.input_shape}, got {x_arr.shape}"
        )
    comp = None if competitor is None else np.array([int(competitor)])
    if comp is not None and comp[0] == y:
        raise ValueError("taylor_margin: competitor must differ from the label")
    values, _, denom, comps, degenerate = taylor_margins_batch(
        net, x_arr[np.newaxis], np.array([y]), norm, competitors=comp
    )
    if degenerate[0]:
        raise DegenerateGradientError(
            f"taylor_margin: gradient-difference norm {denom[0]:.3e} below {DEGENERATE_DENOM:.0e}"
        )
    return MarginEstimate(float(values[0]), "taylor", int(comps[0]))


# ----------------------------------------------------------------------
# FAB boundary search
# ----------------------------------------------------------------------


@dataclass
class FabFailure:
    """Per-sample FAB outcome when no verified boundary point was found."""

    reason: str  # no-crossing | degenerate
    best_iterate: np.ndarray
    best_abs_phi: float


def _project_onto_linearization(x_flat, residual, grad_flat, norm: NormSpec):
    """Minimal-l_p displacement of x solving g . delta = -residual."""
    if np.isinf(norm.p):
        gnorm = np.abs(grad_flat).sum(axis=1)
        step = -(residual / gnorm)[:, None] * np.sign(grad_flat)
    else:
        gnorm = (grad_flat * grad_flat).sum(axis=1)
        step = -(residual / gnorm)[:, None] * grad_flat
    return x_flat + step


def _clamp_to_ball(points_flat, center_flat, radius, norm: NormSpec):
    delta = points_flat - center_flat
    if np.isinf(norm.p):
        delta = np.clip(delta, -radius[:, None], radius[:, None])
    else:
        norms = np.sqrt((delta * delta).sum(axis=1))
        excess = norms > radius
        if excess.any():
            scale = np.ones_like(norms)
            scale[excess] = radius[excess] / norms[excess]
            delta = delta * scale[:, None]
    return center_flat + delta


def fab_margins(net, inputs: np.ndarray, labels: np.ndarray, norm: NormSpec = NormSpec(),
                steps: int = 20, use_soft: bool = False, beta: float = 5.0,
                boundary_tol: float = BOUNDARY_TOL, radius_factor: float = 10.0):
    """Batched FAB margin search; returns one MarginEstimate or FabFailure per row.

    Each step linearizes phi (hard, or the soft-boundary phi) at the current
    iterate and moves to a convex combination of the iterate's projection
    onto the linearized boundary and the original x's projection (pull
    weight capped at 0.1, slight overshoot after the first step). The
    closest sign-flipped iterate is refined by bisection toward x until
    |phi(x_hat)| < boundary_tol. The first step is a pure projection, so a
    linear (K=2) net converges in one step to the exact projection of x.
    """
    if steps < 1:
        raise ValueError("fab_margins: steps must be >= 1")
    n = len(inputs)
    labels = np.asarray(labels, dtype=np.int64)
    in_shape = inputs.shape[1:]
    x_flat = _flatten_rows(np.asarray(inputs, dtype=np.float64))
    d = x_flat.shape[1]

    phi0, grad0, comp0 = _phi_and_grad(net, inputs, labels, use_soft, beta)
    sign0 = np.sign(phi0)
    gnorm0 = norm.dual(grad0)
    degenerate = gnorm0 < DEGENERATE_DENOM
    # search radius: 10x the first-order margin estimate
    radius = np.where(degenerate, 0.0, radius_factor * np.abs(phi0) / np.where(degenerate, 1.0, gnorm0))

    results: list = [None] * n
    settled = np.zeros(n, dtype=bool)
    for i in np.nonzero(degenerate)[0]:
        results[i] = FabFailure("degenerate", x_flat[i].reshape(in_shape), abs(phi0[i]))
        settled[i] = True
    on_boundary = (phi0 == 0.0) & ~settled
    for i in np.nonzero(on_boundary)[0]:
        results[i] = MarginEstimate(0.0, "fab", int(comp0[i]), x_flat[i].reshape(in_shape))
        settled[i] = True

    cur = x_flat.copy()
    phi_cur = phi0.copy()
    grad_cur = grad0.copy()
    # nearest iterate already within tolerance, and nearest sign-flipped iterate
    best_boundary = np.zeros((n, d))
    best_boundary_dist = np.full(n, np.inf)
    crossing = np.zeros((n, d))
    crossing_dist = np.full(n, np.inf)
    best_iterate = x_flat.copy()
    best_abs_phi = np.abs(phi0)

    active = ~settled
    for step in range(steps):
        if not active.any():
            break
        idx = np.nonzero(active)[0]
        gnorm = norm.dual(grad_cur[idx])
        newly_degenerate = gnorm < DEGENERATE_DENOM
        for j in idx[newly_degenerate]:
            if not np.isfinite(crossing_dist[j]) and not np.isfinite(best_boundary_dist[j]):
                results[j] = FabFailure("degenerate", best_iterate[j].reshape(in_shape),
                                        best_abs_phi[j])
                settled[j] = True
            active[j] = False
        idx = idx[~newly_degenerate]
        if len(idx) == 0:
            break
        eta = 1.0 if step == 0 else 1.05
        delta_cur = _project_onto_linearization(cur[idx], phi_cur[idx], grad_cur[idx], norm) \
            - cur[idx]
        residual_x = phi_cur[idx] + ((x_flat[idx] - cur[idx]) * grad_cur[idx]).sum(axis=1)
        delta_x = _project_onto_linearization(x_flat[idx], residual_x, grad_cur[idx], norm) \
            - x_flat[idx]
        len_cur = norm.primal(delta_cur)
        len_x = norm.primal(delta_x)
        alpha = np.minimum(len_cur / np.maximum(len_cur + len_x, 1e-30), 0.1)
        nxt = (1.0 - alpha)[:, None] * (cur[idx] + eta * delta_cur) \
            + alpha[:, None] * (x_flat[idx] + eta * delta_x)
        nxt = _clamp_to_ball(nxt, x_flat[idx], radius[idx], norm)
        cur[idx] = nxt
        phi_new, grad_new, _ = _phi_and_grad(net, nxt.reshape((-1,) + in_shape),
                                             labels[idx], use_soft, beta)
        phi_cur[idx] = phi_new
        grad_cur[idx] = grad_new

        improved = np.abs(phi_new) < best_abs_phi[idx]
        best_abs_phi[idx[improved]] = np.abs(phi_new[improved])
        best_iterate[idx[improved]] = nxt[improved]

        dist = norm.primal(nxt - x_flat[idx])
        flipped = (np.sign(phi_new) != sign0[idx]) | (phi_new == 0.0)
        # a usable boundary point sits ON OR PAST the boundary (so its
        # distance never understates the margin) or is numerically on it
        within = (flipped & (np.abs(phi_new) < boundary_tol)) \
            | (np.abs(phi_new) < ON_BOUNDARY_TOL)
        closer_boundary = within & (dist < best_boundary_dist[idx])
        best_boundary[idx[closer_boundary]] = nxt[closer_boundary]
        best_boundary_dist[idx[closer_boundary]] = dist[closer_boundary]

        crossed = flipped & (dist < crossing_dist[idx])
        crossing[idx[crossed]] = nxt[crossed]
        crossing_dist[idx[crossed]] = dist[crossed]

    # refine the nearest crossing by bisection toward x, where that can
    # still beat the best boundary point already in hand
    need_bisect = ~settled & np.isfinite(crossing_dist) & (crossing_dist < best_boundary_dist)
    if need_bisect.any():
        idx = np.nonzero(need_bisect)[0]
        lo = x_flat[idx].copy()       # phi sign matches sign0
        hi = crossing[idx].copy()     # phi sign flipped (or zero)
        labels_b = labels[idx]
        done = np.zeros(len(idx), dtype=bool)
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            phi_mid = _phi_values(net, mid.reshape((-1,) + in_shape), labels_b, use_soft, beta)
            flipped = (np.sign(phi_mid) != sign0[idx]) | (phi_mid == 0.0)
            within = (flipped & (np.abs(phi_mid) < boundary_tol)) \
                | (np.abs(phi_mid) < ON_BOUNDARY_TOL)
            for pos in np.nonzero(within & ~done)[0]:
                j = idx[pos]
                xhat = mid[pos]
                dist = float(norm.primal(x_flat[j] - xhat))
                if dist < best_boundary_dist[j]:
                    best_boundary[j] = xhat
                    best_boundary_dist[j] = dist
                done[pos] = True
            if done.all():
                break
            lo = np.where((~flipped & ~done)[:, None], mid, lo)
            hi = np.where((flipped & ~within & ~done)[:, None], mid, hi)

    for i in range(n):
        if results[i] is not None:
            continue
        if np.isfinite(best_boundary_dist[i]):
            xhat = best_boundary[i]
            value = float(sign0[i] * best_boundary_dist[i])
            est = MarginEstimate(value, "fab", -1, xhat.reshape(in_shape))
            z_hat = net(est.boundary_point[np.newaxis]).data[0]
            est.competitor = highest_nonlabel_class(z_hat, int(labels[i]))
            results[i] = est
        else:
            results[i] = FabFailure(
                f"no boundary crossing within {steps} steps and radius {radius[i]:.3g}",
                best_iterate[i].reshape(in_shape),
                float(best_abs_phi[i]),
            )
    return results


def fab_boundary_point(net, x, y: int, norm: NormSpec = NormSpec(), steps: int = 20,
                       use_soft: bool = False, beta: float = 5.0) -> MarginEstimate:
    """Single-sample FAB search; raises on degenerate gradients or no crossing."""
    x_arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    (result,) = fab_margins(net, x_arr[np.newaxis], np.array([y]), norm,
                            steps=steps, use_soft=use_soft, beta=beta)
    if isinstance(result, FabFailure):
        if result.reason == "degenerate":
            raise DegenerateGradientError("fab_boundary_point: gradient norm vanished")
        raise FabNoConvergenceError(
            f"fab_boundary_point: {result.reason}", result.best_iterate, result.best_abs_phi
        )
    return result


# ----------------------------------------------------------------------
# brute-force oracle
# ----------------------------------------------------------------------

_DIRECTION_CACHE: dict = {}


def _sphere_directions(dim: int, norm: NormSpec, resolution: int) -> np.ndarray:
    """Deterministic unit-l_p-norm direction grid (resolution pts per dimension)."""
    key = (dim, norm.name, resolution)
    cached = _DIRECTION_CACHE.get(key)
    if cached is not None:
        return cached
    if dim == 1:
        dirs = np.array([[1.0], [-1.0]])
    elif np.isinf(norm.p):
        faces = []
        grid = np.linspace(-1.0, 1.0, resolution)
        for axis in range(dim):
            others = [grid] * (dim - 1)
            mesh = np.meshgrid(*others, indexing="ij") if others else []
            flat = np.stack([m.reshape(-1) for m in mesh], axis=1) if mesh else np.zeros((1, 0))
            for s in (1.0, -1.0):
                block = np.empty((len(flat), dim))
                block[:, axis] = s
                rest = [a for a in range(dim) if a != axis]
                block[:, rest] = flat
                faces.append(block)
        dirs = np.concatenate(faces)
    else:
        if dim == 2:
            angles = np.linspace(0.0, 2.0 * np.pi, 4 * resolution, endpoint=False)
            dirs = np.stack([np.cos(angles), np.sin(angles)], axis=1)
        else:  # dim == 3
            theta = np.linspace(0.0, np.pi, resolution)
            phi = np.linspace(0.0, 2.0 * np.pi, 2 * resolution, endpoint=False)
            tt, pp = np.meshgrid(theta, phi, indexing="ij")
            dirs = np.stack(
                [np.sin(tt) * np.cos(pp), np.sin(tt) * np.sin(pp), np.cos(tt)], axis=-1
            ).reshape(-1, 3)
    _DIRECTION_CACHE[key] = dirs
    return dirs


def oracle_margin(net, x, y: int, norm: NormSpec = NormSpec(), resolution: int = 256,
                  tol: float = 1e-4, data_scale: float | None = None) -> MarginEstimate:
    """Brute-force margin for inputs of dimension <= 3.

    Tests whether the l_p sphere of radius r (a deterministic grid of
    `resolution` points per dimension) contains a point with phi <= 0
    (phi >= 0 for misclassified x) and bisects on r to `tol` absolute.
    """
    x_arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    flat = x_arr.reshape(-1)
    dim = flat.size
    if dim > 3:
        raise ValueError(
            f"oracle_margin: refusing input dimension {dim} > 3 (cost grows exponentially)"
        )
    in_shape = x_arr.shape
    z0 = net(x_arr[np.newaxis]).data[0]
    phi0 = logit_margin(z0, y)
    if phi0 == 0.0:
        return MarginEstimate(0.0, "oracle", highest_nonlabel_class(z0, y), x_arr)
    sign0 = 1.0 if phi0 > 0 else -1.0
    dirs = _sphere_directions(dim, norm, resolution)
    labels_rep = np.full(len(dirs), y, dtype=np.int64)

    def crossed(radius: float) -> np.ndarray:
        pts = flat[np.newaxis] + radius * dirs
        phi = _phi_values(net, pts.reshape((-1,) + in_shape), labels_rep, False, 0.0)
        return (phi <= 0.0) if sign0 > 0 else (phi >= 0.0)

    if data_scale is None:
        data_scale = max(1.0, float(np.abs(flat).max()))
    r_max = 10.0 * data_scale

    # geometric bracket so a bounded adversarial pocket is not skipped over
    lo, hi = 0.0, None
    r = tol
    while r < r_max:
        if crossed(r).any():
            hi = r
            break
        lo = r
        r *= 2.0
    if hi is None:
        if crossed(r_max).any():
            hi = r_max
        else:
            raise UnboundedMarginError(
                f"oracle_margin: no sign change within radius {r_max:.3g}", r_max
            )

    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if crossed(mid).any():
            hi = mid
        else:
            lo = mid

    hits = crossed(hi)
    hit_dir = dirs[np.argmax(hits)]
    far_point = flat + hi * hit_dir

    # refine the touching point along the segment to |phi| < BOUNDARY_TOL
    a, b = flat.copy(), far_point
    xhat = b
    for _ in range(200):
        midpt = 0.5 * (a + b)
        phi_mid = logit_margin(net(midpt.reshape((1,) + in_shape)).data[0], y)
        if abs(phi_mid) < BOUNDARY_TOL:
            xhat = midpt
            break
        if (phi_mid > 0) == (phi0 > 0):
            a = midpt
        else:
            b = midpt
    else:
        xhat = b

    value = sign0 * 0.5 * (lo + hi)
    return MarginEstimate(float(value), "oracle",
                          highest_nonlabel_class(net(xhat.reshape((1,) + in_shape)).data[0], y),
                          xhat.reshape(in_shape))
