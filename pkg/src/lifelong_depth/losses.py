"""Uncertainty-aware depth loss, output consistency, replay and the weighted total.

All pixel losses use a mean over contributing pixels rather than a raw sum,
so the weights transfer across image sizes.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from lifelong_depth import autodiff as ad
from lifelong_depth.autodiff import Tensor


class LossError(ValueError):
    pass


@dataclass
class LossWeights:
    lambda_per_domain: dict[str, float] = field(default_factory=dict)
    enable_uncertainty: bool = True
    enable_replay: bool = True
    enable_uncertainty_consistency: bool = True

    def __post_init__(self):
        for k, v in self.lambda_per_domain.items():
            if not np.isfinite(v) or v < 0:
                raise LossError(f"lambda for {k!r} must be finite and >= 0, got {v}")

    def lam(self, domain_id: str) -> float:
        try:
            return float(self.lambda_per_domain[domain_id])
        except KeyError:
            raise LossError(f"no lambda configured for domain {domain_id!r}") from None


def _data(t) -> np.ndarray:
    return t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)


def valid_medians(gt: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Median of the valid pixels of each map; leading axis is the batch axis for ndim >= 3."""
    gt = np.asarray(gt, dtype=np.float64)
    mask = np.asarray(mask).astype(bool)
    if gt.ndim <= 2:
        gt, mask = gt[None], mask[None]
    out = np.empty(len(gt))
    for i, (g, m) in enumerate(zip(gt, mask)):
        vals = g[m]
        if vals.size == 0:
            raise LossError(f"map {i} has no valid pixels; median undefined")
        med = float(np.median(vals))
        if med <= 0:
            raise LossError(f"map {i} has non-positive median depth {med}")
        out[i] = med
    return out


def _per_map(values: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if len(shape) <= 2:
        return np.full(shape, values[0])
    return np.broadcast_to(values.reshape((-1,) + (1,) * (len(shape) - 1)), shape).copy()


def scale_normalize(depth, mask) -> np.ndarray:
    """Divide a depth map (or batch of maps) by the median of its valid pixels."""
    depth = _data(depth)
    return depth / _per_map(valid_medians(depth, mask), depth.shape)


def _check_shapes(op: str, *arrays) -> None:
    shapes = {tuple(_data(a).shape) for a in arrays}
    if len(shapes) != 1:
        raise LossError(f"{op}: shape mismatch {sorted(shapes)}")


def uncertainty_depth_loss(pred, s, gt, mask, normalize: bool = False, use_uncertainty: bool = True) -> Tensor:
    """mean over valid pixels of exp(-s) * (pred - gt)**2 + s.

    With ``normalize``, pred and gt are both divided by gt's valid median
    (per map).  With ``use_uncertainty`` off the s term is dropped entirely
    and this is the masked mean squared error.
    """
    pred = ad.as_tensor(pred)
    gt = _data(gt)
    mask = _data(mask).astype(np.float64)
    _check_shapes("uncertainty_depth_loss", pred, gt, mask, *([s] if use_uncertainty else []))
    count = float(mask.sum())
    if count == 0:
        raise LossError("uncertainty_depth_loss: mask has no valid pixels")
    if normalize:
        scale = 1.0 / _per_map(valid_medians(gt, mask), gt.shape)
        pred = pred * scale
        gt = gt * scale
    sq = ad.square(pred - gt)
    if use_uncertainty:
        s = ad.as_tensor(s)
        term = ad.exp(-s) * sq + s
    else:
        term = sq
    return ad.sum(term * mask) * (1.0 / count)


def replay_loss(pred, s, gt, mask, normalize: bool = False, use_uncertainty: bool = True) -> Tensor:
    """Depth loss on a replay batch; identical contract to :func:`uncertainty_depth_loss`."""
    return uncertainty_depth_loss(pred, s, gt, mask, normalize=normalize, use_uncertainty=use_uncertainty)


def consistency_loss(new_depth, new_s, old_depth, old_s, include_uncertainty: bool = True) -> Tensor:
    """mean(|new_depth - old_depth| + |new_s - old_s|); old outputs are treated as constants."""
    _check_shapes("consistency_loss", new_depth, new_s, old_depth, old_s)
    old_depth = _data(old_depth)
    term = ad.absolute(ad.as_tensor(new_depth) - old_depth)
    if include_uncertainty:
        term = term + ad.absolute(ad.as_tensor(new_s) - _data(old_s))
    return ad.mean(term)


def total_loss(new_domain_loss, old_domain_terms: Mapping[str, tuple], weights: LossWeights) -> Tensor:
    """ud + sum_i lambda_i * (cons_i + replay_i).

    ``old_domain_terms`` maps a domain id to ``(cons, replay)``; either entry
    may be ``None`` when that term is switched off.
    """
    total = ad.as_tensor(new_domain_loss)
    for domain_id, (cons, rep) in old_domain_terms.items():
        lam = weights.lam(domain_id)
        parts = [t for t in (cons, rep) if t is not None]
        if not parts:
            continue
        inner = parts[0] if len(parts) == 1 else ad.add(parts[0], parts[1])
        total = total + lam * inner
    return total
