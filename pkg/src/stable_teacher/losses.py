"""Training objectives.

All map losses take tensors whose last three dims are ``F x H x W`` and reduce
with a mean over every element. Teacher-side arguments are detached inside the
consistency losses, so they act as constant targets.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import torch
from torch.nn import functional as F

EPS = 1e-6

UNSUPERVISED_TERMS = ("base_cls_cons", "base_loc_cons", "eor_cons", "dop_u", "dop_eor")
SUPERVISED_TERMS = ("sup_cls", "sup_loc", "sup_eor")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, component: str, breakdown: dict):
        super().__init__(f"non-finite loss component {component!r}: {breakdown}")
        self.component = component
        self.breakdown = breakdown


@dataclass
class LossBreakdown:
    sup_cls: float = 0.0
    sup_loc: float = 0.0
    sup_eor: float = 0.0
    base_cls_cons: float = 0.0
    base_loc_cons: float = 0.0
    eor_cons: float = 0.0
    dop_u: float = 0.0
    dop_eor: float = 0.0
    lambda_t: float = 0.0
    total: float = 0.0

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def as_dict(self) -> dict:
        return asdict(self)


def _check_shapes(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def bce(pred: torch.Tensor, target: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Mean per-pixel binary cross-entropy of probabilities clamped to [eps, 1 - eps]."""
    _check_shapes(pred, target)
    p = pred.clamp(eps, 1 - eps)
    target = target.to(p.dtype)
    return -(target * torch.log(p) + (1 - target) * torch.log1p(-p)).mean()


def supervised_loss(logits: torch.Tensor, loc_map: torch.Tensor, eor_out: torch.Tensor | None,
                    labels: torch.Tensor, gt_masks: torch.Tensor):
    """Cross-entropy on logits plus BCE of both the raw and the refined map.

    ``eor_out`` must be the student EoR applied to the detached ``loc_map``; pass
    None when the EoR is disabled (its term is then zero).
    """
    if gt_masks is None:
        raise ValueError("supervised loss requires ground-truth masks")
    sup_cls = F.cross_entropy(logits, labels)
    sup_loc = bce(loc_map, gt_masks)
    sup_eor = bce(eor_out, gt_masks) if eor_out is not None else loc_map.new_zeros(())
    return sup_cls, sup_loc, sup_eor


def jsd(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """Jensen-Shannon divergence (natural log) along the last dim, batch-averaged.

    Zero-probability entries contribute nothing (0 ln 0 = 0). Each term is
    ``p ln(p / m)`` rather than a difference of logs, so disjoint supports give
    ``ln 2`` without cancellation error.
    """
    _check_shapes(p, q)
    m = 0.5 * (p + q)
    safe_m = torch.where(m > 0, m, torch.ones_like(m))
    kl_pm = torch.xlogy(p, p / safe_m).sum(-1)
    kl_qm = torch.xlogy(q, q / safe_m).sum(-1)
    out = 0.5 * kl_pm + 0.5 * kl_qm
    return out.mean() if out.dim() else out


def cls_consistency(t_logits: torch.Tensor, s_logits: torch.Tensor) -> torch.Tensor:
    return jsd(F.softmax(t_logits.detach(), dim=-1), F.softmax(s_logits, dim=-1))


def mse(target: torch.Tensor, pred: torch.Tensor) -> torch.Tensor:
    _check_shapes(target, pred)
    return ((pred - target.detach()) ** 2).mean()


def loc_consistency(t_map: torch.Tensor, s_map: torch.Tensor) -> torch.Tensor:
    return mse(t_map, s_map)


def eor_consistency(t_loc_eor: torch.Tensor, s_loc: torch.Tensor) -> torch.Tensor:
    """MSE between the teacher's refined map and the student's raw map."""
    return mse(t_loc_eor, s_loc)


def temporal_difference(x: torch.Tensor) -> torch.Tensor:
    """``out[..., f, :, :] = x[..., f + 1, :, :] - x[..., f, :, :]``."""
    if x.dim() < 3 or x.shape[-3] < 2:
        raise ValueError("temporal difference needs at least 2 frames")
    return x[..., 1:, :, :] - x[..., :-1, :, :]


def dop_loss(t_loc: torch.Tensor, t_loc_eor: torch.Tensor | None, s_loc: torch.Tensor):
    """Difference-of-pixels terms ``(dop_u, dop_eor)``; ``dop_eor`` is 0 without EoR."""
    _check_shapes(t_loc, s_loc)
    ds = temporal_difference(s_loc)
    dop_u = mse(temporal_difference(t_loc), ds)
    if t_loc_eor is None:
        return dop_u, s_loc.new_zeros(())
    _check_shapes(t_loc_eor, s_loc)
    return dop_u, mse(temporal_difference(t_loc_eor), ds)


def lambda_schedule(epoch: int, lambda_max: float = 0.1, ramp_epochs: int = 15,
                    kind: str = "linear") -> float:
    """Unsupervised weight: ramps from 0 at epoch 0 to ``lambda_max`` at ``ramp_epochs``."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    if ramp_epochs <= 0:
        return lambda_max
    t = min(1.0, epoch / ramp_epochs)
    if kind == "linear":
        return lambda_max * t
    if kind == "sigmoid":
        return lambda_max * math.exp(-5.0 * (1.0 - t) ** 2)
    raise ValueError(f"unknown ramp kind {kind!r}")


def total_loss(components: dict, lambda_t: float):
    """Combine loss components into ``(total, LossBreakdown)``.

    ``components`` maps term names to scalar tensors (or floats); missing terms
    count as zero. The returned total keeps the autograd graph.
    """
    unknown = set(components) - set(SUPERVISED_TERMS) - set(UNSUPERVISED_TERMS)
    if unknown:
        raise KeyError(f"unknown loss components {sorted(unknown)}")
    values = {k: float(v.detach()) if torch.is_tensor(v) else float(v) for k, v in components.items()}
    for name, v in values.items():
        if not math.isfinite(v):
            raise NonFiniteLossError(name, values)

    sup = sum(components[k] for k in SUPERVISED_TERMS if k in components)
    unsup = sum(components[k] for k in UNSUPERVISED_TERMS if k in components)
    total = sup + lambda_t * unsup

    total_value = float(total.detach()) if torch.is_tensor(total) else float(total)
    breakdown = LossBreakdown(**values, lambda_t=float(lambda_t), total=total_value)
    return total, breakdown
