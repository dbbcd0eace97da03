"""Numeric substrate: the differentiable primitives the model is built from,
and a finite-difference gradient checker.

PyTorch provides dense tensors and reverse-mode differentiation; this module
pins down which operations the rest of the package relies on so they can be
checked one by one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch
import torch.nn.functional as F

NORM_EPS = 1e-5

Tensor = torch.Tensor
Parameter = torch.nn.Parameter


def _sdpa(q, k, v):
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    return scores.softmax(dim=-1) @ v


@dataclass(frozen=True)
class Primitive:
    name: str
    fn: Callable[..., Tensor]
    # shapes of the random inputs used when checking the primitive
    arg_shapes: tuple[tuple[int, ...], ...]
    kwargs: dict = field(default_factory=dict)


def primitive_set() -> list[Primitive]:
    """The closed set of differentiable operations the U-Net and losses need."""
    return [
        Primitive("matmul", torch.matmul, ((3, 4), (4, 2))),
        Primitive("conv2d", F.conv2d, ((1, 2, 4, 4), (3, 2, 3, 3)), {"padding": 1}),
        Primitive("conv2d_stride2", F.conv2d, ((1, 2, 4, 4), (2, 2, 3, 3)), {"stride": 2, "padding": 1}),
        Primitive("upsample_nearest2x", lambda x: F.interpolate(x, scale_factor=2.0, mode="nearest"), ((1, 2, 2, 3),)),
        Primitive("group_norm", lambda x, w, b: F.group_norm(x, 2, w, b, NORM_EPS), ((2, 4, 2, 2), (4,), (4,))),
        Primitive("layer_norm", lambda x, w, b: F.layer_norm(x, (4,), w, b, NORM_EPS), ((3, 4), (4,), (4,))),
        Primitive("softmax", lambda x: x.softmax(dim=-1), ((3, 5),)),
        Primitive("silu", F.silu, ((4, 4),)),
        Primitive("gelu", F.gelu, ((4, 4),)),
        Primitive("add", torch.add, ((3, 4), (3, 4))),
        Primitive("mul", torch.mul, ((3, 4), (3, 4))),
        Primitive("reshape_transpose", lambda x: x.reshape(4, 6).transpose(0, 1), ((2, 3, 4),)),
        Primitive("attention", _sdpa, ((2, 4, 3), (2, 5, 3), (2, 5, 2))),
        Primitive("scaled_dot_product_attention", F.scaled_dot_product_attention, ((1, 2, 4, 3), (1, 2, 5, 3), (1, 2, 5, 3))),
        Primitive("mse", F.mse_loss, ((3, 4), (3, 4))),
    ]


class GradCheckError(RuntimeError):
    pass


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def passed(self, tol: float) -> bool:
        return self.worst < tol


def grad_check(
    fn: Callable[[], Tensor],
    params: dict[str, Tensor] | Sequence[Tensor],
    eps: float = 1e-6,
    tol: float | None = None,
) -> GradCheckReport:
    """Compare reverse-mode gradients of a scalar ``fn()`` against central differences.

    ``params`` are leaf tensors (float64, requires_grad) that ``fn`` closes over.
    Relative error uses ``max(|analytic|, |numeric|, 1e-8)`` as denominator.
    If ``tol`` is given, a failing report raises ``GradCheckError``.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-6, 1e-3]")
    if not isinstance(params, dict):
        params = {f"param{i}": p for i, p in enumerate(params)}

    for p in params.values():
        p.grad = None
    out = fn()
    if not torch.isfinite(out):
        raise GradCheckError("non-finite function value at the unperturbed point")
    grads = torch.autograd.grad(out, list(params.values()), allow_unused=True)

    report = {}
    with torch.no_grad():
        for (name, p), g in zip(params.items(), grads):
            analytic = (torch.zeros_like(p) if g is None else g.detach()).reshape(-1)
            flat = p.view(-1)
            worst = 0.0
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                f_plus = fn()
                flat[i] = orig - eps
                f_minus = fn()
                flat[i] = orig
                if not (torch.isfinite(f_plus) and torch.isfinite(f_minus)):
                    raise GradCheckError(f"non-finite value perturbing {name}[{i}]")
                numeric = (f_plus.item() - f_minus.item()) / (2 * eps)
                a = analytic[i].item()
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, err)
            report[name] = worst

    result = GradCheckReport(report)
    if tol is not None and not result.passed(tol):
        bad = {k: v for k, v in report.items() if v >= tol}
        raise GradCheckError(f"gradient check failed: {bad}")
    return result
