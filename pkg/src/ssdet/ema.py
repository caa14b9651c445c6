"""EMA teacher refinement and its unrolled closed form."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .detector import ArchitectureError, ParamVector


@dataclass
class EmaConfig:
    alpha: float = 0.9996

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")


def ema_update(teacher: ParamVector, student: ParamVector, alpha: float,
               in_place: bool = False) -> ParamVector:
    """teacher <- alpha * teacher + (1 - alpha) * student.

    The functional form returns a fresh vector. ``in_place=True`` overwrites
    ``teacher.values`` and requires the caller to hold exclusive access.
    """
    if teacher.layout != student.layout:
        raise ArchitectureError("teacher and student layouts differ")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    with torch.no_grad():
        s = student.values.detach()
        if in_place:
            # same two products and one sum as the functional branch, so both
            # modes round identically
            teacher.values.mul_(alpha).add_(s * (1.0 - alpha))
            return teacher
        return ParamVector(teacher.values.detach() * alpha + s * (1.0 - alpha), teacher.layout)


def closed_form_teacher(theta_hat: ParamVector, student_grads, alpha: float,
                        learning_rate: float, i: int) -> ParamVector:
    """Teacher weights at iteration ``i`` from the post-burn-in weights.

    Assumes plain SGD on the student, ``theta_s^{k+1} = theta_s^k - lr * g_k``,
    with one EMA step after every student step, both starting at
    ``theta_hat`` (iteration 1). Unrolling gives

        theta_t^i = theta_hat - lr * sum_{k=1}^{i-1} (1 - alpha^(i-k)) * g_k
    """
    if i < 1:
        raise ValueError("i must be >= 1")
    grads = list(student_grads)
    if len(grads) < i - 1:
        raise ValueError(f"need {i - 1} gradients, got {len(grads)}")
    out = theta_hat.values.detach().clone()
    for k in range(1, i):
        g = grads[k - 1]
        if g.layout != theta_hat.layout:
            raise ArchitectureError("gradient layout differs from theta_hat")
        out -= learning_rate * (1.0 - alpha ** (i - k)) * g.values.detach()
    return ParamVector(out, theta_hat.layout)
