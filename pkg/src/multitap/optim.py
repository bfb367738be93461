"""Decoupled-weight-decay adaptive-moment optimizer with exportable state.

Implemented in-repo (rather than wrapping a framework optimizer) so the full
optimizer state round-trips bit-exactly through the project's checkpoint
container, which the resume contract requires.
"""

from __future__ import annotations

import math
from collections.abc import Iterable

import torch
from torch import Tensor

_TOKEN_PARAM_KEYWORDS = ("token", "register")


def default_decay_filter(name: str, param: Tensor) -> bool:
    """Weight decay applies to matrices only; norms, biases, and learnable
    token embeddings are excluded (1-d parameters or *token*/*register*
    names)."""
    if param.ndim <= 1:
        return False
    return not any(k in name for k in _TOKEN_PARAM_KEYWORDS)


class AdamW:
    def __init__(
        self,
        named_params: Iterable[tuple[str, Tensor]],
        betas: tuple[float, float] = (0.9, 0.95),
        eps: float = 1e-8,
        weight_decay: float = 0.05,
        decay_filter=default_decay_filter,
    ):
        self.params: list[tuple[str, Tensor]] = [
            (name, p) for name, p in named_params if p.requires_grad
        ]
        names = [n for n, _ in self.params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.decayed = {name: decay_filter(name, p) for name, p in self.params}
        self.m = {name: torch.zeros_like(p) for name, p in self.params}
        self.v = {name: torch.zeros_like(p) for name, p in self.params}
        self.t = 0

    @torch.no_grad()
    def step(self, lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        live = [(name, p) for name, p in self.params if p.grad is not None]
        if not live:
            return
        decay_ps = [p for name, p in live if self.decayed[name]]
        if decay_ps and self.weight_decay:
            torch._foreach_mul_(decay_ps, 1.0 - lr * self.weight_decay)
        ps = [p for _, p in live]
        gs = [p.grad for p in ps]
        ms = [self.m[name] for name, _ in live]
        vs = [self.v[name] for name, _ in live]
        torch._foreach_mul_(ms, self.beta1)
        torch._foreach_add_(ms, gs, alpha=1.0 - self.beta1)
        torch._foreach_mul_(vs, self.beta2)
        torch._foreach_addcmul_(vs, gs, gs, value=1.0 - self.beta2)
        denoms = torch._foreach_div(vs, bc2)
        torch._foreach_sqrt_(denoms)
        torch._foreach_add_(denoms, self.eps)
        torch._foreach_addcdiv_(ps, ms, denoms, value=-lr / bc1)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def grad_norm(self) -> float:
        total = 0.0
        for _, p in self.params:
            if p.grad is not None:
                total += float(p.grad.double().pow(2).sum())
        return math.sqrt(total)

    def state_arrays(self) -> dict[str, Tensor]:
        out = {}
        for name, _ in self.params:
            out[f"opt/m/{name}"] = self.m[name]
            out[f"opt/v/{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, Tensor], t: int) -> None:
        for name, _ in self.params:
            self.m[name].copy_(arrays[f"opt/m/{name}"])
            self.v[name].copy_(arrays[f"opt/v/{name}"])
        self.t = t
