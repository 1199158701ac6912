"""Parameter stores and the bias-corrected Adam update."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

import torch


class MissingGradError(KeyError):
    pass


class ParamStore:
    """Named parameter tensors plus an update counter.

    Tensors are shared with the owning module, so updates made through the
    store are visible to the model. ``subset`` returns a view over some of
    the names; it shares tensors but keeps its own counter.
    """

    def __init__(self, tensors: Mapping[str, torch.Tensor], step: int = 0):
        self._tensors = dict(tensors)
        self.step = step

    @classmethod
    def from_module(cls, module: torch.nn.Module, prefixes: Iterable[str] | None = None) -> "ParamStore":
        prefixes = tuple(prefixes) if prefixes is not None else None
        named = {
            name: p
            for name, p in module.named_parameters()
            if prefixes is None or name.startswith(prefixes)
        }
        return cls(named)

    def subset(self, prefixes: Iterable[str]) -> "ParamStore":
        prefixes = tuple(prefixes)
        return ParamStore({n: t for n, t in self._tensors.items() if n.startswith(prefixes)})

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def tensors(self) -> list[torch.Tensor]:
        return list(self._tensors.values())

    def items(self):
        return self._tensors.items()

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {n: tuple(t.shape) for n, t in self._tensors.items()}

    def assign(self, name: str, value: torch.Tensor) -> None:
        target = self._tensors[name]
        if value.shape != target.shape:
            raise ValueError(f"{name}: shape {tuple(target.shape)} is fixed, got {tuple(value.shape)}")
        with torch.no_grad():
            target.copy_(value)


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def create(cls, params: ParamStore, **hyper) -> "OptimizerState":
        state = cls(**hyper)
        for name, t in params.items():
            state.m[name] = torch.zeros_like(t)
            state.v[name] = torch.zeros_like(t)
        return state


def adam_step(
    params: ParamStore,
    grads: Mapping[str, torch.Tensor],
    state: OptimizerState,
    lr: float | None = None,
) -> tuple[ParamStore, OptimizerState]:
    """Apply one Adam update in place to every tensor in ``params``.

    ``lr`` overrides ``state.lr`` for this step (warmup schedules). Moments
    for names outside ``params`` are left untouched.
    """
    names = params.names()
    missing = [n for n in names if n not in grads]
    if missing:
        raise MissingGradError(f"no gradient for parameter(s): {', '.join(missing)}")
    for n in names:
        if grads[n].shape != params[n].shape:
            raise ValueError(f"{n}: gradient shape {tuple(grads[n].shape)} != {tuple(params[n].shape)}")
        if n not in state.m:
            state.m[n] = torch.zeros_like(params[n])
            state.v[n] = torch.zeros_like(params[n])

    state.step += 1
    params.step += 1
    lr = state.lr if lr is None else lr
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1**state.step
    bias2 = 1.0 - b2**state.step

    p = [params[n] for n in names]
    g = [grads[n] for n in names]
    m = [state.m[n] for n in names]
    v = [state.v[n] for n in names]
    with torch.no_grad():
        torch._foreach_mul_(m, b1)
        torch._foreach_add_(m, g, alpha=1.0 - b1)
        torch._foreach_mul_(v, b2)
        torch._foreach_addcmul_(v, g, g, value=1.0 - b2)
        denom = torch._foreach_sqrt(v)
        torch._foreach_div_(denom, bias2**0.5)
        torch._foreach_add_(denom, state.eps)
        torch._foreach_addcdiv_(p, m, denom, value=-lr / bias1)
    return params, state
