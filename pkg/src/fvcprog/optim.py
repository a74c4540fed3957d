"""Parameter store, AdamW with decoupled weight decay, and gradient checks.

The store maps names to leaf Tensors; shapes are frozen at registration.
adamw_step applies w <- w - lr * (m_hat / (sqrt(v_hat) + eps) + wd * w)
with bias-corrected moments. finite_difference_check compares reverse-mode
gradients against central differences of a float64 forward evaluation, so
the oracle stays accurate even when the graph runs in float32.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .autodiff import Tensor, backward


class ParamStore:
    """Named learnable (and frozen) arrays behind the model graph."""

    def __init__(self) -> None:
        self._params: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}

    def register(self, name: str, array: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self._params:
            raise ValueError(f"parameter {name!r} already registered")
        t = Tensor(np.array(array), requires_grad=trainable)
        self._params[name] = t
        self._trainable[name] = trainable
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def trainable_names(self) -> list[str]:
        return [n for n, f in self._trainable.items() if f]

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def n_scalars(self, trainable_only: bool = True) -> int:
        names = self.trainable_names() if trainable_only else self.names()
        return sum(self._params[n].data.size for n in names)

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore()
        for name, t in self._params.items():
            out.register(name, t.data.astype(dtype), trainable=self._trainable[name])
        return out

    def copy(self) -> "ParamStore":
        return self.astype(self._params[next(iter(self._params))].data.dtype) \
            if self._params else ParamStore()


@dataclass
class AdamWState:
    """Optimizer moments and hyperparameters; moments match parameter shapes."""

    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: ParamStore, grads: dict[str, np.ndarray],
               state: AdamWState) -> tuple[ParamStore, AdamWState]:
    """One decoupled-weight-decay update over the trainable parameters."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name in params.trainable_names():
        if name not in grads:
            continue
        w = params[name].data
        g = np.asarray(grads[name], dtype=w.dtype)
        if g.shape != w.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {w.shape} for {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros_like(w)
            state.v[name] = np.zeros_like(w)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        w -= state.lr * (m_hat / (np.sqrt(v_hat) + state.eps)
                         + state.weight_decay * w)
    return params, state


GraphFn = Callable[..., Tensor]


def evaluate_with_gradients(graph: GraphFn, inputs: Sequence[np.ndarray],
                            params: ParamStore) -> tuple[float, dict[str, np.ndarray]]:
    """Forward the graph to a scalar loss and return exact reverse-mode grads.

    Grads come back store-shaped: one array per trainable parameter
    (zeros for parameters the graph never touched).
    """
    params.zero_grad()
    out = graph(params, *inputs)
    if not isinstance(out, Tensor):
        raise TypeError("graph must return a Tensor")
    if out.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {out.data.shape}")
    backward(out)
    grads = {}
    for name in params.trainable_names():
        t = params[name]
        grads[name] = t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
    return float(out.data), grads


def finite_difference_check(graph: GraphFn, inputs: Sequence[np.ndarray],
                            params: ParamStore, epsilon: float = 1e-5,
                            max_per_param: Optional[int] = None,
                            param_names: Optional[Iterable[str]] = None,
                            seed: int = 0) -> float:
    """Worst-case relative error of reverse-mode grads vs central differences.

    Differences are evaluated on a float64 copy of the parameters (at the
    exact same values), with step h = epsilon * max(1, |w|) per scalar.
    Every trainable scalar is probed unless max_per_param caps the count,
    in which case a seeded random subsample is used.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    _, grads = evaluate_with_gradients(graph, inputs, params)
    names = list(param_names) if param_names is not None else params.trainable_names()
    p64 = params.astype(np.float64)
    inputs64 = [np.asarray(x, dtype=np.float64) if np.issubdtype(np.asarray(x).dtype, np.floating)
                else np.asarray(x) for x in inputs]

    def loss_at() -> float:
        out = graph(p64, *inputs64)
        return float(out.data)

    rng = np.random.default_rng(seed)
    probes: list[tuple[str, int]] = []
    for name in names:
        size = p64[name].data.size
        if max_per_param is not None and size > max_per_param:
            idx = rng.choice(size, size=max_per_param, replace=False)
        else:
            idx = np.arange(size)
        probes.extend((name, int(i)) for i in idx)

    fd = np.empty(len(probes))
    an = np.empty(len(probes))
    for k, (name, i) in enumerate(probes):
        flat = p64[name].data.reshape(-1)
        w0 = flat[i]
        h = epsilon * max(1.0, abs(w0))
        flat[i] = w0 + h
        lp = loss_at()
        flat[i] = w0 - h
        lm = loss_at()
        flat[i] = w0
        fd[k] = (lp - lm) / (2.0 * h)
        an[k] = grads[name].reshape(-1)[i]

    scale = max(np.max(np.abs(fd), initial=0.0), np.max(np.abs(an), initial=0.0))
    denom = np.maximum.reduce([np.abs(fd), np.abs(an),
                               np.full_like(fd, max(1e-3 * scale, 1e-12))])
    return float(np.max(np.abs(fd - an) / denom))
