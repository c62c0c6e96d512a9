"""Trainable parameter storage and the AMSGrad optimizer."""

from __future__ import annotations

import numpy as np

from .autodiff import BatchNormState, Tensor, get_default_dtype, square, tsum, add


class ParameterStore:
    """Named trainable tensors plus non-trainable buffers (BN statistics).

    Each parameter carries an order tag ("1", "2", or "shared") so per-order
    behavior (ablations, diagnostics) can address groups by name.
    """

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.order_tag: dict[str, str] = {}
        self.bn_states: dict[str, BatchNormState] = {}

    def add(self, name: str, value: np.ndarray, order: str) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name: {name}")
        if order not in ("1", "2", "shared"):
            raise ValueError(f"order tag must be '1', '2', or 'shared', got {order!r}")
        t = Tensor(np.asarray(value, dtype=get_default_dtype()))
        self.params[name] = t
        self.order_tag[name] = order
        return t

    def add_bn(self, name: str, width: int) -> BatchNormState:
        state = BatchNormState(width)
        self.bn_states[name] = state
        return state

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def grad_of(self, name: str) -> np.ndarray:
        """Gradient of a parameter; zeros if it did not reach the loss."""
        t = self.params[name]
        return t.grad if t.grad is not None else np.zeros_like(t.data)

    def l2_sumsq(self) -> Tensor:
        """Sum of squares over every trainable parameter, as a graph op."""
        total = None
        for t in self.params.values():
            s = tsum(square(t))
            total = s if total is None else add(total, s)
        if total is None:
            raise ValueError("parameter store is empty")
        return total

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"param/{k}": t.data for k, t in self.params.items()}
        for k, st in self.bn_states.items():
            for part, arr in st.arrays().items():
                out[f"bn/{k}/{part}"] = arr
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, t in self.params.items():
            key = f"param/{k}"
            if key not in arrays:
                raise KeyError(f"checkpoint is missing parameter {k!r}")
            if arrays[key].shape != t.data.shape:
                raise ValueError(
                    f"checkpoint shape mismatch for {k!r}: "
                    f"{arrays[key].shape} vs {t.data.shape}"
                )
            t.data = arrays[key].astype(get_default_dtype()).copy()
        for k, st in self.bn_states.items():
            st.load({part: arrays[f"bn/{k}/{part}"]
                     for part in ("mean", "var", "initialized")})


class AmsGrad:
    """AMSGrad: Adam with a running elementwise max of the second moment.

    Both moments are bias-corrected; the max enters the denominator, which
    is therefore nondecreasing over any gradient sequence.
    """

    def __init__(self, store: ParameterStore, lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.store = store
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in store.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in store.params.items()}
        self.vmax = {k: np.zeros_like(p.data) for k, p in store.params.items()}

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.store.params.items():
            g = self.store.grad_of(name)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            np.maximum(self.vmax[name], v, out=self.vmax[name])
            p.data -= lr * (m / c1) / (np.sqrt(self.vmax[name] / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.store.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {"opt/t": np.array([self.t], dtype=np.int64)}
        for k in self.store.params:
            out[f"opt/m/{k}"] = self.m[k]
            out[f"opt/v/{k}"] = self.v[k]
            out[f"opt/vmax/{k}"] = self.vmax[k]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays["opt/t"][0])
        for k in self.store.params:
            self.m[k] = arrays[f"opt/m/{k}"].copy()
            self.v[k] = arrays[f"opt/v/{k}"].copy()
            self.vmax[k] = arrays[f"opt/vmax/{k}"].copy()
