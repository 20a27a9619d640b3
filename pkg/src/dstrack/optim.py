"""Adam with bias correction and global-norm gradient clipping."""
from __future__ import annotations

import numpy as np

from .autodiff import ParamSet, ShapeError


class Adam:
    def __init__(
        self,
        params: ParamSet,
        lr: float = 1e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        clip_norm: float | None = 5.0,
    ):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.clip_norm = clip_norm
        self.step_count = 0
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}

    def global_grad_norm(self) -> float:
        total = 0.0
        for t in self.params.tensors():
            if t.grad is not None:
                g = t.grad.astype(np.float64, copy=False)
                total += float((g * g).sum())
        return float(np.sqrt(total))

    def step(self):
        """One update over all parameters whose grad is set."""
        scale = 1.0
        if self.clip_norm is not None:
            norm = self.global_grad_norm()
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad * p.data.dtype.type(scale)
            if g.shape != p.data.shape:
                raise ShapeError(f"grad shape {g.shape} != param shape {p.data.shape} for {name!r}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)
            p.data = p.data - update.astype(p.data.dtype)
        self.params.version += 1

    # moments travel with checkpoints so a resumed run continues exactly
    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"adam.step": np.array([float(self.step_count)], dtype=np.float32)}
        for k in self.m:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        self.step_count = int(round(float(arrays["adam.step"][0])))
        for k in self.m:
            self.m[k] = arrays[f"adam.m.{k}"].astype(self.m[k].dtype)
            self.v[k] = arrays[f"adam.v.{k}"].astype(self.v[k].dtype)
