"""Layers with an explicit forward cache and hand-written backward pass.

Every layer keeps ``params`` and ``grads`` dicts with matching shapes.
``backward`` accumulates into ``grads`` (call :meth:`Module.zero_grad`
between steps) and returns the gradient with respect to the layer input.
"""

from __future__ import annotations

import numpy as np

ACTIVATIONS = ("linear", "tanh")


class ShapeError(ValueError):
    pass


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Module:
    """Parameter bookkeeping shared by layers and networks."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.children: dict[str, Module] = {}

    def add_param(self, name: str, value: np.ndarray) -> None:
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)

    def add_child(self, name: str, child: "Module") -> "Module":
        self.children[name] = child
        return child

    def named_params(self, prefix: str = ""):
        """Yield ``(qualified name, param, grad)`` in registration order."""
        for k, v in self.params.items():
            yield prefix + k, v, self.grads[k]
        for name, child in self.children.items():
            yield from child.named_params(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = ""):
        """Non-trainable state that still belongs in a checkpoint."""
        for k, v in getattr(self, "buffers", {}).items():
            yield prefix + k, v
        for name, child in self.children.items():
            yield from child.named_buffers(f"{prefix}{name}.")

    def zero_grad(self) -> None:
        for _, _, g in self.named_params():
            g[...] = 0.0

    def param_count(self) -> int:
        return int(sum(p.size for _, p, _ in self.named_params()))

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {k: p for k, p, _ in self.named_params()}
        out.update(dict(self.named_buffers()))
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        targets = {k: p for k, p, _ in self.named_params()}
        targets.update(dict(self.named_buffers()))
        missing = set(targets) - set(state)
        if missing:
            raise KeyError(f"checkpoint is missing {sorted(missing)}")
        for k, dst in targets.items():
            src = np.asarray(state[k])
            if src.shape != dst.shape:
                raise ShapeError(f"{k}: checkpoint shape {src.shape} != {dst.shape}")
            dst[...] = src


class Dense(Module):
    """y = act(x W + b) over the last axis; leading axes are batch."""

    def __init__(self, d_in: int, d_out: int, activation: str = "linear", rng=None, dtype=np.float64):
        super().__init__()
        if activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        self.d_in, self.d_out, self.activation = d_in, d_out, activation
        rng = rng if rng is not None else np.random.default_rng(0)
        self.add_param("W", glorot_uniform(rng, (d_in, d_out), d_in, d_out, dtype))
        self.add_param("b", np.zeros(d_out, dtype=dtype))
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"Dense expects last axis {self.d_in}, got {x.shape}")
        y = x @ self.params["W"] + self.params["b"]
        if self.activation == "tanh":
            y = np.tanh(y)
        self._cache = (x, y)
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        x, y = self._cache
        if self.activation == "tanh":
            dy = dy * (1.0 - y * y)
        x2 = x.reshape(-1, self.d_in)
        dy2 = dy.reshape(-1, self.d_out)
        self.grads["W"] += x2.T @ dy2
        self.grads["b"] += dy2.sum(axis=0)
        return dy @ self.params["W"].T


class Tanh(Module):
    def forward(self, x):
        self._y = np.tanh(x)
        return self._y

    def backward(self, dy):
        return dy * (1.0 - self._y * self._y)


def conv_out_len(length: int, width: int, stride: int, padding: int) -> int:
    return (length + 2 * padding - width) // stride + 1


def _windows(xp: np.ndarray, width: int, stride: int, n_out: int) -> np.ndarray:
    """(B, C, L) -> read-only view (B, C, n_out, width)."""
    B, C, _ = xp.shape
    s0, s1, s2 = xp.strides
    return np.lib.stride_tricks.as_strided(xp, (B, C, n_out, width), (s0, s1, s2 * stride, s2), writeable=False)


class Conv1d(Module):
    """Cross-correlation over (batch, channels, positions) via im2col."""

    def __init__(self, c_in: int, c_out: int, width: int, stride: int = 1, padding: int = 0, rng=None,
                 dtype=np.float64):
        super().__init__()
        if width < 1 or stride < 1 or padding < 0:
            raise ValueError("invalid convolution geometry")
        self.c_in, self.c_out, self.width, self.stride, self.padding = c_in, c_out, width, stride, padding
        rng = rng if rng is not None else np.random.default_rng(0)
        self.add_param("W", glorot_uniform(rng, (c_out, c_in, width), c_in * width, c_out * width, dtype))
        self.add_param("b", np.zeros(c_out, dtype=dtype))

    def out_len(self, length: int) -> int:
        return conv_out_len(length, self.width, self.stride, self.padding)

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 3 or x.shape[1] != self.c_in:
            raise ShapeError(f"Conv1d expects (batch, {self.c_in}, positions), got {x.shape}")
        n_out = self.out_len(x.shape[2])
        if n_out < 1:
            raise ShapeError("convolution output would be empty")
        p = self.padding
        xp = np.pad(x, ((0, 0), (0, 0), (p, p))) if p else np.ascontiguousarray(x)
        cols = _windows(xp, self.width, self.stride, n_out)
        self._cache = (x.shape, cols)
        return np.einsum("bcpw,ocw->bop", cols, self.params["W"], optimize=True) + self.params["b"][:, None]

    def backward(self, dy: np.ndarray) -> np.ndarray:
        (B, C, L), cols = self._cache
        self.grads["W"] += np.einsum("bcpw,bop->ocw", cols, dy, optimize=True)
        self.grads["b"] += dy.sum(axis=(0, 2))
        dcols = np.einsum("ocw,bop->bcpw", self.params["W"], dy, optimize=True)
        p, s = self.padding, self.stride
        n_out = dy.shape[2]
        dxp = np.zeros((B, C, L + 2 * p), dtype=dy.dtype)
        for w in range(self.width):
            dxp[:, :, w : w + s * (n_out - 1) + 1 : s] += dcols[:, :, :, w]
        return dxp[:, :, p : p + L]


class ConvTranspose1d(Module):
    """Adjoint of :class:`Conv1d`; output length (P-1)*stride - 2*padding + width."""

    def __init__(self, c_in: int, c_out: int, width: int, stride: int = 1, padding: int = 0, rng=None,
                 dtype=np.float64):
        super().__init__()
        if width < 1 or stride < 1 or padding < 0:
            raise ValueError("invalid convolution geometry")
        self.c_in, self.c_out, self.width, self.stride, self.padding = c_in, c_out, width, stride, padding
        rng = rng if rng is not None else np.random.default_rng(0)
        self.add_param("W", glorot_uniform(rng, (c_in, c_out, width), c_in * width, c_out * width, dtype))
        self.add_param("b", np.zeros(c_out, dtype=dtype))

    def out_len(self, length: int) -> int:
        return (length - 1) * self.stride - 2 * self.padding + self.width

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 3 or x.shape[1] != self.c_in:
            raise ShapeError(f"ConvTranspose1d expects (batch, {self.c_in}, positions), got {x.shape}")
        B, _, P = x.shape
        n_out = self.out_len(P)
        if n_out < 1:
            raise ShapeError("transposed convolution output would be empty")
        s, p = self.stride, self.padding
        contrib = np.einsum("bcp,cow->bopw", x, self.params["W"], optimize=True)
        full = np.zeros((B, self.c_out, (P - 1) * s + self.width), dtype=contrib.dtype)
        for w in range(self.width):
            full[:, :, w : w + s * (P - 1) + 1 : s] += contrib[:, :, :, w]
        self._x = x
        return full[:, :, p : p + n_out] + self.params["b"][:, None]

    def backward(self, dy: np.ndarray) -> np.ndarray:
        x = self._x
        B, _, P = x.shape
        s, p = self.stride, self.padding
        full = np.zeros((B, self.c_out, (P - 1) * s + self.width), dtype=dy.dtype)
        full[:, :, p : p + dy.shape[2]] = dy
        cols = _windows(full, self.width, s, P)  # (B, c_out, P, width)
        self.grads["W"] += np.einsum("bcp,bopw->cow", x, cols, optimize=True)
        self.grads["b"] += dy.sum(axis=(0, 2))
        return np.einsum("bopw,cow->bcp", cols, self.params["W"], optimize=True)


class BatchNorm(Module):
    """Per-feature normalization over every leading axis of (..., F).

    In training mode the batch statistics are taken over the rows selected by
    ``mask`` (all rows if omitted) and the running estimates are updated; in
    inference mode the running estimates are used and nothing changes.
    """

    def __init__(self, n_features: int, eps: float = 1e-5, momentum: float = 0.1, dtype=np.float64):
        super().__init__()
        self.n_features, self.eps, self.momentum = n_features, eps, momentum
        self.add_param("gamma", np.ones(n_features, dtype=dtype))
        self.add_param("beta", np.zeros(n_features, dtype=dtype))
        self.buffers = {
            "running_mean": np.zeros(n_features, dtype=dtype),
            "running_var": np.ones(n_features, dtype=dtype),
        }

    def forward(self, x: np.ndarray, train: bool = True, mask: np.ndarray | None = None) -> np.ndarray:
        if x.shape[-1] != self.n_features:
            raise ShapeError(f"BatchNorm expects last axis {self.n_features}, got {x.shape}")
        x2 = x.reshape(-1, self.n_features)
        if train:
            m = np.ones(x2.shape[0], dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(-1)
            if m.shape[0] != x2.shape[0]:
                raise ShapeError("mask does not match the leading axes of the input")
            n = int(m.sum())
            if n < 2:
                raise ValueError("batch normalization in training mode needs at least 2 rows")
            sel = x2[m]
            mean = sel.mean(axis=0)
            var = ((sel - mean) ** 2).mean(axis=0)
            mom = self.momentum
            self.buffers["running_mean"][...] = (1 - mom) * self.buffers["running_mean"] + mom * mean
            self.buffers["running_var"][...] = (1 - mom) * self.buffers["running_var"] + mom * var * n / (n - 1)
        else:
            mean, var, m, n = self.buffers["running_mean"], self.buffers["running_var"], None, 0
        std = np.sqrt(var + self.eps)
        xhat = (x2 - mean) / std
        self._cache = (xhat, std, m, n, train)
        return (xhat * self.params["gamma"] + self.params["beta"]).reshape(x.shape)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        xhat, std, m, n, train = self._cache
        dy2 = dy.reshape(-1, self.n_features)
        self.grads["gamma"] += np.sum(dy2 * xhat, axis=0)
        self.grads["beta"] += dy2.sum(axis=0)
        dxhat = dy2 * self.params["gamma"]
        dx = dxhat / std
        if train:
            # mean and std depend on the masked rows only, but every row's
            # output depends on them
            d_mean = -dxhat.sum(axis=0) / std
            d_std = -np.sum(dxhat * xhat, axis=0) / std
            mf = m[:, None].astype(dx.dtype)
            dx = dx + mf * (d_mean + d_std * xhat) / n
        return dx.reshape(dy.shape)
