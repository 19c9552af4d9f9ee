"""Single-layer LSTM with backpropagation through time.

Gate order in the stacked weight matrices is (input, forget, candidate,
output).  Shapes: ``Wx`` (d_in, 4H), ``Wh`` (H, 4H), ``b`` (4H,).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import Module, ShapeError, glorot_uniform


def sigmoid(x):
    # split by sign so large |x| never overflows exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


@dataclass
class LstmState:
    h: np.ndarray  # (batch, H) or (H,)
    c: np.ndarray

    def copy(self) -> "LstmState":
        return LstmState(self.h.copy(), self.c.copy())


class LSTM(Module):
    def __init__(self, d_in: int, hidden: int, rng=None, dtype=np.float64, forget_bias: float = 1.0):
        super().__init__()
        self.d_in, self.hidden = d_in, hidden
        rng = rng if rng is not None else np.random.default_rng(0)
        H = hidden
        self.add_param("Wx", glorot_uniform(rng, (d_in, 4 * H), d_in, 4 * H, dtype))
        self.add_param("Wh", glorot_uniform(rng, (H, 4 * H), H, 4 * H, dtype))
        b = np.zeros(4 * H, dtype=dtype)
        b[H : 2 * H] = forget_bias
        self.add_param("b", b)
        self._tape = None

    def zero_state(self, batch: int | None = None, dtype=None) -> LstmState:
        dtype = dtype or self.params["b"].dtype
        shape = (self.hidden,) if batch is None else (batch, self.hidden)
        return LstmState(np.zeros(shape, dtype=dtype), np.zeros(shape, dtype=dtype))

    def _gates(self, x, h):
        H = self.hidden
        z = x @ self.params["Wx"] + h @ self.params["Wh"] + self.params["b"]
        i = sigmoid(z[..., :H])
        f = sigmoid(z[..., H : 2 * H])
        g = np.tanh(z[..., 2 * H : 3 * H])
        o = sigmoid(z[..., 3 * H :])
        return i, f, g, o

    def step(self, x: np.ndarray, state: LstmState) -> tuple[np.ndarray, LstmState]:
        """One time step without recording anything for backward."""
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"LSTM expects input width {self.d_in}, got {x.shape}")
        if state.h.shape[-1] != self.hidden or state.c.shape != state.h.shape:
            raise ShapeError("LSTM state does not match the hidden size")
        i, f, g, o = self._gates(x, state.h)
        c = f * state.c + i * g
        h = o * np.tanh(c)
        return h, LstmState(h, c)

    def forward(self, x: np.ndarray, state: LstmState | None = None) -> tuple[np.ndarray, LstmState]:
        """Run over (batch, T, d_in); returns hidden outputs (batch, T, H) and the final state."""
        if x.ndim != 3 or x.shape[2] != self.d_in:
            raise ShapeError(f"LSTM expects (batch, T, {self.d_in}), got {x.shape}")
        B, T, _ = x.shape
        state = self.zero_state(B, x.dtype) if state is None else state
        h, c = state.h, state.c
        H = self.hidden
        hs = np.empty((B, T, H), dtype=x.dtype)
        tape = []
        for t in range(T):
            i, f, g, o = self._gates(x[:, t], h)
            c_new = f * c + i * g
            tc = np.tanh(c_new)
            h_new = o * tc
            tape.append((h, c, i, f, g, o, tc))
            h, c = h_new, c_new
            hs[:, t] = h
        self._tape = (x, tape)
        return hs, LstmState(h, c)

    def backward(self, dhs: np.ndarray, d_final: LstmState | None = None) -> tuple[np.ndarray, LstmState]:
        """BPTT.  Returns input gradients (batch, T, d_in) and the initial-state gradient."""
        x, tape = self._tape
        B, T, _ = x.shape
        Wx, Wh = self.params["Wx"], self.params["Wh"]
        dx = np.empty_like(x)
        dh = np.zeros_like(dhs[:, 0]) if d_final is None else d_final.h.copy()
        dc = np.zeros_like(dhs[:, 0]) if d_final is None else d_final.c.copy()
        gWx, gWh, gb = self.grads["Wx"], self.grads["Wh"], self.grads["b"]
        for t in range(T - 1, -1, -1):
            h_prev, c_prev, i, f, g, o, tc = tape[t]
            dh = dh + dhs[:, t]
            do = dh * tc
            dc = dc + dh * o * (1.0 - tc * tc)
            di = dc * g
            df = dc * c_prev
            dg = dc * i
            dz = np.concatenate([di * i * (1 - i), df * f * (1 - f), dg * (1 - g * g), do * o * (1 - o)], axis=-1)
            gWx += x[:, t].T @ dz
            gWh += h_prev.T @ dz
            gb += dz.sum(axis=0)
            dx[:, t] = dz @ Wx.T
            dh = dz @ Wh.T
            dc = dc * f
        return dx, LstmState(dh, dc)
