"""Convolutional autoencoder over dynamic-offset frames, plus a PCA baseline.

Encoder: per-vertex dense layers lift each vertex's (x, y, z) to a small
feature vector, the vertex axis (in mesh numbering order, zero-padded to a
multiple of ``stride ** n_conv``) is downsampled by strided 1-D
convolutions, and a final dense layer maps to the latent code.  The decoder
mirrors this with transposed convolutions.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .body_model import DynamicBasisPCA

log = logging.getLogger(__name__)

FC_BASELINE_WIDTHS = (6000, 3000)


class TrainingDivergence(FloatingPointError):
    """Loss became non-finite; the network has been restored to its best epoch."""


@dataclass(frozen=True)
class AeConfig:
    n_verts: int
    latent_dim: int = 16
    vertex_widths: tuple = (8, 16)
    channels: int = 16
    n_conv: int = 4
    width: int = 4
    stride: int = 2
    padding: int = 1
    dtype: str = "f4"

    def __post_init__(self):
        object.__setattr__(self, "vertex_widths", tuple(int(w) for w in self.vertex_widths))
        if self.n_verts < 1 or self.latent_dim < 1 or self.channels < 1 or self.n_conv < 0:
            raise ValueError("autoencoder dimensions must be positive")
        if len(self.vertex_widths) < 1:
            raise ValueError("need at least one per-vertex dense stage")
        # each conv must exactly divide the position count by the stride
        if self.width != self.stride + 2 * self.padding:
            raise ValueError("conv geometry must satisfy width == stride + 2 * padding")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "f4" else np.float64

    @property
    def block(self) -> int:
        return self.stride**self.n_conv

    @property
    def padded_verts(self) -> int:
        return -(-self.n_verts // self.block) * self.block

    @property
    def bottleneck_len(self) -> int:
        return self.padded_verts // self.block

    @classmethod
    def reference_scale(cls, **kw) -> "AeConfig":
        return cls(n_verts=6890, latent_dim=100, **kw)

    @classmethod
    def full_capacity(cls, n_verts: int, **kw) -> "AeConfig":
        """Latent size 3N with the bottleneck wide enough to carry it."""
        probe = cls(n_verts=n_verts)
        channels = -(-3 * n_verts // probe.bottleneck_len)
        return cls(n_verts=n_verts, latent_dim=3 * n_verts, channels=max(channels, 16), **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["vertex_widths"] = list(self.vertex_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AeConfig":
        return cls(**d)


@dataclass
class Normalizer:
    """Per-axis affine map of [lo, hi] onto [-1, 1]."""

    lo: np.ndarray  # (3,)
    hi: np.ndarray

    @classmethod
    def fit(cls, offsets: np.ndarray) -> "Normalizer":
        pts = np.asarray(offsets, dtype=np.float64).reshape(-1, 3)
        if pts.size == 0:
            raise ValueError("cannot fit a normalizer to an empty dataset")
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        # a constant axis maps to 0 with unit half-range
        flat = hi - lo < 1e-12
        lo = np.where(flat, lo - 1.0, lo)
        hi = np.where(flat, hi + 1.0, hi)
        return cls(lo, hi)

    @property
    def center(self):
        return 0.5 * (self.hi + self.lo)

    @property
    def half_range(self):
        return 0.5 * (self.hi - self.lo)

    def normalize(self, offsets: np.ndarray) -> np.ndarray:
        x = np.asarray(offsets, dtype=np.float64)
        pts = x.reshape(*x.shape[:-1], -1, 3)
        return ((pts - self.center) / self.half_range).reshape(x.shape)

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        pts = x.reshape(*x.shape[:-1], -1, 3)
        return (pts * self.half_range + self.center).reshape(x.shape)

    def to_dict(self) -> dict:
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(np.array(d["lo"], dtype=np.float64), np.array(d["hi"], dtype=np.float64))


class OffsetAutoencoder(nn.Module):
    def __init__(self, config: AeConfig, seed: int = 0, normalizer: Normalizer | None = None):
        super().__init__()
        self.config = config
        self.normalizer = normalizer
        c = config
        dt = c.np_dtype
        rng = nn.make_rng(seed)
        widths = (3,) + c.vertex_widths
        self.enc_vertex = [self.add_child(f"enc_v{i}", nn.Dense(a, b, "tanh", rng, dt))
                           for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]))]
        chans = [c.vertex_widths[-1]] + [c.channels] * c.n_conv
        self.enc_conv = [self.add_child(f"enc_conv{i}", nn.Conv1d(chans[i], chans[i + 1], c.width, c.stride,
                                                                  c.padding, rng, dt))
                         for i in range(c.n_conv)]
        flat = chans[-1] * c.bottleneck_len
        self.enc_out = self.add_child("enc_out", nn.Dense(flat, c.latent_dim, "linear", rng, dt))
        self.dec_in = self.add_child("dec_in", nn.Dense(c.latent_dim, flat, "tanh", rng, dt))
        rchans = chans[::-1]
        self.dec_conv = [self.add_child(f"dec_conv{i}", nn.ConvTranspose1d(rchans[i], rchans[i + 1], c.width,
                                                                           c.stride, c.padding, rng, dt))
                         for i in range(c.n_conv)]
        rw = widths[::-1]
        self.dec_vertex = [self.add_child(f"dec_v{i}", nn.Dense(a, b, "tanh" if i < len(rw) - 2 else "linear",
                                                                rng, dt))
                           for i, (a, b) in enumerate(zip(rw[:-1], rw[1:]))]
        self._acts: list[nn.Tanh] = []

    # ---- normalized-space passes -------------------------------------------------

    def encode_normalized(self, x: np.ndarray) -> np.ndarray:
        """(batch, 3N) normalized offsets -> (batch, L) codes."""
        c = self.config
        x = np.asarray(x, dtype=c.np_dtype)
        if x.ndim != 2 or x.shape[1] != 3 * c.n_verts:
            raise nn.ShapeError(f"expected (batch, {3 * c.n_verts}), got {x.shape}")
        B = x.shape[0]
        h = x.reshape(B, c.n_verts, 3)
        for layer in self.enc_vertex:
            h = layer.forward(h)
        h = np.pad(h, ((0, 0), (0, c.padded_verts - c.n_verts), (0, 0))).transpose(0, 2, 1)
        self._enc_tanh = []
        for layer in self.enc_conv:
            act = nn.Tanh()
            h = act.forward(layer.forward(h))
            self._enc_tanh.append(act)
        self._bottleneck_shape = h.shape
        return self.enc_out.forward(h.reshape(B, -1))

    def decode_normalized(self, z: np.ndarray) -> np.ndarray:
        c = self.config
        z = np.asarray(z, dtype=c.np_dtype)
        if z.ndim != 2 or z.shape[1] != c.latent_dim:
            raise nn.ShapeError(f"expected (batch, {c.latent_dim}), got {z.shape}")
        B = z.shape[0]
        h = self.dec_in.forward(z).reshape(B, -1, c.bottleneck_len)
        self._dec_tanh = []
        for layer in self.dec_conv:
            act = nn.Tanh()
            h = act.forward(layer.forward(h))
            self._dec_tanh.append(act)
        h = h[:, :, : c.n_verts].transpose(0, 2, 1)
        for layer in self.dec_vertex:
            h = layer.forward(h)
        return h.reshape(B, -1)

    def backward_decode(self, dy: np.ndarray) -> np.ndarray:
        c = self.config
        B = dy.shape[0]
        g = dy.reshape(B, c.n_verts, 3)
        for layer in reversed(self.dec_vertex):
            g = layer.backward(g)
        g = g.transpose(0, 2, 1)
        g = np.pad(g, ((0, 0), (0, 0), (0, c.padded_verts - c.n_verts)))
        for layer, act in zip(reversed(self.dec_conv), reversed(self._dec_tanh)):
            g = layer.backward(act.backward(g))
        return self.dec_in.backward(g.reshape(B, -1))

    def backward_encode(self, dz: np.ndarray) -> np.ndarray:
        c = self.config
        B = dz.shape[0]
        g = self.enc_out.backward(dz).reshape(self._bottleneck_shape)
        for layer, act in zip(reversed(self.enc_conv), reversed(self._enc_tanh)):
            g = layer.backward(act.backward(g))
        g = g.transpose(0, 2, 1)[:, : c.n_verts]
        for layer in reversed(self.enc_vertex):
            g = layer.backward(g)
        return g.reshape(B, -1)

    def reconstruction_loss(self, x: np.ndarray, need_grad: bool = True) -> float:
        """Mean squared error in normalized coordinates; accumulates grads if asked."""
        y = self.decode_normalized(self.encode_normalized(x))
        diff = y - x
        loss = float(np.mean(diff.astype(np.float64) ** 2))
        if need_grad:
            dy = (2.0 / diff.size) * diff
            self.backward_encode(self.backward_decode(dy))
        return loss

    # ---- metric-space API ---------------------------------------------------------

    def _require_normalizer(self) -> Normalizer:
        if self.normalizer is None:
            raise RuntimeError("autoencoder has no normalizer; train it or load a checkpoint first")
        return self.normalizer

    def encode(self, offsets: np.ndarray) -> np.ndarray:
        """Offsets (3N,) or (batch, 3N) in meters -> latent codes (float64)."""
        x = np.asarray(offsets, dtype=np.float64)
        single = x.ndim == 1
        x2 = self._require_normalizer().normalize(np.atleast_2d(x))
        z = self.encode_normalized(x2).astype(np.float64)
        return z[0] if single else z

    def decode(self, codes: np.ndarray) -> np.ndarray:
        z = np.asarray(codes, dtype=np.float64)
        single = z.ndim == 1
        y = self.decode_normalized(np.atleast_2d(z)).astype(np.float64)
        y = self._require_normalizer().denormalize(y)
        return y[0] if single else y

    def reconstruct(self, offsets: np.ndarray) -> np.ndarray:
        return self.decode(self.encode(offsets))


def fc_baseline_param_count(n_verts: int = 6890, latent_dim: int = 100, widths=FC_BASELINE_WIDTHS) -> int:
    """Fully connected autoencoder 3N -> widths -> L and its mirror."""
    dims = [3 * n_verts, *widths, latent_dim]
    enc = sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))
    rdims = dims[::-1]
    dec = sum(a * b + b for a, b in zip(rdims[:-1], rdims[1:]))
    return enc + dec


def param_count(ae: OffsetAutoencoder) -> int:
    return ae.param_count()


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class AeTrainSettings:
    epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 1e-4
    train_fraction: float = 0.7
    seed: int = 0


@dataclass
class AeTrainer:
    """Owns an autoencoder, its optimizer, RNG and loss history.

    The split and the normalizer are fixed when the trainer is created, so
    resuming from a checkpoint continues the same curve.
    """

    ae: OffsetAutoencoder
    data: np.ndarray  # (frames, 3N) meters
    settings: AeTrainSettings
    train_idx: np.ndarray = None
    val_idx: np.ndarray = None
    optimizer: nn.Adam = None
    rng: np.random.Generator = None
    history: list = field(default_factory=list)
    epoch: int = 0

    @classmethod
    def create(cls, config: AeConfig, data: np.ndarray, settings: AeTrainSettings = AeTrainSettings()) -> "AeTrainer":
        data = np.asarray(data, dtype=np.float64)
        if data.ndim != 2 or data.shape[0] == 0:
            raise ValueError("autoencoder training needs a nonempty (frames, 3N) dataset")
        if data.shape[1] != 3 * config.n_verts:
            raise ValueError(f"dataset width {data.shape[1]} does not match 3N = {3 * config.n_verts}")
        rng = nn.make_rng(settings.seed)
        perm = rng.permutation(data.shape[0])
        n_train = max(1, int(round(settings.train_fraction * data.shape[0])))
        train_idx, val_idx = np.sort(perm[:n_train]), np.sort(perm[n_train:])
        if val_idx.size == 0:
            val_idx = train_idx
        ae = OffsetAutoencoder(config, seed=settings.seed, normalizer=Normalizer.fit(data[train_idx]))
        tr = cls(ae, data, settings, train_idx, val_idx, nn.Adam(ae, settings.learning_rate), rng)
        tr.history.append(tr.evaluate(0))
        return tr

    def _normalized(self, idx):
        return self.ae.normalizer.normalize(self.data[idx]).astype(self.ae.config.np_dtype)

    def _mean_loss(self, idx, batch: int = 256) -> float:
        total = 0.0
        for s in range(0, idx.size, batch):
            chunk = idx[s : s + batch]
            total += self.ae.reconstruction_loss(self._normalized(chunk), need_grad=False) * chunk.size
        return total / idx.size

    def evaluate(self, epoch: int) -> dict:
        return {"epoch": epoch, "train_loss": self._mean_loss(self.train_idx), "val_loss": self._mean_loss(self.val_idx)}

    def run(self, epochs: int, log_every: int = 0) -> list:
        bs = self.settings.batch_size
        best = (min(h["val_loss"] for h in self.history), self.ae.state_dict())
        best = (best[0], {k: v.copy() for k, v in best[1].items()})
        for _ in range(epochs):
            self.epoch += 1
            order = self.train_idx[self.rng.permutation(self.train_idx.size)]
            for s in range(0, order.size, bs):
                self.ae.zero_grad()
                loss = self.ae.reconstruction_loss(self._normalized(order[s : s + bs]))
                if not np.isfinite(loss):
                    self.ae.load_state_dict(best[1])
                    raise TrainingDivergence(f"non-finite loss at epoch {self.epoch}; restored best epoch")
                self.optimizer.step()
            rec = self.evaluate(self.epoch)
            self.history.append(rec)
            if rec["val_loss"] < best[0]:
                best = (rec["val_loss"], {k: v.copy() for k, v in self.ae.state_dict().items()})
            if log_every and self.epoch % log_every == 0:
                log.info("ae epoch %d train %.3e val %.3e", self.epoch, rec["train_loss"], rec["val_loss"])
        return self.history

    def save(self, path) -> Path:
        extra_meta = {
            "kind": "offset_autoencoder",
            "normalizer": self.ae.normalizer.to_dict(),
            "settings": asdict(self.settings),
            "epoch": self.epoch,
            "history": self.history,
        }
        return nn.save_checkpoint(path, self.ae, self.ae.config.to_dict(), self.optimizer, self.rng, extra_meta,
                                  {"train_idx": self.train_idx, "val_idx": self.val_idx})

    @classmethod
    def resume(cls, path, data: np.ndarray) -> "AeTrainer":
        meta, params, opt, extra = nn.load_checkpoint(path)
        ae = load_autoencoder(path)
        settings = AeTrainSettings(**meta["extra"]["settings"])
        optimizer = nn.Adam(ae, settings.learning_rate)
        optimizer.load_state(meta["optimizer"], opt)
        return cls(ae, np.asarray(data, dtype=np.float64), settings, extra["train_idx"], extra["val_idx"], optimizer,
                   nn.restore_rng(meta["rng"]), list(meta["extra"]["history"]), int(meta["extra"]["epoch"]))


def train_ae(config: AeConfig, data: np.ndarray, settings: AeTrainSettings = AeTrainSettings()) -> AeTrainer:
    tr = AeTrainer.create(config, data, settings)
    tr.run(settings.epochs)
    return tr


def load_autoencoder(path) -> OffsetAutoencoder:
    meta, params, _, _ = nn.load_checkpoint(path)
    ae = OffsetAutoencoder(AeConfig.from_dict(meta["spec"]),
                           normalizer=Normalizer.from_dict(meta["extra"]["normalizer"]))
    ae.load_state_dict(params)
    return ae


def write_loss_csv(history: list, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss"])
        for h in history:
            w.writerow([h["epoch"], repr(float(h["train_loss"])), repr(float(h["val_loss"]))])
    tmp.replace(path)


def per_vertex_error(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Euclidean distance per vertex, (..., 3N) -> (..., N)."""
    d = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return np.linalg.norm(d.reshape(*d.shape[:-1], -1, 3), axis=-1)


# ---------------------------------------------------------------------------
# PCA baseline
# ---------------------------------------------------------------------------


def pca_fit(data: np.ndarray, n_components: int) -> DynamicBasisPCA:
    """Mean plus top principal directions via a thin SVD of the centered data."""
    X = np.asarray(data, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("PCA expects a (frames, features) matrix")
    if X.shape[0] < n_components + 1:
        raise ValueError(f"need at least {n_components + 1} frames for {n_components} components")
    if n_components > X.shape[1]:
        raise ValueError("more components than features")
    mean = X.mean(axis=0)
    _, s, Vt = np.linalg.svd(X - mean, full_matrices=False)
    var = s**2 / max(X.shape[0] - 1, 1)
    return DynamicBasisPCA(mean, Vt[:n_components].T.copy(), var[:n_components].copy())


def pca_encode(basis: DynamicBasisPCA, data: np.ndarray) -> np.ndarray:
    return (np.asarray(data, dtype=np.float64) - basis.mean) @ basis.components


def pca_decode(basis: DynamicBasisPCA, codes: np.ndarray) -> np.ndarray:
    return basis.mean + np.asarray(codes, dtype=np.float64) @ basis.components.T
