"""Recurrent predictor of per-frame latent dynamic-offset codes.

Per frame the input is the shape vector concatenated with the pose vector.
It passes through a linear dense layer, a tanh dense layer, one LSTM layer,
batch normalization and a final linear dense layer that emits the latent
code, which the autoencoder decodes to a rest-space offset.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .autoencoder import OffsetAutoencoder, TrainingDivergence
from .body_model import BodyModel, pose_mesh
from .synthetic import MeshSequence

log = logging.getLogger(__name__)

SEQ_LEN = 300


@dataclass(frozen=True)
class DsnetConfig:
    n_betas: int = 4
    pose_dim: int = 21
    latent_dim: int = 16
    dense1: int = 16
    dense2: int = 32
    hidden: int = 16
    dtype: str = "f8"

    @property
    def input_dim(self) -> int:
        return self.n_betas + self.pose_dim

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "f4" else np.float64

    @classmethod
    def reference_scale(cls, **kw) -> "DsnetConfig":
        return cls(n_betas=10, pose_dim=69, latent_dim=100, dense1=64, dense2=128, hidden=60, **kw)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class InputScaler:
    """Affine standardization of the (beta, pose) input rows.

    Every feature is centred on its own mean.  The scale is shared within a
    group of features, so a feature that barely moves in the training data
    (for instance a joint axis that only carries registration residue) stays
    small instead of being blown up to unit variance.
    """

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def identity(cls, dim: int) -> "InputScaler":
        return cls(np.zeros(dim), np.ones(dim))

    @classmethod
    def fit(cls, rows: np.ndarray, groups=None) -> "InputScaler":
        """``groups`` lists consecutive group widths; ``None`` scales each feature alone."""
        rows = np.asarray(rows, dtype=np.float64)
        std = rows.std(axis=0)
        if groups is not None:
            if sum(groups) != rows.shape[1]:
                raise ValueError("feature groups must cover every input column")
            edges = np.cumsum([0, *groups])
            for a, b in zip(edges[:-1], edges[1:]):
                std[a:b] = np.sqrt(np.mean(std[a:b] ** 2))
        return cls(rows.mean(axis=0), np.where(std < 1e-8, 1.0, std))

    def __call__(self, x):
        return (x - self.mean) / self.std

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d) -> "InputScaler":
        return cls(np.array(d["mean"], dtype=np.float64), np.array(d["std"], dtype=np.float64))


@dataclass
class StreamState:
    lstm: nn.LstmState
    frame: int = 0


def uniformize_sequence(x: np.ndarray, target_len: int = SEQ_LEN) -> tuple[np.ndarray, np.ndarray]:
    """Clip to the first ``target_len`` frames or zero-pad at the end.

    Returns the (target_len, ...) array and a boolean mask of real frames.
    """
    x = np.asarray(x)
    if x.shape[0] < 1:
        raise ValueError("sequence must have at least one frame")
    T = min(x.shape[0], target_len)
    out = np.zeros((target_len,) + x.shape[1:], dtype=x.dtype)
    out[:T] = x[:T]
    mask = np.zeros(target_len, dtype=bool)
    mask[:T] = True
    return out, mask


def dsnet_loss(pred: np.ndarray, target: np.ndarray, mask: np.ndarray | None = None,
               need_grad: bool = False):
    """Sum over frames of the Euclidean distance between codes.

    Accepts (T, L) or (batch, T, L); batched input is averaged over the
    batch.  With ``need_grad`` returns ``(loss, dloss/dpred)``.
    """
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} differ in shape")
    batched = pred.ndim == 3
    diff = pred.astype(np.float64) - target
    norms = np.sqrt(np.sum(diff * diff, axis=-1))
    w = np.ones(norms.shape) if mask is None else np.asarray(mask, dtype=np.float64).reshape(norms.shape)
    scale = 1.0 / pred.shape[0] if batched else 1.0
    loss = float(np.sum(norms * w) * scale)
    if not need_grad:
        return loss
    safe = np.where(norms > 0, norms, 1.0)
    grad = diff * (w * scale / safe)[..., None]
    grad[norms == 0] = 0.0
    return loss, grad


class DSNet(nn.Module):
    def __init__(self, config: DsnetConfig, seed: int = 0, scaler: InputScaler | None = None):
        super().__init__()
        self.config = config
        c = config
        dt = c.np_dtype
        rng = nn.make_rng(seed)
        self.scaler = scaler or InputScaler.identity(c.input_dim)
        self.fc1 = self.add_child("fc1", nn.Dense(c.input_dim, c.dense1, "linear", rng, dt))
        self.fc2 = self.add_child("fc2", nn.Dense(c.dense1, c.dense2, "tanh", rng, dt))
        self.lstm = self.add_child("lstm", nn.LSTM(c.dense2, c.hidden, rng, dt))
        self.bn = self.add_child("bn", nn.BatchNorm(c.hidden, dtype=dt))
        self.fc3 = self.add_child("fc3", nn.Dense(c.hidden, c.latent_dim, "linear", rng, dt))

    def make_inputs(self, beta, thetas) -> np.ndarray:
        """(T, pose_dim) poses + shape vector -> scaled (T, B + pose_dim) rows."""
        c = self.config
        thetas = np.asarray(thetas, dtype=np.float64)
        beta = np.asarray(beta, dtype=np.float64)
        if beta.shape != (c.n_betas,):
            raise nn.ShapeError(f"beta must have length {c.n_betas}")
        if thetas.ndim != 2 or thetas.shape[1] != c.pose_dim:
            raise nn.ShapeError(f"poses must be (T, {c.pose_dim})")
        rows = np.concatenate([np.broadcast_to(beta, (thetas.shape[0], c.n_betas)), thetas], axis=1)
        return self.scaler(rows).astype(c.np_dtype)

    def forward(self, x: np.ndarray, train: bool = False, mask: np.ndarray | None = None) -> np.ndarray:
        """(batch, T, input_dim) already-scaled rows -> (batch, T, L)."""
        h = self.fc2.forward(self.fc1.forward(x))
        h, _ = self.lstm.forward(h)
        h = self.bn.forward(h, train=train, mask=mask)
        return self.fc3.forward(h)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        g = self.bn.backward(self.fc3.backward(dy))
        g, _ = self.lstm.backward(g)
        return self.fc1.backward(self.fc2.backward(g))

    def forward_sequence(self, beta, thetas) -> np.ndarray:
        """Inference over a whole sequence: (T, pose_dim) -> (T, L) float64."""
        x = self.make_inputs(beta, thetas)[None]
        return self.forward(x, train=False)[0].astype(np.float64)

    # ---- streaming -------------------------------------------------------------

    def init_stream(self) -> StreamState:
        return StreamState(self.lstm.zero_state(1, self.config.np_dtype), 0)

    def predict_stream(self, state: StreamState | None, beta, theta) -> tuple[np.ndarray, StreamState]:
        if state is None:
            raise ValueError("stream state is not initialized; call init_stream()")
        x = self.make_inputs(beta, np.asarray(theta, dtype=np.float64)[None])
        h = self.fc2.forward(self.fc1.forward(x))
        h, lstm_state = self.lstm.step(h, state.lstm)
        h = self.bn.forward(h, train=False)
        out = self.fc3.forward(h)[0].astype(np.float64)
        return out, StreamState(lstm_state, state.frame + 1)


def make_targets(ae: OffsetAutoencoder, offsets: np.ndarray) -> np.ndarray:
    """Encode every offset frame with the frozen autoencoder, (T, 3N) -> (T, L).

    Frames are encoded one at a time: BLAS summation order depends on the
    batch size, and a target code should not depend on its neighbours.
    """
    offsets = np.atleast_2d(np.asarray(offsets, dtype=np.float64))
    return np.stack([ae.encode(row) for row in offsets])


def predict_offset(net: DSNet, ae: OffsetAutoencoder, state: StreamState, beta, theta):
    code, state = net.predict_stream(state, beta, theta)
    return ae.decode(code), state


def predict_offsets(net: DSNet, ae: OffsetAutoencoder, beta, thetas) -> np.ndarray:
    """Decoded offsets for a whole sequence, (T, 3N)."""
    return ae.decode(net.forward_sequence(beta, thetas))


def pose_with_dynamics(model: BodyModel, net: DSNet | None, ae: OffsetAutoencoder | None, beta, thetas,
                       fps: float = 60.0, subject_id: str = "", motion_id: str = "") -> MeshSequence:
    """Skin every frame with the predicted offset; ``net=None`` gives the static model."""
    thetas = np.asarray(thetas, dtype=np.float64)
    offs = None if net is None else predict_offsets(net, ae, beta, thetas)
    frames = np.stack([pose_mesh(model, beta, thetas[t], None if offs is None else offs[t])
                       for t in range(thetas.shape[0])])
    return MeshSequence(frames, fps, subject_id, motion_id)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class DsnetTrainSettings:
    epochs: int = 100
    batch_size: int = 16
    learning_rate: float = 1e-4
    seq_len: int = SEQ_LEN
    mask_padding: bool = False
    seed: int = 0


@dataclass
class SequenceExample:
    beta: np.ndarray
    poses: np.ndarray  # (T, pose_dim)
    codes: np.ndarray  # (T, L)


@dataclass
class DsnetTrainer:
    net: DSNet
    inputs: np.ndarray  # (S, seq_len, input_dim) scaled
    targets: np.ndarray  # (S, seq_len, L)
    masks: np.ndarray  # (S, seq_len)
    settings: DsnetTrainSettings
    optimizer: nn.Adam = None
    rng: np.random.Generator = None
    history: list = field(default_factory=list)
    epoch: int = 0

    @classmethod
    def create(cls, config: DsnetConfig, examples: list[SequenceExample],
               settings: DsnetTrainSettings = DsnetTrainSettings()) -> "DsnetTrainer":
        if not examples:
            raise ValueError("no training sequences")
        rows = np.concatenate([np.concatenate([np.broadcast_to(e.beta, (len(e.poses), len(e.beta))), e.poses], 1)
                               for e in examples])
        groups = (config.n_betas, 3, config.pose_dim - 3)  # shape, root translation, joint rotations
        net = DSNet(config, seed=settings.seed, scaler=InputScaler.fit(rows, groups))
        inputs, targets, masks = _pack(net, examples, settings.seq_len)
        tr = cls(net, inputs, targets, masks, settings, nn.Adam(net, settings.learning_rate),
                 nn.make_rng(settings.seed))
        tr.history.append({"epoch": 0, "train_loss": tr.evaluate()})
        return tr

    def _loss_mask(self, idx):
        return self.masks[idx] if self.settings.mask_padding else None

    def evaluate(self) -> float:
        """Mean per-sequence loss with inference-mode normalization."""
        pred = self.net.forward(self.inputs, train=False)
        return dsnet_loss(pred, self.targets, self.masks if self.settings.mask_padding else None)

    def run(self, epochs: int, log_every: int = 0) -> list:
        bs = self.settings.batch_size
        S = self.inputs.shape[0]
        best = (self.history[-1]["train_loss"], {k: v.copy() for k, v in self.net.state_dict().items()})
        for _ in range(epochs):
            self.epoch += 1
            order = self.rng.permutation(S)
            total = 0.0
            for s in range(0, S, bs):
                idx = order[s : s + bs]
                self.net.zero_grad()
                mask = self._loss_mask(idx)
                if len(idx) * self.inputs.shape[1] < 2:
                    continue
                pred = self.net.forward(self.inputs[idx], train=True, mask=mask)
                loss, grad = dsnet_loss(pred, self.targets[idx], mask, need_grad=True)
                if not np.isfinite(loss):
                    self.net.load_state_dict(best[1])
                    raise TrainingDivergence(f"non-finite loss at epoch {self.epoch}; restored best epoch")
                self.net.backward(grad.astype(pred.dtype))
                self.optimizer.step()
                total += loss * len(idx)
            rec = {"epoch": self.epoch, "train_loss": total / S}
            self.history.append(rec)
            if rec["train_loss"] < best[0]:
                best = (rec["train_loss"], {k: v.copy() for k, v in self.net.state_dict().items()})
            if log_every and self.epoch % log_every == 0:
                log.info("dsnet epoch %d loss %.4e", self.epoch, rec["train_loss"])
        return self.history

    def save(self, path) -> Path:
        extra_meta = {
            "kind": "dsnet",
            "scaler": self.net.scaler.to_dict(),
            "settings": asdict(self.settings),
            "epoch": self.epoch,
            "history": self.history,
        }
        return nn.save_checkpoint(path, self.net, self.net.config.to_dict(), self.optimizer, self.rng, extra_meta)

    @classmethod
    def resume(cls, path, examples: list[SequenceExample]) -> "DsnetTrainer":
        meta, _, opt, _ = nn.load_checkpoint(path)
        net = load_dsnet(path)
        settings = DsnetTrainSettings(**meta["extra"]["settings"])
        inputs, targets, masks = _pack(net, examples, settings.seq_len)
        optimizer = nn.Adam(net, settings.learning_rate)
        optimizer.load_state(meta["optimizer"], opt)
        return cls(net, inputs, targets, masks, settings, optimizer, nn.restore_rng(meta["rng"]),
                   list(meta["extra"]["history"]), int(meta["extra"]["epoch"]))


def _pack(net: DSNet, examples: list[SequenceExample], seq_len: int):
    ins, tgs, mks = [], [], []
    for e in examples:
        if len(e.poses) != len(e.codes):
            raise ValueError("poses and codes must have the same frame count")
        x, m = uniformize_sequence(np.concatenate(
            [np.broadcast_to(e.beta, (len(e.poses), len(e.beta))), e.poses], axis=1), seq_len)
        y, _ = uniformize_sequence(e.codes, seq_len)
        # padded frames are zero before scaling, as the clip/pad rule states
        xs = net.scaler(x)
        xs[~m] = net.scaler(np.zeros((1, x.shape[1])))
        ins.append(xs)
        tgs.append(y)
        mks.append(m)
    dt = net.config.np_dtype
    return np.stack(ins).astype(dt), np.stack(tgs).astype(dt), np.stack(mks)


def train_dsnet(config: DsnetConfig, examples: list[SequenceExample],
                settings: DsnetTrainSettings = DsnetTrainSettings()) -> DsnetTrainer:
    tr = DsnetTrainer.create(config, examples, settings)
    tr.run(settings.epochs)
    return tr


def load_dsnet(path) -> DSNet:
    meta, params, _, _ = nn.load_checkpoint(path)
    net = DSNet(DsnetConfig(**meta["spec"]), scaler=InputScaler.from_dict(meta["extra"]["scaler"]))
    net.load_state_dict(params)
    return net


def write_loss_csv(history: list, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss"])
        for h in history:
            w.writerow([h["epoch"], repr(float(h["train_loss"]))])
    tmp.replace(path)
