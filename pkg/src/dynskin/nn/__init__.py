"""Small deterministic neural-network kernel with hand-written gradients."""

from .checkpoint import load_checkpoint, make_rng, restore_rng, rng_state, save_checkpoint
from .gradcheck import grad_check, numeric_grad, relative_error
from .layers import BatchNorm, Conv1d, ConvTranspose1d, Dense, Module, ShapeError, Tanh, conv_out_len
from .lstm import LSTM, LstmState, sigmoid
from .optim import Adam, SGDMomentum, adam_step, sgd_momentum_step

__all__ = [
    "Adam", "BatchNorm", "Conv1d", "ConvTranspose1d", "Dense", "LSTM", "LstmState", "Module", "SGDMomentum",
    "ShapeError", "Tanh", "adam_step", "conv_out_len", "grad_check", "load_checkpoint", "make_rng",
    "numeric_grad", "relative_error", "restore_rng", "rng_state", "save_checkpoint", "sgd_momentum_step",
    "sigmoid",
]
