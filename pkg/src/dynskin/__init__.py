"""Body-model skinning with learned soft-tissue dynamics.

Submodules are imported on demand so that the command-line entry point can
configure threading before numpy and numba load.
"""

__version__ = "0.1.0"

__all__ = [
    "autoencoder", "body_model", "cli", "dsnet", "io", "metrics", "nn", "preprocess", "registration",
    "rotations", "synthetic",
]
