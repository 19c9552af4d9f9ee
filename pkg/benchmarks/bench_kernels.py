"""Numba vs pure-numpy timings for the hot kernels.

Usage: python benchmarks/bench_kernels.py [--repeats N] [--json out.json]
"""

from __future__ import annotations

import argparse
import json
import time

import numpy as np

from dynskin import _kernels, registration
from dynskin import synthetic as sw
from dynskin.body_model import model_transforms


def _time(fn, repeats: int) -> float:
    fn()  # warm-up (and JIT compile on the numba side)
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats * 1e3


def main(argv=None) -> dict:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeats", type=int, default=200)
    p.add_argument("--n-verts", type=int, default=600)
    p.add_argument("--json")
    args = p.parse_args(argv)
    if not _kernels.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    cfg = sw.SyntheticConfig(n_verts=args.n_verts)
    model = sw.gen_template(cfg)
    tissue = sw.tissue_model(model, cfg)
    rng = np.random.default_rng(0)
    beta = rng.normal(0, 0.3, model.n_betas)
    theta = rng.normal(0, 0.3, model.pose_dim)
    rest, _, A = model_transforms(model, beta, theta)
    W = model.weights
    posed = _kernels.skin_np(W, A, rest)
    g_out = rng.normal(size=posed.shape)
    T = 300
    forcing = rng.normal(size=(T, model.n_verts))
    q0 = np.zeros(model.n_verts)
    h = 1.0 / 60.0
    k, c, m = tissue.stiffness, tissue.damping, tissue.flesh
    target = posed + rng.normal(0, 0.002, posed.shape)
    args_nb = (model.template, model.shape_basis.mean, model.shape_basis.components, model.joint_regressor,
               model.parents, model.weights, model.pose_basis.components)

    cases = {
        "skin": (lambda: _kernels.skin_np(W, A, rest), lambda: _kernels.skin_nb(W, A, rest)),
        "skin_grad": (lambda: _kernels.skin_grad_np(W, A, rest, g_out),
                      lambda: _kernels.skin_grad_nb(W, A, rest, g_out)),
        "unskin": (lambda: _kernels.unskin_np(W, A, posed), lambda: _kernels.unskin_nb(W, A, posed)),
        "oscillators_T300": (lambda: _kernels.integrate_oscillators_np(forcing, k, c, m, h, q0, q0),
                             lambda: _kernels.integrate_oscillators_nb(forcing, k, c, m, h, q0, q0)),
        "alignment_objective": (
            lambda: registration._alignment_objective_np(model, beta, theta, target),
            lambda: _kernels.alignment_nb(*args_nb, beta, theta, target, True),
        ),
    }
    report = {}
    print(f"{'kernel':<22}{'numpy ms':>12}{'numba ms':>12}{'speed-up':>10}")
    for name, (f_np, f_nb) in cases.items():
        a = _time(f_np, args.repeats)
        b = _time(f_nb, args.repeats)
        report[name] = {"numpy_ms": a, "numba_ms": b, "speedup": a / b}
        print(f"{name:<22}{a:>12.4f}{b:>12.4f}{a / b:>10.1f}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(report, fh, indent=2)
    return report


if __name__ == "__main__":
    main()
