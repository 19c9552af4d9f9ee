"""Command-line pipeline: synthesize, fit, train, predict, evaluate, benchmark.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("dynskin")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

DEFAULTS = {
    "synth": {
        "n_verts": 600, "n_joints": 6, "n_shape_pcs": 4, "fps": 60.0,
        "softness": [1.0, 2.0, 4.0],
        "motions": ["hop", "jumping_jack", "run_in_place"],
        "n_frames": 150,
    },
    "registration": {},
    "ae": {"latent_dim": 16, "epochs": 50, "batch_size": 64, "learning_rate": 1e-4, "train_fraction": 0.7},
    "dsnet": {"dense1": 16, "dense2": 32, "hidden": 16, "epochs": 3000, "batch_size": 16, "learning_rate": 1e-4,
              "seq_len": 300},
    "bench": {"frames": 300, "warmup": 30},
}


def load_config(path: str | None) -> dict:
    cfg = json.loads(json.dumps(DEFAULTS))
    if path:
        try:
            user = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise DataError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file is not valid JSON: {exc}") from exc
        for section, values in user.items():
            if section not in cfg or not isinstance(values, dict):
                raise UsageError(f"unknown config section {section!r}")
            cfg[section].update(values)
    return cfg


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def _dtype(args) -> str:
    return "f4" if args.precision == "f32" else "f8"


def _write_json(path: Path, obj) -> None:
    from .io import atomic_write_text, dump_json

    atomic_write_text(path, dump_json(obj))


def _read_json(path: Path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise DataError(f"missing file: {path}") from exc


def _require(path, what: str) -> Path:
    p = Path(path)
    if not (p.exists() or p.with_suffix(".json").exists()):
        raise DataError(f"{what} not found: {path}")
    return p


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth_gen(args, cfg) -> int:
    import numpy as np

    from . import synthetic as sw
    from .body_model import save_bundle

    sc = cfg["synth"]
    seed = args.seed if args.seed is not None else sc.get("seed", 0)
    config = sw.SyntheticConfig(n_verts=sc["n_verts"], n_joints=sc["n_joints"], n_shape_pcs=sc["n_shape_pcs"],
                                seed=seed, fps=sc["fps"])
    config.validate()
    model = sw.gen_template(config)
    tissue = sw.tissue_model(model, config)
    out = Path(args.out)
    save_bundle(model, out / "model")
    rng = np.random.Generator(np.random.Philox(seed))
    subjects, sequences = [], []
    for si, softness in enumerate(sc["softness"]):
        beta = config.softness_coupling.beta_for_softness(float(softness), model.n_betas)
        others = np.arange(model.n_betas) != config.softness_coupling.beta_index
        beta[others] = rng.normal(0.0, 0.3, size=int(others.sum()))
        sid = f"s{si:02d}"
        subjects.append({"subject_id": sid, "softness": float(softness), "beta": beta.tolist()})
        for mi, kind in enumerate(sc["motions"]):
            poses = sw.gen_motion(kind, int(sc["n_frames"]), config.fps, seed=seed * 1000 + 10 * si + mi,
                                  n_joints=model.n_joints)
            mesh, offs = sw.simulate_soft_tissue(model, tissue, beta, poses, subject_id=sid)
            name = f"{sid}__{kind}"
            sw.save_mesh_sequence(mesh, out / "meshes" / name)
            sw.save_offset_sequence(offs, out / "offsets" / name)
            sw.save_pose_sequence(poses, out / "poses" / name)
            sequences.append({
                "subject_id": sid, "motion_id": kind, "n_frames": len(mesh), "name": name,
                "mesh_sha256": sw.sequence_hash(mesh.frames.astype("<f4")),
            })
    manifest = {"format": "dynskin.dataset/1", "config": config.to_dict(), "synth": sc, "subjects": subjects,
                "sequences": sequences}
    manifest["manifest_hash"] = config_hash(manifest)
    _write_json(out / "manifest.json", manifest)
    print(f"wrote {len(sequences)} sequences to {out} (manifest {manifest['manifest_hash'][:12]})")
    return EXIT_OK


def _load_dataset(path):
    from . import synthetic as sw
    from .body_model import load_bundle

    root = _require(path, "dataset")
    manifest = _read_json(root / "manifest.json")
    model = load_bundle(root / "model")
    seqs = [sw.load_mesh_sequence(root / "meshes" / e["name"]) for e in manifest.get("sequences", [])]
    return root, manifest, model, seqs


def cmd_fit(args, cfg) -> int:
    from . import registration as rg

    _, manifest, model, seqs = _load_dataset(args.dataset)
    if not seqs:
        raise DataError("dataset contains no sequences")
    settings = rg.OptimizerSettings(**cfg["registration"])
    results, fit_manifest = rg.build_training_pairs(model, seqs, settings)
    if not results:
        raise DataError("every sequence failed to fit")
    fit_manifest["dataset_manifest_hash"] = manifest.get("manifest_hash")
    out = Path(args.out)
    rg.save_pair_store(results, fit_manifest, out)
    _write_json(out / "fit_manifest.json", fit_manifest)
    for e in fit_manifest["sequences"]:
        if e["status"] == "ok":
            print(f"{e['subject_id']}/{e['motion_id']}: mean residual {e['mean_residual']:.3e} m")
        else:
            print(f"{e['subject_id']}/{e['motion_id']}: FAILED {e['error']}")
    return EXIT_OK


def _load_pairs(path):
    from .registration import load_pair_store

    root = _require(path, "pair store")
    results = load_pair_store(root)
    if not results:
        raise DataError("pair store is empty")
    return root, results


def cmd_train_ae(args, cfg) -> int:
    import numpy as np

    from . import autoencoder as A

    _, results = _load_pairs(args.pairs)
    data = np.concatenate([r.offsets for r in results], axis=0)
    ac = dict(cfg["ae"])
    seed = args.seed if args.seed is not None else ac.pop("seed", 0)
    ac.pop("seed", None)
    train_keys = ("epochs", "batch_size", "learning_rate", "train_fraction")
    settings = A.AeTrainSettings(**{k: ac.pop(k) for k in train_keys if k in ac}, seed=seed)
    out = Path(args.out)
    if args.resume:
        trainer = A.AeTrainer.resume(args.resume, data)
    else:
        config = A.AeConfig(n_verts=data.shape[1] // 3, dtype=_dtype(args), **ac)
        trainer = A.AeTrainer.create(config, data, settings)
    trainer.run(max(0, settings.epochs - trainer.epoch), log_every=10)
    trainer.save(out / "ae")
    A.write_loss_csv(trainer.history, out / "ae_loss.csv")
    h = trainer.history[-1]
    print(f"ae epoch {h['epoch']}: train {h['train_loss']:.4e} val {h['val_loss']:.4e}")
    return EXIT_OK


def cmd_train_dsnet(args, cfg) -> int:
    from . import dsnet as D
    from .autoencoder import load_autoencoder

    pairs_root, results = _load_pairs(args.pairs)
    ae = load_autoencoder(_require(args.ae, "autoencoder checkpoint"))
    examples = [D.SequenceExample(r.beta, r.poses, D.make_targets(ae, r.offsets)) for r in results]
    dc = dict(cfg["dsnet"])
    seed = args.seed if args.seed is not None else dc.pop("seed", 0)
    dc.pop("seed", None)
    train_keys = ("epochs", "batch_size", "learning_rate", "seq_len")
    settings = D.DsnetTrainSettings(**{k: dc.pop(k) for k in train_keys if k in dc},
                                    mask_padding=bool(args.mask_padding), seed=seed)
    out = Path(args.out)
    if args.resume:
        trainer = D.DsnetTrainer.resume(args.resume, examples)
    else:
        config = D.DsnetConfig(n_betas=len(results[0].beta), pose_dim=results[0].poses.shape[1],
                               latent_dim=ae.config.latent_dim, dtype=_dtype(args), **dc)
        trainer = D.DsnetTrainer.create(config, examples, settings)
    trainer.run(max(0, settings.epochs - trainer.epoch), log_every=100)
    trainer.save(out / "dsnet")
    D.write_loss_csv(trainer.history, out / "dsnet_loss.csv")
    from .io import load_blocks

    pair_meta, _ = load_blocks(pairs_root / "pairs")
    _write_json(out / "run_manifest.json", {
        "seed": seed,
        "config_hash": config_hash({"dsnet": cfg["dsnet"], "precision": args.precision,
                                    "mask_padding": bool(args.mask_padding)}),
        "dataset_manifest_hash": config_hash(pair_meta["manifest"]),
        "epochs": trainer.epoch,
        "final_loss": trainer.history[-1]["train_loss"],
    })
    print(f"dsnet epoch {trainer.epoch}: loss {trainer.history[-1]['train_loss']:.4e}")
    return EXIT_OK


def _parse_beta(text: str, n: int):
    import numpy as np

    try:
        beta = np.array([float(v) for v in text.split(",")]) if text else np.zeros(n)
    except ValueError as exc:
        raise UsageError(f"--beta must be comma-separated numbers: {exc}") from exc
    if beta.shape != (n,):
        raise DataError(f"--beta needs {n} values, got {beta.size}")
    return beta


def cmd_predict(args, cfg) -> int:
    import numpy as np

    from . import dsnet as D
    from . import synthetic as sw
    from .autoencoder import load_autoencoder
    from .body_model import load_bundle
    from .io import write_obj

    model = load_bundle(_require(args.model, "model bundle"))
    poses = sw.load_pose_sequence(_require(args.motion, "motion file"))
    if poses.poses.shape[1] != model.pose_dim:
        raise DataError(f"motion pose width {poses.poses.shape[1]} does not match the model ({model.pose_dim})")
    beta = _parse_beta(args.beta, model.n_betas)
    if args.no_dynamics:
        net = ae = None
    else:
        if not args.ae or not args.dsnet:
            raise UsageError("predict needs --ae and --dsnet unless --no-dynamics is given")
        ae = load_autoencoder(_require(args.ae, "autoencoder checkpoint"))
        net = D.load_dsnet(_require(args.dsnet, "dsnet checkpoint"))
    mesh = D.pose_with_dynamics(model, net, ae, beta, poses.poses, poses.fps, "", poses.motion_id)
    out = Path(args.out)
    sw.save_mesh_sequence(mesh, out / "meshes")
    offs = np.zeros((len(mesh), 3 * model.n_verts)) if net is None else D.predict_offsets(net, ae, beta, poses.poses)
    sw.save_offset_sequence(sw.OffsetSequence(offs, poses.fps, "", poses.motion_id), out / "offsets")
    every = max(1, int(args.obj_every))
    for t in range(0, len(mesh), every):
        write_obj(out / "obj" / f"frame_{t:05d}.obj", mesh.frames[t], model.faces)
    faces_hash = hashlib.sha256(np.ascontiguousarray(model.faces, dtype="<i8").tobytes()).hexdigest()
    _write_json(out / "predict.json", {"n_frames": len(mesh), "dynamics": net is not None, "beta": beta.tolist(),
                                       "faces_sha256": faces_hash})
    print(f"wrote {len(mesh)} frames to {out}")
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    from . import metrics
    from . import synthetic as sw

    pred = sw.load_mesh_sequence(_require(args.pred, "prediction"))
    truth = sw.load_mesh_sequence(_require(args.truth, "ground truth"))
    base = sw.load_mesh_sequence(_require(args.baseline, "baseline")).frames if args.baseline else None
    try:
        report = metrics.evaluate(pred.frames, truth.frames, base)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    metrics.write_report(report, args.out)
    s = report.summary()
    print(f"mean {s['mean_cm']:.4f} cm, max {s['max_cm']:.4f} cm over {s['n_frames']} frames")
    return EXIT_OK


def run_bench(model, net, ae, frames: int = 300, warmup: int = 30, seed: int = 0) -> dict:
    """Per-frame latency of stream prediction + decode + skinning, warm-up excluded."""
    import numpy as np

    from . import synthetic as sw
    from .body_model import pose_mesh

    poses = sw.gen_motion("run_in_place", frames + warmup, 60.0, seed=seed, n_joints=model.n_joints).poses
    beta = np.zeros(model.n_betas)
    state = net.init_stream()
    times = []
    for t in range(frames + warmup):
        t0 = time.perf_counter()
        code, state = net.predict_stream(state, beta, poses[t])
        offset = ae.decode(code)
        pose_mesh(model, beta, poses[t], offset)
        dt = time.perf_counter() - t0
        if t >= warmup:
            times.append(dt)
    ms = np.array(times) * 1e3
    return {
        "frames": frames, "warmup": warmup,
        "mean_ms": float(ms.mean()), "p50_ms": float(np.percentile(ms, 50)),
        "p90_ms": float(np.percentile(ms, 90)), "p99_ms": float(np.percentile(ms, 99)),
        "max_ms": float(ms.max()), "budget_ms": 1000.0 / 60.0,
    }


def cmd_bench(args, cfg) -> int:
    from . import dsnet as D
    from . import synthetic as sw
    from .autoencoder import AeConfig, Normalizer, OffsetAutoencoder, load_autoencoder
    from .body_model import load_bundle

    import numpy as np

    model = load_bundle(args.model) if args.model else sw.gen_template(sw.SyntheticConfig())
    if args.ae:
        ae = load_autoencoder(args.ae)
    else:
        ae = OffsetAutoencoder(AeConfig(n_verts=model.n_verts, dtype=_dtype(args)),
                               normalizer=Normalizer(-0.02 * np.ones(3), 0.02 * np.ones(3)))
    if args.dsnet:
        net = D.load_dsnet(args.dsnet)
    else:
        net = D.DSNet(D.DsnetConfig(n_betas=model.n_betas, pose_dim=model.pose_dim,
                                    latent_dim=ae.config.latent_dim, dtype=_dtype(args)))
    bc = cfg["bench"]
    frames = args.frames if args.frames is not None else bc["frames"]
    report = run_bench(model, net, ae, int(frames), int(bc["warmup"]))
    from . import _kernels

    report["backend"] = _kernels.backend()
    if args.out:
        _write_json(Path(args.out), report)
    print(f"p50 {report['p50_ms']:.3f} ms  p99 {report['p99_ms']:.3f} ms  (budget {report['budget_ms']:.1f} ms)")
    return EXIT_OK


def cmd_preprocess(args, cfg) -> int:
    from . import preprocess as pp
    from . import synthetic as sw

    if args.action == "histogram":
        lengths = []
        for p in args.inputs:
            lengths.append(len(sw.load_pose_sequence(_require(p, "motion file")).poses))
        hist = pp.motion_length_histogram(lengths, args.bucket)
        rows = [{"lo": lo, "hi": hi, "count": c} for lo, hi, c in hist]
        if args.out:
            _write_json(Path(args.out), {"buckets": rows, "total": len(lengths)})
        for r in rows:
            print(f"[{r['lo']:5d}, {r['hi']:5d}) {r['count']}")
        return EXIT_OK
    if len(args.inputs) != 1 or not args.out:
        raise UsageError(f"preprocess {args.action} takes one input and --out")
    seq = sw.load_pose_sequence(_require(args.inputs[0], "motion file"))
    if args.action == "resample":
        seq = pp.resample_sequence(seq, args.to_fps, args.from_fps)
    else:
        seq = pp.reorient_root(seq, args.from_up, args.to_up)
    sw.save_pose_sequence(seq, args.out)
    print(f"wrote {len(seq.poses)} frames at {seq.fps:g} fps to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="overrides every seed in the configuration")
    common.add_argument("--precision", choices=("f32", "f64"), default="f64", help="network float width")
    common.add_argument("--threads", type=int, help="BLAS / numba thread count")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="dynskin", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth-gen", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--out", required=True)

    s = sub.add_parser("fit", parents=[common], help="register sequences and extract offsets")
    s.add_argument("--dataset", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("train-ae", parents=[common], help="train the offset autoencoder")
    s.add_argument("--pairs", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--resume")

    s = sub.add_parser("train-dsnet", parents=[common], help="train the sequence predictor")
    s.add_argument("--pairs", required=True)
    s.add_argument("--ae", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--resume")
    s.add_argument("--mask-padding", action="store_true", help="exclude zero-padded frames from the loss")

    s = sub.add_parser("predict", parents=[common], help="pose a motion with predicted dynamics")
    s.add_argument("--model", required=True)
    s.add_argument("--motion", required=True)
    s.add_argument("--ae")
    s.add_argument("--dsnet")
    s.add_argument("--beta", default="")
    s.add_argument("--out", required=True)
    s.add_argument("--obj-every", type=int, default=1)
    s.add_argument("--no-dynamics", action="store_true", help="static model only")

    s = sub.add_parser("eval", parents=[common], help="per-vertex error report")
    s.add_argument("--pred", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--baseline")
    s.add_argument("--out", required=True)

    s = sub.add_parser("bench", parents=[common], help="per-frame latency")
    s.add_argument("--model")
    s.add_argument("--ae")
    s.add_argument("--dsnet")
    s.add_argument("--frames", type=int)
    s.add_argument("--out")

    s = sub.add_parser("preprocess", parents=[common], help="motion preprocessing utilities")
    s.add_argument("action", choices=("resample", "reorient", "histogram"))
    s.add_argument("inputs", nargs="+")
    s.add_argument("--out")
    s.add_argument("--to-fps", type=float, default=60.0)
    s.add_argument("--from-fps", type=float)
    s.add_argument("--from-up", default="z")
    s.add_argument("--to-up", default="y")
    s.add_argument("--bucket", type=int, default=50)
    return p


COMMANDS = {
    "synth-gen": cmd_synth_gen, "fit": cmd_fit, "train-ae": cmd_train_ae, "train-dsnet": cmd_train_dsnet,
    "predict": cmd_predict, "eval": cmd_eval, "bench": cmd_bench, "preprocess": cmd_preprocess,
}


def _set_threads(n: int | None) -> None:
    if n is None:
        return
    if n < 1:
        raise UsageError("--threads must be >= 1")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
        os.environ[var] = str(n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        _set_threads(args.threads)
        cfg = load_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"dynskin: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, KeyError, ValueError) as exc:
        if _is_numeric(exc):
            print(f"dynskin: numerical failure: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        print(f"dynskin: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ArithmeticError, RuntimeError) as exc:
        print(f"dynskin: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def _is_numeric(exc) -> bool:
    from .body_model import SingularSkinningError

    return isinstance(exc, SingularSkinningError)


if __name__ == "__main__":
    sys.exit(main())
