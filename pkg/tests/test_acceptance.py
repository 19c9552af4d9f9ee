"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

The heavy criteria share session fixtures: one fitted desk-scale dataset,
one trained autoencoder and one trained dynamics network.
"""

import time

import numpy as np
import pytest

from dynskin import autoencoder as A
from dynskin import body_model as bm
from dynskin import dsnet as D
from dynskin import nn
from dynskin import registration as rg
from dynskin import synthetic as sw
from dynskin.cli import run_bench
from dynskin.nn.gradcheck import relative_error
from dynskin.rotations import rodrigues
from oracles import rotation_via_quaternions
from test_body_model import random_pose, singular_rig

pytestmark = pytest.mark.acceptance

MOTIONS = ("hop", "jumping_jack", "run_in_place")
SOFT_BETA0 = (0.0, 1.0, 2.0)  # softness 1 : 2 : 4


def _subject_betas(model):
    rng = np.random.Generator(np.random.Philox(11))
    betas = []
    for b0 in SOFT_BETA0:
        beta = rng.normal(0.0, 0.3, model.n_betas)
        beta[0] = b0
        betas.append(beta)
    return betas


# ---------------------------------------------------------------------------
# shared heavy fixtures
# ---------------------------------------------------------------------------


@pytest.fixture(scope="session")
def fitted(desk_model, desk_tissue):
    """3 subjects x 3 motions x 150 frames, simulated then registered."""
    model = desk_model
    seqs, truth = [], []
    for si, beta in enumerate(_subject_betas(model)):
        for mi, kind in enumerate(MOTIONS):
            poses = sw.gen_motion(kind, 150, 60.0, seed=100 + 10 * si + mi)
            mesh, offs = sw.simulate_soft_tissue(model, desk_tissue, beta, poses, subject_id=f"s{si}")
            seqs.append(mesh)
            truth.append(offs.offsets)
    t0 = time.perf_counter()
    results, manifest = rg.build_training_pairs(model, seqs)
    return results, truth, manifest, time.perf_counter() - t0


@pytest.fixture(scope="session")
def ae_data(desk_model, desk_tissue):
    """2400 simulator offset frames: 3 softness levels x 4 motions x 200 frames."""
    offs = []
    for si, beta in enumerate(_subject_betas(desk_model)):
        for mi, kind in enumerate(MOTIONS + ("shake_hips",)):
            poses = sw.gen_motion(kind, 200, 60.0, seed=10 * si + mi)
            offs.append(sw.simulate_soft_tissue(desk_model, desk_tissue, beta, poses)[1].offsets)
    return np.concatenate(offs)


@pytest.fixture(scope="session")
def trained_ae(ae_data):
    t0 = time.perf_counter()
    trainer = A.AeTrainer.create(A.AeConfig(n_verts=600), ae_data, A.AeTrainSettings(epochs=60))
    trainer.run(60)
    return trainer, time.perf_counter() - t0


@pytest.fixture(scope="session")
def trained_dsnet(fitted, trained_ae):
    results = fitted[0]
    ae = trained_ae[0].ae
    examples = [D.SequenceExample(r.beta, r.poses, D.make_targets(ae, r.offsets)) for r in results]
    settings = D.DsnetTrainSettings(epochs=3000, learning_rate=1e-4, mask_padding=True)
    t0 = time.perf_counter()
    trainer = D.DsnetTrainer.create(D.DsnetConfig(), examples, settings)
    trainer.run(3000)
    return trainer.net, time.perf_counter() - t0


# ---------------------------------------------------------------------------
# 1-3: body model and rotations
# ---------------------------------------------------------------------------


def test_criterion_01_skinning_identity(accept):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(20):
        config = sw.SyntheticConfig(n_verts=int(rng.choice([120, 240, 600])), n_joints=int(rng.choice([4, 6, 8, 11])),
                                    seed=i)
        model = sw.gen_template(config)
        beta = rng.normal(size=model.n_betas)
        rest = bm.assemble_rest_mesh(model, beta, model.zero_pose()).reshape(-1, 3)
        worst = max(worst, float(np.max(np.abs(bm.pose_mesh(model, beta, model.zero_pose()) - rest))))
    dt = time.perf_counter() - t0
    accept(1, worst <= 1e-12, f"skinning at rest pose: max abs {worst:.1e} over 20 bundles ({dt:.2f} s)")


def test_criterion_02_unposing_inverse(accept, desk_model):
    from dynskin import _kernels

    m = desk_model
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        beta, pose = rng.normal(size=m.n_betas), random_pose(rng, m.n_joints, 0.6)
        X = bm.assemble_rest_mesh(m, beta, pose).reshape(-1, 3) + rng.normal(0, 0.01, (m.n_verts, 3))
        _, _, T = bm.model_transforms(m, beta, pose)
        back = bm.unpose_mesh(m, _kernels.skin(m.weights, T, X), beta, pose)
        worst = max(worst, float(np.max(np.abs(back - X)) / np.max(np.abs(X))))
    rig, spose = singular_rig()
    try:
        bm.unpose_mesh(rig, bm.pose_mesh(rig, np.zeros(0), spose), np.zeros(0), spose)
        raised = False
    except bm.SingularSkinningError:
        raised = True
    dt = time.perf_counter() - t0
    accept(2, worst < 1e-9 and raised,
           f"unpose round trip rel err {worst:.1e}, singular blend raises: {raised} ({dt:.2f} s)")


def test_criterion_03_rodrigues_vs_quaternions(accept):
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    rs = rng.normal(size=(1000, 3)) * rng.uniform(0, np.pi, (1000, 1))
    worst = max(float(np.max(np.abs(rodrigues(r) - rotation_via_quaternions(r)))) for r in rs)
    dt = time.perf_counter() - t0
    accept(3, worst < 1e-12, f"Rodrigues vs quaternion oracle: max abs {worst:.1e} over 1000 ({dt:.2f} s)")


# ---------------------------------------------------------------------------
# 4: gradients
# ---------------------------------------------------------------------------


def _layer_error(layer, x, rng, forward=None, backward=None):
    forward = forward or layer.forward
    backward = backward or layer.backward
    R = rng.normal(size=forward(x).shape)

    def loss_and_grads():
        layer.zero_grad()
        y = forward(x)
        dx = backward(R)
        grads = {k: g.copy() for k, _, g in layer.named_params()}
        grads["x"] = dx
        return float(np.sum(R * y)), grads

    arrays = {k: p for k, p, _ in layer.named_params()}
    arrays["x"] = x
    return nn.grad_check(loss_and_grads, arrays, h=1e-5)["max_error"]


def _bptt_error(rng):
    lstm = nn.LSTM(3, 4, rng=rng)
    lstm.params["b"][...] = rng.normal(size=16)
    x = rng.normal(size=(2, 5, 3))
    h0, c0 = rng.normal(size=(2, 4)), rng.normal(size=(2, 4))
    R = rng.normal(size=(2, 5, 4))

    def loss_and_grads():
        lstm.zero_grad()
        hs, _ = lstm.forward(x, nn.LstmState(h0, c0))
        dx, d0 = lstm.backward(R)
        g = {k: gr.copy() for k, _, gr in lstm.named_params()}
        g.update(x=dx, h0=d0.h, c0=d0.c)
        return float(np.sum(R * hs)), g

    arrays = {k: p for k, p, _ in lstm.named_params()}
    arrays.update(x=x, h0=h0, c0=c0)
    return nn.grad_check(loss_and_grads, arrays, h=1e-5)["max_error"]


def _ae_error(rng):
    ae = A.OffsetAutoencoder(A.AeConfig(n_verts=20, latent_dim=3, vertex_widths=(3, 4), channels=3, n_conv=2,
                                        dtype="f8"), seed=2)
    for _, p, _ in ae.named_params():
        if p.ndim == 1:
            p[...] = rng.normal(0, 0.1, p.shape)
    x = rng.uniform(-1, 1, (2, 60))

    def loss_and_grads():
        ae.zero_grad()
        loss = ae.reconstruction_loss(x)
        return loss, {k: g.copy() for k, _, g in ae.named_params()}

    return nn.grad_check(loss_and_grads, {k: p for k, p, _ in ae.named_params()}, h=1e-5)["max_error"]


def _dsnet_error(rng):
    net = D.DSNet(D.DsnetConfig(n_betas=2, pose_dim=6, latent_dim=3, dense1=4, dense2=5, hidden=3), seed=2)
    x = rng.normal(size=(3, 4, 8))
    target = rng.normal(size=(3, 4, 3))
    mask = np.ones((3, 4), dtype=bool)
    mask[1, 2:] = False

    def loss_and_grads():
        net.zero_grad()
        loss, g = D.dsnet_loss(net.forward(x, train=True, mask=mask), target, mask, need_grad=True)
        dx = net.backward(g)
        grads = {k: gr.copy() for k, _, gr in net.named_params()}
        grads["x"] = dx
        return loss, grads

    arrays = {k: p for k, p, _ in net.named_params()}
    arrays["x"] = x
    return nn.grad_check(loss_and_grads, arrays, h=1e-5)["max_error"]


def _registration_error(model, rng):
    B = model.n_betas
    worst = 0.0
    for _ in range(10):
        beta, theta = rng.normal(0, 0.4, B), rng.normal(0, 0.4, model.pose_dim)
        target = bm.pose_mesh(model, rng.normal(0, 0.4, B), rng.normal(0, 0.4, model.pose_dim))
        _, gb, gt = rg.alignment_objective(model, beta, theta, target)
        num = rg.numeric_gradient(lambda z: rg.alignment_objective(model, z[:B], z[B:], target, False),
                                  np.concatenate([beta, theta]), h=1e-5)
        worst = max(worst, relative_error(np.concatenate([gb, gt]), num))
    return worst


def test_criterion_04_gradients(accept, small_model):
    rng = np.random.default_rng(4)
    t0 = time.perf_counter()
    errors = {}
    for act in ("linear", "tanh"):
        d = nn.Dense(5, 4, act, rng=rng)
        d.params["b"][...] = rng.normal(size=4)
        errors[f"dense/{act}"] = _layer_error(d, rng.normal(size=(3, 5)), rng)
    c = nn.Conv1d(3, 4, 4, 2, 1, rng=rng)
    c.params["b"][...] = rng.normal(size=4)
    errors["conv"] = _layer_error(c, rng.normal(size=(2, 3, 10)), rng)
    ct = nn.ConvTranspose1d(3, 2, 4, 2, 1, rng=rng)
    ct.params["b"][...] = rng.normal(size=2)
    errors["conv_transpose"] = _layer_error(ct, rng.normal(size=(2, 3, 5)), rng)
    bn = nn.BatchNorm(3)
    bn.params["gamma"][...] = rng.normal(size=3)
    bn.params["beta"][...] = rng.normal(size=3)
    errors["batchnorm"] = _layer_error(bn, rng.normal(size=(4, 5, 3)), rng,
                                       forward=lambda x: bn.forward(x, train=True))
    errors["lstm_bptt_5"] = _bptt_error(rng)
    errors["autoencoder"] = _ae_error(rng)
    errors["dsnet"] = _dsnet_error(rng)
    errors["registration"] = _registration_error(small_model, rng)
    worst = max(errors.values())
    dt = time.perf_counter() - t0
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errors.items())
    accept(4, worst < 1e-4, f"max rel err {worst:.1e} ({detail}) ({dt:.1f} s)")


# ---------------------------------------------------------------------------
# 5: registration recovers the injected offsets
# ---------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_05_fit_recovers_offsets(accept, fitted):
    results, truth, manifest, dt = fitted
    ok_count = sum(e["status"] == "ok" for e in manifest["sequences"])
    errs = [A.per_vertex_error(r.offsets, t).mean() for r, t in zip(results, truth)]
    mean_mm = float(np.mean(errs)) * 1e3
    accept(5, ok_count == 9 and mean_mm < 1.0,
           f"{ok_count}/9 sequences fitted, mean per-vertex offset error {mean_mm:.3f} mm "
           f"(worst sequence {max(errs) * 1e3:.3f} mm) ({dt:.0f} s)")


# ---------------------------------------------------------------------------
# 6-7: autoencoder
# ---------------------------------------------------------------------------


def _offset_rms(X):
    return float(np.sqrt(np.mean(np.sum(X.reshape(len(X), -1, 3) ** 2, -1))))


@pytest.mark.slow
def test_criterion_06_autoencoder_learning(accept, ae_data, trained_ae):
    trainer, dt = trained_ae
    h = trainer.history
    rms = _offset_rms(ae_data)
    err = float(A.per_vertex_error(trainer.ae.reconstruct(ae_data), ae_data).mean())
    t0 = time.perf_counter()
    full = A.AeTrainer.create(A.AeConfig.full_capacity(600), ae_data, A.AeTrainSettings(epochs=12))
    full.run(12)
    dt_full = time.perf_counter() - t0
    full_mse = full.history[-1]["val_loss"]
    ok = h[50]["val_loss"] < h[1]["val_loss"] and err < 0.1 * rms and full_mse < 1e-4
    accept(6, ok,
           f"{len(ae_data)} frames: val MSE epoch 1 {h[1]['val_loss']:.2e} -> epoch 50 {h[50]['val_loss']:.2e}; "
           f"error/RMS {err / rms:.3f}; full-capacity val MSE {full_mse:.1e} ({dt + dt_full:.0f} s)")


@pytest.mark.slow
def test_autoencoder_code_separation(accept, ae_data, trained_ae):
    ae = trained_ae[0].ae
    norms = np.linalg.norm(ae_data, axis=1)
    loud, quiet = ae_data[np.argmax(norms)], ae_data[np.argmin(norms)]
    noise = 0.01 * _offset_rms(ae_data) / np.sqrt(3)  # 1% of the per-vertex RMS, split over axes
    rng = np.random.default_rng(6)
    code = ae.encode(loud)
    floor = max(float(np.linalg.norm(ae.encode(loud + rng.normal(0, noise, loud.shape)) - code))
                for _ in range(20))
    dist = float(np.linalg.norm(code - ae.encode(quiet)))
    accept(6, dist > 10 * floor, f"code separation {dist:.3e} vs 10x noise floor {10 * floor:.3e}")


def test_criterion_07_parameter_budget(accept):
    ae = A.OffsetAutoencoder(A.AeConfig.reference_scale(), seed=0)
    ratio = A.param_count(ae) / A.fc_baseline_param_count()
    accept(7, ratio < 0.12, f"{A.param_count(ae)} / {A.fc_baseline_param_count()} = {ratio:.4f}")


# ---------------------------------------------------------------------------
# 8-11: dynamics network contracts
# ---------------------------------------------------------------------------


def test_criterion_08_loss_oracle(accept):
    rng = np.random.default_rng(8)
    pred, target = rng.normal(size=(50, 16)), rng.normal(size=(50, 16))
    naive = 0.0
    for t in range(50):
        naive += float(np.sqrt(sum((pred[t, j] - target[t, j]) ** 2 for j in range(16))))
    diff = abs(D.dsnet_loss(pred, target) - naive)
    five = D.dsnet_loss(np.array([[3.0, 4.0]]), np.zeros((1, 2)))
    accept(8, diff < 1e-12 and five == 5.0, f"loss vs naive sum diff {diff:.1e}; (3, 4) frame gives {five!r}")


def test_criterion_09_uniformization(accept):
    rng = np.random.default_rng(9)
    ok = True
    for T in (200, 300, 350):
        x = rng.normal(size=(T, 5))
        out, mask = D.uniformize_sequence(x)
        n = min(T, 300)
        ok &= out.shape == (300, 5) and mask.shape == (300,)
        ok &= bool(np.array_equal(out[:n], x[:n]) and not out[n:].any())
        ok &= bool(mask[:n].all() and not mask[n:].any())
    accept(9, ok, "lengths 200, 300, 350 map to 300 with exact pad, clip and mask")


def test_criterion_10_streaming_equivalence(accept):
    rng = np.random.default_rng(10)
    net = D.DSNet(D.DsnetConfig(), seed=10)
    beta, thetas = rng.normal(size=4), rng.normal(0, 0.4, (50, 21))
    batched = net.forward_sequence(beta, thetas)
    state = net.init_stream()
    streamed = []
    for t in range(50):
        code, state = net.predict_stream(state, beta, thetas[t])
        streamed.append(code)
    diff = float(np.max(np.abs(np.stack(streamed) - batched)))
    accept(10, diff < 1e-12, f"streaming vs batched over 50 frames: max abs {diff:.1e}")


def test_criterion_11_causality(accept):
    rng = np.random.default_rng(11)
    net = D.DSNet(D.DsnetConfig(), seed=11)
    beta, thetas = rng.normal(size=4), rng.normal(0, 0.4, (40, 21))
    base = net.forward_sequence(beta, thetas)
    ok = True
    for t in (0, 10, 25, 38):
        mutated = thetas.copy()
        mutated[t + 1 :] = rng.normal(0, 0.4, mutated[t + 1 :].shape)
        ok &= bool(np.array_equal(net.forward_sequence(beta, mutated)[: t + 1], base[: t + 1]))
    accept(11, ok, "mutating later frames leaves earlier predictions bit-identical")


# ---------------------------------------------------------------------------
# 12-14: trained dynamics network
# ---------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_12_end_to_end_learning_signal(accept, desk_model, desk_tissue, trained_ae, trained_dsnet):
    model, ae = desk_model, trained_ae[0].ae
    net, dt = trained_dsnet
    betas = _subject_betas(model)
    err, base = [], []
    for si, beta in enumerate(betas):
        for mi, kind in enumerate(MOTIONS):
            # unseen seed and a 10% faster rhythm
            poses = sw.gen_motion(kind, 150, 60.0, seed=999 + 10 * si + mi, freq=sw.DEFAULT_FREQ[kind] * 1.1)
            truth = sw.simulate_soft_tissue(model, desk_tissue, beta, poses)[0].frames
            pred = D.pose_with_dynamics(model, net, ae, beta, poses.poses).frames
            static = D.pose_with_dynamics(model, None, None, beta, poses.poses).frames
            err.append(A.per_vertex_error(pred, truth).mean())
            base.append(A.per_vertex_error(static, truth).mean())
    probe = sw.gen_motion("hop", 150, 60.0, seed=4242).poses
    rms = [float(np.sqrt(np.mean(D.predict_offsets(net, ae, b, probe) ** 2))) for b in betas]
    err_mm, base_mm = float(np.mean(err)) * 1e3, float(np.mean(base)) * 1e3
    increasing = rms[0] < rms[1] < rms[2]
    accept(12, err_mm < base_mm and increasing,
           f"held-out error {err_mm:.3f} mm vs static {base_mm:.3f} mm; predicted RMS at softness 1:2:4 = "
           f"{', '.join(f'{r * 1e3:.2f}' for r in rms)} mm (training {dt:.0f} s)")


@pytest.mark.slow
def test_criterion_13_memory_property(accept, trained_dsnet):
    net = trained_dsnet[0]
    rng = np.random.default_rng(13)
    beta = np.zeros(4)
    a = rng.normal(0, 0.4, (30, 21))
    b = a.copy()
    b[:-1] = rng.normal(0, 0.4, (29, 21))
    diff = float(np.linalg.norm(net.forward_sequence(beta, a)[-1] - net.forward_sequence(beta, b)[-1]))
    accept(13, diff > 1e-8, f"equal current pose, different history: code difference {diff:.3e}")


@pytest.mark.slow
def test_criterion_14_real_time_budget(accept, desk_model, trained_ae, trained_dsnet):
    r = run_bench(desk_model, trained_dsnet[0], trained_ae[0].ae, frames=300, warmup=30)
    accept(14, r["p99_ms"] < 16.7,
           f"per-frame predict+decode+skin p50 {r['p50_ms']:.3f} ms, p99 {r['p99_ms']:.3f} ms (budget 16.7 ms)")


# ---------------------------------------------------------------------------
# 15: determinism
# ---------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_15_training_determinism(accept, ae_data):
    curves = []
    for _ in range(2):
        trainer = A.AeTrainer.create(A.AeConfig(n_verts=600), ae_data, A.AeTrainSettings(epochs=5))
        trainer.run(5)
        curves.append([(h["train_loss"], h["val_loss"]) for h in trainer.history])
    accept(15, curves[0] == curves[1], f"two 5-epoch autoencoder runs: identical curves {curves[0] == curves[1]}")
