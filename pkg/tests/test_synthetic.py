import dataclasses

import numpy as np
import pytest

from dynskin import synthetic as sw
from dynskin.body_model import extract_dynamic_offset, pose_mesh, save_bundle, shape_blend
from dynskin.io import file_sha256


def test_same_seed_gives_byte_identical_bundles(small_config, tmp_path):
    a = save_bundle(sw.gen_template(small_config), tmp_path / "a")
    b = save_bundle(sw.gen_template(small_config), tmp_path / "b")
    assert file_sha256(a.with_suffix(".json")) == file_sha256(b.with_suffix(".json"))
    assert file_sha256(a.with_suffix(".bin")) == file_sha256(b.with_suffix(".bin"))


def test_different_seed_changes_shape_space(small_config):
    other = sw.gen_template(dataclasses.replace(small_config, seed=4))
    base = sw.gen_template(small_config)
    assert not np.allclose(other.shape_basis.components, base.shape_basis.components)


def test_no_shape_components(small_config):
    m = sw.gen_template(dataclasses.replace(small_config, n_shape_pcs=0))
    assert m.shape_basis.components.shape == (3 * m.n_verts, 0)
    np.testing.assert_array_equal(shape_blend(m.shape_basis, np.zeros(0)), m.shape_basis.mean)


@pytest.mark.parametrize("n", [16, 50, 120, 600, 1001])
def test_weights_are_a_partition_of_unity(small_config, n):
    m = sw.gen_template(dataclasses.replace(small_config, n_verts=n))
    np.testing.assert_allclose(m.weights.sum(axis=1), 1.0, atol=1e-9)
    assert m.weights.min() >= 0


def test_shape_components_orthonormal(small_model):
    C = small_model.shape_basis.components
    np.testing.assert_allclose(C.T @ C, np.eye(C.shape[1]), atol=1e-12)


@pytest.mark.parametrize("bad", [dict(n_verts=8), dict(n_joints=1), dict(n_joints=12), dict(n_shape_pcs=-1),
                                 dict(fps=0.0)])
def test_degenerate_config_rejected(bad):
    with pytest.raises(ValueError):
        sw.gen_template(sw.SyntheticConfig(**bad))


def test_config_dict_roundtrip():
    c = sw.SyntheticConfig(n_verts=200, softness_coupling=sw.SoftnessCoupling(base=0.5))
    assert sw.SyntheticConfig.from_dict(c.to_dict()) == c


def test_still_motion_is_rest_pose():
    seq = sw.gen_motion("still", 7)
    assert seq.poses.shape == (7, 21)
    assert not seq.poses.any()


def test_unknown_motion_kind():
    with pytest.raises(ValueError):
        sw.gen_motion("moonwalk", 10)
    with pytest.raises(ValueError):
        sw.gen_motion("hop", 0)


@pytest.mark.parametrize("kind", sw.MOTION_KINDS)
def test_motion_is_deterministic_and_starts_at_rest(kind):
    a = sw.gen_motion(kind, 90, seed=5)
    b = sw.gen_motion(kind, 90, seed=5)
    np.testing.assert_array_equal(a.poses, b.poses)
    np.testing.assert_allclose(a.poses[0], 0.0, atol=1e-12)


def test_motion_is_smooth():
    p = sw.gen_motion("jumping_jack", 240).poses
    # second differences at 60 fps stay small relative to the signal: no kinks
    assert np.abs(np.diff(p, 2, axis=0)).max() < 0.05


def test_hop_root_height_peaks_at_hop_frequency():
    y = sw.gen_motion("hop", 120, fps=60.0).poses[:, 1]
    spec = np.abs(np.fft.rfft(y - y.mean()))
    freqs = np.fft.rfftfreq(120, 1 / 60)
    assert freqs[np.argmax(spec)] == pytest.approx(sw.DEFAULT_FREQ["hop"])


def test_softness_coupling_ratios():
    c = sw.SoftnessCoupling()
    s = [c.softness([b, 0.0]) for b in (0.0, 1.0, 2.0)]
    np.testing.assert_allclose(np.array(s) / s[0], [1.0, 2.0, 4.0], rtol=1e-12)
    beta = c.beta_for_softness(4.0, 3)
    assert c.softness(beta) == pytest.approx(4.0)


def test_still_motion_from_rest_has_no_offsets(small_model, small_tissue):
    _, off = sw.simulate_soft_tissue(small_model, small_tissue, np.zeros(4), sw.gen_motion("still", 30))
    assert not off.offsets.any()


def test_still_motion_decays_initial_perturbation(small_model, small_tissue):
    zeta = small_tissue.coupling.damping_ratio
    tau = 1.0 / (zeta * np.sqrt(small_tissue.stiffness)).min()
    T = int(np.ceil(5 * tau * 60)) + 1
    amp = 1e-3
    _, off = sw.simulate_soft_tissue(small_model, small_tissue, np.zeros(4), sw.gen_motion("still", T),
                                     initial_offset=np.full(small_model.n_verts, amp))
    assert np.abs(off.offsets[-1]).max() < amp * np.exp(-5)


def test_zero_softness_matches_static_model(small_model, small_config):
    cfg = dataclasses.replace(small_config, softness_coupling=sw.SoftnessCoupling(base=0.0))
    tissue = sw.tissue_model(small_model, cfg)
    beta = np.array([0.2, -0.1, 0.0, 0.1])
    motion = sw.gen_motion("hop", 40)
    mesh, off = sw.simulate_soft_tissue(small_model, tissue, beta, motion)
    assert not off.offsets.any()
    for t in range(0, 40, 13):
        np.testing.assert_array_equal(mesh.frames[t], pose_mesh(small_model, beta, motion.poses[t]))


def test_doubling_softness_increases_amplitude(small_model, small_tissue):
    motion = sw.gen_motion("hop", 150)
    rms = []
    for b0 in (0.0, 1.0):
        _, off = sw.simulate_soft_tissue(small_model, small_tissue, np.array([b0, 0, 0, 0.0]), motion)
        rms.append(np.sqrt(np.mean(off.offsets**2)))
    assert rms[1] > rms[0] > 0


def test_oracle_extraction_recovers_offsets(small_model, small_tissue):
    beta = np.array([0.5, 0.1, -0.2, 0.0])
    motion = sw.gen_motion("run_in_place", 60, seed=2)
    mesh, off = sw.simulate_soft_tissue(small_model, small_tissue, beta, motion)
    for t in range(0, 60, 7):
        d = extract_dynamic_offset(small_model, mesh.frames[t], beta, motion.poses[t])
        assert np.abs(d - off.offsets[t]).max() < 1e-6


@pytest.mark.parametrize("kind", ["hop", "jumping_jack", "run_in_place", "shake_hips"])
def test_offsets_bounded_by_static_response(small_model, small_tissue, kind):
    beta = np.zeros(4)
    motion = sw.gen_motion(kind, 150)
    _, off = sw.simulate_soft_tissue(small_model, small_tissue, beta, motion)
    peak = np.linalg.norm(off.offsets.reshape(150, -1, 3), axis=2).max(axis=0)
    F = sw.forcing_amplitude(small_model, small_tissue, beta, motion)
    bound = F * small_tissue.coupling.softness(beta) * small_tissue.flesh / small_tissue.stiffness
    assert np.all(peak <= 3.0 * bound + 1e-15)


def test_unstable_integration_raises(small_model, small_tissue):
    # h * omega well above 2 puts symplectic Euler outside its stability region
    stiff = dataclasses.replace(small_tissue, stiffness=np.full_like(small_tissue.stiffness, 1e6),
                                damping=np.zeros_like(small_tissue.damping))
    with pytest.raises(sw.SimulationDivergenceError):
        sw.simulate_soft_tissue(small_model, stiff, np.zeros(4), sw.gen_motion("hop", 200))


def test_joint_accelerations_of_parabola():
    t = np.arange(10) / 60.0
    pos = np.stack([0.5 * 3.0 * t**2, np.zeros(10), t], axis=1)[:, None, :]
    acc = sw.joint_accelerations(pos, 60.0)
    np.testing.assert_allclose(acc[:, 0, 0], 3.0, rtol=1e-9)
    np.testing.assert_allclose(acc[:, 0, 2], 0.0, atol=1e-9)


def test_sequence_files_roundtrip(small_model, small_tissue, tmp_path):
    motion = sw.gen_motion("shake_hips", 20)
    mesh, off = sw.simulate_soft_tissue(small_model, small_tissue, np.zeros(4), motion, "s0")
    sw.save_mesh_sequence(mesh, tmp_path / "m")
    sw.save_offset_sequence(off, tmp_path / "o")
    sw.save_pose_sequence(motion, tmp_path / "p")
    m2 = sw.load_mesh_sequence(tmp_path / "m")
    o2 = sw.load_offset_sequence(tmp_path / "o")
    p2 = sw.load_pose_sequence(tmp_path / "p")
    # frames are stored as 32-bit floats; a second save must reproduce the bytes
    np.testing.assert_array_equal(m2.frames, mesh.frames.astype(np.float32))
    np.testing.assert_array_equal(o2.offsets, off.offsets.astype(np.float32))
    np.testing.assert_array_equal(p2.poses, motion.poses)
    assert (m2.subject_id, m2.motion_id, m2.fps) == ("s0", "shake_hips", 60.0)
    sw.save_mesh_sequence(m2, tmp_path / "m2")
    assert file_sha256(tmp_path / "m.bin") == file_sha256(tmp_path / "m2.bin")


def test_amass_npz_reader(tmp_path):
    rng = np.random.default_rng(0)
    np.savez(tmp_path / "clip.npz", trans=rng.normal(size=(5, 3)), poses=rng.normal(size=(5, 156)),
             mocap_framerate=100.0)
    seq = sw.load_amass_npz(tmp_path / "clip.npz", n_joints=6)
    assert seq.poses.shape == (5, 21) and seq.fps == 100.0 and seq.motion_id == "clip"
