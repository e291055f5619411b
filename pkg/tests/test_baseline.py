import numpy as np
import pytest

from silgrad import baseline as bl
from silgrad import corrector, se3


def truth_params(store, i):
    pose, _ = se3.transform_to_euler(store.base_true)
    return np.concatenate([pose.as_vector(), store.q_true_vis[i]])


def test_config_validation():
    with pytest.raises(ValueError):
        bl.BaselineConfig(max_iterations=0)
    with pytest.raises(ValueError):
        bl.BaselineConfig(step_size=0.0)
    with pytest.raises(ValueError):
        bl.BaselineConfig(loss_threshold=-1.0)


def test_init_at_truth_terminates_first_iteration(tiny_store):
    store = tiny_store
    i = 5
    theta, iters, loss, failed = bl.optimize_frame(
        store.scene, truth_params(store, i), store.masks_ref[i],
        store.keypoints[i], store.q_true_full[i, :3], bl.BaselineConfig())
    assert iters == 1
    assert not failed
    assert loss <= bl.default_threshold(store.scene.camera)


def test_iteration_cap_honored(tiny_store):
    store = tiny_store
    cfg = bl.BaselineConfig(max_iterations=7, loss_threshold=1e-9)
    theta, iters, loss, failed = bl.optimize_frame(
        store.scene, store.theta_noisy[0], store.masks_ref[0],
        store.keypoints[0], store.q_first3[0], cfg)
    assert iters == 7


def test_best_so_far_never_worse_than_init(tiny_store):
    store = tiny_store
    cfg = bl.BaselineConfig(max_iterations=30)
    for i in (0, 9, 17):
        init = store.theta_noisy[i]
        alpha, thr = cfg.resolve(store.scene.camera)
        init_loss, _ = bl._loss_and_grad(store.scene, init, store.q_first3[i],
                                         store.masks_ref[i].astype(float),
                                         store.keypoints[i], alpha, cfg.beta)
        theta, iters, loss, failed = bl.optimize_frame(
            store.scene, init, store.masks_ref[i], store.keypoints[i],
            store.q_first3[i], cfg)
        assert loss <= init_loss + 1e-12


def test_rejects_nonfinite_init(tiny_store):
    store = tiny_store
    bad = store.theta_noisy[0].copy()
    bad[2] = np.nan
    with pytest.raises(ValueError):
        bl.optimize_frame(store.scene, bad, store.masks_ref[0], store.keypoints[0],
                          store.q_first3[0], bl.BaselineConfig())


def test_local_convergence_translation_only(tiny_store):
    # noiseless frame perturbed 5 mm in translation: recover to < 1 mm
    store = tiny_store
    i = 3
    true = truth_params(store, i)
    init = true.copy()
    init[3:6] += np.array([0.003, -0.003, 0.002])
    cfg = bl.BaselineConfig(max_iterations=400, loss_threshold=0.0)
    theta, iters, loss, failed = bl.optimize_frame(
        store.scene, init, store.masks_ref[i], store.keypoints[i],
        store.q_true_full[i, :3], cfg)
    err = np.linalg.norm(theta[3:6] - true[3:6])
    assert err < 1e-3, f"residual translation error {err*1000:.2f} mm"


def test_track_trajectory_zero_noise_single_iterations(scene64, tmp_path):
    from silgrad import synth
    ds = synth.generate_dataset(tmp_path / "z", "val", 1, 1.0, seed=4,
                                scene=scene64, noise=synth.NoiseSpec.zero())
    store = corrector.build_frame_store(ds)
    thetas, iters, losses, flags = bl.track_trajectory(
        store.scene, store.theta_noisy, store.q_noisy_full, store.masks_ref,
        store.keypoints, bl.BaselineConfig())
    assert np.all(iters == 1)
    assert not flags.any()


def test_track_trajectory_warm_start_front_loaded(tiny_store):
    store = tiny_store
    sel = store.traj_of == 0
    thetas, iters, losses, flags = bl.track_trajectory(
        store.scene, store.theta_noisy[sel], store.q_noisy_full[sel],
        store.masks_ref[sel], store.keypoints[sel], bl.BaselineConfig())
    assert iters[0] > iters[1:].mean()
    assert iters[1:].mean() < bl.BaselineConfig().max_iterations / 4
    thr = bl.default_threshold(store.scene.camera)
    assert (losses <= thr).mean() >= 0.9


def test_warm_start_reduces_total_iterations(tiny_store):
    store = tiny_store
    sel = np.flatnonzero(store.traj_of == 0)[:20]
    cfg = bl.BaselineConfig()
    _, warm_iters, _, _ = bl.track_trajectory(
        store.scene, store.theta_noisy[sel], store.q_noisy_full[sel],
        store.masks_ref[sel], store.keypoints[sel], cfg)
    cold_total = 0
    for i in sel:
        _, it, _, _ = bl.optimize_frame(store.scene, store.theta_noisy[i],
                                        store.masks_ref[i], store.keypoints[i],
                                        store.q_first3[i], cfg)
        cold_total += it
    assert warm_iters.sum() < cold_total
