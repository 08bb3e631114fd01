"""Acceptance checks for the whole pipeline, one printed line per criterion.

The nine criteria cover metric correctness against brute-force oracles, loss
values and gradients, architecture shape fidelity, cross-grid alignment, both
training stages on phantom data, false-positive reduction, FROC behavior, and
bit-reproducibility.  Criteria 5 and 6 train for real and take a few minutes
combined; everything else is seconds.

Run with ``pytest tests/test_acceptance.py -v`` (the [PASS]/[FAIL] lines
bypass output capture).
"""

import math
import time
from contextlib import contextmanager

import numpy as np
import pytest
from scipy import ndimage

from petsynth import losses
from petsynth.dataprep import (
    AugmentConfig,
    augment,
    extract_slices,
    prepare_pair,
    split_train_val,
)
from petsynth.detection import (
    CONNECTIVITY_26,
    DEFAULT_TH_GRID,
    Modality,
    connected_components,
    froc,
    reduce_false_positives,
    score_detection,
    suv_threshold_mask,
)
from petsynth.evaluate import evaluate_pair, to_suv
from petsynth.net import build_network, propagate_shapes
from petsynth.phantom import (
    PhantomConfig,
    generate_candidates,
    generate_phantom_pair,
    place_lesions,
)
from petsynth.training import TrainConfig, synthesize, train_cgan, train_fcn
from petsynth.volume import MALIGNANCY_SUV, Volume3D

_shared = {}  # artifacts handed from criterion 5 to criterion 6


@pytest.fixture
def announce(capsys):
    @contextmanager
    def _criterion(number: int, title: str, budget_s: float):
        t0 = time.perf_counter()
        try:
            yield
            elapsed = time.perf_counter() - t0
            assert elapsed < budget_s, (
                f"criterion {number} took {elapsed:.1f}s, budget {budget_s:.0f}s")
        except BaseException:
            with capsys.disabled():
                print(f"[FAIL] criterion {number}: {title}")
            raise
        with capsys.disabled():
            print(f"[PASS] criterion {number}: {title} ({elapsed:.2f}s)")
    return _criterion


# ---------------------------------------------------------------------------
# 1. Metric oracle equivalence
# ---------------------------------------------------------------------------

def _mae_oracle(a: np.ndarray, b: np.ndarray) -> float:
    total, n = 0.0, 0
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            for k in range(a.shape[2]):
                total += abs(float(a[i, j, k]) - float(b[i, j, k]))
                n += 1
    return total / n


def _psnr_oracle(a: np.ndarray, b: np.ndarray, peak: float = 20.0) -> float:
    total, n = 0.0, 0
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            for k in range(a.shape[2]):
                d = float(a[i, j, k]) - float(b[i, j, k])
                total += d * d
                n += 1
    mse = total / n
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def test_criterion_1_metric_oracles(announce):
    from petsynth.evaluate import mae, psnr

    with announce(1, "MAE/PSNR match brute-force oracles within 1e-9", 5.0):
        rng = np.random.default_rng(101)
        worst = 0.0
        for _ in range(100):
            a = rng.uniform(0.0, 20.0, size=(8, 8, 4)).astype(np.float32)
            b = rng.uniform(0.0, 20.0, size=(8, 8, 4)).astype(np.float32)
            va = Volume3D(a, (1, 1, 1), (0, 0, 0), Modality.SUV)
            vb = Volume3D(b, (1, 1, 1), (0, 0, 0), Modality.SUV)
            worst = max(worst, abs(mae(va, vb) - _mae_oracle(va.data, vb.data)),
                        abs(psnr(va, vb) - _psnr_oracle(va.data, vb.data)))
        assert worst <= 1e-9, f"worst oracle deviation {worst:.3e}"


# ---------------------------------------------------------------------------
# 2. Loss correctness: worked examples and finite differences
# ---------------------------------------------------------------------------

def _fd(f, x, h=1e-3):
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def test_criterion_2_loss_correctness(announce):
    with announce(2, "losses match worked examples exactly, grads match FD", 30.0):
        # weighted L2 on two voxels: mean of t*(p-t)^2
        #   = (1.0*0.25 + 0.5*0.0625) / 2 = 0.140625
        pred = np.array([0.5, 0.25])
        target = np.array([1.0, 0.5])
        assert losses.weighted_l2_loss(pred, target) == 0.140625

        # split loss, threshold 0.125: one voxel strictly above, one below,
        # each normalized by its own count of 1:
        #   high 0.25*(0.5-0.25)^2 = 0.015625; low 0.0625*(0.125-0.0625)^2
        #   = 0.000244140625; total 0.015869140625
        pred_s = np.array([0.5, 0.125])
        target_s = np.array([0.25, 0.0625])
        assert losses.split_suv_loss(pred_s, target_s, 0.125) == 0.015869140625

        # generator objective at d_fake = (0.5, 0.5): -log(0.5) + lam * split
        d_fake = np.array([[0.5, 0.5]])
        expected = float(-np.log(np.float64(0.5))) + 2.0 * 0.015869140625
        assert losses.generator_objective(pred_s, target_s, d_fake, lam=2.0,
                                          threshold=0.125) == expected

        rng = np.random.default_rng(202)
        p = rng.uniform(0.0, 1.0, size=(8, 8))
        t = rng.uniform(0.0, 1.0, size=(8, 8))
        fd = _fd(lambda: losses.weighted_l2_loss(p, t), p)
        assert np.allclose(losses.weighted_l2_grad(p, t), fd,
                           rtol=1e-4, atol=1e-7)
        fd = _fd(lambda: losses.split_suv_loss(p, t, 0.5), p)
        assert np.allclose(losses.split_suv_grad(p, t, 0.5), fd,
                           rtol=1e-4, atol=1e-7)

        def probs(n, seed):
            z = np.random.default_rng(seed).normal(size=(n, 2))
            e = np.exp(z - z.max(axis=1, keepdims=True))
            return e / e.sum(axis=1, keepdims=True)

        d_real, d_fake = probs(8, 1), probs(8, 2)
        g_real, g_fake = losses.discriminator_grads(d_real, d_fake)
        fd_real = _fd(lambda: losses.adversarial_losses(d_real, d_fake)[0], d_real)
        fd_fake = _fd(lambda: losses.adversarial_losses(d_real, d_fake)[0], d_fake)
        # only the real-class column carries gradient
        assert np.allclose(g_real, fd_real, rtol=1e-4, atol=1e-6)
        assert np.allclose(g_fake, fd_fake, rtol=1e-4, atol=1e-6)
        fd_gen = _fd(lambda: losses.adversarial_losses(d_real, d_fake)[1], d_fake)
        assert np.allclose(losses.generator_adv_grad(d_fake), fd_gen,
                           rtol=1e-4, atol=1e-6)


# ---------------------------------------------------------------------------
# 3. Architecture fidelity (symbolic shapes only)
# ---------------------------------------------------------------------------

def test_criterion_3_architecture_tables(announce):
    with announce(3, "512x512 shape propagation reproduces the layer tables", 1.0):
        s = propagate_shapes(build_network("UNetGen", 2, (512, 512), 1.0))
        assert s["conv1_2"] == (512, 512, 32)
        assert s["conv2_2"] == (256, 256, 64)
        assert s["conv3_2"] == (128, 128, 128)
        assert s["conv4_2"] == (64, 64, 256)
        assert s["conv5_2"] == (32, 32, 512)
        assert s["upsampling1"] == (64, 64, 768)
        assert s["conv6_2"] == (64, 64, 256)
        assert s["upsampling2"] == (128, 128, 384)
        assert s["conv7_2"] == (128, 128, 128)
        assert s["upsampling3"] == (256, 256, 192)
        assert s["conv8_2"] == (256, 256, 64)
        assert s["upsampling4"] == (512, 512, 96)
        assert s["conv9_2"] == (512, 512, 32)
        assert s["conv10"] == (512, 512, 1)

        d = propagate_shapes(build_network("Discriminator", 3, (512, 512), 1.0))
        assert d["conv1"] == (256, 256, 32)
        assert d["conv2"] == (128, 128, 64)
        assert d["conv3"] == (64, 64, 128)
        assert d["conv4"] == (64, 64, 256)
        assert d["dense"] == (2,)

        f = propagate_shapes(build_network("FCN4s", 1, (512, 512), 1.0))
        assert f["pool5"] == (16, 16, 512)
        assert f["fc6"] == (16, 16, 4096)
        assert f["fuse_pool4"] == (32, 32, 1)
        assert f["fuse_pool2"] == (128, 128, 1)
        assert f["upscore_final"] == (512, 512, 1)


# ---------------------------------------------------------------------------
# 4. Alignment across grids
# ---------------------------------------------------------------------------

def test_criterion_4_alignment(announce):
    with announce(4, "resampled PET lesion centroids within 1 CT voxel", 10.0):
        for seed in (0, 1, 2):
            cfg = PhantomConfig(seed=seed)
            assert cfg.pet_offset != (0.0, 0.0, 0.0)
            lesions = place_lesions(cfg)
            ct_raw, pet_raw, _ = generate_phantom_pair(cfg)
            pair = prepare_pair(ct_raw, pet_raw)
            suv = to_suv(pair.pet)
            lab, n = ndimage.label(suv.data > MALIGNANCY_SUV,
                                   structure=CONNECTIVITY_26)
            assert n >= len(lesions)
            spacing = np.asarray(cfg.ct_spacing)
            offset = np.asarray(cfg.ct_offset)
            for les in lesions:
                center_idx = (np.asarray(les.center_mm) - offset) / spacing
                comp_id = lab[tuple(np.round(center_idx).astype(int))]
                assert comp_id > 0, "no hot region at the lesion center"
                centroid = np.argwhere(lab == comp_id).mean(axis=0)
                assert (np.abs(centroid - center_idx) <= 1.0).all()


# ---------------------------------------------------------------------------
# 5 and 6. Training smoke tests (the slow part)
# ---------------------------------------------------------------------------

def _stack_slices(slices, idx):
    arr = np.stack([s[idx] for s in slices], axis=2)
    return Volume3D(arr, (1.0, 1.0, 4.0), (0.0, 0.0, 0.0), Modality.NORMALIZED)


def test_criterion_5_fcn_overfit(announce):
    with announce(5, "stage-1 training halves the loss and helps high-SUV MAE",
                  600.0):
        ct_raw, pet_raw, _ = generate_phantom_pair(PhantomConfig(seed=0))
        pair = prepare_pair(ct_raw, pet_raw, slice_range=(4, 11))
        slices = extract_slices(pair)
        assert len(slices) == 8

        base = dict(width_scale=0.25, input_size=(64, 64), augment=False, seed=0)
        untrained = train_fcn(slices, TrainConfig(max_steps=0, **base))
        state = train_fcn(slices, TrainConfig(max_steps=500, **base))

        loss = np.array([v for _, n, v in state.history if n == "loss_fcn"])
        window = 25
        smoothed = np.convolve(loss, np.ones(window) / window, mode="valid")
        assert smoothed[-1] < 0.5 * smoothed[0], (
            f"smoothed loss only fell {smoothed[-1] / smoothed[0]:.2f}x")

        ct_vol, ref = _stack_slices(slices, 0), _stack_slices(slices, 1)
        before = evaluate_pair(synthesize(ct_vol, untrained), ref)
        after = evaluate_pair(synthesize(ct_vol, state), ref)
        assert after.mae_high < before.mae_high, (
            f"high-SUV MAE {before.mae_high:.3f} -> {after.mae_high:.3f}")

        _shared.update(fcn_state=state, slices=slices, ct_vol=ct_vol, ref=ref,
                       raw_metrics=after)


def test_criterion_6_cgan_refinement(announce):
    assert "fcn_state" in _shared, "criterion 5 must pass first"
    with announce(6, "refinement keeps low-SUV MAE and does not wreck average",
                  1200.0):
        base = dict(width_scale=0.25, input_size=(64, 64), augment=False, seed=0)
        cgan_state = train_cgan(_shared["slices"], _shared["fcn_state"],
                                TrainConfig(max_steps=1600, **base))
        refined = evaluate_pair(
            synthesize(_shared["ct_vol"], _shared["fcn_state"], cgan_state),
            _shared["ref"])
        raw = _shared["raw_metrics"]
        assert refined.mae_low <= raw.mae_low, (
            f"low-SUV MAE {raw.mae_low:.3f} -> {refined.mae_low:.3f}")
        assert refined.mae_avg <= 1.2 * raw.mae_avg, (
            f"average MAE {raw.mae_avg:.3f} -> {refined.mae_avg:.3f}")


# ---------------------------------------------------------------------------
# 7. False-positive reduction, exactly
# ---------------------------------------------------------------------------

def _phantom_detection_scene(seed=7, n_false=3):
    cfg = PhantomConfig(seed=seed)
    ct_raw, pet_raw, gt = generate_phantom_pair(cfg)
    pair = prepare_pair(ct_raw, pet_raw)
    suv = to_suv(pair.pet)
    avoid = suv_threshold_mask(suv)
    cands, prob = generate_candidates(gt, n_false, avoid, seed=1)
    return gt, suv, cands, prob


def test_criterion_7_fp_reduction(announce):
    with announce(7, "SUV gating drops 3 planted FPs, keeps both lesions", 5.0):
        gt, suv, cands, _ = _phantom_detection_scene()
        gt_cands = connected_components(gt)
        assert len(gt_cands.components) == 2
        before = score_detection(cands, gt_cands)
        assert before.tpr == 1.0 and before.fpr == 3.0
        kept = reduce_false_positives(cands, suv_threshold_mask(suv))
        after = score_detection(kept, gt_cands)
        assert after.tpr == 1.0 and after.fpr == 0.0


# ---------------------------------------------------------------------------
# 8. FROC behavior across the threshold grid
# ---------------------------------------------------------------------------

def test_criterion_8_froc_properties(announce):
    with announce(8, "FROC: counts non-increasing, gating never hurts", 30.0):
        gt, suv, _, prob = _phantom_detection_scene()
        gt_cands = connected_components(gt)
        counts = []
        for th in DEFAULT_TH_GRID:
            mask = Volume3D((prob.data > th).astype(np.float32), prob.spacing,
                            prob.offset, Modality.MASK)
            counts.append(len(connected_components(mask).components))
        assert all(b <= a for a, b in zip(counts, counts[1:])), counts

        raw = froc(prob, gt_cands, suv, use_fpr_layer=False)
        red = froc(prob, gt_cands, suv, use_fpr_layer=True)
        assert [p.threshold for p in raw] == list(DEFAULT_TH_GRID)
        for p_raw, p_red in zip(raw, red):
            assert p_red.fpr <= p_raw.fpr
            assert p_red.tpr == p_raw.tpr


# ---------------------------------------------------------------------------
# 9. Bit-reproducibility of every randomized stage
# ---------------------------------------------------------------------------

def _params_equal(a: dict, b: dict) -> bool:
    if a.keys() != b.keys():
        return False
    return all(np.array_equal(a[k][n], b[k][n])
               for k in a for n in a[k])


def test_criterion_9_reproducibility(announce):
    with announce(9, "phantom, splits, augmentation, and training reproduce "
                     "bit-for-bit", 60.0):
        pa = generate_phantom_pair(PhantomConfig(seed=3))
        pb = generate_phantom_pair(PhantomConfig(seed=3))
        assert all(np.array_equal(x.data, y.data) for x, y in zip(pa, pb))

        gt = pa[2]
        avoid = gt.with_data(np.zeros(gt.dims, np.float32), Modality.MASK)
        ca, proba = generate_candidates(gt, 4, avoid, seed=9)
        cb, probb = generate_candidates(gt, 4, avoid, seed=9)
        assert np.array_equal(proba.data, probb.data)
        assert [c.score for c in ca.components] == [c.score for c in cb.components]

        rng = np.random.default_rng(77)
        img = rng.uniform(0.0, 1.0, size=(32, 32)).astype(np.float32)
        aug_cfg = AugmentConfig(seed=0)
        a1 = augment((img, img), aug_cfg, np.random.default_rng(5))
        a2 = augment((img, img), aug_cfg, np.random.default_rng(5))
        assert np.array_equal(a1[0], a2[0]) and np.array_equal(a1[1], a2[1])

        items = list(range(20))
        assert (split_train_val(items, 0.25, seed=4)
                == split_train_val(items, 0.25, seed=4))

        data = [(rng.uniform(0, 1, (16, 16)), rng.uniform(0, 1, (16, 16)))
                for _ in range(2)]
        cfg = TrainConfig(max_steps=3, width_scale=0.0625, input_size=(16, 16),
                          batch_size=2, seed=6)
        s1, s2 = train_fcn(data, cfg), train_fcn(data, cfg)
        assert _params_equal(s1.gen_params, s2.gen_params)
        assert s1.history == s2.history

        cfg2 = TrainConfig(max_steps=2, width_scale=0.0625, input_size=(16, 16),
                           batch_size=2, seed=6)
        g1, g2 = train_cgan(data, s1, cfg2), train_cgan(data, s2, cfg2)
        assert _params_equal(g1.gen_params, g2.gen_params)
        assert _params_equal(g1.disc_params, g2.disc_params)
        assert g1.history == g2.history
