"""Python smoke tests for the lobeseg extension module."""

import struct

import numpy as np
import pytest

import lobeseg


@pytest.fixture(scope="module")
def phantom():
    spec = lobeseg.default_phantom_spec(grid_edge=32, seed=7)
    vol, labels, spacing = lobeseg.generate_phantom(spec)
    return spec, vol, labels, spacing


def test_phantom_shapes_and_partition(phantom):
    _, vol, labels, spacing = phantom
    assert vol.shape == (32, 32, 32)
    assert labels.shape == (32, 32, 32)
    assert vol.dtype == np.float32
    assert labels.dtype == np.uint8
    assert len(spacing) == 3
    # labels partition the grid under the 8-class vocabulary
    assert labels.max() <= 7
    counts = np.bincount(labels.ravel(), minlength=8)
    assert counts.sum() == 32**3
    assert all(counts[c] > 0 for c in range(8))


def test_phantom_determinism(phantom):
    spec, vol, labels, _ = phantom
    vol2, labels2, _ = lobeseg.generate_phantom(spec)
    assert np.array_equal(vol, vol2)
    assert np.array_equal(labels, labels2)


def test_disease_modes(phantom):
    _, vol, labels, _ = phantom
    dv, dl = lobeseg.apply_disease(vol, labels, "copd", 0.5, seed=3)
    lung = (dl >= 1) & (dl <= 5)
    stats = lobeseg.emphysema_stats(dv, lung.astype(np.uint8), threshold_hu=-950.0)
    assert 5.0 <= stats["percent_laa"] <= 25.0
    # severity zero is the identity
    sv, sl = lobeseg.apply_disease(vol, labels, "collapse", 0.0, seed=3)
    assert np.array_equal(sv, vol) and np.array_equal(sl, labels)


def test_preprocess_case(phantom):
    _, vol, labels, _ = phantom
    inp, main_oh, aux_oh = lobeseg.preprocess_case(vol, labels, target_edge=16)
    assert inp.shape == (1, 1, 16, 16, 16)
    assert main_oh.shape == (1, 6, 16, 16, 16)
    assert aux_oh.shape == (1, 3, 16, 16, 16)
    assert np.allclose(main_oh.sum(axis=1), 1.0)
    assert np.allclose(aux_oh.sum(axis=1), 1.0)
    # normalized input is roughly standardized
    assert abs(float(inp.mean())) < 0.5


def test_clip_zscore_resample():
    vol = np.array([[[-1200.0, 500.0, 37.0]]], dtype=np.float32)
    clipped = lobeseg.clip_hu(vol)
    assert clipped.tolist() == [[[-1000.0, 400.0, 37.0]]]

    z = lobeseg.zscore(np.array([[[0.0, 2.0]]], dtype=np.float32))
    assert np.allclose(z, [[[-1.0, 1.0]]], atol=1e-6)

    const = np.full((4, 4, 4), 7.0, dtype=np.float32)
    r = lobeseg.resample(const, 8, 8, 8, "trilinear")
    assert np.allclose(r, 7.0)

    labels = np.random.default_rng(1).integers(0, 8, (5, 5, 5)).astype(np.uint8)
    near = lobeseg.resample_labels(labels, 9, 9, 9)
    assert set(np.unique(near)) <= set(np.unique(labels))


def test_dice_values():
    onehot = np.zeros((2, 2, 2, 2), dtype=np.float32)
    onehot[1] = 1.0
    probs = np.full((2, 2, 2, 2), 0.5, dtype=np.float32)
    dice = lobeseg.dice_per_class(probs, onehot)
    assert dice[1] == pytest.approx(0.8, abs=1e-4)
    assert lobeseg.dice_loss(onehot, onehot) == pytest.approx(0.0, abs=1e-12)

    pred = np.zeros((4, 4, 4), dtype=np.uint8)
    gt = np.zeros((4, 4, 4), dtype=np.uint8)
    pred[:2] = 1
    gt[1:3] = 1
    expected = 2 * 16 / (32 + 32)
    assert lobeseg.hard_dice(pred, gt, 1) == pytest.approx(expected)


def test_t_test_matches_scipy():
    scipy_stats = pytest.importorskip("scipy.stats")
    rng = np.random.default_rng(5)
    a = rng.normal(0.9, 0.05, 10).tolist()
    b = rng.normal(0.85, 0.07, 10).tolist()
    ours = lobeseg.t_test(a, b, paired=True)
    ref = scipy_stats.ttest_rel(a, b)
    assert ours["t"] == pytest.approx(ref.statistic, abs=1e-9)
    assert ours["p"] == pytest.approx(ref.pvalue, abs=1e-9)

    ours_w = lobeseg.t_test(a, b, paired=False)
    ref_w = scipy_stats.ttest_ind(a, b, equal_var=False)
    assert ours_w["t"] == pytest.approx(ref_w.statistic, abs=1e-9)
    assert ours_w["p"] == pytest.approx(ref_w.pvalue, abs=1e-9)


def test_model_forward(phantom):
    _, vol, labels, _ = phantom
    config = {
        "input_size": 16,
        "depth": 2,
        "base_channels": 2,
        "main_classes": 6,
        "aux_classes": 3,
        "seed": 3,
    }
    model = lobeseg.Model(config)
    assert model.parameter_count > 0

    inp, _, _ = lobeseg.preprocess_case(vol, labels, target_edge=16)
    main, aux = model.forward(inp)
    assert main.shape == (1, 6, 16, 16, 16)
    assert aux.shape == (1, 3, 16, 16, 16)
    assert np.allclose(main.sum(axis=1), 1.0, atol=1e-5)
    assert np.allclose(aux.sum(axis=1), 1.0, atol=1e-5)


def test_native_volume_roundtrip(tmp_path, phantom):
    _, vol, labels, _ = phantom
    vp = str(tmp_path / "v.vlbv")
    lobeseg.write_volume(vp, vol)
    back, kind = lobeseg.read_volume(vp)
    assert kind == "hu"
    assert np.array_equal(back, vol)

    lp = str(tmp_path / "l.vlbv")
    lobeseg.write_volume(lp, labels)
    lback, lkind = lobeseg.read_volume(lp)
    assert lkind == "labels"
    assert np.array_equal(lback, labels)


def test_nifti_reader(tmp_path):
    header = bytearray(352)
    struct.pack_into("<i", header, 0, 348)
    struct.pack_into("<8h", header, 40, 3, 4, 4, 4, 1, 1, 1, 1)
    struct.pack_into("<h", header, 70, 16)  # f32
    struct.pack_into("<h", header, 72, 32)
    struct.pack_into("<8f", header, 76, 1.0, 1.5, 1.5, 2.0, 0, 0, 0, 0)
    struct.pack_into("<f", header, 108, 352.0)
    struct.pack_into("<f", header, 112, 1.0)     # scl_slope
    struct.pack_into("<f", header, 116, -1024.0)  # scl_inter
    header[344:348] = b"n+1\x00"
    payload = np.arange(64, dtype=np.float32).tobytes()

    path = tmp_path / "t.nii"
    path.write_bytes(bytes(header) + payload)
    vol, spacing = lobeseg.read_nifti1(str(path))
    assert vol.shape == (4, 4, 4)
    assert spacing == (2.0, 1.5, 1.5)
    assert vol.ravel()[24] == pytest.approx(24.0 - 1024.0)


def test_gradcheck_smoke():
    worst = max(lobeseg.gradcheck(seeds=1).values())
    assert worst < 1e-4
