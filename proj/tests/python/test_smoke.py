import json

import numpy as np
import pytest

import distilseg


def test_zero_field_warp_is_identity():
    rng = np.random.default_rng(0)
    v = rng.random((6, 7, 8))
    f = np.zeros((3, 6, 7, 8))
    assert np.array_equal(distilseg.warp_volume(v, f), v)
    lab = rng.integers(0, 3, size=(6, 7, 8), dtype=np.int32)
    assert np.array_equal(distilseg.warp_labels(lab, f, 3), lab)


def test_constant_shift_moves_content():
    v = np.zeros((4, 4, 8))
    v[:, :, 5] = 1.0
    f = np.zeros((3, 4, 4, 8))
    f[2] = 1.0
    out = distilseg.warp_volume(v, f)
    assert np.allclose(out[:, :, 4], 1.0)
    assert np.allclose(out[:, :, 5], 0.0)


def test_loss_identities():
    rng = np.random.default_rng(1)
    v = rng.random((9, 9, 9)) * 10
    assert distilseg.local_cc_loss(v, 2 * v + 1, window=3) == pytest.approx(-1.0, abs=1e-6)
    assert distilseg.diffusion(np.full((3, 5, 5, 5), 0.7)) == 0.0
    z, y, x = np.meshgrid(np.arange(5.0), np.arange(5.0), np.arange(5.0), indexing="ij")
    affine = np.stack([0.1 * x + 0.2 * y, 0.3 * z, -0.05 * x + 1.0])
    assert abs(distilseg.bending_energy(affine)) < 1e-10
    assert distilseg.ncc(v, 3 * v - 2) == pytest.approx(1.0, abs=1e-12)
    layers = [rng.random((2, 3, 3, 3)), rng.random((4, 2, 2, 2))]
    assert distilseg.hint_loss(layers, layers, k=2) == pytest.approx(0.0, abs=1e-12)


def test_metrics():
    a = np.zeros((5, 5, 8), dtype=np.int32)
    b = np.zeros_like(a)
    a[2, 2, 1] = 1
    b[2, 2, 4] = 1
    assert distilseg.dice(a, a, 1) == 1.0
    assert distilseg.dice(a, b, 1) == 0.0
    assert distilseg.hd95(a, b, 1) == pytest.approx(3.0)
    assert distilseg.hd95(a, b, 1, spacing=(1.0, 1.0, 2.0)) == pytest.approx(6.0)
    assert distilseg.hd95(a, np.zeros_like(a), 1) is None


def test_errors_map_to_python_exceptions():
    with pytest.raises(ValueError):
        distilseg.warp_volume(np.zeros((4, 4, 4)), np.zeros((3, 4, 4, 5)))
    with pytest.raises(distilseg.ValidationError):
        distilseg.ncc(np.ones((4, 4, 4)), np.ones((4, 4, 4)))


def test_small_pipeline_and_student_only_inference(tmp_path):
    manifest = distilseg.make_toy(str(tmp_path / "toy"), seed=2, num_volumes=3, num_test=2, size=16, deform=1.5)
    cfg = {
        "manifest": str(manifest),
        "output_dir": str(tmp_path / "out"),
        "plots": False,
        "reg_net": {"encoder_channels": [4, 8], "decoder_channels": [8, 4], "num_stages": 2, "embedding_dim": 8},
        "reg_loss": {"cc_window": 5},
        "reg_optim": {"epochs": 1, "learning_rate": 1e-3},
        "distill": {"epochs": 1, "stage_widths": [4, 6], "num_stages": 1},
    }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    res = distilseg.run(str(path))
    assert 0.0 <= res["mean_dsc"] <= 1.0
    report = open(res["report_path"]).read()
    assert report.startswith("# distilseg evaluation report")

    student = tmp_path / "out" / "run" / "distill" / "student.ckpt"
    rng = np.random.default_rng(3)
    preds = distilseg.infer(str(student), [rng.random((16, 16, 16))])
    assert preds[0].shape == (16, 16, 16)
    assert preds[0].dtype == np.int32
    assert set(np.unique(preds[0])) <= {0, 1, 2, 3}
