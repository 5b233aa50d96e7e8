import math
import sys

import numpy as np
import pytest
import torch
from oracles import loop_fc, loop_fc_frobenius, loop_mse, loop_psnr, loop_ssim

from tablet.analysis.attribution import (attribute_frame, average_attribution, completeness_residual,
                                         integrated_gradients, select_confident)
from tablet.analysis.profiler import (PANELS, PeakMemory, ProfileRecord, is_monotone, plot_profile, profile,
                                      read_profile_csv, write_profile_csv)
from tablet.analysis.recon import (block_parcellation, correlation_matrix, fc_frobenius, psnr, recon_report,
                                   reconstruct_axes, reconstruct_three_axis_average, ssim)
from tablet.autoencoder import LosslessAutoencoder
from tablet.errors import DataError, UnsupportedBackendError
from tablet.model import BrainTransformer, ModelConfig

from conftest import ZeroDecoder


# -- PSNR / SSIM / FC ---------------------------------------------------------

def test_psnr_cases(rng):
    a = rng.uniform(-1, 1, (6, 6, 6))
    assert psnr(a, a) == math.inf
    assert psnr(np.zeros(100), np.full(100, 0.2)) == pytest.approx(20.0)
    b = a + rng.normal(0, 0.1, a.shape)
    assert psnr(a, b) == pytest.approx(loop_psnr(a, b), abs=1e-6)
    assert loop_mse(a, b) > 0


def test_ssim_cases(rng):
    a = rng.uniform(-1, 1, (8, 8))
    assert ssim(a, a) == pytest.approx(1.0)
    # checkerboard: every Gaussian window has (near) zero local mean
    z = np.indices((8, 8)).sum(0) % 2 * 2.0 - 1.0
    assert ssim(z, -z) < 0
    b = a + rng.normal(0, 0.2, a.shape)
    assert ssim(a, b) == pytest.approx(loop_ssim(a, b), abs=1e-6)


def test_ssim_3d_oracle(rng):
    a = rng.uniform(-1, 1, (9, 10, 8))
    b = np.clip(a + rng.normal(0, 0.3, a.shape), -1, 1)
    assert ssim(a, b) == pytest.approx(loop_ssim(a, b), abs=1e-6)


def test_fc_two_roi_hand_case():
    x = np.sin(np.arange(10.0))
    labels = np.array([[[1, 2]]])
    a = np.stack([x, x], axis=1).reshape(10, 1, 1, 2)
    b = np.stack([x, -x], axis=1).reshape(10, 1, 1, 2)
    assert fc_frobenius(a, a, labels) == 0.0
    assert fc_frobenius(a, b, labels) == pytest.approx(math.sqrt(8))


def test_fc_matches_loop_oracle(rng):
    labels = block_parcellation((4, 4, 4))
    a = rng.normal(size=(6, 4, 4, 4))
    b = a + rng.normal(0, 0.5, a.shape)
    assert fc_frobenius(a, b, labels) == pytest.approx(loop_fc_frobenius(a, b, labels), abs=1e-6)
    series = rng.normal(size=(7, 4))
    series[:, 2] = 3.0
    np.testing.assert_allclose(correlation_matrix(series), loop_fc(series), atol=1e-12)


def test_fc_errors():
    with pytest.raises(DataError):
        fc_frobenius(np.zeros((2, 2, 2, 2)), np.zeros((2, 2, 2, 2)), np.ones((2, 2, 2)))


def test_block_parcellation():
    labels = block_parcellation((96, 96, 96))
    assert sorted(np.unique(labels)) == list(range(1, 9))
    assert all((labels == i).sum() == 48 ** 3 for i in range(1, 9))


# -- three-axis reconstruction ---------------------------------------------------

def test_lossless_three_axis_exact(rng):
    vol = rng.uniform(-1, 1, (96, 64, 32)).astype(np.float32)
    assert np.array_equal(reconstruct_three_axis_average(vol, LosslessAutoencoder()), vol)


def test_zeroed_axis_gives_two_thirds(rng):
    vol = rng.uniform(-1, 1, (32, 32, 32)).astype(np.float32)
    ae = {"depth": LosslessAutoencoder(), "height": LosslessAutoencoder(), "width": ZeroDecoder()}
    out = exact = reconstruct_axes(vol, ae)
    assert not exact["width"].any()
    avg = np.mean([out[a].numpy().astype(np.float64) for a in out], axis=0)
    np.testing.assert_allclose(avg, 2.0 / 3.0 * vol, atol=1e-6)


# golden band from the first verified run of the toy autoencoder fixture
TOY_AVG_PSNR = 30.1
TOY_AVG_BAND = 2.0


def test_toy_three_axis_average(toy_ae, brain_scan):
    frame = brain_scan.data[1]
    per_axis = {k: psnr(v.numpy(), frame) for k, v in reconstruct_axes(frame, toy_ae).items()}
    avg = psnr(reconstruct_three_axis_average(frame, toy_ae), frame)
    assert avg >= max(per_axis.values())
    assert abs(avg - TOY_AVG_PSNR) <= TOY_AVG_BAND


def test_recon_report_lossless(brain_scan):
    labels = block_parcellation(brain_scan.spatial_shape)
    report = recon_report(brain_scan, LosslessAutoencoder(), labels)
    assert report.psnr == math.inf and report.ssim == pytest.approx(1.0) and report.fc_frobenius == 0.0
    assert report.as_row()["psnr"] == 100.0


# -- Integrated Gradients ---------------------------------------------------------

def test_ig_linear_exact():
    w = torch.randn(5, 4, dtype=torch.float64)
    x = torch.randn(5, 4, dtype=torch.float64)
    f = lambda b: (b * w).sum(dim=(1, 2))  # noqa: E731
    for method in ("riemann_left", "riemann_right", "riemann_middle", "riemann_trapezoid"):
        attr = integrated_gradients(f, x, steps=7, method=method)
        torch.testing.assert_close(attr, w * x, rtol=1e-12, atol=1e-12)


def test_ig_constant_model_zero():
    x = torch.randn(3, 3)
    attr = integrated_gradients(lambda b: b.sum(dim=(1, 2)) * 0 + 2.0, x, steps=8)
    assert not attr.any()


def _token_model():
    torch.manual_seed(1)
    model = BrainTransformer(ModelConfig(layers=2, heads=2, kv_heads=1, model_dim=16, d_token=6, T=2,
                                         tokens_per_frame=27, mlp_ratio=2.0)).double()
    torch.nn.init.normal_(model.head.weight, std=0.5)
    return model


def test_ig_refinement_converges():
    model = _token_model()
    x = torch.randn(2, 27, 6, dtype=torch.float64)
    f = lambda b: model(b)  # noqa: E731
    # the input RMSNorm is scale invariant, so a zero baseline puts a jump at the path start
    base = torch.randn(2, 27, 6, dtype=torch.float64, generator=torch.Generator().manual_seed(7))
    coarse = integrated_gradients(f, x, base, steps=64, batch_size=64)
    fine = integrated_gradients(f, x, base, steps=4096, batch_size=512)
    assert ((coarse - fine).norm() / fine.norm()).item() < 1e-3
    residuals = [completeness_residual(f, x, base, integrated_gradients(f, x, base, steps=s, batch_size=256))[0]
                 for s in (4, 64, 1024)]
    assert residuals[0] > residuals[1] > residuals[2]


def test_attribute_frame_rejects_lossless_non_differentiable():
    class Frozen(LosslessAutoencoder):
        differentiable = False

    with pytest.raises(UnsupportedBackendError):
        attribute_frame(_token_model(), Frozen(), np.zeros((32, 32, 32)))


def test_attribute_frame_negative_class_flips_sign(rng):
    torch.manual_seed(2)
    model = BrainTransformer(ModelConfig(layers=1, heads=2, kv_heads=1, model_dim=8, d_token=96 * 3072, T=1,
                                         tokens_per_frame=1, mlp_ratio=2.0))
    torch.nn.init.normal_(model.head.weight, std=0.5)
    frame = rng.uniform(-1, 1, (32, 32, 32))
    pos = attribute_frame(model, LosslessAutoencoder(), frame, steps=4, target_class=1)
    neg = attribute_frame(model, LosslessAutoencoder(), frame, steps=4, target_class=0)
    np.testing.assert_allclose(neg.data, -pos.data, rtol=1e-5, atol=1e-9)
    assert neg.target_class == 0


def test_select_confident_and_average():
    probs = [0.9, 0.2, 0.6, 0.1, 0.8]
    labels = [1, 0, 1, 1, 0]
    assert select_confident(probs, labels).tolist() == [0, 1]
    assert select_confident(probs, labels, target_class=1).tolist() == [0]
    np.testing.assert_array_equal(average_attribution([np.ones(3), 3 * np.ones(3)]), 2 * np.ones(3))


# -- profiler ------------------------------------------------------------------------

def profile_model(T):
    return BrainTransformer(ModelConfig(layers=1, heads=2, kv_heads=1, model_dim=16, d_token=64, T=T,
                                        tokens_per_frame=27, mlp_ratio=2.0))


def test_profile_in_process_monotone():
    records = profile(profile_model, [1, 2, 8], batch_size=2, steps=1, isolate=False)
    assert [r.status for r in records] == ["ok"] * 3
    assert all(r.seconds_per_step > 0 and math.isfinite(r.seconds_per_step) for r in records)
    doubled = profile(profile_model, [2], batch_size=4, steps=1, isolate=False)[0]
    assert math.isfinite(doubled.seconds_per_step / records[1].seconds_per_step)


def test_profiled_forward_is_unchanged():
    model = profile_model(2)
    torch.nn.init.normal_(model.head.weight)
    x = torch.randn(2, 2, 27, 64)
    plain = model(x)
    with PeakMemory():
        watched = model(x)
    assert torch.equal(plain, watched)


def test_profile_csv_and_plot(tmp_path):
    records = [ProfileRecord(T, 4, 10 ** 9 * (i + 1), 10 ** 8, 0.1 * (i + 1), "desk", "cpu")
               for i, T in enumerate([16, 64, 256])]
    records.append(ProfileRecord(1024, 4, None, None, None, "desk", "cpu", "oom"))
    path = write_profile_csv(records, tmp_path / "p.csv")
    assert read_profile_csv(path) == records
    assert is_monotone(records, "peak_memory_bytes") and is_monotone(records, "seconds_per_step")
    meta = plot_profile(records, tmp_path / "p.png")
    assert [(p["title"], p["xlabel"], p["ylabel"]) for p in meta["panels"]] == list(PANELS)
    assert all(p["x"] == [16, 64, 256] for p in meta["panels"])
    assert (tmp_path / "p.png").stat().st_size > 0


@pytest.mark.skipif(sys.platform != "linux", reason="RSS high-water mark semantics")
def test_profile_isolated_processes():
    records = profile(profile_model, [1, 2], batch_size=2, steps=1)
    assert all(r.status == "ok" and r.peak_memory_bytes > 0 for r in records)
