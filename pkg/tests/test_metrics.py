"""Quality metrics and RD-curve comparison.

The multi-scale SSIM reference values below were produced by an independent
implementation (tf.image.ssim_multiscale, tensorflow 2.x) on deterministic
192x192 pairs built by ``oracle_pair``. They are frozen here; the in-repo
implementation must stay within 1e-4 of every one of them.
"""
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dgvc.core import Frame, MetricDomainError
from dgvc.metrics import (MS_SSIM_WEIGHTS, PSNR_CAP_DB, RdCurve, RdPoint,
                          bdbr, curve_from_points, distortion, ms_ssim,
                          ms_ssim_tensor, mse, psnr, read_points_csv,
                          rd_report, write_points_csv)

# value for seed k is tf.image.ssim_multiscale(*oracle_pair(k), max_val=1.0)
TF_MSSSIM_VALUES = (
    0.8850817680358887,
    0.9949566721916199,
    0.8321282267570496,
    0.9190590977668762,
    0.8860492706298828,
    0.76083904504776,
    0.7308656573295593,
    0.9119440913200378,
    0.8569324016571045,
    0.9841291904449463,
    0.9789635539054871,
    0.8099846243858337,
    0.9967986941337585,
    0.8342052102088928,
    0.8305365443229675,
    0.9583513736724854,
    0.7553722858428955,
    0.8641512989997864,
    0.7906651496887207,
    0.9137280583381653,
)


def oracle_pair(seed: int):
    """Smooth random texture plus clipped Gaussian noise, 192x192 RGB."""
    rng = np.random.default_rng(seed)
    h = w = 192
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    img = np.zeros((h, w, 3))
    for _ in range(6):
        freq = rng.uniform(0.5, 4.0) * 2 * np.pi / 192
        angle = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(freq * (np.cos(angle) * xs + np.sin(angle) * ys) + phase)
        img += wave[..., None] * rng.uniform(0.2, 1.0, 3)
    img = (img - img.min()) / (img.max() - img.min())
    sigma = rng.uniform(0.005, 0.12)
    noisy = np.clip(img + rng.normal(0, sigma, img.shape), 0, 1)
    return img.astype(np.float32), noisy.astype(np.float32)


class TestPsnr:
    def test_constant_offset_closed_form(self):
        """Uniform error of 16/255 on a 255-peak scale:
        10*log10(255^2/16^2) = 24.0823996531... dB."""
        a = Frame(torch.zeros(8, 8, 3))
        b = Frame(torch.full((8, 8, 3), 16.0 / 255.0))
        expected = 10.0 * math.log10(255.0 ** 2 / 16.0 ** 2)
        assert psnr(a, b) == pytest.approx(expected, abs=1e-6)

    def test_half_range_error_closed_form(self):
        a = Frame(torch.zeros(4, 4, 3))
        b = Frame(torch.full((4, 4, 3), 0.5))
        assert psnr(a, b) == pytest.approx(10.0 * math.log10(4.0), abs=1e-6)

    def test_identical_frames_hit_cap(self):
        x = Frame(torch.rand(8, 8, 3))
        assert psnr(x, x) == PSNR_CAP_DB == 99.0

    def test_tiny_error_is_capped(self):
        a = Frame(torch.zeros(4, 4, 3))
        b = Frame(torch.full((4, 4, 3), 1e-9))
        assert psnr(a, b) == PSNR_CAP_DB

    def test_mse_is_float64_mean_square(self):
        a = Frame(torch.zeros(2, 2, 3))
        b = Frame(torch.full((2, 2, 3), 0.25))
        assert mse(a, b) == pytest.approx(0.0625, abs=1e-12)

    def test_rejects_shape_mismatch(self):
        with pytest.raises(Exception):
            psnr(Frame(torch.rand(4, 4, 3)), Frame(torch.rand(4, 8, 3)))


class TestMsSsim:
    @pytest.mark.parametrize("seed", range(20))
    def test_matches_frozen_reference_within_1e4(self, seed):
        img, noisy = oracle_pair(seed)
        value = ms_ssim(Frame(torch.from_numpy(img)),
                        Frame(torch.from_numpy(noisy)))
        assert value == pytest.approx(TF_MSSSIM_VALUES[seed], abs=1e-4)

    def test_identical_inputs_score_one(self):
        x = Frame(torch.rand(192, 192, 3))
        assert ms_ssim(x, x) == pytest.approx(1.0, abs=1e-6)

    def test_weights_are_the_published_five(self):
        assert MS_SSIM_WEIGHTS == pytest.approx(
            (0.0448, 0.2856, 0.3001, 0.2363, 0.1333))

    def test_monotone_under_growing_noise(self):
        img, _ = oracle_pair(0)
        rng = np.random.default_rng(42)
        noise = rng.normal(0, 1, img.shape).astype(np.float32)
        scores = []
        for sigma in (0.01, 0.05, 0.1, 0.2):
            noisy = np.clip(img + sigma * noise, 0, 1).astype(np.float32)
            scores.append(ms_ssim(Frame(torch.from_numpy(img)),
                                  Frame(torch.from_numpy(noisy))))
        assert scores == sorted(scores, reverse=True)

    def test_small_images_drop_scales(self):
        """Below 176 pixels the scale count shrinks so the 11-tap window
        still fits after repeated halving; the score stays in (0, 1]."""
        x = torch.rand(1, 3, 64, 64)
        y = (x + 0.1 * torch.randn_like(x)).clamp(0, 1)
        v = float(ms_ssim_tensor(x, y))
        assert 0.0 < v <= 1.0

    def test_batched_tensor_form_per_sample(self):
        torch.manual_seed(0)
        x = torch.rand(3, 3, 192, 192)
        y = (x + 0.05 * torch.randn_like(x)).clamp(0, 1)
        batch = ms_ssim_tensor(x, y)
        assert batch.shape == (3,)
        singles = torch.stack([ms_ssim_tensor(x[i:i + 1], y[i:i + 1])[0]
                               for i in range(3)])
        assert torch.allclose(batch, singles, atol=1e-6)

    def test_odd_dimensions_accepted(self):
        x = torch.rand(1, 3, 191, 177)
        y = (x + 0.02 * torch.randn_like(x)).clamp(0, 1)
        v = float(ms_ssim_tensor(x, y))
        assert 0.0 < v <= 1.0

    def test_distortion_dispatch(self):
        x = torch.rand(2, 3, 64, 64)
        y = (x + 0.1 * torch.randn_like(x)).clamp(0, 1)
        d_mse = distortion("mse", x, y)
        assert float(d_mse) == pytest.approx(
            float(torch.nn.functional.mse_loss(x, y)), rel=1e-6)
        d_ms = distortion("ms-ssim", x, y)
        assert 0.0 < float(d_ms) < 1.0
        assert float(distortion("ms-ssim", x, x)) == pytest.approx(0.0, abs=1e-6)


def curve(points, label="a", metric="psnr"):
    return RdCurve(label=label, metric=metric, points=tuple(points))


class TestRdCurve:
    def test_requires_monotone_rate_and_quality(self):
        with pytest.raises(MetricDomainError):
            curve([(0.1, 30.0), (0.1, 31.0), (0.3, 32.0), (0.4, 33.0)])
        with pytest.raises(MetricDomainError):
            curve([(0.1, 30.0), (0.2, 29.0), (0.3, 32.0), (0.4, 33.0)])

    def test_accepts_valid_curve(self):
        c = curve([(0.1, 30.0), (0.2, 31.0), (0.3, 32.0), (0.4, 33.0)])
        assert len(c.points) == 4


class TestBdbr:
    def anchor(self):
        return curve([(0.1, 30.0), (0.2, 32.0), (0.4, 34.0), (0.8, 36.0)])

    def test_self_comparison_is_zero(self):
        assert bdbr(self.anchor(), self.anchor()) == pytest.approx(0.0, abs=1e-9)

    def test_half_rate_curve_is_minus_fifty(self):
        a = self.anchor()
        halved = curve([(r / 2, q) for r, q in a.points], label="b")
        assert bdbr(a, halved) == pytest.approx(-50.0, abs=0.1)

    def test_double_rate_curve_is_plus_hundred(self):
        a = self.anchor()
        doubled = curve([(r * 2, q) for r, q in a.points], label="b")
        assert bdbr(a, doubled) == pytest.approx(100.0, abs=0.2)

    def test_antisymmetry_of_log_rates(self):
        a = self.anchor()
        b = curve([(0.13, 30.5), (0.22, 32.2), (0.38, 33.9), (0.7, 35.8)],
                  label="b")
        fwd = bdbr(a, b)
        rev = bdbr(b, a)
        assert (1 + fwd / 100.0) * (1 + rev / 100.0) == pytest.approx(1.0,
                                                                      abs=1e-6)

    def test_requires_four_points(self):
        short = curve([(0.1, 30.0), (0.2, 32.0), (0.4, 34.0)])
        with pytest.raises(MetricDomainError):
            bdbr(short, self.anchor())

    def test_requires_metric_match(self):
        b = curve([(0.1, 0.90), (0.2, 0.92), (0.4, 0.94), (0.8, 0.96)],
                  metric="ms-ssim")
        with pytest.raises(Exception):
            bdbr(self.anchor(), b)

    def test_requires_quality_overlap(self):
        b = curve([(0.1, 40.0), (0.2, 42.0), (0.4, 44.0), (0.8, 46.0)],
                  label="b")
        with pytest.raises(MetricDomainError):
            bdbr(self.anchor(), b)

    @given(shift=st.floats(min_value=-0.5, max_value=0.5),
           scale=st.floats(min_value=0.6, max_value=1.6))
    @settings(max_examples=20)
    def test_scaled_rate_recovers_scale(self, shift, scale):
        """bdbr of (rate*scale, quality+shift_within_overlap) against the
        anchor approaches 100*(scale-1) when qualities overlap."""
        a = self.anchor()
        pts = [(r * scale, q + shift) for r, q in a.points]
        try:
            b = curve(pts, label="b")
            value = bdbr(a, b)
        except MetricDomainError:
            return
        # quality shift changes where curves are compared, so allow slack
        assert value == pytest.approx(100.0 * (scale - 1.0), abs=25.0)


class TestPointsCsv:
    def points(self):
        return [
            RdPoint("clip0", 512.0, 6, 0.41, 31.5, 0.951),
            RdPoint("clip1", 1024.0, 6, 0.305, 33.25, 0.9625),
        ]

    def test_roundtrip_exact(self, tmp_path):
        path = tmp_path / "points.csv"
        write_points_csv(path, self.points())
        back = read_points_csv(path)
        assert back == self.points()

    def test_header_schema(self, tmp_path):
        path = tmp_path / "points.csv"
        write_points_csv(path, self.points())
        header = path.read_text().splitlines()[0]
        assert header == "sequence,lambda,frames,bpp,psnr_db,msssim"


class TestCurveFromPoints:
    def grid(self, lambdas=(512, 1024, 1792, 2560)):
        pts = []
        for i, lam in enumerate(lambdas):
            for clip in ("a", "b"):
                jitter = 0.01 if clip == "a" else -0.01
                pts.append(RdPoint(clip, float(lam), 6,
                                   0.3 + 0.1 * i + jitter,
                                   30.0 + 1.5 * i + jitter,
                                   0.9 + 0.02 * i))
        return pts

    def test_averages_per_lambda(self):
        c = curve_from_points("toy", self.grid(), "psnr")
        assert c is not None
        assert len(c.points) == 4
        assert c.points[0][0] == pytest.approx(0.3)
        assert c.points[0][1] == pytest.approx(30.0)

    def test_too_few_lambdas_returns_none(self):
        with pytest.warns(UserWarning):
            c = curve_from_points("toy", self.grid(lambdas=(512, 1024, 1792)),
                                  "psnr")
        assert c is None


class TestRdReport:
    def runs(self):
        base = self.grid_points()
        better = [RdPoint(p.sequence, p.lmbda, p.frames, p.bpp * 0.5,
                          p.psnr_db, p.msssim) for p in base]
        return {"anchor": base, "half": better}

    @staticmethod
    def grid_points():
        pts = []
        for i, lam in enumerate((512, 1024, 1792, 2560)):
            pts.append(RdPoint("clip", float(lam), 6,
                               0.3 + 0.1 * i, 30.0 + 1.5 * i,
                               0.9 + 0.02 * i))
        return pts

    def test_report_writes_expected_files(self, tmp_path):
        import csv as csv_mod

        paths = rd_report(self.runs(), anchor_label="anchor",
                          out_dir=tmp_path)
        assert (tmp_path / "points_anchor.csv").exists()
        assert (tmp_path / "points_half.csv").exists()
        assert paths["curves"].exists()
        assert paths["bdbr"].exists()
        with open(paths["bdbr"], newline="") as fh:
            rows = list(csv_mod.DictReader(fh))
        by_key = {(r["label"], r["metric"]): r for r in rows}
        assert set(by_key) == {("half", "psnr"), ("half", "ms-ssim")}
        for row in rows:
            assert float(row["bdbr_percent_vs_anchor"]) == \
                pytest.approx(-50.0, abs=0.1)

    def test_curves_json_structure(self, tmp_path):
        import json

        rd_report(self.runs(), anchor_label="anchor", out_dir=tmp_path)
        curves = json.loads((tmp_path / "curves.json").read_text())
        labels = {c["label"] for c in curves}
        assert labels == {"anchor", "half"}
        assert {c["metric"] for c in curves} == {"psnr", "ms-ssim"}
        for c in curves:
            for rate, quality in c["points"]:
                assert rate > 0 and quality > 0

    def test_missing_anchor_rejected(self, tmp_path):
        with pytest.raises(Exception):
            rd_report(self.runs(), anchor_label="nope", out_dir=tmp_path)
