"""Acceptance gate: every criterion at its stated tolerance.

Run with ``pytest tests/test_acceptance.py -s`` to see one PASS/FAIL line
per criterion. Criterion 4 performs the full 500-epoch optimization and
dominates the runtime; criterion 9 needs the HSTS pairs on disk and skips
otherwise.
"""

import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from hazesplit import autograd as ag
from hazesplit import cli, gradcheck, imgio, losses, metrics, physics, solver, transfer
from hazesplit.losses import LossConfig
from hazesplit.nets import LatentGaussian
from hazesplit.solver import SolverConfig

SEED = 7


def report(criterion, ok, detail):
    print(f"\nACCEPTANCE {criterion}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, f"criterion {criterion}: {detail}"


def natural_crop():
    from skimage import data

    astro = data.astronaut().astype(np.float64) / 255.0
    return astro[120:184, 150:214]


@pytest.fixture(scope="module")
def synthetic_scene():
    j_true = natural_crop()
    h, w = j_true.shape[:2]
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    t_true = (0.3 + 0.6 * (ii + jj) / (h + w - 2))[..., None]
    a_true = 0.8
    hazy = j_true * t_true + a_true * (1.0 - t_true)
    return {"j": j_true, "t": t_true, "a": a_true, "x": hazy}


@pytest.fixture(scope="module")
def roundtrip_run(synthetic_scene):
    cfg = SolverConfig(epochs=500, seed=SEED)
    started = time.perf_counter()
    result, record = solver.dehaze(synthetic_scene["x"], cfg)
    elapsed = time.perf_counter() - started
    return {"result": result, "record": record, "seconds": elapsed}


class TestCriterion1Gradients:
    def test_all_ops_and_total_objective(self):
        started = time.perf_counter()
        results = gradcheck.standard_suite(probes=100, seed=0, include_end_to_end=True)
        elapsed = time.perf_counter() - started
        worst_op = max(results, key=results.get)
        ok = max(results.values()) <= 1e-3 and elapsed <= 120.0
        report(
            "1 (gradient correctness)",
            ok,
            f"worst {results[worst_op]:.2e} ({worst_op}), {len(results)} checks in {elapsed:.0f}s",
        )


class TestCriterion2LossOracles:
    def test_loss_formula_oracles(self):
        lat = LatentGaussian(mu=ag.parameter(np.array([1.0])), log_var=ag.parameter(np.array([0.0])))
        kl_unit = float(losses.loss_kl(lat).data)
        ok = abs(kl_unit - 0.5) == 0.0

        std = LatentGaussian(mu=ag.parameter(np.zeros(6)), log_var=ag.parameter(np.zeros(6)))
        ok &= float(losses.loss_kl(std).data) <= 1e-9
        rng = np.random.default_rng(0)
        for _ in range(25):
            mu, lv = rng.normal(size=4) * 0.3, rng.normal(size=4) * 0.3
            off = LatentGaussian(mu=ag.parameter(mu), log_var=ag.parameter(lv))
            value = float(losses.loss_kl(off).data)
            if np.allclose(mu, 0, atol=1e-9) and np.allclose(lv, 0, atol=1e-9):
                ok &= value <= 1e-9
            else:
                ok &= value > 1e-9

        checker = ag.parameter(np.array([[0.0, 1.0], [1.0, 0.0]]).reshape(1, 1, 2, 2))
        reg = float(losses.loss_reg(checker).data)
        ok &= abs(reg - 2.0 / 9.0) <= 1e-9

        for mode in ("sum_of_squares", "mean_of_squares"):
            cfg = LossConfig(norm_mode=mode)
            a = ag.parameter(rng.uniform(size=(1, 3, 6, 5)))
            b = ag.constant(np.asarray(rng.uniform(size=(1, 3, 6, 5))))
            direct = float(sum((a.data[idx] - b.data[idx]) ** 2 for idx in np.ndindex(a.data.shape)))
            if mode == "mean_of_squares":
                direct /= a.data.size
            got = float(losses.loss_rec(a, b, cfg).data)
            ok &= abs(got - direct) / direct <= 1e-7

            out = ag.parameter(rng.uniform(size=(1, 3, 4, 4)))
            hint = rng.uniform(size=3)
            direct_h = float(
                sum((out.data[0, c, i, j] - hint[c]) ** 2 for c in range(3) for i in range(4) for j in range(4))
            )
            if mode == "mean_of_squares":
                direct_h /= out.data.size
            got_h = float(losses.loss_hint(out, hint, cfg).data)
            ok &= abs(got_h - direct_h) / direct_h <= 1e-7

        report("2 (loss-formula oracles)", ok, f"kl(1,1)={kl_unit}, reg(checker)={reg:.12f}")


class TestCriterion3Composition:
    def test_composition_identities(self):
        rng = np.random.default_rng(1)
        j = ag.parameter(rng.uniform(size=(1, 3, 5, 6)))
        a = ag.parameter(rng.uniform(size=(1, 3, 5, 6)))
        ones = ag.constant(np.ones((1, 1, 5, 6)))
        zeros = ag.constant(np.zeros((1, 1, 5, 6)))
        ok = np.array_equal(physics.compose(j, ones, a).data, j.data)
        ok &= np.array_equal(physics.compose(j, zeros, a).data, a.data)
        for _ in range(50):
            jj = ag.parameter(rng.uniform(size=(1, 3, 4, 4)))
            aa = ag.parameter(rng.uniform(size=(1, 3, 4, 4)))
            tt = ag.constant(rng.uniform(size=(1, 1, 4, 4)))
            out = physics.compose(jj, tt, aa).data
            ok &= out.min() >= -1e-6 and out.max() <= 1.0 + 1e-6
        first = physics.compose(j, ag.constant(np.full((1, 1, 5, 6), 0.37)), a).data
        second = physics.compose(j, ag.constant(np.full((1, 1, 5, 6), 0.37)), a).data
        ok &= np.array_equal(first, second)
        report("3 (composition identities)", ok, "T=1 and T=0 limits exact, range and determinism hold")


class TestCriterion4Roundtrip:
    def test_synthetic_roundtrip(self, synthetic_scene, roundtrip_run):
        result = roundtrip_run["result"]
        record = roundtrip_run["record"]
        x = synthetic_scene["x"]
        j_true = synthetic_scene["j"]

        rec_trend = record.breakdowns[-1].rec < record.breakdowns[0].rec
        recon = result.radiance * result.transmission + result.airlight * (1 - result.transmission)
        psnr_recon = metrics.psnr(np.clip(recon, 0.0, 1.0), x)
        psnr_baseline = metrics.psnr(x, j_true)
        psnr_dehazed = metrics.psnr(result.radiance, j_true)
        airlight_std = result.airlight.reshape(-1, 3).std(axis=0).max()
        in_time = roundtrip_run["seconds"] <= 600.0

        ok = (
            rec_trend
            and psnr_recon >= 30.0
            and psnr_dehazed >= psnr_baseline + 1.0
            and airlight_std <= 0.05
            and in_time
        )
        report(
            "4 (synthetic round-trip)",
            ok,
            f"rec {record.breakdowns[0].rec:.1f}->{record.breakdowns[-1].rec:.3f}, "
            f"recon {psnr_recon:.2f} dB, dehazed {psnr_dehazed:.2f} dB vs baseline "
            f"{psnr_baseline:.2f} dB, airlight std {airlight_std:.4f}, {roundtrip_run['seconds']:.0f}s",
        )


class TestCriterion5HintOracle:
    def test_twenty_random_images(self):
        rng = np.random.default_rng(2)
        worst = 0.0
        ok = True
        for _ in range(20):
            img = rng.uniform(size=(32, 32, 3))
            # brute force: explicit window loops, explicit sort, threshold at k-th
            h, w = 32, 32
            per_pixel_min = img.min(axis=2)
            dark = np.empty((h, w))
            for i in range(h):
                for j in range(w):
                    lo_i, hi_i = max(0, i - 7), min(h, i + 8)
                    lo_j, hi_j = max(0, j - 7), min(w, j + 8)
                    dark[i, j] = per_pixel_min[
                        max(lo_i, 0) : hi_i, max(lo_j, 0) : hi_j
                    ].min()
            k = math.ceil(0.001 * h * w)
            threshold = sorted(dark.ravel(), reverse=True)[k - 1]
            chosen = [f for f in range(h * w) if dark.ravel()[f] >= threshold]
            expected = img.reshape(-1, 3)[chosen].mean(axis=0)

            got = physics.estimate_airlight_hint(img)
            mine_dark = physics.dark_channel(img).ravel()
            mine_threshold = np.partition(mine_dark, mine_dark.size - k)[mine_dark.size - k]
            mine_chosen = np.flatnonzero(mine_dark >= mine_threshold).tolist()
            ok &= mine_chosen == chosen
            worst = max(worst, np.abs(got - expected).max())
            ok &= np.abs(got - expected).max() <= 1e-6
        report("5 (hint oracle)", ok, f"20 images, exact selection, worst mean gap {worst:.2e}")


class TestCriterion6MetricOracles:
    def test_psnr_and_ssim(self):
        a = np.zeros((10, 10, 3))
        b = np.full((10, 10, 3), 0.1)
        ok = abs(metrics.psnr(a, b) - 20.0) <= 1e-9

        rng = np.random.default_rng(3)
        img = rng.uniform(size=(32, 32, 3))
        ok &= metrics.ssim(img, img) == 1.0

        from test_metrics import brute_force_ssim

        worst = 0.0
        for _ in range(3):
            p = rng.uniform(size=(32, 32, 3))
            q = np.clip(p + rng.normal(0, 0.15, size=p.shape), 0, 1)
            gap = abs(metrics.ssim(p, q) - brute_force_ssim(p, q))
            worst = max(worst, gap)
            ok &= gap <= 1e-6
        report("6 (metric oracles)", ok, f"psnr closed form exact, ssim window gap {worst:.2e}")


class TestCriterion7TransferPurity:
    def test_apply_style_identities(self):
        rng = np.random.default_rng(4)
        clean = rng.uniform(size=(40, 30, 3))
        t = rng.uniform(0.2, 0.95, size=(16, 16, 1))
        a = rng.uniform(0.5, 1.0, size=(16, 16, 3))
        style = transfer.HazeStyle(transmission=t, airlight=a)
        out = transfer.apply_style(clean, style)
        t_r = transfer.bilinear_resize(t, 40, 30)[..., None] if t.ndim == 2 else transfer.bilinear_resize(t, 40, 30)
        a_r = transfer.bilinear_resize(a, 40, 30)
        reference = clean * t_r + a_r * (1.0 - t_r)
        gap = np.abs(out - reference).max()
        ok = gap <= 1e-7

        identity_style = transfer.HazeStyle(transmission=np.ones((8, 8, 1)), airlight=a[:8, :8])
        ok &= np.array_equal(transfer.apply_style(clean, identity_style), clean)
        report("7 (transfer purity)", ok, f"composition gap {gap:.2e}, T=1 identity bit-exact")


class TestCriterion8Determinism:
    def test_cli_runs_are_byte_identical(self, tmp_path):
        rng = np.random.default_rng(5)
        inputs = []
        for i in range(2):
            p = tmp_path / f"img{i}.png"
            imgio.save_image_u8(rng.uniform(0.2, 0.9, size=(48, 48, 3)), p)
            inputs.append(str(p))

        def artifacts(out_dir):
            blobs = {}
            for sub in sorted(Path(out_dir).rglob("*.png")):
                blobs[str(sub.relative_to(out_dir))] = sub.read_bytes()
            for sub in sorted(Path(out_dir).rglob("metrics.json")):
                payload = json.loads(sub.read_text())
                payload.pop("timing_ms_per_epoch", None)
                blobs[str(sub.relative_to(out_dir))] = json.dumps(payload, sort_keys=True)
            return blobs

        base = ["dehaze", "--input", *inputs, "--epochs", "20", "--seed", "33"]
        assert cli.main(base + ["--out", str(tmp_path / "r1"), "--jobs", "1"]) == 0
        assert cli.main(base + ["--out", str(tmp_path / "r2"), "--jobs", "1"]) == 0
        assert cli.main(base + ["--out", str(tmp_path / "r3"), "--jobs", "2"]) == 0
        first = artifacts(tmp_path / "r1")
        ok = first == artifacts(tmp_path / "r2") and first == artifacts(tmp_path / "r3")
        report("8 (determinism)", ok, "two reruns and --jobs 1 vs 2 byte-identical (timings excluded)")


HSTS_ENV = "HSTS_DIR"


def _hsts_pairs(root=None):
    root = Path(root or os.environ.get(HSTS_ENV) or "data/hsts")
    hazy_dir, clean_dir = root / "synthetic", root / "gt"
    if not hazy_dir.is_dir() or not clean_dir.is_dir():
        return None
    pairs = []
    for hazy_path in sorted(hazy_dir.iterdir()):
        clean_path = clean_dir / hazy_path.name
        if clean_path.exists():
            pairs.append((hazy_path, clean_path))
    return pairs or None


class TestHstsDiscovery:
    def test_pairs_matched_by_filename(self, tmp_path):
        (tmp_path / "synthetic").mkdir()
        (tmp_path / "gt").mkdir()
        for name in ("0001.png", "0002.png", "orphan.png"):
            (tmp_path / "synthetic" / name).write_bytes(b"x")
        for name in ("0001.png", "0002.png"):
            (tmp_path / "gt" / name).write_bytes(b"x")
        pairs = _hsts_pairs(tmp_path)
        assert [p[0].name for p in pairs] == ["0001.png", "0002.png"]

    def test_missing_layout_returns_none(self, tmp_path):
        assert _hsts_pairs(tmp_path) is None


class TestCriterion9HstsOptional:
    def test_hsts_reference_numbers(self):
        pairs = _hsts_pairs()
        if pairs is None:
            print(f"\nACCEPTANCE 9 (HSTS): SKIP - dataset not present (set {HSTS_ENV} or data/hsts/)")
            pytest.skip("HSTS dataset not available")

        def score(loss_cfg):
            psnrs, ssims = [], []
            for hazy_path, clean_path in pairs:
                hazy = imgio.load_image(hazy_path)
                clean = imgio.load_image(clean_path)
                padded, dims = imgio.pad_to_multiple(hazy)
                result, _ = solver.dehaze(padded, SolverConfig(seed=SEED, loss=loss_cfg))
                radiance = imgio.crop_to(result.radiance, dims)
                psnrs.append(metrics.psnr(radiance, clean))
                ssims.append(metrics.ssim(radiance, clean))
            return float(np.mean(psnrs)), float(np.mean(ssims))

        full_psnr, full_ssim = score(LossConfig())
        ok = abs(full_psnr - 23.82) <= 2.0 and abs(full_ssim - 0.9125) <= 0.05
        directional = True
        for term in ("h", "kl", "j", "reg"):
            ablated_psnr, _ = score(LossConfig(**{f"enable_{term}": False}))
            directional &= full_psnr >= ablated_psnr - 1e-9
        ok &= directional
        report(
            "9 (HSTS reference)",
            ok,
            f"mean psnr {full_psnr:.2f} (target 23.82+-2.0), ssim {full_ssim:.4f} "
            f"(target 0.9125+-0.05), ablation ordering {'held' if directional else 'violated'}",
        )
