import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attnchroma import evaluate as E
from attnchroma import model as M
from attnchroma.baselines import CLASSICAL_MODES
from attnchroma.data import PatchSample
from attnchroma.errors import ShapeError


def _sample(seed=0, n=4):
    rng = np.random.default_rng(seed)
    f = lambda *s: rng.random(s).astype(np.float32)
    return PatchSample(f(n, n), f(3, 2 * n + 1), f(n, n), f(n, n))


def _curve(rates, psnrs):
    return [E.RdPoint(r, d) for r, d in zip(rates, psnrs)]


RATES = [100.0, 200.0, 400.0, 800.0]
PSNRS = [30.0, 33.0, 35.5, 37.0]


# -- PSNR


def test_psnr_identical_is_capped():
    a = np.random.default_rng(0).random((2, 4, 4))
    assert E.psnr(a, a) == 100.0


def test_psnr_hand_value():
    a = np.zeros((4, 4))
    assert E.psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)


def test_psnr_shape_mismatch():
    with pytest.raises(ShapeError):
        E.psnr(np.zeros(3), np.zeros(4))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_psnr_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random(16), rng.random(16)
    assert E.psnr(a, b) == E.psnr(b, a)


# -- BD-rate


@pytest.mark.parametrize("method", ["pchip", "polyfit"])
def test_bd_rate_identical_is_zero(method):
    c = _curve(RATES, PSNRS)
    assert E.bd_rate(c, c, method) == 0.0


@pytest.mark.parametrize("method", ["pchip", "polyfit"])
@pytest.mark.parametrize("factor,expect", [(0.5, -50.0), (2.0, 100.0)])
def test_bd_rate_scaled_rates(method, factor, expect):
    anchor = _curve(RATES, PSNRS)
    test = _curve([r * factor for r in RATES], PSNRS)
    assert E.bd_rate(anchor, test, method) == pytest.approx(expect, abs=0.1)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.3, 3.0), st.floats(-1.0, 1.0))
def test_bd_rate_swap_flips_sign(factor, shift):
    anchor = _curve(RATES, PSNRS)
    test = _curve([r * factor for r in RATES], [d + shift for d in PSNRS])
    fwd, back = E.bd_rate(anchor, test), E.bd_rate(test, anchor)
    # antisymmetric in the log-rate domain, hence opposite signs in percent
    assert np.log1p(fwd / 100) == pytest.approx(-np.log1p(back / 100), abs=1e-9)
    assert fwd == 0 or np.sign(fwd) == -np.sign(back)


def test_bd_rate_errors():
    c = _curve(RATES, PSNRS)
    with pytest.raises(ValueError, match="overlap"):
        E.bd_rate(c, _curve(RATES, [d + 20 for d in PSNRS]))
    with pytest.raises(ValueError, match="4 points"):
        E.bd_rate(c[:3], c)
    with pytest.raises(ValueError):
        E.RdPoint(0.0, 30.0)
    with pytest.raises(ValueError, match="method"):
        E.bd_rate(c, c, "spline")


# -- RD mode competition


def test_competition_lambda_threshold():
    s = _sample()
    exact = s.target.astype(np.float64)
    off = exact + 0.01  # SSE = 32 * 1e-4
    sse = 32 * 1e-4
    bits = {"a": 3.0, "b": 2.0}
    # lam * (3 - 2) vs sse: below the break-even point the exact mode wins
    assert E.mode_competition(s, {"a": exact, "b": off}, 0.5 * sse, bits)[0] == "a"
    assert E.mode_competition(s, {"a": exact, "b": off}, 2.0 * sse, bits)[0] == "b"


def test_competition_tie_goes_to_first():
    s = _sample()
    p = s.target.astype(np.float64)
    bits = {"x": 1.0, "y": 1.0}
    assert E.mode_competition(s, {"x": p, "y": p.copy()}, 1.0, bits)[0] == "x"
    assert E.mode_competition(s, {"y": p, "x": p.copy()}, 1.0, bits)[0] == "y"


def test_competition_lambda_zero_is_min_sse():
    s = _sample(3)
    modes = {k: v for k, v in CLASSICAL_MODES.items()}
    best, costs = E.mode_competition(s, modes, 0.0, {k: 2.0 for k in modes})
    sse = {k: float(np.sum((fn(s) - s.target) ** 2)) for k, fn in modes.items()}
    assert best == min(sse, key=sse.get)
    assert costs == pytest.approx(sse)


def test_competition_stats():
    stats = E.ModeStats(["a", "b"])
    s = _sample()
    for _ in range(3):
        E.mode_competition(s, {"a": s.target, "b": s.target + 0.5}, 0.0, {"a": 1, "b": 1}, stats)
    assert stats.counts == {"a": 3, "b": 0} and stats.blocks == 3
    assert stats.selection_pct("a") == 100.0 and stats.overall_psnr == 100.0


# -- attention export


def test_attention_to_gray_rows_peak_at_255():
    a = np.random.default_rng(0).dirichlet(np.ones(9), size=16)
    img, scale = E.attention_to_gray(a)
    assert img.shape == (16, 9) and img.dtype == np.uint8
    assert np.all(img.max(axis=1) == 255)
    np.testing.assert_allclose(img / scale[:, None], a, atol=0.5 / scale.min())


def test_pgm_round_trip_and_sidecar(tmp_path):
    a = np.random.default_rng(1).dirichlet(np.ones(17), size=64)
    sidecar = E.export_attention_map(a, tmp_path / "attn.pgm")
    img = E.read_pgm(tmp_path / "attn.pgm")
    assert img.shape == (64, 17)
    assert np.array_equal(img, E.attention_to_gray(a)[0])
    lines = [ln for ln in sidecar.read_text().splitlines() if not ln.startswith("#")]
    assert len(lines) == 64


def test_block_to_gray():
    pred = np.stack([np.zeros((4, 4)), np.ones((4, 4))])
    img = E.block_to_gray(pred)
    assert img.shape == (4, 8) and img[:, :4].max() == 0 and img[:, 4:].min() == 255


# -- full evaluation


def test_evaluate_with_oracle():
    samples = [_sample(k) for k in range(6)]
    oracle = lambda s: s.target.astype(np.float64)
    report = E.evaluate_model({"oracle": oracle}, samples, lam=0.0)
    assert [r.mode for r in report.rows] == ["oracle", *CLASSICAL_MODES]
    r = report.row("oracle")
    assert r.mean_psnr_cbcr == 100.0 and r.selection_pct == 100.0
    assert sum(row.selection_pct for row in report.rows) == pytest.approx(100.0)


def test_evaluate_model_weights_and_csv(tmp_path):
    w = M.init_weights(M.BlockSizeConfig.preset(4), 0)
    samples = [_sample(k) for k in range(5)]
    report = E.evaluate_model({"nn": w, "nn2": w}, samples, lam=1.0)
    assert len(report.rows) == 7
    assert report.row("nn").mean_psnr_cb == report.row("nn2").mean_psnr_cb
    # identical NN predictions tie; the first one listed always wins
    assert report.stats.counts["nn2"] == 0
    E.write_report_csv(tmp_path / "r.csv", report)
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0].split(",") == E.REPORT_COLUMNS and len(lines) == 8
    assert "RD-selected" in report.summary()


def test_evaluate_rejects_empty_and_mismatch():
    w = M.init_weights(M.BlockSizeConfig.preset(8), 0)
    with pytest.raises(ValueError):
        E.evaluate_model({}, [])
    with pytest.raises(ShapeError):
        E.evaluate_model({"nn": w}, [_sample()])


def test_evaluate_averages_per_image_psnr():
    base = [_sample(k) for k in range(3)]
    samples = [PatchSample(s.luma, s.boundary, s.target_cb, s.target_cr, img) for s, img in zip(base, (0, 0, 1))]
    offsets = {0: 0.1, 1: 0.01, 2: 0.001}
    pred = lambda s: s.target.astype(np.float64) + offsets[next(k for k, t in enumerate(samples) if t is s)]
    report = E.evaluate_model({"p": pred}, samples, classical={})
    image0 = 10 * np.log10(1 / np.mean([0.1**2, 0.01**2]))  # blocks of one image are pooled
    image1 = 10 * np.log10(1 / 0.001**2)
    assert report.row("p").mean_psnr_cbcr == pytest.approx((image0 + image1) / 2)
    assert report.row("p").block_psnr_cbcr == pytest.approx((20 + 40 + 60) / 3)
