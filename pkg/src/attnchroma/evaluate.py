"""Prediction metrics, BD-rate, RD mode competition and attention export."""

from __future__ import annotations

import csv
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.interpolate import PchipInterpolator

from . import model as M
from .baselines import CLASSICAL_MODES
from .data import PatchSample, stack_batch
from .errors import ShapeError

PSNR_CAP = 100.0
DEFAULT_CLASSICAL_BITS = 2.0
DEFAULT_NN_BITS = 3.0

Predictor = Callable[[PatchSample], np.ndarray]


def psnr(a, b, peak: float = 1.0) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"psnr: shapes differ: {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(peak * peak / mse)))


# --------------------------------------------------------------------------
# Bjontegaard delta rate


@dataclass(frozen=True)
class RdPoint:
    rate: float
    distortion: float  # PSNR, dB

    def __post_init__(self):
        if not self.rate > 0:
            raise ValueError(f"rate must be > 0, got {self.rate}")


def _curve(points: Sequence[RdPoint]):
    if len(points) < 4:
        raise ValueError(f"BD-rate needs at least 4 points per curve, got {len(points)}")
    pts = sorted(points, key=lambda p: p.distortion)
    d = np.array([p.distortion for p in pts])
    if np.any(np.diff(d) <= 0):
        raise ValueError("distortion values on a curve must be distinct")
    return d, np.log(np.array([p.rate for p in pts]))


def bd_rate(anchor: Sequence[RdPoint], test: Sequence[RdPoint], method: str = "pchip") -> float:
    """Average rate difference (percent) of ``test`` vs ``anchor`` at equal quality.

    log-rate is modelled as a function of PSNR, either piecewise-cubic
    (``"pchip"``) or with one cubic polynomial (``"polyfit"``), and integrated
    over the overlapping PSNR interval. Negative means ``test`` saves rate.
    """
    da, ra = _curve(anchor)
    dt, rt = _curve(test)
    lo, hi = max(da[0], dt[0]), min(da[-1], dt[-1])
    if not hi > lo:
        raise ValueError(f"no distortion overlap between curves ([{da[0]}, {da[-1]}] vs [{dt[0]}, {dt[-1]}])")
    if method == "pchip":
        ia = PchipInterpolator(da, ra).integrate(lo, hi)
        it = PchipInterpolator(dt, rt).integrate(lo, hi)
    elif method == "polyfit":
        pa, pt = np.polyint(np.polyfit(da, ra, 3)), np.polyint(np.polyfit(dt, rt, 3))
        ia = np.polyval(pa, hi) - np.polyval(pa, lo)
        it = np.polyval(pt, hi) - np.polyval(pt, lo)
    else:
        raise ValueError(f"unknown BD-rate method {method!r}")
    avg = (it - ia) / (hi - lo)
    return float((np.exp(avg) - 1.0) * 100.0)


# --------------------------------------------------------------------------
# RD mode competition


@dataclass
class ModeStats:
    modes: list[str]
    counts: dict[str, int] = field(default_factory=dict)
    sse_sum: dict[str, float] = field(default_factory=dict)
    evaluated: dict[str, int] = field(default_factory=dict)
    chosen_sse: float = 0.0
    chosen_entries: int = 0
    blocks: int = 0

    def __post_init__(self):
        for m in self.modes:
            self.counts.setdefault(m, 0)
            self.sse_sum.setdefault(m, 0.0)
            self.evaluated.setdefault(m, 0)

    def mean_sse(self, mode: str) -> float:
        k = self.evaluated[mode]
        return self.sse_sum[mode] / k if k else float("nan")

    @property
    def overall_psnr(self) -> float:
        if not self.chosen_entries:
            return float("nan")
        mse = self.chosen_sse / self.chosen_entries
        return PSNR_CAP if mse == 0 else min(PSNR_CAP, float(10.0 * np.log10(1.0 / mse)))

    def selection_pct(self, mode: str) -> float:
        return 100.0 * self.counts[mode] / self.blocks if self.blocks else 0.0


def mode_competition(
    sample: PatchSample,
    modes: Mapping[str, Predictor | np.ndarray],
    lam: float,
    mode_bits: Mapping[str, float],
    stats: ModeStats | None = None,
) -> tuple[str, dict[str, float]]:
    """Pick the mode minimizing ``SSE + lam * bits``; ties go to the first mode.

    ``modes`` maps names to predictors or to precomputed ``(2, N, N)``
    predictions. Returns the chosen name and every mode's cost; ``stats`` is
    updated when given.
    """
    if not modes:
        raise ValueError("mode competition needs at least one mode")
    target = sample.target.astype(np.float64)
    costs, sses = {}, {}
    best, best_cost = None, np.inf
    for name, pred in modes.items():
        p = pred(sample) if callable(pred) else pred
        sse = float(np.sum((np.asarray(p, dtype=np.float64) - target) ** 2))
        cost = sse + lam * float(mode_bits[name])
        sses[name], costs[name] = sse, cost
        if cost < best_cost:
            best, best_cost = name, cost
    if stats is not None:
        for name, sse in sses.items():
            stats.sse_sum[name] += sse
            stats.evaluated[name] += 1
        stats.counts[best] += 1
        stats.chosen_sse += sses[best]
        stats.chosen_entries += target.size
        stats.blocks += 1
    return best, costs


def default_mode_bits(modes: Sequence[str], nn_modes: Sequence[str]) -> dict[str, float]:
    return {m: DEFAULT_NN_BITS if m in nn_modes else DEFAULT_CLASSICAL_BITS for m in modes}


# --------------------------------------------------------------------------
# attention visualization


def attention_to_gray(a) -> tuple[np.ndarray, np.ndarray]:
    """Scale each row by ``255 / row max``; returns ``(uint8 image, scales)``."""
    a = np.asarray(a.probs if isinstance(a, M.AttentionMap) else a, dtype=np.float64)
    row_max = a.max(axis=1)
    scale = np.where(row_max > 0, 255.0 / np.where(row_max > 0, row_max, 1.0), 0.0)
    img = np.rint(a * scale[:, None]).clip(0, 255).astype(np.uint8)
    return img, scale


def write_pgm(path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = int(fields[1]), int(fields[2])
    return np.frombuffer(data[pos + 1:pos + 1 + w * h], dtype=np.uint8).reshape(h, w)


def export_attention_map(a, path) -> Path:
    """Write the ``N^2 x b`` map as PGM (rows = block positions) plus a scale sidecar."""
    img, scale = attention_to_gray(a)
    path = Path(path)
    write_pgm(path, img)
    sidecar = path.with_name(path.name + ".scale.txt")
    lines = ["# row pixel = round(attention * scale)", "# row scale"]
    lines += [f"{i} {s:.9g}" for i, s in enumerate(scale)]
    sidecar.write_text("\n".join(lines) + "\n")
    return sidecar


def block_to_gray(pred) -> np.ndarray:
    """``(2, N, N)`` chroma as an ``N x 2N`` 8-bit strip (Cb left, Cr right)."""
    pred = np.asarray(pred, dtype=np.float64)
    return np.rint(np.clip(np.concatenate([pred[0], pred[1]], axis=1), 0, 1) * 255).astype(np.uint8)


# --------------------------------------------------------------------------
# full evaluation


@dataclass
class ReportRow:
    """Per-mode scores; ``mean_psnr_*`` average the per-image PSNRs."""

    mode: str
    mean_psnr_cb: float
    mean_psnr_cr: float
    mean_psnr_cbcr: float
    selection_pct: float
    block_psnr_cbcr: float = float("nan")  # mean of per-block PSNRs


@dataclass
class EvalReport:
    rows: list[ReportRow]
    stats: ModeStats
    lam: float

    def row(self, mode: str) -> ReportRow:
        return next(r for r in self.rows if r.mode == mode)

    def summary(self) -> str:
        lines = [f"{'mode':<16}{'PSNR Cb':>10}{'PSNR Cr':>10}{'PSNR CbCr':>11}{'selected %':>12}{'block PSNR':>12}"]
        for r in self.rows:
            lines.append(
                f"{r.mode:<16}{r.mean_psnr_cb:>10.3f}{r.mean_psnr_cr:>10.3f}{r.mean_psnr_cbcr:>11.3f}"
                f"{r.selection_pct:>12.2f}{r.block_psnr_cbcr:>12.3f}"
            )
        lines.append(f"RD-selected chroma PSNR {self.stats.overall_psnr:.3f} dB over {self.stats.blocks} blocks (lambda={self.lam:g})")
        return "\n".join(lines)


REPORT_COLUMNS = ["mode", "mean_psnr_cb", "mean_psnr_cr", "mean_psnr_cbcr", "selection_pct", "block_psnr_cbcr"]


def write_report_csv(path, report: EvalReport) -> None:
    with open(path, "w", newline="") as f:
        out = csv.writer(f)
        out.writerow(REPORT_COLUMNS)
        for r in report.rows:
            out.writerow([
                r.mode, f"{r.mean_psnr_cb:.6f}", f"{r.mean_psnr_cr:.6f}", f"{r.mean_psnr_cbcr:.6f}",
                f"{r.selection_pct:.4f}", f"{r.block_psnr_cbcr:.6f}",
            ])


def nn_predictions(w: M.ModelWeights, samples: Sequence[PatchSample], chunk: int = 512) -> np.ndarray:
    out = []
    for i in range(0, len(samples), chunk):
        luma, boundary, _ = stack_batch(samples[i:i + chunk])
        out.append(M.predict_batch(w, luma, boundary))
    return np.concatenate(out)


def evaluate_model(
    models: Mapping[str, M.ModelWeights | Predictor],
    samples: Sequence[PatchSample],
    lam: float = 0.0,
    mode_bits: Mapping[str, float] | None = None,
    classical: Mapping[str, Predictor] = CLASSICAL_MODES,
) -> EvalReport:
    """Per-mode mean PSNR plus RD competition among all modes.

    PSNR is computed per source image from the pooled squared error of its
    blocks and then averaged over images; the mean of per-block PSNRs is
    reported alongside. ``models`` maps a label to weights (or any predictor, e.g. an oracle).
    Learned modes come first in the competition order, so they win exact
    ties.
    """
    if not samples:
        raise ValueError("evaluation dataset is empty")
    for label, m in models.items():
        if isinstance(m, M.ModelWeights) and m.config.n != samples[0].n:
            raise ShapeError(f"model {label!r} has block size {m.config.n}, dataset has {samples[0].n}")

    preds: OrderedDict[str, np.ndarray] = OrderedDict()
    for label, m in models.items():
        if isinstance(m, M.ModelWeights):
            preds[label] = nn_predictions(m, samples)
        else:
            preds[label] = np.stack([m(s) for s in samples])
    for name, fn in classical.items():
        preds[name] = np.stack([fn(s) for s in samples])

    names = list(preds)
    bits = dict(mode_bits) if mode_bits is not None else default_mode_bits(names, list(models))
    stats = ModeStats(names)
    for k, s in enumerate(samples):
        mode_competition(s, {n: preds[n][k] for n in names}, lam, bits, stats)

    target = np.stack([s.target for s in samples]).astype(np.float64)
    image_ids = np.array([s.image_index for s in samples])
    groups = [image_ids == i for i in np.unique(image_ids)]
    rows = []
    for name in names:
        p = preds[name]
        per_image = lambda sl: float(np.mean([psnr(p[g][sl], target[g][sl]) for g in groups]))
        block = float(np.mean([psnr(p[k], target[k]) for k in range(len(samples))]))
        rows.append(ReportRow(
            name, per_image(np.s_[:, 0]), per_image(np.s_[:, 1]), per_image(np.s_[:]), stats.selection_pct(name), block
        ))
    return EvalReport(rows, stats, lam)
