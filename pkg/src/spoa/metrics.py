"""Full-reference distortion metrics and batch evaluation over a test split.

PSNR and SRE are reported in dB with ``float('inf')`` as the zero-error
sentinel, SSIM uses the canonical 11x11 Gaussian window (sigma 1.5,
K1=0.01, K2=0.03, dynamic range 1.0), and SAM is the mean per-pixel angle
between channel vectors in degrees.  SRE here is the signal-to-
reconstruction-error ratio 10*log10(mean(reference)^2 / MSE), computed per
channel and averaged.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ShapeError
from .networks import ParameterSet, actor_apply

SAM_NORM_FLOOR = 1e-12


def _check_same_shape(x, y, op):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"{op} shape mismatch: {x.shape} vs {y.shape}")
    return x, y


def psnr(x, y, peak=1.0) -> float:
    """10*log10(peak^2 / MSE) on [0,1]-clamped inputs; inf when MSE is zero."""
    x, y = _check_same_shape(x, y, "psnr")
    x = np.clip(x, 0.0, 1.0)
    y = np.clip(y, 0.0, 1.0)
    mse = float(np.mean(np.square(x - y)))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(peak * peak / mse)


def _gaussian_window(size=11, sigma=1.5):
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax * ax) / (2.0 * sigma * sigma))
    win = np.outer(g, g)
    return win / win.sum()


def _local_mean(plane, win):
    view = np.lib.stride_tricks.sliding_window_view(plane, win.shape)
    return np.tensordot(view, win, axes=([2, 3], [0, 1]))


def ssim(x, y) -> float:
    """Mean local structural similarity, channels averaged."""
    x, y = _check_same_shape(x, y, "ssim")
    if x.ndim != 3:
        raise ShapeError(f"ssim expects (H,W,C), got {x.shape}")
    win = _gaussian_window()
    if min(x.shape[0], x.shape[1]) < win.shape[0]:
        raise ValueError(
            f"image {x.shape[0]}x{x.shape[1]} smaller than the {win.shape[0]}-pixel window")
    c1 = (0.01 * 1.0) ** 2
    c2 = (0.03 * 1.0) ** 2
    vals = []
    for c in range(x.shape[2]):
        xc, yc = x[:, :, c], y[:, :, c]
        mx = _local_mean(xc, win)
        my = _local_mean(yc, win)
        sxx = _local_mean(xc * xc, win) - mx * mx
        syy = _local_mean(yc * yc, win) - my * my
        sxy = _local_mean(xc * yc, win) - mx * my
        num = (2.0 * mx * my + c1) * (2.0 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def sre(x, y) -> float:
    """Signal-to-reconstruction-error in dB; ``x`` is the reference."""
    x, y = _check_same_shape(x, y, "sre")
    if x.ndim != 3:
        raise ShapeError(f"sre expects (H,W,C), got {x.shape}")
    vals = []
    for c in range(x.shape[2]):
        mean_ref = float(np.mean(x[:, :, c]))
        if mean_ref == 0.0:
            raise ValueError(f"sre undefined: reference channel {c} has zero mean")
        mse = float(np.mean(np.square(x[:, :, c] - y[:, :, c])))
        vals.append(float("inf") if mse == 0.0 else 10.0 * np.log10(mean_ref ** 2 / mse))
    return float(np.mean(vals))


def sam(x, y) -> float:
    """Mean spectral angle over pixels, in degrees; near-zero vectors skipped."""
    x, y = _check_same_shape(x, y, "sam")
    if x.ndim != 3:
        raise ShapeError(f"sam expects (H,W,C), got {x.shape}")
    xv = x.reshape(-1, x.shape[2])
    yv = y.reshape(-1, y.shape[2])
    nx = np.linalg.norm(xv, axis=1)
    ny = np.linalg.norm(yv, axis=1)
    ok = (nx >= SAM_NORM_FLOOR) & (ny >= SAM_NORM_FLOOR)
    if not np.any(ok):
        raise ValueError("sam undefined: every pixel vector is degenerate")
    cosang = np.sum(xv[ok] * yv[ok], axis=1) / (nx[ok] * ny[ok])
    angles = np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0)))
    return float(np.mean(angles))


# ---------------------------------------------------------------------------
# batch evaluation
# ---------------------------------------------------------------------------

@dataclass
class MetricRow:
    image_id: int
    psnr_db: float
    ssim: float
    sre_db: float
    sam_deg: float


@dataclass
class MetricReport:
    """Per-image metric rows plus aggregates over the finite entries."""

    method: str
    rows: list = field(default_factory=list)

    def _finite_mean(self, values):
        finite = [v for v in values if np.isfinite(v)]
        return float(np.mean(finite)) if finite else float("inf")

    @property
    def mean_psnr_db(self):
        return self._finite_mean([r.psnr_db for r in self.rows])

    @property
    def mean_ssim(self):
        return float(np.mean([r.ssim for r in self.rows]))

    @property
    def mean_sre_db(self):
        return self._finite_mean([r.sre_db for r in self.rows])

    @property
    def mean_sam_deg(self):
        return float(np.mean([r.sam_deg for r in self.rows]))

    @property
    def infinite_psnr_count(self):
        return sum(1 for r in self.rows if not np.isfinite(r.psnr_db))


def score_pair(image_id, estimate, target, method, report):
    report.rows.append(MetricRow(
        image_id=image_id,
        psnr_db=psnr(estimate, target),
        ssim=ssim(estimate, target),
        sre_db=sre(target, estimate),
        sam_deg=sam(estimate, target),
    ))


def evaluate_split(params: ParameterSet, test_pairs):
    """Score the actor output and the plain upsampled baseline per pair."""
    if not test_pairs:
        raise ValueError("evaluate_split needs a non-empty test set")
    model = MetricReport("spoa")
    baseline = MetricReport("bicubic")
    for pair in test_pairs:
        s_hat = np.clip(actor_apply(pair.s0, params), 0.0, 1.0)
        score_pair(pair.id, s_hat, pair.s_star, "spoa", model)
        score_pair(pair.id, pair.s0, pair.s_star, "bicubic", baseline)
    return model, baseline


def write_metric_report(reports, path):
    """CSV with one row per image per method plus a summary row per method."""
    lines = ["image_id,method,psnr_db,ssim,sre_db,sam_deg"]
    for report in reports:
        for r in report.rows:
            lines.append(f"{r.image_id},{report.method},{r.psnr_db!r},{r.ssim!r},"
                         f"{r.sre_db!r},{r.sam_deg!r}")
    for report in reports:
        lines.append(f"mean,{report.method},{report.mean_psnr_db!r},{report.mean_ssim!r},"
                     f"{report.mean_sre_db!r},{report.mean_sam_deg!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
