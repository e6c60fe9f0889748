"""FOV-masked confusion statistics, ROC/AUC, threshold selection, SSIM/PSNR.

Pixel metrics count only pixels inside the FOV mask. AUC is the Mann-Whitney
rank statistic (ties half-counted), exactly the area under the ROC traced
over all distinct thresholds. The operating threshold maximizes Youden's
J = Se + Sp - 1 over the distinct score values. SSIM/PSNR compare the
probability map against the binary ground truth over the whole image.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .tensor import ShapeError

log = logging.getLogger(__name__)

_SSIM_WIN = 11
_SSIM_SIGMA = 1.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03


class MetricError(ValueError):
    pass


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other):
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.tn + other.tn, self.fn + other.fn)


@dataclass
class PixelMetrics:
    """Rates from one confusion table; a zero denominator leaves the metric
    undefined (None), never silently 0."""
    se: float = None
    sp: float = None
    acc: float = None
    precision: float = None
    f1: float = None


def _same_dims(*maps):
    shapes = {m.shape for m in maps}
    if len(shapes) != 1:
        raise ShapeError(f"metric maps disagree in shape: {sorted(shapes)}")


def confusion_at_threshold(prob, gt, fov, t):
    """Counts over fov==1 pixels with the rule prob >= t -> vessel."""
    _same_dims(prob, gt, fov)
    inside = np.asarray(fov, bool)
    pred = np.asarray(prob)[inside] >= t
    actual = np.asarray(gt, bool)[inside]
    tp = int(np.count_nonzero(pred & actual))
    fp = int(np.count_nonzero(pred & ~actual))
    fn = int(np.count_nonzero(~pred & actual))
    tn = int(np.count_nonzero(~pred & ~actual))
    return ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn)


def pixel_metrics(c):
    m = PixelMetrics()
    if c.tp + c.fn:
        m.se = c.tp / (c.tp + c.fn)
    if c.tn + c.fp:
        m.sp = c.tn / (c.tn + c.fp)
    if c.total:
        m.acc = (c.tp + c.tn) / c.total
    if c.tp + c.fp:
        m.precision = c.tp / (c.tp + c.fp)
    if m.precision is not None and m.se is not None and m.precision + m.se:
        m.f1 = 2.0 * m.precision * m.se / (m.precision + m.se)
    return m


def _fov_scores(prob, gt, fov):
    _same_dims(prob, gt, fov)
    inside = np.asarray(fov, bool)
    scores = np.asarray(prob)[inside].astype(np.float64)
    labels = np.asarray(gt, bool)[inside]
    n_pos = int(np.count_nonzero(labels))
    if n_pos == 0 or n_pos == labels.size:
        raise MetricError("both classes must be present inside the FOV")
    return scores, labels


def roc_auc(prob, gt, fov):
    """P(random vessel pixel outscores a random background pixel), ties 1/2."""
    scores, labels = _fov_scores(prob, gt, fov)
    ranks = rankdata(scores)
    n_pos = int(np.count_nonzero(labels))
    n_neg = labels.size - n_pos
    pos_rank_sum = ranks[labels].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0)
                 / (n_pos * n_neg))


def optimal_threshold(prob, gt, fov):
    """Distinct score value maximizing Youden's J; ties -> the largest."""
    scores, labels = _fov_scores(prob, gt, fov)
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    # cumulative counts at thresholds equal to each distinct score,
    # descending, with the rule prob >= t
    boundary = np.nonzero(np.diff(s))[0]
    last = np.concatenate([boundary, [s.size - 1]])
    tp = np.cumsum(y)[last]
    fp = np.cumsum(~y)[last]
    n_pos = tp[-1]
    n_neg = fp[-1]
    j = tp / n_pos + (n_neg - fp) / n_neg - 1.0
    best = int(np.argmax(j))  # first max in descending order = largest t
    t_star = float(s[last[best]])
    if j[best] <= 0:
        log.warning("optimal_threshold: best Youden J is %.4f <= 0 "
                    "(uninformative or inverted predictor)", j[best])
    return t_star


def _gauss_kernel(win, sigma):
    r = (win - 1) // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def _gauss_valid(img, k):
    r = (k.size - 1) // 2
    out = ndimage.correlate1d(img, k, axis=0, mode="constant")
    out = ndimage.correlate1d(out, k, axis=1, mode="constant")
    return out[r:-r, r:-r]


def ssim(a, b):
    """Gaussian-windowed SSIM (11x11, sigma 1.5, K1=.01, K2=.03, L=1),
    averaged over all fully-contained window positions."""
    _same_dims(a, b)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if min(a.shape) < _SSIM_WIN:
        raise ShapeError(f"ssim: maps smaller than the {_SSIM_WIN}x"
                         f"{_SSIM_WIN} window")
    k = _gauss_kernel(_SSIM_WIN, _SSIM_SIGMA)
    mu_a = _gauss_valid(a, k)
    mu_b = _gauss_valid(b, k)
    var_a = _gauss_valid(a * a, k) - mu_a * mu_a
    var_b = _gauss_valid(b * b, k) - mu_b * mu_b
    cov = _gauss_valid(a * b, k) - mu_a * mu_b
    c1 = _SSIM_K1 ** 2
    c2 = _SSIM_K2 ** 2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def psnr(a, b):
    """10*log10(1/MSE) with MAX=1; identical maps give +inf."""
    _same_dims(a, b)
    mse = float(np.mean((np.asarray(a, np.float64)
                         - np.asarray(b, np.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


@dataclass
class ImageEval:
    """Raw per-image evaluation inputs plus timing."""
    id: str
    prob: np.ndarray
    gt: np.ndarray
    fov: np.ndarray
    ms: float = 0.0


@dataclass
class Row:
    id: str
    threshold: float = None
    metrics: PixelMetrics = field(default_factory=PixelMetrics)
    auc: float = None
    ssim: float = None
    psnr: float = None
    ms: float = None


@dataclass
class EvalReport:
    rows: list
    summary: Row
    threshold: float
    mode: str
    fps: float = None


def aggregate(evals, mode="pooled", threshold=None):
    """Fold per-image evaluations into an EvalReport.

    pooled (default): one dataset-level threshold chosen on the pooled
    scores, confusion counts summed over images, AUC on the pooled scores.
    mean: same shared threshold, but dataset-level rates are the arithmetic
    means of the per-image rates. SSIM/PSNR are averaged per image in both
    modes.
    """
    if not evals:
        raise MetricError("aggregate: no per-image evaluations")
    if mode not in ("pooled", "mean"):
        raise MetricError(f"aggregate: unknown mode {mode!r}")
    pooled_scores = np.concatenate([e.prob[np.asarray(e.fov, bool)]
                                    for e in evals])
    pooled_gt = np.concatenate([np.asarray(e.gt, bool)[np.asarray(e.fov,
                                                                  bool)]
                                for e in evals])
    ones = np.ones(pooled_scores.shape, bool)
    if threshold is None:
        threshold = optimal_threshold(pooled_scores, pooled_gt, ones)

    rows = []
    counts = ConfusionCounts()
    for e in evals:
        c = confusion_at_threshold(e.prob, e.gt, e.fov, threshold)
        counts = counts + c
        rows.append(Row(id=e.id, threshold=threshold,
                        metrics=pixel_metrics(c),
                        auc=roc_auc(e.prob, e.gt, e.fov),
                        ssim=ssim(e.prob, np.asarray(e.gt, np.float64)),
                        psnr=psnr(e.prob, np.asarray(e.gt, np.float64)),
                        ms=e.ms))

    mean_ssim = float(np.mean([r.ssim for r in rows]))
    mean_psnr = float(np.mean([r.psnr for r in rows]))
    mean_ms = float(np.mean([r.ms for r in rows]))
    if mode == "pooled":
        summary_metrics = pixel_metrics(counts)
        summary_auc = roc_auc(pooled_scores, pooled_gt, ones)
    else:
        def mean_of(getter):
            vals = [getter(r) for r in rows]
            vals = [v for v in vals if v is not None]
            return float(np.mean(vals)) if vals else None
        summary_metrics = PixelMetrics(
            se=mean_of(lambda r: r.metrics.se),
            sp=mean_of(lambda r: r.metrics.sp),
            acc=mean_of(lambda r: r.metrics.acc),
            precision=mean_of(lambda r: r.metrics.precision),
            f1=mean_of(lambda r: r.metrics.f1))
        summary_auc = float(np.mean([r.auc for r in rows]))
    summary = Row(id=mode, threshold=threshold, metrics=summary_metrics,
                  auc=summary_auc, ssim=mean_ssim, psnr=mean_psnr,
                  ms=mean_ms)
    fps = 1000.0 / mean_ms if mean_ms > 0 else None
    return EvalReport(rows=rows, summary=summary, threshold=threshold,
                      mode=mode, fps=fps)


def _fmt(v):
    if v is None:
        return ""
    if v == math.inf:
        return "inf"
    return f"{v:.6f}"


def report_csv_lines(report):
    lines = ["id,threshold,se,sp,acc,f1,auc,ssim,psnr,ms"]
    for r in report.rows + [report.summary]:
        m = r.metrics
        lines.append(",".join([
            r.id, _fmt(r.threshold), _fmt(m.se), _fmt(m.sp), _fmt(m.acc),
            _fmt(m.f1), _fmt(r.auc), _fmt(r.ssim), _fmt(r.psnr),
            "" if r.ms is None else f"{r.ms:.2f}",
        ]))
    return lines


def report_text(report):
    header = f"{'image':<24}{'Se':>9}{'Sp':>9}{'Acc':>9}{'F1':>9}" \
             f"{'AUC':>9}{'SSIM':>9}{'PSNR':>9}{'ms':>9}"
    out = [f"threshold = {report.threshold:.6f} ({report.mode} mode)",
           header, "-" * len(header)]

    def cell(v):
        if v is None:
            return f"{'n/a':>9}"
        if v == math.inf:
            return f"{'inf':>9}"
        return f"{v:9.4f}"

    for r in report.rows + [report.summary]:
        m = r.metrics
        out.append(f"{r.id:<24}" + cell(m.se) + cell(m.sp) + cell(m.acc)
                   + cell(m.f1) + cell(r.auc) + cell(r.ssim) + cell(r.psnr)
                   + ("" if r.ms is None else f"{r.ms:9.1f}"))
    if report.fps:
        out.append(f"fps (1/mean forward time): {report.fps:.3f}")
    return "\n".join(out)
