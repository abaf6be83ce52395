"""Image metrics, summaries and significance tests."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage, stats

from .scene import InvalidInput

# ITU-R BT.601 luma
LUMA = np.array([0.299, 0.587, 0.114])
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class MetricSummary:
    mean: float
    std: float
    n: int
    per_sample: np.ndarray

    @classmethod
    def from_samples(cls, values):
        v = np.asarray(values, dtype=np.float64)
        return cls(float(v.mean()), float(v.std()), int(v.size), v)

    def __str__(self):
        return f"{self.mean:.4f} ± {self.std:.4f}"

    def to_dict(self):
        return {"mean": self.mean, "std": self.std, "n": self.n, "per_sample": self.per_sample.tolist()}


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInput(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b):
    """Mean squared difference over every pixel and channel."""
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def to_luma(img):
    img = np.asarray(img, dtype=np.float64)
    return img @ LUMA if img.ndim == 3 else img


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a, b, data_range=1.0):
    """Mean SSIM over all valid 11x11 Gaussian windows of the luma images."""
    a, b = _pair(a, b)
    x, y = to_luma(a), to_luma(b)
    if min(x.shape) < SSIM_WINDOW:
        raise InvalidInput(f"images must be at least {SSIM_WINDOW} pixels on each side")
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    w = gaussian_window()
    half = SSIM_WINDOW // 2

    def filt(img):
        return ndimage.correlate(img, w, mode="constant")[half:-half, half:-half]

    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x ** 2
    syy = filt(y * y) - mu_y ** 2
    sxy = filt(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def significance(errors_a, errors_b, test="welch"):
    """Two-sided p-value for a difference between two error vectors.

    ``test``: "welch" (default), "paired" (paired t-test), "wilcoxon" or "mannwhitney".
    """
    a = np.asarray(errors_a, dtype=np.float64)
    b = np.asarray(errors_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise InvalidInput("need at least two samples per group")
    if test in ("paired", "wilcoxon") and a.shape != b.shape:
        raise InvalidInput("paired tests need equal-length samples")
    if np.array_equal(a, b):
        return 1.0
    if test == "welch":
        if a.std() == 0 and b.std() == 0:
            return 0.0
        p = stats.ttest_ind(a, b, equal_var=False).pvalue
    elif test == "paired":
        d = a - b
        if d.std() == 0:
            return 0.0
        p = stats.ttest_rel(a, b).pvalue
    elif test == "wilcoxon":
        p = stats.wilcoxon(a, b).pvalue
    elif test == "mannwhitney":
        p = stats.mannwhitneyu(a, b, alternative="two-sided").pvalue
    else:
        raise InvalidInput(f"unknown test {test!r}")
    return float(p)
