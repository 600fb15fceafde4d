"""Kernel PCA novelty scores for windows of phasor features.

A model of nominal behaviour is fitted on training windows; a test window
scores the squared distance between its feature-space image and the
projection onto the leading kernel principal components.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DegenerateTraining, ValidationError
from ..phasor import wrap_angles
from .common import require_samples

MIN_TRAIN = 50
DEFAULT_WINDOW = 10
# Gaussian-kernel spectra of noisy phasor windows are flat, so variance-share
# rules keep hundreds of components, reconstruct the training set almost
# exactly and collapse the threshold; a few leading components generalise
DEFAULT_N_COMPONENTS = 5
# training scores for the threshold are computed out of fold; in-sample
# scores are biased low because each window helped shape the components
DEFAULT_FOLDS = 5


@dataclass(frozen=True)
class EventFlag:
    start: int
    end: int
    score: float
    is_anomaly: bool


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = np.sum(a**2, axis=1)[:, None] + np.sum(b**2, axis=1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d, 0.0)


@dataclass
class KernelPCA:
    """Fitted model; use :meth:`fit` to build one."""

    train: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    kernel: str
    width: float
    alphas: np.ndarray  # (N, q) normalised coefficients
    k_col_mean: np.ndarray  # (N,) column means of the training kernel
    k_mean: float
    threshold: float
    train_scores: np.ndarray

    @classmethod
    def fit(
        cls,
        train_windows,
        *,
        kernel: str = "gaussian",
        kernel_width: float | None = None,
        n_components: int | None = None,
        threshold_quantile: float = 0.99,
        folds: int = DEFAULT_FOLDS,
    ) -> "KernelPCA":
        """Fit on ``train_windows``; ``folds`` < 2 uses in-sample training scores."""
        x = np.asarray(train_windows, dtype=float)
        if x.ndim != 2:
            raise ValidationError("windows must be a 2-D array (n_windows, n_features)")
        require_samples(x.shape[0], MIN_TRAIN, "kPCA training")
        if not np.all(np.isfinite(x)):
            raise ValidationError("training windows contain non-finite values")
        if kernel not in ("gaussian", "linear"):
            raise ValidationError(f"unknown kernel {kernel!r}")
        if not 0 < threshold_quantile < 1:
            raise ValidationError("threshold quantile must lie in (0, 1)")
        model = cls._fit_components(x, kernel, kernel_width, n_components)
        if folds >= 2:
            scores = np.empty(x.shape[0])
            for idx in np.array_split(np.arange(x.shape[0]), folds):
                rest = np.setdiff1d(np.arange(x.shape[0]), idx)
                scores[idx] = cls._fit_components(x[rest], kernel, kernel_width, n_components).score(x[idx])
        else:
            scores = model._scores_std(model.train)
        model.train_scores = scores
        model.threshold = float(np.quantile(scores, threshold_quantile))
        return model

    @classmethod
    def _fit_components(cls, x, kernel, kernel_width, n_components) -> "KernelPCA":
        mean = x.mean(axis=0)
        scale = x.std(axis=0)
        if np.all(scale == 0):
            raise DegenerateTraining("all training windows are identical")
        scale = np.where(scale > 0, scale, 1.0)
        z = (x - mean) / scale
        n = z.shape[0]
        width = 0.0
        if kernel == "gaussian":
            if kernel_width is None:
                d = _sq_dists(z, z)
                width = float(np.sqrt(np.median(d[np.triu_indices(n, 1)]) / 2.0))
            else:
                width = float(kernel_width)
            if not width > 0:
                raise DegenerateTraining("kernel width collapsed to zero")
        k = cls._kernel(kernel, width, z, z)
        col = k.mean(axis=0)
        kbar = float(col.mean())
        kc = k - col[:, None] - col[None, :] + kbar
        lam, vec = np.linalg.eigh(kc)
        lam, vec = lam[::-1], vec[:, ::-1]
        tol = max(lam[0], 0.0) * n * np.finfo(float).eps * 10
        keep = lam > tol
        if not np.any(keep):
            raise DegenerateTraining("centred kernel matrix has no positive eigenvalue")
        q = DEFAULT_N_COMPONENTS if n_components is None else int(n_components)
        if q < 1:
            raise ValidationError("n_components must be positive")
        q = min(q, int(keep.sum()))
        alphas = vec[:, :q] / np.sqrt(lam[:q])
        return cls(z, mean, scale, kernel, width, alphas, col, kbar, np.inf, np.empty(0))

    @staticmethod
    def _kernel(kind: str, width: float, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        if kind == "linear":
            return a @ b.T
        return np.exp(-_sq_dists(a, b) / (2.0 * width**2))

    def _scores_std(self, z: np.ndarray) -> np.ndarray:
        kx = self._kernel(self.kernel, self.width, z, self.train)
        kxx = np.sum(z**2, axis=1) if self.kernel == "linear" else np.ones(z.shape[0])
        kxc = kx - kx.mean(axis=1, keepdims=True) - self.k_col_mean[None, :] + self.k_mean
        beta = kxc @ self.alphas
        centred_self = kxx - 2.0 * kx.mean(axis=1) + self.k_mean
        return np.maximum(centred_self - np.sum(beta**2, axis=1), 0.0)

    def score(self, windows) -> np.ndarray:
        x = np.asarray(windows, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.train.shape[1]:
            raise ValidationError(f"windows must have {self.train.shape[1]} features")
        return self._scores_std((x - self.mean) / self.scale)


def detect_events_kpca(
    train_windows,
    test_windows,
    kernel_width: float | None = None,
    n_components: int | None = None,
    threshold_quantile: float = 0.99,
    *,
    kernel: str = "gaussian",
    folds: int = DEFAULT_FOLDS,
    window_bounds=None,
) -> list[EventFlag]:
    """Flag test windows whose reconstruction error exceeds the training quantile.

    ``window_bounds`` optionally gives (start, end) per test window; window
    indices are used otherwise.
    """
    model = KernelPCA.fit(
        train_windows, kernel=kernel, kernel_width=kernel_width, n_components=n_components,
        threshold_quantile=threshold_quantile, folds=folds,
    )
    scores = model.score(test_windows)
    if window_bounds is None:
        window_bounds = [(i, i + 1) for i in range(len(scores))]
    if len(window_bounds) != len(scores):
        raise ValidationError("window_bounds must match the number of test windows")
    return [EventFlag(int(a), int(b), float(s), bool(s > model.threshold)) for (a, b), s in zip(window_bounds, scores)]


def phasor_windows(voltage: dict[str, np.ndarray], reference: str, timestamps=None, window: int = DEFAULT_WINDOW,
                   v_base: dict[str, float] | None = None):
    """Non-overlapping feature windows from per-meter voltage series.

    Features per frame: per-phase |V| of every meter (per unit when ``v_base``
    is given) and per-phase angle difference to the ``reference`` meter for
    every other meter. Returns (features, bounds) with bounds as
    (first, last) timestamps or frame indices.
    """
    if reference not in voltage:
        raise ValidationError(f"reference meter {reference!r} not in voltage set")
    if window < 1:
        raise ValidationError("window must be at least one frame")
    ids = sorted(voltage)
    ref = np.asarray(voltage[reference])
    cols = []
    for m in ids:
        v = np.asarray(voltage[m])
        base = 1.0 if v_base is None else v_base[m]
        cols.append(np.abs(v) / base)
        if m != reference:
            cols.append(wrap_angles(np.angle(v) - np.angle(ref)))
    per_frame = np.concatenate(cols, axis=1)
    n = per_frame.shape[0] // window
    feats = per_frame[: n * window].reshape(n, window * per_frame.shape[1])
    ts = np.arange(per_frame.shape[0]) if timestamps is None else np.asarray(timestamps)
    bounds = [(int(ts[i * window]), int(ts[(i + 1) * window - 1])) for i in range(n)]
    ok = np.all(np.isfinite(feats), axis=1)
    return feats[ok], [b for b, good in zip(bounds, ok) if good]
