"""Accuracy, retention and Frechet distance kernels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class MatrixSqrtError(ArithmeticError):
    pass


@dataclass
class FeatureStats:
    mu: np.ndarray
    sigma: np.ndarray

    @classmethod
    def from_features(cls, feats) -> "FeatureStats":
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] < 2:
            raise ValueError("need at least two feature vectors")
        return cls(feats.mean(axis=0), np.cov(feats, rowvar=False))


def top1_accuracy(predictions, labels) -> float:
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError(f"length mismatch: {predictions.shape} vs {labels.shape}")
    if predictions.size == 0:
        raise ValueError("empty prediction set")
    return float(np.mean(predictions == labels))


def retention_curve(accuracies: dict, full_accuracy: float) -> dict:
    """Accuracy at each sweep value divided by full-observation accuracy."""
    if full_accuracy <= 0:
        raise ZeroDivisionError("full-observation accuracy must be positive")
    return {k: v / full_accuracy for k, v in accuracies.items()}


def _psd_sqrt(m, tol=1e-10):
    m = 0.5 * (m + m.T)
    w, v = np.linalg.eigh(m)
    if w.min() < -tol * max(1.0, abs(w).max()):
        raise MatrixSqrtError(
            f"matrix has eigenvalue {w.min():.3e} < 0; pass PSD covariances or clamp negative eigenvalues at 0"
        )
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(a: FeatureStats, b: FeatureStats, tol: float = 1e-10) -> float:
    """``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))``.

    The cross term uses ``Tr((S_a^(1/2) S_b S_a^(1/2))^(1/2))``, which equals
    the trace of ``(S_a S_b)^(1/2)`` but only needs symmetric eigendecompositions.
    Tiny negative eigenvalues from round-off are clamped at 0.
    """
    mu_a, mu_b = np.atleast_1d(a.mu).astype(np.float64), np.atleast_1d(b.mu).astype(np.float64)
    sa, sb = np.atleast_2d(a.sigma).astype(np.float64), np.atleast_2d(b.sigma).astype(np.float64)
    if mu_a.shape != mu_b.shape or sa.shape != sb.shape or sa.shape != (mu_a.size, mu_a.size):
        raise ValueError("feature dimensions differ")
    ra = _psd_sqrt(sa, tol)
    _psd_sqrt(sb, tol)
    cross = _psd_sqrt(ra @ sb @ ra, tol)
    d = float(np.sum((mu_a - mu_b) ** 2) + np.trace(sa) + np.trace(sb) - 2.0 * np.trace(cross))
    return max(d, 0.0)
