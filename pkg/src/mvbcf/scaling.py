"""Per-component outcome standardization shared by the samplers and pipeline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import StandardizationError


@dataclass
class OutcomeScale:
    """Affine map between the original outcome scale and the fitting scale."""

    center: np.ndarray  # (p,)
    scale: np.ndarray   # (p,)

    def transform(self, Y: np.ndarray) -> np.ndarray:
        return (Y - self.center) / self.scale

    def inverse(self, Y_std: np.ndarray) -> np.ndarray:
        return Y_std * self.scale + self.center


def standardize_outcomes(Y: np.ndarray) -> tuple[np.ndarray, OutcomeScale]:
    """Center and scale each outcome column to mean 0, sd 1.

    Raises :class:`StandardizationError` for a constant (degenerate) column.
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=float).T).T
    center = Y.mean(axis=0)
    scale = Y.std(axis=0)
    if np.any(scale == 0.0) or not np.all(np.isfinite(scale)):
        bad = [int(k) for k in np.flatnonzero(~(scale > 0.0))]
        raise StandardizationError(f"outcome component(s) {bad} are constant or non-finite")
    fit_scale = OutcomeScale(center, scale)
    return fit_scale.transform(Y), fit_scale


def check_standardized(y: np.ndarray, what: str = "outcome") -> None:
    """Refuse outcomes that were not standardized by the caller."""
    y = np.asarray(y, dtype=float)
    mean = y.mean(axis=0)
    sd = y.std(axis=0)
    if np.any(np.abs(mean) > 0.1) or np.any(np.abs(sd - 1.0) > 0.2):
        raise StandardizationError(
            f"{what} must be standardized to mean 0, sd 1 "
            f"(got mean {np.round(mean, 3)}, sd {np.round(sd, 3)})"
        )
