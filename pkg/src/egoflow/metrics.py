"""Error metrics: angular error, endpoint error, structure MAE and the
fraction of bad points, plus measurement density."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import EmptyMask, LengthMismatch

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ErrorReport:
    trans_aae_deg: float = float("nan")
    rot_aae_deg: float = float("nan")
    rot_epe_deg: float = float("nan")   # degrees/frame
    mae: float = float("nan")
    pobp: float = float("nan")
    density: float = float("nan")
    n_points: int = 0

    def to_json(self) -> str:
        d = {"schema_version": SCHEMA_VERSION}
        d.update(asdict(self))
        return json.dumps(d, indent=2)

    @staticmethod
    def csv_header() -> str:
        return ("schema_version,trans_aae_deg,rot_aae_deg,rot_epe_deg,"
                "mae,pobp,density,n_points")

    def to_csv_row(self) -> str:
        vals = ",".join(repr(float(v)) for v in
                        (self.trans_aae_deg, self.rot_aae_deg,
                         self.rot_epe_deg, self.mae, self.pobp, self.density))
        return f"{SCHEMA_VERSION},{vals},{self.n_points}"


def _as_vector_set(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[None, :]
    return a


def aae(estimated, truth) -> float:
    """Mean angular distance in degrees between paired vectors.

    Pairs where either vector has zero norm are skipped.
    """
    est = _as_vector_set(estimated)
    tru = _as_vector_set(truth)
    if est.shape != tru.shape:
        raise LengthMismatch(f"{est.shape} vs {tru.shape}")
    ne = np.linalg.norm(est, axis=1)
    nt = np.linalg.norm(tru, axis=1)
    keep = (ne > 0) & (nt > 0)
    if not np.any(keep):
        return float("nan")
    cosang = np.sum(est[keep] * tru[keep], axis=1) / (ne[keep] * nt[keep])
    return float(np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0))).mean())


def epe(estimated, truth) -> float:
    """Mean Euclidean distance between paired vectors."""
    est = _as_vector_set(estimated)
    tru = _as_vector_set(truth)
    if est.shape != tru.shape:
        raise LengthMismatch(f"{est.shape} vs {tru.shape}")
    return float(np.mean(np.linalg.norm(est - tru, axis=1)))


def mae(estimated, truth, mask=None) -> float:
    """Mean absolute difference over masked points."""
    est = np.asarray(estimated, dtype=float)
    tru = np.asarray(truth, dtype=float)
    if est.shape != tru.shape:
        raise LengthMismatch(f"{est.shape} vs {tru.shape}")
    if mask is None:
        mask = np.ones(est.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if not np.any(mask):
        raise EmptyMask("mae over an empty mask")
    return float(np.mean(np.abs(est[mask] - tru[mask])))


def pobp(estimated, truth, mask=None, threshold: float = 1.0,
         full_raster: bool = False) -> float:
    """Fraction of points whose absolute error exceeds the threshold.

    With full_raster the bad points are still counted inside the mask but
    the denominator is the whole raster.
    """
    est = np.asarray(estimated, dtype=float)
    tru = np.asarray(truth, dtype=float)
    if est.shape != tru.shape:
        raise LengthMismatch(f"{est.shape} vs {tru.shape}")
    if mask is None:
        mask = np.ones(est.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if not np.any(mask):
        raise EmptyMask("pobp over an empty mask")
    bad = np.abs(est[mask] - tru[mask]) > threshold
    if full_raster:
        return float(np.sum(bad) / est.size)
    return float(np.mean(bad))


def density(field) -> float:
    """Valid entries over total pixels, for flow fields and structures."""
    if hasattr(field, "density"):
        return float(field.density())
    raise TypeError(f"no density defined for {type(field)!r}")
