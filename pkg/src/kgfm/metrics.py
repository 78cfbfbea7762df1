"""R², RMSE and the MetricsReport table."""

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np
import pandas as pd

from .errors import DataError

log = logging.getLogger("kgfm.metrics")

VARIANTS = ("KGFM-A", "KGFM-B", "KGFM-MS", "LSTM-baseline")
REGIMES = ("zero-shot", "FT")
COLUMNS = ["variant", "regime", "target", "r2", "rmse", "site"]
POOLED = "ALL"


def _aligned(pred: Sequence[float], obs: Sequence[float]) -> tuple:
    p = np.asarray(pred, dtype=np.float64).reshape(-1)
    o = np.asarray(obs, dtype=np.float64).reshape(-1)
    if p.shape != o.shape:
        raise DataError(f"prediction and observation lengths differ: {p.shape[0]} vs {o.shape[0]}")
    return p, o


def r2(pred: Sequence[float], obs: Sequence[float]) -> float:
    p, o = _aligned(pred, obs)
    if o.size < 2:
        raise DataError("r2 needs at least 2 observations")
    ss_tot = float(((o - o.mean()) ** 2).sum())
    if ss_tot == 0.0:
        raise DataError("r2 is undefined for observations with zero variance")
    return 1.0 - float(((o - p) ** 2).sum()) / ss_tot


def rmse(pred: Sequence[float], obs: Sequence[float]) -> float:
    p, o = _aligned(pred, obs)
    if o.size == 0:
        raise DataError("rmse of an empty series")
    return float(np.sqrt(np.mean((p - o) ** 2)))


@dataclass
class MetricsReport:
    rows: List[Dict[str, Any]] = field(default_factory=list)

    def add(self, variant: str, regime: str, target: str, pred: np.ndarray, obs: np.ndarray,
            site: str = POOLED) -> Optional[Dict[str, Any]]:
        """Score the finite entries of ``obs``; zero-variance sites are skipped with a warning."""
        keep = np.isfinite(obs)
        try:
            row = {"variant": variant, "regime": regime, "target": target,
                   "r2": r2(pred[keep], obs[keep]), "rmse": rmse(pred[keep], obs[keep]), "site": site}
        except DataError as e:
            if site == POOLED:
                raise
            log.warning("Skipping %s/%s/%s at %s: %s", variant, regime, target, site, e)
            return None
        self.rows.append(row)
        return row

    def extend(self, other: "MetricsReport") -> None:
        self.rows.extend(other.rows)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=COLUMNS)

    def pooled(self) -> pd.DataFrame:
        df = self.to_frame()
        return df[df["site"] == POOLED].reset_index(drop=True)

    def lookup(self, variant: str, regime: str, target: str, site: str = POOLED) -> Dict[str, Any]:
        for row in self.rows:
            if (row["variant"], row["regime"], row["target"], row["site"]) == (variant, regime, target, site):
                return row
        raise DataError(f"no metrics row for {variant}/{regime}/{target}/{site}")

    def write_csv(self, path: os.PathLike) -> Path:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            self.to_frame().to_csv(path, index=False)
        except OSError as e:
            raise DataError(f"cannot write metrics {path}: {e}") from e
        return path

    @classmethod
    def read_csv(cls, path: os.PathLike) -> "MetricsReport":
        try:
            df = pd.read_csv(path)
        except OSError as e:
            raise DataError(f"cannot read metrics {path}: {e}") from e
        missing = set(COLUMNS) - set(df.columns)
        if missing:
            raise DataError(f"{path} is not a metrics report (missing {sorted(missing)})")
        return cls(df[COLUMNS].to_dict(orient="records"))


def recompute_from_predictions(records: Iterable[Dict[str, Any]], target: str) -> Dict[str, float]:
    """Score exported prediction rows {"y_hat": {...}, "y": {...}} directly."""
    pred, obs = [], []
    for rec in records:
        if target in rec.get("y", {}) and target in rec.get("y_hat", {}):
            pred.append(rec["y_hat"][target])
            obs.append(rec["y"][target])
    return {"r2": r2(pred, obs), "rmse": rmse(pred, obs)}
