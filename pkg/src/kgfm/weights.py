"""
WeightMatrix: per-module weights over PBM surrogates.

alpha[m, n] is the weight of PBM m in module n; every column sums to 1.
"""

from dataclasses import dataclass
from typing import Dict, Mapping, Sequence, Tuple, Union

import numpy as np

from .errors import SchemaError, ShapeError
from .registry import MODULES, PBM_IDS

COLUMN_TOLERANCE = 1e-9


@dataclass(frozen=True, eq=False)
class WeightMatrix:
    alpha: np.ndarray
    pbm_ids: Tuple[str, ...] = PBM_IDS
    modules: Tuple[str, ...] = MODULES

    def __post_init__(self) -> None:
        alpha = np.array(self.alpha, dtype=np.float64)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "pbm_ids", tuple(self.pbm_ids))
        object.__setattr__(self, "modules", tuple(self.modules))
        if alpha.shape != (len(self.pbm_ids), len(self.modules)):
            raise ShapeError("WeightMatrix", alpha.shape, (len(self.pbm_ids), len(self.modules)))
        if not np.isfinite(alpha).all() or (alpha < 0).any() or (alpha > 1).any():
            raise SchemaError("WeightMatrix entries must lie in [0, 1]")
        sums = alpha.sum(axis=0)
        if np.abs(sums - 1.0).max() > COLUMN_TOLERANCE:
            raise SchemaError(f"WeightMatrix columns must sum to 1, got {sums.tolist()}")

    @property
    def M(self) -> int:
        return len(self.pbm_ids)

    @property
    def N(self) -> int:
        return len(self.modules)

    @classmethod
    def one_hot(cls, pbm_id: str, pbm_ids: Sequence[str] = PBM_IDS,
                modules: Sequence[str] = MODULES) -> "WeightMatrix":
        alpha = np.zeros((len(pbm_ids), len(modules)))
        alpha[list(pbm_ids).index(pbm_id), :] = 1.0
        return cls(alpha, tuple(pbm_ids), tuple(modules))

    @classmethod
    def from_first(cls, first: Union[Mapping[str, float], Sequence[float]],
                   pbm_ids: Sequence[str] = PBM_IDS, modules: Sequence[str] = MODULES) -> "WeightMatrix":
        """Two-PBM matrix from the first PBM's weight per module."""
        if len(pbm_ids) != 2:
            raise ShapeError("WeightMatrix.from_first", (len(pbm_ids),), detail="needs exactly two PBMs")
        if isinstance(first, Mapping):
            w = np.array([float(first[m]) for m in modules])
        else:
            w = np.asarray(first, dtype=np.float64)
        return cls(np.stack([w, 1.0 - w]), tuple(pbm_ids), tuple(modules))

    @classmethod
    def uniform(cls, pbm_ids: Sequence[str] = PBM_IDS, modules: Sequence[str] = MODULES) -> "WeightMatrix":
        return cls(np.full((len(pbm_ids), len(modules)), 1.0 / len(pbm_ids)), tuple(pbm_ids), tuple(modules))

    def weight(self, pbm_id: str, module: str) -> float:
        return float(self.alpha[self.pbm_ids.index(pbm_id), self.modules.index(module)])

    def column(self, module: str) -> Dict[str, float]:
        n = self.modules.index(module)
        return {p: float(self.alpha[m, n]) for m, p in enumerate(self.pbm_ids)}

    def renormalized(self, module: str, producers: Sequence[str]) -> Dict[str, float]:
        """Weights of ``module`` restricted to ``producers`` and rescaled to sum to 1."""
        if not producers:
            raise SchemaError(f"no PBM produces the variable in module '{module}'")
        col = self.column(module)
        total = sum(col[p] for p in producers)
        if total <= 0:
            # all mass sits on PBMs that lack the variable: share it evenly
            return {p: 1.0 / len(producers) for p in producers}
        return {p: col[p] / total for p in producers}

    def reordered(self, pbm_ids: Sequence[str]) -> "WeightMatrix":
        rows = [self.pbm_ids.index(p) for p in pbm_ids]
        return WeightMatrix(self.alpha[rows], tuple(pbm_ids), self.modules)

    def to_report(self) -> Dict[str, Dict[str, float]]:
        return {m: self.column(m) for m in self.modules}
