"""
Per-PBM, per-module GRU surrogates and their weighted combination.

A surrogate runs two stacked GRUs in lockstep: GRU1 reads the drivers and
feeds an intermediate head q, GRU2 reads [drivers, q] and feeds the flux head.
The leading dims of q are supervised with the module's slow state variables.
"""

import logging
import math
import os
import time
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from . import checkpoint as ckpt_io
from . import numerics as nx
from .config import EncoderConfig
from .errors import CheckpointError, DataError, NonFiniteError, ShapeError
from .metrics import r2
from .numerics import Params, Standardizer, Tensor
from .registry import DRIVERS, MODULES, PBM_IDS, Q_TARGETS, REGISTRY, schema_for
from .synthetic_pbm import DriverSeries, FluxBundle, PBMOutput
from .weights import WeightMatrix

log = logging.getLogger("kgfm.encoder")

NORMALIZED_LIMIT = 50.0
COMBINED = "combined"

SiteData = Tuple[DriverSeries, PBMOutput]


# -------------------------
# GRU
# -------------------------

def init_gru(rng: np.random.Generator, params: Params, prefix: str, n_in: int, hidden: int) -> None:
    for gate in ("z", "r", "h"):
        nx.init_linear(rng, params, f"{prefix}.{gate}", n_in + hidden, hidden)


def gru_cell(x_t: nx.ArrayLike, h_prev: nx.ArrayLike, params: Mapping[str, Tensor], prefix: str = "gru") -> Tensor:
    """
    z = σ(W_z[x,h] + b_z), r = σ(W_r[x,h] + b_r),
    h̃ = tanh(W_h[x, r∘h] + b_h), h' = (1 − z)∘h + z∘h̃
    """
    x, h = nx.as_tensor(x_t), nx.as_tensor(h_prev)
    expected = params[f"{prefix}.z.W"].shape[0]
    if x.shape[:-1] != h.shape[:-1] or x.shape[-1] + h.shape[-1] != expected:
        raise ShapeError("gru_cell", x.shape, h.shape, detail=f"expects {expected} = input + hidden")
    xh = nx.concat([x, h], axis=-1)
    z = nx.sigmoid(nx.linear(xh, params, f"{prefix}.z"))
    r = nx.sigmoid(nx.linear(xh, params, f"{prefix}.r"))
    cand = nx.tanh(nx.linear(nx.concat([x, nx.mul(r, h)], axis=-1), params, f"{prefix}.h"))
    return nx.add(nx.mul(nx.sub(1.0, z), h), nx.mul(z, cand))


# -------------------------
# Surrogate
# -------------------------

class SurrogateModel:
    def __init__(self, pbm_id: str, module: str, cfg: EncoderConfig, rng: np.random.Generator):
        if module not in MODULES:
            raise DataError(f"unknown module '{module}'")
        self.pbm_id = pbm_id
        self.module = module
        self.cfg = cfg
        self.names: Tuple[str, ...] = schema_for(pbm_id, module)
        self.q_names: Tuple[str, ...] = Q_TARGETS[module]
        if len(self.q_names) > cfg.q_size:
            raise ShapeError("SurrogateModel", (cfg.q_size,), (len(self.q_names),), detail="q_size too small")
        n_in = len(DRIVERS)
        self.params: Params = {}
        init_gru(rng, self.params, "gru1", n_in, cfg.hidden1)
        nx.init_linear(rng, self.params, "head1", cfg.hidden1, cfg.q_size)
        init_gru(rng, self.params, "gru2", n_in + cfg.q_size, cfg.hidden2)
        nx.init_linear(rng, self.params, "head2", cfg.hidden2, len(self.names))
        self.x_scale: Optional[Standardizer] = None
        self.v_scale: Optional[Standardizer] = None
        self.q_scale: Optional[Standardizer] = None

    @property
    def key(self) -> Tuple[str, str]:
        return self.pbm_id, self.module

    def __repr__(self) -> str:
        return f"SurrogateModel({self.pbm_id}, {self.module}, K={len(self.names)})"

    def fit_scalers(self, sites: Sequence[SiteData]) -> None:
        x = np.concatenate([d.features for d, _ in sites])
        self.x_scale = Standardizer.fit(x)
        self.v_scale = Standardizer.fit(np.concatenate([o.bundles[self.module].values for _, o in sites]))
        self.q_scale = Standardizer.fit(np.concatenate([_q_values(o, self.q_names) for _, o in sites]))

    def normalize(self, drivers: DriverSeries) -> np.ndarray:
        if self.x_scale is None:
            raise DataError(f"{self!r} has no input statistics; train or load it first")
        z = self.x_scale.apply(drivers.features)
        worst = float(np.abs(z).max()) if z.size else 0.0
        if worst > NORMALIZED_LIMIT:
            col = DRIVERS[int(np.abs(z).max(axis=0).argmax())]
            raise DataError(f"{drivers.site_id}: driver {col} is {worst:.1f} sd from the training mean; "
                            "input looks unnormalized")
        return z

    def forward(self, xz: np.ndarray) -> Tuple[Tensor, Tensor]:
        """(B, T, 16) normalized drivers -> q (B, T, Q), v (B, T, K) in normalized units."""
        B, T, _ = xz.shape
        h1 = Tensor(np.zeros((B, self.cfg.hidden1)))
        h2 = Tensor(np.zeros((B, self.cfg.hidden2)))
        qs, hs = [], []
        for t in range(T):
            x_t = xz[:, t, :]
            h1 = gru_cell(x_t, h1, self.params, "gru1")
            q_t = nx.linear(h1, self.params, "head1")
            h2 = gru_cell(nx.concat([x_t, q_t], axis=-1), h2, self.params, "gru2")
            qs.append(q_t)
            hs.append(h2)
        q = nx.stack(qs, axis=1)
        v = nx.linear(nx.stack(hs, axis=1), self.params, "head2")
        return q, v

    def to_checkpoint(self, config: Optional[Dict[str, Any]] = None, seed: Optional[int] = None) -> ckpt_io.Checkpoint:
        norm: Dict[str, np.ndarray] = {}
        for prefix, s in (("x", self.x_scale), ("v", self.v_scale), ("q", self.q_scale)):
            if s is None:
                raise DataError(f"{self!r} has no {prefix} statistics; train it before saving")
            norm.update(s.to_arrays(prefix))
        return ckpt_io.Checkpoint(
            kind="surrogate",
            params={k: v.data for k, v in self.params.items()},
            config=config or {},
            seed=seed,
            normalization=norm,
            meta={"pbm_id": self.pbm_id, "module": self.module, "names": list(self.names),
                  "q_names": list(self.q_names), "encoder": dict(vars(self.cfg))},
        )

    @classmethod
    def from_checkpoint(cls, ck: ckpt_io.Checkpoint) -> "SurrogateModel":
        m = ck.meta
        model = cls(m["pbm_id"], m["module"], EncoderConfig(**m["encoder"]), nx.make_rng(0))
        if list(model.names) != list(m["names"]):
            raise CheckpointError(f"surrogate schema {m['names']} does not match {list(model.names)}")
        ckpt_io.assign(model.params, ck.params, f"{m['pbm_id']}/{m['module']}")
        model.x_scale = Standardizer.from_arrays(ck.normalization, "x")
        model.v_scale = Standardizer.from_arrays(ck.normalization, "v")
        model.q_scale = Standardizer.from_arrays(ck.normalization, "q")
        return model


def _q_values(output: PBMOutput, q_names: Sequence[str]) -> np.ndarray:
    return np.stack([output.get(n) for n in q_names], axis=1)


def surrogate_forward(model: SurrogateModel, x: DriverSeries) -> Tuple[np.ndarray, FluxBundle]:
    q, v = model.forward(model.normalize(x)[None])
    values = model.v_scale.invert(v.data[0])
    return q.data[0], FluxBundle(model.module, model.pbm_id, model.names, values)


# -------------------------
# Training
# -------------------------

def _stack_equal_length(sites: Sequence[SiteData]) -> int:
    lengths = {d.T for d, _ in sites}
    if len(lengths) != 1:
        raise ShapeError("train_surrogate", *[(t,) for t in sorted(lengths)], detail="sites differ in length")
    return lengths.pop()


def _training_arrays(model: SurrogateModel, sites: Sequence[SiteData]) -> Dict[str, np.ndarray]:
    xz = np.stack([model.normalize(d) for d, _ in sites])
    yv = np.stack([model.v_scale.apply(o.bundles[model.module].values) for _, o in sites])
    yq = np.stack([model.q_scale.apply(_q_values(o, model.q_names)) for _, o in sites])
    return {"x": xz, "yv": yv, "mv": np.isfinite(yv), "yq": yq, "mq": np.isfinite(yq)}


def _surrogate_loss(model: SurrogateModel, arrays: Mapping[str, np.ndarray], idx: np.ndarray) -> Tensor:
    q, v = model.forward(arrays["x"][idx])
    nq = len(model.q_names)
    loss = nx.mse(v, arrays["yv"][idx], arrays["mv"][idx])
    return nx.add(loss, nx.mse(nx.slice_(q, (slice(None), slice(None), slice(0, nq))), arrays["yq"][idx], arrays["mq"][idx]))


def train_surrogate(model: SurrogateModel, sites: Sequence[SiteData], epochs: int, lr: float,
                    seed: int, batch_size: Optional[int] = None) -> Tuple[SurrogateModel, List[float]]:
    """
    Fit ``model`` to its own PBM's simulated module outputs.

    Returns the model and its loss curve: entry 0 is the full-data loss before
    any update, entry e the full-data loss after epoch e.
    """
    if not sites:
        raise DataError(f"{model!r}: no training sites")
    for _, out in sites:
        if out.model_id != model.pbm_id:
            raise DataError(f"{model!r} cannot train on {out.model_id} data ({out.site_id})")
    _stack_equal_length(sites)
    if model.x_scale is None:
        model.fit_scalers(sites)
    arrays = _training_arrays(model, sites)
    everything = np.arange(len(sites))
    batch_size = batch_size or model.cfg.batch_size
    rng = nx.make_rng(seed, 101, PBM_IDS.index(model.pbm_id) if model.pbm_id in PBM_IDS else 9,
                      MODULES.index(model.module))
    opt = nx.Adam(model.params, learning_rate=lr)

    t0 = time.monotonic()
    curve = [_surrogate_loss(model, arrays, everything).item()]
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(sites))
        for b, start in enumerate(range(0, len(order), batch_size)):
            idx = order[start:start + batch_size]
            try:
                nx.fit_step(lambda: _surrogate_loss(model, arrays, idx), opt)
            except NonFiniteError as e:
                raise NonFiniteError(e.op, where=f"{model.pbm_id}/{model.module} epoch {epoch} batch {b}") from e
        curve.append(_surrogate_loss(model, arrays, everything).item())
        log.info("Surrogate %s/%s epoch %d/%d loss %.5f", model.pbm_id, model.module, epoch, epochs, curve[-1])
    log.info("Trained surrogate %s/%s in %.0fms (loss %.5f -> %.5f)", model.pbm_id, model.module,
             (time.monotonic() - t0) * 1000, curve[0], curve[-1])
    return model, curve


# -------------------------
# Combination
# -------------------------

def surrogate_outputs(surrogates: Mapping[Tuple[str, str], SurrogateModel],
                      x: DriverSeries) -> Dict[str, Dict[str, FluxBundle]]:
    """Every surrogate's bundle for ``x``: {pbm_id: {module: FluxBundle}}."""
    out: Dict[str, Dict[str, FluxBundle]] = {}
    for (pbm, module), model in sorted(surrogates.items()):
        out.setdefault(pbm, {})[module] = surrogate_forward(model, x)[1]
    return out


def combine_bundles(outputs: Mapping[str, Mapping[str, FluxBundle]], weights: WeightMatrix) -> Dict[str, FluxBundle]:
    """Per variable, Σ α' v over the PBMs that produce it (α' renormalized)."""
    combined = {}
    for module in weights.modules:
        present = [p for p in weights.pbm_ids if p in outputs and module in outputs[p]]
        names = REGISTRY.ordered({n for p in present for n in outputs[p][module].names})
        lengths = {outputs[p][module].values.shape[0] for p in present}
        if len(lengths) > 1:
            raise ShapeError("combine_modules", *[(t,) for t in sorted(lengths)], detail=module)
        columns = []
        for name in names:
            makers = [p for p in present if name in outputs[p][module].names]
            alpha = weights.renormalized(module, makers)
            value = alpha[makers[0]] * outputs[makers[0]][module].get(name)
            for p in makers[1:]:
                value = value + alpha[p] * outputs[p][module].get(name)
            columns.append(value)
        if not columns:
            raise DataError(f"no surrogate output for module '{module}'")
        combined[module] = FluxBundle(module, COMBINED, tuple(names), np.stack(columns, axis=1))
    return combined


def combine_modules(surrogates: Mapping[Tuple[str, str], SurrogateModel], weights: WeightMatrix,
                    x: DriverSeries) -> Dict[str, FluxBundle]:
    return combine_bundles(surrogate_outputs(surrogates, x), weights)


# -------------------------
# Persistence and fidelity
# -------------------------

def save_surrogates(surrogates: Mapping[Tuple[str, str], SurrogateModel], directory: os.PathLike,
                    config: Optional[Dict[str, Any]] = None, seed: Optional[int] = None) -> List[Path]:
    directory = Path(directory)
    return [ckpt_io.save(m.to_checkpoint(config, seed), directory / f"surrogate_{pbm}_{module}.json")
            for (pbm, module), m in sorted(surrogates.items())]


def load_surrogates(directory: os.PathLike, pbm_ids: Sequence[str] = PBM_IDS) -> Dict[Tuple[str, str], SurrogateModel]:
    directory = Path(directory)
    out = {}
    for pbm in pbm_ids:
        for module in MODULES:
            ck = ckpt_io.load(directory / f"surrogate_{pbm}_{module}.json", kind="surrogate")
            out[(pbm, module)] = SurrogateModel.from_checkpoint(ck)
    return out


def _safe_r2(pred: np.ndarray, obs: np.ndarray) -> float:
    keep = np.isfinite(obs)
    try:
        return r2(pred[keep], obs[keep])
    except DataError:
        return math.nan


def fidelity_rows(model: SurrogateModel, train: Sequence[SiteData], holdout: Sequence[SiteData]) -> List[Dict[str, Any]]:
    """One row per output variable: R² on the training and held-out sites."""
    def predictions(sites: Sequence[SiteData]) -> Tuple[np.ndarray, np.ndarray]:
        pred = np.concatenate([surrogate_forward(model, d)[1].values for d, _ in sites])
        obs = np.concatenate([o.bundles[model.module].values for _, o in sites])
        return pred, obs

    p_tr, o_tr = predictions(train)
    p_ho, o_ho = predictions(holdout) if holdout else (None, None)
    rows = []
    for k, name in enumerate(model.names):
        rows.append({
            "pbm": model.pbm_id, "module": model.module, "variable": name,
            "r2_train": _safe_r2(p_tr[:, k], o_tr[:, k]),
            "r2_holdout": _safe_r2(p_ho[:, k], o_ho[:, k]) if p_ho is not None else math.nan,
        })
    return rows


def write_fidelity_report(rows: Sequence[Mapping[str, Any]], path: os.PathLike) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        pd.DataFrame(list(rows), columns=["pbm", "module", "variable", "r2_train", "r2_holdout"]).to_csv(
            path, index=False, float_format="%.6f")
    except OSError as e:
        raise DataError(f"cannot write fidelity report {path}: {e}") from e
    return path
