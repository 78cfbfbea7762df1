"""
Two analytic process-model stand-ins, PBM-A and PBM-B.

Both read the same 16 daily drivers and run the same daily dynamics
(bucket soil water, smoothed soil temperature, logistic canopy with a light-use
GPP, fertilizer-driven mineral N pools with pulse-like N2O). PBM-B multiplies
its rate constants by fixed factors from the config and reports a narrower
schema: no deeper ammonium layers, and ET never below zero.
"""

import copy
import json
import logging
import math
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from .errors import ConfigError, DataError, SchemaError
from .numerics import make_rng
from .registry import (
    DRIVERS, MODULES, OBSERVED_TARGETS, REGISTRY, TARGETS,
    module_of_target, producers, schema_for,
)
from .weights import WeightMatrix

log = logging.getLogger("kgfm.synthetic_pbm")

MIN_T = 30
FERTILIZER_LEVELS = np.linspace(0.0, 33.6, 20)
WATER_LAYERS = (1, 3, 5)
_COL = {name: i for i, name in enumerate(DRIVERS)}


# -------------------------
# Types
# -------------------------

@dataclass
class DriverSeries:
    site_id: str
    features: np.ndarray  # (T, 16), columns in registry.DRIVERS order

    @property
    def T(self) -> int:
        return self.features.shape[0]

    @property
    def days(self) -> np.ndarray:
        return np.arange(1, self.T + 1)

    def column(self, name: str) -> np.ndarray:
        return self.features[:, _COL[name]]

    def site_constant(self, name: str) -> float:
        return float(self.features[0, _COL[name]])

    def record(self, t: int) -> Dict[str, float]:
        return {name: float(self.features[t, i]) for i, name in enumerate(DRIVERS)}

    def window(self, start: int, stop: int) -> "DriverSeries":
        return DriverSeries(self.site_id, self.features[start:stop])

    def validate(self) -> None:
        f = self.features
        if f.ndim != 2 or f.shape[1] != len(DRIVERS):
            raise SchemaError(f"{self.site_id}: drivers must have shape (T, {len(DRIVERS)}), got {f.shape}")
        if not np.isfinite(f).all():
            raise SchemaError(f"{self.site_id}: non-finite driver value")
        if (self.column("TMAX") < self.column("TMIN")).any():
            raise SchemaError(f"{self.site_id}: TMAX < TMIN")
        if (self.column("HUMIDITY_MAX") < self.column("HUMIDITY_MIN")).any():
            raise SchemaError(f"{self.site_id}: HUMIDITY_MAX < HUMIDITY_MIN")
        if (self.column("PREC") < 0).any():
            raise SchemaError(f"{self.site_id}: negative PREC")
        if not np.isin(self.column("PLANTT"), (0.0, 1.0)).all():
            raise SchemaError(f"{self.site_id}: PLANTT must be 0 or 1")
        for name in ("PDOY", "FDOY"):
            d = self.column(name)
            if (d < 1).any() or (d > self.T).any():
                raise SchemaError(f"{self.site_id}: {name} outside 1..{self.T}")


@dataclass
class FluxBundle:
    """One module's variables over T days; NaN marks a day without a value."""

    module: str
    schema_id: str
    names: Tuple[str, ...]
    values: np.ndarray  # (T, K)

    def __post_init__(self) -> None:
        REGISTRY.require(self.names)
        if self.values.shape[1:] != (len(self.names),):
            raise SchemaError(f"{self.module}: values {self.values.shape} do not match {len(self.names)} names")

    def get(self, name: str) -> np.ndarray:
        try:
            return self.values[:, self.names.index(name)]
        except ValueError:
            raise SchemaError(f"'{name}' not in {self.schema_id} {self.module} schema") from None

    def record(self, t: int) -> Dict[str, float]:
        return {n: float(v) for n, v in zip(self.names, self.values[t]) if math.isfinite(v)}


@dataclass
class PBMOutput:
    model_id: str
    site_id: str
    bundles: Dict[str, FluxBundle]
    water_residuals: np.ndarray  # (T, 3) per-layer balance residual

    def get(self, name: str) -> np.ndarray:
        return self.bundles[module_of_target(name)].get(name)

    def has(self, name: str) -> bool:
        return name in self.bundles[module_of_target(name)].names

    def targets(self, t: int) -> Dict[str, float]:
        out = {}
        for name in TARGETS:
            if self.has(name):
                v = float(self.get(name)[t])
                if math.isfinite(v):
                    out[name] = v
        return out


@dataclass
class ObservationSeries:
    site_id: str
    names: Tuple[str, ...]
    values: np.ndarray  # (T, K)
    mask: np.ndarray  # (T, K) bool

    def __post_init__(self) -> None:
        if not self.names:
            raise SchemaError(f"{self.site_id}: an observation series needs at least one target")
        REGISTRY.require(self.names)

    @property
    def T(self) -> int:
        return self.values.shape[0]

    def record(self, t: int) -> Dict[str, float]:
        return {n: float(self.values[t, k]) for k, n in enumerate(self.names) if self.mask[t, k]}

    def restricted(self, names: Sequence[str]) -> "ObservationSeries":
        idx = [self.names.index(n) for n in names]
        return ObservationSeries(self.site_id, tuple(names), self.values[:, idx], self.mask[:, idx])

    def window(self, start: int, stop: int) -> "ObservationSeries":
        return ObservationSeries(self.site_id, self.names, self.values[start:stop], self.mask[start:stop])


# -------------------------
# Drivers
# -------------------------

def generate_drivers(n_sites: int, T: int, seed: int) -> List[DriverSeries]:
    """Seeded daily weather plus per-site soil and management."""
    if n_sites < 1:
        raise DataError(f"n_sites must be >= 1, got {n_sites}")
    if T < MIN_T:
        raise DataError(f"T must be >= {MIN_T} for a minimal season, got {T}")
    return [_site_drivers(i, T, seed) for i in range(n_sites)]


def _site_drivers(index: int, T: int, seed: int) -> DriverSeries:
    rng = make_rng(seed, index)
    doy = (np.arange(T) % 365) + 1
    season = np.sin(2.0 * np.pi * (doy - 105) / 365.0)

    mean_temp = rng.uniform(8.0, 13.0)
    amplitude = rng.uniform(11.0, 15.0)
    anomaly = np.zeros(T)
    shocks = rng.normal(0.0, 2.0, size=T)
    for t in range(1, T):
        anomaly[t] = 0.7 * anomaly[t - 1] + shocks[t]
    tmean = mean_temp + amplitude * season + anomaly
    dtr = np.clip(rng.normal(10.0, 2.0, size=T), 3.0, 18.0)

    p_wet = rng.uniform(0.25, 0.4)
    wet = rng.random(T) < p_wet
    intensity = rng.exponential(6.0, size=T)
    prec = np.where(wet, intensity, 0.0)

    radn = np.clip((17.0 + 9.0 * season) * np.where(wet, 0.6, 1.0) + rng.normal(0.0, 1.5, size=T), 1.0, None)
    hmax = np.clip(rng.normal(88.0, 6.0, size=T) + np.where(wet, 6.0, 0.0), 40.0, 100.0)
    hmin = np.clip(hmax - np.clip(rng.normal(40.0, 10.0, size=T), 5.0, None), 5.0, None)
    wind = rng.gamma(2.0, 1.6, size=T)

    sand = rng.uniform(100.0, 600.0)
    soil = {
        "TBKDS": rng.uniform(1.1, 1.6),
        "TCSAND": sand,
        "TCSILT": rng.uniform(100.0, min(600.0, 900.0 - sand)),
        "TPH": rng.uniform(5.5, 7.5),
        "TSOC": rng.uniform(5.0, 30.0),
    }
    scale = min(1.0, T / 365.0)
    pdoy = max(1, int(round(rng.integers(110, 151) * scale)))
    fdoy = min(T, pdoy + (int(round(30 * scale)) if rng.random() < 0.5 else 0))
    management = {
        "FERTZR_N": float(rng.choice(FERTILIZER_LEVELS)),
        "PDOY": float(pdoy),
        "FDOY": float(fdoy),
        "PLANTT": float(rng.integers(0, 2)),
    }

    columns = {
        "TMAX": tmean + dtr / 2.0, "TMIN": tmean - dtr / 2.0, "PREC": prec, "RADN": radn,
        "HUMIDITY_MAX": hmax, "HUMIDITY_MIN": hmin, "WIND": wind,
        **{k: np.full(T, v) for k, v in {**soil, **management}.items()},
    }
    features = np.stack([np.asarray(columns[name], dtype=np.float64) for name in DRIVERS], axis=1)
    drivers = DriverSeries(f"site{index:03d}", features)
    drivers.validate()
    return drivers


# -------------------------
# Constants
# -------------------------

def pbm_constants(pbm_config: Mapping[str, Any], model_id: str) -> Dict[str, Dict[str, Any]]:
    """Rate constants for ``model_id``; PBM-B applies its factors to PBM-A's."""
    try:
        base = copy.deepcopy(dict(pbm_config["constants"]))
    except KeyError:
        raise ConfigError("[pbm] has no 'constants' section") from None
    if model_id == "PBM-A":
        return base
    if model_id != "PBM-B":
        raise SchemaError(f"unknown PBM '{model_id}'")
    for key, factor in pbm_config.get("pbm_b_factors", {}).items():
        module, _, name = key.partition(".")
        if module not in base or name not in base[module]:
            raise ConfigError(f"pbm_b_factors: unknown constant '{key}'")
        if not 0.7 <= float(factor) <= 1.3:
            raise ConfigError(f"pbm_b_factors: {key}={factor} outside [0.7, 1.3]")
        value = base[module][name]
        if isinstance(value, list):
            base[module][name] = [float(v) * float(factor) for v in value]
        else:
            base[module][name] = float(value) * float(factor)
    return base


# -------------------------
# Simulation
# -------------------------

def simulate(model_id: str, drivers: DriverSeries, pbm_config: Mapping[str, Any],
             initial_water_fraction: Optional[float] = None) -> PBMOutput:
    """Deterministic daily run of one PBM over one site's drivers."""
    drivers.validate()
    k = pbm_constants(pbm_config, model_id)
    T = drivers.T

    thermal = _thermal(drivers, k["thermal"])
    ts1 = 0.5 * (thermal["TMAX_SOIL_1"] + thermal["TMIN_SOIL_1"])
    lai = _canopy(drivers, k["carbon"])
    water, storage, drainage, residuals = _water(drivers, lai, k["water"], clamp_et=(model_id == "PBM-B"),
                                                 initial_fraction=initial_water_fraction)
    carbon = _carbon(drivers, lai, ts1, k["carbon"])
    nitrogen = _nitrogen(drivers, ts1, carbon["GPP"], storage, drainage, k["nitrogen"], k["water"])

    series = {**carbon, "LAI": lai, **water, **thermal, **nitrogen}
    bundles = {}
    for module in MODULES:
        names = schema_for(model_id, module)
        values = np.stack([series[n] for n in names], axis=1)
        bundles[module] = FluxBundle(module, model_id, names, values)
    return PBMOutput(model_id, drivers.site_id, bundles, residuals)


def _thermal(d: DriverSeries, k: Mapping[str, Any]) -> Dict[str, np.ndarray]:
    tmax, tmin = d.column("TMAX"), d.column("TMIN")
    tmean = 0.5 * (tmax + tmin)
    out = {}
    for layer, kappa, damp in zip(WATER_LAYERS, k["smoothing"], k["damping"]):
        damp = min(float(damp), 1.0)
        for label, air in (("TMAX", tmax), ("TMIN", tmin)):
            target = tmean + damp * (air - tmean)
            s = np.empty(d.T)
            prev = float(k["initial_temp"])
            for t in range(d.T):
                prev = prev + kappa * (target[t] - prev)
                s[t] = prev
            out[f"{label}_SOIL_{layer}"] = s
    return out


def _canopy(d: DriverSeries, k: Mapping[str, Any]) -> np.ndarray:
    crop = int(d.site_constant("PLANTT"))
    pdoy = int(d.site_constant("PDOY"))
    tmean = 0.5 * (d.column("TMAX") + d.column("TMIN"))
    gdd = np.cumsum(np.where(d.days >= pdoy, np.maximum(tmean - k["t_base"], 0.0), 0.0))
    r = k["growth_rate"][crop]
    start = expit(-r * k["gdd_half"])
    grow = k["lai_max"][crop] * (expit(r * (gdd - k["gdd_half"])) - start) / (1.0 - start)
    senescence = np.exp(-k["senescence"] * np.maximum(gdd - k["gdd_maturity"], 0.0) / 100.0)
    return np.where(d.days >= pdoy, np.maximum(grow, 0.0) * senescence, 0.0)


def _water(d: DriverSeries, lai: np.ndarray, k: Mapping[str, Any], clamp_et: bool,
           initial_fraction: Optional[float]) -> Tuple[Dict[str, np.ndarray], np.ndarray, np.ndarray, np.ndarray]:
    depth = np.asarray(k["layer_depth_mm"], dtype=np.float64)
    w_fc = k["field_capacity"] * depth
    w_wp = k["wilting_point"] * depth
    w_sat = k["porosity"] * depth
    frac = k["initial_fraction"] if initial_fraction is None else initial_fraction
    w = w_wp + frac * (w_fc - w_wp)

    prec, radn, hmin = d.column("PREC"), d.column("RADN"), d.column("HUMIDITY_MIN")
    T, L = d.T, len(depth)
    storage = np.empty((T, L))
    drainage = np.empty((T, L))
    residuals = np.empty((T, L))
    et_out = np.empty(T)

    for t in range(T):
        f_lai = k["soil_evap_fraction"] + (1.0 - k["soil_evap_fraction"]) * (1.0 - math.exp(-0.5 * lai[t]))
        demand = k["k_et"] * radn[t] * f_lai
        available = max(w[0] - w_wp[0], 0.0)
        evap = min(available, demand)
        # condensation needs a wet surface: none on a bucket at wilting point
        wetness = min(available / (w_fc[0] - w_wp[0]), 1.0)
        dew = k["k_dew"] * max(hmin[t] - k["dew_humidity"], 0.0) * wetness
        et = max(evap - dew, 0.0) if clamp_et else evap - dew
        et_out[t] = et

        inflow = prec[t]
        for layer in range(L):
            out_et = et if layer == 0 else 0.0
            wet = w[layer] + inflow - out_et
            drain = max(k["k_drain"] * (wet - w_fc[layer]), wet - w_sat[layer], 0.0)
            new = wet - drain
            residuals[t, layer] = (new - w[layer]) - (inflow - out_et - drain)
            storage[t, layer] = new
            drainage[t, layer] = drain
            w[layer] = new
            inflow = drain

    series = {f"WTR_{layer}": storage[:, i] / depth[i] for i, layer in enumerate(WATER_LAYERS)}
    series["ET"] = et_out
    return series, storage, drainage, residuals


def _carbon(d: DriverSeries, lai: np.ndarray, ts1: np.ndarray, k: Mapping[str, Any]) -> Dict[str, np.ndarray]:
    crop = int(d.site_constant("PLANTT"))
    tmean = 0.5 * (d.column("TMAX") + d.column("TMIN"))
    f_t = np.exp(-(((tmean - k["t_opt"]) / k["t_width"]) ** 2))
    gpp = k["k_lue"] * d.column("RADN") * (1.0 - np.exp(-0.5 * lai)) * f_t
    rh = k["reco_base"] * (d.site_constant("TSOC") / k["tsoc_ref"]) * k["q10"] ** ((ts1 - 20.0) / 10.0)
    reco = rh + k["autotrophic_fraction"] * gpp

    annual = np.full(d.T, np.nan)
    window = min(int(k["annual_window"]), d.T)
    yield_value = k["harvest_index"][crop] * gpp.sum() * 10.0 / k["carbon_fraction"]
    dsoc_value = float((k["k_residue"] * gpp - rh).sum())
    yield_series, dsoc_series = annual.copy(), annual.copy()
    yield_series[-window:] = yield_value
    dsoc_series[-window:] = dsoc_value
    return {"Reco": reco, "GPP": gpp, "CO2_FLUX": reco - gpp, "Yield": yield_series, "Delta_SOC": dsoc_series}


def _nitrogen(d: DriverSeries, ts1: np.ndarray, gpp: np.ndarray, storage: np.ndarray, drainage: np.ndarray,
              k: Mapping[str, Any], kw: Mapping[str, Any]) -> Dict[str, np.ndarray]:
    T = d.T
    bulk = d.site_constant("TBKDS")
    to_conc = 1.0 / (bulk * k["layer_depth_m"])
    fert_day = int(d.site_constant("FDOY"))
    fert = d.site_constant("FERTZR_N")
    tsoc = d.site_constant("TSOC")
    sat1 = kw["porosity"] * kw["layer_depth_mm"][0]
    water_of_no3 = (0, 0, 1, 1, 2)

    nh4 = np.full(3, k["initial_nh4"])
    no3 = np.full(5, k["initial_no3"])
    out = {n: np.empty(T) for n in ("N2O_FLUX", "NH4_1", "NH4_2", "NH4_3", "NO3_1", "NO3_3", "NO3_5")}

    for t in range(T):
        f_temp = k["q10"] ** ((ts1[t] - 20.0) / 10.0)
        if t + 1 == fert_day:
            nh4[0] += fert
        nh4[0] += k["mineralization"] * tsoc * f_temp

        nit = min(0.9, k["k_nit"] * f_temp) * nh4
        down = k["k_down"] * nh4
        nh4 = nh4 - nit - down
        nh4[1:] += down[:-1]
        no3[:3] += nit

        leach_frac = np.array([min(0.9, k["k_leach"] * drainage[t, w] / max(storage[t, w], 1e-9))
                               for w in water_of_no3])
        leach = leach_frac * no3
        no3 = no3 - leach
        no3[1:] += leach[:-1]

        f_wet = expit(k["wfps_steepness"] * (storage[t, 0] / sat1 - k["wfps_threshold"]))
        no3[0] *= 1.0 - min(0.5, k["k_den"] * f_wet)
        for layer in (0, 1):
            no3[layer] -= min(0.5 * k["k_up"] * gpp[t], 0.5 * no3[layer])

        conc_no3 = no3 * to_conc
        out["N2O_FLUX"][t] = k["k_n2o"] * conc_no3[0] * f_wet * f_temp
        for i in range(3):
            out[f"NH4_{i + 1}"][t] = nh4[i] * to_conc
        for i in (0, 2, 4):
            out[f"NO3_{i + 1}"][t] = conc_no3[i]
    return out


# -------------------------
# Datasets
# -------------------------

def dataset_records(output: PBMOutput, drivers: DriverSeries) -> Iterator[Dict[str, Any]]:
    for t in range(drivers.T):
        yield {
            "site": drivers.site_id,
            "day": t + 1,
            "x": drivers.record(t),
            "v": {m: output.bundles[m].record(t) for m in MODULES},
            "y": output.targets(t),
        }


def split_sites(site_ids: Sequence[str], validation_fraction: float, seed: int) -> Dict[str, List[str]]:
    rng = make_rng(seed, 7919)
    order = [site_ids[i] for i in rng.permutation(len(site_ids))]
    n_val = max(1, int(math.ceil(validation_fraction * len(site_ids)))) if len(site_ids) > 1 else 0
    return {"train": sorted(order[n_val:]), "validation": sorted(order[:n_val])}


def make_dataset(model_id: str, drivers: Sequence[DriverSeries], out_dir: os.PathLike,
                 pbm_config: Mapping[str, Any], seed: int, validation_fraction: float = 0.2) -> Dict[str, Path]:
    """Simulate every site and write ``<model>.jsonl`` plus the site split manifest."""
    out_dir = Path(out_dir)
    t0 = time.monotonic()
    data_path = out_dir / f"{model_id}.jsonl"
    split_path = out_dir / f"{model_id}.split.json"
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(data_path, "w", encoding="utf-8") as fh:
            for d in drivers:
                output = simulate(model_id, d, pbm_config)
                for rec in dataset_records(output, d):
                    fh.write(json.dumps(rec) + "\n")
        split = split_sites([d.site_id for d in drivers], validation_fraction, seed)
        with open(split_path, "w", encoding="utf-8") as fh:
            json.dump(split, fh, indent=2)
    except OSError as e:
        raise DataError(f"cannot write dataset {getattr(e, 'filename', None) or data_path}: {e}") from e
    log.info("Wrote %s: %d sites x %d days in %.0fms", data_path, len(drivers),
             drivers[0].T if drivers else 0, (time.monotonic() - t0) * 1000)
    return {"data": data_path, "split": split_path}


@dataclass
class SiteRecordSet:
    drivers: DriverSeries
    output: PBMOutput


def load_dataset(path: os.PathLike) -> Dict[str, SiteRecordSet]:
    """Read a JSON-lines dataset back into per-site arrays."""
    path = Path(path)
    model_id = path.name.split(".")[0]
    rows: Dict[str, List[Dict[str, Any]]] = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    rec = json.loads(line)
                    rows.setdefault(rec["site"], []).append(rec)
    except OSError as e:
        raise DataError(f"cannot read dataset {path}: {e}") from e
    except (json.JSONDecodeError, KeyError) as e:
        raise DataError(f"malformed dataset {path}: {e}") from e

    sites = {}
    for site, recs in sorted(rows.items()):
        recs.sort(key=lambda r: r["day"])
        features = np.array([[r["x"][n] for n in DRIVERS] for r in recs], dtype=np.float64)
        bundles = {}
        for module in MODULES:
            names = schema_for(model_id, module)
            values = np.array([[r["v"][module].get(n, np.nan) for n in names] for r in recs], dtype=np.float64)
            bundles[module] = FluxBundle(module, model_id, names, values)
        drivers = DriverSeries(site, features)
        output = PBMOutput(model_id, site, bundles, np.zeros((len(recs), len(WATER_LAYERS))))
        sites[site] = SiteRecordSet(drivers, output)
    return sites


def load_split(path: os.PathLike) -> Dict[str, List[str]]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as e:
        raise DataError(f"cannot read split manifest {path}: {e}") from e


# -------------------------
# Synthetic observations
# -------------------------

def synthesize_observations(weights: WeightMatrix, drivers: DriverSeries, outputs: Mapping[str, PBMOutput],
                            targets: Sequence[str] = OBSERVED_TARGETS) -> ObservationSeries:
    """Mix PBM outputs under ``weights``; absent variables renormalize over producing PBMs."""
    for pbm, out in outputs.items():
        if out.bundles[MODULES[0]].values.shape[0] != drivers.T:
            raise DataError(f"{pbm} output for {out.site_id} is not aligned with the drivers")
    columns, masks = [], []
    for name in targets:
        module = module_of_target(name)
        makers = [p for p in producers(name, weights.pbm_ids) if p in outputs]
        if not makers:
            raise SchemaError(f"no PBM produces '{name}'")
        alpha = weights.renormalized(module, makers)
        value = np.zeros(drivers.T)
        for pbm in makers:
            value = value + alpha[pbm] * outputs[pbm].get(name)
        mask = np.isfinite(value)
        columns.append(np.where(mask, value, np.nan))
        masks.append(mask)
    return ObservationSeries(drivers.site_id, tuple(targets), np.stack(columns, axis=1), np.stack(masks, axis=1))


def add_observation_noise(obs: ObservationSeries, sigma: Mapping[str, float], seed: int) -> ObservationSeries:
    rng = make_rng(seed, 104729, int(obs.site_id[-3:]) if obs.site_id[-3:].isdigit() else 0)
    noise = rng.normal(0.0, 1.0, size=obs.values.shape) * np.array([sigma[n] for n in obs.names])
    values = np.where(obs.mask, obs.values + noise, np.nan)
    return ObservationSeries(obs.site_id, obs.names, values, obs.mask.copy())
