"""
Experiment stages and the run directory they share.

    <output_dir>/
        config.json            snapshot of the config that produced the run
        stages.json            completed stages (resume skips them)
        vocab.txt
        data/                  PBM-A.jsonl, PBM-B.jsonl, split manifests, downstream.jsonl
        checkpoints/           surrogates, decoder, selector, baseline, fine-tuned copies
        reports/               fidelity.csv, recovery.csv, weights.json, metrics.csv, predictions/

Every stage reads what earlier stages wrote, so any stage can be rerun alone.
"""

import json
import logging
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from . import checkpoint as ckpt_io
from . import numerics as nx
from .baseline import BaselineLSTM, baseline_examples, finetune_baseline, train_baseline_lstm
from .config import ExperimentConfig, config_snapshot
from .decoder import (
    Decoder, PredictionSeries, decode, export_predictions, finetune, make_examples, train_decoder,
)
from .encoder import (
    SurrogateModel, combine_bundles, fidelity_rows, load_surrogates, save_surrogates, surrogate_outputs,
    train_surrogate, write_fidelity_report,
)
from .errors import DataError, KGFMError, StageError
from .linearizer import Tokenizer
from .metrics import POOLED, MetricsReport, r2
from .registry import DRIVERS, MODULES, PBM_IDS
from .selector import (
    Selector, build_weight_grid, infer_weights_pooled, recovery_curve, train_selector, write_recovery_csv,
    write_weight_report,
)
from .synthetic_pbm import (
    DriverSeries, FluxBundle, ObservationSeries, PBMOutput, add_observation_noise, generate_drivers,
    load_dataset, load_split, make_dataset, simulate, synthesize_observations,
)
from .weights import WeightMatrix

log = logging.getLogger("kgfm.pipeline")

STAGES = ("generate", "train-surrogates", "train-decoder", "train-selector", "synthesize-obs", "finetune", "evaluate")
VARIANTS = ("KGFM-A", "KGFM-B", "KGFM-MS", "LSTM-baseline")


# -------------------------
# Downstream task
# -------------------------

@dataclass
class DownstreamSite:
    drivers: DriverSeries
    observations: ObservationSeries
    first_day: int = 1

    @property
    def site_id(self) -> str:
        return self.drivers.site_id

    @property
    def T(self) -> int:
        return self.drivers.T

    @property
    def days(self) -> np.ndarray:
        return np.arange(self.first_day, self.first_day + self.T)

    def window(self, start: int, stop: int) -> "DownstreamSite":
        return DownstreamSite(self.drivers.window(start, stop), self.observations.window(start, stop),
                              self.first_day + start)


def temporal_split(dataset: Mapping[str, DownstreamSite], boundary: int) -> Tuple[Dict[str, DownstreamSite],
                                                                                  Dict[str, DownstreamSite]]:
    """Days 1..boundary train, boundary+1..T test, for every site."""
    if not dataset:
        raise DataError("temporal_split: empty dataset")
    train, test = {}, {}
    for site, d in sorted(dataset.items()):
        if not 1 <= boundary < d.T:
            raise DataError(f"temporal_split: boundary {boundary} leaves an empty side for {site} (T={d.T})")
        train[site] = d.window(0, boundary)
        test[site] = d.window(boundary, d.T)
    return train, test


def write_downstream(sites: Mapping[str, DownstreamSite], truth: Mapping[str, ObservationSeries],
                     path: os.PathLike) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            for site, d in sorted(sites.items()):
                for t in range(d.T):
                    fh.write(json.dumps({"site": site, "day": t + 1, "x": d.drivers.record(t),
                                         "y": d.observations.record(t), "truth": truth[site].record(t)}) + "\n")
    except OSError as e:
        raise DataError(f"cannot write downstream data {path}: {e}") from e
    return path


def load_downstream(path: os.PathLike, targets: Sequence[str]) -> Dict[str, DownstreamSite]:
    rows: Dict[str, List[Dict[str, Any]]] = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    rec = json.loads(line)
                    rows.setdefault(rec["site"], []).append(rec)
    except OSError as e:
        raise DataError(f"cannot read downstream data {path}: {e}") from e
    sites = {}
    for site, recs in sorted(rows.items()):
        recs.sort(key=lambda r: r["day"])
        x = DriverSeries(site, np.array([[r["x"][n] for n in DRIVERS] for r in recs], dtype=np.float64))
        values = np.array([[r["y"].get(n, np.nan) for n in targets] for r in recs], dtype=np.float64)
        obs = ObservationSeries(site, tuple(targets), values, np.isfinite(values))
        sites[site] = DownstreamSite(x, obs)
    return sites


def observation_noise(truth: Mapping[str, ObservationSeries], boundary: int, fraction: float) -> Dict[str, float]:
    """σ per target: ``fraction`` of its standard deviation over the training days."""
    sigma = {}
    names = next(iter(truth.values())).names
    for k, name in enumerate(names):
        vals = np.concatenate([o.values[:boundary, k][o.mask[:boundary, k]] for o in truth.values()])
        sigma[name] = fraction * float(np.std(vals)) if vals.size else 0.0
    return sigma


# -------------------------
# Run directory
# -------------------------

class Run:
    """Paths and lazily loaded artifacts of one experiment directory."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.root = cfg.output_dir
        self.data_dir = self.root / "data"
        self.ckpt_dir = self.root / "checkpoints"
        self.report_dir = self.root / "reports"
        self.state_path = self.root / "stages.json"
        self._cache: Dict[str, Any] = {}

    @property
    def seed(self) -> int:
        return self.cfg.seed

    @property
    def snapshot(self) -> Dict[str, Any]:
        return config_snapshot(self.cfg)

    # state

    def completed(self) -> Dict[str, Any]:
        if not self.state_path.exists():
            return {}
        try:
            return json.loads(self.state_path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise DataError(f"cannot read stage state {self.state_path}: {e}") from e

    def mark(self, stage: str, elapsed_ms: float) -> None:
        state = self.completed()
        state[stage] = {"done": True, "ms": round(elapsed_ms)}
        self.state_path.write_text(json.dumps(state, indent=2), encoding="utf-8")

    def prepare(self, resume: bool = True) -> None:
        """Create the run directory; a changed config invalidates completed stages."""
        self.root.mkdir(parents=True, exist_ok=True)
        cfg_path = self.root / "config.json"
        snap = json.loads(json.dumps(self.snapshot))
        if cfg_path.exists():
            previous = json.loads(cfg_path.read_text(encoding="utf-8"))
            # the run directory's own location does not affect results
            changed = {k: v for k, v in previous.items() if k != "paths"} != \
                {k: v for k, v in snap.items() if k != "paths"}
            if changed or not resume:
                if changed:
                    log.warning("Config differs from the one in %s; every stage will rerun", self.root)
                self.state_path.unlink(missing_ok=True)
        cfg_path.write_text(json.dumps(snap, indent=2, sort_keys=True), encoding="utf-8")

    # artifacts

    def tokenizer(self) -> Tokenizer:
        if "tokenizer" not in self._cache:
            path = self.root / "vocab.txt"
            fresh = Tokenizer.from_registry(max_len=self.cfg.embedder.max_len)
            if path.exists():
                self._cache["tokenizer"] = Tokenizer.load(path, expected_hash=fresh.vocab_hash,
                                                          max_len=self.cfg.embedder.max_len)
            else:
                fresh.save(path)
                self._cache["tokenizer"] = fresh
        return self._cache["tokenizer"]

    def datasets(self) -> Dict[str, Dict[str, Any]]:
        if "datasets" not in self._cache:
            self._cache["datasets"] = {p: load_dataset(self.data_dir / f"{p}.jsonl") for p in PBM_IDS}
        return self._cache["datasets"]

    def split(self) -> Dict[str, List[str]]:
        return load_split(self.data_dir / f"{PBM_IDS[0]}.split.json")

    def sites(self, pbm: str, part: str) -> List[Tuple[DriverSeries, PBMOutput]]:
        data = self.datasets()[pbm]
        return [(data[s].drivers, data[s].output) for s in self.split()[part]]

    def selector_sites(self, part: str) -> List[Tuple[DriverSeries, Dict[str, PBMOutput]]]:
        ds = self.datasets()
        return [(ds[PBM_IDS[0]][s].drivers, {p: ds[p][s].output for p in PBM_IDS}) for s in self.split()[part]]

    def surrogates(self) -> Dict[Tuple[str, str], SurrogateModel]:
        if "surrogates" not in self._cache:
            self._cache["surrogates"] = load_surrogates(self.ckpt_dir)
        return self._cache["surrogates"]

    def decoder(self, name: str = "decoder") -> Decoder:
        return Decoder.from_checkpoint(ckpt_io.load(self.ckpt_dir / f"{name}.json", kind="decoder"), self.tokenizer())

    def baseline(self, name: str = "baseline") -> BaselineLSTM:
        return BaselineLSTM.from_checkpoint(ckpt_io.load(self.ckpt_dir / f"{name}.json", kind="baseline"))

    def selector(self) -> Selector:
        return Selector.from_checkpoint(ckpt_io.load(self.ckpt_dir / "selector.json", kind="selector"), self.tokenizer())

    def downstream(self) -> Dict[str, DownstreamSite]:
        if "downstream" not in self._cache:
            self._cache["downstream"] = load_downstream(self.data_dir / "downstream.jsonl",
                                                        self.cfg.downstream.targets)
        return self._cache["downstream"]

    def downstream_outputs(self) -> Dict[str, Dict[str, Dict[str, FluxBundle]]]:
        """Surrogate bundles per downstream site, computed once."""
        if "downstream_outputs" not in self._cache:
            sur = self.surrogates()
            self._cache["downstream_outputs"] = {s: surrogate_outputs(sur, d.drivers)
                                                 for s, d in self.downstream().items()}
        return self._cache["downstream_outputs"]

    def variant_weights(self) -> Dict[str, WeightMatrix]:
        path = self.report_dir / "weights.json"
        try:
            report = json.loads(path.read_text(encoding="utf-8"))
        except OSError as e:
            raise DataError(f"cannot read inferred weights {path}: {e}") from e
        alpha = np.array([[report[m][p] for m in MODULES] for p in PBM_IDS])
        return {"KGFM-A": WeightMatrix.one_hot("PBM-A"), "KGFM-B": WeightMatrix.one_hot("PBM-B"),
                "KGFM-MS": WeightMatrix(alpha)}


# -------------------------
# Stages
# -------------------------

def stage_generate(run: Run) -> None:
    cfg = run.cfg
    drivers = generate_drivers(cfg.data.n_sites, cfg.data.T, cfg.seed)
    for pbm in PBM_IDS:
        make_dataset(pbm, drivers, run.data_dir, cfg.pbm, cfg.seed, cfg.data.validation_fraction)
    run._cache.pop("datasets", None)
    run.tokenizer()


def stage_train_surrogates(run: Run) -> None:
    cfg = run.cfg
    trained: Dict[Tuple[str, str], SurrogateModel] = {}
    rows: List[Dict[str, Any]] = []
    for i, pbm in enumerate(PBM_IDS):
        train, holdout = run.sites(pbm, "train"), run.sites(pbm, "validation")
        for j, module in enumerate(MODULES):
            model = SurrogateModel(pbm, module, cfg.encoder, nx.make_rng(cfg.seed, 11, i, j))
            model, _ = train_surrogate(model, train, cfg.encoder.epochs, cfg.encoder.lr, cfg.seed,
                                       cfg.encoder.batch_size)
            trained[(pbm, module)] = model
            rows += fidelity_rows(model, train, holdout)
    save_surrogates(trained, run.ckpt_dir, run.snapshot, cfg.seed)
    write_fidelity_report(rows, run.report_dir / "fidelity.csv")
    run._cache["surrogates"] = trained


def _simulated_examples(run: Run, d: Decoder, part: str) -> List:
    """Decoder sequences: each PBM's surrogate bundles (one-hot) against that PBM's simulated targets."""
    sur = run.surrogates()
    examples = []
    for pbm in PBM_IDS:
        sites = run.sites(pbm, part)
        weights = WeightMatrix.one_hot(pbm)
        combined = {x.site_id: combine_bundles(surrogate_outputs(sur, x), weights) for x, _ in sites}
        drivers = {x.site_id: x for x, _ in sites}
        targets = {x.site_id: out for x, out in sites}
        for ex in make_examples(d, combined, drivers, targets):
            ex.site_id = f"{pbm}:{ex.site_id}"
            examples.append(ex)
    return examples


def _decoder_fidelity(run: Run, d: Decoder) -> List[Dict[str, Any]]:
    rows = []
    for pbm in PBM_IDS:
        sites = run.sites(pbm, "validation")
        weights = WeightMatrix.one_hot(pbm)
        preds, truth = [], []
        for x, out in sites:
            preds.append(decode(d, combine_bundles(surrogate_outputs(run.surrogates(), x), weights), x))
            truth.append(out)
        for name in d.targets:
            p = np.concatenate([s.get(name) for s in preds])
            o = np.concatenate([t.get(name) for t in truth])
            keep = np.isfinite(o)
            try:
                score = r2(p[keep], o[keep])
            except DataError:
                score = float("nan")
            rows.append({"pbm": pbm, "module": "decoder", "variable": name, "r2_train": float("nan"),
                         "r2_holdout": score})
    return rows


def stage_train_decoder(run: Run) -> None:
    cfg = run.cfg
    decoder = Decoder(run.tokenizer(), cfg.embedder, cfg.decoder, nx.make_rng(cfg.seed, 21))
    decoder, _ = train_decoder(decoder, _simulated_examples(run, decoder, "train"), cfg.decoder.epochs,
                               cfg.decoder.lr, cfg.seed)
    ckpt_io.save(decoder.to_checkpoint(run.snapshot, cfg.seed), run.ckpt_dir / "decoder.json")

    ds = run.datasets()
    examples = []
    for pbm in PBM_IDS:
        train_ids = run.split()["train"]
        examples += baseline_examples({s: ds[pbm][s].drivers for s in train_ids},
                                      {s: ds[pbm][s].output for s in train_ids}, tag=f"{pbm}:")
    baseline, _ = train_baseline_lstm(examples, cfg.decoder, cfg.seed)
    ckpt_io.save(baseline.to_checkpoint(run.snapshot, cfg.seed), run.ckpt_dir / "baseline.json")

    fid_path = run.report_dir / "fidelity.csv"
    rows = _decoder_fidelity(run, decoder)
    if fid_path.exists():
        previous = pd.read_csv(fid_path)
        rows = previous[previous["module"] != "decoder"].to_dict(orient="records") + rows
    write_fidelity_report(rows, fid_path)


def stage_train_selector(run: Run) -> None:
    cfg = run.cfg
    grid = build_weight_grid(len(PBM_IDS), len(MODULES), cfg.selector.grid_step)
    selector = Selector(run.tokenizer(), cfg.embedder, cfg.selector, nx.make_rng(cfg.seed, 31))
    selector, _ = train_selector(selector, run.selector_sites("train"), grid, cfg.selector.epochs,
                                 cfg.selector.lr, cfg.seed)
    ckpt_io.save(selector.to_checkpoint(run.snapshot, cfg.seed), run.ckpt_dir / "selector.json")

    holdout = run.selector_sites("validation")
    rows = []
    for module in MODULES:
        rows += recovery_curve(selector, holdout, module, observables=cfg.selector.observables,
                               window=cfg.selector.window)
    write_recovery_csv(rows, run.report_dir / "recovery.csv")


def _downstream_preset(run: Run) -> WeightMatrix:
    cfg = run.cfg
    preset = WeightMatrix.from_first(cfg.downstream.weights)
    axis = build_weight_grid(len(PBM_IDS), len(MODULES), cfg.selector.grid_step).axis
    if all(any(abs(w - a) < 1e-9 for a in axis) for w in cfg.downstream.weights.values()):
        log.warning("Downstream preset %s lies on the selector training grid", cfg.downstream.weights)
    return preset


def stage_synthesize_obs(run: Run) -> None:
    cfg = run.cfg
    dcfg = cfg.downstream
    seed = cfg.seed + dcfg.seed_offset
    preset = _downstream_preset(run)
    drivers = generate_drivers(dcfg.n_sites, dcfg.T, seed)
    truth = {}
    for x in drivers:
        outputs = {p: simulate(p, x, cfg.pbm) for p in PBM_IDS}
        truth[x.site_id] = synthesize_observations(preset, x, outputs, dcfg.targets)
    sigma = observation_noise(truth, dcfg.boundary, dcfg.noise_fraction)
    sites = {x.site_id: DownstreamSite(x, add_observation_noise(truth[x.site_id], sigma, seed)) for x in drivers}
    write_downstream(sites, truth, run.data_dir / "downstream.jsonl")
    (run.report_dir).mkdir(parents=True, exist_ok=True)
    (run.report_dir / "downstream_preset.json").write_text(
        json.dumps({"weights": preset.to_report(), "noise_sigma": sigma}, indent=2), encoding="utf-8")
    run._cache.pop("downstream", None)
    run._cache.pop("downstream_outputs", None)


def _variant_examples(run: Run, d: Decoder, weights: WeightMatrix, sites: Mapping[str, DownstreamSite],
                      boundary: Optional[int]) -> List:
    outputs = run.downstream_outputs()
    combined = {s: combine_bundles(outputs[s], weights) for s in sites}
    return make_examples(d, combined, {s: x.drivers for s, x in sites.items()},
                         {s: x.observations for s, x in sites.items()}, boundary=boundary)


def stage_finetune(run: Run) -> None:
    cfg = run.cfg
    boundary = cfg.downstream.boundary
    full = run.downstream()
    train, _ = temporal_split(full, boundary)

    selector = run.selector()
    inference = infer_weights_pooled(selector, [(d.observations, d.drivers) for d in train.values()])
    write_weight_report(inference, run.report_dir / "weights.json")
    log.info("Inferred weights: %s", inference.weights.to_report())

    decoder = run.decoder()
    for variant, weights in run.variant_weights().items():
        examples = _variant_examples(run, decoder, weights, full, boundary)
        tuned, _ = finetune(decoder, examples, cfg.decoder.finetune_epochs, cfg.decoder.finetune_lr, cfg.seed,
                            boundary=boundary, label=f"finetune {variant}")
        ckpt_io.save(tuned.to_checkpoint(run.snapshot, cfg.seed, meta={"variant": variant}),
                     run.ckpt_dir / f"decoder_ft_{variant}.json")

    examples = baseline_examples({s: d.drivers for s, d in full.items()},
                                 {s: d.observations for s, d in full.items()}, boundary=boundary)
    tuned_base, _ = finetune_baseline(run.baseline(), examples, cfg.decoder.finetune_epochs,
                                      cfg.decoder.finetune_lr, cfg.seed, boundary=boundary)
    ckpt_io.save(tuned_base.to_checkpoint(run.snapshot, cfg.seed), run.ckpt_dir / "baseline_ft.json")


def _predict(run: Run, variant: str, regime: str) -> List[PredictionSeries]:
    full = run.downstream()
    if variant == "LSTM-baseline":
        model = run.baseline("baseline" if regime == "zero-shot" else "baseline_ft")
        return [model.predict(d.drivers) for d in full.values()]
    d = run.decoder("decoder" if regime == "zero-shot" else f"decoder_ft_{variant}")
    weights = run.variant_weights()[variant]
    outputs = run.downstream_outputs()
    return [decode(d, combine_bundles(outputs[s], weights), x.drivers) for s, x in full.items()]


def evaluate(run: Run, variants: Sequence[str] = VARIANTS) -> MetricsReport:
    """Score test days (after the boundary) of the downstream observations."""
    cfg = run.cfg
    boundary = cfg.downstream.boundary
    full = run.downstream()
    report = MetricsReport()
    for variant in variants:
        for regime in ("zero-shot", "FT"):
            preds = _predict(run, variant, regime)
            pooled_p: Dict[str, List[np.ndarray]] = {t: [] for t in cfg.downstream.targets}
            pooled_o: Dict[str, List[np.ndarray]] = {t: [] for t in cfg.downstream.targets}
            for pred in preds:
                obs = full[pred.site_id].observations
                for k, target in enumerate(obs.names):
                    p = pred.get(target)[boundary:]
                    o = np.where(obs.mask[boundary:, k], obs.values[boundary:, k], np.nan)
                    pooled_p[target].append(p)
                    pooled_o[target].append(o)
                    report.add(variant, regime, target, p, o, site=pred.site_id)
            for target in cfg.downstream.targets:
                report.add(variant, regime, target, np.concatenate(pooled_p[target]),
                           np.concatenate(pooled_o[target]), site=POOLED)
            export_predictions(preds, run.report_dir / "predictions" / f"{variant}_{regime}.jsonl",
                               observations={s: d.observations for s, d in full.items()},
                               days=(boundary + 1, cfg.downstream.T), variant=variant, regime=regime)
    return report


def stage_evaluate(run: Run) -> None:
    report = evaluate(run)
    report.write_csv(run.report_dir / "metrics.csv")
    for row in report.pooled().to_dict(orient="records"):
        log.info("%-14s %-9s %-9s R2 %.3f RMSE %.4g", row["variant"], row["regime"], row["target"],
                 row["r2"], row["rmse"])


STAGE_FUNCTIONS: Dict[str, Callable[[Run], None]] = {
    "generate": stage_generate,
    "train-surrogates": stage_train_surrogates,
    "train-decoder": stage_train_decoder,
    "train-selector": stage_train_selector,
    "synthesize-obs": stage_synthesize_obs,
    "finetune": stage_finetune,
    "evaluate": stage_evaluate,
}


def run_stage(run: Run, stage: str, force: bool = True) -> bool:
    """Run one stage; failures become StageError naming the stage and checkpoint dir."""
    if not force and run.completed().get(stage, {}).get("done"):
        log.info("Stage %s already complete, skipping", stage)
        return False
    log.info("Stage %s starting", stage)
    t0 = time.monotonic()
    try:
        STAGE_FUNCTIONS[stage](run)
    except StageError:
        raise
    except (KGFMError, OSError, ValueError) as e:
        log.error("Stage %s failed after %.0fms: %s", stage, (time.monotonic() - t0) * 1000, e)
        raise StageError(stage, e, str(run.ckpt_dir)) from e
    elapsed = (time.monotonic() - t0) * 1000
    run.mark(stage, elapsed)
    log.info("Stage %s done in %.0fms", stage, elapsed)
    return True


def run_experiment(cfg: ExperimentConfig, resume: bool = True) -> Dict[str, Any]:
    """All stages in order; completed stages are skipped when ``resume``."""
    run = Run(cfg)
    run.prepare(resume=resume)
    t0 = time.monotonic()
    for stage in STAGES:
        run_stage(run, stage, force=not resume)
    log.info("Experiment finished in %.0fms: %s", (time.monotonic() - t0) * 1000, run.root)
    return {
        "metrics": MetricsReport.read_csv(run.report_dir / "metrics.csv"),
        "run_dir": run.root,
        "reports": sorted(str(p.relative_to(run.root)) for p in run.report_dir.rglob("*") if p.is_file()),
    }
