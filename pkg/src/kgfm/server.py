"""
Read-only MCP tools over trained artifacts (stdio transport).

Started by ``kgfm serve``. Tools never raise: failures come back as the
structured payload from ``errors.failure_payload``.
"""

import asyncio
import json
import logging
import time
from pathlib import Path
from typing import Any, Dict, List

from mcp.server.fastmcp import FastMCP

from . import checkpoint as ckpt_io
from .config import LOG_LEVEL
from .errors import DataError, failure_payload
from .linearizer import Tokenizer
from .metrics import MetricsReport
from .pipeline import load_downstream
from .registry import REGISTRY
from .selector import Selector, infer_weights_pooled

log = logging.getLogger("kgfm.server")

mcp = FastMCP("kgfm")


def _observed_targets(path: Path) -> List[str]:
    names = set()
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    names |= set(json.loads(line).get("y", {}))
    except OSError as e:
        raise DataError(f"cannot read observations {path}: {e}") from e
    if not names:
        raise DataError(f"{path} holds no observed values")
    return REGISTRY.ordered(names)


def _inspect(path: str) -> Dict[str, Any]:
    return ckpt_io.summary(ckpt_io.load(path))


def _infer(selector_checkpoint: str, observations_path: str) -> Dict[str, Any]:
    ck = ckpt_io.load(selector_checkpoint, kind="selector")
    max_len = ck.meta.get("embedder", {}).get("max_len", 512)
    selector = Selector.from_checkpoint(ck, Tokenizer.from_registry(max_len=max_len))
    obs_path = Path(observations_path)
    sites = load_downstream(obs_path, _observed_targets(obs_path))
    inference = infer_weights_pooled(selector, [(d.observations, d.drivers) for d in sites.values()])
    report = inference.weights.to_report()
    report["n_days"] = int(len(inference.days))
    return report


def _metrics(run_dir: str) -> Dict[str, Any]:
    report = MetricsReport.read_csv(Path(run_dir) / "reports" / "metrics.csv")
    return {"rows": report.rows, "pooled": report.pooled().to_dict(orient="records")}


@mcp.tool()
async def inspect_checkpoint(path: str) -> Dict[str, Any]:
    """
    Describe a kgfm checkpoint file: kind, format version, parameter shapes and
    vocabulary hash.

    Args:
        path: Path to a checkpoint JSON file
    """
    t0 = time.monotonic()
    try:
        result = await asyncio.to_thread(_inspect, path)
        log.info("inspect_checkpoint %s in %.0fms", path, (time.monotonic() - t0) * 1000)
        return result
    except Exception as e:
        log.error("inspect_checkpoint failed: %s", e)
        return failure_payload(e, tool="inspect_checkpoint", path=path)


@mcp.tool()
async def infer_weights(selector_checkpoint: str, observations_path: str) -> Dict[str, Any]:
    """
    Infer per-module PBM weights from observations with a trained selector.

    Args:
        selector_checkpoint: Path to selector.json
        observations_path: JSON-lines file with {"site", "day", "x": drivers, "y": observed targets}
    """
    t0 = time.monotonic()
    try:
        result = await asyncio.to_thread(_infer, selector_checkpoint, observations_path)
        log.info("infer_weights over %d days in %.0fms", result["n_days"], (time.monotonic() - t0) * 1000)
        return result
    except Exception as e:
        log.error("infer_weights failed: %s", e)
        return failure_payload(e, tool="infer_weights", selector_checkpoint=selector_checkpoint,
                               observations_path=observations_path)


@mcp.tool()
async def metrics_summary(run_dir: str) -> Dict[str, Any]:
    """
    MetricsReport rows of a finished run (variant, regime, target, r2, rmse, site).

    Args:
        run_dir: Experiment output directory
    """
    try:
        return await asyncio.to_thread(_metrics, run_dir)
    except Exception as e:
        log.error("metrics_summary failed: %s", e)
        return failure_payload(e, tool="metrics_summary", run_dir=run_dir)


def serve() -> None:
    log.info("kgfm MCP server starting (log level %s)", LOG_LEVEL)
    mcp.run()
