"""Files: instance documents, traces, index tables and versioned CSV outputs."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from typing import Any, Dict, List, Sequence, Tuple

import numpy as np
import pandas as pd
import yaml

from core.errors import ConfigError
from core.indices import IndexTable, class_weights
from core.model import FarmInstance, instance_from_dict, instance_to_dict

logger = logging.getLogger(__name__)

INSTANCE_SCHEMA = "farm-instance/v1"
FLOAT_FORMAT = "%.12g"

# name -> (version, columns); pinned by tests
SCHEMAS: Dict[str, Tuple[int, List[str]]] = {
    "metrics": (1, ["policy", "replications", "cap_hit", "L", "L_ci", "E", "E_ci", "efficiency",
                    "efficiency_ci", "completion_throughput", "total_blocking", "blocking_by_class",
                    "z_deviation", "relative_difference"]),
    "plot": (1, ["policy", "bin_start", "bin_end", "throughput", "energy", "efficiency", "arrivals",
                 "blocks", "blocking_prob"]),
    "cdf": (1, ["pair", "seed", "relative_difference", "cdf"]),
    "scenario1": (1, ["seed", "rho", "policy", "efficiency", "efficiency_ci", "replications", "cap_hit",
                      "unimodal", "heavy_traffic"]),
    "scenario2": (1, ["capacity", "policy", "efficiency", "efficiency_ci", "L", "E", "total_blocking",
                      "relative_difference"]),
    "efit": (1, ["e", "gamma"]),
    "zpath": (1, ["time", "deviation"]),
}


def json_dumps(obj: Any) -> str:
    return json.dumps(obj, ensure_ascii=False, sort_keys=True, default=_json_default)


def _json_default(o: Any) -> Any:
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


# ----------------------------------------------------------------- instances

def load_instance(path: str) -> FarmInstance:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read instance file {path}: {e}")
    except yaml.YAMLError as e:
        raise ConfigError(f"instance file {path} is not valid YAML: {e}")
    if not isinstance(data, dict):
        raise ConfigError(f"instance file {path} must hold a mapping")
    schema = data.get("schema", INSTANCE_SCHEMA)
    if schema != INSTANCE_SCHEMA:
        raise ConfigError(f"instance file {path}: unsupported schema {schema!r}")
    try:
        return instance_from_dict(data)
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"instance file {path} is malformed: {e!r}")


def dump_instance(instance: FarmInstance, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(instance_to_dict(instance), fh, sort_keys=False)


# ----------------------------------------------------------------- traces

def write_trace(arrivals: Sequence[Tuple[float, int]], path: str) -> None:
    """`timestamp_seconds,class_id` lines, class ids 1-based."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("timestamp_seconds,class_id\n")
        for t, cls in arrivals:
            fh.write(f"{t:.12g},{cls + 1}\n")


# ----------------------------------------------------------------- index tables

def format_index_table(table: IndexTable) -> str:
    L = table.class_weights.shape[0]
    lines = [
        f"# e={table.e:.17g}",
        f"# h={table.h:.17g}",
        f"# epsilon={table.epsilon:.3g}",
    ]
    lines += [f"# diagnostic: {d}" for d in table.diagnostics]
    header = ["cluster", "state", "eta0"] + [f"u_{cls + 1}" for cls in range(L)]
    rows = [header]
    for i, eta in enumerate(table.eta0):
        for n, v in enumerate(eta):
            u = [table.u(cls, i, n) for cls in range(L)]
            rows.append([str(i + 1), str(n), f"{v:.17g}"] + ["nan" if math.isnan(x) else f"{x:.17g}" for x in u])
    widths = [max(len(r[k]) for r in rows) for k in range(len(header))]
    lines += ["  ".join(cell.rjust(w) for cell, w in zip(r, widths)) for r in rows]
    return "\n".join(lines) + "\n"


def write_index_table(table: IndexTable, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_index_table(table))


def read_index_table(path: str, instance: FarmInstance) -> IndexTable:
    meta: Dict[str, float] = {}
    diagnostics: List[str] = []
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    for line in lines:
        if line.startswith("# diagnostic: "):
            diagnostics.append(line[len("# diagnostic: "):])
        elif line.startswith("#") and "=" in line:
            key, value = line[1:].strip().split("=", 1)
            meta[key.strip()] = float(value)
    body = [ln.split() for ln in lines if ln.strip() and not ln.startswith("#")]
    if not body or body[0][:3] != ["cluster", "state", "eta0"]:
        raise ConfigError(f"{path}: not an index table")
    eta = [np.zeros(c.capacity) for c in instance.clusters]
    for row in body[1:]:
        i, n = int(row[0]) - 1, int(row[1])
        if not (0 <= i < instance.num_clusters and 0 <= n < instance.clusters[i].capacity):
            raise ConfigError(f"{path}: row {row[:2]} does not match the instance")
        eta[i][n] = float(row[2])
    for key in ("e", "h"):
        if key not in meta:
            raise ConfigError(f"{path}: missing '# {key}=' header")
    return IndexTable(e=meta["e"], h=meta["h"], epsilon=meta.get("epsilon", 0.0), eta0=tuple(eta),
                      class_weights=class_weights(instance), diagnostics=diagnostics)


# ----------------------------------------------------------------- CSV outputs

def manifest_hash(manifest: Dict[str, Any]) -> str:
    return hashlib.sha256(json_dumps(manifest).encode("utf-8")).hexdigest()[:16]


def write_csv(df: pd.DataFrame, path: str, schema: str, manifest: Dict[str, Any]) -> str:
    """Versioned CSV with the manifest hash on its first line, plus `<path>.manifest.json`."""
    version, columns = SCHEMAS[schema]
    missing = [c for c in columns if c not in df.columns]
    if missing:
        raise ValueError(f"{schema} table lacks columns {missing}")
    digest = manifest_hash(manifest)
    folder = os.path.dirname(path)
    if folder:
        os.makedirs(folder, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# schema={schema}/v{version} manifest={digest}\n")
        df[columns].to_csv(fh, index=False, float_format=FLOAT_FORMAT)
    with open(path + ".manifest.json", "w", encoding="utf-8") as fh:
        fh.write(json.dumps(dict(manifest, manifest_hash=digest, outputs=manifest.get("outputs", [])),
                            indent=2, sort_keys=True, default=_json_default))
    logger.info("wrote %s (%d rows)", path, len(df))
    return digest


def read_csv(path: str) -> pd.DataFrame:
    return pd.read_csv(path, skiprows=1)


def read_csv_header(path: str) -> Dict[str, str]:
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline().lstrip("#").strip()
    return dict(part.split("=", 1) for part in first.split())
