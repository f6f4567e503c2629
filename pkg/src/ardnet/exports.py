"""Artifact serialization: architecture JSON, mask JSON, DOT, metrics CSV,
and run-configuration parsing.

All writers are byte-deterministic for a fixed (config, seed, data): floats
are rendered with repr, dict keys are sorted, and no timestamps or paths
enter the payload.
"""

from __future__ import annotations

import csv
import json

import numpy as np

from . import supergraph as sg
from .updates import SearchConfig

__all__ = [
    "SCHEMA_VERSION",
    "parse_config",
    "arch_export",
    "save_json",
    "load_arch_json",
    "mask_export",
    "load_mask_json",
    "to_dot",
    "write_metrics_csv",
    "METRICS_HEADER",
]

SCHEMA_VERSION = "1"


# ---------------------------------------------------------------------------
# configuration


def parse_config(path):
    """Read a JSON config file into a SearchConfig.

    An empty file means all defaults.  Unknown keys and invalid values are
    rejected with the offending field named.
    """
    with open(path, encoding="utf-8") as fh:
        text = fh.read().strip()
    payload = json.loads(text) if text else {}
    if not isinstance(payload, dict):
        raise ValueError("config file must contain a JSON object")
    known = set(SearchConfig.field_names())
    unknown = sorted(set(payload) - known)
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    config = SearchConfig(**payload)
    config.validate()
    return config


# ---------------------------------------------------------------------------
# architecture export


_ARCH_FIELDS = {"schema_version", "n_nodes", "input_node", "output_node",
                "degenerate", "gate_map", "gate_node_of", "edges", "provenance"}
_EDGE_FIELDS = {"id", "src", "dst", "op", "w", "gamma", "s", "alive", "is_gate"}


def arch_export(graph, config=None, seed=None):
    """Architecture record plus run provenance (config hash and seed)."""
    record = sg.export_architecture(graph)
    record["provenance"] = {
        "config_hash": config.config_hash() if config is not None else None,
        "seed": seed if seed is not None else (config.seed if config else None),
    }
    return record


def save_json(record, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_arch_json(path):
    """Load and validate an architecture record; returns a SuperGraph.

    Fields outside the versioned schema are rejected, so records written by
    a future schema fail loudly instead of being half-read.
    """
    with open(path, encoding="utf-8") as fh:
        record = json.load(fh)
    if record.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(
            f"unsupported schema version {record.get('schema_version')!r} "
            f"(expected {SCHEMA_VERSION!r})"
        )
    unknown = sorted(set(record) - _ARCH_FIELDS)
    if unknown:
        raise ValueError(f"unknown architecture fields: {', '.join(unknown)}")
    for edge in record["edges"]:
        bad = sorted(set(edge) - _EDGE_FIELDS)
        if bad:
            raise ValueError(f"unknown edge fields: {', '.join(bad)}")
    return sg.import_architecture(record)


# ---------------------------------------------------------------------------
# mask export


def mask_export(net, config=None, widths=None):
    """Per-layer zero-mask record for a compressed layer stack."""
    from .engine import surviving_widths
    layers = []
    for layer in net:
        if layer.weights is None:
            continue
        mask = layer.mask if layer.mask is not None else np.ones_like(layer.weights)
        layers.append({
            "kind": layer.kind,
            "shape": list(layer.weights.shape),
            "mask": mask.astype(int).ravel().tolist(),
        })
    return {
        "schema_version": SCHEMA_VERSION,
        "layers": layers,
        "widths": widths if widths is not None else surviving_widths(net),
        "provenance": {
            "config_hash": config.config_hash() if config is not None else None,
            "seed": config.seed if config is not None else None,
        },
    }


_MASK_FIELDS = {"schema_version", "layers", "widths", "provenance"}


def load_mask_json(path):
    """Load a mask record; returns a list of (shape, mask array) pairs."""
    with open(path, encoding="utf-8") as fh:
        record = json.load(fh)
    if record.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(
            f"unsupported schema version {record.get('schema_version')!r} "
            f"(expected {SCHEMA_VERSION!r})"
        )
    unknown = sorted(set(record) - _MASK_FIELDS)
    if unknown:
        raise ValueError(f"unknown mask fields: {', '.join(unknown)}")
    out = []
    for entry in record["layers"]:
        shape = tuple(entry["shape"])
        mask = np.asarray(entry["mask"], dtype=np.float64).reshape(shape)
        out.append((shape, mask))
    return out


# ---------------------------------------------------------------------------
# DOT rendering


def to_dot(record):
    """Graphviz text: alive edges solid, pruned edges dashed."""
    lines = ["digraph arch {", "  rankdir=LR;"]
    for node in range(record["n_nodes"]):
        shape = "doublecircle" if node in (record["input_node"],
                                           record["output_node"]) else "circle"
        lines.append(f'  n{node} [shape={shape}, label="{node}"];')
    for edge in record["edges"]:
        style = "solid" if edge["alive"] else "dashed"
        label = f'{edge["op"]} w={edge["w"]:.3g} g={edge["gamma"]:.3g}'
        lines.append(
            f'  n{edge["src"]} -> n{edge["dst"]} [style={style}, label="{label}"];'
        )
    lines.append("}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# metrics CSV


METRICS_HEADER = ["iteration", "epoch", "loss", "test_error", "alive_edges",
                  "gamma_min", "gamma_median", "entropy_pruned", "cascade_pruned"]


def write_metrics_csv(history, path):
    """One row per recorded epoch; float cells rendered with repr for
    byte-stable output."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)
        for row in history:
            writer.writerow([
                repr(row[key]) if isinstance(row[key], float) else row[key]
                for key in METRICS_HEADER
            ])
