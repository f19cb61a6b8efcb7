"""File formats: network/site/detection CSVs, draw matrices, summaries
and run manifests. All CSVs are UTF-8, RFC 4180, LF line endings."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .inference import PosteriorSummary
from .network import Edge, SitePlacement, StreamNetwork

ARTIFACT_VERSION = "0.1.0"
MANIFEST_SCHEMA = "v1"

NETWORK_HEADER = ["edge_id", "upstream_node", "downstream_node", "length_km", "additive_value"]
SITES_HEADER = ["site_id", "edge_id", "dist_to_downstream_km"]
DETECTIONS_HEADER = ["site_id", "visit", "detected"]
TRUTH_HEADER = ["site_id", "x", "tau", "psi", "z"]


class DataFileError(ValueError):
    pass


def _writer(handle):
    return csv.writer(handle, lineterminator="\n", quoting=csv.QUOTE_MINIMAL)


def _full(x: float) -> str:
    return format(float(x), ".17g")


def _short(x: float) -> str:
    return format(float(x), ".6g")


def _read_rows(path, expected_header):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFileError(f"{path}: empty file")
        if header != expected_header:
            raise DataFileError(
                f"{path}: expected header {expected_header}, got {header}"
            )
        return list(reader)


def write_network(path, net: StreamNetwork):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = _writer(fh)
        w.writerow(NETWORK_HEADER)
        for e in net.edges:
            w.writerow([e.edge_id, e.upstream_node, e.downstream_node,
                        _full(e.length), _full(e.additive_value)])


def read_network(path, outlet_node=None) -> StreamNetwork:
    rows = _read_rows(path, NETWORK_HEADER)
    edges = []
    for row in rows:
        try:
            edges.append(Edge(row[0], row[1], row[2], float(row[3]), float(row[4])))
        except (IndexError, ValueError) as exc:
            raise DataFileError(f"{path}: bad network row {row}: {exc}")
    if outlet_node is None:
        # the outlet is the unique downstream node with no outgoing edge
        ups = {e.upstream_node for e in edges}
        candidates = {e.downstream_node for e in edges} - ups
        if len(candidates) != 1:
            raise DataFileError(
                f"{path}: cannot infer a unique outlet (candidates: {sorted(candidates)})"
            )
        outlet_node = candidates.pop()
    return StreamNetwork(edges, outlet_node)


def write_sites(path, sites):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = _writer(fh)
        w.writerow(SITES_HEADER)
        for s in sites:
            w.writerow([s.site_id, s.edge_id, _full(s.offset)])


def read_sites(path):
    rows = _read_rows(path, SITES_HEADER)
    try:
        return [SitePlacement(r[0], r[1], float(r[2])) for r in rows]
    except (IndexError, ValueError) as exc:
        raise DataFileError(f"{path}: bad site row: {exc}")


def write_detections(path, histories):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = _writer(fh)
        w.writerow(DETECTIONS_HEADER)
        for h in histories:
            for j, y in enumerate(h.visits, start=1):
                w.writerow([h.site_id, j, y])


def read_detections(path):
    from .model import DetectionHistory

    rows = _read_rows(path, DETECTIONS_HEADER)
    visits = {}
    for row in rows:
        try:
            visits.setdefault(row[0], []).append((int(row[1]), int(row[2])))
        except (IndexError, ValueError) as exc:
            raise DataFileError(f"{path}: bad detection row {row}: {exc}")
    out = []
    for sid, vs in visits.items():
        vs.sort()
        out.append(DetectionHistory(sid, tuple(y for _, y in vs)))
    return out


def write_truth(path, site_ids, truth):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = _writer(fh)
        w.writerow(TRUTH_HEADER)
        for i, sid in enumerate(site_ids):
            w.writerow([sid, _full(truth.x[i]), _full(truth.tau[i]),
                        _full(truth.psi[i]), int(truth.z[i])])


def read_covariates(path, columns=None):
    """Covariate table keyed by site_id; returns (names, {site_id: row})."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "site_id":
            raise DataFileError(f"{path}: first covariate column must be site_id")
        names = header[1:]
        if columns is not None:
            missing = [c for c in columns if c not in names]
            if missing:
                raise DataFileError(f"{path}: unknown covariate columns {missing}")
            idx = [names.index(c) for c in columns]
            names = list(columns)
        else:
            idx = list(range(len(names)))
        table = {}
        for row in reader:
            try:
                table[row[0]] = [float(row[1 + i]) for i in idx]
            except (IndexError, ValueError) as exc:
                raise DataFileError(f"{path}: bad covariate row {row}: {exc}")
    return names, table


def write_draws(path, chains):
    """One row per retained draw: chain, iteration, then parameters, with
    17 significant digits for exact float round-trip."""
    names = chains[0].names
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = _writer(fh)
        w.writerow(["chain", "iteration"] + names)
        for c, chain in enumerate(chains):
            for it, row in enumerate(chain.values):
                w.writerow([c, it] + [_full(v) for v in row])


def read_draws(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:2] != ["chain", "iteration"]:
            raise DataFileError(f"{path}: not a draws file")
        names = header[2:]
        by_chain = {}
        for row in reader:
            by_chain.setdefault(int(row[0]), []).append([float(v) for v in row[2:]])
    chains = [np.array(by_chain[c]) for c in sorted(by_chain)]
    return names, chains


def summary_to_dict(summary: PosteriorSummary, config, extra=None) -> dict:
    out = {
        "artifact_version": ARTIFACT_VERSION,
        "config": asdict(config),
        "prior_bounds": summary.prior_bounds,
        "seed": summary.seed,
        "n_retained_per_chain": summary.n_retained_per_chain,
        "incidents": summary.incidents,
        "jitter_incidents": [
            {"theta": t, "jitter": j} for t, j in summary.jitter_incidents
        ],
        "parameters": summary.parameters,
    }
    if extra:
        out.update(extra)
    return out


def write_summary(path, summary_dict):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(summary_dict, fh, indent=2, sort_keys=True)
        fh.write("\n")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(out_dir, command, config: dict, inputs: dict, seeds: dict,
                   started: datetime, extra=None):
    """Exactly one manifest per output directory; input digests included."""
    manifest = {
        "schema": MANIFEST_SCHEMA,
        "artifact_version": ARTIFACT_VERSION,
        "command": command,
        "config": config,
        "inputs": {name: sha256_file(p) for name, p in inputs.items()},
        "seeds": seeds,
        "started": started.isoformat(),
        "finished": datetime.now(timezone.utc).isoformat(),
    }
    if extra:
        manifest.update(extra)
    path = Path(out_dir) / "manifest.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path
