"""Operator command line: ingest, catalog, runs, ad-hoc queries, serve,
bundle export and verification.

Exit codes: 0 success, 1 operational failure, 2 usage error.  With
``--json`` every informational line on stdout is one JSON object, so the
output can be piped straight into ``jq`` or a test harness.
"""

from __future__ import annotations

import json
import sys
import uuid
from pathlib import Path

import click

from .canonical import is_hex_digest
from .dataflow import PipelineDoc, execute
from .difc import Label
from .errors import ArkError
from .ingest import import_geojson_polygons, import_geotiff, import_points_csv
from .publish import export_bundle, verify_bundle
from .store import ChunkStore, Commit, load_layer, resolve_latest


class Ctx:
    def __init__(self, data_dir: str, as_json: bool):
        self.data_dir = Path(data_dir)
        self.as_json = as_json
        self._store = None

    @property
    def store(self) -> ChunkStore:
        if self._store is None:
            self._store = ChunkStore(self.data_dir)
        return self._store

    def emit(self, obj: dict, human: str):
        if self.as_json:
            click.echo(json.dumps(obj, sort_keys=True))
        else:
            click.echo(human)


def _fail(message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(1)


def _parse_label(text: str) -> Label:
    names = [t.strip() for t in text.split(",") if t.strip()]
    return Label.from_list(names)


@click.group()
@click.option("--data-dir", default="./ark-data", show_default=True,
              help="Chunk store directory.")
@click.option("--json", "as_json", is_flag=True, help="Line-oriented JSON output.")
@click.pass_context
def main(ctx, data_dir, as_json):
    """Content-addressed geospatial pipelines with information-flow control."""
    ctx.obj = Ctx(data_dir, as_json)


@main.command()
@click.option("--layer", required=True, help="Layer or dataset name.")
@click.option("--kind", required=True,
              type=click.Choice(["geotiff", "points", "polygons"]))
@click.option("--label", "label_text", default="",
              help="Comma-separated secrecy tags.")
@click.option("--file", "path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--time", "time_stamp", default=None,
              help="Observation instant, e.g. 2026-01-01T00:00:00Z.")
@click.option("--message", default="ingest", show_default=True)
@click.pass_obj
def ingest(ctx: Ctx, layer, kind, label_text, path, time_stamp, message):
    """Import a GeoTIFF as a layer version, or points/polygons as objects."""
    label = _parse_label(label_text)
    try:
        if kind == "geotiff":
            info = import_geotiff(ctx.store, layer, path, label, time_stamp, message)
            ctx.emit(info, f"layer={info['layer']} manifest={info['manifest']} "
                           f"commit={info['commit']} tiles={info['tiles']}")
        elif kind == "points":
            ref, points = import_points_csv(ctx.store, path, label)
            ctx.emit({"layer": layer, "kind": "points", "ref": ref,
                      "count": len(points)},
                     f"points ref={ref} count={len(points)}")
        else:
            ref, polys = import_geojson_polygons(ctx.store, path, label)
            ctx.emit({"layer": layer, "kind": "polygons", "ref": ref,
                      "zones": len(polys)},
                     f"polygons ref={ref} zones={len(polys)}")
    except ArkError as exc:
        _fail(str(exc))


@main.command()
@click.argument("layer", required=False)
@click.pass_obj
def ls(ctx: Ctx, layer):
    """List layers, or the version history of one layer."""
    store = ctx.store
    if layer is None:
        for name in store.list_refs():
            manifest = resolve_latest(store, name)
            version = load_layer(store, manifest)
            ctx.emit({"name": name, "latest": manifest,
                      "label": version.label.as_list(),
                      "dtype": version.dtype,
                      "size": [version.width, version.height]},
                     f"{name} latest={manifest} label={version.label.as_list()} "
                     f"{version.width}x{version.height} {version.dtype}")
        return
    commit_hash = store.read_ref(layer)
    if commit_hash is None:
        _fail(f"no layer named {layer!r}")
    while commit_hash is not None:
        commit = Commit.from_obj(store.get_obj(commit_hash))
        for manifest in commit.layer_versions:
            version = load_layer(store, manifest)
            ctx.emit({"commit": commit_hash, "manifest": manifest,
                      "created_at": commit.created_at,
                      "message": commit.message,
                      "label": version.label.as_list(),
                      "time_stamp": version.time_stamp},
                     f"{commit_hash[:12]} manifest={manifest} "
                     f"at={commit.created_at} {commit.message!r}")
        commit_hash = commit.parent


@main.command()
@click.argument("doc_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--workers", default=2, show_default=True, type=int)
@click.pass_obj
def run(ctx: Ctx, doc_path, workers):
    """Execute a pipeline document and print its outputs."""
    if workers < 1:
        raise click.BadParameter("--workers must be >= 1")
    try:
        with open(doc_path, "r", encoding="utf-8") as f:
            doc = PipelineDoc.from_obj(json.load(f))
        record = execute(ctx.store, doc, workers=workers, run_id=uuid.uuid4().hex)
    except (ArkError, json.JSONDecodeError) as exc:
        _fail(str(exc))
    summary = {
        "run_id": record["run_id"],
        "status": record["status"],
        "executed": record["executed"],
        "cache_hits": record["cache_hits"],
    }
    ctx.emit(summary,
             f"run {record['run_id']} {record['status']} "
             f"executed={record['executed']} cache_hits={record['cache_hits']}")
    for nid, out in sorted(record["outputs"].items()):
        ctx.emit({"node": nid, "kind": out["kind"], "refs": out["refs"],
                  "label": out["label"]},
                 f"  {nid} [{out['kind']}] refs={','.join(out['refs'])} "
                 f"label={out['label']}")
    if record["status"] != "succeeded":
        _fail(record["error"] or "run failed")


@main.group()
def query():
    """One-off analyses without writing a pipeline document."""


def _run_adhoc(ctx: Ctx, doc_obj: dict) -> dict:
    doc = PipelineDoc.from_obj(doc_obj)
    record = execute(ctx.store, doc, workers=2, run_id=uuid.uuid4().hex)
    if record["status"] != "succeeded":
        _fail(record["error"] or "query failed")
    return record


@query.command()
@click.option("--layer", required=True)
@click.option("--zones", required=True,
              help="Polygon object ref, or a GeoJSON file to import.")
@click.option("--version", default="latest", show_default=True)
@click.pass_obj
def zonal(ctx: Ctx, layer, zones, version):
    """Per-zone statistics of a layer version."""
    try:
        if is_hex_digest(zones) and ctx.store.has(zones):
            zones_ref = zones
        else:
            zones_ref, _ = import_geojson_polygons(
                ctx.store, zones, Label.from_list([])
            )
        record = _run_adhoc(ctx, {
            "kind": "pipeline",
            "name": "query-zonal",
            "inputs": {"layer": {"layer": layer, "version": version}},
            "nodes": [{"id": "z", "op": "zonal_stats",
                       "params": {"zones": zones_ref},
                       "inputs": {"layer": "layer"}}],
            "outputs": ["z"],
        })
    except ArkError as exc:
        _fail(str(exc))
    result_ref = record["outputs"]["z"]["refs"][0]
    for idx, row in enumerate(ctx.store.get_obj(result_ref)["stats"]):
        out = {"zone": idx, **row}
        ctx.emit(out,
                 f"zone {idx}: count={row['count']} min={row['min']} "
                 f"max={row['max']} mean={row['mean']} sum={row['sum']}")


@query.command()
@click.option("--layer", required=True)
@click.option("--a", "sel_a", required=True, help="Old version manifest, or latest.")
@click.option("--b", "sel_b", required=True, help="New version manifest, or latest.")
@click.option("--predicate", default="A.b1 != B.b1", show_default=True)
@click.pass_obj
def diff(ctx: Ctx, layer, sel_a, sel_b, predicate):
    """Changed-cell mask and count between two versions of a layer."""
    try:
        record = _run_adhoc(ctx, {
            "kind": "pipeline",
            "name": "query-diff",
            "inputs": {"a": {"layer": layer, "version": sel_a},
                       "b": {"layer": layer, "version": sel_b}},
            "nodes": [{"id": "d", "op": "temporal_diff",
                       "params": {"predicate": predicate},
                       "inputs": {"a": "a", "b": "b"}}],
            "outputs": ["d"],
        })
    except ArkError as exc:
        _fail(str(exc))
    mask_ref, summary_ref = record["outputs"]["d"]["refs"]
    changed = ctx.store.get_obj(summary_ref)["changed_count"]
    ctx.emit({"changed_count": changed, "mask_manifest": mask_ref,
              "summary": summary_ref},
             f"changed_count={changed} mask={mask_ref}")


@main.command()
@click.option("--port", default=8471, show_default=True, type=int)
@click.option("--registry-dir", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--host", default="127.0.0.1", show_default=True)
@click.pass_obj
def serve(ctx: Ctx, port, registry_dir, host):
    """Run the HTTP service over this data directory."""
    from .service import serve as _serve

    _serve(port, ctx.data_dir, registry_dir, host=host)


@main.command()
@click.option("--run", "run_id", required=True)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--redact", is_flag=True,
              help="Withhold labelled sources, keeping their hashes.")
@click.pass_obj
def export(ctx: Ctx, run_id, out_dir, redact):
    """Write a self-contained reproduction bundle for a completed run."""
    try:
        manifest = export_bundle(ctx.store, run_id, out_dir, redact=redact)
    except ArkError as exc:
        _fail(str(exc))
    ctx.emit({"out": str(out_dir), "objects": len(manifest["objects"]),
              "redacted": manifest["redacted"]},
             f"bundle written to {out_dir}: {len(manifest['objects'])} objects"
             + (" (redacted)" if manifest["redacted"] else ""))


@main.command()
@click.argument("bundle_dir", type=click.Path(exists=True, file_okay=False))
@click.pass_obj
def verify(ctx: Ctx, bundle_dir):
    """Re-execute a bundle in a scratch store and compare outputs."""
    try:
        report = verify_bundle(bundle_dir)
    except ArkError as exc:
        _fail(str(exc))
    human = f"reproduced={str(report['reproduced']).lower()}"
    if report["mismatches"]:
        human += "\n" + "\n".join(f"  mismatch: {m}" for m in report["mismatches"])
    if report.get("note"):
        human += f"\n  note: {report['note']}"
    ctx.emit(report, human)
    if not report["reproduced"] and not (
        report.get("outputs_verified") and "redacted" in report.get("note", "")
    ):
        sys.exit(1)


if __name__ == "__main__":
    main()
