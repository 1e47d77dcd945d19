"""Pipeline documents and their memoized, per-tile execution.

A pipeline document names its inputs (layer + version selector), a DAG of
nodes, and which node outputs to publish.  Planning expands each node into
one task per output tile, plus a combine task for reductions.  Every task
carries a memo key (op name, op version, canonical params, named input
hashes); keys already present in the store's memo index are cache hits and
are not re-executed.  Output layer manifests are assembled from task
outputs as run-level bookkeeping, so they never count as tasks.

Labels ride along outside the memo system on purpose: memoized bytes are a
pure function of content, while labels join at run level and land in
manifests, run records, and provenance nodes.
"""

from __future__ import annotations

import re
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .algebra import NODATA_F32, eval_chunk, parse
from .canonical import canonical_json_bytes, hash_obj, is_hex_digest, sha256_hex
from .chunk import Chunk
from .clock import format_instant, now
from .difc import Label, Principal, Registry, join_all
from .errors import GeometryError, MissingObjectError, ValidationError
from .geo import SUPPORTED_EPSG, Affine, Crs, TileGrid, transform_points
from .ingest import PointSet, PolygonSet, read_layer_array
from .rasterops import (
    COUNT_NODATA,
    DEFAULT_NODATA,
    DIFF_NODATA,
    ZoneAccumulator,
    bin_points_window,
    diff_window,
    reproject_window,
    zonal_accumulate,
)
from .store import ChunkStore, LayerVersion, load_layer, resolve_latest

OP_NAMES = ("expr", "zonal_stats", "rasterize_points", "temporal_diff", "reproject_nearest")

OP_VERSIONS = {
    "expr": "1.0.0",
    "zonal_stats": "1.0.0",
    "zonal_stats.combine": "1.0.0",
    "rasterize_points": "1.0.0",
    "temporal_diff": "1.0.0",
    "temporal_diff.combine": "1.0.0",
    "reproject_nearest": "1.0.0",
    "ingest": "1.0.0",
    "declassify": "1.0.0",
}

_IDENT = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")


# -- documents ---------------------------------------------------------------


@dataclass
class NodeSpec:
    id: str
    op: str
    params: dict
    inputs: dict[str, str]

    def as_obj(self) -> dict:
        return {"id": self.id, "op": self.op, "params": self.params, "inputs": self.inputs}


@dataclass
class PipelineDoc:
    name: str
    inputs: dict[str, tuple[str, str]]
    nodes: list[NodeSpec]
    outputs: list[str]

    def as_obj(self) -> dict:
        return {
            "kind": "pipeline",
            "name": self.name,
            "inputs": {
                alias: {"layer": layer, "version": sel}
                for alias, (layer, sel) in self.inputs.items()
            },
            "nodes": [n.as_obj() for n in self.nodes],
            "outputs": self.outputs,
        }

    def doc_hash(self) -> str:
        return hash_obj(self.as_obj())

    @classmethod
    def from_obj(cls, obj) -> "PipelineDoc":
        if not isinstance(obj, dict):
            raise ValidationError("pipeline document must be a JSON object")
        for key in ("name", "inputs", "nodes", "outputs"):
            if key not in obj:
                raise ValidationError(f"pipeline document missing {key!r}")
        name = obj["name"]
        if not isinstance(name, str) or not name:
            raise ValidationError("pipeline name must be a non-empty string")
        inputs: dict[str, tuple[str, str]] = {}
        if not isinstance(obj["inputs"], dict):
            raise ValidationError("inputs must map alias -> {layer, version}")
        for alias, spec in obj["inputs"].items():
            if not _IDENT.match(alias):
                raise ValidationError(f"input alias {alias!r} is not an identifier")
            if not isinstance(spec, dict) or "layer" not in spec:
                raise ValidationError(f"input {alias!r} must be {{layer, version}}")
            sel = spec.get("version", "latest")
            if sel != "latest" and not is_hex_digest(sel):
                raise ValidationError(
                    f"input {alias!r}: version must be \"latest\" or a manifest hash"
                )
            inputs[alias] = (spec["layer"], sel)
        nodes: list[NodeSpec] = []
        if not isinstance(obj["nodes"], list) or not obj["nodes"]:
            raise ValidationError("nodes must be a non-empty list")
        for n in obj["nodes"]:
            if not isinstance(n, dict):
                raise ValidationError("each node must be an object")
            for key in ("id", "op"):
                if key not in n:
                    raise ValidationError(f"node missing {key!r}")
            nodes.append(
                NodeSpec(n["id"], n["op"], n.get("params", {}), n.get("inputs", {}))
            )
        outputs = obj["outputs"]
        if not isinstance(outputs, list) or not outputs:
            raise ValidationError("outputs must name at least one node")
        doc = cls(name, inputs, nodes, outputs)
        doc.validate()
        return doc

    def node(self, node_id: str) -> NodeSpec:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise ValidationError(f"no node {node_id!r}")

    def validate(self) -> "PipelineDoc":
        ids = [n.id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise ValidationError("node ids must be unique")
        clash = set(ids) & set(self.inputs)
        if clash:
            raise ValidationError(f"node ids shadow input aliases: {sorted(clash)}")
        known = set(self.inputs) | set(ids)
        for n in self.nodes:
            if not _IDENT.match(n.id):
                raise ValidationError(f"node id {n.id!r} is not an identifier")
            if n.op not in OP_NAMES:
                raise ValidationError(f"node {n.id!r}: unknown op {n.op!r}")
            if not isinstance(n.params, dict) or not isinstance(n.inputs, dict):
                raise ValidationError(f"node {n.id!r}: params and inputs must be objects")
            for local, src in n.inputs.items():
                if src not in known:
                    raise ValidationError(f"node {n.id!r}: unknown input {src!r}")
            _validate_node_shape(n)
        for out in self.outputs:
            if out not in ids:
                raise ValidationError(f"outputs reference unknown node {out!r}")
        self.topo_order()
        return self

    def topo_order(self) -> list[str]:
        """Node ids sorted so every node follows everything it reads."""
        ids = {n.id for n in self.nodes}
        deps = {
            n.id: sorted({src for src in n.inputs.values() if src in ids})
            for n in self.nodes
        }
        order: list[str] = []
        seen: set[str] = set()
        done: set[str] = set()

        def visit(nid: str, trail: tuple):
            if nid in done:
                return
            if nid in seen:
                raise ValidationError(f"node graph has a cycle through {nid!r}")
            seen.add(nid)
            for d in deps[nid]:
                visit(d, trail + (nid,))
            done.add(nid)
            order.append(nid)

        for n in self.nodes:
            visit(n.id, ())
        return order


def _validate_node_shape(n: NodeSpec):
    """Per-op structural checks that need no store access."""
    if n.op == "expr":
        src = n.params.get("expr")
        if not isinstance(src, str):
            raise ValidationError(f"node {n.id!r}: expr op needs params.expr")
        prog = parse(src)
        for alias, _band in prog.bands:
            if alias not in n.inputs:
                raise ValidationError(
                    f"node {n.id!r}: expression reads {alias!r} which is not an input"
                )
        if not n.inputs:
            raise ValidationError(f"node {n.id!r}: expr op needs at least one input")
    elif n.op == "zonal_stats":
        if set(n.inputs) != {"layer"}:
            raise ValidationError(f"node {n.id!r}: zonal_stats takes exactly input 'layer'")
        if not is_hex_digest(n.params.get("zones", "")):
            raise ValidationError(f"node {n.id!r}: params.zones must be a polygon set hash")
    elif n.op == "rasterize_points":
        if set(n.inputs) != {"template"}:
            raise ValidationError(
                f"node {n.id!r}: rasterize_points takes exactly input 'template'"
            )
        if not is_hex_digest(n.params.get("points", "")):
            raise ValidationError(f"node {n.id!r}: params.points must be a point set hash")
        k = n.params.get("min_count")
        if not isinstance(k, int) or isinstance(k, bool) or k < 1:
            raise ValidationError(f"node {n.id!r}: params.min_count must be an integer >= 1")
    elif n.op == "temporal_diff":
        if set(n.inputs) != {"a", "b"}:
            raise ValidationError(f"node {n.id!r}: temporal_diff takes inputs 'a' and 'b'")
        pred = n.params.get("predicate", "A.b1 != B.b1")
        prog = parse(pred)
        for alias, _band in prog.bands:
            if alias not in ("A", "B"):
                raise ValidationError(
                    f"node {n.id!r}: predicate may only read bands of A and B"
                )
    elif n.op == "reproject_nearest":
        if set(n.inputs) != {"src"}:
            raise ValidationError(f"node {n.id!r}: reproject_nearest takes exactly input 'src'")
        epsg = n.params.get("epsg")
        if epsg not in SUPPORTED_EPSG:
            raise ValidationError(f"node {n.id!r}: unsupported target epsg {epsg!r}")
        aff = n.params.get("affine")
        if not (isinstance(aff, list) and len(aff) == 4):
            raise ValidationError(f"node {n.id!r}: params.affine must be a 4-number list")
        for dim in ("width", "height"):
            v = n.params.get(dim)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ValidationError(f"node {n.id!r}: params.{dim} must be a positive integer")


# -- planning ----------------------------------------------------------------


@dataclass
class NodeShape:
    """Statically known facts about a node's output."""

    kind: str  # "layer", "table", "diff"
    label: Label
    crs: Optional[Crs] = None
    affine: Optional[Affine] = None
    width: int = 0
    height: int = 0
    dtype: Optional[str] = None
    nodata: Optional[float] = None

    @property
    def grid(self) -> TileGrid:
        return TileGrid(self.width, self.height)

    def geometry_equal(self, other: "NodeShape") -> bool:
        return (
            self.crs == other.crs
            and self.affine == other.affine
            and self.width == other.width
            and self.height == other.height
        )

    @classmethod
    def of_layer(cls, version: LayerVersion) -> "NodeShape":
        return cls(
            kind="layer",
            label=version.label,
            crs=version.crs,
            affine=version.affine,
            width=version.width,
            height=version.height,
            dtype=version.dtype,
            nodata=version.nodata,
        )


@dataclass
class TaskSpec:
    task_id: str
    node_id: str
    kind: str  # "tile" or "combine"
    tile: Optional[tuple[int, int]]
    deps: list[str]


@dataclass
class Plan:
    doc: PipelineDoc
    doc_hash: str
    pins: dict[str, str]
    order: list[str]
    shapes: dict[str, NodeShape]
    tasks: list[TaskSpec]
    node_tasks: dict[str, list[TaskSpec]] = field(default_factory=dict)


def _pinned_versions(
    store: ChunkStore, doc: PipelineDoc, pins: Optional[dict[str, str]]
) -> dict[str, str]:
    resolved: dict[str, str] = {}
    for alias, (layer_name, sel) in doc.inputs.items():
        if pins and alias in pins:
            manifest = pins[alias]
        elif sel == "latest":
            manifest = resolve_latest(store, layer_name)
            if manifest is None:
                raise ValidationError(f"input {alias!r}: layer {layer_name!r} has no versions")
        else:
            manifest = sel
        if not store.has(manifest):
            raise ValidationError(f"input {alias!r}: manifest {manifest} not in store")
        obj = store.get_obj(manifest)
        if obj.get("kind") != "layer" or obj.get("layer_name") != layer_name:
            raise ValidationError(f"input {alias!r}: {manifest} is not a version of {layer_name!r}")
        resolved[alias] = manifest
    return resolved


def plan(store: ChunkStore, doc: PipelineDoc, pins: Optional[dict[str, str]] = None) -> Plan:
    doc.validate()
    pinned = _pinned_versions(store, doc, pins)
    versions = {alias: load_layer(store, h) for alias, h in pinned.items()}
    order = doc.topo_order()
    shapes: dict[str, NodeShape] = {}
    tasks: list[TaskSpec] = []
    node_tasks: dict[str, list[TaskSpec]] = {}

    def shape_of(src: str, node: NodeSpec) -> NodeShape:
        if src in versions:
            return NodeShape.of_layer(versions[src])
        sh = shapes[src]
        if sh.kind == "table":
            raise ValidationError(
                f"node {node.id!r}: {src!r} is a statistics table, not a layer"
            )
        return sh

    for nid in order:
        node = doc.node(nid)
        ins = {local: shape_of(src, node) for local, src in node.inputs.items()}
        upstream_tasks = [
            t.task_id
            for src in sorted(set(node.inputs.values()))
            if src in node_tasks
            for t in node_tasks[src]
        ]

        if node.op == "expr":
            prog = parse(node.params["expr"])
            first = next(iter(ins.values()))
            for local, sh in ins.items():
                if not sh.geometry_equal(first):
                    raise GeometryError(
                        f"node {nid!r}: input {local!r} geometry differs"
                    )
            for alias, band in prog.bands:
                if band != 1:
                    raise ValidationError(
                        f"node {nid!r}: band {band} of {alias!r} does not exist"
                    )
            shape = NodeShape(
                "layer", join_all(sh.label for sh in ins.values()),
                first.crs, first.affine, first.width, first.height,
                "f32", NODATA_F32,
            )
            grid = shape.grid
        elif node.op == "zonal_stats":
            layer = ins["layer"]
            zones = PolygonSet.from_obj(store.get_obj(node.params["zones"]))
            shape = NodeShape("table", layer.label.join(zones.label))
            grid = layer.grid
        elif node.op == "rasterize_points":
            template = ins["template"]
            points = PointSet.from_obj(store.get_obj(node.params["points"]))
            shape = NodeShape(
                "layer", points.label.join(template.label),
                template.crs, template.affine, template.width, template.height,
                "i32", COUNT_NODATA,
            )
            grid = shape.grid
        elif node.op == "temporal_diff":
            a, b = ins["a"], ins["b"]
            if not a.geometry_equal(b):
                raise GeometryError(f"node {nid!r}: inputs must share geometry")
            shape = NodeShape(
                "diff", a.label.join(b.label),
                a.crs, a.affine, a.width, a.height, "u8", DIFF_NODATA,
            )
            grid = shape.grid
        else:  # reproject_nearest
            src = ins["src"]
            dst_affine = Affine.from_list(node.params["affine"])
            out_dtype = src.dtype
            out_nodata = (
                src.nodata if src.nodata is not None else DEFAULT_NODATA[out_dtype]
            )
            shape = NodeShape(
                "layer", src.label,
                Crs(node.params["epsg"]), dst_affine,
                node.params["width"], node.params["height"],
                out_dtype, out_nodata,
            )
            grid = shape.grid

        specs = [
            TaskSpec(f"{nid}/{ty}/{tx}", nid, "tile", (tx, ty), list(upstream_tasks))
            for tx, ty in grid.all_tiles()
        ]
        if node.op in ("zonal_stats", "temporal_diff"):
            specs.append(
                TaskSpec(f"{nid}/combine", nid, "combine", None,
                         [t.task_id for t in specs])
            )
        shapes[nid] = shape
        node_tasks[nid] = specs
        tasks.extend(specs)

    return Plan(doc, doc.doc_hash(), pinned, order, shapes, tasks, node_tasks)


# -- execution ---------------------------------------------------------------


def _pad_tile(chunk: Chunk, tile_size: int, pad_value: float) -> Chunk:
    h, w = chunk.values.shape
    if (h, w) == (tile_size, tile_size):
        return chunk
    full = np.full((tile_size, tile_size), pad_value, dtype=chunk.values.dtype)
    full[:h, :w] = chunk.values
    return Chunk(chunk.dtype, tile_size, tile_size, chunk.nodata, full)


def _clip_tile(chunk: Chunk, w: int, h: int) -> Chunk:
    if chunk.values.shape == (h, w):
        return chunk
    return Chunk(chunk.dtype, w, h, chunk.nodata, chunk.values[:h, :w])


@dataclass
class _Task:
    spec: TaskSpec
    memo_obj: dict
    run: Callable[[], list[str]]
    prov_params: dict

    @property
    def memo_key(self) -> str:
        return hash_obj(self.memo_obj)


class _NodeState:
    """Per-node execution artifacts threaded between planning and assembly."""

    def __init__(self):
        self.tile_outputs: dict[tuple[int, int], str] = {}
        self.combine_output: Optional[str] = None


def execute(
    store: ChunkStore,
    doc: PipelineDoc,
    workers: int = 1,
    run_id: Optional[str] = None,
    pins: Optional[dict[str, str]] = None,
) -> dict:
    """Run a pipeline and return its run record (also stored in the CAS).

    ``workers`` bounds tile-task parallelism inside each node generation.
    ``pins`` overrides version selectors (used when replaying a bundle).
    """
    if workers < 1:
        raise ValidationError("workers must be >= 1")
    p = plan(store, doc, pins)
    run_id = run_id or uuid.uuid4().hex
    started = format_instant(now())
    t_begin = time.perf_counter()
    doc_obj = doc.as_obj()
    store.put_obj(doc_obj)

    versions: dict[str, LayerVersion] = {
        alias: load_layer(store, h) for alias, h in p.pins.items()
    }
    version_hashes = dict(p.pins)
    task_records: list[dict] = []
    node_outputs: dict[str, dict] = {}
    error: Optional[str] = None

    def run_one(task: _Task) -> dict:
        key = task.memo_key
        cached = store.memo_get(key)
        if cached is not None:
            return {
                "task_id": task.spec.task_id,
                "memo_key": key,
                "outputs": cached,
                "status": "cache_hit",
                "wall_ms": 0.0,
            }
        t0 = time.perf_counter()
        refs = task.run()
        wall = (time.perf_counter() - t0) * 1000.0
        store.memo_put(key, refs)
        prov = {
            "kind": "prov",
            "op": task.memo_obj["op"],
            "version": task.memo_obj["version"],
            "params": task.prov_params,
            "inputs": {
                name: {"ref": ref, "prov": store.prov_get(ref)}
                for name, ref in task.memo_obj["inputs"].items()
            },
            "outputs": refs,
            "label": [],
            "declass": [],
        }
        ph = store.put_obj(prov)
        for ref in refs:
            store.prov_put(ref, ph)
        return {
            "task_id": task.spec.task_id,
            "memo_key": key,
            "outputs": refs,
            "status": "executed",
            "wall_ms": round(wall, 3),
        }

    pool = ThreadPoolExecutor(max_workers=workers)
    try:
        for nid in p.order:
            node = doc.node(nid)
            shape = p.shapes[nid]
            resolved: dict[str, LayerVersion] = {}
            input_refs: dict[str, str] = {}
            for local, src in node.inputs.items():
                if src in versions and src in doc.inputs:
                    resolved[local] = versions[src]
                    input_refs[local] = version_hashes[src]
                else:
                    out = node_outputs[src]
                    resolved[local] = out["version"]
                    input_refs[local] = out["refs"][0]
            tile_tasks, combine_task, finalize = _node_tasks(
                store, doc, node, shape, resolved, p.node_tasks[nid]
            )
            results = list(pool.map(run_one, tile_tasks))
            task_records.extend(results)
            tile_refs = {
                t.spec.tile: r["outputs"][0] for t, r in zip(tile_tasks, results)
            }
            combine_ref = None
            if combine_task is not None:
                ct = combine_task(tile_refs)
                rec = run_one(ct)
                task_records.append(rec)
                combine_ref = rec["outputs"][0]
            node_outputs[nid] = finalize(tile_refs, combine_ref, input_refs)
    except Exception as exc:  # noqa: BLE001 - recorded, then surfaced via status
        error = f"{type(exc).__name__}: {exc}"
    finally:
        pool.shutdown(wait=True)

    executed = sum(1 for r in task_records if r["status"] == "executed")
    hits = sum(1 for r in task_records if r["status"] == "cache_hit")
    record = {
        "kind": "run",
        "run_id": run_id,
        "doc_hash": p.doc_hash,
        "doc": doc_obj,
        "pins": p.pins,
        "workers": workers,
        "tasks": task_records,
        "executed": executed,
        "cache_hits": hits,
        "outputs": {
            nid: {
                "kind": node_outputs[nid]["kind"],
                "refs": node_outputs[nid]["refs"],
                "label": node_outputs[nid]["label"].as_list(),
            }
            for nid in doc.outputs
            if nid in node_outputs
        },
        "status": "failed" if error else "succeeded",
        "error": error,
        "started": started,
        "finished": format_instant(now()),
        "wall_ms": round((time.perf_counter() - t_begin) * 1000.0, 3),
    }
    record_hash = store.put_obj(record)
    store.run_put(run_id, record_hash)
    return record


def _node_tasks(
    store: ChunkStore,
    doc: PipelineDoc,
    node: NodeSpec,
    shape: NodeShape,
    resolved: dict[str, LayerVersion],
    specs: list[TaskSpec],
):
    """Concrete tasks for one node, plus the run-level finalize step.

    Returns (tile_tasks, combine_factory, finalize) where combine_factory
    maps tile outputs to the combine task (or is None), and finalize
    assembles manifests / collects refs and provenance once every task of
    the node is done.
    """
    tile_specs = [s for s in specs if s.kind == "tile"]
    op_version = OP_VERSIONS[node.op]
    tile_size = TileGrid(1, 1).tile_size

    def node_prov(outputs: list[str], input_refs: dict[str, str], extra: dict):
        refs = dict(input_refs)
        refs.update(extra)
        obj = {
            "kind": "prov",
            "op": node.op,
            "version": op_version,
            "params": node.params,
            "inputs": {
                name: {"ref": ref, "prov": store.prov_get(ref)}
                for name, ref in refs.items()
            },
            "outputs": outputs,
            "label": shape.label.as_list(),
            "declass": [],
        }
        ph = store.put_obj(obj)
        for ref in outputs:
            store.prov_put(ref, ph)

    def assemble_layer(tile_refs: dict[tuple[int, int], str]) -> LayerVersion:
        version = LayerVersion(
            layer_name=f"{doc.name}.{node.id}",
            crs=shape.crs,
            affine=shape.affine,
            width=shape.width,
            height=shape.height,
            dtype=shape.dtype,
            nodata=shape.nodata,
            band_count=1,
            time_stamp=None,
            label=shape.label,
            chunk_map={(1, tx, ty): ref for (tx, ty), ref in tile_refs.items()},
        )
        version.validate()
        store.put_obj(version.manifest_obj())
        return version

    if node.op == "expr":
        prog = parse(node.params["expr"])
        memo_params = {"expr": prog.canonical_hash}
        prov_params = {"expr": prog.canonical_text()}
        tasks = []
        for spec in tile_specs:
            tx, ty = spec.tile
            inputs = {
                f"{alias}.b{band}": resolved[alias].chunk_map[(band, tx, ty)]
                for alias, band in prog.bands
            }

            def run(inputs=inputs):
                loaded: dict[str, dict[int, Chunk]] = {}
                for name, ref in inputs.items():
                    alias, band = name.rsplit(".b", 1)
                    loaded.setdefault(alias, {})[int(band)] = store.get_chunk(ref)
                return [store.put_chunk(eval_chunk(prog, loaded))]

            tasks.append(_Task(spec, _memo(node.op, op_version, memo_params, inputs), run, prov_params))

        def finalize(tile_refs, combine_ref, input_refs):
            version = assemble_layer(tile_refs)
            node_prov([version.manifest_hash], input_refs, {})
            return {"kind": "layer", "refs": [version.manifest_hash],
                    "label": shape.label, "version": version}

        return tasks, None, finalize

    if node.op == "zonal_stats":
        layer = resolved["layer"]
        zones_ref = node.params["zones"]
        zones = PolygonSet.from_obj(store.get_obj(zones_ref))
        grid = layer.grid
        tasks = []
        for spec in tile_specs:
            tx, ty = spec.tile
            x0, y0, x1, y1 = grid.tile_pixel_bounds(tx, ty)
            inputs = {"layer.b1": layer.chunk_map[(1, tx, ty)], "zones": zones_ref}
            memo_params = {
                "affine": layer.affine.as_list(),
                "px0": x0, "py0": y0, "w": x1 - x0, "h": y1 - y0,
            }

            def run(inputs=inputs, x0=x0, y0=y0, w=x1 - x0, h=y1 - y0):
                chunk = _clip_tile(store.get_chunk(inputs["layer.b1"]), w, h)
                acc = zonal_accumulate(chunk, layer.affine, x0, y0, zones.polygons)
                part = {"kind": "zonal_part", **acc.as_obj()}
                return [store.put_obj(part)]

            tasks.append(_Task(spec, _memo(node.op, op_version, memo_params, inputs), run, memo_params))

        combine_spec = specs[-1]

        def combine_factory(tile_refs: dict[tuple[int, int], str]) -> _Task:
            inputs = {
                f"part/{ty}/{tx}": ref for (tx, ty), ref in sorted(
                    tile_refs.items(), key=lambda kv: (kv[0][1], kv[0][0])
                )
            }

            def run():
                acc = ZoneAccumulator(len(zones.polygons))
                for name in sorted(inputs):
                    acc.merge(ZoneAccumulator.from_obj(store.get_obj(inputs[name])))
                stats = [s.as_obj() for s in acc.finish()]
                return [store.put_obj({"kind": "zonal_result", "stats": stats})]

            memo_obj = _memo("zonal_stats.combine", OP_VERSIONS["zonal_stats.combine"], {}, inputs)
            return _Task(combine_spec, memo_obj, run, {})

        def finalize(tile_refs, combine_ref, input_refs):
            node_prov([combine_ref], input_refs, {"zones": zones_ref})
            return {"kind": "table", "refs": [combine_ref],
                    "label": shape.label, "version": None}

        return tasks, combine_factory, finalize

    if node.op == "rasterize_points":
        template = resolved["template"]
        points_ref = node.params["points"]
        points = PointSet.from_obj(store.get_obj(points_ref))
        if shape.crs.epsg_code == 4326:
            xs, ys = points.lons, points.lats
        else:
            xs, ys = transform_points(Crs(4326), shape.crs, points.lons, points.lats)
        grid = shape.grid
        k = node.params["min_count"]
        tasks = []
        for spec in tile_specs:
            tx, ty = spec.tile
            x0, y0, x1, y1 = grid.tile_pixel_bounds(tx, ty)
            inputs = {"points": points_ref}
            memo_params = {
                "min_count": k,
                "epsg": shape.crs.epsg_code,
                "affine": shape.affine.as_list(),
                "px0": x0, "py0": y0, "w": x1 - x0, "h": y1 - y0,
            }

            def run(x0=x0, y0=y0, w=x1 - x0, h=y1 - y0):
                counts = bin_points_window(xs, ys, shape.affine, x0, y0, w, h, k)
                return [store.put_chunk(_pad_tile(counts, tile_size, COUNT_NODATA))]

            tasks.append(_Task(spec, _memo(node.op, op_version, memo_params, inputs), run, memo_params))

        def finalize(tile_refs, combine_ref, input_refs):
            version = assemble_layer(tile_refs)
            node_prov([version.manifest_hash], input_refs, {"points": points_ref})
            return {"kind": "layer", "refs": [version.manifest_hash],
                    "label": shape.label, "version": version}

        return tasks, None, finalize

    if node.op == "temporal_diff":
        a, b = resolved["a"], resolved["b"]
        pred_src = node.params.get("predicate", "A.b1 != B.b1")
        prog = parse(pred_src)
        grid = shape.grid
        prov_params = {"predicate": prog.canonical_text()}
        tasks = []
        for spec in tile_specs:
            tx, ty = spec.tile
            x0, y0, x1, y1 = grid.tile_pixel_bounds(tx, ty)
            # window size is part of the key: identical chunk bytes under a
            # different layer geometry must not share a mask
            memo_params = {"predicate": prog.canonical_hash, "w": x1 - x0, "h": y1 - y0}
            inputs = {
                "a.b1": a.chunk_map[(1, tx, ty)],
                "b.b1": b.chunk_map[(1, tx, ty)],
            }

            def run(inputs=inputs, w=x1 - x0, h=y1 - y0):
                ca = _clip_tile(store.get_chunk(inputs["a.b1"]), w, h)
                cb = _clip_tile(store.get_chunk(inputs["b.b1"]), w, h)
                mask, _count = diff_window(ca, cb, prog)
                return [store.put_chunk(_pad_tile(mask, tile_size, DIFF_NODATA))]

            tasks.append(_Task(spec, _memo(node.op, op_version, memo_params, inputs), run, prov_params))

        combine_spec = specs[-1]

        def combine_factory(tile_refs: dict[tuple[int, int], str]) -> _Task:
            inputs = {
                f"part/{ty}/{tx}": ref for (tx, ty), ref in sorted(
                    tile_refs.items(), key=lambda kv: (kv[0][1], kv[0][0])
                )
            }

            def run():
                changed = 0
                for name in sorted(inputs):
                    mask = store.get_chunk(inputs[name])
                    changed += int((mask.values == 1).sum())
                return [store.put_obj({"kind": "diff_summary", "changed_count": changed})]

            memo_obj = _memo("temporal_diff.combine", OP_VERSIONS["temporal_diff.combine"], {}, inputs)
            return _Task(combine_spec, memo_obj, run, {})

        def finalize(tile_refs, combine_ref, input_refs):
            version = assemble_layer(tile_refs)
            node_prov([version.manifest_hash, combine_ref], input_refs, {})
            return {"kind": "diff", "refs": [version.manifest_hash, combine_ref],
                    "label": shape.label, "version": version}

        return tasks, combine_factory, finalize

    # reproject_nearest
    src = resolved["src"]
    src_arr = read_layer_array(store, src)
    if src.nodata is None:
        src_valid = np.ones(src_arr.shape, dtype=bool)
    else:
        src_valid = src_arr != np.asarray(src.nodata).astype(src_arr.dtype)
    grid = shape.grid
    src_inputs = {
        f"src/{band}/{ty}/{tx}": ref
        for (band, tx, ty), ref in sorted(src.chunk_map.items())
    }
    src_geom = {
        "src_epsg": src.crs.epsg_code,
        "src_affine": src.affine.as_list(),
        "src_width": src.width,
        "src_height": src.height,
        "src_dtype": src.dtype,
        "src_nodata": src.nodata,
    }
    tasks = []
    for spec in tile_specs:
        tx, ty = spec.tile
        x0, y0, x1, y1 = grid.tile_pixel_bounds(tx, ty)
        memo_params = {
            **src_geom,
            "epsg": shape.crs.epsg_code,
            "affine": shape.affine.as_list(),
            "px0": x0, "py0": y0, "w": x1 - x0, "h": y1 - y0,
            "dtype": shape.dtype,
            "nodata": shape.nodata,
        }

        def run(x0=x0, y0=y0, w=x1 - x0, h=y1 - y0):
            window = reproject_window(
                src_arr, src_valid, src.crs, src.affine,
                shape.crs, shape.affine, x0, y0, w, h,
                shape.dtype, shape.nodata,
            )
            return [store.put_chunk(_pad_tile(window, tile_size, shape.nodata))]

        tasks.append(_Task(spec, _memo(node.op, op_version, memo_params, src_inputs), run, memo_params))

    def finalize(tile_refs, combine_ref, input_refs):
        version = assemble_layer(tile_refs)
        node_prov([version.manifest_hash], input_refs, {})
        return {"kind": "layer", "refs": [version.manifest_hash],
                "label": shape.label, "version": version}

    return tasks, None, finalize


def _memo(op: str, version: str, params: dict, inputs: dict[str, str]) -> dict:
    return {"op": op, "version": version, "params": params, "inputs": inputs}


# -- provenance --------------------------------------------------------------


def provenance_of(store: ChunkStore, ref: str) -> dict:
    """Full provenance tree for an output ref, down to ingest leaves."""
    ph = store.prov_get(ref)
    if ph is None:
        raise MissingObjectError(f"no provenance recorded for {ref}")
    node = store.get_obj(ph)
    children = {
        name: provenance_of(store, inp["ref"])
        for name, inp in sorted(node["inputs"].items())
    }
    return {"ref": ref, "node": node, "children": children}


def tree_hash(tree: dict) -> str:
    """Digest of a provenance tree; stubs stand in for their subtree."""
    if "stub" in tree and "node" not in tree:
        return tree["stub"]
    obj = {
        "node": hash_obj(tree["node"]),
        "children": {name: tree_hash(child) for name, child in tree["children"].items()},
    }
    return sha256_hex(canonical_json_bytes(obj))


def redact_tree(tree: dict, permitted: Callable[[Label], bool]) -> dict:
    """Replace subtrees whose labels the caller may not see with hash stubs.

    The stub carries the subtree's tree hash, so the root hash of the
    redacted tree equals the unredacted one.
    """
    if "stub" in tree and "node" not in tree:
        return tree
    label = Label.from_list(tree["node"].get("label", []))
    if not permitted(label):
        return {"stub": tree_hash(tree)}
    return {
        "ref": tree["ref"],
        "node": tree["node"],
        "children": {
            name: redact_tree(child, permitted)
            for name, child in tree["children"].items()
        },
    }


def declassify_output(
    store: ChunkStore,
    registry: Registry,
    manifest_hash: str,
    tag_name: str,
    principal: Principal,
) -> str:
    """New layer version identical to ``manifest_hash`` minus one secrecy tag.

    Requires the principal to hold the tag's declassification capability.
    The event is recorded in provenance as a hash of the tag name, so the
    provenance graph never spells out what secret was removed.
    """
    obj = store.get_obj(manifest_hash)
    if obj.get("kind") != "layer":
        raise ValidationError("declassification applies to layer versions")
    version = LayerVersion.from_manifest_obj(obj)
    new_label = registry.declassify(version.label, tag_name, principal)
    version.label = new_label
    new_hash = store.put_obj(version.manifest_obj())
    tag_hash = sha256_hex(tag_name.encode("utf-8"))
    prov = {
        "kind": "prov",
        "op": "declassify",
        "version": OP_VERSIONS["declassify"],
        "params": {"tag_hash": tag_hash},
        "inputs": {"src": {"ref": manifest_hash, "prov": store.prov_get(manifest_hash)}},
        "outputs": [new_hash],
        "label": new_label.as_list(),
        "declass": [tag_hash],
    }
    store.prov_put(new_hash, store.put_obj(prov))
    return new_hash
