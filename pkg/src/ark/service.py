"""Label-checked HTTP front end: catalog, tiles, runs, provenance, webhooks.

Every endpoint authenticates a bearer token against the registry, which is
reloaded from disk per request so revocations take effect immediately.
Flow denials are a uniform 403 "access denied" with no hint of which tag
was involved.  A background watcher polls layer refs and posts change
notifications (aggregate counts only) to subscribed webhooks, rechecking
flow at delivery time.
"""

from __future__ import annotations

import json
import threading
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from contextlib import asynccontextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import httpx
import numpy as np
from fastapi import FastAPI, Request, Response
from fastapi.responses import JSONResponse

from .algebra import parse
from .canonical import is_hex_digest
from .chunk import Chunk, canonical_chunk_bytes
from .clock import format_instant, now
from .dataflow import PipelineDoc, execute, plan, provenance_of, redact_tree
from .difc import Label, Principal, Registry
from .errors import (
    AuthorizationError,
    GeometryError,
    MissingObjectError,
    ParseError,
    ValidationError,
)
from .rasterops import diff_window
from .store import ChunkStore, Commit, LayerVersion, load_layer, resolve_latest

DENIED = "access denied"


@dataclass
class Subscription:
    id: str
    layer_name: str
    aoi: Optional[list[float]]
    predicate: str
    url: str
    principal_name: str
    token: str
    last_commit: Optional[str]
    last_manifest: Optional[str]


@dataclass
class RunState:
    status: str  # queued | running | succeeded | failed
    record: Optional[dict] = None


class Service:
    """Shared state behind the app: store, runs, subscriptions, watcher."""

    def __init__(
        self,
        data_dir,
        registry_dir,
        watch_interval: float = 0.25,
        retry_base: float = 0.25,
        run_workers: int = 2,
    ):
        self.store = ChunkStore(data_dir)
        self.registry_dir = Path(registry_dir)
        self.watch_interval = watch_interval
        self.retry_base = retry_base
        self.run_workers = run_workers
        self.runs: dict[str, RunState] = {}
        self.subs: dict[str, Subscription] = {}
        self.lock = threading.Lock()
        self.pool = ThreadPoolExecutor(max_workers=2)
        self.deliveries_path = Path(data_dir) / "deliveries.jsonl"
        self.deadletter_path = Path(data_dir) / "deadletter.jsonl"
        self._stop = threading.Event()
        self._watcher: Optional[threading.Thread] = None

    def registry(self) -> Registry:
        return Registry.load(self.registry_dir)

    def authenticate(self, request: Request) -> tuple[Registry, Principal]:
        header = request.headers.get("authorization", "")
        if not header.lower().startswith("bearer "):
            raise _Unauthorized()
        registry = self.registry()
        principal = registry.by_token(header[7:].strip())
        if principal is None:
            raise _Unauthorized()
        return registry, principal

    def may_read(self, registry: Registry, principal: Principal, label: Label) -> bool:
        return registry.can_flow(label, principal, format_instant(now()))

    # -- runs -----------------------------------------------------------

    def submit_run(self, doc: PipelineDoc, workers: int) -> str:
        run_id = uuid.uuid4().hex
        with self.lock:
            self.runs[run_id] = RunState("queued")

        def go():
            with self.lock:
                self.runs[run_id].status = "running"
            try:
                record = execute(self.store, doc, workers=workers, run_id=run_id)
            except Exception as exc:  # noqa: BLE001 - survives as run status
                with self.lock:
                    self.runs[run_id] = RunState("failed", {
                        "run_id": run_id, "status": "failed",
                        "error": f"{type(exc).__name__}: {exc}",
                    })
                return
            with self.lock:
                self.runs[run_id] = RunState(record["status"], record)

        self.pool.submit(go)
        return run_id

    def run_record(self, run_id: str) -> Optional[RunState]:
        with self.lock:
            state = self.runs.get(run_id)
            if state is not None:
                return state
        record_hash = self.store.run_get(run_id)
        if record_hash is None:
            return None
        record = self.store.get_obj(record_hash)
        return RunState(record["status"], record)

    # -- subscriptions ----------------------------------------------------

    def add_subscription(self, sub: Subscription):
        with self.lock:
            self.subs[sub.id] = sub

    def remove_subscription(self, sub_id: str, token: str) -> bool:
        with self.lock:
            sub = self.subs.get(sub_id)
            if sub is None or sub.token != token:
                return False
            del self.subs[sub_id]
            return True

    def start_watcher(self):
        if self._watcher is not None:
            return
        self._stop.clear()

        def loop():
            while not self._stop.wait(self.watch_interval):
                try:
                    self.poll_subscriptions()
                except Exception:  # noqa: BLE001 - watcher must survive
                    pass

        self._watcher = threading.Thread(target=loop, name="ark-watcher", daemon=True)
        self._watcher.start()

    def stop_watcher(self):
        self._stop.set()
        if self._watcher is not None:
            self._watcher.join(timeout=5)
            self._watcher = None

    def poll_subscriptions(self):
        """One pass over all subscriptions; safe to call directly in tests."""
        with self.lock:
            subs = list(self.subs.values())
        for sub in subs:
            current = self.store.read_ref(sub.layer_name)
            if current is None or current == sub.last_commit:
                continue
            commit = Commit.from_obj(self.store.get_obj(current))
            new_manifest = commit.layer_versions[0]
            old_manifest = sub.last_manifest
            if old_manifest is not None and old_manifest != new_manifest:
                self._notify(sub, old_manifest, new_manifest)
            sub.last_commit = current
            sub.last_manifest = new_manifest

    def _changed_in_aoi(self, sub: Subscription, old: LayerVersion, new: LayerVersion) -> int:
        grid = new.grid
        if not new.same_geometry(old):
            # grid changed under the subscription: treat every AOI cell of
            # the new version as changed rather than diffing unlike rasters
            total = 0
            for (_band, tx, ty) in new.chunk_map:
                x0, y0, x1, y1 = grid.tile_pixel_bounds(tx, ty)
                total += int(_aoi_mask(new, sub.aoi, x0, y0, x1 - x0, y1 - y0).sum())
            return total
        prog = parse(sub.predicate)
        changed_keys = [
            k for k in set(old.chunk_map) | set(new.chunk_map)
            if old.chunk_map.get(k) != new.chunk_map.get(k)
        ]
        total = 0
        for (band, tx, ty) in sorted(changed_keys):
            x0, y0, x1, y1 = grid.tile_pixel_bounds(tx, ty)
            w, h = x1 - x0, y1 - y0
            ca = _clip(self.store.get_chunk(old.chunk_map[(band, tx, ty)]), w, h)
            cb = _clip(self.store.get_chunk(new.chunk_map[(band, tx, ty)]), w, h)
            mask, _count = diff_window(ca, cb, prog)
            changed = (mask.values == 1) & _aoi_mask(new, sub.aoi, x0, y0, w, h)
            total += int(changed.sum())
        return total

    def _notify(self, sub: Subscription, old_manifest: str, new_manifest: str):
        old = load_layer(self.store, old_manifest)
        new = load_layer(self.store, new_manifest)
        changed = self._changed_in_aoi(sub, old, new)
        if changed < 1:
            return
        registry = self.registry()
        principal = registry.by_token(sub.token)
        if principal is None or not self.may_read(registry, principal, new.label):
            self._log_delivery({
                "time": format_instant(now()),
                "subscription_id": sub.id,
                "url": sub.url,
                "status": "suppressed",
            })
            return
        payload = {
            "subscription_id": sub.id,
            "layer": sub.layer_name,
            "old_manifest": old_manifest,
            "new_manifest": new_manifest,
            "changed_count": changed,
            "aoi": sub.aoi,
        }
        self._deliver(sub, payload)

    def _deliver(self, sub: Subscription, payload: dict):
        last_error = None
        for attempt in range(4):  # first try + up to 3 retries
            if attempt:
                time.sleep(self.retry_base * (2 ** (attempt - 1)))
            try:
                resp = httpx.post(sub.url, json=payload, timeout=10.0)
                ok = 200 <= resp.status_code < 300
                self._log_delivery({
                    "time": format_instant(now()),
                    "subscription_id": sub.id,
                    "url": sub.url,
                    "attempt": attempt + 1,
                    "status": resp.status_code,
                })
                if ok:
                    return
                last_error = f"status {resp.status_code}"
            except Exception as exc:  # noqa: BLE001 - retried, then dead-lettered
                last_error = f"{type(exc).__name__}: {exc}"
                self._log_delivery({
                    "time": format_instant(now()),
                    "subscription_id": sub.id,
                    "url": sub.url,
                    "attempt": attempt + 1,
                    "status": "error",
                    "error": last_error,
                })
        self._append_jsonl(self.deadletter_path, {
            "time": format_instant(now()),
            "subscription_id": sub.id,
            "url": sub.url,
            "payload": payload,
            "attempts": 4,
            "last_error": last_error,
        })

    def _log_delivery(self, entry: dict):
        self._append_jsonl(self.deliveries_path, entry)

    @staticmethod
    def _append_jsonl(path: Path, entry: dict):
        with open(path, "a", encoding="utf-8") as f:
            f.write(json.dumps(entry, sort_keys=True) + "\n")


def _clip(chunk: Chunk, w: int, h: int) -> Chunk:
    if chunk.values.shape == (h, w):
        return chunk
    return Chunk(chunk.dtype, w, h, chunk.nodata, chunk.values[:h, :w])


def _aoi_mask(version: LayerVersion, aoi: Optional[list[float]],
              px0: int, py0: int, w: int, h: int) -> np.ndarray:
    """Boolean (h, w) window mask of pixels whose centers fall in the AOI."""
    if aoi is None:
        return np.ones((h, w), dtype=bool)
    cols = px0 + np.arange(w, dtype=np.float64) + 0.5
    rows = py0 + np.arange(h, dtype=np.float64) + 0.5
    xs = version.affine.origin_x + cols * version.affine.pixel_w
    ys = version.affine.origin_y + rows * version.affine.pixel_h
    gx, gy = np.meshgrid(xs, ys)
    min_x, min_y, max_x, max_y = aoi
    return (gx >= min_x) & (gx <= max_x) & (gy >= min_y) & (gy <= max_y)


class _Unauthorized(Exception):
    pass


def _denied() -> JSONResponse:
    return JSONResponse({"detail": DENIED}, status_code=403)


def _not_found(what: str = "not found") -> JSONResponse:
    return JSONResponse({"detail": what}, status_code=404)


def create_app(
    data_dir,
    registry_dir,
    watch_interval: float = 0.25,
    retry_base: float = 0.25,
) -> FastAPI:
    service = Service(data_dir, registry_dir, watch_interval, retry_base)

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        service.start_watcher()
        try:
            yield
        finally:
            service.stop_watcher()
            service.pool.shutdown(wait=False)

    app = FastAPI(lifespan=lifespan)
    app.state.service = service

    @app.exception_handler(_Unauthorized)
    async def unauthorized(_req, _exc):
        return JSONResponse({"detail": "authentication required"}, status_code=401)

    @app.exception_handler(AuthorizationError)
    async def authz(_req, _exc):
        return _denied()

    @app.exception_handler(ValidationError)
    async def invalid(_req, exc):
        return JSONResponse({"detail": str(exc)}, status_code=422)

    @app.exception_handler(ParseError)
    async def parse_err(_req, exc):
        return JSONResponse({"detail": str(exc)}, status_code=422)

    @app.exception_handler(GeometryError)
    async def geom_err(_req, exc):
        return JSONResponse({"detail": str(exc)}, status_code=422)

    @app.exception_handler(MissingObjectError)
    async def missing(_req, exc):
        return _not_found()

    def layer_rows(registry: Registry, principal: Principal) -> list[dict]:
        rows = []
        for name in service.store.list_refs():
            manifest = resolve_latest(service.store, name)
            if manifest is None:
                continue
            version = load_layer(service.store, manifest)
            if not service.may_read(registry, principal, version.label):
                continue
            rows.append({
                "name": name,
                "latest": manifest,
                "label": version.label.as_list(),
                "crs": version.crs.epsg_code,
                "affine": version.affine.as_list(),
                "width": version.width,
                "height": version.height,
                "dtype": version.dtype,
                "nodata": version.nodata,
                "band_count": version.band_count,
                "tiles_x": version.grid.tiles_x,
                "tiles_y": version.grid.tiles_y,
            })
        return rows

    @app.get("/layers")
    async def get_layers(request: Request):
        registry, principal = service.authenticate(request)
        return {"layers": layer_rows(registry, principal)}

    @app.get("/layers/{name}/versions")
    async def get_versions(name: str, request: Request):
        registry, principal = service.authenticate(request)
        commit_hash = service.store.read_ref(name)
        if commit_hash is None:
            return _not_found()
        rows = []
        while commit_hash is not None:
            commit = Commit.from_obj(service.store.get_obj(commit_hash))
            for manifest in commit.layer_versions:
                version = load_layer(service.store, manifest)
                if service.may_read(registry, principal, version.label):
                    rows.append({
                        "commit": commit_hash,
                        "manifest": manifest,
                        "message": commit.message,
                        "created_at": commit.created_at,
                        "label": version.label.as_list(),
                        "time_stamp": version.time_stamp,
                    })
            commit_hash = commit.parent
        if not rows:
            # a layer with nothing readable looks identical to no layer
            return _not_found()
        return {"layer": name, "versions": rows}

    @app.get("/tiles/{name}/{manifest}/{band}/{tx}/{ty}")
    async def get_tile(name: str, manifest: str, band: int, tx: int, ty: int,
                       request: Request):
        registry, principal = service.authenticate(request)
        if not is_hex_digest(manifest) or not service.store.has(manifest):
            return _not_found()
        obj = service.store.get_obj(manifest)
        if obj.get("kind") != "layer" or obj.get("layer_name") != name:
            return _not_found()
        version = LayerVersion.from_manifest_obj(obj)
        if not service.may_read(registry, principal, version.label):
            return _denied()
        ref = version.chunk_map.get((band, tx, ty))
        if ref is None:
            return _not_found()
        chunk = service.store.get_chunk(ref)
        return Response(
            content=canonical_chunk_bytes(chunk),
            media_type="application/octet-stream",
            headers={"X-Chunk-Ref": ref},
        )

    @app.post("/runs", status_code=202)
    async def post_run(request: Request, workers: int = 2):
        registry, principal = service.authenticate(request)
        if workers < 1:
            raise ValidationError("workers must be a positive integer")
        try:
            body = await request.json()
        except Exception as exc:
            raise ValidationError(f"request body is not valid JSON: {exc}") from exc
        doc = PipelineDoc.from_obj(body)
        p = plan(service.store, doc)
        for alias, manifest in p.pins.items():
            version = load_layer(service.store, manifest)
            if not service.may_read(registry, principal, version.label):
                return _denied()
        for node in doc.nodes:
            for key in ("zones", "points"):
                ref = node.params.get(key)
                if ref is not None:
                    label = Label.from_list(service.store.get_obj(ref).get("label", []))
                    if not service.may_read(registry, principal, label):
                        return _denied()
        run_id = service.submit_run(doc, workers)
        return {"run_id": run_id}

    @app.get("/runs/{run_id}")
    async def get_run(run_id: str, request: Request):
        service.authenticate(request)
        state = service.run_record(run_id)
        if state is None:
            return _not_found()
        body = {"run_id": run_id, "status": state.status}
        if state.record is not None:
            for key in ("executed", "cache_hits", "error", "doc_hash",
                        "started", "finished"):
                if key in state.record:
                    body[key] = state.record[key]
        return body

    @app.get("/results/{run_id}")
    async def get_results(run_id: str, request: Request):
        registry, principal = service.authenticate(request)
        state = service.run_record(run_id)
        if state is None:
            return _not_found()
        if state.status in ("queued", "running"):
            return JSONResponse({"detail": f"run is {state.status}"}, status_code=409)
        if state.status == "failed":
            return JSONResponse(
                {"run_id": run_id, "status": "failed",
                 "error": state.record.get("error") if state.record else None},
                status_code=200,
            )
        outputs = {}
        for nid, out in state.record["outputs"].items():
            label = Label.from_list(out["label"])
            if not service.may_read(registry, principal, label):
                # refs are opaque digests; withhold labels and shape details
                outputs[nid] = {"refs": out["refs"], "denied": True}
                continue
            entry = {"kind": out["kind"], "refs": out["refs"], "label": out["label"]}
            first = service.store.get_obj(out["refs"][0])
            if first.get("kind") == "layer":
                version = LayerVersion.from_manifest_obj(first)
                entry["layer"] = {
                    "name": version.layer_name,
                    "crs": version.crs.epsg_code,
                    "affine": version.affine.as_list(),
                    "width": version.width,
                    "height": version.height,
                    "dtype": version.dtype,
                    "nodata": version.nodata,
                    "tiles_x": version.grid.tiles_x,
                    "tiles_y": version.grid.tiles_y,
                }
            if out["kind"] == "table":
                entry["stats"] = service.store.get_obj(out["refs"][0])["stats"]
            if out["kind"] == "diff":
                entry["changed_count"] = service.store.get_obj(out["refs"][1])["changed_count"]
            outputs[nid] = entry
        return {"run_id": run_id, "status": "succeeded", "outputs": outputs}

    @app.post("/subscriptions", status_code=201)
    async def post_subscription(request: Request):
        registry, principal = service.authenticate(request)
        try:
            body = await request.json()
        except Exception as exc:
            raise ValidationError(f"request body is not valid JSON: {exc}") from exc
        if not isinstance(body, dict):
            raise ValidationError("subscription body must be an object")
        layer_name = body.get("layer")
        url = body.get("url")
        if not isinstance(layer_name, str) or not isinstance(url, str):
            raise ValidationError("subscription needs layer and url")
        predicate = body.get("predicate", "A.b1 != B.b1")
        parse(predicate)
        aoi = body.get("aoi")
        if aoi is not None:
            if (not isinstance(aoi, list) or len(aoi) != 4
                    or not all(isinstance(v, (int, float)) for v in aoi)):
                raise ValidationError("aoi must be [min_x, min_y, max_x, max_y]")
            if not (aoi[0] <= aoi[2] and aoi[1] <= aoi[3]):
                raise ValidationError("aoi must be ordered min <= max")
            aoi = [float(v) for v in aoi]
        commit_hash = service.store.read_ref(layer_name)
        if commit_hash is None:
            return _not_found()
        manifest = resolve_latest(service.store, layer_name)
        version = load_layer(service.store, manifest)
        if not service.may_read(registry, principal, version.label):
            return _denied()
        sub = Subscription(
            id=uuid.uuid4().hex,
            layer_name=layer_name,
            aoi=aoi,
            predicate=predicate,
            url=url,
            principal_name=principal.name,
            token=principal.token,
            last_commit=commit_hash,
            last_manifest=manifest,
        )
        service.add_subscription(sub)
        return {"id": sub.id, "layer": layer_name, "aoi": aoi}

    @app.delete("/subscriptions/{sub_id}", status_code=204)
    async def delete_subscription(sub_id: str, request: Request):
        _registry, principal = service.authenticate(request)
        if not service.remove_subscription(sub_id, principal.token):
            return _not_found()
        return Response(status_code=204)

    @app.get("/provenance/{ref}")
    async def get_provenance(ref: str, request: Request):
        registry, principal = service.authenticate(request)
        if not is_hex_digest(ref):
            return _not_found()
        tree = provenance_of(service.store, ref)
        visible = redact_tree(
            tree, lambda label: service.may_read(registry, principal, label)
        )
        return {"ref": ref, "tree": visible}

    return app


def serve(port: int, data_dir, registry_dir, host: str = "127.0.0.1"):
    """Run the HTTP service until interrupted."""
    import uvicorn

    app = create_app(data_dir, registry_dir)
    uvicorn.run(app, host=host, port=port, log_level="warning")
