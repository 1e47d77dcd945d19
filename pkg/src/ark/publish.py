"""Reproduction bundles: export a run as a self-contained directory, verify one.

A bundle holds everything needed to re-execute a pipeline from scratch and
check that the outputs come out hash-identical:

    manifest.json   canonical JSON: format tag, pipeline doc, pinned input
                    manifests, expected output refs, object inventory,
                    tool versions, redaction flag
    objects/        the transitive provenance closure of the outputs, in
                    chunk-store fanout layout (one-byte raw envelope)
    ATTESTATION     sha256 of manifest.json, hex, newline-terminated

Verification re-hashes every object and checks the attestation before any
re-execution, then replays the doc against the bundled inputs in a fresh
store and compares output refs.  A redacted bundle (secret sources elided
to hash stubs) skips the replay and only confirms the bundled outputs.
"""

from __future__ import annotations

import json
import shutil
import tempfile
import zlib
from pathlib import Path

from . import __version__
from .canonical import canonical_json_bytes, sha256_hex
from .dataflow import (
    OP_VERSIONS,
    PipelineDoc,
    execute,
    provenance_of,
    tree_hash,
)
from .errors import ArkError, MissingObjectError, ValidationError
from .store import ChunkStore

BUNDLE_FORMAT = "ark-bundle/1"


def _collect_refs(store: ChunkStore, ref: str, acc: set[str]):
    """Add ``ref`` and, for container objects, everything it points at."""
    if ref in acc:
        return
    acc.add(ref)
    try:
        obj = json.loads(store.get_bytes(ref).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        return  # raw chunk bytes
    if not isinstance(obj, dict):
        return
    if obj.get("kind") == "layer":
        for chunk_ref in obj["chunk_map"].values():
            acc.add(chunk_ref)


def _closure(store: ChunkStore, tree: dict, acc: set[str], redact: bool,
             stubbed: list[str]):
    """Walk a provenance tree gathering object refs; optionally stub secrets.

    With ``redact`` set, any non-root subtree whose recorded label is
    non-empty is skipped entirely and its tree hash noted in ``stubbed``.
    For our engine that is exactly the ingest leaves of secret sources,
    since task records carry empty labels by construction.
    """
    _collect_refs(store, tree["ref"], acc)
    for sub in tree["children"].values():
        if redact and sub["node"].get("label"):
            stubbed.append(tree_hash(sub))
        else:
            _closure(store, sub, acc, redact, stubbed)


def export_bundle(store: ChunkStore, run_id: str, out_dir: str | Path,
                  redact: bool = False) -> dict:
    """Write a reproduction bundle for a completed run; returns its manifest."""
    record_hash = store.run_get(run_id)
    if record_hash is None:
        raise MissingObjectError(f"unknown run {run_id!r}")
    record = store.get_obj(record_hash)
    if record.get("status") != "succeeded":
        raise ValidationError(f"run {run_id!r} did not succeed; nothing to export")

    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        raise ValidationError(f"output directory {out} is not empty")
    (out / "objects").mkdir(parents=True, exist_ok=True)

    refs: set[str] = set()
    stubbed: list[str] = []
    for outspec in record["outputs"].values():
        for ref in outspec["refs"]:
            _closure(store, provenance_of(store, ref), refs, redact, stubbed)

    for ref in sorted(refs):
        data = store.get_bytes(ref)
        path = out / "objects" / ref[:2] / ref[2:]
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(b"\x00" + data)

    manifest = {
        "format": BUNDLE_FORMAT,
        "run_id": run_id,
        "doc": record["doc"],
        "doc_hash": record["doc_hash"],
        "pins": record["pins"],
        "expected_outputs": record["outputs"],
        "objects": sorted(refs),
        "redacted": bool(redact),
        "stubbed": sorted(set(stubbed)),
        "tool_versions": {"ark": __version__, "ops": dict(sorted(OP_VERSIONS.items()))},
    }
    manifest_bytes = canonical_json_bytes(manifest)
    (out / "manifest.json").write_bytes(manifest_bytes)
    (out / "ATTESTATION").write_text(sha256_hex(manifest_bytes) + "\n")
    return manifest


def _read_bundle_object(path: Path) -> bytes:
    body = path.read_bytes()
    if not body:
        raise ArkError(f"empty object file {path}")
    if body[0] == 0:
        return body[1:]
    if body[0] == 1:
        return zlib.decompress(body[1:])
    raise ArkError(f"unknown envelope byte {body[0]} in {path}")


def verify_bundle(bundle_dir: str | Path, scratch_dir: str | Path | None = None) -> dict:
    """Check a bundle end to end; report {"reproduced": bool, "mismatches": [...]}.

    Order matters: attestation first, then object hashes, then (for full
    bundles) re-execution in a fresh store and output comparison.  The
    first two stages catch tampering without running anything.
    """
    bundle = Path(bundle_dir)
    mismatches: list[str] = []
    report = {"reproduced": False, "mismatches": mismatches, "outputs_verified": False}

    manifest_path = bundle / "manifest.json"
    att_path = bundle / "ATTESTATION"
    if not manifest_path.is_file() or not att_path.is_file():
        mismatches.append("bundle is missing manifest.json or ATTESTATION")
        return report
    manifest_bytes = manifest_path.read_bytes()
    want_att = att_path.read_text().strip()
    got_att = sha256_hex(manifest_bytes)
    if want_att != got_att:
        mismatches.append(f"attestation mismatch: manifest hashes to {got_att}, "
                          f"ATTESTATION says {want_att}")
        return report
    try:
        manifest = json.loads(manifest_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        mismatches.append(f"manifest.json is not valid JSON: {exc}")
        return report
    if manifest.get("format") != BUNDLE_FORMAT:
        mismatches.append(f"unknown bundle format {manifest.get('format')!r}")
        return report

    inventory = set(manifest.get("objects", []))
    on_disk = {}
    objroot = bundle / "objects"
    if objroot.is_dir():
        for fan in sorted(objroot.iterdir()):
            if not fan.is_dir():
                continue
            for f in sorted(fan.iterdir()):
                on_disk[fan.name + f.name] = f
    for ref in sorted(inventory - set(on_disk)):
        mismatches.append(f"object {ref} listed in manifest but missing from bundle")
    for ref in sorted(set(on_disk) - inventory):
        mismatches.append(f"object {ref} present in bundle but not in manifest")
    payloads = {}
    for ref, path in sorted(on_disk.items()):
        if ref not in inventory:
            continue
        try:
            data = _read_bundle_object(path)
        except (ArkError, zlib.error) as exc:
            mismatches.append(f"object {ref} unreadable: {exc}")
            continue
        got = sha256_hex(data)
        if got != ref:
            mismatches.append(f"object {ref} hashes to {got}")
            continue
        payloads[ref] = data
    if mismatches:
        return report

    expected = manifest["expected_outputs"]
    expected_refs = [r for spec in expected.values() for r in spec["refs"]]
    missing_outputs = [r for r in expected_refs if r not in payloads]
    if missing_outputs:
        for ref in missing_outputs:
            mismatches.append(f"expected output {ref} not bundled")
        return report
    report["outputs_verified"] = True

    if manifest.get("redacted"):
        report["note"] = ("bundle is redacted; outputs verified against their "
                          "hashes but the run was not re-executed")
        return report

    # replay in a disposable store seeded with exactly the bundled objects
    tmp = None
    if scratch_dir is None:
        tmp = tempfile.mkdtemp(prefix="ark-verify-")
        scratch = Path(tmp)
    else:
        scratch = Path(scratch_dir)
        scratch.mkdir(parents=True, exist_ok=True)
        if any(scratch.iterdir()):
            raise ValidationError(f"scratch directory {scratch} is not empty")
    try:
        store = ChunkStore(scratch)
        for ref, data in payloads.items():
            store.put_bytes(data)
        doc = PipelineDoc.from_obj(manifest["doc"])
        if doc.doc_hash() != manifest["doc_hash"]:
            mismatches.append("pipeline doc does not match recorded doc_hash")
            return report
        try:
            record = execute(store, doc, workers=1, pins=manifest["pins"])
        except ArkError as exc:
            mismatches.append(f"re-execution failed: {exc}")
            return report
        if record["status"] != "succeeded":
            mismatches.append(f"re-execution failed: {record.get('error')}")
            return report
        for nid, spec in sorted(expected.items()):
            got = record["outputs"].get(nid)
            if got is None:
                mismatches.append(f"output node {nid} missing from re-execution")
                continue
            if got["refs"] != spec["refs"]:
                mismatches.append(
                    f"output {nid} refs differ: expected {spec['refs']}, "
                    f"got {got['refs']}"
                )
        if not mismatches:
            report["reproduced"] = True
        return report
    finally:
        if tmp is not None:
            shutil.rmtree(tmp, ignore_errors=True)
