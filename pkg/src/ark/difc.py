"""Information-flow labels, principals, and the tag registry.

Labels are secrecy-only: a set of tag names.  Combining data joins labels
(set union), so derived outputs are at least as secret as every input.
Data may flow to a principal only when its effective label is a subset of
the principal's clearance.  The one escape hatch is declassification, which
removes a single tag and requires a matching capability.

Tags may carry an ``embargo_until`` instant.  Once the clock reaches it the
tag stops restricting flow: the stored label text never changes, but the
effective label computed at read time no longer contains the tag.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

from .canonical import canonical_json_bytes
from .clock import parse_instant
from .errors import AuthorizationError, ValidationError

_DENIED = "access denied"


def _check_tag_name(name: str) -> str:
    if not name or not all(c.isalnum() or c in "._-" for c in name):
        raise ValidationError(f"bad tag name {name!r}")
    return name


@dataclass(frozen=True)
class Label:
    """Immutable set of secrecy tags."""

    tags: frozenset[str]

    @classmethod
    def bottom(cls) -> "Label":
        return cls(frozenset())

    @classmethod
    def of(cls, *names: str) -> "Label":
        return cls(frozenset(_check_tag_name(n) for n in names))

    @classmethod
    def from_list(cls, names: Iterable[str]) -> "Label":
        return cls.of(*names)

    def as_list(self) -> list[str]:
        return sorted(self.tags)

    def join(self, other: "Label") -> "Label":
        return Label(self.tags | other.tags)

    def without(self, tag: str) -> "Label":
        return Label(self.tags - {tag})

    def is_subset_of(self, other: "Label") -> bool:
        return self.tags <= other.tags

    def __contains__(self, tag: str) -> bool:
        return tag in self.tags

    def __bool__(self) -> bool:
        return bool(self.tags)


def join_all(labels: Iterable[Label]) -> Label:
    out = Label.bottom()
    for lab in labels:
        out = out.join(lab)
    return out


@dataclass(frozen=True)
class Tag:
    name: str
    created_at: str
    embargo_until: Optional[str] = None

    def obj(self) -> dict:
        return {
            "name": self.name,
            "created_at": self.created_at,
            "embargo_until": self.embargo_until,
        }


@dataclass(frozen=True)
class Principal:
    name: str
    token: str
    clearance: Label
    capabilities: frozenset[str]

    def obj(self) -> dict:
        return {
            "name": self.name,
            "token": self.token,
            "clearance": self.clearance.as_list(),
            "capabilities": sorted(self.capabilities),
        }


class Registry:
    """Tags and principals, persisted as two JSON files in a directory."""

    def __init__(self, tags: dict[str, Tag], principals: dict[str, Principal]):
        self.tags = tags
        self.principals = principals

    @classmethod
    def empty(cls) -> "Registry":
        return cls({}, {})

    @classmethod
    def load(cls, registry_dir: str | Path) -> "Registry":
        root = Path(registry_dir)
        tags: dict[str, Tag] = {}
        principals: dict[str, Principal] = {}
        tag_path = root / "tags.json"
        if tag_path.exists():
            for rec in json.loads(tag_path.read_text()):
                tag = Tag(rec["name"], rec["created_at"], rec.get("embargo_until"))
                tags[tag.name] = tag
        prin_path = root / "principals.json"
        if prin_path.exists():
            for rec in json.loads(prin_path.read_text()):
                prin = Principal(
                    rec["name"],
                    rec["token"],
                    Label.from_list(rec["clearance"]),
                    frozenset(rec.get("capabilities", [])),
                )
                principals[prin.name] = prin
        return cls(tags, principals)

    def save(self, registry_dir: str | Path):
        root = Path(registry_dir)
        root.mkdir(parents=True, exist_ok=True)
        tag_recs = [self.tags[k].obj() for k in sorted(self.tags)]
        prin_recs = [self.principals[k].obj() for k in sorted(self.principals)]
        (root / "tags.json").write_bytes(canonical_json_bytes(tag_recs) + b"\n")
        (root / "principals.json").write_bytes(canonical_json_bytes(prin_recs) + b"\n")

    def add_tag(self, tag: Tag):
        if tag.name in self.tags:
            raise ValidationError(f"tag {tag.name!r} already registered")
        _check_tag_name(tag.name)
        self.tags[tag.name] = tag

    def add_principal(self, principal: Principal):
        if principal.name in self.principals:
            raise ValidationError(f"principal {principal.name!r} already registered")
        self.principals[principal.name] = principal

    def by_token(self, token: str) -> Optional[Principal]:
        for prin in self.principals.values():
            if prin.token == token:
                return prin
        return None

    def effective_label(self, label: Label, at: str) -> Label:
        """Drop tags whose embargo has lapsed by instant ``at``.

        Unregistered tags never expire; absence of a record must not make
        data less secret.
        """
        now = parse_instant(at)
        kept = set()
        for name in label.tags:
            tag = self.tags.get(name)
            if tag is not None and tag.embargo_until is not None:
                if parse_instant(tag.embargo_until) <= now:
                    continue
            kept.add(name)
        return Label(frozenset(kept))

    def can_flow(self, label: Label, principal: Principal, at: str) -> bool:
        return self.effective_label(label, at).is_subset_of(principal.clearance)

    def check_flow(self, label: Label, principal: Principal, at: str):
        """Raise a deliberately uninformative error when flow is forbidden."""
        if not self.can_flow(label, principal, at):
            raise AuthorizationError(_DENIED)

    def declassify(self, label: Label, tag: str, principal: Principal) -> Label:
        if tag not in principal.capabilities:
            raise AuthorizationError(_DENIED)
        if tag not in label:
            raise ValidationError(f"label does not carry {tag!r}")
        return label.without(tag)
