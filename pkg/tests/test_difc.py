import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ark.difc import Label, Principal, Registry, Tag, join_all
from ark.errors import AuthorizationError, ValidationError

tag_names = st.sets(
    st.sampled_from(["alpha", "beta", "gamma", "delta", "eps"]), max_size=4
)
labels = tag_names.map(Label.from_list)


class TestLabelAlgebra:
    @given(a=labels, b=labels, c=labels)
    @settings(max_examples=200, deadline=None)
    def test_join_is_a_semilattice(self, a, b, c):
        assert a.join(b) == b.join(a)
        assert a.join(b).join(c) == a.join(b.join(c))
        assert a.join(a) == a
        assert a.join(Label.bottom()) == a

    @given(a=labels, b=labels)
    @settings(max_examples=200, deadline=None)
    def test_join_upper_bounds_both_inputs(self, a, b):
        j = a.join(b)
        assert a.is_subset_of(j) and b.is_subset_of(j)

    def test_join_all(self):
        out = join_all([Label.of("a"), Label.of("b"), Label.of("a", "c")])
        assert out.as_list() == ["a", "b", "c"]
        assert join_all([]) == Label.bottom()

    def test_as_list_is_sorted_and_stable(self):
        lab = Label.of("zulu", "alpha", "mike")
        assert lab.as_list() == ["alpha", "mike", "zulu"]
        assert Label.from_list(lab.as_list()) == lab

    def test_membership_and_truthiness(self):
        lab = Label.of("s1")
        assert "s1" in lab and "s2" not in lab
        assert lab and not Label.bottom()

    def test_without(self):
        lab = Label.of("a", "b")
        assert lab.without("a") == Label.of("b")
        assert lab.without("missing") == lab

    def test_tag_name_validation(self):
        Label.of("ok-name_1.x")
        for bad in ("", "with space", "semi;colon", "sl/ash"):
            with pytest.raises(ValidationError):
                Label.of(bad)


def _registry(**embargoes):
    reg = Registry.empty()
    for name, until in embargoes.items():
        reg.add_tag(Tag(name, "2026-01-01T00:00:00Z", until))
    return reg


def _prin(name="p", clearance=(), caps=()):
    return Principal(name, f"tok-{name}", Label.from_list(clearance), frozenset(caps))


NOW = "2026-03-01T00:00:00Z"


class TestFlow:
    @given(data=tag_names, clearance=tag_names)
    @settings(max_examples=200, deadline=None)
    def test_flow_is_subset_of_clearance(self, data, clearance):
        reg = Registry.empty()
        prin = _prin(clearance=clearance)
        assert reg.can_flow(Label.from_list(data), prin, NOW) == (data <= clearance)

    def test_check_flow_raises_generic_error(self):
        reg = _registry(s1=None)
        prin = _prin(clearance=())
        with pytest.raises(AuthorizationError) as exc:
            reg.check_flow(Label.of("s1"), prin, NOW)
        assert "s1" not in str(exc.value)
        assert str(exc.value) == "access denied"

    def test_public_flows_anywhere(self):
        reg = Registry.empty()
        assert reg.can_flow(Label.bottom(), _prin(), NOW)


class TestEmbargo:
    def test_lapsed_tag_stops_restricting(self):
        reg = _registry(s1="2026-06-01T00:00:00Z")
        prin = _prin(clearance=())
        lab = Label.of("s1")
        assert not reg.can_flow(lab, prin, "2026-05-31T23:59:59Z")
        # boundary: the embargo instant itself is open
        assert reg.can_flow(lab, prin, "2026-06-01T00:00:00Z")
        assert reg.can_flow(lab, prin, "2027-01-01T00:00:00Z")

    def test_stored_label_text_never_changes(self):
        reg = _registry(s1="2026-06-01T00:00:00Z")
        lab = Label.of("s1")
        assert reg.effective_label(lab, "2027-01-01T00:00:00Z") == Label.bottom()
        assert lab.as_list() == ["s1"]  # the data's label is untouched

    def test_unregistered_tags_never_expire(self):
        reg = Registry.empty()
        prin = _prin(clearance=())
        assert not reg.can_flow(Label.of("mystery"), prin, "2999-01-01T00:00:00Z")

    def test_tag_without_embargo_never_expires(self):
        reg = _registry(s1=None)
        prin = _prin(clearance=())
        assert not reg.can_flow(Label.of("s1"), prin, "2999-01-01T00:00:00Z")

    def test_mixed_label_keeps_live_tags(self):
        reg = _registry(old="2026-01-15T00:00:00Z", live="2030-01-01T00:00:00Z")
        eff = reg.effective_label(Label.of("old", "live", "unknown"), NOW)
        assert eff.as_list() == ["live", "unknown"]


class TestDeclassify:
    def test_requires_matching_capability(self):
        reg = Registry.empty()
        holder = _prin("h", caps=("s1",))
        out = reg.declassify(Label.of("s1", "s2"), "s1", holder)
        assert out == Label.of("s2")

    def test_denied_without_capability_and_error_is_generic(self):
        reg = Registry.empty()
        outsider = _prin("o", clearance=("s1",), caps=())
        with pytest.raises(AuthorizationError) as exc:
            reg.declassify(Label.of("s1"), "s1", outsider)
        assert "s1" not in str(exc.value)

    def test_capability_is_per_tag(self):
        reg = Registry.empty()
        holder = _prin("h", caps=("s1",))
        with pytest.raises(AuthorizationError):
            reg.declassify(Label.of("s2"), "s2", holder)

    def test_tag_must_be_present(self):
        reg = Registry.empty()
        holder = _prin("h", caps=("s1",))
        with pytest.raises(ValidationError):
            reg.declassify(Label.of("other"), "s1", holder)


class TestRegistryPersistence:
    def test_save_load_round_trip(self, tmp_path):
        reg = Registry.empty()
        reg.add_tag(Tag("s1", "2026-01-01T00:00:00Z", "2026-09-01T00:00:00Z"))
        reg.add_tag(Tag("s2", "2026-01-02T00:00:00Z"))
        reg.add_principal(
            Principal("alice", "tok-a", Label.of("s1", "s2"), frozenset({"s1"}))
        )
        reg.add_principal(Principal("bob", "tok-b", Label.bottom(), frozenset()))
        reg.save(tmp_path / "reg")

        back = Registry.load(tmp_path / "reg")
        assert back.tags == reg.tags
        assert back.principals == reg.principals
        assert back.by_token("tok-a").name == "alice"
        assert back.by_token("missing") is None

    def test_load_from_empty_dir(self, tmp_path):
        reg = Registry.load(tmp_path)
        assert reg.tags == {} and reg.principals == {}

    def test_files_are_stable_json(self, tmp_path):
        reg = Registry.empty()
        reg.add_tag(Tag("b", "2026-01-01T00:00:00Z"))
        reg.add_tag(Tag("a", "2026-01-01T00:00:00Z"))
        reg.save(tmp_path / "r1")
        reg.save(tmp_path / "r2")
        t1 = (tmp_path / "r1" / "tags.json").read_bytes()
        t2 = (tmp_path / "r2" / "tags.json").read_bytes()
        assert t1 == t2
        names = [rec["name"] for rec in json.loads(t1)]
        assert names == ["a", "b"]

    def test_duplicate_registration_rejected(self):
        reg = Registry.empty()
        reg.add_tag(Tag("s1", NOW))
        with pytest.raises(ValidationError):
            reg.add_tag(Tag("s1", NOW))
        reg.add_principal(_prin("p"))
        with pytest.raises(ValidationError):
            reg.add_principal(_prin("p"))
