import random

import pytest
from hypothesis import given, settings, strategies as st

from evolvekit.artifacts import (
    ArtifactId,
    ArtifactKind,
    KnowledgeDoc,
    is_identifier,
    make_skill,
    parse_skill_markdown,
    skill_to_markdown,
)
from evolvekit.canonical import canonical_bytes, digest
from evolvekit.errors import (
    AlreadyPruned,
    ArtifactPruned,
    DuplicateId,
    InvalidPayload,
    NotFound,
    StaleBase,
    StorageFailure,
    UnknownSnapshot,
    VersionOutOfRange,
)
from evolvekit.registry import PRUNED, Registry, snapshot_id_for

from conftest import doc, kid, tid, tool


# ---- identifiers and payloads

@pytest.mark.parametrize("name,ok", [
    ("a", True), ("log_schema", True), ("tool2_x9", True),
    ("", False), ("A", False), ("_x", False), ("x_", False), ("a__b", False), ("9a", False), ("a" * 129, False),
])
def test_identifier_rule(name, ok):
    assert is_identifier(name) is ok


def test_artifact_id_round_trip():
    aid = ArtifactId.parse("tool/normalize_log_records")
    assert aid.kind is ArtifactKind.TOOL and str(aid) == "tool/normalize_log_records"
    with pytest.raises(InvalidPayload):
        ArtifactId.parse("nokind")


def test_skill_markdown_round_trip():
    skill = make_skill("auth_flow", "Auth", "Retry once with a fresh token.", ["401", "token"])
    fm, body = parse_skill_markdown(skill_to_markdown(skill))
    assert fm["triggers"] == ["401", "token"] and fm["name"] == "auth_flow"
    assert body == "Retry once with a fresh token."


def test_skill_requires_frontmatter():
    with pytest.raises(InvalidPayload):
        Registry().put_artifact("knowledge", "s", KnowledgeDoc("skill", "t", "b", ("x",), {"name": "s"}))


def test_canonical_bytes_are_key_order_free():
    assert canonical_bytes({"b": 1, "a": [1, 2]}) == canonical_bytes({"a": [1, 2], "b": 1}) == b'{"a":[1,2],"b":1}'


# ---- operation examples

def test_put_then_get(registry):
    art = registry.put_artifact("tool", "echo", tool())
    assert art.version == 1 and registry.get_artifact(tid("echo")).payload == tool()


def test_put_duplicate_rejected(registry):
    registry.put_artifact("knowledge", "n", doc())
    with pytest.raises(DuplicateId):
        registry.put_artifact("knowledge", "n", doc("other"))


def test_put_invalid_payload(registry):
    with pytest.raises(InvalidPayload):
        registry.put_artifact("tool", "bad", tool(src="   "))
    with pytest.raises(InvalidPayload):
        registry.put_artifact("tool", "wrongkind", doc())
    assert registry.ids() == []


def test_patch_versions_and_stale_base(registry):
    registry.put_artifact("knowledge", "n", doc("v1"))
    assert registry.patch_artifact(kid("n"), 1, doc("v2")).version == 2
    with pytest.raises(StaleBase):
        registry.patch_artifact(kid("n"), 1, doc("v3"))
    assert registry.get_artifact(kid("n"), 1).payload.body == "v1"
    with pytest.raises(VersionOutOfRange):
        registry.get_artifact(kid("n"), 3)
    with pytest.raises(NotFound):
        registry.patch_artifact(kid("ghost"), 1, doc())


def test_prune_is_a_tombstone(registry):
    registry.put_artifact("knowledge", "n", doc())
    s1 = registry.take_snapshot()
    art = registry.prune_artifact(kid("n"))
    assert art.status == PRUNED and art.version == 2
    with pytest.raises(AlreadyPruned):
        registry.prune_artifact(kid("n"))
    with pytest.raises(ArtifactPruned):
        registry.patch_artifact(kid("n"), 2, doc("x"))
    s2 = registry.take_snapshot()
    assert registry.diff_snapshots(s1, s2).pruned == (kid("n"),)
    assert kid("n") not in registry.view(s2)


def test_empty_snapshot_id(registry):
    assert registry.take_snapshot().snapshot_id == digest([])


def test_restore_and_diff(registry):
    registry.put_artifact("knowledge", "a", doc())
    s1 = registry.take_snapshot()
    registry.put_artifact("tool", "t", tool())
    registry.patch_artifact(kid("a"), 1, doc("new"))
    s2 = registry.take_snapshot()
    cs = registry.diff_snapshots(s1, s2)
    assert cs.added == (tid("t"),) and cs.modified == ((kid("a"), 1, 2),)
    back = registry.restore_snapshot(s1.snapshot_id)
    assert back.snapshot_id == s1.snapshot_id
    assert registry.diff_snapshots(s1, registry.take_snapshot()).is_empty()
    with pytest.raises(UnknownSnapshot):
        registry.restore_snapshot("f" * 64)


def test_persistence_round_trip(tmp_path):
    reg = Registry(tmp_path)
    reg.put_artifact("knowledge", "a", doc())
    reg.patch_artifact(kid("a"), 1, doc("b"))
    reg.put_artifact("tool", "t", tool())
    snap = reg.take_snapshot(3)
    again = Registry(tmp_path)
    assert again.fingerprint() == reg.fingerprint()
    assert again.current_snapshot_id() == snap.snapshot_id
    assert again.require_snapshot(snap.snapshot_id).episode_index == 3


def test_transaction_rolls_back_memory_and_disk(tmp_path):
    reg = Registry(tmp_path)
    reg.put_artifact("knowledge", "a", doc())
    files_before = {p: p.read_bytes() for p in tmp_path.rglob("*") if p.is_file()}
    fp = reg.fingerprint()

    def hook(op, aid):
        if aid.name == "c":
            raise StorageFailure("disk full")

    reg.fault_hook = hook
    with pytest.raises(StorageFailure):
        with reg.transaction():
            reg.put_artifact("knowledge", "b", doc())
            reg.patch_artifact(kid("a"), 1, doc("z"))
            reg.put_artifact("knowledge", "c", doc())
    assert reg.fingerprint() == fp
    assert {p: p.read_bytes() for p in tmp_path.rglob("*") if p.is_file()} == files_before


# ---- properties

NAMES = ["a", "b", "c", "d"]


def _random_ops(rng: random.Random, reg: Registry, n: int, checker):
    snaps = []
    for _ in range(n):
        op = rng.choice(["put", "patch", "stale", "prune", "snap", "restore"])
        name = rng.choice(NAMES)
        aid = kid(name)
        try:
            if op == "put":
                reg.put_artifact("knowledge", name, doc(str(rng.random())))
            elif op == "patch":
                reg.patch_artifact(aid, reg.head_version(aid), doc(str(rng.random())))
            elif op == "stale":
                head = reg.head_version(aid)
                with pytest.raises(StaleBase):
                    reg.patch_artifact(aid, head - 1 if head > 1 else head + 1, doc("stale"))
            elif op == "prune":
                reg.prune_artifact(aid)
            elif op == "snap":
                snaps.append(reg.take_snapshot())
            elif op == "restore" and snaps:
                target = rng.choice(snaps)
                back = reg.restore_snapshot(target.snapshot_id)
                assert back.snapshot_id == target.snapshot_id
                assert reg.diff_snapshots(target, reg.take_snapshot()).is_empty()
        except (DuplicateId, NotFound, ArtifactPruned, AlreadyPruned):
            pass
        checker(reg)
    return snaps


def _dense(reg: Registry):
    for aid in reg.ids():
        versions = reg.stored_versions(aid)
        assert versions == list(range(1, len(versions) + 1))
        assert 1 <= reg.head_version(aid) <= versions[-1]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_random_sequences_keep_invariants(seed):
    rng = random.Random(seed)
    reg = Registry()
    _random_ops(rng, reg, 40, _dense)
    # snapshot determinism: the id is a pure function of the head triples
    snap = reg.take_snapshot()
    assert snap.snapshot_id == snapshot_id_for(snap.heads)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(NAMES), st.text(max_size=5)), max_size=12))
def test_snapshot_id_independent_of_insertion_order(items):
    items = list(dict(items).items())
    r1, r2 = Registry(), Registry()
    for n, b in items:
        r1.put_artifact("knowledge", n, doc(b))
    for n, b in reversed(items):
        r2.put_artifact("knowledge", n, doc(b))
    assert r1.current_snapshot_id() == r2.current_snapshot_id()


def test_detached_id_can_be_re_added(registry):
    s0 = registry.take_snapshot()
    registry.put_artifact("knowledge", "n", doc("first"))
    registry.restore_snapshot(s0.snapshot_id)
    assert kid("n") not in registry.view(registry.take_snapshot())
    art = registry.put_artifact("knowledge", "n", doc("second"))
    assert art.version == 2 and registry.stored_versions(kid("n")) == [1, 2]
    with pytest.raises(DuplicateId):
        registry.put_artifact("knowledge", "n", doc("third"))
