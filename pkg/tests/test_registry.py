from fractions import Fraction

import pytest

from legomt.branches import BranchId, Dims, create_branch
from legomt.errors import CorruptCheckpoint, DigestMismatch, DimMismatch, MissingBranch, VersionMismatch, VocabMismatch
from legomt.registry import BranchStore, branch_from_bytes, checkpoint_bytes, load_branch, residency_report, save_branch

from conftest import TINY


def test_round_trip_bit_exact(tiny_branches, tmp_path):
    for b in tiny_branches.values():
        save_branch(b, tmp_path / "x.lego")
        again = load_branch(tmp_path / "x.lego")
        assert again.id == b.id and again.dims == b.dims and again.vocab_hash == b.vocab_hash
        for name, arr in b.arrays().items():
            assert again.arrays()[name].tobytes() == arr.tobytes()


def test_file_bytes_deterministic(tiny_branches):
    b = tiny_branches[BranchId.m_enc()]
    assert checkpoint_bytes(b) == checkpoint_bytes(b.clone(b.id))


def test_truncated_and_flipped(tiny_branches):
    data = checkpoint_bytes(tiny_branches[BranchId.d("de")])
    with pytest.raises(CorruptCheckpoint):
        branch_from_bytes(data[:-10])
    with pytest.raises(CorruptCheckpoint):
        branch_from_bytes(b"NOPE" + data[4:])
    bad = bytearray(data)
    bad[len(data) // 2] ^= 0x01
    with pytest.raises(DigestMismatch):
        branch_from_bytes(bytes(bad))
    wrong_version = bytearray(data)
    wrong_version[4] = 9
    with pytest.raises(VersionMismatch):
        branch_from_bytes(bytes(wrong_version))


def test_store_compose_and_ledger(tiny_branches, tmp_path):
    store = BranchStore(tmp_path)
    for b in tiny_branches.values():
        store.put(b)
    spec = store.compose(BranchId.e("en"), BranchId.d("zh"))
    assert spec.flow.value == "Custom"
    assert set(store.resident) == {BranchId.e("en"), BranchId.d("zh")}
    expected = tiny_branches[BranchId.e("en")].nbytes + tiny_branches[BranchId.d("zh")].nbytes
    assert store.ledger.total_bytes == expected
    store.compose(BranchId.m_enc(), BranchId.m_dec())
    assert set(store.resident) == {BranchId.m_enc(), BranchId.m_dec()}
    with pytest.raises(MissingBranch):
        store.compose(BranchId.e("fr"), BranchId.m_dec())


def test_compose_rejects_mismatch(vocab, tmp_path, rng):
    store = BranchStore(tmp_path)
    store.put(create_branch(BranchId.m_enc(), TINY, vocab, rng))
    store.put(create_branch(BranchId.d("de"), Dims(32, 2, 1, 2), vocab, rng))
    with pytest.raises(DimMismatch):
        store.compose(BranchId.m_enc(), BranchId.d("de"))
    other = create_branch(BranchId.d("zh"), TINY, vocab, rng)
    other.vocab_hash = "f" * 16
    store.put(other)
    with pytest.raises(VocabMismatch):
        store.compose(BranchId.m_enc(), BranchId.d("zh"))


def test_dirty_write_back_and_discard(tiny_branches, tmp_path):
    store = BranchStore(tmp_path)
    for b in tiny_branches.values():
        store.put(b)
    bid = BranchId.e("en")
    branch = store.acquire([bid])[bid]
    before = branch.digest()
    branch.parameters()[0].data += 1.0
    store.discard()
    assert store.load(bid).digest() == before
    branch = store.acquire([bid])[bid]
    branch.parameters()[0].data += 1.0
    store.mark_dirty(bid)
    store.acquire([])
    assert store.load(bid).digest() != before
    assert store.ledger.total_bytes == 0


def test_prefetch_counts_toward_peak_and_hands_over(tiny_branches, tmp_path):
    store = BranchStore(tmp_path)
    for b in tiny_branches.values():
        store.put(b)
    pair = [BranchId.m_enc(), BranchId.m_dec()]
    store.acquire(pair + [BranchId.e("en")])
    store.ledger.reset_peak()
    store.prefetch(BranchId.e("de"))
    store.acquire(pair + [BranchId.e("de")])
    size = {b: tiny_branches[b].nbytes for b in tiny_branches}
    base = size[BranchId.m_enc()] + size[BranchId.m_dec()]
    assert store.ledger.peak_bytes == base + size[BranchId.e("en")] + size[BranchId.e("de")]
    assert store.ledger.total_bytes == base + size[BranchId.e("de")]
    assert store.resident[BranchId.e("de")].digest() == tiny_branches[BranchId.e("de")].digest()


def test_manifest_persists(tiny_branches, tmp_path):
    store = BranchStore(tmp_path)
    for b in tiny_branches.values():
        store.put(b)
    again = BranchStore(tmp_path)
    assert again.ids() == store.ids()
    assert again.info(BranchId.d("zh"))["n_params"] == tiny_branches[BranchId.d("zh")].n_params


@pytest.mark.parametrize("k", [2, 3, 8])
def test_residency_ratio_closed_form(tmp_path, k):
    report = residency_report(k, tmp_path, Dims(16, 2, 1, 2), vocab_size=300)
    assert Fraction(report["byte_ratio"]) == Fraction(2 * k, 3)
    e, d = report["encoder_params"] * 4, report["decoder_params"] * 4
    assert report["multiway"]["bytes"] == k * (e + d)
    assert report["lego_stage1"]["bytes"] == 2 * e + d
    assert report["lego_stage2"]["bytes"] == e + 2 * d
