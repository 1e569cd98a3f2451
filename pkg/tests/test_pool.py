import numpy as np
import pytest

from fedkei.errors import ConflictError, EmptyPoolError, InputError
from fedkei.pool import KnowledgePool, PoolEntry


def entry(client, t, part, dim=4, fill=None):
    vec = np.full(dim, float(fill if fill is not None else client * 10 + t))
    return PoolEntry(client_id=client, task_time=t, part=part, module=vec)


def test_entry_validation():
    with pytest.raises(InputError):
        PoolEntry(0, 1, "feet", np.ones(3))
    with pytest.raises(InputError):
        PoolEntry(-1, 1, "adapter", np.ones(3))
    with pytest.raises(InputError):
        PoolEntry(0, 0, "adapter", np.ones(3))


def test_insert_and_canonical_order():
    pool = KnowledgePool()
    # insert out of order on purpose
    pool.insert(entry(1, 2, "adapter"))
    pool.insert(entry(0, 1, "adapter"))
    pool.insert(entry(1, 1, "adapter"))
    got = [(e.task_time, e.client_id) for e in pool.entries("adapter", 99)]
    assert got == [(1, 0), (1, 1), (2, 1)]


def test_duplicate_key_rejected():
    pool = KnowledgePool()
    pool.insert(entry(0, 1, "adapter"))
    with pytest.raises(ConflictError):
        pool.insert(entry(0, 1, "adapter"))
    pool.insert(entry(0, 1, "head"))  # other part is a distinct key


def test_dim_consistency_per_part():
    pool = KnowledgePool()
    pool.insert(entry(0, 1, "adapter", dim=4))
    with pytest.raises(InputError):
        pool.insert(entry(1, 1, "adapter", dim=5))
    pool.insert(entry(0, 1, "head", dim=5))  # parts have independent dims


def test_snapshot_excludes_current_time():
    pool = KnowledgePool()
    pool.insert(entry(0, 1, "adapter", fill=1))
    pool.insert(entry(1, 1, "adapter", fill=2))
    pool.insert(entry(0, 2, "adapter", fill=3))
    snap = pool.snapshot("adapter", 2)
    assert snap.shape == (4, 2)
    assert list(snap[0]) == [1.0, 2.0]
    assert pool.snapshot("adapter", 3).shape == (4, 3)


def test_snapshot_empty_raises():
    pool = KnowledgePool()
    with pytest.raises(EmptyPoolError):
        pool.snapshot("adapter", 1)
    pool.insert(entry(0, 3, "adapter"))
    with pytest.raises(EmptyPoolError):
        pool.snapshot("adapter", 2)


def test_counts_and_client_ids():
    pool = KnowledgePool()
    pool.insert(entry(0, 1, "adapter"))
    pool.insert(entry(2, 1, "adapter"))
    pool.insert(entry(0, 1, "head"))
    assert pool.count("adapter") == 2
    assert pool.count("head") == 1
    assert pool.client_ids("adapter", 2) == [0, 2]
    assert len(pool) == 3


def test_save_load_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    pool = KnowledgePool()
    for t in (1, 2):
        for c in (0, 1):
            pool.insert(PoolEntry(c, t, "adapter", rng.standard_normal(6)))
            pool.insert(PoolEntry(c, t, "head", rng.standard_normal(3)))
    pool.save(tmp_path)
    again = KnowledgePool.load(tmp_path)
    assert len(again) == len(pool)
    for a, b in zip(pool.entries("adapter", 99), again.entries("adapter", 99)):
        assert a.key == b.key
        assert np.array_equal(a.module, b.module)


def test_load_detects_corruption(tmp_path):
    pool = KnowledgePool()
    pool.insert(entry(0, 1, "adapter"))
    pool.save(tmp_path)
    victim = next(tmp_path.glob("*.vec"))
    raw = bytearray(victim.read_bytes())
    raw[-1] ^= 0xFF
    victim.write_bytes(bytes(raw))
    with pytest.raises(InputError):
        KnowledgePool.load(tmp_path)
