import os

import numpy as np
import pytest

from limaml.networks import build_mlp_network, build_split_network
from limaml.numcore import ShapeError
from limaml.store import (
    RECORD_OVERHEAD,
    SNAPSHOT_FIXED_BYTES,
    Checkpoint,
    EmbeddingSnapshot,
    StoreError,
    checkpoint_from_model,
    encode_snapshot,
    export_tsv,
    load_model,
    parse_tsv,
    read_checkpoint,
    read_snapshot,
    snapshot_size,
    write_checkpoint,
    write_snapshot,
)


def make_snapshot(n=3, dim=4, seed=0, version="2024-04-15"):
    rng = np.random.default_rng(seed)
    keys = tuple(sorted(f"user-{i:05d}" for i in rng.choice(100000, n, replace=False)))
    return EmbeddingSnapshot(version, dim, keys, rng.normal(size=(n, dim)).astype(np.float32), rng.integers(1, 50, n))


def test_snapshot_roundtrip_bitwise(tmp_path):
    snap = make_snapshot()
    path = tmp_path / "s.lmes"
    write_snapshot(snap, path)
    back = read_snapshot(path)
    assert back.equals(snap)
    assert back.vectors.tobytes() == snap.vectors.tobytes()
    assert encode_snapshot(back) == path.read_bytes()


def test_empty_snapshot(tmp_path):
    snap = EmbeddingSnapshot("2024-01-01", 8, (), np.zeros((0, 8), np.float32), np.zeros(0))
    path = tmp_path / "e.lmes"
    write_snapshot(snap, path)
    assert path.stat().st_size == SNAPSHOT_FIXED_BYTES
    assert read_snapshot(path).equals(snap)


def test_three_records_dim_four_size():
    snap = make_snapshot(3, 4)
    header, index = 28, sum(4 + len(k) + 8 + 4 for k in snap.keys)
    assert len(encode_snapshot(snap)) == header + index + 3 * 4 * 4 + 8


def test_per_record_cost_is_dim_times_four_plus_key():
    for dim in (1, 8, 32):
        a = make_snapshot(10, dim, seed=1)
        b = make_snapshot(11, dim, seed=1)
        extra = len(encode_snapshot(b)) - len(encode_snapshot(a))
        # adding one record of a same-length key costs exactly this much
        assert extra == dim * 4 + len(b.keys[0]) + RECORD_OVERHEAD
        assert snapshot_size(dim, b.keys) == len(encode_snapshot(b))


def test_corruption_rejected(tmp_path):
    path = tmp_path / "s.lmes"
    write_snapshot(make_snapshot(), path)
    data = bytearray(path.read_bytes())
    for pos, reason in [(len(data) - 20, "checksum"), (0, "magic")]:
        bad = bytearray(data)
        bad[pos] ^= 0xFF
        path.write_bytes(bytes(bad))
        with pytest.raises(StoreError) as info:
            read_snapshot(path)
        assert reason in info.value.reason
    path.write_bytes(bytes(data[:30]))
    with pytest.raises(StoreError):
        read_snapshot(path)
    path.write_bytes(bytes(data[:10]))
    with pytest.raises(StoreError) as info:
        read_snapshot(path)
    assert "truncated" in info.value.reason


def test_version_mismatch_rejected(tmp_path):
    import hashlib

    data = bytearray(encode_snapshot(make_snapshot()))
    data[4] = 9
    body = bytes(data[:-8])
    path = tmp_path / "v.lmes"
    path.write_bytes(body + hashlib.blake2b(body, digest_size=8).digest())
    with pytest.raises(StoreError) as info:
        read_snapshot(path)
    assert "version" in info.value.reason


def test_lookup_matches_linear_scan():
    snap = make_snapshot(500, 3, seed=4)
    rng = np.random.default_rng(9)
    probes = [f"user-{i:05d}" for i in rng.integers(0, 100000, 10000)] + list(snap.keys[:50])
    table = dict(zip(snap.keys, snap.vectors))
    for key in probes:
        got = snap.lookup(key)
        want = next((v for k, v in zip(snap.keys, snap.vectors) if k == key), None)
        if want is None:
            assert got is None and key not in table
        else:
            assert np.array_equal(got, want)


def test_unsorted_keys_rejected():
    with pytest.raises(ValueError):
        EmbeddingSnapshot("2024-01-01", 1, ("b", "a"), np.zeros((2, 1)), np.zeros(2))


def test_tsv_roundtrip():
    snap = make_snapshot(20, 5)
    text = export_tsv(snap)
    first = text.splitlines()[0].split("\t")
    assert first[0] == snap.keys[0] and first[1] == snap.version and len(first[2].split(",")) == 5
    back = parse_tsv(text)
    assert back.keys == snap.keys
    assert back.vectors.tobytes() == snap.vectors.tobytes()


def test_atomic_write_leaves_no_temp(tmp_path):
    write_snapshot(make_snapshot(), tmp_path / "s.lmes")
    assert os.listdir(tmp_path) == ["s.lmes"]


# ------------------------------------------------------------- checkpoints


def split_net(**kw):
    return build_split_network(4, 8, embed_dim=3, meta_hidden=(5,), global_hidden=(6, 4), **kw)


def test_checkpoint_roundtrip(tmp_path):
    net = split_net()
    params = net.init(np.random.default_rng(0))
    ck = checkpoint_from_model(net, params, {"alpha": 0.5}, {"algorithm": "limaml"})
    path = tmp_path / "c.lmck"
    write_checkpoint(ck, path)
    back = read_checkpoint(path)
    assert back.equals(ck)
    net2, p2 = load_model(back)
    assert net2.descriptor() == net.descriptor()
    assert all(p2[k].tobytes() == params[k].tobytes() for k in params)


def test_checkpoint_forward_equivalence(tmp_path):
    from limaml.numcore import graph as G

    net = build_mlp_network(4, 8, (7, 3))
    params = net.init(np.random.default_rng(1))
    path = tmp_path / "c.lmck"
    write_checkpoint(checkpoint_from_model(net, params), path)
    net2, p2 = load_model(read_checkpoint(path))
    rng = np.random.default_rng(2)
    meta, other = rng.normal(size=(100, 4)), rng.normal(size=(100, 8))
    a = net.logits({k: G.constant(v) for k, v in params.items()}, "k", meta, other).value
    b = net2.logits({k: G.constant(v) for k, v in p2.items()}, "k", meta, other).value
    assert np.array_equal(a, b)


def test_checkpoint_wrong_architecture_names_layer(tmp_path):
    net = split_net()
    ck = checkpoint_from_model(net, net.init(np.random.default_rng(0)))
    other = build_split_network(4, 8, embed_dim=3, meta_hidden=(5,), global_hidden=(6, 5))
    with pytest.raises(ShapeError) as info:
        load_model(ck, other)
    assert info.value.layer is not None and "global.layer1" in str(info.value)


def test_checkpoint_corruption(tmp_path):
    net = split_net()
    path = tmp_path / "c.lmck"
    write_checkpoint(checkpoint_from_model(net, net.init(np.random.default_rng(0))), path)
    data = bytearray(path.read_bytes())
    data[-30] ^= 1
    path.write_bytes(bytes(data))
    with pytest.raises(StoreError):
        read_checkpoint(path)


def test_checkpoint_bytes_deterministic():
    from limaml.store import encode_checkpoint

    net = split_net()
    p = net.init(np.random.default_rng(0))
    ck = Checkpoint(net.descriptor(), dict(p), {"b": 1, "a": 2}, {})
    ck2 = Checkpoint(net.descriptor(), dict(reversed(list(p.items()))), {"a": 2, "b": 1}, {})
    assert encode_checkpoint(ck) == encode_checkpoint(ck2)
