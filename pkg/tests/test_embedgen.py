import numpy as np
import pytest

from limaml.data import DAY, SyntheticSpec, TaskDataset, date_to_epoch, synthesize
from limaml.embedgen import EmbedGenConfig, embed_task, generate_embeddings, pool, select_window
from limaml.networks import ModelBundle, build_split_network
from limaml.numcore import ParamSet


@pytest.fixture(scope="module")
def world():
    _, va, _ = synthesize(SyntheticSpec(num_tasks=30, seed=8))
    net = build_split_network(va.meta_dim, va.other_dim, embed_dim=4, meta_hidden=(5,), global_hidden=(6,))
    return va, ModelBundle.initialize(net, 2)


def test_pool_modes():
    E = np.array([[1.0, 0.0], [0.0, 2.0], [3.0, 1.0]])
    assert pool(E, "latest").tolist() == [3.0, 1.0]
    assert pool(E, "max").tolist() == [3.0, 2.0]
    np.testing.assert_allclose(pool(E, "mean"), [4 / 3, 1.0])
    # cos weights: first row cos>0, second cos>0, latest 1
    c = pool(E, "cos")
    latest = E[-1] / np.linalg.norm(E[-1])
    w = np.array([max(0.0, e @ latest / np.linalg.norm(e)) for e in E])
    np.testing.assert_allclose(c, (w[:, None] * E).sum(0) / w.sum())
    with pytest.raises(ValueError):
        pool(E, "median")
    with pytest.raises(ValueError):
        pool([], "latest")


def test_pool_single_row_all_modes_equal():
    E = np.array([[0.5, -1.0]])
    for mode in ("latest", "max", "mean", "cos"):
        assert pool(E, mode).tolist() == [0.5, -1.0]


def test_select_window_bounds():
    as_of = date_to_epoch("2024-01-10") + DAY - 1
    ts = [as_of - 3 * DAY, as_of - 3 * DAY + 1, as_of, as_of + 1]
    t = TaskDataset("a", ts, [0, 1, 0, 1], np.zeros((4, 1)), np.zeros((4, 1)))
    w = select_window(t, 3, as_of)
    assert w.timestamps.tolist() == [as_of - 3 * DAY + 1, as_of]


def test_k_zero_is_unadapted_forward(world):
    va, bundle = world
    key = next(iter(va))
    e0 = embed_task(bundle.network, bundle.params, key, va[key], 0, 0.5, "latest")
    e1 = embed_task(bundle.network, bundle.params, key, va[key], 1, 0.5, "latest")
    assert e0.shape == (4,) and not np.array_equal(e0, e1)


def test_generation_sorted_and_params_untouched(world):
    va, bundle = world
    before = ParamSet({k: np.array(v) for k, v in bundle.params.items()})
    as_of = int(max(t.timestamps.max() for t in va.values()))
    res = generate_embeddings(va, bundle, EmbedGenConfig(k=2, alpha=0.3, window_days=30, version="2024-01-01"), as_of=as_of)
    keys = [e.task_key for e in res]
    assert keys == sorted(keys) and len(res) + res.skipped == len(va)
    assert all(e.vector.dtype == np.float32 for e in res)
    assert bundle.params.equals(before)


def test_generation_deterministic_across_workers(world):
    va, bundle = world
    as_of = int(max(t.timestamps.max() for t in va.values()))
    outs = [generate_embeddings(va, bundle, EmbedGenConfig(k=1, alpha=0.3, window_days=30, workers=w), as_of=as_of) for w in (1, 2, 3)]
    for res in outs[1:]:
        assert [e.task_key for e in res] == [e.task_key for e in outs[0]]
        assert all(a.vector.tobytes() == b.vector.tobytes() for a, b in zip(res, outs[0]))


def test_empty_window_and_min_samples(world):
    va, bundle = world
    res = generate_embeddings(va, bundle, EmbedGenConfig(window_days=1, version="2000-01-01"))
    assert len(res) == 0 and res.skipped == len(va)
    as_of = int(max(t.timestamps.max() for t in va.values()))
    big = generate_embeddings(va, bundle, EmbedGenConfig(window_days=30, min_samples=10**6), as_of=as_of)
    assert len(big) == 0


def test_config_validation():
    with pytest.raises(ValueError):
        EmbedGenConfig(k=-1)
    with pytest.raises(ValueError):
        EmbedGenConfig(pooling="sum")
    with pytest.raises(ValueError):
        EmbedGenConfig(version="yesterday")
