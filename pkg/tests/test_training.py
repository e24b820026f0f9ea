import math

import numpy as np
import pytest

from limaml.data import SyntheticSpec, prepare_training, query_only, synthesize
from limaml.networks import ModelBundle, build_mlp_network, build_split_network
from limaml.numcore import NonFiniteError, ParamSet
from limaml.training import (
    Adam,
    ConfigError,
    MetaStep,
    TaskSampler,
    TrainConfig,
    canonical_order,
    clip_gradients,
    format_config,
    limaml_train,
    lr_at,
    lr_schedule,
    maml_train,
    parallel_outer_step,
    parse_config_text,
    scale_lr,
    shard,
    vanilla_train,
)


@pytest.fixture(scope="module")
def tiny():
    tr, va, te = synthesize(SyntheticSpec(num_tasks=24, seed=11, min_samples=6, max_samples=20))
    return prepare_training(tr), va, te


def cfg(**kw):
    base = dict(alpha=0.3, beta=0.01, inner_steps=1, tasks_per_batch=8, total_steps=6, seed=3)
    base.update(kw)
    return TrainConfig(**base)


# --------------------------------------------------------------- config


def test_config_defaults_and_warmup():
    c = TrainConfig(total_steps=200)
    assert c.warmup_steps == 10
    assert TrainConfig.from_mapping(parse_config_text(format_config(c))) == c


def test_config_missing_and_unknown_keys():
    with pytest.raises(ConfigError) as info:
        TrainConfig.from_mapping({"alpha": "0.1"}, require_all=True)
    assert info.value.key == "beta"
    with pytest.raises(ConfigError) as info:
        TrainConfig.from_mapping({"alpah": "0.1"})
    assert info.value.key == "alpah"
    with pytest.raises(ConfigError):
        TrainConfig(beta=0)


def test_parse_config_text_comments_and_duplicates():
    assert parse_config_text("a = 1  # one\n\n# skip\nb=x\n") == {"a": "1", "b": "x"}
    with pytest.raises(ConfigError):
        parse_config_text("a = 1\na = 2\n")


# ----------------------------------------------------- schedule, clipping


def test_clip_exact():
    out = clip_gradients({"g": np.array([3.0, 4.0])}, 1.0)
    assert out["g"].tolist() == [0.6, 0.8]
    same = clip_gradients({"g": np.array([0.3, 0.4])}, 1.0)
    assert same["g"].tolist() == [0.3, 0.4]


def test_clip_rejects_non_finite():
    with pytest.raises(NonFiniteError):
        clip_gradients({"g": np.array([np.inf, 1.0])}, 1.0)


def test_schedule_shape():
    c = TrainConfig(beta=0.002, total_steps=100, warmup_steps=10)
    assert lr_schedule(0, c) == 0.0
    assert lr_schedule(10, c) == pytest.approx(0.002, abs=1e-15)
    assert abs(lr_at(10 - 1e-9, c) - lr_at(10, c)) <= 1e-12
    assert lr_at(100, c) == pytest.approx(0.0002)
    lrs = [lr_schedule(t, c) for t in range(10, 100)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ValueError):
        lr_schedule(100, c)


def test_scale_lr():
    assert scale_lr(0.001, 256, 128) == 0.002


def test_adam_matches_hand_computation():
    p = ParamSet({"w": np.array([1.0, -2.0])})
    g = ParamSet({"w": np.array([0.5, 0.1])})
    opt = Adam()
    p1 = opt.step(p, g, 0.1)
    # first step moves every coordinate by lr * sign(g) (up to eps)
    np.testing.assert_allclose(p1["w"], [0.9, -2.1], rtol=1e-7)
    p2 = opt.step(p1, g, 0.1)
    m = 0.9 * 0.05 + 0.1 * 0.5
    v = 0.999 * 0.00025 + 0.001 * 0.25
    expect = p1["w"][0] - 0.1 * (m / (1 - 0.81)) / (math.sqrt(v / (1 - 0.999**2)) + 1e-8)
    assert p2["w"][0] == pytest.approx(expect, rel=1e-12)


def test_adam_respects_trainable():
    p = ParamSet({"a": np.ones(2), "b": np.ones(2)})
    g = ParamSet({"a": np.ones(2), "b": np.ones(2)})
    out = Adam().step(p, g, 0.1, trainable={"a"})
    assert np.array_equal(out["b"], p["b"]) and not np.array_equal(out["a"], p["a"])


# ---------------------------------------------------------------- sampler


def test_sampler_covers_every_task_each_epoch():
    keys = [f"k{i}" for i in range(10)]
    s = TaskSampler(keys, 4, seed=0)
    epoch = s.next_batch() + s.next_batch() + s.next_batch()
    assert sorted(epoch) == sorted(keys)
    again = TaskSampler(keys, 4, seed=0)
    assert again.next_batch() == TaskSampler(keys, 4, seed=0).next_batch()


def test_shard_partition():
    keys = [f"k{i}" for i in range(37)]
    parts = shard(keys, 4)
    assert sum(parts, []) == canonical_order(keys)
    assert max(map(len, parts)) - min(map(len, parts)) <= 1


# ---------------------------------------------------------------- trainers


def test_vanilla_reduces_loss(tiny):
    train, _, _ = tiny
    net = build_mlp_network(train.meta_dim, train.other_dim, (8,))
    _, rep = vanilla_train(train, net, cfg(total_steps=40, beta=0.02))
    assert np.mean(rep.losses[-5:]) < np.mean(rep.losses[:5])
    assert len(rep.lrs) == 40 and rep.final_query_auc is not None


def test_maml_zero_steps_equals_vanilla_on_query(tiny):
    train, _, _ = tiny
    net = build_mlp_network(train.meta_dim, train.other_dim, (8,))
    q = query_only(train)
    pv, rv = vanilla_train(q, net, cfg(inner_steps=0))
    pm, rm = maml_train(q, net, cfg(inner_steps=0))
    assert pv.equals(pm)
    assert rv.losses == rm.losses and rv.grad_norms == rm.grad_norms


def test_training_deterministic_across_workers(tiny):
    train, _, _ = tiny
    net = build_split_network(train.meta_dim, train.other_dim, embed_dim=3, meta_hidden=(4,), global_hidden=(6,))
    bundle = ModelBundle.initialize(net, 0)
    runs = [limaml_train(train, bundle, cfg(workers=w, total_steps=3)) for w in (1, 2, 3)]
    for b, rep in runs[1:]:
        assert b.params.equals(runs[0][0].params)
        assert rep.losses == runs[0][1].losses


def test_outer_step_sum_independent_of_workers(tiny):
    train, _, _ = tiny
    net = build_mlp_network(train.meta_dim, train.other_dim, (5,))
    params = net.init(np.random.default_rng(0))
    step = MetaStep(net, params, 0.2, 2, 0, 0, False, "adapted")
    batch = list(train)[:10]
    from limaml.training import ShardPool

    outs = []
    for w in (1, 2, 4):
        with ShardPool(train, w) as pool:
            outs.append(parallel_outer_step(batch, w, step, params.shapes, pool))
    for g, losses in outs[1:]:
        assert np.array_equal(g.flatten(), outs[0][0].flatten())
        assert losses == outs[0][1]


def test_freeze_meta_keeps_meta_block(tiny):
    train, _, _ = tiny
    net = build_split_network(train.meta_dim, train.other_dim, embed_dim=2, meta_hidden=(3,), global_hidden=(4,))
    b0 = ModelBundle.initialize(net, 1)
    b1, _ = limaml_train(train, b0, cfg(freeze_meta=True))
    assert b1.theta_meta.equals(b0.theta_meta)
    assert not b1.theta_global.equals(b0.theta_global)


def test_dropout_training_is_seeded(tiny):
    train, _, _ = tiny
    net = build_mlp_network(train.meta_dim, train.other_dim, (8,))
    a, ra = maml_train(train, net, cfg(dropout=0.3))
    b, rb = maml_train(train, net, cfg(dropout=0.3))
    assert a.equals(b) and ra.losses == rb.losses


def test_divergence_raises_with_step(tiny):
    from limaml.training import DivergenceError

    train, _, _ = tiny
    net = build_mlp_network(train.meta_dim, train.other_dim, (8,))
    with np.errstate(all="ignore"), pytest.raises(DivergenceError) as info:
        vanilla_train(train, net, cfg(beta=1e307, warmup_steps=0))
    assert info.value.step is not None
