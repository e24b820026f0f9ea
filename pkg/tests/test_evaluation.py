import numpy as np
import pytest

from limaml.data import SyntheticSpec, synthesize
from limaml.evaluation import (
    Baseline,
    EvalProtocol,
    EvalReport,
    SweepSpec,
    apply_sweep_value,
    cohort_auc,
    evaluate,
    run_sweep,
    gain_table,
)
from limaml.metrics import auc, auc_gain
from limaml.networks import ModelBundle, build_mlp_network, build_split_network
from limaml.training import TrainConfig


def brute_auc(s, y):
    pos, neg = s[y == 1], s[y == 0]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return wins / (len(pos) * len(neg))


def test_auc_worked_example():
    assert auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert auc([0.5, 0.5], [0, 1]) == 0.5
    assert auc([0.1, 0.2], [1, 1]) is None


def test_auc_matches_brute_force_with_ties():
    rng = np.random.default_rng(0)
    for _ in range(300):
        n = int(rng.integers(2, 40))
        s = rng.integers(0, 6, n).astype(float)
        y = rng.integers(0, 2, n)
        if y.min() == y.max():
            continue
        assert auc(s, y) == brute_auc(s, y)


def test_auc_invariances():
    rng = np.random.default_rng(1)
    s, y = rng.normal(size=200), rng.integers(0, 2, 200)
    a = auc(s, y)
    assert auc(np.exp(s) * 3 + 1, y) == pytest.approx(a, abs=1e-15)
    assert auc(s, 1 - y) == pytest.approx(1 - a, abs=1e-12)


def test_auc_gain():
    rel, ab = auc_gain(0.66, 0.6)
    assert rel == pytest.approx(10.0) and ab == pytest.approx(0.06)


@pytest.fixture(scope="module")
def world():
    tr, va, te = synthesize(SyntheticSpec(num_tasks=40, seed=4))
    split = build_split_network(va.meta_dim, va.other_dim, embed_dim=3, meta_hidden=(5,), global_hidden=(6,))
    mlp = build_mlp_network(va.meta_dim, va.other_dim, (6,))
    return tr, va, te, ModelBundle.initialize(split, 0), (mlp, mlp.init(np.random.default_rng(0)))


def test_k_zero_equals_no_fine_tune(world):
    _, va, te, split, mlp = world
    for model in (split, mlp):
        a = evaluate(model, EvalProtocol("fine-tune", k=0, alpha=0.5), va, te)
        b = evaluate(model, EvalProtocol("no-fine-tune"), va, te)
        assert a.same_as(b) and a.unadapted_tasks == b.unadapted_tasks


def test_fine_tune_changes_scores_and_needs_validation(world):
    _, va, te, split, _ = world
    a = evaluate(split, EvalProtocol("fine-tune", k=2, alpha=0.5), va, te)
    b = evaluate(split, EvalProtocol("no-fine-tune"), va, te)
    assert not a.same_as(b)
    with pytest.raises(ValueError):
        evaluate(split, EvalProtocol("fine-tune"), None, te)


def test_cohort_counts_partition(world):
    _, va, te, split, _ = world
    rep = evaluate(split, EvalProtocol("fine-tune", k=1, alpha=0.5, cohort_threshold=9), va, te)
    assert sum(rep.cohort_counts.values()) == len(rep.scores)
    small, large = cohort_auc(rep, te, 9)
    assert (small, large) == (rep.cohort_aucs["small"], rep.cohort_aucs["large"])


def test_missing_validation_uses_fallback(world):
    _, va, te, split, _ = world
    partial = va.filter(lambda t: t.task_key != next(iter(te)))
    rep = evaluate(split, EvalProtocol("fine-tune", k=1, alpha=0.5), partial, te)
    assert rep.unadapted_tasks == 1


def test_homogeneous_tasks_fine_tune_is_neutral():
    # no per-task signal: once trained, adapting to recent samples cannot help much
    from limaml.data import prepare_training
    from limaml.training import limaml_train

    tr, va, te = synthesize(SyntheticSpec(num_tasks=300, seed=6, latent_scale=0.0))
    net = build_split_network(va.meta_dim, va.other_dim, embed_dim=3, meta_hidden=(5,), global_hidden=(6,))
    cfg = TrainConfig(alpha=0.1, beta=0.01, tasks_per_batch=32, total_steps=80)
    model, _ = limaml_train(prepare_training(tr), ModelBundle.initialize(net, 0), cfg)
    a = evaluate(model, EvalProtocol("fine-tune", k=1, alpha=0.1), va, te).overall_auc
    b = evaluate(model, EvalProtocol("no-fine-tune"), va, te).overall_auc
    assert abs(a - b) < 0.005


def test_gain_table_layout():
    def rep(v):
        return EvalReport(v, {"small": v - 0.01, "large": v + 0.01}, {"small": 3, "large": 7})

    text, csv_text = gain_table({("vanilla", "no-fine-tune"): rep(0.6), ("maml", "fine-tune"): rep(0.66)}, threshold=9)
    lines = text.splitlines()
    assert lines[0].split() == ["cohort", "vanilla/no", "maml/yes"]
    assert lines[1].startswith("All tasks in test data") and "baseline" in lines[1] and "+10.00%" in lines[1]
    assert "fewer than 9 samples" in lines[2] and "9 or more samples" in lines[3]
    rows = csv_text.splitlines()
    assert rows[0] == "cohort,algorithm,fine_tune,auc,gain_pct,gain_abs,tasks"
    assert len(rows) == 1 + 3 * 2


def test_sweep_spec_validation():
    with pytest.raises(ValueError):
        SweepSpec("inner_steps", (1,))
    with pytest.raises(ValueError):
        SweepSpec("momentum", (1, 2))
    s = SweepSpec("dropout", (0.0, 0.1), replicates=2)
    assert s.seed(0, 1) == s.seed(1, 1) and s.seed(0, 0) != s.seed(0, 1)


def test_apply_sweep_value_couples_eval():
    cfg, proto = apply_sweep_value("inner_steps", 3, TrainConfig(), EvalProtocol())
    assert cfg.inner_steps == 3 and proto.k == 3
    cfg, proto = apply_sweep_value("task_lr", 0.2, TrainConfig(), EvalProtocol())
    assert cfg.alpha == 0.2 and proto.alpha == 0.2


def test_sweep_records_failures_and_continues():
    tr, va, te = synthesize(SyntheticSpec(num_tasks=16, seed=2))
    from limaml.data import prepare_training

    train = prepare_training(tr)
    net = build_split_network(va.meta_dim, va.other_dim, embed_dim=2, meta_hidden=(3,), global_hidden=(4,))
    cfg = TrainConfig(alpha=0.3, beta=0.01, tasks_per_batch=8, total_steps=3)
    spec = SweepSpec("global_lr", (0.01, 1e307))
    with np.errstate(all="ignore"):
        res = run_sweep(spec, cfg.replace(warmup_steps=0), (train, va, te), lambda s: ModelBundle.initialize(net, s),
                        EvalProtocol("fine-tune", 1, 0.3), Baseline(0.5, 1.0))
    assert [r.status for r in res.rows] == ["ok", "failed"]
    assert "Divergence" in res.rows[1].error
    assert "failed" in res.runs_csv()
    summary = res.summary()
    assert summary[0]["auc_gain_abs"] == pytest.approx(summary[0]["auc"] - 0.5)
    assert summary[1]["auc"] is None
    assert "n/a" in res.table()
