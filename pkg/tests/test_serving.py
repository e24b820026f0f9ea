import io
import json
import socket
import subprocess
import sys

import numpy as np
import pytest

from limaml.data import SyntheticSpec, synthesize
from limaml.embedgen import EmbedGenConfig, generate_embeddings
from limaml.evaluation import EvalProtocol, evaluate
from limaml.networks import ModelBundle, build_split_network
from limaml.serving import RequestError, Scorer, ScoringServer, ServingError, batch_score
from limaml.store import EmbeddingSnapshot, checkpoint_from_model, write_checkpoint, write_snapshot


@pytest.fixture(scope="module")
def setup():
    _, va, te = synthesize(SyntheticSpec(num_tasks=40, seed=5))
    net = build_split_network(va.meta_dim, va.other_dim, embed_dim=3, meta_hidden=(6,), global_hidden=(8,))
    bundle = ModelBundle.initialize(net, 0)
    # window ends with the last validation day and covers all validation rows
    cfg = EmbedGenConfig(k=2, alpha=0.5, window_days=20, version="2024-04-14")
    res = generate_embeddings(va, bundle, cfg, as_of=int(max(t.timestamps.max() for t in va.values())))
    snap = EmbeddingSnapshot.from_records(res.embeddings, cfg.version, 3)
    scorer = Scorer(net.descriptor(), bundle.params, snap)
    return va, te, bundle, snap, scorer


def requests_for(te, keys=None):
    out = []
    for key, t in te.items():
        if keys is not None and key not in keys:
            continue
        for i in range(len(t)):
            out.append({"task_key": key, "meta_features": t.meta[i].tolist(), "other_features": t.other[i].tolist()})
    return out


def test_serving_matches_eval_path_exactly(setup):
    va, te, bundle, snap, scorer = setup
    rep = evaluate(bundle, EvalProtocol("fine-tune", k=2, alpha=0.5), va, te)
    reqs = requests_for(te)
    out = io.StringIO()
    batch_score(scorer, [json.dumps(r) for r in reqs], out)
    got = [json.loads(line)["score"] for line in out.getvalue().splitlines()]
    want = np.concatenate([rep.scores[k] for k in te])
    assert got == want.tolist()


def test_single_and_batch_agree(setup):
    _, te, _, _, scorer = setup
    reqs = requests_for(te)[:50]
    out = io.StringIO()
    batch_score(scorer, [json.dumps(r) for r in reqs], out)
    lines = out.getvalue().splitlines()
    assert lines == [scorer.score(r).to_json() for r in reqs]


def test_fallback_zero_and_mean(setup):
    va, te, bundle, snap, scorer = setup
    req = {"task_key": "stranger", "meta_features": [0.1] * 4, "other_features": [0.2] * 8}
    r = scorer.score(req)
    assert r.embedding_source == "fallback" and r.version == snap.version
    mean = Scorer(bundle.network.descriptor(), bundle.params, snap, fallback="mean")
    brute = np.zeros(3)
    for v in snap.vectors:
        brute += v.astype(np.float64)
    np.testing.assert_allclose(mean.fallback_vector, brute / len(snap), rtol=1e-6)
    assert mean.score(req).score != r.score


def test_errors_do_not_abort_batch(setup):
    _, te, _, _, scorer = setup
    good = json.dumps(requests_for(te)[0])
    lines = [good, "not json", json.dumps({"task_key": "x", "other_features": [1.0]}), json.dumps([1, 2]), "", good]
    out = io.StringIO()
    assert batch_score(scorer, lines, out) == 5
    res = [json.loads(x) for x in out.getvalue().splitlines()]
    assert "score" in res[0] and "score" in res[4]
    assert all("error" in r for r in res[1:4])


def test_empty_input(setup):
    out = io.StringIO()
    assert batch_score(setup[4], [], out) == 0 and out.getvalue() == ""


def test_order_preserved_mixed_keys(setup):
    _, te, _, snap, scorer = setup
    rng = np.random.default_rng(0)
    reqs = []
    for i in range(1000):
        key = snap.keys[rng.integers(len(snap))] if rng.random() < 0.5 else f"ghost{i}"
        reqs.append({"task_key": key, "meta_features": rng.normal(size=4).tolist(), "other_features": rng.normal(size=8).tolist()})
    out = io.StringIO()
    batch_score(scorer, [json.dumps(r) for r in reqs], out)
    res = [json.loads(x) for x in out.getvalue().splitlines()]
    assert len(res) == 1000
    for r, q in zip(res, reqs):
        assert r["embedding_source"] == ("fallback" if q["task_key"].startswith("ghost") else "stored")
        assert 0.0 <= r["score"] <= 1.0


def test_meta_features_required_when_wired(setup):
    with pytest.raises(RequestError):
        setup[4].score({"task_key": "a", "other_features": [0.0] * 8})


def test_dim_mismatch_at_startup(setup):
    _, _, bundle, snap, _ = setup
    wrong = EmbeddingSnapshot(snap.version, 2, (), np.zeros((0, 2), np.float32), np.zeros(0))
    with pytest.raises(ServingError):
        Scorer(bundle.network.descriptor(), bundle.params, wrong)


def test_scorer_does_not_load_autodiff(tmp_path, setup):
    _, _, bundle, snap, _ = setup
    write_checkpoint(checkpoint_from_model(bundle.network, bundle.params), tmp_path / "c.lmck")
    write_snapshot(snap, tmp_path / "s.lmes")
    code = (
        "import sys; from limaml.serving import Scorer;"
        f"s = Scorer.from_files({str(tmp_path / 'c.lmck')!r}, {str(tmp_path / 's.lmes')!r});"
        "s.score({'task_key': 'x', 'meta_features': [0]*4, 'other_features': [0]*8});"
        "print(sorted(m for m in sys.modules if m.startswith('limaml')))"
    )
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True).stdout
    assert "limaml.numcore" not in out and "graph" not in out
    assert "limaml.inference" in out


def test_socket_answers_same_bytes_as_stdio(setup):
    _, te, _, _, scorer = setup
    lines = [json.dumps(r) for r in requests_for(te)[:20]] + ["garbage"]
    out = io.StringIO()
    batch_score(scorer, lines, out)
    server = ScoringServer(scorer)
    server.start_background()
    try:
        with socket.create_connection(("127.0.0.1", server.port)) as conn:
            conn.sendall(("\n".join(lines) + "\n").encode())
            conn.shutdown(socket.SHUT_WR)
            got = b""
            while chunk := conn.recv(65536):
                got += chunk
    finally:
        server.shutdown()
        server.server_close()
    assert got.decode() == out.getvalue()
