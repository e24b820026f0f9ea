"""From a trained model to online scores.

1. Train a split network with LiMAML.
2. Offline: fine-tune the meta block per task on its recent samples and
   store one float32 embedding per task in a versioned snapshot.
3. Online: load only the global block and the snapshot, then score
   JSON-lines requests. Unknown tasks fall back to a default embedding.
4. Check that the served probabilities equal the offline evaluation path.

Run: python3 demos/offline_to_online.py
"""
import io
import json
import sys
import tempfile
from pathlib import Path

import numpy as np

from limaml.data import SyntheticSpec, prepare_training, synthesize
from limaml.embedgen import EmbedGenConfig, generate_embeddings
from limaml.evaluation import EvalProtocol, evaluate
from limaml.networks import ModelBundle, build_split_network
from limaml.serving import Scorer, batch_score
from limaml.store import EmbeddingSnapshot, checkpoint_from_model, snapshot_size, write_checkpoint, write_snapshot
from limaml.training import TrainConfig, limaml_train


def main():
    train, validation, test = synthesize(SyntheticSpec(num_tasks=300, latent_scale=1.5, seed=1))
    net = build_split_network(4, 8, embed_dim=8, meta_hidden=(16,), global_hidden=(32, 16))
    cfg = TrainConfig(alpha=1.0, beta=0.003, inner_steps=1, tasks_per_batch=64, total_steps=60)
    bundle, report = limaml_train(prepare_training(train), ModelBundle.initialize(net, 0), cfg)
    print(f"trained: final loss {report.losses[-1]:.4f}")

    as_of = int(max(t.timestamps.max() for t in validation.values()))
    gen = EmbedGenConfig(k=1, alpha=1.0, window_days=30, version="2024-05-01")
    result = generate_embeddings(validation, bundle, gen, as_of=as_of)
    snap = EmbeddingSnapshot.from_records(result.embeddings, gen.version, net.embed_dim)
    print(f"embeddings: {len(snap)} tasks, {result.skipped} skipped, snapshot {snapshot_size(snap.dim, snap.keys)} bytes")

    with tempfile.TemporaryDirectory() as d:
        write_checkpoint(checkpoint_from_model(net, bundle.params), Path(d) / "model.lmck")
        write_snapshot(snap, Path(d) / "embeddings.lmes")
        scorer = Scorer.from_files(Path(d) / "model.lmck", Path(d) / "embeddings.lmes", fallback="mean")

    key = next(iter(test))
    t = test[key]
    lines = [json.dumps({"task_key": key, "meta_features": t.meta[i].tolist(), "other_features": t.other[i].tolist()}) for i in range(len(t))]
    lines.append(json.dumps({"task_key": "brand-new-user", "meta_features": [0.0] * 4, "other_features": [0.0] * 8}))
    lines.append('{"task_key": 7}')
    out = io.StringIO()
    batch_score(scorer, lines, out)
    print(f"\nresponses for task {key} plus an unknown task and a bad request:")
    sys.stdout.write(out.getvalue())

    rep = evaluate(bundle, EvalProtocol("fine-tune", k=1, alpha=1.0), validation, test)
    served = [json.loads(x)["score"] for x in out.getvalue().splitlines()[: len(t)]]
    print(f"\nserved == offline evaluation for {key}: {np.array_equal(served, rep.scores[key])}")


if __name__ == "__main__":
    main()
