"""Small end-to-end CLI run shared by the CLI and acceptance tests."""
import filecmp
from pathlib import Path

from limaml.cli import TIMING_OUTPUTS, main

TRAIN_FLAGS = ["--total-steps", "4", "--tasks-per-batch", "8", "--alpha", "0.3", "--beta", "0.01",
               "--hidden", "6", "--embed-dim", "3", "--meta-hidden", "4", "--global-hidden", "6"]


def run(*argv):
    code = main([str(a) for a in argv])
    assert code == 0, f"limaml {' '.join(map(str, argv))} exited {code}"


def build(root: Path) -> dict[str, Path]:
    """Run every subcommand once; returns subcommand -> output directory."""
    d = {name: root / name for name in ("synthesize", "train", "vanilla", "embedgen", "serve", "eval", "sweep", "export")}
    run("synthesize", "--out", d["synthesize"], "--num-tasks", 30, "--seed", 3)
    run("train", "limaml", "--data", d["synthesize"], "--out", d["train"], *TRAIN_FLAGS)
    run("train", "vanilla", "--data", d["synthesize"], "--out", d["vanilla"], *TRAIN_FLAGS)
    ckpt = d["train"] / "checkpoint.lmck"
    run("embedgen", "--checkpoint", ckpt, "--data", d["synthesize"], "--out", d["embedgen"],
        "--version", "2024-12-31", "--window-days", 3650)
    snap = d["embedgen"] / "embeddings.lmes"
    requests = root / "requests.jsonl"
    requests.write_text(
        '{"task_key": "u01", "meta_features": [0, 0, 0, 0], "other_features": [0, 0, 0, 0, 0, 0, 0, 0]}\n'
        'not json\n'
        '{"task_key": "nobody", "meta_features": [1, 1, 1, 1], "other_features": [1, 1, 1, 1, 1, 1, 1, 1]}\n'
    )
    run("serve", "--checkpoint", ckpt, "--snapshot", snap, "--input", requests, "--out", d["serve"])
    run("eval", "--checkpoint", ckpt, "--checkpoint", d["vanilla"] / "checkpoint.lmck", "--data", d["synthesize"],
        "--out", d["eval"], "--cohort-threshold", 9)
    run("sweep", "--data", d["synthesize"], "--out", d["sweep"], "--values", "1,2", *TRAIN_FLAGS)
    run("export", "--snapshot", snap, "--out", d["export"])
    return d


def replay_differences(original: Path, fresh: Path) -> list[str]:
    """Replay ``original``'s manifest into ``fresh``; names of differing outputs."""
    import json

    manifest = json.loads((original / "manifest.json").read_text())
    skip = {"manifest.json"}
    for name in TIMING_OUTPUTS.get(manifest["subcommand"], ()):
        skip.add(Path(manifest["outputs"][name]).name)
    run("replay", original / "manifest.json", "--out", fresh)
    names = sorted(p.name for p in original.iterdir() if p.name not in skip)
    assert names, f"{original} has no outputs"
    return [n for n in names if not (fresh / n).exists() or not filecmp.cmp(original / n, fresh / n, shallow=False)]
