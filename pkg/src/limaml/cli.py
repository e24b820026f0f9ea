"""Command-line pipeline: synthesize, train, embedgen, serve, eval, sweep, export.

Every subcommand resolves its settings as flag > config file > default,
writes its outputs into ``--out`` together with ``manifest.json``, and can be
re-run from that manifest with ``limaml replay``.

Exit codes: 0 success, 1 runtime or I/O failure, 2 usage or config error,
3 numerical divergence.
"""
from __future__ import annotations

import argparse
import datetime as dt
import hashlib
import json
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from . import __version__
from .store import StoreError, atomic_write

log = logging.getLogger("limaml")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    """Bad arguments or configuration (exit 2)."""


# ------------------------------------------------------------------ settings


@dataclass(frozen=True)
class Setting:
    name: str
    kind: str  # int | float | str | bool | ints | opt-int | opt-float
    default: object
    help: str = ""
    choices: tuple | None = None

    def parse(self, raw):
        if not isinstance(raw, str):
            return raw
        text = raw.strip()
        try:
            if self.kind.startswith("opt-") and text.lower() in ("none", ""):
                return None
            if self.kind in ("int", "opt-int"):
                value = int(text)
            elif self.kind in ("float", "opt-float"):
                value = float(text)
            elif self.kind == "bool":
                if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(text)
                value = text.lower() in ("true", "1", "yes")
            elif self.kind == "ints":
                value = [int(p) for p in text.split(",") if p.strip()]
            else:
                value = text
        except ValueError:
            raise UsageError(f"bad value for {self.name!r}: {raw!r}") from None
        if self.choices is not None and value not in self.choices:
            raise UsageError(f"{self.name!r} must be one of {', '.join(map(str, self.choices))}")
        return value

    def format(self, value) -> str:
        if value is None:
            return "none"
        if self.kind == "ints":
            return ",".join(str(v) for v in value)
        if self.kind == "bool":
            return "true" if value else "false"
        return str(value)

    @property
    def flag(self) -> str:
        return "--" + self.name.replace("_", "-")


COMMON = {"seed", "workers"}


def _settings(*items: Setting) -> dict[str, Setting]:
    return {s.name: s for s in items}


def _common() -> list[Setting]:
    return [Setting("seed", "int", 0, "random seed"), Setting("workers", "int", 1, "worker processes")]


def _synth_settings():
    from .data import SyntheticSpec

    d = SyntheticSpec()
    out = []
    for name in SyntheticSpec.__dataclass_fields__:
        if name == "seed":
            continue
        value = getattr(d, name)
        out.append(Setting(name, "int" if isinstance(value, int) else "float", value))
    return _settings(*_common(), *out)


def _train_settings():
    from .training import TrainConfig

    d = TrainConfig()
    return _settings(
        *_common(),
        Setting("alpha", "float", d.alpha, "task (inner-loop) learning rate"),
        Setting("beta", "float", d.beta, "global learning rate"),
        Setting("inner_steps", "int", d.inner_steps, "inner-loop gradient steps"),
        Setting("tasks_per_batch", "int", d.tasks_per_batch),
        Setting("clip_norm", "opt-float", d.clip_norm),
        Setting("warmup_steps", "opt-int", None, "default: 5% of total_steps"),
        Setting("total_steps", "int", d.total_steps),
        Setting("decay", "str", d.decay, choices=("cosine", "none")),
        Setting("dropout", "float", d.dropout),
        Setting("global_grad_source", "str", d.global_grad_source, choices=("adapted", "shared")),
        Setting("freeze_meta", "bool", d.freeze_meta),
        Setting("hidden", "ints", [32, 16], "MLP hidden widths (vanilla, maml)"),
        Setting("embed_dim", "int", 8, "meta embedding width (limaml)"),
        Setting("meta_hidden", "ints", [16], "meta block hidden widths (limaml)"),
        Setting("global_hidden", "ints", [32, 16], "global block hidden widths (limaml)"),
        Setting("meta_to_global", "bool", True, "also feed meta features to the global block"),
        Setting("meta_block", "str", "mlp", choices=("mlp", "id-embedding")),
        Setting("activation", "str", "relu", choices=("relu", "tanh")),
        Setting("sample_cap", "int", 64, "keep at most this many recent samples per task"),
        Setting("support_fraction", "float", 0.75),
    )


def _eval_items():
    return [
        Setting("k", "opt-int", None, "fine-tune steps (default: the model's inner_steps)"),
        Setting("ft_alpha", "opt-float", None, "fine-tune step size (default: the model's alpha)"),
        Setting("pooling", "str", "latest", choices=("latest", "max", "mean", "cos")),
        Setting("cohort_threshold", "int", 25, "tasks with fewer test samples form the small cohort"),
    ]


def _eval_settings():
    return _settings(*_common(), *_eval_items())


def _embedgen_settings():
    from .embedgen import EmbedGenConfig

    d = EmbedGenConfig()
    return _settings(
        *_common(),
        Setting("k", "opt-int", None, "fine-tune steps (default: the model's inner_steps)"),
        Setting("alpha", "opt-float", None, "fine-tune step size (default: the model's alpha)"),
        Setting("window_days", "int", d.window_days),
        Setting("pooling", "str", d.pooling, choices=("latest", "max", "mean", "cos")),
        Setting("version", "str", d.version, "snapshot date YYYY-MM-DD; the window ends with this day"),
        Setting("min_samples", "int", d.min_samples),
    )


def _serve_settings():
    return _settings(
        *_common(),
        Setting("fallback", "str", "zero", choices=("zero", "mean")),
        Setting("mode", "str", "stdio", choices=("stdio", "socket")),
        Setting("host", "str", "127.0.0.1"),
        Setting("port", "int", 0, "0 picks a free port"),
    )


def _sweep_settings():
    t = _train_settings()
    extra = [
        Setting("param", "str", "inner_steps", choices=("inner_steps", "dropout", "task_lr", "global_lr", "pooling")),
        Setting("values", "str", "1,2,3,4,5", "comma-separated values"),
        Setting("replicates", "int", 1),
        Setting("baseline", "bool", True, "train a vanilla baseline for the gain columns"),
    ]
    return {**t, **_settings(*extra, *_eval_items())}


def _export_settings():
    return _settings(*_common())


SCHEMAS: dict[str, Callable[[], dict[str, Setting]]] = {
    "synthesize": _synth_settings,
    "train": _train_settings,
    "embedgen": _embedgen_settings,
    "serve": _serve_settings,
    "eval": _eval_settings,
    "sweep": _sweep_settings,
    "export": _export_settings,
}


def resolve_settings(schema: dict[str, Setting], config_path, flags: dict) -> dict:
    """Flag > config file > default. A config file must name every key."""
    from .training import ConfigError, read_config_file

    values = {name: s.default for name, s in schema.items()}
    if config_path is not None:
        try:
            raw = read_config_file(config_path)
        except ConfigError as exc:
            raise UsageError(f"{config_path}: {exc}") from None
        except OSError as exc:
            raise UsageError(f"cannot read config {config_path}: {exc.strerror}") from None
        for key in raw:
            if key not in schema:
                raise UsageError(f"unknown config key {key!r} in {config_path}")
        for key in schema:
            if key not in raw and key not in COMMON:
                raise UsageError(f"missing config key {key!r} in {config_path}")
        values.update({k: schema[k].parse(v) for k, v in raw.items()})
    for key, value in flags.items():
        if value is not None:
            values[key] = schema[key].parse(value)
    return values


def format_settings(schema: dict[str, Setting], values: dict) -> str:
    return "".join(f"{k} = {schema[k].format(values[k])}\n" for k in schema)


# ------------------------------------------------------------------ helpers


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="milliseconds")


def _sha(path: Path) -> str:
    return hashlib.blake2b(path.read_bytes(), digest_size=16).hexdigest()


def write_manifest(out: Path, subcommand: str, settings: dict, args: dict, outputs: dict, started: str, seconds: float, extra: dict | None = None):
    manifest = {
        "subcommand": subcommand,
        "tool_version": __version__,
        "seed": settings.get("seed"),
        "config": settings,
        "args": args,
        "outputs": {k: str(v) for k, v in outputs.items()},
        "output_digests": {k: _sha(Path(v)) for k, v in outputs.items()},
        "started_at": started,
        "finished_at": _now(),
        "wall_seconds": seconds,
    }
    if extra:
        manifest.update(extra)
    atomic_write(out / "manifest.json", (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def _write_text(path: Path, text: str) -> Path:
    atomic_write(path, text.encode("utf-8"))
    return path


def _data_file(data: str, name: str) -> Path:
    p = Path(data)
    if p.is_dir():
        p = p / f"{name}.csv"
    if not p.exists():
        raise FileNotFoundError(f"no such data file: {p}")
    return p


def _train_config(s: dict):
    from .training import ConfigError, TrainConfig

    try:
        return TrainConfig(
            alpha=s["alpha"], beta=s["beta"], inner_steps=s["inner_steps"], tasks_per_batch=s["tasks_per_batch"],
            clip_norm=s["clip_norm"], warmup_steps=s["warmup_steps"], total_steps=s["total_steps"], decay=s["decay"],
            dropout=s["dropout"], workers=s["workers"], seed=s["seed"], global_grad_source=s["global_grad_source"],
            freeze_meta=s["freeze_meta"],
        )
    except ConfigError as exc:
        raise UsageError(str(exc)) from None


def _build_network(algorithm: str, s: dict, tasks):
    from .networks import build_mlp_network, build_split_network

    if algorithm in ("vanilla", "maml"):
        return build_mlp_network(tasks.meta_dim, tasks.other_dim, tuple(s["hidden"]), s["activation"])
    return build_split_network(
        tasks.meta_dim, tasks.other_dim, embed_dim=s["embed_dim"], meta_hidden=tuple(s["meta_hidden"]),
        global_hidden=tuple(s["global_hidden"]), meta_to_global=s["meta_to_global"], meta_block=s["meta_block"],
        keys=list(tasks), activation=s["activation"],
    )


def _train_one(algorithm: str, s: dict, train, on_step=None):
    """(network, params, report) for one algorithm on prepared tasks."""
    import numpy as np

    from .networks import ModelBundle
    from .training import limaml_train, maml_train, vanilla_train

    cfg = _train_config(s)
    net = _build_network(algorithm, s, train)
    if algorithm == "vanilla":
        params, report = vanilla_train(train, net, cfg, on_step=on_step)
        return net, params, report
    if algorithm == "maml":
        params, report = maml_train(train, net, cfg, on_step=on_step)
        return net, params, report
    bundle, report = limaml_train(train, ModelBundle(net, net.init(np.random.default_rng(cfg.seed))), cfg, on_step=on_step)
    return bundle.network, bundle.params, report


# -------------------------------------------------------------- subcommands


def cmd_synthesize(s: dict, args: dict, out: Path) -> dict:
    from .data import SyntheticSpec, export, synthesize

    fields = {k: v for k, v in s.items() if k in SyntheticSpec.__dataclass_fields__}
    try:
        spec = SyntheticSpec(**fields)
    except ValueError as exc:
        raise UsageError(f"invalid synthetic spec: {exc}") from None
    outputs = {}
    for name, col in zip(("train", "validation", "test"), synthesize(spec)):
        path = out / f"{name}.csv"
        export(col, path)
        outputs[name] = path
    return outputs


def cmd_train(s: dict, args: dict, out: Path) -> dict:
    from .data import ingest, prepare_training
    from .store import checkpoint_from_model, write_checkpoint

    algorithm = args["algorithm"]
    tasks = ingest(_data_file(args["data"], "train"))
    train = prepare_training(tasks, s["sample_cap"], s["support_fraction"])
    rows = []
    net, params, report = _train_one(algorithm, s, train, on_step=rows.append)
    metrics = "".join(json.dumps({k: r[k] for k in ("step", "loss", "lr", "grad_norm")}) + "\n" for r in rows)
    meta = {
        "algorithm": algorithm,
        "final_loss": report.losses[-1],
        "final_query_auc": report.final_query_auc,
        "skipped_tasks": report.skipped_tasks,
        "train_tasks": len(train),
    }
    ckpt = out / "checkpoint.lmck"
    write_checkpoint(checkpoint_from_model(net, params, s, meta), ckpt)
    return {"checkpoint": ckpt, "metrics": _write_text(out / "metrics.jsonl", metrics)}


def _load(path):
    from .store import load_model, read_checkpoint

    ckpt = read_checkpoint(path)
    net, params = load_model(ckpt)
    return ckpt, net, params


def cmd_embedgen(s: dict, args: dict, out: Path) -> dict:
    from .data import ingest
    from .embedgen import EmbedGenConfig, generate_embeddings
    from .networks import ModelBundle, SplitNetwork
    from .store import EmbeddingSnapshot, write_snapshot

    ckpt, net, params = _load(args["checkpoint"])
    if not isinstance(net, SplitNetwork):
        raise UsageError("embedgen needs a limaml (split network) checkpoint")
    tasks = ingest(_data_file(args["data"], "validation"))
    if (tasks.meta_dim, tasks.other_dim) != (net.meta_dim, net.other_dim):
        raise UsageError(
            f"data has {tasks.meta_dim} meta / {tasks.other_dim} other features, "
            f"checkpoint expects {net.meta_dim} / {net.other_dim}"
        )
    d_k, d_alpha = EmbedGenConfig().k, EmbedGenConfig().alpha
    try:
        k = ckpt.config.get("inner_steps", d_k) if s["k"] is None else s["k"]
        alpha = ckpt.config.get("alpha", d_alpha) if s["alpha"] is None else s["alpha"]
        cfg = EmbedGenConfig(k, alpha, s["window_days"], s["pooling"], s["version"], s["min_samples"], s["workers"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    result = generate_embeddings(tasks, ModelBundle(net, params), cfg)
    if len(result) == 0:
        log.warning("no task has samples in the window; writing an empty snapshot")
    snap = EmbeddingSnapshot.from_records(result.embeddings, cfg.version, net.embed_dim)
    path = out / "embeddings.lmes"
    write_snapshot(snap, path)
    args["_counts"] = {"records": len(snap), "skipped": result.skipped, "failed": result.failed}
    return {"snapshot": path}


def cmd_serve(s: dict, args: dict, out: Path | None) -> dict:
    from .serving import Scorer, ScoringServer, ServingError, batch_score

    try:
        scorer = Scorer.from_files(args["checkpoint"], args["snapshot"], s["fallback"])
    except ServingError as exc:
        raise RuntimeError(f"cannot start scorer: {exc}") from None
    if s["mode"] == "socket":
        server = ScoringServer(scorer, s["host"], s["port"])
        print(f"listening on {s['host']}:{server.port}", file=sys.stderr, flush=True)
        try:
            server.serve_forever()
        except KeyboardInterrupt:
            pass
        finally:
            server.server_close()
        return {}
    src = open(args["input"], encoding="utf-8") if args.get("input") else sys.stdin
    try:
        if out is None:
            batch_score(scorer, src, sys.stdout)
            return {}
        import io

        buf = io.StringIO()
        batch_score(scorer, src, buf)
    finally:
        if src is not sys.stdin:
            src.close()
    return {"responses": _write_text(out / "responses.jsonl", buf.getvalue())}


def _protocols(s: dict, ckpt_config: dict):
    from .evaluation import EvalProtocol

    k = ckpt_config.get("inner_steps", 1) if s["k"] is None else s["k"]
    alpha = ckpt_config.get("alpha", 0.1) if s["ft_alpha"] is None else s["ft_alpha"]
    try:
        return [EvalProtocol(mode, k, alpha, s["pooling"], s["cohort_threshold"]) for mode in ("no-fine-tune", "fine-tune")]
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _report_dict(rep) -> dict:
    return {
        "auc": rep.overall_auc,
        "cohort_auc": rep.cohort_aucs,
        "cohort_tasks": rep.cohort_counts,
        "gain_pct": rep.gain_rel,
        "gain_abs": rep.gain_abs,
        "tasks_without_validation": rep.unadapted_tasks,
    }


def cmd_eval(s: dict, args: dict, out: Path) -> dict:
    from .data import ingest, prepare_training
    from .evaluation import evaluate, gain_table
    from .training import query_auc, training_tasks

    validation = ingest(_data_file(args["data"], "validation"))
    test = ingest(_data_file(args["data"], "test"))
    train_path = Path(args["data"]) / "train.csv" if Path(args["data"]).is_dir() else None
    train_raw = ingest(train_path) if train_path is not None and train_path.exists() else None
    reports, models = {}, {}
    for path in args["checkpoint"]:
        ckpt, net, params = _load(path)
        algorithm = ckpt.metadata.get("algorithm", "vanilla" if ckpt.descriptor["kind"] == "mlp" else "limaml")
        entry = {"checkpoint": str(path)}
        model = (net, params)
        for proto in _protocols(s, ckpt.config):
            rep = evaluate(model, proto, validation, test, seed=s["seed"])
            reports[(algorithm, proto.mode)] = rep
            entry[proto.mode] = {"k": proto.steps, "alpha": proto.alpha}
        if train_raw is not None:
            cfg = ckpt.config
            prepared = prepare_training(train_raw, cfg.get("sample_cap", 64), cfg.get("support_fraction", 0.75))
            entry["train_query_auc"] = query_auc(net, params, training_tasks(prepared, algorithm, cfg.get("inner_steps", 0)))
        models[algorithm] = entry
    base = ("vanilla", "no-fine-tune") if ("vanilla", "no-fine-tune") in reports else next(iter(reports))
    for rep in reports.values():
        if reports[base].overall_auc is not None:
            rep.with_baseline(reports[base].overall_auc)
    text, csv_text = gain_table(reports, base, s["cohort_threshold"])
    payload = {
        "baseline": list(base),
        "models": models,
        "results": {f"{a}/{m}": _report_dict(r) for (a, m), r in reports.items()},
    }
    return {
        "report": _write_text(out / "report.json", json.dumps(payload, indent=2, sort_keys=True) + "\n"),
        "table": _write_text(out / "gain_table.txt", text),
        "csv": _write_text(out / "gain_table.csv", csv_text),
    }


def _sweep_values(param: str, text: str) -> tuple:
    parts = [p.strip() for p in text.split(",") if p.strip()]
    try:
        if param == "inner_steps":
            return tuple(int(p) for p in parts)
        if param == "pooling":
            return tuple(parts)
        return tuple(float(p) for p in parts)
    except ValueError:
        raise UsageError(f"bad sweep values {text!r}") from None


def cmd_sweep(s: dict, args: dict, out: Path) -> dict:
    import numpy as np

    from .data import ingest, prepare_training
    from .evaluation import Baseline, EvalProtocol, SweepSpec, evaluate, run_sweep
    from .networks import ModelBundle

    try:
        spec = SweepSpec(s["param"], _sweep_values(s["param"], s["values"]), s["replicates"], s["seed"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    tasks = ingest(_data_file(args["data"], "train"))
    train = prepare_training(tasks, s["sample_cap"], s["support_fraction"])
    validation = ingest(_data_file(args["data"], "validation"))
    test = ingest(_data_file(args["data"], "test"))
    cfg = _train_config(s)
    k = cfg.inner_steps if s["k"] is None else s["k"]
    alpha = cfg.alpha if s["ft_alpha"] is None else s["ft_alpha"]
    protocol = EvalProtocol("fine-tune", k, alpha, s["pooling"], s["cohort_threshold"])
    baseline = None
    if s["baseline"]:
        t0 = time.perf_counter()
        net, params, _ = _train_one("vanilla", s, train)
        secs = time.perf_counter() - t0
        baseline = Baseline(evaluate((net, params), EvalProtocol("no-fine-tune"), validation, test).overall_auc, secs)
    template = _build_network("limaml", s, train)

    def factory(seed):
        return ModelBundle(template, template.init(np.random.default_rng(seed)))

    result = run_sweep(spec, cfg, (train, validation, test), factory, protocol, baseline)
    # AUC columns are reproducible; wall times are kept apart from them
    import csv
    import io

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["param", "value", "replicate", "seed", "auc", "auc_gain_pct", "auc_gain_abs", "status", "error"])
    for r in result.rows:
        gain = ("", "")
        if baseline is not None and r.auc is not None:
            from .metrics import auc_gain

            gain = tuple(repr(g) for g in auc_gain(r.auc, baseline.auc))
        w.writerow([spec.param, r.value, r.replicate, r.seed, "" if r.auc is None else repr(r.auc), *gain, r.status, r.error])
    tbuf = io.StringIO()
    tw = csv.writer(tbuf, lineterminator="\n")
    tw.writerow(["param", "value", "replicate", "seconds"])
    if baseline is not None:
        tw.writerow([spec.param, "baseline", 0, repr(baseline.seconds)])
    for r in result.rows:
        tw.writerow([spec.param, r.value, r.replicate, "" if r.seconds is None else repr(r.seconds)])
    return {
        "results": _write_text(out / "sweep.csv", buf.getvalue()),
        "timings": _write_text(out / "timings.csv", tbuf.getvalue()),
        "summary": _write_text(out / "summary.csv", result.summary_csv()),
        "table": _write_text(out / "table.txt", result.table()),
    }


def cmd_export(s: dict, args: dict, out: Path) -> dict:
    from .store import export_tsv, read_snapshot

    snap = read_snapshot(args["snapshot"])
    return {"tsv": _write_text(out / "embeddings.tsv", export_tsv(snap))}


COMMANDS = {
    "synthesize": cmd_synthesize,
    "train": cmd_train,
    "embedgen": cmd_embedgen,
    "serve": cmd_serve,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "export": cmd_export,
}

# outputs that hold wall-clock measurements and so differ between runs
TIMING_OUTPUTS = {"sweep": ("timings", "summary", "table")}


def run_command(name: str, settings: dict, args: dict, out: Path | None) -> dict:
    """Run one subcommand with fully resolved settings; writes the manifest."""
    started, t0 = _now(), time.perf_counter()
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    outputs = COMMANDS[name](settings, args, out)
    extra = {}
    if "_counts" in args:
        extra["counts"] = args.pop("_counts")
    if out is not None and (outputs or name != "serve"):
        write_manifest(out, name, settings, args, outputs, started, time.perf_counter() - t0, extra)
    return outputs


def replay(manifest_path, out: Path | None = None) -> dict:
    """Re-run the subcommand a manifest describes, into ``out`` (default: the original directory)."""
    manifest = json.loads(Path(manifest_path).read_text(encoding="utf-8"))
    if manifest.get("subcommand") not in COMMANDS:
        raise UsageError(f"{manifest_path}: not a limaml manifest")
    target = Path(out) if out is not None else Path(manifest_path).parent
    return run_command(manifest["subcommand"], manifest["config"], dict(manifest["args"]), target)


# --------------------------------------------------------------------- main


def _add_settings(p: argparse.ArgumentParser, schema: dict[str, Setting]):
    p.add_argument("--config", help="settings file (key = value lines); must name every key except seed/workers")
    p.add_argument("--print-config", action="store_true", help="print the resolved settings in config-file form and exit")
    g = p.add_argument_group("settings")
    for s in schema.values():
        extra = f" (default {s.format(s.default)})"
        g.add_argument(s.flag, dest=f"set_{s.name}", default=None, metavar=s.kind.upper(),
                       help=(s.help + extra).strip() + (f"; one of {', '.join(s.choices)}" if s.choices else ""))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="limaml", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"limaml {__version__}")
    parser.add_argument("--log-level", default="WARNING", choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synthesize", help="write a synthetic train/validation/test dataset")
    p.add_argument("--out", required=True, help="output directory")
    _add_settings(p, SCHEMAS["synthesize"]())

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("algorithm", choices=("vanilla", "maml", "limaml"))
    p.add_argument("--data", required=True, help="dataset directory (uses train.csv) or file")
    p.add_argument("--out", required=True)
    _add_settings(p, SCHEMAS["train"]())

    p = sub.add_parser("embedgen", help="generate a meta-embedding snapshot")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset directory (uses validation.csv) or file")
    p.add_argument("--out", required=True)
    _add_settings(p, SCHEMAS["embedgen"]())

    p = sub.add_parser("serve", help="score JSON-lines requests")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--snapshot", required=True)
    p.add_argument("--input", help="request file (default: standard input)")
    p.add_argument("--out", help="write responses.jsonl and a manifest here (default: standard output)")
    _add_settings(p, SCHEMAS["serve"]())

    p = sub.add_parser("eval", help="AUC report (fine-tune and no-fine-tune) for one or more checkpoints")
    p.add_argument("--checkpoint", required=True, action="append", help="repeat for several models")
    p.add_argument("--data", required=True, help="dataset directory (validation.csv, test.csv, optional train.csv)")
    p.add_argument("--out", required=True)
    _add_settings(p, SCHEMAS["eval"]())

    p = sub.add_parser("sweep", help="train+evaluate LiMAML over a list of values of one hyperparameter")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_settings(p, SCHEMAS["sweep"]())

    p = sub.add_parser("export", help="convert a snapshot to TSV")
    p.add_argument("--snapshot", required=True)
    p.add_argument("--out", required=True)
    _add_settings(p, SCHEMAS["export"]())

    p = sub.add_parser("replay", help="re-run a subcommand from its manifest")
    p.add_argument("manifest")
    p.add_argument("--out", help="output directory (default: the manifest's directory)")
    return parser


_ARG_KEYS = {
    "synthesize": (),
    "train": ("algorithm", "data"),
    "embedgen": ("checkpoint", "data"),
    "serve": ("checkpoint", "snapshot", "input"),
    "eval": ("checkpoint", "data"),
    "sweep": ("data",),
    "export": ("snapshot",),
}


def _abs(value):
    if isinstance(value, list):
        return [_abs(v) for v in value]
    return str(Path(value).resolve())


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=ns.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if ns.command == "replay":
            replay(ns.manifest, Path(ns.out) if ns.out else None)
            return EXIT_OK
        schema = SCHEMAS[ns.command]()
        flags = {name: getattr(ns, f"set_{name}") for name in schema}
        settings = resolve_settings(schema, ns.config, flags)
        if ns.print_config:
            sys.stdout.write(format_settings(schema, settings))
            return EXIT_OK
        args = {k: getattr(ns, k) if k == "algorithm" else _abs(getattr(ns, k)) for k in _ARG_KEYS[ns.command] if getattr(ns, k) is not None}
        out = Path(ns.out) if getattr(ns, "out", None) else None
        run_command(ns.command, settings, args, out)
        return EXIT_OK
    except UsageError as exc:
        print(f"limaml: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        from .numcore import ShapeError
        from .training import ConfigError, DivergenceError

        if isinstance(exc, DivergenceError):
            print(f"limaml: diverged: {exc}", file=sys.stderr)
            return EXIT_DIVERGED
        if isinstance(exc, (ConfigError, ShapeError)):
            print(f"limaml: error: {exc}", file=sys.stderr)
            return EXIT_USAGE
        if isinstance(exc, (OSError, StoreError, RuntimeError, ValueError)):
            print(f"limaml: failed: {exc}", file=sys.stderr)
            return EXIT_RUNTIME
        raise


if __name__ == "__main__":
    sys.exit(main())
