"""Operator command line: ingest -> train -> distill -> simulate -> compare.

Every command takes a JSON config (schema-validated, unknown keys rejected),
a base seed, and an output directory. Each run writes a manifest recording
the exact arguments, config hash, and input-file hashes that produced its
artifacts; `rerun` replays a manifest. Exit codes: 0 success, 2 config
error, 3 data error, 4 divergence abort.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, DivergenceError
from . import features as feat
from . import matching
from . import network as net
from . import sim
from . import training
from . import transfer as xfer
from .index import GeoPoint, IndexConfig
from .rngs import substream

WORKER_ENV = "CVDISPATCH_WORKERS"


# ---------------------------------------------------------------------------
# config plumbing

def _load_json(path: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError as e:
        raise ConfigError(f"config not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON in {path}: {e}") from e


def _check_keys(d: dict, allowed: set[str], where: str) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def _index_config(d: dict) -> IndexConfig:
    return IndexConfig.from_json_dict(d)


def _hash_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: Path, command: str, argv: list[str],
                   config_path: str | None, inputs: list[str],
                   outputs: list[str]) -> None:
    manifest = {
        "command": command,
        "argv": argv,
        "config": config_path,
        "config_sha256": _hash_file(config_path) if config_path else None,
        "inputs": {p: _hash_file(p) for p in inputs if os.path.exists(p)},
        "outputs": outputs,
    }
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _world_config(d: dict) -> sim.WorldConfig:
    _check_keys(d, set(sim.WorldConfig.__dataclass_fields__), "world")
    return sim.WorldConfig(**d)


def _static_vector(calendar: dict) -> np.ndarray:
    _check_keys(calendar, {"day_of_week", "holiday"}, "calendar")
    ctx = training.CalendarContext(int(calendar.get("day_of_week", 0)),
                                   bool(calendar.get("holiday", False)))
    return ctx.vector()


# ---------------------------------------------------------------------------
# policies from config

def build_policy(spec: dict, index_config: IndexConfig, static: np.ndarray):
    _check_keys(spec, {"name", "kind", "checkpoint", "table", "gamma", "omega",
                       "cancel_aware"}, "policy")
    kind = spec.get("kind", spec.get("name"))
    if kind == "myopic":
        return sim.MyopicPolicy()
    gamma = float(spec.get("gamma", 0.92))
    omega = float(spec.get("omega", 0.0))
    cancel_aware = bool(spec.get("cancel_aware", False))
    name = spec.get("name", kind)
    if kind == "cvnet":
        params, _, _ = net.load_checkpoint_file(spec["checkpoint"], index_config)
        return sim.ValuePolicy(name, sim.network_batch_eval(params, index_config, static),
                               gamma, omega, cancel_aware=cancel_aware)
    if kind == "tval":
        table = load_tabular(spec["table"], index_config)
        return sim.ValuePolicy(name, sim.tabular_batch_eval(table), gamma, omega,
                               cancel_aware=cancel_aware)
    raise ConfigError(f"unknown policy kind {kind!r}")


def save_tabular(path: str, table: training.TabularValue) -> None:
    with open(path, "w") as fh:
        json.dump({
            "index_config": table.index_config.to_json_dict(),
            "bucket_seconds": table.bucket_seconds,
            "values": [[cell, bucket, v] for (cell, bucket), v in
                       sorted(table.values.items())],
        }, fh)


def load_tabular(path: str, expected: IndexConfig | None = None) -> training.TabularValue:
    d = _load_json(path)
    cfg = _index_config(d["index_config"])
    if expected is not None and cfg != expected:
        raise ConfigError("tabular value IndexConfig mismatch")
    return training.TabularValue(
        values={(cell, int(bucket)): float(v) for cell, bucket, v in d["values"]},
        index_config=cfg,
        bucket_seconds=int(d["bucket_seconds"]),
    )


def _ingest_inputs(cfg: dict, index_config: IndexConfig):
    data = cfg.get("data", {})
    _check_keys(data, {"trajectories", "features"}, "data")
    traj_path = data.get("trajectories")
    if traj_path is None:
        raise ConfigError("data.trajectories is required")
    try:
        with open(traj_path) as fh:
            report = feat.ingest_trajectories(fh, index_config)
    except OSError as e:
        raise DataError(f"cannot read {traj_path}: {e}") from e
    store = None
    if data.get("features"):
        try:
            with open(data["features"]) as fh:
                store = feat.ingest_features(fh, index_config, log_interval=60)
        except OSError as e:
            raise DataError(f"cannot read {data['features']}: {e}") from e
    return report, store, [p for p in (traj_path, data.get("features")) if p]


# ---------------------------------------------------------------------------
# commands

def cmd_ingest(args) -> int:
    cfg = _load_json(args.config)
    _check_keys(cfg, {"index_config", "data"}, "config")
    index_config = _index_config(cfg["index_config"])
    report, store, inputs = _ingest_inputs(cfg, index_config)
    out = _out_dir(args)
    summary = {
        "transitions": len(report.transitions),
        "lines": report.n_lines,
        "skipped_lines": len(report.errors),
        "errors": [{"line": n, "error": e} for n, e in report.errors[:50]],
        "feature_rows": len(store.values) if store else 0,
        "feature_row_errors": len(store.row_errors) if store else 0,
    }
    with open(out / "dataset.json", "w") as fh:
        json.dump(summary, fh, indent=2)
    write_manifest(out, "ingest", args.argv, args.config, inputs,
                   ["dataset.json"])
    print(f"transitions={summary['transitions']} "
          f"skipped={summary['skipped_lines']} "
          f"feature_rows={summary['feature_rows']}")
    if report.errors:
        print(f"warning: {len(report.errors)} malformed lines skipped",
              file=sys.stderr)
    return 0


TRAIN_KEYS = {"gamma", "lam", "p", "batch_size", "epochs", "max_steps",
              "target_sync", "lr", "rg_seconds", "embed_dim", "hidden",
              "grad_clip", "anchor_terminal", "log_interval",
              "distill_during_training", "distill_lr"}


def _train_config(cfg: dict, args) -> dict:
    t = dict(cfg.get("training", {}))
    _check_keys(t, TRAIN_KEYS, "training")
    if args.gamma is not None:
        t["gamma"] = args.gamma
    if getattr(args, "lam", None) is not None:
        t["lam"] = args.lam
    if "hidden" in t:
        t["hidden"] = tuple(t["hidden"])
    return t


def cmd_train(args) -> int:
    cfg = _load_json(args.config)
    _check_keys(cfg, {"index_config", "data", "training", "calendar"}, "config")
    index_config = _index_config(cfg["index_config"])
    report, store, inputs = _ingest_inputs(cfg, index_config)
    if not report.transitions:
        raise DataError("no transitions to train on")
    tcfg = training.TrainConfig(seed=args.seed, **_train_config(cfg, args))
    calendar = training.CalendarContext(
        **cfg.get("calendar", {"day_of_week": 0}))
    result = training.train(tcfg, report.transitions, index_config,
                            store=store, calendar=calendar)
    out = _out_dir(args)
    ckpt = out / "checkpoint.cvn"
    net.save_checkpoint_file(str(ckpt), result.params, index_config, metadata={
        "gamma": tcfg.gamma, "lam": tcfg.lam, "p": tcfg.p,
        "seed": args.seed, "steps": result.steps,
        "calendar": {"day_of_week": calendar.day_of_week,
                     "holiday": calendar.holiday},
    })
    with open(out / "training_log.csv", "w") as fh:
        fh.write(result.log_csv(include_wall=False))
    write_manifest(out, "train", args.argv, args.config, inputs,
                   ["checkpoint.cvn", "training_log.csv"])
    final_loss = result.log[-1].data_loss if result.log else float("nan")
    print(f"steps={result.steps} final_loss={final_loss:.6f} checkpoint={ckpt}")
    return 0


def cmd_distill(args) -> int:
    cfg = _load_json(args.config)
    _check_keys(cfg, {"index_config", "data", "checkpoint", "distill"}, "config")
    index_config = _index_config(cfg["index_config"])
    params, _, meta = net.load_checkpoint_file(cfg["checkpoint"], index_config)
    report, store, inputs = _ingest_inputs(cfg, index_config)
    d = dict(cfg.get("distill", {}))
    _check_keys(d, {"epochs", "lr", "batch_size", "rg_seconds"}, "distill")
    calendar = training.CalendarContext(**meta.get("calendar", {"day_of_week": 0}))
    data = training.prepare_training_data(report.transitions, index_config,
                                          store, calendar)
    mse = training.distill(params, data,
                           epochs=int(d.get("epochs", 20)),
                           lr=float(d.get("lr", 1e-3)),
                           seed=args.seed,
                           rg=int(d.get("rg_seconds", 1800)),
                           batch_size=int(d.get("batch_size", 32)))
    out = _out_dir(args)
    ckpt = out / "checkpoint.cvn"
    meta = dict(meta)
    meta["distill_mse"] = mse
    net.save_checkpoint_file(str(ckpt), params, index_config, metadata=meta)
    write_manifest(out, "distill", args.argv, args.config,
                   inputs + [cfg["checkpoint"]], ["checkpoint.cvn"])
    print(f"distill_mse={mse:.3e} checkpoint={ckpt}")
    return 0


def _simulate_once(cfg_dict: dict, policy_spec: dict, index_dict: dict,
                   calendar: dict, seed: int):
    world_cfg = _world_config(cfg_dict)
    index_config = _index_config(index_dict)
    static = _static_vector(calendar)
    policy = build_policy(policy_spec, index_config, static)
    metrics, world = sim.run_episode(world_cfg, policy, seed)
    return metrics, world


def cmd_simulate(args) -> int:
    cfg = _load_json(args.config)
    _check_keys(cfg, {"index_config", "world", "policy", "calendar"}, "config")
    index_dict = cfg["index_config"]
    calendar = cfg.get("calendar", {"day_of_week": 0})
    metrics, world = _simulate_once(cfg.get("world", {}), cfg["policy"],
                                    index_dict, calendar, args.seed)
    out = _out_dir(args)
    with open(out / "metrics.csv", "w") as fh:
        fh.write(sim.EpisodeMetrics.CSV_HEADER + "\n")
        fh.write(metrics.csv_row() + "\n")
    with open(out / "events.jsonl", "w") as fh:
        sim.write_event_log(world, fh)
    index_config = _index_config(index_dict)
    with open(out / "trajectories.jsonl", "w") as tfh, \
            open(out / "features.csv", "w") as ffh:
        sim.export_trajectories(world, tfh, ffh, index_config)
    inputs = [cfg["policy"][k] for k in ("checkpoint", "table")
              if k in cfg["policy"]]
    write_manifest(out, "simulate", args.argv, args.config, inputs,
                   ["metrics.csv", "events.jsonl", "trajectories.jsonl",
                    "features.csv"])
    print(f"tdi={metrics.tdi:.2f} answer_rate={metrics.answer_rate:.4f} "
          f"finish_rate={metrics.finish_rate:.4f}")
    return 0


def _compare_cell(job):
    cfg_dict, policy_spec, index_dict, calendar, seed = job
    metrics, _ = _simulate_once(cfg_dict, policy_spec, index_dict, calendar, seed)
    return (policy_spec.get("name", policy_spec.get("kind")), seed, metrics)


def _parse_policy_filter(arg: str | None) -> list[str] | None:
    return [p.strip() for p in arg.split(",")] if arg else None


def cmd_compare(args) -> int:
    cfg = _load_json(args.config)
    _check_keys(cfg, {"index_config", "world", "policies", "calendar",
                      "n_seeds", "omega_levels"}, "config")
    index_dict = cfg["index_config"]
    calendar = cfg.get("calendar", {"day_of_week": 0})
    world = cfg.get("world", {})
    specs = cfg["policies"]
    wanted = _parse_policy_filter(args.policies)
    if wanted:
        byname = {s.get("name", s.get("kind")): s for s in specs}
        missing = [w for w in wanted if w not in byname]
        if missing:
            raise ConfigError(f"policies not in config: {missing}")
        specs = [byname[w] for w in wanted]
    if not specs:
        raise ConfigError("no policies selected")
    n_seeds = int(cfg.get("n_seeds", 10))
    seeds = [args.seed + i for i in range(n_seeds)]

    jobs = [(world, spec, index_dict, calendar, s)
            for s in seeds for spec in specs]
    workers = int(os.environ.get(WORKER_ENV, "1"))
    if workers > 1:
        import multiprocessing as mp
        with mp.Pool(workers) as pool:
            results = pool.map(_compare_cell, jobs)
    else:
        results = [_compare_cell(j) for j in jobs]

    per_policy: dict[str, dict[int, sim.EpisodeMetrics]] = {}
    for name, seed, metrics in results:
        per_policy.setdefault(name, {})[seed] = metrics
    base_name = specs[0].get("name", specs[0].get("kind"))
    base = np.array([per_policy[base_name][s].tdi for s in seeds])

    out = _out_dir(args)
    outputs = ["comparison.csv"]
    with open(out / "comparison.csv", "w") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["policy", "tdi_mean", "tdi_normalized_mean",
                    "tdi_normalized_std", "answer_rate", "finish_rate",
                    "mean_pickup_m"])
        for spec in specs:
            name = spec.get("name", spec.get("kind"))
            ms = [per_policy[name][s] for s in seeds]
            tdis = np.array([m.tdi for m in ms])
            norm = tdis / base
            w.writerow([name, f"{tdis.mean():.6f}", f"{norm.mean():.6f}",
                        f"{norm.std():.6f}",
                        f"{np.mean([m.answer_rate for m in ms]):.6f}",
                        f"{np.mean([m.finish_rate for m in ms]):.6f}",
                        f"{np.mean([m.mean_pickup_m for m in ms]):.6f}"])

    # per-seed table for paired statistics
    with open(out / "per_seed.csv", "w") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["policy", "seed", "tdi", "answer_rate", "finish_rate",
                    "mean_pickup_m"])
        for spec in specs:
            name = spec.get("name", spec.get("kind"))
            for s in seeds:
                m = per_policy[name][s]
                w.writerow([name, s, f"{m.tdi:.6f}", f"{m.answer_rate:.6f}",
                            f"{m.finish_rate:.6f}", f"{m.mean_pickup_m:.6f}"])
    outputs.append("per_seed.csv")

    # omega sweep: trade-off between TDI and pickup distance
    levels = ([float(x) for x in args.omega_levels.split(",")]
              if args.omega_levels else cfg.get("omega_levels"))
    if levels:
        sweep_spec = next((s for s in specs if s.get("kind", s.get("name")) != "myopic"),
                          None)
        if sweep_spec is None:
            raise ConfigError("omega sweep needs a value-based policy")
        with open(out / "tradeoff.csv", "w") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["omega", "tdi_mean", "mean_pickup_m"])
            for om in levels:
                spec = dict(sweep_spec)
                spec["omega"] = om
                cells = [_compare_cell((world, spec, index_dict, calendar, s))
                         for s in seeds]
                tdis = np.mean([m.tdi for _, _, m in cells])
                pick = np.mean([m.mean_pickup_m for _, _, m in cells])
                w.writerow([f"{om:g}", f"{tdis:.6f}", f"{pick:.6f}"])
        outputs.append("tradeoff.csv")

    inputs = [s[k] for s in specs for k in ("checkpoint", "table") if k in s]
    write_manifest(out, "compare", args.argv, args.config, inputs, outputs)
    print((out / "comparison.csv").read_text(), end="")
    return 0


def cmd_transfer(args) -> int:
    cfg = _load_json(args.config)
    _check_keys(cfg, {"index_config", "source_checkpoint", "mode", "data",
                      "training", "target_index_config"}, "config")
    index_config = _index_config(cfg["index_config"])
    mode = cfg.get("mode", "finetune")
    out = _out_dir(args)
    if mode == "finetune":
        src_params, _, meta = net.load_checkpoint_file(cfg["source_checkpoint"])
        target_index = _index_config(cfg.get("target_index_config",
                                             cfg["index_config"]))
        params = xfer.init_finetune(src_params, target_index, seed=args.seed)
        report, store, inputs = _ingest_inputs(cfg, target_index)
        tcfg = training.TrainConfig(seed=args.seed, **_train_config(cfg, args))
        result = training.train(tcfg, report.transitions, target_index,
                                store=store, init=params)
        net.save_checkpoint_file(str(out / "checkpoint.cvn"), result.params,
                                 target_index, metadata={"transfer": "finetune"})
        with open(out / "training_log.csv", "w") as fh:
            fh.write(result.log_csv(include_wall=False))
        write_manifest(out, "transfer", args.argv, args.config,
                       inputs + [cfg["source_checkpoint"]],
                       ["checkpoint.cvn", "training_log.csv"])
        print(f"finetune steps={result.steps}")
        return 0
    raise ConfigError(f"unknown transfer mode {mode!r}")


def cmd_export_plots(args) -> int:
    cfg = _load_json(args.config)
    _check_keys(cfg, {"index_config", "checkpoints", "training_logs",
                      "comparison", "corruption_sigma", "n_locations"},
                "config")
    index_config = _index_config(cfg["index_config"])
    ckpts = cfg.get("checkpoints", {})   # label (e.g. gamma) -> path
    logs = cfg.get("training_logs", {})
    if not ckpts and not logs and not cfg.get("comparison"):
        raise ConfigError("no run artifacts to export")
    out = _out_dir(args)
    outputs = []
    rng = substream(args.seed, "plot-locations")
    n_loc = int(cfg.get("n_locations", 200))

    if ckpts:
        # value profile per checkpoint over the day
        with open(out / "value_profile.csv", "w") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["label", "bucket_start_s", "mean_v"])
            for label, path in sorted(ckpts.items()):
                params, _, _ = net.load_checkpoint_file(path, index_config)
                span = 20000.0
                locs = [GeoPoint(x, y) for x, y in rng.uniform(0, span, (n_loc, 2))]
                prof = training.value_profile(params, index_config, locs)
                for b, v in zip(prof.bucket_seconds, prof.mean):
                    w.writerow([label, b, f"{v:.6f}"])
        outputs.append("value_profile.csv")

        # value histogram + corruption histograms for the first checkpoint
        label, path = sorted(ckpts.items())[0]
        params, _, _ = net.load_checkpoint_file(path, index_config)
        span = 20000.0
        locs = [GeoPoint(x, y) for x, y in rng.uniform(0, span, (n_loc, 2))]
        times = rng.integers(0, 86400, n_loc)
        sigma = float(cfg.get("corruption_sigma", 0.01))
        probe = training.weight_corruption_probe(params, index_config, locs,
                                                 times, sigma, seed=args.seed)
        with open(out / "corruption_histogram.csv", "w") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["v_before", "v_after"])
            for a, b in zip(probe.before, probe.after):
                w.writerow([f"{a:.6f}", f"{b:.6f}"])
        outputs.append("corruption_histogram.csv")

    for name, path in sorted(logs.items()):
        # pass-through of training logs: lipschitz bound and mean V vs step
        rows = Path(path).read_text().splitlines()
        with open(out / f"training_curve_{name}.csv", "w") as fh:
            fh.write("\n".join(rows) + "\n")
        outputs.append(f"training_curve_{name}.csv")

    if cfg.get("comparison"):
        rows = Path(cfg["comparison"]).read_text()
        (out / "tdi_bars.csv").write_text(rows)
        outputs.append("tdi_bars.csv")

    write_manifest(out, "export-plots", args.argv, args.config,
                   list(ckpts.values()) + list(logs.values()), outputs)
    print(f"wrote {len(outputs)} plot bundles to {out}")
    return 0


def cmd_rerun(args) -> int:
    with open(args.manifest) as fh:
        manifest = json.load(fh)
    argv = list(manifest["argv"])
    # redirect output if requested
    if args.out:
        try:
            i = argv.index("--out")
            argv[i + 1] = args.out
        except ValueError:
            argv += ["--out", args.out]
    return main(argv)


# ---------------------------------------------------------------------------
# argument parsing

def _add_common(p, seed_default=0):
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=seed_default)
    p.add_argument("--out", required=True)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="cvdispatch",
        description="Spatiotemporal value dispatching: train and evaluate "
                    "order-matching policies on a synthetic city.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate and summarize a dataset")
    _add_common(p)

    p = sub.add_parser("train", help="train a value network")
    _add_common(p)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=None)

    p = sub.add_parser("distill", help="fit the context-free head")
    _add_common(p)

    p = sub.add_parser("simulate", help="run one episode")
    _add_common(p)

    p = sub.add_parser("compare", help="policy x seed comparison grid")
    _add_common(p)
    p.add_argument("--policies", default=None,
                   help="comma-separated subset of configured policies")
    p.add_argument("--omega-levels", default=None,
                   help="comma-separated omega sweep levels")

    p = sub.add_parser("transfer", help="warm-start from a source checkpoint")
    _add_common(p)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=None)

    p = sub.add_parser("export-plots", help="CSV bundles for figures")
    _add_common(p)

    p = sub.add_parser("rerun", help="replay a manifest")
    p.add_argument("manifest")
    p.add_argument("--out", default=None)
    return ap


COMMANDS = {
    "ingest": cmd_ingest,
    "train": cmd_train,
    "distill": cmd_distill,
    "simulate": cmd_simulate,
    "compare": cmd_compare,
    "transfer": cmd_transfer,
    "export-plots": cmd_export_plots,
    "rerun": cmd_rerun,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    ap = build_parser()
    args = ap.parse_args(argv)
    args.argv = argv
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except DivergenceError as e:
        print(f"divergence abort: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
