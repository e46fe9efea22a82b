"""``flash-pdssm`` command line: train, eval, compile-fsa, bench-scan, check-grad.

Exit codes: 0 success, 1 validation or check failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict

from . import bench
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import (
    ConfigError,
    ResultRecord,
    append_records,
    config_hash,
    git_revision,
    now_utc,
    read_config_file,
    resolve,
    write_csv,
    write_json,
)
from .fsa import BUNDLED, CompiledFSA, FsaParseError, bundled_fsa, compile_to_ssm, load_fsa, verify_emulation
from .gradcheck import check_gradients, gradcheck_instance
from .model import NetworkConfig
from .numerics import Rng
from .tasks import TASKS, get_task
from .train import METRIC_COLUMNS, TrainConfig, TrainingDiverged, evaluate_buckets, train

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _run_id(command: str, h: str, seed: int) -> str:
    return f"{command}-{h[:12]}-s{seed}"


def _records(command, cfg, metrics: dict, units: dict) -> list[ResultRecord]:
    h = config_hash(cfg)
    rid, rev, ts = _run_id(command, h, cfg["seed"]), git_revision(), now_utc()
    return [ResultRecord(rid, h, rev, k, float(v), units.get(k, ""), ts) for k, v in metrics.items()]


def _finish(command, cfg, out, metrics: dict, units: dict) -> None:
    append_records(os.path.join(out, "results.csv"), _records(command, cfg, metrics, units))


def _prepare_out(cfg) -> str:
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    write_json(os.path.join(out, "config.json"), {**cfg, "config_hash": config_hash(cfg)})
    return out


# ----------------------------------------------------------------- commands


def cmd_train(cfg: dict) -> int:
    task = get_task(cfg["task"])
    net_cfg = NetworkConfig(**cfg["network"], vocab=task.vocab, classes=task.classes, precision=cfg["precision"])
    tcfg = TrainConfig(**cfg["train"])
    out = _prepare_out(cfg)
    t0 = time.perf_counter()

    def progress(row):
        if row["iid_acc"] is not None:
            _log(f"step {row['step']}: loss {row['train_loss']:.4f} iid {row['iid_acc']:.3f} "
                 f"ood {row['ood_acc']:.3f} temp {row['temp']:.3f} ({time.perf_counter() - t0:.0f}s)")

    try:
        state, rows = train(net_cfg, tcfg, task, seed=cfg["seed"], workers=cfg["workers"], callback=progress)
    except TrainingDiverged as e:
        _log(f"error: {e}")
        return EXIT_FAIL
    write_csv(os.path.join(out, "metrics.csv"), METRIC_COLUMNS, rows)
    save_checkpoint(state.network, os.path.join(out, "checkpoint.json"))
    last = rows[-1]
    metrics = {"final_iid_acc": last["iid_acc"], "final_ood_acc": last["ood_acc"]}
    if last["train_loss"] is not None:
        metrics["final_train_loss"] = last["train_loss"]
    _finish("train", cfg, out, metrics, {"final_train_loss": "nats"})
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def cmd_eval(cfg: dict) -> int:
    if not cfg["checkpoint"]:
        raise UsageError("eval needs --checkpoint")
    model = load_checkpoint(cfg["checkpoint"])
    task = get_task(cfg["task"])
    if isinstance(model, CompiledFSA):
        if model.automaton.n_symbols != task.vocab:
            raise ConfigError(f"compiled automaton has {model.automaton.n_symbols} symbols, task {task.name} "
                              f"has {task.vocab}")
    else:
        if (model.config.vocab, model.config.classes) != (task.vocab, task.classes):
            raise ConfigError(f"checkpoint vocab/classes do not fit task {task.name}")
        model.workers = cfg["workers"]
    buckets = [tuple(int(v) for v in b) for b in cfg["buckets"]]
    for lo, hi in buckets:
        if not 1 <= lo <= hi:
            raise ConfigError(f"bad bucket {lo}-{hi}")
    acc = evaluate_buckets(model, task, buckets, cfg["samples"], Rng(cfg["seed"]))
    out = _prepare_out(cfg)
    report = {"task": task.name, "checkpoint": cfg["checkpoint"], "samples": cfg["samples"], "accuracy": acc}
    write_json(os.path.join(out, "eval.json"), report)
    _finish("eval", cfg, out, {f"acc_{k}": v for k, v in acc.items()}, {})
    print(json.dumps(acc, sort_keys=True))
    return EXIT_OK


def _load_automaton(source: str):
    if os.path.exists(source):
        return load_fsa(source)
    if source in BUNDLED:
        return bundled_fsa(source)
    raise ConfigError(f"automaton {source!r} is neither a file nor one of {', '.join(BUNDLED)}")


def cmd_compile_fsa(cfg: dict) -> int:
    try:
        a = _load_automaton(cfg["automaton"])
    except FsaParseError as e:
        _log(f"error: {cfg['automaton']}: {e}")
        return EXIT_FAIL
    compiled = compile_to_ssm(a, dtype="float32" if cfg["precision"] == "f32" else "float64")
    compiled.workers = cfg["workers"]
    report = verify_emulation(a, compiled, max_exhaustive_len=cfg["max_exhaustive_len"],
                              random_trials=cfg["random_trials"], max_random_len=cfg["max_random_len"],
                              seed=cfg["seed"])
    out = _prepare_out(cfg)
    write_json(os.path.join(out, "report.json"), report.to_dict())
    save_checkpoint(compiled, os.path.join(out, "checkpoint.json"))
    _finish("compile-fsa", cfg, out, {"mismatches": report.mismatches, "wall_time": report.wall_time_s},
            {"mismatches": "count", "wall_time": "s"})
    print(report.to_json())
    return EXIT_OK if report.ok else EXIT_FAIL


MEMORY_BANDS = {"hard_ratio": (1.8, 2.2), "soft_ratio": (3.5, 4.5)}


def cmd_bench_scan(cfg: dict) -> int:
    grid = cfg["grid"]
    if any(not grid[k] for k in ("L", "N", "B", "tau", "workers")):
        raise ConfigError("bench grid has an empty axis")
    tol = 1e-5 if cfg["precision"] == "f32" else 1e-10
    out = _prepare_out(cfg)
    rows = bench.bench_grid(grid, cfg["precision"], cfg["repeats"], cfg["seed"])
    write_csv(os.path.join(out, "bench.csv"), bench.BENCH_COLUMNS, rows)
    worst = max(r["max_abs_err"] for r in rows)

    mem = cfg["memory"]
    ms = bench.memory_scaling(mem["L"], tuple(mem["N"]), mem["K"])
    mem_report = {
        "rows": [asdict(r) for r in ms["rows"]],
        "hard_ratio": ms["hard_ratio"],
        "soft_ratio": ms["soft_ratio"],
        "bands": {k: list(v) for k, v in MEMORY_BANDS.items()},
    }
    write_json(os.path.join(out, "memory.json"), mem_report)

    sp = cfg["speedup"]
    speed = bench.speedup(sp["L"], sp["N"], sp["B"], sp["tau"], sp["workers"], cfg["precision"], cfg["repeats"],
                          cfg["seed"])
    write_json(os.path.join(out, "speedup.json"), speed)

    _finish("bench-scan", cfg, out,
            {"max_abs_err": worst, "hard_ratio": ms["hard_ratio"], "soft_ratio": ms["soft_ratio"],
             "speedup": speed["speedup"]},
            {"max_abs_err": "abs", "hard_ratio": "x", "soft_ratio": "x", "speedup": "x"})
    summary = {"rows": len(rows), "max_abs_err": worst, "tolerance": tol, "hard_ratio": ms["hard_ratio"],
               "soft_ratio": ms["soft_ratio"], "speedup": speed["speedup"], "cpu_count": speed["cpu_count"]}
    print(json.dumps(summary, sort_keys=True))
    ok = worst <= tol and all(lo <= ms[k] <= hi for k, (lo, hi) in MEMORY_BANDS.items())
    return EXIT_OK if ok else EXIT_FAIL


def cmd_check_grad(cfg: dict, break_grad: str | None = None) -> int:
    if cfg["precision"] != "f64":
        raise ConfigError("check-grad needs --precision f64")
    net, tokens, labels = gradcheck_instance(seed=cfg["seed"], depth=cfg["depth"], d_model=cfg["d_model"],
                                             heads=cfg["heads"], k=cfg["k"], length=cfg["length"],
                                             batch=cfg["batch"], mode=cfg["mode"])
    net.workers = cfg["workers"]
    try:
        report = check_gradients(net, tokens, labels, temps=tuple(cfg["temps"]), h=cfg["fd_step"],
                                 break_grad=break_grad)
    except ValueError as e:
        raise UsageError(str(e)) from None
    out = _prepare_out(cfg)
    data = {
        "ok": report.ok,
        "entries": [{**asdict(e), "passed": e.passed} for e in report.entries],
        "soft_trend": {repr(t): v for t, v in report.soft_trend.items()},
        "trend_ok": report.trend_ok,
        "break_grad": break_grad,
    }
    write_json(os.path.join(out, "check_grad.json"), data)
    _finish("check-grad", cfg, out, {"failed_entries": sum(not e.passed for e in report.entries)},
            {"failed_entries": "count"})
    for line in report.lines():
        print(line)
    failed = sorted({e.name for e in report.entries if not e.passed})
    if failed:
        print("failing groups: " + ", ".join(failed))
    return EXIT_OK if report.ok else EXIT_FAIL


# ------------------------------------------------------------------- parsing


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="flash-pdssm", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", metavar="PATH", help="JSON config file or bundled preset name")
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", type=int)
        p.add_argument("--out", metavar="DIR")
        p.add_argument("--precision", choices=("f32", "f64"))
        return p

    p = common(sub.add_parser("train", help="train a network on a state-tracking task"))
    p.add_argument("--task", choices=sorted(TASKS))
    p.add_argument("--steps", type=int, dest="train.steps")

    p = common(sub.add_parser("eval", help="bucketed accuracy of a checkpoint"))
    p.add_argument("--checkpoint", metavar="PATH")
    p.add_argument("--task", choices=sorted(TASKS))
    p.add_argument("--samples", type=int)

    p = common(sub.add_parser("compile-fsa", help="compile an automaton and verify the emulation"))
    p.add_argument("automaton", nargs="?", help=f"path to a .fsa file or one of: {', '.join(BUNDLED)}")
    p.add_argument("--max-exhaustive-len", type=int, dest="max_exhaustive_len")
    p.add_argument("--random-trials", type=int, dest="random_trials")
    p.add_argument("--max-random-len", type=int, dest="max_random_len")

    p = common(sub.add_parser("bench-scan", help="scan accuracy/throughput grid and memory scaling"))
    p.add_argument("--repeats", type=int)

    p = common(sub.add_parser("check-grad", help="finite-difference gradient report"))
    p.add_argument("--break-grad", metavar="GROUP", dest="break_grad",
                   help="debug: corrupt one parameter group's gradient")
    return ap


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "compile-fsa": cmd_compile_fsa,
    "bench-scan": cmd_bench_scan,
    "check-grad": cmd_check_grad,
}


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    flags = dict(vars(args))
    command = flags.pop("command")
    config_path = flags.pop("config")
    break_grad = flags.pop("break_grad", None)
    try:
        file_cfg = read_config_file(config_path) if config_path else None
        cfg = resolve(command, file_cfg, flags)
        if command == "check-grad":
            return cmd_check_grad(cfg, break_grad)
        return COMMANDS[command](cfg)
    except UsageError as e:
        _log(f"usage error: {e}")
        return EXIT_USAGE
    except (ConfigError, CheckpointError, FileNotFoundError) as e:
        _log(f"error: {e}")
        return EXIT_FAIL
    except ValueError as e:
        # constructor validation (NetworkConfig, TrainConfig, ...)
        _log(f"error: invalid config: {e}")
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
