import csv
import json

from flash_pdssm.cli import main
from flash_pdssm.config import read_records
from flash_pdssm.fsa import bundled_fsa, format_fsa


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def test_quick_parity_run_and_determinism(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["train", "--config", "parity-quick", "--out", str(a)]) == 0
    assert main(["train", "--config", "parity-quick", "--out", str(b), "--workers", "3"]) == 0
    rows = read_csv(a / "metrics.csv")
    assert len(rows) == 500
    assert list(rows[0]) == ["step", "train_loss", "iid_acc", "ood_acc", "temp", "lr"]
    assert rows[0]["iid_acc"] == "" and rows[-1]["iid_acc"] != ""
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    assert (a / "checkpoint.json").read_bytes() == (b / "checkpoint.json").read_bytes()
    ra, rb = read_records(str(a / "results.csv")), read_records(str(b / "results.csv"))
    assert [r.metric for r in ra] == ["final_iid_acc", "final_ood_acc", "final_train_loss"]
    assert [(r.run_id, r.config_hash, r.value) for r in ra] == [(r.run_id, r.config_hash, r.value) for r in rb]
    cfg = json.loads((a / "config.json").read_text())
    assert cfg["train"]["steps"] == 500 and ra[0].config_hash == cfg["config_hash"]
    assert ra[0].run_id == f"train-{cfg['config_hash'][:12]}-s0"


def test_results_are_appended(tmp_path):
    args = ["train", "--task", "parity", "--steps", "2", "--out", str(tmp_path), "--config", "parity-quick"]
    assert main(args) == 0
    assert main(args + ["--seed", "1"]) == 0
    recs = read_records(str(tmp_path / "results.csv"))
    assert len(recs) == 6
    assert {r.run_id.rsplit("-", 1)[1] for r in recs} == {"s0", "s1"}


def test_invalid_config_exits_nonzero_with_path(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"stepz": 3}}))
    assert main(["train", "--config", str(bad), "--out", str(tmp_path)]) == 1
    assert "train.stepz" in capsys.readouterr().err
    bad.write_text(json.dumps({"network": {"heads": 5}}))
    assert main(["train", "--config", str(bad), "--out", str(tmp_path)]) == 1


def test_usage_errors_exit_two(capsys):
    assert main([]) == 2
    assert main(["train", "--precision", "f16"]) == 2
    assert main(["frobnicate"]) == 2
    assert main(["eval"]) == 2


def test_compile_fsa_bundled_and_eval(tmp_path, capsys):
    out = tmp_path / "c"
    assert main(["compile-fsa", "cycle5", "--out", str(out), "--random-trials", "200"]) == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["mismatches"] == 0 and rep["exhaustive_max_len"] == 8
    assert rep["exhaustive_strings"] == sum(3**k for k in range(0, 9))  # includes the empty string
    assert "wall_time_s" in rep
    capsys.readouterr()
    ev = tmp_path / "e"
    assert main(["eval", "--checkpoint", str(out / "checkpoint.json"), "--task", "cycle_nav", "--samples", "600",
                 "--out", str(ev)]) == 0
    acc = json.loads((ev / "eval.json").read_text())["accuracy"]
    assert acc == {"40-64": 1.0, "65-128": 1.0, "129-256": 1.0, "overall": 1.0}


def test_compile_fsa_rejects_corrupt_file(tmp_path, capsys):
    text = format_fsa(bundled_fsa("parity")).splitlines()
    bad_line = next(i for i, l in enumerate(text) if l.startswith("on 1:"))
    text[bad_line] = "on 1: 1 2"
    p = tmp_path / "bad.fsa"
    p.write_text("\n".join(text) + "\n")
    assert main(["compile-fsa", str(p), "--out", str(tmp_path)]) == 1
    assert f"line {bad_line + 1}" in capsys.readouterr().err
    assert main(["compile-fsa", "no_such_automaton", "--out", str(tmp_path)]) == 1


def test_eval_random_checkpoint_is_chance(tmp_path):
    assert main(["train", "--config", "parity-quick", "--steps", "0", "--out", str(tmp_path / "t")]) == 0
    rows = read_csv(tmp_path / "t" / "metrics.csv")
    assert len(rows) == 1 and rows[0]["train_loss"] == ""
    assert main(["eval", "--checkpoint", str(tmp_path / "t" / "checkpoint.json"), "--task", "parity",
                 "--samples", "4096", "--out", str(tmp_path / "e")]) == 0
    acc = json.loads((tmp_path / "e" / "eval.json").read_text())["accuracy"]
    assert abs(acc["overall"] - 0.5) <= 0.05


def test_eval_rejects_mismatched_task_and_old_format(tmp_path):
    assert main(["compile-fsa", "parity", "--out", str(tmp_path), "--random-trials", "10"]) == 0
    ck = tmp_path / "checkpoint.json"
    assert main(["eval", "--checkpoint", str(ck), "--task", "cycle_nav", "--out", str(tmp_path)]) == 1
    d = json.loads(ck.read_text())
    d["format"] = "flash-pdssm-checkpoint/99"
    ck.write_text(json.dumps(d))
    assert main(["eval", "--checkpoint", str(ck), "--task", "parity", "--out", str(tmp_path)]) == 1


def test_check_grad_passes_and_fault_injection_names_group(tmp_path, capsys):
    assert main(["check-grad", "--out", str(tmp_path / "ok")]) == 0
    rep = json.loads((tmp_path / "ok" / "check_grad.json").read_text())
    assert rep["ok"] and rep["trend_ok"]
    capsys.readouterr()
    assert main(["check-grad", "--out", str(tmp_path / "bad"), "--break-grad", "w_gate"]) == 1
    out = capsys.readouterr().out
    assert "failing groups: layers.0.w_gate, layers.1.w_gate" in out
    assert main(["check-grad", "--out", str(tmp_path), "--break-grad", "bogus"]) == 2
    assert main(["check-grad", "--out", str(tmp_path), "--precision", "f32"]) == 1


def test_bench_scan_small_grid(tmp_path):
    cfg = {"grid": {"L": [256], "N": [16], "B": [1], "tau": [64], "workers": [1]},
           "memory": {"L": 2048, "N": [64, 128], "K": 4},
           "speedup": {"L": 512, "N": 16, "B": 2, "tau": 64, "workers": 2}, "repeats": 1}
    p = tmp_path / "bench.json"
    p.write_text(json.dumps(cfg))
    assert main(["bench-scan", "--config", str(p), "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "bench.csv")
    assert len(rows) == 1 and float(rows[0]["max_abs_err"]) <= 1e-5
    assert list(rows[0]) == ["L", "N", "B", "tau", "workers", "wall_ms", "max_abs_err", "peak_aux_bytes"]
    mem = json.loads((tmp_path / "memory.json").read_text())
    assert 1.8 <= mem["hard_ratio"] <= 2.2 and 3.5 <= mem["soft_ratio"] <= 4.5
    assert "cpu_count" in json.loads((tmp_path / "speedup.json").read_text())


def test_bench_scan_rejects_empty_grid(tmp_path):
    p = tmp_path / "g.json"
    p.write_text(json.dumps({"grid": {"L": []}}))
    assert main(["bench-scan", "--config", str(p), "--out", str(tmp_path)]) == 1


def test_json_reports_are_pretty_and_sorted(tmp_path):
    assert main(["compile-fsa", "parity", "--out", str(tmp_path), "--random-trials", "5"]) == 0
    text = (tmp_path / "report.json").read_text()
    d = json.loads(text)
    assert text == json.dumps(d, indent=2, sort_keys=True) + "\n"
