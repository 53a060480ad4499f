"""Command-line interface: config handling, dispatch, exit codes, reports."""

import numpy as np
import pytest

from nsqt import cli
from nsqt.checkpoint import save_model
from nsqt.models import ModelConfig, build_model

FAST = [
    "--d_model", "16", "--d_hidden", "32", "--vocab_size", "10",
    "--len_min", "2", "--len_max", "4", "--train_pairs", "24",
    "--valid_pairs", "6", "--max_steps", "8", "--eval_every", "4",
    "--max_len", "16",
]


def run(args):
    return cli.run_command([str(a) for a in args])


def _tiny_checkpoint(tmp_path, kind="nat"):
    cfg = ModelConfig(
        d_model=16, d_hidden=32, n_layer=2, n_head=2, p_dropout=0.0,
        vocab_size=10, max_len=16,
    )
    path = tmp_path / f"{kind}.nsqt"
    save_model(build_model(kind, cfg, seed=4), path, seed=4)
    return path


# ---------------------------------------------------------------------------
# argument and config handling


def test_no_command_is_usage_error(capsys):
    assert run([]) == 1
    assert "usage" in capsys.readouterr().err


def test_unknown_command_lists_commands(capsys):
    assert run(["frobnicate"]) == 1
    err = capsys.readouterr().err
    assert "train-ce" in err and "topk-stats" in err


def test_missing_config_file_names_path(tmp_path, capsys):
    missing = tmp_path / "nope.cfg"
    assert run(["train-ce", "--config", missing]) == 1
    assert str(missing) in capsys.readouterr().err


def test_unknown_config_key_rejected(tmp_path, capsys):
    assert run(["train-ce", "--out", tmp_path, "--bogus_key", "3"]) == 1
    assert "bogus_key" in capsys.readouterr().err


def test_config_file_comments_and_override_precedence(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("# a comment\nvocab_size = 10  # inline comment\nmax_steps = 8\n")
    out = tmp_path / "run"
    code = run(
        ["train-ce", "--config", cfg, "--out", out, "--seed", "1", "--max_steps", "3"]
        + FAST[:10]
    )
    assert code == 0
    resolved = (out / "config.resolved.cfg").read_text()
    assert "max_steps = 3" in resolved  # flag beats file
    assert "vocab_size = 10" in resolved
    steps = [line.split(",")[0] for line in (out / "metrics.csv").read_text().splitlines()[1:]]
    assert max(int(s) for s in steps) == 3


def test_malformed_config_line(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("just a line without equals\n")
    assert run(["train-ce", "--config", cfg]) == 1
    assert "key=value" in capsys.readouterr().err


def test_bad_value_type_is_usage_error(tmp_path, capsys):
    assert run(["train-ce", "--out", tmp_path, "--max_steps", "soon"]) == 1
    assert "max_steps" in capsys.readouterr().err


def test_bad_thread_env_rejected(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("NSQT_THREADS", "many")
    assert run(["train-ce", "--out", tmp_path] + FAST) == 1
    assert "NSQT_THREADS" in capsys.readouterr().err


def test_resolved_config_written_before_work(tmp_path):
    out = tmp_path / "run"
    # fails at runtime (distill without a teacher checkpoint = usage error),
    # but the resolved config must already be on disk
    assert run(["distill", "--out", out] + FAST) == 1
    assert (out / "config.resolved.cfg").exists()


# ---------------------------------------------------------------------------
# command behavior


def test_train_ce_deterministic_metrics(tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert run(["train-ce", "--out", out, "--seed", "1"] + FAST) == 0
        outs.append((out / "metrics.csv").read_bytes())
    assert outs[0] == outs[1]


def test_finetune_rl_runs_and_logs(tmp_path):
    ckpt = _tiny_checkpoint(tmp_path)
    out = tmp_path / "rl"
    code = run(
        ["finetune-rl", "--out", out, "--seed", "2", "--init_checkpoint", ckpt,
         "--k", "2", "--n", "2", "--max_steps", "4"] + FAST[:14]
    )
    assert code == 0
    text = (out / "metrics.csv").read_text()
    assert "surrogate" in text and text.startswith("step,split,metric,value")


def test_finetune_rl_rejects_k_list(tmp_path, capsys):
    ckpt = _tiny_checkpoint(tmp_path)
    assert run(
        ["finetune-rl", "--out", tmp_path / "rl", "--init_checkpoint", ckpt,
         "--k", "0,5"] + FAST
    ) == 1
    assert "single k" in capsys.readouterr().err


def test_finetune_rl_on_ar_checkpoint_is_runtime_error(tmp_path, capsys):
    ckpt = _tiny_checkpoint(tmp_path, kind="ar")
    code = run(
        ["finetune-rl", "--out", tmp_path / "rl", "--init_checkpoint", ckpt,
         "--k", "2", "--n", "2", "--max_steps", "2"] + FAST[:14]
    )
    assert code == 2


def test_decode_writes_one_line_per_sentence(tmp_path):
    ckpt = _tiny_checkpoint(tmp_path)
    out = tmp_path / "dec"
    assert run(["decode", "--out", out, "--init_checkpoint", ckpt] + FAST) == 0
    lines = (out / "decodes.txt").read_text().splitlines()
    assert len(lines) == 6  # one per validation sentence


def test_evaluate_writes_reports(tmp_path):
    ckpt = _tiny_checkpoint(tmp_path)
    out = tmp_path / "ev"
    assert run(["evaluate", "--out", out, "--init_checkpoint", ckpt] + FAST) == 0
    eval_rows = dict(
        line.split(",") for line in (out / "eval.csv").read_text().splitlines()[1:]
    )
    assert {"corpus_bleu", "mean_gleu", "decoder_calls"} <= set(eval_rows)
    assert float(eval_rows["decoder_calls"]) == 1.0
    assert (out / "length_buckets.csv").exists()
    assert (out / "report_length_buckets.csv").exists()


def test_distill_writes_corpus(tmp_path):
    ckpt = _tiny_checkpoint(tmp_path, kind="ar")
    out = tmp_path / "kd"
    assert run(["distill", "--out", out, "--teacher_checkpoint", ckpt] + FAST) == 0
    src = (out / "distilled.src").read_text().splitlines()
    tgt = (out / "distilled.tgt").read_text().splitlines()
    assert len(src) == len(tgt) == 24


def test_estimator_bench_one_row_per_k(tmp_path):
    out = tmp_path / "bench"
    code = run(
        ["estimator-bench", "--out", out, "--k", "0,1,5,10",
         "--bench_reps", "50", "--bench_instances", "2", "--n", "2"]
    )
    assert code == 0
    lines = (out / "variance.csv").read_text().splitlines()
    assert [line.split(",")[0] for line in lines] == ["k", "0", "1", "5", "10"]


def test_topk_stats_means_reproducible_from_dump(tmp_path):
    ckpt = _tiny_checkpoint(tmp_path)
    out = tmp_path / "topk"
    code = run(
        ["topk-stats", "--out", out, "--init_checkpoint", ckpt,
         "--topk_k", "1,3,10"] + FAST
    )
    assert code == 0
    dump = {}
    for line in (out / "topk_values.csv").read_text().splitlines()[1:]:
        k, _, v = line.split(",")
        dump.setdefault(int(k), []).append(float(v))
    summary = (out / "topk_summary.csv").read_text().splitlines()[1:]
    means = {}
    for line in summary:
        parts = line.split(",")
        means[int(parts[0])] = float(parts[1])
        assert sum(int(h) for h in parts[2:]) == len(dump[int(parts[0])])
    for k, vals in dump.items():
        assert abs(sum(vals) / len(vals) - means[k]) <= 1e-12
    # top-10 of a 10-token vocabulary is the whole distribution
    assert means[10] == pytest.approx(1.0, abs=1e-12)
    assert means[1] <= means[3] <= means[10]


def test_topk_stats_requires_nat(tmp_path):
    ckpt = _tiny_checkpoint(tmp_path, kind="ar")
    assert run(["topk-stats", "--out", tmp_path / "t", "--init_checkpoint", ckpt] + FAST) == 1


# ---------------------------------------------------------------------------
# emit-report


def test_emit_report_missing_metrics_exits_2(tmp_path, capsys):
    out = tmp_path / "empty"
    assert run(["emit-report", "--out", out]) == 2
    assert "metrics.csv" in capsys.readouterr().err


def test_emit_report_idempotent(tmp_path):
    out = tmp_path / "run"
    assert run(["train-ce", "--out", out, "--seed", "3"] + FAST) == 0
    first = (out / "report_curve.csv").read_bytes()
    assert run(["emit-report", "--out", out]) == 0
    assert (out / "report_curve.csv").read_bytes() == first
    curve = first.decode().splitlines()
    assert curve[0] == "step,valid_gleu"
    assert len(curve) == 1 + 2  # one row per eval point (steps 4 and 8)
