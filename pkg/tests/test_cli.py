import collections
import json
import subprocess
import sys

import pytest

from fewshot_rlvr import cli
from fewshot_rlvr.checkpoint import load_checkpoint
from fewshot_rlvr.taskgen import load_dataset, load_samples, pool_hash, render_pool

SMALL_NET = ["--embed-dim", "16", "--num-layers", "1", "--num-heads", "2"]
FAST = ["--max-new-tokens", "6", "--no-wall-time", "--quiet"]


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    """Pool, dataset and a briefly warm-started small base shared by the tests below."""
    d = tmp_path_factory.mktemp("cli")
    assert run("gen-pool", "--size", 60, "--seed", 3, "--out", d / "pool.jsonl") == 0
    assert run("gen-pool", "--size", 30, "--seed", 4, "--prefix", "ev", "--out", d / "eval.jsonl") == 0
    assert run("sample-fewshot", "--pool", d / "pool.jsonl", "--preset", "pi8VC", "--batch", 8, "--out", d / "ds.jsonl") == 0
    assert run("pretrain-base", "--steps", 5, "--quiet", *SMALL_NET, "--out", d / "base.ckpt") == 0
    return d


class TestData:
    def test_pool_matches_library(self, work):
        assert pool_hash(load_samples(work / "pool.jsonl")) == pool_hash(render_pool(60, 3))
        meta = json.loads((work / "pool.jsonl.manifest.json").read_text())
        assert meta["pool_hash"] == pool_hash(render_pool(60, 3))
        assert meta["command"] == "gen-pool" and meta["seeds"] == {"seed": 3}

    def test_preset_counts(self, work):
        ds = load_dataset(work / "ds.jsonl")
        assert len(ds) == 8
        assert collections.Counter(s.kind for s in {s.id: s for s in ds}.values()) == {"VQA": 4, "CLS": 4}

    def test_zero_size_is_usage_error(self, tmp_path, capsys):
        assert run("gen-pool", "--size", 0, "--out", tmp_path / "p.jsonl") == cli.EXIT_USAGE
        assert not (tmp_path / "p.jsonl").exists()

    def test_refuses_overwrite(self, work):
        assert run("gen-pool", "--size", 60, "--out", work / "pool.jsonl") == cli.EXIT_USAGE
        assert pool_hash(load_samples(work / "pool.jsonl")) == pool_hash(render_pool(60, 3))

    def test_force_overwrites(self, tmp_path):
        p = tmp_path / "p.jsonl"
        assert run("gen-pool", "--size", 6, "--out", p) == 0
        assert run("gen-pool", "--size", 9, "--out", p, "--force") == 0
        assert len(load_samples(p)) == 9

    def test_unknown_preset(self, work, tmp_path):
        assert run("sample-fewshot", "--pool", work / "pool.jsonl", "--preset", "pi3X", "--out", tmp_path / "d") == 2

    def test_missing_pool(self, tmp_path):
        assert run("sample-fewshot", "--pool", tmp_path / "none", "--preset", "pi1C", "--out", tmp_path / "d") == 3

    def test_env_out_root(self, tmp_path, monkeypatch):
        monkeypatch.setenv(cli.OUT_ENV, str(tmp_path))
        assert run("gen-pool", "--size", 3, "--out", "rel/p.jsonl") == 0
        assert (tmp_path / "rel/p.jsonl").is_file()

    def test_malformed_pool_is_integrity_error(self, tmp_path):
        bad = tmp_path / "bad.jsonl"
        bad.write_text("{not json\n")
        assert run("sample-fewshot", "--pool", bad, "--preset", "pi1C", "--out", tmp_path / "d") == 4


class TestTrainEval:
    def test_train_resume_eval(self, work, tmp_path):
        out = tmp_path / "run"
        args = ("train", "--dataset", work / "ds.jsonl", "--base", work / "base.ckpt", "--checkpoint-every", 2, *FAST)
        assert run(*args, "--steps", 4, "--out", out) == 0
        assert sorted(p.name for p in out.glob("ckpt_*.ckpt")) == [f"ckpt_00000{i}.ckpt" for i in (0, 2, 4)]
        manifest = json.loads((out / "run_manifest.json").read_text())
        assert manifest["config"]["batch_size"] == 8 and manifest["config"]["total_steps"] == 4
        assert set(manifest["inputs"]) == {"dataset", "base"}

        again = tmp_path / "again"
        assert run(*args, "--steps", 2, "--out", again) == 0
        assert run(*args, "--steps", 4, "--out", again, "--resume", again / "ckpt_000002.ckpt") == 0
        assert (again / "metrics.csv").read_bytes() == (out / "metrics.csv").read_bytes()

        ev = tmp_path / "ev"
        assert run("eval", "--ckpt-dir", out, "--eval-set", work / "eval.jsonl", "--max-new-tokens", 6, "--out", ev) == 0
        best = json.loads((ev / "best.json").read_text())
        assert set(best) == {"cls_accuracy", "vqa_accuracy", "vg_precision_at_50", "format_rate", "mean_total_reward"}
        assert len(list(ev.glob("predictions_*.jsonl"))) == 3
        assert "step 4" in (ev / "sweep.txt").read_text()

    def test_existing_run_dir_refused(self, work, tmp_path):
        (tmp_path / "x").mkdir()
        (tmp_path / "x" / "metrics.csv").write_text("")
        assert run("train", "--dataset", work / "ds.jsonl", "--steps", 1, *FAST, "--out", tmp_path / "x") == 2

    def test_corrupted_resume(self, work, tmp_path):
        out = tmp_path / "run"
        args = ("train", "--dataset", work / "ds.jsonl", "--base", work / "base.ckpt", "--checkpoint-every", 1, *FAST)
        assert run(*args, "--steps", 1, "--out", out) == 0
        p = out / "ckpt_000001.ckpt"
        data = bytearray(p.read_bytes())
        data[-100] ^= 1
        p.write_bytes(bytes(data))
        assert run(*args, "--steps", 2, "--out", out, "--resume", p) == cli.EXIT_INTEGRITY

    def test_config_file_and_flag_precedence(self, work, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"batch_size": 8, "beta": 0.04, "lr": 5e-4}))
        out = tmp_path / "run"
        assert run("train", "--dataset", work / "ds.jsonl", "--config", cfg, "--lr", 1e-3, "--steps", 1, "--checkpoint-every", 1, *FAST,
                   "--base", work / "base.ckpt", "--out", out) == 0
        ck = load_checkpoint(out / "ckpt_000001.ckpt")
        assert ck.config["train"]["beta"] == 0.04 and ck.config["train"]["lr"] == 1e-3

    def test_unknown_config_key(self, work, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"batchsize": 8}))
        assert run("train", "--dataset", work / "ds.jsonl", "--config", cfg, "--out", tmp_path / "r") == 2

    def test_empty_checkpoint_dir(self, work, tmp_path):
        (tmp_path / "empty").mkdir()
        assert run("eval", "--ckpt-dir", tmp_path / "empty", "--eval-set", work / "eval.jsonl") == 3

    def test_ablate_and_plot(self, work, tmp_path):
        out = tmp_path / "abl"
        assert run("ablate-beta", "--dataset", work / "ds.jsonl", "--base", work / "base.ckpt", "--seeds", "0",
                   "--steps", 2, "--window", 2, *FAST, "--out", out) == 0
        rows = (out / "beta_summary.csv").read_text().splitlines()
        assert rows[0] == "beta,seed,final_mean_kl,final_mean_total_reward,final_mean_completion_length"
        assert [r.split(",")[0] for r in rows[1:]] == ["0.001", "0.04"]
        assert (out / "curves.svg").read_text().startswith("<svg")

        metrics = [out / "beta0.001_seed0/metrics.csv", out / "beta0.04_seed0/metrics.csv"]
        assert run("plot", "--metrics", *metrics, "--out", tmp_path / "a.svg") == 0
        assert run("plot", "--metrics", *metrics, "--out", tmp_path / "b.svg") == 0
        assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()
        assert (tmp_path / "a.csv").read_text().startswith("run,step,")


class TestEntryPoint:
    def test_help(self):
        res = subprocess.run([sys.executable, "-m", "fewshot_rlvr.cli", "--help"], capture_output=True, text=True)
        assert res.returncode == 0
        for cmd in ("gen-pool", "sample-fewshot", "train", "eval", "ablate-beta", "plot"):
            assert cmd in res.stdout

    def test_no_command(self):
        assert cli.main([]) == 2
