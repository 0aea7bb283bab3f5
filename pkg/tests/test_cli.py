"""Command-line pipeline: config validation, exit codes, artifact contracts."""

import copy
import json
import os

import numpy as np
import pytest

import flowspeaker.cli as cli
import flowspeaker.corpus as C
import flowspeaker.training as T

ENCODER8 = {"embed_dim": 8, "hidden_dim": 8, "filter_dim": 16, "n_heads": 2,
            "n_fft_blocks": 1, "gru_hidden": 8, "n_style_tokens": 3,
            "style_dim": 8, "attn_dim": 8, "semantic_dim": 8}

RUN_CONFIG = {
    "corpus": {"n_full": 4, "n_medium": 2, "n_coarse": 2,
               "utterances_per_speaker": 4, "dim": 8, "seed": 11},
    "train": {"steps": 20, "batch_size": 4, "learning_rate": 1e-3, "seed": 3,
              "mode": "proposed", "flow_blocks": 2, "log_every": 10,
              "encoder": ENCODER8},
    "generate": {"n": 3, "temperature": 0.7, "seed": 0},
    "evaluate": {"n_per_prompt": 2, "temperature": 0.5, "seed": 0},
}


def _write_config(dirpath, mutate=None):
    cfg = copy.deepcopy(RUN_CONFIG)
    if mutate:
        mutate(cfg)
    path = os.path.join(str(dirpath), "run.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cfg, fh)
    return path


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Corpus plus proposed and baseline checkpoints, built once via the CLI."""
    root = tmp_path_factory.mktemp("cli")
    cfg_path = _write_config(root)
    corpus_dir = str(root / "corpus")
    assert cli.main(["gen-corpus", "--config", cfg_path,
                     "--out-dir", corpus_dir]) == 0
    ckpt = str(root / "ckpt.json")
    assert cli.main(["train", "--config", cfg_path, "--corpus-dir", corpus_dir,
                     "--out", ckpt]) == 0
    base_cfg = _write_config(root / "..", mutate=None)

    def to_baseline(cfg):
        cfg["train"]["mode"] = "baseline"
    base_cfg = os.path.join(str(root), "baseline.json")
    with open(base_cfg, "w", encoding="utf-8") as fh:
        base = copy.deepcopy(RUN_CONFIG)
        to_baseline(base)
        json.dump(base, fh)
    baseline_ckpt = str(root / "baseline.json.ckpt")
    assert cli.main(["train", "--config", base_cfg, "--corpus-dir", corpus_dir,
                     "--out", baseline_ckpt]) == 0
    return {"root": root, "config": cfg_path, "corpus_dir": corpus_dir,
            "ckpt": ckpt, "baseline_ckpt": baseline_ckpt}


class TestConfigValidation:
    def test_unknown_root_section(self, tmp_path):
        path = _write_config(tmp_path, lambda c: c.update(extra={}))
        with pytest.raises(cli.ConfigError, match="extra"):
            cli.load_run_config(path)

    def test_unknown_generate_key(self, tmp_path):
        path = _write_config(tmp_path,
                             lambda c: c["generate"].update(tempreture=1.0))
        with pytest.raises(cli.ConfigError, match="tempreture"):
            cli.load_run_config(path)

    def test_section_must_be_object(self, tmp_path):
        path = _write_config(tmp_path,
                             lambda c: c.update(evaluate=[1, 2]))
        with pytest.raises(cli.ConfigError, match="evaluate"):
            cli.load_run_config(path)

    def test_invalid_json(self, tmp_path):
        path = str(tmp_path / "bad.json")
        with open(path, "w") as fh:
            fh.write("{not json")
        with pytest.raises(cli.ConfigError, match="not valid JSON"):
            cli.load_run_config(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(cli.ConfigError, match="cannot read"):
            cli.load_run_config(str(tmp_path / "nope.json"))

    def test_missing_corpus_section(self, tmp_path):
        path = _write_config(tmp_path, lambda c: c.pop("corpus"))
        with pytest.raises(cli.ConfigError, match="corpus"):
            cli.corpus_config_from(cli.load_run_config(path))

    def test_corpus_missing_seed(self, tmp_path):
        path = _write_config(tmp_path, lambda c: c["corpus"].pop("seed"))
        with pytest.raises(cli.ConfigError, match="seed"):
            cli.corpus_config_from(cli.load_run_config(path))

    def test_corpus_unknown_key(self, tmp_path):
        path = _write_config(tmp_path,
                             lambda c: c["corpus"].update(speakers=9))
        with pytest.raises(cli.ConfigError, match="speakers"):
            cli.corpus_config_from(cli.load_run_config(path))

    def test_encoder_unknown_key(self, tmp_path):
        path = _write_config(tmp_path,
                             lambda c: c["train"]["encoder"].update(depth=3))
        with pytest.raises(cli.ConfigError, match="train.encoder"):
            cli.train_config_from(cli.load_run_config(path))

    def test_train_invalid_value(self, tmp_path):
        path = _write_config(tmp_path,
                             lambda c: c["train"].update(steps=0))
        with pytest.raises(cli.ConfigError, match="steps"):
            cli.train_config_from(cli.load_run_config(path))


class TestGenCorpus:
    def test_writes_files_and_summary(self, workspace, capsys):
        out_dir = str(workspace["root"] / "corpus2")
        rc = cli.main(["gen-corpus", "--config", workspace["config"],
                       "--out-dir", out_dir])
        captured = capsys.readouterr()
        assert rc == 0
        for name in (C.SPEAKERS_FILE, C.PROMPTS_FILE, C.TEST_PROMPTS_FILE):
            assert os.path.exists(os.path.join(out_dir, name))
        assert "8 speakers" in captured.out

    def test_rerun_byte_identical(self, workspace):
        d1 = str(workspace["root"] / "rerun1")
        d2 = str(workspace["root"] / "rerun2")
        for d in (d1, d2):
            assert cli.main(["gen-corpus", "--config", workspace["config"],
                             "--out-dir", d]) == 0
        for name in (C.SPEAKERS_FILE, C.PROMPTS_FILE, C.TEST_PROMPTS_FILE):
            with open(os.path.join(d1, name), "rb") as fh:
                b1 = fh.read()
            with open(os.path.join(d2, name), "rb") as fh:
                b2 = fh.read()
            assert b1 == b2

    def test_missing_seed_exits_2(self, tmp_path, capsys):
        path = _write_config(tmp_path, lambda c: c["corpus"].pop("seed"))
        rc = cli.main(["gen-corpus", "--config", path,
                       "--out-dir", str(tmp_path / "c")])
        captured = capsys.readouterr()
        assert rc == 2
        assert "seed" in captured.err


class TestTrain:
    def test_checkpoint_loads_back(self, workspace, capsys):
        ckpt = T.load_checkpoint(workspace["ckpt"])
        assert ckpt.step == RUN_CONFIG["train"]["steps"]
        assert ckpt.mode == "proposed"
        assert len(ckpt.loss_trace) == ckpt.step

    def test_progress_lines_printed(self, workspace, capsys):
        out = str(workspace["root"] / "ckpt_again.json")
        rc = cli.main(["train", "--config", workspace["config"],
                       "--corpus-dir", workspace["corpus_dir"], "--out", out])
        captured = capsys.readouterr()
        assert rc == 0
        assert "step 10 loss" in captured.out
        assert "step 20 loss" in captured.out
        assert "trained 20 steps (proposed)" in captured.out

    def test_baseline_checkpoint_has_no_flow(self, workspace):
        ckpt = T.load_checkpoint(workspace["baseline_ckpt"])
        assert ckpt.mode == "baseline"
        assert ckpt.params.flow is None

    def test_same_seed_byte_identical(self, workspace):
        out = str(workspace["root"] / "ckpt_rerun.json")
        rc = cli.main(["train", "--config", workspace["config"],
                       "--corpus-dir", workspace["corpus_dir"], "--out", out])
        assert rc == 0
        with open(workspace["ckpt"], "rb") as fh:
            b1 = fh.read()
        with open(out, "rb") as fh:
            b2 = fh.read()
        assert b1 == b2

    def test_divergence_exits_3(self, workspace, tmp_path, capsys):
        path = _write_config(tmp_path,
                             lambda c: c["train"].update(learning_rate=1e200,
                                                         steps=5))
        with np.errstate(all="ignore"):
            rc = cli.main(["train", "--config", path,
                           "--corpus-dir", workspace["corpus_dir"],
                           "--out", str(tmp_path / "ckpt.json")])
        captured = capsys.readouterr()
        assert rc == 3
        assert "training diverged" in captured.err


class TestGenerate:
    def test_n_rows_reproducible(self, workspace):
        out1 = str(workspace["root"] / "gen1.jsonl")
        out2 = str(workspace["root"] / "gen2.jsonl")
        argv = ["generate", "--checkpoint", workspace["ckpt"],
                "--prompt", "a calm child woman voice", "--n", "5",
                "--temperature", "1.0", "--seed", "9"]
        assert cli.main(argv + ["--out", out1]) == 0
        assert cli.main(argv + ["--out", out2]) == 0
        with open(out1, "rb") as fh:
            b1 = fh.read()
        with open(out2, "rb") as fh:
            b2 = fh.read()
        assert b1 == b2
        rows = [json.loads(line) for line in b1.decode().splitlines()]
        assert len(rows) == 5
        embs = [tuple(r["embedding"]) for r in rows]
        assert len(set(embs)) == 5
        assert rows[0]["prompt"] == "a calm child woman voice"

    def test_temperature_zero_identical_rows(self, workspace):
        out = str(workspace["root"] / "gen_t0.jsonl")
        assert cli.main(["generate", "--checkpoint", workspace["ckpt"],
                         "--prompt", "a calm child woman voice", "--n", "3",
                         "--temperature", "0.0", "--seed", "1",
                         "--out", out]) == 0
        with open(out) as fh:
            rows = [json.loads(line) for line in fh]
        assert len(rows) == 3
        assert len({tuple(r["embedding"]) for r in rows}) == 1

    def test_default_temperature_comes_from_checkpoint(self, workspace):
        # omitting --temperature samples at the temperature stored at training
        # time (0.7 here, the TrainConfig default)
        out_default = str(workspace["root"] / "gen_tdef.jsonl")
        out_explicit = str(workspace["root"] / "gen_texp.jsonl")
        argv = ["generate", "--checkpoint", workspace["ckpt"],
                "--prompt", "a calm child woman voice", "--n", "4",
                "--seed", "5"]
        assert cli.main(argv + ["--out", out_default]) == 0
        assert cli.main(argv + ["--temperature", "0.7",
                                "--out", out_explicit]) == 0
        with open(out_default, "rb") as fh:
            b_default = fh.read()
        with open(out_explicit, "rb") as fh:
            b_explicit = fh.read()
        assert b_default == b_explicit

    def test_stdout_when_no_out_flag(self, workspace, capsys):
        rc = cli.main(["generate", "--checkpoint", workspace["ckpt"],
                       "--prompt", "a calm child woman voice", "--n", "1"])
        captured = capsys.readouterr()
        assert rc == 0
        row = json.loads(captured.out.splitlines()[-1])
        assert len(row["embedding"]) == 8

    def test_unknown_token_exits_4(self, workspace, capsys):
        rc = cli.main(["generate", "--checkpoint", workspace["ckpt"],
                       "--prompt", "a sonorous xylophone voice", "--n", "1"])
        captured = capsys.readouterr()
        assert rc == 4
        assert "xylophone" in captured.err

    def test_baseline_warns_and_yields_one(self, workspace, capsys):
        out = str(workspace["root"] / "gen_base.jsonl")
        rc = cli.main(["generate", "--checkpoint", workspace["baseline_ckpt"],
                       "--prompt", "a calm child woman voice", "--n", "4",
                       "--temperature", "0.9", "--out", out])
        captured = capsys.readouterr()
        assert rc == 0
        assert "baseline" in captured.err
        with open(out) as fh:
            rows = [json.loads(line) for line in fh]
        assert len(rows) == 1


class TestEvaluate:
    def test_report_written(self, workspace, capsys):
        out = str(workspace["root"] / "report.json")
        rc = cli.main(["evaluate", "--checkpoint", workspace["ckpt"],
                       "--corpus-dir", workspace["corpus_dir"],
                       "--prompts", os.path.join(workspace["corpus_dir"],
                                                 C.TEST_PROMPTS_FILE),
                       "--n-per-prompt", "2", "--out", out])
        captured = capsys.readouterr()
        assert rc == 0
        assert "verdict:" in captured.out
        with open(out) as fh:
            report = json.load(fh)
        for key in ("syn2gt-same", "syn2gt-near", "syn2syn-same",
                    "syn2syn-near", "gen2syn-near", "gen2gen-near"):
            assert key in report
        assert report["verdict"] in ("novel", "memorized", "inconclusive")
        assert "gender" in report["attribute-accuracy"]

    def test_single_sample_prompt_groups(self, workspace, capsys):
        out = str(workspace["root"] / "report1.json")
        rc = cli.main(["evaluate", "--checkpoint", workspace["ckpt"],
                       "--corpus-dir", workspace["corpus_dir"],
                       "--prompts", os.path.join(workspace["corpus_dir"],
                                                 C.TEST_PROMPTS_FILE),
                       "--n-per-prompt", "1", "--out", out])
        captured = capsys.readouterr()
        assert rc == 0
        assert "n/a" in captured.out
        with open(out) as fh:
            assert json.load(fh)["gen2gen-near"] is None

    def test_missing_checkpoint_exits_1(self, workspace, capsys):
        rc = cli.main(["evaluate", "--checkpoint",
                       str(workspace["root"] / "nope.json"),
                       "--corpus-dir", workspace["corpus_dir"],
                       "--prompts", os.path.join(workspace["corpus_dir"],
                                                 C.TEST_PROMPTS_FILE),
                       "--out", str(workspace["root"] / "r.json")])
        captured = capsys.readouterr()
        assert rc == 1
        assert "error" in captured.err

    def test_corrupt_checkpoint_exits_1(self, workspace, tmp_path, capsys):
        bad = str(tmp_path / "bad_ckpt.json")
        with open(workspace["ckpt"]) as fh:
            blob = json.load(fh)
        blob["magic"] = "something-else"
        with open(bad, "w") as fh:
            json.dump(blob, fh)
        rc = cli.main(["generate", "--checkpoint", bad,
                       "--prompt", "a calm child woman voice"])
        captured = capsys.readouterr()
        assert rc == 1
        assert "error" in captured.err
