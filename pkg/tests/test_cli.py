import json
from pathlib import Path

import pytest

from occreid.cli import load_run_config, main
from occreid.trainer import ConfigError

SMALL = {
    "num_identities": 8,
    "images_per_id_train": 4,
    "images_per_id_gallery": 2,
    "images_per_id_query": 2,
    "num_cameras": 2,
    "train": {"P": 4, "K": 2, "epochs_pretrain": 1, "epochs_joint": 1,
              "eval_every": 0, "seed": 3, "strict_deterministic": True},
}


def write_config(path: Path, extra: dict | None = None) -> str:
    doc = json.loads(json.dumps(SMALL))
    if extra:
        doc.update(extra)
    path.write_text(json.dumps(doc))
    return str(path)


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    """One gen-data + train run shared by the read-only CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root / "cfg.json",
                       {"train_dir": str(root / "data" / "train"),
                        "query_dir": str(root / "data" / "query"),
                        "gallery_dir": str(root / "data" / "gallery")})
    assert main(["gen-data", "--config", cfg, "--out", str(root / "data")]) == 0
    assert main(["train", "--config", cfg, "--out", str(root / "run")]) == 0
    return root, cfg


class TestRunConfig:
    def test_defaults_validate(self):
        cfg = load_run_config(None)
        assert cfg.num_identities == 50
        assert cfg.train.P == 8

    def test_unknown_key_rejected(self, tmp_path):
        path = write_config(tmp_path / "c.json", {"typo_key": 1})
        with pytest.raises(ConfigError, match="typo_key"):
            load_run_config(path)

    def test_unknown_train_key_rejected(self, tmp_path):
        doc = json.loads(json.dumps(SMALL))
        doc["train"]["nope"] = 1
        path = tmp_path / "c.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(ConfigError, match="nope"):
            load_run_config(str(path))

    def test_flat_train_keys_accepted(self, tmp_path):
        path = write_config(tmp_path / "c.json", {"lr": 0.001, "parts": 2})
        cfg = load_run_config(path)
        assert cfg.train.lr == 0.001
        assert cfg.train.parts == 2

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError, match="JSON"):
            load_run_config(str(path))


class TestGenData:
    def test_counts_and_determinism(self, tmp_path):
        cfg = write_config(tmp_path / "c.json")
        for sub in ("a", "b"):
            assert main(["gen-data", "--config", cfg,
                         "--out", str(tmp_path / sub)]) == 0
        for split, per_id in (("train", 4), ("query", 2), ("gallery", 2)):
            files_a = sorted((tmp_path / "a" / split).iterdir())
            assert len(files_a) == 8 * per_id
            files_b = sorted((tmp_path / "b" / split).iterdir())
            for fa, fb in zip(files_a, files_b):
                assert fa.read_bytes() == fb.read_bytes()

    def test_query_occluded_in_unsup_mode(self, tmp_path):
        cfg = write_config(tmp_path / "c.json")
        main(["gen-data", "--config", cfg, "--out", str(tmp_path / "d")])
        names = [p.name for p in (tmp_path / "d" / "query").iterdir()]
        assert all("_o1_" in n for n in names)
        names = [p.name for p in (tmp_path / "d" / "train").iterdir()]
        assert all("_o0_" in n for n in names)

    def test_bad_config_exit_code(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", {"num_identities": 1})
        assert main(["gen-data", "--config", cfg, "--out", str(tmp_path / "x")]) == 2

    def test_unknown_key_exit_code(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", {"zzz": 5})
        assert main(["gen-data", "--config", cfg, "--out", str(tmp_path / "x")]) == 2


class TestTrainCommand:
    def test_artifacts(self, trained_run):
        root, _ = trained_run
        assert (root / "run" / "log.jsonl").exists()
        assert (root / "run" / "ckpt_1.bin").exists()
        assert (root / "run" / "config.json").exists()

    def test_missing_data_exit_code(self, tmp_path):
        cfg = write_config(tmp_path / "c.json",
                           {"train_dir": str(tmp_path / "missing")})
        assert main(["train", "--config", cfg, "--out", str(tmp_path / "r")]) == 4

    def test_resume(self, trained_run, tmp_path):
        root, cfg = trained_run
        rc = main(["train", "--config", cfg, "--out", str(tmp_path / "r2"),
                   "--epochs-joint", "2",
                   "--resume", str(root / "run" / "ckpt_1.bin")])
        assert rc == 0
        assert (tmp_path / "r2" / "ckpt_2.bin").exists()

    def test_bad_resume_exit_code(self, trained_run, tmp_path):
        _, cfg = trained_run
        rc = main(["train", "--config", cfg, "--out", str(tmp_path / "r3"),
                   "--resume", str(tmp_path / "nope.bin")])
        assert rc == 4

    def test_zero_joint_epochs(self, trained_run, tmp_path):
        _, cfg = trained_run
        rc = main(["train", "--config", cfg, "--out", str(tmp_path / "r4"),
                   "--epochs-joint", "0"])
        assert rc == 0
        assert (tmp_path / "r4" / "ckpt_0.bin").exists()


class TestEvalCommand:
    def test_stdout_matches_report(self, trained_run, tmp_path, capsys):
        root, cfg = trained_run
        rc = main(["eval", "--config", cfg, str(root / "run" / "ckpt_1.bin"),
                   "--query", str(root / "data" / "query"),
                   "--gallery", str(root / "data" / "gallery"),
                   "--out", str(tmp_path / "ev")])
        assert rc == 0
        line = capsys.readouterr().out.strip().splitlines()[-1]
        assert line.startswith("R1=")
        printed_map = float(line.split("mAP=")[1])
        with open(tmp_path / "ev" / "report.json") as f:
            saved = json.load(f)
        assert printed_map == pytest.approx(saved["map"], abs=1e-4)
        assert float(line.split()[0][3:]) == pytest.approx(saved["cmc"][0], abs=1e-4)

    def test_cosine_metric(self, trained_run, tmp_path):
        root, cfg = trained_run
        rc = main(["eval", "--config", cfg, str(root / "run" / "ckpt_1.bin"),
                   "--query", str(root / "data" / "query"),
                   "--gallery", str(root / "data" / "gallery"),
                   "--metric", "cosine", "--out", str(tmp_path / "ev")])
        assert rc == 0
        with open(tmp_path / "ev" / "report.json") as f:
            assert json.load(f)["metric"] == "cosine"

    def test_gallery_as_query_self_match(self, trained_run, tmp_path, capsys):
        """Querying the gallery against itself with self-matches allowed and
        no camera exclusion must give perfect rank-1."""
        root, cfg = trained_run
        rc = main(["eval", "--config", cfg, str(root / "run" / "ckpt_1.bin"),
                   "--query", str(root / "data" / "gallery"),
                   "--gallery", str(root / "data" / "gallery"),
                   "--no-cam-exclusion", "--allow-self",
                   "--out", str(tmp_path / "ev")])
        assert rc == 0
        line = capsys.readouterr().out.strip().splitlines()[-1]
        assert float(line.split()[0][3:]) == pytest.approx(1.0)

    def test_self_matches_excluded_by_default(self, trained_run, tmp_path):
        root, cfg = trained_run
        rc = main(["eval", "--config", cfg, str(root / "run" / "ckpt_1.bin"),
                   "--query", str(root / "data" / "gallery"),
                   "--gallery", str(root / "data" / "gallery"),
                   "--no-cam-exclusion", "--out", str(tmp_path / "ev")])
        assert rc == 0
        with open(tmp_path / "ev" / "report.json") as f:
            saved = json.load(f)
        # one rank per query, and no self-match: every ranked query found its
        # first correct gallery entry somewhere past the (removed) self column
        assert len(saved["per_query_rank"]) == 16
        assert all(r == -1 or r >= 1 for r in saved["per_query_rank"])

    def test_missing_checkpoint_exit_code(self, trained_run, tmp_path):
        root, cfg = trained_run
        rc = main(["eval", "--config", cfg, str(tmp_path / "nope.bin"),
                   "--query", str(root / "data" / "query"),
                   "--gallery", str(root / "data" / "gallery")])
        assert rc == 4


class TestAnalyzeDcd:
    def test_summary_schema(self, trained_run, tmp_path, capsys):
        root, cfg = trained_run
        rc = main(["analyze-dcd", "--config", cfg,
                   str(root / "run" / "ckpt_1.bin"),
                   "--holistic", str(root / "data" / "gallery"),
                   "--out", str(tmp_path / "an")])
        assert rc == 0
        with open(tmp_path / "an" / "dcd_summary.json") as f:
            summary = json.load(f)
        keys = {"overlap_holistic", "overlap_occluded_raw",
                "overlap_occluded_attended", "mmd_wc", "mmd_bc"}
        assert set(summary) == keys
        for k in ("overlap_holistic", "overlap_occluded_raw",
                  "overlap_occluded_attended"):
            assert 0.0 <= summary[k] <= 1.0
        assert summary["mmd_wc"] >= 0.0
        assert (tmp_path / "an" / "dcd.csv").exists()
        assert (tmp_path / "an" / "dcd_hist.png").exists()
        printed = json.loads(capsys.readouterr().out)
        assert printed == summary

    def test_with_explicit_occluded_split(self, trained_run, tmp_path):
        root, cfg = trained_run
        rc = main(["analyze-dcd", "--config", cfg,
                   str(root / "run" / "ckpt_1.bin"),
                   "--holistic", str(root / "data" / "gallery"),
                   "--occluded", str(root / "data" / "query"),
                   "--out", str(tmp_path / "an2")])
        assert rc == 0
        assert (tmp_path / "an2" / "dcd_summary.json").exists()


class TestRunsDirEnv:
    def test_env_var_used_when_out_missing(self, trained_run, tmp_path,
                                           monkeypatch, capsys):
        root, cfg = trained_run
        monkeypatch.setenv("HG_RUNS_DIR", str(tmp_path / "envruns"))
        rc = main(["eval", "--config", cfg, str(root / "run" / "ckpt_1.bin"),
                   "--query", str(root / "data" / "query"),
                   "--gallery", str(root / "data" / "gallery")])
        assert rc == 0
        assert (tmp_path / "envruns" / "run" / "report.json").exists()
