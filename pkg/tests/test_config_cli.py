import json
from pathlib import Path

import pytest
import yaml

from transferlab.cli import main
from transferlab.config import load_config, validate_config
from transferlab.errors import ConfigValidationError

MINIMAL = {
    "data": {"root": "/tmp/does-not-matter"},
    "models": [
        {"id": "grid", "kind": "multitrack", "depth": 3, "width": 4},
        {"id": "r18", "kind": "resnet18"},
    ],
    "output_dir": "out",
}


class TestValidateConfig:
    def test_minimal_config_gets_recipe_defaults(self):
        cfg = validate_config(MINIMAL)
        assert cfg.train["epochs"] == 30
        assert cfg.train["learning_rate"] == 0.01
        assert cfg.train["momentum"] == 0.9
        assert cfg.train["weight_decay"] == 1e-4
        assert cfg.train["batch_size"] == 128
        attacks = cfg.attack_configs()
        assert [a.name for a in attacks] == ["fgsm", "bim"]
        assert attacks[0].epsilon == 0.1 and attacks[0].step_size == 0.1
        assert attacks[1].steps == 10 and attacks[1].step_size == pytest.approx(0.01)
        assert cfg.eval["proxies"] == ["grid", "r18"]
        assert cfg.eval["targets"] == ["grid", "r18"]

    def test_all_problems_reported_at_once(self):
        bad = {
            "models": [{"id": "m", "kind": "vgg"}],
            "train": {"learning_rate": -1, "bogus_field": 2},
            "attacks": [{"name": "cw"}],
            "eval": {"targets": ["ghost"]},
            "surprise": {},
        }
        with pytest.raises(ConfigValidationError) as err:
            validate_config(bad)
        text = str(err.value)
        for fragment in ("data.root", "models[0].kind", "train", "attacks[0].name",
                         "eval.targets", "surprise"):
            assert fragment in text, f"missing {fragment} in:\n{text}"
        assert len(err.value.problems) >= 6

    def test_duplicate_model_ids_rejected(self):
        raw = dict(MINIMAL, models=[
            {"id": "m", "kind": "resnet18"}, {"id": "m", "kind": "resnet18"},
        ])
        with pytest.raises(ConfigValidationError, match="duplicate id"):
            validate_config(raw)

    def test_digest_stable_under_key_reordering(self):
        reordered = {
            "output_dir": "out",
            "models": MINIMAL["models"],
            "data": {"root": "/tmp/does-not-matter"},
        }
        assert validate_config(MINIMAL).digest() == validate_config(reordered).digest()

    def test_digest_changes_with_content(self):
        other = dict(MINIMAL, train={"epochs": 31})
        assert validate_config(MINIMAL).digest() != validate_config(other).digest()

    def test_env_var_supplies_data_root(self, monkeypatch):
        monkeypatch.setenv("TRANSFERLAB_DATA_ROOT", "/env/data")
        raw = {k: v for k, v in MINIMAL.items() if k != "data"}
        cfg = validate_config(raw)
        assert cfg.data["root"] == "/env/data"

    def test_sweep_section_normalized(self):
        raw = dict(MINIMAL, sweep={"sizes": [[2, 2]], "epochs": [1, 2], "seeds": [0, 1]})
        cfg = validate_config(raw)
        assert cfg.sweep["sizes"] == [[2, 2]]
        assert cfg.sweep["baselines"] == []

    def test_load_config_missing_file(self, tmp_path):
        with pytest.raises(ConfigValidationError, match="not found"):
            load_config(tmp_path / "nope.yaml")


@pytest.fixture
def synth_config(tmp_path, synth_root):
    cfg = {
        "data": {"root": str(synth_root),
                 "synthetic": {"train_size": 600, "test_size": 200, "seed": 7}},
        "models": [
            {"id": "grid", "kind": "multitrack", "depth": 1, "width": 2,
             "stem_channels": 8, "seed": 0},
            {"id": "target", "kind": "multitrack", "depth": 1, "width": 1,
             "stem_channels": 8, "seed": 1},
        ],
        "train": {"epochs": 1, "batch_size": 100},
        "attacks": [{"name": "fgsm", "epsilon": 0.1}],
        "eval": {"eval_size": 60, "batch_size": 60},
        "output_dir": str(tmp_path / "out"),
    }
    path = tmp_path / "exp.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


class TestCli:
    def test_data_synth_and_inspect(self, tmp_path, capsys):
        root = tmp_path / "d"
        assert main(["data", "synth", "--root", str(root),
                     "--train-size", "100", "--test-size", "50"]) == 0
        assert main(["data", "inspect", "--root", str(root), "--relaxed"]) == 0
        out = capsys.readouterr().out
        assert "train: 100 examples" in out

    def test_inspect_official_sizes_fail_is_runtime_error(self, tmp_path, capsys):
        root = tmp_path / "d"
        main(["data", "synth", "--root", str(root),
              "--train-size", "100", "--test-size", "50"])
        assert main(["data", "inspect", "--root", str(root)]) == 2

    def test_bad_config_exits_one_with_all_problems(self, tmp_path, capsys):
        path = tmp_path / "bad.yaml"
        path.write_text(yaml.safe_dump({"models": [{"id": "m", "kind": "vgg"}]}))
        assert main(["eval", "--config", str(path)]) == 1
        err = capsys.readouterr().err
        assert "data.root" in err and "models[0].kind" in err

    def test_bad_usage_exits_one(self):
        with pytest.raises(SystemExit) as exc:
            main(["report", "--kind", "multiplication_table"])
        assert exc.value.code == 1

    def test_eval_then_cached_rerun_and_report(self, synth_config, tmp_path, capsys):
        assert main(["eval", "--config", str(synth_config)]) == 0
        out_dir = Path(yaml.safe_load(synth_config.read_text())["output_dir"])
        records = list(out_dir.glob("runs/*/records/asr.jsonl"))
        assert len(records) == 1
        payload = records[0].read_bytes()

        # identical config re-run performs no work and rewrites nothing
        assert main(["eval", "--config", str(synth_config)]) == 0
        assert records[0].read_bytes() == payload
        assert "cached" in capsys.readouterr().out

        # a report over the records (fixed_epoch matching the tiny run)
        assert main([
            "report", "--kind", "single_step_transfer",
            "--records", str(records[0]),
            "--out", str(tmp_path / "reports"), "--fixed-epoch", "1",
        ]) in (0, 3)
        assert (tmp_path / "reports" / "single_step_transfer.csv").exists()

    def test_profile_verb(self, synth_config, tmp_path, capsys):
        out = tmp_path / "cost.jsonl"
        assert main(["profile", "--config", str(synth_config),
                     "--batch-size", "2", "--repetitions", "5",
                     "--out", str(out)]) == 0
        lines = out.read_text().strip().splitlines()
        assert len(lines) == 2
        assert json.loads(lines[0])["record_kind"] == "cost"

    def test_attack_verb_persists_adversarial_batches(self, synth_config, tmp_path,
                                                      capsys):
        assert main(["attack", "--config", str(synth_config)]) == 0
        out_dir = Path(yaml.safe_load(synth_config.read_text())["output_dir"])
        saved = sorted(out_dir.glob("adversarial/*/*.npz"))
        # 2 proxies x 1 attack x (3 + 1) selectors
        assert len(saved) == 4
        from transferlab.attacks import AdversarialBatch

        adv = AdversarialBatch.load(saved[0])
        assert adv.linf_distances.max() <= 0.1 + 1e-6

    def test_sweep_verb(self, tmp_path, synth_root):
        cfg = {
            "data": {"root": str(synth_root),
                     "synthetic": {"train_size": 600, "test_size": 200, "seed": 7}},
            "models": [{"id": "t", "kind": "multitrack", "depth": 1, "width": 1,
                        "stem_channels": 8, "seed": 3}],
            "train": {"epochs": 1, "batch_size": 100},
            "attacks": [{"name": "fgsm", "epsilon": 0.1}],
            "eval": {"eval_size": 40, "batch_size": 40, "targets": ["t"]},
            "sweep": {"sizes": [[1, 1]], "epochs": [1], "seeds": [0],
                      "stem_channels": 8},
            "output_dir": str(tmp_path / "out"),
        }
        path = tmp_path / "sweep.yaml"
        path.write_text(yaml.safe_dump(cfg))
        assert main(["sweep", "--config", str(path)]) == 0
        assert list((tmp_path / "out").glob("runs/*/records/best.jsonl"))

    def test_no_train_flag_fails_on_cache_miss(self, synth_config, tmp_path, capsys):
        # fresh output dir: nothing cached, training disabled -> runtime error
        raw = yaml.safe_load(synth_config.read_text())
        raw["output_dir"] = str(tmp_path / "fresh")
        fresh = tmp_path / "fresh.yaml"
        fresh.write_text(yaml.safe_dump(raw))
        assert main(["eval", "--config", str(fresh), "--no-train"]) == 2
        assert "training is disabled" in capsys.readouterr().err
