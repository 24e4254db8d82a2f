"""End-to-end runs on the synthetic dataset: the whole pipeline wired
together, at toy scale. Real-data reproductions live in the acceptance
module; these tests prove the machinery (training, attacking, evaluation,
records, caching, sweeps) against floors that weak toy models clear."""

import json
from pathlib import Path

import numpy as np
import pytest

from transferlab.attacks import AttackConfig
from transferlab.config import validate_config
from transferlab.evaluation import (
    attack_success_rate,
    craft_adversarial_split,
    stratified_eval_subset,
)
from transferlab.models import HeadSelector, MultiTrackConfig, build_multitrack
from transferlab.records import read_records
from transferlab.runner import run_experiment, run_sweep
from transferlab.training import TrainConfig, train


@pytest.fixture(scope="module")
def trained_proxy(synth_splits_module):
    train_split, test_split = synth_splits_module
    model = build_multitrack(MultiTrackConfig(2, 2, stem_channels=8), seed=0)
    model, log = train(model, train_split, test_split,
                       TrainConfig(epochs=8, batch_size=64, seed=0))
    return model, log, test_split


@pytest.fixture(scope="module")
def synth_splits_module(tmp_path_factory):
    from transferlab.data import ensure_synthetic_dataset, load_cifar10

    root = tmp_path_factory.mktemp("synth_pipe")
    ensure_synthetic_dataset(root, 600, 200, seed=7)
    return load_cifar10(root, require_official_sizes=False)


class TestWhiteBoxEffectiveness:
    def test_trained_proxy_falls_to_its_own_attacks(self, trained_proxy):
        model, log, test_split = trained_proxy
        assert log.records[-1].acc_ensemble >= 0.9  # the set is learnable
        eval_split = stratified_eval_subset(test_split, 100, seed=0)
        frags = {}
        for name, cfg in (("fgsm", AttackConfig.single_step(0.1)),
                          ("bim", AttackConfig.multi_step(0.1, steps=10))):
            adv = craft_adversarial_split(model, HeadSelector.ensemble(), eval_split,
                                          cfg, batch_size=100)
            frags[name] = attack_success_rate(model, adv, eval_split.labels)
        assert frags["bim"]["asr_all"] >= 0.8
        assert frags["fgsm"]["asr_all"] >= 0.5
        # the multi-step attack dominates the single-step one white-box
        assert frags["bim"]["asr_all"] > frags["fgsm"]["asr_all"]

    def test_every_head_is_attackable(self, trained_proxy):
        model, _, test_split = trained_proxy
        eval_split = stratified_eval_subset(test_split, 60, seed=1)
        for sel in (HeadSelector.head(1), HeadSelector.head(2)):
            adv = craft_adversarial_split(model, sel, eval_split,
                                          AttackConfig.multi_step(0.1, steps=10),
                                          batch_size=60)
            frag = attack_success_rate(model, adv, eval_split.labels)
            assert frag["asr_all"] >= 0.5, str(sel)


def _experiment_config(root, out_dir, epochs=2):
    return validate_config({
        "data": {"root": str(root),
                 "synthetic": {"train_size": 600, "test_size": 200, "seed": 7}},
        "models": [
            {"id": "grid_1x2", "kind": "multitrack", "depth": 1, "width": 2,
             "stem_channels": 8, "seed": 0},
            {"id": "plain", "kind": "multitrack", "depth": 1, "width": 1,
             "stem_channels": 8, "seed": 1},
        ],
        "train": {"epochs": epochs, "batch_size": 100},
        "attacks": [{"name": "fgsm", "epsilon": 0.1},
                    {"name": "bim", "epsilon": 0.1, "steps": 3,
                     "step_size": 0.04}],
        "eval": {"eval_size": 60, "batch_size": 60},
        "profile": {"batch_size": 4, "repetitions": 5},
        "output_dir": str(out_dir),
    })


class TestRunExperiment:
    def test_full_run_persists_complete_records(self, tmp_path):
        config = _experiment_config(tmp_path / "data", tmp_path / "out")
        result = run_experiment(config)
        assert result.status == "complete"
        assert result.missing == 0
        # proxies x selectors x attacks x targets:
        # grid_1x2 has 3 selectors, plain has 1; 2 attacks; 2 targets
        assert result.cells == (3 + 1) * 2 * 2

        records = list(read_records(result.records_dir / "asr.jsonl"))
        asr = [r for r in records if r["record_kind"] == "asr"]
        assert len(asr) == result.cells
        # provenance: every record is traceable to the run and its seed
        for rec in asr:
            assert rec["meta"]["family"] == "multitrack"
            assert "seed" in rec["meta"] and "epoch" in rec["meta"]
            assert rec["provenance"]["config_digest"] == config.digest()
            assert "written" in rec["provenance"]

        accuracy = list(read_records(result.records_dir / "accuracy.jsonl"))
        assert {r["epoch"] for r in accuracy} == {1, 2}
        cost = list(read_records(result.records_dir / "cost.jsonl"))
        assert {r["architecture"] for r in cost} == {"grid_1x2", "plain"}

        marker = json.loads((result.run_dir / "run.json").read_text())
        assert marker["status"] == "complete"
        assert marker["config"]["train"]["epochs"] == 2

    def test_rerun_is_cached_and_byte_identical(self, tmp_path):
        config = _experiment_config(tmp_path / "data", tmp_path / "out")
        first = run_experiment(config)
        payload = (first.records_dir / "asr.jsonl").read_bytes()
        stamp = (first.records_dir / "asr.jsonl").stat().st_mtime_ns
        second = run_experiment(config)
        assert second.status == "cached"
        assert (first.records_dir / "asr.jsonl").read_bytes() == payload
        assert (first.records_dir / "asr.jsonl").stat().st_mtime_ns == stamp

    def test_worker_budget_produces_identical_results(self, tmp_path):
        config_a = _experiment_config(tmp_path / "data", tmp_path / "out_a")
        config_b = validate_config(
            dict(_experiment_config(tmp_path / "data", tmp_path / "out_b").to_dict(),
                 workers=2)
        )
        serial = run_experiment(config_a)
        threaded = run_experiment(config_b)
        assert threaded.status == "complete"
        a = {(r["proxy"], r["selector"], r["attack"], r["target"]): r["asr_all"]
             for r in read_records(serial.records_dir / "asr.jsonl")
             if r["record_kind"] == "asr"}
        b = {(r["proxy"], r["selector"], r["attack"], r["target"]): r["asr_all"]
             for r in read_records(threaded.records_dir / "asr.jsonl")
             if r["record_kind"] == "asr"}
        assert a == b

    def test_desk_scale_flag_narrows_data(self, tmp_path):
        config = _experiment_config(tmp_path / "data", tmp_path / "out")
        result = run_experiment(config, desk_scale=True)
        assert result.status == "complete"
        records = [r for r in read_records(result.records_dir / "asr.jsonl")
                   if r["record_kind"] == "asr"]
        # eval subset still the configured 60 (less than the desk cap)
        assert all(r["sample_count"] == 60 for r in records)


class TestRunExperimentFailurePaths:
    def test_zero_epochs_is_an_evaluation_only_run(self, tmp_path):
        raw = _experiment_config(tmp_path / "data", tmp_path / "out").to_dict()
        raw["train"]["epochs"] = 0
        config = validate_config(raw)
        result = run_experiment(config)
        assert result.status == "complete"
        records = [r for r in read_records(result.records_dir / "asr.jsonl")
                   if r["record_kind"] == "asr"]
        # untrained seeded models still produce a full evaluation grid
        assert len(records) == result.cells > 0
        assert all(r["meta"]["epoch"] == 0 for r in records)

    def test_midrun_failure_marks_incomplete_and_keeps_cache(self, tmp_path, monkeypatch):
        config = _experiment_config(tmp_path / "data", tmp_path / "out")

        import transferlab.runner as runner_mod

        def boom(*args, **kwargs):
            raise RuntimeError("evaluation machinery exploded")

        monkeypatch.setattr(runner_mod, "transfer_matrix", boom)
        with pytest.raises(RuntimeError, match="exploded"):
            run_experiment(config)
        marker_path = next((Path(config.output_dir) / "runs").glob("*/run.json"))
        assert json.loads(marker_path.read_text())["status"] == "incomplete"
        # trained checkpoints survive the failure for the next attempt
        ckpts = list((Path(config.output_dir) / "cache").rglob("epoch_*.ckpt"))
        assert ckpts
        stamps = {p: p.stat().st_mtime_ns for p in ckpts}
        monkeypatch.undo()
        retry = run_experiment(config)
        assert retry.status == "complete"
        assert {p: p.stat().st_mtime_ns for p in ckpts} == stamps  # no retraining


class TestRunSweep:
    def test_tiny_sweep_with_best_selection(self, tmp_path):
        config = validate_config({
            "data": {"root": str(tmp_path / "data"),
                     "synthetic": {"train_size": 600, "test_size": 200, "seed": 7}},
            "models": [
                {"id": "target_a", "kind": "multitrack", "depth": 1, "width": 1,
                 "stem_channels": 8, "seed": 3},
            ],
            "train": {"epochs": 2, "batch_size": 100},
            "attacks": [{"name": "fgsm", "epsilon": 0.1}],
            "eval": {"eval_size": 50, "batch_size": 50, "targets": ["target_a"]},
            "sweep": {"sizes": [[1, 1], [1, 2]], "epochs": [1, 2], "seeds": [0],
                      "stem_channels": 8},
            "output_dir": str(tmp_path / "out"),
        })
        result = run_sweep(config)
        assert result.status == "complete"
        asr = [r for r in read_records(result.records_dir / "asr.jsonl")
               if r["record_kind"] == "asr"]
        # (1x1: 1 selector + 1x2: 3 selectors) x 2 epochs x 1 target
        assert len(asr) == (1 + 3) * 2
        best = list(read_records(result.records_dir / "best.jsonl"))
        assert len(best) == 1
        choice = best[0]
        assert choice["family"] == "multitrack"
        # the winner is the argmax over the recorded means
        groups = {}
        for rec in asr:
            key = (rec["meta"]["depth"], rec["meta"]["width"],
                   rec["meta"]["epoch"], rec["selector"])
            groups.setdefault(key, []).append(rec["asr_all"])
        means = {k: float(np.mean(v)) for k, v in groups.items()}
        assert choice["mean_asr"] == pytest.approx(max(means.values()))
