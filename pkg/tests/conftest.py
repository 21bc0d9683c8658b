"""Shared fixtures: one tiny end-to-end pipeline run per test session."""

import json

import pytest

from mvforge import cli


def pipeline_config(out_dir, **overrides):
    doc = {
        "output_dir": str(out_dir),
        "population": {"num_speakers": 12, "utterances_per_speaker": 3,
                       "seed_optimization": 11, "seed_test": 22},
        "seed_voices": {"per_gender": 2, "seed": 33},
        "encoders": [
            {"arch_id": "spec-a", "epochs": 6, "lr": 0.15, "train_seed": 5},
            {"arch_id": "spec-b", "epochs": 6, "lr": 0.15, "train_seed": 6},
        ],
        "policies": [{"rho": "any", "n": 3}, {"rho": "avg", "n": 3}],
        "attack": {"waveform": {"step_size": 0.001, "epochs": 2,
                                "batch_size": 8, "norm_mode": "l2",
                                "seed": 7}},
        "coverage": {"attempts": 2, "bootstrap_reps": 4,
                     "subset_fraction": 0.75, "seed": 77},
    }
    doc.update(overrides)
    return doc


def run_stage(config_path, *argv):
    rc = cli.main(list(argv) + ["--config", str(config_path)])
    assert rc == 0, f"stage {argv} exited {rc}"


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory):
    """Full seven-stage run at toy scale; returns (config path, out dir)."""
    base = tmp_path_factory.mktemp("pipeline")
    out = base / "out"
    config_path = base / "config.json"
    config_path.write_text(json.dumps(pipeline_config(out)))
    run_stage(config_path, "gen-data")
    run_stage(config_path, "train-encoder")
    run_stage(config_path, "calibrate")
    run_stage(config_path, "attack", "--domain", "waveform",
              "--threat", "white")
    run_stage(config_path, "evaluate", "--transfer")
    run_stage(config_path, "coverage")
    run_stage(config_path, "report")
    return config_path, out
