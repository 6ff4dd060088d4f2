"""End-to-end CLI plumbing on a deliberately tiny configuration.

Quality claims live in the acceptance suite; here the subject is exit codes,
artifact wiring, manifests, and determinism of the command surface.
"""

from __future__ import annotations

import hashlib
import json

import pytest

from loco_pda import cli
from loco_pda.config import PipelineConfig, load_config

TINY_CONFIG = """\
[dataset]
classes = 4
input_dim = 8
train_per_class = 30
val_per_class = 10

[model]
feature_widths = 8,6,4
source_epochs = 10
source_batch = 32
prune_fraction = 0.25
finetune_epochs = 2

[cvae]
z_dim = 2
enc_widths = 16,8
dec_widths = 8
epochs = 4
batch = 32

[uncond]
z_dim = 2
enc_widths = 8
dec_widths = 8

[adapt]
r = 50
epochs = 2

[baseline]
epochs = 2

[scenario]
target_classes = 0,1
extra_subsets = 2,3
seeds = 0

[sweep]
budgets = 20,40
"""


@pytest.fixture()
def tiny(tmp_path):
    cfg = tmp_path / "tiny.ini"
    cfg.write_text(TINY_CONFIG, encoding="utf-8")
    out = tmp_path / "out"
    return cfg, out


def run(cfg, out, *argv) -> int:
    return cli.main([*argv, "--config", str(cfg), "--out", str(out)])


def test_full_command_chain(tiny, capsys):
    cfg, out = tiny
    chain = [
        ("synth-data",), ("train-source",), ("prune",), ("dump-activations",),
        ("train-cvae",), ("train-uncond",), ("estimate-domain",),
        ("adapt", "--labels", "estimated"), ("baseline",), ("evaluate",),
        ("sweep-budget",), ("compare-uncond",), ("memory-report",),
    ]
    for argv in chain:
        assert run(cfg, out, *argv) == 0, f"{argv[0]} failed"
    assert "wrote" in capsys.readouterr().out
    for name in [cli.DATA_TRAIN, cli.DATA_VAL, cli.TARGET_STREAM, cli.MODEL_M0,
                 cli.MODEL_MP, cli.ACTS_TRAIN, cli.CVAE_ENC, cli.CVAE_DEC,
                 cli.DOMAIN, cli.ADAPTED, cli.ADAPT_REPORT, cli.BASELINE_MODEL,
                 cli.BASELINE_REPORT, cli.EVALUATION, cli.SWEEP_CSV,
                 cli.SWEEP_JSON, cli.UNCOND_COMPARE, cli.MEMORY,
                 cli.uncond_enc_name(0), cli.uncond_dec_name(3)]:
        assert (out / name).exists(), name
    results = json.loads((out / cli.EVALUATION).read_text())
    for key in ("deployed", "pruned_no_retrain", "adapted", "baseline"):
        assert 0.0 <= results[key] <= 1.0
    assert results["target_classes"] == [0, 1]
    domain = json.loads((out / cli.DOMAIN).read_text())
    assert len(domain["probs"]) == 4
    assert abs(sum(domain["probs"]) - 1.0) < 1e-9


def test_manifest_checksums_match_artifacts(tiny):
    cfg, out = tiny
    assert run(cfg, out, "synth-data") == 0
    manifest = json.loads((out / "manifest_synth-data.json").read_text())
    assert manifest["command"] == "synth-data"
    assert manifest["seed"] == 0
    assert len(manifest["config_hash"]) == 64
    for name, digest in manifest["artifacts"].items():
        assert hashlib.sha256((out / name).read_bytes()).hexdigest() == digest


def test_synth_data_rerun_is_byte_identical(tiny, tmp_path):
    cfg, _ = tiny
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    assert run(cfg, out_a, "synth-data") == 0
    assert run(cfg, out_b, "synth-data") == 0
    for name in (cli.DATA_TRAIN, cli.DATA_VAL, cli.TARGET_STREAM):
        assert (out_a / name).read_bytes() == (out_b / name).read_bytes()


def test_missing_input_exit_code(tiny):
    cfg, out = tiny
    assert run(cfg, out, "prune") == cli.EXIT_MISSING


def test_bad_config_exit_code(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[dataset]\nclasses = one\n", encoding="utf-8")
    code = cli.main(["synth-data", "--config", str(bad), "--out", str(tmp_path / "o")])
    assert code == cli.EXIT_CONFIG


def test_format_error_exit_code(tiny):
    cfg, out = tiny
    assert run(cfg, out, "synth-data") == 0
    assert run(cfg, out, "train-source") == 0
    broken = bytearray((out / cli.MODEL_M0).read_bytes())
    broken[:4] = b"XXXX"
    (out / cli.MODEL_M0).write_bytes(bytes(broken))
    assert run(cfg, out, "prune") == cli.EXIT_FORMAT


def test_checksum_refusal_exit_code(tiny):
    """evaluate must refuse inputs whose bytes no longer match the manifest."""
    cfg, out = tiny
    for argv in [("synth-data",), ("train-source",), ("prune",)]:
        assert run(cfg, out, *argv) == 0
    data = bytearray((out / cli.DATA_VAL).read_bytes())
    data[20] ^= 0x01  # flips a payload mantissa bit; still parses fine
    (out / cli.DATA_VAL).write_bytes(bytes(data))
    assert run(cfg, out, "evaluate") == cli.EXIT_CHECKSUM


def test_numeric_divergence_exit_code(tiny, tmp_path):
    cfg, out = tiny
    hot = tmp_path / "hot.ini"
    hot.write_text(TINY_CONFIG.replace("[cvae]\nz_dim = 2",
                                       "[cvae]\nlr = 1000000.0\nz_dim = 2"),
                   encoding="utf-8")
    for argv in [("synth-data",), ("train-source",), ("prune",), ("dump-activations",)]:
        assert run(cfg, out, *argv) == 0
    import numpy as np
    with np.errstate(over="ignore", invalid="ignore"):
        assert run(hot, out, "train-cvae") == cli.EXIT_NUMERIC


def test_invalid_argument_exit_code(tiny):
    cfg, out = tiny
    for argv in [("synth-data",), ("train-source",), ("prune",)]:
        assert run(cfg, out, *argv) == 0
    # budget below one stored row (4 dims -> 20 B) is a caller error
    assert run(cfg, out, "baseline", "--budget", "5") == cli.EXIT_INVALID


def test_estimate_domain_stream_flag(tiny):
    cfg, out = tiny
    for argv in [("synth-data",), ("train-source",)]:
        assert run(cfg, out, *argv) == 0
    code = run(cfg, out, "estimate-domain", "--stream", str(out / cli.DATA_VAL))
    assert code == 0
    domain = json.loads((out / cli.DOMAIN).read_text())
    assert domain["observed"] == 40  # 4 classes x 10 val rows
    missing = run(cfg, out, "estimate-domain", "--stream", str(out / "nope.lpac"))
    assert missing == cli.EXIT_MISSING


def test_out_dir_from_environment(tiny, tmp_path, monkeypatch):
    cfg, _ = tiny
    target = tmp_path / "env_out"
    monkeypatch.setenv("LOCO_PDA_OUT", str(target))
    assert cli.main(["synth-data", "--config", str(cfg)]) == 0
    assert (target / cli.DATA_TRAIN).exists()


def test_write_default_config_round_trips(tmp_path):
    p = tmp_path / "default.ini"
    cli.write_default_config(p)
    assert load_config(p) == PipelineConfig()


def test_run_all_tiny_produces_matrix(tiny):
    cfg, out = tiny
    assert run(cfg, out, "run-all") == 0
    matrix = json.loads((out / cli.MATRIX).read_text())
    # 2 scenarios (target + one extra subset) x 4 methods x 1 seed
    assert len(matrix["cells"]) == 8
    scenario_names = {c["scenario"] for c in matrix["cells"]}
    assert scenario_names == {"classes-0-1", "classes-2-3"}
    for cell in matrix["cells"]:
        assert cell["error"] is None
    assert (out / "manifest_run-all.json").exists()
