"""Configuration parsing and command-line interface tests.

The CLI tests drive ``dtlcount.cli.main`` with argv lists at tiny scale and
check the files each command leaves behind plus the exit-code contract:
0 success, 1 verification failure, 2 usage/configuration error.
"""

import pytest

from dtlcount.checkpoint import load_checkpoint
from dtlcount.cli import EXIT_OK, EXIT_USAGE, EXIT_VERIFICATION, main
from dtlcount.config import SCHEMA, ExperimentConfig
from dtlcount.data import load_annotated_dataset
from dtlcount.density import estimate_count
from dtlcount.errors import ConfigError
from dtlcount.harness import read_tsv

# A deliberately small experiment so the full command chain stays fast.
SMALL_INI = """\
[source]
n_images = 8
n_test = 3

[target]
n_few = 3
n_test = 3

[synthesis]
num_images = 6
count_range = 3,8
generated_patches = 8
gan_steps = 20

[training]
base_width = 4

[transfer]
stage_epochs = 3,2,2
direct_epochs = 4
n_seeds = 1
"""


# ---------------------------------------------------------------------------
# config parsing
# ---------------------------------------------------------------------------

def test_defaults_cover_every_schema_key():
    config = ExperimentConfig.defaults()
    for section, keys in SCHEMA.items():
        assert set(getattr(config, section)) == set(keys)
    config.validate()


def test_empty_text_equals_defaults():
    assert ExperimentConfig.from_text("") == ExperimentConfig.defaults()


def test_resolved_roundtrip_is_stable():
    config = ExperimentConfig.defaults()
    text = config.to_ini_text()
    reparsed = ExperimentConfig.from_text(text)
    assert reparsed == config
    assert reparsed.to_ini_text() == text


def test_partial_file_overrides_only_named_keys():
    config = ExperimentConfig.from_text("[training]\nbase_width = 12\n")
    assert config.training["base_width"] == 12
    defaults = ExperimentConfig.defaults()
    assert config.synthesis == defaults.synthesis
    assert config.training["batch_size"] == defaults.training["batch_size"]


def test_unknown_section_rejected():
    with pytest.raises(ConfigError, match=r"unknown section \[optimizer\]"):
        ExperimentConfig.from_text("[optimizer]\nlr = 1\n", origin="bad.ini")


def test_unknown_key_rejected_with_origin():
    with pytest.raises(ConfigError, match=r"bad\.ini.*unknown key 'widht'"):
        ExperimentConfig.from_text("[training]\nwidht = 8\n", origin="bad.ini")


@pytest.mark.parametrize("text,fragment", [
    ("[source]\nchannels = banana\n", "bad value for channels"),
    ("[source]\nimage_size = 64\n", "bad value for image_size"),
    ("[synthesis]\ncount_range = 4\n", "bad value for count_range"),
    ("[synthesis]\naugment_styles = maybe\n", "bad value for augment_styles"),
    ("[transfer]\nstage_epochs = 1,2\n", "bad value for stage_epochs"),
])
def test_bad_values_rejected(text, fragment):
    with pytest.raises(ConfigError, match=fragment):
        ExperimentConfig.from_text(text)


def test_malformed_ini_rejected():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_text("not an ini at all [")


def test_duplicate_key_rejected():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_text("[training]\nbase_width = 4\nbase_width = 8\n")


@pytest.mark.parametrize("text", [
    "[transfer]\nablation = dropout\n",
    "[source]\nn_images = -1\n",
    "[target]\nn_few = 0\n",
    "[transfer]\nn_seeds = 0\n",
    "[transfer]\nseed = -3\n",
    "[source]\nchannels = 2\n",
    "[training]\ndensity_scale = 0\n",
])
def test_semantic_validation(text):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_text(text)


def test_bool_and_size_parsing():
    config = ExperimentConfig.from_text(
        "[output]\nfigures = off\n\n[source]\nimage_size = 96x128\n")
    assert config.output["figures"] is False
    assert config.source["image_size"] == (96, 128)


def test_override_returns_validated_copy():
    base = ExperimentConfig.defaults()
    changed = base.override(seed=7, out="elsewhere", ablation="no_synth")
    assert changed.transfer["seed"] == 7
    assert changed.output["out_dir"] == "elsewhere"
    assert changed.transfer["ablation"] == "no_synth"
    assert base.transfer["seed"] == 0
    assert base.output["out_dir"] != "elsewhere"
    with pytest.raises(ConfigError):
        base.override(ablation="dropout")


def test_adapters_map_fields():
    config = ExperimentConfig.from_text(SMALL_INI).override(seed=11)
    source = config.to_domain_spec("source")
    assert source.name == "toy_source"
    assert source.seed == 11
    synth = config.to_synthesis_config()
    assert synth.num_images == 6
    assert synth.count_range == (3, 8)
    assert synth.gan.steps == 20
    assert synth.seed == 11
    assert config.to_synthesis_config(seed=99).seed == 99
    model = config.to_model_config()
    assert model.base_width == 4
    assert model.input_channels == config.source["channels"]


def test_from_file_and_write_resolved(tmp_path):
    path = tmp_path / "exp.ini"
    path.write_text(SMALL_INI, encoding="utf-8")
    config = ExperimentConfig.from_file(path)
    assert config.source["n_images"] == 8
    resolved = tmp_path / "resolved.ini"
    config.write_resolved(resolved)
    assert ExperimentConfig.from_file(resolved) == config


def test_from_file_missing_is_config_error(tmp_path):
    with pytest.raises(ConfigError, match="cannot read config"):
        ExperimentConfig.from_file(tmp_path / "absent.ini")


# ---------------------------------------------------------------------------
# CLI fixtures: one tiny experiment shared across command tests
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def ini_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("config") / "small.ini"
    path.write_text(SMALL_INI, encoding="utf-8")
    return str(path)


@pytest.fixture(scope="module")
def data_dir(ini_path, tmp_path_factory):
    out = tmp_path_factory.mktemp("generated")
    assert main(["generate", "--config", ini_path, "--out", str(out)]) == EXIT_OK
    return out


@pytest.fixture(scope="module")
def transfer_dir(ini_path, tmp_path_factory):
    out = tmp_path_factory.mktemp("transfer_run")
    assert main(["transfer", "--config", ini_path, "--out", str(out)]) == EXIT_OK
    return out


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

def test_generate_outputs(data_dir):
    for label, expected in (("source", 8), ("source_test", 3),
                            ("target_few", 3), ("target_test", 3)):
        images = load_annotated_dataset(data_dir / label)
        assert len(images) == expected
        manifest = read_tsv(data_dir / label / "manifest.tsv")
        assert len(manifest) == expected
    resolved = ExperimentConfig.from_file(data_dir / "config.ini")
    assert resolved.source["n_images"] == 8


def test_generate_zero_images(ini_path, tmp_path):
    text = SMALL_INI + "\n"
    zero_ini = tmp_path / "zero.ini"
    zero_ini.write_text(text.replace("n_images = 8", "n_images = 0"),
                        encoding="utf-8")
    out = tmp_path / "zero"
    assert main(["generate", "--config", str(zero_ini),
                 "--out", str(out)]) == EXIT_OK
    assert load_annotated_dataset(out / "source") == []
    assert read_tsv(out / "source" / "manifest.tsv") == []


# ---------------------------------------------------------------------------
# pretrain
# ---------------------------------------------------------------------------

def test_pretrain_writes_checkpoint(ini_path, data_dir, tmp_path):
    out = tmp_path / "pre"
    assert main(["pretrain", "--config", ini_path,
                 "--data", str(data_dir / "source"),
                 "--out", str(out)]) == EXIT_OK
    ckpt = load_checkpoint(out / "source.ckpt")
    assert ckpt.stage == "source"
    assert len(ckpt.history) == 3  # one row per epoch of the first stage
    assert (out / "config.ini").exists()


def test_pretrain_deterministic_bytes(ini_path, tmp_path):
    paths = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["pretrain", "--config", ini_path,
                     "--out", str(out)]) == EXIT_OK
        paths.append(out / "source.ckpt")
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_pretrain_empty_data_dir_is_usage_error(ini_path, tmp_path):
    assert main(["pretrain", "--config", ini_path, "--data", str(tmp_path),
                 "--out", str(tmp_path / "out")]) == EXIT_USAGE


# ---------------------------------------------------------------------------
# synthesize
# ---------------------------------------------------------------------------

def test_synthesize_outputs(ini_path, data_dir, tmp_path, capsys):
    out = tmp_path / "synth"
    assert main(["synthesize", "--config", ini_path,
                 "--few", str(data_dir / "target_few"),
                 "--out", str(out)]) == EXIT_OK
    printed = capsys.readouterr().out
    assert "verification: max |density integral - count|" in printed
    samples = load_annotated_dataset(out)
    assert len(samples) == 6
    for sample in samples:
        assert sample.style is not None
        assert abs(estimate_count(sample.density) - sample.count) < 1e-6
    assert len(read_tsv(out / "manifest.tsv")) == 6


def test_synthesize_missing_few_dir_is_usage_error(ini_path, tmp_path):
    assert main(["synthesize", "--config", ini_path,
                 "--few", str(tmp_path / "nope"),
                 "--out", str(tmp_path / "out")]) == EXIT_USAGE


# ---------------------------------------------------------------------------
# transfer
# ---------------------------------------------------------------------------

def test_transfer_outputs(transfer_dir):
    rows = read_tsv(transfer_dir / "report.tsv")
    assert [row["stage"] for row in rows] == ["source", "surgered",
                                              "synth_ft", "real_ft"]
    assert all(float(row["mae"]) >= 0.0 for row in rows)
    assert all(row["method"] == "transfer:none" for row in rows)
    ckpt = load_checkpoint(transfer_dir / "final.ckpt")
    assert ckpt.stage == "real_ft"
    for figure in ("stage_mae.png", "loss_curves.png", "scatter.png"):
        assert (transfer_dir / figure).stat().st_size > 0
    assert (transfer_dir / "config.ini").exists()


def test_transfer_ablation_flag(ini_path, tmp_path):
    out = tmp_path / "joint"
    assert main(["transfer", "--config", ini_path, "--out", str(out),
                 "--ablation", "joint_finetune"]) == EXIT_OK
    rows = read_tsv(out / "report.tsv")
    assert [row["stage"] for row in rows] == ["source", "surgered", "joint_ft"]
    assert all(row["method"] == "transfer:joint_finetune" for row in rows)


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def test_evaluate_outputs(transfer_dir, data_dir, tmp_path, capsys):
    out = tmp_path / "eval"
    argv = ["evaluate", "--ckpt", str(transfer_dir / "final.ckpt"),
            "--data", str(data_dir / "target_test"), "--out", str(out)]
    assert main(argv) == EXIT_OK
    printed = capsys.readouterr().out
    assert "MAE:" in printed
    rows = read_tsv(out / "evaluation.tsv")
    assert len(rows) == 3
    assert (out / "scatter.png").stat().st_size > 0

    first = (out / "evaluation.tsv").read_bytes()
    assert main(argv) == EXIT_OK
    assert (out / "evaluation.tsv").read_bytes() == first


def test_evaluate_missing_checkpoint_is_usage_error(data_dir, tmp_path):
    assert main(["evaluate", "--ckpt", str(tmp_path / "absent.ckpt"),
                 "--data", str(data_dir / "target_test")]) == EXIT_USAGE


def test_evaluate_empty_dataset_is_usage_error(transfer_dir, tmp_path):
    assert main(["evaluate", "--ckpt", str(transfer_dir / "final.ckpt"),
                 "--data", str(tmp_path)]) == EXIT_USAGE


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def test_report_combines_and_sorts(transfer_dir, ini_path, tmp_path, capsys):
    other = tmp_path / "joint"
    assert main(["transfer", "--config", ini_path, "--out", str(other),
                 "--ablation", "joint_finetune"]) == EXIT_OK
    combined = tmp_path / "combined.tsv"
    assert main(["report", str(transfer_dir), str(other),
                 "--out", str(combined)]) == EXIT_OK
    rows = read_tsv(combined)
    assert [row["method"] for row in rows] == ["transfer:joint_finetune",
                                               "transfer:none"]
    assert {row["run_dir"] for row in rows} == {str(transfer_dir), str(other)}
    printed = capsys.readouterr().out
    assert "transfer:none" in printed


def test_report_missing_report_names_directory(tmp_path, capsys):
    missing = tmp_path / "empty_run"
    missing.mkdir()
    assert main(["report", str(missing)]) == EXIT_USAGE
    assert str(missing) in capsys.readouterr().err


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------

def test_bench_outputs(ini_path, tmp_path, capsys):
    out = tmp_path / "bench"
    assert main(["bench", "--config", ini_path, "--out", str(out),
                 "--seed", "5"]) == EXIT_OK
    rows = read_tsv(out / "bench_report.tsv")
    # one seed: four transfer stage rows collapse to one final row per arm
    assert [(row["method"], row["seed"]) for row in rows] == [
        ("direct", "5"), ("transfer:none", "5")]
    for arm in ("transfer", "direct"):
        assert (out / "seed_5" / arm / "final.ckpt").stat().st_size > 0
        assert read_tsv(out / "seed_5" / arm / "report.tsv")
    for figure in ("comparison.png", "stage_mae.png", "loss_curves.png",
                   "scatter.png"):
        assert (out / figure).stat().st_size > 0
    printed = capsys.readouterr().out
    assert "mean MAE by method:" in printed


# ---------------------------------------------------------------------------
# exit-code plumbing
# ---------------------------------------------------------------------------

def test_unknown_config_key_maps_to_usage_exit(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[training]\nwidht = 8\n", encoding="utf-8")
    assert main(["generate", "--config", str(bad),
                 "--out", str(tmp_path / "out")]) == EXIT_USAGE


def test_unexpected_exception_maps_to_verification_exit(monkeypatch, tmp_path):
    def boom(config, out_dir):
        raise RuntimeError("wires crossed")

    monkeypatch.setattr("dtlcount.cli.harness.cmd_generate", boom)
    assert main(["generate", "--out", str(tmp_path)]) == EXIT_VERIFICATION


def test_gradcheck_wiring(monkeypatch):
    calls = []
    monkeypatch.setattr("dtlcount.cli.harness.cmd_gradcheck",
                        lambda: calls.append(1) or 0)
    assert main(["gradcheck"]) == EXIT_OK
    assert calls == [1]
