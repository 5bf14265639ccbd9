"""Config schema and command-line recipe tests.

The end-to-end recipe (gen-data, two training stages, evaluate, analyze)
runs once on a miniature workload; individual tests assert on its
artifacts.  Reproducibility is checked by running the recipe twice and
comparing bytes.
"""

import json
import os
from pathlib import Path

import pytest

from slp_mnmt import cli
from slp_mnmt.config import (
    ConfigError,
    DataConfig,
    EvalConfig,
    ExperimentConfig,
    PathsConfig,
    config_sha256,
    default_experiment_config,
    load_config,
    save_config,
)
from slp_mnmt.data import LanguageSpec, SamplingSchedule, shifted_table
from slp_mnmt.model import ModelConfig
from slp_mnmt.training import TrainConfig, load_checkpoint, read_checkpoint


def tiny_experiment(corpus_dir: str, seed: int = 3) -> ExperimentConfig:
    langs = (
        LanguageSpec("ha", "high", 60, shifted_table(6, 6)),
        LanguageSpec("hb", "high", 60, shifted_table(6, 0), reverse=True),
        LanguageSpec("lc", "low", 16, shifted_table(6, 3)),
    )
    return ExperimentConfig(
        paths=PathsConfig(corpus_dir=corpus_dir, output_dir="unused"),
        data=DataConfig(languages=langs, seed=seed, base_vocab_size=12,
                        source_alphabet_size=6, dev_size=8, min_len=4, max_len=8),
        model=ModelConfig(embed_dim=16, slp_hidden_dim=32, num_slp_modules=2,
                          num_encoder_layers=1, num_decoder_layers=1, num_heads=2,
                          ffn_dim=32, vocab_size=18, max_seq_len=16),
        train=TrainConfig(batch_token_budget=64, stage1_epochs=2, stage2_epochs=1,
                          baseline_epochs=3, warmup_steps=10, seed=seed),
        sampling=SamplingSchedule(warmup_epochs=2),
        eval=EvalConfig(beam_size=1),
    )


def _dir_bytes(root: Path) -> dict[str, bytes]:
    return {
        str(p.relative_to(root)): p.read_bytes()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


# --- config schema -----------------------------------------------------------


def test_config_round_trips_through_dict_and_file(tmp_path):
    cfg = tiny_experiment("c")
    assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg
    path = tmp_path / "exp.json"
    save_config(cfg, path)
    assert load_config(path) == cfg


def test_default_config_is_deterministic_and_valid(tmp_path):
    a = default_experiment_config()
    b = default_experiment_config()
    assert a == b
    assert config_sha256(a) == config_sha256(b)
    tiers = [s.tier for s in a.data.languages]
    assert tiers.count("high") == 4 and tiers.count("low") == 2
    path = tmp_path / "default.json"
    save_config(a, path)
    assert load_config(path) == a


def test_clustering_config_shape():
    from slp_mnmt.config import clustering_experiment_config

    cfg = clustering_experiment_config()
    assert cfg == clustering_experiment_config()
    cfg.validate()
    assert cfg.model.num_slp_modules == 2
    tables = {s.id: s.substitution for s in cfg.data.languages}
    assert tables["pa"] == tables["pb"]
    for a, b in (("pa", "pc"), ("pa", "pd"), ("pc", "pd")):
        assert not set(tables[a]) & set(tables[b])


def test_unknown_keys_rejected_at_every_level():
    base = tiny_experiment("c").to_dict()
    for mutate in (
        lambda d: d.update(extra=1),
        lambda d: d["model"].update(extra=1),
        lambda d: d["train"].update(extra=1),
        lambda d: d["sampling"].update(extra=1),
        lambda d: d["eval"].update(extra=1),
        lambda d: d["paths"].update(extra=1),
        lambda d: d["data"].update(extra=1),
        lambda d: d["data"]["languages"][0].update(extra=1),
    ):
        bad = json.loads(json.dumps(base))
        mutate(bad)
        with pytest.raises(ConfigError, match="unknown keys"):
            ExperimentConfig.from_dict(bad)


def test_missing_languages_rejected():
    d = tiny_experiment("c").to_dict()
    del d["data"]["languages"]
    with pytest.raises(ConfigError, match="missing keys"):
        ExperimentConfig.from_dict(d)


def test_cross_section_validation():
    cfg = tiny_experiment("c")
    import dataclasses

    wrong_vocab = dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, vocab_size=32))
    with pytest.raises(ConfigError, match="vocab_size"):
        wrong_vocab.validate()
    short = dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, max_seq_len=8))
    with pytest.raises(ConfigError, match="max_seq_len"):
        short.validate()


def test_malformed_config_file_errors(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError, match="not valid JSON"):
        load_config(p)
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "absent.json")


# --- recipe ------------------------------------------------------------------


def _run_recipe(root: Path) -> dict[str, Path]:
    """gen-data, stage 1, stage 2, baseline, evaluate, analyze suite.

    Runs with cwd at `root` and purely relative paths, so two runs in
    different roots leave byte-identical trees.
    """
    cfg = tiny_experiment("corpus")
    save_config(cfg, root / "exp.json")
    steps = [
        ["gen-data", "--config", "exp.json", "--out", "corpus"],
        ["train", "--config", "exp.json", "--stage", "1", "--out", "stage1"],
        ["train", "--config", "exp.json", "--stage", "2", "--out", "stage2",
         "--resume", "stage1/stage1-final.ckpt"],
        ["train", "--config", "exp.json", "--stage", "baseline", "--out", "baseline"],
        ["evaluate", "--ckpt", "stage2/stage2-final.ckpt", "--data", "corpus",
         "--beam", "1", "--out", "metrics"],
        ["analyze", "conflicts", "--ckpt", "stage2/stage2-final.ckpt",
         "--data", "corpus", "--out", "analysis"],
        ["analyze", "overlap", "--ckpt", "stage2/stage2-final.ckpt",
         "--data", "corpus", "--out", "analysis"],
        ["analyze", "selection", "--ckpt", "stage2/stage2-final.ckpt",
         "--data", "corpus", "--out", "analysis"],
        ["analyze", "representations", "--ckpt", "stage2/stage2-final.ckpt",
         "--data", "corpus", "--out", "analysis",
         "--layer", "slp-output", "--limit", "4"],
        ["average-ckpts", "--last", "2", "--dir", "stage1", "--out", "avg.ckpt"],
    ]
    old = os.getcwd()
    os.chdir(root)
    try:
        for argv in steps:
            code = cli.main(argv)
            assert code == 0, f"command failed: {argv}"
    finally:
        os.chdir(old)
    return {name: root / name for name in
            ("corpus", "stage1", "stage2", "baseline", "metrics", "analysis")}


@pytest.fixture(scope="module")
def recipe(tmp_path_factory):
    root = tmp_path_factory.mktemp("recipe")
    dirs = _run_recipe(root)
    return root, dirs


def test_recipe_emits_metrics_for_all_directions(recipe):
    _, dirs = recipe
    metrics = json.loads((dirs["metrics"] / "metrics.json").read_text())
    assert set(metrics["directions"]) == {"ha", "hb", "lc"}
    assert set(metrics["aggregates"]) == {"all", "high", "low"}


def test_recipe_artifacts_and_manifests_exist(recipe):
    root, dirs = recipe
    assert (dirs["stage1"] / "stage1-final.ckpt").exists()
    assert (dirs["stage1"] / "stage1-epoch001.ckpt").exists()
    assert (dirs["stage2"] / "stage2-final.ckpt").exists()
    assert (dirs["baseline"] / "baseline-final.ckpt").exists()
    for key in ("corpus", "stage1", "stage2", "baseline", "metrics", "analysis"):
        manifest = json.loads((dirs[key] / "manifest.json").read_text())
        assert manifest["tool_version"]
        assert "config_sha256" in manifest
    for name in ("conflicts.json", "overlap.json", "selection.json",
                 "representations.tsv"):
        assert (dirs["analysis"] / name).exists()
    assert (root / "avg.ckpt").exists()
    assert (root / "avg.ckpt.manifest.json").exists()


def test_recipe_checkpoints_load_and_carry_stage(recipe):
    root, dirs = recipe
    _, _, _, stage1 = load_checkpoint(dirs["stage1"] / "stage1-final.ckpt")
    _, _, _, stage2 = load_checkpoint(dirs["stage2"] / "stage2-final.ckpt")
    assert (stage1, stage2) == ("stage1", "stage2")
    avg = read_checkpoint(root / "avg.ckpt")
    assert avg.stage == "stage1"


def test_recipe_conflict_matrix_covers_all_directions(recipe):
    _, dirs = recipe
    conflicts = json.loads((dirs["analysis"] / "conflicts.json").read_text())
    assert conflicts["languages"] == ["ha", "hb", "lc"]
    assert conflicts["partition"] == "shared"
    values = conflicts["values"]
    for i in range(3):
        assert values[i][i] == pytest.approx(1.0)


def test_recipe_overlap_matrix_matches_tables(recipe):
    _, dirs = recipe
    overlap = json.loads((dirs["analysis"] / "overlap.json").read_text())
    langs = overlap["languages"]
    values = overlap["values"]
    i, j = langs.index("ha"), langs.index("lc")
    # ha maps into [6,12), lc into [3,9): 3 shared of 9 total
    assert values[i][j] == pytest.approx(1 / 3)
    assert values[i][i] == 1.0


def test_gen_data_is_deterministic(tmp_path):
    cfg = tiny_experiment(str(tmp_path / "unused"))
    cfg_path = tmp_path / "exp.json"
    save_config(cfg, cfg_path)
    for out in ("a", "b"):
        code = cli.main(["gen-data", "--config", str(cfg_path),
                         "--out", str(tmp_path / out)])
        assert code == 0
    assert _dir_bytes(tmp_path / "a") == _dir_bytes(tmp_path / "b")


def test_full_recipe_is_bit_identical(tmp_path):
    run1 = tmp_path / "run1"
    run2 = tmp_path / "run2"
    run1.mkdir()
    run2.mkdir()
    _run_recipe(run1)
    _run_recipe(run2)
    b1 = _dir_bytes(run1)
    b2 = _dir_bytes(run2)
    assert set(b1) == set(b2)
    mismatches = [k for k in b1 if b1[k] != b2[k]]
    assert mismatches == []


# --- failure modes -----------------------------------------------------------


def test_stage2_without_resume_is_refused(tmp_path, capsys):
    corpus = tmp_path / "corpus"
    cfg = tiny_experiment(str(corpus))
    cfg_path = tmp_path / "exp.json"
    save_config(cfg, cfg_path)
    assert cli.main(["gen-data", "--config", str(cfg_path), "--out", str(corpus)]) == 0
    code = cli.main(["train", "--config", str(cfg_path), "--stage", "2",
                     "--out", str(tmp_path / "out")])
    assert code != 0
    err = capsys.readouterr().err
    assert "stage-1 checkpoint" in err


def test_stage2_rejects_non_stage1_resume(tmp_path, capsys):
    corpus = tmp_path / "corpus"
    cfg = tiny_experiment(str(corpus))
    cfg_path = tmp_path / "exp.json"
    save_config(cfg, cfg_path)
    assert cli.main(["gen-data", "--config", str(cfg_path), "--out", str(corpus)]) == 0
    out = tmp_path / "baseline"
    assert cli.main(["train", "--config", str(cfg_path), "--stage", "baseline",
                     "--out", str(out)]) == 0
    code = cli.main(["train", "--config", str(cfg_path), "--stage", "2",
                     "--out", str(tmp_path / "s2"),
                     "--resume", str(out / "baseline-final.ckpt")])
    assert code != 0
    assert "expected" in capsys.readouterr().err


def test_unknown_flag_exits_nonzero(capsys):
    assert cli.main(["gen-data", "--nonsense", "x"]) != 0
    capsys.readouterr()


def test_missing_config_file_reports_to_stderr(tmp_path, capsys):
    code = cli.main(["gen-data", "--config", str(tmp_path / "nope.json"),
                     "--out", str(tmp_path / "out")])
    assert code == 1
    assert "error:" in capsys.readouterr().err


def test_train_rejects_mismatched_corpus(tmp_path, capsys):
    corpus = tmp_path / "corpus"
    cfg = tiny_experiment(str(corpus))
    save_config(cfg, tmp_path / "exp.json")
    assert cli.main(["gen-data", "--config", str(tmp_path / "exp.json"),
                     "--out", str(corpus)]) == 0
    other = tiny_experiment(str(corpus), seed=4)
    save_config(other, tmp_path / "other.json")
    code = cli.main(["train", "--config", str(tmp_path / "other.json"),
                     "--stage", "1", "--out", str(tmp_path / "out")])
    assert code != 0
    capsys.readouterr()


def test_average_ckpts_refuses_when_too_few(tmp_path, capsys):
    code = cli.main(["average-ckpts", "--last", "3", "--dir", str(tmp_path),
                     "--out", str(tmp_path / "avg.ckpt")])
    assert code == 1
    assert "only 0" in capsys.readouterr().err


def test_init_config_writes_loadable_default(tmp_path):
    out = tmp_path / "default.json"
    assert cli.main(["init-config", "--out", str(out)]) == 0
    assert load_config(out) == default_experiment_config()
