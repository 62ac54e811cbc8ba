import json
import shutil

import pytest

from cotmeta.cli import main, stage_hash
from cotmeta.config import ExperimentConfig, config_from_dict, load_config, toy_config
from cotmeta.errors import ConfigError

TINY = {
    "seed": 3,
    "world": {"corpus_scenes": 300},
    "lm": {"epochs": 1},
    "meta": {"iterations": 3, "batch": 4, "checkpoint_every": 2},
    "test": {"episodes": 3},
}


def test_default_hyperparameters():
    cfg = ExperimentConfig()
    assert list(cfg.adaptor.prompt_lengths) == [1, 1, 4]
    assert cfg.meta.alpha == 0.01
    assert cfg.meta.beta == 0.001
    assert cfg.meta.batch == 32
    assert cfg.meta.inner_steps == 1
    assert cfg.meta.init == "xavier_uniform"
    assert cfg.meta.outer_optimizer == "adamw"
    assert (cfg.meta.n_way, cfg.meta.k_shot, cfg.meta.query_size) == (2, 1, 1)
    assert cfg.adaptor.sub_prompt and cfg.adaptor.obj_prompt and cfg.meta.subspace
    assert not cfg.meta.second_order


def test_config_round_trip_and_hash():
    cfg = toy_config(2)
    back = config_from_dict(json.loads(cfg.dumps()))
    assert back == cfg and back.hash() == cfg.hash()
    assert cfg.with_seed(3).hash() != cfg.hash()
    assert load_config(None) == ExperimentConfig()


@pytest.mark.parametrize("raw,field", [
    ({"meta": {"alpha": "x"}}, "meta.alpha"),
    ({"meta": {"batch": 1.5}}, "meta.batch"),
    ({"adaptor": {"prompt_lengths": [1, 1]}}, "adaptor.prompt_lengths"),
    ({"lm": {"depth": 3}}, "lm.depth"),
    ({"nonsense": {}}, "nonsense"),
    ({"meta": {"outer_optimizer": "rmsprop"}}, "meta.outer_optimizer"),
])
def test_field_level_config_errors(raw, field):
    with pytest.raises(ConfigError, match=field.replace(".", r"\.")):
        config_from_dict(raw)


def test_stage_hash_tracks_only_upstream_sections():
    cfg = ExperimentConfig()
    changed = config_from_dict({"meta": {"beta": 0.002}})
    assert stage_hash(cfg, "world") == stage_hash(changed, "world")
    assert stage_hash(cfg, "lm") == stage_hash(changed, "lm")
    assert stage_hash(cfg, "meta") != stage_hash(changed, "meta")


# command line ----------------------------------------------------------------------

def write_cfg(path, overrides=None):
    d = json.loads(json.dumps(TINY))
    for section, vals in (overrides or {}).items():
        d.setdefault(section, {}).update(vals)
    path.write_text(json.dumps(d))
    return str(path)


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    cfg = write_cfg(base / "cfg.json")
    out = base / "nested" / "run"
    for cmd in ("gen-world", "pretrain-lm", "meta-train"):
        assert main([cmd, "--config", cfg, "--out", str(out)]) == 0
    return base, cfg, out


def test_output_directory_created_and_manifest_complete(run_dir):
    _, _, out = run_dir
    manifest = json.loads((out / "manifest.json").read_text())
    for name in ("grammar", "split", "vision_encoder", "train", "test", "lm", "meta_state", "meta_log"):
        assert name in manifest["artifacts"]
    assert (out / "checkpoints" / "meta_state_000002.json").exists()
    assert manifest["config_hash"] == config_from_dict(TINY).hash()


def test_gen_world_rerun_identical_bytes(run_dir, tmp_path):
    _, cfg, out = run_dir
    assert main(["gen-world", "--config", cfg, "--out", str(tmp_path / "again")]) == 0
    for name in ("grammar.json", "split.json", "vision_encoder.json", "train.jsonl", "test.jsonl"):
        assert (tmp_path / "again" / name).read_bytes() == (out / name).read_bytes()


def test_malformed_config_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"meta": {"alpha": "x"}}))
    assert main(["gen-world", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "meta.alpha" in capsys.readouterr().err
    bad.write_text("{not json")
    assert main(["gen-world", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2


def test_missing_upstream_exit_code(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "cfg.json")
    assert main(["meta-train", "--config", cfg, "--out", str(tmp_path / "empty")]) == 3
    assert "missing" in capsys.readouterr().err


def test_tampered_artifact_is_stale(run_dir, tmp_path):
    _, cfg, out = run_dir
    copy = tmp_path / "copy"
    shutil.copytree(out, copy)
    with open(copy / "lm.json", "a") as fh:
        fh.write(" ")
    assert main(["meta-test", "--config", cfg, "--out", str(copy)]) == 3


def test_changed_upstream_config_is_stale(run_dir, tmp_path):
    base, _, out = run_dir
    cfg = write_cfg(tmp_path / "other.json", {"lm": {"epochs": 2}})
    assert main(["meta-train", "--config", cfg, "--out", str(out)]) == 3


def test_split_guard(run_dir, capsys):
    _, cfg, out = run_dir
    assert main(["meta-test", "--config", cfg, "--out", str(out), "--split", "train"]) == 2
    assert "seen during training" in capsys.readouterr().err


def test_meta_test_reports_carry_config_hash(run_dir):
    _, cfg, out = run_dir
    assert main(["meta-test", "--config", cfg, "--out", str(out)]) == 0
    assert main(["meta-test", "--config", cfg, "--out", str(out), "--cross-domain"]) == 0
    h = config_from_dict(TINY).hash()
    for stem in ("meta_test", "meta_test_cross"):
        rep = json.loads((out / f"{stem}.json").read_text())["reports"][0]
        assert rep["config_hash"] == h and rep["n_pairs"] == 3 * 2
        assert (out / f"{stem}.csv").read_text().splitlines()[1].split(",")[1] == h


def test_baseline_and_score(run_dir):
    _, cfg, out = run_dir
    assert main(["baseline", "--config", cfg, "--out", str(out)]) == 0
    rows = (out / "baseline_report.csv").read_text().splitlines()
    assert len(rows) == 2 and rows[1].startswith("non-episodic,")
    assert main(["meta-test", "--config", cfg, "--out", str(out)]) == 0
    assert main(["score", "--config", cfg, "--out", str(out), "--input", str(out / "meta_test_captions.jsonl")]) == 0
    scored = json.loads((out / "score.json").read_text())["reports"][0]
    tested = json.loads((out / "meta_test.json").read_text())["reports"][0]
    assert scored["bleu"] == tested["bleu"] and scored["cider"] == tested["cider"]
    assert scored["mrr"] == tested["mrr"]


def test_score_requires_input(run_dir):
    _, cfg, out = run_dir
    assert main(["score", "--config", cfg, "--out", str(out)]) == 2


def test_ablate_emits_five_rows(run_dir):
    _, cfg, out = run_dir
    assert main(["ablate", "--config", cfg, "--out", str(out)]) == 0
    lines = (out / "ablation.csv").read_text().splitlines()
    assert len(lines) == 6
    labels = [line.split(",")[0] for line in lines[1:]]
    assert labels[0] == "subspace- sub- obj-" and labels[-1] == "subspace+ sub+ obj+"


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_failure_exit_code(run_dir, tmp_path, capsys):
    base, _, out = run_dir
    copy = tmp_path / "copy"
    shutil.copytree(out, copy)
    cfg = write_cfg(tmp_path / "explode.json", {"meta": {"beta": 1e300}})
    assert main(["meta-train", "--config", cfg, "--out", str(copy)]) == 4
    assert "numeric failure" in capsys.readouterr().err
