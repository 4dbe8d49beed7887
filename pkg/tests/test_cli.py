"""Command-line surface: config handling, subcommands, exit codes."""

import os

import numpy as np
import pytest

from vtseg.cli import main
from vtseg.config import RunConfig, VALID_KEYS, apply_setting, config_to_text, load_config
from vtseg.errors import ConfigError


def run_cli(argv, capsys):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


# ---------------------------------------------------------------------------
# config plumbing
# ---------------------------------------------------------------------------


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("fusion_kind = merge\nlr = 0.001\nbatch_size = 4\n# comment\n")
    cfg = load_config(str(path), overrides=["seed=9", "deterministic=true"])
    assert cfg.model.fusion_kind == "merge"
    assert cfg.lr == 0.001
    assert cfg.batch_size == 4
    assert cfg.seed == 9
    assert cfg.deterministic is True


def test_config_unknown_key_lists_valid():
    with pytest.raises(ConfigError, match="unknown config key"):
        load_config(None, overrides=["bogus_key=1"])


def test_config_invalid_fusion_kind():
    with pytest.raises(ConfigError, match="fusion_kind"):
        load_config(None, overrides=["fusion_kind=bogus"])


def test_config_to_text_round_trip(tmp_path):
    cfg = load_config(None, overrides=["fusion_kind=co_moe", "lr=0.004",
                                       "synth_noise=0.1"])
    text = config_to_text(cfg)
    path = tmp_path / "round.cfg"
    path.write_text(text)
    back = load_config(str(path))
    assert back.model.fusion_kind == "co_moe"
    assert back.lr == 0.004
    assert back.synth.synth_noise == 0.1


def test_env_var_forces_deterministic(monkeypatch):
    monkeypatch.setenv("VTS_DETERMINISTIC", "1")
    cfg = load_config(None, overrides=["deterministic=false"])
    assert cfg.deterministic is True


def test_every_valid_key_is_settable():
    cfg = RunConfig()
    samples = {"fusion_kind": "merge", "cma_form": "lognce",
               "cssl_negatives": "easiest", "bs_matching": "loose"}
    for key in VALID_KEYS:
        value = samples.get(key, "1")
        apply_setting(cfg, key, value)


def test_profile_selection():
    desk = load_config(None, profile="desk")
    assert desk.model.hidden_dim == 32 and desk.model.heads == 4
    full = load_config(None, profile="full")
    assert full.model.hidden_dim == 768 and full.model.heads == 8


# ---------------------------------------------------------------------------
# CLI behavior
# ---------------------------------------------------------------------------


def small_args(tmp_path):
    return ["--set", "synth_train_videos=4", "--set", "synth_valid_videos=2",
            "--set", "synth_test_videos=2", "--set", "synth_unlabeled_videos=3",
            "--set", "synth_clips_min=12", "--set", "synth_clips_max=16",
            "--set", "synth_topics_min=2", "--set", "synth_topics_max=3",
            "--set", "synth_min_topic_clips=3",
            "--set", "synth_latent_dim=4", "--set", "synth_visual_dim=8",
            "--set", "synth_text_dim=8", "--set", "visual_dim=8",
            "--set", "text_dim=8", "--set", "hidden_dim=16", "--set", "heads=2",
            "--set", "ffn_intermediate=16", "--set", "expert_intermediate=16",
            "--set", "rel_window=8"]


def test_cli_unknown_set_key_fails(capsys):
    code, _, err = run_cli(["synth-data", "--out", "/tmp/x",
                            "--set", "fusion_kind=bogus"], capsys)
    assert code != 0
    assert err.startswith("error:")
    assert "\n" == err[err.index("\n"):]  # single line


def test_cli_unknown_command_usage_error(capsys):
    code = main(["frobnicate"])
    assert code != 0


def test_cli_full_synthetic_pipeline(tmp_path, capsys):
    data = str(tmp_path / "data")
    extra = small_args(tmp_path)

    code, out, err = run_cli(["synth-data", "--out", data] + extra, capsys)
    assert code == 0, err
    for split in ("train", "valid", "test", "unlabeled"):
        assert os.path.isdir(os.path.join(data, split))

    pseudo = str(tmp_path / "pseudo")
    code, out, err = run_cli(["make-pretrain-data",
                              "--unlabeled", os.path.join(data, "unlabeled"),
                              "--labeled", os.path.join(data, "train"),
                              "--out", pseudo] + extra, capsys)
    assert code == 0, err
    assert os.path.exists(os.path.join(pseudo, "provenance.tsv"))

    ck_pre = str(tmp_path / "pre.vtsm")
    code, out, err = run_cli(["pretrain"] + extra + [
        "--set", f"pretrain_dir={pseudo}", "--set", f"checkpoint_out={ck_pre}",
        "--set", "pretrain_epochs=1", "--set", "deterministic=true",
        "--set", "lr=0.003"], capsys)
    assert code == 0, err
    assert os.path.exists(ck_pre)

    ck_fine = str(tmp_path / "fine.vtsm")
    code, out, err = run_cli(["finetune"] + extra + [
        "--set", f"train_dir={os.path.join(data, 'train')}",
        "--set", f"valid_dir={os.path.join(data, 'valid')}",
        "--set", f"checkpoint_in={ck_pre}", "--set", f"checkpoint_out={ck_fine}",
        "--set", "finetune_epochs=1", "--set", "deterministic=true",
        "--set", "lr=0.003"], capsys)
    assert code == 0, err

    preds = str(tmp_path / "preds.tsv")
    code, out, err = run_cli(["segment", "--corpus", os.path.join(data, "test"),
                              "--checkpoint", ck_fine, "--out", preds] + extra,
                             capsys)
    assert code == 0, err
    assert os.path.getsize(preds) > 0

    report = str(tmp_path / "report.txt")
    code, out, err = run_cli(["evaluate", "--predictions", preds,
                              "--corpus", os.path.join(data, "test"),
                              "--out", report] + extra, capsys)
    assert code == 0, err
    text = open(report).read()
    assert "Avg" in text and "corpus" in text


def test_cli_evaluate_identical_gives_100(tmp_path, capsys):
    from vtseg.data import PredictionRecord, read_corpus, write_predictions

    data = str(tmp_path / "data")
    code, _, err = run_cli(["synth-data", "--out", data] + small_args(tmp_path),
                           capsys)
    assert code == 0, err
    corpus = read_corpus(os.path.join(data, "test"))
    records = []
    for seq in corpus:
        for i in range(seq.n):
            hit = bool(seq.labels[i]) and i < seq.n - 1
            records.append(PredictionRecord(seq.video_id, i,
                                            1.0 if hit else 0.0, hit))
    preds = str(tmp_path / "perfect.tsv")
    write_predictions(preds, records)
    code, out, err = run_cli(["evaluate", "--predictions", preds,
                              "--corpus", os.path.join(data, "test")], capsys)
    assert code == 0, err
    corpus_line = [l for l in out.splitlines() if l.startswith("corpus")][0]
    assert corpus_line.split("\t")[1:] == ["100.00"] * 5


def test_cli_gradcheck_passes_for_co_moe(capsys):
    code, out, err = run_cli(
        ["gradcheck", "--set", "fusion_kind=co_moe", "--set", "hidden_dim=16",
         "--set", "heads=2", "--set", "ffn_intermediate=8",
         "--set", "expert_intermediate=8", "--set", "rel_window=4",
         "--set", "visual_dim=6", "--set", "text_dim=6",
         "--instances", "2"], capsys)
    assert code == 0, err
    assert "max_relative_error=" in out


def test_cli_consistency(tmp_path, capsys):
    from vtseg.data import write_features
    from vtseg.synth import generate_synthetic_corpus
    from vtseg.config import SynthSpec

    spec = SynthSpec(synth_train_videos=2, synth_valid_videos=0,
                     synth_test_videos=0, synth_unlabeled_videos=0,
                     synth_clips_min=12, synth_clips_max=12,
                     synth_topics_min=2, synth_topics_max=3,
                     synth_min_topic_clips=3, synth_latent_dim=4,
                     synth_visual_dim=8, synth_text_dim=8)
    corpus = generate_synthetic_corpus(spec, seed=1)["train"]
    for d in ("ann_a", "ann_b"):
        for seq in corpus:
            write_features(str(tmp_path / d), seq)
    code, out, err = run_cli(["consistency", "--annotations",
                              str(tmp_path / "ann_a"), str(tmp_path / "ann_b")],
                             capsys)
    assert code == 0, err
    assert "mean\t1.0000" in out
