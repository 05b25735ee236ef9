import json

import pytest

from regenrec import pipeline
from regenrec.cli import main
from regenrec.config import ConfigError, PipelineConfig, apply_overrides, derive_seed, load_config, read_echo

TINY = {
    "data": {"num_users": 40},
    "miner": {"window_size": 4, "threshold": 5, "max_pattern_len": 3},
    "regenerator": {"embed_dim": 16, "encoder_layers": 1, "decoder_layers": 1, "ffn_dim": 32, "diversity_K": 2, "max_pattern_len": 4, "max_epochs": 2},
    "target": {"embed_dim": 16, "max_epochs": 2, "batch_size": 32},
    "bilevel": {"T_lower": 2},
    "compare_seeds": [0, 1],
}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


@pytest.fixture
def fig2_file(tmp_path):
    path = tmp_path / "fig2.txt"
    path.write_text("0 1 2 3 4 5\n1 1 2 3\n")
    return path


def test_mine_fig2(tmp_path, fig2_file, capsys):
    out = tmp_path / "run"
    args = ["mine", "--out", str(out), "--set", f"data.path={fig2_file}", "--set", "mine_source=full",
            "--set", "miner.window_size=3", "--set", "miner.threshold=2"]
    assert main(args) == 0
    lines = (out / "mine" / "patterns.txt").read_text().splitlines()
    assert sorted(lines) == sorted(["2 1 2", "2 1 3", "2 2 3", "2 1 2 3"])
    assert "pairs\t8" in capsys.readouterr().out
    echo = json.loads((out / "mine" / "config.json").read_text())
    assert echo["miner"]["window_size"] == 3 and "_stage_seeds" in echo


def test_missing_upstream_names_command(tmp_path, capsys):
    assert main(["regenerate", "--out", str(tmp_path / "none")]) == 1
    assert "regenrec pretrain" in capsys.readouterr().err
    assert main(["train", "--variant", "dr4sr", "--out", str(tmp_path / "none")]) == 1
    assert "regenrec regenerate" in capsys.readouterr().err
    assert main(["evaluate", "--out", str(tmp_path / "none"), "--checkpoint", str(tmp_path / "x.pt")]) == 1


def test_bad_override_exit_code(tmp_path, capsys):
    assert main(["mine", "--out", str(tmp_path), "--set", "miner.nope=1"]) == 1
    assert "unknown key" in capsys.readouterr().err
    assert main(["mine", "--out", str(tmp_path), "--config", str(tmp_path / "missing.json")]) == 1


def test_overrides_and_seeds():
    raw = apply_overrides(PipelineConfig().to_dict(), ["bilevel.T_lower=7", "gamma=0.5", "target.kind=recurrent"])
    cfg = PipelineConfig.from_dict(raw)
    assert (cfg.bilevel.T_lower, cfg.gamma, cfg.target.kind) == (7, 0.5, "recurrent")
    seeds = [derive_seed(3, s) for s in ("mine", "pretrain", "regenerate", "train")]
    assert len(set(seeds)) == 4
    assert seeds == [derive_seed(3, s) for s in ("mine", "pretrain", "regenerate", "train")]
    with pytest.raises(ConfigError):
        apply_overrides({}, ["novalue"])
    with pytest.raises(ConfigError):
        load_config(overrides=["mine_source=test"])


def run_pipeline(config, out):
    assert main(["run", "--config", str(config), "--out", str(out), "--seed", "3"]) == 0


def test_run_outputs_and_determinism(tmp_path, tiny_config):
    run_pipeline(tiny_config, tmp_path / "a")
    run_pipeline(tiny_config, tmp_path / "b")
    for rel in [
        "mine/patterns.txt",
        "pretrain/loss_curve.tsv",
        "regenerate/regenerated.txt",
        "regenerate/provenance.txt",
        "regenerate/stats.tsv",
        "train/dr4sr_plus/report.tsv",
        "train/dr4sr_plus/weights.txt",
        "train/dr4sr_plus/bilevel_log.jsonl",
        "train/dr4sr_plus/model.pt",
        "evaluate/dr4sr_plus.tsv",
    ]:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel
    for png in ["pretrain/loss_curve.png", "regenerate/length_hist.png", "train/dr4sr_plus/weights.png"]:
        assert (tmp_path / "a" / png).stat().st_size > 0
    prov = (tmp_path / "a" / "regenerate" / "provenance.txt").read_text().splitlines()
    regen = (tmp_path / "a" / "regenerate" / "regenerated.txt").read_text().splitlines()
    assert len(prov) == len(regen)
    assert all(int(line.split()[0]) == i for i, line in enumerate(prov))


def test_echo_round_trip(tmp_path, tiny_config):
    out = tmp_path / "a"
    assert main(["mine", "--config", str(tiny_config), "--out", str(out), "--seed", "5"]) == 0
    cfg = read_echo(out / "mine" / "config.json")
    assert cfg == load_config(tiny_config, seed=5, out=out)
    cfg.out = str(tmp_path / "b")
    pipeline.cmd_mine(cfg)
    assert (out / "mine" / "patterns.txt").read_bytes() == (tmp_path / "b" / "mine" / "patterns.txt").read_bytes()


def test_train_baseline_and_evaluate(tmp_path, tiny_config, capsys):
    out = tmp_path / "a"
    assert main(["train", "--variant", "baseline", "--config", str(tiny_config), "--out", str(out)]) == 0
    assert "test_ndcg@10" in capsys.readouterr().out
    ckpt = out / "train" / "baseline" / "model.pt"
    assert main(["evaluate", "--config", str(tiny_config), "--out", str(out), "--checkpoint", str(ckpt)]) == 0
    assert (out / "evaluate" / "baseline.tsv").read_text().startswith("num_users\t")
    assert (out / "evaluate" / "baseline_ranks.tsv").exists()


def test_compare_table(tmp_path, tiny_config, capsys):
    out = tmp_path / "c"
    assert main(["compare", "--config", str(tiny_config), "--out", str(out)]) == 0
    text = capsys.readouterr().out
    rows = [line.split("\t") for line in text.splitlines()[1:]]
    assert {r[0] for r in rows} == {"baseline", "dr4sr", "dr4sr_plus"}
    assert all(len(r[4].split()) == 2 for r in rows)
    assert (out / "compare" / "ndcg10.png").exists()
