import json

import pytest

from stap import config
from stap.cli import main

SMALL = """\
n = 60
T = 10
P = 3
C = 2
K = 2
epochs = 2
batch_size = 16
"""


@pytest.fixture
def small_cfg(tmp_path):
    p = tmp_path / "small.cfg"
    p.write_text(SMALL)
    return p


def test_echo_roundtrip():
    cfg = config.default()
    text = config.echo(cfg)
    assert config.echo(config.build(config.parse_text(text))) == text
    assert config.build(config.parse_text(text)) == cfg


def test_shared_dims_reach_both_sections():
    cfg = config.build(config.parse_text("d_v = 8\n"))
    assert cfg.model.d_v == cfg.synth.d_v == 8


def test_nested_keys():
    cfg = config.build(config.parse_text("ssm.delta_mode = anchor\nattn.w_base = 5\n"))
    assert cfg.model.ssm.delta_mode == "anchor" and cfg.model.attn.w_base == 5


def test_seed_override_reaches_corpus():
    cfg = config.default().with_seed(7)
    assert cfg.seed == cfg.synth.seed == 7


@pytest.mark.parametrize("text,key", [("bogus = 1\n", "bogus"), ("P = 2\nP = 3\n", "P"),
                                      ("lr = fast\n", "lr")])
def test_parse_errors_name_key(text, key):
    with pytest.raises(config.ConfigError) as exc:
        config.parse_text(text)
    assert exc.value.key == key


def test_cli_unknown_key(tmp_path, capsys):
    p = tmp_path / "bad.cfg"
    p.write_text("wibble = 3\n")
    assert main(["train", "--config", str(p), "--out", str(tmp_path / "o")]) == 2
    assert "wibble" in capsys.readouterr().err


def test_cli_missing_config(tmp_path, capsys):
    missing = tmp_path / "nowhere.cfg"
    assert main(["train", "--config", str(missing), "--out", str(tmp_path / "o")]) == 2
    assert str(missing) in capsys.readouterr().err


def test_cli_unknown_variant(tmp_path, small_cfg):
    assert main(["ablate", "--variant", "no_brain", "--config", str(small_cfg),
                 "--out", str(tmp_path / "o")]) == 2


def test_cli_gradcheck(tmp_path):
    out = tmp_path / "g"
    assert main(["gradcheck", "--out", str(out)]) == 0
    assert (out / "gradcheck.csv").read_text().startswith("# seed=0\n")


def test_cli_train_is_reproducible(tmp_path, small_cfg):
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        assert main(["train", "--config", str(small_cfg), "--seed", "7", "--out", str(out)]) == 0
    for name in ("training_log.csv", "metrics.csv", "frame_scores.csv", "model.stap",
                 "training_curves.png", "manifest.json"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name

    man = json.loads((outs[0] / "manifest.json").read_text())
    assert man["command"] == "train" and man["seed"] == 7
    assert "seed=7" in man["config"] and "n=60" in man["config"]
    assert "training_log.csv" in man["artifacts"]
    assert man["timing_artifacts"] == []


def test_cli_inspect_from_checkpoint(tmp_path, small_cfg):
    assert main(["train", "--config", str(small_cfg), "--out", str(tmp_path / "t")]) == 0
    out = tmp_path / "i"
    assert main(["inspect", "--config", str(small_cfg), "--checkpoint", str(tmp_path / "t" / "model.stap"),
                 "--out", str(out)]) == 0
    assert (out / "frame_scores.csv").read_bytes() == (tmp_path / "t" / "frame_scores.csv").read_bytes()


def test_cli_bench_lists_timings_as_volatile(tmp_path):
    out = tmp_path / "b"
    code = main(["bench", "--kernel", "flat_retrieval", "--sizes", "100,200,400", "--out", str(out)])
    assert code == 0
    man = json.loads((out / "manifest.json").read_text())
    assert man["timing_artifacts"]
    assert not set(man["timing_artifacts"]) & set(man["artifacts"])
