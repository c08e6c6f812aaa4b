import json
from pathlib import Path

import pytest

from refbind import config as cf
from refbind.cli import main

SMALL_CONFIG = """\
seed = 7
threads = 1

[data]
kinds = ["double"]
train_count = 6
eval_count = 3
canvas = [2, 8, 12]

[model]
layers = 1
heads = 2
channels = 16
mlp_ratio = 2

[train]
kinds = ["double"]
batch_size = 2
steps_pretrain = 5
steps_finetune = 2
log_every = 2

[eval]
kind = "double"
sample_steps = 2
count = 2
"""


@pytest.fixture()
def config_file(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text(SMALL_CONFIG)
    return path


def _tree_bytes(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


class TestLoadConfig:
    def test_minimal_config_resolves_defaults(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text("seed = 3\n")
        cfg = cf.load_config(path)
        assert cfg.seed == 3
        assert cfg.train.lr_pretrain == 1e-4
        assert cfg.data.kinds == list(("single", "single_body",
                                       "single_body_pet", "double",
                                       "double_body"))

    def test_resolved_echo_roundtrips(self, tmp_path, config_file):
        cfg = cf.load_config(config_file)
        echo = cf.write_resolved(cfg, tmp_path / "out")
        again = cf.load_config(echo)
        assert again.to_dict() == cfg.to_dict()

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text("seed = 1\nmystery = 2\n")
        with pytest.raises(cf.ConfigError, match="mystery"):
            cf.load_config(path)

    def test_unknown_section_key_rejected(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text("[train]\nwarmup = 10\n")
        with pytest.raises(cf.ConfigError, match="warmup"):
            cf.load_config(path)

    def test_unknown_kind_rejected(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text('[data]\nkinds = ["sextuple"]\n')
        with pytest.raises(cf.ConfigError, match="sextuple"):
            cf.load_config(path)

    def test_lr_invariant_rejected(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text("[train]\nlr_pretrain = 1e-5\nlr_finetune = 1e-5\n")
        with pytest.raises(cf.ConfigError, match="lr_finetune"):
            cf.load_config(path)

    def test_parse_error_carries_location(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text("seed = [unclosed\n")
        with pytest.raises(cf.ConfigError, match="c.toml"):
            cf.load_config(path)


class TestCli:
    def test_unknown_subcommand_usage_error(self, capsys):
        assert main(["frobnicate"]) == 2

    def test_gen_data_deterministic(self, tmp_path, config_file):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["gen-data", "--config", str(config_file), "--out", str(a)]) == 0
        assert main(["gen-data", "--config", str(config_file), "--out", str(b)]) == 0
        ta, tb = _tree_bytes(a), _tree_bytes(b)
        assert ta.keys() == tb.keys()
        assert all(ta[k] == tb[k] for k in ta)

    def test_gen_data_writes_echo_and_vocab(self, tmp_path, config_file):
        out = tmp_path / "out"
        assert main(["gen-data", "--config", str(config_file), "--out", str(out)]) == 0
        assert (out / "config.resolved.toml").exists()
        assert (out / "vocab.json").exists()
        assert (out / "data" / "double" / "train" / "shard_0000" / "video.bin").exists()

    def test_bad_config_exits_one(self, tmp_path):
        bad = tmp_path / "bad.toml"
        bad.write_text("[train]\nlr_pretrain = 1e-5\nlr_finetune = 1e-4\n")
        assert main(["gen-data", "--config", str(bad), "--out",
                     str(tmp_path / "x")]) == 1

    def test_train_then_eval_pipeline(self, tmp_path, config_file):
        out = tmp_path / "run"
        assert main(["gen-data", "--config", str(config_file), "--out", str(out)]) == 0
        assert main(["train", "--config", str(config_file), "--data",
                     str(out / "data"), "--out", str(out / "train")]) == 0
        ckpt = out / "train" / "checkpoint_pretrain"
        assert (ckpt / "manifest.json").exists()
        assert main(["eval", "--config", str(config_file), "--data",
                     str(out / "data"), "--checkpoint", str(ckpt),
                     "--out", str(out / "eval")]) == 0
        doc = json.loads((out / "eval" / "metrics.json").read_text())
        assert doc["n_examples"] == 2

    def test_curate_subcommand(self, tmp_path, config_file):
        out = tmp_path / "run"
        assert main(["gen-data", "--config", str(config_file), "--out", str(out)]) == 0
        assert main(["curate", "--config", str(config_file), "--data",
                     str(out / "data"), "--out", str(out / "cur")]) == 0
        stats = json.loads((out / "cur" / "stats.json").read_text())
        assert stats["pass_rate"] == 1.0
        assert (out / "cur" / "curation.jsonl").exists()

    def test_sample_subcommand(self, tmp_path, config_file):
        out = tmp_path / "run"
        main(["gen-data", "--config", str(config_file), "--out", str(out)])
        main(["train", "--config", str(config_file), "--data", str(out / "data"),
              "--out", str(out / "train")])
        assert main(["sample", "--config", str(config_file), "--data",
                     str(out / "data"), "--checkpoint",
                     str(out / "train" / "checkpoint_pretrain"),
                     "--out", str(out / "samples")]) == 0
        assert (out / "samples" / "videos" / "video_0000.bin").exists()
        assert (out / "samples" / "videos" / "sheet_0000.png").exists()

    def test_gradcheck_subcommand(self, capsys):
        assert main(["gradcheck", "--probes", "40"]) == 0
        assert "max relative error" in capsys.readouterr().out

    def test_missing_data_dir_exits_one(self, tmp_path, config_file):
        assert main(["train", "--config", str(config_file), "--data",
                     str(tmp_path / "nope"), "--out", str(tmp_path / "t")]) == 1
