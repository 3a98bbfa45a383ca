import json
import shutil

import pytest

from avsep.cli import main
from avsep.config import resolve
from avsep.dsp import AudioClip, read_wav, write_wav
from avsep.errors import ConfigError
from avsep.metrics import SeparationReport
from avsep.synthdata import Corpus

TINY_FLAGS = ["--categories", "2", "--train-per-category", "4", "--val-per-category", "2",
              "--test-per-category", "2"]


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert main(["gen-data", *TINY_FLAGS, "--seed", "1", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def trained(corpus_dir, tmp_path_factory):
    runs = {}
    for variant in ("attention", "catemb"):
        out = tmp_path_factory.mktemp(variant)
        assert main(["train", "--corpus", str(corpus_dir), "--variant", variant, "--epochs", "1",
                     "--seed", "3", "--batch-size", "2", "--out", str(out)]) == 0
        runs[variant] = out
    return runs


def test_gen_data_refuses_second_run(corpus_dir, capsys):
    assert main(["gen-data", *TINY_FLAGS, "--seed", "1", "--out", str(corpus_dir)]) != 0
    assert "--force" in capsys.readouterr().err
    Corpus(corpus_dir)  # manifest validates against the schema


def test_gen_data_force_is_reproducible(corpus_dir, tmp_path):
    copy = tmp_path / "data"
    shutil.copytree(corpus_dir, copy)
    before = (copy / "manifest.jsonl").read_bytes()
    assert main(["gen-data", *TINY_FLAGS, "--seed", "1", "--out", str(copy), "--force"]) == 0
    assert (copy / "manifest.jsonl").read_bytes() == before


def test_gen_data_one_category_is_usage_error(tmp_path, capsys):
    assert main(["gen-data", "--categories", "1", "--out", str(tmp_path / "d")]) == 2
    assert "error" in capsys.readouterr().err


def test_bogus_variant_lists_choices(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--variant", "bogus"])
    assert exc.value.code == 2
    err = capsys.readouterr().err
    assert all(v in err for v in ("plain", "attention", "classifier", "catemb"))


def test_train_outputs_and_determinism(corpus_dir, trained, tmp_path):
    out = trained["catemb"]
    assert (out / "checkpoint.ckpt").is_file()
    records = [json.loads(l) for l in (out / "train_log.jsonl").read_text().splitlines()]
    assert [r["type"] for r in records] == ["header", "epoch"]
    echo = json.loads((out / "run_config.json").read_text())
    assert echo["config"]["variant"] == "catemb" and echo["schema_version"] == 1
    again = tmp_path / "again"
    assert main(["train", "--corpus", str(corpus_dir), "--variant", "catemb", "--epochs", "1",
                 "--seed", "3", "--batch-size", "2", "--out", str(again)]) == 0
    assert (again / "train_log.jsonl").read_bytes() == (out / "train_log.jsonl").read_bytes()
    assert main(["train", "--corpus", str(corpus_dir), "--epochs", "1", "--out", str(again)]) == 1


def test_eval_report(corpus_dir, trained, tmp_path, capsys):
    ckpt = trained["attention"] / "checkpoint.ckpt"
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["eval", "--corpus", str(corpus_dir), "--checkpoint", str(ckpt),
                     "--out", str(out)]) == 0
        outs.append(out)
    assert "SDR" in capsys.readouterr().out
    report = SeparationReport.load(outs[0] / "report.json")
    n_test = len(Corpus(corpus_dir).split_rows("test"))
    assert len(report.rows) == n_test  # two sources per mixture, each test sample used once
    assert report.aggregate["sdr"]["n"] == len(report.rows)
    assert report.localization["n"] == len(report.rows)
    assert report.config["model"]["variant"] == "attention"
    assert (outs[0] / "report.json").read_bytes() == (outs[1] / "report.json").read_bytes()
    assert (outs[0] / "report.csv").read_text().startswith("id,mixture,source")
    assert (outs[0] / "sdr_hist.png").stat().st_size > 0


def test_eval_oracle(corpus_dir, tmp_path):
    assert main(["eval", "--corpus", str(corpus_dir), "--oracle", "ibm",
                 "--out", str(tmp_path)]) == 0
    report = SeparationReport.load(tmp_path / "report.json")
    assert report.config["oracle"] == "ibm"
    assert report.mean_sdr > 10


def test_eval_missing_checkpoint(corpus_dir, tmp_path, capsys):
    assert main(["eval", "--corpus", str(corpus_dir), "--checkpoint", str(tmp_path / "x.ckpt"),
                 "--out", str(tmp_path / "o")]) == 1
    assert "FileNotFoundError" in capsys.readouterr().err


def _mixture(corpus_dir, tmp_path):
    corpus = Corpus(corpus_dir)
    a, b = corpus.split_rows("test")[0], corpus.split_rows("test")[-1]
    clip = AudioClip(read_wav(corpus_dir / a["audio"]).samples
                     + read_wav(corpus_dir / b["audio"]).samples)
    return write_wav(tmp_path / "mix.wav", clip), corpus_dir / a["image"], a["category"]


def test_separate_writes_three_files(corpus_dir, trained, tmp_path):
    mix, image, _ = _mixture(corpus_dir, tmp_path)
    out = tmp_path / "sep"
    assert main(["separate", "--checkpoint", str(trained["attention"] / "checkpoint.ckpt"),
                 "--mixture", str(mix), "--image", str(image), "--out", str(out)]) == 0
    for name in ("estimate.wav", "mask.png", "heatmap.png"):
        assert (out / name).stat().st_size > 0
    assert len(read_wav(out / "estimate.wav")) == len(read_wav(mix))


def test_separate_category_needs_catemb(corpus_dir, trained, tmp_path, capsys):
    mix, _, cat = _mixture(corpus_dir, tmp_path)
    assert main(["separate", "--checkpoint", str(trained["attention"] / "checkpoint.ckpt"),
                 "--mixture", str(mix), "--category", str(cat), "--out", str(tmp_path / "s")]) == 2
    assert "catemb" in capsys.readouterr().err
    assert main(["separate", "--checkpoint", str(trained["catemb"] / "checkpoint.ckpt"),
                 "--mixture", str(mix), "--category", str(cat), "--out", str(tmp_path / "c")]) == 0
    assert (tmp_path / "c" / "estimate.wav").exists()


def test_ablation_isolates_failures(corpus_dir, tmp_path, capsys):
    out = tmp_path / "abl"
    code = main(["ablation", "--corpus", str(corpus_dir), "--variants", "catemb,plain",
                 "--seeds", "0", "--epochs", "1", "--batch-size", "2", "--out", str(out)])
    assert code == 0
    result = json.loads((out / "ablation.json").read_text())
    assert result["seeds"] == [0]
    assert result["config"]["epochs"] == 1
    assert set(result["variants"]) == {"catemb", "plain"}
    assert (out / "ablation.png").stat().st_size > 0
    # a K that only one variant accepts makes the other cell fail
    code = main(["ablation", "--corpus", str(corpus_dir), "--variants", "catemb,plain",
                 "--seeds", "0", "--epochs", "1", "--batch-size", "2", "--out", str(out),
                 "--force", "--config", str(_k_config(tmp_path))])
    assert code == 1
    result = json.loads((out / "ablation.json").read_text())
    assert result["variants"]["catemb"]["status"] == "failed"
    assert result["variants"]["plain"]["status"] == "ok"
    assert "FAILED" in capsys.readouterr().out


def _k_config(tmp_path):
    # K = 3 is legal for plain but conflicts with catemb's K = C = 2
    path = tmp_path / "k.toml"
    path.write_text("[ablation]\nk = 3\n")
    return path


def test_config_precedence(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text("seed = 5\n[train]\nepochs = 3\nlr = 0.01\nvariant = \"plain\"\n")
    env = {"AVSEP_EPOCHS": "4", "AVSEP_SPLIT": "val"}
    s = resolve("train", path, {"lr": 0.5}, environ=env)
    assert (s["seed"], s["epochs"], s["lr"], s["variant"]) == (5, 4, 0.5, "plain")
    assert s["batch_size"] == 8


@pytest.mark.parametrize("text", ["[train]\ncolour = 1\n", "[bogus]\na = 1\n", "x = 1\n",
                                  "[train]\nepochs = \"many\"\n"])
def test_config_rejects_unknown_or_bad(tmp_path, text):
    path = tmp_path / "c.toml"
    path.write_text(text)
    with pytest.raises(ConfigError):
        resolve("train", path, environ={})


def test_unknown_env_rejected():
    with pytest.raises(ConfigError):
        resolve("train", environ={"AVSEP_COLOUR": "red"})


def test_missing_config_file_exit_code(tmp_path):
    assert main(["train", "--config", str(tmp_path / "none.toml")]) == 2
