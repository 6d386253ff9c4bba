import json

import numpy as np
import pytest

from cxrdr.cli import main, path_digest
from cxrdr.imaging import RawLayout, read_pgm


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("c") / "corpus"
    assert main(["synth", "--n", "40", "--seed", "1", "--side", "32", "--outlier-frac", "0.1", "--out", str(out)]) == 0
    return out


def test_synth_deterministic(tmp_path, corpus):
    again = tmp_path / "again"
    assert main(["synth", "--n", "40", "--seed", "1", "--side", "32", "--outlier-frac", "0.1", "--out", str(again)]) == 0
    digests = lambda d: {p: h for p, h in json.loads((d / "manifest.json").read_text())["outputs"].items()}
    assert digests(again) == digests(corpus)
    assert json.loads((corpus / "manifest.json").read_text())["seeds"] == [1]


def test_unknown_flag_exit_2_no_output(tmp_path):
    assert main(["synth", "--n", "5", "--bogus", "--out", str(tmp_path / "x")]) == 2
    assert not (tmp_path / "x").exists()


def test_missing_input_exit_3(tmp_path, capsys):
    assert main(["eda", "--metadata", str(tmp_path / "nope.csv"), "--out", str(tmp_path / "e")]) == 3
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "missing_input"
    assert not (tmp_path / "e").exists()


@pytest.mark.parametrize("text", ["{not json", '{"cnn": {"learning_rate": -1}}', '{"mystery": 1}', "[1]"])
def test_bad_config_exit_4(tmp_path, corpus, text):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(text)
    code = main(["train", "--config", str(cfg), "--data", str(corpus), "--out", str(tmp_path / "r.csv")])
    assert code == 4
    assert not (tmp_path / "r.csv").exists()


def test_eda_counts_match_generator(tmp_path, corpus):
    assert main(["eda", "--metadata", str(corpus / "metadata.csv"), "--out", str(tmp_path / "eda")]) == 0
    rows = (tmp_path / "eda" / "balance.csv").read_text().splitlines()[1:]
    assert rows == ["nodule,24", "normal,16", "total,40"]
    manifest = json.loads((tmp_path / "eda" / "manifest.json").read_text())
    assert set(manifest) >= {"command", "config_hash", "seeds", "inputs", "outputs"}


def test_output_root_env(tmp_path, corpus, monkeypatch):
    monkeypatch.setenv("CXRDR_OUTPUT_ROOT", str(tmp_path / "root"))
    assert main(["eda", "--metadata", str(corpus / "metadata.csv"), "--out", "tables"]) == 0
    assert (tmp_path / "root" / "tables" / "balance.csv").is_file()


def test_rerun_replaces_output(tmp_path, corpus):
    out = tmp_path / "eda"
    for width in ("5", "10"):
        assert main(["eda", "--metadata", str(corpus / "metadata.csv"), "--bin-width", width, "--out", str(out)]) == 0
    assert json.loads((out / "manifest.json").read_text())["config"]["bin_width"] == 10.0
    assert [p.name for p in tmp_path.iterdir()] == ["eda"]


def test_pipeline(tmp_path, corpus):
    emb = tmp_path / "embedding.csv"
    assert main(["tsne", "--masks", str(corpus / "masks"), "--perplexity", "5", "--iterations", "300",
                 "--side", "16", "--out", str(emb)]) == 0
    header = emb.read_text().splitlines()[0]
    assert header == "case_id,y1,y2,score"
    assert (tmp_path / "embedding.csv.manifest.json").is_file()

    exclude = tmp_path / "exclude.txt"
    assert main(["filter-outliers", "--embedding", str(emb), "--fraction", "0.1", "--out", str(exclude)]) == 0
    assert len(exclude.read_text().split()) == 4

    v5 = tmp_path / "v05"
    assert main(["preprocess", "--variant", "v05", "--metadata", str(corpus / "metadata.csv"),
                 "--bse", str(corpus / "bse"), "--masks", str(corpus / "masks"),
                 "--exclude", str(exclude), "--out", str(v5)]) == 0
    manifest = (v5 / "manifest.csv").read_text().splitlines()
    assert manifest[0] == "case_id,label,path" and len(manifest) == 1 + 36
    assert read_pgm(v5 / manifest[1].split(",")[2]).shape == (32, 32)

    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"cnn": {"input_side": 16, "conv_blocks": [[4, 3, 2]], "dense_units": 8},
                               "harness": {"epochs": 3}}))
    run_csv = tmp_path / "run.csv"
    assert main(["train", "--config", str(cfg), "--data", str(v5), "--seed", "2", "--out", str(run_csv)]) == 0
    assert run_csv.read_text().splitlines()[0] == "epoch,train_acc,val_acc,train_loss,val_loss"
    assert len(run_csv.read_text().splitlines()) == 4

    exp = tmp_path / "exp"
    assert main(["experiment", "--config", str(cfg), "--variant", "v05", "--data", str(v5),
                 "--runs", "2", "--seeds", "3,4", "--out", str(exp)]) == 0
    summary = json.loads((exp / "summary.json").read_text())
    assert summary["variant"] == "V05" and summary["seeds"] == [3, 4]
    assert {p.name for p in (exp / "runs").iterdir()} == {"seed3.csv", "seed4.csv"}
    assert (exp / "smoothed.csv").is_file() and (exp / "averaged.csv").is_file()


def test_preprocess_v05_requires_exclusion(tmp_path, corpus):
    code = main(["preprocess", "--variant", "v05", "--metadata", str(corpus / "metadata.csv"),
                 "--bse", str(corpus / "bse"), "--masks", str(corpus / "masks"), "--out", str(tmp_path / "o")])
    assert code == 3


def test_experiment_seed_mismatch_is_error(tmp_path, corpus):
    code = main(["experiment", "--variant", "v02", "--data", str(corpus), "--runs", "3", "--seeds", "1,2",
                 "--out", str(tmp_path / "x")])
    assert code == 1
    assert not (tmp_path / "x").exists()


def test_ingest_raw(tmp_path):
    raw = tmp_path / "raw"
    raw.mkdir()
    pixels = (np.arange(16).reshape(4, 4) * 200).astype(">u2")
    (raw / "JPCLN001.IMG").write_bytes(pixels.tobytes())
    listing = tmp_path / "CLNDAT_EN.txt"
    listing.write_text("JPCLN001.IMG\t3\t15\t53\tmale\t1634\t692\tmalignant\tl.upper lobe\n")
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"raw_layout": {"width": 4, "height": 4}}))
    out = tmp_path / "ingested"
    assert main(["ingest", "--config", str(cfg), "--originals", str(raw), "--clinical", str(listing), "--out", str(out)]) == 0
    img = read_pgm(out / "originals" / "JPCLN001.pgm")
    assert img.pixels.tolist() == pixels.astype(int).tolist() and img.bit_depth == 12
    assert "JPCLN001,1,1634,692" in (out / "metadata.csv").read_text()


def test_path_digest_is_content_based(tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "a" / "f").write_text("x")
    first = path_digest(tmp_path / "a")
    (tmp_path / "a" / "f").write_text("y")
    assert path_digest(tmp_path / "a") != first


def test_train_input_side_follows_data(tmp_path, corpus):
    v4 = tmp_path / "v04"
    assert main(["preprocess", "--variant", "V04", "--metadata", str(corpus / "metadata.csv"),
                 "--bse", str(corpus / "bse"), "--masks", str(corpus / "masks"), "--out", str(v4)]) == 0
    run_csv = tmp_path / "run.csv"
    assert main(["train", "--data", str(v4), "--epochs", "1", "--out", str(run_csv)]) == 0
    manifest = json.loads((tmp_path / "run.csv.manifest.json").read_text())
    assert manifest["config"]["cnn"]["input_side"] == 32
