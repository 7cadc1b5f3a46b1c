import csv
import json

import numpy as np
import pytest

from mogen.cli import main
from mogen.data import read_ppm, write_ppm


@pytest.fixture(scope="module")
def data16(tmp_path_factory):
    d = tmp_path_factory.mktemp("data16")
    assert main(["gen-data", "--n", "24", "--seed", "1", "--dir", str(d), "--image-size", "16",
                 "--max-objects", "2"]) == 0
    return d


@pytest.fixture(scope="module")
def chain(tmp_path_factory, data16):
    """Tiny stage 0 -> 1 -> 2 checkpoints."""
    d = tmp_path_factory.mktemp("ckpt")
    common = ["--data", str(data16), "--steps", "3", "--batch-size", "4"]
    assert main(["pretrain", *common, "--tiny", "--out", str(d / "s0")]) == 0
    assert main(["train-rsa", *common, "--base", str(d / "s0"), "--out", str(d / "s1")]) == 0
    assert main(["train-amg", *common, "--base", str(d / "s1"), "--out", str(d / "s2")]) == 0
    return d


def test_gen_data_writes_n_records(tmp_path):
    assert main(["gen-data", "--n", "100", "--dir", str(tmp_path)]) == 0
    lines = (tmp_path / "manifest.jsonl").read_text().splitlines()
    assert len(lines) == 100
    assert json.loads(lines[0])["image"] == "img/000000.ppm"


def test_usage_errors_exit_1(tmp_path, capsys):
    assert main([]) == 1
    assert main(["gen-data", "--dir", str(tmp_path)]) == 1
    assert main(["train-amg", "--data", "x", "--out", "y", "--signal-configs", "S+B"]) == 1
    assert main(["gen-data", "--n", "-1", "--dir", str(tmp_path)]) == 1
    assert "error" in capsys.readouterr().err


def test_sample_boxes_with_structure_exit_1(tmp_path):
    write_ppm(tmp_path / "s.ppm", np.ones((32, 32, 3)))
    code = main(["sample", "--prompt", "a scene with 1 red circle", "--boxes", "0.1,0.1,0.5,0.5",
                 "--structure", str(tmp_path / "s.ppm"), "--out", str(tmp_path / "o.ppm")])
    assert code == 1
    assert not (tmp_path / "o.ppm").exists()


def test_sample_deterministic(tmp_path):
    args = ["sample", "--prompt", "a scene with 2 blue squares", "--seed", "3", "--steps", "4"]
    assert main([*args, "--out", str(tmp_path / "a.ppm")]) == 0
    assert main([*args, "--out", str(tmp_path / "b.ppm")]) == 0
    assert (tmp_path / "a.ppm").read_bytes() == (tmp_path / "b.ppm").read_bytes()
    assert read_ppm(tmp_path / "a.ppm").shape == (32, 32, 3)


def test_runtime_errors_exit_2(tmp_path, data16):
    assert main(["sample", "--ckpt", str(tmp_path / "none"), "--prompt", "x",
                 "--out", str(tmp_path / "o.ppm")]) == 2
    assert main(["pretrain", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 2
    assert main(["train-rsa", "--data", str(data16), "--out", str(tmp_path / "o")]) == 2
    (tmp_path / "empty").mkdir()
    main(["gen-data", "--n", "0", "--dir", str(tmp_path / "empty")])
    assert main(["pretrain", "--data", str(tmp_path / "empty"), "--out", str(tmp_path / "o")]) == 2


def test_training_chain_and_signals(tmp_path, chain):
    write_ppm(tmp_path / "o.ppm", np.ones((16, 16, 3)))
    base = ["sample", "--prompt", "a scene with 1 red circle", "--steps", "3"]
    assert main([*base, "--ckpt", str(chain / "s2"), "--boxes", "0.1,0.1,0.6,0.6",
                 "--objects", str(tmp_path / "o.ppm"), "--out", str(tmp_path / "g.ppm")]) == 0
    # a checkpoint without the guidance module cannot take control signals
    assert main([*base, "--ckpt", str(chain / "s1"), "--boxes", "0.1,0.1,0.6,0.6",
                 "--out", str(tmp_path / "h.ppm")]) == 1


def test_resume_and_lr_log(tmp_path, data16):
    common = ["pretrain", "--data", str(data16), "--steps", "4", "--batch-size", "4", "--tiny",
              "--dtype", "float64"]
    assert main([*common, "--out", str(tmp_path / "full"), "--lr-log", str(tmp_path / "lr.csv")]) == 0
    assert main([*common, "--out", str(tmp_path / "part"), "--save-every", "2"]) == 0
    rows = list(csv.DictReader(open(tmp_path / "lr.csv")))
    assert [float(r["lr"]) for r in (rows[0], rows[-1])] == [2e-3, 2e-4]
    assert (tmp_path / "full").read_bytes() == (tmp_path / "part").read_bytes()


def test_eval_ablate_diagnose(tmp_path, chain, data16):
    out = tmp_path / "e.csv"
    assert main(["eval", "--ckpt", str(chain / "s1"), "--data", str(data16), "--limit", "4",
                 "--steps", "2", "--out", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 5
    ab = ["ablate", "--data", str(data16), "--limit", "4", "--steps", "2",
          "--baseline", str(chain / "s0"), "--rsa", str(chain / "s1"), "--full", str(chain / "s2")]
    assert main([*ab, "--out", str(tmp_path / "a.csv")]) == 0
    assert main([*ab, "--out", str(tmp_path / "b.csv")]) == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert len((tmp_path / "a.csv").read_text().splitlines()) == 4
    # a checkpoint that does not match its slot is rejected
    assert main(["ablate", "--data", str(data16), "--full", str(chain / "s0"),
                 "--out", str(tmp_path / "c.csv")]) == 2
    assert main(["diagnose", "--ckpt", str(chain / "s1"), "--prompt", "a scene with 1 red circle",
                 "--attention-out", str(tmp_path / "att.csv"), "--data", str(data16),
                 "--features-out", str(tmp_path / "f.csv"), "--limit", "4"]) == 0
    rows = list(csv.reader(open(tmp_path / "att.csv")))
    assert rows[0][0] == "query" and len(rows[0]) == 1 + 6
