import json
import math
import shutil

import numpy as np
import pytest

from omnifer import cli
from omnifer.config import ConfigError, load_config
from omnifer.data import LabeledDataset, load_dataset, save_dataset
from omnifer.distill import init_distilled, load_distilled
from omnifer.model import load_checkpoint
from omnifer.selection import read_manifest

SPEC = """kind = gaussian-blobs
num_classes = 3
per_class = 12
test_per_class = 10
noise = 0.3
pool_size = 150
brightness = 0.1
seed = 3
"""

CONFIG = """[global]
seed = 1
[architecture]
kind = mlp
input_shape = 8,8,1
hidden_widths = 8
num_classes = 3
[train]
learning_rate = 0.01
epochs = 4
batch_size = 8
[selection]
delta = 0.02
[distill]
n = 3
iters = 7
eta0 = 0.5
alpha = 0.1
batch_size = 16
weight_draws = 2
snapshot_every = 3
[paths]
anchor = data/anchor.odim
test = data/test.odim
pool = data/pool.odim
"""


def run(workdir, *args):
    return cli.main([args[0], "--workdir", str(workdir), "--config", "run.ini", *args[1:]])


def setup_dir(path):
    path.mkdir(parents=True, exist_ok=True)
    (path / "spec.txt").write_text(SPEC)
    (path / "run.ini").write_text(CONFIG)
    assert run(path, "synth", "--spec", "spec.txt") == 0
    return path


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    wd = setup_dir(tmp_path_factory.mktemp("pipe"))
    for stage in (["train-primitive"], ["select"], ["distill"], ["train-final", "--distilled"]):
        assert run(wd, *stage) == 0, stage
    return wd


def test_config_hash_stable_and_rejects_unknown(tmp_path):
    (tmp_path / "a.ini").write_text(CONFIG)
    a, b = load_config(tmp_path / "a.ini"), load_config(tmp_path / "a.ini")
    assert a.hash() == b.hash()
    c = load_config(tmp_path / "a.ini", {"train": {"epochs": 5}})
    assert c.train.epochs == 5 and c.hash() != a.hash()
    (tmp_path / "b.ini").write_text(CONFIG + "colour = red\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "b.ini")
    (tmp_path / "c.ini").write_text("[extras]\nx = 1\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "c.ini")


def test_config_global_seed_flows_down(tmp_path):
    (tmp_path / "a.ini").write_text("[global]\nseed = 9\n")
    cfg = load_config(tmp_path / "a.ini")
    assert cfg.train.seed == 9 and cfg.distill.seed == 9


def test_unknown_key_exit_code(tmp_path):
    setup_dir(tmp_path)
    (tmp_path / "run.ini").write_text(CONFIG.replace("epochs = 4", "epochz = 4"))
    assert run(tmp_path, "train-primitive") == 2


def test_train_primitive_outputs(pipeline):
    trace = (pipeline / "primitive.odmp.loss.txt").read_text().splitlines()
    assert trace[0].startswith("#") and "config_hash=" in trace[0]
    assert len(trace) - 1 == 4
    _, h = load_checkpoint(pipeline / "primitive.odmp")
    prov = json.loads((pipeline / "primitive.odmp.prov.json").read_text())
    assert h == prov["config_hash"]


def test_train_primitive_deterministic(pipeline, tmp_path):
    shutil.copytree(pipeline / "data", tmp_path / "data")
    (tmp_path / "run.ini").write_text(CONFIG)
    assert run(tmp_path, "train-primitive") == 0
    assert (tmp_path / "primitive.odmp").read_bytes() == (pipeline / "primitive.odmp").read_bytes()


def test_missing_dataset_no_partial_outputs(tmp_path):
    (tmp_path / "run.ini").write_text(CONFIG)
    assert run(tmp_path, "train-primitive") == 2
    assert sorted(p.name for p in tmp_path.iterdir()) == ["run.ini"]


def test_select_consistency_and_determinism(pipeline):
    ids, labels, _, meta = read_manifest(pipeline / "selection.tsv")
    report = json.loads((pipeline / "selection.tsv.report.json").read_text())
    assert len(ids) == report["total"] == sum(report["counts"])
    before = (pipeline / "selection.tsv").read_bytes()
    assert run(pipeline, "select") == 0
    assert (pipeline / "selection.tsv").read_bytes() == before


def test_select_large_delta_empty(pipeline, capsys):
    assert run(pipeline, "select", "--delta", "5", "--out", "empty.tsv") == 0
    ids, *_ = read_manifest(pipeline / "empty.tsv")
    assert len(ids) == 0
    assert run(pipeline, "distill", "--aux", "empty.tsv", "--out", "never.odds") == 3
    assert not (pipeline / "never.odds").exists()


def test_select_empty_class_exit_3(pipeline, tmp_path, capsys):
    anchor = load_dataset(pipeline / "data/anchor.odim")
    keep = anchor.labels != 1
    (tmp_path / "data").mkdir()
    save_dataset(LabeledDataset(anchor.images[keep], anchor.labels[keep], 3), tmp_path / "data/anchor.odim")
    shutil.copy(pipeline / "data/pool.odim", tmp_path / "data/pool.odim")
    shutil.copy(pipeline / "primitive.odmp", tmp_path / "primitive.odmp")
    (tmp_path / "run.ini").write_text(CONFIG)
    assert run(tmp_path, "select") == 3
    assert "class 1" in capsys.readouterr().err
    assert not (tmp_path / "selection.tsv").exists()


def test_distill_snapshots_and_resume(pipeline):
    snaps = sorted(pipeline.glob("distilled.snap-*.odds"))
    assert len(snaps) == math.ceil(7 / 3)
    assert run(pipeline, "distill", "--resume", "distilled.snap-000003.odds", "--out", "resumed.odds") == 0
    assert (pipeline / "resumed.odds").read_bytes() == (pipeline / "distilled.odds").read_bytes()


def test_distill_zero_iterations_is_init(pipeline):
    assert run(pipeline, "distill", "--iters", "0", "--out", "zero.odds") == 0
    cfg = load_config(pipeline / "run.ini")
    got = load_distilled(pipeline / "zero.odds")
    init = init_distilled(cfg.distill, cfg.architecture)
    assert np.array_equal(got.x_tilde, init.x_tilde) and got.log_eta == init.log_eta


def test_distill_divergence_exit_4(pipeline):
    assert run(pipeline, "distill", "--alpha", "1e8", "--eta0", "0.001", "--out", "bad.odds") == 4
    assert not list(pipeline.glob("bad*"))


def test_train_final_union_size(pipeline):
    rep = json.loads((pipeline / "final.odmp.report.json").read_text())
    assert rep["train_size"] == 36 + 3 and rep["source"] == "das"


def test_train_final_needs_one_source(pipeline):
    assert run(pipeline, "train-final") == 2
    assert run(pipeline, "train-final", "--distilled", "--vas") == 2


def test_train_final_empty_aux_matches_primitive(pipeline):
    assert run(pipeline, "select", "--delta", "5", "--out", "none.tsv") == 0
    assert run(pipeline, "train-final", "--vas", "none.tsv", "--out", "plain.odmp") == 0
    a, _ = load_checkpoint(pipeline / "plain.odmp")
    b, _ = load_checkpoint(pipeline / "primitive.odmp")
    for k in a.tensors:
        assert np.array_equal(a.tensors[k], b.tensors[k])


def test_compare_rows_append_only(pipeline):
    records = pipeline / "cmp.jsonl"
    assert run(pipeline, "compare", "--records", "cmp.jsonl", "--seeds", "0,1,2") == 0
    first = records.read_text()
    assert len(first.splitlines()) == 9
    assert run(pipeline, "compare", "--records", "cmp.jsonl", "--seeds", "3,4,5") == 0
    text = records.read_text()
    assert text.startswith(first) and len(text.splitlines()) == 18


def test_probe_split(pipeline, capsys):
    assert run(pipeline, "distill", "--iters", "12", "--snapshot-every", "2", "--out", "probe.odds") == 0
    assert run(pipeline, "probe", "probe.snap-*.odds", "--records", "probe.jsonl", "--plot", "probe.tsv") == 0
    out = capsys.readouterr().out
    assert "split 15/3" in out
    assert len((pipeline / "probe.tsv").read_text().splitlines()) == 4


def test_verify_detects_changes(pipeline, tmp_path):
    assert run(pipeline, "verify") == 0
    copy = tmp_path / "copy"
    shutil.copytree(pipeline, copy)
    assert run(copy, "verify", "--against", str(pipeline)) == 0
    with open(copy / "selection.tsv", "a") as fh:
        fh.write("999\t0\t1.0e-01\n")
    assert run(copy, "verify") == 1
