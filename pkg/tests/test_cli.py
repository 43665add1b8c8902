import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from hmsg.checkpoint import MAGIC, load_checkpoint, read_checkpoint, save_checkpoint
from hmsg.cli import main
from hmsg.config import RunConfig, load_config, parse_config
from hmsg.datasets import load_dataset, read_matrix, write_dataset, write_matrix
from hmsg.exceptions import (
    ConfigError,
    ConfigMismatch,
    CorruptCheckpoint,
    DanglingIndex,
    MissingFile,
    ParseError,
)
from hmsg.hetgraph import parse_metapath
from hmsg.model import HmsgModel, ModelConfig
from hmsg.subgraph import generate_all


def run(*argv):
    return main([str(a) for a in argv])


# ------------------------------------------------------------ config

def test_config_parse_and_overrides(tmp_path):
    cfg = parse_config("dataset = d  # trailing comment\nmetapaths = PAP, PA\nlr = 0.01\n", tmp_path,
                       ["lr=0.02", "n_heads = 4"])
    assert cfg.metapaths == ("PAP", "PA")
    assert (cfg.lr, cfg.n_heads, cfg.hidden_dim) == (0.02, 4, 64)
    assert cfg.dataset_path == tmp_path / "d"
    assert cfg.split_ratios == (0.1, 0.1, 0.8)


def test_config_round_trips_through_text(tmp_path):
    cfg = parse_config("dataset = d\nmetapaths = PAP\nsplit = 0.2,0.1,0.7\nrecord_time = true\n", tmp_path)
    again = parse_config(cfg.to_text(), tmp_path)
    assert again == cfg
    assert again.to_text() == cfg.to_text()


@pytest.mark.parametrize("text", ["bogus = 1", "lr = fast", "no equals sign", "dataset = d\nmetapaths = PAP\ntask = x"])
def test_config_errors(tmp_path, text):
    with pytest.raises(ConfigError):
        parse_config(text, tmp_path).validate()


def test_config_validation():
    with pytest.raises(ConfigError):
        RunConfig(dataset="d", metapaths=("PAP",), split=(0.5, 0.5, 0.5)).validate()
    with pytest.raises(ConfigError):
        RunConfig(dataset="d", metapaths=("UIU",), task="link-pred").validate()
    with pytest.raises(ConfigError):
        RunConfig(dataset="d", metapaths=("PAP",), hidden_dim=10, n_heads=4).validate()
    with pytest.raises(MissingFile):
        load_config("/nonexistent/x.cfg")


# ------------------------------------------------------------ checkpoint

def small_model(toy, heads=2, seed=0):
    sgs = generate_all(toy.graph, [parse_metapath(m, toy.graph.schema) for m in ("PAP", "PA")])
    return HmsgModel.build(ModelConfig(hidden_dim=8, n_heads=heads, seed=seed), toy.features, sgs, 3, "P")


def test_checkpoint_round_trip(tmp_path, toy):
    model = small_model(toy, seed=5)
    path = save_checkpoint(tmp_path / "m.ckpt", model)
    assert path.read_bytes().startswith(MAGIC)
    loaded = load_checkpoint(path)
    assert loaded.config == model.config
    for k, v in model.state_dict().items():
        assert np.array_equal(loaded.state_dict()[k], v)
    save_checkpoint(tmp_path / "again.ckpt", loaded)
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_loads_into_matching_model(tmp_path, toy):
    path = save_checkpoint(tmp_path / "m.ckpt", small_model(toy, seed=5))
    target = load_checkpoint(path, small_model(toy, seed=9))
    assert np.array_equal(target["W.P"].data, small_model(toy, seed=5)["W.P"].data)


def test_checkpoint_corruption(tmp_path, toy):
    path = save_checkpoint(tmp_path / "m.ckpt", small_model(toy))
    data = path.read_bytes()
    (tmp_path / "short.ckpt").write_bytes(data[:-5])
    with pytest.raises(CorruptCheckpoint):
        read_checkpoint(tmp_path / "short.ckpt")
    (tmp_path / "magic.ckpt").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(CorruptCheckpoint):
        read_checkpoint(tmp_path / "magic.ckpt")
    (tmp_path / "long.ckpt").write_bytes(data + b"\0")
    with pytest.raises(CorruptCheckpoint):
        read_checkpoint(tmp_path / "long.ckpt")
    with pytest.raises(MissingFile):
        read_checkpoint(tmp_path / "absent.ckpt")


def test_checkpoint_head_count_mismatch(tmp_path, toy):
    sgs = generate_all(toy.graph, [parse_metapath("PAP", toy.graph.schema)])
    eight = HmsgModel.build(ModelConfig(n_heads=8), toy.features, sgs)
    four = HmsgModel.build(ModelConfig(n_heads=4), toy.features, sgs)
    path = save_checkpoint(tmp_path / "k8.ckpt", eight)
    with pytest.raises(ConfigMismatch, match="n_heads"):
        load_checkpoint(path, four)


# ------------------------------------------------------------ datasets

def test_toy_fixture_loads(toy):
    assert toy.graph.node_counts == {"P": 12, "A": 8, "S": 3}
    sgs = generate_all(toy.graph, [parse_metapath(m, toy.graph.schema) for m in ("PAP", "PSP", "PA", "PS")])
    assert len(sgs["P"]) == 4
    assert toy.featureless_types == ["S"]
    assert toy.labels.n_classes == 3


def copy_toy(tmp_path, toy_dir):
    dst = tmp_path / "toy"
    shutil.copytree(toy_dir, dst)
    return dst


def test_missing_edges_file(tmp_path, toy_dir):
    d = copy_toy(tmp_path, toy_dir)
    (d / "edges.tsv").unlink()
    with pytest.raises(MissingFile):
        load_dataset(d)


def test_dangling_label(tmp_path, toy_dir):
    d = copy_toy(tmp_path, toy_dir)
    with open(d / "labels.tsv", "a") as fh:
        fh.write("40\t1\n")
    with pytest.raises(DanglingIndex):
        load_dataset(d)


def test_parse_error_has_line_number(tmp_path, toy_dir):
    d = copy_toy(tmp_path, toy_dir)
    with open(d / "edges.tsv", "a") as fh:
        fh.write("PA\tx\t1\n")
    with pytest.raises(ParseError, match=r"edges\.tsv:\d+"):
        load_dataset(d)


def test_matrix_format_round_trip(tmp_path):
    x = np.random.default_rng(0).normal(size=(5, 3))
    write_matrix(tmp_path / "m.f64", x)
    raw = (tmp_path / "m.f64").read_bytes()
    assert raw.startswith(b"5 3\n")
    assert np.array_equal(read_matrix(tmp_path / "m.f64"), x)
    write_matrix(tmp_path / "n.f64", read_matrix(tmp_path / "m.f64"))
    assert (tmp_path / "n.f64").read_bytes() == raw


def test_dataset_write_round_trip(tmp_path, toy):
    write_dataset(toy, tmp_path / "a")
    write_dataset(load_dataset(tmp_path / "a"), tmp_path / "b")
    for f in sorted(p.name for p in (tmp_path / "a").iterdir()):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f


# ------------------------------------------------------------ commands

@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    from conftest import TOY

    out = tmp_path_factory.mktemp("run")
    assert run("train", "--config", TOY / "node-class.cfg", "--out", out, "--seed", 7) == 0
    return out


def test_train_outputs(trained):
    for name in ("model.ckpt", "history.csv", "splits.json", "effective.cfg"):
        assert (trained / name).is_file()
    eff = (trained / "effective.cfg").read_text()
    assert "seed = 7" in eff and "dataset = /" in eff
    assert (trained / "history.csv").read_text().startswith("epoch,train_loss,val_metric,elapsed_ms\n")


def test_train_is_byte_reproducible(trained, tmp_path, toy_dir):
    assert run("train", "--config", toy_dir / "node-class.cfg", "--out", tmp_path, "--seed", 7) == 0
    for name in ("history.csv", "model.ckpt", "splits.json", "effective.cfg"):
        assert (tmp_path / name).read_bytes() == (trained / name).read_bytes(), name


def test_effective_config_reruns_identically(trained, tmp_path):
    assert run("train", "--config", trained / "effective.cfg", "--out", tmp_path) == 0
    assert (tmp_path / "model.ckpt").read_bytes() == (trained / "model.ckpt").read_bytes()


def test_full_pipeline(trained, tmp_path, toy_dir):
    cfg = toy_dir / "node-class.cfg"
    assert run("gen-subgraphs", "--config", cfg, "--out", tmp_path / "sg") == 0
    assert sorted(p.name for p in (tmp_path / "sg").glob("subgraph.*")) == [
        "subgraph.P-A-P.tsv", "subgraph.P-A.tsv", "subgraph.P-S-P.tsv", "subgraph.P-S.tsv"]
    ckpt = trained / "model.ckpt"
    assert run("eval-classify", "--config", cfg, "--out", tmp_path, "--checkpoint", ckpt, "--seed", 7) == 0
    report = json.loads((tmp_path / "eval-classify.json").read_text())
    assert set(report) == {"task", "metrics", "repeats", "seed", "config_digest"}
    assert report["metrics"]["macro_f1"]["mean"] >= 0.95
    assert run("eval-cluster", "--config", cfg, "--out", tmp_path, "--checkpoint", ckpt, "--seed", 7) == 0
    assert set(json.loads((tmp_path / "eval-cluster.json").read_text())["metrics"]) == {"nmi", "ari"}
    assert run("embed", "--config", cfg, "--out", tmp_path, "--checkpoint", ckpt, "--seed", 7) == 0
    assert read_matrix(tmp_path / "embeddings.P.f64").shape == (12, 64)


def test_eval_is_reproducible(trained, tmp_path, toy_dir):
    args = ("--config", toy_dir / "node-class.cfg", "--checkpoint", trained / "model.ckpt", "--seed", 7)
    assert run("eval-cluster", "--out", tmp_path / "a", *args) == 0
    assert run("eval-cluster", "--out", tmp_path / "b", *args) == 0
    assert (tmp_path / "a" / "eval-cluster.json").read_bytes() == (tmp_path / "b" / "eval-cluster.json").read_bytes()


def test_missing_checkpoint_flag(tmp_path, toy_dir, capsys):
    assert run("eval-cluster", "--config", toy_dir / "node-class.cfg", "--out", tmp_path) == 1
    err = capsys.readouterr().err.strip()
    assert "--checkpoint" in err and len(err.splitlines()) == 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_exit_codes(tmp_path, toy_dir, capsys, trained):
    assert run("train", "--config", tmp_path / "none.cfg", "--out", tmp_path) == 1
    assert run("frobnicate") == 1
    assert run("train", "--config", toy_dir / "node-class.cfg", "--out", tmp_path, "--override", "bogus=1") == 1
    assert run("train", "--config", toy_dir / "node-class.cfg", "--out", tmp_path, "--seed", -1) == 1
    # a checkpoint trained with K=8 cannot serve a K=4 run
    assert run("embed", "--config", toy_dir / "node-class.cfg", "--out", tmp_path, "--checkpoint",
               trained / "model.ckpt", "--override", "n_heads=4") == 1
    # a learning rate this large overflows the forward pass
    assert run("train", "--config", toy_dir / "node-class.cfg", "--out", tmp_path / "x", "--override", "lr=1e300",
               "--override", "max_epochs=3") == 2
    for line in capsys.readouterr().err.strip().splitlines():
        assert line.startswith("hmsg: ")


def test_synth_and_link_prediction(tmp_path):
    assert run("synth", "block", "--out", tmp_path, "--seed", 3, "--override", "n_users=40", "--override",
               "n_items=40", "--override", "p_in=0.3") == 0
    cfg = tmp_path / "link-pred.cfg"
    small = ("--override", "hidden_dim=8", "--override", "n_heads=2", "--override", "max_epochs=5")
    assert run("train", "--config", cfg, "--out", tmp_path / "run", *small) == 0
    assert run("eval-linkpred", "--config", cfg, "--out", tmp_path / "run", "--checkpoint",
               tmp_path / "run" / "model.ckpt", *small) == 0
    report = json.loads((tmp_path / "run" / "eval-linkpred.json").read_text())
    assert 0.0 <= report["metrics"]["auc"]["mean"] <= 1.0
    assert run("synth", "partition", "--out", tmp_path / "p", "--override", "n_target=30", "--override",
               "n_aux=20") == 0
    assert load_dataset(tmp_path / "p" / "data").graph.node_counts["P"] == 30
    assert run("synth", "block", "--out", tmp_path, "--override", "nope=1") == 1


def test_console_script_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "hmsg.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "eval-linkpred" in proc.stdout
