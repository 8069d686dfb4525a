import json
import struct
from pathlib import Path

import numpy as np
import pytest

from adasc import autodiff as ad
from adasc import checkpoint as ckpt
from adasc import cli
from adasc import data as D
from adasc import nn
from adasc import report as R
from adasc.adapt import AdamState, adam_step
from adasc.experiment import ConfigError, RunConfig, load_config, run_experiment


def test_confusion_counts_and_normalization():
    cm = R.confusion(np.array([0, 0, 1, 1, 1]), np.array([0, 1, 1, 1, 0]), ["a", "b", "c"])
    assert cm.counts.tolist() == [[1, 1, 0], [1, 2, 0], [0, 0, 0]]
    norm, empty = R.normalize_confusion(cm)
    np.testing.assert_allclose(norm, [[0.5, 0.5, 0], [1 / 3, 2 / 3, 0], [0, 0, 0]])
    assert empty.tolist() == [False, False, True]
    assert cm.total == 5


def _fixed_models():
    spec_m = nn.mlp((2,), [2], head="linear")
    m = nn.build_model(spec_m, 0).eval()
    m.params["0.weight"].data[:] = np.eye(2)
    c = nn.build_model(nn.mlp((2,), [2], head="softmax"), 0).eval()
    c.params["0.weight"].data[:] = np.eye(2) * 10
    return m, c


def test_evaluate_accuracy_and_per_device():
    m, c = _fixed_models()
    x = np.array([[1, 0], [0, 1], [1, 0], [0, 1]], dtype=np.float32)
    ds = D.DomainDataset(x, [0, 1, 1, 1], np.array(["B", "B", "C", "C"]), np.array(list("pqrs")),
                         class_names=("x", "y")).as_target()
    rep = R.evaluate(m, c, ds, "adapted")
    assert rep.accuracy == 0.75 and rep.per_device == {"B": 1.0, "C": 0.5}
    d = rep.to_dict()
    assert d["domain"] == "target" and d["n_examples"] == 4 and d["confusion"] == [[1, 0], [1, 2]]


def test_evaluate_contracts():
    m, c = _fixed_models()
    empty = D.DomainDataset(np.zeros((0, 2)), np.zeros(0, int), np.array([]), np.array([]), class_names=("x", "y"))
    with pytest.raises(ad.ContractError):
        R.evaluate(m, c, empty)
    ds = D.DomainDataset(np.zeros((1, 2), np.float32), [0], np.array(["A"]), np.array(["a"]), class_names=("x", "y"))
    with pytest.raises(ad.ContractError):
        R.evaluate(m.train(), c, ds)


def test_accuracy_table_layout():
    cm = R.confusion(np.array([0]), np.array([0]), ["a"])
    reps = [R.EvaluationReport("source", "non-adapted", 0.6525, {}, cm),
            R.EvaluationReport("target", "adapted", 0.3167, {}, cm)]
    lines = R.accuracy_table(reps).splitlines()
    assert "Non adapted" in lines[0] and "Adapted" in lines[0]
    assert lines[1].startswith("Source") and "65.25%" in lines[1] and lines[1].rstrip().endswith("-")
    assert lines[2].startswith("Target") and lines[2].rstrip().endswith("31.67%")


def test_confusion_csv(tmp_path):
    cm = R.confusion(np.array([0, 1]), np.array([1, 1]), ["a", "b"])
    R.write_confusion_csv(cm, tmp_path / "c.csv")
    assert (tmp_path / "c.csv").read_text().splitlines() == ["reference,a,b", "a,0,1", "b,0,1"]
    assert "1.000" in R.render_confusion(cm)


# ---------------------------------------------------------------- checkpoints


def _model_with_state():
    m = nn.build_model(nn.dcase_m(), 1)
    m.buffers["1.running_mean"][:] = 0.25
    return m


def test_checkpoint_round_trip(tmp_path):
    m = _model_with_state()
    c = nn.build_model(nn.clf_dcase(m.spec.output_shape), 2).eval()
    state = AdamState()
    adam_step(c.params, {k: np.ones_like(t.data) for k, t in c.params.items()}, state)
    ckpt.save_checkpoint({"mapper": m, "clf": c}, tmp_path / "x.ckpt", {"clf": state}, {"seed": 3})
    back = ckpt.read_checkpoint(tmp_path / "x.ckpt", {"mapper": m.spec})
    for key, orig in (("mapper", m), ("clf", c)):
        got = back.models[key]
        assert got.spec == orig.spec and got.training == orig.training
        for k, v in orig.state().items():
            assert got.state()[k].dtype == v.dtype and got.state()[k].tobytes() == v.tobytes()
    assert back.optimizers["clf"].step == 1
    assert back.optimizers["clf"].m.keys() == state.m.keys()
    assert back.metadata == {"seed": 3}


def test_checkpoint_spec_mismatch(tmp_path):
    m = _model_with_state()
    ckpt.save_checkpoint({"mapper": m}, tmp_path / "x.ckpt")
    with pytest.raises(ckpt.DigestMismatchError):
        ckpt.load_checkpoint(tmp_path / "x.ckpt", {"mapper": nn.kaggle_m()})


def test_checkpoint_is_written_atomically(tmp_path):
    path = tmp_path / "x.ckpt"
    ckpt.write_container(path, {"a": np.zeros(3)})
    before = path.read_bytes()

    with pytest.raises(RuntimeError):
        with ckpt.atomic_write(path, "wb") as fh:
            fh.write(b"partial")
            raise RuntimeError("disk on fire")
    assert path.read_bytes() == before
    assert not (tmp_path / "x.ckpt.tmp").exists()


@pytest.mark.parametrize("cut", [3, 20, -1])
def test_truncated_container(tmp_path, cut):
    path = tmp_path / "x.ckpt"
    ckpt.write_container(path, {"a": np.arange(10.0)})
    raw = path.read_bytes()
    path.write_bytes(raw[:cut])
    with pytest.raises(ckpt.TruncatedCheckpointError):
        ckpt.read_container(path)


def test_bad_magic_and_version(tmp_path):
    path = tmp_path / "x.ckpt"
    ckpt.write_container(path, {"a": np.arange(3.0)})
    raw = bytearray(path.read_bytes())
    path.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(ckpt.BadMagicError):
        ckpt.read_container(path)
    struct.pack_into("<I", raw, 4, 99)
    path.write_bytes(bytes(raw))
    with pytest.raises(ckpt.FormatVersionError):
        ckpt.read_container(path)


def test_container_is_little_endian(tmp_path):
    path = tmp_path / "x.ckpt"
    ckpt.write_container(path, {"a": np.array([1.0], dtype=">f8")})
    tensors, _ = ckpt.read_container(path)
    assert tensors["a"].tolist() == [1.0]
    assert path.read_bytes().endswith(np.array([1.0], "<f8").tobytes())


def test_dataset_export_keeps_seal(tmp_path):
    src, tgt = D.synth_domain_pair(D.SyntheticShiftConfig(samples_per_class=5))
    ckpt.save_dataset(tgt, tmp_path / "t.adda")
    back = ckpt.load_dataset(tmp_path / "t.adda")
    assert back.labels is None and back.evaluation_labels().tolist() == tgt.evaluation_labels().tolist()
    ckpt.save_dataset(tgt, tmp_path / "t2.adda", include_oracle=False)
    assert ckpt.load_dataset(tmp_path / "t2.adda").oracle is None


# ---------------------------------------------------------------- config + CLI


def _small(tmp_path, **extra):
    body = """
seed = 1
[synthetic]
samples_per_class = 60
[pretrain]
epochs = 3
[adapt]
epochs = 2
"""
    path = tmp_path / "cfg.toml"
    path.write_text(body + "".join(f"{k} = {v}\n" for k, v in extra.items()))
    return path


def test_config_rejects_unknown_keys(tmp_path):
    with pytest.raises(ConfigError, match="adapt.epoch"):
        RunConfig.from_dict({"adapt": {"epoch": 3}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"seed": "zero"})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"strict": 1})
    bad = tmp_path / "bad.toml"
    bad.write_text("seed = [")
    with pytest.raises(ConfigError):
        load_config(bad)


@pytest.mark.parametrize("change", [dict(mode="train"), dict(precision="f16"),
                                    dict(models={"mapper": "vgg"}), dict(data={"source": "dcase"}),
                                    dict(adapt={"d_every": 0})])
def test_config_validation(change):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(change).validate()


def test_config_digest_ignores_output_dir():
    a, b = RunConfig(out="x"), RunConfig(out="y")
    assert a.digest() == b.digest() != RunConfig(seed=1).digest()


def test_cli_bad_config_exits_2(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("nonsense = 1\n")
    assert cli.main(["synth", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert cli.main(["synth", "--seed", "-1", "--out", str(tmp_path / "o")]) == 2


def test_cli_evaluate_on_empty_manifest_fails(tmp_path):
    manifest = tmp_path / "empty.csv"
    D.write_manifest([], manifest)
    cfg = tmp_path / "c.toml"
    cfg.write_text(f'[data]\nsource = "dcase"\nmanifest = "{manifest}"\n')
    code = cli.main(["evaluate", "--config", str(cfg), "--out", str(tmp_path / "o")])
    assert code != 0


def test_cli_adapt_without_checkpoint_fails(tmp_path):
    code = cli.main(["adapt", "--config", str(_small(tmp_path)), "--out", str(tmp_path / "o")])
    assert code == 3


def test_cli_synth_writes_report(tmp_path):
    out = tmp_path / "run"
    assert cli.main(["synth", "--config", str(_small(tmp_path)), "--out", str(out)]) == 0
    names = {p.name for p in out.iterdir()}
    assert {"report.json", "report.txt", "pretrain.ckpt", "adapted.ckpt", "pretrain_trace.csv",
            "adapt_trace.csv", "confusion_target_adapted.csv"} <= names
    rep = json.loads((out / "report.json").read_text())
    assert set(rep["accuracy"]) == {"source/non-adapted", "target/non-adapted", "source/adapted", "target/adapted"}
    table = (out / "report.txt").read_text().splitlines()
    assert table[1].startswith("Source") and table[2].startswith("Target")


def test_staged_cli_matches_single_synth_run(tmp_path):
    cfg = str(_small(tmp_path))
    staged = tmp_path / "staged"
    for mode in ("pretrain", "adapt", "evaluate"):
        assert cli.main([mode, "--config", cfg, "--out", str(staged)]) == 0
    whole = tmp_path / "whole"
    assert cli.main(["synth", "--config", cfg, "--out", str(whole)]) == 0
    a = json.loads((staged / "report.json").read_text())["accuracy"]
    b = json.loads((whole / "report.json").read_text())["accuracy"]
    assert a == b


def test_features_mode_extracts_manifest(tmp_path):
    from scipy.io import wavfile

    rows = []
    for i, dev in enumerate("AB"):
        wavfile.write(tmp_path / f"{dev}.wav", 44100, (np.random.default_rng(i).standard_normal(44100) * 3000).astype(np.int16))
        rows.append(D.ManifestRow(f"clip{dev}", f"{dev}.wav", dev, "park"))
    D.write_manifest(rows, tmp_path / "m.csv")
    cfg = RunConfig(mode="features", out=str(tmp_path / "o"))
    cfg.data.manifest = str(tmp_path / "m.csv")
    assert run_experiment(cfg) == 0
    feats, meta = ckpt.read_container(tmp_path / "o" / "features.adda")
    assert feats["clipA"].shape == (64, 42) and meta["devices"] == {"clipA": "A", "clipB": "B"}


def test_corpus_pipeline_on_toy_audio(tmp_path):
    import runpy

    toy = runpy.run_path(str(Path(__file__).parents[1] / "scripts" / "toy_corpus.py"))
    toy["main"]([str(tmp_path), "--per-device", "A=30", "B=8", "C=8", "--seconds", "0.5"])
    cfg = tmp_path / "cfg.toml"
    cfg.write_text(f"""
[models]
mapper_widths = [16]
[data]
source = "dcase"
manifest = "{tmp_path / 'manifest.csv'}"
features = "{tmp_path / 'features.adda'}"
[pretrain]
epochs = 2
[adapt]
epochs = 1
""")
    out = tmp_path / "run"
    assert cli.main(["features", "--config", str(cfg), "--out", str(out)]) == 0
    assert cli.main(["synth", "--config", str(cfg), "--out", str(out)]) == 0
    rep = json.loads((out / "report.json").read_text())
    target = next(r for r in rep["reports"] if r["domain"] == "target")
    assert set(target["per_device"]) == {"B", "C"}
    assert target["class_names"] == list(D.SCENES)
