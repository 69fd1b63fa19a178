import json
import struct

import numpy as np
import pytest

from fusionact.checkpoint import CheckpointError, dumps, load_checkpoint, loads, read_manifest, save_checkpoint
from fusionact.cli import main
from fusionact.config import ConfigError, parse_config
from fusionact.data import UCIHAR, load_ucihar
from fusionact.model import FusionModel, forward

SMALL_CONFIG = """\
# tiny widths keep the synthetic runs fast
dataset = ucihar
root = {root}
batch_size = 16
epochs = 3
seed = 42
pathway_widths = 8:2,8:2
guidance_widths = 8
"""


def _model(seed=0):
    m = FusionModel.init(
        UCIHAR.static_labels, UCIHAR.dynamic_labels, 9, seed=seed,
        pathway_widths=((4, 2), (6, 2)), guidance_widths=(5,), window_len=32, dataset="ucihar",
    )
    rng = np.random.default_rng(seed)
    for _, buf in m.named_buffers():
        buf[...] = rng.uniform(0.5, 1.5, size=buf.shape)
    m.norm_mean = rng.normal(size=9)
    m.norm_std = rng.uniform(0.1, 2, size=9)
    return m


class TestCheckpoint:
    def test_byte_identical_round_trip(self, tmp_path):
        m = _model()
        save_checkpoint(m, tmp_path / "a.ck")
        loaded = load_checkpoint(tmp_path / "a.ck")
        save_checkpoint(loaded, tmp_path / "b.ck")
        assert (tmp_path / "a.ck").read_bytes() == (tmp_path / "b.ck").read_bytes()
        # normalization stats survive exactly
        assert loaded.norm_mean.tobytes() == m.norm_mean.tobytes()
        assert loaded.class_order == m.class_order

    def test_predictions_survive(self):
        m = _model(1)
        loaded = loads(dumps(m))
        x = np.random.default_rng(2).normal(size=(100, 9, 32))
        a = forward(x, m).probs.data
        b = forward(x, loaded).probs.data
        assert np.max(np.abs(a - b)) <= 1e-6
        np.testing.assert_array_equal(a.argmax(axis=1), b.argmax(axis=1))

    def test_header_layout(self):
        blob = dumps(_model())
        assert blob[:4] == b"FACT"
        version, length = struct.unpack("<II", blob[4:12])
        manifest = json.loads(blob[12 : 12 + length])
        assert version == 1 and manifest["kind"] == "full"
        assert manifest["class_order"] == ["SI", "ST", "LA", "WA", "WU", "WD"]

    @pytest.mark.parametrize(
        "mutate, match",
        [
            (lambda b: b"XXXX" + b[4:], "magic"),
            (lambda b: b[:4] + struct.pack("<I", 9) + b[8:], "version"),
            (lambda b: b[: len(b) // 2], "truncated"),
            (lambda b: b + b"\0", "trailing"),
        ],
    )
    def test_corruption(self, mutate, match):
        with pytest.raises(CheckpointError, match=match):
            loads(mutate(dumps(_model())))

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "none.ck")


class TestConfig:
    def test_parse(self):
        cfg = parse_config("dataset = motionsense\nepochs = auto\nfreeze_experts = false\n")
        assert cfg.dataset == "motionsense" and cfg.epochs is None and cfg.freeze_experts is False

    @pytest.mark.parametrize("text", ["bogus = 1", "batch_size = x", "stage = 3", "dataset = other", "lr"])
    def test_rejects(self, text):
        with pytest.raises(ConfigError):
            parse_config(text)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory, ucihar_root):
    work = tmp_path_factory.mktemp("cli")
    cfg = work / "run.cfg"
    cfg.write_text(SMALL_CONFIG.format(root=ucihar_root))
    paths = {"cfg": cfg, "root": ucihar_root, "work": work}
    for stage, name in (("1-static", "static"), ("1-dynamic", "dynamic")):
        assert main(["train", "--config", str(cfg), "--stage", stage, "--out", str(work / f"{name}.ck")]) == 0
        paths[name] = work / f"{name}.ck"
    args = ["train", "--config", str(cfg), "--stage", "2", "--static-ck", str(paths["static"])]
    args += ["--dynamic-ck", str(paths["dynamic"]), "--out", str(work / "full.ck")]
    assert main(args) == 0
    paths["full"] = work / "full.ck"
    return paths


def _err_line(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("fusionact: error[")
    return err[0]


class TestCli:
    def test_stage1_manifest(self, workspace, capsys):
        m = read_manifest(workspace["static"])
        assert m["kind"] == "expert-static" and m["static_labels"] == ["SI", "ST", "LA"]
        assert m["static_blocks"] is not None and m["dynamic_blocks"] is None
        assert main(["inspect", "--ck", str(workspace["static"])]) == 0
        assert json.loads(capsys.readouterr().out)["kind"] == "expert-static"

    def test_train_output(self, workspace, capsys):
        out = workspace["work"] / "again.ck"
        assert main(["train", "--config", str(workspace["cfg"]), "--stage", "1-static", "--out", str(out)]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[0].split(",")[0] == "0" and len(lines[0].split(",")) == 5
        assert lines[-1].startswith("final stage=1-static") and "classes=SI,ST,LA" in lines[-1]
        # same config and seed -> byte-identical checkpoint
        assert out.read_bytes() == workspace["static"].read_bytes()

    def test_stage2_requires_experts(self, workspace, capsys):
        rc = main(["train", "--config", str(workspace["cfg"]), "--stage", "2", "--static-ck", str(workspace["static"])])
        assert rc == 2
        assert "--dynamic-ck" in _err_line(capsys)

    def test_stage2_swapped_experts(self, workspace, capsys):
        args = ["train", "--config", str(workspace["cfg"]), "--stage", "2", "--static-ck", str(workspace["dynamic"])]
        args += ["--dynamic-ck", str(workspace["static"]), "--out", str(workspace["work"] / "x.ck")]
        assert main(args) == 4
        _err_line(capsys)

    def test_eval_full(self, workspace, capsys, tmp_path):
        csv = tmp_path / "confusion.csv"
        rc = main(["eval", "--ck", str(workspace["full"]), "--dataset", "ucihar", "--root", str(workspace["root"]),
                   "--confusion-out", str(csv)])
        assert rc == 0
        out = capsys.readouterr().out
        assert out.startswith("accuracy ")
        rows = csv.read_text().strip().splitlines()
        assert rows[0] == "actual,SI,ST,LA,WA,WU,WD"
        for row in rows[1:]:
            assert abs(sum(float(v) for v in row.split(",")[1:]) - 1.0) < 1e-9

    def test_eval_expert(self, workspace, capsys):
        rc = main(["eval", "--ck", str(workspace["dynamic"]), "--dataset", "ucihar", "--root", str(workspace["root"])])
        assert rc == 0
        assert "WA" in capsys.readouterr().out

    def test_eval_wrong_dataset(self, workspace, capsys, motionsense_root):
        rc = main(["eval", "--ck", str(workspace["full"]), "--dataset", "motionsense", "--root", str(motionsense_root)])
        assert rc == 4
        assert "error[mismatch]" in _err_line(capsys)

    def test_eval_missing_data(self, workspace, capsys, tmp_path):
        rc = main(["eval", "--ck", str(workspace["full"]), "--dataset", "ucihar", "--root", str(tmp_path)])
        assert rc == 3
        _err_line(capsys)

    def test_infer(self, workspace, capsys, tmp_path):
        test = load_ucihar(workspace["root"], "test")
        path = tmp_path / "w.csv"
        np.savetxt(path, test.X[0], delimiter=",")
        assert main(["infer", "--ck", str(workspace["full"]), "--input", str(path)]) == 0
        out = dict(line.split(" ", 1) for line in capsys.readouterr().out.strip().splitlines())
        assert out["label"] in UCIHAR.labels
        probs = [float(kv.split("=")[1]) for kv in out["probs"].split(",")]
        assert len(probs) == 6 and abs(sum(probs) - 1) <= 1e-6
        assert 0 < float(out["gate"]) < 1

    def test_infer_bad_shape(self, workspace, capsys, tmp_path):
        path = tmp_path / "w.csv"
        np.savetxt(path, np.zeros((8, 128)), delimiter=",")
        assert main(["infer", "--ck", str(workspace["full"]), "--input", str(path)]) == 3
        assert "window shape" in _err_line(capsys)

    def test_corrupt_checkpoint(self, workspace, capsys, tmp_path):
        bad = tmp_path / "bad.ck"
        bad.write_bytes(workspace["full"].read_bytes()[:100])
        assert main(["inspect", "--ck", str(bad)]) == 4
        _err_line(capsys)
        path = tmp_path / "w.csv"
        np.savetxt(path, np.zeros((9, 128)), delimiter=",")
        assert main(["infer", "--ck", str(bad), "--input", str(path)]) == 4
        _err_line(capsys)

    def test_config_errors(self, workspace, capsys, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text(workspace["cfg"].read_text() + "learning_rate = 0.1\n")
        assert main(["train", "--config", str(cfg)]) == 2
        assert "learning_rate" in _err_line(capsys)
        assert main(["train"]) == 2
        _err_line(capsys)
        assert main(["frobnicate"]) == 2
        _err_line(capsys)
