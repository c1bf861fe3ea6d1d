import json

import numpy as np
import pytest

from sleepalign import cli, edf
from conftest import build_edf_bytes


@pytest.fixture
def edf_on_disk(tmp_path):
    rng = np.random.default_rng(0)
    n_records, spr = 90, 100  # 90 s at 100 Hz -> 3 epochs
    signals = [dict(label="EEG FPZ-CZ", physical_min=-250.0, physical_max=250.0,
                    digital_min=-2048, digital_max=2047, samples_per_record=spr,
                    digital=rng.integers(-1000, 1000, size=n_records * spr))]
    raw = build_edf_bytes(signals, n_records=n_records, record_duration=1.0)
    edf_path = tmp_path / "rec.edf"
    edf_path.write_bytes(raw)
    hyp_path = tmp_path / "rec.hyp"
    hyp_path.write_text("W\n2\n3\n")
    return edf_path, hyp_path


def run(argv):
    return cli.main([str(a) for a in argv])


class TestIngest:
    def test_fixture_roundtrip(self, edf_on_disk, tmp_path):
        edf_path, hyp_path = edf_on_disk
        out = tmp_path / "out"
        assert run(["ingest", "--edf", edf_path, "--hypnogram", hyp_path,
                    "--channel", "EEG FPZ-CZ", "--out", out]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["n_epochs"] == 3
        assert manifest["class_counts"]["N3"] == 1
        assert (out / "run_manifest.json").exists()

    def test_missing_channel_nonzero_exit(self, edf_on_disk, tmp_path, capsys):
        edf_path, hyp_path = edf_on_disk
        assert run(["ingest", "--edf", edf_path, "--hypnogram", hyp_path,
                    "--channel", "C4-A1", "--out", tmp_path / "o"]) == 1
        assert "FPZ-CZ" in capsys.readouterr().err

    def test_rerun_byte_identical(self, edf_on_disk, tmp_path):
        edf_path, hyp_path = edf_on_disk
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            run(["ingest", "--edf", edf_path, "--hypnogram", hyp_path,
                 "--channel", "EEG FPZ-CZ", "--out", out])
            outs.append((out / "epochs.npy").read_bytes())
        assert outs[0] == outs[1]


@pytest.fixture
def synth_dirs(tmp_path):
    src = tmp_path / "src"
    tgt = tmp_path / "tgt"
    assert run(["synth", "--out", src, "--seed", 1,
                "--set", "n_per_class=8", "--set", "domain=source"]) == 0
    assert run(["synth", "--out", tgt, "--seed", 2,
                "--set", "n_per_class=4", "--set", "domain=target"]) == 0
    return src, tgt


@pytest.fixture
def pretrained(synth_dirs, tmp_path):
    src, tgt = synth_dirs
    out = tmp_path / "ckpt"
    code = run(["pretrain", "--out", out, "--seed", 0,
                "--set", f"dataset={src}",
                "--set", 'train={"epochs": 4, "batch_size": 16, "lr": 0.003}'])
    assert code == 0
    return src, tgt, out / "model.ckpt"


class TestPipelineCommands:
    def test_align_select_all(self, pretrained, tmp_path):
        src, tgt, ckpt = pretrained
        out = tmp_path / "align"
        assert run(["align", "--out", out, "--seed", 0,
                    "--set", f"checkpoint={ckpt}",
                    "--set", f"source={src}", "--set", f"target={tgt}",
                    "--set", 'policy={"mode": "absolute", "tau": 0.0}',
                    "--set", "batch_size=16"]) == 0
        rows = (out / "scoring.csv").read_text().strip().splitlines()[1:]
        assert all(r.split(",")[3] == "1" for r in rows)

    def test_finetune_and_eval(self, pretrained, tmp_path):
        src, tgt, ckpt = pretrained
        ft = tmp_path / "ft"
        assert run(["finetune", "--out", ft, "--seed", 0,
                    "--set", f"checkpoint={ckpt}",
                    "--set", f"source={src}", "--set", f"target={tgt}",
                    "--set", 'policy={"mode": "top_quantile", "quantile": 0.5}',
                    "--set", 'train={"epochs": 2, "batch_size": 16, "lr": 0.003}',
                    "--set", "batch_size=16"]) == 0
        ev = tmp_path / "ev"
        assert run(["eval", "--out", ev, "--seed", 0,
                    "--set", f"checkpoint={ft / 'model.ckpt'}",
                    "--set", f"dataset={src}"]) == 0
        report = json.loads((ev / "eval_report.json").read_text())
        assert 0.0 <= report["accuracy"] <= 1.0
        assert (ev / "confusion.csv").exists()

    def test_eval_determinism(self, pretrained, tmp_path):
        src, tgt, ckpt = pretrained
        outs = []
        for name in ("e1", "e2"):
            out = tmp_path / name
            run(["eval", "--out", out, "--seed", 0,
                 "--set", f"checkpoint={ckpt}", "--set", f"dataset={src}"])
            data = json.loads((out / "eval_report.json").read_text())
            data.pop("wall_clock")
            outs.append(data)
        assert outs[0] == outs[1]

    def test_missing_config_key(self, tmp_path):
        with pytest.raises(SystemExit):
            run(["pretrain", "--out", tmp_path / "x"])

    def test_report_table(self, pretrained, tmp_path, capsys):
        src, tgt, ckpt = pretrained
        ev = tmp_path / "ev"
        run(["eval", "--out", ev, "--seed", 0,
             "--set", f"checkpoint={ckpt}", "--set", f"dataset={src}",
             "--set", "protocol=self"])
        assert run(["report", ev / "eval_report.json"]) == 0
        out = capsys.readouterr().out
        assert "self" in out and "accuracy" in out


class TestConfigHandling:
    def test_dotted_overrides(self):
        cfg = cli._apply_overrides({}, ["a.b.c=1", "a.d=hello", "e=[1,2]"])
        assert cfg == {"a": {"b": {"c": 1}, "d": "hello"}, "e": [1, 2]}

    def test_bad_override_rejected(self):
        with pytest.raises(SystemExit):
            cli._apply_overrides({}, ["noequals"])

    def test_config_file_plus_override(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text('{"n_per_class": 3, "domain": "source"}')

        class A:
            config = str(p)
            set = ["domain=target"]

        cfg = cli._load_config(A())
        assert cfg == {"n_per_class": 3, "domain": "target"}


class TestManifest:
    def test_manifest_fields(self, synth_dirs):
        src, _ = synth_dirs
        manifest = json.loads((src / "run_manifest.json").read_text())
        assert manifest["subcommand"] == "synth"
        assert manifest["seed"] == 1
        assert "tool_version" in manifest and "wall_clock" in manifest

    def test_synth_rerun_identical(self, tmp_path):
        for name in ("a", "b"):
            run(["synth", "--out", tmp_path / name, "--seed", 7,
                 "--set", "n_per_class=2"])
        assert (tmp_path / "a" / "epochs.npy").read_bytes() == \
               (tmp_path / "b" / "epochs.npy").read_bytes()
