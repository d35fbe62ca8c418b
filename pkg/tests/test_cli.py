import json

import numpy as np
import pytest

from iar.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, build_parser, main
from iar.config import ConfigError, RunConfig
from iar.molio import read_xyz_file, template, write_xyz_file


@pytest.fixture
def methane_xyz(tmp_path):
    p = tmp_path / "methane.xyz"
    m = template("methane")
    rng = np.random.default_rng(0)
    write_xyz_file(p, m.with_coords(m.coords + rng.uniform(-0.02, 0.02, m.coords.shape)))
    return p


# ---- config -----------------------------------------------------------------


def test_config_defaults_round_trip():
    cfg = RunConfig()
    assert RunConfig.from_json(cfg.to_json(), env={}) == cfg


@pytest.mark.parametrize(
    "doc",
    [{"bogus": 1}, {"lr": "fast"}, {"steps": 1.5}, {"d_type": 10}, {"templates": ["benzene"]}, {"class_id": 99}],
)
def test_config_rejects(doc):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(doc, env={})


def test_seed_env_override():
    assert RunConfig.from_dict({"seed": 1}, env={"IAR_SEED": "42"}).seed == 42
    with pytest.raises(ConfigError):
        RunConfig.from_dict({}, env={"IAR_SEED": "x"})


# ---- tokenize / fuzz ---------------------------------------------------------


def test_tokenize_lines(methane_xyz, capsys):
    assert main(["tokenize", str(methane_xyz)]) == EXIT_OK
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 5 and lines[0].split()[0] == "6"
    assert all(len(ln.split()) == 4 for ln in lines)


def test_tokenize_json_to_file(methane_xyz, tmp_path):
    out = tmp_path / "tok.json"
    assert main(["tokenize", str(methane_xyz), "--json", "--out", str(out)]) == EXIT_OK
    doc = json.loads(out.read_text())
    assert isinstance(doc, list) and len(doc) == 5
    assert all(set(d) == {"charge", "x", "y", "z"} for d in doc)


def test_tokenize_missing_file(tmp_path, capsys):
    assert main(["tokenize", str(tmp_path / "nope.xyz")]) == EXIT_DATA
    assert "nope.xyz" in capsys.readouterr().err


def test_tokenize_bad_xyz(tmp_path):
    p = tmp_path / "bad.xyz"
    p.write_text("2\n\nH 0 0 0\n")
    assert main(["tokenize", str(p)]) == EXIT_DATA


def test_tokenize_fallback_warns(tmp_path, capsys):
    p = tmp_path / "co2.xyz"
    write_xyz_file(p, template("co2"))
    assert main(["tokenize", str(p)]) == EXIT_OK
    assert "fallback" in capsys.readouterr().err


def test_fuzz_pass(methane_xyz, capsys):
    assert main(["fuzz-invariance", str(methane_xyz), "--trials", "30", "--seed", "3"]) == EXIT_OK
    assert capsys.readouterr().out.startswith("PASS")


def test_fuzz_degenerate_skipped(tmp_path, capsys):
    p = tmp_path / "co2.xyz"
    write_xyz_file(p, template("co2"))
    assert main(["fuzz-invariance", str(p), "--trials", "10"]) == EXIT_OK
    assert "skipped" in capsys.readouterr().out


def test_fuzz_zero_trials_is_usage_error(methane_xyz):
    with pytest.raises(SystemExit) as exc:
        main(["fuzz-invariance", str(methane_xyz), "--trials", "0"])
    assert exc.value.code == EXIT_USAGE


def test_help_lists_flags(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["sample", "--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for flag in ("--checkpoint", "--class-id", "--scale", "--temperature", "--n"):
        assert flag in out
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0


def test_unknown_subcommand_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        build_parser().parse_args(["frobnicate"])
    assert exc.value.code == EXIT_USAGE


# ---- synth / train / sample / eval -------------------------------------------


def test_synth_and_eval(tmp_path, capsys):
    data = tmp_path / "data"
    assert main(["synth", "--out", str(data), "--count", "5", "--seed", "1"]) == EXIT_OK
    files = sorted(data.glob("*.xyz"))
    assert len(files) == 5 and read_xyz_file(files[2]).class_id == 3
    capsys.readouterr()
    assert main(["eval", str(data), "--target-class", "3"]) == EXIT_OK
    report = json.loads((data / "report.json").read_text())
    assert report["validity"] == 1.0 and report["hit_rate"] == 0.2
    assert "validity" in capsys.readouterr().out


def test_eval_errors(tmp_path):
    assert main(["eval", str(tmp_path)]) == EXIT_DATA  # no xyz files
    main(["synth", "--out", str(tmp_path / "d"), "--count", "1"])
    assert main(["eval", str(tmp_path / "d"), "--target-class", "4"]) == EXIT_DATA


def tiny_config(path, **over):
    doc = {
        "n_molecules": 6,
        "d_type": 12,
        "anchor_shape": [2, 2, 1],
        "d_ff": 8,
        "denoiser_hidden": 8,
        "n_layers": 1,
        "steps": 8,
        "batch_size": 4,
        "n_steps": 4,
        "n_samples": 3,
        "max_len": 6,
    }
    doc.update(over)
    path.write_text(json.dumps(doc))
    return path


def test_train_sample_eval_pipeline(tmp_path, monkeypatch):
    monkeypatch.delenv("IAR_SEED", raising=False)
    cfg = tiny_config(tmp_path / "run.json")
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert main(["train", "--config", str(cfg), "--out", str(out1)]) == EXIT_OK
    assert main(["train", "--config", str(cfg), "--out", str(out2)]) == EXIT_OK
    assert (out1 / "model.iar").read_bytes() == (out2 / "model.iar").read_bytes()
    rows = (out1 / "loss.csv").read_text().splitlines()
    assert rows[0] == "step,loss_type,loss_diff" and len(rows) == 9
    assert (out1 / "loss.png").stat().st_size > 0

    samples = tmp_path / "s"
    args = ["sample", "--config", str(cfg), "--checkpoint", str(out1 / "model.iar"), "--out", str(samples)]
    assert main(args + ["--class-id", "3", "--scale", "2"]) == EXIT_OK
    names = sorted(p.name for p in samples.glob("*.xyz"))
    assert names == ["sample_0_0.xyz", "sample_0_1.xyz", "sample_0_2.xyz"]
    first = (samples / "sample_0_0.xyz").read_text()
    assert main(args + ["--class-id", "3", "--scale", "2"]) == EXIT_OK
    assert (samples / "sample_0_0.xyz").read_text() == first
    assert main(["eval", str(samples)]) == EXIT_OK


def test_seed_env_changes_training(tmp_path, monkeypatch):
    cfg = tiny_config(tmp_path / "run.json", steps=3)
    main(["train", "--config", str(cfg), "--out", str(tmp_path / "a")])
    monkeypatch.setenv("IAR_SEED", "17")
    main(["train", "--config", str(cfg), "--out", str(tmp_path / "b")])
    assert json.loads((tmp_path / "b" / "config.json").read_text())["seed"] == 17
    assert (tmp_path / "a" / "loss.csv").read_text() != (tmp_path / "b" / "loss.csv").read_text()


def test_train_rejects_bad_config(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{"steps": 10, "colour": "blue"}')
    assert main(["train", "--config", str(p)]) == EXIT_DATA
    p.write_text("{not json")
    assert main(["train", "--config", str(p)]) == EXIT_DATA


def test_sample_errors(tmp_path):
    bad = tmp_path / "x.iar"
    bad.write_bytes(b"IAR1garbage")
    assert main(["sample", "--checkpoint", str(bad), "--out", str(tmp_path)]) == EXIT_DATA
    cfg = tiny_config(tmp_path / "run.json", steps=1)
    main(["train", "--config", str(cfg), "--out", str(tmp_path / "m")])
    ck = str(tmp_path / "m" / "model.iar")
    assert main(["sample", "--checkpoint", ck, "--scale", "-1", "--out", str(tmp_path)]) == EXIT_USAGE


def test_divergence_exit_code(tmp_path, monkeypatch):
    import iar.pipeline as pipeline
    from iar.armodel import DivergenceError

    def boom(*a, **k):
        raise DivergenceError("non-finite loss at step 0")

    monkeypatch.setattr(pipeline, "train", boom)
    cfg = tiny_config(tmp_path / "run.json")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3
