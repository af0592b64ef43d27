import csv
import json

import numpy as np
import pytest

from surrogate_iva import cli
from surrogate_iva.wavio import write_wav

from conftest import make_mixture


def run(*argv):
    try:
        return cli.main([str(a) for a in argv])
    except SystemExit as err:
        return err.code


def small_dataset(path, **kw):
    args = dict(sources=2, items=10, seed=7, duration=0.5, taps=8)
    args.update(kw)
    flags = []
    for k, v in args.items():
        flags += [f"--{k.replace('_', '-')}"] + ([] if v is None else [v])
    assert run("simulate", "--out", path, *flags) == 0
    return path


def test_simulate_manifest(tmp_path):
    d = small_dataset(tmp_path / "d")
    lines = (d / "manifest.jsonl").read_text().splitlines()
    assert len(lines) == 10
    assert {json.loads(l)["M"] for l in lines} == {2}


def test_simulate_rerun_identical(tmp_path):
    a = small_dataset(tmp_path / "a")
    b = small_dataset(tmp_path / "b")
    assert (a / "manifest.jsonl").read_bytes() == (b / "manifest.jsonl").read_bytes()
    for f in sorted((a / "audio").iterdir()):
        assert f.read_bytes() == (b / "audio" / f.name).read_bytes()


def test_simulate_missing_out(capsys):
    assert run("simulate", "--items", 3) == 2
    assert "usage" in capsys.readouterr().err


def write_mixture(tmp_path, n_sources=2):
    x, refs = make_mixture(3, n_sources=n_sources, duration=1.0)
    write_wav(tmp_path / "mix.wav", x)
    paths = []
    for k, r in enumerate(refs):
        write_wav(tmp_path / f"ref{k}.wav", r[None])
        paths.append(tmp_path / f"ref{k}.wav")
    return tmp_path / "mix.wav", paths


def test_separate_with_trace(tmp_path):
    mix, refs = write_mixture(tmp_path)
    out = tmp_path / "out"
    code = run("separate", mix, "--out", out, "--model", "laplace", "--algo", "iss", "--iters", 20,
               "--frame-size", 512, "--refs", *refs)
    assert code == 0
    assert (out / "source0.wav").exists() and (out / "source1.wav").exists()
    with open(out / "trace.csv") as fh:
        rows = list(csv.DictReader(fh))
    for k in ("0", "1"):
        assert sum(r["source"] == k for r in rows) == 21
    final = [float(r["si_sdr_db"]) for r in rows if r["iter"] == "20"]
    assert min(final) > 10.0
    nll = np.loadtxt(out / "nll.csv", delimiter=",", skiprows=1)[:, 1]
    assert np.all(np.diff(nll) <= 1e-8 * np.abs(nll[1:]))


def test_separate_ip2_three_channels(tmp_path):
    mix, _ = write_mixture(tmp_path, n_sources=3)
    assert run("separate", mix, "--out", tmp_path / "o", "--algo", "ip2", "--frame-size", 512) == 2


def test_separate_missing_input(tmp_path):
    assert run("separate", tmp_path / "nope.wav", "--out", tmp_path / "o") == 3


def test_separate_glu_needs_weights(tmp_path, monkeypatch):
    monkeypatch.delenv("SURROGATE_IVA_WEIGHTS", raising=False)
    mix, _ = write_mixture(tmp_path)
    assert run("separate", mix, "--out", tmp_path / "o", "--model", "glu", "--frame-size", 512) == 2


def test_separate_bad_refs_count(tmp_path):
    mix, refs = write_mixture(tmp_path)
    assert run("separate", mix, "--out", tmp_path / "o", "--frame-size", 512, "--refs", refs[0]) == 2


def test_eval_table(tmp_path):
    d = small_dataset(tmp_path / "d", mixing="instantaneous", test_frac=0.3, duration=1.5, no_noise=None)
    out = tmp_path / "e"
    assert run("eval", "--data", d, "--out", out, "--frame-size", 512) == 0
    with open(out / "results.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3
    assert set(rows[0]) == {"id", "model", "algo", "loss", "M", "si_sdr_db", "si_sir_db", "input_si_sdr_db"}
    summary = json.loads((out / "summary.json").read_text())
    assert summary["all_finite"] and summary["n_items"] == 3
    assert summary["median_si_sdr_db"] > summary["median_input_si_sdr_db"]


def test_eval_env_data(tmp_path, monkeypatch):
    d = small_dataset(tmp_path / "d", test_frac=0.2)
    monkeypatch.setenv("SURROGATE_IVA_DATA", str(d))
    assert run("eval", "--out", tmp_path / "e", "--frame-size", 256, "--iters", 2) == 0


def test_eval_empty_split(tmp_path):
    d = small_dataset(tmp_path / "d")
    assert run("eval", "--data", d, "--out", tmp_path / "e", "--split", "nosuch") == 2


def test_train_then_eval_glu(tmp_path):
    d = small_dataset(tmp_path / "d", val_frac=0.2, test_frac=0.2)
    w = tmp_path / "w.ssma"
    log = tmp_path / "log.jsonl"
    code = run("train", "--data", d, "--out", w, "--log", log, "--epochs", 1, "--iters", 2,
               "--frame-size", 256, "--hidden", 4, "--sample-length", 0.5, "--seed", 1)
    assert code == 0 and w.exists()
    records = [json.loads(l) for l in log.read_text().splitlines()]
    assert [r["epoch"] for r in records if r["split"] == "val"] == [0, 1]
    for algo in ("iss", "ip2"):
        out = tmp_path / algo
        assert run("eval", "--data", d, "--out", out, "--model", "glu", "--weights", w,
                   "--frame-size", 256, "--iters", 2, "--algo", algo) == 0
        summary = json.loads((out / "summary.json").read_text())
        assert summary["all_finite"] and summary["loss"] == "sisdr"


def test_train_lr_zero_keeps_validation(tmp_path):
    d = small_dataset(tmp_path / "d", val_frac=0.2, test_frac=0.2)
    log = tmp_path / "log.jsonl"
    code = run("train", "--data", d, "--out", tmp_path / "w.ssma", "--log", log, "--epochs", 2, "--iters", 2,
               "--frame-size", 256, "--hidden", 4, "--sample-length", 0.5, "--lr", 0)
    assert code == 0
    vals = [json.loads(l)["value"] for l in log.read_text().splitlines() if json.loads(l)["split"] == "val"]
    assert vals[-1] == vals[0]


def test_eval_glu_wrong_bins(tmp_path):
    d = small_dataset(tmp_path / "d", val_frac=0.2, test_frac=0.2)
    w = tmp_path / "w.ssma"
    assert run("train", "--data", d, "--out", w, "--epochs", 0, "--frame-size", 256, "--hidden", 4,
               "--sample-length", 0.5) == 0
    assert run("eval", "--data", d, "--out", tmp_path / "e", "--model", "glu", "--weights", w,
               "--frame-size", 512) == 2
