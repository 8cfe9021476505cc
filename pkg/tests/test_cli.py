import json

import numpy as np
import pytest

from kwsmixer.cli import main
from kwsmixer.data import load_manifest, read_wav, write_wav
from kwsmixer.dsp import Waveform


def run(*argv):
    return main([str(a) for a in argv])


def simulate(tmp_path, name="corpus", n=8, fields="near,far", seed=3):
    out = tmp_path / name
    rc = run("simulate", "--out", out, "--seed", seed, "--n-train", n,
             "--n-dev", 4, "--n-eval", 4, "--fields", fields,
             "--duration", 0.5)
    assert rc == 0
    return out


class TestSimulate:
    def test_counts_and_manifest(self, tmp_path, capsys):
        out = simulate(tmp_path, n=5, fields="far")
        entries = load_manifest(out / "train" / "manifest.jsonl")
        assert len(entries) == 5
        assert all(e.field_tag == "far" for e in entries)
        w = read_wav(entries[0].audio[0])
        assert w.n_channels == 6

    def test_refuses_nonempty_without_force(self, tmp_path, capsys):
        out = simulate(tmp_path, n=2, fields="near")
        rc = run("simulate", "--out", out, "--n-train", 2, "--n-dev", 1,
                 "--n-eval", 1, "--fields", "near")
        assert rc == 1
        assert "--force" in capsys.readouterr().err

    def test_same_seed_identical(self, tmp_path):
        a = simulate(tmp_path, "a", n=3, fields="far")
        b = simulate(tmp_path, "b", n=3, fields="far")
        ea = load_manifest(a / "train" / "manifest.jsonl")
        eb = load_manifest(b / "train" / "manifest.jsonl")
        for x, y in zip(ea, eb):
            assert read_wav(x.audio[0]).samples.tobytes() == \
                read_wav(y.audio[0]).samples.tobytes()

    def test_split_ids_disjoint(self, tmp_path):
        out = simulate(tmp_path, n=4)
        ids = {}
        for split in ("train", "dev", "eval"):
            ids[split] = {e.id for e in
                          load_manifest(out / split / "manifest.jsonl")}
        assert not (ids["train"] & ids["dev"])
        assert not (ids["train"] & ids["eval"])
        assert not (ids["dev"] & ids["eval"])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli-train")
    corpus = tmp / "corpus"
    rc = run("simulate", "--out", corpus, "--seed", 1, "--n-train", 24,
             "--n-dev", 8, "--n-eval", 8, "--fields", "far",
             "--duration", 0.5, "--snr-lo", 15, "--snr-hi", 20)
    assert rc == 0
    rundir = tmp / "run"
    rc = run("train", "--corpus", corpus, "--out", rundir, "--model", "mini",
             "--epochs", "6", "--batch-size", 8, "--lr", "2e-3", "--seed", 0)
    assert rc == 0
    return corpus, rundir


class TestTrain:
    def test_outputs_exist(self, trained, capsys):
        _, rundir = trained
        assert (rundir / "best.ckpt").exists()
        assert (rundir / "last.ckpt").exists()
        assert (rundir / "metrics.jsonl").exists()
        assert (rundir / "config.json").exists()

    def test_parameter_count_printed(self, tmp_path, capsys):
        corpus = simulate(tmp_path, n=4, fields="near")
        rc = run("train", "--corpus", corpus, "--out", tmp_path / "r",
                 "--model", "mini-1ch", "--epochs", "1", "--batch-size", 4)
        assert rc == 0
        out = capsys.readouterr().out
        assert "parameter count:" in out

    def test_channel_scaling_ordering(self, capsys):
        from kwsmixer.model import MixerModel, reference_config
        n1 = MixerModel(reference_config("ref-1ch")).parameter_count()
        n6 = MixerModel(reference_config("ref-6ch")).parameter_count()
        nc = MixerModel(reference_config("ref-6ch-centroid")).parameter_count()
        assert n1 < n6 < nc


class TestEvalPredict:
    def test_eval_prints_report(self, trained, tmp_path, capsys):
        corpus, rundir = trained
        rc = run("eval", "--checkpoint", rundir / "last.ckpt",
                 "--manifest", corpus / "eval" / "manifest.jsonl",
                 "--out", tmp_path / "report.tsv")
        assert rc == 0
        out = capsys.readouterr().out
        assert "FAR=" in out and "Score=" in out
        assert (tmp_path / "report.tsv").exists()

    def test_export_hist(self, trained, tmp_path, capsys):
        corpus, rundir = trained
        hist = tmp_path / "hist.tsv"
        rc = run("eval", "--checkpoint", rundir / "last.ckpt",
                 "--manifest", corpus / "eval" / "manifest.jsonl",
                 "--export-hist", hist)
        assert rc == 0
        header = hist.read_text().splitlines()[0]
        assert header == "bin_lo\tbin_hi\tcount_neg\tcount_pos"

    def test_channel_mismatch_rejected(self, trained, tmp_path, capsys):
        corpus, rundir = trained
        near = simulate(tmp_path, "near", n=2, fields="near")
        rc = run("eval", "--checkpoint", rundir / "last.ckpt",
                 "--manifest", near / "eval" / "manifest.jsonl")
        assert rc == 1
        assert "channels" in capsys.readouterr().err

    def test_predict_single_file(self, trained, capsys):
        corpus, rundir = trained
        [e] = load_manifest(corpus / "eval" / "manifest.jsonl")[:1]
        rc = run("predict", "--checkpoint", rundir / "last.ckpt", e.audio[0])
        assert rc == 0
        out = capsys.readouterr().out
        p = float(out.strip().split("=")[-1])
        assert 0.0 <= p <= 1.0


class TestBeamformWpe:
    def test_beamform_pass_through_channel(self, tmp_path, capsys):
        rng = np.random.default_rng(0)
        x = (rng.normal(size=(6, 8000)) * 0.05).astype(np.float32).astype(float)
        src = tmp_path / "in.wav"
        write_wav(Waveform(x, 16000), src, codec="float32")
        out = tmp_path / "out.wav"
        assert run("beamform", src, "--out", out) == 0
        y = read_wav(out)
        assert y.n_channels == 4
        np.testing.assert_array_equal(y.samples[3], read_wav(src).samples[0])

    def test_beamform_rejects_wrong_channels(self, tmp_path, capsys):
        src = tmp_path / "in.wav"
        write_wav(Waveform(np.zeros((2, 8000)), 16000), src)
        assert run("beamform", src, "--out", tmp_path / "o.wav") == 1
        assert "6 channels" in capsys.readouterr().err

    def test_wpe_anechoic_energy_within_1db(self, tmp_path, capsys):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(4, 48000)) * 0.05
        src = tmp_path / "in.wav"
        write_wav(Waveform(x, 16000), src, codec="float32")
        out = tmp_path / "out.wav"
        assert run("wpe", src, "--out", out) == 0
        y = read_wav(out).samples
        core = slice(1024, 47000)
        e_in = np.sum(read_wav(src).samples[:, core] ** 2)
        e_out = np.sum(y[:, core] ** 2)
        assert abs(10 * np.log10(e_out / e_in)) < 1.0
