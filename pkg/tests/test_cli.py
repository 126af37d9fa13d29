"""CLI subcommands: pipeline wiring, exit codes, determinism, reports."""

import hashlib
import json

import numpy as np
import pytest

import kvcore
from kvcore.cli import main

TINY = [
    "--d-e", "32", "--n-seqs", "4", "--seq-len", "48",
    "--train-steps", "20", "--vocab", "64",
]


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One tiny gen-synthetic + analyze run shared by the read-only tests."""
    root = tmp_path_factory.mktemp("pipeline")
    gen = root / "gen"
    spectra = root / "spectra"
    assert main(["gen-synthetic", "--out", str(gen), *TINY]) == 0
    assert main(["analyze", "--streams", str(gen), "--out", str(spectra)]) == 0
    return root


class TestGenSynthetic:
    def test_produces_expected_files(self, pipeline):
        gen = pipeline / "gen"
        names = sorted(p.name for p in gen.iterdir())
        assert names == [
            "corpus.u16",
            "layer0_key.kvcr",
            "layer0_value.kvcr",
            "layer1_key.kvcr",
            "layer1_value.kvcr",
            "manifest.json",
            "model.kvcm",
        ]

    def test_manifest_hashes_match_files(self, pipeline):
        gen = pipeline / "gen"
        manifest = json.loads((gen / "manifest.json").read_text())
        assert manifest["command"] == "gen-synthetic"
        for name, digest in manifest["outputs"].items():
            assert sha(gen / name) == digest

    def test_same_seed_reproduces_hashes(self, pipeline, tmp_path):
        out = tmp_path / "again"
        assert main(["gen-synthetic", "--out", str(out), *TINY]) == 0
        m1 = json.loads((pipeline / "gen" / "manifest.json").read_text())
        m2 = json.loads((out / "manifest.json").read_text())
        assert m1["outputs"] == m2["outputs"]

    def test_different_seeds_differ(self, tmp_path):
        digests = set()
        for seed in range(10):
            out = tmp_path / f"s{seed}"
            args = ["gen-synthetic", "--out", str(out), "--seed", str(seed),
                    "--d-e", "16", "--n-seqs", "2", "--seq-len", "24",
                    "--train-steps", "0", "--vocab", "32"]
            assert main(args) == 0
            digests.add(sha(out / "layer0_key.kvcr"))
        assert len(digests) == 10

    def test_missing_out_is_usage_error(self):
        assert main(["gen-synthetic"]) == 2


class TestAnalyze:
    def test_reports_and_spectra(self, pipeline):
        spectra = pipeline / "spectra"
        rows = json.loads((spectra / "ner_report.json").read_text())
        assert len(rows) == 4
        for row in rows:
            assert 1.0 / row["rank"] <= row["ner"] <= 1.0 + 1e-12
            assert len(row["sigma"]) == 16  # m_g * d_h with defaults
        csv_lines = (spectra / "ner_report.csv").read_text().splitlines()
        assert csv_lines[0] == "layer,kind,ner,erank,rank"
        assert len(csv_lines) == 5
        assert (spectra / "layer0_key.spectrum").exists()

    def test_near_isotropic_stream_has_high_ner(self, tmp_path):
        rng = np.random.default_rng(0)
        rows = rng.uniform(-1.0, 1.0, size=(10_000, 16)).astype(np.float32)
        header = kvcore.StreamHeader(
            layer_index=0, feature_dim=16, kind=kvcore.Kind.KEY, token_count=10_000
        )
        kvcore.write_stream(tmp_path / "layer0_key.kvcr", header, rows)
        out = tmp_path / "out"
        assert main(["analyze", "--streams", str(tmp_path), "--out", str(out)]) == 0
        rows = json.loads((out / "ner_report.json").read_text())
        assert rows[0]["ner"] > 0.9

    def test_rank_one_stream(self, tmp_path):
        row = np.arange(1, 9, dtype=np.float32)
        header = kvcore.StreamHeader(
            layer_index=0, feature_dim=8, kind=kvcore.Kind.VALUE, token_count=50
        )
        kvcore.write_stream(
            tmp_path / "layer0_value.kvcr", header, np.tile(row, (50, 1))
        )
        out = tmp_path / "out"
        assert main(["analyze", "--streams", str(tmp_path), "--out", str(out)]) == 0
        rows = json.loads((out / "ner_report.json").read_text())
        assert rows[0]["rank"] == 1
        assert rows[0]["ner"] == pytest.approx(1.0, abs=1e-12)

    def test_sigma_top_truncates_json(self, pipeline, tmp_path):
        out = tmp_path / "out"
        assert main([
            "analyze", "--streams", str(pipeline / "gen"), "--out", str(out),
            "--sigma-top", "3",
        ]) == 0
        rows = json.loads((out / "ner_report.json").read_text())
        assert all(len(r["sigma"]) == 3 for r in rows)

    def test_malformed_stream_exits_3(self, tmp_path, capsys):
        src = tmp_path / "streams"
        src.mkdir()
        header = kvcore.StreamHeader(
            layer_index=0, feature_dim=4, kind=kvcore.Kind.KEY, token_count=5
        )
        kvcore.write_stream(src / "layer0_key.kvcr", header, np.ones((5, 4)))
        raw = (src / "layer0_key.kvcr").read_bytes()
        (src / "layer0_key.kvcr").write_bytes(raw[:-2])
        assert main(["analyze", "--streams", str(src), "--out", str(tmp_path / "o")]) == 3
        err = capsys.readouterr().err
        assert "layer0_key.kvcr" in err and "bytes" in err

    def test_zero_stream_exits_4(self, tmp_path):
        src = tmp_path / "streams"
        src.mkdir()
        header = kvcore.StreamHeader(
            layer_index=0, feature_dim=4, kind=kvcore.Kind.KEY, token_count=6
        )
        kvcore.write_stream(src / "layer0_key.kvcr", header, np.zeros((6, 4)))
        assert main(["analyze", "--streams", str(src), "--out", str(tmp_path / "o")]) == 4

    def test_no_streams_is_usage_error(self, tmp_path):
        empty = tmp_path / "none"
        empty.mkdir()
        assert main(["analyze", "--streams", str(empty), "--out", str(tmp_path / "o")]) == 2


class TestCompress:
    def test_report_and_factor_files(self, pipeline, tmp_path):
        out = tmp_path / "factors"
        rc = main([
            "compress",
            "--spectra", str(pipeline / "spectra"),
            "--checkpoint", str(pipeline / "gen" / "model.kvcm"),
            "--streams", str(pipeline / "gen"),
            "--out", str(out),
            "--ratios", "0.25,0.5,1.0",
        ])
        assert rc == 0
        report = json.loads((out / "compression_report.json").read_text())
        assert len(report) == 4 * 3
        by_key = {}
        for entry in report:
            if entry["ratio"] == 1.0:
                assert entry["relative_error"] <= 1e-6
            if entry["predicted_frobenius"] > 0:
                assert entry["measured_frobenius"] == pytest.approx(
                    entry["predicted_frobenius"], rel=1e-6
                )
            by_key.setdefault((entry["layer"], entry["kind"]), []).append(entry)
        for entries in by_key.values():
            errs = [e["measured_frobenius"] for e in sorted(entries, key=lambda e: e["ratio"])]
            assert all(a >= b - 1e-9 for a, b in zip(errs, errs[1:]))
        factor = out / "layer0_key_k4.kvcf"
        assert factor.exists()
        assert factor.read_bytes()[:4] == b"KVCF"

    def test_empty_ratios_is_usage_error(self, pipeline, tmp_path):
        rc = main([
            "compress",
            "--spectra", str(pipeline / "spectra"),
            "--checkpoint", str(pipeline / "gen" / "model.kvcm"),
            "--streams", str(pipeline / "gen"),
            "--out", str(tmp_path / "o"),
            "--ratios", "",
        ])
        assert rc == 2

    def test_missing_spectra_dir(self, pipeline, tmp_path):
        empty = tmp_path / "empty"
        empty.mkdir()
        rc = main([
            "compress",
            "--spectra", str(empty),
            "--checkpoint", str(pipeline / "gen" / "model.kvcm"),
            "--streams", str(pipeline / "gen"),
            "--out", str(tmp_path / "o"),
        ])
        assert rc == 2


class TestPplGrid:
    def grid_args(self, pipeline, out):
        return [
            "pplgrid",
            "--checkpoint", str(pipeline / "gen" / "model.kvcm"),
            "--corpus", str(pipeline / "gen" / "corpus.u16"),
            "--spectra", str(pipeline / "spectra"),
            "--out", str(out),
            "--key-ratios", "0.5,1.0",
            "--value-ratios", "0.5,1.0",
            "--seq-len", "48",
        ]

    def test_grid_csv(self, pipeline, tmp_path):
        out = tmp_path / "grid"
        assert main(self.grid_args(pipeline, out)) == 0
        lines = (out / "ppl_grid.csv").read_text().splitlines()
        assert lines[0] == "k,v,ppl"
        assert len(lines) == 5

    def test_unit_point_equals_library_baseline(self, pipeline, tmp_path):
        out = tmp_path / "grid"
        assert main(self.grid_args(pipeline, out)) == 0
        grid = kvcore.load_ppl_grid(out / "ppl_grid.csv")
        cfg, weights = kvcore.load_model(pipeline / "gen" / "model.kvcm")
        corpus = kvcore.load_tokens(pipeline / "gen" / "corpus.u16", 48)
        want = kvcore.perplexity(cfg, weights, corpus)
        assert grid.ppl[-1, -1] == pytest.approx(want, rel=1e-6)

    def test_rerun_byte_identical(self, pipeline, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(self.grid_args(pipeline, a)) == 0
        assert main(self.grid_args(pipeline, b)) == 0
        assert (a / "ppl_grid.csv").read_bytes() == (b / "ppl_grid.csv").read_bytes()


class TestNdPpl:
    def test_hand_grid(self, tmp_path):
        grid = tmp_path / "grid.csv"
        grid.write_text(
            "k,v,ppl\n0.5,0.5,12\n0.5,1.0,12\n1.0,0.5,10\n1.0,1.0,10\n"
        )
        out = tmp_path / "out"
        assert main(["ndppl", "--grid", str(grid), "--out", str(out)]) == 0
        rep = json.loads((out / "ndppl_report.json").read_text())
        assert rep["nd_ppl_key"] == pytest.approx(0.2, abs=1e-9)
        assert rep["pair_count_key"] == 1

    def test_constant_grid_zero(self, tmp_path):
        grid = tmp_path / "grid.csv"
        grid.write_text("k,v,ppl\n0.5,0.5,7\n0.5,1.0,7\n1.0,0.5,7\n1.0,1.0,7\n")
        out = tmp_path / "out"
        assert main(["ndppl", "--grid", str(grid), "--out", str(out)]) == 0
        rep = json.loads((out / "ndppl_report.json").read_text())
        assert rep["nd_ppl_key"] == 0.0 and rep["nd_ppl_value"] == 0.0

    def test_malformed_grid_exits_3(self, tmp_path, capsys):
        grid = tmp_path / "grid.csv"
        grid.write_text("k,v,ppl\n0.5,0.5,7\n1.0,1.0,7\n")
        assert main(["ndppl", "--grid", str(grid), "--out", str(tmp_path / "o")]) == 3
        assert "missing cartesian" in capsys.readouterr().err


class TestConfigFile:
    def test_config_plus_flag_override(self, pipeline, tmp_path):
        cfg_path = tmp_path / "run.json"
        cfg_path.write_text(json.dumps({
            "streams": str(pipeline / "gen"),
            "out": str(tmp_path / "from_config"),
            "sigma_top": 2,
        }))
        assert main(["analyze", "--config", str(cfg_path)]) == 0
        rows = json.loads((tmp_path / "from_config" / "ner_report.json").read_text())
        assert all(len(r["sigma"]) == 2 for r in rows)
        # flags win over the file
        assert main([
            "analyze", "--config", str(cfg_path),
            "--out", str(tmp_path / "flag_out"), "--sigma-top", "5",
        ]) == 0
        rows = json.loads((tmp_path / "flag_out" / "ner_report.json").read_text())
        assert all(len(r["sigma"]) == 5 for r in rows)

    def test_unknown_key_rejected(self, pipeline, tmp_path):
        cfg_path = tmp_path / "run.json"
        cfg_path.write_text(json.dumps({
            "streams": str(pipeline / "gen"),
            "out": str(tmp_path / "o"),
            "batch_sizes": 17,
        }))
        assert main(["analyze", "--config", str(cfg_path)]) == 2

    def test_invalid_json_exits_3(self, tmp_path):
        cfg_path = tmp_path / "run.json"
        cfg_path.write_text("{not json")
        assert main(["analyze", "--config", str(cfg_path)]) == 3


class TestThreads:
    def test_env_var_fallback(self, monkeypatch):
        from kvcore.cli import _thread_count

        monkeypatch.setenv("KVCORE_THREADS", "3")
        assert _thread_count(None) == 3
        assert _thread_count(0) == 3
        assert _thread_count(2) == 2  # explicit flag wins
        monkeypatch.delenv("KVCORE_THREADS")
        assert _thread_count(None) >= 1

    def test_invalid_value_rejected(self, monkeypatch):
        from kvcore.cli import _thread_count

        monkeypatch.setenv("KVCORE_THREADS", "-2")
        with pytest.raises(ValueError):
            _thread_count(None)

    def test_analyze_single_thread_matches_parallel(self, pipeline, tmp_path):
        a, b = tmp_path / "t1", tmp_path / "tN"
        assert main(["analyze", "--streams", str(pipeline / "gen"),
                     "--out", str(a), "--threads", "1"]) == 0
        assert main(["analyze", "--streams", str(pipeline / "gen"),
                     "--out", str(b), "--threads", "4"]) == 0
        assert (a / "ner_report.json").read_bytes() == (b / "ner_report.json").read_bytes()


class TestEntryPoint:
    def test_console_script(self):
        import subprocess

        proc = subprocess.run(
            ["kvcore", "--help"], capture_output=True, text=True
        )
        assert proc.returncode == 0
        assert "gen-synthetic" in proc.stdout

    def test_usage_exit_code(self):
        import subprocess

        proc = subprocess.run(
            ["kvcore", "no-such-command"], capture_output=True, text=True
        )
        assert proc.returncode == 2
