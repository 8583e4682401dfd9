import json
import os

import pytest

from dbsa import cli, synthetic

from conftest import make_pool_task


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Model + dataset files shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    rc = cli.main(
        [
            "init-model", "--out", str(root / "model.dbsa"),
            "--layers", "2", "--heads", "4", "--kv-heads", "2",
            "--head-dim", "8", "--ffn-dim", "64", "--seed", "9",
        ]
    )
    assert rc == 0
    task, tests = make_pool_task(n_demos=20, seed=23, n_tests=3)
    synthetic.write_jsonl(task.pool, root / "pool.jsonl")
    synthetic.write_jsonl(tests, root / "test.jsonl")
    synthetic.write_labels(task.labels, root / "labels.txt")
    return root


def run_cli(args):
    return cli.main([str(a) for a in args])


class TestStorage:
    def test_llama31_8b_shape(self, capsys):
        rc = run_cli(
            [
                "storage", "--layers", 32, "--kv-heads", 8, "--head-dim", 128,
                "--bytes-per-value", 2, "--tokens", "30000,90000",
            ]
        )
        out = capsys.readouterr().out
        assert rc == 0
        assert "bytes/token: 131072" in out
        assert "MiB/token: 0.125" in out
        assert "tokens=30000" in out and "GiB=3.66" in out
        assert "tokens=90000" in out

    def test_four_byte_values(self, capsys):
        rc = run_cli(
            ["storage", "--layers", 32, "--kv-heads", 8, "--head-dim", 128,
             "--bytes-per-value", 4, "--tokens", "1"]
        )
        assert rc == 0
        assert "bytes/token: 262144" in capsys.readouterr().out


class TestEncodeInfer:
    def test_encode_then_infer(self, workdir, capsys):
        out_dir = workdir / "enc"
        rc = run_cli(
            [
                "encode", "--model", workdir / "model.dbsa",
                "--pool", workdir / "pool.jsonl", "--labels", workdir / "labels.txt",
                "--out", out_dir, "--block-size", 5, "--seed", 1,
            ]
        )
        assert rc == 0
        assert (out_dir / "cache.dbsa").exists()
        assert (out_dir / "index.json").exists()
        manifest = json.loads((out_dir / "manifest.json").read_text())
        assert manifest["n_blocks"] == 4
        capsys.readouterr()

        rc = run_cli(
            [
                "infer", "--model", workdir / "model.dbsa",
                "--pool", workdir / "pool.jsonl", "--labels", workdir / "labels.txt",
                "--cache", out_dir / "cache.dbsa", "--index", out_dir / "index.json",
                "--method", "dbsa", "--block-size", 5, "--seed", 1,
                "--query", "lookup key0001 please",
            ]
        )
        out = capsys.readouterr().out
        assert rc == 0
        payload = json.loads(out)
        assert payload["label"] in {"alpha", "bravo", "carol"}
        assert payload["attended_pairs"] > 0

    def test_zero_shot_needs_no_cache(self, workdir, capsys):
        rc = run_cli(
            [
                "infer", "--model", workdir / "model.dbsa",
                "--pool", workdir / "pool.jsonl", "--labels", workdir / "labels.txt",
                "--method", "zero", "--query", "anything",
            ]
        )
        assert rc == 0
        assert json.loads(capsys.readouterr().out)["label"]


class TestBenchAblate:
    def test_bench_rows_and_amortize(self, workdir, capsys):
        out_dir = workdir / "bench"
        rc = run_cli(
            [
                "bench", "--model", workdir / "model.dbsa",
                "--pool", workdir / "pool.jsonl", "--test", workdir / "test.jsonl",
                "--labels", workdir / "labels.txt", "--methods", "dbsa,fixed",
                "--runs", 2, "--block-size", 5, "--out", out_dir,
            ]
        )
        assert rc == 0
        runs = (out_dir / "runs.csv").read_text().strip().splitlines()
        assert len(runs) == 1 + 2 * 2  # header + methods x seeds
        report = (out_dir / "report.csv").read_text().strip().splitlines()
        assert len(report) == 1 + 2
        capsys.readouterr()

        rc = run_cli(
            ["amortize", "--timings", out_dir / "timings.json", "--requests", "1,10,100"]
        )
        out = capsys.readouterr().out
        assert rc == 0
        lines = out.strip().splitlines()
        assert lines[0] == "method,seed,n_requests,amortized_seconds"
        assert len(lines) == 1 + 4 * 3
        costs = [float(l.split(",")[-1]) for l in lines[1:4]]
        assert costs[0] >= costs[1] >= costs[2]

    def test_ablate_ordering_axis(self, workdir, capsys):
        out_dir = workdir / "ablate"
        rc = run_cli(
            [
                "ablate", "--model", workdir / "model.dbsa",
                "--pool", workdir / "pool.jsonl", "--test", workdir / "test.jsonl",
                "--labels", workdir / "labels.txt", "--axis", "ordering",
                "--block-size", 5, "--out", out_dir,
            ]
        )
        assert rc == 0
        rows = json.loads((out_dir / "ablate.json").read_text())
        assert [r["value"] for r in rows] == ["in-order", "low-to-high", "reverse"]
        for q in range(len(rows[0]["selected_ids_per_query"])):
            assert (
                rows[0]["selected_ids_per_query"][q]
                == rows[1]["selected_ids_per_query"][q]
                == rows[2]["selected_ids_per_query"][q]
            )
        capsys.readouterr()


class TestErrors:
    def test_missing_file_exit_2(self, workdir, capsys):
        rc = run_cli(
            [
                "encode", "--model", workdir / "missing.dbsa",
                "--pool", workdir / "pool.jsonl", "--labels", workdir / "labels.txt",
                "--out", workdir / "x",
            ]
        )
        assert rc == 2
        assert "error:" in capsys.readouterr().err

    def test_malformed_jsonl_reports_line(self, workdir, capsys, tmp_path):
        bad = tmp_path / "bad.jsonl"
        bad.write_text('{"query": "a", "answer": "alpha"}\nnot-json\n')
        rc = run_cli(
            [
                "encode", "--model", workdir / "model.dbsa",
                "--pool", bad, "--labels", workdir / "labels.txt",
                "--out", tmp_path / "out",
            ]
        )
        assert rc == 2
        err = capsys.readouterr().err
        assert ":2:" in err

    def test_bad_flag_exit_2(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["storage", "--layers", "not-a-number"])
        assert exc.value.code == 2

    def test_config_hash_mismatch_exit_2(self, workdir, capsys, tmp_path):
        rc = run_cli(
            [
                "init-model", "--out", tmp_path / "other.dbsa",
                "--layers", "3", "--heads", "4", "--kv-heads", "2",
                "--head-dim", "8", "--ffn-dim", "64",
            ]
        )
        assert rc == 0
        out_dir = workdir / "enc2"
        rc = run_cli(
            [
                "encode", "--model", workdir / "model.dbsa",
                "--pool", workdir / "pool.jsonl", "--labels", workdir / "labels.txt",
                "--out", out_dir, "--block-size", 5,
            ]
        )
        assert rc == 0
        capsys.readouterr()
        rc = run_cli(
            [
                "infer", "--model", tmp_path / "other.dbsa",
                "--pool", workdir / "pool.jsonl", "--labels", workdir / "labels.txt",
                "--cache", out_dir / "cache.dbsa", "--index", out_dir / "index.json",
                "--method", "dbsa", "--query", "q",
            ]
        )
        assert rc == 2
