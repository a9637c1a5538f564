import os
import stat
import subprocess
import sys

import pytest
import torch

from privlora.bench import BenchReport, BenchRow
from privlora.cli import main
from privlora.server import PrivLoraServer
from privlora.toymodel import ToyModel, ToyModelConfig, calibrate_q, dump_model, encode_text


def run(argv, capsys):
    code = main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def usage_error(argv, capsys):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    capsys.readouterr()
    return exc.value.code


class TestKeygen:
    def test_writes_key_directory(self, tmp_path, capsys):
        code, out, _ = run(["keygen", "--n", "1024", "--out", str(tmp_path / "k"), "--m", "16", "--ranks", "4",
                            "--seed", "1"], capsys)
        assert code == 0
        files = sorted(p.name for p in (tmp_path / "k").iterdir())
        assert files == ["params.bin", "public.key", "rotation.keys", "secret.key"]
        assert stat.S_IMODE((tmp_path / "k" / "secret.key").stat().st_mode) == 0o600
        assert "fingerprint" in out

    def test_deterministic_with_seed(self, tmp_path, capsys):
        for name in ("a", "b"):
            run(["keygen", "--n", "1024", "--out", str(tmp_path / name), "--m", "8", "--seed", "5"], capsys)
        assert (tmp_path / "a" / "public.key").read_bytes() == (tmp_path / "b" / "public.key").read_bytes()

    def test_rejects_oversized_layout(self, tmp_path, capsys):
        code, _, err = run(["keygen", "--n", "1024", "--out", str(tmp_path), "--m", "64", "--ranks", "16"], capsys)
        assert code == 1 and err.startswith("privlora: error:") and err.count("\n") == 1

    @pytest.mark.parametrize("argv", [["keygen", "--n", "1000", "--out", "x"], ["keygen", "--out", "x", "--ranks", "a"],
                                      ["keygen"], ["bogus"], ["attack", "--mode", "pll", "--q", "-1"],
                                      ["attack", "--mode", "pll", "--q", "nan"]])
    def test_usage_errors(self, argv, capsys):
        assert usage_error(argv, capsys) == 2


class TestAttack:
    def test_plain(self, capsys):
        code, out, _ = run(["attack", "--mode", "plain", "--n", "16", "--seed", "0"], capsys)
        assert code == 0
        assert "16 queries" in out and "exact recovery: yes" in out

    def test_pll(self, capsys):
        code, out, _ = run(["attack", "--mode", "pll", "--n", "8", "--trials", "20", "--seed", "0"], capsys)
        assert code == 0
        assert "disagreement 1.0000" in out


class TestReport:
    def write_csv(self, path, rows):
        path.write_text(BenchReport("tokens", rows=rows).to_csv())

    def test_token_report_with_reference(self, tmp_path, capsys):
        rows = [BenchRow("r", t, 8, 0, v * t, v, False) for t, v in [(50, 4.0), (100, 3.0), (1000, 2.0)]]
        self.write_csv(tmp_path / "b.csv", rows)
        code, out, _ = run(["report", "--in", str(tmp_path / "b.csv")], capsys)
        assert code == 0
        assert "amortization ratio: measured 2.000" in out
        assert "315.5860" in out
        assert "published, not measured here" in out

    def test_rank_report_without_reference(self, tmp_path, capsys):
        rows = [BenchRow("r", 500, r, 0, 1.0, v, False) for r, v in [(8, 1.0), (16, 2.0), (24, 3.1)]]
        self.write_csv(tmp_path / "b.csv", rows)
        code, out, _ = run(["report", "--in", str(tmp_path / "b.csv"), "--against", "none"], capsys)
        assert code == 0
        assert "linear fit R^2" in out and "published" not in out

    def test_errors(self, tmp_path, capsys):
        code, _, err = run(["report", "--in", str(tmp_path / "missing.csv")], capsys)
        assert code == 1 and "cannot read" in err
        (tmp_path / "bad.csv").write_text("a,b\n1,2\n")
        code, _, err = run(["report", "--in", str(tmp_path / "bad.csv")], capsys)
        assert code == 1 and "missing columns" in err
        self.write_csv(tmp_path / "empty.csv", [])
        code, _, err = run(["report", "--in", str(tmp_path / "empty.csv")], capsys)
        assert code == 1 and "no measurements" in err


class TestBenchCommands:
    def test_zero_trials(self, capsys):
        code, out, _ = run(["bench-tokens", "--trials", "0"], capsys)
        assert code == 0 and out.startswith("run_id,tokens")

    def test_against_running_server(self, tmp_path, capsys, small_params):
        from privlora.bench import bench_adapters

        with PrivLoraServer(adapters=bench_adapters([2, 4, 8], m=16, n=16, m_prime=8), params=small_params,
                            seed=0) as srv:
            host, port = srv.address
            out_csv = tmp_path / "tok.csv"
            code, out, err = run(["bench-tokens", "--server", f"{host}:{port}", "--tokens", "1,8", "--rank", "4",
                                  "--trials", "1", "--out", str(out_csv)], capsys)
            assert code == 0 and "wrote 2 rows" in out and "amortization ratio" in err
            assert len(BenchReport.rows_from_csv(out_csv.read_text())) == 2
            code, out, err = run(["bench-rank", "--server", f"{host}:{port}", "--ranks", "2,4,8",
                                  "--token-count", "2", "--trials", "1"], capsys)
            assert code == 0 and "R^2" in err
            assert len(out.strip().splitlines()) == 4

    def test_unreachable(self, capsys):
        code, _, err = run(["bench-tokens", "--server", "127.0.0.1:1", "--trials", "1"], capsys)
        assert code == 1 and "cannot reach" in err


@pytest.fixture(scope="module")
def toy_server(small_params):
    cfg = ToyModelConfig(n_layers=1, d_model=32, n_heads=4, d_ff=64, max_len=16, lora_targets=("q",))
    model = ToyModel(cfg, seed=2)
    model.attach_pll(calibrate_q(model, encode_text("warm up 1234")[None]), seed=1)
    with PrivLoraServer(model, params=small_params, seed=0) as srv:
        yield srv, model


class TestServeAndInfer:
    def test_infer(self, toy_server, tmp_path, capsys):
        srv, _ = toy_server
        prompts = tmp_path / "p.txt"
        prompts.write_text("abc 1234 def\n\nno digits here\n")
        code, out, _ = run(["infer", "--server", "%s:%d" % srv.address, "--prompts", str(prompts), "--seed", "3"],
                           capsys)
        assert code == 0
        lines = out.strip().splitlines()
        assert len(lines) == 2
        label, l0, l1, prompt = lines[0].split("\t")
        assert label in "NY" and prompt == "abc 1234 def"
        float(l0), float(l1)

    def test_infer_with_key_directory(self, toy_server, tmp_path, capsys):
        srv, _ = toy_server
        run(["keygen", "--n", "1024", "--out", str(tmp_path / "k"), "--m", "32", "--ranks", "8", "--seed", "2"],
            capsys)
        prompts = tmp_path / "p.txt"
        prompts.write_text("hello\n")
        code, out, _ = run(["infer", "--server", "%s:%d" % srv.address, "--prompts", str(prompts),
                            "--keys", str(tmp_path / "k")], capsys)
        assert code == 0 and out.count("\n") == 1

    def test_infer_errors(self, toy_server, tmp_path, capsys):
        srv, _ = toy_server
        empty = tmp_path / "e.txt"
        empty.write_text("\n")
        code, _, err = run(["infer", "--server", "%s:%d" % srv.address, "--prompts", str(empty)], capsys)
        assert code == 1 and "no prompts" in err
        code, _, err = run(["infer", "--server", "%s:%d" % srv.address, "--prompts", str(empty),
                            "--keys", str(tmp_path / "nope")], capsys)
        assert code == 1

    def test_serve_needs_something(self, capsys):
        code, _, err = run(["serve", "--port", "0"], capsys)
        assert code == 1 and "nothing to serve" in err

    def test_serve_subprocess(self, tmp_path):
        model = ToyModel(ToyModelConfig(n_layers=1, d_model=32, n_heads=4, d_ff=64, max_len=16), seed=0)
        weights = tmp_path / "w.bin"
        weights.write_bytes(dump_model(model))
        env = dict(os.environ, PRIVLORA_SEED="4")
        proc = subprocess.Popen([sys.executable, "-m", "privlora.cli", "serve", "--port", "0", "--weights",
                                 str(weights), "--n", "1024"], stdout=subprocess.PIPE, text=True, env=env)
        try:
            line = proc.stdout.readline()
            assert line.startswith("listening on 127.0.0.1:") and "3 adapters" in line
            host, port = line.split()[2].split(":")
            prompts = tmp_path / "p.txt"
            prompts.write_text("x 0000\n")
            res = subprocess.run([sys.executable, "-m", "privlora.cli", "infer", "--server", f"{host}:{port}",
                                  "--prompts", str(prompts)], capture_output=True, text=True, timeout=120)
            assert res.returncode == 0, res.stderr
            assert res.stdout.endswith("\tx 0000\n")
        finally:
            proc.terminate()
            proc.wait(timeout=30)


def test_train_toy(tmp_path, capsys):
    out_path = tmp_path / "m.bin"
    code, out, _ = run(["train-toy", "--steps", "5", "--seed", "1", "--out", str(out_path)], capsys)
    assert code == 0 and "private linear layer" in out and "over 5 steps" in out
    from privlora.toymodel import load_model

    model = load_model(out_path.read_bytes())
    assert model.uses_pll and len(model.adapters) == 6
    with torch.no_grad():
        assert model(encode_text("abc")).shape[-1] == 256
