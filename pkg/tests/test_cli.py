import csv
import json

import numpy as np
import pytest

from knnmt.cli import main
from knnmt.compression import load_pca
from knnmt.vectorstore import load_datastore

HEADER = [
    "method",
    "batch_size",
    "tokens_per_second",
    "search_fraction",
    "cache_hit_fraction",
    "datastore_size",
]

GEN = ["--n-train", "300", "--n-valid", "20", "--n-test", "20", "--seed", "4"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "data"
    assert main(["gen-data", "--out", str(root), *GEN]) == 0
    return root


@pytest.fixture(scope="module")
def store(data):
    path = data.parent / "ds.bin"
    assert main(["build", str(data / "domain0" / "train.tsv"), str(path), "--append-eos"]) == 0
    return path


def bleu_of(stderr):
    return float(stderr.split("bleu=")[1].split()[0])


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestGenData:
    def test_layout(self, data):
        assert sorted(p.name for p in data.iterdir() if p.is_dir()) == [f"domain{i}" for i in range(4)]
        assert json.loads((data / "spec.json").read_text())["n_train"] == 300
        assert len((data / "domain2" / "test.tsv").read_text().splitlines()) == 20

    def test_deterministic(self, data, tmp_path, capsys):
        code, _, _ = run(capsys, "gen-data", "--out", tmp_path / "again" / "nested", *GEN)
        assert code == 0
        for name in ("domain0/train.tsv", "domain3/valid.tsv", "spec.json"):
            assert (tmp_path / "again" / "nested" / name).read_bytes() == (data / name).read_bytes()

    def test_bad_spec(self, tmp_path, capsys):
        code, _, err = run(capsys, "gen-data", "--out", tmp_path / "x", "--vocab-size", 8)
        assert code == 1 and err.startswith("error: ") and err.count("\n") == 1


class TestBuild:
    def test_four_token_sentence(self, data, tmp_path, capsys):
        (tmp_path / "one.tsv").write_text("w1 w2 w3 w4\tw5 w6 w7 w8\n")
        code, out, _ = run(capsys, "build", tmp_path / "one.tsv", tmp_path / "a.bin", "--spec", data / "spec.json")
        assert code == 0 and "N=4" in out and "dim=64" in out
        assert len(load_datastore(tmp_path / "a.bin")) == 4
        run(capsys, "build", tmp_path / "one.tsv", tmp_path / "b.bin", "--spec", data / "spec.json")
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()

    def test_append_eos(self, data, tmp_path, capsys):
        (tmp_path / "one.tsv").write_text("w1 w2\tw5 w6\n")
        run(capsys, "build", tmp_path / "one.tsv", tmp_path / "a.bin", "--append-eos", "--spec", data / "spec.json")
        assert load_datastore(tmp_path / "a.bin").values.tolist()[-1] == 2

    def test_unknown_word(self, data, tmp_path, capsys):
        (tmp_path / "bad.tsv").write_text("w1\tnotaword\n")
        code, _, err = run(capsys, "build", tmp_path / "bad.tsv", tmp_path / "a.bin", "--spec", data / "spec.json")
        assert code == 1 and err.startswith("error: ") and "notaword" in err

    def test_missing_corpus(self, tmp_path, capsys):
        code, _, err = run(capsys, "build", tmp_path / "nope.tsv", tmp_path / "a.bin")
        assert code == 1 and err.startswith("error: ")


class TestPrune:
    def test_sizes_monotone(self, store, tmp_path, capsys):
        sizes = []
        for k in (1, 2, 5):
            assert run(capsys, "prune", store, tmp_path / f"p{k}.bin", "--k", k)[0] == 0
            sizes.append(len(load_datastore(tmp_path / f"p{k}.bin")))
        assert sizes[2] <= sizes[1] <= sizes[0] < len(load_datastore(store))

    def test_distinct_values_unchanged(self, data, tmp_path, capsys):
        (tmp_path / "d.tsv").write_text("w1 w2 w3\tw5 w6 w7\n")
        run(capsys, "build", tmp_path / "d.tsv", tmp_path / "d.bin", "--spec", data / "spec.json")
        run(capsys, "prune", tmp_path / "d.bin", tmp_path / "dp.bin", "--k", 1)
        assert (tmp_path / "d.bin").read_bytes() == (tmp_path / "dp.bin").read_bytes()

    def test_k_too_large(self, data, tmp_path, capsys):
        (tmp_path / "d.tsv").write_text("w1 w2 w3\tw5 w6 w7\n")
        run(capsys, "build", tmp_path / "d.tsv", tmp_path / "d.bin", "--spec", data / "spec.json")
        code, _, err = run(capsys, "prune", tmp_path / "d.bin", tmp_path / "dp.bin", "--k", 3)
        assert code == 1 and err.startswith("error: ")


class TestPca:
    def test_full_dim_lossless(self, store, tmp_path, capsys):
        code, _, _ = run(capsys, "pca", store, tmp_path / "r.bin", "--pca-out", tmp_path / "p.bin", "--dim", 64)
        assert code == 0
        a = load_datastore(store).keys[:300].astype(np.float64)
        b = load_datastore(tmp_path / "r.bin").keys[:300].astype(np.float64)
        da = np.linalg.norm(a[:, None] - a[None], axis=-1)
        db = np.linalg.norm(b[:, None] - b[None], axis=-1)
        np.testing.assert_allclose(db, da, atol=1e-4)
        assert load_pca(tmp_path / "p.bin").projection.shape == (64, 64)

    def test_dim_too_large(self, store, tmp_path, capsys):
        # the default of 256 exceeds the stub's 64 dimensions
        code, _, err = run(capsys, "pca", store, tmp_path / "r.bin", "--pca-out", tmp_path / "p.bin")
        assert code == 2 and err == "error: --dim 256 exceeds the datastore dimension 64\n"


class TestTranslate:
    def test_lambda_zero_is_base(self, data, store, tmp_path, capsys):
        test = data / "domain0" / "test.tsv"
        run(capsys, "translate", test, "--lambda", 0, "--out", tmp_path / "zero.txt")
        code, _, _ = run(capsys, "translate", test, "--ds", store, "--lambda", 0, "--out", tmp_path / "z2.txt")
        assert code == 0
        assert (tmp_path / "zero.txt").read_text() == (tmp_path / "z2.txt").read_text()
        assert len((tmp_path / "zero.txt").read_text().splitlines()) == 20

    def test_retrieval_improves_bleu(self, data, store, capsys):
        test = data / "domain0" / "test.tsv"
        _, _, base = run(capsys, "translate", test, "--references", "--lambda", 0)
        _, _, knn = run(capsys, "translate", test, "--references", "--ds", store)
        assert bleu_of(knn) > bleu_of(base)
        assert "cache_hits=" in knn

    def test_needs_datastore(self, data, capsys):
        code, _, err = run(capsys, "translate", data / "domain0" / "test.tsv")
        assert code == 2 and err.startswith("error: ") and "--ds" in err

    def test_pca_store_and_model(self, data, store, tmp_path, capsys):
        run(capsys, "pca", store, tmp_path / "r.bin", "--pca-out", tmp_path / "p.bin", "--dim", 16)
        code, out, _ = run(
            capsys, "translate", data / "domain0" / "test.tsv", "--ds", tmp_path / "r.bin", "--pca", tmp_path / "p.bin"
        )
        assert code == 0 and len(out.splitlines()) == 20
        code, _, err = run(capsys, "translate", data / "domain0" / "test.tsv", "--ds", tmp_path / "r.bin")
        assert code == 1 and err.startswith("error: ")


class TestBench:
    def test_rows(self, data, tmp_path, capsys):
        out = tmp_path / "r.csv"
        code, _, _ = run(
            capsys, "bench", "--data", data, "--methods", "base,knn,cache", "--batch-sizes", "1,4",
            "--n-test", 6, "--dim", 16, "--out", out,
        )
        assert code == 0
        rows = read_rows(out)
        assert rows[0] == HEADER
        assert [(r[0], r[1]) for r in rows[1:]] == [(m, b) for m in ("base", "knn", "cache") for b in ("1", "4")]

    def test_invalid_method(self, data, tmp_path, capsys):
        code, _, err = run(capsys, "bench", "--data", data, "--methods", "knn,turbo", "--out", tmp_path / "r.csv")
        assert code == 1 and err.count("\n") == 1
        assert "turbo" in err and "valid: base, knn, cache, pca, pruning, gate" in err


class TestSweep:
    def test_singleton_grid(self, data, tmp_path, capsys):
        out = tmp_path / "g.csv"
        code, _, err = run(
            capsys, "sweep", "--data", data, "--k-grid", 16, "--lambda-grid", 0.6, "--n-valid-used", 5, "--out", out
        )
        assert code == 0 and "k=16 lambda=0.6" in err
        assert len(read_rows(out)) == 2

    def test_row_count(self, data, tmp_path, capsys):
        out = tmp_path / "g.json"
        code, _, _ = run(
            capsys, "sweep", "--data", data, "--k-grid", "4,8", "--lambda-grid", "0.5,0.7,0.9",
            "--n-valid-used", 4, "--out", out, "--format", "json",
        )
        assert code == 0 and len(json.loads(out.read_text())) == 6

    def test_prune_sweep(self, data, tmp_path, capsys):
        out = tmp_path / "p.csv"
        assert run(capsys, "sweep", "--data", data, "--what", "prune", "--out", out)[0] == 0
        sizes = [int(r[2]) for r in read_rows(out)[1:]]
        assert sizes == sorted(sizes, reverse=True)


class TestConfig:
    def test_file_sets_defaults_and_flags_win(self, data, store, tmp_path, capsys):
        test = data / "domain0" / "test.tsv"
        cfg = tmp_path / "run.cfg"
        cfg.write_text("# base decoding\nlambda = 0.0\nbeam = 3\n")
        run(capsys, "translate", test, "--lambda", 0, "--beam", 3, "--out", tmp_path / "flags.txt")
        run(capsys, "--config", cfg, "translate", test, "--out", tmp_path / "cfg.txt")
        assert (tmp_path / "cfg.txt").read_text() == (tmp_path / "flags.txt").read_text()
        run(capsys, "--config", cfg, "translate", test, "--ds", store, "--lambda", 0.7, "--out", tmp_path / "over.txt")
        run(capsys, "translate", test, "--ds", store, "--beam", 3, "--out", tmp_path / "plain.txt")
        assert (tmp_path / "over.txt").read_text() == (tmp_path / "plain.txt").read_text()

    def test_unknown_key(self, data, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("warp = 9\n")
        code, _, err = run(capsys, "--config", cfg, "translate", data / "domain0" / "test.tsv")
        assert code == 2 and err.startswith("error: ") and "warp" in err

    def test_usage_error(self, capsys):
        code, _, err = run(capsys, "translate")
        assert code == 2 and err.startswith("error: ") and err.count("\n") == 1
