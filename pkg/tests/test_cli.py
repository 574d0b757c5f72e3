import csv
import json
import time

import numpy as np
import pytest

from mmhcl import pipeline
from mmhcl.checkpoint import read_checkpoint, read_sparse, write_checkpoint, write_sparse
from mmhcl.cli import expand_grid, main
from mmhcl.config import ConfigError, ModelConfig
from mmhcl.data import DataError, write_feature_matrix, write_interactions
from mmhcl.linalg import SparseCsr
from mmhcl.model import ModelParams
from oracles import random_binary


def write_config(path, **doc):
    path.write_text(json.dumps(doc))
    return str(path)


@pytest.fixture
def quick(tmp_path):
    # synthetic corpus, few epochs: keeps every CLI round trip well under a second
    return write_config(tmp_path / "cfg.json", preset="synthetic", epochs=3)


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, (json.loads(out.out) if code == 0 else None), out.err


class TestPrepare:
    def test_manifest_is_reproducible(self, tmp_path, quick, capsys):
        a, b = tmp_path / "a", tmp_path / "b"
        assert run(capsys, "prepare", "--config", quick, "--output-dir", str(a))[0] == 0
        assert run(capsys, "prepare", "--config", quick, "--output-dir", str(b))[0] == 0
        assert (a / "manifest.json").read_text() == (b / "manifest.json").read_text()

    def test_synthetic_is_fast(self, tmp_path, capsys):
        start = time.perf_counter()
        code, manifest, _ = run(capsys, "prepare", "--preset", "synthetic",
                                "--output-dir", str(tmp_path / "run"))
        assert code == 0 and time.perf_counter() - start < 5.0
        assert {"train.tsv", "valid.tsv", "test.tsv", "u2u.csr", "i2i.csr",
                "backbone.csr"} <= set(manifest["files"])

    def test_missing_feature_file_names_modality(self, tmp_path, capsys):
        write_interactions(tmp_path / "log.tsv", [[0, 0], [1, 1]])
        cfg = write_config(tmp_path / "c.json", interactions=str(tmp_path / "log.tsv"),
                           features={"acoustic": str(tmp_path / "nope.bin")})
        code, _, err = run(capsys, "prepare", "--config", cfg, "--output-dir", str(tmp_path / "r"))
        assert code == 3 and "acoustic" in err

    def test_file_corpus(self, tmp_path, rng, capsys):
        pairs = [(u, i) for u in range(30) for i in range(12) if rng.random() < 0.4]
        write_interactions(tmp_path / "log.tsv", pairs)
        write_feature_matrix(tmp_path / "v.bin", rng.normal(size=(12, 6)))
        (tmp_path / "t.csv").write_text("\n".join(",".join(map(str, r))
                                                  for r in rng.normal(size=(12, 4))))
        cfg = write_config(tmp_path / "c.json", interactions=str(tmp_path / "log.tsv"),
                           features={"visual": str(tmp_path / "v.bin"),
                                     "textual": str(tmp_path / "t.csv")},
                           dim=8, knn_k=3, epochs=2, batch_size=64)
        out = str(tmp_path / "r")
        assert run(capsys, "prepare", "--config", cfg, "--output-dir", out)[0] == 0
        assert run(capsys, "train", "--config", cfg, "--output-dir", out)[0] == 0
        code, metrics, _ = run(capsys, "evaluate", "--config", cfg, "--output-dir", out)
        assert code == 0 and metrics["k"] == 20

    def test_unknown_config_key(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json", preset="synthetic", learning_rate=0.1)
        code, _, err = run(capsys, "prepare", "--config", cfg)
        assert code == 2 and "learning_rate" in err

    def test_tampered_artifact_detected(self, tmp_path, quick, capsys):
        out = tmp_path / "r"
        run(capsys, "prepare", "--config", quick, "--output-dir", str(out))
        with (out / "train.tsv").open("a") as fh:
            fh.write("0\t0\n")
        assert run(capsys, "train", "--config", quick, "--output-dir", str(out))[0] == 3


class TestTrainEvaluate:
    def test_ablation_flags(self):
        cfg = pipeline.build_run_config({}, preset="synthetic", ablate=["u2u"])
        assert cfg.model.use_u2u is False and cfg.model.use_i2i is True
        cfg = pipeline.build_run_config({}, preset="synthetic", ablate=["scl"])
        assert cfg.model.alpha == cfg.model.beta == 0.0 and cfg.model.use_scl is False

    def test_same_seed_same_checkpoint(self, tmp_path, quick, capsys):
        paths = []
        for name in ("a", "b"):
            out = str(tmp_path / name)
            run(capsys, "prepare", "--config", quick, "--seed", "7", "--output-dir", out)
            code, res, _ = run(capsys, "train", "--config", quick, "--seed", "7",
                               "--output-dir", out)
            assert code == 0
            paths.append(res["checkpoint"])
        assert open(paths[0], "rb").read() == open(paths[1], "rb").read()

    def test_k_override_and_cold_start(self, tmp_path, quick, capsys):
        out = str(tmp_path / "r")
        flags = ["--config", quick, "--output-dir", out, "--cold-start", "0.2"]
        run(capsys, "prepare", *flags)
        run(capsys, "train", *flags)
        code, metrics, _ = run(capsys, "evaluate", *flags, "--k", "5")
        assert code == 0 and metrics["k"] == 5
        assert {"cold_recall", "cold_precision", "cold_ndcg"} <= set(metrics)
        assert json.loads((tmp_path / "r" / "metrics.json").read_text()) == metrics
        code, metrics, _ = run(capsys, "evaluate", *flags)
        assert metrics["k"] == 20

    def test_cold_items_absent_from_training(self, tmp_path, quick, capsys):
        out = tmp_path / "r"
        run(capsys, "prepare", "--config", quick, "--output-dir", str(out), "--cold-start", "0.2")
        cold = set(map(int, (out / "cold_items.txt").read_text().split()))
        assert len(cold) == 24
        for name in ("train.tsv", "valid.tsv", "test.tsv"):
            items = np.loadtxt(out / name, dtype=int, ndmin=2)[:, 1]
            assert not cold & set(items.tolist())

    def test_mismatched_digest_refused(self, tmp_path, quick, capsys):
        out = str(tmp_path / "r")
        run(capsys, "prepare", "--config", quick, "--output-dir", out)
        run(capsys, "train", "--config", quick, "--output-dir", out)
        code, _, err = run(capsys, "evaluate", "--config", quick, "--output-dir", out,
                           "--ablate", "u2u")
        assert code == 2 and "digest" in err
        code, _, err = run(capsys, "evaluate", "--config", quick, "--output-dir", out,
                           "--seed", "99")
        assert code == 2

    def test_evaluate_without_checkpoint(self, tmp_path, quick, capsys):
        out = str(tmp_path / "r")
        run(capsys, "prepare", "--config", quick, "--output-dir", out)
        assert run(capsys, "evaluate", "--config", quick, "--output-dir", out)[0] == 3

    def test_needs_config_or_preset(self, capsys):
        assert run(capsys, "prepare")[0] == 2


class TestSweep:
    def test_layer_grid(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json", preset="synthetic", epochs=1,
                           grid={"u2u_layers": [1, 2, 3], "i2i_layers": [1, 2, 3]})
        code, rows, _ = run(capsys, "sweep", "--config", cfg, "--output-dir", str(tmp_path / "s"))
        assert code == 0 and len(rows) == 9
        assert all(r["status"] == "ok" for r in rows)
        with (tmp_path / "s" / "sweep.csv").open() as fh:
            assert len(list(csv.DictReader(fh))) == 9

    def test_tau_grid_and_failed_cell(self, tmp_path, quick, capsys):
        taus = [round(0.1 * k, 1) for k in range(1, 11)]
        code, rows, _ = run(capsys, "sweep", "--config", quick, "--output-dir",
                            str(tmp_path / "s"), "--grid", json.dumps({"tau": taus + [-1.0]}))
        assert code == 0 and len(rows) == 11
        assert [r["tau"] for r in rows[:10]] == taus
        assert rows[-1]["status"].startswith("error")
        assert all(r["status"] == "ok" for r in rows[:10])

    def test_grid_validation(self):
        assert len(expand_grid({"tau": [0.1, 0.2], "knn_k": [3, 5, 7]})) == 6
        with pytest.raises(ConfigError):
            expand_grid({"tau": []})

    def test_grid_keys_must_be_model_fields(self, tmp_path, quick, capsys):
        code, _, _ = run(capsys, "sweep", "--config", quick, "--grid", '{"output_dir": ["x"]}')
        assert code == 2


class TestBinaryFormats:
    def test_checkpoint_round_trip(self, tmp_path):
        p = ModelParams.init(5, 7, 3, 1)
        meta = {"model_config": ModelConfig().to_dict(), "config_digest": "abc", "data_digest": "d"}
        write_checkpoint(tmp_path / "c.mmhc", p, meta)
        q, meta2 = read_checkpoint(tmp_path / "c.mmhc")
        assert meta2 == meta
        for name, t in p.tables().items():
            np.testing.assert_array_equal(q.tables()[name], t)
        assert (tmp_path / "c.mmhc").read_bytes()[:4] == b"MMHC"

    def test_checkpoint_bad_magic(self, tmp_path):
        (tmp_path / "c.mmhc").write_bytes(b"XXXX" + bytes(16))
        with pytest.raises(DataError):
            read_checkpoint(tmp_path / "c.mmhc")

    def test_sparse_round_trip(self, tmp_path, rng):
        S = SparseCsr.from_dense(random_binary(rng, 6, 9) * rng.normal(size=(6, 9)))
        write_sparse(tmp_path / "s.csr", S)
        T = read_sparse(tmp_path / "s.csr")
        for a in ("indptr", "indices", "data"):
            np.testing.assert_array_equal(getattr(T, a), getattr(S, a))
        assert T.shape == S.shape
