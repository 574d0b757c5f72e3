import numpy as np
import pytest
from scipy import stats

from mmhcl.config import ModelConfig, preset
from mmhcl.data import generate_synthetic, interaction_matrix, make_split
from mmhcl.graphs import build_graphs
from mmhcl.model import ModelParams
from mmhcl.trainer import (
    AdamState,
    TripleSampler,
    adam_step,
    fit,
    sample_triples,
    train_epoch,
)


class TestSampler:
    def test_forced_triple(self, rng):
        b = sample_triples([[0, 0]], 2, 50, rng)
        assert set(zip(b.users, b.pos, b.neg)) == {(0, 0, 1)}

    def test_seeded(self):
        pairs = np.array([[0, 0], [0, 3], [1, 2], [2, 1], [2, 4]])
        s = TripleSampler(pairs, 6)
        runs = []
        for _ in range(2):
            rng = np.random.default_rng(3)
            runs.append([s.sample(8, rng) for _ in range(3)])
        for a, b in zip(*runs):
            for x, y in zip((a.users, a.pos, a.neg), (b.users, b.pos, b.neg)):
                np.testing.assert_array_equal(x, y)

    def test_negatives_unobserved(self, rng):
        pairs = np.array([[0, 0], [0, 1], [1, 2], [1, 3], [1, 0]])
        b = TripleSampler(pairs, 5).sample(2000, rng)
        observed = {tuple(p) for p in pairs.tolist()}
        assert all((u, j) not in observed for u, j in zip(b.users.tolist(), b.neg.tolist()))

    def test_negative_distribution_is_uniform(self):
        # user 0 observes items 0 and 2 of 5; negatives should be uniform on {1, 3, 4}
        b = TripleSampler([[0, 0], [0, 2]], 5).sample(100_000, np.random.default_rng(0))
        counts = np.bincount(b.neg, minlength=5)
        assert counts[0] == counts[2] == 0
        _, p = stats.chisquare(counts[[1, 3, 4]])
        assert p > 1e-3

    def test_user_with_every_item(self, rng):
        with pytest.raises(ValueError, match="every item"):
            sample_triples([[0, 0], [0, 1]], 2, 4, rng)


class TestAdam:
    def test_first_step(self):
        x = {"x": np.array([[0.0]])}
        adam_step(x, {"x": np.array([[1.0]])}, AdamState(), lr=0.1)
        assert x["x"][0, 0] == pytest.approx(-0.1, rel=1e-7)

    def test_zero_gradient_leaves_params(self, rng):
        P = rng.normal(size=(3, 2))
        x = {"x": P.copy()}
        state = AdamState()
        for _ in range(3):
            adam_step(x, {"x": np.zeros_like(P)}, state, lr=0.1)
        np.testing.assert_array_equal(x["x"], P)

    def test_descends_on_square(self):
        x = {"x": np.array([[1.0]])}
        state = AdamState()
        prev = 1.0
        for _ in range(10):
            adam_step(x, {"x": 2 * x["x"]}, state, lr=0.1)
            assert abs(x["x"][0, 0]) < prev
            prev = abs(x["x"][0, 0])

    def test_non_finite_gradient_names_table(self):
        x = {"item_emb": np.zeros((2, 2))}
        with pytest.raises(FloatingPointError, match="item_emb"):
            adam_step(x, {"item_emb": np.array([[0.0, np.nan], [0, 0]])}, AdamState(), 0.1)
        np.testing.assert_array_equal(x["item_emb"], 0.0)

    def test_moments_match_tables(self):
        p = ModelParams.init(3, 4, 2, 0)
        st = AdamState.for_params(p)
        for name, t in p.tables().items():
            assert st.m[name].shape == t.shape == st.v[name].shape
        assert st.step == 0


@pytest.fixture(scope="module")
def two_blocks():
    log_, feats = generate_synthetic(40, 24, 2, 0.0, seed=5)
    split = make_split(log_, seed=5)
    graphs = build_graphs(interaction_matrix(split.train, 40, 24), feats, 4)
    return log_, split, graphs


def small_config(**kw):
    base = dict(dim=16, knn_k=4, lr=0.01, batch_size=64, reg=1e-4, epochs=5, seed=2)
    base.update(kw)
    return ModelConfig(**base)


class TestEpoch:
    def test_zero_lr_is_identity(self, two_blocks):
        _, split, graphs = two_blocks
        cfg = small_config(lr=0.0)
        p = ModelParams.init(40, 24, cfg.dim, 0)
        before = p.copy()
        train_epoch(p, graphs, cfg, TripleSampler(split.train, 24), AdamState.for_params(p),
                    np.random.default_rng(0))
        for name, t in p.tables().items():
            np.testing.assert_array_equal(t, before.tables()[name])

    def test_step_count(self, two_blocks):
        _, split, graphs = two_blocks
        cfg = small_config()
        p = ModelParams.init(40, 24, cfg.dim, 0)
        state = AdamState.for_params(p)
        train_epoch(p, graphs, cfg, TripleSampler(split.train, 24), state, np.random.default_rng(0))
        assert state.step == -(-len(split.train) // cfg.batch_size)

    def test_loss_decreases_over_five_epochs(self, two_blocks):
        _, split, graphs = two_blocks
        cfg = small_config()
        p = ModelParams.init(40, 24, cfg.dim, 0)
        sampler = TripleSampler(split.train, 24)
        state = AdamState.for_params(p)
        rng = np.random.default_rng(0)
        totals = [train_epoch(p, graphs, cfg, sampler, state, rng)["total"] for _ in range(5)]
        assert all(b < a for a, b in zip(totals, totals[1:])), totals

    def test_no_scl_reports_zero(self, two_blocks):
        _, split, graphs = two_blocks
        cfg = small_config(use_scl=False)
        p = ModelParams.init(40, 24, cfg.dim, 0)
        out = train_epoch(p, graphs, cfg, TripleSampler(split.train, 24),
                          AdamState.for_params(p), np.random.default_rng(0))
        assert out["scl_u"] == 0.0 and out["scl_i"] == 0.0
        assert out["bpr"] > 0


class TestFit:
    def test_patience_with_degrading_validation(self, two_blocks):
        _, split, graphs = two_blocks
        cfg = small_config(epochs=50, patience=5)
        scores = iter(np.linspace(0.9, 0.1, 50))
        snapshots = []

        def validate(p):
            snapshots.append(p.copy())
            return next(scores), 0.0

        report, best = fit(cfg, 40, 24, split.train, split.valid, graphs, validate=validate)
        assert len(report.epochs) == 6
        assert report.best_epoch == 1
        assert report.stop_reason == "early_stop"
        for name, t in best.tables().items():
            np.testing.assert_array_equal(t, snapshots[0].tables()[name])

    def test_ties_do_not_count_as_improvement(self, two_blocks):
        _, split, graphs = two_blocks
        report, _ = fit(small_config(epochs=10, patience=2), 40, 24, split.train, split.valid,
                        graphs, validate=lambda p: (0.5, 0.5))
        assert len(report.epochs) == 3 and report.best_epoch == 1

    def test_single_epoch(self, two_blocks):
        _, split, graphs = two_blocks
        report, _ = fit(small_config(epochs=1, patience=100), 40, 24, split.train, split.valid,
                        graphs)
        assert len(report.epochs) == 1
        assert report.stop_reason == "max_epochs"

    def test_deterministic_report(self, two_blocks):
        _, split, graphs = two_blocks
        cfg = small_config(epochs=3)
        r1, p1 = fit(cfg, 40, 24, split.train, split.valid, graphs)
        r2, p2 = fit(cfg, 40, 24, split.train, split.valid, graphs)
        assert r1.to_json() == r2.to_json()
        for name, t in p1.tables().items():
            np.testing.assert_array_equal(t, p2.tables()[name])

    def test_best_epoch_dominates(self, two_blocks):
        _, split, graphs = two_blocks
        report, _ = fit(small_config(epochs=4), 40, 24, split.train, split.valid, graphs)
        best = report.epochs[report.best_epoch - 1]["val_recall"]
        assert all(best >= e["val_recall"] for e in report.epochs)
        assert set(report.epochs[0]) >= {"total", "bpr", "scl_u", "scl_i", "reg",
                                         "val_recall", "val_ndcg"}

    def test_empty_validation(self, two_blocks):
        _, split, graphs = two_blocks
        with pytest.raises(ValueError):
            fit(small_config(), 40, 24, split.train, np.zeros((0, 2)), graphs)


def test_synthetic_preset_shape():
    cfg = preset("synthetic")
    assert cfg.epochs == 50 and cfg.monitor_k == 20
