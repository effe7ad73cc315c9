import importlib
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdil.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from sdil.data import make_splits, prepare, without_relations
from sdil.metrics import batch_ranks, compute_metrics, format_table, rank_candidates
from sdil.synthetic import generate_synthetic
from sdil.train import (ConfigError, DivergenceError, EarlyStopping, TrainConfig, build_model, evaluate,
                        load_model, pretrain_item_embeddings, save_model, train)


def sort_rank(scores, target=0):
    """Full-sort oracle: position of the target after sorting descending with ties placed ahead of it."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i != target))
    ties_ahead = sum(1 for i in range(len(scores)) if i != target and scores[i] == scores[target])
    return order.index(target) + 1 + ties_ahead


class TestRanking:
    def test_cases(self):
        assert rank_candidates([5.0, 1.0, 2.0]) == 1
        assert rank_candidates([1.0, 1.0, 1.0, 1.0, 0.5]) == 4
        assert rank_candidates([0.0, 3.0, 1.0], target_index=2) == 2

    def test_random_vectors_match_sort_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            s = rng.integers(0, 30, size=100).astype(float)
            t = int(rng.integers(0, 100))
            assert rank_candidates(s, t) == sort_rank(list(s), t)

    def test_batch_agrees_with_scalar(self):
        rng = np.random.default_rng(1)
        s = rng.integers(0, 5, size=(50, 100)).astype(float)
        assert list(batch_ranks(s)) == [rank_candidates(row) for row in s]


class TestMetrics:
    def test_closed_forms(self):
        r = compute_metrics([1, 1])
        assert all(v == 1.0 for v in r.to_dict().values())
        r = compute_metrics([3])
        assert r["NDCG@5"] == 0.5 and r["HR@5"] == 1.0 and r["MRR"] == pytest.approx(1 / 3, abs=1e-15)
        r = compute_metrics([11])
        assert r["HR@10"] == 0.0 and r["NDCG@10"] == 0.0 and r["MRR"] == pytest.approx(1 / 11, abs=1e-15)
        assert r["HR@20"] == 1.0 and r["NDCG@20"] == pytest.approx(1 / math.log2(12), abs=1e-15)

    def test_empty_and_invalid(self):
        with pytest.raises(ValueError):
            compute_metrics([])
        with pytest.raises(ValueError):
            compute_metrics([0, 1])

    def test_keys(self):
        assert list(compute_metrics([2]).to_dict()) == ["HR@5", "HR@10", "HR@20", "NDCG@5", "NDCG@10",
                                                       "NDCG@20", "MRR"]
        assert list(compute_metrics([2], ks=(5,)).to_dict()) == ["HR@5", "NDCG@5", "MRR"]

    @settings(max_examples=150)
    @given(st.lists(st.integers(1, 100), min_size=1, max_size=60))
    def test_bounds_and_monotone_in_k(self, ranks):
        r = compute_metrics(ranks)
        d = r.to_dict()
        assert all(0.0 <= v <= 1.0 for v in d.values())
        assert r.hr[5] <= r.hr[10] <= r.hr[20]
        assert r.ndcg[5] <= r.ndcg[10] <= r.ndcg[20]
        for k in (5, 10, 20):
            assert r.ndcg[k] <= r.hr[k]

    @settings(max_examples=100)
    @given(st.integers(0, 10_000))
    def test_monotone_transform_invariance(self, seed):
        rng = np.random.default_rng(seed)
        s = rng.normal(size=(20, 100))
        s[:, 3] = s[:, 0]
        assert np.array_equal(batch_ranks(s), batch_ranks(np.exp(s)))

    def test_table(self):
        txt = format_table({"a": {"HR@5": 0.5}, "bb": {"HR@5": 0.25}}, spread={"a": {"HR@5": 0.0},
                                                                          "bb": {"HR@5": 0.1}})
        lines = txt.splitlines()
        assert len(lines) == 3 and "0.5000 ± 0.0000" in lines[1]
        assert len({len(x) for x in lines}) == 1


class TestEarlyStopping:
    def test_patience_trigger(self):
        curve = [0.3] + [0.29 - 0.01 * k for k in range(10)] + [0.5]
        es = EarlyStopping(10)
        stopped = None
        for epoch, v in enumerate(curve, 1):
            _, stop = es.update(epoch, v)
            if stop:
                stopped = epoch
                break
        assert stopped == 11 and es.best_epoch == 1 and es.best == 0.3

    @settings(max_examples=100)
    @given(st.lists(st.floats(0, 1), min_size=1, max_size=40), st.integers(1, 10))
    def test_best_is_argmax_of_seen(self, curve, patience):
        es = EarlyStopping(patience)
        seen = []
        for epoch, v in enumerate(curve, 1):
            seen.append(v)
            _, stop = es.update(epoch, v)
            assert es.best == max(seen) and seen[es.best_epoch - 1] == es.best
            if stop:
                assert epoch - es.best_epoch == patience
                break


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    d = tmp_path_factory.mktemp("toy")
    generate_synthetic(150, 60, 5, out_dir=d)
    ds, _ = prepare(d / "interactions.tsv", d / "items.tsv", d / "relations.tsv")
    return ds, make_splits(ds)


def small_cfg(**kw):
    base = dict(d=8, batch=32, epochs=3, patience=3, lr=3e-3, pretrain_epochs=2, sim_heads=2,
                negatives=20, seed=0)
    return TrainConfig.from_dict({**base, **kw})


class TestConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert (c.d, c.batch, c.epochs, c.patience, c.lr, c.pretrain_lr, c.variant) == (
            64, 64, 150, 10, 1e-4, 5e-4, "sdil")

    @pytest.mark.parametrize("raw", [{"d": 10, "sim_heads": 4}, {"lr": -1.0}, {"dropout": 1.0},
                                     {"epochs": "ten"}, {"variant": "sdil-9"}, {"bogus": 1}])
    def test_rejects(self, raw):
        with pytest.raises(ConfigError):
            TrainConfig.from_dict(raw)


class TestEvaluate:
    def test_oracle_scorer(self, toy):
        ds, sp = toy

        def oracle(inst, cands):
            return (cands == inst.targets[:, None]).astype(float)
        r = evaluate(None, ds, sp["test"], n_neg=20, scorer=oracle)
        assert all(v == 1.0 for v in r.to_dict().values())

    def test_all_zero_model(self, toy):
        ds, sp = toy
        m = build_model(ds, small_cfg())
        for t in m.params().values():
            t.data[...] = 0.0
        # zero kernel parameters still give sigma = ln 2, so drop relations to make every score tie
        r = evaluate(m, without_relations(ds), sp["test"], n_neg=20)
        assert set(r.ranks.tolist()) == {21} and r["HR@20"] == 0.0

    def test_deterministic(self, toy):
        ds, sp = toy
        m = build_model(ds, small_cfg())
        a = evaluate(m, ds, sp["val"], "val", seed=3, n_neg=20).to_dict()
        b = evaluate(m, ds, sp["val"], "val", seed=3, n_neg=20).to_dict()
        assert a == b


class TestTraining:
    def test_zero_pretrain_epochs_is_identity(self, toy):
        ds, sp = toy
        cfg = small_cfg(pretrain_epochs=0)
        m = build_model(ds, cfg)
        before = m.dim.item_emb.data.copy()
        assert pretrain_item_embeddings(m, ds, sp["train"].subset(np.flatnonzero(sp["train"].mask.any(1))),
                                        cfg) == []
        assert np.array_equal(before, m.dim.item_emb.data)

    def test_pretraining_lowers_loss_and_is_deterministic(self, toy):
        ds, sp = toy
        cfg = small_cfg(pretrain_epochs=4, pretrain_lr=5e-3)
        tr = sp["train"].subset(np.flatnonzero(sp["train"].mask.any(1)))
        m1, m2 = build_model(ds, cfg), build_model(ds, cfg)
        l1 = pretrain_item_embeddings(m1, ds, tr, cfg)
        l2 = pretrain_item_embeddings(m2, ds, tr, cfg)
        assert l1[-1] < l1[0] and l1 == l2
        assert np.array_equal(m1.dim.item_emb.data, m2.dim.item_emb.data)

    def test_runs_are_identical_and_restore_best(self, toy, tmp_path):
        ds, sp = toy
        cfg = small_cfg()
        r1 = train(ds, cfg, sp, log_path=tmp_path / "a.jsonl")
        r2 = train(ds, cfg, sp, log_path=tmp_path / "b.jsonl")
        strip = [{k: v for k, v in h.items() if k != "elapsed_sec"} for h in r1.history]
        assert strip == [{k: v for k, v in h.items() if k != "elapsed_sec"} for h in r2.history]
        assert r1.best_val == max(h["val_ndcg5"] for h in r1.history)
        val = evaluate(r1.model, ds, sp["val"], "val", cfg.seed, cfg.variant, cfg.negatives, ks=(5,))
        assert val.ndcg[5] == r1.best_val
        assert len((tmp_path / "a.jsonl").read_text().splitlines()) == len(r1.history)

    @pytest.mark.filterwarnings("ignore:invalid value")
    def test_divergence(self, toy, monkeypatch):
        ds, sp = toy
        T = importlib.import_module("sdil.train")
        orig = T.build_model

        def poisoned(ds_, cfg_):
            m = orig(ds_, cfg_)
            m.dim.user_bias.data[:] = np.nan
            return m
        monkeypatch.setattr(T, "build_model", poisoned)
        with pytest.raises(DivergenceError, match="batch 0"):
            T.train(ds, small_cfg(epochs=1, pretrain_epochs=0), sp)

    def test_max_len_mismatch(self, toy):
        ds, sp = toy
        with pytest.raises(ConfigError):
            train(ds, small_cfg(max_len=10), sp)


class TestCheckpoint:
    def test_round_trip_f32(self, tmp_path):
        rng = np.random.default_rng(0)
        state = {"a": rng.normal(size=(3, 4)), "b": np.array(2.5), "c.x": rng.normal(size=7)}
        save_checkpoint(tmp_path / "m.bin", state, {"seed": 1})
        back, meta = load_checkpoint(tmp_path / "m.bin")
        assert meta == {"seed": 1} and sorted(back) == ["a", "b", "c.x"]
        for k in state:
            np.testing.assert_array_equal(back[k], state[k].astype(np.float32).astype(np.float64))
        raw = (tmp_path / "m.bin").read_bytes()
        assert raw[:4] == b"SDIL" and int.from_bytes(raw[4:8], "little") == 1

    def test_corrupt(self, tmp_path):
        (tmp_path / "x.bin").write_bytes(b"NOPE")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "x.bin")
        save_checkpoint(tmp_path / "y.bin", {"a": np.ones(100)}, {})
        (tmp_path / "z.bin").write_bytes((tmp_path / "y.bin").read_bytes()[:200])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "z.bin")

    def test_model_round_trip_and_vocab_check(self, toy, tmp_path):
        ds, sp = toy
        cfg = small_cfg()
        m = build_model(ds, cfg)
        save_model(tmp_path / "m.bin", m, cfg)
        m2, cfg2 = load_model(tmp_path / "m.bin", ds)
        assert cfg2 == cfg
        for k, v in m.state_dict().items():
            np.testing.assert_array_equal(m2.state_dict()[k], v.astype(np.float32).astype(np.float64))
        with pytest.raises(CheckpointError):
            load_model(tmp_path / "m.bin", replace(ds, n_brands=ds.n_brands + 1))
