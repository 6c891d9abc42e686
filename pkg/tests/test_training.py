import io
import math

import numpy as np
import pytest

from kgforge.data import load_dataset
from kgforge.models import ModelKind, init_table
from kgforge.sampling import NegSpec, NegativeSampler
from kgforge.training import (
    AdamState,
    ConfigError,
    LossMode,
    MemoryBudgetError,
    TrainConfig,
    TrainLog,
    adam_step,
    fit,
    full_softmax_batch_grads,
    full_softmax_direction,
    loss_bi_bce,
    loss_full_softmax,
    loss_joint,
    loss_tri_sampled_softmax,
    sampled_batch_grads,
    train_epoch,
)

from conftest import make_random_dataset, write_split_files

KINDS = [ModelKind.DISTMULT, ModelKind.COMPLEX, ModelKind.SIMPLE]


class TestSampledSoftmaxLoss:
    def test_uniform_scores_give_log_k(self):
        for n_neg in (1, 4, 99):
            loss, _ = loss_tri_sampled_softmax(np.full(1 + n_neg, 2.5))
            assert abs(loss - math.log(1 + n_neg)) < 1e-12
        loss, _ = loss_tri_sampled_softmax(np.zeros(2))
        assert abs(loss - math.log(2)) < 1e-12

    def test_separated_scores(self):
        # oracle: -s0 + logsumexp = softplus(-20) for scores (10, -10)
        loss, _ = loss_tri_sampled_softmax(np.array([10.0, -10.0]))
        assert loss == pytest.approx(np.logaddexp(0.0, -20.0), rel=1e-9)

    def test_grads_sum_to_zero(self):
        rng = np.random.default_rng(0)
        scores = rng.normal(size=(64, 11))
        _, grads = loss_tri_sampled_softmax(scores)
        assert np.abs(grads.sum(axis=1)).max() < 1e-12

    def test_grads_match_finite_differences(self):
        rng = np.random.default_rng(1)
        scores = rng.normal(size=9)
        _, grads = loss_tri_sampled_softmax(scores)
        step = 1e-6
        for i in range(scores.size):
            scores[i] += step
            up, _ = loss_tri_sampled_softmax(scores)
            scores[i] -= 2 * step
            down, _ = loss_tri_sampled_softmax(scores)
            scores[i] += step
            assert (up - down) / (2 * step) == pytest.approx(grads[i], abs=1e-8)

    def test_large_scores_stay_finite(self):
        loss, grads = loss_tri_sampled_softmax(np.array([1000.0, -1000.0, 999.0]))
        assert np.isfinite(loss) and np.all(np.isfinite(grads))

    def test_non_finite_score_names_index(self):
        scores = np.zeros((3, 4))
        scores[1, 2] = np.nan
        with pytest.raises(FloatingPointError, match=r"\(1, 2\)"):
            loss_tri_sampled_softmax(scores)


class TestBceLoss:
    def test_score_zero(self):
        loss, grad = loss_bi_bce(0.0, 1)
        assert loss == pytest.approx(math.log(2), abs=1e-15)
        assert grad == pytest.approx(-0.5, abs=1e-15)
        loss, grad = loss_bi_bce(0.0, 0)
        assert loss == pytest.approx(math.log(2), abs=1e-15)
        assert grad == pytest.approx(0.5, abs=1e-15)

    def test_confident_positive(self):
        loss, _ = loss_bi_bce(5.0, 1)
        assert loss == pytest.approx(np.logaddexp(0.0, 5.0) - 5.0, rel=1e-12)
        assert loss == pytest.approx(0.006715, abs=1e-6)

    def test_grad_magnitude_below_one(self):
        rng = np.random.default_rng(2)
        s = rng.normal(scale=10, size=1000)
        y = rng.integers(0, 2, size=1000)
        _, grads = loss_bi_bce(s, y)
        assert np.abs(grads).max() < 1.0

    def test_extreme_scores_stable(self):
        loss, grad = loss_bi_bce(-800.0, 1)
        assert np.isfinite(loss) and np.isfinite(grad)
        loss, grad = loss_bi_bce(800.0, 0)
        assert np.isfinite(loss) and np.isfinite(grad)


class TestJointLoss:
    def test_arithmetic(self):
        assert loss_joint(0.5, 0.4, 0.5) == pytest.approx(0.7)
        assert loss_joint(1.25, 99.0, 0.0) == 1.25
        assert loss_joint(1.25, 0.0, 1.0) == 1.25


class TestAdam:
    def test_first_step_magnitude(self):
        table = init_table(ModelKind.DISTMULT, 1, 1, 1, seed=0)
        table.entity[0, 0] = 1.0
        state = AdamState.for_table(table)
        grads = {"entity": (np.array([0]), np.array([[1.0]]))}
        adam_step(table, state, grads, lr=0.001)
        # bias-corrected m_hat = v_hat = 1 at t = 1
        assert table.entity[0, 0] == pytest.approx(1.0 - 0.001 / (1.0 + 1e-8), abs=1e-15)
        assert state.t == 1

    def test_sparse_semantics(self):
        table = init_table(ModelKind.COMPLEX, 5, 2, 3, seed=1)
        state = AdamState.for_table(table)
        before = table.entity.copy()
        grads = {
            "entity": (np.array([1, 3]), np.random.default_rng(0).normal(size=(2, 6))),
            "relation_tri": (np.array([], dtype=np.int64), np.zeros((0, 6))),
        }
        adam_step(table, state, grads, lr=0.01)
        touched = np.zeros(5, dtype=bool)
        touched[[1, 3]] = True
        np.testing.assert_array_equal(table.entity[~touched], before[~touched])
        assert (table.entity[touched] != before[touched]).any()
        assert not state.m["entity"][~touched].any()
        np.testing.assert_array_equal(table.relation_tri, init_table(ModelKind.COMPLEX, 5, 2, 3, seed=1).relation_tri)

    def test_zero_gradient_row_is_inert(self):
        table = init_table(ModelKind.DISTMULT, 3, 1, 2, seed=2)
        state = AdamState.for_table(table)
        before = table.entity.copy()
        grads = {"entity": (np.array([0]), np.zeros((1, 2)))}
        adam_step(table, state, grads, lr=0.1)
        np.testing.assert_array_equal(table.entity, before)
        assert not state.m["entity"].any() and not state.v["entity"].any()

    def test_deterministic(self):
        def run():
            table = init_table(ModelKind.SIMPLE, 4, 2, 3, seed=3)
            state = AdamState.for_table(table)
            rng = np.random.default_rng(4)
            for _ in range(20):
                grads = {"entity": (np.arange(4), rng.normal(size=(4, 6)))}
                adam_step(table, state, grads, lr=0.01)
            return table.entity

        np.testing.assert_array_equal(run(), run())

    def test_non_finite_gradient_aborts(self):
        table = init_table(ModelKind.DISTMULT, 2, 1, 2, seed=5)
        state = AdamState.for_table(table)
        grads = {"entity": (np.array([0]), np.array([[np.nan, 0.0]]))}
        with pytest.raises(FloatingPointError, match="entity"):
            adam_step(table, state, grads, lr=0.01)


def dense_grads(table, grads):
    out = {}
    for name, (ids, g) in grads.items():
        dense = np.zeros_like(table.params()[name])
        np.add.at(dense, ids, g)
        out[name] = dense
    return out


def check_against_fd(table, loss_fn, grads, probes_per_param=4, tol=1e-5, step=1e-6):
    """Central-difference oracle on the total loss wrt sampled coordinates."""
    rng = np.random.default_rng(99)
    dense = dense_grads(table, grads)
    for name, param in table.params().items():
        for _ in range(probes_per_param):
            i = int(rng.integers(param.shape[0]))
            j = int(rng.integers(param.shape[1]))
            orig = param[i, j]
            param[i, j] = orig + step
            up = loss_fn()
            param[i, j] = orig - step
            down = loss_fn()
            param[i, j] = orig
            fd = (up - down) / (2 * step)
            analytic = dense[name][i, j]
            assert abs(fd - analytic) / max(1.0, abs(fd), abs(analytic)) < tol, (name, i, j, fd, analytic)


class TestBatchGradients:
    @pytest.mark.parametrize("kind", KINDS)
    @pytest.mark.parametrize("alpha", [0.0, 0.7])
    def test_sampled_matches_finite_differences(self, tmp_path, kind, alpha):
        ds = make_random_dataset(tmp_path, seed=20)
        table = init_table(kind, ds.vocab.n_entities, ds.vocab.n_relations, 3, seed=21, joint=alpha > 0)
        sampler = NegativeSampler(NegSpec(n_neg=4, p_bias=0.3, seed=22), ds.pairs)
        positives = ds.train.triples[:6]
        corr = sampler.batch(positives)
        batch = np.concatenate([positives[:, None, :], corr.negatives], axis=1)
        _, grads = sampled_batch_grads(table, batch, alpha, ds.pairs)
        check_against_fd(
            table,
            lambda: sampled_batch_grads(table, batch, alpha, ds.pairs)[0].loss_total,
            grads,
        )

    def test_sampled_with_regularizer_matches_fd(self, tmp_path):
        ds = make_random_dataset(tmp_path, seed=23)
        table = init_table(ModelKind.DISTMULT, ds.vocab.n_entities, ds.vocab.n_relations, 3, seed=24)
        batch = ds.train.triples[:5][:, None, :].repeat(3, axis=1)
        _, grads = sampled_batch_grads(table, batch, 0.0, ds.pairs, reg_lambda=0.1)
        check_against_fd(
            table,
            lambda: sampled_batch_grads(table, batch, 0.0, ds.pairs, reg_lambda=0.1)[0].loss_total,
            grads,
        )

    @pytest.mark.parametrize("kind", KINDS)
    @pytest.mark.parametrize("alpha", [0.0, 0.7])
    def test_full_softmax_matches_finite_differences(self, tmp_path, kind, alpha):
        ds = make_random_dataset(tmp_path, seed=25)
        table = init_table(kind, ds.vocab.n_entities, ds.vocab.n_relations, 3, seed=26, joint=alpha > 0)
        positives = ds.train.triples[:5]
        _, grads = full_softmax_batch_grads(table, positives, alpha, ds.pairs)
        check_against_fd(
            table,
            lambda: full_softmax_batch_grads(table, positives, alpha, ds.pairs)[0].loss_total,
            grads,
        )

    def test_two_entity_kg_equal_scores_loses_log2(self, tmp_path):
        ds = load_dataset(write_split_files(tmp_path / "kg", [("a", "r", "b")], [], []))
        table = init_table(ModelKind.DISTMULT, 2, 1, 3, seed=0)
        table.entity[:] = 0.0  # all scores equal
        nll, _, _ = full_softmax_direction(table, ds.train.triples, "tail")
        assert nll[0] == pytest.approx(math.log(2), abs=1e-12)
        nll, _, _ = full_softmax_direction(table, ds.train.triples, "head")
        assert nll[0] == pytest.approx(math.log(2), abs=1e-12)

    def test_sampled_equals_full_when_negatives_enumerate_entities(self, tmp_path):
        ds = make_random_dataset(tmp_path, seed=27, n_entities=8)
        table = init_table(ModelKind.COMPLEX, ds.vocab.n_entities, ds.vocab.n_relations, 4, seed=28)
        positives = ds.train.triples[:6]
        # tail corruptions covering every non-gold entity exactly once
        rows = []
        for h, r, t in positives:
            others = [e for e in range(ds.vocab.n_entities) if e != t]
            rows.append([(h, r, t)] + [(h, r, e) for e in others])
        batch = np.array(rows, dtype=np.int64)
        from kgforge.models import score_batch

        sampled_losses, _ = loss_tri_sampled_softmax(score_batch(table, batch))
        full_nll, _, _ = full_softmax_direction(table, positives, "tail")
        np.testing.assert_allclose(sampled_losses, full_nll, atol=1e-12)

    def test_memory_budget_guard(self, tmp_path):
        ds = make_random_dataset(tmp_path, seed=29)
        table = init_table(ModelKind.DISTMULT, ds.vocab.n_entities, ds.vocab.n_relations, 3, seed=30)
        with pytest.raises(MemoryBudgetError, match="sampled"):
            loss_full_softmax(table, ds.train.triples[:10], budget=5)

    def test_alpha_zero_total_equals_tri_exactly(self, tmp_path):
        ds = make_random_dataset(tmp_path, seed=31)
        table = init_table(ModelKind.SIMPLE, ds.vocab.n_entities, ds.vocab.n_relations, 3, seed=32, joint=True)
        batch = ds.train.triples[:5][:, None, :].repeat(4, axis=1)
        losses, grads = sampled_batch_grads(table, batch, 0.0, ds.pairs)
        assert losses.loss_total == losses.loss_tri
        assert losses.loss_bi == 0.0
        assert "relation_bi" not in grads


class TestEpochAndFit:
    def _config(self, **kw):
        base = dict(
            model=ModelKind.DISTMULT,
            dim=4,
            batch_size=10,
            n_neg=3,
            alpha=0.5,
            p_bias=0.3,
            max_epochs=5,
            eval_every=100,
            patience=2,
            seed=0,
        )
        base.update(kw)
        return TrainConfig(**base)

    def test_epoch_step_count_with_partial_batch(self, tmp_path):
        ds = make_random_dataset(tmp_path, seed=33, n_train=25)
        n = ds.train.n  # duplicates may reduce it; recompute expectation
        config = self._config(batch_size=10)
        table = init_table(config.model, ds.vocab.n_entities, ds.vocab.n_relations, config.dim, 0)
        state = AdamState.for_table(table)
        sampler = NegativeSampler(NegSpec(n_neg=3, p_bias=0.3, seed=0), ds.pairs)
        train_epoch(ds, table, config, sampler, state, np.random.default_rng(0), epoch=1)
        assert state.t == math.ceil(n / 10)

    def test_loss_decreases_on_toy_kg(self, tmp_path):
        ds = load_dataset(
            write_split_files(
                tmp_path / "kg",
                [("a", "r", "b"), ("b", "r", "c"), ("c", "r", "d"), ("d", "r", "e"), ("e", "r", "a")],
                [("a", "r", "c")],
                [("b", "r", "d")],
            )
        )
        config = self._config(max_epochs=50, batch_size=5, dim=6, joint=False, alpha=0.0, p_bias=0.0)
        _, log = fit(ds, config)
        losses = [e.loss_total for e in log.epochs]
        assert np.mean(losses[-10:]) < np.mean(losses[:10])

    def test_max_epochs_zero_returns_init(self, tmp_path):
        ds = make_random_dataset(tmp_path, seed=34)
        config = self._config(max_epochs=0)
        table, log = fit(ds, config)
        assert log.epochs == []
        fresh = init_table(config.model, ds.vocab.n_entities, ds.vocab.n_relations, config.dim, config.seed)
        np.testing.assert_array_equal(table.entity, fresh.entity)

    def test_early_stopping_keeps_first_checkpoint(self, tmp_path, monkeypatch):
        ds = make_random_dataset(tmp_path, seed=35)
        snapshots = []
        fake_scores = iter([0.3, 0.2, 0.1])

        import kgforge.evaluation as evaluation

        real_evaluate = evaluation.evaluate

        def fake_evaluate(store, table, filter_set, **kw):
            snapshots.append(table.entity.copy())
            report = real_evaluate(store, table, filter_set, **kw)
            report.metrics = dict(report.metrics, hits10=next(fake_scores))
            return report

        monkeypatch.setattr(evaluation, "evaluate", fake_evaluate)
        config = self._config(max_epochs=50, eval_every=2, patience=1)
        best, log = fit(ds, config)
        # second eval does not improve, so training stops there
        assert len(snapshots) == 2
        assert len(log.epochs) == 4
        np.testing.assert_array_equal(best.entity, snapshots[0])
        assert [e.val_hits10 for e in log.epochs if e.val_hits10 is not None] == [0.3, 0.2]

    def test_empty_validation_rejected_when_eval_scheduled(self, tmp_path):
        ds = load_dataset(write_split_files(tmp_path / "kg", [("a", "r", "b")], [], [("a", "r", "b")]))
        with pytest.raises(ValueError, match="validation"):
            fit(ds, self._config(max_epochs=10, eval_every=5))

    def test_joint_with_alpha_zero_is_bit_identical_to_baseline(self, tmp_path):
        ds = make_random_dataset(tmp_path, seed=36, n_train=12)
        common = dict(max_epochs=30, batch_size=200, eval_every=1000, p_bias=0.0, dim=4, seed=7)
        baseline, _ = fit(ds, self._config(joint=False, alpha=0.0, **common))
        jobi_off, _ = fit(ds, self._config(joint=True, alpha=0.0, **common))
        np.testing.assert_array_equal(baseline.entity, jobi_off.entity)
        np.testing.assert_array_equal(baseline.relation_tri, jobi_off.relation_tri)

    def test_evaluation_never_scores_pair_module(self, tmp_path):
        ds = make_random_dataset(tmp_path, seed=37)
        table = init_table(ModelKind.COMPLEX, ds.vocab.n_entities, ds.vocab.n_relations, 4, 0, joint=True)
        from kgforge.evaluation import evaluate

        before = table.bi_score_calls
        evaluate(ds.valid, table, ds.filter_set)
        assert table.bi_score_calls == before

    def test_early_stopping_evals_never_score_pair_module(self, tmp_path, monkeypatch):
        ds = make_random_dataset(tmp_path, seed=39)
        import kgforge.evaluation as evaluation

        real_evaluate = evaluation.evaluate
        deltas = []

        def instrumented(store, table, filter_set, **kw):
            before = table.bi_score_calls
            out = real_evaluate(store, table, filter_set, **kw)
            deltas.append(table.bi_score_calls - before)
            return out

        monkeypatch.setattr(evaluation, "evaluate", instrumented)
        fit(ds, self._config(joint=True, alpha=0.5, max_epochs=3, eval_every=1))
        assert deltas == [0, 0, 0]

    def test_training_improves_ranking_on_typed_kg(self, tmp_path):
        from conftest import make_typed_dataset
        from kgforge.evaluation import evaluate
        from kgforge.models import init_table as fresh_table

        ds = make_typed_dataset(tmp_path, seed=40)
        config = self._config(
            model=ModelKind.COMPLEX, joint=True, dim=8, batch_size=20, lr=0.01,
            max_epochs=80, eval_every=10, patience=10, n_neg=10, seed=2,
        )
        best, _ = fit(ds, config)
        trained = evaluate(ds.test, best, ds.filter_set).metrics
        untrained_table = fresh_table(
            config.model, ds.vocab.n_entities, ds.vocab.n_relations, config.dim, config.seed, joint=True
        )
        untrained = evaluate(ds.test, untrained_table, ds.filter_set).metrics
        assert trained["hits10"] > untrained["hits10"] + 0.2
        assert trained["mrr"] > untrained["mrr"] + 0.2

    def test_fit_writes_append_only_log(self, tmp_path):
        ds = make_random_dataset(tmp_path, seed=38)
        stream = io.StringIO()
        config = self._config(max_epochs=3, eval_every=2)
        fit(ds, config, log_stream=stream)
        lines = stream.getvalue().strip().splitlines()
        assert lines[0] == TrainLog.TSV_HEADER
        assert len(lines) == 4
        # eval epochs carry the validation metric in the last column
        assert lines[2].split("\t")[5] != ""
        assert lines[1].split("\t")[5] == ""


class TestConfig:
    def test_roundtrip_through_file(self, tmp_path):
        config = TrainConfig(model=ModelKind.SIMPLE, joint=True, dim=32, alpha=0.25, loss_mode=LossMode.FULL)
        path = tmp_path / "config.txt"
        config.to_file(path)
        assert TrainConfig.from_file(path) == config

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown config key"):
            TrainConfig.from_dict({"learning_rate": "0.1"})

    def test_bad_value_rejected(self):
        with pytest.raises(ConfigError, match="dim"):
            TrainConfig.from_dict({"dim": "many"})
        with pytest.raises(ConfigError, match="joint"):
            TrainConfig.from_dict({"joint": "maybe"})

    def test_validation(self):
        with pytest.raises(ConfigError, match="alpha"):
            TrainConfig(alpha=-1.0).validate()
        with pytest.raises(ConfigError, match="eval_every"):
            TrainConfig(eval_every=0).validate()
        with pytest.raises(ConfigError, match="p_bias"):
            TrainConfig(p_bias=2.0).validate()

    def test_loss_mode_aliases(self):
        assert LossMode.parse("sampled") is LossMode.SAMPLED
        assert LossMode.parse("full_softmax") is LossMode.FULL
        with pytest.raises(ConfigError):
            LossMode.parse("hinge")
