import logging

import numpy as np
import pytest

from nn_debloat.datasets import synthetic_dataset
from nn_debloat.evaluation import accuracy
from nn_debloat.model import Dense, Model
from nn_debloat.pruning import scheduler
from nn_debloat.pruning.sampling import Strategy
from nn_debloat.pruning.scheduler import (
    NothingToPruneError,
    PruneConfig,
    PruneState,
    SurgeryRecord,
    eligible_layers,
    iter_schedule,
    prune_epoch,
    run_schedule,
)
from nn_debloat.pruning.surgery import SurgeryError
from nn_debloat.trainer import build_model, train_fixture
from tests.helpers import mlp, small_cnn


def _summary_hook(model, summary):
    return summary


class TestPruneConfig:
    def test_default_schedule(self):
        config = PruneConfig()
        assert config.epoch_count == 10
        assert [config.fraction_after(epoch) for epoch in range(1, 11)] == [
            0.05,
            0.1,
            0.15,
            0.2,
            0.25,
            0.3,
            0.35,
            0.4,
            0.45,
            0.5,
        ]

    @pytest.mark.parametrize(
        "target,step,epochs",
        [
            (0.5, 0.05, 10),
            (0.3, 0.1, 3),
            (0.25, 0.0625, 4),
            (0.5, 0.2, 3),
            (1.0, 1.0, 1),
        ],
    )
    def test_epoch_count(self, target, step, epochs):
        assert PruneConfig(target, step).epoch_count == epochs

    def test_last_epoch_stops_at_target(self):
        assert PruneConfig(0.5, 0.2).fraction_after(3) == 0.5

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"target_fraction": 0.0},
            {"target_fraction": 1.5},
            {"step_fraction": 0.0},
            {"target_fraction": 0.1, "step_fraction": 0.2},
            {"seed": -1},
            {"strategy": "greedy"},
        ],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            PruneConfig(**kwargs)

    def test_strategy_from_string(self):
        assert PruneConfig(strategy="l1_only").strategy is Strategy.L1_ONLY

    @pytest.mark.parametrize(
        "original,removed,width,quota",
        [
            (100, 0, 100, 5),
            (100, 45, 55, 5),
            (100, 48, 52, 2),
            (100, 50, 50, 0),
            (20, 0, 20, 1),
            (8, 0, 8, 0),
            (2, 0, 2, 0),
        ],
    )
    def test_quota(self, original, removed, width, quota):
        assert PruneConfig().quota(original, removed, width) == quota

    def test_quota_never_empties_a_layer(self):
        assert PruneConfig(1.0, 1.0).quota(4, 0, 4) == 3


def test_record_log_line():
    metrics = {"impact_l1": 0.25, "entropy_deficit": 0.5}
    record = SurgeryRecord(2, 1, "dense", (4, 7), metrics)
    assert record.log_line() == (
        "epoch=2 layer=1 kind=dense index=4,7 impact_l1=0.25 entropy_deficit=0.5"
    )


def test_eligible_layers_skip_the_output():
    assert eligible_layers(mlp([4, 5, 6, 3])) == [0, 1]
    assert eligible_layers(small_cnn()) == [0, 2, 4]


class TestPruneEpoch:
    def test_closed_form_mlp(self):
        model = mlp([100, 100, 100, 10])
        assert model.param_count() == 21210
        final, summaries = run_schedule(model, PruneConfig(), _summary_hook)
        assert len(summaries) == 10
        assert [summary.fraction_pruned for summary in summaries] == [
            round(0.05 * epoch, 10) for epoch in range(1, 11)
        ]
        assert [final.layers[index].units for index in (0, 1, 2)] == [50, 50, 10]
        assert final.param_count() == 8110
        assert 1 - 8110 / 21210 == pytest.approx(0.618, abs=1e-3)

    def test_five_units_per_epoch(self):
        model = mlp([100, 100, 100, 10])
        _, summary = prune_epoch(model, PruneConfig())
        per_layer = [record.layer for record in summary.records]
        assert per_layer.count(0) == 5 and per_layer.count(1) == 5
        assert summary.state.removed == {0: 5, 1: 5}
        assert summary.state.epoch == 1

    def test_parameter_counts_strictly_decrease(self):
        model = mlp([4, 40, 20, 3], seed=1)
        _, summaries = run_schedule(model, PruneConfig(), _summary_hook)
        counts = [model.param_count()] + [summary.param_count for summary in summaries]
        assert all(after < before for before, after in zip(counts, counts[1:]))

    def test_input_model_untouched(self):
        model = mlp([3, 20, 2])
        duplicate = model.copy()
        prune_epoch(model, PruneConfig())
        assert model.identical_to(duplicate)

    def test_nothing_to_prune(self):
        model = Model((3,), [Dense(np.ones((3, 2)), np.zeros(2))])
        with pytest.raises(NothingToPruneError) as error:
            prune_epoch(model, PruneConfig())
        assert "nothing to prune" in str(error.value)

    def test_target_already_reached(self):
        model = mlp([3, 20, 2])
        state = PruneState({0: 20}, {0: 10}, epoch=10)
        with pytest.raises(NothingToPruneError):
            prune_epoch(model, PruneConfig(), state)

    def test_narrow_layers_warn(self, caplog):
        model = mlp([3, 8, 2])
        with caplog.at_level(logging.WARNING):
            pruned, summary = prune_epoch(model, PruneConfig())
        assert summary.records == []
        assert pruned.param_count() == model.param_count()
        assert "removed nothing" in caplog.text

    def test_surgery_log(self, caplog):
        with caplog.at_level(logging.INFO, logger="nn_debloat.pruning.scheduler"):
            prune_epoch(mlp([3, 20, 2]), PruneConfig())
        assert "epoch=1 layer=0 kind=dense index=" in caplog.text
        assert "impact_l1=" in caplog.text and "entropy_deficit=" in caplog.text

    def test_conv_channels_by_scale(self):
        model = small_cnn(seed=2, channels=(20, 3))
        scales = np.abs(model.layers[0].kernel).sum(axis=(0, 1, 2))
        _, summary = prune_epoch(model, PruneConfig())
        conv = [record for record in summary.records if record.kind == "conv2d"]
        assert [record.indices[0] for record in conv] == [int(np.argmin(scales))]

    def test_failed_surgery_aborts_epoch(self, mocker):
        model = mlp([3, 40, 2])
        duplicate = model.copy()
        real = scheduler.prune_dense_pair
        calls = []

        def flaky(*args):
            calls.append(args)
            if len(calls) == 2:
                raise SurgeryError("refused")
            return real(*args)

        mocker.patch.object(scheduler, "prune_dense_pair", side_effect=flaky)
        with pytest.raises(SurgeryError):
            prune_epoch(model, PruneConfig())
        assert len(calls) == 2
        assert model.identical_to(duplicate)


class TestSchedule:
    @pytest.mark.parametrize("strategy", list(Strategy))
    def test_deterministic(self, strategy):
        config = PruneConfig(0.3, 0.1, seed=5, strategy=strategy)
        runs = [
            run_schedule(mlp([3, 30, 20, 2], seed=3), config, _summary_hook)
            for _ in range(2)
        ]
        (first, first_summaries), (second, second_summaries) = runs
        assert first.identical_to(second)
        assert [s.records for s in first_summaries] == [
            s.records for s in second_summaries
        ]

    def test_strategies_remove_the_same_amount(self):
        counts = set()
        for strategy in Strategy:
            config = PruneConfig(0.3, 0.1, strategy=strategy)
            final, _ = run_schedule(mlp([3, 30, 20, 2], seed=3), config, _summary_hook)
            counts.add(final.param_count())
        assert len(counts) == 1

    def test_random_baseline_depends_on_seed(self):
        model = mlp([3, 30, 2], seed=3)
        first, second = (
            run_schedule(
                model,
                PruneConfig(0.3, 0.1, seed=seed, strategy="random_baseline"),
                _summary_hook,
            )[0]
            for seed in (1, 2)
        )
        assert not first.identical_to(second)

    def test_iter_schedule_calls_hook_after_every_epoch(self, mocker):
        hook = mocker.Mock(side_effect=lambda model, summary: summary.epoch)
        results = list(iter_schedule(mlp([3, 20, 2]), PruneConfig(0.2, 0.1), hook))
        assert [report for _, report in results] == [1, 2]
        assert hook.call_count == 2
        assert results[-1][0].layers[0].units == 16

    def test_cnn_reduction_in_expected_band(self):
        model = build_model("cnn:20,40/60", (8, 8, 1), 10, seed=0)
        final, _ = run_schedule(model, PruneConfig(), _summary_hook)
        reduction = 1 - final.param_count() / model.param_count()
        assert [final.layers[index].units for index in (0, 2, 5)] == [10, 20, 30]
        assert 0.55 <= reduction <= 0.80
        final.validate()

    def test_quarter_schedule_shape(self):
        final, summaries = run_schedule(
            mlp([2, 32, 32, 2], seed=4), PruneConfig(0.25, 0.0625), _summary_hook
        )
        assert len(summaries) == 4
        assert [final.layers[index].units for index in (0, 1)] == [24, 24]

    @pytest.mark.slow
    def test_joint_keeps_accuracy_and_tracks_random_baseline(self):
        seeds = range(5)
        clean = []
        per_strategy = {Strategy.JOINT: [], Strategy.RANDOM_BASELINE: []}
        for seed in seeds:
            train, test = synthetic_dataset(seed, 600).split(0.8)
            model = train_fixture("mlp:32,32", train, epochs=30, seed=seed)
            clean.append(accuracy(model, test))

            def measure(pruned, summary, test=test):
                return accuracy(pruned, test)

            # a 1/16 step removes exactly two units of 32 per epoch
            for strategy, runs in per_strategy.items():
                config = PruneConfig(0.25, 0.0625, seed=seed, strategy=strategy)
                final, accuracies = run_schedule(model, config, measure)
                assert [final.layers[index].units for index in (0, 1)] == [24, 24]
                runs.append(accuracies)

        assert min(clean) >= 0.9
        joint = np.mean(per_strategy[Strategy.JOINT], axis=0)
        baseline = np.mean(per_strategy[Strategy.RANDOM_BASELINE], axis=0)
        assert np.mean(clean) - joint[-1] <= 0.05
        assert (joint >= baseline - 0.02).all()
