import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ghostlab import protocol, toy
from ghostlab.protocol import (CSV_FIELDS, EpochLog, RunRecord, abrupt_drops, accuracy_of,
                               detect_stuck, lower_confidence, outcome_label, run_training)
from ghostlab.rnn import TaskSpec, forward, init_params, sigmoid


class TestAccuracy:
    def test_zero_output_is_half(self):
        tgt = TaskSpec().target()
        assert accuracy_of(np.zeros(40), tgt) == 0.5

    def test_perfect(self):
        tgt = TaskSpec().target()
        assert accuracy_of(tgt, tgt) == 1.0

    def test_off_by_one(self):
        tgt = TaskSpec().target()
        out = np.roll(tgt, 1)
        out[0] = 0.0
        assert accuracy_of(out, tgt) == 39 / 40

    def test_trajectory(self):
        traj = forward(init_params(0), TaskSpec())
        assert protocol.accuracy(traj) == accuracy_of(traj.output, traj.target)


class TestStuck:
    def test_flat_half(self):
        assert detect_stuck([0.5] * 60)

    def test_one_epoch_above(self):
        acc = [0.5] * 60
        acc[-10] = 0.51
        assert not detect_stuck(acc)

    def test_too_short(self):
        with pytest.raises(ValueError):
            detect_stuck([0.5] * 49)

    def test_record_input(self):
        rec = RunRecord(logs=[EpochLog(i, 1.0, 0.0, 0.4) for i in range(50)])
        assert detect_stuck(rec)

    def test_outcome_precedence(self):
        assert outcome_label([1.0] + [0.5] * 50) == protocol.STUCK
        assert outcome_label([0.5] * 10 + [1.0]) == protocol.LEARNED
        assert outcome_label([0.5] * 10 + [0.9]) == protocol.NEITHER
        assert outcome_label([0.5] * 49 + [1.0]) == protocol.LEARNED

    def test_epochs_to_learned(self):
        assert protocol.epochs_to_learned([0.5, 0.9, 1.0, 1.0]) == 2
        assert protocol.epochs_to_learned([0.5, 1.0], epochs=[10, 11]) == 11
        assert protocol.epochs_to_learned([0.5]) is None


class TestAbruptDrops:
    def test_threshold(self):
        assert list(abrupt_drops([100, 80, 59, 58])) == [2]
        assert list(abrupt_drops([100, 76])) == []
        assert list(abrupt_drops([5])) == []

    def test_toy_trace_fires(self):
        rs = toy.optimal_r(100)
        rec = toy.train_toy_gd(100, 10 * rs, 1e-10, 3000)
        drops = abrupt_drops(rec.loss)
        assert len(drops) and 1000 <= drops[0] <= 2500

    def test_gradual_full_rank_run_does_not_fire(self):
        # full-rank linear-readout nets at a small rate decrease gradually
        quiet = 0
        for s in range(5):
            rec = run_training(init_params(s, K=100, readout="linear"), TaskSpec(), 3e-5, 3000)
            quiet += len(abrupt_drops(rec.losses)) == 0
        assert quiet > 2


class TestConfidence:
    def test_identity(self):
        p = init_params(0)
        assert lower_confidence(p, 10.0) is p

    def test_only_c_changes(self):
        p = init_params(0)
        q = lower_confidence(p, 1.0)
        assert q.c == 1.0
        for name in ("M", "Nfac", "b"):
            assert np.array_equal(getattr(p, name), getattr(q, name))
        assert q.kappa_star == p.kappa_star and q.trainable == p.trainable

    @given(st.floats(-10, 10).filter(lambda k: abs(k - 1.0) > 1e-3))
    def test_less_saturated(self, kappa):
        hi = abs(sigmoid(10 * np.array([kappa - 1.0]))[0] - 0.5)
        lo = abs(sigmoid(1 * np.array([kappa - 1.0]))[0] - 0.5)
        assert lo < hi

    def test_linear_readout_rejected(self):
        with pytest.raises(ValueError):
            lower_confidence(init_params(0, readout="linear"), 1.0)

    def test_event_logged(self):
        rec = run_training(init_params(0), TaskSpec(), 1e-4, 3)
        lower_confidence(rec.params, 1.0, rec)
        assert rec.events == [{"epoch": 3, "kind": "lower_confidence", "from": 10.0, "to": 1.0}]


class TestRunTraining:
    def test_zero_epochs(self):
        p = init_params(0)
        rec = run_training(p, TaskSpec(), 1e-4, 0)
        assert rec.logs == [] and rec.params is p

    def test_deterministic(self):
        a = run_training(init_params(5), TaskSpec(), 1e-3, 200, analysis_stride=20)
        b = run_training(init_params(5), TaskSpec(), 1e-3, 200, analysis_stride=20)
        assert protocol.epoch_csv_text(a.logs) == protocol.epoch_csv_text(b.logs)

    def test_log_contents(self):
        seen = []
        rec = run_training(init_params(1), TaskSpec(), 1e-4, 25, analysis_stride=10,
                           hooks=[lambda e, p, lg: seen.append(e)])
        assert seen == list(range(25))
        assert [lg.epoch for lg in rec.logs] == list(range(25))
        analysed = [lg.epoch for lg in rec.logs if lg.fp_count is not None]
        assert analysed == [0, 10, 20, 24]
        first = rec.logs[0]
        assert first.loss == forward(init_params(1), TaskSpec()).loss
        assert first.confidence == 10.0
        assert all(0 <= lg.accuracy <= 1 and lg.loss >= 0 for lg in rec.logs)

    def test_continuation_matches_single_run(self):
        whole = run_training(init_params(2), TaskSpec(), 1e-3, 40)
        part = run_training(init_params(2), TaskSpec(), 1e-3, 25)
        run_training(part.params, TaskSpec(), 1e-3, 15, start_epoch=25, record=part)
        assert protocol.epoch_csv_text(whole.logs) == protocol.epoch_csv_text(part.logs)

    def test_nonfinite_aborts(self):
        p = init_params(0, N=5)
        p = p.replace(b=np.full(5, np.nan))
        rec = run_training(p, TaskSpec(), 1e-4, 10)
        assert rec.aborted and rec.logs == []
        assert rec.events[0]["kind"] == "abort"


class TestSerialization:
    def test_header(self):
        text = protocol.epoch_csv_text([])
        assert text == "epoch,loss,grad_norm,accuracy,confidence,fp_count,ghost_absf,ghost_kappa\n"
        assert ",".join(CSV_FIELDS) == text.strip()

    def test_round_trip_and_empty_fields(self, tmp_path):
        rec = run_training(init_params(0), TaskSpec(), 1e-4, 12, analysis_stride=5)
        path = tmp_path / "log.csv"
        protocol.write_epoch_csv(rec.logs, path)
        back = protocol.read_epoch_csv(path)
        assert back == rec.logs
        second_row = path.read_text().splitlines()[2]
        assert second_row.endswith(",,,")

    def test_shortest_round_trip_floats(self):
        lg = EpochLog(0, 0.1, 1 / 3, 0.5)
        row = protocol.epoch_csv_text([lg]).splitlines()[1]
        assert row.split(",")[1:3] == [repr(0.1), repr(1 / 3)]

    def test_metadata(self, tmp_path):
        rec = run_training(init_params(0), TaskSpec(), 1e-4, 3, seed=4, config_hash="abc")
        protocol.write_run_metadata(rec, tmp_path / "meta.json")
        meta = rec.metadata()
        assert meta["seed"] == 4 and meta["config_hash"] == "abc" and meta["n_epochs"] == 3
        assert meta["outcome"] == protocol.NEITHER
