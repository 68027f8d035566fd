import numpy as np
import pytest
from scipy.stats import chi2_contingency

from socnn import ingest as ig
from uci_fixture import write_uci


class TestParse:
    def test_three_rows(self, tmp_path):
        data, stats = ig.parse_uci(write_uci(tmp_path / "u.txt", 3))
        np.testing.assert_array_equal(data.minutes, [0, 1, 2])
        assert data.features.shape == (3, 7) and stats.rows_read == 3

    def test_question_mark_forward_filled(self, tmp_path):
        data, stats = ig.parse_uci(write_uci(tmp_path / "u.txt", 5, missing={2: 3}))
        assert data.features[2, 3] == data.features[1, 3]
        assert stats.values_repaired == 1

    def test_leading_incomplete_rows_dropped(self, tmp_path):
        data, stats = ig.parse_uci(write_uci(tmp_path / "u.txt", 5, missing={0: 0}))
        assert len(data) == 4 and stats.rows_dropped_leading == 1

    def test_gap_filled_on_minute_grid(self, tmp_path):
        data, stats = ig.parse_uci(write_uci(tmp_path / "u.txt", 10, skip={4, 5}))
        assert len(data) == 10 and stats.gap_minutes_filled == 2
        np.testing.assert_array_equal(data.features[4], data.features[3])
        np.testing.assert_array_equal(data.filled, [i in (4, 5) for i in range(10)])

    def test_malformed_lines_reported(self, tmp_path):
        data, stats = ig.parse_uci(write_uci(tmp_path / "u.txt", 10, bad={3}))
        assert stats.malformed_lines == [5]  # header is line 1, row 3 is line 5
        assert len(data) == 10  # the skipped minute is refilled

    def test_error_budget(self, tmp_path):
        path = write_uci(tmp_path / "u.txt", 10, bad={1, 2, 3})
        with pytest.raises(ig.IngestError, match="line"):
            ig.parse_uci(path, error_budget=2)

    def test_unreadable(self, tmp_path):
        with pytest.raises(ig.IngestError, match="nope"):
            ig.parse_uci(tmp_path / "nope.txt")


class TestSchedule:
    def test_first_cycle(self):
        np.testing.assert_array_equal(ig.subsample_schedule(25), [0, 1, 3, 6, 13, 15, 17, 21, 22, 24])

    def test_cycle_differences(self):
        kept = ig.subsample_schedule(250)
        diffs = np.diff(kept)
        cycle = [1, 2, 3, 7, 2, 2, 4, 1, 2, 1]
        np.testing.assert_array_equal(diffs, np.tile(cycle, 10)[:len(diffs)])
        assert sum(cycle) == 25
        np.testing.assert_array_equal(ig.schedule_durations(kept)[:10], [1, 1, 2, 3, 7, 2, 2, 4, 1, 2])

    def test_kept_fraction(self):
        assert len(ig.subsample_schedule(2_500_000)) / 2_500_000 == 0.4

    def test_durations_in_allowed_set(self):
        assert set(ig.schedule_durations(ig.subsample_schedule(1000)).tolist()) == {1, 2, 3, 4, 7}


def _grid(n, seed=0):
    rng = np.random.default_rng(seed)
    from datetime import datetime
    return ig.ElectricityData(datetime(2007, 1, 1), rng.uniform(0, 5, (n, 7)), np.zeros(n, bool))


class TestSampleFeatures:
    def test_identity_permutation_frequency(self):
        out = ig.sample_features(_grid(250_000), np.random.default_rng(0), permutation=range(7))
        ind = out.frame.values[:, 2:9]
        assert len(ind) == 100_000
        expected = 1.5 ** 6 / sum(1.5 ** i for i in range(7))
        assert expected == pytest.approx(0.354, abs=5e-4)
        assert ind[:, 6].mean() == pytest.approx(expected, abs=0.01)

    def test_layout(self):
        out = ig.sample_features(_grid(500), np.random.default_rng(1))
        f = out.frame
        assert f.values.shape == (200, 2 + 7 + 1 + 1 + 7)
        np.testing.assert_array_equal(f.values[:, 2:9].sum(axis=1), 1.0)
        chosen = f.values[:, 2:9].argmax(axis=1)
        np.testing.assert_array_equal(f.values[:, 9], f.values[np.arange(200), 11 + chosen])
        assert f.column_roles.count("target") == 7
        assert ((0 <= f.values[:, :2]) & (f.values[:, :2] < 1)).all()

    def test_seeded(self):
        a = ig.sample_features(_grid(300), np.random.default_rng(4))
        b = ig.sample_features(_grid(300), np.random.default_rng(4))
        np.testing.assert_array_equal(a.frame.values, b.frame.values)
        assert a.permutation == b.permutation

    def test_constant_frequency_over_time(self):
        out = ig.sample_features(_grid(50_000), np.random.default_rng(2))
        ind = out.frame.values[:, 2:9]
        h = len(ind) // 2
        table = np.vstack([ind[:h].sum(axis=0), ind[h:].sum(axis=0)])
        assert chi2_contingency(table)[1] > 0.01

    def test_bad_permutation(self):
        with pytest.raises(ValueError):
            ig.feature_weights([0, 0, 1, 2, 3, 4, 5])


def test_ingest_end_to_end(tmp_path):
    out = ig.ingest(write_uci(tmp_path / "u.txt", 50), seed=3)
    assert len(out.frame) == 20 and out.kept_fraction == 0.4
    assert out.frame.meta["seed"] == 3 and out.frame.meta["parse"]["rows_read"] == 50
