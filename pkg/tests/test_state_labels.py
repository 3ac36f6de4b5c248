import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nexus.gp_trend import PriorSpec, fit_trend
from nexus.state_labels import (
    EscalationState,
    LabelerConfig,
    discretize,
    label_windows,
    load_labels_csv,
    save_labels_csv,
)

from conftest import make_series


class TestDiscretize:
    def test_peace_dominates_derivative(self):
        assert discretize([0.9], [0], 0.25)[0] == EscalationState.PEACE

    def test_escalation_above_threshold(self):
        assert discretize([0.30], [12], 0.25)[0] == EscalationState.ESCALATION

    def test_boundary_is_plateau(self):
        assert discretize([-0.25], [12], 0.25)[0] == EscalationState.PLATEAU

    @pytest.mark.parametrize(
        "deriv,expected_nonzero",
        [
            (-1.0, EscalationState.DEESCALATION),
            (-0.26, EscalationState.DEESCALATION),
            (-0.25, EscalationState.PLATEAU),
            (0.0, EscalationState.PLATEAU),
            (0.25, EscalationState.PLATEAU),
            (0.26, EscalationState.ESCALATION),
            (1.0, EscalationState.ESCALATION),
        ],
    )
    def test_exhaustive_case_grid(self, deriv, expected_nonzero):
        assert discretize([deriv], [0], 0.25)[0] == EscalationState.PEACE
        assert discretize([deriv], [5], 0.25)[0] == expected_nonzero

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            discretize([0.1, 0.2], [1], 0.25)

    @given(
        derivs=st.lists(st.floats(-5, 5), min_size=1, max_size=50),
        tau=st.floats(0.01, 3.0),
        seed=st.integers(0, 2**16),
    )
    def test_exactly_one_state_per_month(self, derivs, tau, seed):
        rng = np.random.default_rng(seed)
        raw = rng.integers(0, 10, size=len(derivs))
        states = discretize(derivs, raw, tau)
        assert set(np.unique(states)) <= {0, 1, 2, 3}
        assert len(states) == len(derivs)

    def test_huge_tau_gives_only_peace_or_plateau(self):
        states = discretize([-4.0, -0.1, 0.0, 2.0], [3, 0, 1, 9], tau=1e9)
        assert set(states) <= {int(EscalationState.PEACE), int(EscalationState.PLATEAU)}

    def test_tiny_tau_plateau_only_at_exact_zero(self):
        states = discretize([-0.1, 0.0, 0.1], [3, 3, 3], tau=1e-300)
        assert list(states) == [
            int(EscalationState.DEESCALATION),
            int(EscalationState.PLATEAU),
            int(EscalationState.ESCALATION),
        ]

    def test_pure_function_repeatable(self):
        d = np.array([0.3, -0.3, 0.0])
        raw = np.array([1, 2, 0])
        assert np.array_equal(discretize(d, raw), discretize(d, raw))


PRIOR = PriorSpec(np.log(122.38), 0.5)


def _fit_pair(series, train_end):
    """Dual fits: train on the truncated series, validation on the full one."""
    fit_train = fit_trend(series.month_slice(int(series.months[0]), train_end), PRIOR)
    fit_val = fit_trend(series, PRIOR)
    return fit_train, fit_val


class TestLabelWindows:
    def _setup(self, raw, train_offset=11):
        series = make_series(raw)
        train_end = int(series.months[0]) + train_offset
        val_end = int(series.months[-1])
        fit_t, fit_v = _fit_pair(series, train_end)
        config = LabelerConfig(tau=0.25, train_end=train_end, val_end=val_end)
        return series, fit_t, fit_v, config

    def test_windows_partition_cleanly(self):
        raw = [0, 1, 4, 9, 25, 60, 80, 40, 12, 3, 1, 0, 2, 9, 30, 55, 70, 20]
        series, fit_t, fit_v, config = self._setup(raw)
        train, val = label_windows({"d1": series}, {"d1": fit_t}, {"d1": fit_v}, config)
        assert train["d1"].months.max() <= config.train_end
        assert val["d1"].months.min() > config.train_end
        assert len(train["d1"].months) + len(val["d1"].months) == len(raw)

    def test_train_labels_immune_to_future_perturbation(self, tmp_path):
        raw = [0, 1, 4, 9, 25, 60, 80, 40, 12, 3, 1, 0, 2, 9, 30, 55, 70, 20]
        series, fit_t, fit_v, config = self._setup(raw)
        perturbed_raw = list(raw)
        for i in range(12, len(raw)):
            perturbed_raw[i] = raw[i] * 7 + 13
        perturbed = make_series(perturbed_raw)
        fit_t2, fit_v2 = _fit_pair(perturbed, config.train_end)

        train_a, _ = label_windows({"d1": series}, {"d1": fit_t}, {"d1": fit_v}, config)
        train_b, _ = label_windows(
            {"d1": perturbed}, {"d1": fit_t2}, {"d1": fit_v2}, config
        )
        path_a, path_b = tmp_path / "a.csv", tmp_path / "b.csv"
        save_labels_csv(train_a, path_a)
        save_labels_csv(train_b, path_b)
        assert path_a.read_bytes() == path_b.read_bytes()

    def test_equal_ends_give_empty_validation(self):
        raw = [0, 1, 4, 9, 25, 60, 80, 40, 12, 3, 1, 0]
        series = make_series(raw)
        end = int(series.months[-1])
        fit = fit_trend(series, PRIOR)
        config = LabelerConfig(tau=0.25, train_end=end, val_end=end)
        train, val = label_windows({"d1": series}, {"d1": fit}, {"d1": fit}, config)
        assert len(train["d1"].months) == len(raw)
        assert len(val["d1"].months) == 0

    def test_missing_fit_skips_dyad(self):
        raw = [0, 1, 4, 9, 25, 60, 80, 40, 12, 3, 1, 0]
        series = make_series(raw)
        config = LabelerConfig(0.25, int(series.months[5]), int(series.months[-1]))
        train, val = label_windows({"d1": series}, {}, {}, config)
        assert train == {} and val == {}

    def test_three_dyad_counts_match_reapplication(self):
        rng = np.random.default_rng(4)
        series_by_dyad = {}
        fits_t, fits_v = {}, {}
        train_end = None
        for name in ("a", "b", "c"):
            raw = rng.integers(0, 60, size=20)
            raw[rng.integers(0, 20, size=5)] = 0
            series = make_series(raw, dyad_id=name)
            series_by_dyad[name] = series
            train_end = int(series.months[0]) + 13
            fits_t[name], fits_v[name] = _fit_pair(series, train_end)
        config = LabelerConfig(0.25, train_end, int(series.months[-1]))
        train, val = label_windows(series_by_dyad, fits_t, fits_v, config)
        for name, series in series_by_dyad.items():
            for part, fit in ((train[name], fits_t[name]), (val[name], fits_v[name])):
                grid_pos = {int(m): i for i, m in enumerate(fit.grid)}
                for m, state in zip(part.months, part.states):
                    i = grid_pos[int(m)]
                    d = fit.derivative[i]
                    raw_m = series.raw_fatalities[list(series.months).index(m)]
                    if raw_m == 0:
                        expected = 0
                    elif d > 0.25:
                        expected = 1
                    elif d < -0.25:
                        expected = 3
                    else:
                        expected = 2
                    assert state == expected

    def test_csv_round_trip(self, tmp_path):
        raw = [0, 1, 4, 9, 25, 60, 80, 40, 12, 3, 1, 0]
        series = make_series(raw)
        fit = fit_trend(series, PRIOR)
        config = LabelerConfig(0.25, int(series.months[-1]), int(series.months[-1]))
        train, _ = label_windows({"d1": series}, {"d1": fit}, {"d1": fit}, config)
        path = tmp_path / "labels.csv"
        save_labels_csv(train, path)
        loaded = load_labels_csv(path)
        assert set(loaded["d1"].values()) == set(int(s) for s in train["d1"].states)
        assert len(loaded["d1"]) == len(raw)
