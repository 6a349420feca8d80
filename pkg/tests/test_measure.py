# -*- coding: utf-8 -*-
"""
真实观测量、扰动与误差分布
"""

import math

import numpy as np
import pytest

from core.errors import ConfigError, DegenerateDistributionError, NoPathFoundError
from core.measure import (
    AngleMeasurement, Arrival, Categories, GroundTruth, MeasurementSet, NoiseSigmas, PtMeasurement,
    RptMeasurement, TruthSearchConfig, aoa_log_density, measurements_from_dict, measurements_to_dict,
    perturb, rpt_pairs, sample_pt_lengths, sample_rpt_deltas, true_arrival, true_observables, wrap_angle,
)
from core.scene import Scene, Surface, _box_faces, generate_box_scene

SEARCH = TruthSearchConfig(n_directions=20000)


def _room_with_box(lo, hi):
    room = generate_box_scene()
    surfaces = room.surfaces + tuple(Surface(f) for f in _box_faces(lo, hi))
    return Scene(surfaces, room.base_stations)


def _single_truth(azimuth=0.3, elevation=-0.2, length=7.0):
    return GroundTruth(np.zeros(3), {0: Arrival(0, azimuth, elevation, length, 0)})


class TestTrueObservables:

    def test_line_of_sight_3_4_5(self, empty_room):
        arrival = true_arrival(empty_room, 0, [3.0, 4.0, 2.5])
        assert arrival.length == pytest.approx(5.0)
        assert arrival.azimuth == pytest.approx(math.atan2(4, 3))
        assert arrival.elevation == pytest.approx(0.0, abs=1e-12)
        assert arrival.bounces == 0

    def test_blocked_ue_uses_a_reflection(self):
        scene = _room_with_box((1.5, 3.0, 0.0), (2.5, 5.0, 2.45))
        ue = np.array([4.0, 9.0, 0.5])
        arrival = true_arrival(scene, 0, ue, max_bounces=2, search=SEARCH)
        assert arrival.bounces >= 1
        assert arrival.length > np.linalg.norm(ue - scene.station(0).position)

    def test_enclosed_ue_has_no_path(self):
        scene = _room_with_box((3.0, 8.0, 0.0), (5.0, 10.0, 1.5))
        with pytest.raises(NoPathFoundError) as info:
            true_observables(scene, [4.0, 9.0, 0.7], max_bounces=2, search=TruthSearchConfig(n_directions=2000))
        assert info.value.bs_id is None

    def test_missing_station_is_recorded(self):
        scene = _room_with_box((3.0, 8.0, 0.0), (5.0, 10.0, 1.5))
        with pytest.raises(NoPathFoundError) as info:
            true_arrival(scene, 2, [4.0, 9.0, 0.7], max_bounces=1, search=TruthSearchConfig(n_directions=2000))
        assert info.value.bs_id == 2

    def test_ue_outside_scene(self, empty_room):
        with pytest.raises(ValueError):
            true_observables(empty_room, [9.0, 1.0, 1.0])


class TestPerturb:

    def test_zero_noise_reproduces_truth(self, empty_room):
        truth = true_observables(empty_room, [2.0, 5.0, 1.2])
        meas = perturb(truth, NoiseSigmas(), np.random.default_rng(0), Categories(pt=True, rpt=True))
        for bs_id, arrival in truth.arrivals.items():
            assert meas.angle(bs_id).azimuth == pytest.approx(arrival.azimuth, abs=1e-12)
            assert meas.angle(bs_id).elevation == arrival.elevation
            assert meas.pt(bs_id).equivalent_length == pytest.approx(arrival.length, abs=1e-9)
        for (i, j), rpt in meas.rpts.items():
            assert rpt.delta_length == pytest.approx(truth.arrivals[i].length - truth.arrivals[j].length)

    def test_azimuth_error_spread_matches_sigma(self):
        truth = _single_truth()
        sigma = math.radians(1.0)
        rng = np.random.default_rng(42)
        errors = [
            wrap_angle(perturb(truth, NoiseSigmas(sigma_eta=sigma), rng).angle(0).azimuth - 0.3)
            for _ in range(10000)
        ]
        assert 0.97 <= math.degrees(np.std(errors)) <= 1.03

    def test_rpt_antisymmetry(self, empty_room):
        truth = true_observables(empty_room, [6.0, 12.0, 1.0])
        meas = perturb(truth, NoiseSigmas(0.0, 0.0, 0.3), np.random.default_rng(1), Categories(rpt=True))
        assert meas.rpt(0, 3).delta_length == pytest.approx(-meas.rpt(3, 0).delta_length)

    def test_same_rng_same_measurements(self, empty_room):
        truth = true_observables(empty_room, [6.0, 12.0, 1.0])
        sigmas = NoiseSigmas(0.01, 0.5, 0.5)
        cats = Categories(pt=True, rpt=True)
        a = perturb(truth, sigmas, np.random.default_rng(9), cats)
        b = perturb(truth, sigmas, np.random.default_rng(9), cats)
        assert a == b

    def test_reference_topology(self):
        assert rpt_pairs([0, 1, 2, 3], "reference", reference_bs=2) == [(0, 2), (1, 2), (3, 2)]
        assert len(rpt_pairs([0, 1, 2, 3])) == 6


class TestAoaDensity:

    def test_peak_value(self):
        m = AngleMeasurement(0, 0.5, 0.1, 0.02)
        assert aoa_log_density(m, (0.5, 0.1)) == pytest.approx(-math.log(2 * math.pi * 0.02 ** 2))

    def test_one_sigma_offset(self):
        m = AngleMeasurement(0, 0.5, 0.1, 0.02)
        peak = aoa_log_density(m, (0.5, 0.1))
        assert aoa_log_density(m, (0.52, 0.1)) == pytest.approx(peak - 0.5)

    def test_wrap_around(self):
        m = AngleMeasurement(0, math.pi - 0.01, 0.0, 0.02)
        peak = aoa_log_density(m, (math.pi - 0.01, 0.0))
        value = aoa_log_density(m, (-math.pi + 0.01, 0.0))
        assert value == pytest.approx(peak - 0.5 * (0.02 / 0.02) ** 2)

    def test_zero_sigma_is_degenerate(self):
        with pytest.raises(DegenerateDistributionError):
            aoa_log_density(AngleMeasurement(0, 0.0, 0.0, 0.0), (0.0, 0.0))

    def test_maximized_at_measurement(self):
        m = AngleMeasurement(0, -1.0, 0.4, 0.03)
        grid = np.stack(np.meshgrid(np.linspace(-1.09, -0.91, 37), np.linspace(0.31, 0.49, 37)), axis=-1)
        values = aoa_log_density(m, grid)
        i, j = np.unravel_index(np.argmax(values), values.shape)
        assert grid[i, j] == pytest.approx([-1.0, 0.4], abs=0.006)


class TestLengthSampling:

    def test_zero_sigma_pt(self):
        pt = PtMeasurement.from_length(0, 4.2, 0.0)
        draws = sample_pt_lengths(pt, 100, np.random.default_rng(0))
        assert np.all(draws == pt.equivalent_length)

    def test_pt_mean(self):
        draws = sample_pt_lengths(PtMeasurement.from_length(0, 3.0, 0.5), 10000, np.random.default_rng(1))
        assert abs(draws.mean() - 3.0) <= 3 * 0.5 / 100

    def test_pt_clamped_at_zero(self):
        draws = sample_pt_lengths(PtMeasurement.from_length(0, 0.1, 1.0), 10000, np.random.default_rng(2))
        assert draws.min() >= 0.0

    def test_zero_sigma_rpt(self):
        draws = sample_rpt_deltas(RptMeasurement((0, 1), -1.5, 0.0), 50, np.random.default_rng(0))
        assert np.all(draws == -1.5)

    def test_rpt_negative_deltas(self):
        draws = sample_rpt_deltas(RptMeasurement((0, 1), -2.0, 1.0), 10000, np.random.default_rng(3))
        assert np.mean(draws < 0) > 0.95

    def test_rpt_swapped_pair_negates(self):
        rpt = RptMeasurement((0, 1), 1.2, 0.4)
        a = sample_rpt_deltas(rpt, 10000, np.random.default_rng(4))
        b = sample_rpt_deltas(rpt.swapped(), 10000, np.random.default_rng(5))
        assert abs(a.mean() + b.mean()) <= 2 * 3 * 0.4 / 100


class TestMeasurementFile:

    def test_degrees_are_converted(self, empty_room):
        data = {"aoa": [{"bs": 1, "azimuth_deg": 90.0, "elevation_deg": -30.0, "sigma_deg": 1.0}],
                "pt": [{"bs": 1, "length_m": 6.0, "sigma_m": 0.5}],
                "rpt": [{"bs_i": 1, "bs_j": 0, "delta_m": 2.0, "sigma_m": 0.5}]}
        meas = measurements_from_dict(data, empty_room)
        assert meas.angle(1).azimuth == pytest.approx(math.pi / 2)
        assert meas.angle(1).sigma_eta == pytest.approx(math.radians(1.0))
        assert meas.pt(1).equivalent_length == pytest.approx(6.0)
        assert meas.rpt(0, 1).delta_length == pytest.approx(-2.0)

    def test_unknown_station(self, empty_room):
        data = {"aoa": [{"bs": 7, "azimuth_deg": 0.0, "elevation_deg": 0.0, "sigma_deg": 1.0}]}
        with pytest.raises(ConfigError, match="unknown BS id"):
            measurements_from_dict(data, empty_room)

    def test_round_trip(self, empty_room):
        meas = MeasurementSet.build(
            [AngleMeasurement(0, 0.7, -0.3, 0.01)], [PtMeasurement.from_length(0, 5.0, 0.3)],
            [RptMeasurement((0, 2), 1.0, 0.3)],
        )
        again = measurements_from_dict(measurements_to_dict(meas), empty_room)
        assert again.angle(0).azimuth == pytest.approx(0.7)
        assert again.pt(0).equivalent_length == pytest.approx(5.0)
        assert again.rpt(2, 0).delta_length == pytest.approx(-1.0)

    def test_duplicate_pair_is_rejected(self):
        with pytest.raises(ValueError):
            MeasurementSet.build(rpts=[RptMeasurement((0, 1), 1.0, 0.1), RptMeasurement((1, 0), -1.0, 0.1)])
