# -*- coding: utf-8 -*-
"""
点云生成与 PT/RPT 筛选
"""

import math

import numpy as np
import pytest
from scipy import stats

from core.cloud import (
    FUSION_AOA, FUSION_PT, FUSION_RPT, ORDER_PER_RAY, PROVENANCE_PT, PROVENANCE_RPT, FusionConfig,
    PairDifferenceTable, PointCloud, RaysConfig, SelectionConfig, apply_fusion, generate_aoa_cloud,
    generate_isotropic_cloud, sample_isotropic_directions, select_by_pt, select_by_rpt, write_clouds_csv,
)
from core.errors import FusionError, InconsistentMeasurementError
from core.measure import (
    AngleMeasurement, Categories, NoiseSigmas, PtMeasurement, RptMeasurement, perturb, sample_aoa_directions,
    true_observables,
)
from core.scene import angles_from_direction

NO_FALLBACK = SelectionConfig(fallback=False)


def _line_cloud(lengths, bs_id=0):
    lengths = np.asarray(lengths, dtype=float)
    positions = np.stack([lengths, np.zeros_like(lengths), np.ones_like(lengths)], axis=1)
    return PointCloud(bs_id, positions, lengths, np.zeros(lengths.size, dtype=int))


@pytest.fixture(scope="module")
def fusion_inputs(empty_room):
    truth = true_observables(empty_room, [3.0, 7.0, 1.0])
    meas = perturb(truth, NoiseSigmas(math.radians(1.0), 0.1, 0.1), np.random.default_rng(8),
                   Categories(pt=True, rpt=True))
    rays = RaysConfig(max_bounces=2, max_length=40.0)
    clouds = {
        bs: generate_aoa_cloud(empty_room, bs, meas.angle(bs), 300, rays, np.random.default_rng(bs))
        for bs in meas.bs_ids
    }
    return truth, meas, clouds


class TestAoaCloud:

    def test_noiseless_rays_share_one_polyline_through_ue(self, empty_room):
        ue = np.array([5.0, 6.0, 1.0])
        truth = true_observables(empty_room, ue)
        arrival = truth.arrivals[1]
        angle = AngleMeasurement(1, arrival.azimuth, arrival.elevation, 0.0)
        cloud = generate_aoa_cloud(empty_room, 1, angle, 20, RaysConfig(step=0.1), np.random.default_rng(0))
        first = cloud.ray_index == 0
        for r in range(20):
            np.testing.assert_allclose(cloud.positions[cloud.ray_index == r], cloud.positions[first])
        assert np.min(np.linalg.norm(cloud.positions - ue, axis=1)) <= 0.05 + 1e-9

    def test_point_count_and_containment(self, empty_room):
        angle = AngleMeasurement(0, math.radians(60), math.radians(-20), math.radians(2))
        rays = RaysConfig(max_bounces=5, max_length=20.0, step=0.1)
        cloud = generate_aoa_cloud(empty_room, 0, angle, 500, rays, np.random.default_rng(1))
        assert len(cloud) <= 500 * 201
        assert np.all(cloud.positions >= empty_room.bbox_min - 1e-9)
        assert np.all(cloud.positions <= empty_room.bbox_max + 1e-9)
        assert np.all(cloud.lengths <= 20.0 + 1e-9)

    def test_launch_directions_follow_sigma(self):
        sigma = math.radians(2.0)
        angle = AngleMeasurement(0, 1.0, 0.0, sigma)
        dirs = sample_aoa_directions(angle, 10000, np.random.default_rng(2))
        azimuths = np.array([angles_from_direction(d)[0] for d in dirs])
        assert abs(np.std(azimuths - 1.0) / sigma - 1.0) < 0.03

    def test_mismatched_station(self, empty_room):
        with pytest.raises(ValueError):
            generate_aoa_cloud(empty_room, 2, AngleMeasurement(1, 0.0, 0.0, 0.01), 10, None,
                               np.random.default_rng(0))


class TestIsotropicCloud:

    @staticmethod
    def _first_step_directions(scene, cloud, step):
        origin = scene.station(cloud.bs_id).position
        first = cloud.lengths == step
        d = cloud.positions[first] - origin
        return d / np.linalg.norm(d, axis=1, keepdims=True)

    def test_directions_are_uniform(self):
        dirs = sample_isotropic_directions(10000, np.random.default_rng(3))
        np.testing.assert_allclose(np.linalg.norm(dirs, axis=1), 1.0)
        assert np.linalg.norm(dirs.mean(axis=0)) < 0.05

    def test_hemisphere_points_down(self):
        dirs = sample_isotropic_directions(2000, np.random.default_rng(4), hemisphere=True)
        assert np.all(dirs[:, 2] <= 0.0)

    def test_corner_station_launches_into_room(self, empty_room):
        # 基站 0 位于 (0, 0, 2.5)，进入场景的方向是 +x、+y、-z 卦限上的均匀分布
        rays = RaysConfig(max_bounces=0, max_length=1.0, step=0.1)
        cloud = generate_isotropic_cloud(empty_room, 0, 10000, rays, np.random.default_rng(3))
        dirs = self._first_step_directions(empty_room, cloud, 0.1)
        assert len(dirs) == 10000
        assert np.all(dirs[:, 0] >= -1e-9) and np.all(dirs[:, 1] >= -1e-9) and np.all(dirs[:, 2] <= 1e-9)
        np.testing.assert_allclose(dirs.mean(axis=0), [0.5, 0.5, -0.5], atol=0.03)

    def test_single_ray(self, empty_room):
        cloud = generate_isotropic_cloud(empty_room, 3, 1, None, np.random.default_rng(5))
        assert len(cloud) > 1
        assert np.all(cloud.ray_index == 0)


class TestContainment:

    @pytest.mark.parametrize("hemisphere", [False, True])
    def test_isotropic_cloud_from_corner_stays_in_room(self, empty_room, hemisphere):
        rays = RaysConfig(max_bounces=5, max_length=100.0, step=0.1, hemisphere=hemisphere)
        for bs in range(4):
            cloud = generate_isotropic_cloud(empty_room, bs, 1000, rays, np.random.default_rng(bs))
            assert np.all(cloud.positions >= empty_room.bbox_min - 1e-6)
            assert np.all(cloud.positions <= empty_room.bbox_max + 1e-6)

    def test_aoa_cloud_near_wall_stays_in_room(self, empty_room):
        # UE 贴近墙面，角度噪声让部分射线朝场景外发射
        ue = np.array([0.1, 17.0, 1.2])
        arrival = true_observables(empty_room, ue, max_bounces=0).arrivals[0]
        angle = AngleMeasurement(0, arrival.azimuth, arrival.elevation, math.radians(1.0))
        rays = RaysConfig(max_bounces=5, max_length=100.0, step=0.1)
        cloud = generate_aoa_cloud(empty_room, 0, angle, 500, rays, np.random.default_rng(11))
        assert np.all(cloud.positions >= empty_room.bbox_min - 1e-6)
        assert np.all(cloud.positions <= empty_room.bbox_max + 1e-6)
        assert np.unique(cloud.ray_index).size < 500

    def test_all_rays_outward_is_an_error(self, empty_room):
        # 基站 0 在 (0, 0, 2.5)，朝 -x 发射的射线全部离开场景
        angle = AngleMeasurement(0, math.pi, 0.0, 0.0)
        with pytest.raises(FusionError):
            generate_aoa_cloud(empty_room, 0, angle, 10, None, np.random.default_rng(0))


class TestSelectByPt:

    def test_noiseless_pt_selects_matching_lengths(self):
        cloud = _line_cloud(np.arange(0.0, 20.0, 0.1))
        pt = PtMeasurement.from_length(0, 5.0, 0.0)
        out = select_by_pt(cloud, pt, 500, 0.1, np.random.default_rng(0), NO_FALLBACK)
        assert len(out) == 500
        assert out.provenance == PROVENANCE_PT
        assert np.all(np.abs(out.lengths - 5.0) <= 0.1)

    def test_every_point_is_within_a_bin_of_its_draw(self):
        cloud = _line_cloud(np.random.default_rng(1).uniform(0.0, 30.0, 3000))
        pt = PtMeasurement.from_length(0, 12.0, 1.0)
        out = select_by_pt(cloud, pt, 2000, 0.25, np.random.default_rng(2), NO_FALLBACK)
        assert np.all(np.abs(out.lengths - out.targets) <= 0.25)
        assert np.all(cloud.lengths[out.source_index] == out.lengths)

    def test_selected_mean_tracks_pt(self):
        cloud = _line_cloud(np.arange(0.0, 20.0, 0.01))
        pt = PtMeasurement.from_length(0, 5.0, 0.5)
        out = select_by_pt(cloud, pt, 10000, 0.1, np.random.default_rng(3))
        assert abs(out.lengths.mean() - 5.0) <= 0.02

    def test_selected_lengths_follow_pt_error_law(self):
        cloud = _line_cloud(np.arange(0.0, 10.0, 0.001))
        pt = PtMeasurement.from_length(0, 5.0, 0.5)
        out = select_by_pt(cloud, pt, 10000, 0.02, np.random.default_rng(13), NO_FALLBACK)
        assert len(out) == 10000
        assert stats.kstest(out.lengths, stats.norm(5.0, 0.5).cdf).pvalue > 0.01

    def test_inconsistent_pt(self):
        cloud = _line_cloud(np.arange(0.0, 3.0, 0.1), bs_id=2)
        pt = PtMeasurement.from_length(2, 50.0, 0.1)
        with pytest.raises(InconsistentMeasurementError) as info:
            select_by_pt(cloud, pt, 100, 0.1, np.random.default_rng(4), NO_FALLBACK)
        assert info.value.bs_id == 2

    def test_fallback_uses_nearest_populated_bin(self):
        cloud = _line_cloud(np.concatenate([np.arange(0.0, 4.0, 0.05), np.arange(4.3, 8.0, 0.05)]))
        pt = PtMeasurement.from_length(0, 4.15, 0.0)
        with pytest.raises(InconsistentMeasurementError):
            select_by_pt(cloud, pt, 50, 0.1, np.random.default_rng(5), NO_FALLBACK)
        out = select_by_pt(cloud, pt, 50, 0.1, np.random.default_rng(5))
        assert len(out) == 50
        assert np.all(out.fallback)
        assert np.all(np.abs(out.lengths - 4.15) <= 0.3)

    def test_per_ray_order(self):
        lengths = np.tile(np.arange(0.0, 10.0, 0.1), 5)
        cloud = PointCloud(0, np.zeros((lengths.size, 3)), lengths, np.repeat(np.arange(5), 100))
        pt = PtMeasurement.from_length(0, 6.0, 0.2)
        out = select_by_pt(cloud, pt, 400, 0.1, np.random.default_rng(6), SelectionConfig(order=ORDER_PER_RAY))
        assert 0 < len(out) <= 400
        assert np.all(np.abs(out.lengths - out.targets) <= 0.1)


class TestSelectByRpt:

    def test_pair_universe(self):
        table = PairDifferenceTable([1.0, 2.0, 3.0, 4.0], [0.5, 1.7, 2.9, 4.1, 5.3], 0.1)
        assert table.universe_size == 20
        total = sum(len(table.members(k)) for k in range(table.first, table.last + 1))
        assert total == 20

    def test_noiseless_rpt_picks_the_unique_pair(self):
        ci = _line_cloud([1.0, 2.0, 3.0, 4.05], bs_id=0)
        cj = _line_cloud([0.5, 1.7, 2.9, 4.1, 5.3], bs_id=1)
        rpt = RptMeasurement((0, 1), 3.55, 0.0)
        out_i, out_j = select_by_rpt(ci, cj, rpt, 200, 0.1, np.random.default_rng(0), NO_FALLBACK)
        assert np.all(out_i.source_index == 3)
        assert np.all(out_j.source_index == 0)
        assert out_i.provenance == PROVENANCE_RPT

    def test_swapped_inputs_give_mirrored_pairs(self):
        rng = np.random.default_rng(1)
        ci = _line_cloud(rng.uniform(2.0, 15.0, 400), bs_id=0)
        cj = _line_cloud(rng.uniform(2.0, 15.0, 300), bs_id=3)
        rpt = RptMeasurement((0, 3), 1.5, 0.4)
        a_i, a_j = select_by_rpt(ci, cj, rpt, 1000, 0.1, np.random.default_rng(7), NO_FALLBACK)
        b_j, b_i = select_by_rpt(cj, ci, rpt.swapped(), 1000, 0.1, np.random.default_rng(7), NO_FALLBACK)
        np.testing.assert_array_equal(a_i.source_index, b_i.source_index)
        np.testing.assert_array_equal(a_j.source_index, b_j.source_index)
        assert np.all(np.abs(a_i.lengths - a_j.lengths - a_i.targets) <= 0.1 + 1e-9)


class TestApplyFusion:

    def test_aoa_mode_passes_clouds_through(self, fusion_inputs):
        _, meas, clouds = fusion_inputs
        out = apply_fusion(clouds, meas, FusionConfig(FUSION_AOA))
        assert all(out[bs] is clouds[bs] for bs in clouds)

    def test_pt_narrows_length_spread(self, fusion_inputs):
        _, meas, clouds = fusion_inputs
        cfg = FusionConfig(FUSION_PT, SelectionConfig(n_select=1000))
        out = apply_fusion(clouds, meas, cfg, seed=3)
        for bs in clouds:
            assert np.std(out[bs].lengths) < np.std(clouds[bs].lengths)

    def test_rpt_all_pairs_unions_three_selections(self, fusion_inputs):
        _, meas, clouds = fusion_inputs
        cfg = FusionConfig(FUSION_RPT, SelectionConfig(n_select=500))
        out = apply_fusion(clouds, meas, cfg, seed=3)
        for bs in clouds:
            assert out[bs].provenance == PROVENANCE_RPT
            assert 500 < len(out[bs]) <= 3 * 500

    def test_fusion_is_deterministic(self, fusion_inputs):
        _, meas, clouds = fusion_inputs
        cfg = FusionConfig(FUSION_PT, SelectionConfig(n_select=300))
        a = apply_fusion(clouds, meas, cfg, seed=11)
        b = apply_fusion(clouds, meas, cfg, seed=11)
        for bs in clouds:
            np.testing.assert_array_equal(a[bs].source_index, b[bs].source_index)

    def test_missing_pt_category(self, fusion_inputs):
        truth, _, clouds = fusion_inputs
        aoa_only = perturb(truth, NoiseSigmas(), np.random.default_rng(0))
        with pytest.raises(FusionError, match="requires PT"):
            apply_fusion(clouds, aoa_only, FusionConfig(FUSION_PT))

    def test_csv_dump(self, fusion_inputs, tmp_path):
        _, _, clouds = fusion_inputs
        path = write_clouds_csv([clouds[0]], str(tmp_path / "cloud.csv"))
        with open(path, encoding="utf-8") as f:
            lines = f.read().splitlines()
        assert lines[0] == "bs_id,x,y,z,length,provenance"
        assert len(lines) == len(clouds[0]) + 1
