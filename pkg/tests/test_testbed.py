"""Synthetic trajectory, sampling, rendering, and dataset build contracts."""

import math

import numpy as np
import pytest

from dynfuse.csi_frontend import fit_frame
from dynfuse.data_model import DatasetConfig, read_container, window_sequences
from dynfuse.testbed import (
    RawCsiModel,
    SamplingModel,
    SensorModel,
    TrackSpec,
    build_dataset,
    gen_trajectory,
    load_scenario,
    make_trajectory,
    perimeter_regions,
    render_beam_snr,
    render_csi_embedding,
    render_raw_csi,
    sample_times,
)

TRACK = TrackSpec(corner_min=(1.0, 1.0), corner_max=(5.0, 4.0), speed=0.5,
                  lap_jitter_std=0.05, ap_position=(0.0, 0.0))


def rect_boundary_distance(xy, spec):
    """Distance from points to the rectangle boundary (0 on the perimeter)."""
    x0, y0 = spec.corner_min
    x1, y1 = spec.corner_max
    d = np.stack([
        np.abs(xy[:, 1] - y0), np.abs(xy[:, 0] - x1),
        np.abs(xy[:, 1] - y1), np.abs(xy[:, 0] - x0),
    ])
    inside = ((xy[:, 0] >= x0) & (xy[:, 0] <= x1) & (xy[:, 1] >= y0) & (xy[:, 1] <= y1))
    return np.where(inside, d.min(axis=0), np.inf)


class TestTrajectory:
    def test_zero_jitter_stays_on_perimeter(self):
        spec = TrackSpec(corner_min=(1.0, 1.0), corner_max=(5.0, 4.0), speed=0.5,
                         lap_jitter_std=0.0)
        coords = gen_trajectory(spec, 30.0, seed=0)
        xy = np.stack([c.xy for c in coords])
        assert rect_boundary_distance(xy, spec).max() < 1e-9

    def test_lap_time_is_perimeter_over_speed(self):
        spec = TrackSpec(corner_min=(0.0, 0.0), corner_max=(3.0, 2.0), speed=0.5,
                         lap_jitter_std=0.0)
        lap = spec.perimeter / spec.speed  # 10 / 0.5 = 20 s
        fn = make_trajectory(spec, seed=0)
        a = fn([1.3])
        b = fn([1.3 + lap])
        assert np.allclose(a, b, atol=1e-9)

    def test_same_seed_identical(self):
        a = gen_trajectory(TRACK, 10.0, seed=5)
        b = gen_trajectory(TRACK, 10.0, seed=5)
        assert np.array_equal(np.stack([c.xy for c in a]), np.stack([c.xy for c in b]))

    def test_label_rate(self):
        coords = gen_trajectory(TRACK, 5.0, seed=0, rate=10.0)
        assert len(coords) == 50
        assert np.allclose(np.diff([c.t for c in coords]), 0.1)

    def test_degenerate_rectangle_rejected(self):
        with pytest.raises(ValueError):
            TrackSpec(corner_min=(1.0, 1.0), corner_max=(1.0, 4.0))


class TestSampleTimes:
    def test_csi_counts_concentrate_in_20_to_30_per_window(self):
        model = SamplingModel()
        stamps = sample_times(model, 600.0, seed=0)
        counts, _ = np.histogram(stamps["csi"], bins=np.arange(0, 601, 5))
        frac = np.mean((counts >= 20) & (counts <= 30))
        assert frac >= 0.8
        assert 20 <= counts.mean() <= 30

    def test_beam_count_mean_about_five_per_window(self):
        stamps = sample_times(SamplingModel(), 1000.0, seed=1)
        counts, _ = np.histogram(stamps["beam"], bins=np.arange(0, 1001, 5))
        assert 4.0 <= counts.mean() <= 6.0

    def test_zero_jitter_gives_uniform_grid(self):
        stamps = sample_times(SamplingModel(csi_jitter=0.0), 10.0, seed=0)
        assert np.allclose(np.diff(stamps["csi"]), 0.2, atol=1e-12)

    def test_gamma_mean_one_second_inter_arrival(self):
        stamps = sample_times(SamplingModel(), 5000.0, seed=2)
        gaps = np.diff(stamps["beam"])
        assert gaps.mean() == pytest.approx(1.0, rel=0.1)

    def test_strictly_increasing(self):
        stamps = sample_times(SamplingModel(), 100.0, seed=3)
        assert np.all(np.diff(stamps["csi"]) > 0)
        assert np.all(np.diff(stamps["beam"]) > 0)


class TestBeamRendering:
    def _noiseless(self):
        return SensorModel.default(m_b=36, m_c=8, seed=0, beam_noise_std_db=0.0,
                                   csi_noise_std=0.0)

    def test_deterministic_without_noise(self):
        model = self._noiseless()
        pos = np.array([[2.0, 3.0]])
        a = render_beam_snr(pos, model, TRACK, seed=0)
        b = render_beam_snr(pos, model, TRACK, seed=999)
        assert np.array_equal(a, b)

    def test_doubling_distance_adds_six_db_path_loss(self):
        model = self._noiseless()
        direction = np.array([1.0, 1.0]) / math.sqrt(2)
        near = render_beam_snr((direction * 2.0)[None, :], model, TRACK, 0)
        far = render_beam_snr((direction * 4.0)[None, :], model, TRACK, 0)
        drop = near - far  # same bearing: only the path-loss term changes
        assert np.allclose(drop, 20 * math.log10(2.0), atol=1e-9)

    def test_aligned_beam_attains_maximum(self):
        model = self._noiseless()
        for m in (0, 7, 19):
            pos = (model.beam_directions[m] * 3.0)[None, :]
            values = render_beam_snr(pos, model, TRACK, 0)[0]
            assert values.argmax() == m

    def test_position_at_ap_rejected(self):
        with pytest.raises(ValueError):
            render_beam_snr(np.array([[0.0, 0.0]]), self._noiseless(), TRACK, 0)

    def test_output_width_matches_beam_count(self):
        out = render_beam_snr(np.array([[2.0, 2.0]]), self._noiseless(), TRACK, 0)
        assert out.shape == (1, 36)


class TestCsiRendering:
    def _noiseless(self):
        return SensorModel.default(m_b=4, m_c=36, seed=0, beam_noise_std_db=0.0,
                                   csi_noise_std=0.0)

    def test_equal_positions_equal_embeddings(self):
        model = self._noiseless()
        pos = np.array([[2.0, 3.0], [2.0, 3.0]])
        out = render_csi_embedding(pos, model, seed=0)
        assert np.array_equal(out[0], out[1])

    def test_lipschitz_bound_on_nearby_positions(self):
        model = self._noiseless()
        bound = model.lipschitz_bound()
        rng = np.random.default_rng(0)
        for _ in range(20):
            p = rng.uniform(1.0, 5.0, size=2)
            q = p + 0.01 * rng.standard_normal(2) / np.sqrt(2)
            d = np.linalg.norm(p - q)
            emb = render_csi_embedding(np.stack([p, q]), model, seed=0)
            assert np.linalg.norm(emb[0] - emb[1]) <= bound * d + 1e-12

    def test_embedding_length_36(self):
        out = render_csi_embedding(np.array([[2.0, 2.0]]), self._noiseless(), seed=0)
        assert out.shape == (1, 36)


class TestRawCsi:
    CONFIG = DatasetConfig(m_b=4, m_c=4, n_tx=2, n_rx=2, n_s=32)

    def test_injected_sto_sets_phase_slope(self):
        """Rendering with vs without the ramp shifts the fitted slope by tau."""
        model = RawCsiModel(noise_std=0.0, packet_phase=False)
        pos = np.array([[2.0, 3.0]])
        tau = 4e-8
        with_sto, _ = render_raw_csi(pos, [0.0], model, self.CONFIG, TRACK, seed=0,
                                     sto_values=np.array([tau]))
        without, _ = render_raw_csi(pos, [0.0], model, self.CONFIG, TRACK, seed=0,
                                    sto_values=np.array([0.0]))
        fit_with = fit_frame(with_sto[0], self.CONFIG.f_delta)
        fit_without = fit_frame(without[0], self.CONFIG.f_delta)
        recovered = fit_with.tau_hat - fit_without.tau_hat
        assert np.allclose(recovered, tau, rtol=1e-9)

    def test_same_seed_same_frames(self):
        model = RawCsiModel()
        pos = np.array([[2.0, 3.0], [2.5, 3.0]])
        a, taus_a = render_raw_csi(pos, [0.0, 0.2], model, self.CONFIG, TRACK, seed=4)
        b, taus_b = render_raw_csi(pos, [0.0, 0.2], model, self.CONFIG, TRACK, seed=4)
        assert np.array_equal(taus_a, taus_b)
        assert np.array_equal(a[0].tensor, b[0].tensor)

    def test_noise_independent_of_sto_stream(self):
        """Purpose-split RNG: only the ramp differs when STO changes (noise off)."""
        model = RawCsiModel(noise_std=0.0, packet_phase=True)
        pos = np.array([[2.0, 3.0]])
        k = np.arange(self.CONFIG.n_s)
        a, _ = render_raw_csi(pos, [0.0], model, self.CONFIG, TRACK, 7,
                              sto_values=np.array([3e-8]))
        b, _ = render_raw_csi(pos, [0.0], model, self.CONFIG, TRACK, 7,
                              sto_values=np.array([0.0]))
        # same packet-phase draw in both renders, so a equals b times the ramp
        ramp = np.exp(2j * np.pi * self.CONFIG.f_delta * k * 3e-8)[None, None, :]
        assert np.allclose(a[0].tensor, b[0].tensor * ramp, atol=1e-12)


class TestBuildDataset:
    def _models(self):
        sensors = SensorModel.default(m_b=4, m_c=5, seed=0)
        sampling = SamplingModel()
        config = DatasetConfig(m_b=4, m_c=5, n_tx=2, n_rx=2, n_s=16)
        return sensors, sampling, config

    def test_window_count_for_full_duration(self, tmp_path):
        sensors, sampling, config = self._models()
        result = build_dataset(TRACK, sensors, sampling, duration=150.0, seed=0,
                               out_dir=tmp_path, config=config)
        assert result.n_windows + result.n_dropped == 30

    def test_byte_identical_for_same_seed(self, tmp_path):
        sensors, sampling, config = self._models()
        r1 = build_dataset(TRACK, sensors, sampling, 50.0, 3, tmp_path / "a", config=config)
        r2 = build_dataset(TRACK, sensors, sampling, 50.0, 3, tmp_path / "b", config=config)
        assert r1.container_path.read_bytes() == r2.container_path.read_bytes()
        assert r1.scenario_path.read_bytes() == r2.scenario_path.read_bytes()

    def test_container_readable_and_windowable(self, tmp_path):
        sensors, sampling, config = self._models()
        result = build_dataset(TRACK, sensors, sampling, 60.0, 1, tmp_path, config=config)
        beam, csi, labels, cfg, meta = read_container(result.container_path)
        assert cfg == config
        res = window_sequences(beam, csi, labels, cfg.window_span, meta["window_step"],
                               t_start=meta["t_origin"], t_end=60.0)
        assert len(res.windows) == result.n_windows

    def test_raw_sidecar_written_and_loadable(self, tmp_path):
        sensors, sampling, config = self._models()
        result = build_dataset(TRACK, sensors, sampling, 20.0, 2, tmp_path,
                               config=config, raw_model=RawCsiModel())
        blob = np.load(result.raw_path)
        assert blob["tensor"].shape[1:] == (2, 2, 16)
        assert len(blob["t"]) == len(blob["sto"]) == result.n_frames["csi"]

    def test_scenario_round_trip(self, tmp_path):
        sensors, sampling, config = self._models()
        result = build_dataset(TRACK, sensors, sampling, 20.0, 2, tmp_path,
                               config=config, raw_model=RawCsiModel())
        scenario = load_scenario(result.scenario_path)
        assert scenario["track"] == TRACK
        assert scenario["duration"] == 20.0
        assert np.allclose(scenario["sensors"].csi_weights, sensors.csi_weights)

    def test_dimension_mismatch_rejected(self, tmp_path):
        sensors, sampling, _ = self._models()
        with pytest.raises(ValueError):
            build_dataset(TRACK, sensors, sampling, 20.0, 0, tmp_path,
                          config=DatasetConfig(m_b=9, m_c=5))


class TestPerimeterRegions:
    def test_eight_regions_cover_full_track(self):
        region_of = perimeter_regions(TRACK, 8)
        coords = gen_trajectory(TrackSpec(corner_min=TRACK.corner_min,
                                          corner_max=TRACK.corner_max,
                                          speed=0.5, lap_jitter_std=0.0),
                                duration=60.0, seed=0)
        ids = region_of(np.stack([c.xy for c in coords]))
        assert set(ids.tolist()) == set(range(8))

    def test_region_ids_monotone_along_arclength(self):
        region_of = perimeter_regions(TRACK, 4)
        # bottom edge points early in arclength, top edge later
        bottom = region_of(np.array([[1.5, 1.0]]))
        top = region_of(np.array([[4.5, 4.0]]))
        assert bottom[0] < top[0]
