import numpy as np
import pytest

from decquic.errors import ConfigError
from decquic.featurize import (
    AugmentSpec,
    WindowSpec,
    augment,
    bin_window,
    export_dataset,
    featurize_trace,
    from_rgb_array,
    label_window,
    load_image,
    load_image_dataset,
    normalize_channel,
    to_rgb_array,
    window_starts,
)
from decquic.trace import ResponseEvent

from conftest import make_trace, random_trace

SPEC03 = WindowSpec(window_s=0.3, overlap=0.0)


def brute_force_bins(trace, start_s, spec):
    """Independent O(P*M*N) membership-test binning oracle."""
    M, N = spec.time_bins, spec.length_bins
    red = np.zeros((M, N), dtype=int)
    green = np.zeros((M, N), dtype=int)
    dt, dl = spec.dt_s, spec.dl_bytes
    for p in trace.packets:
        rel = p.t - start_s
        ti = None
        for i in range(M):
            if i * dt <= rel < (i + 1) * dt:
                ti = i
                break
        if ti is None:
            continue
        lj = None
        for j in range(N):
            if j * dl <= p.len < (j + 1) * dl:
                lj = j
                break
        if lj is None:
            lj = N - 1  # at or above L: clamp into the top bin
        if p.dir == "s2c":
            red[ti, lj] += 1
        else:
            green[ti, lj] += 1
    return red, green


class TestWindowStarts:
    def test_exact_tiling(self):
        assert window_starts(0.9, SPEC03) == [0.0, 0.3, 0.6]

    def test_ninety_percent_overlap(self):
        spec = WindowSpec(window_s=0.3, overlap=0.9)
        starts = window_starts(0.3, spec)
        assert len(starts) == 10
        assert np.allclose(starts, [0.03 * k for k in range(10)], atol=1e-12)

    def test_trailing_partial_window(self):
        starts = window_starts(1.0, SPEC03)
        assert len(starts) == 4
        assert np.allclose(starts, [0.0, 0.3, 0.6, 0.9])

    def test_zero_duration_single_window(self):
        assert window_starts(0.0, SPEC03) == [0.0]

    def test_matches_enumeration_oracle(self, rng):
        for _ in range(50):
            duration = float(rng.uniform(0.01, 5.0))
            overlap = float(rng.choice([0.0, 0.5, 0.9]))
            spec = WindowSpec(window_s=0.3, overlap=overlap)
            starts = window_starts(duration, spec)
            # brute-force enumeration with the same near-equality convention
            expected = []
            k = 0
            while k * spec.stride_s < duration * (1 - 1e-9):
                expected.append(k * spec.stride_s)
                k += 1
            assert starts == (expected or [0.0])


class TestBinWindow:
    def test_column_totals_example(self):
        # time bin 8 of a 0.3 s window: 10 server packets, 19 client packets
        dt = SPEC03.dt_s
        t0 = 8 * dt + dt / 2
        packets = [(t0, 1400, "s2c")] * 10 + [(t0, 400, "c2s")] * 19
        trace = make_trace(packets)
        red, green = bin_window(trace, 0.0, SPEC03)
        assert red[8].sum() == 10
        assert green[8].sum() == 19
        assert red.sum() == 10 and green.sum() == 19

    def test_empty_window_all_zero(self):
        trace = make_trace([(5.0, 100, "c2s")])
        red, green = bin_window(trace, 0.0, SPEC03)
        assert not red.any() and not green.any()

    def test_matches_brute_force_oracle(self, rng):
        for i in range(30):
            trace = random_trace(rng, n_packets=1000, duration=0.6, trace_id=f"bf{i}")
            start = float(rng.uniform(-0.1, 0.5))
            red, green = bin_window(trace, start, SPEC03)
            red_o, green_o = brute_force_bins(trace, start, SPEC03)
            np.testing.assert_array_equal(red, red_o)
            np.testing.assert_array_equal(green, green_o)

    def test_oversized_length_clamped(self):
        trace = make_trace([(0.01, 2000, "s2c")])
        red, _ = bin_window(trace, 0.0, SPEC03)
        assert red[:, -1].sum() == 1

    def test_boundary_packet_at_window_end_excluded(self):
        trace = make_trace([(0.3, 100, "c2s")])
        _, green = bin_window(trace, 0.0, SPEC03)
        assert green.sum() == 0


class TestNormalize:
    def test_all_zero(self):
        out = normalize_channel(np.zeros((32, 32), dtype=int))
        assert out.dtype == np.uint8 and not out.any()

    def test_max_count_maps_to_255(self):
        counts = np.zeros((32, 32), dtype=int)
        counts[23, 10] = 18  # the brightest red pixel in the worked example
        spots = [(1, 5, 3), (7, 9, 15), (12, 30, 4), (3, 3, 5)]
        for i, j, c in spots:
            counts[i, j] = c
        out = normalize_channel(counts)
        assert out[23, 10] == 255
        assert out.max() == 255
        for i, j, c in spots:
            assert out[i, j] == int(np.floor(255 * c / 18 + 0.5))

    def test_single_nonzero_cell(self):
        counts = np.zeros((32, 32), dtype=int)
        counts[4, 4] = 7
        out = normalize_channel(counts)
        assert out[4, 4] == 255
        assert out.sum() == 255

    def test_degenerate_uniform_positive(self):
        counts = np.full((4, 4), 3, dtype=int)
        out = normalize_channel(counts)
        assert (out == 255).all()

    def test_rounding_half_away_from_zero(self):
        counts = np.zeros((1, 3), dtype=int)
        counts[0] = [0, 1, 510]  # 255 * 1/510 = 0.5 exactly
        out = normalize_channel(counts)
        assert out[0, 1] == 1


class TestLabelWindow:
    def test_no_events(self):
        assert label_window([], 0.0, 0.3) == 0

    def test_half_open_boundaries(self):
        events = [ResponseEvent(0.0), ResponseEvent(0.3)]
        assert label_window(events, 0.0, 0.3) == 1

    def test_matches_linear_scan(self, rng):
        events = sorted(
            (ResponseEvent(float(t)) for t in rng.uniform(0, 3.0, size=500)), key=lambda e: e.t
        )
        for _ in range(100):
            start = float(rng.uniform(-0.5, 3.0))
            expected = sum(1 for e in events if start <= e.t < start + 0.3)
            assert label_window(events, start, 0.3) == expected


class TestFeaturizeTrace:
    def test_bin_duration(self):
        assert SPEC03.dt_s == 0.009375  # 9.375 ms per bin

    def test_quiet_middle_window_zero_image(self):
        trace = make_trace([(0.01, 500, "c2s"), (0.95, 600, "s2c")], events=[0.4])
        images = featurize_trace(trace, SPEC03)
        assert len(images) == 4
        quiet = images[1]  # [0.3, 0.6): no packets, one event
        assert not quiet.red.any() and not quiet.green.any()
        assert quiet.label == 1

    def test_overlap_ratio(self, rng):
        trace = random_trace(rng, n_packets=400, duration=6.0)
        n_eval = len(featurize_trace(trace, WindowSpec(window_s=0.3, overlap=0.0)))
        n_train = len(featurize_trace(trace, WindowSpec(window_s=0.3, overlap=0.9)))
        assert n_train == pytest.approx(10 * n_eval, rel=0.06)

    def test_window_metadata(self, rng):
        trace = random_trace(rng, n_packets=100, duration=1.0, trace_id="meta")
        images = featurize_trace(trace, SPEC03)
        assert [im.window_index for im in images] == list(range(len(images)))
        assert images[0].trace_id == "meta"
        assert images[0].server_id == "srv"

    def test_label_sum_equals_covered_events(self, rng):
        for i in range(10):
            trace = random_trace(rng, n_packets=300, n_events=60, duration=2.0, trace_id=f"agg{i}")
            images = featurize_trace(trace, SPEC03)
            last_end = images[-1].window_start_s + SPEC03.window_s
            covered = sum(1 for e in trace.events if e.t < last_end)
            assert sum(im.label for im in images) == covered


class TestAugment:
    def aug_image(self, label, fill=100):
        red = np.full((32, 32), fill, dtype=np.uint8)
        green = np.zeros((32, 32), dtype=np.uint8)
        green[3, 4] = 9
        from decquic.featurize import WindowImage

        return WindowImage(
            red=red, green=green, label=label, trace_id="a", server_id="s",
            window_index=0, window_start_s=0.0,
        )

    def test_identity_outside_minority_range(self, rng):
        img = self.aug_image(label=3)
        out = augment(img, AugmentSpec(), rng)
        assert out is img

    def test_zero_noise_identity(self, rng):
        img = self.aug_image(label=12)
        out = augment(img, AugmentSpec(noise_std=0.0), rng)
        np.testing.assert_array_equal(out.red, img.red)
        np.testing.assert_array_equal(out.green, img.green)

    def test_noise_std_close_to_nominal(self, rng):
        deltas = []
        for i in range(100):
            img = self.aug_image(label=15)
            out = augment(img, AugmentSpec(), rng)
            deltas.append(out.red.astype(float) - img.red.astype(float))
        std = np.concatenate([d.ravel() for d in deltas]).std()
        assert abs(std - 2.55) / 2.55 < 0.05

    def test_label_and_metadata_unchanged(self, rng):
        img = self.aug_image(label=15)
        out = augment(img, AugmentSpec(), rng)
        assert (out.label, out.trace_id, out.window_index) == (15, "a", 0)

    def test_all_zero_channel_stays_zero(self, rng):
        img = self.aug_image(label=15)
        img.green[:] = 0
        out = augment(img, AugmentSpec(), rng)
        assert not out.green.any()


class TestExport:
    def test_single_image(self, tmp_path, rng):
        trace = random_trace(rng, n_packets=50, duration=0.2)
        images = featurize_trace(trace, SPEC03)[:1]
        manifest = export_dataset(images, tmp_path)
        rows = manifest.read_text().splitlines()
        assert len(rows) == 2  # header + 1
        assert (tmp_path / "images" / f"{trace.trace_id}_0.png").exists()

    def test_png_round_trip(self, tmp_path, rng):
        trace = random_trace(rng, n_packets=300, duration=1.0, trace_id="rtp")
        images = featurize_trace(trace, SPEC03)
        export_dataset(images, tmp_path)
        for im in images:
            red, green = load_image(tmp_path / "images" / f"{im.trace_id}_{im.window_index}.png")
            np.testing.assert_array_equal(red, im.red)
            np.testing.assert_array_equal(green, im.green)

    def test_rgb_array_inverse(self, rng):
        trace = random_trace(rng, n_packets=200, duration=0.3)
        im = featurize_trace(trace, SPEC03)[0]
        red, green = from_rgb_array(to_rgb_array(im))
        np.testing.assert_array_equal(red, im.red)
        np.testing.assert_array_equal(green, im.green)

    def test_blue_plane_zero(self, rng):
        trace = random_trace(rng, n_packets=200, duration=0.3)
        im = featurize_trace(trace, SPEC03)[0]
        assert not to_rgb_array(im)[:, :, 2].any()

    def test_labels_above_max_excluded(self, tmp_path):
        trace = make_trace(
            [(0.01, 500, "c2s"), (0.02, 700, "s2c")],
            events=[0.001 * k for k in range(25)],  # label 25 in window 0
        )
        images = featurize_trace(trace, SPEC03)
        assert images[0].label == 25
        manifest = export_dataset(images, tmp_path, max_label=20)
        assert len(manifest.read_text().splitlines()) == 1  # header only

    def test_empty_list_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            export_dataset([], tmp_path)

    def test_manifest_loader(self, tmp_path, rng):
        trace = random_trace(rng, n_packets=200, duration=1.0, trace_id="ld")
        images = featurize_trace(trace, SPEC03)
        manifest = export_dataset(images, tmp_path)
        ds = load_image_dataset(manifest)
        assert len(ds) == len(images)
        np.testing.assert_array_equal(ds.labels, [im.label for im in images])
        np.testing.assert_array_equal(ds.images[0, 0], images[0].red)
        np.testing.assert_array_equal(ds.images[0, 1], images[0].green)


def test_window_spec_validation():
    with pytest.raises(ConfigError):
        WindowSpec(window_s=0.0)
    with pytest.raises(ConfigError):
        WindowSpec(overlap=1.0)
    with pytest.raises(ConfigError):
        WindowSpec(time_bins=0)
