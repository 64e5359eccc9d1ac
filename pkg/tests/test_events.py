import numpy as np
import pytest

from conftest import random_events
from evstream.events import (
    EVENT_DTYPE,
    Event,
    EventWindow,
    OutOfOrderEventError,
    ReorderBuffer,
    SensorGeometry,
    compose_training_window,
    events_array,
    nn_filter,
    push,
    read_events_binary,
    read_events_csv,
    refractory_filter,
    write_events_binary,
    write_events_csv,
)


class TestEventWindow:
    def test_single_push(self):
        w = EventWindow(tau_us=32000)
        push(w, Event(1, 2, 1, 100))
        assert len(w) == 1
        assert w.anchor_t == 100

    def test_boundary_eviction_at_tau(self):
        # an event exactly tau old has zero coded magnitude and is evicted
        w = EventWindow(tau_us=32000)
        w.push(Event(0, 0, 1, 0))
        w.push(Event(1, 1, -1, 32000))
        assert len(w) == 1
        assert w.events[0].t == 32000

    def test_spacing_count(self):
        # 10 events 1000 us apart, tau 5000: anchor plus 4 predecessors stay
        w = EventWindow(tau_us=5000)
        for i in range(10):
            w.push(Event(0, 0, 1, 1000 * i))
        assert len(w) == 5
        assert [e.t for e in w.events] == [5000, 6000, 7000, 8000, 9000]

    def test_out_of_order_rejected(self):
        w = EventWindow(tau_us=1000)
        w.push(Event(0, 0, 1, 500))
        with pytest.raises(OutOfOrderEventError):
            w.push(Event(0, 0, 1, 499))

    def test_simultaneous_kept_in_arrival_order(self):
        w = EventWindow(tau_us=1000)
        w.push(Event(1, 0, 1, 100))
        w.push(Event(2, 0, 1, 100))
        assert [e.x for e in w.events] == [1, 2]

    def test_retention_invariant_random(self):
        rng = np.random.default_rng(5)
        w = EventWindow(tau_us=700)
        t = 0
        for _ in range(500):
            t += int(rng.integers(0, 300))
            w.push(Event(0, 0, 1, t))
            ages = [w.anchor_t - e.t for e in w.events]
            assert max(ages) < 700

    def test_roundtrip_array(self):
        arr = events_array([(1, 2, 1, 10), (3, 4, -1, 20)])
        w = EventWindow.from_array(arr, tau_us=100)
        assert np.array_equal(w.to_array(), arr)


def brute_nn_filter(events, t_nn):
    keep = np.zeros(len(events), dtype=bool)
    for i in range(len(events)):
        for j in range(len(events)):
            if events["t"][j] >= events["t"][i] or events["t"][i] - events["t"][j] > t_nn:
                continue
            if abs(int(events["x"][i]) - int(events["x"][j])) <= 1 and \
               abs(int(events["y"][i]) - int(events["y"][j])) <= 1:
                keep[i] = True
                break
    return events[keep]


def brute_refractory(events, t_ref):
    last = {}
    keep = np.zeros(len(events), dtype=bool)
    for i, rec in enumerate(events):
        key = (rec["x"], rec["y"])
        if key not in last or rec["t"] - last[key] >= t_ref:
            keep[i] = True
            last[key] = rec["t"]
    return events[keep]


class TestNnFilter:
    GEO = SensorGeometry(32, 32)

    def test_same_pixel_pair(self):
        arr = events_array([(5, 5, 1, 0), (5, 5, 1, 1000)])
        out = nn_filter(arr, self.GEO, t_nn_us=5000)
        assert len(out) == 1
        assert out["t"][0] == 1000

    def test_isolated_event_dropped(self):
        arr = events_array([(5, 5, 1, 0)])
        assert len(nn_filter(arr, self.GEO, 5000)) == 0

    def test_trailing_event_after_silence(self):
        recs = [(10 + dx, 10 + dy, 1, 100 * (dx * 3 + dy)) for dx in range(3) for dy in range(3)]
        recs.append((11, 11, 1, recs[-1][3] + 10000))
        arr = events_array(sorted(recs, key=lambda r: r[3]))
        out = nn_filter(arr, self.GEO, t_nn_us=5000)
        assert out["t"][-1] != arr["t"][-1]
        assert np.array_equal(out, brute_nn_filter(arr, 5000))

    def test_matches_brute_force(self):
        rng = np.random.default_rng(11)
        arr = random_events(rng, SensorGeometry(8, 8), 400, max_gap=800)
        out = nn_filter(arr, SensorGeometry(8, 8), t_nn_us=1500)
        assert np.array_equal(out, brute_nn_filter(arr, 1500))

    def test_simultaneous_events_do_not_validate_each_other(self):
        arr = events_array([(5, 5, 1, 100), (5, 6, 1, 100)])
        assert len(nn_filter(arr, self.GEO, 5000)) == 0

    def test_is_subsequence(self):
        rng = np.random.default_rng(2)
        arr = random_events(rng, self.GEO, 300, max_gap=500)
        out = nn_filter(arr, self.GEO, 2000)
        assert np.all(np.diff(out["t"].astype(np.int64)) >= 0)
        assert len(out) <= len(arr)


class TestRefractoryFilter:
    def test_basic_rule(self):
        arr = events_array([(3, 3, 1, 0), (3, 3, 1, 500), (3, 3, 1, 1500)])
        out = refractory_filter(arr, t_ref_us=1000)
        assert list(out["t"]) == [0, 1500]

    def test_distinct_pixels_all_kept(self):
        arr = events_array([(i, 0, 1, 10 * i) for i in range(20)])
        out = refractory_filter(arr, t_ref_us=1000)
        assert len(out) == 20

    def test_matches_brute_force(self):
        rng = np.random.default_rng(17)
        arr = random_events(rng, SensorGeometry(6, 6), 1000, max_gap=300)
        out = refractory_filter(arr, t_ref_us=900)
        assert np.array_equal(out, brute_refractory(arr, 900))


class TestComposeTrainingWindow:
    def test_single_event_stream(self):
        arr = events_array([(4, 5, 1, 777)])
        w = compose_training_window(arr, tau_us=1000, rng_seed=0)
        assert len(w) == 1
        assert w.anchor_t == 777

    def test_seeded_determinism(self):
        rng = np.random.default_rng(100)
        arr = random_events(rng, SensorGeometry(32, 32), 500, max_gap=500)
        w1 = compose_training_window(arr, 5000, rng_seed=42)
        w2 = compose_training_window(arr, 5000, rng_seed=42)
        assert np.array_equal(w1.to_array(), w2.to_array())

    def test_crop_rebases_coordinates(self):
        rng = np.random.default_rng(3)
        geo = SensorGeometry(240, 180)
        arr = random_events(rng, geo, 3000, max_gap=50)
        w = compose_training_window(arr, 32000, crop=(128, 128), rng_seed=7,
                                    geometry=geo)
        out = w.to_array()
        assert out["x"].max() < 128 and out["y"].max() < 128

    def test_window_contains_only_live_events(self):
        rng = np.random.default_rng(9)
        arr = random_events(rng, SensorGeometry(16, 16), 800, max_gap=400)
        w = compose_training_window(arr, 3000, rng_seed=1)
        ages = w.anchor_t - w.to_array()["t"].astype(np.int64)
        assert ages.max() < 3000 and ages.min() >= 0

    def test_empty_stream_rejected(self):
        with pytest.raises(ValueError):
            compose_training_window(np.empty(0, dtype=EVENT_DTYPE), 1000)

    def test_impossible_crop_exhausts_retries(self):
        arr = events_array([(0, 0, 1, 10)])
        with pytest.raises(ValueError):
            compose_training_window(arr, 1000, crop=(2, 2, 4, 4), rng_seed=0)


class TestReorderBuffer:
    def test_sorts_within_depth(self):
        rb = ReorderBuffer(depth=4)
        times = [10, 30, 20, 50, 40, 70, 60, 90, 80, 100]
        out = []
        for t in times:
            out.extend(rb.push(Event(0, 0, 1, t)))
        out.extend(rb.flush())
        assert [e.t for e in out] == sorted(times)


class TestFileFormats:
    def test_csv_roundtrip(self, tmp_path):
        rng = np.random.default_rng(8)
        arr = random_events(rng, SensorGeometry(64, 64), 200, max_gap=100)
        path = tmp_path / "ev.csv"
        write_events_csv(path, arr)
        assert open(path).readline().strip() == "t_us,x,y,p"
        assert np.array_equal(read_events_csv(path), arr)

    def test_binary_roundtrip_and_layout(self, tmp_path):
        rng = np.random.default_rng(8)
        geo = SensorGeometry(64, 48)
        arr = random_events(rng, geo, 123, max_gap=100)
        path = tmp_path / "ev.evt"
        write_events_binary(path, arr, geo)
        # 16-byte header + 13 bytes per record
        assert path.stat().st_size == 16 + 13 * len(arr)
        back, geo2 = read_events_binary(path)
        assert geo2 == geo
        assert np.array_equal(back, arr)

    def test_binary_header_magic(self, tmp_path):
        path = tmp_path / "bad.evt"
        path.write_bytes(b"NOPE" + b"\x00" * 12)
        with pytest.raises(ValueError, match="magic"):
            read_events_binary(path)

    def test_csv_bad_header(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("time,x,y,p\n1,2,3,1\n")
        with pytest.raises(ValueError, match="header"):
            read_events_csv(path)

    def test_empty_csv(self, tmp_path):
        path = tmp_path / "empty.csv"
        write_events_csv(path, np.empty(0, dtype=EVENT_DTYPE))
        assert len(read_events_csv(path)) == 0
