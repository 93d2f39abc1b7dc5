import statistics

from serelay.latency import (
    AccessPath,
    LatencyModel,
    LatencyParams,
    VirtualClock,
    WallClock,
)

SAMPLES = 5000


def model(path: AccessPath, seed: int = 11) -> LatencyModel:
    return LatencyModel(path, seed)


class TestDistributions:
    def test_external_concentrates_near_30ms(self):
        values = model(AccessPath.DIRECT_EXTERNAL).samples(SAMPLES)
        assert 25.0 <= statistics.fmean(values) <= 35.0
        assert all(v >= 0 for v in values)
        assert statistics.pstdev(values) < 10.0

    def test_internal_stays_within_50_80(self):
        values = model(AccessPath.DIRECT_INTERNAL).samples(SAMPLES)
        assert all(50.0 <= v <= 80.0 for v in values)

    def test_wifi_overhead_in_100_210_band(self):
        internal = model(AccessPath.DIRECT_INTERNAL)
        wifi = model(AccessPath.RELAY_WIFI)
        for k in range(SAMPLES):
            added = wifi.sample_at(k) - internal.sample_at(k)
            assert 100.0 <= added <= 210.0

    def test_internet_median_above_one_second(self):
        values = model(AccessPath.RELAY_INTERNET).samples(SAMPLES)
        assert statistics.median(values) > 1000.0

    def test_internet_added_delay_floor(self):
        internal = model(AccessPath.DIRECT_INTERNAL)
        internet = model(AccessPath.RELAY_INTERNET)
        added = [
            internet.sample_at(k) - internal.sample_at(k) for k in range(SAMPLES)
        ]
        assert min(added) >= 150.0

    def test_internet_starts_around_200ms_total(self):
        values = model(AccessPath.RELAY_INTERNET).samples(SAMPLES)
        assert min(values) >= 200.0


class TestSeeding:
    def test_same_seed_same_sequence(self):
        a = model(AccessPath.RELAY_INTERNET, seed=3).samples(200)
        b = model(AccessPath.RELAY_INTERNET, seed=3).samples(200)
        assert a == b

    def test_different_seeds_differ(self):
        a = model(AccessPath.RELAY_WIFI, seed=3).samples(50)
        b = model(AccessPath.RELAY_WIFI, seed=4).samples(50)
        assert a != b

    def test_sample_at_is_pure(self):
        m = model(AccessPath.RELAY_WIFI, seed=9)
        assert m.sample_at(17) == m.sample_at(17)
        first = m.sample_ms()
        assert first == m.sample_at(0)

    def test_custom_params(self):
        params = LatencyParams(internal_low=10.0, internal_high=12.0)
        m = LatencyModel(AccessPath.DIRECT_INTERNAL, seed=0, params=params)
        assert all(10.0 <= v <= 12.0 for v in m.samples(100))


class TestClocks:
    def test_virtual_clock_advances_on_sleep(self):
        clock = VirtualClock()
        assert clock.now_ms() == 0.0
        clock.sleep_ms(125.5)
        clock.sleep_ms(0.0)
        assert clock.now_ms() == 125.5

    def test_virtual_clock_ignores_negative(self):
        clock = VirtualClock(start_ms=10.0)
        clock.sleep_ms(-5.0)
        assert clock.now_ms() == 10.0

    def test_wall_clock_sleeps(self):
        clock = WallClock()
        before = clock.now_ms()
        clock.sleep_ms(15.0)
        assert clock.now_ms() - before >= 14.0
