import pytest

from splitexit.errors import ColdEstimatorError
from splitexit.runtime import (
    NetworkEstimate,
    RuntimeProfilerState,
    SchedulerGate,
    estimate_transfer_ms,
    infer_server_time,
    probe_failed,
    probe_server,
    probe_succeeded,
    should_invoke_scheduler,
    transfer_ms,
    update_device_sf,
)


class TestTransferTime:
    def test_direct_formula(self):
        # 2.5 MB at 100 Mbit/s is 200 ms of serialisation plus the 20 ms floor.
        assert transfer_ms(20.0, 100.0, 2.5e6) == pytest.approx(220.0)

    def test_zero_payload_keeps_latency_floor(self):
        assert transfer_ms(35.0, 10.0, 0) == 35.0

    def test_monotone_in_bandwidth_and_size(self):
        base = transfer_ms(10.0, 50.0, 1e6)
        assert transfer_ms(10.0, 100.0, 1e6) < base
        assert transfer_ms(10.0, 50.0, 2e6) > base
        assert transfer_ms(20.0, 50.0, 1e6) > base

    def test_rejects_zero_bandwidth(self):
        with pytest.raises(ValueError):
            transfer_ms(1.0, 0.0, 10)


class TestNetworkEstimate:
    def test_fresh_window_wins(self):
        net = NetworkEstimate(network_type="wifi")
        net.hist_bw["wifi"] = 10.0
        net.hist_lat["wifi"] = 99.0
        net.observe(100.0, 5.0, now_s=0.0)
        bw, lat = net.current(now_s=1.0)
        assert bw == 100.0 and lat == 5.0

    def test_stale_window_falls_back_to_history(self):
        net = NetworkEstimate(network_type="4g")
        net.observe(80.0, 30.0, now_s=0.0)
        net.hist_bw["4g"] = 42.0
        net.hist_lat["4g"] = 55.0
        bw, lat = net.current(now_s=500.0)  # past the 60 s horizon
        assert bw == 42.0 and lat == 55.0

    def test_cold_type_uses_presets_then_errors(self):
        net = NetworkEstimate(network_type="3g")
        bw, lat = net.current(now_s=0.0)
        assert bw > 0 and lat > 0  # nominal 3g preset
        net.presets = {}
        with pytest.raises(ColdEstimatorError):
            net.current(now_s=0.0, allow_presets=False)

    def test_window_averages_three_samples(self):
        net = NetworkEstimate(network_type="wifi")
        for bw in (90.0, 100.0, 110.0, 130.0):
            net.observe(bw, 10.0, now_s=0.0)
        bw, _ = net.current(now_s=0.0)
        assert bw == pytest.approx((100 + 110 + 130) / 3)

    def test_estimate_transfer_uses_current(self):
        net = NetworkEstimate(network_type="wifi")
        net.observe(100.0, 20.0, now_s=0.0)
        assert estimate_transfer_ms(net, 2.5e6, now_s=0.0) == pytest.approx(220.0)


class TestDeviceScalingFactor:
    def test_direct_ratio(self):
        state = RuntimeProfilerState()
        update_device_sf(state, 150.0, 100.0)
        assert state.device_sf == 1.5
        # A split with 80 ms offline now predicts 120 ms.
        assert state.device_sf * 80.0 == pytest.approx(120.0)

    def test_unloaded_device(self):
        state = RuntimeProfilerState()
        update_device_sf(state, 64.0, 64.0)
        assert state.device_sf == 1.0

    def test_latest_ratio_wins_no_smoothing(self):
        state = RuntimeProfilerState()
        for real, offline in ((120.0, 100.0), (90.0, 100.0), (170.0, 100.0)):
            update_device_sf(state, real, offline)
            assert state.device_sf == real / offline

    def test_consistency_with_last_measurement(self):
        state = RuntimeProfilerState()
        update_device_sf(state, 37.5, 25.0)
        assert state.device_sf * state.last_t_offline_ms == state.last_t_real_ms

    def test_rejects_nonpositive_offline(self):
        with pytest.raises(ValueError):
            update_device_sf(RuntimeProfilerState(), 10.0, 0.0)


class TestInferServerTime:
    def _state(self):
        state = RuntimeProfilerState()
        state.net.observe(100.0, 50.0, now_s=0.0)
        return state

    def test_subtracts_network_terms(self):
        state = self._state()
        # response transfer: 8 * 125000 / (1000 * 100) = 10 ms
        est = infer_server_time(state, 300.0, 125000.0)
        assert est == pytest.approx(240.0)
        assert not state.inconsistent_server_estimate

    def test_piggybacked_value_wins(self):
        state = self._state()
        est = infer_server_time(state, 300.0, 125000.0, piggybacked_ms=200.0)
        assert est == 200.0

    def test_negative_estimate_clamps_and_flags(self):
        state = self._state()
        est = infer_server_time(state, 40.0, 125000.0)
        assert est == 0.0
        assert state.inconsistent_server_estimate


class TestSchedulerGate:
    def test_below_threshold_quiet(self):
        gate = SchedulerGate()
        for v in (100.0, 100.0, 100.0):
            assert not gate.check({"bw": v})
        assert not gate.check({"bw": 104.0})  # 4% < 5%

    def test_above_threshold_fires(self):
        gate = SchedulerGate()
        for v in (100.0, 100.0, 100.0):
            gate.check({"bw": v})
        assert gate.check({"bw": 110.0})

    def test_constant_stream_never_fires_after_warmup(self):
        gate = SchedulerGate()
        fired = [gate.check({"bw": 50.0, "lat": 10.0}) for _ in range(100)]
        assert not any(fired)

    def test_alternating_ten_percent_fires_every_step(self):
        gate = SchedulerGate()
        stream = [100.0, 110.0, 90.0] + [110.0, 90.0] * 20
        fired = [gate.check({"bw": v}) for v in stream]
        assert all(fired[3:])

    def test_step_change_fires_once(self):
        gate = SchedulerGate()
        stream = [100.0] * 5 + [200.0] * 10
        fired = [gate.check({"bw": v}) for v in stream]
        assert sum(fired) == 1

    def test_boolean_flip_fires(self):
        gate = SchedulerGate()
        gate.check({"up": True})
        assert not gate.check({"up": True})
        assert gate.check({"up": False})

    def test_any_quantity_triggers(self):
        gate = SchedulerGate()
        for _ in range(3):
            gate.check({"bw": 100.0, "sf": 1.0})
        assert gate.check({"bw": 100.0, "sf": 1.2})

    def test_backoff_mode_doubles_threshold(self):
        gate = SchedulerGate(backoff=True, quiet_steps=3)
        for _ in range(3):
            gate.check({"bw": 100.0})
        assert gate.check({"bw": 110.0})      # fires at 5%
        assert gate.effective_threshold() == pytest.approx(0.10)
        assert not gate.check({"bw": 118.0})  # 7% < doubled threshold
        for _ in range(3):
            gate.check({"bw": 118.0})
        assert gate.effective_threshold() == pytest.approx(0.05)

    def test_function_wrapper(self):
        gate = SchedulerGate()
        for _ in range(3):
            should_invoke_scheduler(gate, {"bw": 10.0})
        assert should_invoke_scheduler(gate, {"bw": 20.0})


class TestProbe:
    def test_three_timeouts_mark_down_and_backoff(self):
        state = RuntimeProfilerState()
        assert not probe_failed(state, 0.0)
        assert not probe_failed(state, 5.0)
        assert probe_failed(state, 10.0)  # third timeout flips availability
        assert not state.server_available
        assert state.probe_interval_s == 10.0
        for t in (20.0, 40.0, 80.0, 160.0, 320.0):
            probe_failed(state, t)
        assert state.probe_interval_s == 80.0  # capped

    def test_recovery_flips_back_and_resets(self):
        state = RuntimeProfilerState()
        for t in (0.0, 5.0, 10.0):
            probe_failed(state, t)
        assert probe_succeeded(state, 20.0)
        assert state.server_available
        assert state.probe_interval_s == 5.0

    def test_success_when_up_does_not_flip(self):
        state = RuntimeProfilerState()
        assert not probe_succeeded(state, 0.0)

    def test_probe_server_wrapper_drives_both_paths(self):
        state = RuntimeProfilerState()
        for t in (0.0, 5.0):
            assert not probe_server(state, lambda: False, t)
        assert probe_server(state, lambda: False, 10.0)
        assert not state.server_available
        assert probe_server(state, lambda: True, 20.0)
        assert state.server_available
