import numpy as np
import pytest

from splitexit.engine import (
    FAILURE_FALLBACK_LOCAL,
    FAILURE_RETRANSMIT,
    NO_RESULT_EXIT,
    PROGRESSIVE,
    ClientEngine,
    Conditions,
    ExecutionPolicy,
    ServerCore,
    backoff_wait_ms,
    expected_backoff_ms,
    simulate_backoff_ms,
)
from splitexit.graph import enumerate_splits
from splitexit.packing import PackEstimator
from splitexit.profiles import exit_of_sample
from splitexit.protocol import OffloadMessage
from splitexit.runtime import RuntimeProfilerState
from splitexit.scheduler import Configuration, PlanContext
from splitexit.synth import make_exit_profile, make_graph, make_platform_profiles
from splitexit.synth_tensors import build_activation, decode_sample_id
from splitexit.transport import InProcessTransport


@pytest.fixture(scope="module")
def bundle():
    graph = make_graph(seed=31, n_blocks=7)
    device, server_prof = make_platform_profiles(graph, seed=31)
    profile = make_exit_profile(graph, n_samples=300, seed=31)
    splits = enumerate_splits(graph)
    ctx = PlanContext.build(graph, device, server_prof, profile)
    return graph, device, server_prof, profile, splits, ctx


def fresh_engine(bundle, p_fail=0.0, policy=FAILURE_FALLBACK_LOCAL, seed=0,
                 piggyback=True):
    graph, device, server_prof, profile, splits, ctx = bundle
    core = ServerCore(graph, server_prof.layer_ms, server_prof.exit_ms,
                      profile, splits, piggyback=piggyback)
    transport = InProcessTransport(core)
    engine = ClientEngine(
        ctx, PackEstimator(pack_mbps=device.pack_mbps), transport,
        failure_policy=policy, p_fail=p_fail,
        rng=np.random.default_rng(seed),
    )
    return engine, core


def warm_state(bw=80.0, lat=15.0):
    state = RuntimeProfilerState()
    state.net.observe(bw, lat, 0.0)
    return state


class TestSampleIdCodec:
    def test_survives_lossy_packing(self):
        from splitexit.packing import pack_tensor, unpack_tensor

        for sid in (0, 1, 77, 2**20 + 3, 2**31 - 1):
            t = build_activation(sid, 4096)
            assert decode_sample_id(t) == sid
            back = unpack_tensor(pack_tensor(t, lossy=True))
            assert decode_sample_id(back) == sid

    def test_sparsity_level(self):
        t = build_activation(5, 100000, sparsity=0.8)
        frac = np.mean(t[32:] == 0.0)
        assert 0.77 < frac < 0.83


class TestLocalExit:
    def test_exit_before_split_sends_nothing(self, bundle):
        graph, device, server_prof, profile, splits, ctx = bundle
        engine, core = fresh_engine(bundle)
        late = splits[-1]  # last relu: every exit but the final is device-side
        sample = next(s for s in profile.samples if exit_of_sample(s, 0.5) == 0)
        rec = engine.run_sample(sample, Configuration(split=late, thr_conf=0.5),
                                PROGRESSIVE, Conditions(80.0, 15.0), warm_state())
        assert rec.exit_id == 0
        assert rec.origin == "local"
        assert rec.bytes_sent == 0
        assert rec.server_ms == 0.0
        assert core.total_compute_ms == 0.0

    def test_device_only_split_runs_everything_locally(self, bundle):
        graph, device, server_prof, profile, splits, ctx = bundle
        engine, core = fresh_engine(bundle)
        none = next(s for s in splits if s.is_none)
        for sample in profile.samples[:50]:
            cfg = Configuration(split=none, thr_conf=0.8)
            rec = engine.run_sample(sample, cfg, PROGRESSIVE,
                                    Conditions(80.0, 15.0), warm_state())
            assert rec.bytes_sent == 0
            assert rec.exit_id == exit_of_sample(sample, cfg.thr_conf)


class TestOffload:
    def test_remote_result_for_late_crossing(self, bundle):
        graph, device, server_prof, profile, splits, ctx = bundle
        engine, core = fresh_engine(bundle)
        early = next(s for s in splits if s.kind == "layer")
        thr = 0.9
        sample = next(
            s for s in profile.samples
            if exit_of_sample(s, thr) >= 2 and any(c > thr for c in s.confidences)
        )
        cfg = Configuration(split=early, thr_conf=thr)
        rec = engine.run_sample(sample, cfg, PROGRESSIVE,
                                Conditions(80.0, 15.0), warm_state())
        assert rec.origin == "remote"
        assert rec.exit_id == exit_of_sample(sample, cfg.thr_conf)
        assert rec.bytes_sent > 0
        assert rec.server_ms > 0

    def test_exit_matches_policy_for_all_samples(self, bundle):
        graph, device, server_prof, profile, splits, ctx = bundle
        engine, core = fresh_engine(bundle)
        cond = Conditions(80.0, 15.0)
        state = warm_state()
        for split in (splits[1], splits[3], splits[-1]):
            for thr in (0.5, 0.8, 1.0):
                cfg = Configuration(split=split, thr_conf=thr)
                for sample in profile.samples[:80]:
                    rec = engine.run_sample(sample, cfg, PROGRESSIVE, cond, state)
                    assert rec.exit_id == exit_of_sample(sample, cfg.thr_conf)

    def test_cancel_accounting_stops_server_time(self, bundle):
        graph, device, server_prof, profile, splits, ctx = bundle
        engine, core = fresh_engine(bundle)
        # Slow network: the local fallback always beats the remote estimate,
        # and the cancel (sent at fallback completion) lands before the
        # request finishes transferring, so zero server time is accounted.
        cond = Conditions(0.5, 200.0)
        state = warm_state(bw=0.5, lat=200.0)
        split = next(s for s in splits if s.kind == "layer")
        sample = next(
            s for s in profile.samples
            if exit_of_sample(s, 0.5) > 0 and any(c > 0.5 for c in s.confidences)
        )
        rec = engine.run_sample(sample, Configuration(split=split, thr_conf=0.5),
                                PROGRESSIVE, cond, state)
        if rec.cancelled:
            assert rec.server_ms == 0.0
            assert core.accounted_ms[1] == 0.0

    def test_server_down_skips_request(self, bundle):
        graph, device, server_prof, profile, splits, ctx = bundle
        engine, core = fresh_engine(bundle)
        state = warm_state()
        state.server_available = False
        split = next(s for s in splits if s.kind == "layer")
        for sample in profile.samples[:40]:
            rec = engine.run_sample(sample, Configuration(split=split, thr_conf=0.9),
                                    PROGRESSIVE, Conditions(80.0, 15.0), state)
            assert rec.bytes_sent == 0
            assert rec.origin == "local"


class TestEstimatorConsistency:
    def test_per_sample_origin_matches_metric_accounting(self, bundle):
        # The estimator and the engine must agree sample by sample on who
        # produces the accepted result, not just on the exit taken.
        graph, device, server_prof, profile, splits, ctx = bundle
        from splitexit.profiles import exit_crossing
        from splitexit.scheduler import metric_table

        engine, _ = fresh_engine(bundle)
        # Freeze the pack-ratio feedback so the planning-time table and the
        # engine adjudicate the race from identical estimates.
        engine.pack_est.observe = lambda *args: None
        state = warm_state(bw=40.0, lat=20.0)
        cond = Conditions(40.0, 20.0)
        table = metric_table(ctx, state, engine.pack_est)
        for si in (1, 2, 4, len(splits) - 1):
            j = int(ctx.horizon[si])
            local_race = bool(table.local_wins_race[si])
            for ti, thr in enumerate(ctx.grid):
                cfg = Configuration(split=splits[si], thr_conf=thr)
                for sample in profile.samples[:60]:
                    e_star, crossed = exit_crossing(sample, thr)
                    if j >= graph.n_exits or (crossed and e_star < j):
                        want = "local"
                    elif crossed and e_star == j:
                        want = "local" if local_race else "remote"
                    elif crossed:
                        want = "remote"
                    else:
                        want = "local" if e_star <= j else "remote"
                    rec = engine.run_sample(sample, cfg, PROGRESSIVE, cond, state)
                    assert rec.origin == want, (si, thr, sample.sample_id)


class TestServerCore:
    def _offload(self, bundle, sample, split, thr):
        graph, device, server_prof, profile, splits, ctx = bundle
        from splitexit.packing import pack_tensor

        tensor = build_activation(sample.sample_id, 256)
        return OffloadMessage(1, split.split_id, thr,
                              ((split.layer_id + 1, pack_tensor(tensor)),))

    def test_thr_zero_replies_first_exit_past_split(self, bundle):
        graph, device, server_prof, profile, splits, ctx = bundle
        core = ServerCore(graph, server_prof.layer_ms, server_prof.exit_ms,
                          profile, splits)
        split = next(s for s in splits if s.kind == "layer")
        first_past = next(e for e in graph.exits if e.layer_id > split.layer_id)
        sample = profile.samples[0]
        reply, compute = core.handle_offload(self._offload(bundle, sample, split, 0.0))
        assert reply.exit_id == first_past.exit_id
        assert compute > 0

    def test_no_crossing_replies_most_confident_remote_exit(self, bundle):
        graph, device, server_prof, profile, splits, ctx = bundle
        core = ServerCore(graph, server_prof.layer_ms, server_prof.exit_ms,
                          profile, splits)
        split = next(s for s in splits if s.kind == "layer")
        remote_exits = [e.exit_id for e in graph.exits if e.layer_id > split.layer_id]
        sample = profile.samples[3]
        reply, compute = core.handle_offload(self._offload(bundle, sample, split, 1.0))
        confs = [sample.confidences[e] for e in remote_exits]
        assert reply.exit_id == remote_exits[int(np.argmax(confs))]
        # No crossing: the server ran to the end.
        full = core._segment_ms(split.layer_id + 1, graph.n_layers, remote_exits)
        assert compute == pytest.approx(full)

    def test_slowdown_scales_compute(self, bundle):
        graph, device, server_prof, profile, splits, ctx = bundle
        split = next(s for s in splits if s.kind == "layer")
        sample = profile.samples[0]
        msg = self._offload(bundle, sample, split, 0.0)
        core1 = ServerCore(graph, server_prof.layer_ms, server_prof.exit_ms,
                           profile, splits, server_sf=1.0)
        core4 = ServerCore(graph, server_prof.layer_ms, server_prof.exit_ms,
                           profile, splits, server_sf=4.0)
        _, c1 = core1.handle_offload(msg)
        _, c4 = core4.handle_offload(msg)
        assert c4 == pytest.approx(4.0 * c1)

    def test_piggyback_disabled_omits_compute(self, bundle):
        graph, device, server_prof, profile, splits, ctx = bundle
        core = ServerCore(graph, server_prof.layer_ms, server_prof.exit_ms,
                          profile, splits, piggyback=False)
        split = next(s for s in splits if s.kind == "layer")
        reply, _ = core.handle_offload(self._offload(bundle, profile.samples[0], split, 0.0))
        assert reply.server_compute_us is None


class TestFailureHandling:
    def test_forced_failure_falls_back_to_most_confident_device_exit(self, bundle):
        graph, device, server_prof, profile, splits, ctx = bundle
        engine, core = fresh_engine(bundle, p_fail=1.0)
        split = next(s for s in splits if s.kind == "layer")
        j = int(ctx.horizon[[i for i, s in enumerate(splits) if s is split][0]])
        thr = 0.95
        for sample in profile.samples[:60]:
            rec = engine.run_sample(sample, Configuration(split=split, thr_conf=thr),
                                    PROGRESSIVE, Conditions(80.0, 15.0), warm_state())
            want = exit_of_sample(sample, thr)
            if want < j:
                assert rec.exit_id == want  # unaffected: exited before the cut
            else:
                horizon = sample.confidences[: j + 1]
                crossed = [k for k, c in enumerate(horizon) if c > thr]
                expect = crossed[0] if crossed else int(np.argmax(horizon))
                assert rec.exit_id == expect
                assert rec.origin == "local"
        assert core.total_compute_ms == 0.0

    def test_nonprogressive_failure_has_no_result(self, bundle):
        graph, device, server_prof, profile, splits, ctx = bundle
        engine, core = fresh_engine(bundle, p_fail=1.0)
        split = next(s for s in splits if s.kind == "layer")
        rec = engine.run_sample(profile.samples[0],
                                Configuration(split=split, thr_conf=1.0),
                                ExecutionPolicy("nonprogressive"),
                                Conditions(80.0, 15.0), warm_state())
        assert rec.exit_id == NO_RESULT_EXIT
        assert rec.correct == 0

    def test_retransmit_eventually_succeeds(self, bundle):
        graph, device, server_prof, profile, splits, ctx = bundle
        engine, core = fresh_engine(bundle, p_fail=0.5, policy=FAILURE_RETRANSMIT, seed=4)
        split = next(s for s in splits if s.kind == "layer")
        sample = next(s for s in profile.samples if exit_of_sample(s, 0.95) >= 3)
        recs = [
            engine.run_sample(sample, Configuration(split=split, thr_conf=0.95),
                              ExecutionPolicy("nonprogressive"),
                              Conditions(80.0, 15.0), warm_state())
            for _ in range(60)
        ]
        retried = [r for r in recs if r.attempts > 1 and r.exit_id != NO_RESULT_EXIT]
        assert retried, "expected at least one successful retransmission"
        for r in retried:
            # Waits follow the doubling schedule for the observed failures.
            assert r.backoff_ms == sum(
                backoff_wait_ms(k) for k in range(1, r.attempts)
            )


class TestRequestLifecycle:
    def test_every_trajectory_is_legal_and_terminal(self, bundle):
        from splitexit.engine import (
            LEGAL_TRANSITIONS,
            LOCAL_RUNNING,
            TERMINAL_PHASES,
        )

        graph, device, server_prof, profile, splits, ctx = bundle
        engine, _ = fresh_engine(bundle, p_fail=0.3, seed=6)
        cond = Conditions(40.0, 20.0)
        state = warm_state(bw=40.0, lat=20.0)
        seen = set()
        for split in (splits[0], splits[1], splits[4]):
            for thr in (0.6, 0.9, 1.0):
                cfg = Configuration(split=split, thr_conf=thr)
                for sample in profile.samples[:60]:
                    rec = engine.run_sample(sample, cfg, PROGRESSIVE, cond, state)
                    seen.add(rec.phases)
                    assert rec.phases[0] == LOCAL_RUNNING
                    assert rec.phases[-1] in TERMINAL_PHASES
                    for a, b in zip(rec.phases, rec.phases[1:]):
                        assert b in LEGAL_TRANSITIONS[a], rec.phases
        # The mixed workload exercises several distinct trajectories.
        assert len(seen) >= 3

    def test_exactly_one_result_per_request(self, bundle):
        # Every interleaving of fallback, remote reply, cancellation and
        # failure yields exactly one record, carrying the request id of the
        # offload it settled (0 when nothing was sent).
        graph, device, server_prof, profile, splits, ctx = bundle
        engine, _ = fresh_engine(bundle, p_fail=0.4, seed=7)
        cond = Conditions(40.0, 20.0)
        state = warm_state(bw=40.0, lat=20.0)
        cfg = Configuration(split=splits[3], thr_conf=0.8)
        ids = []
        for sample in profile.samples[:150]:
            rec = engine.run_sample(sample, cfg, PROGRESSIVE, cond, state)
            if rec.request_id:
                ids.append(rec.request_id)
        assert len(ids) == len(set(ids))  # one settled result per request


class TestBackoffModel:
    def test_wait_schedule_doubles_from_20ms(self):
        assert [backoff_wait_ms(k) for k in (1, 2, 3, 4)] == [20.0, 40.0, 80.0, 160.0]

    def test_expected_value_quarter_failure(self):
        # Sum_k p^k * 20 * 2^(k-1) = 10 * sum (2p)^k -> 10 ms at p = 1/4.
        assert expected_backoff_ms(0.25, r_max=10) == pytest.approx(
            10.0 * sum(0.5 ** k for k in range(1, 11))
        )

    def test_expected_value_half_failure_truncates(self):
        # Divergent untruncated series; each term is 10 ms, capped at r_max.
        assert expected_backoff_ms(0.5, r_max=10) == pytest.approx(100.0)

    def test_monte_carlo_close_to_closed_form(self):
        rng = np.random.default_rng(9)
        for p in (0.1, 0.25, 0.5):
            draws = [simulate_backoff_ms(rng, p) for _ in range(40000)]
            assert np.mean(draws) == pytest.approx(expected_backoff_ms(p), rel=0.08)


class TestPipelinedPacking:
    def test_two_stage_pipeline_preserves_order(self):
        from splitexit.pipeline import PackPipeline

        rng = np.random.default_rng(10)
        tensors = [rng.uniform(0, 2, 500).astype(np.float32) for _ in range(24)]
        for t in tensors:
            t[rng.random(500) < 0.8] = 0.0
        with PackPipeline(queue_depth=4) as pipe:
            for i, t in enumerate(tensors):
                pipe.submit(i, t)
            results = [pipe.collect() for _ in tensors]
        assert [tag for tag, _ in results] == list(range(24))
        from splitexit.packing import pack_tensor

        for (tag, payload), tensor in zip(results, tensors):
            assert payload == pack_tensor(tensor, lossy=True)
