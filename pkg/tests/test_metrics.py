"""Metric tests: read-out rules, the hand-enumerated matching oracle, the
published composite-score arithmetic, improvement metrics, diagnostics, and
the documented edge conventions."""

from dataclasses import dataclass

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asakit import metrics as mx
from asakit import objectives as obj
from asakit.autodiff import Tensor
from asakit.errors import ShapeError
from asakit.scenes import SceneConfig, synthesize_scene


def unit(x, y, z):
    v = np.array([x, y, z], dtype=float)
    return v / np.linalg.norm(v)


def off_axis(deg):
    rad = np.radians(deg)
    return np.array([np.sin(rad), 0.0, np.cos(rad)])


@dataclass
class FakeEstimate:
    class_posterior: Tensor
    activation: Tensor
    event_map: Tensor
    doa: Tensor
    direct_wav: Tensor
    reverb_wav: Tensor
    noise_wav: Tensor


def estimate_from_targets(tgt: obj.TrainingTargets) -> FakeEstimate:
    return FakeEstimate(
        class_posterior=Tensor(tgt.class_target), activation=Tensor(tgt.activation),
        event_map=Tensor(tgt.event_map), doa=Tensor(tgt.doa),
        direct_wav=Tensor(tgt.direct), reverb_wav=Tensor(tgt.reverb),
        noise_wav=Tensor(tgt.noise))


class TestReadOut:
    def test_all_zero_activation_gives_empty_events(self):
        events = mx.read_out_events(np.full((2, 4), 0.25), np.zeros((2, 6)),
                                    np.zeros((2, 6, 3)))
        assert all(len(f) == 0 for f in events)

    def test_boundary_half_is_inactive(self):
        act = np.full((1, 3), 0.5)
        events = mx.read_out_events(np.ones((1, 2)), act, np.ones((1, 3, 3)))
        assert all(len(f) == 0 for f in events)

    def test_perfect_estimate_reproduces_reference(self):
        scene = synthesize_scene(SceneConfig.tiny(), 3)
        tgt = obj.targets_from_scene(scene, n_slots=2, n_classes=13)
        pred = mx.read_out_events(tgt.class_target, tgt.activation, tgt.doa)
        ref = mx.reference_events(tgt)
        assert len(pred) == len(ref)
        for p, r in zip(pred, ref):
            assert sorted(c for c, _ in p) == sorted(c for c, _ in r)

    def test_posterior_scaling_invariance_but_not_activation(self):
        post = np.array([[0.2, 0.5, 0.3]])
        act = np.array([[0.45, 0.6]])
        doa = np.tile(unit(0, 0, 1), (1, 2, 1))
        a = mx.read_out_events(post, act, doa)
        b = mx.read_out_events(post * 10, act, doa)
        assert [len(f) for f in a] == [len(f) for f in b]
        c = mx.read_out_events(post, act * 1.2, doa)  # 0.45 crosses 0.5
        assert [len(f) for f in c] != [len(f) for f in a]

    def test_degenerate_doa_dropped(self):
        events = mx.read_out_events(np.ones((1, 2)), np.ones((1, 1)),
                                    np.zeros((1, 1, 3)))
        assert events[0] == []


class TestAngularError:
    def test_identity_orthogonal_antipodal(self):
        z = unit(0, 0, 1)
        assert mx.angular_error(z, z) == 0.0
        assert mx.angular_error(z, unit(1, 0, 0)) == pytest.approx(90.0)
        assert mx.angular_error(z, -z) == pytest.approx(180.0)

    def test_zero_norm_rejected(self):
        with pytest.raises(ShapeError):
            mx.angular_error(np.zeros(3), unit(0, 0, 1))


class TestSeldMetrics:
    def frames(self, *events_per_frame):
        return [list(f) for f in events_per_frame]

    def test_exact_match(self):
        z = unit(0, 0, 1)
        ref = self.frames([(2, z)], [(2, z)], [])
        res = mx.seld_metrics(ref, ref, frames_per_segment=10)
        assert res.as_tuple() == (0.0, 1.0, 0.0, 1.0)

    def test_empty_prediction_vs_nonempty_reference(self):
        z = unit(0, 0, 1)
        ref = self.frames([(1, z)], [(1, z)])
        pred = self.frames([], [])
        res = mx.seld_metrics(pred, ref, frames_per_segment=10)
        assert res.as_tuple() == (1.0, 0.0, 180.0, 0.0)
        assert mx.seld_score(*res.as_tuple()) == 1.0

    def test_both_empty_convention(self):
        res = mx.seld_metrics(self.frames([], []), self.frames([], []), 10)
        assert res.as_tuple() == (0.0, 1.0, 0.0, 1.0)

    def test_hand_enumerated_three_frame_case(self):
        # frame 1's prediction is 25 degrees off: it pairs (LE, LR) but is
        # not a location-aware TP (one FP + one FN)
        z = unit(0, 0, 1)
        ref = self.frames([(2, z)], [(2, z)], [(2, z)])
        pred = self.frames([(2, z)], [(2, off_axis(25.0))], [(2, z)])
        res = mx.seld_metrics(pred, ref, frames_per_segment=3)
        assert res.n_pairs == 3 and res.tp == 2 and res.fp == 1 and res.fn == 1
        assert res.lr == pytest.approx(1.0)
        assert res.le_deg == pytest.approx(25.0 / 3.0)
        assert res.er == pytest.approx(1.0 / 3.0)   # one substitution, three refs
        assert res.f1 == pytest.approx(2.0 / 3.0)

    def test_threshold_conditioned_le_switch(self):
        z = unit(0, 0, 1)
        ref = self.frames([(2, z)], [(2, z)])
        pred = self.frames([(2, z)], [(2, off_axis(25.0))])
        res = mx.seld_metrics(pred, ref, 10, threshold_conditioned_le=True)
        assert res.le_deg == pytest.approx(0.0)

    def test_swap_symmetry(self):
        rng = np.random.default_rng(0)
        def rand_events(k):
            out = []
            for _ in range(k):
                v = rng.normal(size=3)
                out.append((int(rng.integers(3)), v / np.linalg.norm(v)))
            return out
        pred = [rand_events(rng.integers(0, 3)) for _ in range(6)]
        ref = [rand_events(rng.integers(0, 3)) for _ in range(6)]
        a = mx.seld_metrics(pred, ref, 3)
        b = mx.seld_metrics(ref, pred, 3)
        assert a.fp == b.fn and a.fn == b.fp and a.tp == b.tp
        assert a.le_deg == pytest.approx(b.le_deg)

    def test_insertion_only_segment_arithmetic(self):
        z = unit(0, 0, 1)
        ref = self.frames([(0, z)], [], [])
        pred = self.frames([(0, z)], [(1, z)], [(1, z)])
        res = mx.seld_metrics(pred, ref, frames_per_segment=3)
        # 2 insertions over 1 reference event
        assert res.er == pytest.approx(2.0)

    def test_frame_count_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            mx.seld_metrics([[]], [[], []], 10)


class TestSeldScore:
    def test_published_values(self):
        assert mx.seld_score(0.250, 0.741, 17.0, 0.781) == pytest.approx(0.206, abs=5e-4)
        assert mx.seld_score(0.288, 0.702, 18.5, 0.769) == pytest.approx(0.230, abs=5e-4)

    def test_perfect_score(self):
        assert mx.seld_score(0.0, 1.0, 0.0, 1.0) == 0.0

    @settings(max_examples=60, deadline=None)
    @given(er=st.floats(0, 1.5), f1=st.floats(0, 1), le=st.floats(0, 180),
           lr=st.floats(0, 1), d=st.floats(0.001, 0.2))
    def test_monotone_in_every_input(self, er, f1, le, lr, d):
        base = mx.seld_score(er, f1, le, lr)
        assert mx.seld_score(er + d, f1, le, lr) >= base
        assert mx.seld_score(er, min(f1 + d, 1.0), le, lr) <= base
        assert mx.seld_score(er, f1, min(le + 50 * d, 180.0), lr) >= base
        assert mx.seld_score(er, f1, le, min(lr + d, 1.0)) <= base


class TestImprovements:
    def test_mixture_as_estimate_is_exactly_zero(self):
        rng = np.random.default_rng(1)
        ref = rng.normal(size=512)
        mix = ref + rng.normal(size=512)
        assert mx.si_sdri(mix, ref, mix) == 0.0
        assert mx.sdri(mix, ref, mix) == 0.0

    def test_perfect_estimate_hits_cap_level(self):
        rng = np.random.default_rng(2)
        ref = rng.normal(size=512)
        mix = ref + 0.5 * rng.normal(size=512)
        got = mx.si_sdri(ref, ref, mix)
        assert got == pytest.approx(60.0 - obj.si_sdr(mix, ref).item())

    def test_random_triple_matches_oracle(self):
        rng = np.random.default_rng(3)
        est, ref, mix = rng.normal(size=(3, 700))

        def oracle_si(e, r):
            a = np.dot(e, r) / np.dot(r, r)
            return 10 * np.log10(np.sum((a * r) ** 2) / np.sum((a * r - e) ** 2))

        def oracle_sdr(e, r):
            return 10 * np.log10(np.sum(r**2) / np.sum((r - e) ** 2))

        assert abs(mx.si_sdri(est, ref, mix) - (oracle_si(est, ref) - oracle_si(mix, ref))) < 1e-9
        assert abs(mx.sdri(est, ref, mix) - (oracle_sdr(est, ref) - oracle_sdr(mix, ref))) < 1e-9


class TestDiagnostics:
    def test_kernel_cosine_identity_and_orthogonal(self):
        rng = np.random.default_rng(4)
        a = rng.normal(size=(3, 2, 3, 3))
        np.testing.assert_allclose(mx.kernel_cosine_similarity(a, a), 1.0, atol=1e-12)
        b = np.zeros((2, 1, 1, 2))
        c = np.zeros((2, 1, 1, 2))
        b[:, 0, 0, 0] = 1.0
        c[:, 0, 0, 1] = 1.0
        np.testing.assert_allclose(mx.kernel_cosine_similarity(b, c), 0.0, atol=0)

    def test_perfect_prediction_recall_is_one(self):
        scene = synthesize_scene(SceneConfig.tiny(), 5)
        tgt = obj.targets_from_scene(scene, 2, 13)
        pred = mx.read_out_events(tgt.class_target, tgt.activation, tgt.doa)
        ref = mx.reference_events(tgt)
        res = mx.seld_metrics(pred, ref, 10)
        recall = mx.per_class_recall(res, 13)
        present = ~np.isnan(recall)
        assert present.sum() == len(set(scene.class_ids.tolist()))
        np.testing.assert_allclose(recall[present], 1.0)

    def test_le_histogram_bins(self):
        edges, counts = mx.le_histogram([0.5, 4.9, 5.1, 179.9])
        assert len(edges) == 37 and counts.sum() == 4
        assert counts[0] == 2 and counts[1] == 1 and counts[-1] == 1


class TestEvaluateEstimate:
    def test_oracle_estimate_scores_perfectly(self):
        scene = synthesize_scene(SceneConfig.tiny(), 7)
        tgt = obj.targets_from_scene(scene, 2, 13)
        est = estimate_from_targets(tgt)
        report, _ = mx.evaluate_estimate(est, tgt, scene.mixture, frames_per_segment=10)
        assert (report.er, report.f1, report.le_deg, report.lr) == (0.0, 1.0, 0.0, 1.0)
        assert report.seld == 0.0
        assert report.si_sdri > 30.0  # capped estimate SI-SDR minus mixture level

    def test_mixture_as_estimate_gives_zero_improvement(self):
        scene = synthesize_scene(SceneConfig.tiny(), 8)
        tgt = obj.targets_from_scene(scene, 2, 13)
        est = estimate_from_targets(tgt)
        j, m, n = tgt.direct.shape
        est.direct_wav = Tensor(np.tile(scene.mixture, (j, 1, 1)))
        est.reverb_wav = Tensor(np.zeros((j, m, n)))
        report, _ = mx.evaluate_estimate(est, tgt, scene.mixture, frames_per_segment=10)
        assert report.si_sdri == 0.0
        assert report.sdri == 0.0

    def test_repeat_evaluation_is_deterministic(self):
        scene = synthesize_scene(SceneConfig.tiny(), 9)
        tgt = obj.targets_from_scene(scene, 2, 13)
        est = estimate_from_targets(tgt)
        r1, _ = mx.evaluate_estimate(est, tgt, scene.mixture, 10)
        r2, _ = mx.evaluate_estimate(est, tgt, scene.mixture, 10)
        assert r1.as_row() == r2.as_row()
