"""Model-graph tests: per-component contracts (including the published-scale
shapes), residual identities, slot-permutation coherence, the identity
refinement configuration, and gradient flow end to end."""

import numpy as np
import pytest

from asakit import autodiff as ad
from asakit.autodiff import GradGraph, Tensor
from asakit.errors import ConfigError, ShapeError
from asakit import model as mdl
from asakit import objectives as obj


@pytest.fixture(scope="module")
def tiny_model():
    return mdl.AsaModel(mdl.ModelConfig.tiny(), seed=0)


@pytest.fixture(scope="module")
def paper_model():
    return mdl.AsaModel(mdl.ModelConfig.paper(), seed=0)


def rng_for(seed):
    return np.random.default_rng(seed)


class TestConfig:
    def test_paper_profile_dimensions(self):
        cfg = mdl.ModelConfig.paper()
        assert (cfg.n_frames, cfg.n_bins, cfg.t_out) == (200, 321, 40)
        assert cfg.upsample_stride == 5
        assert (cfg.n_slots, cfg.n_classes, cfg.embed_channels, cfg.n_blocks) == (5, 13, 64, 6)

    def test_tiny_profile_dimensions(self):
        cfg = mdl.ModelConfig.tiny()
        assert (cfg.n_frames, cfg.n_bins, cfg.t_out) == (50, 161, 10)
        assert cfg.upsample_stride == 5

    def test_indivisible_frames_rejected(self):
        with pytest.raises(ConfigError):
            mdl.ModelConfig.tiny(t_out=7)

    def test_patch_f_exceeding_bins_rejected(self):
        with pytest.raises(ConfigError):
            mdl.ModelConfig.tiny(patch_f=400)

    def test_both_tcm_branches_off_rejected(self):
        with pytest.raises(ConfigError):
            mdl.ModelConfig.tiny(tcm_sed_branch=False, tcm_doa_branch=False)


class TestAggregator:
    def test_shape_preserved_on_toy_config(self):
        cfg = mdl.ModelConfig.micro(embed_channels=64)
        block = mdl.AggregatorBlock(cfg, rng_for(0))
        out = block(Tensor(rng_for(1).normal(size=(64, 20, 33))))
        assert out.shape == (64, 20, 33)

    def test_zero_weights_give_residual_identity(self):
        cfg = mdl.ModelConfig.micro()
        block = mdl.AggregatorBlock(cfg, rng_for(2))
        for unit in (block.t_attn, block.f_attn):
            unit.mha.out.w.data[:] = 0.0
            unit.mha.out.b.data[:] = 0.0
        for ffn in (block.t_ffn, block.f_ffn):
            ffn.down.w.data[:] = 0.0
            ffn.down.b.data[:] = 0.0
        block.gcb.main.w.data[:] = 0.0
        block.gcb.main.b.data[:] = 0.0
        x = rng_for(3).normal(size=(cfg.embed_channels, 6, 9))
        out = block(Tensor(x))
        np.testing.assert_array_equal(out.data, x)

    def test_gradient_through_one_block(self):
        cfg = mdl.ModelConfig.micro(embed_channels=4)
        block = mdl.AggregatorBlock(cfg, rng_for(4))
        x = Tensor(rng_for(5).normal(size=(4, 6, 5)), requires_grad=True)
        probe = Tensor(rng_for(6).normal(size=(4, 6, 5)))

        def run():
            return ad.tmean(ad.mul(block(x), probe))

        err = ad.finite_difference_check(run, [x], eps=1e-5, max_coords=16)
        assert err < 1e-4


class TestSplitter:
    def test_paper_scale_shape(self, paper_model):
        z = Tensor(rng_for(7).normal(size=(64, 200, 321)))
        out = paper_model.splitter1(z)
        assert out.shape == (6, 64, 200, 321)

    def test_zero_weights_zero_output(self):
        cfg = mdl.ModelConfig.micro()
        split = mdl.ObjectSplitter(cfg, rng_for(8))
        split.conv.w.data[:] = 0.0
        out = split(Tensor(rng_for(9).normal(size=(cfg.embed_channels, 10, 11))))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_gradient_check(self):
        cfg = mdl.ModelConfig.micro(embed_channels=4)
        split = mdl.ObjectSplitter(cfg, rng_for(10))
        z = Tensor(rng_for(11).normal(size=(4, 5, 6)), requires_grad=True)

        def run():
            out = split(z)
            return ad.tmean(ad.mul(out, out))

        assert ad.finite_difference_check(run, [z], eps=1e-5, max_coords=16) < 1e-5


class TestAudioDecoder:
    def test_paper_scale_output_shape(self, paper_model):
        obj_feat = Tensor(rng_for(12).normal(size=(64, 200, 321)) * 0.1)
        wav = paper_model.dec1.direct(obj_feat, 64000)
        assert wav.shape == (4, 64000)

    def test_zero_feature_zero_waveform(self, tiny_model):
        wav = tiny_model.dec1.direct(Tensor(np.zeros((16, 50, 161))), 8000)
        np.testing.assert_array_equal(wav.data, 0.0)

    def test_si_sdr_loss_gradient_through_decoder(self):
        cfg = mdl.ModelConfig.micro()
        model = mdl.AsaModel(cfg, seed=3)
        dec = model.dec1.direct
        obj_feat = Tensor(rng_for(13).normal(size=(8, 25, 81)) * 0.3)
        ref = rng_for(14).normal(size=(2, cfg.n_samples))

        def run():
            wav = dec(obj_feat, cfg.n_samples)
            return ad.neg(obj.si_sdr(wav[0], Tensor(ref[0])))

        params = [dec.conv1.w, dec.conv2.w, dec.conv2.b]
        err = ad.finite_difference_check(run, params, eps=1e-5, max_coords=8)
        assert err < 1e-4


class TestSedDecoder:
    def test_paper_scale_output_shapes(self, paper_model):
        obj_feat = Tensor(rng_for(15).normal(size=(64, 200, 321)) * 0.1)
        post, act, event = paper_model.dec1.sed(obj_feat)
        assert post.shape == (13,)
        assert act.shape == (40,)
        assert event.shape == (40, 13)

    def test_posterior_on_simplex_and_ranges(self, tiny_model):
        obj_feat = Tensor(rng_for(16).normal(size=(16, 50, 161)))
        post, act, event = tiny_model.dec1.sed(obj_feat)
        assert post.data.sum() == pytest.approx(1.0, abs=1e-6)
        assert np.all(post.data >= 0)
        assert np.all((act.data >= 0) & (act.data <= 1))
        assert np.all((event.data >= 0) & (event.data <= 1))


class TestDoaDecoder:
    def test_output_shape_and_range(self, paper_model):
        obj_feat = Tensor(rng_for(17).normal(size=(64, 200, 321)) * 0.1)
        out = paper_model.dec1.doa(obj_feat)
        assert out.shape == (40, 3)
        assert np.all(np.abs(out.data) < 1.0)

    def test_norm_capped_at_unit_ball(self, tiny_model):
        doa_dec = tiny_model.dec1.doa
        saved = doa_dec.head.w.data.copy(), doa_dec.head.b.data.copy()
        doa_dec.head.w.data = rng_for(50).normal(size=doa_dec.head.w.shape) * 5.0
        doa_dec.head.b.data = np.array([0.9, 0.9, 0.9])
        try:
            out = doa_dec(Tensor(rng_for(51).normal(size=(16, 50, 161))))
            norms = np.linalg.norm(out.data, axis=1)
            assert norms.max() <= 1.0 + 1e-9
        finally:
            doa_dec.head.w.data, doa_dec.head.b.data = saved

    def test_zero_head_weights_read_as_inactive(self, tiny_model):
        from asakit import metrics as mx
        doa_dec = tiny_model.dec1.doa
        saved = doa_dec.head.w.data.copy(), doa_dec.head.b.data.copy()
        doa_dec.head.w.data[:] = 0.0
        doa_dec.head.b.data[:] = 0.0
        try:
            stream = doa_dec(Tensor(rng_for(18).normal(size=(16, 50, 161))))
            np.testing.assert_array_equal(stream.data, 0.0)
            events = mx.read_out_events(np.ones((1, 2)), np.ones((1, 10)) * 0.9,
                                        stream.data[None])
            assert all(len(f) == 0 for f in events)
        finally:
            doa_dec.head.w.data, doa_dec.head.b.data = saved


class TestTcm:
    def fake_estimate(self, cfg, seed=19):
        rng = rng_for(seed)
        j, t, c = cfg.n_slots, cfg.t_out, cfg.n_classes
        return mdl.AsaEstimate(
            class_posterior=Tensor(np.full((j, c), 1.0 / c)),
            activation=Tensor(rng.uniform(size=(j, t))),
            event_map=Tensor(rng.uniform(size=(j, t, c))),
            doa=Tensor(rng.normal(size=(j, t, 3)) * 0.5),
            direct_wav=Tensor(np.zeros((j, 2, 8))), reverb_wav=None,
            noise_wav=None)

    def test_paper_scale_clue_shape(self):
        cfg = mdl.ModelConfig.paper()
        tcm = mdl.Tcm(cfg, rng_for(20))
        clue, maps = tcm(self.fake_estimate(cfg))
        assert clue.shape == (64, 200)
        assert maps[(0, "sed_query")].shape == (40, 40)
        np.testing.assert_allclose(maps[(0, "sed_query")].sum(axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(maps[(2, "doa_query")].sum(axis=1), 1.0, atol=1e-12)

    def test_single_branch_ablations(self):
        for flags in ({"tcm_doa_branch": False}, {"tcm_sed_branch": False}):
            cfg = mdl.ModelConfig.tiny(**flags)
            tcm = mdl.Tcm(cfg, rng_for(21))
            clue, maps = tcm(self.fake_estimate(cfg))
            assert clue.shape == (cfg.d_clue, cfg.n_frames)
            branches = {k[1] for k in maps}
            assert len(branches) == 1

    def test_cross_object_mode_map_shape(self):
        cfg = mdl.ModelConfig.tiny(tcm_cross_object=True)
        tcm = mdl.Tcm(cfg, rng_for(22))
        _, maps = tcm(self.fake_estimate(cfg))
        assert maps[(0, "sed_query")].shape == (10, 20)  # keys span both objects


class TestFilmFusion:
    def test_zero_init_heads_are_identity(self):
        cfg = mdl.ModelConfig.tiny()
        film = mdl.FilmFusion(cfg, rng_for(23))
        z = rng_for(24).normal(size=(16, 50, 161))
        clue = rng_for(25).normal(size=(16, 50))
        out = film(Tensor(z), Tensor(clue))
        np.testing.assert_array_equal(out.data, z)

    def test_constant_beta_broadcasts_over_frequency(self):
        cfg = mdl.ModelConfig.tiny()
        film = mdl.FilmFusion(cfg, rng_for(26))
        film.beta_head.b.data[:] = 2.5
        z = Tensor(rng_for(27).normal(size=(16, 50, 161)))
        gamma_minus_one_zero = film(ad.mul(z, 0.0), Tensor(np.zeros((16, 50))))
        np.testing.assert_allclose(gamma_minus_one_zero.data, 2.5, atol=1e-12)
        assert np.ptp(gamma_minus_one_zero.data, axis=2).max() == 0.0

    def test_gradient_wrt_heads(self):
        cfg = mdl.ModelConfig.micro()
        film = mdl.FilmFusion(cfg, rng_for(28))
        z = Tensor(rng_for(29).normal(size=(8, 25, 81)))
        clue = Tensor(rng_for(30).normal(size=(8, 25)))
        probe = Tensor(rng_for(31).normal(size=(8, 25, 81)))

        def run():
            return ad.tmean(ad.mul(film(z, clue), probe))

        params = [film.gamma_head.w, film.beta_head.w, film.beta_head.b]
        assert ad.finite_difference_check(run, params, eps=1e-5, max_coords=12) < 1e-5


class TestForward:
    def test_tiny_forward_shapes(self, tiny_model):
        cfg = tiny_model.cfg
        x = rng_for(32).normal(size=(2, 8000)) * 0.1
        state = tiny_model.forward(x)
        for est in (state.net1, state.net2):
            assert est.class_posterior.shape == (2, 13)
            assert est.activation.shape == (2, 10)
            assert est.event_map.shape == (2, 10, 13)
            assert est.doa.shape == (2, 10, 3)
            assert est.direct_wav.shape == (2, 2, 8000)
            assert est.reverb_wav.shape == (2, 2, 8000)
            assert est.noise_wav.shape == (2, 8000)
        np.testing.assert_allclose(state.net1.class_posterior.data.sum(axis=1),
                                   1.0, atol=1e-6)

    def test_paper_forward_shape_contract(self, paper_model):
        x = rng_for(33).normal(size=(4, 64000)) * 0.1
        est = paper_model.forward_net1(x).net1
        assert est.class_posterior.shape == (5, 13)
        assert est.activation.shape == (5, 40)
        assert est.event_map.shape == (5, 40, 13)
        assert est.doa.shape == (5, 40, 3)
        assert est.direct_wav.shape == (5, 4, 64000)
        assert est.reverb_wav.shape == (5, 4, 64000)
        assert est.noise_wav.shape == (4, 64000)

    def test_wrong_input_shape_rejected(self, tiny_model):
        with pytest.raises(ShapeError):
            tiny_model.forward_net1(np.zeros((3, 8000)))
        with pytest.raises(ShapeError):
            tiny_model.forward_net1(np.zeros((2, 4000)))

    def test_determinism_same_seed_bitwise(self):
        cfg = mdl.ModelConfig.micro()
        x = rng_for(34).normal(size=(2, cfg.n_samples)) * 0.1

        def run():
            model = mdl.AsaModel(cfg, seed=7)
            state = model.forward(x)
            return (state.net1.direct_wav.data.tobytes(),
                    state.net2.class_posterior.data.tobytes())

        assert run() == run()

    def test_slot_permutation_coherence(self, tiny_model):
        cfg = tiny_model.cfg
        x = rng_for(35).normal(size=(2, 8000)) * 0.1
        with_noise = tiny_model.splitter1(tiny_model.encode(Tensor(x))[0])
        est_a = tiny_model.dec1.decode(with_noise, 8000)
        perm = np.array([1, 0])
        permuted = ad.concat([ad.stack([with_noise[int(p)] for p in perm]),
                              with_noise[cfg.n_slots:]], axis=0)
        est_b = tiny_model.dec1.decode(permuted, 8000)
        for name in ("class_posterior", "activation", "event_map", "doa",
                     "direct_wav", "reverb_wav"):
            a = getattr(est_a, name).data
            b = getattr(est_b, name).data
            np.testing.assert_array_equal(b, a[perm])
        np.testing.assert_array_equal(est_a.noise_wav.data, est_b.noise_wav.data)

    def test_gradient_reaches_window_predictor(self):
        model = mdl.AsaModel(mdl.ModelConfig.micro(), seed=21)
        # move the heads off their zero init, where the conv gradient would
        # legitimately vanish
        head_rng = rng_for(41)
        model.predictor.head_mu.w.data = head_rng.normal(size=(8, 1)) * 0.05
        model.predictor.head_sigma.w.data = head_rng.normal(size=(8, 1)) * 0.05
        x = head_rng.normal(size=(2, model.cfg.n_samples)) * 0.1
        with GradGraph() as g:
            state = model.forward_net1(x)
            loss = ad.tsum(ad.mul(state.net1.direct_wav, state.net1.direct_wav))
            grads = g.backward(loss)
        for p in (model.predictor.head_mu.w, model.predictor.head_sigma.w,
                  model.predictor.conv_w):
            assert np.linalg.norm(grads[p]) > 0


class TestNet2:
    def test_identity_configuration_matches_net1(self):
        cfg = mdl.ModelConfig.tiny()
        model = mdl.AsaModel(cfg, seed=11)
        model.init_net2_from_net1()
        x = rng_for(37).normal(size=(2, 8000)) * 0.1
        state = model.forward(x)
        for name in ("class_posterior", "activation", "event_map", "doa",
                     "direct_wav", "reverb_wav", "noise_wav"):
            a = getattr(state.net1, name).data
            b = getattr(state.net2, name).data
            assert np.array_equal(a, b), name

    def test_net2_without_coi_rejected(self):
        cfg = mdl.ModelConfig.micro(use_coi=False)
        model = mdl.AsaModel(cfg, seed=0)
        x = rng_for(38).normal(size=(2, cfg.n_samples))
        state = model.forward_net1(x)
        with pytest.raises(ConfigError):
            model.forward_net2(state)

    def test_parameter_partition(self, tiny_model):
        all_names = set(tiny_model.named_parameters())
        net1 = set(tiny_model.net1_parameters())
        net2 = set(tiny_model.net2_parameters())
        assert net1 | net2 == all_names
        assert not (net1 & net2)
        assert any(n.startswith("tcm/") for n in net2)
        assert any(n.startswith("dec2/") for n in net2)
        assert any(n.startswith("splitter1/") for n in net1)


class TestAblationStructure:
    def test_flags_alter_graph(self):
        base = mdl.ModelConfig.micro()
        x = rng_for(39).normal(size=(2, base.n_samples)) * 0.1
        no_noise = mdl.AsaModel(mdl.ModelConfig.micro(use_noise_decoder=False), seed=1)
        assert no_noise.dec1.noise is None
        assert no_noise.forward_net1(x).net1.noise_wav is None
        merged = mdl.AsaModel(mdl.ModelConfig.micro(split_direct_reverb=False), seed=1)
        assert merged.dec1.reverb is None
        assert merged.forward_net1(x).net1.reverb_wav is None
        fixed = mdl.AsaModel(mdl.ModelConfig.micro(dynamic_window="off"), seed=1)
        assert fixed.predictor is None
        assert fixed.forward_net1(x).window_params is None
        no_coi = mdl.AsaModel(mdl.ModelConfig.micro(use_coi=False), seed=1)
        assert not no_coi.net2_parameters()

    def test_time_invariant_window_constant_over_frames(self):
        cfg = mdl.ModelConfig.micro(dynamic_window="time_invariant")
        model = mdl.AsaModel(cfg, seed=2)
        model.predictor.head_mu.w.data[:] = 0.01
        x = rng_for(40).normal(size=(2, cfg.n_samples))
        wp = model.forward_net1(x).window_params
        assert np.ptp(wp.mu.data, axis=1).max() == 0.0
