"""Architectures, normalization, output scaling, and checkpoints."""
import numpy as np
import pytest

from plateheat import autodiff as ad
from plateheat.autodiff import CH_DT, CH_DX, CH_DXX, CH_VAL, NCH, Tape
from plateheat.model import (ARCHITECTURES, Normalizer, ScalingConfig,
                             build_raw_output, forward_jets, init_params,
                             load_params, predict_temperatures, raw_values,
                             save_params, scale_factor, scale_jet_values,
                             tape_scaled_channels)
from plateheat.physics import (DegenerateScale, MaterialSpace, ProcessConfig,
                               rosenthal_tmax)

PROCESS = ProcessConfig()
SPACE = MaterialSpace()
NORM = Normalizer.for_problem(PROCESS, SPACE)


def _random_inputs(rng, n):
    pts = np.column_stack([
        rng.uniform(0, PROCESS.extent[0], n),
        rng.uniform(0, PROCESS.extent[1], n),
        rng.uniform(0, PROCESS.extent[2], n),
        rng.uniform(0, PROCESS.t_end, n),
    ])
    lam = SPACE.sample(rng, n)
    return pts, lam


class TestParameterCounts:
    # published sizes: monolithic without/with material inputs, decoupled
    EXPECTED = {"npinn": 11341, "ppinn": 11521, "decoupled": 9641}

    @pytest.mark.parametrize("arch", ARCHITECTURES)
    def test_exact_count(self, arch):
        net = init_params(arch, seed=0)
        assert net.n_params == self.EXPECTED[arch]

    def test_aux_head_adds_its_own_parameters(self):
        base = init_params("decoupled", seed=0)
        aux = init_params("decoupled", seed=0, with_scale_aux=True)
        # 3->20->1 head: (3*20 + 20) + (20*1 + 1)
        assert aux.n_params - base.n_params == 80 + 21

    def test_film_variant_differs(self):
        film = init_params("decoupled", seed=0, fusion="film")
        assert film.n_params != self.EXPECTED["decoupled"]

    def test_unknown_architecture_rejected(self):
        with pytest.raises(ValueError):
            init_params("transformer", seed=0)

    def test_init_deterministic_per_seed(self):
        a = init_params("decoupled", seed=5).flatten()
        b = init_params("decoupled", seed=5).flatten()
        c = init_params("decoupled", seed=6).flatten()
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)


class TestNormalizer:
    def test_coords_round_trip(self):
        rng = np.random.default_rng(0)
        pts, _ = _random_inputs(rng, 50)
        back = NORM.coords_inverse(NORM.coords_forward(pts))
        assert np.allclose(back, pts, atol=1e-12)

    def test_forward_range_is_unit_box(self):
        corners = np.array([[0, 0, 0, 0],
                            list(PROCESS.extent) + [PROCESS.t_end]])
        out = NORM.coords_forward(corners)
        assert np.allclose(out[0], -1.0)
        assert np.allclose(out[1], 1.0)

    def test_lam_round_trip(self):
        rng = np.random.default_rng(1)
        lam = SPACE.sample(rng, 20)
        assert np.allclose(NORM.lam_inverse(NORM.lam_forward(lam)), lam)

    def test_input_jet_carries_chain_rule_constants(self):
        pts = np.array([[0.01, 0.002, 0.003, 1.0]])
        jet = NORM.input_jet(pts)
        # d(x_norm)/dx = 2/Lx etc.; time sits in the last input column
        assert jet[0, CH_DX, 0] == pytest.approx(2.0 / PROCESS.extent[0])
        assert jet[0, CH_DT, 3] == pytest.approx(2.0 / PROCESS.t_end)
        assert np.all(jet[:, 5:, :] == 0.0)

    def test_lam_jet_has_no_derivatives(self):
        jet = NORM.lam_jet(np.array([[4000.0, 500.0, 10.0]]))
        assert np.all(jet[:, 1:, :] == 0.0)


class TestForward:
    @pytest.mark.parametrize("arch", ARCHITECTURES)
    def test_output_shape(self, arch):
        rng = np.random.default_rng(2)
        pts, lam = _random_inputs(rng, 13)
        net = init_params(arch, seed=1)
        raw, aux = forward_jets(net, NORM.input_jet(pts),
                                None if arch == "npinn" else NORM.lam_jet(lam))
        assert raw.shape == (13, NCH, 1)
        assert aux is None

    def test_material_branch_is_value_only(self):
        """Derivative channels coming out of the material encoder are exactly
        zero, so the decoupled forward agrees with a per-point loop in which
        material inputs are plain constants."""
        rng = np.random.default_rng(3)
        pts, lam = _random_inputs(rng, 6)
        net = init_params("decoupled", seed=2)
        raw, _ = forward_jets(net, NORM.input_jet(pts), NORM.lam_jet(lam))
        vals = raw_values(net, NORM.coords_forward(pts), NORM.lam_forward(lam))
        assert np.allclose(raw[:, CH_VAL, 0], vals, atol=1e-14)

    def test_film_fusion_forward_and_gradient(self):
        rng = np.random.default_rng(4)
        pts, lam = _random_inputs(rng, 8)
        net = init_params("decoupled", seed=3, fusion="film")
        coord_jet, lam_jet = NORM.input_jet(pts), NORM.lam_jet(lam)

        def loss_fn(params):
            tape = Tape(params)
            n2 = net.copy()
            n2.params = params
            out, _ = build_raw_output(tape, n2, coord_jet, lam_jet)
            v = tape.channel(out, CH_VAL)
            loss = tape.mean(v * v)
            return loss.value, tape.backward(loss)

        assert ad.fd_check(loss_fn, net.params, n_directions=5, step=1e-5,
                           rng=np.random.default_rng(0)) < 1e-6

    def test_ppinn_requires_material(self):
        net = init_params("ppinn", seed=0)
        with pytest.raises(ValueError):
            forward_jets(net, NORM.input_jet(np.zeros((1, 4))))


class TestScaling:
    def test_config_validation(self):
        with pytest.raises(ValueError):
            ScalingConfig(mode="linear")
        with pytest.raises(ValueError):
            ScalingConfig(kappa=0.5)
        with pytest.raises(ValueError):
            ScalingConfig(epsilon=0.0)

    def test_physics_guided_factor(self):
        cfg = ScalingConfig()
        lam = np.array([4430.0, 560.0, 6.7])
        assert scale_factor(lam, cfg, PROCESS) == pytest.approx(
            1.5 * rosenthal_tmax(lam, PROCESS))

    def test_softplus_only_factor_is_one(self):
        assert scale_factor(None, ScalingConfig(mode="softplus_only"),
                            PROCESS) == 1.0

    def test_degenerate_scale_rejected(self):
        with pytest.raises(DegenerateScale):
            scale_factor(np.array([4000.0, 500.0, 0.0]),
                         ScalingConfig(), PROCESS)

    def test_floor_and_ceiling(self):
        """T stays within [T_inf + S*eps, ceiling] whatever the raw output."""
        cfg = ScalingConfig()
        lam = np.array([[4430.0, 560.0, 6.7]])
        for u in (-1e3, 0.0, 1e3):
            jet = np.zeros((1, NCH, 1))
            jet[0, CH_VAL, 0] = u
            ch = scale_jet_values(jet, lam, cfg, PROCESS)
            s = scale_factor(lam, cfg, PROCESS)
            floor = PROCESS.t_infinity + s * cfg.epsilon
            assert floor - 1e-9 <= ch["T"][0] <= cfg.clip_ceiling

    def test_raw_mode_passthrough(self):
        rng = np.random.default_rng(5)
        jet = rng.standard_normal((4, NCH, 1))
        ch = scale_jet_values(jet, None, ScalingConfig(mode="raw"), PROCESS)
        assert np.array_equal(ch["T"], jet[:, CH_VAL, 0])
        assert np.array_equal(ch["Txx"], jet[:, CH_DXX, 0])

    def test_chain_rule_against_fd(self):
        """Scaled Tt/Txx channels equal numerical derivatives of the scaled
        value channel along a raw-output sweep."""
        cfg = ScalingConfig()
        lam = np.array([[8000.0, 500.0, 16.0]])
        s = scale_factor(lam, cfg, PROCESS)

        def T_of_u(u):
            jet = np.zeros((1, NCH, 1))
            jet[0, CH_VAL, 0] = u
            return scale_jet_values(jet, lam, cfg, PROCESS)["T"][0]

        u0, du, h = 0.37, 0.81, 1e-6
        jet = np.zeros((1, NCH, 1))
        jet[0, CH_VAL, 0] = u0
        jet[0, CH_DT, 0] = du
        ch = scale_jet_values(jet, lam, cfg, PROCESS)
        fd = (T_of_u(u0 + h * du) - T_of_u(u0 - h * du)) / (2 * h)
        assert ch["Tt"][0] == pytest.approx(fd, rel=1e-8)

    @pytest.mark.parametrize("mode,aux", [("physics_guided", False),
                                          ("learned_tmax", True),
                                          ("softplus_only", False),
                                          ("fixed_tmax", False),
                                          ("raw", False)])
    def test_tape_and_numeric_paths_agree_bitwise(self, mode, aux):
        rng = np.random.default_rng(6)
        pts, lam = _random_inputs(rng, 9)
        net = init_params("decoupled", seed=4, with_scale_aux=aux)
        cfg = ScalingConfig(mode=mode)
        coord_jet, lam_jet = NORM.input_jet(pts), NORM.lam_jet(lam)
        tape = Tape(net.params)
        raw_ref, aux_ref = build_raw_output(tape, net, coord_jet, lam_jet)
        tape_ch = tape_scaled_channels(tape, raw_ref, aux_ref, lam, cfg, PROCESS)
        raw, aux_vals = forward_jets(net, coord_jet, lam_jet)
        num_ch = scale_jet_values(raw, lam, cfg, PROCESS, aux_vals)
        for name in tape_ch:
            assert np.array_equal(tape_ch[name].value, num_ch[name]), name

    def test_learned_scale_requires_aux(self):
        jet = np.zeros((1, NCH, 1))
        with pytest.raises(ValueError):
            scale_jet_values(jet, None, ScalingConfig(mode="learned_tmax"),
                             PROCESS)


class TestPredict:
    def test_matches_scaled_channels(self):
        rng = np.random.default_rng(7)
        pts, lam = _random_inputs(rng, 31)
        net = init_params("decoupled", seed=5)
        cfg = ScalingConfig()
        T = predict_temperatures(net, pts, lam, cfg, PROCESS, NORM)
        raw, _ = forward_jets(net, NORM.input_jet(pts), NORM.lam_jet(lam))
        expect = scale_jet_values(raw, lam, cfg, PROCESS)["T"]
        assert np.allclose(T, expect, rtol=1e-12)

    def test_single_material_broadcast(self):
        rng = np.random.default_rng(8)
        pts, _ = _random_inputs(rng, 5)
        lam = np.array([4430.0, 560.0, 6.7])
        net = init_params("decoupled", seed=6)
        T = predict_temperatures(net, pts, lam, ScalingConfig(), PROCESS, NORM)
        assert T.shape == (5,)
        assert np.all(np.isfinite(T))

    def test_chunking_invariant(self):
        rng = np.random.default_rng(9)
        pts, lam = _random_inputs(rng, 40)
        net = init_params("decoupled", seed=7)
        a = predict_temperatures(net, pts, lam, ScalingConfig(), PROCESS, NORM,
                                 chunk=7)
        b = predict_temperatures(net, pts, lam, ScalingConfig(), PROCESS, NORM)
        # rows are independent, but BLAS kernels may round differently per
        # chunk shape, so equality is near-exact rather than bitwise
        assert np.allclose(a, b, rtol=1e-12, atol=0.0)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        net = init_params("decoupled", seed=8, with_scale_aux=True)
        path = tmp_path / "params.ckpt"
        save_params(net, path)
        back = load_params(path)
        assert back.arch == net.arch
        assert back.fusion == net.fusion
        assert back.has_scale_aux == net.has_scale_aux
        assert np.array_equal(back.flatten(), net.flatten())

    def test_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"not a checkpoint\n\x00\x01")
        with pytest.raises(ValueError):
            load_params(path)

    def test_rejects_truncated_payload(self, tmp_path):
        net = init_params("npinn", seed=9)
        path = tmp_path / "params.ckpt"
        save_params(net, path)
        data = path.read_bytes()
        path.write_bytes(data[:-16])
        with pytest.raises(ValueError):
            load_params(path)
