"""Gradient-engine contracts: the surrogate, BPTT vs finite differences,
the GP-only reduction, and the optimizer."""

import numpy as np
import pytest

from hpsnn.core import (LayerState, Network, Rho, Rule, SimConstants, forward)
from hpsnn.grad import (GradBundle, OptimizerState, adam_step, bptt,
                        fd_gradient, max_rel_error, meta_params, mse_loss,
                        surrogate_deriv, weight_params)
from hpsnn.plasticity import StdpParams

from reference_lif import lif_bptt, lif_forward
from test_core import random_net

C = SimConstants(dt=1.0, T=4, k_u=0.6, v_th=0.3, tau_w=40.0, a=0.5)


class TestSurrogate:
    def test_center_value(self):
        assert surrogate_deriv(0.3, C) == pytest.approx(2.0)

    def test_outside_window_zero(self):
        assert surrogate_deriv(0.3 + 0.5, C) == 0.0
        assert surrogate_deriv(0.3 - 0.5, C) == 0.0

    def test_boundary_inclusive(self):
        # Exactly representable threshold so the closed interval is testable.
        c = SimConstants(dt=1.0, T=4, k_u=0.6, v_th=0.25, tau_w=40.0, a=0.5)
        assert surrogate_deriv(0.0, c) == pytest.approx(2.0)
        assert surrogate_deriv(0.5, c) == pytest.approx(2.0)
        assert surrogate_deriv(np.nextafter(0.5, 1.0), c) == 0.0

    def test_vectorized(self):
        u = np.array([0.3, 10.0, 0.05])
        assert np.allclose(surrogate_deriv(u, C), [2.0, 0.0, 2.0])


def rate_soft_setup(rng, dims, T, rule=Rule.HEBBIAN, stdp=None, clamp=None):
    c = SimConstants(dt=1.0, T=T, k_u=0.6, v_th=0.3, tau_w=40.0, a=0.5)
    net = Network.init(dims, c, rng, plastic=True, rho=Rho.SIGMOID, rule=rule,
                       stdp=stdp)
    for l in net.layers:
        l.meta.alpha = rng.uniform(0.05, 0.25, l.post)
        l.meta.eta = rng.uniform(0.05, 0.25, l.pre)
        l.meta.beta = rng.uniform(-0.15, 0.1, l.post)
    x = (rng.random((T, dims[0])) < 0.5).astype(float)
    target = np.zeros(dims[-1])
    target[rng.integers(0, dims[-1])] = 1.0

    def loss_fn(tape):
        return mse_loss(tape.layers[-1].s.mean(axis=0), target)[0]

    def douts(tape):
        loss, dscores = mse_loss(tape.layers[-1].s.mean(axis=0), target)
        return np.repeat(dscores[None] / tape.steps, tape.steps, axis=0)

    return net, x, loss_fn, douts, clamp


class TestBpttVsFiniteDifferences:
    def test_small_hebbian_net(self):
        rng = np.random.default_rng(0)
        net, x, loss_fn, douts, _ = rate_soft_setup(rng, [3, 4, 2], 4)
        tape = forward(net, x, soft=True)
        analytic = bptt(net, tape, d_out_s=douts(tape))
        numeric = fd_gradient(net, x, loss_fn, eps=1e-5)
        assert max_rel_error(analytic, numeric) < 1e-6

    def test_stdp_net(self):
        rng = np.random.default_rng(1)
        sp = StdpParams(tau_s=15.0, A_pre=0.15, A_post=0.08)
        net, x, loss_fn, douts, _ = rate_soft_setup(rng, [3, 4, 2], 4,
                                                    rule=Rule.STDP, stdp=sp)
        tape = forward(net, x, soft=True)
        analytic = bptt(net, tape, d_out_s=douts(tape))
        numeric = fd_gradient(net, x, loss_fn, eps=1e-5)
        assert max_rel_error(analytic, numeric) < 1e-6
        assert analytic.dA_pre[0] is not None

    def test_label_clamp_net(self):
        rng = np.random.default_rng(2)
        clamp = np.array([1.0, 0.0])
        net, x, loss_fn, douts, _ = rate_soft_setup(rng, [3, 2], 4,
                                                    rule=Rule.LABEL_CLAMP)
        tape = forward(net, x, soft=True, clamp=clamp)
        analytic = bptt(net, tape, d_out_s=douts(tape))

        def loss_clamped(tape):
            return loss_fn(tape)

        numeric = fd_gradient(net, x, loss_clamped, eps=1e-5, clamp=clamp)
        assert max_rel_error(analytic, numeric) < 1e-6

    def test_membrane_loss_path(self):
        rng = np.random.default_rng(3)
        net, x, _, _, _ = rate_soft_setup(rng, [3, 4, 2], 5)
        target = np.array([1.0, 0.0])

        def loss_fn(tape):
            return mse_loss(tape.layers[-1].u[-1], target)[0]

        tape = forward(net, x, soft=True)
        _, du = mse_loss(tape.layers[-1].u[-1], target)
        d_out_u = np.zeros((tape.steps, 2))
        d_out_u[-1] = du
        analytic = bptt(net, tape, d_out_u=d_out_u)
        numeric = fd_gradient(net, x, loss_fn, eps=1e-5)
        assert max_rel_error(analytic, numeric) < 1e-6


class TestBpttStructure:
    def test_zero_loss_grad_gives_zero_bundle(self):
        rng = np.random.default_rng(5)
        net = random_net(rng, [3, 4, 2], C)
        x = (rng.random((4, 3)) < 0.5).astype(float)
        tape = forward(net, x)
        zeros = np.zeros((tape.steps, 2))
        bundle = bptt(net, tape, d_out_u=zeros, d_out_s=zeros)
        for arr in bundle.dw + bundle.dalpha + bundle.deta + bundle.dbeta:
            assert np.all(arr == 0.0)

    def test_linear_in_output_gradient(self):
        rng = np.random.default_rng(6)
        net = random_net(rng, [3, 4, 2], C)
        x = (rng.random((4, 3)) < 0.5).astype(float)
        tape = forward(net, x)
        d = rng.normal(size=(tape.steps, 2))
        b1 = bptt(net, tape, d_out_s=d)
        b3 = bptt(net, tape, d_out_s=3.0 * d)
        for a, b in zip(b1.dw + b1.dalpha + b1.deta + b1.dbeta,
                        b3.dw + b3.dalpha + b3.deta + b3.dbeta):
            assert np.allclose(3.0 * a, b, atol=1e-12)

    def test_eta_beta_gradients_zero_without_pre_spikes(self):
        rng = np.random.default_rng(7)
        net = random_net(rng, [3, 4, 2], C)
        x = np.zeros((4, 3))
        tape = forward(net, x)
        d = rng.normal(size=(tape.steps, 2))
        bundle = bptt(net, tape, d_out_s=d)
        # Layer 0 saw no pre-activity at all; its trace never moved.
        assert np.all(bundle.deta[0] == 0.0)
        assert np.all(bundle.dbeta[0] == 0.0)
        assert np.all(bundle.dalpha[0] == 0.0)

    def test_eta_gradient_zero_for_silent_pre_neurons(self):
        rng = np.random.default_rng(8)
        net = random_net(rng, [4, 3], C)
        x = (rng.random((4, 4)) < 0.7).astype(float)
        x[:, 2] = 0.0  # neuron 2 never fires
        tape = forward(net, x)
        d = rng.normal(size=(tape.steps, 3))
        bundle = bptt(net, tape, d_out_s=d)
        assert bundle.deta[0][2] == 0.0
        assert np.any(bundle.deta[0] != 0.0)

    def test_gp_mask_zeroes_dw(self):
        rng = np.random.default_rng(9)
        net = random_net(rng, [4, 3], C)
        mask = rng.random((3, 4)) < 0.5
        net.layers[0].params.gp_mask = mask
        x = (rng.random((4, 4)) < 0.7).astype(float)
        tape = forward(net, x)
        bundle = bptt(net, tape, d_out_s=rng.normal(size=(tape.steps, 3)))
        assert np.all(bundle.dw[0][~mask] == 0.0)


class TestGpOnlyReduction:
    def test_alpha_zero_bptt_matches_reference_bitwise(self):
        rng = np.random.default_rng(10)
        c = SimConstants(dt=1.0, T=5, k_u=0.6, v_th=0.3, tau_w=40.0, a=0.5)
        net = random_net(rng, [4, 6, 3], c)
        for l in net.layers:
            l.meta.alpha = np.zeros(l.post)
        x = (rng.random((5, 4)) < 0.5).astype(float)
        d_out_s = rng.normal(size=(5, 3))

        tape = forward(net, x)
        bundle = bptt(net, tape, d_out_s=d_out_s)

        ws = [l.params.w for l in net.layers]
        ref_tape = lif_forward(ws, c, x)
        for li in range(2):
            assert np.array_equal(tape.layers[li].u,
                                  np.stack(ref_tape[li]["u"]))
            assert np.array_equal(tape.layers[li].s,
                                  np.stack(ref_tape[li]["s"]))
        ref_dws = lif_bptt(ws, ref_tape, c, d_out_s)
        for got, want in zip(bundle.dw, ref_dws):
            assert np.array_equal(got, want)


class TestFdGradient:
    def test_eps_must_be_positive(self):
        rng = np.random.default_rng(11)
        net = random_net(rng, [2, 2], C)
        with pytest.raises(ValueError):
            fd_gradient(net, np.zeros((4, 2)), lambda t: 0.0, eps=0.0)

    def test_quadratic_toy_exact(self):
        # Loss u(T)^2 of a leak-free single neuron is quadratic in w.
        rng = np.random.default_rng(12)
        c = SimConstants(dt=1.0, T=1, k_u=1.0, v_th=10.0, tau_w=40.0, a=0.5)
        net = Network.init([1, 1], c, rng, plastic=False)
        net.layers[0].params.w = np.array([[0.7]])
        x = np.ones((1, 1))

        def loss_fn(tape):
            return float(tape.layers[-1].u[-1, 0] ** 2)

        got = fd_gradient(net, x, loss_fn, eps=1e-5, soft=False)
        g1 = c.gp_decay(1)
        want = 2.0 * (0.7 * g1) * g1  # d/dw (w*g)^2
        assert got.dw[0][0, 0] == pytest.approx(want, rel=1e-9)


class TestAdam:
    def test_zero_grads_leave_params_and_bump_counter(self):
        p = {"w": np.array([1.0, -2.0])}
        st = OptimizerState.for_params(p, lr=0.1)
        out, st = adam_step(p, {"w": np.zeros(2)}, st)
        assert np.array_equal(out["w"], p["w"])
        assert st.t == 1

    def test_first_step_closed_form(self):
        g = np.array([0.3, -7.0, 1e-4])
        p = {"w": np.zeros(3)}
        st = OptimizerState.for_params(p, lr=0.01)
        out, _ = adam_step(p, {"w": g}, st)
        want = -0.01 * g / (np.abs(g) + st.eps)
        assert np.allclose(out["w"], want, atol=1e-15)

    def test_masked_entries_never_move(self):
        rng = np.random.default_rng(13)
        net = random_net(rng, [4, 3], C)
        mask = rng.random((3, 4)) < 0.4
        net.layers[0].params.gp_mask = mask
        frozen = net.layers[0].params.w[~mask].copy()
        st = OptimizerState.for_params(weight_params(net), lr=0.05)
        x = (rng.random((4, 4)) < 0.6).astype(float)
        for _ in range(5):
            tape = forward(net, x)
            bundle = bptt(net, tape, d_out_s=rng.normal(size=(tape.steps, 3)))
            grads = {"w0": bundle.dw[0]}
            new, st = adam_step(weight_params(net), grads, st)
            net.layers[0].params.w = new["w0"]
        assert np.array_equal(net.layers[0].params.w[~mask], frozen)

    def test_param_dicts_cover_expected_names(self):
        rng = np.random.default_rng(14)
        net = random_net(rng, [3, 4, 2], C)
        assert set(weight_params(net)) == {"w0", "w1"}
        assert set(meta_params(net)) == {"alpha0", "eta0", "beta0",
                                         "alpha1", "eta1", "beta1"}
