import numpy as np
import pytest

from copulaknockoffs import knockoffs as ko
from copulaknockoffs.bicop import CopulaFamily
from copulaknockoffs.dvine import compute_pits_with_deriv
from copulaknockoffs.exceptions import DomainError
from copulaknockoffs.knockoffs import KnockoffConfig, KnockoffKind, KnockoffMachine
from copulaknockoffs.margins import MarginalModel, MarginKind
from copulaknockoffs.tune import (
    TuneConfig,
    loss_and_gradient,
    reference_bandwidth,
    sgd_tune,
)


def toeplitz_corr(d, rho):
    idx = np.arange(d)
    return rho ** np.abs(idx[:, None] - idx[None, :])


def gaussian_sample(n, sigma, seed):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, sigma.shape[0])) @ np.linalg.cholesky(sigma).T


@pytest.fixture(scope="module")
def fitted_machine():
    d = 3
    x_train = gaussian_sample(2000, toeplitz_corr(d, 0.6), seed=0)
    cfg = KnockoffConfig(families=((CopulaFamily.GAUSSIAN, 0),))
    return ko.fit(KnockoffKind.VINE_COPULA, x_train, cfg), x_train


def _with_edge_theta(machine, target, theta):
    cop = machine.vine.copula(*target)
    return KnockoffMachine(machine.kind, machine.d, margins=machine.margins,
                           order=machine.order,
                           vine=machine.vine.with_copula(*target, cop.with_theta(theta)))


class TestLossAndGradient:
    def test_gradient_matches_finite_differences(self, fitted_machine):
        machine, x_train = fitted_machine
        d = machine.d
        batch = x_train[:64]
        w_tilde = np.random.default_rng(1).uniform(size=(64, d))
        bw = reference_bandwidth(batch)
        targets = [t for t in machine.vine.parametric_edges(tree_range=(d, 2 * d - 1))
                   if abs(machine.vine.copula(*t).theta) < 0.99]
        loss, grads = loss_and_gradient(machine, batch, w_tilde,
                                        targets=targets, bandwidth=bw)
        assert np.isfinite(loss)
        s = 1e-4
        for target in targets:
            theta = machine.vine.copula(*target).theta
            up = _with_edge_theta(machine, target, theta + s)
            dn = _with_edge_theta(machine, target, theta - s)
            lu, _ = loss_and_gradient(up, batch, w_tilde, targets=[target], bandwidth=bw)
            ld, _ = loss_and_gradient(dn, batch, w_tilde, targets=[target], bandwidth=bw)
            fd = (lu - ld) / (2 * s)
            assert grads[target] == pytest.approx(fd, rel=5e-2, abs=1e-8)

    def test_pit_derivative_zero_for_upper_tree_targets(self, fitted_machine):
        machine, x_train = fitted_machine
        d = machine.d
        u = np.random.default_rng(2).uniform(0.1, 0.9, (20, d))
        _, wc = compute_pits_with_deriv(machine.vine, u, (1, d + 1))
        np.testing.assert_allclose(wc, 0.0, atol=1e-15)

    def test_deterministic_given_fixed_uniforms(self, fitted_machine):
        machine, x_train = fitted_machine
        batch = x_train[:32]
        w_tilde = np.random.default_rng(3).uniform(size=(32, machine.d))
        out1 = loss_and_gradient(machine, batch, w_tilde)
        out2 = loss_and_gradient(machine, batch, w_tilde)
        assert out1[0] == out2[0]
        assert out1[1] == out2[1]

    def test_independent_copy_loss_within_null_band(self):
        # a swap-symmetric configuration scores near zero
        rng = np.random.default_rng(4)
        x = rng.standard_normal((200, 3))
        xt = rng.standard_normal((200, 3))
        from copulaknockoffs.tune import _mmd_value_and_grad
        bw = reference_bandwidth(x)
        val, _ = _mmd_value_and_grad(x, xt, bw)
        null_vals = []
        for rep in range(100):
            flip = rng.uniform(size=200) < 0.5
            xp = np.where(flip[:, None], xt, x)
            xtp = np.where(flip[:, None], x, xt)
            null_vals.append(_mmd_value_and_grad(xp, xtp, bw)[0])
        assert val <= np.quantile(null_vals, 0.95)

    def test_batch_too_small_rejected(self, fitted_machine):
        machine, x_train = fitted_machine
        with pytest.raises(DomainError):
            loss_and_gradient(machine, x_train[:2], np.full((2, 3), 0.5))

    def test_gaussian_machine_rejected(self):
        x = np.random.default_rng(5).standard_normal((200, 3))
        mach = ko.fit(KnockoffKind.GAUSSIAN, x)
        with pytest.raises(DomainError):
            loss_and_gradient(mach, x[:8], np.full((8, 3), 0.5))


class TestSgdTune:
    def test_zero_iterations_unchanged(self, fitted_machine):
        machine, x_train = fitted_machine
        tuned, trace = sgd_tune(machine, x_train, TuneConfig(n_iterations=0))
        assert trace == []
        assert tuned.vine.to_dict() == machine.vine.to_dict()

    def test_zero_learning_rate_unchanged(self, fitted_machine):
        machine, x_train = fitted_machine
        tuned, trace = sgd_tune(machine, x_train,
                                TuneConfig(learning_rate=0.0, n_iterations=3,
                                           batch_size=32))
        assert len(trace) == 3
        assert tuned.vine.to_dict() == machine.vine.to_dict()

    def test_parameters_stay_in_domain(self, fitted_machine):
        machine, x_train = fitted_machine
        cfg = TuneConfig(learning_rate=5.0, n_iterations=4, batch_size=32, seed=1)
        tuned, _ = sgd_tune(machine, x_train, cfg)
        d = machine.d
        for target in tuned.vine.parametric_edges(tree_range=(d, 2 * d - 1)):
            cop = tuned.vine.copula(*target)
            assert -1.0 < cop.theta < 1.0

    def test_perturbed_machine_improves(self):
        # corrupt the cross trees d+1..2d-1 (which break swap exchangeability;
        # the tree-d diagonal entries are invisible to the full-swap loss),
        # then check that tuning lowers the held-out loss
        d = 3
        sigma = toeplitz_corr(d, 0.6)
        x_train = gaussian_sample(1500, sigma, seed=10)
        x_held = gaussian_sample(400, sigma, seed=11)
        cfg_fit = KnockoffConfig(families=((CopulaFamily.GAUSSIAN, 0),))
        base = ko.fit(KnockoffKind.VINE_COPULA, x_train, cfg_fit)

        def held_out_loss(machine, seed):
            w = np.random.default_rng(seed).uniform(size=(x_held.shape[0], d))
            from copulaknockoffs.knockoffs import generate_with_uniforms
            from copulaknockoffs.tune import _mmd_value_and_grad
            xt = generate_with_uniforms(machine, x_held, w)
            return _mmd_value_and_grad(x_held, xt, reference_bandwidth(x_held))[0]

        perturbed = base
        for target in base.vine.parametric_edges(tree_range=(d + 1, 2 * d - 1)):
            theta = base.vine.copula(*target).theta
            perturbed = _with_edge_theta(perturbed, target,
                                         float(np.clip(theta + 0.6, -0.99, 0.99)))
        improved = 0
        for seed in range(5):
            cfg = TuneConfig(learning_rate=2.0, n_iterations=20, batch_size=256,
                             seed=seed, tree_range=(d + 1, 2 * d - 1))
            tuned, _ = sgd_tune(perturbed, x_train, cfg)
            improved += held_out_loss(tuned, 100 + seed) < held_out_loss(
                perturbed, 100 + seed)
        assert improved >= 4

    def test_requires_vine_machine(self):
        x = np.random.default_rng(6).standard_normal((300, 3))
        mach = ko.fit(KnockoffKind.GAUSSIAN_COPULA, x)
        with pytest.raises(DomainError):
            sgd_tune(mach, x, TuneConfig())
