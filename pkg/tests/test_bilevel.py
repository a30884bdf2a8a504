import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gate_bilevel import autodiff as ad
from gate_bilevel.bilevel import (
    SGD,
    Adam,
    AdamLambdaState,
    BilevelTrainer,
    DivergenceError,
    NonFiniteLossError,
    TrainConfig,
    TransferRatios,
    bilevel_train,
    clamp_lambda,
    inner_step,
    outer_step,
    quadratic_variation,
    skip_filter,
)
from gate_bilevel.data import SyntheticSpec, generate_synthetic, split_all, three_task_spec
from gate_bilevel.losses import PerturbationConfig, StepBatch, step_losses
from gate_bilevel.model import GateParams, ModelConfig, bind

from helpers import identity_model, tiny_model


def scalar_adam(gs, lam0, b0, b1, eta, eps):
    """Independent scalar transcription of the four outer-update lines."""
    m = v = 0.0
    lam = lam0
    out = []
    for step, g in enumerate(gs, start=1):
        m = b0 * m + (1 - b0) * g
        v = b1 * v + (1 - b1) * g * g
        mh = m / (1 - b0**step)
        vh = v / (1 - b1**step)
        lam = lam - eta * mh / (math.sqrt(vh) + eps)
        out.append((m, v, lam))
    return out


class TestAdamAlgebra:
    def test_hand_case(self):
        st_ = AdamLambdaState.zeros((1,), beta0=0.9, beta1=0.999, eta=0.001, eps=1e-8)
        lam = st_.advance(np.array([1.0]), np.array([1.0]))
        assert st_.m[0] == pytest.approx(0.1, abs=1e-15)
        assert st_.v[0] == pytest.approx(0.001, abs=1e-15)
        assert st_.step == 1
        assert abs(lam[0] - 0.999000000005) < 1e-9
        assert lam[0] == pytest.approx(1.0 - 0.001 / (1.0 + 1e-8), abs=1e-15)

    def test_zero_gradient_keeps_lambda(self):
        st_ = AdamLambdaState.zeros((2, 2))
        lam = np.array([[0.0, 0.4], [0.9, 0.0]])
        assert np.array_equal(st_.advance(lam, np.zeros((2, 2))), lam)

    @given(st.integers(0, 10_000))
    def test_matches_scalar_reimplementation(self, seed):
        rng = np.random.default_rng(seed)
        gs = rng.exponential(size=200) * rng.choice([0.0, 1.0], size=200, p=[0.1, 0.9])
        st_ = AdamLambdaState.zeros((1,), beta0=0.9, beta1=0.999, eta=0.01, eps=1e-8)
        lam = np.array([1.0])
        for (m, v, ref), g in zip(scalar_adam(gs, 1.0, 0.9, 0.999, 0.01, 1e-8), gs):
            lam = st_.advance(lam, np.array([g]))
            assert abs(st_.m[0] - m) < 1e-12 and abs(st_.v[0] - v) < 1e-12 and abs(lam[0] - ref) < 1e-12
            assert st_.v[0] >= 0

    @pytest.mark.parametrize("kw", [dict(beta0=1.0), dict(beta1=-0.1), dict(eta=0.0), dict(eps=0.0)])
    def test_hyper_validation(self, kw):
        with pytest.raises(ValueError):
            AdamLambdaState.zeros((1,), **kw)


class TestRatioHelpers:
    def test_clamp(self):
        lam = TransferRatios.full(("a", "b"), 1.0)
        lam.values = np.array([[0.0, 0.5], [-0.1, 0.0]])
        out = clamp_lambda(lam, 0.0)
        assert out.values.tolist() == [[0.0, 0.5], [0.0, 0.0]]
        assert clamp_lambda(out).equals(out)
        above = TransferRatios.full(("a", "b"), 0.3)
        assert clamp_lambda(above, 0.1).equals(above)
        with pytest.raises(ValueError):
            clamp_lambda(above, -1.0)

    def test_quadratic_variation(self):
        assert quadratic_variation([0.4] * 5) == 0.0
        assert quadratic_variation([1.0, 0.9, 0.95]) == pytest.approx(0.0125, abs=1e-15)
        with pytest.raises(ValueError):
            quadratic_variation([1.0])

    @given(st.lists(st.floats(-10, 10), min_size=2, max_size=20), st.floats(-5, 5))
    def test_qv_shift_invariant(self, traj, c):
        assert quadratic_variation(np.array(traj) + c) == pytest.approx(quadratic_variation(traj), abs=1e-9)

    def test_skip_filter(self):
        lam = TransferRatios.full(("a", "b"), 1.0)
        assert skip_filter(lam, 0.0) == {("a", "b"), ("b", "a")}
        lam.values = np.array([[0.0, 0.05], [0.5, 0.0]])
        assert skip_filter(lam, 0.1) == {("b", "a")}
        with pytest.raises(ValueError):
            skip_filter(lam, -0.1)

    def test_symmetric_mode(self):
        lam = TransferRatios.full(("a", "b", "c"), 1.0, symmetric=True)
        lam.set("a", "c", 0.25)
        assert lam[("c", "a")] == 0.25
        lam.values = np.array([[0, 0.2, 0.4], [0.6, 0, 0.1], [0.8, 0.3, 0]], dtype=float)
        lam.symmetrize()
        assert np.array_equal(lam.values, lam.values.T)

    def test_lookup_errors(self):
        lam = TransferRatios.full(("a", "b"), 1.0, targets=("b",))
        assert lam.pairs() == [("a", "b")]
        with pytest.raises(KeyError):
            lam[("b", "a")]
        with pytest.raises(KeyError):
            lam[("a", "a")]


def _batch(seed, tasks=("a", "b", "c"), n=5):
    rng = np.random.default_rng(seed)
    return StepBatch.from_parts({t: (rng.normal(size=(n, 3)), rng.normal(size=n)) for t in tasks})


class TestSteps:
    def test_outer_step_leaves_theta(self):
        model, theta = tiny_model(tasks=("a", "b", "c"))
        before = theta.copy()
        lam = TransferRatios.full("abc", 1.0)
        new, state, loss = outer_step(model, theta, lam, AdamLambdaState.zeros((3, 3)), _batch(0))
        assert theta.equals(before)
        assert state.step == 1 and loss > 0
        assert np.all(new.entries() < 1.0) and np.all(new.entries() >= 0)
        assert np.all(new.values[~new.mask] == 0)

    def test_outer_step_symmetric_and_clamped(self):
        model, theta = tiny_model(tasks=("a", "b", "c"))
        lam = TransferRatios.full("abc", 0.005, symmetric=True)
        state = AdamLambdaState.zeros((3, 3))
        for k in range(3):
            lam, state, _ = outer_step(model, theta, lam, state, _batch(k))
            assert np.array_equal(lam.values, lam.values.T)
            assert np.all(lam.entries() >= 0)
        assert np.all(lam.entries() == 0.0)

    def test_outer_step_gradient_is_pair_mse(self):
        model, theta = tiny_model(tasks=("a", "b"))
        batch = _batch(1, tasks=("a",))
        lam = TransferRatios.full("ab", 1.0)
        st1 = AdamLambdaState.zeros((2, 2), beta0=0.0, beta1=0.0, eta=0.5, eps=1e-300)
        x, y = batch.part("a")
        mse = np.mean((model.predict_via_source(x, "a", "b", theta).value.ravel() - y) ** 2)
        new, state, loss = outer_step(model, theta, lam, st1, batch)
        assert state.m[lam.index("b", "a")] == pytest.approx(mse, rel=1e-12)
        assert loss == pytest.approx(mse, rel=1e-12)
        assert new[("b", "a")] == pytest.approx(0.5, abs=1e-12)
        assert new[("a", "b")] == 1.0

    def test_outer_step_errors(self):
        model, theta = tiny_model(tasks=("a", "b"))
        bad = theta.copy()
        bad["head.a.W0"] = np.full_like(bad["head.a.W0"], np.nan)
        with pytest.raises(NonFiniteLossError):
            outer_step(model, bad, TransferRatios.full("ab", 1.0), AdamLambdaState.zeros((2, 2)), _batch(0, "ab"))
        with pytest.raises(ValueError):
            StepBatch.from_parts({"a": (np.zeros((0, 3)), np.zeros(0))})

    def test_inner_steps_leave_lambda(self):
        model, theta = tiny_model(tasks=("a", "b", "c"))
        lam = TransferRatios.full("abc", 0.7)
        frozen = lam.values.tobytes()
        opt = Adam(1e-2)
        rng = np.random.default_rng(0)
        first = None
        for k in range(100):
            batch = _batch(k % 3)
            theta, losses = inner_step(model, theta, lam, batch, PerturbationConfig(m=1),
                                       rng.normal(size=(1, batch.n_rows, 4)), opt)
            first = first or losses.total.item()
            assert lam.values.tobytes() == frozen
        assert losses.breakdown().finite()

    def test_sgd_step_matches_hand_gradient(self):
        model, theta = tiny_model(tasks=("a", "b"))
        batch = _batch(0, tasks=("a", "b"))
        lam = TransferRatios.full("ab", 0.5)
        noise = np.random.default_rng(0).normal(size=(2, batch.n_rows, 4))
        perturb = PerturbationConfig(m=2)
        tape = ad.Tape()
        leaves = bind(theta, tape)
        g = ad.backward(step_losses(model, leaves, lam, batch, perturb, noise).total, tape)
        new, _ = inner_step(model, theta, lam, batch, perturb, noise, SGD(0.1))
        for k, t in leaves.items():
            np.testing.assert_array_equal(new[k], theta[k] - 0.1 * g[t])

    def test_sgd_quadratic_toy(self):
        p = GateParams(w=np.array([3.0]))
        assert SGD(0.25).step(p, {"w": np.array([4.0])})["w"].tolist() == [2.0]

    def test_exact_fit_is_stationary(self):
        model, theta = identity_model(tasks=("a", "b"), d=2)
        theta["head.a.W0"] = theta["head.b.W0"] = np.array([[0.5], [-1.5]])
        rng = np.random.default_rng(0)
        x = rng.normal(size=(4, 2))
        y = (x @ theta["head.a.W0"]).ravel()
        batch = StepBatch.from_parts({"a": (x, y), "b": (x, y)})
        new, losses = inner_step(model, theta, TransferRatios.full("ab", 1.0), batch, PerturbationConfig(m=2),
                                 rng.normal(size=(2, 8, 2)), Adam(1e-3))
        assert losses.total.item() < 1e-25
        for k in theta:
            np.testing.assert_allclose(new[k], theta[k], rtol=0, atol=1e-10)

    def test_non_finite_inner_loss(self):
        model, theta = tiny_model(tasks=("a", "b"))
        theta["head.a.b0"] = np.array([np.inf])
        with pytest.raises(NonFiniteLossError) as exc:
            inner_step(model, theta, TransferRatios.full("ab", 1.0), _batch(0, "ab"), PerturbationConfig(m=1),
                       np.zeros((1, 10, 4)), Adam())
        assert exc.value.breakdown is not None


# ---------------------------------------------------------------- trainer


def small_setup(tasks=3, samples=40, **train):
    if tasks == 1:
        spec = SyntheticSpec(loadings=[[1.0]], noise=0.2, samples=samples, d_x=4, tasks=["A"])
    else:
        spec = three_task_spec(samples=samples, d_x=4)
    datasets = generate_synthetic(spec, 0)
    mc = ModelConfig(d_x=4, tasks=tuple(d.task for d in datasets), d_z=3, d_m=3, embed_hidden=(6,),
                     enc_hidden=(6,), map_hidden=(6,))
    kw = dict(epochs=6, batch_size=8, patience=None, perturb=PerturbationConfig(m=2))
    kw.update(train)
    return mc, TrainConfig(**kw), datasets


class TestTrainer:
    def test_role_separation(self):
        mc, tc, ds = small_setup()
        tr = BilevelTrainer(mc, tc, ds, split_all(ds, tc.split_fractions, 0))
        tr.evaluate_initial()
        for epoch in range(1, 4):
            lam = tr.lam.values.tobytes()
            tr.inner_epoch(epoch)
            assert tr.lam.values.tobytes() == lam
            theta = tr.theta.copy()
            tr.outer_epoch(epoch)
            assert tr.theta.equals(theta)
            assert tr.lam.values.tobytes() != lam

    def test_fixed_lambda_constant_and_inert_machinery(self):
        mc, tc, ds = small_setup()
        a = bilevel_train(mc, tc, ds, fixed_lambda=1.0)
        b = bilevel_train(mc, TrainConfig(**{**tc.__dict__, "outer_enabled": False}), ds)
        assert a.step_log == b.step_log
        assert all(np.array_equal(r.lam, a.history[0].lam) for r in a.history)

    def test_vanilla_reference_loop(self):
        """Outer loop off equals a hand-written loop of plain inner steps."""
        from gate_bilevel.data import TRAIN, group_steps, multi_task_batches, swap_train_val

        mc, tc, ds = small_setup(epochs=3, swap_fraction=0.2)
        tr = bilevel_train(mc, tc, ds, fixed_lambda=1.0)
        ref = BilevelTrainer(mc, tc, ds, split_all(ds, tc.split_fractions, 0), fixed_lambda=1.0)
        ref.evaluate_initial()
        theta, split, log = ref.theta, ref.split, []
        opt = Adam(tc.inner_lr)
        for epoch in range(1, 4):
            if epoch > 1:
                split = swap_train_val(split, 0.2, 0, epoch)
            for steps in group_steps(multi_task_batches(ref.datasets, split, 8, 0, epoch, TRAIN)):
                parts = {b.task: (ref.by_task[b.task].x[b.index], ref.by_task[b.task].y[b.index]) for b in steps}
                batch = StepBatch.from_parts(parts)
                theta, losses = inner_step(ref.model, theta, ref.lam, batch, tc.perturb,
                                           tc.perturb.draw(ref.rng, batch.n_rows, 3), opt)
                log.append(losses.total.item())
        assert log == tr.step_log
        assert theta.equals(tr.theta)

    def test_single_task_reduces_to_regression(self):
        mc, tc, ds = small_setup(tasks=1, epochs=30)
        tr = bilevel_train(mc, tc, ds)
        assert tr.lam.pairs() == [] and tr.lam.values.shape == (1, 1)
        assert tr.history[-1].losses["A"].l_reg < tr.history[0].losses["A"].l_reg
        assert all(r.losses["A"].l_map == 0 for r in tr.history)

    def test_monotone_with_beta0_zero(self):
        mc, tc, ds = small_setup(epochs=5, beta0=0.0)
        tr = bilevel_train(mc, tc, ds)
        traj = np.array([r.lam for r in tr.history])
        assert np.all(np.diff(traj, axis=0) <= 0)

    def test_divergence_carries_history(self):
        mc, tc, ds = small_setup(divergence_limit=1e-6)
        with pytest.raises(DivergenceError) as exc:
            bilevel_train(mc, tc, ds)
        assert len(exc.value.history) >= 1

    def test_early_stop(self):
        mc, tc, ds = small_setup(epochs=200, patience=1, inner_lr=0.5)
        tr = bilevel_train(mc, tc, ds)
        assert tr.stopped and tr.epoch < 200

    def test_epoch_cadence_single_update(self):
        mc, tc, ds = small_setup(epochs=3, outer_cadence="epoch")
        tr = bilevel_train(mc, tc, ds)
        assert tr.lam_state.step == 3

    def test_skip_threshold_equivalence(self):
        mc, tc, ds = small_setup(epochs=4, lambda_init=0.05, outer_enabled=False, skip_threshold=0.1)
        filtered = bilevel_train(mc, tc, ds)
        zero = bilevel_train(mc, TrainConfig(**{**tc.__dict__, "skip_threshold": None}), ds, fixed_lambda=0.0)
        np.testing.assert_allclose(filtered.step_log, zero.step_log, rtol=0, atol=1e-9)

    @pytest.mark.parametrize("kw", [dict(epochs=0), dict(inner_lr=0.0), dict(outer_cadence="x"), dict(patience=0)])
    def test_config_validation(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


def test_transfer_beats_no_transfer_on_identical_tasks():
    spec = SyntheticSpec(loadings=[[1.0, 0.5], [1.0, 0.5]], noise=0.3, samples=60, d_x=6, tasks=["P", "Q"])
    ds = generate_synthetic(spec, 0)
    mc = ModelConfig(d_x=6, tasks=("P", "Q"), d_z=4, d_m=4, embed_hidden=(8,), enc_hidden=(8,), map_hidden=(8,))
    tc = TrainConfig(epochs=200, batch_size=16, patience=None, perturb=PerturbationConfig(m=2))
    gate = bilevel_train(mc, tc, ds)
    none = bilevel_train(mc, tc, ds, fixed_lambda=0.0)
    assert np.mean(list(gate.history[-1].val_rmse.values())) < np.mean(list(none.history[-1].val_rmse.values()))
