import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from transferlab.attacks import (
    AdversarialBatch,
    AttackConfig,
    bim,
    fgsm,
    input_gradient,
    project_linf,
    run_attack,
)
from transferlab.data import ImageBatch, LabelBatch
from transferlab.errors import NumericsError
from transferlab.models import HeadSelector, MultiTrackConfig, build_multitrack

from toynets import (
    ConstantModel,
    LinearSoftmaxModel,
    TwoHeadToy,
    linear_softmax_loss_and_grad,
)


def _interior_batch(shape=(2, 3, 8, 8), lo=0.2, hi=0.8, seed=0):
    rng = np.random.default_rng(seed)
    return ImageBatch(rng.uniform(lo, hi, shape).astype(np.float32))


def _labels(n=2, seed=0, num_classes=10):
    return LabelBatch(np.random.default_rng(seed).integers(0, num_classes, n))


class TestAttackConfig:
    def test_single_step_defaults(self):
        cfg = AttackConfig.single_step()
        assert (cfg.name, cfg.epsilon, cfg.steps, cfg.step_size) == ("fgsm", 0.1, 1, 0.1)

    def test_multi_step_defaults(self):
        cfg = AttackConfig.multi_step()
        assert (cfg.name, cfg.epsilon, cfg.steps) == ("bim", 0.1, 10)
        assert cfg.step_size == pytest.approx(0.01)

    def test_step_size_cannot_exceed_epsilon(self):
        with pytest.raises(ValueError, match="exceeds epsilon"):
            AttackConfig(name="fgsm", epsilon=0.1, steps=1, step_size=0.2)

    def test_ball_surface_must_be_reachable(self):
        with pytest.raises(ValueError, match="cannot reach"):
            AttackConfig(name="bim", epsilon=0.1, steps=5, step_size=0.01)

    def test_negative_epsilon_rejected(self):
        with pytest.raises(ValueError):
            AttackConfig(name="fgsm", epsilon=-0.1)

    def test_round_trip(self):
        cfg = AttackConfig.multi_step(0.08, steps=4)
        assert AttackConfig.from_dict(cfg.to_dict()) == cfg


class TestProjectLinf:
    def test_feasible_candidate_unchanged(self):
        origin = _interior_batch().data
        candidate = origin + 0.05
        out = project_linf(candidate, origin, 0.1)
        np.testing.assert_array_equal(out, candidate)

    def test_clamp_arithmetic(self):
        origin = np.full((1, 1, 1, 1), 0.5, dtype=np.float32)
        candidate = np.full((1, 1, 1, 1), 0.9, dtype=np.float32)
        out = project_linf(candidate, origin, 0.1)
        assert out[0, 0, 0, 0] == pytest.approx(0.6, abs=1e-7)

    def test_brute_force_feasibility_scan(self):
        # oracle: re-derive the bound for every element with plain python
        rng = np.random.default_rng(3)
        origin = rng.uniform(0, 1, (3, 2, 4, 4)).astype(np.float32)
        candidate = rng.uniform(-1.0, 2.0, origin.shape).astype(np.float32)
        eps = 0.15
        out = project_linf(candidate, origin, eps)
        for c, o, p in zip(candidate.flat, origin.flat, out.flat):
            lo = max(np.float32(o) - np.float32(eps), np.float32(0.0))
            hi = min(np.float32(o) + np.float32(eps), np.float32(1.0))
            assert lo <= p <= hi
            assert p == min(max(np.float32(c), lo), hi)

    @given(
        candidate=hnp.arrays(np.float32, (2, 1, 3, 3),
                             elements=st.floats(-2, 3, width=32)),
        eps=st.floats(0.01, 0.5),
    )
    def test_idempotent_bitwise(self, candidate, eps):
        origin = np.linspace(0, 1, candidate.size, dtype=np.float32).reshape(candidate.shape)
        once = project_linf(candidate, origin, eps)
        twice = project_linf(once, origin, eps)
        assert np.array_equal(once, twice)

    def test_epsilon_must_be_positive(self):
        x = _interior_batch().data
        with pytest.raises(ValueError):
            project_linf(x, x, 0.0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            project_linf(np.zeros((1, 3, 2, 2), np.float32),
                         np.zeros((2, 3, 2, 2), np.float32), 0.1)

    def test_image_batch_in_image_batch_out(self):
        batch = _interior_batch()
        out = project_linf(batch, batch, 0.1)
        assert isinstance(out, ImageBatch)


class TestInputGradient:
    def test_constant_model_has_zero_gradient(self):
        batch, labels = _interior_batch(), _labels()
        grad = input_gradient(ConstantModel(), HeadSelector.head(1), batch, labels)
        assert torch.equal(grad, torch.zeros_like(grad))

    def test_matches_finite_differences_on_smooth_toy(self):
        # oracle at h=1e-3 in float64; relative error bound 1e-3
        from transferlab.diagnostics import finite_difference_check
        from toynets import SmoothConvNet

        model = SmoothConvNet(hw=8, seed=1)
        report = finite_difference_check(
            model, HeadSelector.head(1), _interior_batch(), _labels(),
            h=1e-3, tol=1e-3, num_pixels=200, seed=0,
        )
        assert report.passed, report

    def test_matches_closed_form_linear_model(self):
        rng = np.random.default_rng(5)
        weight = rng.normal(0, 0.5, (10, 3 * 8 * 8))
        model = LinearSoftmaxModel(weight)
        batch, labels = _interior_batch(seed=2), _labels(seed=2)
        grad = input_gradient(model, HeadSelector.head(1), batch, labels).numpy()
        _, oracle = linear_softmax_loss_and_grad(weight, batch.data, labels.labels)
        # float32 forward vs float64 oracle: absolute agreement to ~1e-7
        np.testing.assert_allclose(grad, oracle, rtol=1e-5, atol=5e-7)

    def test_ensemble_gradient_is_mean_of_head_gradients(self):
        # linearity oracle by explicit summation over heads
        model = TwoHeadToy(3 * 8 * 8, seed=4)
        batch, labels = _interior_batch(seed=3), _labels(seed=3)
        ens = input_gradient(model, HeadSelector.ensemble(), batch, labels)
        parts = [
            input_gradient(model, HeadSelector.head(i), batch, labels) for i in (1, 2)
        ]
        np.testing.assert_allclose(
            ens.numpy(), ((parts[0] + parts[1]) / 2).numpy(), rtol=1e-5, atol=1e-8
        )

    def test_parameters_untouched(self):
        model = TwoHeadToy(3 * 8 * 8)
        input_gradient(model, HeadSelector.head(1), _interior_batch(), _labels())
        assert all(p.grad is None for p in model.parameters())

    def test_nonfinite_gradient_names_examples(self):
        class ExplodingModel(ConstantModel):
            def forward(self, x):
                n = x.shape[0]
                bad = torch.log(x.reshape(n, -1).sum(dim=1) * 0.0).unsqueeze(1)
                return (bad + torch.zeros(n, self.num_classes)).unsqueeze(0)

        with pytest.raises(NumericsError, match=r"example\(s\)"):
            input_gradient(ExplodingModel(), HeadSelector.head(1),
                           _interior_batch(), _labels())


class TestSingleStepAttack:
    def test_zero_epsilon_returns_clean_exactly(self):
        model = TwoHeadToy(3 * 8 * 8)
        batch = _interior_batch()
        adv = fgsm(model, HeadSelector.head(1), batch, _labels(),
                   AttackConfig(name="fgsm", epsilon=0.0, steps=1, step_size=0.0))
        assert np.array_equal(adv.adv.data, batch.data)

    def test_interior_pixels_move_by_exactly_step_size(self):
        rng = np.random.default_rng(6)
        weight = rng.normal(0, 0.5, (10, 3 * 8 * 8))
        model = LinearSoftmaxModel(weight)
        batch, labels = _interior_batch(lo=0.3, hi=0.7), _labels()
        adv = fgsm(model, HeadSelector.head(1), batch, labels,
                   AttackConfig.single_step(0.1))
        moves = np.abs(adv.adv.data - batch.data)
        # linear model: gradient entries are generically nonzero, and the
        # ball never hits [0,1] for interior pixels
        np.testing.assert_allclose(moves, 0.1, atol=2e-7)

    def test_matches_hand_computed_linear_step(self):
        rng = np.random.default_rng(7)
        weight = rng.normal(0, 0.5, (10, 3 * 8 * 8))
        model = LinearSoftmaxModel(weight)
        batch, labels = _interior_batch(seed=8), _labels(seed=8)
        adv = fgsm(model, HeadSelector.head(1), batch, labels,
                   AttackConfig.single_step(0.05))
        _, oracle_grad = linear_softmax_loss_and_grad(weight, batch.data, labels.labels)
        expected = np.clip(
            np.clip(batch.data + 0.05 * np.sign(oracle_grad),
                    batch.data - 0.05, batch.data + 0.05),
            0.0, 1.0,
        ).astype(np.float32)
        np.testing.assert_allclose(adv.adv.data, expected, atol=2e-7)

    def test_requires_single_step_config(self):
        with pytest.raises(ValueError, match="steps=1"):
            fgsm(TwoHeadToy(3 * 8 * 8), HeadSelector.head(1), _interior_batch(),
                 _labels(), AttackConfig.multi_step())


class TestMultiStepAttack:
    def test_one_step_equals_single_step_attack(self):
        model = TwoHeadToy(3 * 8 * 8, seed=2)
        batch, labels = _interior_batch(seed=9), _labels(seed=9)
        cfg = AttackConfig(name="bim", epsilon=0.1, steps=1, step_size=0.1)
        a = bim(model, HeadSelector.head(2), batch, labels, cfg)
        b = fgsm(model, HeadSelector.head(2), batch, labels, cfg)
        assert np.array_equal(a.adv.data, b.adv.data)

    def test_default_schedule_stays_inside_ball(self):
        model = TwoHeadToy(3 * 8 * 8, seed=3)
        batch, labels = _interior_batch(seed=10), _labels(seed=10)
        adv = bim(model, HeadSelector.ensemble(), batch, labels,
                  AttackConfig.multi_step(0.1, steps=10))
        assert adv.linf_distances.max() <= 0.1 + 1e-6
        assert adv.adv.data.min() >= 0.0 and adv.adv.data.max() <= 1.0

    def test_loss_nondecreasing_across_iterates_of_linear_model(self):
        # closed-form loss oracle evaluated at every iterate of one run
        rng = np.random.default_rng(11)
        weight = rng.normal(0, 0.5, (10, 3 * 8 * 8))
        model = LinearSoftmaxModel(weight)
        batch, labels = _interior_batch(seed=11), _labels(seed=11)
        iterates: list = []
        bim(model, HeadSelector.head(1), batch, labels,
            AttackConfig.multi_step(0.1, steps=10), trajectory=iterates)
        assert len(iterates) == 11  # start plus one per step
        losses = [
            linear_softmax_loss_and_grad(weight, x, labels.labels)[0]
            for x in iterates
        ]
        assert all(b >= a - 1e-9 for a, b in zip(losses, losses[1:])), losses

    def test_random_start_stays_feasible_and_differs(self):
        model = TwoHeadToy(3 * 8 * 8, seed=5)
        batch, labels = _interior_batch(seed=12), _labels(seed=12)
        plain = bim(model, HeadSelector.head(1), batch, labels,
                    AttackConfig.multi_step(0.1, steps=3))
        randomized = bim(
            model, HeadSelector.head(1), batch, labels,
            AttackConfig(name="bim", epsilon=0.1, steps=3, random_start=True),
            seed=123,
        )
        assert randomized.linf_distances.max() <= 0.1 + 1e-6
        assert not np.array_equal(plain.adv.data, randomized.adv.data)


class TestAdversarialBatch:
    def test_constructor_enforces_budget(self):
        origin = _interior_batch()
        escaped = np.clip(origin.data + 0.3, 0, 1).astype(np.float32)
        with pytest.raises(ValueError, match="escaped the budget"):
            AdversarialBatch(
                adv=ImageBatch(escaped), origin=origin,
                config=AttackConfig.single_step(0.1), selector="head1",
            )

    def test_save_load_round_trip(self, tmp_path):
        model = TwoHeadToy(3 * 8 * 8)
        batch, labels = _interior_batch(), _labels()
        adv = run_attack(model, HeadSelector.ensemble(), batch, labels,
                         AttackConfig.multi_step(0.1, steps=2))
        path = adv.save(tmp_path / "adv.npz")
        loaded = AdversarialBatch.load(path)
        np.testing.assert_array_equal(loaded.adv.data, adv.adv.data)
        np.testing.assert_array_equal(loaded.origin.data, adv.origin.data)
        np.testing.assert_array_equal(loaded.linf_distances, adv.linf_distances)
        assert loaded.config == adv.config
        assert loaded.selector == "ensemble"


class TestHeadSelectorIndependence:
    def test_attacking_head_i_never_reads_later_tracks(self):
        # gradient sparsity: the loss of head i has no path to track i+1
        model = build_multitrack(MultiTrackConfig(depth=2, width=3, stem_channels=8))
        model.eval()
        x = torch.rand(2, 3, 32, 32, requires_grad=True)
        y = torch.tensor([0, 1])
        for i in (1, 2):
            from transferlab.models import selector_nll

            loss = selector_nll(model(x), y, HeadSelector.head(i))
            later = list(model.track_parameters(i + 1))
            grads = torch.autograd.grad(loss, later, allow_unused=True)
            # later-track parameters are either disconnected (None) or reached
            # only through structurally-zero paths
            assert all(
                g is None or torch.count_nonzero(g) == 0 for g in grads
            )
