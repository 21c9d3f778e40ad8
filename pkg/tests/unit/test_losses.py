"""
Unit tests for lib/razorlab/losses.py.
Gradients of every objective are checked against central finite
differences on random parameter coordinates of the tiny model.
"""

import math

import numpy as np
import pytest

from razorlab import autodiff as ad
from razorlab.autodiff import Tensor
from razorlab.data_synth import PairBatch
from razorlab.errors import ConfigError, ContractError, InputError
from razorlab.losses import (
    SQUARED,
    AblationSwitches,
    BaselineSims,
    LossWeights,
    composite_loss,
    composite_terms,
    forget_loss,
    info_nce,
    mismatch_loss,
    retain_loss,
    value_and_grad,
)
from razorlab.metrics import pair_similarity_values
from razorlab.model import TrackedParams, editable_parameter_keys, forward_images

from tests.fixtures.model_factory import TINY_MODEL, random_checkpoint, tiny_splits

FD_STEP = 1e-5
FD_TOLERANCE = 1e-4
N_COORDINATES = 20


def finite_difference(loss_fn, checkpoint, key, index, *args):
    """Central difference of loss_fn along one parameter coordinate."""
    def at(offset):
        array = np.array(checkpoint[key])
        array[index] += offset
        return loss_fn(checkpoint.replace_tensors({key: array}), *args).item()
    return (at(FD_STEP) - at(-FD_STEP)) / (2 * FD_STEP)


def assert_gradient_matches(loss_fn, checkpoint, *args, seed=0):
    """Reverse-mode gradient equals finite differences on random coordinates."""
    _, grads = value_and_grad(loss_fn, checkpoint, *args)
    rng = np.random.default_rng(seed)
    keys = editable_parameter_keys(checkpoint.config)
    for _ in range(N_COORDINATES):
        key = keys[rng.integers(len(keys))]
        index = tuple(int(rng.integers(n)) for n in checkpoint[key].shape)
        analytic = grads[key][index]
        numeric = finite_difference(loss_fn, checkpoint, key, index, *args)
        scale = max(abs(analytic), abs(numeric), 1e-3)
        assert abs(analytic - numeric) <= FD_TOLERANCE * scale, (key, index, analytic, numeric)


@pytest.fixture(scope='module')
def setup():
    """Random tiny checkpoint with non-trivial gradients, plus batches."""
    rng = np.random.default_rng(11)
    ckpt = random_checkpoint(rng, scale=0.3)
    splits = tiny_splits(seed=0)
    retain = PairBatch.from_pairs(splits.retain[:8])
    forget = PairBatch.from_pairs(splits.forget)
    other = random_checkpoint(np.random.default_rng(12), scale=0.3)
    baseline = BaselineSims(pair_similarity_values(other, forget))
    return ckpt, retain, forget, baseline


class TestInfoNce:
    """Closed-form InfoNCE values."""

    def test_identity_two_by_two(self):
        """[[1,0],[0,1]] at temperature 0.07 gives log(1 + e^(-1/0.07))."""
        loss = info_nce(Tensor(np.eye(2)), 0.07).item()
        assert loss == pytest.approx(math.log1p(math.exp(-1 / 0.07)), rel=1e-9)
        assert loss == pytest.approx(6.1e-7, rel=0.05)

    def test_uniform_matrix(self):
        """Equal similarities give log(B)."""
        assert info_nce(Tensor(np.full((4, 4), 0.3)), 0.07).item() == pytest.approx(math.log(4))

    def test_symmetric_in_transpose(self):
        """Row and column terms are averaged."""
        sim = np.random.default_rng(3).uniform(-1, 1, size=(5, 5))
        assert info_nce(Tensor(sim), 0.1).item() == pytest.approx(info_nce(Tensor(sim.T), 0.1).item())

    def test_requires_square(self):
        """Non-square matrices are a contract error."""
        with pytest.raises(ContractError):
            info_nce(Tensor(np.ones((2, 3))), 0.07)

    def test_joint_permutation_invariance(self, setup):
        """Reordering the pairs together leaves the retain loss unchanged."""
        ckpt, retain, _, _ = setup
        perm = np.random.default_rng(4).permutation(len(retain))
        shuffled = PairBatch(
            images=retain.images[perm],
            tokens=[retain.tokens[i] for i in perm],
            class_ids=retain.class_ids[perm],
        )
        assert retain_loss(ckpt, shuffled).item() == pytest.approx(retain_loss(ckpt, retain).item(), rel=1e-12)
        sim = np.random.default_rng(6).uniform(-1, 1, size=(6, 6))
        p = np.random.default_rng(7).permutation(6)
        assert info_nce(Tensor(sim[np.ix_(p, p)]), 0.07).item() == pytest.approx(info_nce(Tensor(sim), 0.07).item(),
                                                                                  rel=1e-12)


class TestForgetAndMismatch:
    """Forget and mismatch objectives."""

    def test_forget_loss_range(self, setup):
        """1 - cosine lies in [0, 2]."""
        ckpt, _, forget, _ = setup
        assert 0.0 <= forget_loss(ckpt, forget).item() <= 2.0

    def test_mismatch_zero_against_self(self, setup):
        """A model's drift from its own similarities is zero."""
        ckpt, _, forget, _ = setup
        baseline = BaselineSims(pair_similarity_values(ckpt, forget))
        assert mismatch_loss(ckpt, forget, baseline).item() == pytest.approx(0.0, abs=1e-14)
        assert mismatch_loss(ckpt, forget, baseline, SQUARED).item() == pytest.approx(0.0, abs=1e-14)

    def test_mismatch_arithmetic(self, setup):
        """A uniform shift of 0.3 gives +-0.3 signed and 0.09 squared."""
        ckpt, _, forget, _ = setup
        sims = pair_similarity_values(ckpt, forget)
        shift = 0.3 if sims.min() >= -0.7 else -0.3
        baseline = BaselineSims(sims - shift)
        assert mismatch_loss(ckpt, forget, baseline).item() == pytest.approx(shift)
        assert mismatch_loss(ckpt, forget, baseline, SQUARED).item() == pytest.approx(0.09)

    def test_baseline_length_must_match(self, setup):
        """Baseline and batch must align."""
        ckpt, _, forget, _ = setup
        with pytest.raises(ContractError):
            mismatch_loss(ckpt, forget, BaselineSims(np.zeros(len(forget) + 1)))

    def test_baseline_range_checked(self):
        """Similarities outside [-1, 1] are rejected."""
        with pytest.raises(ContractError):
            BaselineSims([0.5, 1.5])

    def test_step_along_forget_gradient_lowers_similarity(self, setup):
        """theta + eta * grad(L_f) lowers the mean forget-pair cosine by about eta * |grad|^2."""
        ckpt, _, forget, _ = setup
        _, grads = value_and_grad(forget_loss, ckpt, forget)
        norm_sq = sum(float(np.sum(g * g)) for g in grads.values())
        assert norm_sq > 0.0
        eta = 1e-4 / math.sqrt(norm_sq)
        moved = ckpt.replace_tensors({k: ckpt[k] + eta * g for k, g in grads.items()})
        before = float(np.mean(pair_similarity_values(ckpt, forget)))
        after = float(np.mean(pair_similarity_values(moved, forget)))
        assert after < before
        assert before - after == pytest.approx(eta * norm_sq, rel=0.05)

    def test_empty_batch(self, setup):
        """Losses need data."""
        ckpt = setup[0]
        with pytest.raises(InputError):
            forget_loss(ckpt, None)


class TestComposite:
    """Weighted composite objective and ablation switches."""

    def test_sum_of_weighted_terms(self, setup):
        """L = L_r + lambda_f*rho*L_f + lambda_m*L_m."""
        ckpt, retain, forget, baseline = setup
        weights = LossWeights(rho=0.4, lambda_f=2.0, lambda_m=0.5)
        total = composite_loss(ckpt, retain, forget, baseline, weights).item()
        expected = (
            retain_loss(ckpt, retain, weights.temperature).item()
            + 2.0 * 0.4 * forget_loss(ckpt, forget).item()
            + 0.5 * mismatch_loss(ckpt, forget, baseline).item()
        )
        assert total == pytest.approx(expected, rel=1e-12)

    def test_ablation_drops_terms(self, setup):
        """Disabled terms are absent."""
        ckpt, retain, forget, baseline = setup
        terms = composite_terms(ckpt, retain, forget, baseline, LossWeights(),
                                AblationSwitches(use_mismatch=False))
        assert set(terms) == {'retain', 'forget'}
        terms = composite_terms(ckpt, None, forget, baseline, LossWeights(),
                                AblationSwitches(use_retain=False))
        assert set(terms) == {'forget', 'mismatch'}

    def test_all_terms_disabled(self, setup):
        """At least one term is required."""
        ckpt, retain, forget, baseline = setup
        with pytest.raises(ConfigError):
            composite_loss(ckpt, retain, forget, baseline, LossWeights(),
                           AblationSwitches(False, False, False))

    def test_mismatch_needs_baseline(self, setup):
        """The mismatch term without a baseline is a contract error."""
        ckpt, retain, forget, _ = setup
        with pytest.raises(ContractError):
            composite_loss(ckpt, retain, forget, None, LossWeights())

    @pytest.mark.parametrize('changes', [{'rho': 0.0}, {'rho': 1.5}, {'lambda_f': -1.0}, {'temperature': 0.0}])
    def test_invalid_weights(self, changes):
        """Weights are validated."""
        with pytest.raises(ConfigError):
            LossWeights(**changes)


class TestGradientOracle:
    """Reverse-mode gradients agree with central finite differences."""

    def test_retain_loss(self, setup):
        ckpt, retain, _, _ = setup
        assert_gradient_matches(retain_loss, ckpt, retain, 0.07, seed=1)

    def test_forget_loss(self, setup):
        ckpt, _, forget, _ = setup
        assert_gradient_matches(forget_loss, ckpt, forget, seed=2)

    def test_mismatch_loss_signed(self, setup):
        ckpt, _, forget, baseline = setup
        assert_gradient_matches(mismatch_loss, ckpt, forget, baseline, seed=3)

    def test_mismatch_loss_squared(self, setup):
        ckpt, _, forget, baseline = setup
        assert_gradient_matches(mismatch_loss, ckpt, forget, baseline, SQUARED, seed=4)

    def test_composite_loss(self, setup):
        ckpt, retain, forget, baseline = setup
        assert_gradient_matches(composite_loss, ckpt, retain, forget, baseline, LossWeights(), seed=5)


class TestValueAndGrad:
    """Tests for the gradient helper."""

    def test_default_keys_are_editable(self, setup):
        """Gradients cover exactly the editable parameters."""
        ckpt, _, forget, _ = setup
        _, grads = value_and_grad(forget_loss, ckpt, forget)
        assert set(grads) == set(editable_parameter_keys(TINY_MODEL))

    def test_unreached_keys_are_zero(self, setup):
        """Text-tower keys get zero gradient from an image-only loss."""
        ckpt, _, forget, _ = setup
        def image_only(params, images):
            params = TrackedParams.of(params)
            return ad.mean(forward_images(params, params.config, images))

        _, grads = value_and_grad(image_only, ckpt, forget.images)
        assert not np.any(grads['text.blocks.0.attn.q_weight'])
        assert np.any(grads['image.blocks.0.attn.q_weight'])

    def test_checkpoint_not_modified(self, setup):
        """Computing gradients leaves the checkpoint untouched."""
        ckpt, retain, _, _ = setup
        before = {k: v.copy() for k, v in ckpt.tensors.items()}
        value_and_grad(retain_loss, ckpt, retain)
        for key, array in before.items():
            assert np.array_equal(ckpt[key], array)
