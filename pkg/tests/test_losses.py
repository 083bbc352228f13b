"""Loss-value oracles, gradient checks, and invariant properties.

Independent oracles live inline: plain-numpy recomputations of each loss
(norm ratios, brute-force per-class enumeration for the consensus loss)
that never touch the autodiff path they verify.
"""

import math

import numpy as np
import pytest

from normalign import autodiff as ad
from normalign.autodiff import Tensor
from normalign.gradcheck import finite_diff_check
from normalign.losses import (
    ContractError,
    LossParts,
    LossWeights,
    ModalityBatch,
    attentive_entropy_loss,
    classification_loss,
    domain_adversarial_loss,
    mec_loss,
    rna_loss,
    rna_uda_loss,
    thna_loss,
    total_uda_loss,
)


def batch(modality, features, domain="source"):
    return ModalityBatch(modality, Tensor(np.asarray(features, dtype=np.float64)), domain)


def rna_oracle(feature_arrays):
    """Two-line norm-ratio recomputation in plain numpy."""
    means = [np.sqrt((f * f).sum(axis=1) + 1e-12).mean() for f in feature_arrays]
    if len(means) == 2:
        return (means[0] / means[1] - 1.0) ** 2
    pairs = [(means[i] / means[j] - 1.0) ** 2 for i in range(len(means)) for j in range(len(means)) if i != j]
    return float(np.mean(pairs))


class TestRnaLoss:
    def test_identical_modalities_give_zero(self):
        rng = np.random.default_rng(0)
        f = rng.normal(size=(6, 8))
        loss = rna_loss([batch("rgb", f), batch("audio", f.copy())])
        assert loss.item() == pytest.approx(0.0, abs=1e-15)

    def test_norm_ratio_two_gives_one(self):
        visual = np.zeros((5, 2))
        visual[:, 0] = 2.0  # every row norm 2
        audio = np.zeros((5, 2))
        audio[:, 0] = 1.0  # every row norm 1
        loss = rna_loss([batch("rgb", visual), batch("audio", audio)])
        assert loss.item() == pytest.approx(1.0, rel=1e-9)

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_independent_oracle(self, seed):
        rng = np.random.default_rng(100 + seed)
        fv = rng.normal(size=(8, 16))
        fa = rng.normal(size=(8, 32))
        loss = rna_loss([batch("rgb", fv), batch("audio", fa)])
        assert loss.item() == pytest.approx(rna_oracle([fv, fa]), abs=1e-10)

    def test_three_modalities_match_oracle(self):
        rng = np.random.default_rng(7)
        fs = [rng.normal(size=(5, d)) * s for d, s in [(8, 1.0), (12, 2.0), (6, 0.5)]]
        loss = rna_loss([batch(m, f) for m, f in zip(["rgb", "flow", "audio"], fs)])
        assert loss.item() == pytest.approx(rna_oracle(fs), abs=1e-10)

    @pytest.mark.parametrize("seed", range(3))
    def test_gradient(self, seed):
        rng = np.random.default_rng(200 + seed)
        fa = Tensor(rng.normal(size=(8, 16)))

        def f(x):
            return rna_loss([ModalityBatch("rgb", x, "source"), ModalityBatch("audio", fa, "source")])

        report = finite_diff_check(f, Tensor(rng.normal(size=(8, 16))))
        assert report.passed, report

    def test_mismatched_batch_sizes_rejected(self):
        with pytest.raises(ContractError, match="disagree on N"):
            rna_loss([batch("rgb", np.ones((3, 4))), batch("audio", np.ones((4, 4)))])

    def test_single_modality_rejected(self):
        with pytest.raises(ContractError):
            rna_loss([batch("rgb", np.ones((3, 4)))])

    def test_scale_invariance_of_common_factor(self):
        rng = np.random.default_rng(11)
        fv, fa = rng.normal(size=(6, 8)), rng.normal(size=(6, 5))
        base = rna_loss([batch("rgb", fv), batch("audio", fa)]).item()
        scaled = rna_loss([batch("rgb", 3.7 * fv), batch("audio", 3.7 * fa)]).item()
        assert scaled == pytest.approx(base, abs=1e-10)

    def test_monotone_in_ratio_above_one(self):
        rng = np.random.default_rng(12)
        fv, fa = rng.normal(size=(6, 8)), rng.normal(size=(6, 8))
        # scale numerator modality so the ratio starts above 1, then grow it
        fv = fv * 1.5
        losses = [
            rna_loss([batch("rgb", c * fv), batch("audio", fa)]).item()
            for c in (1.0, 1.2, 1.5, 2.0)
        ]
        assert all(a < b for a, b in zip(losses, losses[1:]))


class TestRnaUdaLoss:
    def test_target_identical_to_source_doubles(self):
        rng = np.random.default_rng(20)
        fv, fa = rng.normal(size=(5, 6)), rng.normal(size=(5, 4))
        src = [batch("rgb", fv), batch("audio", fa)]
        tgt = [batch("rgb", fv.copy(), "target"), batch("audio", fa.copy(), "target")]
        combined = rna_uda_loss(src, tgt).item()
        assert combined == pytest.approx(2 * rna_loss(src).item(), abs=1e-12)

    def test_decomposes_into_terms(self):
        rng = np.random.default_rng(21)
        src = [batch("rgb", rng.normal(size=(4, 6))), batch("audio", rng.normal(size=(4, 3)))]
        tgt = [batch("rgb", rng.normal(size=(7, 6)), "target"), batch("audio", rng.normal(size=(7, 3)), "target")]
        assert rna_uda_loss(src, tgt).item() == pytest.approx(
            rna_loss(src).item() + rna_loss(tgt).item(), abs=1e-12
        )

    def test_empty_target_falls_back_with_warning(self, caplog):
        rng = np.random.default_rng(22)
        src = [batch("rgb", rng.normal(size=(4, 6))), batch("audio", rng.normal(size=(4, 3)))]
        with caplog.at_level("WARNING"):
            value = rna_uda_loss(src, []).item()
        assert value == pytest.approx(rna_loss(src).item(), abs=1e-15)
        assert any("source term only" in r.message for r in caplog.records)


class TestThnaLoss:
    def test_zero_at_radius(self):
        feats = np.zeros((4, 2))
        feats[:, 0] = 40.0
        loss = thna_loss([[Tensor(feats)]], radius=40.0)
        assert loss.item() == pytest.approx(0.0, abs=1e-9)

    def test_unit_deviation(self):
        feats = np.zeros((4, 2))
        feats[:, 0] = 41.0
        loss = thna_loss([[Tensor(feats)]], radius=40.0)
        assert loss.item() == pytest.approx(1.0, rel=1e-9)

    def test_matches_independent_sum_of_squared_deviations(self):
        rng = np.random.default_rng(30)
        streams = [[rng.normal(size=(6, 5)) * 10 for _ in range(3)] for _ in range(2)]
        loss = thna_loss([[Tensor(f) for f in per] for per in streams], radius=40.0)
        expected = sum(
            (np.sqrt((f * f).sum(axis=1) + 1e-12).mean() - 40.0) ** 2
            for per in streams
            for f in per
        )
        assert loss.item() == pytest.approx(expected, abs=1e-10)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(31)
        a, b = rng.normal(size=(5, 4)), rng.normal(size=(5, 6))
        base = thna_loss([[Tensor(a)], [Tensor(b)]], radius=10.0).item()
        swapped = thna_loss([[Tensor(b)], [Tensor(a)]], radius=10.0).item()
        shuffled = thna_loss([[Tensor(a[::-1].copy())], [Tensor(b)]], radius=10.0).item()
        assert swapped == pytest.approx(base, abs=1e-12)
        assert shuffled == pytest.approx(base, abs=1e-12)

    @pytest.mark.parametrize("seed", range(3))
    def test_gradient(self, seed):
        rng = np.random.default_rng(300 + seed)
        other = Tensor(rng.normal(size=(4, 5)))

        def f(x):
            return thna_loss([[x, other]], radius=3.0)

        report = finite_diff_check(f, Tensor(rng.normal(size=(4, 5))))
        assert report.passed, report

    def test_empty_rejected(self):
        with pytest.raises(ContractError):
            thna_loss([], radius=40.0)


def mec_oracle(stream_logits_arrays):
    """Brute-force enumeration of the per-sample max over all classes."""
    log_probs = []
    for logits in stream_logits_arrays:
        shifted = logits - logits.max(axis=1, keepdims=True)
        lp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        log_probs.append(np.maximum(lp, np.log(1e-12)))
    summed = np.sum(log_probs, axis=0)  # [m, C]
    m, c = summed.shape
    b = len(stream_logits_arrays)
    total = 0.0
    for i in range(m):
        best = -np.inf
        for y in range(c):
            best = max(best, summed[i, y])
        total += best / b
    return -total / m


class TestMecLoss:
    def test_uniform_streams_give_log_c(self):
        logits = [Tensor(np.zeros((3, 4))), Tensor(np.zeros((3, 4)))]
        assert mec_loss(logits).item() == pytest.approx(math.log(4), rel=1e-12)

    def test_perfect_consensus_is_near_zero(self):
        strong = np.full((5, 3), -50.0)
        strong[:, 1] = 50.0
        loss = mec_loss([Tensor(strong), Tensor(strong.copy())])
        assert loss.item() == pytest.approx(0.0, abs=1e-10)

    def test_single_stream_reduces_to_max_prob(self):
        rng = np.random.default_rng(40)
        logits = rng.normal(size=(6, 5))
        loss = mec_loss([Tensor(logits)])
        shifted = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(shifted) / np.exp(shifted).sum(axis=1, keepdims=True)
        expected = -np.mean(np.log(p.max(axis=1)))
        assert loss.item() == pytest.approx(expected, abs=1e-12)

    @pytest.mark.parametrize("seed", range(4))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(400 + seed)
        arrays = [rng.normal(size=(4, 3)) * 2 for _ in range(2)]
        loss = mec_loss([Tensor(a) for a in arrays])
        assert loss.item() == pytest.approx(mec_oracle(arrays), abs=1e-10)

    def test_class_permutation_invariance(self):
        rng = np.random.default_rng(41)
        arrays = [rng.normal(size=(5, 4)) for _ in range(3)]
        base = mec_loss([Tensor(a) for a in arrays]).item()
        perm = rng.permutation(4)
        permuted = mec_loss([Tensor(a[:, perm]) for a in arrays]).item()
        assert permuted == pytest.approx(base, abs=1e-12)

    def test_nonnegative_and_bounded_for_single_stream(self):
        rng = np.random.default_rng(42)
        for _ in range(10):
            v = mec_loss([Tensor(rng.normal(size=(6, 5)) * 3)]).item()
            assert 0.0 <= v <= math.log(5) + 1e-12

    @pytest.mark.parametrize("seed", range(3))
    def test_gradient_away_from_ties(self, seed):
        rng = np.random.default_rng(420 + seed)
        other = Tensor(rng.normal(size=(8, 4)) * 2)

        def f(x):
            return mec_loss([x, other])

        report = finite_diff_check(f, Tensor(rng.normal(size=(8, 4)) * 2))
        assert report.passed, report


class TestClassificationLoss:
    def test_uniform_logits_give_log_c(self):
        loss = classification_loss(Tensor(np.zeros((5, 4))), [0, 1, 2, 3, 0])
        assert loss.item() == pytest.approx(math.log(4), rel=1e-12)

    def test_huge_margin_gives_near_zero(self):
        logits = np.zeros((3, 4))
        logits[np.arange(3), [1, 2, 0]] = 50.0
        loss = classification_loss(Tensor(logits), [1, 2, 0])
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_matches_hand_computation(self):
        rng = np.random.default_rng(50)
        logits = rng.normal(size=(4, 3))
        labels = [2, 0, 1, 1]
        shifted = logits - logits.max(axis=1, keepdims=True)
        lp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        expected = -np.mean(lp[np.arange(4), labels])
        assert classification_loss(Tensor(logits), labels).item() == pytest.approx(expected, abs=1e-10)

    def test_out_of_range_label_rejected(self):
        with pytest.raises(ContractError):
            classification_loss(Tensor(np.zeros((2, 3))), [0, 3])

    @pytest.mark.parametrize("seed", range(3))
    def test_gradient(self, seed):
        rng = np.random.default_rng(500 + seed)
        labels = rng.integers(0, 4, size=6)

        def f(x):
            return classification_loss(x, labels)

        report = finite_diff_check(f, Tensor(rng.normal(size=(6, 4))))
        assert report.passed, report


class TestDomainAdversarialLoss:
    def test_uniform_discriminator_gives_log2(self):
        loss = domain_adversarial_loss(Tensor(np.zeros((4, 2))), [0, 1, 0, 1])
        assert loss.item() == pytest.approx(math.log(2), rel=1e-12)

    def test_perfect_discrimination_near_zero(self):
        logits = np.array([[50.0, -50.0], [-50.0, 50.0]])
        loss = domain_adversarial_loss(Tensor(logits), [0, 1])
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_grad_reverse_path_negates_feature_gradient(self):
        rng = np.random.default_rng(60)
        w = Tensor(rng.normal(size=(5, 3)))
        feats_data = rng.normal(size=(4, 5))
        labels = [0, 1, 2, 0]
        lam = 0.7

        plain = Tensor(feats_data, requires_grad=True)
        domain_adversarial_loss(ad.matmul(plain, w), labels).backward()

        reversed_ = Tensor(feats_data, requires_grad=True)
        domain_adversarial_loss(ad.matmul(ad.grad_reverse(reversed_, lam), w), labels).backward()

        np.testing.assert_allclose(reversed_.grad, -lam * plain.grad, atol=1e-10)


class TestAttentiveEntropyLoss:
    def test_one_hot_class_predictions_give_zero(self):
        class_logits = np.full((3, 4), -60.0)
        class_logits[:, 2] = 60.0
        rng = np.random.default_rng(70)
        loss = attentive_entropy_loss(Tensor(class_logits), Tensor(rng.normal(size=(3, 2))))
        assert loss.item() == pytest.approx(0.0, abs=1e-10)

    def test_uniform_class_and_domain(self):
        loss = attentive_entropy_loss(Tensor(np.zeros((5, 4))), Tensor(np.zeros((5, 2))))
        assert loss.item() == pytest.approx(2 * math.log(4), rel=1e-10)

    def test_matches_independent_computation(self):
        rng = np.random.default_rng(71)
        cl = rng.normal(size=(6, 5))
        dl = rng.normal(size=(6, 3))

        def softmax(v):
            s = v - v.max(axis=1, keepdims=True)
            e = np.exp(s)
            return e / e.sum(axis=1, keepdims=True)

        p = softmax(cl)
        h_class = -(p * np.log(p)).sum(axis=1)
        q = softmax(dl)
        h_dom = -(q * np.log(q)).sum(axis=1) / np.log(3)
        expected = np.mean((1 + h_dom) * h_class)
        loss = attentive_entropy_loss(Tensor(cl), Tensor(dl))
        assert loss.item() == pytest.approx(expected, abs=1e-10)

    @pytest.mark.parametrize("seed", range(3))
    def test_gradient_flows_only_through_class_logits(self, seed):
        rng = np.random.default_rng(700 + seed)
        dl = Tensor(rng.normal(size=(5, 2)))

        def f(x):
            return attentive_entropy_loss(x, dl)

        report = finite_diff_check(f, Tensor(rng.normal(size=(5, 4))))
        assert report.passed, report

    def test_no_gradient_through_domain_logits(self):
        rng = np.random.default_rng(72)
        dl = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        cl = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        attentive_entropy_loss(cl, dl).backward()
        assert dl.grad is None
        assert cl.grad is not None


class TestTotalUdaLoss:
    def test_all_weights_zero_equals_cls(self):
        cls = Tensor(1.234)
        weights = LossWeights(lambda_rna=0, lambda_thna=0, lambda_mec=0, gamma_attentive=0, beta_levels=(0, 0, 0))
        parts = LossParts(cls=cls, rna=Tensor(9.0), mec=Tensor(9.0))
        assert total_uda_loss(parts, weights).item() == 1.234

    def test_rna_only_added(self):
        weights = LossWeights(lambda_rna=1, lambda_thna=0, lambda_mec=0, gamma_attentive=0, beta_levels=(0, 0, 0))
        parts = LossParts(cls=Tensor(2.0), rna=Tensor(0.5))
        assert total_uda_loss(parts, weights).item() == 2.5

    def test_reference_weights_weighted_sum(self):
        weights = LossWeights()
        rng = np.random.default_rng(80)
        vals = rng.normal(size=8)
        parts = LossParts(
            cls=Tensor(vals[0]),
            rna=Tensor(vals[1]),
            adversarial=(Tensor(vals[2]), Tensor(vals[3]), Tensor(vals[4])),
            attentive=Tensor(vals[5]),
            thna=Tensor(vals[6]),
            mec=Tensor(vals[7]),
        )
        expected = (
            vals[0]
            + 1.0 * vals[1]
            + 0.75 * vals[2]
            + 0.75 * vals[3]
            + 0.5 * vals[4]
            + 0.003 * vals[5]
            + 0.0006 * vals[6]
            + 0.01 * vals[7]
        )
        assert total_uda_loss(parts, weights).item() == pytest.approx(expected, abs=1e-12)

    def test_default_weights_are_reference_values(self):
        w = LossWeights()
        assert (w.lambda_rna, w.lambda_thna, w.radius, w.lambda_mec, w.gamma_attentive) == (
            1.0,
            0.0006,
            40.0,
            0.01,
            0.003,
        )
        assert w.beta_levels == (0.75, 0.75, 0.5)

    def test_invalid_weights_rejected(self):
        with pytest.raises(ContractError):
            LossWeights(lambda_rna=-1)
        with pytest.raises(ContractError):
            LossWeights(radius=0)
        with pytest.raises(ContractError):
            LossWeights(beta_levels=(1, 2))
