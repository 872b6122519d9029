import math

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given
from hypothesis import strategies as st

from conftest import fd_rel_error, make_toy
from zsfu.data import DeletionRequest
from zsfu.models import flatten_params, load_flat, params_hash
from zsfu.noise import NoiseConfig, forge_forget_proxies
from zsfu.runlog import CsvLog
from zsfu.unlearn import (TRACE_FIELDS, UnlearnError, UnlearnHyper, apply_mask, confusion_loss,
                          distillation_loss, drift_loss, find_y_fake, forget_gradient_scores, gradient_mask,
                          hard_loss, harmonize, kl_teacher_student, mask_from_scores, mask_hash, run_unlearn,
                          unlearn_loss)

LN_TENTH = math.log(0.1)


def onehot_logits(cls, k=10, big=200.0):
    z = torch.zeros(1, k, dtype=torch.float64)
    z[0, cls] = big
    return z


class TestHardLoss:
    def test_certain_prediction(self):
        assert hard_loss(onehot_logits(3), torch.tensor([3])).item() == pytest.approx(0.0, abs=1e-12)

    def test_uniform(self):
        z = torch.zeros(4, 10, dtype=torch.float64)
        assert hard_loss(z, torch.tensor([0, 1, 2, 3])).item() == pytest.approx(4 * LN_TENTH, rel=1e-12)
        assert hard_loss(z, torch.tensor([0, 1, 2, 3]), reduction="mean").item() == pytest.approx(LN_TENTH)

    def test_floor(self):
        z = onehot_logits(0, big=500.0)
        assert hard_loss(z, torch.tensor([1])).item() == -30.0
        assert hard_loss(z, torch.tensor([1]), floor=-5.0).item() == -5.0

    def test_descent_lowers_confidence_on_logistic(self):
        torch.manual_seed(0)
        lin = nn.Linear(3, 2).double()
        x = torch.randn(6, 3, dtype=torch.float64)
        y = torch.zeros(6, dtype=torch.long)
        p0 = torch.softmax(lin(x), 1)[:, 0].detach()
        loss = hard_loss(lin(x), y)
        loss.backward()
        with torch.no_grad():
            for p in lin.parameters():
                p -= 0.1 * p.grad
        assert torch.softmax(lin(x), 1)[:, 0].sum() < p0.sum()

    def test_unknown_reduction(self):
        with pytest.raises(ValueError):
            hard_loss(torch.zeros(1, 2), torch.tensor([0]), reduction="max")


class TestYFake:
    @pytest.mark.parametrize("probs,y,expect", [((0.1, 0.6, 0.3), 1, 2), ((0.5, 0.5), 0, 1),
                                                ((0.4, 0.3, 0.3), 0, 1)])
    def test_examples(self, probs, y, expect):
        p = torch.tensor([probs], dtype=torch.float64)
        assert find_y_fake(p, torch.tensor([y])).item() == expect
        assert find_y_fake(p.log(), torch.tensor([y])).item() == expect

    def test_does_not_mutate(self):
        p = torch.tensor([[0.2, 0.8]])
        find_y_fake(p, torch.tensor([1]))
        assert p[0, 1].item() == pytest.approx(0.8)


class TestConfusionLoss:
    def test_certain(self):
        assert confusion_loss(onehot_logits(4), torch.tensor([4])).item() == pytest.approx(0.0, abs=1e-12)

    def test_uniform(self):
        z = torch.zeros(1, 10, dtype=torch.float64)
        assert confusion_loss(z, torch.tensor([7])).item() == pytest.approx(-LN_TENTH, rel=1e-12)

    def test_brute_force(self):
        z = torch.randn(5, 4, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
        y = torch.tensor([0, 1, 2, 3, 0])
        yf = find_y_fake(z, y)
        expect = 0.0
        for i in range(5):
            row = [math.exp(v) for v in z[i].tolist()]
            expect -= math.log(row[int(yf[i])] / sum(row))
        assert confusion_loss(z, yf).item() == pytest.approx(expect, rel=1e-12)


class TestDistillation:
    def test_self_is_zero(self):
        z = torch.randn(3, 5, dtype=torch.float64)
        assert distillation_loss(z, [z, z], 4.0).item() == pytest.approx(0.0, abs=1e-14)

    def test_uniform_teacher_hand_oracle(self):
        # sum_i (1/3) log((1/3) / p_i) with p = (0.99, 0.005, 0.005), evaluated at 30 digits
        student = torch.tensor([[0.99, 0.005, 0.005]], dtype=torch.float64).log()
        teacher = torch.zeros(1, 3, dtype=torch.float64)
        assert distillation_loss(student, [teacher], 1.0).item() == pytest.approx(2.4369494009817486, rel=1e-12)

    def test_mean_over_teachers(self):
        g = torch.Generator().manual_seed(3)
        s, t1, t2 = (torch.randn(4, 6, generator=g, dtype=torch.float64) for _ in range(3))
        expect = (kl_teacher_student(t1, s, 2.0) + kl_teacher_student(t2, s, 2.0)) / 2
        assert distillation_loss(s, [t1, t2], 2.0).item() == pytest.approx(expect.item(), rel=1e-14)

    @given(seed=st.integers(0, 10_000), temp=st.floats(0.1, 10.0))
    def test_nonnegative(self, seed, temp):
        g = torch.Generator().manual_seed(seed)
        s, t = torch.randn(3, 4, generator=g, dtype=torch.float64), torch.randn(3, 4, generator=g, dtype=torch.float64)
        assert distillation_loss(s, [t], temp).item() >= -1e-12

    def test_bad_temperature(self):
        with pytest.raises(ValueError):
            distillation_loss(torch.zeros(1, 2), [torch.zeros(1, 2)], 0.0)


class TestUnlearnLoss:
    def setup_method(self):
        g = torch.Generator().manual_seed(5)
        self.z = torch.randn(4, 5, generator=g, dtype=torch.float64)
        self.t = [torch.randn(4, 5, generator=g, dtype=torch.float64)]
        self.y = torch.tensor([0, 0, 0, 0])

    def test_zero_weights_is_hard(self):
        total, _ = unlearn_loss(self.z, self.y, self.t, UnlearnHyper(mu_c=0.0, mu_d=0.0))
        assert total.item() == hard_loss(self.z, self.y).item()

    def test_component_sum(self):
        total, parts = unlearn_loss(self.z, self.y, self.t, UnlearnHyper(mu_c=0.5, mu_d=0.5))
        expect = parts["L_hard"] + 0.5 * (parts["L_confusion"] + parts["L_distillation"])
        assert total.item() == pytest.approx(expect, rel=1e-14)
        assert math.isfinite(total.item())

    def test_switches(self):
        total, parts = unlearn_loss(self.z, self.y, self.t, UnlearnHyper(use_hard=False, use_distillation=False))
        assert total.item() == pytest.approx(0.5 * parts["L_confusion"], rel=1e-14)

    @pytest.mark.parametrize("kw", [dict(mu_c=-1.0), dict(temp=0.0), dict(n_teachers=0), dict(mask_quantile=0.0)])
    def test_hyper_validation(self, kw):
        with pytest.raises(ValueError):
            UnlearnHyper(**kw)


class TestDrift:
    def test_examples(self):
        v = torch.tensor([1.0, 2.0])
        assert drift_loss(v, v).item() == 0.0
        assert drift_loss(torch.tensor([3.0, 4.0]), torch.zeros(2)).item() == 12.5

    def test_gradient_is_difference(self):
        g = torch.Generator().manual_seed(0)
        cur = torch.randn(20, generator=g, dtype=torch.float64).requires_grad_(True)
        ref = torch.randn(20, generator=g, dtype=torch.float64)
        (grad,) = torch.autograd.grad(drift_loss(cur, ref), cur)
        torch.testing.assert_close(grad, (cur - ref).detach(), rtol=0, atol=0)
        eps = 1e-6
        for i in range(0, 20, 5):
            e = torch.zeros(20, dtype=torch.float64)
            e[i] = eps
            num = (drift_loss(cur.detach() + e, ref) - drift_loss(cur.detach() - e, ref)).item() / (2 * eps)
            assert num == pytest.approx(grad[i].item(), abs=1e-6)

    def test_mismatch(self):
        with pytest.raises(ValueError):
            drift_loss(torch.zeros(2), torch.zeros(3))


class TestFiniteDifferences:
    """Autograd vs central differences on a 119-parameter toy model."""

    def test_hard(self, toy, toy_batch):
        x, y = toy_batch
        assert fd_rel_error(toy, lambda: hard_loss(toy(x), y)) < 1e-4

    def test_confusion(self, toy, toy_batch):
        x, y = toy_batch
        yf = find_y_fake(toy(x), y)
        assert fd_rel_error(toy, lambda: confusion_loss(toy(x), yf)) < 1e-4

    def test_distillation(self, toy, toy_batch):
        x, _ = toy_batch
        with torch.no_grad():
            t = [make_toy(7)(x), make_toy(8)(x)]
        assert fd_rel_error(toy, lambda: distillation_loss(toy(x), t, 4.0)) < 1e-4

    def test_drift(self, toy):
        ref = flatten_params(toy).detach() + 0.1

        def loss():
            return drift_loss(torch.cat([p.reshape(-1) for p in toy.parameters()]), ref)
        assert fd_rel_error(toy, loss) < 1e-4

    def test_composite(self, toy, toy_batch):
        x, y = toy_batch
        yf = find_y_fake(toy(x), y)
        with torch.no_grad():
            t = [make_toy(9)(x)]
        assert fd_rel_error(toy, lambda: unlearn_loss(toy(x), y, t, UnlearnHyper(), yf)[0]) < 1e-4


def _sort_quantile(values, q):
    s = sorted(values)
    pos = q * (len(s) - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, len(s) - 1)
    return s[lo] + (pos - lo) * (s[hi] - s[lo])


class TestMasking:
    def test_one_to_ten(self):
        scores = torch.tensor([3.0, 10.0, 1.0, 7.0, 2.0, 9.0, 4.0, 8.0, 5.0, 6.0])
        mask = mask_from_scores(scores, quantile=0.9)
        assert mask.tolist() == [1, 0, 1, 1, 1, 1, 1, 1, 1, 1]

    def test_threshold_extremes(self):
        scores = torch.rand(50)
        assert mask_from_scores(scores, threshold=2.0).sum() == 50
        assert mask_from_scores(scores, threshold=scores.min().item()).sum() == 0

    @given(n=st.integers(2, 200), q=st.floats(0.01, 0.99), seed=st.integers(0, 10_000))
    def test_quantile_vs_sort_oracle(self, n, q, seed):
        scores = torch.rand(n, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
        thr = _sort_quantile(scores.tolist(), q)
        expect = [1.0 if v < thr else 0.0 for v in scores.tolist()]
        assert mask_from_scores(scores, quantile=q).tolist() == expect

    def test_exactly_one_selector(self):
        with pytest.raises(ValueError):
            mask_from_scores(torch.rand(3))
        with pytest.raises(ValueError):
            mask_from_scores(torch.rand(3), quantile=0.5, threshold=0.5)

    def test_hadamard(self):
        g = torch.Generator().manual_seed(0)
        v = torch.randn(100, generator=g, dtype=torch.float64)
        m = (torch.rand(100, generator=g) < 0.5).double()
        np.testing.assert_array_equal(apply_mask(v, m).numpy(), [a * b for a, b in zip(v.tolist(), m.tolist())])
        assert torch.equal(apply_mask(v, torch.ones(100, dtype=torch.float64)), v)
        assert torch.count_nonzero(apply_mask(v, torch.zeros(100, dtype=torch.float64))) == 0
        with pytest.raises(ValueError):
            apply_mask(v, torch.ones(99, dtype=torch.float64))

    def test_hash_stable(self):
        m = mask_from_scores(torch.arange(20.0), quantile=0.5)
        assert mask_hash(m) == mask_hash(m.clone())
        flipped = m.clone()
        flipped[0] = 1 - flipped[0]
        assert mask_hash(flipped) != mask_hash(m)

    def test_scores_from_model(self, toy, forget_bundle):
        h = params_hash(toy)
        scores = forget_gradient_scores(toy, forget_bundle)
        assert scores.shape == flatten_params(toy).shape and bool((scores >= 0).all())
        assert params_hash(toy) == h
        mask = gradient_mask(toy, forget_bundle, 0.9)
        assert set(mask.unique().tolist()) <= {0.0, 1.0}

    def test_empty_bundle(self, toy, forget_bundle):
        forget_bundle.matrices.clear()
        with pytest.raises(ValueError):
            forget_gradient_scores(toy, forget_bundle)


class TestHarmonize:
    def test_orthogonal(self):
        h = harmonize(torch.tensor([1.0, 0.0]), torch.tensor([0.0, 1.0]))
        assert h.g_f.tolist() == [1.0, 0.0] and h.G.tolist() == [1.0, 1.0] and not h.projected

    def test_antiparallel(self):
        h = harmonize(torch.tensor([-1.0, 0.0]), torch.tensor([1.0, 0.0]))
        assert h.g_f.tolist() == [0.0, 0.0] and h.G.tolist() == [1.0, 0.0] and h.projected

    def test_hand_projection(self):
        h = harmonize(torch.tensor([1.0, -1.0]), torch.tensor([0.0, 1.0]))
        assert h.g_f.tolist() == [1.0, 0.0] and h.G.tolist() == [1.0, 1.0]
        assert torch.dot(h.g_f, torch.tensor([0.0, 1.0])).item() == 0.0

    def test_zero_retain_gradient_skips(self):
        h = harmonize(torch.tensor([1.0, 2.0]), torch.zeros(2))
        assert h.skipped and math.isnan(h.cos) and h.g_f.tolist() == [1.0, 2.0]

    def test_random_pairs(self):
        g = torch.Generator().manual_seed(0)
        for i in range(1200):
            dim = 2 + i % 50
            gf = torch.randn(dim, generator=g, dtype=torch.float64)
            gr = torch.randn(dim, generator=g, dtype=torch.float64) * 10 ** float(i % 5 - 2)
            h = harmonize(gf, gr)
            cos = torch.dot(h.g_f, gr) / (torch.linalg.vector_norm(h.g_f) * torch.linalg.vector_norm(gr) + 1e-300)
            assert cos.item() >= -1e-9
            assert torch.linalg.vector_norm(h.g_f) <= torch.linalg.vector_norm(gf) * (1 + 1e-12)
            torch.testing.assert_close(h.G, h.g_f + gr, rtol=0, atol=0)
            # idempotent once resolved
            torch.testing.assert_close(harmonize(h.g_f, gr).g_f, h.g_f, rtol=0, atol=1e-12)
            # antiparallel input cancels fully
            assert torch.linalg.vector_norm(harmonize(-2.5 * gr, gr).g_f) <= 1e-9 * torch.linalg.vector_norm(gr)
            # orthogonal input passes through
            orth = gf - torch.dot(gf, gr) / torch.dot(gr, gr) * gr
            torch.testing.assert_close(harmonize(orth, gr).g_f, orth, rtol=0, atol=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            harmonize(torch.zeros(2), torch.zeros(3))


@pytest.fixture
def forget_bundle(toy):
    return forge_forget_proxies(toy, [DeletionRequest(0, {1})],
                                NoiseConfig(epochs=3, batch_size=4, samples_per_class=8), (1, 6, 6))


class TestRunUnlearn:
    def test_zero_epochs(self, toy, forget_bundle):
        h = params_hash(toy)
        ref = flatten_params(toy).clone()
        out = run_unlearn(toy, ref, [make_toy(5)], forget_bundle, UnlearnHyper(epochs=0, use_mask=False))
        assert params_hash(toy) == h and torch.equal(out, ref)

    def test_plain_gradient_descent_equivalence(self, toy, forget_bundle):
        hyper = UnlearnHyper(mu_c=0.0, mu_d=0.0, lr=0.01, epochs=2, use_harmonize=False)
        ref = flatten_params(toy).clone()
        ones = torch.ones_like(ref)
        expect = make_toy(0)
        load_flat(expect, ref)
        params = list(expect.parameters())
        for _ in range(2):
            for x, y in forget_bundle.batches():
                grads = torch.autograd.grad(hard_loss(expect(x), y), params)
                w = flatten_params(expect)
                g = torch.cat([gr.reshape(-1) for gr in grads]) + (w - ref)
                load_flat(expect, w - 0.01 * g)
        out = run_unlearn(toy, ref, [], forget_bundle, hyper, mask=ones)
        torch.testing.assert_close(out, flatten_params(expect), rtol=0, atol=1e-12)

    def test_forgets_and_traces(self, toy, forget_bundle):
        ref = flatten_params(toy).clone()
        hyper = UnlearnHyper(lr=0.05, epochs=5, reduction="mean", mask_quantile=0.9)
        mask = gradient_mask(toy, forget_bundle, hyper.mask_quantile)
        x = forget_bundle.matrices[0].values
        before = torch.softmax(toy(x), 1)[:, 1].mean().item()
        trace = CsvLog(None, TRACE_FIELDS)
        run_unlearn(toy, ref, [make_toy(11)], forget_bundle, hyper, mask, trace)
        assert torch.softmax(toy(x), 1)[:, 1].mean().item() < before
        assert len(trace.rows) == 5 * 2
        assert set(trace.rows[0]) == set(TRACE_FIELDS)
        assert trace.rows[0]["L_drift"] == 0.0 and trace.rows[-1]["L_drift"] > 0

    def test_mask_required(self, toy, forget_bundle):
        with pytest.raises(ValueError):
            run_unlearn(toy, flatten_params(toy), [], forget_bundle, UnlearnHyper(epochs=1))

    def test_frozen_y_fake_needs_reference(self, toy, forget_bundle):
        with pytest.raises(ValueError):
            run_unlearn(toy, flatten_params(toy), [], forget_bundle,
                        UnlearnHyper(epochs=1, use_mask=False, freeze_y_fake=True))

    def test_nonfinite_update_names_batch(self, toy, forget_bundle):
        ref = flatten_params(toy).clone()
        ref[0] = float("nan")
        with pytest.raises(UnlearnError, match="batch 0"):
            run_unlearn(toy, ref, [], forget_bundle, UnlearnHyper(epochs=1, use_mask=False))
