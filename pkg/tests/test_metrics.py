import math

import numpy as np
import pytest
import torch
import torch.nn as nn
import torch.nn.functional as F
from hypothesis import given
from hypothesis import strategies as st

from conftest import blobs, make_toy
from zsfu.data import ImageSet
from zsfu.metrics import (AuditReport, audit, best_threshold, jsd, jsd_rows, l2_outputs, mia_from_losses,
                          mia_success, split_accuracy, ttest_pvalue, ttest_samples)


class Lookup(nn.Module):
    """Returns a fixed logit row per sample; the sample index is stored in pixel (0, 0, 0)."""

    def __init__(self, logits):
        super().__init__()
        self.table = nn.Parameter(torch.as_tensor(logits, dtype=torch.float64))

    def forward(self, x):
        return self.table[x[:, 0, 0, 0].long()]


def index_set(labels):
    n = len(labels)
    x = torch.arange(n, dtype=torch.float64).view(n, 1, 1, 1)
    return ImageSet(x, torch.as_tensor(labels))


BIG = 200.0


class TestSplitAccuracy:
    def test_perfect(self):
        y = [0, 1, 2, 0, 1]
        m = Lookup(F.one_hot(torch.tensor(y), 3).double() * BIG)
        assert split_accuracy(m, index_set(y), {0}) == (100.0, 100.0)

    def test_never_predicts_forgotten(self):
        y = [0, 0, 1, 2]
        logits = torch.zeros(4, 3, dtype=torch.float64)
        logits[:, 1] = BIG
        dr, df = split_accuracy(Lookup(logits), index_set(y), {0})
        assert df == 0.0 and dr == 50.0

    def test_empty_split_is_nan(self):
        m = Lookup(torch.zeros(3, 3))
        dr, df = split_accuracy(m, index_set([1, 2, 1]), {0})
        assert math.isnan(df) and not math.isnan(dr)

    def test_deterministic(self):
        data = blobs(10)
        m = make_toy(3, dtype=torch.float32)
        assert split_accuracy(m, data, {1}) == split_accuracy(m, data, {1})


class TestSimilarity:
    def test_self_zero(self):
        m, data = make_toy(0, dtype=torch.float32), blobs(5)
        assert jsd(m, m, data) == 0.0 and l2_outputs(m, m, data) == 0.0

    def test_disjoint_one_hots(self):
        data = index_set([0, 1])
        a = Lookup([[BIG, 0.0], [BIG, 0.0]])
        b = Lookup([[0.0, BIG], [0.0, BIG]])
        assert jsd(a, b, data) == pytest.approx(0.6931471805599453, rel=1e-12)
        assert l2_outputs(a, b, data) == pytest.approx(1.4142135623730951, rel=1e-12)

    def test_zero_mass_handled(self):
        p = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
        q = torch.tensor([[0.0, 1.0]], dtype=torch.float64)
        assert jsd_rows(p, q).item() == pytest.approx(math.log(2), rel=1e-15)

    @given(seed=st.integers(0, 10_000))
    def test_symmetry_bounds_triangle(self, seed):
        g = torch.Generator().manual_seed(seed)
        data = index_set([0, 1, 2, 0, 1, 2])
        a, b, c = (Lookup(torch.randn(6, 3, generator=g, dtype=torch.float64) * 4) for _ in range(3))
        assert jsd(a, b, data) == pytest.approx(jsd(b, a, data), rel=1e-12, abs=1e-15)
        assert l2_outputs(a, b, data) == pytest.approx(l2_outputs(b, a, data), rel=1e-12)
        assert 0.0 <= jsd(a, b, data) <= math.log(2) + 1e-12
        assert l2_outputs(a, c, data) <= l2_outputs(a, b, data) + l2_outputs(b, c, data) + 1e-12


class TestTTest:
    def test_textbook_separated(self):
        a = [0.90, 0.91, 0.89, 0.90, 0.92, 0.88]
        b = [0.10, 0.11, 0.09, 0.10, 0.12, 0.08]
        r = ttest_samples(a, b)
        # pooled-variance t computed by hand: 0.8 / sqrt(2 * 0.0002 / 6)
        assert r.statistic == pytest.approx(97.97958971132712, rel=1e-9)
        assert r.p_value < 1e-6
        assert r.p_value == pytest.approx(3.0038e-16, rel=1e-3)

    def test_textbook_overlapping(self):
        r = ttest_samples([0.5, 0.7, 0.6, 0.9, 0.4], [0.6, 0.8, 0.75, 0.95, 0.55, 0.65])
        assert r.statistic == pytest.approx(-0.9459316137034024, rel=1e-9)
        assert r.p_value == pytest.approx(0.3688857872523085, rel=1e-6)

    def test_identical_constant(self):
        r = ttest_samples([0.7] * 4, [0.7] * 5)
        assert r.p_value == 1.0 and r.degenerate

    def test_distinct_constant(self):
        r = ttest_samples([0.7] * 4, [0.2] * 4)
        assert r.p_value == 0.0 and r.degenerate

    def test_subnormal_spread_is_degenerate(self):
        r = ttest_samples([0.0, 0.0], [0.0, 5e-324])
        assert r.degenerate and r.p_value in (0.0, 1.0)

    def test_models(self):
        data = blobs(8)
        m = make_toy(0, dtype=torch.float32)
        assert ttest_pvalue(m, m, data).p_value == 1.0
        for stat in ("max_confidence", "loss"):
            p = ttest_pvalue(m, make_toy(1, dtype=torch.float32), data, stat).p_value
            assert 0.0 <= p <= 1.0
        with pytest.raises(ValueError):
            ttest_pvalue(m, m, data, "entropy")

    @pytest.mark.filterwarnings("ignore:Precision loss")
    @given(st.lists(st.floats(0, 1), min_size=2, max_size=20), st.lists(st.floats(0, 1), min_size=2, max_size=20))
    def test_p_in_unit_interval(self, a, b):
        assert 0.0 <= ttest_samples(a, b).p_value <= 1.0

    def test_too_few(self):
        with pytest.raises(ValueError):
            ttest_samples([1.0], [1.0, 2.0])


class TestMIA:
    def test_separable_losses(self):
        member, non = np.linspace(0, 1, 50), np.linspace(2, 3, 50)
        assert best_threshold(member, non) == 1.5
        assert mia_from_losses(member, non) == 100.0

    def test_identical_distributions(self):
        rng = np.random.default_rng(0)
        scores = [mia_from_losses(rng.exponential(size=400), rng.exponential(size=400), seed=s) for s in range(5)]
        assert abs(np.mean(scores) - 50.0) < 3.0

    def test_no_useful_threshold(self):
        assert best_threshold(np.array([5.0, 6.0]), np.array([1.0, 2.0])) == -math.inf

    def test_untrained_model_near_chance(self):
        members, nonmembers = blobs(100, seed=1), blobs(100, seed=2)
        for s in range(3):
            m = make_toy(s, dtype=torch.float32)
            assert 45.0 <= mia_success(m, members, nonmembers, repeats=10, seed=s) <= 55.0

    def test_overfit_model_exposes_members(self):
        g = torch.Generator().manual_seed(0)
        members = ImageSet(torch.randn(40, 1, 6, 6, generator=g), torch.arange(40) % 2)
        nonmembers = ImageSet(torch.randn(40, 1, 6, 6, generator=g), torch.arange(40) % 2)
        torch.manual_seed(0)
        mlp = nn.Sequential(nn.Flatten(), nn.Linear(36, 128), nn.ReLU(), nn.Linear(128, 2))
        opt = torch.optim.Adam(mlp.parameters(), lr=0.01)
        for _ in range(300):
            opt.zero_grad()
            F.cross_entropy(mlp(members.x), members.y).backward()
            opt.step()
        assert mia_success(mlp, members, nonmembers) > 75.0

    def test_errors(self):
        m = make_toy(0, dtype=torch.float32)
        with pytest.raises(ValueError, match="classes"):
            mia_success(m, blobs(5, num_classes=2), blobs(5, num_classes=3))
        with pytest.raises(ValueError):
            mia_from_losses([0.1, 0.2], [0.3, 0.4])


class TestAuditReport:
    def test_audit_and_roundtrip(self, tmp_path):
        train, test = blobs(20, seed=0), blobs(20, seed=1)
        m, o = make_toy(0, dtype=torch.float32), make_toy(1, dtype=torch.float32)
        rep = audit(m, "ours", train, test, [2], oracle=o, origin=o, mia_repeats=3)
        assert rep.jsd > 0 and 0 <= rep.p_value <= 1 and rep.p_value_origin == rep.p_value
        assert rep.mia_Df is not None and rep.mia_Dr is not None
        rep.extra["seed"] = 0
        rep.save(tmp_path / "ours.json")
        back = AuditReport.load(tmp_path / "ours.json")
        assert back == rep
        assert (tmp_path / "ours.csv").read_text().splitlines()[0].startswith("method,")

    @pytest.mark.parametrize("field,value", [("acc_Dr_test", 101.0), ("jsd", -0.1), ("p_value", 1.5),
                                             ("l2", math.inf)])
    def test_invariants(self, field, value):
        rep = AuditReport("x", 50.0, 50.0, 50.0, 50.0)
        setattr(rep, field, value)
        with pytest.raises(ValueError):
            rep.check()
