"""Perplexity, recovery, and the evaluation harness."""

import numpy as np
import pytest

from bridgekit.bridge import BridgeSchedule, TokenSequence
from bridgekit.losses import LossConfig
from bridgekit.metrics import (MetricsReport, evaluate, perplexity,
                               recovery_rate, worker_count)
from bridgekit.models import ModelArch
from bridgekit.prior import EncoderParams, PairedExample
from bridgekit.training import InferenceBundle


class TestRecoveryRate:
    def test_exact_match(self):
        y = TokenSequence([1, 2, 3], 5)
        assert recovery_rate(y, y) == 100.0

    def test_total_mismatch(self):
        a = TokenSequence([1, 2, 3], 5)
        b = TokenSequence([2, 3, 4], 5)
        assert recovery_rate(a, b) == 0.0

    def test_three_of_four(self):
        a = TokenSequence([1, 2, 3, 4], 5)
        b = TokenSequence([1, 2, 3, 0], 5)
        assert recovery_rate(a, b) == 75.0

    def test_masked_positions_ignored(self):
        mask = [True, True, False]
        a = TokenSequence([1, 2, 0], 5, pad_mask=mask)
        b = TokenSequence([1, 2, 4], 5, pad_mask=mask)
        assert recovery_rate(a, b) == 100.0

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            recovery_rate(TokenSequence([1], 5), TokenSequence([1, 2], 5))


class TestPerplexity:
    def test_uniform_equals_vocab_size(self):
        K = 20
        ys = [TokenSequence(np.arange(10) % K, K)]
        tables = [np.full((10, K), 1.0 / K)]
        assert abs(perplexity(tables, ys) - K) < 1e-9

    def test_perfect_predictor_is_one(self):
        y = TokenSequence([3, 1, 4], 6)
        assert abs(perplexity([y.onehot()], [y]) - 1.0) < 1e-9

    def test_pooled_mean_hand_value(self):
        y = TokenSequence([0, 0], 9)
        table = np.zeros((2, 9))
        table[0, 0] = 0.5
        table[0, 1:] = 0.5 / 8
        table[1, 0] = 0.125
        table[1, 1:] = 0.875 / 8
        got = perplexity([table], [y])
        assert abs(got - 4.0) < 1e-9  # exp((log 2 + log 8) / 2)

    def test_equals_exp_cross_entropy(self):
        rng = np.random.default_rng(0)
        tables, ys, nlls = [], [], []
        for _ in range(5):
            n = int(rng.integers(2, 7))
            K = 6
            probs = rng.dirichlet(np.ones(K), size=n)
            y = TokenSequence(rng.integers(0, K, n), K)
            tables.append(probs)
            ys.append(y)
            nlls.extend(-np.log(probs[np.arange(n), y.tokens]))
        assert abs(perplexity(tables, ys) - np.exp(np.mean(nlls))) < 1e-9

    def test_empty_pool_rejected(self):
        with pytest.raises(ValueError):
            perplexity([], [])


class PerfectModel:
    """Predicts the target of whatever sequence it is shown (oracle stub)."""

    def __init__(self, targets_by_length):
        self.targets = targets_by_length

    def predict_batch(self, tokens, mask, cond=None):
        tokens = np.asarray(tokens)
        B, n = tokens.shape
        target = self.targets[n]
        out = np.zeros((B, n, target.vocab_size))
        out[:, np.arange(n), target.tokens] = 1.0
        return out


def oracle_bundle(examples, K=4, d_s=8):
    beta = np.array([1.0, 0.5, 0.0])
    schedule = BridgeSchedule(beta=beta, beta_bar=np.cumprod(beta))
    encoder = EncoderParams(w=np.zeros((d_s, K)), b=np.zeros(K), fitted=True)
    arch = ModelArch(vocab_size=K, d_s=d_s, d_model=16, d_time=8)
    model = PerfectModel({len(ex.y): ex.y for ex in examples})
    return InferenceBundle(model=model, encoder=encoder, schedule=schedule,
                           arch=arch, loss_cfg=LossConfig(),
                           fingerprint="0" * 64, meta={})


class TestEvaluate:
    def _examples(self, lengths, K=4, d_s=8, seed=0):
        rng = np.random.default_rng(seed)
        return [PairedExample(id=f"e{i}", s_features=rng.normal(size=(n, d_s)),
                              y=TokenSequence(rng.integers(0, K, n), K))
                for i, n in enumerate(lengths)]

    def test_perfect_oracle_scores(self):
        # distinct lengths so the stub can key its targets by length
        examples = self._examples([5, 6, 7])
        report = evaluate(oracle_bundle(examples), examples, seed=0,
                          task_tag="cipher")
        stats = report.buckets["All"]
        assert stats.median_recovery_pct == 100.0
        assert abs(stats.perplexity - 1.0) < 1e-9

    def test_prior_baseline_row_present(self):
        examples = self._examples([5, 6, 7])
        report = evaluate(oracle_bundle(examples), examples, seed=0)
        stats = report.buckets["All"]
        assert np.isfinite(stats.prior_perplexity)
        assert 0.0 <= stats.prior_median_recovery_pct <= 100.0

    def test_bucket_counts_partition_all(self):
        examples = self._examples([50, 120, 80, 140])
        report = evaluate(oracle_bundle(examples), examples, seed=0)
        short = report.buckets["Short"].n_examples
        long_ = report.buckets["Long"].n_examples
        assert short + long_ == report.buckets["All"].n_examples == 4

    def test_task_tag_bucket(self):
        examples = self._examples([5, 6])
        report = evaluate(oracle_bundle(examples), examples, seed=0,
                          task_tag="local_context")
        assert "task:local_context" in report.buckets

    def test_empty_split_rejected(self):
        with pytest.raises(ValueError):
            evaluate(oracle_bundle(self._examples([5])), [], seed=0)

    def test_deterministic_across_worker_counts(self, monkeypatch):
        examples = self._examples([5, 6, 7, 8, 9, 10])
        bundle = oracle_bundle(examples)
        monkeypatch.setenv("BRIDGEKIT_THREADS", "1")
        r1 = evaluate(bundle, examples, seed=3)
        monkeypatch.setenv("BRIDGEKIT_THREADS", "4")
        r2 = evaluate(bundle, examples, seed=3)
        assert r1.to_json() == r2.to_json()

    def test_report_serialization(self):
        examples = self._examples([5, 6])
        report = evaluate(oracle_bundle(examples), examples, seed=0,
                          task_tag="cipher")
        txt = report.to_text_table()
        assert "bucket" in txt and "All" in txt
        rows = report.to_csv_rows()
        assert ("All", "perplexity", report.buckets["All"].perplexity) in rows
        assert "All" in report.to_json()


class TestMedianRobustness:
    def test_duplicating_one_example_moves_median_one_step_at_most(self):
        rng = np.random.default_rng(1)
        recs = list(rng.uniform(0, 100, size=9))
        base = float(np.median(recs))
        order = np.sort(recs)
        for dup in recs:
            new = float(np.median(recs + [dup]))
            # the new median sits between the old central order statistics
            k = len(order) // 2
            lo = order[max(k - 1, 0)]
            hi = order[min(k + 1, len(order) - 1)]
            assert min(lo, base) - 1e-12 <= new <= max(hi, base) + 1e-12


class TestWorkerCount:
    def test_env_var_caps(self, monkeypatch):
        monkeypatch.setenv("BRIDGEKIT_THREADS", "2")
        assert worker_count() <= 2
        monkeypatch.setenv("BRIDGEKIT_THREADS", "not-a-number")
        assert worker_count() >= 1
        monkeypatch.delenv("BRIDGEKIT_THREADS")
        assert worker_count() >= 1
