import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ttt_linattn.errors import ShapeMismatch, UnsupportedConfig
from ttt_linattn.fastweight import FastWeightConfig, UpdateSchedule, init_state, random_chunks, recurrent_forward
from ttt_linattn.numerics import make_rng, max_abs_diff, max_abs_diff_list
from ttt_linattn.parallel import (
    THREADS_ENV,
    ParallelPlan,
    ScanElement,
    build_lr_momentum_mask,
    build_momentum_mask,
    default_threads,
    demonstrate_non_associativity,
    expand_mask,
    inclusive_scan,
    momentum_mask_column_check,
    parallel_eligible,
    parallel_forward,
    parallel_forward_bilinear,
    parallel_forward_bilinear_dense,
    parallel_forward_scan,
    scan_combine,
    scan_identity,
    scan_leaf,
)


def case(seed, dims=(4, 6, 5), n=8, L=4, alphas="random", eta=None, **cfg):
    d_k, d_h, d_v = dims
    cfg.setdefault("update_gate_weights", False)
    config = FastWeightConfig(d_k, d_v, d_h, L, **cfg)
    rng = make_rng(seed)
    state = init_state(config, rng)
    chunks = random_chunks(rng, n, L, d_k, d_v, 0.5)
    etas = rng.uniform(0.02, 0.2, n) if eta is None else np.full(n, float(eta))
    al = rng.uniform(0, 0.95, n) if alphas == "random" else np.full(n, float(alphas))
    return config, state, chunks, UpdateSchedule(tuple(etas), tuple(al))


def rand_elem(rng, shape=(3, 2)):
    return ScanElement(rng.standard_normal(shape), rng.standard_normal(shape), rng.uniform(), rng.uniform())


def elem_diff(x, y):
    return max(max_abs_diff(x.P, y.P), max_abs_diff(x.S, y.S), abs(x.a - y.a), abs(x.b - y.b))


class TestMasks:
    def test_alpha_zero_is_causal_mask(self):
        # every past gradient keeps weight 1 in the state sum, so alpha = 0 gives all ones below the diagonal
        assert np.array_equal(build_momentum_mask([0.0] * 4, 4), np.tril(np.ones((4, 4))))

    def test_alpha_one_counts(self):
        C = build_momentum_mask([1.0] * 4, 4)
        for t in range(4):
            for i in range(4):
                assert C[t, i] == (t - i + 1 if t >= i else 0)

    def test_alpha_half(self):
        assert np.allclose(build_momentum_mask([0.5] * 3, 3), [[1, 0, 0], [1.5, 1, 0], [1.75, 1.5, 1]], atol=0)

    def test_lower_triangular_unit_diagonal(self):
        C = build_momentum_mask(make_rng(0).uniform(0, 1, 6), 6)
        assert np.array_equal(np.triu(C, 1), np.zeros((6, 6)))
        assert np.array_equal(np.diag(C), np.ones(6))

    def test_column_consistency(self):
        al = make_rng(1).uniform(0, 1, 7)
        assert momentum_mask_column_check(al, 7) < 1e-15

    def test_lr_mask_constant_eta_is_scaled_mask(self):
        al = make_rng(2).uniform(0, 1, 5)
        assert max_abs_diff(build_lr_momentum_mask([0.3] * 5, al, 5), 0.3 * build_momentum_mask(al, 5)) < 1e-15

    def test_lr_mask_entries(self):
        etas, al = [1.0, 0.1, 2.0], [0.0, 0.5, 0.5]
        C = build_lr_momentum_mask(etas, al, 3)
        assert C[2, 0] == pytest.approx(1.0 + 0.1 * 0.5 + 2.0 * 0.25)
        assert C[2, 1] == pytest.approx(0.1 + 2.0 * 0.5)

    def test_expand(self):
        C = make_rng(3).standard_normal((2, 2))
        assert np.array_equal(expand_mask(C, 1), C)
        E = expand_mask(np.eye(2), 2)
        assert np.array_equal(E, np.kron(np.eye(2), np.ones((2, 2))))
        E3 = expand_mask(C, 3)
        for a in range(2):
            for b in range(2):
                assert np.all(E3[3 * a : 3 * a + 3, 3 * b : 3 * b + 3] == C[a, b])


class TestScanMonoid:
    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31))
    def test_identity(self, seed):
        x = rand_elem(make_rng(seed))
        e = scan_identity(x.P.shape)
        assert elem_diff(scan_combine(x, e), x) == 0.0
        assert elem_diff(scan_combine(e, x), x) == 0.0

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31))
    def test_associative(self, seed):
        rng = make_rng(seed)
        a, b, c = rand_elem(rng), rand_elem(rng), rand_elem(rng)
        assert elem_diff(scan_combine(scan_combine(a, b), c), scan_combine(a, scan_combine(b, c))) < 1e-13

    def test_fold_matches_mask(self):
        rng = make_rng(4)
        N = 6
        etas, al = rng.uniform(0.1, 1, N), rng.uniform(0, 1, N)
        X = [rng.standard_normal((2, 2)) for _ in range(N)]
        scanned = inclusive_scan([scan_leaf(X[t], etas[t], al[t]) for t in range(N)], scan_combine)
        C = build_lr_momentum_mask(etas, al, N)
        for t in range(N):
            direct = sum(C[t, i] * X[i] for i in range(t + 1))
            assert max_abs_diff(scanned[t].S, direct) < 1e-13

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            scan_combine(scan_identity((2, 2)), scan_identity((2, 3)))

    @pytest.mark.parametrize("parts", [2, 3, 5, 20])
    def test_partition_independence(self, parts):
        rng = make_rng(9)
        leaves = [scan_leaf(rng.standard_normal((3, 3)), rng.uniform(), rng.uniform()) for _ in range(11)]
        one = inclusive_scan(leaves, scan_combine)
        many = inclusive_scan(leaves, scan_combine, partitions=parts, threads=2)
        assert max(elem_diff(x, y) for x, y in zip(one, many)) < 1e-12

    def test_empty(self):
        assert inclusive_scan([], scan_combine) == []


class TestBilinear:
    def test_zero_lr(self):
        config, state, chunks, _ = case(0)
        sched = UpdateSchedule.constant(8, 0.0)
        plan = ParallelPlan.from_config(config, sched, "bilinear")
        out = parallel_forward_bilinear(chunks, state.W1, state.W0, state.W2, plan)
        ref, _ = recurrent_forward(chunks, state, sched, config)
        assert max_abs_diff_list(out, ref) == 0.0

    def test_single_chunk(self):
        config, state, chunks, sched = case(1, n=1)
        ref, _ = recurrent_forward(chunks, state, sched, config)
        assert max_abs_diff_list(parallel_forward(chunks, state, sched, config, "bilinear"), ref) < 1e-12

    def test_reference_example(self):
        config, state, chunks, sched = case(7, alphas=0.7, use_momentum=True)
        ref, _ = recurrent_forward(chunks, state, sched, config)
        assert max_abs_diff_list(parallel_forward(chunks, state, sched, config, "bilinear"), ref) < 1e-8

    def test_tiled_equals_dense(self):
        config, state, chunks, sched = case(8, use_momentum=True)
        plan = ParallelPlan.from_config(config, sched, "bilinear")
        a = parallel_forward_bilinear(chunks, state.W1, state.W0, state.W2, plan)
        b = parallel_forward_bilinear_dense(chunks, state.W1, state.W0, state.W2, plan)
        assert max_abs_diff_list(a, b) < 1e-13

    @pytest.mark.parametrize("cfg", [
        dict(update_gate_weights=True),
        dict(use_weight_norm=True),
        dict(use_muon=True),
    ])
    def test_rejects_ineligible(self, cfg):
        config, state, chunks, sched = case(0, **cfg)
        assert not parallel_eligible(config, "bilinear")
        with pytest.raises(UnsupportedConfig):
            parallel_forward(chunks, state, sched, config, "bilinear")

    def test_scan_accepts_muon(self):
        config, *_ = case(0, use_muon=True)
        assert parallel_eligible(config, "scan")


class TestThreeWay:
    @settings(max_examples=50, deadline=None)
    @given(
        seed=st.integers(0, 10_000),
        n=st.integers(1, 16),
        L=st.integers(1, 8),
        dims=st.tuples(st.integers(1, 8), st.integers(1, 8), st.integers(1, 8)),
        momentum=st.booleans(),
        per_token_lr=st.booleans(),
        qk=st.booleans(),
        sign=st.sampled_from([1, -1]),
    )
    def test_agreement(self, seed, n, L, dims, momentum, per_token_lr, qk, sign):
        config, state, chunks, sched = case(
            seed, dims, n, L, eta=None if per_token_lr else 0.1,
            use_momentum=momentum, replace_q_with_k=qk, grad_sign=sign,
        )
        ref, _ = recurrent_forward(chunks, state, sched, config, record=False)
        bil = parallel_forward(chunks, state, sched, config, "bilinear")
        scan = parallel_forward(chunks, state, sched, config, "scan")
        assert max_abs_diff_list(ref, bil) < 1e-8
        assert max_abs_diff_list(ref, scan) < 1e-8
        assert max_abs_diff_list(bil, scan) < 1e-12

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000), n=st.integers(1, 16), momentum=st.booleans())
    def test_buffer_orth_scan_matches_muon_recurrence(self, seed, n, momentum):
        config, state, chunks, sched = case(seed, n=n, use_muon=True, use_momentum=momentum)
        ref, _ = recurrent_forward(chunks, state, sched, config, record=False)
        assert max_abs_diff_list(ref, parallel_forward(chunks, state, sched, config, "scan")) < 1e-8

    def test_per_term_orth_unit_lr(self):
        config, state, chunks, sched = case(10, eta=1.0, alphas=0.0, use_muon=True)
        ref, _ = recurrent_forward(chunks, state, sched, config)
        plan = ParallelPlan.from_config(config.replace(use_muon=False), sched, "scan")
        out = parallel_forward_scan(chunks, state.W1, state.W0, state.W2, plan, per_term_orth=True)
        assert max_abs_diff_list(ref, out) < 1e-10

    def test_alpha_zero_plain_accumulation(self):
        config, state, chunks, sched = case(11, alphas=0.0, use_momentum=True)
        plan = ParallelPlan.from_config(config, sched, "scan")
        out = parallel_forward_scan(chunks, state.W1, state.W0, state.W2, plan)
        from ttt_linattn.fastweight import swiglu_phi
        S = state.W1.copy()
        for t, c in enumerate(chunks):
            S = S + sched.etas[t] * swiglu_phi(c.k, state.W0, state.W2).T @ c.v
            assert max_abs_diff(out[t], swiglu_phi(c.q, state.W0, state.W2) @ S) < 1e-13

    def test_both_orth_modes_rejected(self):
        config, state, chunks, sched = case(0, use_muon=True)
        plan = ParallelPlan.from_config(config, sched, "scan")
        with pytest.raises(UnsupportedConfig):
            parallel_forward_scan(chunks, state.W1, state.W0, state.W2, plan, per_term_orth=True)


class TestPartitions:
    @pytest.mark.parametrize("strategy", ["bilinear", "scan"])
    def test_independent_of_partitioning(self, strategy):
        config, state, chunks, sched = case(12, n=13, use_momentum=True)
        one = parallel_forward(chunks, state, sched, config, strategy, partitions=1)
        again = parallel_forward(chunks, state, sched, config, strategy, partitions=1)
        assert all(np.array_equal(x, y) for x, y in zip(one, again))
        for parts in (2, 4, 13):
            many = parallel_forward(chunks, state, sched, config, strategy, partitions=parts, threads=3)
            assert max_abs_diff_list(one, many) < 1e-12

    def test_threads_env(self, monkeypatch):
        monkeypatch.setenv(THREADS_ENV, "3")
        assert default_threads() == 3
        monkeypatch.setenv(THREADS_ENV, "junk")
        assert default_threads() == 1

    def test_plan_validation(self):
        with pytest.raises(UnsupportedConfig):
            ParallelPlan(N=2, L=1, etas=(0.1,), alphas=(0.0, 0.0))
        with pytest.raises(UnsupportedConfig):
            ParallelPlan(N=1, L=1, etas=(0.1,), alphas=(0.0,), strategy="fft")
        with pytest.raises(UnsupportedConfig):
            ParallelPlan(N=1, L=1, etas=(0.1,), alphas=(0.0,), partitions=0)


class TestNonAssociativity:
    base = FastWeightConfig(4, 4, 8, 2, update_gate_weights=False)

    def test_weight_norm_gap(self):
        gaps = [demonstrate_non_associativity(self.base.replace(use_weight_norm=True), s).gap for s in range(100)]
        assert sum(g > 1e-3 for g in gaps) >= 95

    def test_dynamic_kernel_gap(self):
        cfg = self.base.replace(update_gate_weights=True)
        gaps = [demonstrate_non_associativity(cfg, s, eta=0.1).gap for s in range(100)]
        assert sum(g > 1e-3 for g in gaps) >= 95

    def test_control(self):
        for s in range(20):
            rep = demonstrate_non_associativity(self.base, s)
            assert rep.gap < 1e-10
            assert rep.reducible
