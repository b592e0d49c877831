import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ttt_linattn.errors import IncompatibleMode, IndexOrder, ShapeMismatch
from ttt_linattn.fastweight import (
    Chunk,
    FastWeightConfig,
    UpdateSchedule,
    init_state,
    random_chunks,
    recurrent_forward,
)
from ttt_linattn.linear_form import (
    EffectiveTerm,
    LinearState,
    cumulative_beta,
    effective_terms_from_trajectory,
    linear_eval,
    lr_momentum_weight,
    momentum_weight,
    rebuild_outputs,
    reconstruction_report,
    variant6_attention,
)
from ttt_linattn.numerics import make_rng, max_abs_diff, max_abs_diff_list, ns_orthogonalize


def run(seed, dims=(3, 5, 4), n=4, L=2, alphas="random", eta=None, **cfg):
    d_k, d_h, d_v = dims
    config = FastWeightConfig(d_k, d_v, d_h, L, **cfg)
    rng = make_rng(seed)
    state = init_state(config, rng)
    chunks = random_chunks(rng, n, L, d_k, d_v, 0.5)
    etas = rng.uniform(0.02, 0.2, n) if eta is None else np.full(n, eta)
    al = rng.uniform(0, 0.95, n) if alphas == "random" else np.full(n, alphas)
    sched = UpdateSchedule(tuple(etas), tuple(al))
    out, traj = recurrent_forward(chunks, state, sched, config)
    return config, sched, chunks, out, traj


def unrolled_momentum_coeffs(etas, alphas):
    # oracle: push a unit gradient through buf_j = g_j + a_j buf_{j-1}, W -= eta_j buf_j
    N = len(etas)
    C = np.zeros((N, N))
    for i in range(N):
        buf, total = 0.0, 0.0
        for j in range(N):
            buf = (1.0 if j == i else 0.0) + (alphas[j] * buf if j > 0 else 0.0)
            total += etas[j] * buf
            C[j, i] = total if j >= i else 0.0
    return C


class TestBeta:
    def test_examples(self):
        al = [0.9, 0.5, 0.25, 0.7]
        assert cumulative_beta(al, 2, 2) == 1.0
        assert cumulative_beta(al, 0, 2) == 0.125

    def test_composition(self):
        al = make_rng(1).uniform(0, 1, 5)
        assert cumulative_beta(al, 0, 3) == pytest.approx(cumulative_beta(al, 0, 1) * cumulative_beta(al, 1, 3), rel=1e-15)

    def test_index_order(self):
        with pytest.raises(IndexOrder):
            cumulative_beta([0.5] * 3, 2, 1)
        with pytest.raises(IndexOrder):
            momentum_weight([0.5] * 3, 2, 1)

    def test_momentum_weight_examples(self):
        assert momentum_weight([0.0] * 4, 1, 3) == 1.0
        assert momentum_weight([0.5] * 3, 0, 2) == 1.75
        assert momentum_weight([0.3] * 3, 2, 2) == 1.0

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=2, max_size=10), st.data())
    def test_two_term_recurrence(self, alphas, data):
        t = data.draw(st.integers(1, len(alphas) - 1))
        i = data.draw(st.integers(0, t - 1))
        lhs = momentum_weight(alphas, i, t)
        rhs = momentum_weight(alphas, i, t - 1) + cumulative_beta(alphas, i, t)
        assert lhs == pytest.approx(rhs, abs=1e-14)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 8), st.integers(0, 10_000))
    def test_lr_weight_matches_unrolled_optimizer(self, n, seed):
        rng = make_rng(seed)
        etas, alphas = rng.uniform(0, 1, n), rng.uniform(0, 1, n)
        C = unrolled_momentum_coeffs(etas, alphas)
        for t in range(n):
            for i in range(t + 1):
                assert lr_momentum_weight(etas, alphas, i, t) == pytest.approx(C[t, i], abs=1e-14)

    def test_lr_weight_collapses_for_constant_eta(self):
        al = [0.5] * 4
        assert lr_momentum_weight([0.3] * 4, al, 0, 3) == pytest.approx(0.3 * momentum_weight(al, 0, 3))

    def test_eta_outside_sum_is_wrong_for_varying_eta(self):
        # eta_i * sum(beta) over-weights later steps when eta changes; kept as a pinned counterexample
        etas, al = [1.0, 0.1], [0.0, 0.5]
        assert lr_momentum_weight(etas, al, 0, 1) == pytest.approx(1.05)
        assert etas[0] * momentum_weight(al, 0, 1) == pytest.approx(1.5)


class TestEffectiveTerms:
    def test_plain_values(self):
        config, sched, chunks, _, traj = run(0, eta=1.0, update_gate_weights=False)
        state = effective_terms_from_trajectory(traj, sched, config, 3)
        for i, term in enumerate(state.terms):
            assert np.array_equal(term.v_hat, chunks[i].v)
            assert term.step_index == i

    def test_grad_sign_flips(self):
        config, sched, chunks, _, traj = run(0, eta=1.0, update_gate_weights=False, grad_sign=-1)
        state = effective_terms_from_trajectory(traj, sched, config, 1)
        assert np.array_equal(state.terms[0].v_hat, -chunks[0].v)

    def test_momentum_weighting(self):
        config, sched, chunks, _, traj = run(0, eta=0.1, alphas=0.5, use_momentum=True)
        state = effective_terms_from_trajectory(traj, sched, config, 2)
        assert max_abs_diff(state.terms[0].v_hat, 1.75 * 0.1 * chunks[0].v) < 1e-15

    def test_query_index(self):
        config, sched, _, _, traj = run(0)
        with pytest.raises(IndexOrder):
            effective_terms_from_trajectory(traj, sched, config, 4)

    def test_terms_must_be_ordered(self):
        z = np.zeros((1, 2))
        with pytest.raises(IndexOrder):
            LinearState(np.zeros((2, 2)), [EffectiveTerm(z, z, 1), EffectiveTerm(z, z, 1)])


class TestLinearEval:
    def test_no_terms(self):
        rng = make_rng(0)
        S0, q = rng.standard_normal((3, 2)), rng.standard_normal((1, 3))
        assert np.array_equal(linear_eval(LinearState(S0), q), q @ S0)

    def test_rank_one(self):
        q, k, v = np.array([[1.0, 2.0]]), np.array([[3.0, -1.0]]), np.array([[0.5, 4.0]])
        out = linear_eval(LinearState(np.zeros((2, 2)), [EffectiveTerm(k, v, 0)]), q)
        assert np.allclose(out, (q @ k.T) * v, atol=0)

    def test_explicit_accumulation(self):
        rng = make_rng(6)
        S0 = rng.standard_normal((4, 3))
        terms = [EffectiveTerm(rng.standard_normal((2, 4)), rng.standard_normal((2, 3)), i) for i in range(3)]
        q = rng.standard_normal((2, 4))
        S = S0.copy()
        for t in terms:
            for r in range(2):
                S += np.outer(t.k_hat[r], t.v_hat[r])
        assert max_abs_diff(linear_eval(LinearState(S0, terms), q), q @ S) < 1e-13

    def test_orth_keeps_scale_outside(self):
        rng = make_rng(8)
        k, v = rng.standard_normal((3, 4)), rng.standard_normal((3, 2))
        term = EffectiveTerm(k, v, 0, scale=0.3)
        assert max_abs_diff(term.outer(True), 0.3 * ns_orthogonalize(k.T @ v)) < 1e-15

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            linear_eval(LinearState(np.zeros((3, 2))), np.zeros((1, 4)))


class TestRebuild:
    def test_single_chunk_theorem1(self):
        for seed in range(10):
            config, sched, _, out, traj = run(seed, n=1)
            assert max_abs_diff_list(out, rebuild_outputs(traj, sched, config, "theorem1")) < 1e-12

    def test_theorem2_dynamic_tokenwise(self):
        config, sched, _, out, traj = run(1, n=8, L=1)
        assert max_abs_diff_list(out, rebuild_outputs(traj, sched, config, "theorem2")) < 1e-10

    def test_theorem3_alpha09(self):
        config, sched, _, out, traj = run(2, n=6, alphas=0.9, use_momentum=True)
        assert max_abs_diff_list(out, rebuild_outputs(traj, sched, config, "theorem3")) < 1e-10

    @settings(max_examples=40, deadline=None)
    @given(
        seed=st.integers(0, 10_000),
        n=st.integers(1, 16),
        L=st.sampled_from([1, 4]),
        dims=st.tuples(st.integers(1, 8), st.integers(1, 8), st.integers(1, 8)),
        momentum=st.booleans(),
        dynamic=st.booleans(),
    )
    def test_sum_form_property(self, seed, n, L, dims, momentum, dynamic):
        config, sched, _, out, traj = run(seed, dims, n, L, use_momentum=momentum, update_gate_weights=dynamic)
        mode = "theorem3" if momentum else "theorem2"
        assert max_abs_diff_list(out, rebuild_outputs(traj, sched, config, mode)) < 1e-10

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000), n=st.integers(1, 12), eta=st.floats(0.02, 0.2))
    def test_lact_muon_constant_eta(self, seed, n, eta):
        config, sched, _, out, traj = run(seed, n=n, eta=eta, alphas=0.0, use_muon=True)
        assert max_abs_diff_list(out, rebuild_outputs(traj, sched, config, "lact")) < 1e-10

    def test_lact_momentum_gap_is_nonzero(self):
        config, sched, _, out, traj = run(3, n=6, use_muon=True, use_momentum=True)
        gap = max_abs_diff_list(out, rebuild_outputs(traj, sched, config, "lact", strict=False))
        assert gap > 1e-6

    def test_alpha_zero_equals_theorem2_exactly(self):
        config, sched, chunks, _, traj = run(4, alphas=0.0, use_momentum=True)
        plain = config.replace(use_momentum=False)
        _, traj_p = recurrent_forward(chunks, _state_from(traj), sched, plain)
        a = rebuild_outputs(traj, sched, config, "theorem3")
        b = rebuild_outputs(traj_p, sched, plain, "theorem2")
        assert all(np.array_equal(x, y) for x, y in zip(a, b))

    @pytest.mark.parametrize("mode,cfg", [
        ("theorem2", dict(use_momentum=True)),
        ("theorem1", dict(use_muon=True)),
        ("theorem3", dict(use_muon=True)),
        ("lact", dict(use_muon=True, use_momentum=True)),
        ("theorem2", dict(use_weight_norm=True)),
        ("bogus", dict()),
    ])
    def test_incompatible_modes(self, mode, cfg):
        config, sched, _, _, traj = run(0, **cfg)
        with pytest.raises(IncompatibleMode):
            rebuild_outputs(traj, sched, config, mode)

    def test_does_not_read_later_weights(self):
        config, sched, _, out, traj = run(5, n=5)
        traj.W1[1:] = [np.full_like(w, np.nan) for w in traj.W1[1:]]
        traj.W1_next = [np.full_like(w, np.nan) for w in traj.W1_next]
        assert max_abs_diff_list(out, rebuild_outputs(traj, sched, config, "theorem2")) < 1e-10

    def test_linear_in_values(self):
        config, sched, chunks, _, traj = run(6, update_gate_weights=False)
        base = rebuild_outputs(traj, sched, config, "theorem2")

        def scaled(c):
            new = [ch._replace(v=c * ch.v) for ch in chunks]
            _, tr = recurrent_forward(new, _state_from(traj), sched, config)
            return rebuild_outputs(tr, sched, config, "theorem2")

        zero = scaled(0.0)
        three = scaled(3.0)
        for o, o3, o0 in zip(base, three, zero):
            assert max_abs_diff(o3 - o0, 3.0 * (o - o0)) < 1e-12

    def test_report_records(self):
        config, sched, _, _, traj = run(7)
        rows = reconstruction_report(traj, sched, config, "theorem2")
        assert [r["step"] for r in rows] == [0, 1, 2, 3]
        assert max(r["max_abs"] for r in rows) < 1e-10
        json.dumps(rows)


def _state_from(traj):
    from ttt_linattn.fastweight import FastWeightState
    return FastWeightState(traj.W0[0], traj.W2[0], traj.W1[0])


class TestVariant6:
    def test_hand_example(self):
        out = variant6_attention([Chunk(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]), np.array([[2.0, 3.0]]))], np.eye(2))
        assert np.array_equal(out[0], [[1.0, 0.0]])

    def test_zero_keys(self):
        rng = make_rng(0)
        W = rng.standard_normal((3, 2))
        chunks = [Chunk(rng.standard_normal((2, 3)), np.zeros((2, 3)), rng.standard_normal((2, 2))) for _ in range(3)]
        for o, c in zip(variant6_attention(chunks, W), chunks):
            assert np.array_equal(o, c.q @ W)

    def test_single_token_rank_one(self):
        rng = make_rng(1)
        q = rng.standard_normal((1, 3))
        v = rng.standard_normal((1, 2))
        W = rng.standard_normal((3, 2))
        out = variant6_attention([Chunk(q, q, v)], W)[0]
        assert max_abs_diff(out, q @ W + (q @ q.T)[0, 0] * v) < 1e-14

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            variant6_attention([Chunk(np.zeros((1, 2)), np.zeros((1, 3)), np.zeros((1, 2)))], np.eye(2))
