import math

import numpy as np
import pytest

from oracles import keep_set_probabilities, two_step_process_law
from tokenpolicy.backbone import TabularPredictor
from tokenpolicy.sampler import (ConstantProvider, PolicyStepParams, ScheduleConfig, StaticProvider,
                                 cfg_logits, generate, n_masked_for, parallel_decode, remask,
                                 static_schedule)
from tokenpolicy.world import MASK, iid_world, tiny_markov_world


def test_static_schedule_values():
    assert static_schedule(ScheduleConfig(T=4), 3).m == 0.0
    assert abs(static_schedule(ScheduleConfig(T=2), 0).m - 0.70711) < 1e-5
    p = static_schedule(ScheduleConfig(T=4, lam=1.0, k=3.0), 1)
    assert p.tau2 == 0.75 and p.w == 1.5 and p.tau1 == 1.0
    assert static_schedule(ScheduleConfig(T=4, lam=0.0), 2).tau2 > 0
    with pytest.raises(ValueError):
        static_schedule(ScheduleConfig(T=4), 4)
    with pytest.raises(ValueError):
        ScheduleConfig(T=0)


def test_cfg_logits():
    l = np.random.default_rng(0).normal(size=(3, 4))
    np.testing.assert_array_equal(cfg_logits(l, l * 2, 0.0), l)
    np.testing.assert_array_equal(cfg_logits(l, l, 5.0), l)
    assert cfg_logits(np.array(2.0), np.array(1.0), 1.5) == 3.5
    with pytest.raises(ValueError):
        cfg_logits(np.zeros(3), np.zeros(4), 1.0)
    with pytest.raises(ValueError):
        cfg_logits(np.zeros(3), np.zeros(3), -1.0)


def test_n_masked_exact_ceiling():
    assert list(n_masked_for(np.cos(np.pi * np.arange(1, 5) / 8), 16)) == [15, 12, 7, 0]
    # 0.25 * 4 must not round up to 2 through floating-point noise
    assert n_masked_for(0.1 + 0.15, 4) == 1
    assert n_masked_for(1.0, 7) == 7 and n_masked_for(0.0, 7) == 0


def test_parallel_decode_nothing_masked(rng):
    v = np.array([[1, 0, 1]])
    v_hat, conf = parallel_decode(v, np.zeros((1, 3, 2)), 1.0, rng)
    np.testing.assert_array_equal(v_hat, v)
    assert np.all(np.isposinf(conf))


def test_parallel_decode_zero_temperature_limit(rng):
    logits = np.tile(np.array([0.1, 2.0, -1.0]), (1000, 1, 1))
    v_hat, _ = parallel_decode(np.full((1000, 1), MASK), logits, 1e-6, rng)
    assert np.all(v_hat == 1)


def test_parallel_decode_softmax_frequency(rng):
    logits = np.tile(np.array([math.log(3.0), 0.0]), (100_000, 1, 1))
    v_hat, conf = parallel_decode(np.full((100_000, 1), MASK), logits, 1.0, rng)
    assert abs((v_hat == 0).mean() - 0.75) < 0.01
    np.testing.assert_allclose(conf[v_hat == 0], math.log(0.75))


def test_confidence_ignores_sampling_temperature(rng):
    logits = np.array([[[1.0, 0.0]]]).repeat(50, axis=0)
    v_hat, conf = parallel_decode(np.full((50, 1), MASK), logits, 3.0, rng)
    logp = logits[0, 0] - np.log(np.exp(logits[0, 0]).sum())
    np.testing.assert_allclose(conf[:, 0], logp[v_hat[:, 0]])


def test_parallel_decode_rejects_bad_inputs(rng):
    with pytest.raises(ValueError):
        parallel_decode(np.full((1, 2), MASK), np.array([[[np.nan, 0], [0, 0]]]), 1.0, rng)
    with pytest.raises(ValueError):
        parallel_decode(np.full((1, 2), MASK), np.zeros((1, 2, 2)), 0.0, rng)


def test_remask_m_zero_keeps_everything(rng):
    v_hat = np.array([[3, 1, 2, 0]])
    out = remask(v_hat, np.log([[0.1, 0.2, 0.3, 0.4]]), 0.0, 1.0, rng)
    np.testing.assert_array_equal(out.tokens, v_hat)


def test_remask_zero_temperature_keeps_top_confidences(rng):
    conf = np.log(np.array([[0.1, 0.5, 0.3, 0.2, 0.9]])).repeat(200, axis=0)
    out = remask(np.arange(5)[None].repeat(200, axis=0), conf, 0.4, 1e-6, rng)
    assert np.all(out.keep == np.array([False, True, True, False, True]))


def test_remask_never_undoes_committed(rng):
    conf = np.array([[np.inf, np.inf, -0.1, -2.0]])
    out = remask(np.array([[0, 1, 1, 0]]), conf, 1.0, 1.0, rng)
    assert out.keep[0, :2].all() and not out.keep[0, 2:].any()


def test_gumbel_top_k_matches_enumerated_pick_orders(rng):
    weights = [1.0, 2.0, 3.0]
    exact = keep_set_probabilities(weights, 2)
    assert abs(exact[frozenset({1, 2})] - 7 / 12) < 1e-12
    n = 200_000
    out = remask(np.zeros((n, 3), dtype=int), np.log(weights)[None].repeat(n, axis=0), 1 / 3, 1.0, rng)
    assert np.all(out.keep.sum(axis=1) == 2)
    codes = out.keep @ np.array([1, 2, 4])
    emp = {frozenset(i for i in range(3) if c >> i & 1): f for c, f in
           zip(*np.unique(codes, return_counts=True))}
    tv = 0.5 * sum(abs(emp.get(k, 0) / n - p) for k, p in exact.items())
    assert tv < 0.01


def test_generate_cosine_masked_counts_and_termination(rng):
    pred = TabularPredictor(iid_world([[0.5, 0.5]], n_tokens=4))
    tokens, traj = generate(pred, StaticProvider(), 4, 0, rng, batch_size=50)
    expected = [math.ceil(4 * math.cos(math.pi * (t + 1) / 8) - 1e-12) for t in range(3)] + [0]
    assert np.all(traj.masked_count == np.array(expected)[:, None])
    assert not np.any(tokens == MASK)


def test_generate_one_step_forces_full_decode(rng):
    pred = TabularPredictor(tiny_markov_world())
    prov = ConstantProvider(PolicyStepParams(0.9, 1.0, 1.0, 0.0))
    tokens, traj = generate(pred, prov, 1, 0, rng, batch_size=10)
    assert not np.any(tokens == MASK) and np.all(traj.actions[0, :, 0] == 0.0)


def test_generate_rejects_invalid_provider_params(rng):
    pred = TabularPredictor(tiny_markov_world())
    with pytest.raises(ValueError):
        generate(pred, ConstantProvider(PolicyStepParams(0.5, -1.0, 1.0, 0.0)), 2, 0, rng, batch_size=2)
    with pytest.raises(ValueError):
        generate(pred, StaticProvider(), 0, 0, rng, batch_size=2)


def test_generate_monotone_commitment(rng):
    pred = TabularPredictor(tiny_markov_world())
    prov = ConstantProvider(PolicyStepParams(1.0, 1.0, 1.0, 1.0))
    # m = 1 asks to re-mask everything; committed tokens must survive anyway
    _, traj = generate(pred, prov, 3, 1, rng, batch_size=20)
    assert np.all(np.diff(traj.masked_count, axis=0) <= 0)


def test_generate_matches_process_oracle_small(rng):
    # 100k draws keep this unit test quick; the acceptance module runs 500k
    pred = TabularPredictor(tiny_markov_world())
    cfg = ScheduleConfig(T=2)
    steps = [tuple(float(x) for x in (p.m, p.tau1, p.tau2, p.w))
             for p in (static_schedule(cfg, t) for t in range(2))]
    law = two_step_process_law(pred, 0, steps)
    assert abs(sum(law.values()) - 1.0) < 1e-12
    tokens, _ = generate(pred, StaticProvider(cfg), 2, 0, rng, batch_size=100_000)
    idx = tokens @ np.array([8, 4, 2, 1])
    emp = np.bincount(idx, minlength=16) / len(tokens)
    exact = np.zeros(16)
    for seq, p in law.items():
        exact[int("".join(map(str, seq)), 2)] = p
    assert 0.5 * np.abs(emp - exact).sum() < 0.02


def test_generate_is_deterministic():
    pred = TabularPredictor(tiny_markov_world())
    a, ta = generate(pred, StaticProvider(), 3, 0, np.random.default_rng(5), batch_size=64)
    b, tb = generate(pred, StaticProvider(), 3, 0, np.random.default_rng(5), batch_size=64)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(ta.actions, tb.actions)


def test_trajectory_csv(tmp_path, rng):
    pred = TabularPredictor(tiny_markov_world())
    _, traj = generate(pred, StaticProvider(), 2, 0, rng, batch_size=3)
    traj.to_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "sample,t,m,tau1,tau2,w,masked_count,logprob,value"
    assert len(lines) == 1 + 3 * 2
