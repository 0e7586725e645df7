import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pkgx.env import WalkEnv
from pkgx.kg import Hypothesis, load_triples, node_surprisal
from pkgx.reward import (
    CurriculumSchedule,
    RewardBreakdown,
    RewardEngine,
    RewardWeights,
    fidelity,
    gate_reward,
    path_reward,
    persona_reward,
    relevance,
    select_explanation,
    tau,
)


class SpyRater:
    def __init__(self, value=(0.8, 0.8, 0.8)):
        self.value = value
        self.calls = []

    def __call__(self, path):
        self.calls.append(path)
        return self.value


def wide_env():
    """Chain a->x->o plus many unrelated edges, so x (frequency 2) has surprisal > 0.9."""
    lines = ["a\tr\tx", "x\tr\to", "a\tq\tm", "m\tq\tm2", "m2\tq\to"]
    lines += [f"n{i}\tq\tn{i + 1}" for i in range(700)]
    return WalkEnv(load_triples(lines), t_max=3, inverse_edges=False)


def test_fidelity_cases(toy_env):
    h = Hypothesis("a", "r", "c")
    assert fidelity(toy_env, toy_env.make_path(h, [("r", "b"), ("r", "c")])) == 1
    assert fidelity(toy_env, toy_env.make_path(h, [("r", "b")])) == 0
    assert fidelity(toy_env, toy_env.make_path(h, [("r", "c"), ("STAY", "c")])) == 1


def test_relevance_cases(toy_env):
    sb = math.log(4) / math.log(8)
    sc = math.log(8 / 3) / math.log(8)
    h = Hypothesis("a", "r", "c")
    assert relevance(toy_env, toy_env.make_path(h, [("r", "b"), ("r", "c")])) == pytest.approx(sb, abs=1e-15)
    assert relevance(toy_env, toy_env.make_path(h, [("r", "c")])) == 0.0
    hd = Hypothesis("a", "r", "d")
    p = toy_env.make_path(hd, [("r", "b"), ("r", "c"), ("r", "d")])
    assert relevance(toy_env, p) == pytest.approx((sb + sc) / 2, abs=1e-15)
    assert relevance(toy_env, p) == pytest.approx(0.5692, abs=1e-4)
    # STAY repeats of an intermediate are counted once
    p2 = toy_env.make_path(h, [("r", "b"), ("STAY", "b"), ("r", "c")])
    assert relevance(toy_env, p2) == pytest.approx(sb, abs=1e-15)


def test_tau_schedule():
    s = CurriculumSchedule(warmup_steps=2000)
    assert tau(s, 0) == 0.5
    assert tau(s, 1000) == pytest.approx(0.7, abs=1e-15)
    assert tau(s, 2000) == 0.9 and tau(s, 10**6) == 0.9
    assert tau(s.freeze(0.63), 5) == 0.63
    vals = [tau(s, t) for t in range(0, 2500, 7)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))
    with pytest.raises(ValueError):
        CurriculumSchedule(tau_0=0.4)


def test_persona_reward_cases():
    assert persona_reward((1, 1, 1)) == 1.0
    assert persona_reward((0.6, 0.9, 0.3)) == pytest.approx(0.6, abs=1e-12)
    assert persona_reward((0, 0, 0)) == 0.0
    with pytest.raises(ValueError):
        persona_reward((1.2, 0, 0))
    with pytest.raises(ValueError):
        RewardWeights(0.5, 0.5, 0.5)


def test_gate_reward_literal_cases():
    calls = []

    def top():
        calls.append(1)
        return persona_reward((0.8, 0.8, 0.8))

    assert gate_reward(1, 0.95, 0.9, top) == 0.8 and len(calls) == 1
    assert gate_reward(1, 0.7, 0.9, top) == 0.25 and len(calls) == 1
    assert gate_reward(0, 0.95, 0.9, top) == 0.0 and len(calls) == 1
    assert gate_reward(1, 0.3, 0.9, top) == 0.10 and len(calls) == 1
    # boundary beta == tau falls in the middle band
    assert gate_reward(1, 0.9, 0.9, top) == 0.25 and len(calls) == 1
    assert gate_reward(1, 0.5, 0.9, top) == 0.25


def test_path_reward_four_cases():
    env = wide_env()
    sched = CurriculumSchedule().freeze(0.9)
    spy = SpyRater()
    h = Hypothesis("a", "r", "o")
    high = env.make_path(h, [("r", "x"), ("r", "o")])
    assert relevance(env, high) > 0.9
    bd = path_reward(env, high, 0, sched, spy)
    assert (bd.alpha, bd.reward, bd.persona_rating, len(spy.calls)) == (1, 0.8, (0.8, 0.8, 0.8), 1)

    toy = WalkEnv(load_triples(["a\tr\tb", "a\tr\tc", "b\tr\tc", "c\tr\td"]), inverse_edges=False)
    mid = toy.make_path(Hypothesis("a", "r", "c"), [("r", "b"), ("r", "c")])  # beta 2/3
    bd = path_reward(toy, mid, 0, sched, spy)
    assert (bd.reward, bd.persona_rating, len(spy.calls)) == (0.25, None, 1)

    miss = env.make_path(Hypothesis("a", "r", "m2"), [("r", "x"), ("r", "o")])
    bd = path_reward(env, miss, 0, sched, spy)
    assert bd.beta > 0.9 and (bd.alpha, bd.reward, len(spy.calls)) == (0, 0.0, 1)

    low = toy.make_path(Hypothesis("a", "r", "d"), [("r", "c"), ("r", "d")])  # beta s(c) ~ 0.47
    bd = path_reward(toy, low, 0, sched, spy)
    assert (bd.reward, len(spy.calls)) == (0.10, 1)


def test_non_adaptive_baseline_pays_beta():
    env = wide_env()
    h = Hypothesis("a", "r", "o")
    p = env.make_path(h, [("r", "x"), ("r", "o")])
    bd = path_reward(env, p, 0, CurriculumSchedule().freeze(0.9), None)
    assert bd.reward == relevance(env, p) and bd.gated and bd.persona_rating is None


def _random_paths(env, hyps, n, seed):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        h = hyps[int(rng.integers(len(hyps)))]
        state = env.reset(h)
        for _ in range(env.t_max):
            acts = env.valid_actions(state)
            state = env.step(state, acts[int(rng.integers(len(acts)))])
        out.append(env.to_path(state))
    return out


@pytest.fixture(scope="module")
def planted_paths(planted):
    env = WalkEnv(planted.kg)
    # half the hypotheses get a planted walk so that alpha=1 paths are common
    paths = _random_paths(env, planted.train, 800, seed=5)
    for h in planted.train[:50]:
        sid = env.kg.entity_id(h.subject)
        acts = env.valid_actions(env.reset(h))
        g1 = next(e for r, e in acts if env.relation_names[r] == "binds")
        g2 = next(e for r, e in env.valid_actions(env.step(env.reset(h), (env.kg.relation_id("binds"), g1))) if env.relation_names[r] == "regulates")
        paths.append(env.make_path(h, [("binds", env.kg.entities[g1]), ("regulates", env.kg.entities[g2]), ("associates", h.object)]))
    paths += _random_paths(env, planted.test, 1000 - len(paths), seed=6)
    return env, paths


@pytest.mark.parametrize("t", [0, 500, 1000, 1500, 2000])
def test_rater_calls_match_gate_predicate(planted_paths, t):
    env, paths = planted_paths
    spy = SpyRater((0.5, 0.25, 1.0))
    engine = RewardEngine(env, CurriculumSchedule(warmup_steps=2000), spy)
    out = engine(paths, t)
    th = tau(engine.schedule, t)
    expected = sum(1 for p in paths if fidelity(env, p) == 1 and relevance(env, p) > th)
    assert engine.rater_calls == len(spy.calls) == expected
    assert expected > 0 or t > 0
    for b in out:
        assert 0.0 <= b.reward <= 1.0
        assert (b.persona_rating is not None) == (b.alpha == 1 and b.beta > b.tau_in_effect)
        if b.alpha == 0:
            assert b.reward == 0.0


@settings(max_examples=40, deadline=None)
@given(st.floats(0.5, 1.0), st.floats(0.5, 1.0))
def test_raising_tau_never_adds_calls(planted_paths, t1, t2):
    env, paths = planted_paths
    lo, hi = sorted((t1, t2))
    counts = []
    for th in (lo, hi):
        spy = SpyRater()
        RewardEngine(env, CurriculumSchedule().freeze(th), spy)(paths[::5], 0)
        counts.append(len(spy.calls))
    assert counts[1] <= counts[0]


def test_rater_failure_drops_trajectory(planted_paths):
    from pkgx.errors import ResponseParseError

    env, paths = planted_paths

    def bad(path):
        raise ResponseParseError("nope")

    out = RewardEngine(env, CurriculumSchedule().freeze(0.5), bad)(paths, 0)
    for p, b in zip(paths, out):
        if fidelity(env, p) and relevance(env, p) > 0.5:
            assert b is None
        else:
            assert b is not None


def _bd(alpha, beta, reward=None):
    return RewardBreakdown(alpha, beta, 0.9, beta if reward is None else reward)


def test_select_explanation(toy_env):
    h = Hypothesis("a", "r", "c")
    p1 = toy_env.make_path(h, [("r", "b"), ("r", "c")])
    p2 = toy_env.make_path(h, [("r", "c"), ("STAY", "c")])
    p2b = toy_env.make_path(h, [("r", "c"), ("STAY", "c"), ("STAY", "c")])
    miss = toy_env.make_path(h, [("r", "b")])
    e = select_explanation(toy_env, [(p1, _bd(1, 0.9)), (p2, _bd(1, 0.4))], m=1)
    assert [p for p, _ in e.paths] == [p1]
    e = select_explanation(toy_env, [(miss, _bd(0, 0.9))], m=2, hypothesis=h)
    assert e.empty
    e = select_explanation(toy_env, [(p2, _bd(1, 0.4)), (p2b, _bd(1, 0.4)), (p1, _bd(1, 0.2))], m=5)
    assert len(e.paths) == 2
    # adaptive mode ranks by reward instead of beta
    e = select_explanation(toy_env, [(p1, _bd(1, 0.9, 0.25)), (p2, _bd(1, 0.4, 0.7))], m=1, mode="adaptive")
    assert e.paths[0][0] == p2
    # ties: shorter walk first
    e = select_explanation(toy_env, [(p1, _bd(1, 0.5)), (p2, _bd(1, 0.5))], m=1)
    assert e.paths[0][0] == p2


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 100).map(lambda i: i / 100), min_size=1, max_size=6), st.sampled_from(["sqrt", "square", "affine"]))
def test_non_adaptive_argmax_invariant_to_monotone_rescaling(betas, kind):
    env = WalkEnv(load_triples([f"s\tr\tm{i}" for i in range(6)] + [f"m{i}\tr\to" for i in range(6)]), inverse_edges=False)
    h = Hypothesis("s", "r", "o")
    paths = [env.make_path(h, [("r", f"m{i}"), ("r", "o")]) for i in range(len(betas))]
    f = {"sqrt": math.sqrt, "square": lambda x: x * x, "affine": lambda x: 0.3 * x + 0.1}[kind]
    a = select_explanation(env, [(p, _bd(1, b)) for p, b in zip(paths, betas)], m=1)
    b = select_explanation(env, [(p, _bd(1, f(x))) for p, x in zip(paths, betas)], m=1)
    assert a.paths[0][0] == b.paths[0][0]


@pytest.mark.parametrize("jobs", [1, 4])
def test_engine_agrees_with_path_reward(planted_paths, jobs):
    env, paths = planted_paths
    sched = CurriculumSchedule(warmup_steps=100)
    rater = SpyRater((0.25, 0.5, 1.0))
    engine = RewardEngine(env, sched, rater, jobs=jobs)
    for t in (0, 40, 100):
        got = engine(paths[::3], t)
        want = [path_reward(env, p, t, sched, SpyRater((0.25, 0.5, 1.0))) for p in paths[::3]]
        assert got == want
