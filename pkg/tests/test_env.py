import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pkgx.env import WalkEnv, rollout, uniform_policy
from pkgx.errors import InvalidActionError, StepBudgetError, UnknownEntityError
from pkgx.kg import Hypothesis, load_triples


def names(env, acts):
    return env.action_names(acts)


def test_reset(toy_env):
    h = Hypothesis("a", "r", "c")
    s = toy_env.reset(h)
    assert toy_env.entity_name(s.current) == "a" and s.history == () and s.step_index == 0
    assert toy_env.reset(h) == s
    with pytest.raises(UnknownEntityError):
        toy_env.reset(Hypothesis("nope", "r", "c"))


def test_valid_actions_masks_query_edge_in_training(toy_env):
    s = toy_env.reset(Hypothesis("a", "r", "b"))
    assert names(toy_env, toy_env.valid_actions(s, training=True)) == [("r", "c"), ("STAY", "a")]
    assert names(toy_env, toy_env.valid_actions(s, training=False)) == [("r", "b"), ("r", "c"), ("STAY", "a")]


def test_sink_has_only_stay(toy_env, toy_kg):
    s = toy_env.reset(Hypothesis("d", "r", "a"))
    assert names(toy_env, toy_env.valid_actions(s)) == [("STAY", "d")]


def test_inverse_edges_are_optional(toy_kg):
    env = WalkEnv(toy_kg, inverse_edges=True)
    s = env.reset(Hypothesis("d", "r", "a"))
    assert names(env, env.valid_actions(s)) == [("r^-1", "c"), ("STAY", "d")]


def test_step(toy_env):
    s = toy_env.reset(Hypothesis("a", "r", "d"))
    acts = toy_env.valid_actions(s)
    to_c = [a for a in acts if toy_env.entity_name(a[1]) == "c" and a[0] != toy_env.stay][0]
    s1 = toy_env.step(s, to_c)
    assert toy_env.entity_name(s1.current) == "c" and s1.history == (to_c,) and s1.step_index == 1
    stay = toy_env.step(s, (toy_env.stay, s.current))
    assert stay.current == s.current and len(stay.history) == 1
    with pytest.raises(InvalidActionError):
        toy_env.step(s, (0, toy_env.kg.entity_id("d")))


def test_step_budget(toy_kg):
    env = WalkEnv(toy_kg, t_max=1, inverse_edges=False)
    s = env.reset(Hypothesis("a", "r", "d"))
    s = env.step(s, (env.stay, s.current))
    with pytest.raises(StepBudgetError):
        env.step(s, (env.stay, s.current))


def test_rollout_chain():
    kg = load_triples(["s\tr\tx", "x\tr\to"])
    env = WalkEnv(kg, t_max=2, inverse_edges=False)
    h = Hypothesis("s", "r", "o")
    paths = env.rollout(uniform_policy, h, n=1, rng_seed=7)
    assert len(paths) == 1 and len(paths[0].steps) == 2
    assert env.is_replay_valid(paths[0])
    assert env.entity_name(paths[0].terminal) in ("s", "x", "o")
    assert env.rollout(uniform_policy, h, n=1, rng_seed=7) == paths


def test_rollout_many_replay_valid(toy_kg):
    h = Hypothesis("a", "r", "d")
    paths = rollout(toy_kg, uniform_policy, h, n=20, t_max=3, rng_seed=3)
    env = WalkEnv(toy_kg)
    assert len(paths) == 20
    assert all(len(p.steps) == 3 and env.is_replay_valid(p) for p in paths)
    assert rollout(toy_kg, uniform_policy, h, n=20, t_max=3, rng_seed=3) == paths


graphs = st.lists(st.tuples(st.integers(0, 7), st.integers(0, 2), st.integers(0, 7)), min_size=1, max_size=30)


@settings(max_examples=50, deadline=None)
@given(graphs, st.integers(0, 2**31), st.booleans())
def test_rollouts_replay_and_mask(rows, seed, inverse):
    kg = load_triples([f"e{s}\tr{r}\te{o}" for s, r, o in rows])
    env = WalkEnv(kg, t_max=3, inverse_edges=inverse)
    s, r, o = rows[0]
    h = Hypothesis(f"e{s}", f"r{r}", f"e{o}")
    paths = env.rollout(uniform_policy, h, n=8, rng_seed=seed)
    again = env.rollout(uniform_policy, h, n=8, rng_seed=seed)
    assert paths == again
    qedge = (kg.relation_id(h.relation), kg.entity_id(h.object))
    for p in paths:
        assert env.is_replay_valid(p)
        moves = [st_ for st_ in p.steps if st_[0] != env.stay]
        # the query triple itself never appears as a one-hop walk
        assert not (len(moves) == 1 and moves[0] == qedge and p.steps[0] == qedge)
        assert p.steps[0] != qedge


def test_canonical_path_ignores_padding(toy_env):
    h = Hypothesis("a", "r", "c")
    p1 = toy_env.make_path(h, [("r", "c"), ("STAY", "c")])
    p2 = toy_env.make_path(h, [("STAY", "a"), ("r", "c")])
    assert toy_env.canonical_path(p1) == toy_env.canonical_path(p2) == "a -[r]-> c"
