"""Deterministic walk MDP over a knowledge graph.

The action space extends the graph's relations with synthetic inverse
relations (optional) and a STAY self-loop. Relation ids are laid out as::

    [0, R)        forward relations (same ids as the graph)
    [R, 2R)       inverse relations, ``r^-1``      (only with inverse_edges)
    STAY          self-loop, always the largest action relation id
    START         dummy "previous relation" fed to the policy at step 0
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import InvalidActionError, InvalidPathError, StepBudgetError
from .kg import Hypothesis, KnowledgeGraph

INVERSE_SUFFIX = "^-1"
STAY_NAME = "STAY"
START_NAME = "START"

Action = tuple[int, int]  # (action relation id, entity id)


@dataclass(frozen=True)
class WalkState:
    query: Hypothesis
    current: int
    step_index: int = 0
    history: tuple[Action, ...] = ()


@dataclass(frozen=True)
class Path:
    """A walk from ``hypothesis.subject``; steps are (relation id, entity id)."""

    hypothesis: Hypothesis
    steps: tuple[Action, ...]
    subject_id: int = field(compare=False, default=-1)

    @property
    def terminal(self) -> int:
        return self.steps[-1][1] if self.steps else self.subject_id


class WalkEnv:
    def __init__(self, kg: KnowledgeGraph, t_max: int = 3, inverse_edges: bool = True):
        if t_max < 1:
            raise ValueError("t_max must be >= 1")
        self.kg = kg
        self.t_max = t_max
        self.inverse_edges = inverse_edges
        nr = kg.num_relations
        self.stay = 2 * nr if inverse_edges else nr
        self.start = self.stay + 1
        self.num_action_relations = self.start + 1
        names = list(kg.relations)
        if inverse_edges:
            names += [r + INVERSE_SUFFIX for r in kg.relations]
        self.relation_names: tuple[str, ...] = tuple(names + [STAY_NAME, START_NAME])
        self.relation_lookup = {n: i for i, n in enumerate(self.relation_names)}
        self._build_actions()

    def _build_actions(self):
        kg = self.kg
        tri = kg.triples
        src = [tri[:, 0]]
        rel = [tri[:, 1]]
        dst = [tri[:, 2]]
        if self.inverse_edges:
            src.append(tri[:, 2])
            rel.append(tri[:, 1] + kg.num_relations)
            dst.append(tri[:, 0])
        n = kg.num_entities
        ents = np.arange(n, dtype=np.int64)
        src.append(ents)
        rel.append(np.full(n, self.stay, dtype=np.int64))
        dst.append(ents)
        src = np.concatenate(src)
        rel = np.concatenate(rel)
        dst = np.concatenate(dst)
        order = np.lexsort((dst, rel, src))
        self.act_rel = rel[order]
        self.act_ent = dst[order]
        offsets = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(np.bincount(src[order], minlength=n), out=offsets[1:])
        self.act_offsets = offsets
        self.act_degree = np.diff(offsets)
        for a in (self.act_rel, self.act_ent, self.act_offsets, self.act_degree):
            a.setflags(write=False)
        self._edge_sets: dict[int, frozenset] = {}

    def _edges_from(self, eid: int) -> frozenset:
        es = self._edge_sets.get(eid)
        if es is None:
            lo, hi = self.act_offsets[eid], self.act_offsets[eid + 1]
            es = frozenset(zip(self.act_rel[lo:hi].tolist(), self.act_ent[lo:hi].tolist()))
            self._edge_sets[eid] = es
        return es

    # -- naming helpers ----------------------------------------------------

    def entity_name(self, eid: int) -> str:
        return self.kg.entities[eid]

    def relation_name(self, rid: int) -> str:
        return self.relation_names[rid]

    def action_names(self, actions: Sequence[Action]) -> list[tuple[str, str]]:
        return [(self.relation_names[r], self.kg.entities[e]) for r, e in actions]

    def make_path(self, hypothesis: Hypothesis, steps: Sequence[tuple[str, str]]) -> Path:
        """Build a Path from (relation name, entity name) pairs; STAY may use any entity name."""
        sid = self.kg.entity_id(hypothesis.subject)
        cur = sid
        out = []
        for rname, ename in steps:
            try:
                rid = self.relation_lookup[rname]
            except KeyError:
                raise InvalidPathError(f"unknown relation {rname!r}") from None
            eid = cur if rid == self.stay else self.kg.entity_id(ename)
            out.append((rid, eid))
            cur = eid
        return Path(hypothesis, tuple(out), sid)

    def render_path(self, path: Path, keep_stay=False) -> list[tuple[str, str, str]]:
        """Hops as (head, relation, tail) name triples, STAY steps dropped by default."""
        hops = []
        cur = path.subject_id
        for r, e in path.steps:
            if r == self.stay and not keep_stay:
                continue
            hops.append((self.kg.entities[cur], self.relation_names[r], self.kg.entities[e]))
            cur = e
        return hops

    def canonical_path(self, path: Path) -> str:
        """Whitespace- and padding-stable path string, used for cache keys and hashing."""
        parts = [" ".join(self.kg.entities[path.subject_id].split())]
        for _, r, t in self.render_path(path):
            parts.append(f"-[{' '.join(r.split())}]->")
            parts.append(" ".join(t.split()))
        return " ".join(parts)

    # -- MDP -----------------------------------------------------------------

    def reset(self, hypothesis: Hypothesis) -> WalkState:
        sid = self.kg.entity_id(hypothesis.subject)
        return WalkState(hypothesis, sid, 0, ())

    def _query_mask_edge(self, state: WalkState) -> Action | None:
        q = state.query
        if state.current != self.kg.entity_index.get(q.subject, -1):
            return None
        rid = self.kg.relation_index.get(q.relation)
        oid = self.kg.entity_index.get(q.object)
        if rid is None or oid is None:
            return None
        return (rid, oid)

    def valid_actions(self, state: WalkState, training: bool = True) -> list[Action]:
        """Outgoing actions of the current node plus STAY, in (relation, entity) order.

        In training mode the query edge (relation, object) is hidden whenever the
        walker stands on the query subject.
        """
        lo, hi = self.act_offsets[state.current], self.act_offsets[state.current + 1]
        acts = list(zip(self.act_rel[lo:hi].tolist(), self.act_ent[lo:hi].tolist()))
        if training:
            masked = self._query_mask_edge(state)
            if masked is not None:
                acts = [a for a in acts if a != masked]
        return acts

    def step(self, state: WalkState, action: Action, training: bool = True) -> WalkState:
        if state.step_index >= self.t_max:
            raise StepBudgetError(f"step budget {self.t_max} exhausted")
        action = (int(action[0]), int(action[1]))
        if action not in self.valid_actions(state, training):
            raise InvalidActionError(f"action {action} not valid at entity {state.current}")
        return WalkState(state.query, action[1], state.step_index + 1, state.history + (action,))

    def to_path(self, state: WalkState) -> Path:
        return Path(state.query, state.history, self.kg.entity_index[state.query.subject])

    def is_replay_valid(self, path: Path) -> bool:
        try:
            self.check_path(path)
        except InvalidPathError:
            return False
        return True

    def check_path(self, path: Path) -> None:
        sid = self.kg.entity_index.get(path.hypothesis.subject)
        if sid is None or sid != path.subject_id:
            raise InvalidPathError("path does not start at the hypothesis subject")
        if len(path.steps) > self.t_max:
            raise InvalidPathError(f"path longer than T_max={self.t_max}")
        cur = sid
        for r, e in path.steps:
            if (r, e) not in self._edges_from(cur):
                raise InvalidPathError(f"step ({r}, {e}) not an edge from entity {cur}")
            cur = e

    def rollout(
        self,
        policy: Callable[[WalkState, list[Action]], np.ndarray],
        hypothesis: Hypothesis,
        n: int,
        rng_seed: int,
        t_max: int | None = None,
        training: bool = True,
    ) -> list[Path]:
        """Sample ``n`` full-length walks; rollout i draws from its own seeded stream."""
        if n < 1:
            raise ValueError("n must be >= 1")
        t_max = self.t_max if t_max is None else t_max
        if t_max > self.t_max:
            raise StepBudgetError(f"t_max {t_max} exceeds env budget {self.t_max}")
        start = self.reset(hypothesis)
        paths = []
        for i in range(n):
            rng = np.random.default_rng([rng_seed, i])
            state = start
            for _ in range(t_max):
                acts = self.valid_actions(state, training)
                probs = np.asarray(policy(state, acts), dtype=float)
                idx = int(rng.choice(len(acts), p=probs))
                state = self.step(state, acts[idx], training)
            paths.append(self.to_path(state))
        return paths


def uniform_policy(state: WalkState, actions: Sequence[Action]) -> np.ndarray:
    return np.full(len(actions), 1.0 / len(actions))


def rollout(kg, policy, hypothesis, n, t_max=3, rng_seed=0, inverse_edges=True, training=True):
    """Functional wrapper: build a WalkEnv and sample ``n`` paths."""
    env = WalkEnv(kg, t_max=t_max, inverse_edges=inverse_edges)
    return env.rollout(policy, hypothesis, n, rng_seed, training=training)
