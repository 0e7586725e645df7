"""Fidelity, relevance, curriculum-gated persona reward and explanation selection."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

from .env import Path, WalkEnv
from .errors import InvalidPathError, PkgxError
from .kg import Hypothesis

log = logging.getLogger(__name__)

MID_RELEVANCE_REWARD = 0.25
LOW_RELEVANCE_REWARD = 0.10
RELEVANCE_FLOOR = 0.5

Rating = tuple[float, float, float]
Rater = Callable[[Path], Rating]


@dataclass(frozen=True)
class RewardWeights:
    w_v: float = 1 / 3
    w_c: float = 1 / 3
    w_r: float = 1 / 3

    def __post_init__(self):
        ws = (self.w_v, self.w_c, self.w_r)
        if any(w < 0 for w in ws) or abs(math.fsum(ws) - 1.0) > 1e-12:
            raise ValueError(f"weights must be non-negative and sum to 1, got {ws}")


@dataclass(frozen=True)
class CurriculumSchedule:
    """Linear warm-up of the relevance threshold from tau_0 to tau_max over warmup_steps.

    ``frozen`` pins the threshold (inference uses the value of the selected checkpoint).
    """

    tau_0: float = 0.5
    tau_max: float = 0.9
    warmup_steps: int = 2000
    shape: str = "linear"
    frozen: float | None = None

    def __post_init__(self):
        if not (0.5 <= self.tau_0 <= self.tau_max <= 1.0):
            raise ValueError("need 0.5 <= tau_0 <= tau_max <= 1")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if self.shape != "linear":
            raise ValueError(f"unsupported schedule shape {self.shape!r}")
        if self.frozen is not None and not (0.0 <= self.frozen <= 1.0):
            raise ValueError("frozen tau must lie in [0, 1]")

    def freeze(self, value: float) -> "CurriculumSchedule":
        return CurriculumSchedule(self.tau_0, self.tau_max, self.warmup_steps, self.shape, value)


def tau(schedule: CurriculumSchedule, t: int) -> float:
    if t < 0:
        raise ValueError("t must be >= 0")
    if schedule.frozen is not None:
        return schedule.frozen
    if schedule.warmup_steps == 0 or t >= schedule.warmup_steps:
        return schedule.tau_max
    return min(
        schedule.tau_max,
        schedule.tau_0 + (schedule.tau_max - schedule.tau_0) * t / schedule.warmup_steps,
    )


@dataclass(frozen=True)
class RewardBreakdown:
    alpha: int
    beta: float
    tau_in_effect: float
    reward: float
    persona_rating: Rating | None = None
    # top band was used (persona invoked, or beta stood in for it in the non-adaptive baseline)
    gated: bool = False

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "beta": self.beta,
            "tau": self.tau_in_effect,
            "reward": self.reward,
            "persona_rating": list(self.persona_rating) if self.persona_rating else None,
            "gated": self.gated,
        }


def _strip_checked(env: WalkEnv, path: Path) -> list[int]:
    env.check_path(path)
    return [e for r, e in path.steps if r != env.stay]


def fidelity(env: WalkEnv, path: Path) -> int:
    """1 iff the walk (padding ignored) ends at the hypothesis object."""
    env.check_path(path)
    oid = env.kg.entity_index.get(path.hypothesis.object)
    return int(oid is not None and path.terminal == oid)


def intermediate_entities(env: WalkEnv, path: Path) -> list[int]:
    visited = _strip_checked(env, path)
    s = path.subject_id
    o = env.kg.entity_index.get(path.hypothesis.object, -1)
    out = []
    for e in visited[:-1]:
        if e not in (s, o) and e not in out:
            out.append(e)
    return out


def relevance(env: WalkEnv, path: Path) -> float:
    """Mean normalized surprisal of intermediate nodes; 0 for direct paths."""
    mids = intermediate_entities(env, path)
    if not mids:
        return 0.0
    s = env.kg.surprisal_array()
    return float(math.fsum(float(s[e]) for e in mids) / len(mids))


def persona_reward(rating: Sequence[float], weights: RewardWeights = RewardWeights()) -> float:
    v, c, r = rating
    for x in (v, c, r):
        if not (0.0 <= x <= 1.0):
            raise ValueError(f"rating component {x} outside [0, 1]")
    return weights.w_v * v + weights.w_c * c + weights.w_r * r


def gate_reward(
    alpha: int,
    beta: float,
    tau_value: float,
    top: Callable[[], float],
    mid: float = MID_RELEVANCE_REWARD,
    low: float = LOW_RELEVANCE_REWARD,
) -> float:
    """Three-band reward. ``top`` is only evaluated for alpha=1 and beta > tau."""
    if not alpha:
        return 0.0
    if beta > tau_value:
        return top()
    if beta >= RELEVANCE_FLOOR:
        return mid
    return low


def path_reward(
    env: WalkEnv,
    path: Path,
    t: int,
    schedule: CurriculumSchedule,
    rater: Rater | None,
    weights: RewardWeights = RewardWeights(),
    mid: float = MID_RELEVANCE_REWARD,
    low: float = LOW_RELEVANCE_REWARD,
) -> RewardBreakdown:
    """Reward for one path at training step ``t``.

    With ``rater=None`` the top band pays beta itself (the non-adaptive baseline).
    """
    a = fidelity(env, path)
    b = relevance(env, path)
    th = tau(schedule, t)
    rating: list = []

    def top():
        if rater is None:
            return b
        rt = tuple(float(x) for x in rater(path))
        rating.append(rt)
        return persona_reward(rt, weights)

    value = gate_reward(a, b, th, top, mid, low)
    gated = bool(a) and b > th
    return RewardBreakdown(a, b, th, value, rating[0] if rating else None, gated)


class RewardEngine:
    """Reward closure handed to the trainer: ``engine(paths, step)``.

    Gated paths are rated up to ``jobs`` at a time. A rater failure drops that
    trajectory (``None`` in the output) with a warning.
    """

    def __init__(
        self,
        env: WalkEnv,
        schedule: CurriculumSchedule = CurriculumSchedule(),
        rater: Rater | None = None,
        weights: RewardWeights = RewardWeights(),
        mid: float = MID_RELEVANCE_REWARD,
        low: float = LOW_RELEVANCE_REWARD,
        jobs: int = 1,
    ):
        self.env = env
        self.schedule = schedule
        self.rater = rater
        self.weights = weights
        self.mid = mid
        self.low = low
        self.jobs = max(1, int(jobs))
        self.rater_calls = 0

    def _rate_one(self, path):
        try:
            rt = tuple(float(x) for x in self.rater(path))
            return rt, persona_reward(rt, self.weights)
        except (PkgxError, ValueError) as exc:
            return exc

    def _rate_all(self, paths):
        self.rater_calls += len(paths)
        if self.jobs == 1 or len(paths) < 2:
            return [self._rate_one(p) for p in paths]
        with ThreadPoolExecutor(max_workers=self.jobs) as ex:
            return list(ex.map(self._rate_one, paths))

    def __call__(self, paths: Sequence[Path], step: int) -> list[RewardBreakdown | None]:
        th = tau(self.schedule, step)
        ab = [(fidelity(self.env, p), relevance(self.env, p)) for p in paths]
        gated = [i for i, (a, b) in enumerate(ab) if a and b > th]
        rated = {}
        if self.rater is not None and gated:
            rated = dict(zip(gated, self._rate_all([paths[i] for i in gated])))
        out: list[RewardBreakdown | None] = []
        for i, (a, b) in enumerate(ab):
            if i in rated:
                res = rated[i]
                if isinstance(res, Exception):
                    log.warning("dropping trajectory %s: %s", self.env.canonical_path(paths[i]), res)
                    out.append(None)
                    continue
                rt, value = res
                out.append(RewardBreakdown(a, b, th, value, rt, True))
                continue
            value = gate_reward(a, b, th, lambda: b, self.mid, self.low)
            out.append(RewardBreakdown(a, b, th, value, None, bool(a) and b > th))
        return out


class FidelityReward:
    """Reward = alpha only; no relevance shaping, no persona."""

    def __init__(self, env: WalkEnv):
        self.env = env

    def __call__(self, paths, step):
        out = []
        for p in paths:
            a = fidelity(self.env, p)
            out.append(RewardBreakdown(a, 0.0, 0.0, float(a)))
        return out


@dataclass
class Explanation:
    hypothesis: Hypothesis
    paths: list[tuple[Path, RewardBreakdown]] = field(default_factory=list)
    m: int = 1
    mode: str = "non-adaptive"

    @property
    def empty(self) -> bool:
        return not self.paths


def _hop_count(env: WalkEnv, path: Path) -> int:
    return sum(1 for r, _ in path.steps if r != env.stay)


def _strip_stay(env: WalkEnv, path: Path) -> tuple:
    return tuple((r, e) for r, e in path.steps if r != env.stay)


def select_explanation(
    env: WalkEnv,
    scored: Iterable[tuple[Path, RewardBreakdown]],
    m: int,
    mode: str = "non-adaptive",
    hypothesis: Hypothesis | None = None,
) -> Explanation:
    """Top-m fidelity-1 paths.

    Non-adaptive ranks by alpha*beta, adaptive by the gated reward; ties go to
    shorter walks, then lexicographically smaller steps. Walks equal after
    dropping STAY padding are collapsed.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    if mode not in ("non-adaptive", "adaptive"):
        raise ValueError(f"unknown mode {mode!r}")
    best: dict[tuple, tuple[Path, RewardBreakdown]] = {}
    hyp = hypothesis
    for path, bd in scored:
        hyp = path.hypothesis
        if bd.alpha != 1:
            continue
        key = _strip_stay(env, path)
        score = bd.alpha * bd.beta if mode == "non-adaptive" else bd.reward
        prev = best.get(key)
        if prev is None:
            best[key] = (path, bd)
        else:
            pscore = prev[1].alpha * prev[1].beta if mode == "non-adaptive" else prev[1].reward
            if score > pscore:
                best[key] = (path, bd)

    def sort_key(item):
        key, (path, bd) = item
        score = bd.alpha * bd.beta if mode == "non-adaptive" else bd.reward
        return (-score, len(key), key)

    ranked = sorted(best.items(), key=sort_key)[:m]
    if hyp is None:
        raise ValueError("no scored paths and no hypothesis given")
    expl = Explanation(hyp, [pb for _, pb in ranked], m, mode)
    if expl.empty:
        log.info("no fidelity-1 path for %s; returning empty explanation", hyp)
    return expl
