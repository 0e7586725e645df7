"""Beam inference, link-prediction evaluation and the REINFORCE training loop."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import stats
from .env import Path, WalkEnv
from .errors import TrainingDivergedError, UserError
from .kg import Hypothesis
from .policy import (
    BaselineState,
    EncoderState,
    OptimizerState,
    PolicyParams,
    forward_step,
    init_params,
    initial_state,
    reinforce_update,
    sample_paths,
)
from .reward import CurriculumSchedule, RewardBreakdown, tau

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "mean_reward", "gated_fraction", "val_mrr", "tau")


# -- beam search -----------------------------------------------------------------


@dataclass(frozen=True)
class Beam:
    logp: float
    steps: tuple[tuple[int, int], ...]


def beam_search(
    params: PolicyParams,
    env: WalkEnv,
    hypothesis: Hypothesis,
    beam_width: int,
    t_max: int | None = None,
    mask_edge: tuple[int, int] | None = None,
) -> list[Beam]:
    """Keep the ``beam_width`` most probable partial walks at every depth.

    Only subject and relation of the hypothesis are used. ``mask_edge`` hides one
    (relation id, entity id) edge out of the subject, as in training.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    kg = env.kg
    t_max = env.t_max if t_max is None else t_max
    sid = kg.entity_id(hypothesis.subject)
    rid = kg.relation_id(hypothesis.relation)
    training = mask_edge is not None
    subj = np.array([sid])
    qrel = np.array([rid])
    qobj = np.array([mask_edge[1] if training else -1])
    if training and mask_edge[0] != rid:
        raise ValueError("mask_edge relation must be the query relation")
    st = initial_state(params, env, subj)
    beams = [Beam(0.0, ())]
    for _ in range(t_max):
        n = len(beams)
        c = forward_step(params, env, st, np.repeat(subj, n), np.repeat(qrel, n), np.repeat(qobj, n), training)
        cands = []
        for i, b in enumerate(beams):
            cols = np.flatnonzero(c.mask[i])
            for k in cols:
                step = (int(c.arel[i, k]), int(c.aent[i, k]))
                cands.append((-(b.logp + float(c.logp[i, k])), b.steps + (step,), i))
        cands.sort(key=lambda x: (x[0], x[1]))
        cands = cands[:beam_width]
        parent = np.array([x[2] for x in cands])
        rels = np.array([x[1][-1][0] for x in cands])
        ents = np.array([x[1][-1][1] for x in cands])
        st = EncoderState(c.h[parent], rels, ents, st.t + 1, None if c.xsum is None else c.xsum[parent])
        beams = [Beam(-x[0], x[1]) for x in cands]
    return beams


@dataclass(frozen=True)
class RankedEntity:
    entity: int
    path: Path
    logp: float


def beam_infer(params, env, hypothesis, beam_width=16, t_max=None, mask_edge=None) -> list[RankedEntity]:
    """Terminal entities ranked by their best walk's log-probability (ties: lower id first)."""
    sid = env.kg.entity_id(hypothesis.subject)
    best: dict[int, Beam] = {}
    for b in beam_search(params, env, hypothesis, beam_width, t_max, mask_edge):
        term = b.steps[-1][1] if b.steps else sid
        if term not in best or b.logp > best[term].logp:
            best[term] = b
    ranked = sorted(best.items(), key=lambda kv: (-kv[1].logp, kv[0]))
    return [RankedEntity(e, Path(hypothesis, b.steps, sid), b.logp) for e, b in ranked]


def rank_of(target: int, ranked: Sequence[RankedEntity]) -> int | None:
    for i, item in enumerate(ranked, start=1):
        if item.entity == target:
            return i
    return None


def query_ranks(params, env, hypotheses, beam_width=16, mask_query_edge=False) -> list[int | None]:
    kg = env.kg
    ranks = []
    for h in hypotheses:
        target = kg.entity_id(h.object)
        mask = (kg.relation_id(h.relation), target) if mask_query_edge else None
        ranks.append(rank_of(target, beam_infer(params, env, h, beam_width, mask_edge=mask)))
    return ranks


@dataclass(frozen=True)
class LinkMetrics:
    hits1: float
    hits3: float
    mrr: float
    n: int

    def as_row(self):
        return {"hits@1": self.hits1, "hits@3": self.hits3, "mrr": self.mrr, "n": self.n}


def evaluate_link_prediction(params, env, hypotheses, beam_width=16, mask_query_edge=False) -> LinkMetrics:
    if not hypotheses:
        raise UserError("empty evaluation split")
    ranks = query_ranks(params, env, hypotheses, beam_width, mask_query_edge)
    return LinkMetrics(stats.hits_at_k(ranks, 1), stats.hits_at_k(ranks, 3), stats.mrr(ranks), len(ranks))


# -- training ----------------------------------------------------------------------


@dataclass
class TrainConfig:
    d: int = 32
    h: int = 64
    learning_rate: float = 0.5
    rollouts_per_query: int = 20
    batch_queries: int = 8
    entropy_weight: float = 0.02
    baseline_decay: float = 0.9
    total_steps: int = 2000
    t_max: int = 3
    inverse_edges: bool = True
    encoder: str = "rnn"
    optimizer: str = "sgd"
    grad_clip: float = 5.0
    eval_every: int = 100
    beam_width: int = 16
    seed: int = 0
    curriculum: CurriculumSchedule = field(default_factory=CurriculumSchedule)

    def __post_init__(self):
        if isinstance(self.curriculum, dict):
            self.curriculum = CurriculumSchedule(**self.curriculum)
        for name in ("d", "h", "rollouts_per_query", "batch_queries", "t_max", "eval_every", "beam_width"):
            if getattr(self, name) < 1:
                raise UserError(f"{name} must be positive")
        if self.total_steps < 1:
            raise UserError("total_steps must be >= 1")
        if self.learning_rate <= 0 or self.entropy_weight < 0 or self.grad_clip < 0:
            raise UserError("learning_rate must be > 0; entropy_weight and grad_clip >= 0")
        if not (0.0 <= self.baseline_decay < 1.0):
            raise UserError("baseline_decay must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    params: PolicyParams
    best_step: int
    tau: float
    val_mrr: float
    metrics: list[dict]
    config: TrainConfig


RewardFn = Callable[[Sequence[Path], int], Sequence[RewardBreakdown | None]]


def train(
    env: WalkEnv,
    queries: Sequence[Hypothesis],
    reward_fn: RewardFn,
    config: TrainConfig,
    valid_queries: Sequence[Hypothesis] | None = None,
    init: PolicyParams | None = None,
    on_metrics: Callable[[dict], None] | None = None,
) -> TrainResult:
    """REINFORCE with an EMA baseline; keeps the parameters with the best validation MRR.

    Without ``valid_queries`` validation reuses the training queries with the
    query edge masked.
    """
    if not queries:
        raise UserError("no training queries")
    if env.t_max != config.t_max or env.inverse_edges != config.inverse_edges:
        raise UserError("environment does not match config (t_max / inverse_edges)")
    params = init if init is not None else init_params(env, config.d, config.h, config.seed, config.encoder)
    baseline = BaselineState(0.0, config.baseline_decay)
    opt = OptimizerState(config.optimizer)
    schedule = config.curriculum
    val_set = list(valid_queries) if valid_queries else list(queries)
    mask_val = not valid_queries

    best = (params.copy(), 0, tau(schedule, 0), -1.0)
    window_rewards: list[float] = []
    window_gated: list[float] = []
    window_alpha: list[float] = []
    metrics: list[dict] = []
    order_rng = np.random.default_rng([config.seed, 0xB47C])
    for t in range(config.total_steps):
        q_idx = order_rng.choice(len(queries), size=min(config.batch_queries, len(queries)), replace=False)
        hyps = [queries[i] for i in sorted(q_idx) for _ in range(config.rollouts_per_query)]
        rng = np.random.default_rng([config.seed, t])
        paths, trace = sample_paths(params, env, hyps, rng, training=True, return_trace=True)
        breakdowns = list(reward_fn(paths, t))
        keep = [i for i, b in enumerate(breakdowns) if b is not None]
        if len(keep) < len(paths):
            log.warning("step %d: %d trajectories dropped", t, len(paths) - len(keep))
        if keep:
            rewards = np.array([breakdowns[i].reward for i in keep])
            params, baseline, st = reinforce_update(
                params,
                env,
                [paths[i] for i in keep],
                rewards,
                baseline,
                config.learning_rate,
                config.entropy_weight,
                config.grad_clip,
                opt,
                replayed=trace if len(keep) == len(paths) else None,
            )
            if not params.all_finite():
                raise TrainingDivergedError(f"non-finite parameters at step {t}")
            window_rewards.extend(rewards.tolist())
            window_gated.extend(float(breakdowns[i].gated) for i in keep)
            window_alpha.extend(float(breakdowns[i].alpha) for i in keep)

        if (t + 1) % config.eval_every == 0 or t + 1 == config.total_steps:
            val = evaluate_link_prediction(params, env, val_set, config.beam_width, mask_query_edge=mask_val)
            row = {
                "step": t + 1,
                "mean_reward": float(np.mean(window_rewards)) if window_rewards else 0.0,
                "gated_fraction": float(np.mean(window_gated)) if window_gated else 0.0,
                "val_mrr": val.mrr,
                "tau": tau(schedule, t),
                "mean_fidelity": float(np.mean(window_alpha)) if window_alpha else 0.0,
            }
            metrics.append(row)
            if on_metrics:
                on_metrics(row)
            log.info("step %(step)d reward %(mean_reward).4f val_mrr %(val_mrr).4f tau %(tau).3f", row)
            if val.mrr > best[3]:
                best = (params.copy(), t + 1, row["tau"], val.mrr)
            window_rewards, window_gated, window_alpha = [], [], []

    bp, bstep, btau, bmrr = best
    return TrainResult(bp, bstep, btau, bmrr, metrics, config)


def format_metrics_csv(rows: Sequence[dict], header_comment: str | None = None) -> str:
    buf = io.StringIO()
    if header_comment:
        buf.write(f"# {header_comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in rows:
        w.writerow([r["step"]] + [repr(float(r[c])) for c in METRIC_COLUMNS[1:]])
    return buf.getvalue()
