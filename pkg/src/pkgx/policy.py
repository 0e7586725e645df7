"""Stochastic walk policy with hand-written REINFORCE gradients.

State summary: a tanh recurrent cell (or a mean-pooled bag of steps) over
``[relation embedding; entity embedding]`` step inputs. The score head maps
``[hidden; query relation embedding]`` through one ReLU layer to a vector
``o`` and scores each candidate action as ``o . [rel_emb; ent_emb]``.

All arrays are float64. The batch layout is trajectory-major: ``B`` walks of
``T`` steps, padded candidate sets of width ``K`` per step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .env import Path, WalkEnv, WalkState
from .errors import TrainingDivergedError

PARAM_NAMES = ("ent", "rel", "Wx", "Wh", "bh", "W1", "b1", "W2")
ENCODERS = ("rnn", "mean")


@dataclass
class PolicyParams:
    ent: np.ndarray
    rel: np.ndarray
    Wx: np.ndarray
    Wh: np.ndarray
    bh: np.ndarray
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    encoder: str = "rnn"

    @property
    def dim(self) -> int:
        return self.ent.shape[1]

    @property
    def hidden(self) -> int:
        return self.Wh.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in PARAM_NAMES}

    def copy(self) -> "PolicyParams":
        return PolicyParams(**{k: v.copy() for k, v in self.arrays().items()}, encoder=self.encoder)

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.arrays().items()}

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.arrays().values())


def init_params(env: WalkEnv, d: int = 32, h: int = 64, seed: int = 0, encoder: str = "rnn") -> PolicyParams:
    """Glorot-style init with a zero output layer, so the initial policy is uniform."""
    if encoder not in ENCODERS:
        raise ValueError(f"encoder must be one of {ENCODERS}")
    rng = np.random.default_rng(seed)

    def glorot(shape):
        lim = np.sqrt(6.0 / (shape[0] + shape[-1]))
        return rng.uniform(-lim, lim, size=shape)

    return PolicyParams(
        ent=rng.normal(0.0, 0.1, size=(env.kg.num_entities, d)),
        rel=rng.normal(0.0, 0.1, size=(env.num_action_relations, d)),
        Wx=glorot((h, 2 * d)),
        Wh=glorot((h, h)) if encoder == "rnn" else np.zeros((h, h)),
        bh=np.zeros(h),
        W1=glorot((h, h + d)),
        b1=np.zeros(h),
        W2=np.zeros((2 * d, h)),
        encoder=encoder,
    )


# -- candidate gathering ------------------------------------------------------


def gather_actions(env: WalkEnv, cur, subj, qrel, qobj, training: bool):
    """Padded candidate (relation, entity, mask) matrices for a batch of positions."""
    deg = env.act_degree[cur]
    k = int(deg.max())
    cols = np.arange(k)
    mask = cols[None, :] < deg[:, None]
    idx = np.where(mask, env.act_offsets[cur][:, None] + cols[None, :], 0)
    arel = np.where(mask, env.act_rel[idx], env.stay)
    aent = np.where(mask, env.act_ent[idx], 0)
    if training:
        hide = (cur == subj)[:, None] & (arel == qrel[:, None]) & (aent == qobj[:, None])
        mask = mask & ~hide
    return arel, aent, mask


def _softmax_masked(logits, mask):
    z = np.where(mask, logits, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0)
    p = e / e.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore"):
        logp = np.where(mask, z - np.log(e.sum(axis=1, keepdims=True)), 0.0)
    return p, logp


# -- forward ------------------------------------------------------------------


@dataclass
class StepCache:
    x: np.ndarray
    h_prev: np.ndarray
    h: np.ndarray
    u: np.ndarray
    zpre: np.ndarray
    z: np.ndarray
    o: np.ndarray
    cand: np.ndarray
    arel: np.ndarray
    aent: np.ndarray
    mask: np.ndarray
    p: np.ndarray
    logp: np.ndarray
    prev_rel: np.ndarray
    cur: np.ndarray
    xsum: np.ndarray | None = None


@dataclass
class EncoderState:
    h: np.ndarray
    prev_rel: np.ndarray
    cur: np.ndarray
    t: int = 0
    xsum: np.ndarray | None = None


def initial_state(params: PolicyParams, env: WalkEnv, subj: np.ndarray) -> EncoderState:
    b = len(subj)
    xsum = np.zeros((b, 2 * params.dim)) if params.encoder == "mean" else None
    return EncoderState(np.zeros((b, params.hidden)), np.full(b, env.start), subj.copy(), 0, xsum)


def forward_step(params: PolicyParams, env, st: EncoderState, subj, qrel, qobj, training):
    """Encode the current position and score its candidates. Returns a StepCache."""
    x = np.concatenate([params.rel[st.prev_rel], params.ent[st.cur]], axis=1)
    if params.encoder == "rnn":
        a = x @ params.Wx.T + st.h @ params.Wh.T + params.bh
        xsum = None
    else:
        xsum = st.xsum + x
        a = (xsum / (st.t + 1)) @ params.Wx.T + params.bh
    h = np.tanh(a)
    u = np.concatenate([h, params.rel[qrel]], axis=1)
    zpre = u @ params.W1.T + params.b1
    z = np.maximum(zpre, 0.0)
    o = z @ params.W2.T
    arel, aent, mask = gather_actions(env, st.cur, subj, qrel, qobj, training)
    cand = np.concatenate([params.rel[arel], params.ent[aent]], axis=2)
    logits = np.einsum("bkd,bd->bk", cand, o)
    p, logp = _softmax_masked(logits, mask)
    return StepCache(x, st.h, h, u, zpre, z, o, cand, arel, aent, mask, p, logp, st.prev_rel, st.cur, xsum)


def advance(st: EncoderState, cache: StepCache, chosen_rel, chosen_ent) -> EncoderState:
    return EncoderState(cache.h, chosen_rel, chosen_ent, st.t + 1, cache.xsum)


@dataclass
class Batch:
    """Integer view of a list of paths (all of the same length T)."""

    subj: np.ndarray
    qrel: np.ndarray
    qobj: np.ndarray
    rels: np.ndarray  # (B, T)
    ents: np.ndarray  # (B, T)

    @classmethod
    def from_paths(cls, env: WalkEnv, paths: list[Path]) -> "Batch":
        kg = env.kg
        t = len(paths[0].steps)
        if any(len(p.steps) != t for p in paths):
            raise ValueError("all paths in a batch must have the same length")
        subj = np.array([p.subject_id for p in paths], dtype=np.int64)
        qrel = np.array([kg.relation_id(p.hypothesis.relation) for p in paths], dtype=np.int64)
        qobj = np.array([kg.entity_index.get(p.hypothesis.object, -1) for p in paths], dtype=np.int64)
        rels = np.array([[r for r, _ in p.steps] for p in paths], dtype=np.int64).reshape(len(paths), t)
        ents = np.array([[e for _, e in p.steps] for p in paths], dtype=np.int64).reshape(len(paths), t)
        return cls(subj, qrel, qobj, rels, ents)


def replay(params: PolicyParams, env: WalkEnv, batch: Batch, training=True) -> tuple[list[StepCache], np.ndarray]:
    """Teacher-forced forward pass. Returns caches and the chosen column per step (B, T)."""
    st = initial_state(params, env, batch.subj)
    caches, chosen = [], []
    for t in range(batch.rels.shape[1]):
        c = forward_step(params, env, st, batch.subj, batch.qrel, batch.qobj, training)
        hit = c.mask & (c.arel == batch.rels[:, t, None]) & (c.aent == batch.ents[:, t, None])
        if not hit.any(axis=1).all():
            raise ValueError(f"path step {t} is not a valid action")
        chosen.append(hit.argmax(axis=1))
        caches.append(c)
        st = advance(st, c, batch.rels[:, t], batch.ents[:, t])
    return caches, np.stack(chosen, axis=1)


def sample_paths(params, env: WalkEnv, hyps, rng: np.random.Generator, training=True, t_max=None, return_trace=False):
    """Draw one walk per hypothesis in ``hyps`` (repeat entries for several rollouts).

    With ``return_trace`` also returns the (caches, chosen columns) of the pass,
    reusable by ``loss_and_grad`` for the same parameters.
    """
    kg = env.kg
    t_max = env.t_max if t_max is None else t_max
    subj = np.array([kg.entity_id(h.subject) for h in hyps], dtype=np.int64)
    qrel = np.array([kg.relation_id(h.relation) for h in hyps], dtype=np.int64)
    qobj = np.array([kg.entity_index.get(h.object, -1) for h in hyps], dtype=np.int64)
    st = initial_state(params, env, subj)
    rels = np.empty((len(hyps), t_max), dtype=np.int64)
    ents = np.empty((len(hyps), t_max), dtype=np.int64)
    caches, cols = [], []
    for t in range(t_max):
        c = forward_step(params, env, st, subj, qrel, qobj, training)
        u = rng.random(len(hyps))
        cdf = np.cumsum(c.p, axis=1)
        # first column whose cumulative mass reaches u; zero-mass (masked) columns never qualify
        col = np.argmax((cdf >= u[:, None] * cdf[:, -1:]) & (c.p > 0), axis=1)
        r = c.arel[np.arange(len(col)), col]
        e = c.aent[np.arange(len(col)), col]
        rels[:, t], ents[:, t] = r, e
        caches.append(c)
        cols.append(col)
        st = advance(st, c, r, e)
    paths = [
        Path(h, tuple(zip(rels[i].tolist(), ents[i].tolist())), int(subj[i]))
        for i, h in enumerate(hyps)
    ]
    if return_trace:
        return paths, (caches, np.stack(cols, axis=1))
    return paths


# -- single-state API ---------------------------------------------------------


def _state_batch(env: WalkEnv, state: WalkState):
    kg = env.kg
    subj = np.array([kg.entity_id(state.query.subject)])
    qrel = np.array([kg.relation_id(state.query.relation)])
    qobj = np.array([kg.entity_index.get(state.query.object, -1)])
    return subj, qrel, qobj


def encode_state(params: PolicyParams, env: WalkEnv, state: WalkState, training=True) -> EncoderState:
    subj, qrel, qobj = _state_batch(env, state)
    st = initial_state(params, env, subj)
    for r, e in state.history:
        c = forward_step(params, env, st, subj, qrel, qobj, training)
        st = advance(st, c, np.array([r]), np.array([e]))
    return st


def action_distribution(params: PolicyParams, env: WalkEnv, state: WalkState, actions, training=True) -> np.ndarray:
    """Softmax over the given actions only (a subset of the valid set)."""
    if len(actions) == 0:
        raise ValueError("empty action list")
    subj, qrel, qobj = _state_batch(env, state)
    st = encode_state(params, env, state, training)
    c = forward_step(params, env, st, subj, qrel, qobj, training=False)
    o = c.o[0]
    arel = np.array([a[0] for a in actions])
    aent = np.array([a[1] for a in actions])
    cand = np.concatenate([params.rel[arel], params.ent[aent]], axis=1)
    logits = cand @ o
    logits = logits - logits.max()
    e = np.exp(logits)
    return e / e.sum()


class PolicyFn:
    """Adapter exposing params as a ``(state, actions) -> probs`` callable for WalkEnv.rollout."""

    def __init__(self, params: PolicyParams, env: WalkEnv, training=True):
        self.params = params
        self.env = env
        self.training = training

    def __call__(self, state, actions):
        return action_distribution(self.params, self.env, state, actions, self.training)


# -- loss and gradient ----------------------------------------------------------


def _scatter_add(target: np.ndarray, idx: np.ndarray, vals: np.ndarray) -> None:
    """target[idx] += vals with repeated indices accumulated (sorted segment sums)."""
    order = np.argsort(idx, kind="stable")
    sidx = idx[order]
    starts = np.flatnonzero(np.r_[True, sidx[1:] != sidx[:-1]])
    target[sidx[starts]] += np.add.reduceat(vals[order], starts, axis=0)


def trajectory_log_probs(params, env, batch: Batch, training=True) -> np.ndarray:
    caches, chosen = replay(params, env, batch, training)
    rows = np.arange(len(batch.subj))
    return sum(c.logp[rows, chosen[:, t]] for t, c in enumerate(caches))


def _entropy(c: StepCache) -> np.ndarray:
    return -(c.p * c.logp).sum(axis=1)


def loss_and_grad(
    params: PolicyParams,
    env: WalkEnv,
    batch: Batch,
    advantages: np.ndarray,
    entropy_weight: float,
    training=True,
    need_grad=True,
    replayed=None,
):
    """Loss = mean_b[-A_b * sum_t log pi(a_t)] - entropy_weight * mean_{b,t} H(pi_t).

    Returns (loss, grads, stats); grads is None when ``need_grad`` is false.
    ``replayed`` may pass the (caches, chosen) of the sampling pass to skip the replay.
    """
    caches, chosen = replayed if replayed is not None else replay(params, env, batch, training)
    B, T = batch.rels.shape
    rows = np.arange(B)
    adv = np.asarray(advantages, dtype=float)
    logp_traj = np.zeros(B)
    ent_sum = 0.0
    for t, c in enumerate(caches):
        logp_traj += c.logp[rows, chosen[:, t]]
        ent_sum += _entropy(c).sum()
    mean_entropy = ent_sum / (B * T)
    loss = -(adv * logp_traj).sum() / B - entropy_weight * mean_entropy
    stats = {"loss": float(loss), "entropy": float(mean_entropy), "mean_logp": float(logp_traj.mean())}
    if not need_grad:
        return loss, None, stats

    g = params.zeros_like()
    d, hdim = params.dim, params.hidden
    dh_next = np.zeros((B, hdim))
    dxsum_acc = np.zeros((B, 2 * d)) if params.encoder == "mean" else None
    for t in range(T - 1, -1, -1):
        c = caches[t]
        onehot = np.zeros_like(c.p)
        onehot[rows, chosen[:, t]] = 1.0
        H = _entropy(c)
        dlogits = (adv / B)[:, None] * (c.p - onehot)
        dlogits += (entropy_weight / (B * T)) * c.p * (c.logp + H[:, None])
        dlogits = np.where(c.mask, dlogits, 0.0)

        do = np.einsum("bk,bkd->bd", dlogits, c.cand)
        dcand = dlogits[:, :, None] * c.o[:, None, :]
        _scatter_add(g["rel"], c.arel.ravel(), dcand[:, :, :d].reshape(-1, d))
        _scatter_add(g["ent"], c.aent.ravel(), dcand[:, :, d:].reshape(-1, d))

        g["W2"] += do.T @ c.z
        dz = do @ params.W2
        dzpre = dz * (c.zpre > 0)
        g["W1"] += dzpre.T @ c.u
        g["b1"] += dzpre.sum(axis=0)
        du = dzpre @ params.W1
        _scatter_add(g["rel"], batch.qrel, du[:, hdim:])

        dh = du[:, :hdim] + dh_next
        da = dh * (1.0 - c.h**2)
        g["bh"] += da.sum(axis=0)
        if params.encoder == "rnn":
            g["Wx"] += da.T @ c.x
            g["Wh"] += da.T @ c.h_prev
            dx = da @ params.Wx
            dh_next = da @ params.Wh
        else:
            g["Wx"] += da.T @ (c.xsum / (t + 1))
            dxsum_acc += (da @ params.Wx) / (t + 1)
            dx = dxsum_acc
        _scatter_add(g["rel"], c.prev_rel, dx[:, :d])
        _scatter_add(g["ent"], c.cur, dx[:, d:])
    return loss, g, stats


# -- optimizers ----------------------------------------------------------------


def clip_grads(grads: dict, max_norm: float) -> float:
    norm = float(np.sqrt(sum(float((v * v).sum()) for v in grads.values())))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for v in grads.values():
            v *= scale
    return norm


@dataclass
class OptimizerState:
    kind: str = "sgd"
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def apply_update(params: PolicyParams, grads: dict, lr: float, opt: OptimizerState) -> PolicyParams:
    new = params.copy()
    opt.step += 1
    if opt.kind == "sgd":
        for k, gk in grads.items():
            getattr(new, k)[...] -= lr * gk
    elif opt.kind == "adam":
        b1, b2, eps = 0.9, 0.999, 1e-8
        for k, gk in grads.items():
            m = opt.m.setdefault(k, np.zeros_like(gk))
            v = opt.v.setdefault(k, np.zeros_like(gk))
            m *= b1
            m += (1 - b1) * gk
            v *= b2
            v += (1 - b2) * gk * gk
            mhat = m / (1 - b1**opt.step)
            vhat = v / (1 - b2**opt.step)
            getattr(new, k)[...] -= lr * mhat / (np.sqrt(vhat) + eps)
    else:
        raise ValueError(f"unknown optimizer {opt.kind!r}")
    if params.encoder == "mean":
        new.Wh[...] = 0.0
    return new


@dataclass
class BaselineState:
    value: float = 0.0
    decay: float = 0.9


def reinforce_update(
    params: PolicyParams,
    env: WalkEnv,
    paths: list[Path],
    rewards,
    baseline: BaselineState,
    lr: float = 0.01,
    entropy_weight: float = 0.02,
    grad_clip: float = 5.0,
    opt: OptimizerState | None = None,
    training: bool = True,
    replayed=None,
):
    """One policy-gradient step. Returns (new params, new baseline, stats)."""
    rewards = np.asarray(rewards, dtype=float)
    if not np.all(np.isfinite(rewards)):
        raise TrainingDivergedError("non-finite reward in batch")
    opt = opt or OptimizerState()
    batch = Batch.from_paths(env, paths)
    adv = rewards - baseline.value
    loss, grads, stats = loss_and_grad(params, env, batch, adv, entropy_weight, training, replayed=replayed)
    if not np.isfinite(loss):
        raise TrainingDivergedError(f"non-finite loss {loss}")
    norm = clip_grads(grads, grad_clip)
    if not np.isfinite(norm):
        raise TrainingDivergedError(f"non-finite gradient norm ({stats})")
    new = apply_update(params, grads, lr, opt)
    new_base = BaselineState(
        baseline.decay * baseline.value + (1 - baseline.decay) * float(rewards.mean()), baseline.decay
    )
    stats.update(grad_norm=norm, mean_reward=float(rewards.mean()), baseline=new_base.value)
    return new, new_base, stats

