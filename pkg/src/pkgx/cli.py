"""Command-line entry point: ``pkgx <command> ...``.

Exit codes: 0 success, 1 internal failure, 2 bad input or configuration.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys

import numpy as np

from . import stats as st
from .errors import PkgxError, StatisticsError, UserError

log = logging.getLogger("pkgx")


# -- helpers -----------------------------------------------------------------------


def _write(path, text: str) -> None:
    d = os.path.dirname(os.fspath(path))
    if d:
        os.makedirs(d, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _need(value, flag):
    if value is None:
        raise UserError(f"missing required input {flag}")
    return value


def _existing(path, what):
    if path is None or not os.path.exists(path):
        raise UserError(f"{what} not found: {path}")
    return path


def _config(args, overrides=None):
    from .config import config_hash, load_run_config

    ov = {"seed": getattr(args, "seed", None), "out": getattr(args, "out", None)}
    ov.update(overrides or {})
    cfg = load_run_config(args.config, ov)
    return cfg, config_hash(cfg)


def _gateway(cfg, cache_path=None):
    from .llm import LLMGateway, ProviderConfig, RatingCache

    p = cfg["provider"]
    pc = ProviderConfig.from_env(
        base_url=p["base_url"] if p["base_url"] != "stub://" else None,
        model_id=p["model_id"],
        embed_model=p["embed_model"],
        max_in_flight=p["max_in_flight"],
        max_retries=p["max_retries"],
        timeout=p["timeout"],
    )
    return LLMGateway(pc, cache=RatingCache(cache_path))


def _load_kg(path):
    from .kg import load_triples

    return load_triples(_existing(path, "knowledge graph"))


def _load_split(path, what):
    from .kg import load_hypotheses

    return load_hypotheses(_existing(path, what))


def _env_for(kg, ckpt):
    from .env import WalkEnv

    c = ckpt.config
    return WalkEnv(kg, t_max=c.get("t_max", 3), inverse_edges=c.get("inverse_edges", True))


def _dump_json(obj, out_path=None):
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if out_path:
        _write(out_path, text)
    sys.stdout.write(text)


# -- kg ----------------------------------------------------------------------------


def cmd_kg_stats(args):
    kg = _load_kg(args.kg)
    freq = kg.node_frequency
    deg = np.array([len(kg.out_edges(i)[0]) for i in range(kg.num_entities)])
    out = {
        "entities": kg.num_entities,
        "relations": kg.num_relations,
        "triples": kg.num_triples,
        "relation_names": list(kg.relations),
        "max_node_frequency": int(freq.max()),
        "mean_node_frequency": float(freq.mean()),
        "sinks": int(np.sum(deg == 0)),
    }
    _dump_json(out, args.json_out)
    return 0


def cmd_kg_synth(args):
    from .synthetic import planted_path_kg

    fx = planted_path_kg(seed=args.seed)
    files = fx.write(args.out)
    _dump_json({"files": files, "entities": fx.kg.num_entities, "relations": fx.kg.num_relations, "triples": fx.kg.num_triples})
    return 0


# -- persona -----------------------------------------------------------------------


def cmd_persona_build(args):
    from .persona import ALGORITHMS, build_personas, ingest_feedback

    algs = tuple(a.strip() for a in args.algorithms.split(",")) if args.algorithms else ALGORITHMS
    bad = [a for a in algs if a not in ALGORITHMS]
    if bad:
        raise UserError(f"unknown algorithms {bad}; choose from {ALGORITHMS}")
    cfg, h = _config(args)
    records = ingest_feedback(_existing(args.feedback, "feedback file"))
    res = build_personas(records, _gateway(cfg), algs, (args.k_min, args.k_max), cfg["seed"])
    os.makedirs(args.out, exist_ok=True)
    _write(os.path.join(args.out, "clustering-report.csv"), f"# run_config {h}\n" + res.selection.report_csv())
    emb = io.StringIO()
    w = csv.writer(emb, lineterminator="\n")
    for e in res.embeddings:
        w.writerow([e.response_id] + [repr(float(v)) for v in e.vector])
    _write(os.path.join(args.out, "embeddings.csv"), emb.getvalue())
    written = []
    for p in res.personas:
        p.provenance["run_config"] = h
        path = os.path.join(args.out, f"persona-{p.id}.json")
        p.save(path)
        written.append(path)
    _dump_json(
        {
            "chosen": {"algorithm": res.selection.chosen.algorithm, "k": res.selection.chosen.k},
            "votes": {str(k): v for k, v in sorted(res.selection.votes.items())},
            "personas": written,
            "run_config": h,
        }
    )
    return 0


def _read_groups(path):
    if path is None:
        return None
    groups = {}
    with open(_existing(path, "groups file"), newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            groups[row["hypothesis_id"]] = row["group"]
    return groups


def _credibility(args, h):
    persona = st.read_ratings_csv(_existing(args.persona_ratings, "persona ratings"))
    expert = st.read_ratings_csv(_existing(args.expert_ratings, "expert ratings"))
    rows = st.validate_persona(persona, expert, _read_groups(args.groups))
    buf = io.StringIO()
    buf.write(f"# run_config {h}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["group", "dimension", "n", "r", "p"])
    for r in rows:
        w.writerow([r.group, r.dimension, r.n, repr(r.r), repr(r.p)])
    text = "\n".join(f"{r.group:>8} {r.dimension:<13} n={r.n:<4} r={r.r:+.3f} p={r.p:.4g}" for r in rows)
    return buf.getvalue(), text


def cmd_persona_validate(args):
    cfg, h = _config(args)
    report_csv, text = _credibility(args, h)
    if args.out:
        _write(os.path.join(args.out, "credibility.csv"), report_csv)
    print(text)
    return 0


# -- train / explain / eval --------------------------------------------------------


def cmd_train(args):
    from .agent import format_metrics_csv, train
    from .checkpoint import Checkpoint, env_signature, save_checkpoint
    from .config import train_config
    from .env import WalkEnv
    from .persona import load_persona
    from .reward import FidelityReward, RewardEngine

    overrides = {
        "data.kg": args.kg,
        "data.train": args.train,
        "data.valid": args.valid,
        "data.persona": args.persona,
        "train.total_steps": args.steps,
        "train.learning_rate": args.lr,
        "train.optimizer": args.optimizer,
        "train.encoder": args.encoder,
        "train.eval_every": args.eval_every,
        "train.inverse_edges": None if args.inverse_edges is None else args.inverse_edges == "on",
        "curriculum.warmup_steps": args.warmup,
        "reward": args.reward,
        "rating_cache": args.rating_cache,
        "jobs": args.jobs,
    }
    cfg, h = _config(args, overrides)
    data = cfg["data"]
    kg = _load_kg(_need(data["kg"], "--kg"))
    queries = _load_split(_need(data["train"], "--train"), "train split")
    valid = _load_split(data["valid"], "valid split") if data["valid"] else None
    tc = train_config(cfg)
    env = WalkEnv(kg, t_max=tc.t_max, inverse_edges=tc.inverse_edges)
    for hyp in queries + (valid or []):
        kg.entity_id(hyp.subject)
        kg.entity_id(hyp.object)
        kg.relation_id(hyp.relation)

    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    mode = cfg["reward"]
    persona = load_persona(data["persona"]) if data["persona"] else None
    if mode == "auto":
        mode = "persona" if persona is not None else "relevance"
    if mode == "persona":
        if persona is None:
            raise UserError("reward 'persona' needs --persona")
        gw = _gateway(cfg, cfg["rating_cache"])
        reward_fn = RewardEngine(env, tc.curriculum, gw.rater(persona, env), jobs=cfg["jobs"])
    elif mode == "relevance":
        reward_fn = RewardEngine(env, tc.curriculum, None)
    elif mode == "fidelity":
        reward_fn = FidelityReward(env)
    else:
        raise UserError(f"unknown reward mode {mode!r}")

    res = train(env, queries, reward_fn, tc, valid_queries=valid)
    comment = f"run_config {h}"
    _write(os.path.join(out, "metrics.csv"), format_metrics_csv(res.metrics, comment))
    meta = {"run_config": h, "persona_id": persona.id if persona else None, "reward": mode}
    ckpt = Checkpoint(res.params, res.best_step, res.tau, res.val_mrr, {**tc.to_dict(), **meta}, env_signature(env))
    ckpt_path = os.path.join(out, "model.pkgx-ckpt")
    save_checkpoint(ckpt, ckpt_path)
    _write(os.path.join(out, "run-config.json"), json.dumps({"hash": h, "config": cfg}, indent=2, sort_keys=True, default=str) + "\n")
    calls = getattr(reward_fn, "rater_calls", None)
    _dump_json({"checkpoint": ckpt_path, "best_step": res.best_step, "val_mrr": res.val_mrr, "tau": res.tau, "rater_calls": calls, "run_config": h})
    return 0


def _load_ckpt_env(args):
    from .checkpoint import check_env, load_checkpoint

    ckpt = load_checkpoint(_existing(args.checkpoint, "checkpoint"))
    kg = _load_kg(args.kg)
    env = _env_for(kg, ckpt)
    check_env(ckpt, env)
    return ckpt, env


def candidate_paths(params, env, hypothesis, beam_width, rollouts, seed):
    """Beam walks plus seeded samples, all from the inference-mode policy."""
    from .agent import beam_search
    from .env import Path
    from .policy import sample_paths

    sid = env.kg.entity_id(hypothesis.subject)
    out = [Path(hypothesis, b.steps, sid) for b in beam_search(params, env, hypothesis, beam_width)]
    if rollouts:
        rng = np.random.default_rng([seed, 0xE1])
        out += sample_paths(params, env, [hypothesis] * rollouts, rng, training=False)
    return out


def cmd_explain(args):
    from .kg import Hypothesis
    from .persona import load_persona
    from .reward import CurriculumSchedule, path_reward, select_explanation

    cfg, h = _config(args, {"explain.m": args.m, "explain.beam_width": args.beam_width, "explain.rollouts": args.rollouts, "data.persona": args.persona})
    ex = cfg["explain"]
    ckpt, env = _load_ckpt_env(args)
    hyp = Hypothesis.parse(args.hypothesis)
    env.kg.entity_id(hyp.subject)
    env.kg.entity_id(hyp.object)
    env.kg.relation_id(hyp.relation)
    persona = load_persona(cfg["data"]["persona"]) if cfg["data"]["persona"] else None
    gw = _gateway(cfg, cfg["rating_cache"])
    rater = gw.rater(persona, env) if persona else None
    mode = "adaptive" if persona else "non-adaptive"
    sched = CurriculumSchedule().freeze(ckpt.tau)
    seen = set()
    scored = []
    for p in candidate_paths(ckpt.params, env, hyp, ex["beam_width"], ex["rollouts"], cfg["seed"]):
        if p.steps in seen:
            continue
        seen.add(p.steps)
        scored.append((p, path_reward(env, p, 0, sched, rater)))
    expl = select_explanation(env, scored, ex["m"], mode, hypothesis=hyp)
    doc = {
        "hypothesis": [hyp.subject, hyp.relation, hyp.object],
        "mode": mode,
        "persona": persona.id if persona else None,
        "tau": ckpt.tau,
        "m": ex["m"],
        "empty": expl.empty,
        "paths": [
            {"hops": [list(x) for x in env.render_path(p)], "canonical": env.canonical_path(p), "breakdown": bd.to_dict()}
            for p, bd in expl.paths
        ],
        "run_config": h,
    }
    if args.verbalize and not expl.empty:
        doc["verbalization"] = gw.verbalize_path(env, hyp, [p for p, _ in expl.paths], persona).to_dict()
    _dump_json(doc, args.json_out)
    return 0


def cmd_eval(args):
    from .agent import evaluate_link_prediction

    cfg, h = _config(args)
    ckpt, env = _load_ckpt_env(args)
    test = _load_split(args.test, "test split")
    if not test:
        raise UserError("empty test split")
    bw = args.beam_width or ckpt.config.get("beam_width", 16)
    m = evaluate_link_prediction(ckpt.params, env, test, bw)
    text = f"# run_config {h}\nsplit,hits@1,hits@3,mrr,n\ntest,{m.hits1!r},{m.hits3!r},{m.mrr!r},{m.n}\n"
    if args.csv_out:
        _write(args.csv_out, text)
    sys.stdout.write(text)
    return 0


# -- stats -------------------------------------------------------------------------


def ratings_report(records, baseline=None):
    """Means, rank tests and ICC by system; failures are recorded, not raised."""
    rows = []
    lines = []
    systems = sorted({r.system for r in records})
    by_sys = {s: [r for r in records if r.system == s] for s in systems}
    lines.append("Ratings by system (mean +- SD)")
    for s in systems:
        parts = []
        for d in st.DIMENSIONS:
            v = np.array([r.score(d) for r in by_sys[s]])
            sd = float(v.std(ddof=1)) if len(v) > 1 else float("nan")
            rows.append(["mean", s, d, "mean", repr(float(v.mean())), "", len(v)])
            rows.append(["mean", s, d, "sd", repr(sd), "", len(v)])
            parts.append(f"{d} {v.mean():.2f}+-{sd:.2f}")
        lines.append(f"  {s:<16} " + "  ".join(parts))

    def attempt(section, label, fn):
        try:
            return fn()
        except StatisticsError as exc:
            rows.append([section, label[0], label[1], "error", str(exc), "", ""])
            lines.append(f"  {section} {label[0]} {label[1]}: not computed ({exc})")
            return None

    base = baseline or (systems[0] if systems else None)
    lines.append(f"Wilcoxon signed-rank vs {base} (paired by rater and hypothesis)")
    key = lambda r: (r.rater_id, r.hypothesis_id)
    base_map = {key(r): r for r in by_sys.get(base, [])}
    for s in systems:
        if s == base:
            continue
        pairs = [(base_map[key(r)], r) for r in by_sys[s] if key(r) in base_map]
        for d in st.DIMENSIONS:
            res = attempt("wilcoxon", (s, d), lambda: st.wilcoxon_signed_rank([a.score(d) for a, _ in pairs], [b.score(d) for _, b in pairs]))
            if res:
                rows.append(["wilcoxon", s, d, "W", repr(res.statistic), repr(res.pvalue), res.n])
                lines.append(f"  {s:<16} {d:<13} W={res.statistic:g} p={res.pvalue:.4g} n={res.n} ({res.method})")

    lines.append("Kruskal-Wallis across systems")
    for d in st.DIMENSIONS:
        res = attempt("kruskal", ("all", d), lambda: st.kruskal_wallis([[r.score(d) for r in by_sys[s]] for s in systems]))
        if res:
            rows.append(["kruskal", "all", d, "H", repr(res.statistic), repr(res.pvalue), res.n])
            lines.append(f"  {d:<13} H={res.statistic:.3f} p={res.pvalue:.4g}")

    lines.append("Spearman between dimensions (all ratings)")
    for a, b in ((0, 1), (0, 2), (1, 2)):
        da, db = st.DIMENSIONS[a], st.DIMENSIONS[b]
        res = attempt("spearman", ("all", f"{da}~{db}"), lambda: st.spearman_test([r.score(da) for r in records], [r.score(db) for r in records]))
        if res:
            rows.append(["spearman", "all", f"{da}~{db}", "rho", repr(res[0]), repr(res[1]), len(records)])
            lines.append(f"  {da}~{db}: rho={res[0]:.3f} p={res[1]:.4g}")

    lines.append("ICC(3,k) by system")
    for s in systems:
        raters = sorted({r.rater_id for r in by_sys[s]})
        hyps = sorted({r.hypothesis_id for r in by_sys[s]})
        cell = {(r.hypothesis_id, r.rater_id): r for r in by_sys[s]}
        for d in st.DIMENSIONS:
            m = np.array([[cell[(hh, rr)].score(d) if (hh, rr) in cell else np.nan for rr in raters] for hh in hyps])
            val = attempt("icc", (s, d), lambda: st.icc3k(m))
            if val is not None:
                rows.append(["icc", s, d, "icc3k", repr(val), "", len(hyps)])
                lines.append(f"  {s:<16} {d:<13} ICC={val:.3f}")
    return rows, lines


def preference_report(path, target):
    counts = {}
    n = 0
    with open(_existing(path, "preference file"), newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if "preferred" not in (reader.fieldnames or ()):
            raise UserError(f"{path}: needs a 'preferred' column")
        for row in reader:
            counts[row["preferred"]] = counts.get(row["preferred"], 0) + 1
            n += 1
    if n == 0:
        raise UserError("empty preference file")
    targets = [target] if target else sorted(counts)
    rows, lines = [], ["Preference (exact two-sided binomial, p0 = 0.5)"]
    for t in targets:
        k = counts.get(t, 0)
        p = st.binomial_two_sided(k, n, 0.5)
        rows.append(["binomial", t, "preferred", "k", str(k), repr(p), n])
        lines.append(f"  {t}: {k}/{n} = {100 * k / n:.1f}%  p={p:.4g}")
    return rows, lines


def cmd_stats(args):
    cfg, h = _config(args)
    if args.mode == "ratings":
        records = []
        for path in _need(args.ratings, "--ratings"):
            records += st.read_ratings_csv(_existing(path, "ratings file"))
        if not records:
            raise UserError("no ratings")
        rows, lines = ratings_report(records, args.baseline)
    elif args.mode == "preference":
        rows, lines = preference_report(_need(args.preferences, "--preferences"), args.target)
    else:
        report_csv, text = _credibility(args, h)
        if args.out:
            _write(os.path.join(args.out, "stats-credibility.csv"), report_csv)
        print(text)
        return 0
    buf = io.StringIO()
    buf.write(f"# run_config {h}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["section", "system", "dimension", "statistic", "value", "p", "n"])
    w.writerows(rows)
    text = "\n".join(lines) + "\n"
    if args.out:
        _write(os.path.join(args.out, f"stats-{args.mode}.csv"), buf.getvalue())
        _write(os.path.join(args.out, f"stats-{args.mode}.txt"), text)
    sys.stdout.write(text)
    return 0


def cmd_profile_assign(args):
    if args.answers:
        print(st.assign_persona([a.strip() for a in args.answers.split(",")]))
        return 0
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["participant_id", "persona"])
    with open(_existing(args.answers_file, "answers file"), newline="", encoding="utf-8") as fh:
        for row in csv.reader(fh):
            if not row or row[0] == "participant_id":
                continue
            w.writerow([row[0], st.assign_persona([x.strip() for x in row[1:]])])
    sys.stdout.write(out.getvalue())
    return 0


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pkgx", description="Persona-conditioned path explanations over knowledge graphs.")
    ap.add_argument("--config", help="TOML run configuration; flags override it")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    kg = sub.add_parser("kg", help="graph utilities").add_subparsers(dest="kg_cmd", required=True)
    p = kg.add_parser("stats", help="vocabulary and frequency summary")
    p.add_argument("--kg", required=True)
    p.add_argument("--json-out")
    p.set_defaults(fn=cmd_kg_stats)
    p = kg.add_parser("synth", help="write the planted-path fixture (graph/train/valid/test TSV)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_kg_synth)

    pe = sub.add_parser("persona", help="build or validate personas").add_subparsers(dest="persona_cmd", required=True)
    p = pe.add_parser("build", help="embed, cluster and synthesize personas from feedback")
    p.add_argument("--feedback", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--algorithms", help="comma list of kmeans,agglomerative,hdbscan")
    p.add_argument("--k-min", type=int, default=2)
    p.add_argument("--k-max", type=int, default=5)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_persona_build)
    p = pe.add_parser("validate", help="correlate persona ratings with mean expert ratings")
    _credibility_args(p)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_persona_validate)

    p = sub.add_parser("train", help="REINFORCE training; writes model.pkgx-ckpt and metrics.csv")
    p.add_argument("--kg")
    p.add_argument("--train")
    p.add_argument("--valid")
    p.add_argument("--persona")
    p.add_argument("--reward", choices=["auto", "persona", "relevance", "fidelity"])
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--optimizer", choices=["sgd", "adam"])
    p.add_argument("--encoder", choices=["rnn", "mean"])
    p.add_argument("--eval-every", type=int)
    p.add_argument("--warmup", type=int, help="curriculum warm-up steps")
    p.add_argument("--inverse-edges", choices=["on", "off"])
    p.add_argument("--rating-cache")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--jobs", type=int, help="concurrent persona ratings")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("explain", help="top-m explanatory paths for one hypothesis")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--kg", required=True)
    p.add_argument("--hypothesis", required=True, help="subject,relation,object")
    p.add_argument("--m", type=int)
    p.add_argument("--persona")
    p.add_argument("--beam-width", type=int)
    p.add_argument("--rollouts", type=int)
    p.add_argument("--verbalize", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--json-out")
    p.set_defaults(fn=cmd_explain)

    p = sub.add_parser("eval", help="Hits@1, Hits@3 and MRR on a test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--kg", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--beam-width", type=int)
    p.add_argument("--csv-out")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("stats", help="statistical battery over rating files")
    p.add_argument("--mode", choices=["ratings", "preference", "credibility"], required=True)
    p.add_argument("--ratings", nargs="+")
    p.add_argument("--baseline", help="system the others are compared with (default: first by name)")
    p.add_argument("--preferences")
    p.add_argument("--target", help="system whose preference share is tested")
    _credibility_args(p, required=False)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_stats)

    pr = sub.add_parser("profile", help="participant to persona assignment").add_subparsers(dest="profile_cmd", required=True)
    p = pr.add_parser("assign", help="majority rule over three answers")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--answers", help="three comma-separated persona ids")
    g.add_argument("--answers-file", help="CSV rows: participant_id,a1,a2,a3")
    p.set_defaults(fn=cmd_profile_assign)
    return ap


def _credibility_args(p, required=True):
    p.add_argument("--persona-ratings", required=required)
    p.add_argument("--expert-ratings", required=required)
    p.add_argument("--groups", help="CSV hypothesis_id,group (e.g. task)")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except UserError as exc:
        print(f"pkgx: error: {exc}", file=sys.stderr)
        return 2
    except (PkgxError, Exception) as exc:  # noqa: BLE001
        log.debug("internal failure", exc_info=True)
        print(f"pkgx: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
