"""Persona forge: feedback ingestion, embedding, clustering, trait tiers and synthesis."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import re
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from .errors import ClusteringError, DenylistError, FeedbackSchemaError, PersonaError, ResponseParseError, UserError

log = logging.getLogger(__name__)

TASKS = ("DR", "DTI")
BACKGROUNDS = ("LifeSciences", "CS_AI", "HybridCompBio", "CS_AI_Biomed", "Other")
DEFAULT_DENYLIST = ("REx", "RExLight", "MINERVA", "PoLo")
# explanation ids such as "E12", "exp-3", "explanation 7"
EXPLANATION_ID_RE = re.compile(r"\b(?:explanation|exp|E)[\s_-]?\d+\b", re.I)
ALGORITHMS = ("kmeans", "agglomerative", "hdbscan")
PERSONA_SCHEMA = "pkgx-persona/1"
PERSONA_PROMPT_VERSION = "persona/1"
TRAITS_PROMPT_VERSION = "traits/1"
CORE_SHARE = Fraction(2, 5)
SECONDARY_SHARE = Fraction(1, 4)


# -- ingestion -------------------------------------------------------------------


@dataclass(frozen=True)
class FeedbackRecord:
    participant_id: str
    task: str
    background: str
    statements: tuple[str, ...]
    ratings: tuple = ()
    response_id: str = ""

    @property
    def text(self) -> str:
        """All statements as one block, the unit that gets embedded."""
        return "\n".join(self.statements)

    def to_dict(self) -> dict:
        return {
            "participant_id": self.participant_id,
            "task": self.task,
            "background": self.background,
            "statements": list(self.statements),
        }


def _lint(statement: str, denylist: Sequence[str]) -> str | None:
    for term in denylist:
        if re.search(rf"(?<![A-Za-z0-9]){re.escape(term)}(?![A-Za-z0-9])", statement):
            return term
    m = EXPLANATION_ID_RE.search(statement)
    return m.group(0) if m else None


def _iter_json_lines(stream):
    if isinstance(stream, (str, os.PathLike)) and os.path.exists(stream):
        with open(stream, encoding="utf-8") as fh:
            yield from enumerate(fh.read().splitlines(), start=1)
        return
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    yield from enumerate((ln.rstrip("\n") for ln in stream), start=1)


def ingest_feedback(stream, denylist: Sequence[str] = DEFAULT_DENYLIST) -> list[FeedbackRecord]:
    """Parse JSON-lines feedback; one record per participant-task response."""
    from .stats import RatingRecord

    records = []
    seen = set()
    for lineno, line in _iter_json_lines(stream):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except ValueError as exc:
            raise FeedbackSchemaError(f"invalid JSON: {exc}", lineno) from None
        if not isinstance(obj, dict):
            raise FeedbackSchemaError("record must be a JSON object", lineno)
        missing = {"participant_id", "task", "background", "statements"} - set(obj)
        if missing:
            raise FeedbackSchemaError(f"missing fields {sorted(missing)}", lineno)
        pid, task, bg, sts = obj["participant_id"], obj["task"], obj["background"], obj["statements"]
        if not isinstance(pid, str) or not pid.strip():
            raise FeedbackSchemaError("participant_id must be a non-empty string", lineno)
        if task not in TASKS:
            raise FeedbackSchemaError(f"task must be one of {TASKS}, got {task!r}", lineno)
        if bg not in BACKGROUNDS:
            raise FeedbackSchemaError(f"background must be one of {BACKGROUNDS}, got {bg!r}", lineno)
        if not isinstance(sts, list) or not sts or not all(isinstance(s, str) and s.strip() for s in sts):
            raise FeedbackSchemaError("statements must be a non-empty list of non-empty strings", lineno)
        for s in sts:
            hit = _lint(s, denylist)
            if hit is not None:
                raise DenylistError(f"statement mentions {hit!r}: {s!r}", lineno)
        if (pid, task) in seen:
            raise FeedbackSchemaError(f"duplicate response for {pid!r} on {task}", lineno)
        seen.add((pid, task))
        ratings = ()
        if obj.get("ratings"):
            try:
                ratings = tuple(
                    RatingRecord(pid, r["hypothesis_id"], r["system"], r["validity"], r["completeness"], r["relevance"])
                    for r in obj["ratings"]
                )
            except (KeyError, TypeError, UserError) as exc:
                raise FeedbackSchemaError(f"bad ratings entry: {exc}", lineno) from None
        records.append(FeedbackRecord(pid, task, bg, tuple(s.strip() for s in sts), ratings))
    if not records:
        raise FeedbackSchemaError("no feedback records")
    counts = Counter(r.participant_id for r in records)
    out = []
    for r in records:
        rid = r.participant_id if counts[r.participant_id] == 1 else f"{r.participant_id}/{r.task}"
        out.append(FeedbackRecord(r.participant_id, r.task, r.background, r.statements, r.ratings, rid))
    log.info("ingested %d responses, %d statements", len(out), sum(len(r.statements) for r in out))
    return out


# -- embedding -------------------------------------------------------------------


@dataclass(frozen=True)
class ResponseEmbedding:
    response_id: str
    vector: np.ndarray


def l2_normalize(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ClusteringError("zero embedding vector cannot be normalized")
    return x / norms


def embed_records(records: Sequence[FeedbackRecord], gateway) -> list[ResponseEmbedding]:
    vecs = l2_normalize(gateway.embed([r.text for r in records]))
    return [ResponseEmbedding(r.response_id, v) for r, v in zip(records, vecs)]


# -- clustering ------------------------------------------------------------------


@dataclass
class ClusterSolution:
    algorithm: str
    k: int
    labels: np.ndarray  # -1 marks noise (hdbscan only)
    ids: tuple = ()
    metrics: dict = field(default_factory=dict)

    @property
    def noise(self) -> int:
        return int(np.sum(self.labels < 0))

    @property
    def eligible(self) -> bool:
        return self.noise == 0 and self.k >= 2

    def assignment(self) -> dict:
        return {i: int(c) for i, c in zip(self.ids, self.labels)}

    def members(self, c: int) -> list:
        return [i for i, lab in zip(self.ids, self.labels) if lab == c]


def _contiguous(labels: np.ndarray) -> np.ndarray:
    """Relabel clusters 0..k-1 in order of first appearance; noise stays -1."""
    out = np.full(len(labels), -1, dtype=int)
    mapping: dict[int, int] = {}
    for i, lab in enumerate(labels):
        if lab < 0:
            continue
        if lab not in mapping:
            mapping[lab] = len(mapping)
        out[i] = mapping[lab]
    return out


def cluster(x, algorithm: str, k: int | None = None, seed: int = 0, n_init: int = 50, min_cluster_size: int = 2, ids=None) -> ClusterSolution:
    from sklearn.cluster import HDBSCAN, AgglomerativeClustering, KMeans

    x = np.asarray(x, dtype=float)
    n = len(x)
    if n < 4:
        raise ClusteringError(f"need at least 4 points, got {n}")
    if np.ptp(x, axis=0).max() == 0.0:
        raise ClusteringError("degenerate data: all points identical")
    ids = tuple(ids) if ids is not None else tuple(str(i) for i in range(n))
    if algorithm in ("kmeans", "agglomerative"):
        hi = min(5, n - 1)
        if k is None or not (2 <= k <= hi):
            raise ClusteringError(f"k must lie in [2, {hi}] for n={n}, got {k}")
        if algorithm == "kmeans":
            model = KMeans(n_clusters=k, init="k-means++", n_init=n_init, random_state=seed)
        else:
            model = AgglomerativeClustering(n_clusters=k, linkage="ward")
        labels = _contiguous(model.fit_predict(x))
    elif algorithm == "hdbscan":
        labels = _contiguous(HDBSCAN(min_cluster_size=min_cluster_size, copy=True).fit_predict(x))
    else:
        raise ClusteringError(f"unknown algorithm {algorithm!r}")
    k_found = int(labels.max()) + 1 if (labels >= 0).any() else 0
    sol = ClusterSolution(algorithm, k_found, labels, ids)
    if k_found >= 2:
        keep = labels >= 0
        if len(set(labels[keep].tolist())) < keep.sum():
            sol.metrics = cluster_metrics(x[keep], labels[keep])
    return sol


def cluster_metrics(x, labels) -> dict:
    """Silhouette, Davies-Bouldin, Calinski-Harabasz and inertia with Euclidean distances."""
    x = np.asarray(x, dtype=float)
    labels = np.asarray(labels)
    ks = np.unique(labels)
    k = len(ks)
    n = len(x)
    if k < 2:
        raise ClusteringError("metrics need at least 2 clusters")
    if k >= n:
        raise ClusteringError("metrics need fewer clusters than points")
    cents = np.stack([x[labels == c].mean(axis=0) for c in ks])
    sizes = np.array([(labels == c).sum() for c in ks])
    idx = np.searchsorted(ks, labels)

    d = np.sqrt(np.maximum(((x[:, None, :] - x[None, :, :]) ** 2).sum(-1), 0.0))
    sil = np.zeros(n)
    for i in range(n):
        own = idx[i]
        if sizes[own] == 1:
            continue  # singleton convention: s(i) = 0
        a = d[i, idx == own].sum() / (sizes[own] - 1)
        b = min(d[i, idx == j].mean() for j in range(k) if j != own)
        sil[i] = 0.0 if max(a, b) == 0 else (b - a) / max(a, b)

    to_cent = np.linalg.norm(x - cents[idx], axis=1)
    scatter = np.array([to_cent[idx == j].mean() for j in range(k)])
    cd = np.linalg.norm(cents[:, None, :] - cents[None, :, :], axis=-1)
    db_terms = []
    for i in range(k):
        vals = [(scatter[i] + scatter[j]) / cd[i, j] if cd[i, j] > 0 else np.inf for j in range(k) if j != i]
        db_terms.append(max(vals))
    inertia = float((to_cent**2).sum())
    grand = x.mean(axis=0)
    between = float((sizes * ((cents - grand) ** 2).sum(-1)).sum())
    ch = np.inf if inertia == 0 else (between / (k - 1)) / (inertia / (n - k))
    return {
        "silhouette": float(sil.mean()),
        "davies_bouldin": float(np.mean(db_terms)),
        "calinski_harabasz": float(ch),
        "inertia": inertia,
    }


METRIC_DIRECTIONS = {"silhouette": 1, "calinski_harabasz": 1, "davies_bouldin": -1}
REPORT_COLUMNS = ("algorithm", "k", "silhouette", "davies_bouldin", "calinski_harabasz", "inertia", "noise", "eligible", "votes", "chosen")


@dataclass
class Selection:
    chosen: ClusterSolution
    votes: dict
    agreement: dict
    rows: list[dict]

    def report_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({c: (repr(r[c]) if isinstance(r[c], float) else r[c]) for c in REPORT_COLUMNS})
        return buf.getvalue()


def select_clustering(solutions: Sequence[ClusterSolution]) -> Selection:
    """Majority-of-metrics choice of k, then the algorithm agreeing most with the others.

    For every algorithm with at least two candidate k values, each metric
    (silhouette up, Calinski-Harabasz up, Davies-Bouldin down) votes for the k
    where it is best. The k with most votes wins (ties go to the smaller k).
    Among solutions at that k the one with the highest mean adjusted Rand index
    against the others is chosen (ties by algorithm name). Solutions with noise
    points are reported but never chosen.
    """
    from sklearn.metrics import adjusted_rand_score

    if not solutions:
        raise ClusteringError("no candidate clusterings")
    eligible = [s for s in solutions if s.eligible and s.metrics]
    if not eligible:
        raise ClusteringError("no eligible candidate clusterings (all have noise or too few clusters)")
    votes: Counter = Counter()
    by_alg: dict[str, list[ClusterSolution]] = {}
    for s in eligible:
        by_alg.setdefault(s.algorithm, []).append(s)
    for alg in sorted(by_alg):
        sols = by_alg[alg]
        if len({s.k for s in sols}) < 2:
            continue
        for metric, sign in METRIC_DIRECTIONS.items():
            best = min(sols, key=lambda s: (-sign * s.metrics[metric], s.k))
            votes[best.k] += 1
    if votes:
        top = max(votes.values())
        k_star = min(k for k, v in votes.items() if v == top)
    else:
        k_star = min(s.k for s in eligible)
    at_k = sorted((s for s in eligible if s.k == k_star), key=lambda s: s.algorithm)
    agreement = {}
    for s in at_k:
        others = [o for o in at_k if o is not s]
        agreement[s.algorithm] = float(np.mean([adjusted_rand_score(s.labels, o.labels) for o in others])) if others else 1.0
    chosen = max(at_k, key=lambda s: (agreement[s.algorithm], [-ord(c) for c in s.algorithm]))
    rows = []
    for s in sorted(solutions, key=lambda s: (s.algorithm, s.k)):
        m = s.metrics
        rows.append(
            {
                "algorithm": s.algorithm,
                "k": s.k,
                "silhouette": m.get("silhouette", float("nan")),
                "davies_bouldin": m.get("davies_bouldin", float("nan")),
                "calinski_harabasz": m.get("calinski_harabasz", float("nan")),
                "inertia": m.get("inertia", float("nan")),
                "noise": s.noise,
                "eligible": int(s in eligible),
                "votes": votes.get(s.k, 0),
                "chosen": int(s is chosen),
            }
        )
    return Selection(chosen, dict(votes), agreement, rows)


def candidate_solutions(x, algorithms=ALGORITHMS, k_range=(2, 5), seed=0, ids=None) -> list[ClusterSolution]:
    n = len(x)
    ks = range(k_range[0], min(k_range[1], 5, n - 1) + 1)
    out = []
    for alg in algorithms:
        if alg == "hdbscan":
            out.append(cluster(x, alg, seed=seed, ids=ids))
        else:
            out.extend(cluster(x, alg, k, seed=seed, ids=ids) for k in ks)
    return out


# -- traits ----------------------------------------------------------------------


@dataclass(frozen=True)
class TraitTier:
    trait: str
    supporter_ids: tuple
    supporters: int
    share: float
    tier: str
    backgrounds: dict

    def evidence(self) -> dict:
        return {"supporters": self.supporters, "share": self.share, "backgrounds": dict(self.backgrounds)}


def tier_of(share: Fraction) -> str:
    if share > CORE_SHARE:
        return "core"
    if share >= SECONDARY_SHARE:
        return "secondary"
    return "weak"


def trait_frequencies(records: Sequence[FeedbackRecord], extraction: Iterable[tuple[str, Iterable[str]]]) -> list[TraitTier]:
    """Tier traits by the share of cluster members supporting them.

    Core above 40%, secondary from 25% to 40% inclusive, weak below 25%.
    Output is sorted by supporter count (descending), then trait text.
    """
    members = {r.response_id: r for r in records}
    n = len(members)
    if n == 0:
        raise PersonaError("empty cluster")
    tiers = []
    for trait, ids in extraction:
        ids = sorted(set(ids))
        unknown = [i for i in ids if i not in members]
        if unknown:
            raise PersonaError(f"trait {trait!r}: unknown participant ids {unknown}")
        share = Fraction(len(ids), n)
        bgs = Counter(members[i].background for i in ids)
        tiers.append(TraitTier(trait, tuple(ids), len(ids), float(share), tier_of(share), dict(sorted(bgs.items()))))
    tiers.sort(key=lambda t: (-t.supporters, t.trait))
    return tiers


_STANCE_PREFIXES = (("I prefer explanations that ", "prefers explanations that "), ("I avoid explanations where ", "avoids explanations where "))


def statement_trait(statement: str) -> str:
    s = " ".join(statement.split()).rstrip(".")
    for prefix, label in _STANCE_PREFIXES:
        if s.lower().startswith(prefix.lower()):
            return label + s[len(prefix) :]
    return s


def traits_prompt(records: Sequence[FeedbackRecord]) -> str:
    block = {"records": [{"id": r.response_id, "statements": list(r.statements)} for r in records]}
    return "\n".join(
        [
            "task: traits",
            f"prompt_version: {TRAITS_PROMPT_VERSION}",
            "Group the preference statements below into explanatory traits.",
            "For each trait list the ids of the records that express it. Use only the ids given.",
            'Answer with one fenced block: ```json {"traits": [{"trait": "...", "supporters": ["id", ...]}]}```',
            "",
            "```json",
            json.dumps(block, sort_keys=True),
            "```",
        ]
    )


def _parse_traits(text: str) -> list[tuple[str, list[str]]]:
    from .llm import parse_fenced_json

    data = parse_fenced_json(text)
    try:
        return [(str(t["trait"]), [str(i) for i in t["supporters"]]) for t in data["traits"]]
    except (KeyError, TypeError) as exc:
        raise ResponseParseError(f"bad traits payload: {exc}") from exc


def extract_traits(records: Sequence[FeedbackRecord], gateway) -> list[tuple[str, list[str]]]:
    """Ask the model to map statements to traits (one reformat retry)."""
    from .llm import REFORMAT_NOTE

    prompt = traits_prompt(records)
    try:
        return _parse_traits(gateway.complete(prompt))
    except ResponseParseError:
        return _parse_traits(gateway.complete(prompt + REFORMAT_NOTE))


def stub_extract_traits(block: dict) -> str:
    """Offline responder: one trait per distinct normalized statement."""
    support: dict[str, set] = {}
    for rec in block["records"]:
        for s in rec["statements"]:
            support.setdefault(statement_trait(s), set()).add(rec["id"])
    traits = [{"trait": t, "supporters": sorted(ids)} for t, ids in sorted(support.items())]
    return "```json\n" + json.dumps({"traits": traits}, sort_keys=True) + "\n```"


# -- personas --------------------------------------------------------------------


@dataclass
class Persona:
    id: str
    name: str
    tagline: str
    narrative: str
    core: list[str]
    secondary: list[str]
    weak: list[str]
    evidence: dict
    source_cluster: list[str]
    provenance: dict

    def to_dict(self) -> dict:
        return {
            "schema": PERSONA_SCHEMA,
            "id": self.id,
            "name": self.name,
            "tagline": self.tagline,
            "narrative": self.narrative,
            "traits": {"core": self.core, "secondary": self.secondary, "weak": self.weak},
            "evidence": self.evidence,
            "source_cluster": self.source_cluster,
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Persona":
        if d.get("schema") != PERSONA_SCHEMA:
            raise PersonaError(f"unsupported persona schema {d.get('schema')!r}")
        try:
            p = cls(
                d["id"], d["name"], d["tagline"], d["narrative"],
                list(d["traits"]["core"]), list(d["traits"]["secondary"]), list(d["traits"]["weak"]),
                dict(d["evidence"]), list(d["source_cluster"]), dict(d["provenance"]),
            )
        except (KeyError, TypeError) as exc:
            raise PersonaError(f"malformed persona document: {exc}") from exc
        for t in p.core + p.secondary + p.weak:
            if t not in p.evidence:
                raise PersonaError(f"trait {t!r} has no evidence")
        return p

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def load_persona(path) -> Persona:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except (OSError, ValueError) as exc:
        raise UserError(f"cannot read persona {path}: {exc}") from exc
    try:
        return Persona.from_dict(data)
    except PersonaError as exc:
        raise UserError(f"{path}: {exc}") from exc


def persona_prompt(records: Sequence[FeedbackRecord], tiers: Sequence[TraitTier]) -> str:
    block = {
        "records": [{"id": r.response_id, "task": r.task, "background": r.background, "statements": list(r.statements)} for r in records],
        "tiers": [{"trait": t.trait, "tier": t.tier, **t.evidence()} for t in tiers],
    }
    return "\n".join(
        [
            "task: persona",
            f"prompt_version: {PERSONA_PROMPT_VERSION}",
            "The records below come from one cluster of expert feedback, with participant backgrounds.",
            "Traits are already tiered by frequency: core (more than 40% of participants), secondary (25 to 40%), weak (below 25%).",
            "Write a naturalistic character profile for this group: a first name, a one-line tagline and a narrative",
            "that reflects the core traits first and the secondary traits second. Keep trait texts verbatim.",
            'Answer with one fenced block: ```json {"name": "...", "tagline": "...", "narrative": "...", '
            '"core": [...], "secondary": [...], "weak": [...], "evidence": {"trait": {"supporters": n}}}```',
            "",
            "```json",
            json.dumps(block, sort_keys=True),
            "```",
        ]
    )


_STUB_NAMES = ("Elena", "Leo", "Maya", "Omar", "Iris", "Tomas", "Ada", "Ravi")


def stub_synthesize(block: dict) -> str:
    """Offline responder: template persona echoing the given tiers."""
    ids = sorted(r["id"] for r in block["records"])
    h = int.from_bytes(hashlib.blake2b("\x1f".join(ids).encode("utf-8"), digest_size=8).digest(), "little")
    name = _STUB_NAMES[h % len(_STUB_NAMES)]
    tiers = block["tiers"]
    core = [t["trait"] for t in tiers if t["tier"] == "core"]
    secondary = [t["trait"] for t in tiers if t["tier"] == "secondary"]
    weak = [t["trait"] for t in tiers if t["tier"] == "weak"]
    bgs = Counter(r["background"] for r in block["records"])
    bg = sorted(bgs.items(), key=lambda kv: (-kv[1], kv[0]))[0][0]
    lead = core[0] if core else (secondary[0] if secondary else "weighs each explanation on its merits")
    narrative = f"{name} speaks for {len(ids)} experts, mostly with a {bg} background. {name} {lead}."
    if len(core) > 1:
        narrative += " " + " ".join(f"{name} also {t}." for t in core[1:])
    if secondary:
        narrative += " To a lesser degree, " + "; ".join(secondary) + "."
    out = {
        "name": name,
        "tagline": lead[0].upper() + lead[1:],
        "narrative": narrative,
        "core": core,
        "secondary": secondary,
        "weak": weak,
        "evidence": {t["trait"]: {"supporters": t["supporters"]} for t in tiers},
    }
    return "```json\n" + json.dumps(out, sort_keys=True) + "\n```"


def _slug(name: str) -> str:
    return re.sub(r"[^a-z0-9]+", "-", name.lower()).strip("-") or "persona"


def _parse_persona(text: str, tiers: Sequence[TraitTier]) -> dict:
    from .llm import parse_fenced_json

    data = parse_fenced_json(text)
    for key in ("name", "tagline", "narrative", "core", "secondary", "weak"):
        if key not in data:
            raise ResponseParseError(f"persona response lacks {key!r}")
    if not all(isinstance(data[k], str) and data[k].strip() for k in ("name", "tagline", "narrative")):
        raise ResponseParseError("name, tagline and narrative must be non-empty strings")
    return data


def synthesize_persona(records: Sequence[FeedbackRecord], tiers: Sequence[TraitTier], gateway, persona_id: str | None = None) -> Persona:
    """LLM-written persona whose evidence is checked against ``tiers``.

    Counts reported by the model must match the computed evidence exactly; the
    stored evidence always comes from ``tiers``.
    """
    from .llm import REFORMAT_NOTE, prompt_hash

    prompt = persona_prompt(records, tiers)
    try:
        data = _parse_persona(gateway.complete(prompt), tiers)
    except ResponseParseError:
        log.info("persona response unparseable; asking once more")
        data = _parse_persona(gateway.complete(prompt + REFORMAT_NOTE), tiers)

    by_trait = {t.trait: t for t in tiers}
    for level in ("core", "secondary", "weak"):
        for trait in data[level]:
            t = by_trait.get(trait)
            if t is None:
                raise PersonaError(f"model introduced a trait without evidence: {trait!r}")
            if t.tier != level:
                raise PersonaError(f"trait {trait!r} listed as {level} but its share makes it {t.tier}")
    for t in tiers:
        if t.tier == "core" and t.trait not in data["core"]:
            raise PersonaError(f"core trait {t.trait!r} missing from persona")
    for trait, ev in (data.get("evidence") or {}).items():
        t = by_trait.get(trait)
        if t is None or int(ev.get("supporters", -1)) != t.supporters:
            raise PersonaError(f"model-reported evidence for {trait!r} disagrees with computed frequencies")

    listed = data["core"] + data["secondary"] + data["weak"]
    return Persona(
        id=persona_id or _slug(data["name"]),
        name=data["name"],
        tagline=data["tagline"],
        narrative=data["narrative"],
        core=list(data["core"]),
        secondary=list(data["secondary"]),
        weak=list(data["weak"]),
        evidence={t: by_trait[t].evidence() for t in listed},
        source_cluster=[r.response_id for r in records],
        provenance={"model": gateway.model_id, "prompt_hash": prompt_hash(prompt), "prompt_version": PERSONA_PROMPT_VERSION},
    )


@dataclass
class ForgeResult:
    personas: list[Persona]
    selection: Selection
    solutions: list[ClusterSolution]
    embeddings: list[ResponseEmbedding]


def build_personas(records: Sequence[FeedbackRecord], gateway, algorithms=ALGORITHMS, k_range=(2, 5), seed=0) -> ForgeResult:
    """Embed, cluster, select, tier traits and synthesize one persona per cluster."""
    emb = embed_records(records, gateway)
    x = np.stack([e.vector for e in emb])
    ids = [e.response_id for e in emb]
    sols = candidate_solutions(x, algorithms, k_range, seed, ids)
    sel = select_clustering(sols)
    by_id = {r.response_id: r for r in records}
    personas = []
    used = set()
    for c in range(sel.chosen.k):
        members = [by_id[i] for i in sel.chosen.members(c)]
        tiers = trait_frequencies(members, extract_traits(members, gateway))
        p = synthesize_persona(members, tiers, gateway)
        base, j = p.id, 2
        while p.id in used:
            p.id = f"{base}-{j}"
            j += 1
        used.add(p.id)
        personas.append(p)
    return ForgeResult(personas, sel, sols, emb)
