"""Synthetic fixtures: a planted-path graph and a two-stance feedback corpus."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .kg import Hypothesis, KnowledgeGraph, Triple, load_triples

PLANTED_RELATIONS = ("treats", "binds", "regulates", "associates")


@dataclass
class PlantedFixture:
    kg: KnowledgeGraph
    train: list[Hypothesis]
    valid: list[Hypothesis]
    test: list[Hypothesis]
    triples: list[Triple]

    def write(self, outdir) -> dict:
        """Write graph.tsv, train.tsv, valid.tsv, test.tsv; returns the paths."""
        import os

        os.makedirs(outdir, exist_ok=True)
        files = {}

        def dump(name, rows):
            path = os.path.join(outdir, name)
            with open(path, "w", encoding="utf-8") as fh:
                for t in rows:
                    fh.write(f"{t.subject}\t{t.relation}\t{t.object}\n")
            files[name.split(".")[0]] = path

        dump("graph.tsv", self.triples)
        dump("train.tsv", self.train)
        dump("valid.tsv", self.valid)
        dump("test.tsv", self.test)
        return files


def planted_path_kg(
    seed: int = 0,
    n_train: int = 50,
    n_valid: int = 10,
    n_test: int = 20,
    n_modules: int = 20,
    n_noise_entities: int = 60,
    n_noise_relations: int = 6,
    noise_edges_per_entity: int = 2,
) -> PlantedFixture:
    """Compound -binds-> gene -regulates-> gene -associates-> disease chains plus noise.

    Every hypothesis (compound, treats, disease) has exactly one planted 3-hop
    mechanism. Training hypotheses are also present as direct ``treats`` edges;
    validation and test hypotheses are held out of the graph. Noise edges only
    use the noise relations, so the planted relation pattern is unambiguous.
    """
    rng = np.random.default_rng(seed)
    n_q = n_train + n_valid + n_test
    compounds = [f"Compound::C{i:03d}" for i in range(n_q)]
    g1 = [f"Gene::T{m:02d}" for m in range(n_modules)]
    g2 = [f"Gene::R{m:02d}" for m in range(n_modules)]
    dis = [f"Disease::D{m:02d}" for m in range(n_modules)]
    noise = [f"Anatomy::A{j:02d}" for j in range(n_noise_entities)]
    noise_rels = [f"noise_{j}" for j in range(n_noise_relations)]

    triples: list[Triple] = []
    for m in range(n_modules):
        triples.append(Triple(g1[m], "regulates", g2[m]))
        triples.append(Triple(g2[m], "associates", dis[m]))
    module_of = rng.permutation(np.arange(n_q) % n_modules)
    hyps = []
    for i, c in enumerate(compounds):
        m = int(module_of[i])
        triples.append(Triple(c, "binds", g1[m]))
        hyps.append(Hypothesis(c, "treats", dis[m]))
    order = rng.permutation(n_q)
    train = [hyps[i] for i in order[:n_train]]
    valid = [hyps[i] for i in order[n_train : n_train + n_valid]]
    test = [hyps[i] for i in order[n_train + n_valid :]]
    for h in train:
        triples.append(Triple(h.subject, h.relation, h.object))

    everything = compounds + g1 + g2 + dis + noise
    for src in everything:
        for _ in range(noise_edges_per_entity):
            dst = noise[int(rng.integers(len(noise)))] if rng.random() < 0.6 else everything[int(rng.integers(len(everything)))]
            if dst == src:
                continue
            triples.append(Triple(src, noise_rels[int(rng.integers(len(noise_rels)))], dst))

    # ensure the relation vocabulary always lists planted relations first
    text = [f"{t.subject}\t{t.relation}\t{t.object}" for t in triples]
    kg = load_triples(text)
    return PlantedFixture(kg, train, valid, test, triples)


# -- feedback corpus -------------------------------------------------------------

DETAIL_STATEMENTS = (
    "I prefer explanations that trace every molecular step from drug binding to disease pathway.",
    "I prefer explanations that name the specific protein target and its binding mechanism.",
    "I prefer explanations that use precise predicates such as binds, inhibits or upregulates.",
    "I prefer explanations that show the gene regulation cascade in mechanistic detail.",
    "I avoid explanations where a mechanistic step in the pathway is skipped.",
    "I prefer explanations that connect receptor signalling to downstream gene expression.",
    "I prefer explanations that keep intermediate genes visible along the mechanism.",
    "I prefer explanations that cite the biological pathway linking target and phenotype.",
    "I avoid explanations where the relation between gene and disease is vague or generic.",
    "I prefer explanations that tolerate complexity when each mechanistic link is justified.",
    "I prefer explanations that give a complete overview of the molecular mechanism.",
    "I prefer explanations that distinguish direct binding from indirect pathway effects.",
    "I avoid explanations where molecular targets are replaced by broad ontology classes.",
    "I prefer explanations that show how the protein target modulates pathway activity.",
)

CONCISE_STATEMENTS = (
    "I prefer explanations that are short, concise and easy to read at a glance.",
    "I avoid explanations where too many similar drugs overwhelm the reader.",
    "I prefer explanations that stay streamlined with only the essential components.",
    "I prefer explanations that use broad high-level terms such as causes or treats.",
    "I avoid explanations where redundant links make the graph confusing.",
    "I prefer explanations that give a simple summary rather than exhaustive detail.",
    "I prefer explanations that show a direct and compact route to the conclusion.",
    "I avoid explanations where overly detailed chains hide the main message.",
    "I prefer explanations that highlight one clear reason instead of many parallel ones.",
    "I prefer explanations that are concise while retaining essential components.",
    "I avoid explanations where irrelevant side information is included.",
    "I prefer explanations that a clinician could read quickly and trust.",
    "I prefer explanations that summarise the overall rationale in plain words.",
    "I avoid explanations where the structure is cluttered and overwhelming.",
)

BACKGROUNDS = ("LifeSciences", "CS_AI", "HybridCompBio", "CS_AI_Biomed", "Other")


def feedback_corpus(seed: int = 0, n_detail: int = 10, n_concise: int = 5) -> list[dict]:
    """Fifteen curated responses (9 DR, 6 DTI) with 125 statements in two stances.

    Ten responses carry 8 statements and five carry 9, giving 125 in total for
    the default sizes.
    """
    rng = np.random.default_rng(seed)
    n = n_detail + n_concise
    counts = [8] * n
    for i in rng.choice(n, size=min(5, n), replace=False):
        counts[i] = 9
    tasks = ["DR"] * 9 + ["DTI"] * 6 if n == 15 else ["DR" if i % 2 == 0 else "DTI" for i in range(n)]
    records = []
    for i in range(n):
        pool = DETAIL_STATEMENTS if i < n_detail else CONCISE_STATEMENTS
        picks = rng.choice(len(pool), size=min(counts[i], len(pool)), replace=False)
        records.append(
            {
                "participant_id": f"P{i + 1:02d}",
                "task": tasks[i],
                "background": BACKGROUNDS[int(rng.integers(len(BACKGROUNDS) - 1))],
                "statements": [pool[j] for j in sorted(picks)],
            }
        )
    return records


def write_jsonl(records, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def two_blob_embeddings(seed: int = 0, sizes=(8, 7), dim: int = 768, spread: float = 0.05) -> np.ndarray:
    """L2-normalized points scattered tightly around two orthogonal directions."""
    rng = np.random.default_rng(seed)
    centers = np.zeros((len(sizes), dim))
    for i in range(len(sizes)):
        centers[i, i] = 1.0
    pts = [centers[i] + spread * rng.normal(size=(s, dim)) / np.sqrt(dim) for i, s in enumerate(sizes)]
    x = np.vstack(pts)
    return x / np.linalg.norm(x, axis=1, keepdims=True)
