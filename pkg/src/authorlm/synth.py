"""Synthetic author communities with controlled temporal drift.

Each (author, timestep) cell has an exact unigram generating distribution
(a mixture over shared topic distributions), so the achievable test NLL
has a closed-form floor.  Deliberately order-0: sequence structure is
tested elsewhere, and an exact oracle is worth more than realism here.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .corpus import SPECIAL_TOKENS, Corpus, Document, Vocab

_ALPHABET = "abcdefghijklmnopqrstuvwxyz"


class SynthError(ValueError):
    pass


def _token_name(v):
    """Letter-only names so synthetic tokens survive the tokenizer."""
    if v < 26 * 26:
        return _ALPHABET[v // 26] + _ALPHABET[v % 26]
    if v < 26 ** 3:
        return _ALPHABET[v // 676] + _ALPHABET[(v // 26) % 26] + _ALPHABET[v % 26]
    raise SynthError(f"vocab_size {v + 1} exceeds the synthetic naming range")


@dataclass
class DriftWorldSpec:
    num_authors: int
    num_timesteps: int
    vocab_size: int
    docs_per_cell: int
    doc_length: int
    topics: np.ndarray  # [K, V], rows sum to 1
    author_topic_path: np.ndarray  # [A, T, K], mixture weights per cell
    drift_rate: float
    seed: int
    topic_names: list = field(default_factory=list)

    def __post_init__(self):
        self.topics = np.asarray(self.topics, dtype=np.float64)
        self.author_topic_path = np.asarray(self.author_topic_path, dtype=np.float64)
        if not self.topic_names:
            self.topic_names = [f"topic{k}" for k in range(self.topics.shape[0])]

    def validate(self):
        if self.vocab_size < 2:
            raise SynthError(f"vocab_size must be >= 2, got {self.vocab_size}")
        K, V = self.topics.shape
        if V != self.vocab_size:
            raise SynthError(f"topics cover {V} tokens, expected {self.vocab_size}")
        if self.author_topic_path.shape != (self.num_authors, self.num_timesteps, K):
            raise SynthError(
                f"author_topic_path shape {self.author_topic_path.shape} != "
                f"({self.num_authors}, {self.num_timesteps}, {K})"
            )
        if (self.topics < 0).any() or (self.author_topic_path < 0).any():
            raise SynthError("negative probability mass")
        if np.abs(self.topics.sum(axis=1) - 1.0).max() > 1e-12:
            raise SynthError("topic rows must sum to 1")
        if np.abs(self.author_topic_path.sum(axis=2) - 1.0).max() > 1e-12:
            raise SynthError("mixture weights must sum to 1")

    def cell_distribution(self, author, t):
        """Exact token distribution of cell (author, timestep t in 1..T)."""
        w = self.author_topic_path[author, t - 1]
        return w @ self.topics


def disjoint_zipf_topics(num_topics, vocab_size, exponent=1.5):
    """Peaked topic distributions on disjoint contiguous vocabulary blocks."""
    topics = np.zeros((num_topics, vocab_size), dtype=np.float64)
    bounds = np.linspace(0, vocab_size, num_topics + 1).astype(int)
    for k in range(num_topics):
        lo, hi = bounds[k], bounds[k + 1]
        ranks = np.arange(1, hi - lo + 1, dtype=np.float64)
        weights = ranks ** -exponent
        topics[k, lo:hi] = weights / weights.sum()
    return topics


def blended_topics(num_topics, vocab_size, exponent=1.5, own_mass=0.85):
    """Cross-contaminated topics: each keeps own_mass on its own block and
    spreads the rest over the other blocks.

    With fully disjoint supports a single token reveals the topic, so a
    context-reading model infers the cell mixture almost immediately and
    conditioning information is worthless; overlap keeps that inference
    noisy over short documents.
    """
    pure = disjoint_zipf_topics(num_topics, vocab_size, exponent)
    out = np.zeros_like(pure)
    for k in range(num_topics):
        others = pure[[j for j in range(num_topics) if j != k]].mean(axis=0)
        out[k] = own_mass * pure[k] + (1.0 - own_mass) * others
    return out


def _slerp(w_start, w_end, s):
    """Interpolate on the probability simplex via the sqrt-sphere."""
    u = np.sqrt(w_start)
    v = np.sqrt(w_end)
    cos = np.clip(u @ v, -1.0, 1.0)
    omega = np.arccos(cos)
    if omega < 1e-9:
        q = u
    else:
        q = (np.sin((1.0 - s) * omega) * u + np.sin(s * omega) * v) / np.sin(omega)
    w = q * q
    return w / w.sum()


def make_drift_paths(num_authors, num_timesteps, num_topics, drift_rate, seed,
                     concentration=0.5, endpoint_style="independent"):
    """Per-author mixture paths: slerp between Dirichlet start/end points.

    The interpolation parameter at timestep t is drift_rate*(t-1)/(T-1),
    clipped to [0, 1]; drift_rate 0 freezes every path at its start.

    Endpoint styles: "independent" draws start and end separately; "mixed"
    alternates stably-biased authors (end = start) with drifting ones
    (end = start reversed), so author identity and temporal tracking are
    separately informative.
    """
    rng = np.random.default_rng(seed)
    alpha = np.full(num_topics, concentration)
    paths = np.zeros((num_authors, num_timesteps, num_topics), dtype=np.float64)
    for a in range(num_authors):
        start = rng.dirichlet(alpha)
        if endpoint_style == "independent":
            end = rng.dirichlet(alpha)
        elif endpoint_style == "mixed":
            end = start.copy() if a % 2 == 0 else start[::-1].copy()
        else:
            raise SynthError(f"unknown endpoint_style {endpoint_style!r}")
        for t in range(num_timesteps):
            frac = t / (num_timesteps - 1) if num_timesteps > 1 else 0.0
            s = min(max(drift_rate * frac, 0.0), 1.0)
            paths[a, t] = _slerp(start, end, s)
    return paths


def make_drift_spec(num_authors, num_timesteps, vocab_size, docs_per_cell,
                    doc_length, num_topics=2, drift_rate=1.0, seed=0,
                    topic_exponent=1.5, concentration=0.5, own_mass=1.0,
                    endpoint_style="independent"):
    """Convenience constructor: (optionally blended) Zipf topics on
    per-block supports plus slerp mixture paths."""
    if own_mass >= 1.0:
        topics = disjoint_zipf_topics(num_topics, vocab_size, topic_exponent)
    else:
        topics = blended_topics(num_topics, vocab_size, topic_exponent, own_mass)
    paths = make_drift_paths(num_authors, num_timesteps, num_topics, drift_rate,
                             seed, concentration, endpoint_style)
    spec = DriftWorldSpec(
        num_authors=num_authors,
        num_timesteps=num_timesteps,
        vocab_size=vocab_size,
        docs_per_cell=docs_per_cell,
        doc_length=doc_length,
        topics=topics,
        author_topic_path=paths,
        drift_rate=drift_rate,
        seed=seed,
    )
    spec.validate()
    return spec


def generate_corpus(spec):
    """Sample the corpus: docs_per_cell documents of doc_length i.i.d. tokens
    per (author, timestep), deterministic under the spec seed."""
    spec.validate()
    id_to_token = list(SPECIAL_TOKENS) + [_token_name(v) for v in range(spec.vocab_size)]
    vocab = Vocab({t: i for i, t in enumerate(id_to_token)}, id_to_token)
    offset = len(SPECIAL_TOKENS)

    documents = []
    for a in range(spec.num_authors):
        for t in range(1, spec.num_timesteps + 1):
            rng = np.random.default_rng([spec.seed, a, t])
            p = spec.cell_distribution(a, t)
            label = spec.topic_names[int(np.argmax(spec.author_topic_path[a, t - 1]))]
            draws = rng.choice(spec.vocab_size, size=(spec.docs_per_cell, spec.doc_length), p=p)
            for row in draws:
                documents.append(
                    Document(author=a, time=t, tokens=list(row + offset), labels=[label])
                )
    return Corpus(
        documents=documents,
        vocab=vocab,
        num_authors=spec.num_authors,
        num_timesteps=spec.num_timesteps,
        author_names=[f"author{a:03d}" for a in range(spec.num_authors)],
    )


def oracle_cross_entropy(spec, subset):
    """Exact expected NLL per scored token of the true generator on `subset`.

    `subset` holds (author, timestep) pairs with timesteps in 1..T.  A
    document is scored over doc_length + 1 slots (its tokens plus the
    closing end marker); under the true process the content slots cost
    the cell entropy H = -sum_v p(v) ln p(v) each and the end marker,
    being deterministic at the fixed length, costs zero.  Cells are
    averaged weighted by their scored token counts.  Any model's expected
    test NLL per token is bounded below by this value: its content
    cross-entropy is at least H and its end-marker cost is at least zero.
    """
    cells = list(subset)
    if not cells:
        raise SynthError("empty cell subset")
    total_nats = 0.0
    total_slots = 0.0
    nats_weight = spec.docs_per_cell * spec.doc_length
    slot_weight = spec.docs_per_cell * (spec.doc_length + 1)
    for a, t in cells:
        if not (0 <= a < spec.num_authors and 1 <= t <= spec.num_timesteps):
            raise SynthError(f"cell ({a}, {t}) outside the world")
        p = spec.cell_distribution(a, t)
        nz = p > 0
        total_nats += nats_weight * float(-(p[nz] * np.log(p[nz])).sum())
        total_slots += slot_weight
    return total_nats / total_slots


def save_spec(spec, path):
    payload = {
        "num_authors": spec.num_authors,
        "num_timesteps": spec.num_timesteps,
        "vocab_size": spec.vocab_size,
        "docs_per_cell": spec.docs_per_cell,
        "doc_length": spec.doc_length,
        "drift_rate": spec.drift_rate,
        "seed": spec.seed,
        "topic_names": spec.topic_names,
        "topics": spec.topics.tolist(),
        "author_topic_path": spec.author_topic_path.tolist(),
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, sort_keys=True)


def load_spec(path):
    with open(path, encoding="utf-8") as f:
        payload = json.load(f)
    spec = DriftWorldSpec(**payload)
    spec.validate()
    return spec
