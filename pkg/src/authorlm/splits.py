"""Train/val/test assignment under the three temporal protocols.

Modeling samples per-author at the document level, imputation hides whole
(author, timestep) groups, prediction keeps only each author's earliest
documents for training.  Target proportions are approximately 70/10/20.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

TRAIN, VAL, TEST = "train", "val", "test"
TAGS = (TRAIN, VAL, TEST)


class TaskKind(str, enum.Enum):
    MODELING = "modeling"
    IMPUTATION = "imputation"
    PREDICTION = "prediction"


@dataclass
class SplitAssignment:
    doc_split: list  # one tag per document, aligned with corpus.documents
    task: TaskKind
    seed: int

    def indices(self, tag):
        return [i for i, t in enumerate(self.doc_split) if t == tag]


def _shares(n):
    """Cumulative 70/80% boundaries in integer arithmetic.

    Train is guaranteed at least one item so every author stays learnable;
    e.g. n=2 gives (1, 0, 1) and n=10 gives (7, 1, 2).
    """
    n_train = max(1, (7 * n) // 10)
    n_val = max(0, (8 * n) // 10 - n_train)
    return n_train, n_val, n - n_train - n_val


def _by_author(corpus):
    groups = [[] for _ in range(corpus.num_authors)]
    for i, doc in enumerate(corpus.documents):
        groups[doc.author].append(i)
    return groups


def split_modeling(corpus, seed):
    """Per-author stratified random assignment; all timesteps stay visible."""
    if not corpus.documents:
        raise ValueError("empty corpus")
    rng = np.random.default_rng(seed)
    tags = [None] * len(corpus.documents)
    for docs in _by_author(corpus):
        order = [docs[j] for j in rng.permutation(len(docs))]
        n_train, n_val, _ = _shares(len(order))
        for pos, i in enumerate(order):
            tags[i] = TRAIN if pos < n_train else VAL if pos < n_train + n_val else TEST
    return SplitAssignment(tags, TaskKind.MODELING, seed)


def split_imputation(corpus, seed):
    """Hide randomly chosen timesteps per author; (a, t) groups stay whole."""
    if not corpus.documents:
        raise ValueError("empty corpus")
    rng = np.random.default_rng(seed)
    tags = [None] * len(corpus.documents)
    for author, docs in enumerate(_by_author(corpus)):
        times = sorted({corpus.documents[i].time for i in docs})
        order = [times[j] for j in rng.permutation(len(times))]
        n_train, n_val, _ = _shares(len(order))
        tag_of_time = {}
        for pos, t in enumerate(order):
            tag_of_time[t] = TRAIN if pos < n_train else VAL if pos < n_train + n_val else TEST
        for i in docs:
            tags[i] = tag_of_time[corpus.documents[i].time]
    return SplitAssignment(tags, TaskKind.IMPUTATION, seed)


def split_prediction(corpus, seed):
    """Chronological per author: earliest to train, then val, then test."""
    if not corpus.documents:
        raise ValueError("empty corpus")
    tags = [None] * len(corpus.documents)
    for docs in _by_author(corpus):
        order = sorted(docs, key=lambda i: (corpus.documents[i].time, i))
        n_train, n_val, _ = _shares(len(order))
        for pos, i in enumerate(order):
            tags[i] = TRAIN if pos < n_train else VAL if pos < n_train + n_val else TEST
    return SplitAssignment(tags, TaskKind.PREDICTION, seed)


SPLITTERS = {
    TaskKind.MODELING: split_modeling,
    TaskKind.IMPUTATION: split_imputation,
    TaskKind.PREDICTION: split_prediction,
}


def make_split(corpus, task, seed):
    return SPLITTERS[TaskKind(task)](corpus, seed)


def verify_split(corpus, split):
    """Check the structural constraints of the split's task.

    Returns a list of human-readable violations (empty when valid), each
    naming the offending documents and the rule they break.
    """
    violations = []
    if len(split.doc_split) != len(corpus.documents):
        return [
            f"assignment covers {len(split.doc_split)} documents, corpus has {len(corpus.documents)}"
        ]
    for i, tag in enumerate(split.doc_split):
        if tag not in TAGS:
            violations.append(f"doc {i}: unknown tag {tag!r}")
    if violations:
        return violations

    by_author = _by_author(corpus)
    for author, docs in enumerate(by_author):
        if docs and not any(split.doc_split[i] == TRAIN for i in docs):
            violations.append(f"author {author}: no training document ({docs})")

    if split.task == TaskKind.IMPUTATION:
        groups = {}
        for i, doc in enumerate(corpus.documents):
            groups.setdefault((doc.author, doc.time), []).append(i)
        for (author, t), members in groups.items():
            tags = {split.doc_split[i] for i in members}
            if len(tags) > 1:
                violations.append(
                    f"group (author={author}, t={t}) spans splits {sorted(tags)}: docs {members}"
                )
    elif split.task == TaskKind.PREDICTION:
        for author, docs in enumerate(by_author):
            bounds = {tag: [] for tag in TAGS}
            for i in docs:
                bounds[split.doc_split[i]].append(corpus.documents[i].time)
            for earlier, later in ((TRAIN, VAL), (VAL, TEST), (TRAIN, TEST)):
                if bounds[earlier] and bounds[later] and max(bounds[earlier]) > min(bounds[later]):
                    violations.append(
                        f"author {author}: {earlier} reaches t={max(bounds[earlier])} "
                        f"after {later} starts at t={min(bounds[later])}"
                    )
    return violations


def train_presence(corpus, split):
    """Boolean [A, T] mask of (author, timestep) cells with training docs."""
    mask = np.zeros((corpus.num_authors, corpus.num_timesteps), dtype=bool)
    for i, doc in enumerate(corpus.documents):
        if split.doc_split[i] == TRAIN:
            mask[doc.author, doc.time - 1] = True
    return mask


def save_split(split, path, header_lines=()):
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"# task={split.task.value} seed={split.seed}\n")
        for line in header_lines:
            f.write(f"# {line}\n")
        for i, tag in enumerate(split.doc_split):
            f.write(f"{i}\t{tag}\n")


def load_split(path):
    task = seed = None
    tags = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if line.startswith("#"):
                for part in line[1:].split():
                    if part.startswith("task="):
                        task = TaskKind(part[5:])
                    elif part.startswith("seed="):
                        seed = int(part[5:])
                continue
            if not line:
                continue
            idx, tag = line.split("\t")
            tags[int(idx)] = tag
    if task is None or seed is None:
        raise ValueError(f"{path}: missing 'task=' / 'seed=' header")
    doc_split = [tags[i] for i in range(len(tags))]
    return SplitAssignment(doc_split, task, seed)
