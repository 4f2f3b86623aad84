"""Quantitative analyses of learned latents: similarity series, PCA
projections, label entropy, dominant labels, top movers."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np


class AnalysisError(ValueError):
    pass


@dataclass
class TrajectorySet:
    h_static: np.ndarray  # [A, d]
    trajectories: np.ndarray  # [A, T, d]
    author_names: list

    @property
    def num_authors(self):
        return self.trajectories.shape[0]

    @property
    def num_timesteps(self):
        return self.trajectories.shape[1]


def extract_trajectories(model, author_names=None):
    """Pull one checkpoint's latents into a TrajectorySet.

    The dynamics variant rolls trajectories out; table variants read the
    free vectors with absent cells filled by the evaluation fallback
    (and use their time-average as the static summary); the static-only
    variant has constant trajectories.
    """
    variant = model.config.variant
    A, T = model.num_authors, model.num_timesteps
    names = list(author_names) if author_names else [str(a) for a in range(A)]
    if variant == "lstm":
        raise AnalysisError("the unconditioned variant has no author latents")
    if variant == "ours":
        traj = np.transpose(model.cached_rollout(T), (1, 0, 2)).copy()
        return TrajectorySet(model.h_static.value.copy(), traj, names)
    if variant == "lstm-a":
        h = model.h_static.value.copy()
        return TrajectorySet(h, np.repeat(h[:, None, :], T, axis=1), names)
    table = model.h_free.value.reshape(A, T, -1)
    traj = np.empty_like(table)
    for a in range(A):
        t_eff = model.fallback_times([a] * T, list(range(1, T + 1)))
        traj[a] = table[a, t_eff - 1]
    return TrajectorySet(traj.mean(axis=1), traj.copy(), names)


def _cosine(u, v):
    """Cosine with exact fast paths: zero vectors give 0, identical
    (or exactly opposite) vectors give +/-1."""
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        return 0.0
    if np.array_equal(u, v):
        return 1.0
    if np.array_equal(u, -v):
        return -1.0
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def avg_cosine_series(traj):
    """Mean pairwise cosine between authors at each timestep."""
    A, T, _ = traj.trajectories.shape
    if A < 2:
        raise AnalysisError("need at least 2 authors")
    out = []
    for t in range(T):
        X = traj.trajectories[:, t, :]
        norms = np.linalg.norm(X, axis=1)
        safe = np.where(norms > 0, norms, 1.0)
        U = X / safe[:, None]
        S = U @ U.T
        iu = np.triu_indices(A, k=1)
        out.append((t + 1, float(S[iu].mean())))
    return out


def self_similarity(traj, author):
    """cos(h_{a,1}, h_{a,t}) for every t."""
    if not 0 <= author < traj.num_authors:
        raise AnalysisError(f"unknown author {author}")
    first = traj.trajectories[author, 0]
    return [
        (t + 1, _cosine(first, traj.trajectories[author, t]))
        for t in range(traj.num_timesteps)
    ]


def top_movers(traj, k, direction="most", restrict_to=None):
    """Authors ranked by cos(h_{a,1}, h_{a,T}).

    "most" means most changed, i.e. lowest end cosine first.  Ties break
    on author id so rankings are stable.
    """
    if direction not in ("most", "least"):
        raise AnalysisError(f"direction must be 'most' or 'least', got {direction!r}")
    authors = sorted(restrict_to) if restrict_to is not None else list(range(traj.num_authors))
    if not authors:
        raise AnalysisError("empty author restriction")
    if k > len(authors):
        raise AnalysisError(f"k={k} exceeds the {len(authors)} candidates")
    scored = [
        (a, _cosine(traj.trajectories[a, 0], traj.trajectories[a, -1])) for a in authors
    ]
    reverse = direction == "least"
    scored.sort(key=lambda pair: (-pair[1] if reverse else pair[1], pair[0]))
    return scored[:k]


def pca_2d(vectors):
    """Mean-centered projection onto the top-2 covariance eigenvectors.

    Returns (points [N, 2], explained-variance fractions [2]).  Sign
    convention: each component's largest-magnitude coordinate is positive.
    """
    X = np.asarray(vectors, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2 or X.shape[1] < 2:
        raise AnalysisError(f"need >= 2 vectors of dimension >= 2, got shape {X.shape}")
    X = X - X.mean(axis=0)
    cov = X.T @ X / (X.shape[0] - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    total = float(eigvals.sum())
    if total <= 0.0:
        raise AnalysisError("all vectors identical: nothing to project")
    W = eigvecs[:, [-1, -2]]
    for j in range(2):
        i = int(np.argmax(np.abs(W[:, j])))
        if W[i, j] < 0:
            W[:, j] = -W[:, j]
    fractions = np.maximum(eigvals[[-1, -2]], 0.0) / total
    return X @ W, fractions


def label_entropy_series(corpus):
    """Shannon entropy (nats) of label occurrences at each timestep."""
    counters = {}
    for doc in corpus.documents:
        for label in doc.labels:
            counters.setdefault(doc.time, Counter())[label] += 1
    if not counters:
        raise AnalysisError("corpus has no labels")
    series = []
    for t in sorted(counters):
        counts = np.array(list(counters[t].values()), dtype=np.float64)
        p = counts / counts.sum()
        series.append((t, float(-(p * np.log(p)).sum())))
    return series


def dominant_label(corpus, author, t):
    """Most frequent label of author's documents at t; ties go to the
    lexicographically smallest; None when nothing is labeled there."""
    counts = Counter()
    for doc in corpus.documents:
        if doc.author == author and doc.time == t:
            counts.update(doc.labels)
    if not counts:
        return None
    return min(counts, key=lambda label: (-counts[label], label))


# ---------------------------------------------------------------------------
# exports
# ---------------------------------------------------------------------------


def save_series(series, path, header_lines=()):
    with open(path, "w", encoding="utf-8") as f:
        for line in header_lines:
            f.write(f"# {line}\n")
        for t, value in series:
            f.write(f"{t}\t{value!r}\n")


def save_projection(traj, points_by_cell, path, header_lines=()):
    """points_by_cell: iterable of (author, t, x, y)."""
    with open(path, "w", encoding="utf-8") as f:
        for line in header_lines:
            f.write(f"# {line}\n")
        for a, t, x, y in points_by_cell:
            f.write(f"{traj.author_names[a]}\t{t}\t{x!r}\t{y!r}\n")


def save_top_movers(traj, ranked, path, header_lines=()):
    with open(path, "w", encoding="utf-8") as f:
        for line in header_lines:
            f.write(f"# {line}\n")
        for rank, (a, cosine) in enumerate(ranked, start=1):
            f.write(f"{rank}\t{traj.author_names[a]}\t{cosine!r}\n")


def save_vectors(names, vectors, path, header_lines=()):
    """Raw vector export (one row per name) for external projection."""
    with open(path, "w", encoding="utf-8") as f:
        for line in header_lines:
            f.write(f"# {line}\n")
        for name, vec in zip(names, vectors):
            cells = "\t".join(repr(float(x)) for x in vec)
            f.write(f"{name}\t{cells}\n")


def project_trajectories(traj):
    """PCA of all (author, timestep) latents; rows tagged for plotting."""
    A, T, d = traj.trajectories.shape
    flat = traj.trajectories.reshape(A * T, d)
    points, fractions = pca_2d(flat)
    cells = [
        (a, t + 1, float(points[a * T + t, 0]), float(points[a * T + t, 1]))
        for a in range(A)
        for t in range(T)
    ]
    return cells, fractions
