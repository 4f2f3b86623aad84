"""Perplexity evaluation: conditioning state selection, micro and macro
perplexity, and per-timestep gain against a baseline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import make_batch


class EvalError(ValueError):
    pass


@dataclass
class EvalReport:
    micro_ppl: float
    macro_ppl: float
    per_timestep: list  # (t, total nats, token count, ppl_t)
    variant: str = ""
    task: str = ""
    seed: int = 0
    subset: str = "test"

    def timesteps(self):
        return [t for t, _, _, _ in self.per_timestep]


def state_for_eval(model, author, t):
    """Latent conditioning state for (author, t) at evaluation time.

    Plain LSTM has none; the static variant returns the author vector;
    table variants fall back to the nearest earlier present timestep for
    cells unseen in training; the dynamics variant rolls its trajectory
    out to t, which at present cells equals the training-time state.
    """
    if not 0 <= author < model.num_authors:
        raise EvalError(f"unknown author {author}")
    variant = model.config.variant
    if variant == "lstm":
        return None
    if variant == "lstm-a":
        return model.h_static.value[author].copy()
    if variant in ("lstm-iat", "lstm-at"):
        t_eff = int(model.fallback_times([author], [t])[0])
        return model.h_free.value[author * model.num_timesteps + (t_eff - 1)].copy()
    return model.cached_rollout(t)[t - 1, author].copy()


def micro_perplexity(pairs):
    """exp of total nats over total tokens (natural base)."""
    nats = sum(float(n) for n, _ in pairs)
    count = sum(int(c) for _, c in pairs)
    if count <= 0:
        raise EvalError("no tokens to evaluate")
    return float(np.exp(nats / count))


def macro_perplexity(per_timestep):
    """Arithmetic mean of per-timestep micro perplexities."""
    ppls = [p for _, _, _, p in per_timestep]
    if not ppls:
        raise EvalError("no timesteps with tokens")
    return float(np.mean(ppls))


def evaluate_split(model, corpus, split, subset="test", batch_size=256):
    """Score every document of `subset` and aggregate per timestep.

    Timesteps with no evaluated tokens are left out of the report (and
    hence out of the macro average).
    """
    indices = split.indices(subset)
    if not indices:
        raise EvalError(f"split has no {subset!r} documents")
    docs = [corpus.documents[i] for i in indices]
    docs.sort(key=lambda d: len(d.tokens))  # cheap padding buckets
    nats_t = np.zeros(corpus.num_timesteps + 1, dtype=np.float64)
    count_t = np.zeros(corpus.num_timesteps + 1, dtype=np.int64)
    for lo in range(0, len(docs), batch_size):
        chunk = docs[lo:lo + batch_size]
        tokens, lengths, authors, times = make_batch(chunk)
        nats, counts = model.batch_doc_nll(tokens, lengths, authors, times)
        np.add.at(nats_t, times, nats)
        np.add.at(count_t, times, counts)
    per_timestep = []
    for t in range(1, corpus.num_timesteps + 1):
        if count_t[t] > 0:
            ppl = float(np.exp(nats_t[t] / count_t[t]))
            per_timestep.append((t, float(nats_t[t]), int(count_t[t]), ppl))
    micro = float(np.exp(nats_t.sum() / count_t.sum()))
    return EvalReport(
        micro_ppl=micro,
        macro_ppl=macro_perplexity(per_timestep),
        per_timestep=per_timestep,
        variant=model.config.variant,
        task=getattr(split.task, "value", str(split.task)),
        seed=split.seed,
        subset=subset,
    )


def gain_series(report, baseline):
    """Per-timestep perplexity gain of `report` over `baseline`.

    Positive values mean the model beats the baseline at that timestep;
    by convention the baseline is the unconditioned LSTM's report.  Both
    reports must come from the same task/split and cover the same
    timesteps.
    """
    if report.task != baseline.task or report.seed != baseline.seed \
            or report.subset != baseline.subset:
        raise EvalError(
            f"mismatched reports: ({report.task}, seed {report.seed}, {report.subset}) "
            f"vs ({baseline.task}, seed {baseline.seed}, {baseline.subset})"
        )
    if report.timesteps() != baseline.timesteps():
        raise EvalError("reports cover different timesteps")
    base = {t: p for t, _, _, p in baseline.per_timestep}
    return [(t, base[t] - p) for t, _, _, p in report.per_timestep]


def save_report(report, path, header_lines=()):
    with open(path, "w", encoding="utf-8") as f:
        f.write(
            f"# variant={report.variant} task={report.task} "
            f"seed={report.seed} subset={report.subset}\n"
        )
        for line in header_lines:
            f.write(f"# {line}\n")
        f.write(f"micro\t{report.micro_ppl!r}\n")
        f.write(f"macro\t{report.macro_ppl!r}\n")
        for t, nats, count, ppl in report.per_timestep:
            f.write(f"{t}\t{nats!r}\t{count}\t{ppl!r}\n")


def load_report(path):
    micro = macro = None
    meta = {"variant": "", "task": "", "seed": 0, "subset": "test"}
    per_timestep = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if line.startswith("#"):
                for part in line[1:].split():
                    if "=" in part:
                        key, val = part.split("=", 1)
                        if key in meta:
                            meta[key] = int(val) if key == "seed" else val
                continue
            if not line:
                continue
            cells = line.split("\t")
            if cells[0] == "micro":
                micro = float(cells[1])
            elif cells[0] == "macro":
                macro = float(cells[1])
            else:
                per_timestep.append(
                    (int(cells[0]), float(cells[1]), int(cells[2]), float(cells[3]))
                )
    if micro is None or macro is None:
        raise EvalError(f"{path}: not a report file")
    return EvalReport(micro_ppl=micro, macro_ppl=macro, per_timestep=per_timestep, **meta)


def save_gain_series(series, path, header_lines=()):
    with open(path, "w", encoding="utf-8") as f:
        for line in header_lines:
            f.write(f"# {line}\n")
        for t, gain in series:
            f.write(f"{t}\t{gain!r}\n")
