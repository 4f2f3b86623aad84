"""Beam-search generation from a trained checkpoint.

Scores are raw sums of log-probabilities (no length normalization);
hypotheses are complete once they emit EOS, and length-capped ones are
kept, so a beam covering the whole search space is exactly exhaustive.
"""

from __future__ import annotations

import numpy as np

from .corpus import EOS, SOS, SPECIAL_TOKENS, encode_document
from .numeric import Tensor


class GenerateError(ValueError):
    pass


class _Hyp:
    __slots__ = ("ids", "score", "state")

    def __init__(self, ids, score, state=None):
        self.ids = ids
        self.score = score
        self.state = state


def _advance(model, x_rows, states):
    """One decoder step over stacked hypothesis rows; returns log-probs
    [n, V] and the per-row new states."""
    pack = [Tensor(np.stack([s[k] for s in states])) for k in range(4)]
    logp, new = model.decode_step(Tensor(np.asarray(x_rows, dtype=model.dtype)), tuple(pack))
    return logp, [tuple(t.value[i] for t in new) for i in range(len(states))]


def beam_search(model, vocab, author, t, prefix, beam=5, max_len=20):
    """Ranked (token strings, total log-prob) continuations of `prefix`.

    Prefix tokens are forced and their log-probabilities included in the
    score.  `max_len` caps content tokens (prefix included); complete
    hypotheses carry a final "<eos>" string, capped ones do not.  Returns
    at most `beam` hypotheses, best first.
    """
    if beam < 1:
        raise GenerateError(f"beam must be >= 1, got {beam}")
    prefix_ids = encode_document(list(prefix), vocab)
    if max_len < len(prefix_ids):
        raise GenerateError(
            f"max_len={max_len} is shorter than the prefix ({len(prefix_ids)} tokens)"
        )

    cond = model.conditioning_vector(author, t, mode="eval")
    x0 = model.embed.value[SOS] if cond is None else cond
    state0 = tuple(s.value[0] for s in model.start_state(1))
    logp, states = _advance(model, x0[None, :], [state0])

    score = 0.0
    for token in prefix_ids:
        score += float(logp[0, token])
        logp, states = _advance(model, model.embed.value[[token]], states)
    alive = [_Hyp(list(prefix_ids), score, states[0])]
    pending = logp  # next-token log-probs aligned with `alive`
    finished = []

    V = len(vocab)
    per_row = min(beam, V - 1)  # a row can place at most `beam` in the global top
    while alive:
        expansions = []
        for i, hyp in enumerate(alive):
            row = pending[i]
            finished.append(_Hyp(hyp.ids + [EOS], hyp.score + float(row[EOS])))
            if len(hyp.ids) >= max_len:
                finished.append(_Hyp(list(hyp.ids), hyp.score))
                continue
            cand = np.argpartition(-row, per_row)[:per_row + 1]
            for v in cand:
                if v != EOS:
                    expansions.append((hyp.score + float(row[v]), i, int(v)))
        if not expansions:
            break
        expansions.sort(key=lambda e: (-e[0], e[1], e[2]))
        keep = expansions[:beam]
        finished.sort(key=lambda h: (-h.score, h.ids))
        if len(finished) >= beam and keep[0][0] < finished[beam - 1].score:
            break  # log-probs only shrink scores; nothing alive can catch up
        rows = model.embed.value[[v for _, _, v in keep]]
        pending, new_states = _advance(model, rows, [alive[i].state for _, i, _ in keep])
        alive = [
            _Hyp(alive[i].ids + [v], s, new_states[j])
            for j, (s, i, v) in enumerate(keep)
        ]
    finished.sort(key=lambda h: (-h.score, h.ids))
    return [(vocab.decode(h.ids), h.score) for h in finished[:beam]]


def detokenize(tokens):
    """Human-readable text with special tokens stripped."""
    return " ".join(t for t in tokens if t not in SPECIAL_TOKENS)


def format_hypotheses(hypotheses):
    lines = []
    for rank, (tokens, score) in enumerate(hypotheses, start=1):
        lines.append(f"{rank}\t{score:.6f}\t{detokenize(tokens)}")
    return "\n".join(lines)
