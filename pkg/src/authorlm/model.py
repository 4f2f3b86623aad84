"""The conditioned language model and its baselines.

One decoder (two LSTM layers, tied input/output embedding) is shared by
five conditioning schemes:

  lstm      unconditioned; a learned start-of-sentence embedding
  lstm-a    per-author static vector, projected in place of SOS
  lstm-iat  free per-(author, timestep) vectors, unconstrained
  lstm-at   free vectors plus an L2 pull between consecutive present ones
  ours      trajectories generated by a residual dynamics network from a
            static per-author vector

The conditioning vector always enters as the position-0 input of the
first layer, replacing the SOS embedding; deeper layers see it through
the recurrence only.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import numeric as nm
from .corpus import EOS, PAD, SOS
from .numeric import ParamSet, Tensor

VARIANTS = ("lstm", "lstm-a", "lstm-iat", "lstm-at", "ours")


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    variant: str = "ours"
    ada_dyn: bool = True
    stat_cond: bool = True
    d_embed: int = 400
    d_hidden: int = 400
    d_static: int = 64
    d_dynamic: int = 64
    mlp_hidden: int = 64
    mlp_layers: int = 1  # hidden ReLU layers in the dynamics/init MLPs
    dropout_input: float = 0.4
    dropout_output: float = 0.4
    dropout_weight: float = 0.5
    lambda_consec: float = 0.01
    lambda_author: float = 1e-4
    lambda_dyn: float = 1e-4

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ModelError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        for name in ("d_embed", "d_hidden", "d_static", "d_dynamic", "mlp_hidden"):
            if getattr(self, name) <= 0:
                raise ModelError(f"{name} must be positive")

    @property
    def d_cond(self):
        if self.variant == "lstm":
            return 0
        if self.variant == "lstm-a":
            return self.d_static
        if self.variant in ("lstm-iat", "lstm-at"):
            return self.d_dynamic
        return self.d_dynamic + (self.d_static if self.stat_cond else 0)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class AuthorLatents:
    """View over the author-side parameters a variant actually owns."""

    h_static: np.ndarray | None = None
    h_free: np.ndarray | None = None  # [A, T, d_dynamic]
    presence: np.ndarray | None = None
    has_dynamics: bool = False


def _uniform(rng, shape, limit):
    return rng.uniform(-limit, limit, size=shape)


class ConditionedLM:
    """Decoder plus author/time conditioning for one corpus geometry."""

    def __init__(self, config, vocab_size, num_authors, num_timesteps,
                 seed=0, dtype=np.float32):
        self.config = config
        self.vocab_size = vocab_size
        self.num_authors = num_authors
        self.num_timesteps = num_timesteps
        self.dtype = np.dtype(dtype)
        # cells with at least one training document; all-present until a
        # split is attached (only the table variants and AT's penalty care)
        self.presence = np.ones((num_authors, num_timesteps), dtype=bool)
        self.params = ParamSet(dtype)
        self._build(np.random.default_rng(seed))
        self._rollout_cache = None

    # -- construction -------------------------------------------------

    def _build(self, rng):
        cfg = self.config
        p = self.params
        V, E, H = self.vocab_size, cfg.d_embed, cfg.d_hidden
        self.embed = p.add("embed", _uniform(rng, (V, E), 0.1), wd_exempt=True)
        self.out_bias = p.add("out_bias", np.zeros(V), wd_exempt=True)
        # layer 2 projects back to embedding size so the tied output works
        self.lstm1 = self._add_lstm(rng, "lstm1", E, H)
        self.lstm2 = self._add_lstm(rng, "lstm2", H, E)
        if cfg.variant == "lstm":
            return
        # the conditioning pathway starts larger than the embeddings: its
        # gradient signal is a small fraction of the early loss, and at
        # small-model scale a timid start leaves it on a plateau for
        # thousands of iterations
        self.cond_W = p.add(
            "cond.W", _uniform(rng, (cfg.d_cond, E), 2.0 / np.sqrt(cfg.d_cond))
        )
        if cfg.variant in ("lstm-a", "ours"):
            self.h_static = p.add(
                "author.static",
                _uniform(rng, (self.num_authors, cfg.d_static), 0.5),
                wd_exempt=False,
                wd_rate=cfg.lambda_author,
            )
        if cfg.variant in ("lstm-iat", "lstm-at"):
            self.h_free = p.add(
                "author.table",
                _uniform(rng, (self.num_authors * self.num_timesteps, cfg.d_dynamic), 0.5),
                wd_exempt=True,
            )
        if cfg.variant == "ours":
            self._add_mlp(rng, "init", cfg.d_static, cfg.d_dynamic)
            d_in = cfg.d_dynamic + (cfg.d_static if cfg.ada_dyn else 0)
            # zero final layer: trajectories start as the identity map
            self._add_mlp(rng, "dyn", d_in, cfg.d_dynamic,
                          final_zero=True, wd_rate=cfg.lambda_dyn)

    def _add_lstm(self, rng, name, d_in, d_out):
        limit = 1.0 / np.sqrt(d_out)
        Wx = self.params.add(f"{name}.Wx", _uniform(rng, (d_in, 4 * d_out), limit))
        Wh = self.params.add(f"{name}.Wh", _uniform(rng, (d_out, 4 * d_out), limit))
        b = self.params.add(f"{name}.b", np.zeros(4 * d_out), wd_exempt=True)
        return (Wx, Wh, b)

    def _add_mlp(self, rng, prefix, d_in, d_out, final_zero=False, wd_rate=None):
        cfg = self.config
        dims = [d_in] + [cfg.mlp_hidden] * cfg.mlp_layers + [d_out]
        for k in range(len(dims) - 1):
            last = k == len(dims) - 2
            limit = 0.0 if (final_zero and last) else 1.0 / np.sqrt(dims[k])
            self.params.add(f"{prefix}.W{k}",
                            _uniform(rng, (dims[k], dims[k + 1]), limit) if limit else
                            np.zeros((dims[k], dims[k + 1])),
                            wd_rate=wd_rate)
            self.params.add(f"{prefix}.b{k}", np.zeros(dims[k + 1]),
                            wd_exempt=True)

    def _mlp(self, prefix, x):
        cfg = self.config
        k = 0
        while f"{prefix}.W{k}" in self.params:
            W = self.params[f"{prefix}.W{k}"].tensor
            b = self.params[f"{prefix}.b{k}"].tensor
            x = nm.affine(x, W, b)
            k += 1
            if f"{prefix}.W{k}" in self.params:
                x = nm.relu(x)
        return x

    # -- split attachment ----------------------------------------------

    def set_presence(self, presence):
        presence = np.asarray(presence, dtype=bool)
        if presence.shape != (self.num_authors, self.num_timesteps):
            raise ModelError(
                f"presence shape {presence.shape} != "
                f"({self.num_authors}, {self.num_timesteps})"
            )
        self.presence = presence

    def author_latents(self):
        cfg = self.config
        table = None
        if cfg.variant in ("lstm-iat", "lstm-at"):
            table = self.h_free.value.reshape(
                self.num_authors, self.num_timesteps, cfg.d_dynamic
            )
        return AuthorLatents(
            h_static=self.h_static.value if cfg.variant in ("lstm-a", "ours") else None,
            h_free=table,
            presence=self.presence if table is not None else None,
            has_dynamics=cfg.variant == "ours",
        )

    # -- trajectories ----------------------------------------------------

    def _init_all(self):
        """h_{a,1} for every author: the init MLP applied to the statics."""
        return self._mlp("init", self.h_static)

    def _step_all(self, h_prev):
        if self.config.ada_dyn:
            inp = nm.concat_cols(h_prev, self.h_static)
        else:
            inp = h_prev
        return nm.add(h_prev, self._mlp("dyn", inp))

    def _rollout_all(self, horizon):
        """List of [A, d_dynamic] tensors for t = 1..horizon."""
        if horizon < 1:
            raise ModelError(f"rollout horizon must be >= 1, got {horizon}")
        states = [self._init_all()]
        for _ in range(1, horizon):
            states.append(self._step_all(states[-1]))
        return states

    def init_trajectory(self, h_a):
        """First trajectory point for an explicit static vector."""
        self._require("ours")
        out = self._mlp("init", Tensor(np.asarray(h_a, dtype=self.dtype)[None, :]))
        return out.value[0]

    def step_dynamics(self, h_prev, h_a=None):
        """One residual step; h_a is consumed only when ada_dyn is on."""
        self._require("ours")
        h_prev = Tensor(np.asarray(h_prev, dtype=self.dtype)[None, :])
        if self.config.ada_dyn:
            if h_a is None:
                raise ModelError("ada_dyn model needs the static vector")
            inp = nm.concat_cols(h_prev, Tensor(np.asarray(h_a, dtype=self.dtype)[None, :]))
        else:
            inp = h_prev
        return nm.add(h_prev, self._mlp("dyn", inp)).value[0]

    def rollout_trajectory(self, author, horizon):
        """[horizon, d_dynamic] trajectory of one author, no tape."""
        self._require("ours")
        if not 0 <= author < self.num_authors:
            raise ModelError(f"unknown author {author}")
        states = self._rollout_all(horizon)
        return np.stack([s.value[author] for s in states])

    def _require(self, variant):
        if self.config.variant != variant:
            raise ModelError(
                f"operation needs variant {variant!r}, model is {self.config.variant!r}"
            )

    def invalidate_rollout_cache(self):
        self._rollout_cache = None

    def cached_rollout(self, horizon):
        """Eval-time trajectory table [horizon, A, d]; invalidated on update."""
        cache = self._rollout_cache
        if cache is None or cache.shape[0] < horizon:
            states = self._rollout_all(horizon)
            cache = np.stack([s.value for s in states])
            self._rollout_cache = cache
        return cache[:horizon]

    # -- conditioning ------------------------------------------------------

    def fallback_times(self, authors, times):
        """Table-variant conditioning timesteps under the unseen-cell rule.

        A cell absent from training borrows the most recent earlier present
        timestep of the same author, or the earliest present one if nothing
        precedes it.
        """
        authors = np.asarray(authors)
        times = np.asarray(times)
        out = np.empty_like(times)
        for k, (a, t) in enumerate(zip(authors, times)):
            if t <= self.num_timesteps and self.presence[a, t - 1]:
                out[k] = t
                continue
            present = np.flatnonzero(self.presence[a])
            if present.size == 0:
                raise ModelError(f"author {a} has no present timestep")
            earlier = present[present < t - 1]
            out[k] = (earlier.max() if earlier.size else present.min()) + 1
        return out

    def _conditioning_batch(self, authors, times, train):
        """[n, d_embed] conditioning tensor, or None for the plain LSTM."""
        cfg = self.config
        if cfg.variant == "lstm":
            return None
        authors = np.asarray(authors, dtype=np.int64)
        times = np.asarray(times, dtype=np.int64)
        if cfg.variant == "lstm-a":
            h = nm.take_rows(self.h_static, authors)
        elif cfg.variant in ("lstm-iat", "lstm-at"):
            t_eff = times if train else self.fallback_times(authors, times)
            h = nm.take_rows(self.h_free, authors * self.num_timesteps + (t_eff - 1))
        else:
            horizon = int(times.max())
            stacked = nm.concat_rows(self._rollout_all(horizon))
            h = nm.take_rows(stacked, (times - 1) * self.num_authors + authors)
            if cfg.stat_cond:
                h = nm.concat_cols(h, nm.take_rows(self.h_static, authors))
        return nm.matmul(h, self.cond_W)

    def conditioning_vector(self, author, t, mode="eval"):
        """Embedding-space condition for one (author, timestep), or None."""
        if not 0 <= author < self.num_authors:
            raise ModelError(f"unknown author {author}")
        if self.config.variant == "lstm":
            return None
        out = self._conditioning_batch([author], [t], train=(mode == "train"))
        return out.value[0]

    # -- decoder -----------------------------------------------------------

    def _zeros(self, n, d):
        return Tensor(np.zeros((n, d), dtype=self.dtype))

    def _decode(self, step_inputs, train, rng):
        """Run the two-layer decoder over a list of [n, d_embed] inputs.

        Returns the last-layer outputs per step.  Variational masks are
        sampled once per sequence, the weight-drop mask once per call.
        """
        cfg = self.config
        n = step_inputs[0].value.shape[0]
        in_mask = out_mask = None
        Wh1, Wh2 = self.lstm1[1], self.lstm2[1]
        if train:
            in_mask = nm.dropout_masks("variational-input", cfg.dropout_input,
                                       (n, cfg.d_embed), rng, dtype=self.dtype)
            out_mask = nm.dropout_masks("variational-output", cfg.dropout_output,
                                        (n, cfg.d_embed), rng, dtype=self.dtype)
            if cfg.dropout_weight > 0:
                m1 = nm.dropout_masks("weight-drop", cfg.dropout_weight,
                                      Wh1.value.shape, rng, dtype=self.dtype)
                m2 = nm.dropout_masks("weight-drop", cfg.dropout_weight,
                                      Wh2.value.shape, rng, dtype=self.dtype)
                Wh1 = nm.mul_mask(Wh1, m1)
                Wh2 = nm.mul_mask(Wh2, m2)
        h1, c1 = self._zeros(n, cfg.d_hidden), self._zeros(n, cfg.d_hidden)
        h2, c2 = self._zeros(n, cfg.d_embed), self._zeros(n, cfg.d_embed)
        outputs = []
        for x in step_inputs:
            if in_mask is not None:
                x = nm.mul_mask(x, in_mask)
            h1, c1 = nm.lstm_cell(x, h1, c1, self.lstm1[0], Wh1, self.lstm1[2])
            h2, c2 = nm.lstm_cell(h1, h2, c2, self.lstm2[0], Wh2, self.lstm2[2])
            outputs.append(nm.mul_mask(h2, out_mask) if out_mask is not None else h2)
        return outputs

    def _forward_active(self, tokens, lengths, authors, times, train, rng,
                        cond_override=None):
        """Logits for every real prediction slot of a padded batch.

        Position 0 consumes the conditioning vector (or SOS embedding);
        targets are the document tokens followed by EOS.  Returns the
        selected logits, their flat targets, and the (doc, step) index of
        each selected row.
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        lengths = np.asarray(lengths, dtype=np.int64)
        n, L = tokens.shape if tokens.size else (len(lengths), 0)
        if (lengths < 1).any():
            raise ModelError("empty document in batch")
        steps = int(lengths.max())  # predictions per doc = length + 1

        if cond_override is not None:
            x0 = Tensor(np.asarray(cond_override, dtype=self.dtype))
        else:
            cond = self._conditioning_batch(authors, times, train)
            if cond is None:
                x0 = nm.take_rows(self.embed, np.full(n, SOS, dtype=np.int64))
            else:
                x0 = cond
        step_inputs = [x0]
        for s in range(steps):
            step_inputs.append(nm.take_rows(self.embed, tokens[:, s]))
        outputs = self._decode(step_inputs[:steps + 1], train, rng)

        # targets: token s at step s (0-based), EOS at step == length
        targets = np.full((n, steps + 1), PAD, dtype=np.int64)
        if L:
            targets[:, :L] = tokens
        targets[np.arange(n), lengths] = EOS
        active = np.zeros((n, steps + 1), dtype=bool)
        for s in range(steps + 1):
            active[:, s] = s <= lengths  # s < length+1 predictions
        # stacked row order is step-major: row s*n + i
        flat_active = np.flatnonzero(active.T.reshape(-1))
        stacked = nm.concat_rows(outputs)
        sel = nm.take_rows(stacked, flat_active)
        logits = nm.bias_add(nm.matmul_t(sel, self.embed), self.out_bias)
        flat_targets = targets.T.reshape(-1)[flat_active]
        doc_of_row = np.tile(np.arange(n), steps + 1)[flat_active]
        return logits, flat_targets, doc_of_row

    def batch_mean_nll(self, tokens, lengths, authors, times, train=False, rng=None):
        """(token-mean NLL tensor, token count) over a padded batch."""
        logits, flat_targets, _ = self._forward_active(
            tokens, lengths, authors, times, train, rng
        )
        return nm.softmax_xent(logits, flat_targets), int(flat_targets.size)

    def batch_doc_nll(self, tokens, lengths, authors, times):
        """Per-document (total nats, count) at evaluation; no tape, no dropout."""
        logits, flat_targets, doc_of_row = self._forward_active(
            tokens, lengths, authors, times, train=False, rng=None
        )
        z = logits.value
        m = z.max(axis=1, keepdims=True)
        lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
        row_nll = lse - z[np.arange(z.shape[0]), flat_targets]
        n = len(lengths)
        nats = np.zeros(n, dtype=np.float64)
        np.add.at(nats, doc_of_row, row_nll.astype(np.float64))
        counts = np.asarray(lengths, dtype=np.int64) + 1
        return nats, counts

    def sequence_nll(self, doc, cond=None, mode="eval", rng=None):
        """(total nats, token count) of one document.

        `cond` may carry an explicit embedding-space vector; None means
        the variant's own conditioning (SOS for the plain LSTM).  The
        token count includes the closing EOS prediction.
        """
        if not doc.tokens:
            raise ModelError("empty document")
        tokens = np.asarray([doc.tokens], dtype=np.int64)
        lengths = np.asarray([len(doc.tokens)])
        override = None if cond is None else np.asarray(cond, dtype=self.dtype)[None, :]
        train = mode == "train"
        logits, flat_targets, _ = self._forward_active(
            tokens, lengths, [doc.author], [doc.time], train,
            rng if train else None, cond_override=override,
        )
        loss = nm.softmax_xent(logits, flat_targets)
        count = int(flat_targets.size)
        return float(loss.value) * count, count

    # -- regularization ------------------------------------------------------

    def regularization_loss(self):
        """Scalar reg term added to the batch loss.

        The consecutive-vector pull (lstm-at) is differentiable here; the
        static-vector and dynamics-weight decays are applied as decoupled
        weight decay by the optimizer and enter only as constants so the
        logged loss reflects them.
        """
        cfg = self.config
        total = Tensor(np.zeros((), dtype=self.dtype))
        if cfg.variant == "lstm-at" and cfg.lambda_consec > 0:
            later, earlier = self._consecutive_pairs()
            if later.size:
                d = nm.sub(nm.take_rows(self.h_free, later),
                           nm.take_rows(self.h_free, earlier))
                total = nm.add(total, nm.scale(nm.sum_all(nm.mul(d, d)), cfg.lambda_consec))
        constant = 0.0
        if cfg.variant in ("lstm-a", "ours") and cfg.lambda_author > 0:
            constant += cfg.lambda_author * float((self.h_static.value ** 2).sum())
        if cfg.variant == "ours" and cfg.lambda_dyn > 0:
            k = 0
            while f"dyn.W{k}" in self.params:
                constant += cfg.lambda_dyn * float((self.params[f"dyn.W{k}"].value ** 2).sum())
                k += 1
        if constant:
            total = nm.add(total, Tensor(np.asarray(constant, dtype=self.dtype)))
        return total

    def _consecutive_pairs(self):
        """Flat table indices of nearest present timestep pairs per author."""
        later, earlier = [], []
        T = self.num_timesteps
        for a in range(self.num_authors):
            present = np.flatnonzero(self.presence[a])
            for j in range(1, present.size):
                later.append(a * T + present[j])
                earlier.append(a * T + present[j - 1])
        return np.asarray(later, dtype=np.int64), np.asarray(earlier, dtype=np.int64)

    # -- stepwise decoding (generation) ---------------------------------------

    def start_state(self, n):
        cfg = self.config
        return (self._zeros(n, cfg.d_hidden), self._zeros(n, cfg.d_hidden),
                self._zeros(n, cfg.d_embed), self._zeros(n, cfg.d_embed))

    def decode_step(self, x, state):
        """One eval-mode decoder step: [n, d_embed] input to [n, V] log-probs."""
        h1, c1, h2, c2 = state
        h1, c1 = nm.lstm_cell(x, h1, c1, *self.lstm1)
        h2, c2 = nm.lstm_cell(h1, h2, c2, *self.lstm2)
        logits = nm.bias_add(nm.matmul_t(h2, self.embed), self.out_bias).value
        m = logits.max(axis=1, keepdims=True)
        logp = logits - (m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True)))
        return logp, (h1, c1, h2, c2)

    def embed_tokens(self, ids):
        return nm.take_rows(self.embed, np.asarray(ids, dtype=np.int64))


def make_batch(documents):
    """Pad documents into (tokens, lengths, authors, times) arrays."""
    n = len(documents)
    lengths = np.asarray([len(d.tokens) for d in documents], dtype=np.int64)
    tokens = np.full((n, int(lengths.max())), PAD, dtype=np.int64)
    for i, d in enumerate(documents):
        tokens[i, :len(d.tokens)] = d.tokens
    authors = np.asarray([d.author for d in documents], dtype=np.int64)
    times = np.asarray([d.time for d in documents], dtype=np.int64)
    return tokens, lengths, authors, times


def force_uniform(model):
    """Debug aid: zero the tied embedding and output bias so every logit
    vanishes and the decoder predicts the uniform distribution."""
    model.embed.value[...] = 0.0
    model.out_bias.value[...] = 0.0
    model.invalidate_rollout_cache()
    return model
