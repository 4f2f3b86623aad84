"""Minibatch training loop, learning-rate schedule, checkpoints.

Documents are bucketed by similar length before batching so short titles
waste little padding; padded positions never enter the loss or the token
counts.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

from . import numeric as nm
from .evaluate import evaluate_split
from .model import ConditionedLM, ModelConfig, make_batch
from .numeric import DTYPES, Tape, backward
from .optim import AdamState, adam_step, clip_global_norm
from .splits import TRAIN, VAL, make_split, train_presence, verify_split


class TrainError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 64
    lr: float = 0.003
    const_iters: int = 50_000
    decay_iters: int = 20_000
    max_iters: int = 70_000
    clip_norm: float = 0.25
    weight_decay: float = 1e-5
    seed: int = 0
    precision: str = "f32"
    eval_every: int = 500
    deterministic: bool = True  # reductions are always sequential here

    def __post_init__(self):
        if self.batch_size < 1:
            raise TrainError("batch_size must be >= 1")
        if self.const_iters + self.decay_iters != self.max_iters:
            raise TrainError(
                f"const_iters + decay_iters must equal max_iters "
                f"({self.const_iters} + {self.decay_iters} != {self.max_iters})"
            )
        if self.precision not in DTYPES:
            raise TrainError(f"precision must be one of {sorted(DTYPES)}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def lr_at(iteration, config):
    """Constant, then linear to zero, then zero."""
    if iteration < config.const_iters:
        return config.lr
    done = iteration - config.const_iters
    if done < config.decay_iters:
        return config.lr * (1.0 - done / config.decay_iters)
    return 0.0


def minibatch_loss(model, docs, train=True, rng=None):
    """Token-mean NLL of the batch plus the regularization term.

    Returns (loss tensor, token count); the count excludes padding.
    """
    if not docs:
        raise TrainError("empty minibatch")
    tokens, lengths, authors, times = make_batch(docs)
    mean_nll, count = model.batch_mean_nll(tokens, lengths, authors, times,
                                           train=train, rng=rng)
    return nm.add(mean_nll, model.regularization_loss()), count


def iter_minibatches(num_docs, lengths, batch_size, rng, bucket_batches=50):
    """Endless stream of index batches: shuffle, locally sort by length,
    cut batches, shuffle the batch order."""
    while True:
        order = rng.permutation(num_docs)
        span = batch_size * bucket_batches
        batches = []
        for lo in range(0, num_docs, span):
            chunk = sorted(order[lo:lo + span], key=lambda i: lengths[i])
            batches.extend(chunk[j:j + batch_size] for j in range(0, len(chunk), batch_size))
        for j in rng.permutation(len(batches)):
            yield batches[j]


@dataclass
class Checkpoint:
    model: ConditionedLM
    adam: AdamState
    iteration: int
    vocab_hash: str
    split_hash: str


def vocab_hash(vocab):
    return hashlib.sha256("\n".join(vocab.id_to_token).encode("utf-8")).hexdigest()


def split_hash(split):
    task = getattr(split.task, "value", str(split.task))
    body = f"{task}:{split.seed}:" + ",".join(split.doc_split)
    return hashlib.sha256(body.encode("utf-8")).hexdigest()


def fit(corpus, split, model_config, train_config, log_fn=None):
    """Train one model under one split; returns (Checkpoint, log rows).

    Logs (iteration, train loss, val micro perplexity, lr) every
    `eval_every` iterations and keeps the parameters of the best
    validation point.  Aborts on a non-finite loss.
    """
    violations = verify_split(corpus, split)
    if violations:
        raise TrainError(f"split fails verification: {violations[:3]}")
    tcfg = train_config
    dtype = DTYPES[tcfg.precision]
    model = ConditionedLM(
        model_config, len(corpus.vocab), corpus.num_authors, corpus.num_timesteps,
        seed=tcfg.seed, dtype=dtype,
    )
    model.set_presence(train_presence(corpus, split))
    state = AdamState(model.params)
    v_hash, s_hash = vocab_hash(corpus.vocab), split_hash(split)

    train_docs = [corpus.documents[i] for i in split.indices(TRAIN)]
    has_val = bool(split.indices(VAL))
    rng = np.random.default_rng([tcfg.seed, 0xA11])
    lengths = [len(d.tokens) for d in train_docs]
    batches = iter_minibatches(len(train_docs), lengths, tcfg.batch_size, rng)

    best_ppl = np.inf
    best_params = model.params.state_dict()
    best_adam = ({k: v.copy() for k, v in state.m.items()},
                 {k: v.copy() for k, v in state.v.items()}, 0)
    best_iter = 0
    log = []
    for it in range(tcfg.max_iters):
        docs = [train_docs[i] for i in next(batches)]
        tape = Tape()
        with tape:
            loss, _ = minibatch_loss(model, docs, train=True, rng=rng)
        loss_value = float(loss.value)
        if not np.isfinite(loss_value):
            raise TrainError(f"training diverged: non-finite loss at iteration {it}")
        backward(loss, tape)
        clip_global_norm(model.params, tcfg.clip_norm)
        adam_step(model.params, state, lr_at(it, tcfg), tcfg.weight_decay)
        model.invalidate_rollout_cache()

        done = it + 1
        if done % tcfg.eval_every == 0 or done == tcfg.max_iters:
            if has_val:
                val_ppl = evaluate_split(model, corpus, split, subset="val").micro_ppl
            else:
                val_ppl = float("nan")
            row = (done, loss_value, val_ppl, lr_at(it, tcfg))
            log.append(row)
            if log_fn:
                log_fn(row)
            if not has_val or val_ppl < best_ppl:
                best_ppl = val_ppl if has_val else loss_value
                best_params = model.params.state_dict()
                best_adam = ({k: v.copy() for k, v in state.m.items()},
                             {k: v.copy() for k, v in state.v.items()}, state.step)
                best_iter = done

    model.params.load_state_dict(best_params)
    model.invalidate_rollout_cache()
    state.m, state.v, state.step = best_adam
    return Checkpoint(model, state, best_iter, v_hash, s_hash), log


def save_train_log(log, path, header_lines=()):
    with open(path, "w", encoding="utf-8") as f:
        f.write("# iter\ttrain_nll\tval_micro_ppl\tlr\n")
        for line in header_lines:
            f.write(f"# {line}\n")
        for it, loss, ppl, lr in log:
            f.write(f"{it}\t{loss!r}\t{ppl!r}\t{lr!r}\n")


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

_MAGIC = b"ALMCKPT\x01"
_VERSION = 1
_TAG_OF_DTYPE = {
    np.dtype(np.float32): b"f4",
    np.dtype(np.float64): b"f8",
    np.dtype(np.uint8): b"u1",
    np.dtype(np.int64): b"i8",
}
_DTYPE_OF_TAG = {b"f4": "<f4", b"f8": "<f8", b"u1": "u1", b"i8": "<i8"}


def _write_array(f, name, arr):
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _TAG_OF_DTYPE:
        raise TrainError(f"cannot serialize dtype {arr.dtype} of {name}")
    tag = _TAG_OF_DTYPE[arr.dtype]
    payload = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
    name_b = name.encode("utf-8")
    f.write(struct.pack("<I", len(name_b)))
    f.write(name_b)
    f.write(tag)
    f.write(struct.pack("<I", arr.ndim))
    for d in arr.shape:
        f.write(struct.pack("<Q", d))
    f.write(struct.pack("<Q", len(payload)))
    f.write(payload)


def _read_exact(f, n, what):
    buf = f.read(n)
    if len(buf) != n:
        raise TrainError(f"truncated checkpoint while reading {what}")
    return buf


def _read_array(f):
    head = f.read(4)
    if not head:
        return None
    name_len = struct.unpack("<I", head)[0]
    name = _read_exact(f, name_len, "record name").decode("utf-8")
    tag = _read_exact(f, 2, "dtype tag")
    if tag not in _DTYPE_OF_TAG:
        raise TrainError(f"unknown dtype tag {tag!r} in checkpoint")
    ndim = struct.unpack("<I", _read_exact(f, 4, "rank"))[0]
    shape = tuple(
        struct.unpack("<Q", _read_exact(f, 8, "dim"))[0] for _ in range(ndim)
    )
    nbytes = struct.unpack("<Q", _read_exact(f, 8, "payload size"))[0]
    arr = np.frombuffer(_read_exact(f, nbytes, f"payload of {name}"),
                        dtype=_DTYPE_OF_TAG[tag]).reshape(shape)
    return name, arr.astype(arr.dtype.newbyteorder("="), copy=True)


def save_checkpoint(ckpt, path):
    model = ckpt.model
    header = {
        "version": _VERSION,
        "precision": "f64" if model.dtype == np.float64 else "f32",
        "iteration": ckpt.iteration,
        "model_config": model.config.to_dict(),
        "vocab_size": model.vocab_size,
        "num_authors": model.num_authors,
        "num_timesteps": model.num_timesteps,
        "vocab_hash": ckpt.vocab_hash,
        "split_hash": ckpt.split_hash,
        "adam": {
            "step": ckpt.adam.step,
            "beta1": ckpt.adam.beta1,
            "beta2": ckpt.adam.beta2,
            "eps": ckpt.adam.eps,
        },
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for p in model.params:
            _write_array(f, f"param/{p.name}", p.value)
        for name in model.params.names():
            _write_array(f, f"adam.m/{name}", ckpt.adam.m[name])
        for name in model.params.names():
            _write_array(f, f"adam.v/{name}", ckpt.adam.v[name])
        _write_array(f, "presence", model.presence.astype(np.uint8))


def load_checkpoint(path, expect_vocab_hash=None, expect_split_hash=None):
    with open(path, "rb") as f:
        if _read_exact(f, len(_MAGIC), "magic") != _MAGIC:
            raise TrainError(f"{path}: not a checkpoint file")
        hlen = struct.unpack("<I", _read_exact(f, 4, "header length"))[0]
        header = json.loads(_read_exact(f, hlen, "header"))
        if header["version"] != _VERSION:
            raise TrainError(
                f"{path}: checkpoint version {header['version']} != {_VERSION}"
            )
        if expect_vocab_hash is not None and header["vocab_hash"] != expect_vocab_hash:
            raise TrainError(f"{path}: vocabulary hash mismatch")
        if expect_split_hash is not None and header["split_hash"] != expect_split_hash:
            raise TrainError(f"{path}: split hash mismatch")
        arrays = {}
        while True:
            rec = _read_array(f)
            if rec is None:
                break
            arrays[rec[0]] = rec[1]

    config = ModelConfig.from_dict(header["model_config"])
    model = ConditionedLM(
        config, header["vocab_size"], header["num_authors"], header["num_timesteps"],
        seed=0, dtype=DTYPES[header["precision"]],
    )
    state = AdamState(model.params, beta1=header["adam"]["beta1"],
                      beta2=header["adam"]["beta2"], eps=header["adam"]["eps"])
    state.step = header["adam"]["step"]
    for p in model.params:
        key = f"param/{p.name}"
        if key not in arrays:
            raise TrainError(f"{path}: missing record {key}")
        if arrays[key].shape != p.value.shape:
            raise TrainError(f"{path}: shape mismatch for {key}")
        p.tensor.value[...] = arrays[key]
        state.m[p.name][...] = arrays[f"adam.m/{p.name}"]
        state.v[p.name][...] = arrays[f"adam.v/{p.name}"]
    model.set_presence(arrays["presence"].astype(bool))
    model.invalidate_rollout_cache()
    return Checkpoint(model, state, header["iteration"],
                      header["vocab_hash"], header["split_hash"])


# ---------------------------------------------------------------------------
# multi-seed driver
# ---------------------------------------------------------------------------


def seed_sweep(corpus, task, variants, seeds, model_config, train_config,
               subset="test", log_fn=None):
    """Train and evaluate each variant across seeds.

    Returns per-run reports and a mean/stdv summary table in the shape of
    the perplexity tables (rows = variants, micro and macro columns).
    """
    runs = {v: [] for v in variants}
    for seed in seeds:
        split = make_split(corpus, task, seed)
        for variant in variants:
            mcfg_d = model_config.to_dict()
            mcfg_d["variant"] = variant
            mcfg = ModelConfig.from_dict(mcfg_d)
            tcfg_d = train_config.to_dict()
            tcfg_d["seed"] = seed
            tcfg = TrainConfig.from_dict(tcfg_d)
            ckpt, _ = fit(corpus, split, mcfg, tcfg)
            report = evaluate_split(ckpt.model, corpus, split, subset=subset)
            runs[variant].append(report)
            if log_fn:
                log_fn(f"seed={seed} variant={variant} "
                       f"micro={report.micro_ppl:.3f} macro={report.macro_ppl:.3f}")
    summary = {}
    for variant in variants:
        micros = [r.micro_ppl for r in runs[variant]]
        macros = [r.macro_ppl for r in runs[variant]]
        summary[variant] = (
            float(np.mean(micros)), float(np.std(micros)),
            float(np.mean(macros)), float(np.std(macros)),
        )
    return runs, summary


def format_summary(summary):
    lines = ["variant\tmicro_mean\tmicro_stdv\tmacro_mean\tmacro_stdv"]
    for variant, (mm, ms, am, astd) in summary.items():
        lines.append(f"{variant}\t{mm:.4f}\t{ms:.4f}\t{am:.4f}\t{astd:.4f}")
    return "\n".join(lines)
