"""Corpus ingestion: tokenization, vocabulary, encoded documents.

File format: UTF-8, one JSON object per line with keys "author" (string),
"time" (integer year), "text" (string) and optional "labels" (list of
strings).  Lines starting with '#' are treated as comments so written
artifacts can carry provenance headers.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field

SOS, EOS, UNK, PAD, NUM = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("<sos>", "<eos>", "<unk>", "<pad>", "<num>")
NUM_TOKEN = SPECIAL_TOKENS[NUM]

# letter runs, digit runs, and single punctuation marks; lower-cased input
_TOKEN_RE = re.compile(r"[^\W\d_]+|\d+|[^\w\s]")


class CorpusError(ValueError):
    pass


def normalize_and_tokenize(raw_text, numerals_to_token=True):
    """Lower-case and split into word/punctuation tokens.

    Maximal digit runs become the NUM token string when the flag is set,
    so "2015" and the "2015" inside "2015-16" both collapse.
    """
    tokens = _TOKEN_RE.findall(raw_text.lower())
    if numerals_to_token:
        tokens = [NUM_TOKEN if t.isdigit() else t for t in tokens]
    return tokens


@dataclass
class Vocab:
    token_to_id: dict
    id_to_token: list

    def __len__(self):
        return len(self.id_to_token)

    def encode_token(self, token):
        return self.token_to_id.get(token, UNK)

    def decode(self, ids):
        return [self.id_to_token[i] for i in ids]

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            for token in self.id_to_token:
                f.write(token + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            tokens = [line.rstrip("\n") for line in f]
        if tuple(tokens[:5]) != SPECIAL_TOKENS:
            raise CorpusError(f"vocab file {path} does not start with the special tokens")
        return cls({t: i for i, t in enumerate(tokens)}, tokens)


def build_vocab(token_sequences, min_count=5):
    """Frequency-thresholded vocabulary over training-split sequences.

    Ids are deterministic: specials first, then frequency descending with
    lexicographic tie-break.  Tokens below min_count encode to UNK later.
    """
    if min_count < 1:
        raise CorpusError(f"min_count must be >= 1, got {min_count}")
    counts = Counter()
    for seq in token_sequences:
        counts.update(seq)
    for special in SPECIAL_TOKENS:
        counts.pop(special, None)
    kept = [t for t, c in counts.items() if c >= min_count]
    if counts and not kept:
        raise CorpusError(f"no token reaches min_count={min_count}")
    kept.sort(key=lambda t: (-counts[t], t))
    id_to_token = list(SPECIAL_TOKENS) + kept
    return Vocab({t: i for i, t in enumerate(id_to_token)}, id_to_token)


def encode_document(tokens, vocab):
    """Token strings to ids; out-of-vocabulary maps to UNK."""
    return [vocab.encode_token(t) for t in tokens]


@dataclass
class Document:
    author: int
    time: int  # 1-based timestep index
    tokens: list
    labels: list = field(default_factory=list)


@dataclass
class Corpus:
    documents: list
    vocab: Vocab
    num_authors: int
    num_timesteps: int
    author_names: list
    time_origin: int = 1  # calendar value mapped to timestep 1

    def __len__(self):
        return len(self.documents)

    def year_of(self, t):
        return self.time_origin + t - 1


def load_corpus(path, min_count=5, numerals_to_token=True):
    """Read line-delimited records and build an encoded corpus.

    Author ids are assigned densely on first sight; calendar years map to
    timesteps 1..T with gaps preserved as empty timesteps.  The vocabulary
    is built from every record in the file (the file is the training
    resource); later splits never rebuild it, and unseen tokens in held-out
    text encode to UNK.
    """
    records = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusError(f"{path}:{lineno}: invalid JSON ({e})") from None
            for key in ("author", "time", "text"):
                if key not in rec:
                    raise CorpusError(f"{path}:{lineno}: missing field '{key}'")
            if not isinstance(rec["time"], int) or isinstance(rec["time"], bool):
                raise CorpusError(f"{path}:{lineno}: field 'time' must be an integer")
            if not isinstance(rec["author"], str):
                raise CorpusError(f"{path}:{lineno}: field 'author' must be a string")
            labels = rec.get("labels", [])
            if labels is None:
                labels = []
            records.append((rec["author"], rec["time"], rec["text"], list(labels)))
    if not records:
        raise CorpusError(f"{path}: no records")

    token_lists = [normalize_and_tokenize(text, numerals_to_token) for _, _, text, _ in records]
    vocab = build_vocab(token_lists, min_count)

    author_ids = {}
    author_names = []
    years = [year for _, year, _, _ in records]
    origin = min(years)
    num_timesteps = max(years) - origin + 1

    documents = []
    for (name, year, _, labels), tokens in zip(records, token_lists):
        if not tokens:
            continue
        if name not in author_ids:
            author_ids[name] = len(author_names)
            author_names.append(name)
        documents.append(
            Document(
                author=author_ids[name],
                time=year - origin + 1,
                tokens=encode_document(tokens, vocab),
                labels=labels,
            )
        )
    if not documents:
        raise CorpusError(f"{path}: every record tokenized to nothing")
    return Corpus(
        documents=documents,
        vocab=vocab,
        num_authors=len(author_names),
        num_timesteps=num_timesteps,
        author_names=author_names,
        time_origin=origin,
    )


def save_corpus(corpus, path, header_lines=()):
    """Write documents back out in the line-record format."""
    with open(path, "w", encoding="utf-8") as f:
        for line in header_lines:
            f.write(f"# {line}\n")
        for doc in corpus.documents:
            rec = {
                "author": corpus.author_names[doc.author],
                "time": corpus.year_of(doc.time),
                "text": " ".join(corpus.vocab.decode(doc.tokens)),
            }
            if doc.labels:
                rec["labels"] = doc.labels
            f.write(json.dumps(rec, ensure_ascii=False) + "\n")


def corpus_stats(corpus):
    """Document and token counts, globally and per (author, timestep) cell."""
    cell_docs = Counter()
    cell_tokens = Counter()
    for doc in corpus.documents:
        cell_docs[(doc.author, doc.time)] += 1
        cell_tokens[(doc.author, doc.time)] += len(doc.tokens)
    per_time = Counter()
    for (_, t), n in cell_docs.items():
        per_time[t] += n
    return {
        "num_documents": len(corpus.documents),
        "num_tokens": sum(cell_tokens.values()),
        "num_authors": corpus.num_authors,
        "num_timesteps": corpus.num_timesteps,
        "vocab_size": len(corpus.vocab),
        "docs_per_timestep": {t: per_time.get(t, 0) for t in range(1, corpus.num_timesteps + 1)},
        "cell_docs": dict(cell_docs),
        "cell_tokens": dict(cell_tokens),
    }
