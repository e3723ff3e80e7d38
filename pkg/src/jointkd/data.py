"""Tokenisation, dataset loaders, and seeded synthetic generators.

Synthetic generators draw only integers from numpy's PCG64 stream (Bernoulli
events compare an integer draw against a parts-per-million threshold), so a
given spec yields the same dataset on every platform.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

import numpy as np

PAD, UNK = 0, 1
RESERVED = 2
PPM = 1_000_000

_WORD = re.compile(r"\w+")


class DataError(ValueError):
    pass


# ---------------------------------------------------------------- vocab / tokenizer

class Vocab:
    def __init__(self, tokens=(), max_size=None):
        tokens = list(tokens)
        if max_size is not None:
            tokens = tokens[: max(0, max_size - RESERVED)]
        self.itos = ["[PAD]", "[UNK]"] + tokens
        self.stoi = {t: i + RESERVED for i, t in enumerate(tokens)}
        if len(self.stoi) != len(tokens):
            raise DataError("duplicate token in vocabulary")

    def __len__(self):
        return len(self.itos)

    def id(self, token):
        return self.stoi.get(token, UNK)

    @classmethod
    def build(cls, texts, max_size=None, min_freq=1):
        """Most frequent words first; equal counts ordered lexicographically."""
        counts = Counter(w for t in texts for w in split_words(t))
        ranked = sorted((w for w, c in counts.items() if c >= min_freq), key=lambda w: (-counts[w], w))
        return cls(ranked, max_size)

    def save(self, path):
        Path(path).write_text("".join(t + "\n" for t in self.itos[RESERVED:]), encoding="utf-8")

    @classmethod
    def load(cls, path):
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)


def split_words(text):
    return _WORD.findall(text.lower())


def tokenize(text, vocab, max_seq_len):
    """-> (ids, mask): ids padded with PAD to ``max_seq_len``, mask True on real tokens."""
    ids = [vocab.id(w) for w in split_words(text)][:max_seq_len]
    out = np.full(max_seq_len, PAD, dtype=np.int64)
    out[: len(ids)] = ids
    mask = np.zeros(max_seq_len, dtype=bool)
    mask[: len(ids)] = True
    return out, mask


# ---------------------------------------------------------------- containers

@dataclass
class ClassifyData:
    tokens: np.ndarray  # (n, S) int64
    mask: np.ndarray    # (n, S) bool
    labels: np.ndarray  # (n,) int64
    num_classes: int

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        return ClassifyData(self.tokens[idx], self.mask[idx], self.labels[idx], self.num_classes)


@dataclass
class ImpressionSample:
    history: list       # news row indices, oldest first
    candidates: list    # news row indices
    labels: list        # 0/1 per candidate


@dataclass
class ImpressionData:
    news_tokens: np.ndarray   # (M, S)
    news_mask: np.ndarray     # (M, S)
    samples: list             # ImpressionSample
    news_topics: np.ndarray | None = None
    oracle_scores: list | None = None  # planted per-candidate scores, synthetic only

    def __len__(self):
        return len(self.samples)


@dataclass
class RetrievalData:
    query_tokens: np.ndarray
    query_mask: np.ndarray
    doc_tokens: np.ndarray
    doc_mask: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        return RetrievalData(self.query_tokens[idx], self.query_mask[idx], self.doc_tokens[idx],
                             self.doc_mask[idx], self.labels[idx])


def save_dataset(ds, path):
    """Write any dataset container to an ``.npz`` file."""
    if isinstance(ds, ClassifyData):
        np.savez(path, kind="classify", tokens=ds.tokens, mask=ds.mask, labels=ds.labels,
                 num_classes=ds.num_classes)
    elif isinstance(ds, RetrievalData):
        np.savez(path, kind="retrieval", query_tokens=ds.query_tokens, query_mask=ds.query_mask,
                 doc_tokens=ds.doc_tokens, doc_mask=ds.doc_mask, labels=ds.labels)
    elif isinstance(ds, ImpressionData):
        samples = json.dumps([[s.history, s.candidates, s.labels] for s in ds.samples])
        np.savez(path, kind="impressions", news_tokens=ds.news_tokens, news_mask=ds.news_mask,
                 samples=np.array(samples))
    else:
        raise TypeError(f"cannot serialise {type(ds).__name__}")


def load_dataset(path):
    with np.load(path) as z:
        kind = str(z["kind"])
        if kind == "classify":
            return ClassifyData(z["tokens"], z["mask"], z["labels"], int(z["num_classes"]))
        if kind == "retrieval":
            return RetrievalData(z["query_tokens"], z["query_mask"], z["doc_tokens"], z["doc_mask"],
                                 z["labels"])
        samples = [ImpressionSample(*s) for s in json.loads(str(z["samples"]))]
        return ImpressionData(z["news_tokens"], z["news_mask"], samples)


# ---------------------------------------------------------------- MIND

@dataclass
class NewsRecord:
    news_id: str
    category: str
    title: str
    split: str = "train"


@dataclass
class MindData:
    news: dict                    # news_id -> NewsRecord
    categories: list              # sorted label set
    classify: dict                # split -> ClassifyData
    impressions: dict             # split -> ImpressionData
    vocab: Vocab
    skipped_unknown_news: int = 0
    stats: dict = field(default_factory=dict)


_MIND_TIME = "%m/%d/%Y %I:%M:%S %p"


def _parse_time(raw, lineno):
    try:
        return datetime.strptime(raw.strip(), _MIND_TIME).timestamp()
    except ValueError:
        try:
            return float(raw)
        except ValueError:
            raise DataError(f"behaviors line {lineno}: unreadable time {raw!r}") from None


def read_mind_news(path):
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            f = line.split("\t")
            if len(f) < 4 or not f[0] or not f[1]:
                raise DataError(f"news line {lineno}: expected >= 4 tab-separated fields, got {len(f)}")
            out[f[0]] = NewsRecord(f[0], f[1], f[3])
    return out


def read_mind_behaviors(path):
    """-> list of (impression_id, user_id, time, history ids, [(news_id, label), ...])."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            f = line.split("\t")
            if len(f) != 5:
                raise DataError(f"behaviors line {lineno}: expected 5 tab-separated fields, got {len(f)}")
            history = f[3].split()
            cands = []
            for item in f[4].split():
                nid, sep, lab = item.rpartition("-")
                if not sep or lab not in ("0", "1"):
                    raise DataError(f"behaviors line {lineno}: bad impression item {item!r}")
                cands.append((nid, int(lab)))
            if not cands:
                raise DataError(f"behaviors line {lineno}: no impression items")
            rows.append((f[0], f[1], _parse_time(f[2], lineno), history, cands))
    return rows


def load_mind(news_path, behaviors_path, max_seq_len=16, vocab=None, max_history=50,
              split_points=(4 / 6, 5 / 6)):
    """Parse MIND news/behaviors TSVs into classification and impression datasets.

    Impressions are split by time: before the first split point is train,
    between the points validation, after the second test. A news item belongs
    to the earliest split whose impressions mention it (unmentioned news go to
    train), so classification test news never occur in train or validation.
    """
    news = read_mind_news(news_path)
    rows = read_mind_behaviors(behaviors_path)
    categories = sorted({r.category for r in news.values()})
    cat_index = {c: i for i, c in enumerate(categories)}
    if vocab is None:
        vocab = Vocab.build(r.title for r in news.values())

    times = [r[2] for r in rows]
    t0, t1 = (min(times), max(times)) if times else (0.0, 0.0)
    span = (t1 - t0) or 1.0

    def split_of(t):
        x = (t - t0) / span
        if x < split_points[0]:
            return "train"
        return "valid" if x < split_points[1] else "test"

    rank = {"train": 0, "valid": 1, "test": 2}
    first_seen = {}
    skipped = 0
    per_split = {"train": [], "valid": [], "test": []}
    for _, _, t, hist, cands in rows:
        sp = split_of(t)
        known_hist = []
        for nid in hist:
            if nid in news:
                known_hist.append(nid)
            else:
                skipped += 1
        known_c = []
        for nid, lab in cands:
            if nid in news:
                known_c.append((nid, lab))
            else:
                skipped += 1
        for nid in known_hist + [n for n, _ in known_c]:
            if nid not in first_seen or rank[sp] < rank[first_seen[nid]]:
                first_seen[nid] = sp
        if known_c:
            per_split[sp].append((known_hist[-max_history:], known_c))

    ids = sorted(news)
    row_of = {nid: i for i, nid in enumerate(ids)}
    tok = np.zeros((len(ids), max_seq_len), dtype=np.int64)
    msk = np.zeros((len(ids), max_seq_len), dtype=bool)
    for nid, i in row_of.items():
        rec = news[nid]
        rec.split = first_seen.get(nid, "train")
        tok[i], msk[i] = tokenize(rec.title, vocab, max_seq_len)

    classify = {}
    labels = np.array([cat_index[news[n].category] for n in ids], dtype=np.int64)
    for sp in ("train", "valid", "test"):
        idx = np.array([row_of[n] for n in ids if news[n].split == sp and msk[row_of[n]].any()],
                       dtype=np.int64)
        classify[sp] = ClassifyData(tok[idx], msk[idx], labels[idx], len(categories))

    impressions = {}
    for sp, items in per_split.items():
        samples = [ImpressionSample([row_of[n] for n in h], [row_of[n] for n, _ in c], [l for _, l in c])
                   for h, c in items]
        impressions[sp] = ImpressionData(tok, msk, samples)
    return MindData(news, categories, classify, impressions, vocab, skipped)


# ---------------------------------------------------------------- retrieval JSONL

def read_retrieval_jsonl(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                q, d, y = obj["query"], obj["doc"], obj["label"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"retrieval line {lineno}: {exc}") from None
            if y not in (0, 1) or not isinstance(q, str) or not isinstance(d, str):
                raise DataError(f"retrieval line {lineno}: bad field types")
            out.append((q, d, int(y)))
    return out


def write_retrieval_jsonl(rows, path):
    with open(path, "w", encoding="utf-8") as fh:
        for q, d, y in rows:
            fh.write(json.dumps({"query": q, "doc": d, "label": int(y)}, ensure_ascii=False) + "\n")


def retrieval_from_rows(rows, vocab, query_len=16, doc_len=64):
    qt, qm, dt, dm = [], [], [], []
    for q, d, _ in rows:
        a, b = tokenize(q, vocab, query_len)
        c, e = tokenize(d, vocab, doc_len)
        if not b.any() or not e.any():
            raise DataError(f"empty query or document after tokenisation: {q!r} / {d!r}")
        qt.append(a), qm.append(b), dt.append(c), dm.append(e)
    return RetrievalData(np.array(qt), np.array(qm), np.array(dt), np.array(dm),
                         np.array([y for _, _, y in rows], dtype=np.int64))


# ---------------------------------------------------------------- synthetic

@dataclass
class SyntheticSpec:
    seed: int = 0
    vocab_size: int = 200
    num_classes: int = 4
    seq_len: int = 16
    min_len: int = 6
    signal: float = 0.7
    tokens_per_class: int = 8
    n_train: int = 5000
    n_valid: int = 500
    n_test: int = 1000

    def topic_tokens(self, c):
        start = RESERVED + c * self.tokens_per_class
        return np.arange(start, start + self.tokens_per_class)

    @property
    def background(self):
        lo = RESERVED + self.num_classes * self.tokens_per_class
        if lo >= self.vocab_size:
            raise DataError("vocab_size leaves no background tokens")
        return lo, self.vocab_size


def _bernoulli(rng, p, size=None):
    return rng.integers(0, PPM, size=size) < int(round(p * PPM))


def _background_tokens(rng, spec, n):
    lo, hi = spec.background
    return rng.integers(lo, hi, size=n)


def _sequence(rng, spec, topic, n_topic, length):
    """Background tokens with ``n_topic`` positions overwritten by topic tokens."""
    seq = _background_tokens(rng, spec, length)
    if n_topic:
        pos = rng.permutation(length)[:n_topic]
        seq[pos] = spec.topic_tokens(topic)[rng.integers(0, spec.tokens_per_class, size=n_topic)]
    return seq


def _pack(seqs, seq_len):
    tok = np.zeros((len(seqs), seq_len), dtype=np.int64)
    msk = np.zeros((len(seqs), seq_len), dtype=bool)
    for i, s in enumerate(seqs):
        tok[i, : len(s)] = s
        msk[i, : len(s)] = True
    return tok, msk


def gen_synthetic_classification(spec):
    """-> ({"train","valid","test"}: ClassifyData, bayes_accuracy).

    Each sample has a uniformly drawn class; with probability ``signal`` one
    class-indicative token is planted, otherwise the title is pure background
    and carries no class information.
    """
    rng = np.random.default_rng([spec.seed, 101])
    out = {}
    for split, n in (("train", spec.n_train), ("valid", spec.n_valid), ("test", spec.n_test)):
        labels = rng.integers(0, spec.num_classes, size=n)
        lengths = rng.integers(spec.min_len, spec.seq_len + 1, size=n)
        planted = _bernoulli(rng, spec.signal, size=n)
        seqs = [_sequence(rng, spec, int(labels[i]), int(planted[i]), int(lengths[i])) for i in range(n)]
        tok, msk = _pack(seqs, spec.seq_len)
        out[split] = ClassifyData(tok, msk, labels.astype(np.int64), spec.num_classes)
    return out, synthetic_bayes_accuracy(spec)


def synthetic_bayes_accuracy(spec):
    # planted token identifies the class; otherwise the best guess is chance
    return spec.signal + (1.0 - spec.signal) / spec.num_classes


@dataclass
class ImpressionSpec:
    seed: int = 0
    vocab_size: int = 200
    num_topics: int = 4
    seq_len: int = 16
    min_len: int = 6
    tokens_per_class: int = 8
    topic_tokens_per_news: int = 2
    n_news: int = 400
    n_users: int = 300
    history_len: int = 8
    negatives: int = 4
    focus: float = 1.0   # 1: single-topic users, 0: no preference
    n_train: int = 1500
    n_valid: int = 200
    n_test: int = 300

    def as_token_spec(self):
        return SyntheticSpec(seed=self.seed, vocab_size=self.vocab_size, num_classes=self.num_topics,
                             seq_len=self.seq_len, min_len=self.min_len,
                             tokens_per_class=self.tokens_per_class)


def _draw_topic(rng, pref_ppm):
    """Integer draw from a distribution given as parts-per-million weights."""
    cum = np.cumsum(pref_ppm)
    return int(np.searchsorted(cum, rng.integers(0, cum[-1]), side="right"))


def gen_synthetic_impressions(spec):
    """-> {"train","valid","test"}: ImpressionData sharing one news table.

    Every user has a topic preference (one-hot at ``focus`` 1, uniform at 0,
    mixed in between). History clicks and the positive candidate follow the
    preference; negatives follow the complementary weights. The planted score
    of a candidate is the user's preference weight for its topic.
    """
    rng = np.random.default_rng([spec.seed, 202])
    tspec = spec.as_token_spec()
    C = spec.num_topics
    topics = rng.integers(0, C, size=spec.n_news)
    lengths = rng.integers(spec.min_len, spec.seq_len + 1, size=spec.n_news)
    seqs = [_sequence(rng, tspec, int(topics[i]), spec.topic_tokens_per_news, int(lengths[i]))
            for i in range(spec.n_news)]
    tok, msk = _pack(seqs, spec.seq_len)
    by_topic = [np.flatnonzero(topics == c) for c in range(C)]
    if any(len(b) == 0 for b in by_topic):
        raise DataError("a topic received no news; raise n_news")

    focus_ppm = int(round(spec.focus * PPM))
    prefs = []
    for _ in range(spec.n_users):
        fav = int(rng.integers(0, C))
        w = np.full(C, (PPM - focus_ppm) // C, dtype=np.int64)
        w[fav] += focus_ppm
        prefs.append(w)

    def pick(c):
        pool = by_topic[c]
        return int(pool[rng.integers(0, len(pool))])

    out = {}
    for split, n in (("train", spec.n_train), ("valid", spec.n_valid), ("test", spec.n_test)):
        samples, oracle = [], []
        for _ in range(n):
            u = int(rng.integers(0, spec.n_users))
            w = prefs[u]
            hist = [pick(_draw_topic(rng, w)) for _ in range(spec.history_len)]
            neg_w = w.max() - w
            if neg_w.sum() == 0:
                neg_w = np.ones(C, dtype=np.int64)
            pos_topic = _draw_topic(rng, w)
            cands = [(pick(pos_topic), 1, pos_topic)]
            for _ in range(spec.negatives):
                t = _draw_topic(rng, neg_w)
                cands.append((pick(t), 0, t))
            order = rng.permutation(len(cands))
            cands = [cands[i] for i in order]
            samples.append(ImpressionSample(hist, [c[0] for c in cands], [c[1] for c in cands]))
            oracle.append([float(w[c[2]]) for c in cands])
        out[split] = ImpressionData(tok, msk, samples, topics, oracle)
    return out


@dataclass
class RetrievalSpec:
    seed: int = 0
    vocab_size: int = 200
    num_topics: int = 4
    query_len: int = 8
    doc_len: int = 16
    min_len: int = 4
    tokens_per_class: int = 8
    topic_tokens: int = 2
    noise: float = 0.0   # probability a label is flipped
    n_train: int = 2000
    n_valid: int = 200
    n_test: int = 500

    def as_token_spec(self, seq_len):
        return SyntheticSpec(seed=self.seed, vocab_size=self.vocab_size, num_classes=self.num_topics,
                             seq_len=seq_len, min_len=self.min_len, tokens_per_class=self.tokens_per_class)


def gen_synthetic_retrieval(spec):
    """Query/document pairs relevant exactly when they share a topic (before noise)."""
    rng = np.random.default_rng([spec.seed, 303])
    qs, ds = spec.as_token_spec(spec.query_len), spec.as_token_spec(spec.doc_len)
    out = {}
    for split, n in (("train", spec.n_train), ("valid", spec.n_valid), ("test", spec.n_test)):
        labels = _bernoulli(rng, 0.5, size=n).astype(np.int64)
        qseq, dseq = [], []
        for i in range(n):
            a = int(rng.integers(0, spec.num_topics))
            b = a if labels[i] else int((a + 1 + rng.integers(0, spec.num_topics - 1)) % spec.num_topics)
            qseq.append(_sequence(rng, qs, a, spec.topic_tokens,
                                  int(rng.integers(spec.min_len, spec.query_len + 1))))
            dseq.append(_sequence(rng, ds, b, spec.topic_tokens,
                                  int(rng.integers(spec.min_len, spec.doc_len + 1))))
        flip = _bernoulli(rng, spec.noise, size=n)
        labels = np.where(flip, 1 - labels, labels)
        qt, qm = _pack(qseq, spec.query_len)
        dt, dm = _pack(dseq, spec.doc_len)
        out[split] = RetrievalData(qt, qm, dt, dm, labels)
    return out
