"""Sliding-window topic-model baseline.

Event sequences are cut into dense overlapping windows (stride 1); each
window becomes a bag-of-events document.  Topics are inferred by collapsed
Gibbs sampling with symmetric Dirichlet priors, and the model is read off
the post-burn-in average of the count matrices.  Window labels are the
argmax topic per window; event labels are the modal label over all windows
covering the event (ties resolve to the lowest label).

The Gibbs inner loop is JIT-compiled (numba) with an explicit splitmix64
stream so runs are reproducible for a fixed seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit

from .dataio import LabelAssignment, NOISE_LABEL
from .syngen import EventDataset

__all__ = ["WindowCorpus", "LdaModel", "make_windows", "fit",
           "window_topics", "event_labels", "window_level_truth",
           "save_model", "load_model"]


@dataclass
class WindowCorpus:
    """Sliding windows over every sufficiently long patient sequence."""

    tokens: np.ndarray          # (windows, window_len) event codes
    patient_index: np.ndarray   # (windows,) index into patient_ids
    starts: np.ndarray          # (windows,) start offset within the patient
    window_len: int
    vocab_size: int
    patient_ids: list[str]      # all patients, including skipped ones
    patient_lengths: np.ndarray
    skipped: int                # patients shorter than the window

    def __len__(self) -> int:
        return len(self.tokens)

    def count_matrix(self) -> np.ndarray:
        """Dense (windows, vocab) event-frequency matrix."""
        counts = np.zeros((len(self.tokens), self.vocab_size), dtype=np.int64)
        rows = np.repeat(np.arange(len(self.tokens)), self.window_len)
        np.add.at(counts, (rows, self.tokens.reshape(-1)), 1)
        return counts


def make_windows(dataset: EventDataset, window_len: int = 32,
                 stride: int = 1) -> WindowCorpus:
    """One window per valid start offset per patient; short patients skipped."""
    if window_len < 1 or stride < 1:
        raise ValueError("window_len and stride must be >= 1")
    tokens = []
    patient_index = []
    starts = []
    skipped = 0
    lengths = []
    for idx, p in enumerate(dataset):
        n = len(p)
        lengths.append(n)
        if n < window_len:
            skipped += 1
            continue
        for s in range(0, n - window_len + 1, stride):
            tokens.append(p.events[s:s + window_len])
            patient_index.append(idx)
            starts.append(s)
    if not tokens:
        raise ValueError("no sequence is long enough for the window length")
    return WindowCorpus(
        tokens=np.asarray(tokens, dtype=np.int32),
        patient_index=np.asarray(patient_index, dtype=np.int32),
        starts=np.asarray(starts, dtype=np.int64),
        window_len=window_len,
        vocab_size=dataset.vocab_size,
        patient_ids=[p.patient_id for p in dataset],
        patient_lengths=np.asarray(lengths, dtype=np.int64),
        skipped=skipped,
    )


@dataclass
class LdaModel:
    topic_count: int
    topic_word: np.ndarray   # (K, vocab), rows sum to 1
    doc_topic: np.ndarray    # (windows, K), rows sum to 1
    doc_topic_prior: float
    topic_word_prior: float
    iterations: int
    burn_in: int
    seed: int


@njit(cache=True)
def _gibbs(tokens, doc_of, n_docs, topic_count, vocab_size,
           alpha, beta, iterations, burn_in, seed):
    n = tokens.shape[0]
    state = np.uint64(seed) ^ np.uint64(0x9E3779B97F4A7C15)

    def _next(state):
        state = state + np.uint64(0x9E3779B97F4A7C15)
        z = state
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        z = z ^ (z >> np.uint64(31))
        return state, (z >> np.uint64(11)) * (1.0 / 9007199254740992.0)

    z_assign = np.empty(n, dtype=np.int32)
    n_dk = np.zeros((n_docs, topic_count), dtype=np.int64)
    n_kw = np.zeros((topic_count, vocab_size), dtype=np.int64)
    n_k = np.zeros(topic_count, dtype=np.int64)
    for i in range(n):
        state, u = _next(state)
        k = min(int(u * topic_count), topic_count - 1)
        z_assign[i] = k
        n_dk[doc_of[i], k] += 1
        n_kw[k, tokens[i]] += 1
        n_k[k] += 1

    acc_dk = np.zeros((n_docs, topic_count), dtype=np.float64)
    acc_kw = np.zeros((topic_count, vocab_size), dtype=np.float64)
    samples = 0
    p = np.empty(topic_count, dtype=np.float64)
    vb = vocab_size * beta
    for it in range(iterations):
        for i in range(n):
            d = doc_of[i]
            w = tokens[i]
            k = z_assign[i]
            n_dk[d, k] -= 1
            n_kw[k, w] -= 1
            n_k[k] -= 1
            total = 0.0
            for kk in range(topic_count):
                val = (n_dk[d, kk] + alpha) * (n_kw[kk, w] + beta) / (n_k[kk] + vb)
                p[kk] = val
                total += val
            state, u = _next(state)
            target = u * total
            run = 0.0
            k = topic_count - 1
            for kk in range(topic_count):
                run += p[kk]
                if target < run:
                    k = kk
                    break
            z_assign[i] = k
            n_dk[d, k] += 1
            n_kw[k, w] += 1
            n_k[k] += 1
        if it >= burn_in:
            acc_dk += n_dk
            acc_kw += n_kw
            samples += 1
    return z_assign, acc_dk, acc_kw, samples


def fit(corpus: WindowCorpus, topic_count: int, *, doc_topic_prior: float | None = None,
        topic_word_prior: float = 0.1, iterations: int = 1000, burn_in: int = 200,
        seed: int = 0) -> LdaModel:
    """Collapsed Gibbs sampling; the model averages post-burn-in counts."""
    if topic_count < 1:
        raise ValueError("topic_count must be >= 1")
    if len(corpus) == 0:
        raise ValueError("corpus is empty")
    if not 0 <= burn_in < iterations:
        raise ValueError("need 0 <= burn_in < iterations")
    alpha = (1.0 / topic_count) if doc_topic_prior is None else float(doc_topic_prior)
    if alpha <= 0 or topic_word_prior <= 0:
        raise ValueError("priors must be positive")

    n_docs = len(corpus)
    doc_of = np.repeat(np.arange(n_docs, dtype=np.int32), corpus.window_len)
    flat = corpus.tokens.reshape(-1)
    _, acc_dk, acc_kw, samples = _gibbs(
        flat, doc_of, n_docs, topic_count, corpus.vocab_size,
        alpha, float(topic_word_prior), iterations, burn_in, seed,
    )
    mean_dk = acc_dk / samples
    mean_kw = acc_kw / samples
    doc_topic = mean_dk + alpha
    doc_topic /= doc_topic.sum(axis=1, keepdims=True)
    topic_word = mean_kw + topic_word_prior
    topic_word /= topic_word.sum(axis=1, keepdims=True)
    return LdaModel(
        topic_count=topic_count,
        topic_word=topic_word,
        doc_topic=doc_topic,
        doc_topic_prior=alpha,
        topic_word_prior=float(topic_word_prior),
        iterations=iterations,
        burn_in=burn_in,
        seed=seed,
    )


def window_topics(model: LdaModel) -> np.ndarray:
    """Argmax topic per window; ties resolve to the lowest topic index."""
    return np.argmax(model.doc_topic, axis=1).astype(np.int64)


def _patient_offsets(corpus: WindowCorpus) -> np.ndarray:
    return np.concatenate([[0], np.cumsum(corpus.patient_lengths)])


def event_labels(corpus: WindowCorpus, window_labels: np.ndarray) -> LabelAssignment:
    """Modal covering-window label per event; uncovered events are noise."""
    window_labels = np.asarray(window_labels, dtype=np.int64)
    if len(window_labels) != len(corpus):
        raise ValueError("one label per window is required")
    n_labels = int(window_labels.max()) + 1 if len(window_labels) else 0
    offsets = _patient_offsets(corpus)
    total = int(offsets[-1])
    votes = np.zeros((total, n_labels), dtype=np.int32)
    for w in range(len(corpus)):
        base = offsets[corpus.patient_index[w]] + corpus.starts[w]
        votes[base:base + corpus.window_len, window_labels[w]] += 1
    covered = votes.sum(axis=1) > 0
    labels = np.where(covered, np.argmax(votes, axis=1), NOISE_LABEL).astype(np.int64)

    pids: list[str] = []
    positions = np.empty(total, dtype=np.int64)
    for idx, pid in enumerate(corpus.patient_ids):
        n = corpus.patient_lengths[idx]
        pids.extend([pid] * int(n))
        positions[offsets[idx]:offsets[idx + 1]] = np.arange(n)
    return LabelAssignment(pids, positions, labels)


def window_level_truth(corpus: WindowCorpus, groups_per_patient: list[np.ndarray]) -> np.ndarray:
    """Majority true group per window; ties resolve to the lowest group id."""
    if len(groups_per_patient) != len(corpus.patient_ids):
        raise ValueError("need one group array per patient")
    out = np.empty(len(corpus), dtype=np.int64)
    for w in range(len(corpus)):
        g = groups_per_patient[corpus.patient_index[w]]
        s = corpus.starts[w]
        window = g[s:s + corpus.window_len]
        out[w] = np.argmax(np.bincount(window))
    return out


def save_model(model: LdaModel, path: str | Path) -> None:
    payload = {
        "topic_count": model.topic_count,
        "topic_word": model.topic_word.tolist(),
        "doc_topic": model.doc_topic.tolist(),
        "doc_topic_prior": model.doc_topic_prior,
        "topic_word_prior": model.topic_word_prior,
        "iterations": model.iterations,
        "burn_in": model.burn_in,
        "seed": model.seed,
    }
    Path(path).write_text(json.dumps(payload))


def load_model(path: str | Path) -> LdaModel:
    payload = json.loads(Path(path).read_text())
    return LdaModel(
        topic_count=payload["topic_count"],
        topic_word=np.asarray(payload["topic_word"]),
        doc_topic=np.asarray(payload["doc_topic"]),
        doc_topic_prior=payload["doc_topic_prior"],
        topic_word_prior=payload["topic_word_prior"],
        iterations=payload["iterations"],
        burn_in=payload["burn_in"],
        seed=payload["seed"],
    )
