"""Synthetic categorical event sequences with latent treatment groups.

Each group owns a random permutation of the vocabulary and emits events
from a Zipf law pushed through that permutation.  The active group holds
between consecutive events and, with probability alpha, is resampled
uniformly (the fresh draw may return the incumbent group, so the true mean
run length is G / (alpha * (G - 1)), not 1/alpha).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "SynthConfig",
    "GroupModel",
    "Patient",
    "EventDataset",
    "zipf_pmf",
    "build_group_models",
    "next_group",
    "generate_dataset",
    "save_jsonl",
    "load_jsonl",
]


@dataclass(frozen=True)
class SynthConfig:
    """Parameters of the generative model."""

    vocab_size: int
    group_count: int
    alpha: float
    betas: tuple[float, ...]
    patients: int
    seq_len: int
    seed: int

    def __post_init__(self):
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be >= 1")
        if self.group_count < 1:
            raise ValueError("group_count must be >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if len(self.betas) != self.group_count:
            raise ValueError("betas must have one entry per group")
        if any(b <= 0 for b in self.betas):
            raise ValueError("betas must be positive")
        if self.patients < 1 or self.seq_len < 1:
            raise ValueError("patients and seq_len must be >= 1")

    @classmethod
    def uniform_beta(cls, vocab_size: int, group_count: int, alpha: float,
                     beta: float, patients: int, seq_len: int, seed: int) -> "SynthConfig":
        """Convenience constructor with one shared beta for all groups."""
        return cls(vocab_size, group_count, alpha, (float(beta),) * group_count,
                   patients, seq_len, seed)


@dataclass
class GroupModel:
    """One group's event law: a vocabulary permutation and a Zipf CDF.

    Sampling draws a Zipf rank by inverse CDF and maps it through the
    permutation: event = perm[rank].
    """

    perm: np.ndarray
    cdf: np.ndarray

    def event_pmf(self) -> np.ndarray:
        """Analytic event-code distribution induced by this group."""
        pmf = np.diff(self.cdf, prepend=0.0)
        out = np.zeros_like(pmf)
        out[self.perm] = pmf
        return out

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        u = rng.random(size)
        ranks = np.searchsorted(self.cdf, u, side="right")
        np.clip(ranks, 0, len(self.cdf) - 1, out=ranks)
        return self.perm[ranks]


@dataclass
class Patient:
    patient_id: str
    events: np.ndarray
    categories: np.ndarray | None = None
    groups: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.events)


@dataclass
class EventDataset:
    """Ordered event sequences per patient, with optional ground truth."""

    patients: list[Patient]
    vocab_size: int
    group_count: int | None = None
    category_vocab_size: int | None = None

    def __len__(self) -> int:
        return len(self.patients)

    def __iter__(self):
        return iter(self.patients)

    def total_events(self) -> int:
        return sum(len(p) for p in self.patients)


def zipf_pmf(beta: float, size: int) -> np.ndarray:
    """Probability vector with pmf[k] proportional to (k+1)^(-beta)."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    if size < 1:
        raise ValueError("size must be >= 1")
    ranks = np.arange(1, size + 1, dtype=np.float64)
    weights = ranks ** (-float(beta))
    return weights / weights.sum()


def build_group_models(config: SynthConfig, rng: np.random.Generator) -> list[GroupModel]:
    """One model per group: uniform random permutation + Zipf CDF."""
    models = []
    for g in range(config.group_count):
        perm = rng.permutation(config.vocab_size)
        cdf = np.cumsum(zipf_pmf(config.betas[g], config.vocab_size))
        models.append(GroupModel(perm=perm, cdf=cdf))
    return models


def next_group(prev: int, config: SynthConfig, rng: np.random.Generator) -> int:
    """With probability alpha, resample uniformly (may repeat); else hold."""
    if not 0 <= prev < config.group_count:
        raise ValueError("prev group out of range")
    if rng.random() < config.alpha:
        return int(rng.integers(0, config.group_count))
    return prev


def _patient_rng(seed: int, patient_index: int) -> np.random.Generator:
    return np.random.default_rng([seed, patient_index])


def _group_sequence(config: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """Vectorized group chain: switch tests first, then fresh draws."""
    n = config.seq_len
    switch = np.empty(n, dtype=bool)
    switch[0] = True  # g_1 is always a fresh uniform draw
    if n > 1:
        switch[1:] = rng.random(n - 1) < config.alpha
    fresh = rng.integers(0, config.group_count, size=int(switch.sum()))
    groups = np.empty(n, dtype=np.int64)
    slots = np.cumsum(switch) - 1
    groups[:] = fresh[slots]
    return groups


def generate_dataset(config: SynthConfig) -> EventDataset:
    """Sample the full dataset; deterministic for a fixed seed.

    Group models come from the stream seeded by (seed,); patient i's events
    come from the stream seeded by (seed, i), so patients are independent.
    """
    models = build_group_models(config, np.random.default_rng([config.seed]))
    patients = []
    for i in range(config.patients):
        rng = _patient_rng(config.seed, i)
        groups = _group_sequence(config, rng)
        u = rng.random(config.seq_len)
        events = np.empty(config.seq_len, dtype=np.int64)
        for g in np.unique(groups):
            idx = np.nonzero(groups == g)[0]
            model = models[int(g)]
            ranks = np.searchsorted(model.cdf, u[idx], side="right")
            np.clip(ranks, 0, config.vocab_size - 1, out=ranks)
            events[idx] = model.perm[ranks]
        patients.append(Patient(patient_id=f"p{i:05d}", events=events, groups=groups))
    return EventDataset(patients=patients, vocab_size=config.vocab_size,
                        group_count=config.group_count)


def save_jsonl(dataset: EventDataset, path: str | Path) -> None:
    """One JSON object per patient: patient_id, events, [categories], [groups]."""
    path = Path(path)
    with path.open("w") as fh:
        for p in dataset.patients:
            rec: dict = {"patient_id": p.patient_id, "events": p.events.tolist()}
            if p.categories is not None:
                rec["categories"] = p.categories.tolist()
            if p.groups is not None:
                rec["groups"] = p.groups.tolist()
            fh.write(json.dumps(rec) + "\n")


def load_jsonl(path: str | Path) -> EventDataset:
    patients = []
    max_event = -1
    max_cat = -1
    max_group = -1
    with Path(path).open() as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            events = np.asarray(rec["events"], dtype=np.int64)
            cats = rec.get("categories")
            groups = rec.get("groups")
            categories = np.asarray(cats, dtype=np.int64) if cats is not None else None
            group_arr = np.asarray(groups, dtype=np.int64) if groups is not None else None
            if group_arr is not None and len(group_arr) != len(events):
                raise ValueError(f"patient {rec['patient_id']}: groups/events length mismatch")
            if categories is not None and len(categories) != len(events):
                raise ValueError(f"patient {rec['patient_id']}: categories/events length mismatch")
            patients.append(Patient(rec["patient_id"], events, categories, group_arr))
            if len(events):
                max_event = max(max_event, int(events.max()))
            if categories is not None and len(categories):
                max_cat = max(max_cat, int(categories.max()))
            if group_arr is not None and len(group_arr):
                max_group = max(max_group, int(group_arr.max()))
    return EventDataset(
        patients=patients,
        vocab_size=max_event + 1,
        group_count=(max_group + 1) if max_group >= 0 else None,
        category_vocab_size=(max_cat + 1) if max_cat >= 0 else None,
    )
