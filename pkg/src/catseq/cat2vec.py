"""Siamese MLP that embeds one-hot categorical events.

One ReLU layer per categorical field (concatenated for multivariate
events) followed by a shared sigmoid output layer.  Training pulls the
encodings of consecutive events in a sequence together by minimizing the
mean squared distance between adjacent pairs; both pair members go through
the same parameters.  Pairs never cross patient boundaries.

The plain objective admits a collapsed minimizer, so training relies on
the epoch-level convergence rule to stop early.  An optional repulsive
term against randomly drawn events (`negative_weight`, default 0 = off)
is available for robustness studies; encodings live in (0, 1)^N, so the
repulsive term is bounded and cannot diverge.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .syngen import EventDataset

__all__ = ["Cat2VecConfig", "Cat2VecTraining", "Cat2VecParams", "encode",
           "encode_indices", "train", "save_params", "load_params"]

_FORMAT_VERSION = 1


@dataclass(frozen=True)
class Cat2VecConfig:
    """Architecture: one ReLU block per field, one shared sigmoid head."""

    input_dims: tuple[int, ...]
    hidden_dim: int
    encoding_dim: int

    def __post_init__(self):
        if not self.input_dims:
            raise ValueError("at least one categorical field is required")
        if any(d < 1 for d in self.input_dims):
            raise ValueError("field dimensions must be >= 1")
        if self.hidden_dim < 1 or self.encoding_dim < 1:
            raise ValueError("hidden_dim and encoding_dim must be >= 1")


@dataclass
class Cat2VecTraining:
    lr: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 200
    seed: int = 0
    negative_weight: float = 0.0
    rel_tol: float = 1e-4
    patience: int = 5


class Cat2VecParams:
    """Trained weights; immutable once training finishes."""

    def __init__(self, config: Cat2VecConfig, w1s, b1s, w2, b2):
        self.config = config
        self.w1s = w1s
        self.b1s = b1s
        self.w2 = w2
        self.b2 = b2

    def trainable(self) -> list[nc.Tensor]:
        return [*self.w1s, *self.b1s, self.w2, self.b2]

    @classmethod
    def init(cls, config: Cat2VecConfig, rng: np.random.Generator) -> "Cat2VecParams":
        h, n = config.hidden_dim, config.encoding_dim
        w1s, b1s = [], []
        for d in config.input_dims:
            w1s.append(nc.glorot_uniform((d, h), d, h, rng))
            b1s.append(nc.Tensor(np.zeros(h), requires_grad=True))
        joint = h * len(config.input_dims)
        w2 = nc.glorot_uniform((joint, n), joint, n, rng)
        b2 = nc.Tensor(np.zeros(n), requires_grad=True)
        return cls(config, w1s, b1s, w2, b2)


def _forward(xs: list[nc.Tensor], params: Cat2VecParams) -> nc.Tensor:
    hidden = [
        nc.relu(nc.add(nc.matmul(x, w), b))
        for x, w, b in zip(xs, params.w1s, params.b1s)
    ]
    joint = hidden[0] if len(hidden) == 1 else nc.concat(hidden, axis=-1)
    return nc.sigmoid(nc.add(nc.matmul(joint, params.w2), params.b2))


def _one_hot(indices: np.ndarray, dim: int) -> np.ndarray:
    out = np.zeros((len(indices), dim))
    out[np.arange(len(indices)), indices] = 1.0
    return out


def _validate_one_hot(mat: np.ndarray, dim: int, field_no: int) -> np.ndarray:
    mat = np.asarray(mat, dtype=np.float64)
    if mat.ndim == 1:
        mat = mat[None, :]
    if mat.shape[1] != dim:
        raise ValueError(f"field {field_no}: expected width {dim}, got {mat.shape[1]}")
    ones = mat == 1.0
    if not (np.all((mat == 0.0) | ones) and np.all(ones.sum(axis=1) == 1)):
        raise ValueError(f"field {field_no}: rows must be exactly one-hot")
    return mat


def encode(fields, params: Cat2VecParams) -> np.ndarray:
    """Encode one-hot event vectors; returns vectors in (0, 1)^N.

    `fields` is a single array (univariate) or a sequence with one array
    per categorical field; each array is a one-hot vector or a matrix of
    one-hot rows.  Malformed rows (not exactly one hot index) are
    rejected.
    """
    dims = params.config.input_dims
    if isinstance(fields, np.ndarray) or not isinstance(fields, (list, tuple)):
        fields = [fields]
    if len(fields) != len(dims):
        raise ValueError(f"expected {len(dims)} fields, got {len(fields)}")
    mats = [_validate_one_hot(f, d, i) for i, (f, d) in enumerate(zip(fields, dims))]
    squeeze = np.asarray(fields[0]).ndim == 1
    with nc.no_grad():
        out = _forward([nc.Tensor(m) for m in mats], params).data
    return out[0] if squeeze else out


def encode_indices(index_fields: list[np.ndarray], params: Cat2VecParams) -> np.ndarray:
    """Fast path: encode events given per-field integer codes."""
    dims = params.config.input_dims
    if len(index_fields) != len(dims):
        raise ValueError(f"expected {len(dims)} fields, got {len(index_fields)}")
    with nc.no_grad():
        xs = [nc.Tensor(_one_hot(np.asarray(idx), d)) for idx, d in zip(index_fields, dims)]
        return _forward(xs, params).data


def _dataset_fields(dataset: EventDataset, config: Cat2VecConfig) -> list[list[np.ndarray]]:
    """Per-patient list of per-field code arrays, checked against config."""
    multivariate = len(config.input_dims) == 2
    out = []
    for p in dataset:
        if multivariate:
            if p.categories is None:
                raise ValueError(f"patient {p.patient_id} lacks the second categorical field")
            out.append([p.events, p.categories])
        else:
            out.append([p.events])
    return out


def train(dataset: EventDataset, config: Cat2VecConfig,
          training: Cat2VecTraining | None = None) -> tuple[Cat2VecParams, list[float]]:
    """Adam on the adjacent-pair objective until the convergence rule fires.

    Returns the trained parameters and the epoch-mean loss history.  One
    epoch enumerates every adjacent pair of every patient in shuffled
    order.
    """
    training = training or Cat2VecTraining()
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    per_patient = _dataset_fields(dataset, config)
    n_fields = len(config.input_dims)
    left = [[] for _ in range(n_fields)]
    right = [[] for _ in range(n_fields)]
    for fields in per_patient:
        n = len(fields[0])
        if n < 2:
            raise ValueError("every patient sequence must have length >= 2")
        for f in range(n_fields):
            left[f].append(fields[f][:-1])
            right[f].append(fields[f][1:])
    left = [np.concatenate(parts) for parts in left]
    right = [np.concatenate(parts) for parts in right]
    n_pairs = len(left[0])

    rng = np.random.default_rng(training.seed)
    params = Cat2VecParams.init(config, rng)
    opt = nc.Adam(params.trainable(), lr=training.lr)
    rule = nc.ConvergenceRule(training.rel_tol, training.patience)
    history: list[float] = []
    dims = config.input_dims

    for _ in range(training.max_epochs):
        order = rng.permutation(n_pairs)
        batch_losses = []
        for start in range(0, n_pairs, training.batch_size):
            sel = order[start:start + training.batch_size]
            xa = [nc.Tensor(_one_hot(left[f][sel], dims[f])) for f in range(n_fields)]
            xb = [nc.Tensor(_one_hot(right[f][sel], dims[f])) for f in range(n_fields)]
            ya = _forward(xa, params)
            yb = _forward(xb, params)
            loss = nc.mse(ya, yb)
            if training.negative_weight > 0.0:
                shuffled = rng.permutation(len(sel))
                xn = [nc.Tensor(_one_hot(right[f][sel][shuffled], dims[f]))
                      for f in range(n_fields)]
                yn = _forward(xn, params)
                loss = nc.add(loss, nc.scale(nc.mse(ya, yn), -training.negative_weight))
            opt.zero_grad()
            nc.backward(loss)
            opt.step()
            batch_losses.append(loss.item())
        epoch_loss = float(np.mean(batch_losses))
        history.append(epoch_loss)
        if rule.update(epoch_loss):
            break
    return params, history


def save_params(params: Cat2VecParams, path: str | Path) -> None:
    payload = {
        "format_version": _FORMAT_VERSION,
        "kind": "cat2vec",
        "config": {
            "input_dims": list(params.config.input_dims),
            "hidden_dim": params.config.hidden_dim,
            "encoding_dim": params.config.encoding_dim,
        },
        "weights": {
            "w1s": [w.data.tolist() for w in params.w1s],
            "b1s": [b.data.tolist() for b in params.b1s],
            "w2": params.w2.data.tolist(),
            "b2": params.b2.data.tolist(),
        },
    }
    Path(path).write_text(json.dumps(payload))


def load_params(path: str | Path) -> Cat2VecParams:
    payload = json.loads(Path(path).read_text())
    if payload.get("kind") != "cat2vec" or payload.get("format_version") != _FORMAT_VERSION:
        raise ValueError(f"not a cat2vec params artifact: {path}")
    cfg = Cat2VecConfig(
        input_dims=tuple(payload["config"]["input_dims"]),
        hidden_dim=payload["config"]["hidden_dim"],
        encoding_dim=payload["config"]["encoding_dim"],
    )
    w = payload["weights"]
    params = Cat2VecParams(
        cfg,
        [nc.Tensor(np.asarray(m)) for m in w["w1s"]],
        [nc.Tensor(np.asarray(m)) for m in w["b1s"]],
        nc.Tensor(np.asarray(w["w2"])),
        nc.Tensor(np.asarray(w["b2"])),
    )
    h, n = cfg.hidden_dim, cfg.encoding_dim
    for d, w1, b1 in zip(cfg.input_dims, params.w1s, params.b1s):
        if w1.shape != (d, h) or b1.shape != (h,):
            raise ValueError("first-layer weight shapes inconsistent with config")
    joint = h * len(cfg.input_dims)
    if params.w2.shape != (joint, n) or params.b2.shape != (n,):
        raise ValueError("output-layer weight shapes inconsistent with config")
    return params
