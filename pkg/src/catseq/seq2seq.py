"""Transformer autoencoder over fixed-length windows of encoded events.

Encoder and decoder are pre-norm residual stacks of multi-head
self-attention and position-wise feed-forward blocks; no masking is
applied anywhere.  The per-position outputs of the encoder are the
event-level representations this module exists to produce.

By default the decoder's target-side input is the positional table alone
(zero content), so everything the decoder reproduces must flow through
the encoder output; feeding the unmasked input to the decoder instead
(`literal_decoder_input`) would let it copy and is kept only as an
alternate mode.

Sequences shorter than the window length are dropped (callers receive the
count); a tail remainder under a coarse stride is covered by one final
window aligned to the sequence end.  When windows overlap, an event's
representation is the average of its per-window encoder outputs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numcore as nc
from .cat2vec import Cat2VecParams, encode_indices
from .dataio import EncodedEvents
from .syngen import EventDataset

__all__ = [
    "TransformerConfig",
    "Seq2SeqTraining",
    "Seq2SeqParams",
    "positional_encoding",
    "encode_window",
    "reconstruct",
    "reconstruction_loss",
    "train",
    "extract_training_windows",
    "event_representations",
    "save_params",
    "load_params",
]

_FORMAT_VERSION = 1


@dataclass(frozen=True)
class TransformerConfig:
    d_model: int
    heads: int
    window_len: int
    ff_dim: int
    encoder_layers: int
    decoder_layers: int

    def __post_init__(self):
        if min(self.d_model, self.heads, self.window_len, self.ff_dim,
               self.encoder_layers, self.decoder_layers) < 1:
            raise ValueError("all transformer dimensions must be >= 1")
        if self.d_model % self.heads != 0:
            raise ValueError("d_model must be divisible by the head count")
        if self.d_model % 2 != 0:
            raise ValueError("d_model must be even for the sinusoidal table")


@dataclass
class Seq2SeqTraining:
    lr: float = 1e-3
    batch_size: int = 16
    max_epochs: int = 200
    seed: int = 0
    literal_decoder_input: bool = False
    rel_tol: float = 1e-4
    patience: int = 5


def positional_encoding(length: int, d_model: int) -> np.ndarray:
    """Sinusoidal table: sin on even columns, cos on odd, shared frequency."""
    if d_model % 2 != 0:
        raise ValueError("d_model must be even")
    pos = np.arange(length, dtype=np.float64)[:, None]
    freq = np.exp(-math.log(10000.0) * np.arange(0, d_model, 2) / d_model)
    table = np.zeros((length, d_model))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq)
    return table


class _Attention:
    def __init__(self, wq, wk, wv, wo, bo):
        self.wq, self.wk, self.wv = wq, wk, wv
        self.wo, self.bo = wo, bo

    @classmethod
    def init(cls, d: int, heads: int, rng) -> "_Attention":
        dk = d // heads
        mk = lambda: nc.glorot_uniform((d, dk), d, dk, rng)
        return cls(
            [mk() for _ in range(heads)],
            [mk() for _ in range(heads)],
            [mk() for _ in range(heads)],
            nc.glorot_uniform((d, d), d, d, rng),
            nc.Tensor(np.zeros(d), requires_grad=True),
        )

    def tensors(self):
        return [*self.wq, *self.wk, *self.wv, self.wo, self.bo]


class _FeedForward:
    def __init__(self, w1, b1, w2, b2):
        self.w1, self.b1, self.w2, self.b2 = w1, b1, w2, b2

    @classmethod
    def init(cls, d: int, ff: int, rng) -> "_FeedForward":
        return cls(
            nc.glorot_uniform((d, ff), d, ff, rng),
            nc.Tensor(np.zeros(ff), requires_grad=True),
            nc.glorot_uniform((ff, d), ff, d, rng),
            nc.Tensor(np.zeros(d), requires_grad=True),
        )

    def tensors(self):
        return [self.w1, self.b1, self.w2, self.b2]


class _Norm:
    def __init__(self, gain, bias):
        self.gain, self.bias = gain, bias

    @classmethod
    def init(cls, d: int) -> "_Norm":
        return cls(nc.Tensor(np.ones(d), requires_grad=True),
                   nc.Tensor(np.zeros(d), requires_grad=True))

    def tensors(self):
        return [self.gain, self.bias]


class _EncoderLayer:
    def __init__(self, ln1, attn, ln2, ff):
        self.ln1, self.attn, self.ln2, self.ff = ln1, attn, ln2, ff

    @classmethod
    def init(cls, cfg: TransformerConfig, rng) -> "_EncoderLayer":
        return cls(_Norm.init(cfg.d_model), _Attention.init(cfg.d_model, cfg.heads, rng),
                   _Norm.init(cfg.d_model), _FeedForward.init(cfg.d_model, cfg.ff_dim, rng))

    def tensors(self):
        return [*self.ln1.tensors(), *self.attn.tensors(),
                *self.ln2.tensors(), *self.ff.tensors()]


class _DecoderLayer:
    def __init__(self, ln1, self_attn, ln2, cross_attn, ln3, ff):
        self.ln1, self.self_attn = ln1, self_attn
        self.ln2, self.cross_attn = ln2, cross_attn
        self.ln3, self.ff = ln3, ff

    @classmethod
    def init(cls, cfg: TransformerConfig, rng) -> "_DecoderLayer":
        d, h = cfg.d_model, cfg.heads
        return cls(_Norm.init(d), _Attention.init(d, h, rng),
                   _Norm.init(d), _Attention.init(d, h, rng),
                   _Norm.init(d), _FeedForward.init(d, cfg.ff_dim, rng))

    def tensors(self):
        return [*self.ln1.tensors(), *self.self_attn.tensors(),
                *self.ln2.tensors(), *self.cross_attn.tensors(),
                *self.ln3.tensors(), *self.ff.tensors()]


class Seq2SeqParams:
    """All trainable weights plus the fixed positional table."""

    def __init__(self, config, encoder, enc_norm, decoder, dec_norm, out_w, out_b):
        self.config = config
        self.pos_table = positional_encoding(config.window_len, config.d_model)
        self.encoder = encoder
        self.enc_norm = enc_norm
        self.decoder = decoder
        self.dec_norm = dec_norm
        self.out_w = out_w
        self.out_b = out_b

    @classmethod
    def init(cls, config: TransformerConfig, rng: np.random.Generator) -> "Seq2SeqParams":
        d = config.d_model
        return cls(
            config,
            [_EncoderLayer.init(config, rng) for _ in range(config.encoder_layers)],
            _Norm.init(d),
            [_DecoderLayer.init(config, rng) for _ in range(config.decoder_layers)],
            _Norm.init(d),
            nc.glorot_uniform((d, d), d, d, rng),
            nc.Tensor(np.zeros(d), requires_grad=True),
        )

    def trainable(self) -> list[nc.Tensor]:
        out = []
        for layer in self.encoder:
            out.extend(layer.tensors())
        out.extend(self.enc_norm.tensors())
        for layer in self.decoder:
            out.extend(layer.tensors())
        out.extend(self.dec_norm.tensors())
        out.extend([self.out_w, self.out_b])
        return out


def _attention_block(q_in, kv_in, attn: _Attention, trace):
    dk = attn.wq[0].shape[1]
    inv = 1.0 / math.sqrt(dk)
    heads = []
    for wq, wk, wv in zip(attn.wq, attn.wk, attn.wv):
        q = nc.matmul(q_in, wq)
        k = nc.matmul(kv_in, wk)
        v = nc.matmul(kv_in, wv)
        probs = nc.softmax_rows(nc.scale(nc.matmul(q, nc.transpose(k)), inv))
        if trace is not None:
            trace.append(probs.data)
        heads.append(nc.matmul(probs, v))
    joined = heads[0] if len(heads) == 1 else nc.concat(heads, axis=-1)
    return nc.add(nc.matmul(joined, attn.wo), attn.bo)


def _feed_forward_block(x, ff: _FeedForward):
    hidden = nc.relu(nc.add(nc.matmul(x, ff.w1), ff.b1))
    return nc.add(nc.matmul(hidden, ff.w2), ff.b2)


def _encoder_forward(x, params: Seq2SeqParams, trace=None):
    for layer in params.encoder:
        normed = nc.layer_norm(x, layer.ln1.gain, layer.ln1.bias)
        x = nc.add(x, _attention_block(normed, normed, layer.attn, trace))
        normed = nc.layer_norm(x, layer.ln2.gain, layer.ln2.bias)
        x = nc.add(x, _feed_forward_block(normed, layer.ff))
    return nc.layer_norm(x, params.enc_norm.gain, params.enc_norm.bias)


def _decoder_forward(target, memory, params: Seq2SeqParams, trace=None):
    x = target
    for layer in params.decoder:
        normed = nc.layer_norm(x, layer.ln1.gain, layer.ln1.bias)
        x = nc.add(x, _attention_block(normed, normed, layer.self_attn, trace))
        normed = nc.layer_norm(x, layer.ln2.gain, layer.ln2.bias)
        x = nc.add(x, _attention_block(normed, memory, layer.cross_attn, trace))
        normed = nc.layer_norm(x, layer.ln3.gain, layer.ln3.bias)
        x = nc.add(x, _feed_forward_block(normed, layer.ff))
    x = nc.layer_norm(x, params.dec_norm.gain, params.dec_norm.bias)
    return nc.add(nc.matmul(x, params.out_w), params.out_b)


def _decoder_target(windows: nc.Tensor, params: Seq2SeqParams, literal: bool):
    pe = params.pos_table
    if literal:
        return nc.add(windows, nc.Tensor(pe))
    shape = windows.shape[:-2] + pe.shape
    return nc.Tensor(np.broadcast_to(pe, shape).copy())


def _check_window_shape(window: np.ndarray, cfg: TransformerConfig) -> np.ndarray:
    window = np.asarray(window, dtype=np.float64)
    if window.ndim == 2:
        window = window[None]
    if window.ndim != 3 or window.shape[1] != cfg.window_len or window.shape[2] != cfg.d_model:
        raise ValueError(
            f"expected windows of shape ({cfg.window_len}, {cfg.d_model}), got {window.shape}"
        )
    return window


def encode_window(window, params: Seq2SeqParams, *, use_positional: bool = True,
                  collect_attention: bool = False):
    """Per-position encoder outputs for one window or a batch of windows.

    `use_positional=False` zeroes the positional table, which makes the
    encoder exactly permutation-equivariant (useful for testing).
    """
    batch = _check_window_shape(window, params.config)
    squeeze = np.asarray(window).ndim == 2
    trace = [] if collect_attention else None
    with nc.no_grad():
        x = nc.Tensor(batch)
        if use_positional:
            x = nc.add(x, nc.Tensor(params.pos_table))
        omega = _encoder_forward(x, params, trace).data
    if squeeze:
        omega = omega[0]
        if trace is not None:
            trace = [t[0] for t in trace]
    return (omega, trace) if collect_attention else omega


def reconstruct(omega, params: Seq2SeqParams, *, window=None,
                literal_decoder_input: bool = False) -> np.ndarray:
    """Decode encoder outputs back to the input space.

    In literal mode the original `window` must be supplied as the
    decoder's target-side input.
    """
    batch = _check_window_shape(omega, params.config)
    squeeze = np.asarray(omega).ndim == 2
    with nc.no_grad():
        memory = nc.Tensor(batch)
        if literal_decoder_input:
            if window is None:
                raise ValueError("literal decoder input requires the original window")
            target = _decoder_target(nc.Tensor(_check_window_shape(window, params.config)),
                                     params, literal=True)
        else:
            target = _decoder_target(memory, params, literal=False)
        out = _decoder_forward(target, memory, params).data
    return out[0] if squeeze else out


def _autoencode_loss(batch: np.ndarray, params: Seq2SeqParams, literal: bool):
    y = nc.Tensor(batch)
    x = nc.add(y, nc.Tensor(params.pos_table))
    omega = _encoder_forward(x, params)
    target = _decoder_target(y, params, literal)
    yhat = _decoder_forward(target, omega, params)
    return nc.mse(yhat, y)


def reconstruction_loss(windows, params: Seq2SeqParams,
                        literal_decoder_input: bool = False) -> float:
    """Mean reconstruction MSE of a window corpus under fixed params."""
    batch = _check_window_shape(windows, params.config)
    with nc.no_grad():
        return _autoencode_loss(batch, params, literal_decoder_input).item()


def train(windows, config: TransformerConfig,
          training: Seq2SeqTraining | None = None) -> tuple[Seq2SeqParams, list[float]]:
    """Adam on reconstruction MSE until the convergence rule fires."""
    training = training or Seq2SeqTraining()
    corpus = np.asarray(windows, dtype=np.float64)
    if corpus.ndim != 3 or len(corpus) == 0:
        raise ValueError("training corpus must be a non-empty (n, L, d) array")
    if corpus.shape[1] != config.window_len or corpus.shape[2] != config.d_model:
        raise ValueError(
            f"corpus windows {corpus.shape[1:]} do not match config "
            f"({config.window_len}, {config.d_model})"
        )
    rng = np.random.default_rng(training.seed)
    params = Seq2SeqParams.init(config, rng)
    opt = nc.Adam(params.trainable(), lr=training.lr)
    rule = nc.ConvergenceRule(training.rel_tol, training.patience)
    history: list[float] = []
    n = len(corpus)
    for _ in range(training.max_epochs):
        order = rng.permutation(n)
        batch_losses = []
        for start in range(0, n, training.batch_size):
            batch = corpus[order[start:start + training.batch_size]]
            loss = _autoencode_loss(batch, params, training.literal_decoder_input)
            opt.zero_grad()
            nc.backward(loss)
            opt.step()
            batch_losses.append(loss.item())
        epoch_loss = float(np.mean(batch_losses))
        history.append(epoch_loss)
        if rule.update(epoch_loss):
            break
    return params, history


def _window_starts(n: int, window_len: int, stride: int) -> list[int]:
    """Start offsets covering the sequence; the tail gets one end-aligned window."""
    starts = list(range(0, n - window_len + 1, stride))
    if starts and starts[-1] != n - window_len:
        starts.append(n - window_len)
    return starts


def extract_training_windows(per_patient_encodings: list[np.ndarray], window_len: int,
                             stride: int | None = None) -> tuple[np.ndarray, int]:
    """Cut encoded sequences into training windows.

    Returns (windows, skipped) where `skipped` counts sequences shorter
    than the window length.  Default stride is the window length
    (non-overlapping, plus the end-aligned tail window).
    """
    stride = window_len if stride is None else stride
    if not 1 <= stride <= window_len:
        raise ValueError("stride must lie in [1, window_len]")
    chunks = []
    skipped = 0
    for enc in per_patient_encodings:
        n = len(enc)
        if n < window_len:
            skipped += 1
            continue
        for s in _window_starts(n, window_len, stride):
            chunks.append(enc[s:s + window_len])
    if not chunks:
        raise ValueError("no sequence is long enough for the window length")
    return np.stack(chunks), skipped


def event_representations(dataset: EventDataset, c2v_params: Cat2VecParams,
                          s2s_params: Seq2SeqParams, stride: int = 1,
                          batch_windows: int = 128) -> tuple[EncodedEvents, int]:
    """Per-event encoder outputs, averaged over all covering windows.

    Windows slide with the given stride (end-aligned tail window
    included); each covered event's vector is the mean of its positional
    encoder outputs.  Sequences shorter than the window are skipped and
    counted in the second return value.
    """
    cfg = s2s_params.config
    L = cfg.window_len
    if not 1 <= stride <= L:
        raise ValueError("stride must lie in [1, window_len]")
    multivariate = len(c2v_params.config.input_dims) == 2
    pids: list[str] = []
    positions: list[np.ndarray] = []
    vectors: list[np.ndarray] = []
    skipped = 0
    for p in dataset:
        n = len(p)
        if n < L:
            skipped += 1
            continue
        fields = [p.events, p.categories] if multivariate else [p.events]
        enc = encode_indices(fields, c2v_params)
        starts = _window_starts(n, L, stride)
        sums = np.zeros((n, cfg.d_model))
        counts = np.zeros(n)
        for chunk_start in range(0, len(starts), batch_windows):
            chunk = starts[chunk_start:chunk_start + batch_windows]
            batch = np.stack([enc[s:s + L] for s in chunk])
            omega = encode_window(batch, s2s_params)
            for s, rows in zip(chunk, omega):
                sums[s:s + L] += rows
                counts[s:s + L] += 1
        covered = counts > 0
        if not covered.all():
            raise RuntimeError("window starts failed to cover every event")
        vectors.append(sums / counts[:, None])
        positions.append(np.arange(n, dtype=np.int64))
        pids.extend([p.patient_id] * n)
    if not vectors:
        raise ValueError("no sequence is long enough for the window length")
    encoded = EncodedEvents(pids, np.concatenate(positions), np.vstack(vectors))
    return encoded, skipped


def save_params(params: Seq2SeqParams, path: str | Path) -> None:
    def dump(tensors):
        return [t.data.tolist() for t in tensors]

    payload = {
        "format_version": _FORMAT_VERSION,
        "kind": "seq2seq",
        "config": {
            "d_model": params.config.d_model,
            "heads": params.config.heads,
            "window_len": params.config.window_len,
            "ff_dim": params.config.ff_dim,
            "encoder_layers": params.config.encoder_layers,
            "decoder_layers": params.config.decoder_layers,
        },
        "weights": dump(params.trainable()),
    }
    Path(path).write_text(json.dumps(payload))


def load_params(path: str | Path) -> Seq2SeqParams:
    payload = json.loads(Path(path).read_text())
    if payload.get("kind") != "seq2seq" or payload.get("format_version") != _FORMAT_VERSION:
        raise ValueError(f"not a seq2seq params artifact: {path}")
    cfg = TransformerConfig(**payload["config"])
    params = Seq2SeqParams.init(cfg, np.random.default_rng(0))
    slots = params.trainable()
    weights = payload["weights"]
    if len(weights) != len(slots):
        raise ValueError("weight count inconsistent with config")
    for slot, values in zip(slots, weights):
        arr = np.asarray(values, dtype=np.float64)
        if arr.shape != slot.shape:
            raise ValueError("weight shapes inconsistent with config")
        slot.data = arr
    return params
