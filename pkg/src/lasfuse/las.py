"""Listen-attend-spell encoder/attention/decoder and its training loss.

Shapes: ``B`` batch, ``T`` frames, ``K`` encoder steps after pooling, ``V``
vocabulary.  The decoder input at step ``t`` is the embedding of the previous
label concatenated with the previous context vector; the posterior is
``softmax(W_s [c_t; d_t] + b_s)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .corpus import Batch
from .params import ParamStore
from .tokenizer import BOS_ID


@dataclass
class LasConfig:
    feat_dim: int
    vocab_size: int
    enc_layers: int = 3
    enc_units: int = 64
    dec_units: int = 64
    emb_dim: int = 64
    att_dim: int = 64
    dropout: float = 0.1

    @property
    def enc_dim(self) -> int:
        return 2 * self.enc_units

    def to_dict(self) -> dict:
        return asdict(self)


def encoder_length(T: int, layers: int) -> int:
    """Encoder output length: ``T`` halved with ceiling once per pooled layer."""
    if T < 1:
        raise ValueError("input must have at least one frame")
    for _ in range(layers - 1):
        T = math.ceil(T / 2)
    return T


def add_lstm(store: ParamStore, prefix: str, in_dim: int, units: int, rng) -> None:
    store.add(f"{prefix}.Wx", (in_dim, 4 * units), rng)
    store.add(f"{prefix}.Wh", (units, 4 * units), rng)
    store.add(f"{prefix}.b", (4 * units,), rng)


def lstm_params(store: ParamStore, prefix: str):
    return store[f"{prefix}.Wx"], store[f"{prefix}.Wh"], store[f"{prefix}.b"]


def init_encoder(store: ParamStore, cfg: LasConfig, rng) -> None:
    in_dim = cfg.feat_dim
    for l in range(cfg.enc_layers):
        for d in ("fw", "bw"):
            add_lstm(store, f"enc.l{l}.{d}", in_dim, cfg.enc_units, rng)
        in_dim = cfg.enc_dim


def init_attention(store: ParamStore, cfg: LasConfig, rng) -> None:
    store.add("att.W_h", (cfg.enc_dim, cfg.att_dim), rng)
    store.add("att.W_d", (cfg.dec_units, cfg.att_dim), rng)
    store.add("att.b_a", (cfg.att_dim,), rng)
    store.add("att.v", (cfg.att_dim,), rng)


def init_las(store: ParamStore, cfg: LasConfig, rng, output_layer: bool = True) -> None:
    init_encoder(store, cfg, rng)
    init_attention(store, cfg, rng)
    store.add("dec.emb", (cfg.vocab_size, cfg.emb_dim), rng)
    add_lstm(store, "dec.lstm", cfg.emb_dim + cfg.enc_dim, cfg.dec_units, rng)
    if output_layer:
        store.add("out.W_s", (cfg.enc_dim + cfg.dec_units, cfg.vocab_size), rng)
        store.add("out.b_s", (cfg.vocab_size,), rng)


class EncoderOutput:
    """Encoder features ``h`` plus the attention keys ``h W_h`` and the valid-step mask."""

    def __init__(self, h: Tensor, keys: Tensor, lengths: np.ndarray, layers=None):
        self.h = h
        self.keys = keys
        self.lengths = np.asarray(lengths)
        K = h.shape[1]
        self.mask = np.arange(K)[None, :] < self.lengths[:, None]
        self.layers = layers or []

    @property
    def batch_size(self) -> int:
        return self.h.shape[0]

    def take(self, idx) -> "EncoderOutput":
        idx = np.asarray(idx)
        return EncoderOutput(Tensor(self.h.data[idx]), Tensor(self.keys.data[idx]), self.lengths[idx])


def run_encoder(store: ParamStore, cfg: LasConfig, frames: np.ndarray, lengths, train: bool = False,
                rng=None, keep_layers: bool = False) -> EncoderOutput:
    """Stacked bidirectional LSTM with pair max-pooling between layers."""
    frames = np.asarray(frames, dtype=store.dtype)
    if frames.ndim == 2:
        frames = frames[None]
        lengths = [frames.shape[1]]
    lengths = np.asarray(lengths)
    if frames.shape[1] < 1 or lengths.min() < 1:
        raise ValueError("encoder input must have at least one frame")
    x = Tensor(frames)
    layers = []
    for l in range(cfg.enc_layers):
        mask = np.arange(x.shape[1])[None, :] < lengths[:, None]
        fw = ag.lstm_sequence(x, *lstm_params(store, f"enc.l{l}.fw"), mask=mask)
        bw = ag.lstm_sequence(x, *lstm_params(store, f"enc.l{l}.bw"), mask=mask, reverse=True)
        x = ag.dropout(ag.concat([fw, bw]), cfg.dropout, rng, train)
        if keep_layers:
            layers.append((x, lengths.copy()))
        if l < cfg.enc_layers - 1:
            x = ag.pair_max_pool(x, lengths)
            lengths = (lengths + 1) // 2
    keys = ag.matmul(x, store["att.W_h"])
    return EncoderOutput(x, keys, lengths, layers)


def attend(store: ParamStore, d: Tensor, enc: EncoderOutput):
    """Context vector and attention weights for decoder state ``d`` ``[B, dec_units]``."""
    query = ag.affine(d, store["att.W_d"], store["att.b_a"])
    return ag.attention(enc.keys, enc.h, query, store["att.v"], enc.mask)


class LAS:
    """Baseline model; fusion variants subclass it and override the output head."""

    mode = "none"

    def __init__(self, cfg: LasConfig, store: ParamStore | None = None, rng=None, dtype=np.float32):
        self.cfg = cfg
        if store is None:
            store = ParamStore(dtype)
            self.init_params(store, rng)
        self.store = store

    def init_params(self, store: ParamStore, rng) -> None:
        init_las(store, self.cfg, rng)

    @property
    def dtype(self):
        return self.store.dtype

    @property
    def vocab_size(self) -> int:
        return self.cfg.vocab_size

    def external_lms(self) -> list:
        return []

    def encoder_attention_names(self) -> list[str]:
        return self.store.names("enc.") + self.store.names("att.")

    # -- encoder / decoder -------------------------------------------------

    def encode(self, frames, lengths=None, train: bool = False, rng=None, keep_layers: bool = False) -> EncoderOutput:
        return run_encoder(self.store, self.cfg, frames, lengths, train, rng, keep_layers)

    def initial_state(self, batch_size: int) -> dict:
        dt = self.dtype
        u, D = self.cfg.dec_units, self.cfg.enc_dim
        return {
            "h": Tensor(np.zeros((batch_size, u), dt)),
            "c": Tensor(np.zeros((batch_size, u), dt)),
            "ctx": Tensor(np.zeros((batch_size, D), dt)),
        }

    def embed_prev(self, prev_ids, state: dict, new_state: dict, train: bool, rng) -> Tensor:
        return ag.embedding(self.store["dec.emb"], prev_ids)

    def decoder_rnn(self, prev_ids, state: dict, train: bool, rng, zero_context: bool = False):
        new_state = {}
        emb = self.embed_prev(prev_ids, state, new_state, train, rng)
        ctx_prev = state["ctx"]
        if zero_context:
            ctx_prev = Tensor(np.zeros_like(ctx_prev.data))
        h, c = ag.lstm_cell(ag.concat([emb, ctx_prev]), state["h"], state["c"], *lstm_params(self.store, "dec.lstm"))
        new_state["h"], new_state["c"] = h, c
        d = ag.dropout(h, self.cfg.dropout, rng, train)
        return d, new_state

    def output_logits(self, prev_ids, ctx: Tensor, d: Tensor, state: dict, new_state: dict, train: bool, rng) -> Tensor:
        return ag.affine(ag.concat([ctx, d]), self.store["out.W_s"], self.store["out.b_s"])

    def step(self, prev_ids, state: dict, enc: EncoderOutput | None, train: bool = False, rng=None,
             zero_context: bool = False):
        """Advance one label.  Returns ``(logits [B, V], new_state, alpha or None)``."""
        prev_ids = np.asarray(prev_ids)
        if prev_ids.size and (prev_ids.min() < 0 or prev_ids.max() >= self.vocab_size):
            raise IndexError("label id out of range")
        d, new_state = self.decoder_rnn(prev_ids, state, train, rng, zero_context)
        if zero_context:
            ctx, alpha = Tensor(np.zeros((d.shape[0], self.cfg.enc_dim), self.dtype)), None
        else:
            ctx, alpha = attend(self.store, d, enc)
        new_state["ctx"] = ctx
        logits = self.output_logits(prev_ids, ctx, d, state, new_state, train, rng)
        return logits, new_state, alpha

    def decoder_step(self, prev_label: int, state: dict | None, h: EncoderOutput):
        """Single-utterance convenience: posterior over ``V`` and the next state."""
        with ag.no_grad():
            if state is None:
                state = self.initial_state(h.batch_size)
            logits, new_state, _ = self.step(np.full(h.batch_size, prev_label), state, h)
            return ag.softmax(logits).data, new_state

    @staticmethod
    def reorder_state(state: dict, idx) -> dict:
        idx = np.asarray(idx)
        return {k: Tensor(v.data[idx]) for k, v in state.items()}


def _sample_rows(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cdf = np.cumsum(probs.astype(np.float64), axis=1)
    r = rng.random(probs.shape[0]) * cdf[:, -1]
    return np.minimum((cdf < r[:, None]).sum(axis=1), probs.shape[1] - 1)


def sequence_loss(model: LAS, batch: Batch, smoothing: float = 0.0, sampling_prob: float = 1.0,
                  rng: np.random.Generator | None = None, train: bool = False,
                  zero_context: bool = False, enc: EncoderOutput | None = None) -> Tensor:
    """Summed label-smoothed cross-entropy over every target position incl. EOS.

    Each step's input label is the ground-truth previous label with
    probability ``sampling_prob``, otherwise a sample from the model's
    posterior at the previous step.  With ``zero_context`` the encoder and
    attention are skipped entirely and the decoder runs as a plain LM.
    """
    B, U = batch.targets.shape
    if U == 0:
        raise ValueError("empty target sequence")
    if sampling_prob < 1.0 and rng is None:
        raise ValueError("scheduled sampling needs an rng")
    if not zero_context and enc is None:
        if batch.frames is None:
            raise ValueError("acoustic task needs a paired batch")
        enc = model.encode(batch.frames, batch.frame_lengths, train, rng)
    state = model.initial_state(B)
    prev = np.full(B, BOS_ID, dtype=np.int64)
    loss = None
    for t in range(U):
        logits, state, _ = model.step(prev, state, enc, train, rng, zero_context)
        step_loss = ag.softmax_xent(logits, batch.targets[:, t], smoothing, batch.target_mask[:, t])
        loss = step_loss if loss is None else loss + step_loss
        if t + 1 < U:
            prev = batch.targets[:, t].copy()
            if sampling_prob < 1.0:
                use_model = rng.random(B) >= sampling_prob
                if use_model.any():
                    probs = ag.softmax(logits.detach()).data
                    prev[use_model] = _sample_rows(probs[use_model], rng)
    return loss

