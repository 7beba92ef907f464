"""LM integration strategies built on top of :class:`~lasfuse.las.LAS`.

* shallow: decode-time ``log p_asr + lambda * log p_lm`` (no parameters)
* deep: scalar-gated LM hidden state appended to the posterior input;
  only the gate and output layer train, starting from the baseline's
  output layer so step 0 reproduces the baseline exactly
* cold: fine-grained gate over a transformed LM state, trained from scratch
  around a frozen LM
* lower_layer: the LM recurrence becomes the decoder's first layer; all
  parameters fine-tune
* multitask: the decoder doubles as a plain LM by zeroing the context vector
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .las import LAS, LasConfig, init_attention, init_encoder, add_lstm
from .lm import LmConfig, RnnLm
from .params import ParamStore
from .tokenizer import BOS_ID

MODES = ("none", "shallow", "deep", "cold", "lower_layer", "multitask")
EARLY_MODES = ("none", "cold", "multitask")
LATE_MODES = ("shallow", "deep", "lower_layer")


@dataclass(frozen=True)
class FusionMode:
    tag: str = "none"
    lm_weight: float = 0.0
    lm_task_prob: float = 0.25

    def __post_init__(self):
        if self.tag not in MODES:
            raise ValueError(f"unknown fusion mode {self.tag!r}; expected one of {MODES}")
        if self.lm_weight < 0:
            raise ValueError("lm_weight must be >= 0")
        if not 0.0 <= self.lm_task_prob <= 1.0:
            raise ValueError("lm_task_prob must be in [0, 1]")

    def to_dict(self) -> dict:
        return {"tag": self.tag, "lm_weight": self.lm_weight, "lm_task_prob": self.lm_task_prob}

    @classmethod
    def from_dict(cls, d: dict) -> "FusionMode":
        return cls(**d)


def shallow_combine(asr_logp, lm_logp, lm_weight: float):
    """Log-linear interpolation of ASR and LM scores."""
    if lm_weight < 0:
        raise ValueError("lm_weight must be >= 0")
    return asr_logp + lm_weight * lm_logp


def copy_store(src: ParamStore, skip=()) -> ParamStore:
    out = ParamStore(src.dtype)
    for n, t in src.params.items():
        if n in skip:
            continue
        out.add(n, t.data.shape, value=t.data.copy())
    return out


def freeze_names(store: ParamStore, names, frozen: bool = True) -> None:
    """Mark parameters frozen; frozen ones also stop requesting gradients."""
    for n in names:
        store.trainable[n] = not frozen
        store[n].requires_grad = not frozen


class _WithFrozenLm(LAS):
    """Shared plumbing for heads that read a frozen external LM each step."""

    def __init__(self, cfg: LasConfig, store: ParamStore, lm: RnnLm):
        super().__init__(cfg, store)
        self.lm = lm
        freeze_names(lm.store, lm.store.names(), True)

    def external_lms(self) -> list:
        return [self.lm]

    def initial_state(self, batch_size: int) -> dict:
        st = super().initial_state(batch_size)
        lm_st = self.lm.initial_state(batch_size)
        st["lm_h"], st["lm_c"] = lm_st["h"], lm_st["c"]
        return st

    def lm_hidden(self, prev_ids, state: dict, new_state: dict) -> Tensor:
        with ag.no_grad():
            d_lm, lm_st = self.lm.hidden_step(prev_ids, {"h": state["lm_h"], "c": state["lm_c"]})
        new_state["lm_h"], new_state["lm_c"] = lm_st["h"], lm_st["c"]
        return Tensor(d_lm.data)


class DeepFusionLAS(_WithFrozenLm):
    """``softmax(W_DF [c; d; g * d_lm] + b_DF)`` with ``g = sigmoid(v_g . d_lm + b_g)``."""

    mode = "deep"

    def gate(self, d_lm: Tensor) -> Tensor:
        """Scalar gate per row, shape ``[B, 1]``."""
        return ag.sigmoid(ag.affine(d_lm, self.store["df.v_g"], self.store["df.b_g"]))

    def output_logits(self, prev_ids, ctx, d, state, new_state, train, rng):
        d_lm = self.lm_hidden(prev_ids, state, new_state)
        gated = ag.mul(d_lm, self.gate(d_lm))
        return ag.affine(ag.concat([ctx, d, gated]), self.store["df.W"], self.store["df.b"])

    def fusion_names(self) -> list[str]:
        return self.store.names("df.")


def build_deep_fusion(base: LAS, lm: RnnLm, rng) -> DeepFusionLAS:
    """Deep-fusion model around copies of ``base``'s parameters.

    The output layer starts as ``[W_s; 0]`` / ``b_s`` so its posteriors equal
    the baseline's until the LM block is trained.
    """
    cfg = base.cfg
    store = copy_store(base.store)
    store.add("df.v_g", (lm.cfg.proj_dim, 1), rng)
    store.add("df.b_g", (1,), rng)
    W_s, b_s = base.store["out.W_s"].data, base.store["out.b_s"].data
    store.add("df.W", (W_s.shape[0] + lm.cfg.proj_dim, cfg.vocab_size),
              value=np.concatenate([W_s, np.zeros((lm.cfg.proj_dim, cfg.vocab_size), W_s.dtype)]))
    store.add("df.b", (cfg.vocab_size,), value=b_s.copy())
    model = DeepFusionLAS(cfg, store, lm)
    freeze_names(store, [n for n in store.names() if not n.startswith("df.")], True)
    return model


class ColdFusionLAS(_WithFrozenLm):
    """Cold-fusion head over the decoder state, context and LM hidden state.

    ``s_lm = tanh(A d_lm + a)``, ``s_ed = W_ED [d; c] + b_ED``,
    ``g = sigmoid(W_g [s_ed; s_lm] + b_g)``, ``r = tanh(R [s_ed; g * s_lm] + r0)``,
    posterior ``softmax(W_CF r + b_CF)``.
    """

    mode = "cold"

    def head(self, ctx: Tensor, d: Tensor, d_lm: Tensor):
        p = self.store
        s_lm = ag.tanh(ag.affine(d_lm, p["cf.lm.W"], p["cf.lm.b"]))
        s_ed = ag.affine(ag.concat([d, ctx]), p["cf.ed.W"], p["cf.ed.b"])
        g = ag.sigmoid(ag.affine(ag.concat([s_ed, s_lm]), p["cf.g.W"], p["cf.g.b"]))
        s_cf = ag.concat([s_ed, ag.mul(g, s_lm)])
        r = ag.tanh(ag.affine(s_cf, p["cf.r.W"], p["cf.r.b"]))
        logits = ag.affine(r, p["cf.out.W"], p["cf.out.b"])
        return logits, {"s_lm": s_lm, "s_ed": s_ed, "gate": g, "s_cf": s_cf, "r": r}

    def output_logits(self, prev_ids, ctx, d, state, new_state, train, rng):
        d_lm = self.lm_hidden(prev_ids, state, new_state)
        return self.head(ctx, d, d_lm)[0]


def build_cold_fusion(cfg: LasConfig, lm: RnnLm, rng, width: int | None = None, dtype=np.float32) -> ColdFusionLAS:
    """Randomly initialized LAS with a cold-fusion head; the LM stays frozen."""
    width = width or cfg.dec_units
    store = ParamStore(dtype)
    init_encoder(store, cfg, rng)
    init_attention(store, cfg, rng)
    store.add("dec.emb", (cfg.vocab_size, cfg.emb_dim), rng)
    add_lstm(store, "dec.lstm", cfg.emb_dim + cfg.enc_dim, cfg.dec_units, rng)
    store.add("cf.lm.W", (lm.cfg.proj_dim, width), rng)
    store.add("cf.lm.b", (width,), rng)
    store.add("cf.ed.W", (cfg.dec_units + cfg.enc_dim, width), rng)
    store.add("cf.ed.b", (width,), rng)
    store.add("cf.g.W", (2 * width, width), rng)
    store.add("cf.g.b", (width,), rng)
    store.add("cf.r.W", (2 * width, width), rng)
    store.add("cf.r.b", (width,), rng)
    store.add("cf.out.W", (width, cfg.vocab_size), rng)
    store.add("cf.out.b", (cfg.vocab_size,), rng)
    return ColdFusionLAS(cfg, store, lm)


class LowerLayerLAS(LAS):
    """Decoder with an LM recurrence feeding the original decoder layer via an adapter."""

    mode = "lower_layer"

    def __init__(self, cfg: LasConfig, store: ParamStore, lm_cfg: LmConfig):
        super().__init__(cfg, store)
        self.lm_cfg = lm_cfg
        self.lower = RnnLm(lm_cfg, store, prefix="lower")

    def initial_state(self, batch_size: int) -> dict:
        st = super().initial_state(batch_size)
        low = self.lower.initial_state(batch_size)
        st["low_h"], st["low_c"] = low["h"], low["c"]
        return st

    def embed_prev(self, prev_ids, state, new_state, train, rng):
        d_low, low = self.lower.hidden_step(prev_ids, {"h": state["low_h"], "c": state["low_c"]}, train, rng)
        new_state["low_h"], new_state["low_c"] = low["h"], low["c"]
        return ag.affine(d_low, self.store["adapter.W"], self.store["adapter.b"])


def _fit_adapter(lower: RnnLm, emb: np.ndarray, token_seqs, max_rows: int = 20000):
    """Least-squares map from lower-layer hidden states to the embeddings they replace."""
    feats, targets, n = [], [], 0
    with ag.no_grad():
        for ids in token_seqs:
            state = lower.initial_state(1)
            prev = BOS_ID
            for y in ids:
                d, state = lower.hidden_step([prev], state)
                feats.append(d.data[0].astype(np.float64))
                targets.append(emb[prev].astype(np.float64))
                prev = y
                n += 1
            if n >= max_rows:
                break
    X = np.hstack([np.array(feats), np.ones((len(feats), 1))])
    sol, *_ = np.linalg.lstsq(X, np.array(targets), rcond=None)
    return sol[:-1], sol[-1]


def build_lower_layer_model(base: LAS, lm: RnnLm | None, lm_cfg: LmConfig, rng,
                            adapter_fit_seqs=None) -> LowerLayerLAS:
    """Composite decoder: LM layer -> adapter -> pretrained decoder layer.

    ``lm=None`` gives the ablation with a randomly initialized lower layer.
    The adapter is fitted by least squares on ``adapter_fit_seqs`` (token id
    sequences) when given, else randomly initialized.  All parameters train.
    """
    cfg = base.cfg
    store = copy_store(base.store, skip={"dec.emb"})
    if lm is not None:
        for n in ("emb", "lstm.Wx", "lstm.Wh", "lstm.b", "proj.W", "proj.b"):
            src = lm.store[f"{lm.prefix}.{n}"].data
            store.add(f"lower.{n}", src.shape, value=src.copy())
    else:
        RnnLm(lm_cfg, store, prefix="lower").init_params(store, rng, with_output=False)
    model = LowerLayerLAS(cfg, store, lm_cfg)
    if adapter_fit_seqs is not None:
        W, b = _fit_adapter(model.lower, base.store["dec.emb"].data, adapter_fit_seqs)
        store.add("adapter.W", W.shape, value=W)
        store.add("adapter.b", b.shape, value=b)
    else:
        store.add("adapter.W", (lm_cfg.proj_dim, cfg.emb_dim), rng)
        store.add("adapter.b", (cfg.emb_dim,), rng)
    return model


@dataclass
class ModelBundle:
    """A trained model, its fusion mode and (for shallow fusion) the decode-time LM."""

    model: LAS
    mode: FusionMode = field(default_factory=FusionMode)
    lm: RnnLm | None = None

    @property
    def dtype(self):
        return self.model.dtype


def save_bundle(path, bundle: ModelBundle, extra_meta: dict | None = None) -> None:
    """One checkpoint holding model, fused/decode-time LM and the fusion mode."""
    from .params import save_checkpoint

    model = bundle.model
    arrays = dict(model.store.arrays())
    lm = getattr(model, "lm", None) or bundle.lm
    meta = {
        "mode": bundle.mode.to_dict(),
        "model_class": model.mode,
        "las": model.cfg.to_dict(),
        "lm": lm.cfg.to_dict() if lm is not None else None,
        "lower_lm": model.lm_cfg.to_dict() if isinstance(model, LowerLayerLAS) else None,
    }
    if lm is not None:
        arrays.update({f"ext.{n}": a for n, a in lm.store.arrays().items()})
    meta.update(extra_meta or {})
    save_checkpoint(path, arrays, meta)


def load_bundle(path) -> ModelBundle:
    from .params import load_checkpoint

    arrays, meta = load_checkpoint(path)
    cfg = LasConfig(**meta["las"])
    dtype = next(iter(arrays.values())).dtype.newbyteorder("=")
    store = ParamStore(dtype)
    lm_store = ParamStore(dtype)
    for n, a in arrays.items():
        if n.startswith("ext."):
            lm_store.add(n[4:], a.shape, value=a)
        else:
            store.add(n, a.shape, value=a)
    lm = RnnLm(LmConfig(**meta["lm"]), lm_store) if meta["lm"] else None
    kind = meta["model_class"]
    if kind == "deep":
        model = DeepFusionLAS(cfg, store, lm)
    elif kind == "cold":
        model = ColdFusionLAS(cfg, store, lm)
    elif kind == "lower_layer":
        model = LowerLayerLAS(cfg, store, LmConfig(**meta["lower_lm"]))
    else:
        model = LAS(cfg, store)
    return ModelBundle(model, FusionMode.from_dict(meta["mode"]), lm)
