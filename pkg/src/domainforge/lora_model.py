"""Toy causal decoder with low-rank adapters.

Adapted linear layers compute h = (W + (alpha/r)*B*A) x with W frozen, B zero
at init.  The decoder (embeddings, pre-norm attention + feed-forward blocks,
causal mask) is plain numpy with hand-derived reverse-mode gradients; the
finite-difference suite in the trainer is the correctness contract.

Also home to the token vocabulary and the binary checkpoint format
(magic ``DFCKPT1``, named float32 tensors in declaration order).
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corpus_store import Tokenizer, _is_cjk
from .errors import ChecksumMismatchError, MagicMismatchError, TruncatedArtifactError

CHECKPOINT_MAGIC = b"DFCKPT1"
PHASES = ("init", "pretrain", "sft")

PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")

ADAPTABLE_PROJECTIONS = ("query", "key", "value", "output", "ff_in", "ff_out")

_LN_EPS = 1e-5
_INIT_STD = 0.02


# ---------------------------------------------------------------------------
# Configuration

@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_seq_len: int = 256
    lora_rank: int = 8
    lora_alpha: float = 32.0
    lora_dropout: float = 0.1
    adapted_projections: tuple[str, ...] = ("query", "value")

    def __post_init__(self):
        if self.vocab_size < len(SPECIAL_TOKENS):
            raise ValueError(f"vocab_size must be >= {len(SPECIAL_TOKENS)}")
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.max_seq_len < 2:
            raise ValueError("max_seq_len must be >= 2")
        unknown = set(self.adapted_projections) - set(ADAPTABLE_PROJECTIONS)
        if unknown:
            raise ValueError(f"unknown projections: {sorted(unknown)}")
        # canonical order makes the checkpoint tensor order configuration-stable
        object.__setattr__(
            self,
            "adapted_projections",
            tuple(p for p in ADAPTABLE_PROJECTIONS if p in self.adapted_projections),
        )
        for proj in self.adapted_projections:
            d1, d2 = self.projection_dims(proj)
            if not 1 <= self.lora_rank <= min(d1, d2):
                raise ValueError(
                    f"lora_rank {self.lora_rank} out of range for {proj} "
                    f"({d1}x{d2})"
                )
        if not 0.0 <= self.lora_dropout < 1.0:
            raise ValueError("lora_dropout must be in [0, 1)")

    def projection_dims(self, proj: str) -> tuple[int, int]:
        """(d_out, d_in) of a projection's base weight matrix."""
        if proj in ("query", "key", "value", "output"):
            return self.d_model, self.d_model
        if proj == "ff_in":
            return self.d_ff, self.d_model
        if proj == "ff_out":
            return self.d_model, self.d_ff
        raise ValueError(f"unknown projection: {proj}")

    def to_json(self) -> str:
        obj = {
            "vocab_size": self.vocab_size,
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "d_ff": self.d_ff,
            "max_seq_len": self.max_seq_len,
            "lora_rank": self.lora_rank,
            "lora_alpha": self.lora_alpha,
            "lora_dropout": self.lora_dropout,
            "adapted_projections": list(self.adapted_projections),
        }
        return json.dumps(obj, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        obj = json.loads(text)
        obj["adapted_projections"] = tuple(obj["adapted_projections"])
        return cls(**obj)


# ---------------------------------------------------------------------------
# Standalone adapted layer

@dataclass
class LoraLayer:
    """One adapted linear map: frozen W (d1 x d2), trainable B (d1 x r), A (r x d2)."""

    w: np.ndarray
    lora_b: np.ndarray
    lora_a: np.ndarray
    rank: int
    alpha: float
    dropout_p: float = 0.0

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


def init_lora(
    d1: int,
    d2: int,
    rank: int,
    alpha: float,
    seed: int,
    dropout_p: float = 0.0,
    w: np.ndarray | None = None,
    dtype=np.float64,
) -> LoraLayer:
    """Seeded adapter init: A ~ N(0, 0.02), B = 0; W drawn likewise if absent."""
    if not 1 <= rank <= min(d1, d2):
        raise ValueError(f"rank {rank} out of range [1, {min(d1, d2)}]")
    rng = np.random.default_rng(seed)
    if w is None:
        w = rng.normal(0.0, _INIT_STD, (d1, d2))
    w = np.asarray(w, dtype=dtype)
    if w.shape != (d1, d2):
        raise ValueError(f"w has shape {w.shape}, expected {(d1, d2)}")
    lora_a = rng.normal(0.0, _INIT_STD, (rank, d2)).astype(dtype)
    lora_b = np.zeros((d1, rank), dtype=dtype)
    return LoraLayer(w=w, lora_b=lora_b, lora_a=lora_a, rank=rank,
                     alpha=alpha, dropout_p=dropout_p)


def lora_forward(
    layer: LoraLayer,
    x: np.ndarray,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """h = W x + (alpha/r) B (A drop(x)); dropout only in training mode."""
    x = np.asarray(x)
    if x.shape[-1] != layer.w.shape[1]:
        raise ValueError(
            f"input dimension {x.shape[-1]} != layer d2 {layer.w.shape[1]}"
        )
    base = x @ layer.w.T
    xd = x
    if training and layer.dropout_p > 0.0:
        if rng is None:
            raise ValueError("rng required for dropout in training mode")
        keep = rng.random(x.shape) >= layer.dropout_p
        xd = x * keep.astype(x.dtype) / (1.0 - layer.dropout_p)
    return base + layer.scale * ((xd @ layer.lora_a.T) @ layer.lora_b.T)


def merge_weights(layer: LoraLayer) -> np.ndarray:
    """The dense matrix W + (alpha/r) B A; the layer is not mutated."""
    return layer.w + layer.scale * (layer.lora_b @ layer.lora_a)


# ---------------------------------------------------------------------------
# Full model state

def param_names(config: ModelConfig) -> list[str]:
    """All tensor names in fixed declaration order (also the checkpoint order)."""
    names = ["tok_emb", "pos_emb"]
    for i in range(config.n_layers):
        names += [
            f"layers.{i}.ln1.gamma", f"layers.{i}.ln1.beta",
            f"layers.{i}.attn.wq", f"layers.{i}.attn.bq",
            f"layers.{i}.attn.wk", f"layers.{i}.attn.bk",
            f"layers.{i}.attn.wv", f"layers.{i}.attn.bv",
            f"layers.{i}.attn.wo", f"layers.{i}.attn.bo",
            f"layers.{i}.ln2.gamma", f"layers.{i}.ln2.beta",
            f"layers.{i}.ff.w1", f"layers.{i}.ff.b1",
            f"layers.{i}.ff.w2", f"layers.{i}.ff.b2",
        ]
    names += ["ln_f.gamma", "ln_f.beta", "out_w"]
    for i in range(config.n_layers):
        for proj in config.adapted_projections:
            names += [f"layers.{i}.lora.{proj}.a", f"layers.{i}.lora.{proj}.b"]
    return names


def adapter_param_names(config: ModelConfig) -> list[str]:
    return [n for n in param_names(config) if ".lora." in n]


EMBEDDING_PARAM_NAMES = ("tok_emb", "pos_emb", "out_w")


def trainable_param_names(
    config: ModelConfig, train_embeddings: bool = False
) -> list[str]:
    names = adapter_param_names(config)
    if train_embeddings:
        names = [n for n in EMBEDDING_PARAM_NAMES] + names
    return names


def lora_param_count(config: ModelConfig) -> int:
    """Sum of r * (d1 + d2) over all adapted projections of all layers."""
    total = 0
    for _ in range(config.n_layers):
        for proj in config.adapted_projections:
            d1, d2 = config.projection_dims(proj)
            total += config.lora_rank * (d1 + d2)
    return total


@dataclass
class ModelState:
    """Named parameter tensors plus their config; base tensors stay frozen."""

    config: ModelConfig
    params: dict[str, np.ndarray]
    dtype: np.dtype = np.dtype(np.float32)

    def copy(self) -> "ModelState":
        return ModelState(
            config=self.config,
            params={k: v.copy() for k, v in self.params.items()},
            dtype=self.dtype,
        )


def _expected_shape(config: ModelConfig, name: str) -> tuple[int, ...]:
    d, f, v, L = config.d_model, config.d_ff, config.vocab_size, config.max_seq_len
    if name == "tok_emb":
        return (v, d)
    if name == "pos_emb":
        return (L, d)
    if name == "out_w":
        return (v, d)
    if name.endswith((".gamma", ".beta")):
        return (d,)
    leaf = name.rsplit(".", 1)[-1]
    if ".lora." in name:
        proj = name.split(".lora.")[1].rsplit(".", 1)[0]
        d1, d2 = config.projection_dims(proj)
        return (config.lora_rank, d2) if leaf == "a" else (d1, config.lora_rank)
    if leaf in ("wq", "wk", "wv", "wo"):
        return (d, d)
    if leaf in ("bq", "bk", "bv", "bo"):
        return (d,)
    if leaf == "w1":
        return (f, d)
    if leaf == "b1":
        return (f,)
    if leaf == "w2":
        return (d, f)
    if leaf == "b2":
        return (d,)
    raise ValueError(f"unknown parameter name: {name}")


def init_model(config: ModelConfig, seed: int, dtype=np.float32) -> ModelState:
    """Seeded init; draws happen in declaration order so that configs which
    differ only in adapters share identical base tensors for a given seed."""
    rng = np.random.default_rng(seed)
    dtype = np.dtype(dtype)
    params: dict[str, np.ndarray] = {}
    for name in param_names(config):
        shape = _expected_shape(config, name)
        if name.endswith(".gamma"):
            arr = np.ones(shape)
        elif name.endswith((".beta",)) or name.rsplit(".", 1)[-1] in (
            "bq", "bk", "bv", "bo", "b1", "b2",
        ):
            arr = np.zeros(shape)
        elif ".lora." in name and name.endswith(".b"):
            arr = np.zeros(shape)
        else:
            arr = rng.normal(0.0, _INIT_STD, shape)
        params[name] = arr.astype(dtype)
    return ModelState(config=config, params=params, dtype=dtype)


# ---------------------------------------------------------------------------
# Forward / backward building blocks

def _layer_norm_fwd(x, gamma, beta):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc * inv
    return xhat * gamma + beta, (xhat, inv)


def _layer_norm_bwd(dy, cache, gamma):
    xhat, inv = cache
    dxhat = dy * gamma
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = (dxhat - m1 - xhat * m2) * inv
    dgamma = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    dbeta = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    return dx, dgamma, dbeta


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def _gelu_fwd(x):
    t = np.tanh(_GELU_C * (x + _GELU_A * x * x * x))
    return 0.5 * x * (1.0 + t), t


def _gelu_bwd(dy, x, t):
    inner = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * inner)


def _proj_fwd(x, w, b, adapter, scale, p, training, rng):
    """y = x W^T + b, plus the scaled low-rank path when an adapter is present."""
    y = x @ w.T + b
    xd = u = keep = None
    if adapter is not None:
        a_mat, b_mat = adapter
        xd = x
        if training and p > 0.0:
            keep = rng.random(x.shape) >= p
            xd = x * keep.astype(x.dtype) / (1.0 - p)
        u = xd @ a_mat.T
        y = y + scale * (u @ b_mat.T)
    return y, (x, xd, u, keep)


def _proj_bwd(dy, cache, w, adapter, scale, p, grads, names, want):
    """Returns dx; accumulates requested gradients into ``grads``.

    ``names`` is (w_name, b_name, a_name, b_up_name); adapter grads are only
    produced when an adapter is present.
    """
    x, xd, u, keep = cache
    w_name, b_name, a_name, b_up_name = names
    din = x.shape[-1]
    dout = dy.shape[-1]
    dy_flat = dy.reshape(-1, dout)
    dx = dy @ w
    if want(w_name):
        grads[w_name] = grads.get(w_name, 0) + dy_flat.T @ x.reshape(-1, din)
    if want(b_name):
        grads[b_name] = grads.get(b_name, 0) + dy_flat.sum(axis=0)
    if adapter is not None:
        a_mat, b_mat = adapter
        if want(b_up_name):
            grads[b_up_name] = grads.get(b_up_name, 0) + scale * (
                dy_flat.T @ u.reshape(-1, u.shape[-1])
            )
        du = scale * (dy @ b_mat)
        if want(a_name):
            grads[a_name] = grads.get(a_name, 0) + du.reshape(
                -1, du.shape[-1]
            ).T @ xd.reshape(-1, din)
        dxd = du @ a_mat
        if keep is not None:
            dxd = dxd * keep.astype(dxd.dtype) / (1.0 - p)
        dx = dx + dxd
    return dx


def _split_heads(x, n_heads):
    b, t, d = x.shape
    return x.reshape(b, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def _softmax_last(x):
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def forward_batch(
    state: ModelState,
    ids: np.ndarray,
    training: bool = False,
    rng: np.random.Generator | None = None,
):
    """Causal forward pass over a (batch, time) id array.

    Returns (logits, cache); position i's logits depend only on ids[:, :i+1].
    """
    cfg = state.config
    P = state.params
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 2 or ids.shape[1] < 1:
        raise ValueError(f"ids must be (batch, time >= 1), got {ids.shape}")
    B, T = ids.shape
    if T > cfg.max_seq_len:
        raise ValueError(f"sequence length {T} exceeds max_seq_len {cfg.max_seq_len}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ValueError("token id out of vocabulary range")
    if training and cfg.lora_dropout > 0.0 and rng is None:
        raise ValueError("rng required for dropout in training mode")

    adapted = set(cfg.adapted_projections)
    scale = cfg.lora_alpha / cfg.lora_rank
    p = cfg.lora_dropout
    head_scale = 1.0 / math.sqrt(cfg.d_model // cfg.n_heads)
    causal = np.tril(np.ones((T, T), dtype=bool))

    def adapter(i, proj):
        if proj not in adapted:
            return None
        return P[f"layers.{i}.lora.{proj}.a"], P[f"layers.{i}.lora.{proj}.b"]

    x = P["tok_emb"][ids] + P["pos_emb"][:T]
    cache: dict = {"ids": ids, "blocks": []}
    for i in range(cfg.n_layers):
        blk: dict = {}
        pre = f"layers.{i}"
        a, blk["ln1"] = _layer_norm_fwd(x, P[f"{pre}.ln1.gamma"], P[f"{pre}.ln1.beta"])
        q, blk["qp"] = _proj_fwd(a, P[f"{pre}.attn.wq"], P[f"{pre}.attn.bq"],
                                 adapter(i, "query"), scale, p, training, rng)
        k, blk["kp"] = _proj_fwd(a, P[f"{pre}.attn.wk"], P[f"{pre}.attn.bk"],
                                 adapter(i, "key"), scale, p, training, rng)
        v, blk["vp"] = _proj_fwd(a, P[f"{pre}.attn.wv"], P[f"{pre}.attn.bv"],
                                 adapter(i, "value"), scale, p, training, rng)
        qh, kh, vh = (_split_heads(z, cfg.n_heads) for z in (q, k, v))
        s = np.where(causal, (qh @ kh.transpose(0, 1, 3, 2)) * head_scale, -np.inf)
        attn = _softmax_last(s)
        oh = attn @ vh
        o = _merge_heads(oh)
        blk["qh"], blk["kh"], blk["vh"], blk["attn"] = qh, kh, vh, attn
        attn_out, blk["op"] = _proj_fwd(o, P[f"{pre}.attn.wo"], P[f"{pre}.attn.bo"],
                                        adapter(i, "output"), scale, p, training, rng)
        x = x + attn_out
        f, blk["ln2"] = _layer_norm_fwd(x, P[f"{pre}.ln2.gamma"], P[f"{pre}.ln2.beta"])
        h1, blk["f1"] = _proj_fwd(f, P[f"{pre}.ff.w1"], P[f"{pre}.ff.b1"],
                                  adapter(i, "ff_in"), scale, p, training, rng)
        g, t = _gelu_fwd(h1)
        blk["h1"], blk["t"] = h1, t
        h2, blk["f2"] = _proj_fwd(g, P[f"{pre}.ff.w2"], P[f"{pre}.ff.b2"],
                                  adapter(i, "ff_out"), scale, p, training, rng)
        x = x + h2
        cache["blocks"].append(blk)
    xf, cache["ln_f"] = _layer_norm_fwd(x, P["ln_f.gamma"], P["ln_f.beta"])
    cache["xf"] = xf
    logits = xf @ P["out_w"].T
    return logits, cache


def backward_batch(
    state: ModelState,
    cache: dict,
    dlogits: np.ndarray,
    needs: set[str] | None = None,
) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss wrt the tensors named in ``needs``
    (all tensors when ``needs`` is None)."""
    cfg = state.config
    P = state.params
    adapted = set(cfg.adapted_projections)
    scale = cfg.lora_alpha / cfg.lora_rank
    p = cfg.lora_dropout
    head_scale = 1.0 / math.sqrt(cfg.d_model // cfg.n_heads)

    def want(name):
        return needs is None or name in needs

    def adapter(i, proj):
        if proj not in adapted:
            return None
        return P[f"layers.{i}.lora.{proj}.a"], P[f"layers.{i}.lora.{proj}.b"]

    grads: dict[str, np.ndarray] = {}
    xf = cache["xf"]
    d = dlogits.shape[-1]
    if want("out_w"):
        grads["out_w"] = dlogits.reshape(-1, d).T @ xf.reshape(-1, xf.shape[-1])
    dxf = dlogits @ P["out_w"]
    dx, dg, db = _layer_norm_bwd(dxf, cache["ln_f"], P["ln_f.gamma"])
    if want("ln_f.gamma"):
        grads["ln_f.gamma"] = dg
    if want("ln_f.beta"):
        grads["ln_f.beta"] = db

    for i in reversed(range(cfg.n_layers)):
        blk = cache["blocks"][i]
        pre = f"layers.{i}"

        # x_out = x_mid + ff(ln2(x_mid))
        dh2 = dx
        dgact = _proj_bwd(
            dh2, blk["f2"], P[f"{pre}.ff.w2"], adapter(i, "ff_out"), scale, p,
            grads,
            (f"{pre}.ff.w2", f"{pre}.ff.b2",
             f"{pre}.lora.ff_out.a", f"{pre}.lora.ff_out.b"),
            want,
        )
        dh1 = _gelu_bwd(dgact, blk["h1"], blk["t"])
        df = _proj_bwd(
            dh1, blk["f1"], P[f"{pre}.ff.w1"], adapter(i, "ff_in"), scale, p,
            grads,
            (f"{pre}.ff.w1", f"{pre}.ff.b1",
             f"{pre}.lora.ff_in.a", f"{pre}.lora.ff_in.b"),
            want,
        )
        dx_mid, dg2, db2 = _layer_norm_bwd(df, blk["ln2"], P[f"{pre}.ln2.gamma"])
        if want(f"{pre}.ln2.gamma"):
            grads[f"{pre}.ln2.gamma"] = dg2
        if want(f"{pre}.ln2.beta"):
            grads[f"{pre}.ln2.beta"] = db2
        dx = dx + dx_mid

        # x_mid = x_in + attn(ln1(x_in))
        dattn_out = dx
        do = _proj_bwd(
            dattn_out, blk["op"], P[f"{pre}.attn.wo"], adapter(i, "output"),
            scale, p, grads,
            (f"{pre}.attn.wo", f"{pre}.attn.bo",
             f"{pre}.lora.output.a", f"{pre}.lora.output.b"),
            want,
        )
        doh = _split_heads(do, cfg.n_heads)
        attn, qh, kh, vh = blk["attn"], blk["qh"], blk["kh"], blk["vh"]
        dattn = doh @ vh.transpose(0, 1, 3, 2)
        dvh = attn.transpose(0, 1, 3, 2) @ doh
        ds = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
        dqh = (ds @ kh) * head_scale
        dkh = (ds.transpose(0, 1, 3, 2) @ qh) * head_scale
        dq, dk, dv = (_merge_heads(z) for z in (dqh, dkh, dvh))
        da = _proj_bwd(
            dq, blk["qp"], P[f"{pre}.attn.wq"], adapter(i, "query"), scale, p,
            grads,
            (f"{pre}.attn.wq", f"{pre}.attn.bq",
             f"{pre}.lora.query.a", f"{pre}.lora.query.b"),
            want,
        )
        da += _proj_bwd(
            dk, blk["kp"], P[f"{pre}.attn.wk"], adapter(i, "key"), scale, p,
            grads,
            (f"{pre}.attn.wk", f"{pre}.attn.bk",
             f"{pre}.lora.key.a", f"{pre}.lora.key.b"),
            want,
        )
        da += _proj_bwd(
            dv, blk["vp"], P[f"{pre}.attn.wv"], adapter(i, "value"), scale, p,
            grads,
            (f"{pre}.attn.wv", f"{pre}.attn.bv",
             f"{pre}.lora.value.a", f"{pre}.lora.value.b"),
            want,
        )
        dx_in, dg1, db1 = _layer_norm_bwd(da, blk["ln1"], P[f"{pre}.ln1.gamma"])
        if want(f"{pre}.ln1.gamma"):
            grads[f"{pre}.ln1.gamma"] = dg1
        if want(f"{pre}.ln1.beta"):
            grads[f"{pre}.ln1.beta"] = db1
        dx = dx + dx_in

    ids = cache["ids"]
    if want("tok_emb"):
        dtok = np.zeros_like(P["tok_emb"])
        np.add.at(dtok, ids, dx)
        grads["tok_emb"] = dtok
    if want("pos_emb"):
        dpos = np.zeros_like(P["pos_emb"])
        dpos[: ids.shape[1]] = dx.sum(axis=0)
        grads["pos_emb"] = dpos
    return grads


def model_forward(
    state: ModelState,
    tokens: Sequence[int],
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Logits per position for a single token sequence, shape (len, vocab)."""
    ids = np.asarray(tokens, dtype=np.int64)[None, :]
    logits, _ = forward_batch(state, ids, training=training, rng=rng)
    return logits[0]


# ---------------------------------------------------------------------------
# Losses

def _log_softmax(x):
    m = x.max(axis=-1, keepdims=True)
    s = x - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def masked_next_token_loss(
    logits: np.ndarray, ids: np.ndarray, target_mask: np.ndarray
):
    """Mean over sequences of the per-sequence masked next-token NLL.

    ``target_mask[b, j]`` weights the prediction of ``ids[b, j + 1]``.
    Returns (loss, dlogits).
    """
    B, T, V = logits.shape
    targets = ids[:, 1:]
    rows = logits[:, :-1, :]
    lp = _log_softmax(rows)
    mask = target_mask.astype(rows.dtype)
    n = mask.sum(axis=1)
    if np.any(n < 1):
        raise ValueError("every sequence needs at least one unmasked target")
    nll = -np.take_along_axis(lp, targets[..., None], axis=-1)[..., 0]
    loss = float(((nll * mask).sum(axis=1) / n).mean())

    drows = np.exp(lp)
    bi = np.arange(B)[:, None]
    ti = np.arange(T - 1)[None, :]
    drows[bi, ti, targets] -= 1.0
    drows *= (mask / n[:, None] / B)[..., None]
    # Force masked rows to exact +0.0: the scaling above leaves a -0.0 at the
    # target column, which would make gradients depend bitwise on target ids
    # that carry zero weight.
    drows[mask == 0.0] = 0.0
    dlogits = np.zeros_like(logits)
    dlogits[:, :-1, :] = drows
    return loss, dlogits


def clm_loss(logits: np.ndarray, tokens: Sequence[int]) -> float:
    """-(1/n) sum of log P(token_i | preceding) over the n non-leading tokens.

    ``tokens`` must begin with the BOS id the logits were produced from; the
    prediction for each subsequent token reads the previous position's logits.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if logits.shape[0] != len(tokens):
        raise ValueError("logits and tokens must have equal length")
    if len(tokens) < 2:
        raise ValueError("need at least one predicted token")
    mask = np.ones((1, len(tokens) - 1))
    loss, _ = masked_next_token_loss(logits[None, :, :], tokens[None, :], mask)
    return loss


def sft_loss(
    logits: np.ndarray,
    tokens: Sequence[int],
    prompt_len: int,
    response_len: int,
) -> float:
    """-(1/n) sum of response-position log-probs; prompt positions are
    conditioning context only and never contribute as targets."""
    tokens = np.asarray(tokens, dtype=np.int64)
    m, n = prompt_len, response_len
    if m < 0:
        raise ValueError("prompt_len must be >= 0")
    if n < 1:
        raise ValueError("response_len must be >= 1")
    if 1 + m + n != len(tokens):
        raise ValueError(
            f"sequence length {len(tokens)} != 1 + prompt_len {m} + response_len {n}"
        )
    if logits.shape[0] != len(tokens):
        raise ValueError("logits and tokens must have equal length")
    mask = np.zeros((1, len(tokens) - 1))
    mask[0, m : m + n] = 1.0
    loss, _ = masked_next_token_loss(logits[None, :, :], tokens[None, :], mask)
    return loss


def greedy_generate(
    state: ModelState, prompt_ids: Sequence[int], max_new_tokens: int
) -> list[int]:
    """Deterministic greedy continuation; stops at EOS or when context fills."""
    ids = list(prompt_ids)
    out: list[int] = []
    for _ in range(max_new_tokens):
        if len(ids) >= state.config.max_seq_len:
            break
        logits = model_forward(state, ids)
        nxt = int(np.argmax(logits[-1]))
        ids.append(nxt)
        out.append(nxt)
        if nxt == EOS_ID:
            break
    return out


# ---------------------------------------------------------------------------
# Vocabulary

VOCAB_MAGIC = "DFVOCAB1"
DEFAULT_VOCAB_CAP = 4096


@dataclass(frozen=True)
class Vocab:
    """Token <-> id mapping; ids 0..3 are PAD, BOS, EOS, UNK."""

    tokens: tuple[str, ...]

    def __post_init__(self):
        if tuple(self.tokens[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ValueError("vocab must start with the special tokens")
        object.__setattr__(
            self, "_index", {tok: i for i, tok in enumerate(self.tokens)}
        )

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        idx = self._index
        return [idx.get(t, UNK_ID) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]


def build_vocab(
    texts: Iterable[str], tokenizer: Tokenizer, cap: int = DEFAULT_VOCAB_CAP
) -> Vocab:
    """Frequency-capped vocabulary: most frequent first, ties lexicographic."""
    counts: Counter[str] = Counter()
    for text in texts:
        counts.update(tokenizer.tokenize(text))
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:cap]
    return Vocab(tokens=SPECIAL_TOKENS + tuple(tok for tok, _ in ranked))


def detokenize(tokens: Iterable[str]) -> str:
    """Inverse-ish of the default tokenizer: spaces only between Latin runs."""
    out: list[str] = []
    prev_latin = False
    for tok in tokens:
        latin = bool(tok) and not _is_cjk(ord(tok[0]))
        if out and prev_latin and latin:
            out.append(" ")
        out.append(tok)
        prev_latin = latin
    return "".join(out)


def save_vocab(vocab: Vocab, path: str | Path) -> None:
    body = [VOCAB_MAGIC] + list(vocab.tokens[len(SPECIAL_TOKENS):])
    Path(path).write_text("\n".join(body) + "\n", encoding="utf-8")


def load_vocab(path: str | Path) -> Vocab:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != VOCAB_MAGIC:
        raise MagicMismatchError(path, f"expected magic {VOCAB_MAGIC!r}")
    return Vocab(tokens=SPECIAL_TOKENS + tuple(lines[1:]))


# ---------------------------------------------------------------------------
# Checkpoints

def _checksum(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=8).digest()


def save_checkpoint(
    path: str | Path,
    state: ModelState,
    phase: str,
    step: int = 0,
    opt_state: Mapping[str, tuple[np.ndarray, np.ndarray]] | None = None,
) -> None:
    """Write magic, phase tag, step, config, then float32 tensors in
    declaration order (optimizer moments, when present, follow as
    ``opt.m.<name>`` / ``opt.v.<name>``)."""
    if phase not in PHASES:
        raise ValueError(f"phase must be one of {PHASES}, got {phase!r}")
    out = bytearray()
    out += CHECKPOINT_MAGIC
    phase_b = phase.encode("utf-8")
    out += struct.pack("<I", len(phase_b))
    out += phase_b
    out += struct.pack("<Q", step)
    cfg_b = state.config.to_json().encode("utf-8")
    out += struct.pack("<I", len(cfg_b))
    out += cfg_b

    def emit(name: str, arr: np.ndarray) -> None:
        name_b = name.encode("utf-8")
        out_local = struct.pack("<I", len(name_b)) + name_b
        out_local += struct.pack("<I", arr.ndim)
        out_local += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out.extend(out_local)
        out.extend(np.ascontiguousarray(arr, dtype="<f4").tobytes())

    names = param_names(state.config)
    count = len(names) + 2 * len(opt_state or {})
    out += struct.pack("<I", count)
    for name in names:
        emit(name, state.params[name])
    if opt_state:
        for name in names:
            if name in opt_state:
                m, v = opt_state[name]
                emit(f"opt.m.{name}", m)
                emit(f"opt.v.{name}", v)
    out += _checksum(bytes(out))
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path: str | Path):
    """Returns (state, phase, step, opt_state); verifies magic and checksum.

    Structural parsing runs before checksum verification so a chopped file
    reports truncation rather than a checksum failure.
    """
    path = Path(path)
    data = path.read_bytes()
    if len(data) < len(CHECKPOINT_MAGIC) + 8:
        raise TruncatedArtifactError(path, "file too short for a checkpoint")
    if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise MagicMismatchError(path, f"expected magic {CHECKPOINT_MAGIC!r}")

    pos = len(CHECKPOINT_MAGIC)

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data) - 8:
            raise TruncatedArtifactError(path, f"short read at offset {pos}")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    def unpack(fmt: str):
        return struct.unpack(fmt, take(struct.calcsize(fmt)))

    (phase_len,) = unpack("<I")
    phase = take(phase_len).decode("utf-8")
    if phase not in PHASES:
        raise TruncatedArtifactError(path, f"unknown phase tag {phase!r}")
    (step,) = unpack("<Q")
    (cfg_len,) = unpack("<I")
    config = ModelConfig.from_json(take(cfg_len).decode("utf-8"))
    (count,) = unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = unpack("<I")
        name = take(name_len).decode("utf-8")
        (ndim,) = unpack("<I")
        shape = unpack(f"<{ndim}Q") if ndim else ()
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw = take(4 * size)
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    if pos != len(data) - 8:
        raise TruncatedArtifactError(path, "trailing bytes after tensors")
    if _checksum(data[:-8]) != data[-8:]:
        raise ChecksumMismatchError(path, "checkpoint checksum mismatch")

    params: dict[str, np.ndarray] = {}
    for name in param_names(config):
        if name not in tensors:
            raise TruncatedArtifactError(path, f"missing tensor {name!r}")
        arr = tensors.pop(name)
        expected = _expected_shape(config, name)
        if arr.shape != expected:
            raise TruncatedArtifactError(
                path, f"tensor {name!r} has shape {arr.shape}, expected {expected}"
            )
        params[name] = arr
    opt_state: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for name in list(tensors):
        if name.startswith("opt.m."):
            base = name[len("opt.m."):]
            v_name = f"opt.v.{base}"
            if v_name not in tensors:
                raise TruncatedArtifactError(path, f"missing tensor {v_name!r}")
            opt_state[base] = (tensors.pop(name), tensors.pop(v_name))
    for name in tensors:
        if not name.startswith("opt.v."):
            raise TruncatedArtifactError(path, f"unexpected tensor {name!r}")
    state = ModelState(config=config, params=params, dtype=np.dtype(np.float32))
    return state, phase, step, opt_state
