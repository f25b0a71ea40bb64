"""Small BERT-style note encoder built on :mod:`notesurv.autodiff`.

Inputs are id matrices of shape (batch, length) with a boolean padding mask.
The representation of a note is the final-layer output at position 0, the
``[CLS]`` slot.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor

_RESIDUAL_SCALE = 1.0 / math.sqrt(2.0)


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 2
    heads: int = 4
    d_model: int = 64
    max_len: int = 128
    dropout: float = 0.1
    d_ff: int | None = None
    activation: str = "relu"

    def __post_init__(self):
        if min(self.heads, self.d_model, self.max_len) <= 0 or self.layers < 0:
            raise ValueError("encoder sizes must be positive")
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.activation not in ad.ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def d_k(self) -> int:
        return self.d_model // self.heads

    @property
    def ff_width(self) -> int:
        return self.d_ff or 2 * self.d_model


def init_encoder(params: ParamStore, config: EncoderConfig, vocab_size: int,
                 rng: np.random.Generator, prefix: str = "enc.") -> None:
    d, dk = config.d_model, config.d_k
    scale = 1.0 / math.sqrt(d)
    params.add(prefix + "token", rng.normal(0.0, scale, (vocab_size, d)))
    params.add(prefix + "position", rng.normal(0.0, scale, (config.max_len, d)))
    params.add(prefix + "segment", rng.normal(0.0, scale, (2, d)))
    for layer in range(config.layers):
        p = f"{prefix}L{layer}."
        for h in range(config.heads):
            params.add_weight(f"{p}Wq{h}", (d, dk), rng)
            params.add_weight(f"{p}Wk{h}", (d, dk), rng)
            params.add_weight(f"{p}Wv{h}", (d, dk), rng)
        params.add_weight(p + "Wo", (config.heads * dk, d), rng)
        params.add_weight(p + "W1", (d, config.ff_width), rng)
        params.add_bias(p + "b1", (config.ff_width,))
        params.add_weight(p + "W2", (config.ff_width, d), rng)
        params.add_bias(p + "b2", (d,))


def embed(params: ParamStore, ids, segments=None, prefix: str = "enc.") -> Tensor:
    """token[id] + position[i] + segment[seg] for every slot."""
    ids = np.asarray(ids, dtype=np.int64)
    length = ids.shape[-1]
    position = params[prefix + "position"]
    if length > position.shape[0]:
        raise ValueError(f"sequence length {length} exceeds max_len {position.shape[0]}")
    segments = np.zeros_like(ids) if segments is None else np.asarray(segments, dtype=np.int64)
    tok = ad.embedding(params[prefix + "token"], ids)
    seg = ad.embedding(params[prefix + "segment"], segments)
    pos = ad.embedding(position, np.arange(length))
    return tok + pos + seg


def scaled_dot_attention(Q, K, V, mask=None) -> tuple[Tensor, Tensor]:
    """softmax(Q K^T / sqrt(d_k)) V with padded keys excluded.

    ``mask`` is True on valid positions, shape (..., L).  Returns the output
    and the weight tensor of shape (..., L, L).
    """
    Q, K, V = ad.as_tensor(Q), ad.as_tensor(K), ad.as_tensor(V)
    if Q.shape[-1] != K.shape[-1]:
        raise ad.ShapeError(f"query width {Q.shape[-1]} != key width {K.shape[-1]}")
    if K.shape[-2] != V.shape[-2]:
        raise ad.ShapeError(f"{K.shape[-2]} keys but {V.shape[-2]} values")
    scores = ad.matmul(Q, ad.transpose(K)) / math.sqrt(Q.shape[-1])
    key_mask = None
    if mask is not None:
        key_mask = np.expand_dims(np.asarray(mask, dtype=bool), -2)
    weights = ad.softmax_rows(scores, key_mask)
    return ad.matmul(weights, V), weights


def multi_head(X, params: ParamStore, heads: int, mask=None,
               prefix: str = "enc.L0.") -> tuple[Tensor, list[Tensor]]:
    """Concat(head_1..head_h) W^O with head_i = attention(X Wq_i, X Wk_i, X Wv_i)."""
    X = ad.as_tensor(X)
    wo = params[prefix + "Wo"]
    if X.shape[-1] != params[prefix + "Wq0"].shape[0]:
        raise ad.ShapeError(f"input width {X.shape[-1]} does not match d_model")
    if f"{prefix}Wq{heads - 1}" not in params or f"{prefix}Wq{heads}" in params:
        raise ValueError(f"parameter store does not hold {heads} heads under {prefix!r}")
    outputs, weights = [], []
    for h in range(heads):
        out, w = scaled_dot_attention(X @ params[f"{prefix}Wq{h}"],
                                      X @ params[f"{prefix}Wk{h}"],
                                      X @ params[f"{prefix}Wv{h}"], mask)
        outputs.append(out)
        weights.append(w)
    return ad.concat(outputs, axis=-1) @ wo, weights


def encode(params: ParamStore, ids, segments, mask, config: EncoderConfig,
           training: bool = False, rng: np.random.Generator | None = None,
           prefix: str = "enc.") -> tuple[Tensor, list[list[np.ndarray]]]:
    """Run the encoder stack.

    Returns the [CLS] vectors, shape (..., d_model), and the attention
    weights indexed ``[layer][head]`` as arrays of shape (..., L, L).
    """
    act = ad.ACTIVATIONS[config.activation]
    X = embed(params, ids, segments, prefix)
    attention = []
    for layer in range(config.layers):
        p = f"{prefix}L{layer}."
        a, w = multi_head(X, params, config.heads, mask, p)
        attention.append([t.data for t in w])
        X = (X + ad.dropout(a, config.dropout, rng, training)) * _RESIDUAL_SCALE
        f = act(X @ params[p + "W1"] + params[p + "b1"]) @ params[p + "W2"] + params[p + "b2"]
        X = (X + ad.dropout(f, config.dropout, rng, training)) * _RESIDUAL_SCALE
    return X[..., 0, :], attention


@dataclass
class AttentionDump:
    """Attention maps for one note, trimmed to its non-padding positions."""

    note_id: str
    tokens: list[str]
    weights: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)

    def to_dict(self) -> dict:
        layers = sorted({layer for layer, _ in self.weights})
        return {
            "note_id": self.note_id,
            "tokens": list(self.tokens),
            "layers": [
                {"layer": layer,
                 "heads": [{"head": head, "weights": self.weights[(layer, head)].tolist()}
                           for (l2, head) in sorted(self.weights) if l2 == layer]}
                for layer in layers
            ],
        }

    @classmethod
    def from_dict(cls, d) -> "AttentionDump":
        weights = {}
        for layer in d["layers"]:
            for head in layer["heads"]:
                weights[(layer["layer"], head["head"])] = np.array(head["weights"],
                                                                   dtype=np.float64)
        return cls(d["note_id"], list(d["tokens"]), weights)


def dump_attention(dumps, path) -> Path:
    """Write one dump, or a list of them, as JSON."""
    single = isinstance(dumps, AttentionDump)
    items = [dumps] if single else list(dumps)
    if not items or any(not d.weights for d in items):
        raise ValueError("nothing to dump: attention weights are empty")
    payload = items[0].to_dict() if single else [d.to_dict() for d in items]
    path = Path(path)
    path.write_text(json.dumps(payload))
    return path


def load_attention(path):
    blob = json.loads(Path(path).read_text())
    if isinstance(blob, list):
        return [AttentionDump.from_dict(b) for b in blob]
    return AttentionDump.from_dict(blob)
