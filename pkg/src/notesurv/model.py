"""Neural log-risk model over note features and measurements.

The network maps ``[text features || standardized measurements]`` through a
feed-forward stack to one scalar per record.  Trained with BCE it predicts
mortality as ``sigmoid(output)``; trained with the partial likelihood the
output is the log-risk of a proportional-hazards model.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, ParamStore, Tensor
from .dataset import DataError, FeatureSchema, SurvivalDataset, SurvivalRecord
from .encoder import AttentionDump, EncoderConfig, encode, init_encoder
from .preprocess import (
    CLS, SEP, TfidfModel, Vocabulary, build_vocab, clean_text, default_stopwords,
    encode_note, fit_tfidf, tfidf_matrix,
)
from .survival import BaselineHazard, bce_loss, breslow, pll_loss

log = logging.getLogger(__name__)

ENCODERS = ("none", "tfidf", "attention")
LOSSES = {"bce": "mortality", "pll": "survival"}


@dataclass(frozen=True)
class ModelConfig:
    encoder: str = "none"
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "relu"
    dropout: float = 0.1
    encoder_config: EncoderConfig = field(default_factory=EncoderConfig)
    vocab_size: int = 8000
    tfidf_features: int | None = 2000
    extra_stopwords: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.encoder not in ENCODERS:
            raise ValueError(f"encoder must be one of {ENCODERS}, got {self.encoder!r}")
        if self.activation not in ad.ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["extra_stopwords"] = list(self.extra_stopwords)
        return d

    @classmethod
    def from_dict(cls, d) -> "ModelConfig":
        d = dict(d)
        d["encoder_config"] = EncoderConfig(**d["encoder_config"])
        d["hidden"] = tuple(d["hidden"])
        d["extra_stopwords"] = tuple(d["extra_stopwords"])
        return cls(**d)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    epochs: int = 4
    lr: float = 4e-2
    seed: int = 0
    encoder_lr: float | None = None

    @classmethod
    def for_task(cls, task: str, **overrides) -> "TrainConfig":
        base = {"mortality": cls(16, 4, 4e-2), "survival": cls(24, 4, 1e-2)}[task]
        return replace(base, **overrides)


@dataclass
class NeuralSurvModel:
    config: ModelConfig
    mode: str
    schema: FeatureSchema
    params: ParamStore
    vocab: Vocabulary | None = None
    tfidf: TfidfModel | None = None
    baseline: BaselineHazard | None = None
    loss_history: list[float] = field(default_factory=list)

    @property
    def stopwords(self):
        return default_stopwords(self.config.extra_stopwords)

    # -- featurization --

    def tokens(self, notes: Sequence[str]) -> list[list[str]]:
        stop = self.stopwords
        return [clean_text(n, stop) for n in notes]

    def inputs(self, dataset: SurvivalDataset) -> dict:
        if dataset.schema != self.schema:
            raise DataError("dataset schema does not match the model schema")
        X = dataset.X
        if np.isnan(X).any():
            raise DataError("model inputs must be imputed (missing cells present)")
        out = {"X": X}
        if self.config.encoder == "tfidf":
            out["text"] = tfidf_matrix(self.tfidf, self.tokens(dataset.notes))
        elif self.config.encoder == "attention":
            max_len = self.config.encoder_config.max_len
            encoded = [encode_note(self.vocab, toks, max_len)
                       for toks in self.tokens(dataset.notes)]
            out["ids"] = np.array([e[0] for e in encoded]).reshape(len(encoded), max_len)
            out["mask"] = np.array([e[1] for e in encoded]).reshape(len(encoded), max_len)
        return out

    @staticmethod
    def batch(inputs: dict, index) -> dict:
        """Rows ``index`` of every input; id matrices are cut to the longest note.

        Trailing all-padding columns change nothing: padded keys get zero
        weight and only the [CLS] row is read out.
        """
        out = {k: v[index] for k, v in inputs.items()}
        if "mask" in out and out["mask"].size:
            width = max(2, int(out["mask"].sum(axis=1).max()))
            out["ids"] = out["ids"][:, :width]
            out["mask"] = out["mask"][:, :width]
        return out

    # -- network --

    def forward(self, inputs: dict, training: bool = False,
                rng: np.random.Generator | None = None):
        """Return (output Tensor of shape (B,), attention maps or None)."""
        cfg = self.config
        parts = []
        attention = None
        if cfg.encoder == "tfidf":
            parts.append(Tensor(inputs["text"]))
        elif cfg.encoder == "attention":
            cls_vec, attention = encode(self.params, inputs["ids"], None, inputs["mask"],
                                        cfg.encoder_config, training, rng)
            parts.append(cls_vec)
        parts.append(Tensor(inputs["X"]))
        z = parts[0] if len(parts) == 1 else ad.concat(parts, axis=-1)
        act = ad.ACTIVATIONS[cfg.activation]
        for k in range(len(cfg.hidden)):
            z = act(z @ self.params[f"ff.W{k}"] + self.params[f"ff.b{k}"])
            z = ad.dropout(z, cfg.dropout, rng, training)
        out = z @ self.params["out.W"] + self.params["out.b"]
        return ad.reshape(out, (out.shape[0],)), attention

    def output(self, dataset: SurvivalDataset, chunk: int = 256) -> np.ndarray:
        inputs = self.inputs(dataset)
        n = len(dataset)
        parts = [self.forward(self.batch(inputs, np.arange(k, min(n, k + chunk))))[0].data
                 for k in range(0, n, chunk)]
        return np.concatenate(parts) if parts else np.zeros(0)

    def predict(self, data) -> np.ndarray | float:
        """Mortality probability or log-risk; dropout is off."""
        single = isinstance(data, SurvivalRecord)
        ds = SurvivalDataset(self.schema, (data,)) if single else data
        out = self.output(ds)
        if self.mode == "mortality":
            out = ad.sigmoid(out).data
        return float(out[0]) if single else out

    def log_risk(self, record: SurvivalRecord) -> float:
        return float(self.output(SurvivalDataset(self.schema, (record,)))[0])

    def attention(self, record: SurvivalRecord) -> AttentionDump:
        if self.config.encoder != "attention":
            raise ValueError("attention maps need the attention encoder")
        ds = SurvivalDataset(self.schema, (record,))
        inputs = self.inputs(ds)
        _, maps = self.forward(inputs)
        toks = self.tokens([record.note_text])[0]
        length = int(inputs["mask"][0].sum())
        labels = [CLS, *toks[: length - 2], SEP]
        weights = {(layer, head): maps[layer][head][0, :length, :length].copy()
                   for layer in range(len(maps)) for head in range(len(maps[layer]))}
        return AttentionDump(record.patient_id, labels, weights)

    # -- persistence --

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "mode": self.mode,
            "schema": self.schema.to_dict(),
            "params": self.params.to_dict(),
            "vocab": dict(self.vocab.token_to_id) if self.vocab else None,
            "tfidf": self.tfidf.to_dict() if self.tfidf else None,
            "baseline": self.baseline.to_dict() if self.baseline else None,
            "loss_history": list(self.loss_history),
        }

    @classmethod
    def from_dict(cls, d) -> "NeuralSurvModel":
        config = ModelConfig.from_dict(d["config"])
        return cls(
            config, d["mode"], FeatureSchema.from_dict(d["schema"]),
            ParamStore.from_dict(d["params"]),
            Vocabulary(dict(d["vocab"]), config.vocab_size) if d["vocab"] else None,
            TfidfModel.from_dict(d["tfidf"]) if d["tfidf"] else None,
            BaselineHazard.from_dict(d["baseline"]) if d["baseline"] else None,
            list(d["loss_history"]),
        )


def build_model(dataset: SurvivalDataset, config: ModelConfig, mode: str,
                rng: np.random.Generator) -> NeuralSurvModel:
    """Fit the text featurizer on ``dataset`` and initialise parameters."""
    params = ParamStore()
    model = NeuralSurvModel(config, mode, dataset.schema, params)
    width = len(dataset.schema)
    if config.encoder == "tfidf":
        model.tfidf = fit_tfidf(model.tokens(dataset.notes), config.tfidf_features)
        width += len(model.tfidf)
    elif config.encoder == "attention":
        model.vocab = build_vocab(model.tokens(dataset.notes), config.vocab_size)
        init_encoder(params, config.encoder_config, len(model.vocab), rng)
        width += config.encoder_config.d_model
    for k, h in enumerate(config.hidden):
        params.add_weight(f"ff.W{k}", (width, h), rng)
        params.add_bias(f"ff.b{k}", (h,))
        width = h
    params.add_weight("out.W", (width, 1), rng)
    params.add_bias("out.b", (1,))
    return model


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    return [order[k:k + batch_size] for k in range(0, n, batch_size)]


def fit_neural(dataset: SurvivalDataset, model_config: ModelConfig, loss: str = "pll",
               train_config: TrainConfig | None = None) -> NeuralSurvModel:
    """Train with minibatch Adam.

    ``loss="bce"`` fits mortality (label = event flag); ``loss="pll"`` fits
    the partial likelihood with risk sets taken inside each minibatch.  A
    minibatch without events is skipped under PLL.
    """
    if loss not in LOSSES:
        raise ValueError(f"loss must be 'bce' or 'pll', got {loss!r}")
    mode = LOSSES[loss]
    train_config = train_config or TrainConfig.for_task(mode)
    if loss == "pll":
        dataset.require_events()
    init_seq, shuffle_seq, drop_seq = np.random.SeedSequence(train_config.seed).spawn(3)
    model = build_model(dataset, model_config, mode, np.random.default_rng(init_seq))
    shuffle_rng = np.random.default_rng(shuffle_seq)
    drop_rng = np.random.default_rng(drop_seq)

    inputs = model.inputs(dataset)
    times, events = dataset.times, dataset.events
    group_lr = {"enc.": train_config.encoder_lr} if train_config.encoder_lr else None
    opt = Adam(model.params, lr=train_config.lr, group_lr=group_lr)
    for epoch in range(train_config.epochs):
        losses = []
        for idx in _batches(len(dataset), train_config.batch_size, shuffle_rng):
            if loss == "pll" and not events[idx].any():
                continue
            out, _ = model.forward(model.batch(inputs, idx), training=True, rng=drop_rng)
            if loss == "bce":
                value = bce_loss(ad.sigmoid(out), events[idx].astype(np.float64))
            else:
                value = pll_loss(out, times[idx], events[idx])
            ad.backward(value, model.params)
            opt.step()
            losses.append(value.item())
        if not losses:
            raise DataError(f"epoch {epoch}: every minibatch lacked an observed event")
        model.loss_history.append(float(np.mean(losses)))
        log.debug("epoch %d loss %.6f", epoch, model.loss_history[-1])

    if mode == "survival":
        model.baseline = breslow(times, events, model.output(dataset))
    return model


def predict(model: NeuralSurvModel, record) -> float | np.ndarray:
    return model.predict(record)
