"""Cleaning pipeline: missingness filter, chained-equation imputation,
standardization, note tokenization, vocabulary and TF-IDF."""

from __future__ import annotations

import csv
import math
import re
import warnings
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .dataset import DataError, SurvivalDataset

PAD, UNK, CLS, SEP = "[PAD]", "[UNK]", "[CLS]", "[SEP]"
RESERVED = (PAD, UNK, CLS, SEP)

_TOKEN_SPLIT = re.compile(r"[^0-9a-z]+")


# -- missingness -------------------------------------------------------------

def missing_fraction(dataset: SurvivalDataset) -> np.ndarray:
    return np.isnan(dataset.X).mean(axis=1)


def filter_missing(dataset: SurvivalDataset, threshold: float = 0.4) -> SurvivalDataset:
    """Drop records whose missing fraction is strictly greater than ``threshold``."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    if len(dataset) == 0:
        raise DataError("cannot filter an empty dataset")
    # count-based comparison avoids 10/25 landing a hair above 0.4
    p = len(dataset.schema)
    n_missing = np.isnan(dataset.X).sum(axis=1)
    keep = np.flatnonzero(n_missing <= math.floor(threshold * p + 1e-9))
    if keep.size == 0:
        raise DataError(f"no records left after the {threshold} missingness filter")
    return dataset.subset(keep)


# -- imputation --------------------------------------------------------------

@dataclass
class Imputer:
    """Deterministic chained-equation regression imputer.

    ``coef[j]`` regresses feature j on all other features (its own entry is
    zero); ``intercept[j]`` completes the linear predictor.
    """

    means: np.ndarray
    coef: np.ndarray
    intercept: np.ndarray
    iterations: int = 10
    seed: int = 0

    def transform(self, X: np.ndarray) -> np.ndarray:
        X = np.array(X, dtype=np.float64)
        miss = np.isnan(X)
        if not miss.any():
            return X
        X[miss] = np.broadcast_to(self.means, X.shape)[miss]
        targets = np.flatnonzero(miss.any(axis=0))
        for _ in range(self.iterations):
            for j in targets:
                rows = miss[:, j]
                X[rows, j] = X[rows] @ self.coef[j] + self.intercept[j]
        return X

    def apply(self, dataset: SurvivalDataset) -> SurvivalDataset:
        return dataset.with_measurements(self.transform(dataset.X))

    def to_dict(self) -> dict:
        return {"means": self.means.tolist(), "coef": self.coef.tolist(),
                "intercept": self.intercept.tolist(), "iterations": self.iterations,
                "seed": self.seed}

    @classmethod
    def from_dict(cls, d) -> "Imputer":
        return cls(np.array(d["means"]), np.array(d["coef"]), np.array(d["intercept"]),
                   int(d["iterations"]), int(d["seed"]))


def _regress(X: np.ndarray, rows: np.ndarray, j: int) -> tuple[np.ndarray, float]:
    """Least squares of column j on the other columns over ``rows``.

    Centering first makes a constant target come back as its mean with zero
    slopes, and keeps the minimum-norm solution away from constant columns.
    """
    p = X.shape[1]
    coef = np.zeros(p)
    if p == 1:
        return coef, float(X[rows, j].mean())
    others = np.r_[0:j, j + 1:p]
    A = X[rows][:, others]
    y = X[rows, j]
    a_mean = A.mean(axis=0)
    y_mean = y.mean()
    w, *_ = np.linalg.lstsq(A - a_mean, y - y_mean, rcond=None)
    coef[others] = w
    return coef, float(y_mean - a_mean @ w)


def fit_impute(dataset: SurvivalDataset, iterations: int = 10,
               seed: int = 0) -> tuple[Imputer, SurvivalDataset]:
    """Fill missing cells by chained regression sweeps in schema order.

    ``seed`` is stored for provenance; the sweep itself draws no randomness.
    """
    X = dataset.X.copy()
    miss = np.isnan(X)
    observed_any = (~miss).any(axis=0)
    if not observed_any.all():
        name = dataset.schema.names[int(np.flatnonzero(~observed_any)[0])]
        raise DataError(f"feature {name!r} has no observed values")
    p = X.shape[1]
    means = np.nanmean(X, axis=0)
    coef = np.zeros((p, p))
    intercept = means.copy()
    X[miss] = np.broadcast_to(means, X.shape)[miss]
    targets = np.flatnonzero(miss.any(axis=0))
    for _ in range(iterations):
        for j in targets:
            coef[j], intercept[j] = _regress(X, ~miss[:, j], j)
            X[miss[:, j], j] = X[miss[:, j]] @ coef[j] + intercept[j]
    # models for the remaining features so held-out rows can be imputed too
    for j in np.setdiff1d(np.arange(p), targets):
        coef[j], intercept[j] = _regress(X, ~miss[:, j], j)
    imputer = Imputer(means, coef, intercept, iterations, seed)
    if not miss.any():
        return imputer, dataset
    return imputer, dataset.with_measurements(X)


# -- standardization ---------------------------------------------------------

@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray
    constant: np.ndarray

    @property
    def warning(self) -> bool:
        return bool(self.constant.any())

    def transform(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if np.isnan(X).any():
            raise DataError("standardization needs imputed data (missing cells present)")
        return (X - self.mean) / self.std

    def apply(self, dataset: SurvivalDataset) -> SurvivalDataset:
        return dataset.with_measurements(self.transform(dataset.X))

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(),
                "constant": self.constant.tolist()}

    @classmethod
    def from_dict(cls, d) -> "Standardizer":
        return cls(np.array(d["mean"]), np.array(d["std"]), np.array(d["constant"], dtype=bool))


def fit_standardize(dataset_or_X) -> Standardizer:
    X = dataset_or_X.X if isinstance(dataset_or_X, SurvivalDataset) else np.asarray(dataset_or_X)
    if np.isnan(X).any():
        raise DataError("standardization needs imputed data (missing cells present)")
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    constant = std <= 1e-12 * np.maximum(1.0, np.abs(mean))
    if constant.any():
        warnings.warn(f"{int(constant.sum())} constant feature(s); their scale is left at 1",
                      RuntimeWarning, stacklevel=2)
    return Standardizer(mean, np.where(constant, 1.0, std), constant)


def apply_standardize(std: Standardizer, dataset: SurvivalDataset) -> SurvivalDataset:
    return std.apply(dataset)


# -- text --------------------------------------------------------------------

def load_stopwords(path) -> frozenset[str]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return frozenset(w.strip().lower() for w in lines if w.strip())


@lru_cache(maxsize=None)
def _packaged_words(name: str) -> frozenset[str]:
    text = resources.files("notesurv").joinpath("data").joinpath(name).read_text(encoding="utf-8")
    return frozenset(w.strip() for w in text.splitlines() if w.strip())


def default_stopwords(extra: Iterable[str] = ()) -> frozenset[str]:
    """English function words plus clinical filler (doctor, nurse, ...)."""
    return (_packaged_words("stopwords_en.txt") | _packaged_words("stopwords_clinical.txt")
            | {w.lower() for w in extra})


def clean_text(note: str, stopwords: Iterable[str] | None = None) -> list[str]:
    stop = default_stopwords() if stopwords is None else stopwords
    return [t for t in _TOKEN_SPLIT.split(note.lower()) if t and t not in stop]


@dataclass
class Vocabulary:
    token_to_id: dict[str, int]
    max_size: int

    def __post_init__(self):
        for k, tok in enumerate(RESERVED):
            if self.token_to_id.get(tok) != k:
                raise ValueError("reserved tokens must occupy ids 0-3")

    def __len__(self):
        return len(self.token_to_id)

    def __getitem__(self, token: str) -> int:
        return self.token_to_id.get(token, 1)

    @property
    def id_to_token(self) -> list[str]:
        out = [""] * len(self.token_to_id)
        for tok, i in self.token_to_id.items():
            out[i] = tok
        return out

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self[t] for t in tokens]

    def save(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["token", "id"])
            for tok, i in sorted(self.token_to_id.items(), key=lambda kv: kv[1]):
                w.writerow([tok, i])

    @classmethod
    def load(cls, path, max_size: int | None = None) -> "Vocabulary":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))[1:]
        mapping = {tok: int(i) for tok, i in rows}
        return cls(mapping, max_size or len(mapping))


def build_vocab(corpus: Sequence[Sequence[str]], max_size: int = 8000) -> Vocabulary:
    """Reserved ids then most-frequent tokens, ties broken lexicographically."""
    if not corpus:
        raise ValueError("corpus must be nonempty")
    if max_size < len(RESERVED):
        raise ValueError("max_size must leave room for the reserved tokens")
    counts = Counter(t.lower() for doc in corpus for t in doc)
    for tok in RESERVED:
        counts.pop(tok.lower(), None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    mapping = {tok: k for k, tok in enumerate(RESERVED)}
    for tok, _ in ranked[: max_size - len(RESERVED)]:
        mapping[tok] = len(mapping)
    return Vocabulary(mapping, max_size)


def encode_note(vocab: Vocabulary, tokens: Sequence[str],
                max_len: int) -> tuple[np.ndarray, np.ndarray]:
    """``[CLS] tokens [SEP]`` truncated at the tail and padded to ``max_len``.

    Returns the id array and a boolean mask that is True on non-padding slots.
    """
    if max_len < 2:
        raise ValueError("max_len must be at least 2")
    body = vocab.encode(tokens[: max_len - 2])
    ids = [2, *body, 3]
    mask = np.zeros(max_len, dtype=bool)
    mask[: len(ids)] = True
    ids = np.array(ids + [0] * (max_len - len(ids)), dtype=np.int64)
    return ids, mask


@dataclass
class TfidfModel:
    vocabulary: dict[str, int]
    df: np.ndarray
    n_docs: int
    idf: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.df = np.asarray(self.df, dtype=np.float64)
        if np.any(self.df > self.n_docs):
            raise ValueError("document frequency exceeds document count")
        self.idf = np.log(self.n_docs / self.df) if self.df.size else np.zeros(0)

    def __len__(self):
        return len(self.vocabulary)

    def to_dict(self) -> dict:
        return {"vocabulary": self.vocabulary, "df": self.df.tolist(), "n_docs": self.n_docs}

    @classmethod
    def from_dict(cls, d) -> "TfidfModel":
        return cls(dict(d["vocabulary"]), np.array(d["df"]), int(d["n_docs"]))


def fit_tfidf(corpus: Sequence[Sequence[str]], max_features: int | None = None) -> TfidfModel:
    """Document frequencies over the corpus; optionally keep the most common terms."""
    if not corpus:
        raise ValueError("corpus must be nonempty")
    df = Counter(t for doc in corpus for t in set(doc))
    ranked = sorted(df.items(), key=lambda kv: (-kv[1], kv[0]))
    if max_features is not None:
        ranked = ranked[:max_features]
    terms = sorted(t for t, _ in ranked)
    return TfidfModel({t: k for k, t in enumerate(terms)},
                      np.array([df[t] for t in terms], dtype=np.float64), len(corpus))


def tfidf_vector(model: TfidfModel, tokens: Sequence[str]) -> dict[int, float]:
    """Sparse ``{term index: count * ln(N / df)}``; unseen terms are dropped."""
    counts = Counter(t for t in tokens if t in model.vocabulary)
    return {model.vocabulary[t]: c * float(model.idf[model.vocabulary[t]])
            for t, c in sorted(counts.items())}


def tfidf_matrix(model: TfidfModel, docs: Sequence[Sequence[str]]) -> np.ndarray:
    out = np.zeros((len(docs), len(model)))
    for i, doc in enumerate(docs):
        for k, w in tfidf_vector(model, doc).items():
            out[i, k] = w
    return out
