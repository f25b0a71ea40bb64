"""Survival records, CSV ingestion, admission aggregation and simulation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

ENDOGENOUS = "endogenous"
EXOGENOUS = "exogenous"

DEFAULT_ENDOGENOUS = (
    "blood_pressure", "temperature", "respiratory_rate", "pao2", "hematocrit",
    "wbc", "creatinine", "chloride", "lactic_acid", "bun", "sodium", "glucose",
    "paco2", "ph", "gcs", "heart_rate", "fio2", "potassium", "calcium", "ptt",
    "inr",
)
DEFAULT_EXOGENOUS = ("weight", "gender", "ethnicity", "age")


class DataError(ValueError):
    """Malformed input data."""


@dataclass(frozen=True)
class FeatureSchema:
    names: tuple[str, ...]
    groups: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "groups", tuple(self.groups))
        if len(set(self.names)) != len(self.names):
            raise DataError("feature names must be unique")
        if len(self.names) != len(self.groups):
            raise DataError("one group tag per feature is required")
        bad = set(self.groups) - {ENDOGENOUS, EXOGENOUS}
        if bad:
            raise DataError(f"unknown feature groups {sorted(bad)}")

    def __len__(self):
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def mask(self, group: str) -> np.ndarray:
        return np.array([g == group for g in self.groups])

    @classmethod
    def default(cls) -> "FeatureSchema":
        return cls(DEFAULT_ENDOGENOUS + DEFAULT_EXOGENOUS,
                   (ENDOGENOUS,) * len(DEFAULT_ENDOGENOUS)
                   + (EXOGENOUS,) * len(DEFAULT_EXOGENOUS))

    @classmethod
    def generic(cls, p: int, prefix: str = "x") -> "FeatureSchema":
        return cls(tuple(f"{prefix}{k}" for k in range(p)), (ENDOGENOUS,) * p)

    def to_dict(self) -> dict:
        return {"names": list(self.names), "groups": list(self.groups)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "FeatureSchema":
        return cls(tuple(d["names"]), tuple(d["groups"]))


@dataclass(frozen=True)
class SurvivalRecord:
    """One admission.  Missing measurements are NaN in ``measurements``."""

    patient_id: str
    event_time: float
    event: int
    measurements: np.ndarray
    note_text: str = ""

    def __post_init__(self):
        m = np.array(self.measurements, dtype=np.float64)
        m.setflags(write=False)
        object.__setattr__(self, "measurements", m)
        if not (math.isfinite(self.event_time) and self.event_time > 0):
            raise DataError(f"record {self.patient_id}: event_time must be finite and > 0")
        if self.event not in (0, 1):
            raise DataError(f"record {self.patient_id}: event must be 0 or 1")

    @property
    def missing(self) -> np.ndarray:
        return np.isnan(self.measurements)


@dataclass(frozen=True)
class SurvivalDataset:
    schema: FeatureSchema
    records: tuple[SurvivalRecord, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        p = len(self.schema)
        for r in self.records:
            if r.measurements.shape != (p,):
                raise DataError(f"record {r.patient_id}: expected {p} measurements, "
                                f"got {r.measurements.shape[0]}")

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]

    @property
    def times(self) -> np.ndarray:
        return np.array([r.event_time for r in self.records], dtype=np.float64)

    @property
    def events(self) -> np.ndarray:
        return np.array([r.event for r in self.records], dtype=np.int64)

    @property
    def X(self) -> np.ndarray:
        if not self.records:
            return np.empty((0, len(self.schema)))
        return np.vstack([r.measurements for r in self.records])

    @property
    def notes(self) -> list[str]:
        return [r.note_text for r in self.records]

    @property
    def ids(self) -> list[str]:
        return [r.patient_id for r in self.records]

    def subset(self, indices: Iterable[int]) -> "SurvivalDataset":
        return SurvivalDataset(self.schema, tuple(self.records[i] for i in indices))

    def with_measurements(self, X: np.ndarray) -> "SurvivalDataset":
        X = np.asarray(X, dtype=np.float64)
        return SurvivalDataset(self.schema, tuple(
            replace(r, measurements=x) for r, x in zip(self.records, X)))

    def require_events(self):
        if not np.any(self.events == 1):
            raise DataError("at least one observed event (event = 1) is required")


@dataclass(frozen=True)
class RawAdmissionEvent:
    """A timestamped measurement ``(feature, value)`` or a note fragment."""

    patient_id: str
    timestamp: float
    feature: str | None = None
    value: object = None
    note: str | None = None

    def __post_init__(self):
        if self.timestamp < 0:
            raise DataError("event timestamp must be >= 0")


# -- CSV ---------------------------------------------------------------------

def _header(schema: FeatureSchema) -> list[str]:
    return ["patient_id", "event_time", "event", *schema.names, "note"]


def save_dataset(dataset: SurvivalDataset, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        # non-numeric cells (ids, notes, blanks) are quoted; floats keep repr precision
        writer = csv.writer(fh, quoting=csv.QUOTE_NONNUMERIC)
        writer.writerow(_header(dataset.schema))
        for r in dataset.records:
            cells = ["" if np.isnan(v) else float(v) for v in r.measurements]
            writer.writerow([r.patient_id, float(r.event_time), r.event, *cells,
                             r.note_text])


def load_dataset(path, schema: FeatureSchema | None = None) -> SurvivalDataset:
    """Read the ``patient_id,event_time,event,<features>,note`` CSV layout.

    Without an explicit schema the feature columns are taken from the header
    and tagged endogenous, except the four default demographic names.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    header = rows[0]
    if header[:3] != ["patient_id", "event_time", "event"] or header[-1] != "note":
        raise DataError(f"{path}: header must be patient_id,event_time,event,<features>,note")
    features = header[3:-1]
    if schema is None:
        schema = FeatureSchema(tuple(features), tuple(
            EXOGENOUS if f in DEFAULT_EXOGENOUS else ENDOGENOUS for f in features))
    elif list(schema.names) != features:
        raise DataError(f"{path}: header features do not match the schema")

    records = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise DataError(f"{path}: row {lineno}: expected {len(header)} columns, got {len(row)}")
        try:
            t = float(row[1])
        except ValueError:
            raise DataError(f"{path}: row {lineno}, column event_time: not a number") from None
        if not (math.isfinite(t) and t > 0):
            raise DataError(f"{path}: row {lineno}, column event_time: must be finite and > 0")
        if row[2].strip() not in ("0", "1"):
            raise DataError(f"{path}: row {lineno}, column event: must be 0 or 1")
        values = []
        for name, cell in zip(features, row[3:-1]):
            if cell.strip() == "":
                values.append(np.nan)
                continue
            try:
                values.append(float(cell))
            except ValueError:
                raise DataError(f"{path}: row {lineno}, column {name}: not a number") from None
        records.append(SurvivalRecord(row[0], t, int(row[2]), np.array(values), row[-1]))
    return SurvivalDataset(schema, tuple(records))


# -- aggregation -------------------------------------------------------------

def aggregate_admission(events: Sequence[RawAdmissionEvent], schema: FeatureSchema,
                        window: float = 4.0) -> tuple[np.ndarray, str]:
    """Average in-window measurements and join in-window notes.

    The window is ``[0, window)`` hours.  Non-numeric values are ignored, so
    a feature with only such entries ends up missing.
    """
    if window <= 0:
        raise ValueError("window must be positive")
    if len({e.patient_id for e in events}) > 1:
        raise DataError("aggregate_admission expects events for a single patient")
    sums = np.zeros(len(schema))
    counts = np.zeros(len(schema))
    notes = []
    for e in events:
        if not (0 <= e.timestamp < window):
            continue
        if e.note is not None:
            notes.append((e.timestamp, e.note))
            continue
        if e.feature not in schema.names:
            continue
        try:
            v = float(e.value)
        except (TypeError, ValueError):
            continue
        if not math.isfinite(v):
            continue
        k = schema.index(e.feature)
        sums[k] += v
        counts[k] += 1
    with np.errstate(invalid="ignore"):
        means = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    # stable sort keeps arrival order for equal timestamps
    notes.sort(key=lambda item: item[0])
    text = " ".join(n for _, n in notes if n)
    return means, text


# -- risk sets ---------------------------------------------------------------

def risk_set(dataset_or_times, i: int) -> np.ndarray:
    """Indices j with T_j >= T_i."""
    times = (dataset_or_times.times if isinstance(dataset_or_times, SurvivalDataset)
             else np.asarray(dataset_or_times, dtype=np.float64))
    return np.flatnonzero(times >= times[i])


# -- simulation --------------------------------------------------------------

FILLER_WORDS = (
    "patient", "admitted", "after", "fall", "motor", "vehicle", "collision",
    "reports", "pain", "ct", "scan", "shows", "chest", "abdomen", "pelvis",
    "fracture", "rib", "femur", "wrist", "laceration", "scalp", "repair",
    "iv", "fluids", "given", "monitor", "vitals", "overnight", "plan",
    "follow", "surgery", "consult", "tube", "placed", "position", "line",
    "cm", "carina", "endotracheal", "right", "left", "lateral", "apical",
    "cap", "soft", "tissue", "swelling", "mild", "noted", "exam",
)
NOTE_STOPWORDS = ("the", "and", "of", "was", "is", "with", "nurse", "doctor", "measurement")


def simulate(n: int, beta: Sequence[float], baseline_rate: float = 0.01,
             censor_horizon: float = 200.0,
             vocab_signal: Mapping[str, float] | None = None, seed: int = 0,
             schema: FeatureSchema | None = None, token_prob: float = 0.3,
             note_length: int = 12, missing_rate: float = 0.0,
             return_risk: bool = False):
    """Draw a synthetic cohort with a known proportional-hazards log-risk.

    Features are standard normal.  Each signal token appears in a note with
    probability ``token_prob`` and adds its effect to the log-risk.  Event
    times are exponential with rate ``baseline_rate * exp(risk)``; censoring
    is uniform on (0, censor_horizon].  ``missing_rate`` blanks measurement
    cells completely at random after the outcome is drawn.

    With ``return_risk`` the realised true log-risk vector is returned too.
    """
    data, risk = _simulate(n, beta, baseline_rate, censor_horizon, vocab_signal, seed,
                           schema, token_prob, note_length, missing_rate)
    return (data, risk) if return_risk else data


def _simulate(n, beta, baseline_rate, censor_horizon, vocab_signal, seed, schema,
              token_prob, note_length, missing_rate):
    if n <= 0:
        raise ValueError("n must be positive")
    if baseline_rate <= 0:
        raise ValueError("baseline_rate must be positive")
    if censor_horizon <= 0:
        raise ValueError("censor_horizon must be positive")
    beta = np.asarray(beta, dtype=np.float64)
    schema = schema or FeatureSchema.generic(beta.size)
    if len(schema) != beta.size:
        raise ValueError("schema length must match beta")
    signal = dict(sorted((vocab_signal or {}).items()))
    rng = np.random.default_rng(seed)

    X = rng.standard_normal((n, beta.size))
    present = rng.random((n, len(signal))) < token_prob
    effects = np.array(list(signal.values()), dtype=np.float64)
    risk = X @ beta + (present @ effects if signal else 0.0)
    event_time = rng.exponential(1.0, size=n) / (baseline_rate * np.exp(risk))
    censor = censor_horizon * (1.0 - rng.random(n))  # (0, horizon]
    event = (event_time <= censor).astype(int)
    observed = np.minimum(event_time, censor)
    # guard against float underflow to exactly 0
    observed = np.maximum(observed, np.finfo(float).tiny)

    filler = np.array(FILLER_WORDS + NOTE_STOPWORDS)
    signal_tokens = list(signal)
    notes = []
    for i in range(n):
        words = list(rng.choice(filler, size=note_length))
        for k in np.flatnonzero(present[i]):
            words.insert(int(rng.integers(0, len(words) + 1)), signal_tokens[k])
        notes.append(" ".join(words))

    if missing_rate > 0:
        X = np.where(rng.random(X.shape) < missing_rate, np.nan, X)

    records = tuple(
        SurvivalRecord(f"p{i:05d}", float(observed[i]), int(event[i]), X[i], notes[i])
        for i in range(n))
    return SurvivalDataset(schema, records), risk
