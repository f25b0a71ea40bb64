"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the verdict lines are printed
even when output capture is on.
"""

import json
import math
import time

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from notesurv import autodiff as ad
from notesurv import harness
from notesurv.autodiff import ParamStore, grad_check
from notesurv.dataset import FeatureSchema, SurvivalDataset, SurvivalRecord, simulate
from notesurv.encoder import AttentionDump, dump_attention, encode, load_attention
from notesurv.encoder import scaled_dot_attention
from notesurv.harness import ExperimentConfig, load_config
from notesurv.metrics import c_index, roc_auc
from notesurv.model import ModelConfig, TrainConfig, fit_neural
from notesurv.preprocess import (
    clean_text, filter_missing, fit_impute, fit_standardize, fit_tfidf, tfidf_vector,
)
from notesurv.survival import bce_loss, breslow, fit_cox, pll_loss, survival_curve

from conftest import BENCH
from oracles import auc_direct, breslow_direct, c_index_direct, pll_direct
from test_autodiff import PRIMITIVE_CASES, _probe, _store
from test_encoder import _batch, _encoder, _kink_distance

SEEDS = range(10)


class Verdict:
    """Collects named checks and prints one verdict line for a criterion."""

    def __init__(self, number, title, budget, capsys):
        self.number, self.title, self.budget = number, title, budget
        self.capsys = capsys
        self.failures = []
        self.start = time.perf_counter()

    def check(self, ok, what):
        if not ok:
            self.failures.append(what)

    def finish(self):
        elapsed = time.perf_counter() - self.start
        self.check(elapsed < self.budget, f"runtime {elapsed:.1f}s over {self.budget}s")
        status = "PASS" if not self.failures else "FAIL"
        detail = "" if not self.failures else " | " + "; ".join(self.failures[:5])
        with self.capsys.disabled():
            print(f"\n{status} criterion {self.number}: {self.title} ({elapsed:.1f}s){detail}")
        assert not self.failures, self.failures


def _random_instance(rng, n_max=12):
    n = int(rng.integers(1, n_max + 1))
    h = rng.normal(scale=1.5, size=n)
    t = rng.integers(1, 6, size=n).astype(float)
    d = rng.integers(0, 2, size=n)
    d[rng.integers(n)] = 1
    return h, t, d


def test_c1_gradient_correctness(capsys, monkeypatch):
    v = Verdict(1, "gradient correctness", 60, capsys)
    worst = 0.0
    for case, (shapes, program) in sorted(PRIMITIVE_CASES.items()):
        for seed in SEEDS:
            params = _store(np.random.default_rng(seed), **shapes)
            err = grad_check(lambda p: _probe(program(p), seed), params)
            worst = max(worst, err)
            v.check(err < 1e-4, f"{case} seed {seed}: {err:.2e}")
    for seed in SEEDS:
        activation = "selu" if seed % 2 else "relu"
        for draw in range(seed, seed + 1000, 100):
            cfg, params = _encoder(draw, activation=activation, dropout=0.2)
            ids, mask = _batch(draw)
            if _kink_distance(monkeypatch, cfg, params, ids, mask, draw) > 1e-3:
                break
        probe = np.random.default_rng(draw + 99).normal(size=(2, 8))

        def f(p):
            cls, _ = encode(p, ids, None, mask, cfg, training=True,
                            rng=np.random.default_rng(draw))
            return ad.sum_(cls * probe)

        err = grad_check(f, params)
        worst = max(worst, err)
        v.check(err < 1e-4, f"encoder seed {seed}: {err:.2e}")
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        params = ParamStore()
        params.add("z", rng.normal(size=8))
        y = rng.integers(0, 2, size=8).astype(float)
        err = grad_check(lambda p: bce_loss(ad.sigmoid(p["z"]), y), params)
        v.check(err < 1e-4, f"bce seed {seed}: {err:.2e}")
        t = rng.integers(1, 5, size=10).astype(float)
        d = rng.integers(0, 2, size=10)
        d[0] = 1
        params = ParamStore()
        params.add("h", rng.normal(size=10))
        err = grad_check(lambda p: pll_loss(p["h"], t, d), params)
        worst = max(worst, err)
        v.check(err < 1e-4, f"pll seed {seed}: {err:.2e}")
    v.title += f", worst relative error {worst:.1e}"
    v.finish()


def test_c2_survival_math_oracles(capsys):
    v = Verdict(2, "oracle equivalence of survival math", 60, capsys)
    rng = np.random.default_rng(2024)
    for k in range(100):
        h, t, d = _random_instance(rng)
        err = abs(pll_loss(h, t, d) - pll_direct(list(h), list(t), list(d)))
        v.check(err < 1e-9, f"pll instance {k}: {err:.1e}")
        base = breslow(t, d, h)
        for q in [0.5, *np.unique(t), 7.0]:
            err = abs(base(q) - breslow_direct(t, d, h, q))
            v.check(err < 1e-9, f"breslow instance {k} t={q}: {err:.1e}")
        comparable = any(d[i] and (t[i] < t[j] or (t[i] == t[j] and not d[j]))
                         for i in range(len(t)) for j in range(len(t)))
        if comparable:
            r = np.round(h, 1)  # rounding creates tied risks
            err = abs(c_index(r, t, d) - c_index_direct(r, t, d))
            v.check(err < 1e-9, f"c_index instance {k}: {err:.1e}")
        labels = rng.integers(0, 2, size=max(len(h), 2))
        labels[:2] = [0, 1]
        scores = np.round(rng.normal(size=labels.size), 1)
        err = abs(roc_auc(scores, labels).auc - auc_direct(scores, labels))
        v.check(err < 1e-9, f"roc_auc instance {k}: {err:.1e}")
    v.finish()


def test_c3_cox_recovery(capsys):
    v = Verdict(3, "Cox coefficient recovery", 120, capsys)
    truth = np.array(BENCH["beta"])
    recovered = 0
    for seed in range(5):
        data = simulate(2000, seed=seed, **BENCH)
        censored = 1 - data.events.mean()
        v.check(0.2 < censored < 0.4, f"seed {seed}: censoring {censored:.2f}")
        beta = fit_cox(data).beta
        recovered += bool(np.all(np.abs(beta - truth) <= 0.1))
        held, risk = simulate(2000, seed=100 + seed, return_risk=True, **BENCH)
        gap = abs(c_index(held.X @ beta, held.times, held.events)
                  - c_index(risk, held.times, held.events))
        v.check(gap <= 0.02, f"seed {seed}: held-out C-index gap {gap:.3f}")
    v.check(recovered >= 4, f"only {recovered}/5 seeds within 0.1")
    v.title += f", {recovered}/5 seeds within 0.1"
    v.finish()


def test_c4_neural_cox_consistency(cox_bench, capsys):
    v = Verdict(4, "linear neural model matches Cox", 120, capsys)
    model = fit_neural(cox_bench, ModelConfig(hidden=(), dropout=0.0), "pll",
                       TrainConfig(batch_size=len(cox_bench), epochs=400, lr=1e-2))
    eta = model.predict(cox_bench)
    cox = fit_cox(cox_bench).linear_predictor(cox_bench.X)
    gap = abs(pll_loss(eta, cox_bench.times, cox_bench.events)
              - pll_loss(cox, cox_bench.times, cox_bench.events))
    dev = np.abs((eta - eta.mean()) - (cox - cox.mean())).max()
    v.check(gap < 1e-2, f"PLL gap {gap:.2e}")
    v.check(dev < 0.05, f"linear predictor deviation {dev:.3f}")
    v.title += f", PLL gap {gap:.1e}, max deviation {dev:.3f}"
    v.finish()


def test_c5_text_signal_comparison(capsys):
    v = Verdict(5, "text features beat measurement-only baselines", 600, capsys)
    notes = []
    for encoder in ("tfidf", "attention"):
        cfg, _ = load_config(profile="defaults_mortality", encoder=encoder, seed=0)
        data = harness.load_data(cfg)
        train, test = harness.split(data, cfg.split_fraction, cfg.seed)
        report = harness.fit_experiment(train, cfg).evaluate(test)
        mlp = report.baselines["mlp_no_notes"]["auc"]
        v.check(report.auc >= 0.80, f"{encoder} AUC {report.auc:.3f} < 0.80")
        v.check(report.auc > mlp, f"{encoder} AUC {report.auc:.3f} <= MLP {mlp:.3f}")
        notes.append(f"{encoder} AUC {report.auc:.3f} vs MLP {mlp:.3f}")

        cfg, _ = load_config(profile="defaults_survival", encoder=encoder, seed=0)
        report = harness.fit_experiment(train, cfg).evaluate(test)
        cox = report.baselines["cox"]["c_index"]
        v.check(report.c_index >= 0.68, f"{encoder} C {report.c_index:.3f} < 0.68")
        v.check(report.c_index >= cox, f"{encoder} C {report.c_index:.3f} < Cox {cox:.3f}")
        notes.append(f"{encoder} C {report.c_index:.3f} vs Cox {cox:.3f}")
    v.title += ", " + ", ".join(notes)
    v.finish()


def test_c6_curve_invariants(capsys):
    v = Verdict(6, "survival curve invariants", 60, capsys)
    rng = np.random.default_rng(6)
    worst_step = 0.0
    for k in range(50):
        n = int(rng.integers(20, 80))
        data = simulate(n, rng.normal(size=3), baseline_rate=0.05,
                        censor_horizon=50.0, seed=1000 + k)
        if data.events.sum() == 0:
            data = simulate(n, [0.0, 0.0, 0.0], baseline_rate=0.5, seed=1000 + k)
        hidden = () if k % 2 else (4,)
        model = fit_neural(data, ModelConfig(hidden=hidden, activation="selu"), "pll",
                           TrainConfig(batch_size=16, epochs=2, seed=k))
        for risk in model.predict(data)[:5]:
            c = survival_curve(model.baseline, float(risk))
            v.check(c.survival[0] == 1.0, f"model {k}: S(0) = {c.survival[0]}")
            v.check(bool(np.all(np.diff(c.survival) <= 0)), f"model {k}: S increases")
            v.check(np.abs(c.mortality - (1 - c.survival)).max() < 1e-9, f"model {k}: F")
            v.check(np.abs(c.cum_hazard + np.log(c.survival)).max() < 1e-9, f"model {k}: H")
            step = np.abs(-np.diff(np.log(c.survival)) - np.diff(c.cum_hazard)).max()
            worst_step = max(worst_step, step)
            # exact up to the roundoff of one exp/log pair
            v.check(step < 1e-12, f"model {k}: step relation off by {step:.1e}")
    v.title += f", worst step mismatch {worst_step:.1e}"
    v.finish()


def test_c7_attention_contract(tmp_path, capsys):
    v = Verdict(7, "attention contract", 60, capsys)
    for seed in SEEDS:
        cfg, params = _encoder(seed)
        ids, mask = _batch(seed)
        _, att = encode(params, ids, None, mask, cfg)
        for layer in att:
            for w in layer:
                v.check(np.abs(w.sum(axis=-1) - 1).max() < 1e-9, f"seed {seed}: row sums")
                v.check(bool(np.all(w[0, :, ~mask[0]] == 0.0)), f"seed {seed}: padding")
        one_ids, one_mask = ids[:, :1], mask[:, :1]
        _, att = encode(params, one_ids, None, one_mask, cfg)
        v.check(all(np.all(w == 1.0) for layer in att for w in layer), "L = 1 weight")
    _, w = scaled_dot_attention(np.array([[1.0], [0.0]]), np.array([[1.0], [0.0]]), np.eye(2))
    e = math.e
    v.check(abs(w.data[0, 0] - e / (e + 1)) < 1e-12 and abs(w.data[0, 1] - 1 / (e + 1)) < 1e-12,
            "hand example")
    rng = np.random.default_rng(7)
    dump = AttentionDump("p1", ["[CLS]", "severe", "chest", "[SEP]"],
                         {(l, h): rng.dirichlet(np.ones(4), size=4)
                          for l in range(2) for h in range(2)})
    back = load_attention(dump_attention(dump, tmp_path / "a.json"))
    v.check(back.tokens == dump.tokens and back.note_id == dump.note_id, "dump labels")
    v.check(all(np.array_equal(back.weights[k], dump.weights[k]) for k in dump.weights)
            and back.weights.keys() == dump.weights.keys(), "dump weights")
    v.finish()


def test_c8_determinism_and_leak_freedom(tmp_path, capsys):
    v = Verdict(8, "pipeline determinism and leak-freedom", 300, capsys)
    cfg = ExperimentConfig(task="mortality", encoder="attention", sim_n=400, epochs=2,
                           seq_len=64, sim_missing=0.1, attention_notes=3)
    a = harness.run_pipeline(cfg, tmp_path / "a")["metrics"].read_bytes()
    b = harness.run_pipeline(cfg, tmp_path / "b")["metrics"].read_bytes()
    v.check(a == b, "metrics.json differs between identical runs")

    data = harness.load_data(cfg)
    train, test = harness.split(data, cfg.split_fraction, cfg.seed)
    fitted = harness.fit_experiment(train, cfg)
    kept = filter_missing(train, cfg.missing_threshold)
    imputer, imputed = fit_impute(kept, cfg.impute_iterations, cfg.seed)
    std = fit_standardize(imputed)
    pre = fitted.preprocessor
    v.check(np.array_equal(pre.imputer.coef, imputer.coef), "imputer coefficients")
    v.check(np.array_equal(pre.standardizer.mean, std.mean), "standardizer mean")
    v.check(np.array_equal(pre.standardizer.std, std.std), "standardizer std")
    tokens = {t for toks in fitted.model.tokens(kept.notes) for t in toks}
    learned = set(fitted.model.vocab.token_to_id) - {"[PAD]", "[UNK]", "[CLS]", "[SEP]"}
    v.check(learned == tokens, "vocabulary differs from the training-split tokens")

    cv = harness.cross_validate(data, ExperimentConfig(task="mortality", encoder="tfidf",
                                                       sim_n=400, epochs=2, folds=5))
    mats = np.array([f.confusion.as_array() for f in cv.folds])
    v.check(len(cv.folds) == 5, "fold count")
    v.check(np.array_equal(cv.mean_confusion.as_array(), mats.mean(axis=0)),
            "averaged confusion matrix")
    v.finish()


def test_c9_preprocessing_fidelity(capsys):
    v = Verdict(9, "preprocessing fidelity", 60, capsys)
    rows = []
    for k in (13, 0, 10):
        x = np.ones(25)
        x[:k] = np.nan
        rows.append(x)
    ds = SurvivalDataset(FeatureSchema.generic(25), tuple(
        SurvivalRecord(f"r{i}", 1.0 + i, 1, x) for i, x in enumerate(rows)))
    v.check(filter_missing(ds, 0.4).ids == ["r1", "r2"], "0.4 strict threshold")

    v.check(clean_text("The nurse noted severe chest trauma.") ==
            ["noted", "severe", "chest", "trauma"], "nurse removed")
    v.check(clean_text("Doctor: MEASUREMENT taken!") == ["taken"], "doctor/measurement removed")

    x1 = np.array([0.5, -1.0, 2.0, 3.5, 1.25, -0.75])
    X = np.column_stack([x1, 2 * x1])
    X[4, 1] = np.nan
    lin = SurvivalDataset(FeatureSchema.generic(2), tuple(
        SurvivalRecord(f"r{i}", 1.0 + i, 1, x) for i, x in enumerate(X)))
    _, out = fit_impute(lin)
    v.check(abs(out.X[4, 1] - 2 * x1[4]) < 1e-6, "linear imputation")

    model = fit_tfidf([["a", "a", "b"], ["b"]])
    vec = tfidf_vector(model, ["a", "a", "b"])
    v.check(abs(vec[model.vocabulary["a"]] - 2 * math.log(2)) < 1e-12, "tf-idf 2 ln 2")
    v.check(vec[model.vocabulary["b"]] == 0.0, "tf-idf zero idf")
    v.finish()
