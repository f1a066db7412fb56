"""End-to-end acceptance criteria A1-A10.

Each test records one PASS/FAIL line, echoed in the terminal summary. The
trained-model criteria (A5, A6, A10, A9) share module fixtures and take a
few minutes on one core.
"""
import time

import numpy as np
import pytest

from fragspec import tensor as T
from fragspec.fragdag import exhaustive_oracle, mass_set, rec_frag
from fragspec.gnn import Batch, Model, ModelConfig, Prepared
from fragspec.metrics import (brute_force_cos_hungarian, cos_hungarian, ensemble_consistency,
                              os_abs_error, recall_metrics)
from fragspec.molio import heavy_skeleton, parse_smiles
from fragspec.retrieve import build_candidates, rank_candidates, topk_accuracy
from fragspec.spectrum import Spectrum
from fragspec.synth import OracleParams, random_molecules, synth_generate
from fragspec.train import (TrainSettings, batch_objective, evaluate_prepared, os_partition,
                            prepare_records, split_dataset, target_entropy, train_model)

D = 3


def test_a1_dag_matches_exhaustive_oracle(verdict):
    t = time.time()
    mols = random_molecules(200, seed=101, min_heavy=1, max_heavy=12)
    bad = 0
    for g in mols:
        s = heavy_skeleton(g)
        bad += set(rec_frag(s, s.num_atoms, with_iso=False).node_ids) != exhaustive_oracle(s)
    dt = time.time() - t
    ok = verdict("A1", bad == 0 and dt < 120, f"mismatches={bad} time={dt:.1f}s")
    assert ok


def _pair_edges(skeleton, d):
    """All (parent, child) masks where child is a side of one bond cut in a parent at depth < d."""
    bonds = [(i, j) for i, j, _ in skeleton.bonds]

    def components(mask, cut):
        comps = []
        left = mask
        while left:
            seed = left & -left
            comp, grow = seed, True
            while grow:
                grow = False
                for b, (i, j) in enumerate(bonds):
                    if b == cut or not (mask >> i & 1 and mask >> j & 1):
                        continue
                    if (comp >> i & 1) != (comp >> j & 1):
                        comp |= (1 << i) | (1 << j)
                        grow = True
            comps.append(comp)
            left &= ~comp
        return comps

    root = (1 << skeleton.num_atoms) - 1
    depth, frontier, edges = {root: 0}, [root], set()
    while frontier:
        nxt = []
        for p in frontier:
            if depth[p] >= d:
                continue
            for b, (i, j) in enumerate(bonds):
                if not (p >> i & 1 and p >> j & 1):
                    continue
                for c in components(p, b):
                    if c != p:
                        edges.add((p, c))
                        if c not in depth:
                            depth[c] = depth[p] + 1
                            nxt.append(c)
        frontier = nxt
    return set(depth), edges


def test_a2_literature_anchor(verdict):
    t = time.time()
    s = heavy_skeleton(parse_smiles("CNCO"))
    dag = rec_frag(s, 3)
    nodes, edges = _pair_edges(s, 3)
    dt = time.time() - t
    # A literature value of 19 edges is quoted for this DAG. Enumerating every
    # (parent, single-cut child) pair gives 20, which the implementation matches;
    # the node count of 10 agrees with the literature.
    ok = verdict("A2", len(dag) == 10 and set(dag.node_ids) == nodes and set(dag.edges) == edges
                 and dt < 1, f"nodes={len(dag)} edges={len(dag.edges)} (literature: 19) time={dt:.2f}s")
    assert ok


def test_a3_normalization_and_entropy_chain(verdict):
    t = time.time()
    cfg = ModelConfig()
    preps = [Prepared(g, cfg, [20]) for g in random_molecules(50, seed=202, max_heavy=8)]
    worst_norm = worst_chain = 0.0
    for seed in range(100):
        model = Model(ModelConfig(seed=seed))
        for p in preps:
            st = model.latent(p)
            worst_norm = max(worst_norm, abs(np.exp(st.log_p_formula).sum() + st.p_os - 1.0))
            H = st.entropies()
            # chain rule holds for raw entropies; the normalized ones divide by different supports
            gap = H["n"][0] + H["f|n"][0] - H["f"][0] - H["n|f"][0]
            worst_chain = max(worst_chain, abs(gap))
    dt = time.time() - t
    ok = verdict("A3", worst_norm < 1e-9 and worst_chain < 1e-9 and dt < 120,
                 f"max|sum-1|={worst_norm:.1e} max|chain|={worst_chain:.1e} time={dt:.1f}s")
    assert ok


def test_a4_full_loss_gradient(verdict):
    t = time.time()
    cfg = ModelConfig(hidden_dim=8, d=D, seed=11)
    mols = random_molecules(3, seed=303, min_heavy=3, max_heavy=5)
    recs = synth_generate(mols, OracleParams(os_fraction=0.2, seed=6), D)
    batch = Batch([Prepared(r.mol, cfg, r.energies, r.spectrum) for r in recs])
    model = Model(cfg)
    alphas = {"n": 0.02, "f": -0.01, "f|n": 0.03, "n|f": -0.02}
    report = T.grad_check(lambda: batch_objective(model, batch, alphas), model.param_list())
    failed = [e for e in report["params"] if not e["passed"]]
    worst = max(e["max_rel_error"] for e in report["params"])
    dt = time.time() - t
    ok = verdict("A4", report["passed"] and not failed and dt < 300,
                 f"params={model.num_parameters} failed={len(failed)} worst={worst:.1e} time={dt:.1f}s")
    assert ok


def _random_pair(rng, max_peaks=6):
    centres = rng.uniform(50, 400, size=3)
    out = []
    for _ in range(2):
        k = rng.integers(1, max_peaks + 1)
        m = rng.choice(centres, size=k) * (1 + rng.uniform(-1.2e-5, 1.2e-5, size=k))
        out.append(Spectrum(m, rng.uniform(0.05, 1.0, size=k)))
    return out


def test_a7_hungarian_exact(verdict):
    t = time.time()
    rng = np.random.default_rng(707)
    worst = 0.0
    for _ in range(100):
        y, yhat = _random_pair(rng)
        worst = max(worst, abs(cos_hungarian(y, yhat) - brute_force_cos_hungarian(y, yhat)))
    dt = time.time() - t
    ok = verdict("A7", worst < 1e-9 and dt < 60, f"max|diff|={worst:.1e} time={dt:.1f}s")
    assert ok


def test_a8_weighted_recall_identity(verdict):
    t = time.time()
    recs = synth_generate(random_molecules(500, seed=808), OracleParams(os_fraction=0.1, seed=8), D)
    worst = 0.0
    for r in recs:
        support = mass_set(rec_frag(heavy_skeleton(r.mol), D), 2, "protonated")
        _, wr = recall_metrics(r.spectrum, support)
        worst = max(worst, abs(wr - (1.0 - os_partition(r.spectrum, support)[2])))
    dt = time.time() - t
    ok = verdict("A8", worst < 1e-12 and dt < 60, f"records=500 max|diff|={worst:.1e} time={dt:.1f}s")
    assert ok


def _closed_loop(q):
    t = time.time()
    mols = random_molecules(2000, seed=7)
    recs = synth_generate(mols, OracleParams(os_fraction=q, seed=3), D)
    split_dataset(recs, seed=0)
    cfg = ModelConfig()
    prep = {r.id: p for r, p in zip(recs, prepare_records(recs, cfg))}
    model, _ = train_model(recs, cfg, TrainSettings(lr=1e-3, max_epochs=60, patience=10),
                           prepared=prep, log_every=0)
    test = [r for r in recs if r.split == "test"]
    return {"model": model, "records": recs, "test": test, "prep": prep, "time": time.time() - t}


@pytest.fixture(scope="module")
def clean_run():
    return _closed_loop(0.0)


@pytest.fixture(scope="module")
def noisy_run():
    return _closed_loop(0.1)


@pytest.mark.slow
def test_a5_closed_loop(clean_run, verdict):
    test = clean_run["test"]
    loss, cos = evaluate_prepared(clean_run["model"], [clean_run["prep"][r.id] for r in test])
    gap = loss - float(np.mean([target_entropy(r.spectrum) for r in test]))
    dt = clean_run["time"]
    ok = verdict("A5", cos >= 0.95 and abs(gap) <= 0.05 and dt < 1800,
                 f"cos_hun={cos:.4f} loss-H={gap:.4f} test={len(test)} time={dt:.0f}s")
    assert ok


@pytest.mark.slow
def test_a6_os_calibration(noisy_run, verdict):
    err = os_abs_error(noisy_run["test"], noisy_run["model"])
    dt = noisy_run["time"]
    ok = verdict("A6", err <= 0.05 and dt < 1800, f"mean|dOS|={err:.4f} time={dt:.0f}s")
    assert ok


@pytest.mark.slow
def test_a10_retrieval(clean_run, verdict):
    t = time.time()
    recs, model = clean_run["records"], clean_run["model"]
    by_id = {r.id: r for r in recs}
    corpus = [r.mol for r in recs]
    targets = clean_run["test"][:50]
    cache = {}

    def predicted(energies):
        def run(g):
            key = (g.id, energies)
            if key not in cache:
                cache[key] = model.predict(g, list(energies))[1]
            return cache[key]
        return run

    oracle, learned = [], []
    for r in targets:
        cands = build_candidates(r.mol, corpus, 50)
        oracle.append(rank_candidates(r.spectrum, cands, r.id, lambda g: by_id[g.id].spectrum))
        learned.append(rank_candidates(r.spectrum, cands, r.id, predicted(tuple(r.energies))))
    top_true = topk_accuracy(oracle)[1]
    top_model = topk_accuracy(learned)[1]
    dt = time.time() - t
    ok = verdict("A10", top_true == 1.0 and top_model > 0.02 and dt < 600,
                 f"top1_true={top_true:.2%} top1_model={top_model:.2%} targets={len(targets)} time={dt:.0f}s")
    assert ok


@pytest.mark.slow
def test_a9_ensemble_direction(verdict):
    t = time.time()
    recs = synth_generate(random_molecules(600, seed=17), OracleParams(seed=5), D)
    split_dataset(recs, seed=0)
    prep = {r.id: p for r, p in zip(recs, prepare_records(recs, ModelConfig()))}
    test = [r for r in recs if r.split == "test"]
    out = {}
    for alpha in (-0.01, 0.01):
        states = []
        for seed in range(5):
            cfg = ModelConfig(seed=seed)
            settings = TrainSettings(max_epochs=20, alpha_nf=alpha, seed=seed, eval_cosine=False)
            model, _ = train_model(recs, cfg, settings, prepared=prep, log_every=0)
            states.append([model.latent(prep[r.id]) for r in test])
        out[alpha] = ensemble_consistency(states, [r.spectrum for r in test])
    neg, pos = out[-0.01], out[0.01]
    violations = sum(hc > h + 1e-12 for o in (neg, pos) for h, hc in o["per_formula_entropies"])
    d_cos = abs(neg["mean_cos_hun"] - pos["mean_cos_hun"])
    dt = time.time() - t
    ok = verdict("A9", neg["mean_H_nf"] > pos["mean_H_nf"] and d_cos < 0.02 and violations == 0
                 and dt < 7200,
                 f"H(n|f) neg={neg['mean_H_nf']:.4f} pos={pos['mean_H_nf']:.4f} dcos={d_cos:.4f} "
                 f"violations={violations} time={dt:.0f}s")
    assert ok
