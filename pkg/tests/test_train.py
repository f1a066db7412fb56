import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fragspec.fragdag import rec_frag
from fragspec.gnn import Model, ModelConfig
from fragspec.molio import heavy_skeleton, parse_smiles
from fragspec.probdist import latent_from_logits, validity_mask
from fragspec.spectrum import Spectrum
from fragspec.synth import OracleParams, oracle_spectrum
from fragspec.train import (SpectrumRecord, TrainSettings, TrainingDiverged, config_from_values,
                            load_dataset, loss_with_os, match_peaks, merge_spectra, nll_loss,
                            os_partition, read_config, reg_loss, save_dataset, split_dataset,
                            split_of, target_entropy, train_model)


def spec(masses, inten, energies=(20,), mid="x"):
    return Spectrum(np.array(masses, float), np.array(inten, float), energies, mid)


def ethane_state(p_cells, p_os=0.0):
    """State over ethane at d=1, j=0 with cell masses set directly (order: 0b01, 0b10, root)."""
    dag = rec_frag(heavy_skeleton(parse_smiles("CC")), 1)
    logits = np.full((3, 1), -np.inf)
    for nid, p in zip((0b01, 0b10, 0b11), p_cells):
        if p > 0:
            logits[dag.index[nid], 0] = math.log(p)
    os = math.log(p_os) if p_os > 0 else -np.inf
    return latent_from_logits(logits, os, validity_mask(dag, 0), dag, 0)


def test_os_partition_examples():
    s = spec([50.0, 100.0], [0.4, 0.6])
    assert os_partition(s, [50.0, 100.0, 120.0])[2] == 0.0
    is_, os_, p = os_partition(s, [])
    assert p == pytest.approx(1.0) and len(is_) == 0 and len(os_) == 2
    assert os_partition(spec([100.0], [1.0]), [100.0009])[2] == 0.0
    assert os_partition(spec([100.0], [1.0]), [100.0011])[2] == 1.0


@given(st.permutations(range(5)), st.permutations(range(4)))
def test_os_partition_order_free(perm_peaks, perm_support):
    masses = np.array([30.0, 45.0002, 60.0, 75.5, 90.0])
    inten = np.array([0.1, 0.2, 0.3, 0.25, 0.15])
    support = np.array([45.0, 60.0004, 75.0, 90.1])
    a = os_partition(Spectrum(masses, inten), support)[2]
    b = os_partition(Spectrum(masses[list(perm_peaks)], inten[list(perm_peaks)]),
                     support[list(perm_support)])[2]
    assert a == b == pytest.approx(0.1 + 0.25 + 0.15)


def test_match_peaks_sums_shared():
    target, p_os = match_peaks(spec([100.0, 100.0005, 200.0], [0.2, 0.3, 0.5]), np.array([100.0002, 150.0]))
    assert target.tolist() == pytest.approx([0.5, 0.0]) and p_os == pytest.approx(0.5)


def test_nll_examples():
    state = ethane_state([0.25, 0.25, 0.5])
    masses = state.group_mass
    # prediction equals target
    target = spec(masses, [0.5, 0.5])
    assert nll_loss(state, target) == pytest.approx(target_entropy(target), abs=1e-12)
    assert nll_loss(state, spec([masses[0]], [1.0])) == pytest.approx(math.log(2))
    rev = spec(masses[::-1], [0.5, 0.5])
    assert nll_loss(state, rev) == nll_loss(state, target)


def test_loss_with_os_examples():
    state = ethane_state([0.35, 0.0, 0.35], p_os=0.3)
    masses = state.group_mass
    target = spec(list(masses) + [300.0], [0.35, 0.35, 0.3])
    assert loss_with_os(state, target) == pytest.approx(target_entropy(target), abs=1e-12)
    no_os = spec(masses, [0.5, 0.5])
    assert loss_with_os(state, no_os) == nll_loss(state, no_os)
    # OS mass observed but none predicted: clamped and flagged
    zero = ethane_state([0.5, 0.0, 0.5])
    loss, flagged = loss_with_os(zero, target, return_flag=True)
    assert flagged and math.isfinite(loss)
    assert loss == pytest.approx(-0.35 * math.log(0.5) * 2 + 0.3 * 745.0)


def naive_loss(state, s):
    """Direct loops: nearest admissible predicted mass per peak, OS otherwise."""
    pm = dict(zip(state.group_mass.tolist(), np.exp(state.log_p_formula).tolist()))
    acc, os_mass = {}, 0.0
    for m, p in zip(s.masses, s.intensities):
        best = None
        for q in pm:
            if abs(q - m) <= 1e-5 * max(q, m) and (best is None or abs(q - m) < abs(best - m)):
                best = q
        if best is None:
            os_mass += p
        else:
            acc[best] = acc.get(best, 0.0) + p
    total = -sum(p * math.log(pm[q]) for q, p in acc.items())
    if os_mass > 0:
        total -= os_mass * max(state.log_p_os, -745.0)
    return total


@pytest.mark.parametrize("seed", range(10))
def test_loss_matches_naive(seed):
    rng = np.random.default_rng(seed)
    dag = rec_frag(heavy_skeleton(parse_smiles("OCC(N)C(=O)O")), 2)
    state = latent_from_logits(rng.normal(size=(len(dag), 3)), rng.normal(), validity_mask(dag, 1), dag, 1)
    pick = rng.choice(state.group_mass, size=5, replace=False)
    jitter = pick * rng.uniform(-8e-6, 8e-6, size=5)
    masses = np.concatenate([pick + jitter, [333.3, 444.4]])
    s = spec(masses, rng.dirichlet(np.ones(7)))
    assert loss_with_os(state, s) == pytest.approx(naive_loss(state, s), abs=1e-12)
    # cross-entropy never drops below the target entropy
    assert loss_with_os(state, s) >= target_entropy(s) - 1e-12


def test_reg_loss():
    state = ethane_state([0.2, 0.3, 0.5])
    assert reg_loss(state, 1.5, {}) == 1.5
    assert reg_loss(state, 1.5, {"n": 0, "f": 0, "f|n": 0, "n|f": 0}) == 1.5
    sharp, flat = ethane_state([0.05, 0.45, 0.5]), ethane_state([0.25, 0.25, 0.5])
    assert sharp.entropies()["n|f"][1] < flat.entropies()["n|f"][1]
    alphas = {"n|f": -1.0}
    assert reg_loss(sharp, 0.0, alphas) > reg_loss(flat, 0.0, alphas)


def test_merge_spectra():
    a = spec([10.0, 20.0], [0.5, 0.5], (10,))
    assert merge_spectra([a, a]).intensities.tolist() == [0.5, 0.5]
    m = merge_spectra([spec([10.0], [1.0], (10,)), spec([20.0], [1.0], (20,))])
    assert m.masses.tolist() == [10.0, 20.0] and m.intensities.tolist() == [0.5, 0.5]
    assert m.energies == (10, 20)
    b = spec([20.0, 30.0], [0.2, 0.8], (30,))
    ab, ba = merge_spectra([a, b]), merge_spectra([b, a])
    assert np.array_equal(ab.masses, ba.masses) and np.allclose(ab.intensities, ba.intensities)
    assert np.allclose(merge_spectra([ab]).intensities, ab.intensities)
    with pytest.raises(ValueError):
        merge_spectra([])


def test_split_counts():
    ids = [f"mol{k}" for k in range(1000)]
    counts = {"train": 0, "val": 0, "test": 0}
    for i in ids:
        counts[split_of(i)] += 1
    assert abs(counts["train"] - 600) <= 30
    assert abs(counts["val"] - 200) <= 30 and abs(counts["test"] - 200) <= 30
    assert all(split_of(i, seed=3) == split_of(i, seed=3) for i in ids[:50])
    assert {split_of(i, (1.0, 0.0, 0.0)) for i in ids} == {"train"}
    with pytest.raises(ValueError):
        split_dataset([], (0.5, 0.5, 0.5))


def _records(n=6, q=0.0, smiles=("CNCO", "CCO", "C1CC1O", "OCC(N)C=O", "CC(C)N", "OCCS")):
    oracle = OracleParams(os_fraction=q, seed=1)
    out = []
    for k, s in enumerate(smiles[:n]):
        g = parse_smiles(s, mol_id=f"r{k}")
        sp = oracle_spectrum(g, oracle, 3, energies=[20])
        out.append(SpectrumRecord(g.id, g, sp, (20,), "train" if k % 3 else "val"))
    return out


def test_dataset_round_trip(tmp_path):
    recs = _records()
    save_dataset(str(tmp_path), recs)
    back = load_dataset(str(tmp_path))
    assert [r.id for r in back] == [r.id for r in recs]
    assert [r.split for r in back] == [r.split for r in recs]
    for a, b in zip(recs, back):
        assert np.allclose(a.spectrum.masses, b.spectrum.masses, atol=1e-5)
        assert b.energies == (20,)


def test_config_file(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("# desk\nhidden_dim = 16\nlr=0.01\nuse_frag_edges=true\nseed=4\n")
    cfg, st_ = read_config(str(path))
    assert cfg.hidden_dim == 16 and cfg.use_frag_edges and cfg.seed == 4
    assert st_.lr == 0.01 and st_.seed == 4
    with pytest.raises(ValueError, match="unknown"):
        config_from_values({"learning_rate": "1"})
    path.write_text("hidden_dim 16\n")
    with pytest.raises(ValueError):
        read_config(str(path))


TINY = ModelConfig(hidden_dim=8, L1=1, L2=1, d=3, j=2, seed=0)


def test_zero_lr_keeps_params():
    model = Model(TINY)
    before = model.state()
    trained, hist = train_model(_records(), TINY, TrainSettings(lr=0.0, max_epochs=2, batch_size=4),
                                model=model)
    for k, v in before.items():
        assert np.array_equal(trained.state()[k], v)
    assert len(hist.train_loss) == 2


def test_deterministic_curves():
    s = TrainSettings(lr=1e-2, max_epochs=3, batch_size=2, seed=5)
    _, h1 = train_model(_records(), TINY, s)
    _, h2 = train_model(_records(), TINY, s)
    assert h1.train_loss == h2.train_loss and h1.val_loss == h2.val_loss


def test_no_training_records():
    recs = _records()
    for r in recs:
        r.split = "val"
    with pytest.raises(ValueError):
        train_model(recs, TINY)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises():
    with pytest.raises(TrainingDiverged):
        train_model(_records(), TINY, TrainSettings(lr=float("nan"), max_epochs=2, batch_size=2))


def test_overfit_single_record():
    (rec,) = _records(1)
    rec.split = "train"
    cfg = ModelConfig(hidden_dim=16, L1=2, L2=2, d=3, j=2, seed=0)
    s = TrainSettings(lr=1e-2, max_epochs=600, patience=600, batch_size=1, eval_cosine=False)
    model, hist = train_model([rec], cfg, s, log_every=0)
    state = model.latent(model.prepare(rec.mol, rec.energies))
    gap = loss_with_os(state, rec.spectrum) - target_entropy(rec.spectrum)
    assert 0 <= gap < 1e-3
