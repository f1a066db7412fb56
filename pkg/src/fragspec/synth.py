"""Synthetic molecules and an oracle spectrum generator whose targets the model can represent."""

from dataclasses import dataclass, field

import numpy as np

from .fragdag import digest_hex, formula_set, rec_frag
from .molio import Atom, MolGraph, formula_mass, heavy_skeleton, to_smiles
from .probdist import validity_mask
from .spectrum import Spectrum
from .train import SpectrumRecord, in_support, merge_spectra

VALENCE = {"C": 4, "N": 3, "O": 2, "S": 2}
DEFAULT_ELEMENTS = {"C": 0.62, "N": 0.15, "O": 0.18, "S": 0.05}
DEFAULT_PROPENSITY = {"C": 1.0, "N": 1.5, "O": 2.0, "S": 1.7}
ENERGY_CHOICES = (10, 20, 30, 40, 50)
MIN_INTENSITY = 1e-6


def random_molecule(rng, n_heavy, elements=None, ring_prob=0.3, double_prob=0.15, mol_id=""):
    """Random connected neutral molecule on ``n_heavy`` heavy atoms."""
    elements = elements or DEFAULT_ELEMENTS
    symbols = list(elements)
    weights = np.array([elements[s] for s in symbols], dtype=np.float64)
    weights /= weights.sum()
    for _ in range(100):
        els = [str(rng.choice(symbols, p=weights)) for _ in range(n_heavy)]
        free = [VALENCE[e] for e in els]
        bonds = {}
        ok = True
        for k in range(1, n_heavy):
            cands = [a for a in range(k) if free[a] >= 1]
            if not cands or free[k] < 1:
                ok = False
                break
            a = int(rng.choice(cands))
            order = 1
            if rng.random() < double_prob and free[a] >= 2 and free[k] >= 2:
                order = 2
            bonds[(a, k)] = order
            free[a] -= order
            free[k] -= order
        if not ok:
            continue
        if n_heavy >= 3 and rng.random() < ring_prob:
            pairs = [(a, b) for a in range(n_heavy) for b in range(a + 1, n_heavy)
                     if (a, b) not in bonds and free[a] >= 1 and free[b] >= 1]
            if pairs:
                a, b = pairs[int(rng.integers(len(pairs)))]
                bonds[(a, b)] = 1
                free[a] -= 1
                free[b] -= 1
        kinds = {1: "single", 2: "double"}
        atoms = [Atom(e, implicit_h=h) for e, h in zip(els, free)]
        g = MolGraph(atoms, [(a, b, kinds[o]) for (a, b), o in sorted(bonds.items())], id=mol_id)
        return MolGraph(g.atoms, g.bonds, id=mol_id, smiles=to_smiles(g))
    raise RuntimeError("could not build a molecule with the requested atoms")


def random_molecules(n, seed, min_heavy=2, max_heavy=6, elements=None, prefix="syn"):
    """``n`` distinct random molecules (duplicates by graph digest are skipped)."""
    rng = np.random.default_rng(seed)
    out, seen = [], set()
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > 50 * n + 1000:
            raise RuntimeError(f"only found {len(out)} distinct molecules")
        size = int(rng.integers(min_heavy, max_heavy + 1))
        g = random_molecule(rng, size, elements, mol_id=f"{prefix}{len(out):05d}")
        skel = heavy_skeleton(g)
        key = (g.formula().counts, digest_hex(skel, (1 << skel.num_atoms) - 1))
        if key in seen:
            continue
        seen.add(key)
        out.append(g)
    return out


@dataclass
class OracleParams:
    propensity: dict = field(default_factory=lambda: dict(DEFAULT_PROPENSITY))
    decay: float = 0.6
    offset_weights: tuple = (0.05, 0.2, 0.5, 0.2, 0.05)
    os_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if any(v <= 0 for v in self.propensity.values()):
            raise ValueError("bond propensities must be positive")
        w = np.asarray(self.offset_weights, dtype=np.float64)
        if w.ndim != 1 or w.size % 2 != 1 or np.any(w < 0) or w.sum() <= 0:
            raise ValueError("offset weights must be a non-negative odd-length vector")
        self.offset_weights = tuple((w / w.sum()).tolist())
        if not 0 <= self.os_fraction < 1:
            raise ValueError("os_fraction must lie in [0, 1)")

    @property
    def j(self):
        return len(self.offset_weights) // 2


def oracle_log_joint(dag, oracle):
    """Unnormalized log score per (node, offset) cell; invalid cells are -inf."""
    skel = dag.skeleton
    j = oracle.j
    valid = validity_mask(dag, j)
    log_w = np.log(np.maximum(np.asarray(oracle.offset_weights), 1e-300))
    bond_score = [np.log(oracle.propensity.get(skel.atoms[a].element, 1.0)
                         * oracle.propensity.get(skel.atoms[b].element, 1.0))
                  for a, b, _ in skel.bonds]
    out = np.full(valid.shape, -np.inf)
    for r, node in enumerate(dag.node_list()):
        broken = sum(s for (a, b, _), s in zip(skel.bonds, bond_score)
                     if (node.mask >> a & 1) != (node.mask >> b & 1))
        base = broken + (min(node.depth_set) - 1) * np.log(oracle.decay)
        out[r] = np.where(valid[r], base + log_w, -np.inf)
    return out


def oracle_spectrum(mol, oracle, d, mode="protonated", energies=(), dag=None):
    """Noise-free in-support spectrum of the oracle (before OS injection)."""
    dag = dag or rec_frag(heavy_skeleton(mol), d, with_iso=False)
    lj = oracle_log_joint(dag, oracle)
    p = np.exp(lj - lj[np.isfinite(lj)].max())
    p /= p.sum()
    acc = {}
    nodes = dag.node_list()
    for r, c in zip(*np.nonzero(p > 0)):
        f = nodes[r].formula.with_hydrogens(nodes[r].h_attached + c - oracle.j)
        acc[f] = acc.get(f, 0.0) + p[r, c]
    masses = np.array([formula_mass(f, mode) for f in acc])
    inten = np.array(list(acc.values()))
    keep = inten >= MIN_INTENSITY
    return Spectrum(masses[keep], inten[keep], energies, mol.id).normalized()


def inject_os(spec, q, rng, support=None, max_peaks=3):
    """Scale the spectrum by 1-q and add OS peaks carrying mass q in total."""
    if q <= 0:
        return spec
    support = spec.masses if support is None else np.asarray(support)
    k = int(rng.integers(1, max_peaks + 1))
    share = rng.dirichlet(np.ones(k)) * q
    masses = []
    while len(masses) < k:
        base = spec.masses[int(rng.integers(spec.masses.size))]
        m = base * (1 + rng.uniform(50, 500) * 1e-6)
        # keep clear of every support mass and of previously placed peaks
        if not in_support([m], support, 1e-5)[0] and all(abs(m - x) > 1e-4 for x in masses):
            masses.append(m)
    return Spectrum(np.concatenate([spec.masses, masses]),
                    np.concatenate([spec.intensities * (1 - q), share]),
                    spec.energies, spec.id)


def synth_generate(molecules, oracle, d, mode="protonated"):
    """One merged-energy SpectrumRecord per molecule; deterministic given ``oracle.seed``."""
    records = []
    for idx, mol in enumerate(molecules):
        rng = np.random.default_rng([oracle.seed, idx])
        n_e = int(rng.integers(1, 3))
        energies = sorted(rng.choice(ENERGY_CHOICES, size=n_e, replace=False).tolist())
        dag = rec_frag(heavy_skeleton(mol), d, with_iso=False)
        per_energy = [oracle_spectrum(mol, oracle, d, mode, (e,), dag) for e in energies]
        spec = merge_spectra(per_energy)
        support = [formula_mass(f, mode) for f in formula_set(dag, oracle.j)]
        spec = inject_os(spec, oracle.os_fraction, rng, support)
        records.append(SpectrumRecord(mol.id, mol, spec, tuple(energies)))
    return records

