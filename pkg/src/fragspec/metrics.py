"""Spectrum similarity, recall, OS error and ensemble annotation consistency."""

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .train import PPM_TOL, in_support, os_partition


@dataclass(frozen=True)
class MatchTolerance:
    kind: str = "ppm"  # or "absolute_da"
    value: float = 10.0

    def __post_init__(self):
        if self.kind not in ("ppm", "absolute_da"):
            raise ValueError(f"unknown tolerance kind {self.kind!r}")
        if not self.value > 0:
            raise ValueError("tolerance must be positive")

    def admissible(self, a, b):
        gap = np.abs(a - b)
        if self.kind == "ppm":
            return gap <= self.value * 1e-6 * np.maximum(a, b)
        return gap <= self.value

    def window(self, m):
        # generous search window, exact test happens in admissible()
        if self.kind == "ppm":
            r = self.value * 1e-6
            return m * (1 - r) - 1e-12, m / (1 - r) + 1e-12
        return m - self.value, m + self.value


PPM10 = MatchTolerance("ppm", 10.0)


def cos_binned(y, yhat, bin_da=0.01, max_da=1500.0):
    """Cosine similarity of sparse binned intensity vectors."""
    vecs = []
    for s in (y, yhat):
        bad = s.masses[s.masses >= max_da]
        if bad.size:
            raise ValueError(f"spectrum {s.id!r}: peaks at or above {max_da} Da: {bad.tolist()}")
        bins, inv = np.unique(np.floor(s.masses / bin_da).astype(np.int64), return_inverse=True)
        vals = np.zeros(bins.size)
        np.add.at(vals, inv, s.intensities)
        vecs.append(dict(zip(bins.tolist(), vals.tolist())))
    a, b = vecs
    na = math.sqrt(sum(v * v for v in a.values()))
    nb = math.sqrt(sum(v * v for v in b.values()))
    if na == 0 or nb == 0:
        return 0.0
    dot = sum(v * b[k] for k, v in a.items() if k in b)
    return min(1.0, dot / (na * nb))


def admissible_pairs(ma, mb, tol=PPM10):
    """All index pairs (i, j) with masses within tolerance."""
    order = np.argsort(mb, kind="stable")
    sb = mb[order]
    rows, cols = [], []
    for i, m in enumerate(ma):
        lo, hi = tol.window(m)
        for c in range(np.searchsorted(sb, lo, "left"), np.searchsorted(sb, hi, "right")):
            if tol.admissible(m, sb[c]):
                rows.append(i)
                cols.append(order[c])
    return np.array(rows, dtype=np.int64), np.array(cols, dtype=np.int64)


def hungarian_matching(y, yhat, tol=PPM10):
    """Optimal one-to-one peak matching; returns (score, [(i, j), ...])."""
    if len(y) == 0 or len(yhat) == 0:
        return 0.0, []
    na = np.linalg.norm(y.intensities)
    nb = np.linalg.norm(yhat.intensities)
    if na == 0 or nb == 0:
        return 0.0, []
    pa, pb = y.intensities / na, yhat.intensities / nb
    rows, cols = admissible_pairs(y.masses, yhat.masses, tol)
    if rows.size == 0:
        return 0.0, []
    n, m = len(y), len(yhat)
    # independent subproblems: connected components of the admissible graph
    graph = coo_matrix((np.ones(rows.size), (rows, n + cols)), shape=(n + m, n + m))
    _, label = connected_components(graph, directed=False)
    pairs, score = [], 0.0
    for comp in np.unique(label[rows]):
        sel = label[rows] == comp
        r, c = rows[sel], cols[sel]
        ur, ri = np.unique(r, return_inverse=True)
        uc, ci = np.unique(c, return_inverse=True)
        w = np.zeros((ur.size, uc.size))
        w[ri, ci] = pa[r] * pb[c]
        ok = np.zeros(w.shape, dtype=bool)
        ok[ri, ci] = True
        a, b = linear_sum_assignment(w, maximize=True)
        for x, z in zip(a, b):
            if ok[x, z]:
                pairs.append((int(ur[x]), int(uc[z])))
                score += w[x, z]
    return min(1.0, float(score)), sorted(pairs)


def cos_hungarian(y, yhat, tol=PPM10):
    return hungarian_matching(y, yhat, tol)[0]


def brute_force_cos_hungarian(y, yhat, tol=PPM10):
    """Exhaustive search over all partial matchings (small spectra only)."""
    na, nb = np.linalg.norm(y.intensities), np.linalg.norm(yhat.intensities)
    if na == 0 or nb == 0:
        return 0.0
    pa, pb = y.intensities / na, yhat.intensities / nb
    n, m = len(y), len(yhat)
    ok = [[bool(tol.admissible(y.masses[i], yhat.masses[j])) for j in range(m)] for i in range(n)]

    def best(i, used):
        if i == n:
            return 0.0
        out = best(i + 1, used)
        for j in range(m):
            if ok[i][j] and not used >> j & 1:
                out = max(out, pa[i] * pb[j] + best(i + 1, used | 1 << j))
        return out

    return best(0, 0)


def recall_metrics(spectrum, support, tol=PPM_TOL):
    """(R, WR): fraction and intensity-weighted fraction of explainable peaks."""
    if len(spectrum) == 0:
        return 0.0, 0.0
    if isinstance(tol, MatchTolerance):
        support = np.sort(np.asarray(support, dtype=np.float64))
        flags = np.zeros(len(spectrum), dtype=bool)
        if support.size:
            rows, _ = admissible_pairs(spectrum.masses, support, tol)
            flags[rows] = True
    else:
        flags = in_support(spectrum.masses, support, tol)
    return float(np.mean(flags)), float(np.sum(spectrum.intensities[flags]))


def measured_os(spectrum, support):
    return os_partition(spectrum, support)[2]


def os_abs_error(records, model):
    """Mean |measured P(OS) - predicted P(OS)| over records.

    ``model`` is either a trained Model or a callable ``record -> (support
    masses, predicted P(OS))``.
    """
    if not records:
        raise ValueError("no records")
    errors = []
    for r in records:
        if callable(model):
            support, p_hat = model(r)
        else:
            state = model.latent(model.prepare(r.mol, r.energies))
            support, p_hat = state.group_mass, state.p_os
        errors.append(abs(measured_os(r.spectrum, support) - p_hat))
    return float(np.mean(errors))


def _mode(values):
    counts = {}
    for v in values:
        counts[v] = counts.get(v, 0) + 1
    return min(counts, key=lambda v: (-counts[v], v))


def cons_maj(argmaxes):
    """CONS and MAJ for one formula given the K argmax annotations."""
    k = len(argmaxes)
    agree = sum(argmaxes[a] == argmaxes[b] for a in range(k) for b in range(a + 1, k))
    cons = float(agree == k * (k - 1) // 2)
    mode = _mode(argmaxes)
    return cons, sum(a == mode for a in argmaxes) / k


def _cv(values):
    values = np.asarray(values, dtype=np.float64)
    mean = values.mean()
    if values.size < 2 or mean == 0:
        return 0.0
    return float(values.std(ddof=1) / mean)


def ensemble_consistency(states, truths=None, p_min=0.05):
    """Ensemble annotation consistency over molecules.

    ``states[k][i]`` is model k's LatentState for molecule i (all models share
    the DAG and hydrogen tolerance). ``truths[i]`` are optional observed
    spectra for the cosine statistics. Returns a dict of metrics.
    """
    K = len(states)
    if K < 2:
        raise ValueError("ensemble consistency needs at least two models")
    n_mol = len(states[0])
    if any(len(s) != n_mol for s in states):
        raise ValueError("every model needs a state for every molecule")
    cons_mol, maj_mol, icons_mol, imaj_mol = [], [], [], []
    h_nf, h_cf = [], []
    cos = []
    per_formula = []  # (H(n|f), H(class|f)) pairs
    from .probdist import iso_aggregate, iso_entropies
    for i in range(n_mol):
        group = [states[k][i] for k in range(K)]
        classes = {n.node_id: n.iso_class for n in group[0].dag}
        pf = np.stack([np.exp(s.log_p_formula) for s in group])
        keep = np.nonzero(pf.min(axis=0) >= p_min)[0]
        argmax = [s.annotation_argmax() for s in group]
        iso_argmax = []
        for s in group:
            cids, _, _, c_given_f = iso_aggregate(s, classes)
            iso_argmax.append({g: cids[int(np.argmax(c_given_f[:, g]))] for g in keep})
        for s in group:
            h_nf.append(s.entropies()["n|f"][1])
            per_f, norm = iso_entropies(s, classes)
            h_cf.append(norm)
            own = s.conditional_entropy_per_formula()
            per_formula.extend(zip(own.tolist(), per_f.tolist()))
        if truths is not None:
            cos.extend(cos_hungarian(truths[i], s.spectrum()) for s in group)
        if keep.size == 0:
            continue
        c_vals, m_vals, ic_vals, im_vals = [], [], [], []
        for g in keep:
            c, m = cons_maj([a[g] for a in argmax])
            ic, im = cons_maj([a[g] for a in iso_argmax])
            c_vals.append(c)
            m_vals.append(m)
            ic_vals.append(ic)
            im_vals.append(im)
        cons_mol.append(np.mean(c_vals))
        maj_mol.append(np.mean(m_vals))
        icons_mol.append(np.mean(ic_vals))
        imaj_mol.append(np.mean(im_vals))
    out = {
        "K": K,
        "molecules": n_mol,
        "molecules_scored": len(cons_mol),
        "mean_H_nf": float(np.mean(h_nf)),
        "cv_H_nf": _cv(h_nf),
        "mean_H_cf": float(np.mean(h_cf)),
        "cv_H_cf": _cv(h_cf),
        "cons": float(np.mean(cons_mol)) if cons_mol else float("nan"),
        "maj": float(np.mean(maj_mol)) if maj_mol else float("nan"),
        "iso_cons": float(np.mean(icons_mol)) if icons_mol else float("nan"),
        "iso_maj": float(np.mean(imaj_mol)) if imaj_mol else float("nan"),
        "per_formula_entropies": per_formula,
    }
    if cos:
        out["mean_cos_hun"] = float(np.mean(cos))
        out["cv_cos_hun"] = _cv(cos)
    return out
