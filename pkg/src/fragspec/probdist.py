"""Latent distributions over DAG nodes and formulae, spectra and annotations.

All composition happens in log space. Joint cells are indexed by
``(node index, offset index)`` with offsets ``-j..j``; one extra cell holds the
out-of-support (OS) probability.
"""

import math

import numpy as np
from scipy.special import ndtr

from .fragdag import offset_valid
from .molio import formula_mass
from .spectrum import Spectrum

SIGMA_PER_DA = 5e-6
_TRUNC_MASS = float(ndtr(1.0) - ndtr(-1.0))


class SupportError(ValueError):
    pass


def validity_mask(dag, j):
    """Boolean table (nodes x 2j+1) of chemically valid hydrogen offsets."""
    nodes = dag.node_list()
    mask = np.zeros((len(nodes), 2 * j + 1), dtype=bool)
    for r, node in enumerate(nodes):
        for c, i in enumerate(range(-j, j + 1)):
            mask[r, c] = offset_valid(node, i)
    return mask


def _segment_lse(x, ids, n):
    m = np.full(n, -np.inf)
    np.maximum.at(m, ids, x)
    shift = np.where(np.isfinite(m), m, 0.0)
    s = np.zeros(n)
    np.add.at(s, ids, np.exp(x - shift[ids]))
    with np.errstate(divide="ignore"):
        return np.log(s) + shift


def _xlogx_sum(logp):
    p = np.exp(logp)
    live = p > 0
    return -float(np.sum(p[live] * logp[live]))


def _normalize_entropy(h, size):
    return 0.0 if size <= 1 else h / math.log(size)


class LatentState:
    """Normalized joint over (node, formula) cells plus the OS cell."""

    def __init__(self, dag, j, log_joint, log_p_os, valid, mode="protonated"):
        self.dag = dag
        self.j = j
        self.mode = mode
        self.valid = np.asarray(valid, dtype=bool)
        self.log_joint = np.where(self.valid, log_joint, -np.inf)
        self.log_p_os = float(log_p_os)
        nodes = dag.node_list()
        self.node_ids = np.array([n.node_id for n in nodes], dtype=object)

        rows, cols = np.nonzero(self.valid)
        self.cell_node = rows
        self.cell_offset = cols
        self.cell_logp = self.log_joint[rows, cols]
        cell_formula = [nodes[r].formula.with_hydrogens(nodes[r].h_attached + c - j)
                        for r, c in zip(rows, cols)]
        unique = sorted(set(cell_formula), key=lambda f: (formula_mass(f, mode), f.counts))
        self.formulas = unique
        self.formula_index = {f: g for g, f in enumerate(unique)}
        self.cell_group = np.array([self.formula_index[f] for f in cell_formula], dtype=np.int64)
        self.group_mass = np.array([formula_mass(f, mode) for f in unique])

        n_nodes, n_groups = len(nodes), len(unique)
        self.log_p_node = _segment_lse(self.cell_logp, rows, n_nodes)
        self.log_p_formula = _segment_lse(self.cell_logp, self.cell_group, n_groups)
        with np.errstate(invalid="ignore"):
            lpn = self.log_p_node[rows]
            self.cell_log_f_given_n = np.where(np.isfinite(lpn), self.cell_logp - lpn, np.nan)
            lpf = self.log_p_formula[self.cell_group]
            self.cell_log_n_given_f = np.where(np.isfinite(lpf), self.cell_logp - lpf, np.nan)

    # ------------------------------------------------------------ marginals
    @property
    def joint(self):
        return np.exp(self.log_joint)

    @property
    def p_os(self):
        return math.exp(self.log_p_os)

    @property
    def node_marginal(self):
        return np.exp(self.log_p_node)

    @property
    def formula_marginal(self):
        return {f: math.exp(lp) for f, lp in zip(self.formulas, self.log_p_formula)}

    def cond_f_given_n(self):
        """Table (nodes x 2j+1) of P(f|n); rows of zero-probability nodes are NaN."""
        out = np.zeros(self.valid.shape)
        out[self.cell_node, self.cell_offset] = np.exp(self.cell_log_f_given_n)
        out[~np.isfinite(self.log_p_node)] = np.nan
        return out

    def mass_marginal(self):
        return dict(zip(self.group_mass.tolist(), np.exp(self.log_p_formula).tolist()))

    def support_masses(self):
        return self.group_mass.copy()

    # ----------------------------------------------------------- spectra
    def spectrum(self, energies=(), mol_id=""):
        """Dirac-mode predicted spectrum; intensities sum to 1 - P(OS)."""
        return Spectrum(self.group_mass, np.exp(self.log_p_formula), energies, mol_id)

    def density(self):
        return GaussianMixture(self.group_mass, np.exp(self.log_p_formula))

    # -------------------------------------------------------- annotation
    def annotation(self, formula):
        """P(n|f) as ``{node_id: prob}`` and the argmax node (lowest id on ties)."""
        g = self.formula_index.get(formula)
        if g is None or not np.isfinite(self.log_p_formula[g]):
            raise SupportError(f"formula {formula} outside predicted support")
        sel = np.nonzero(self.cell_group == g)[0]
        dist = {}
        for c in sel:
            nid = self.node_ids[self.cell_node[c]]
            dist[nid] = dist.get(nid, 0.0) + math.exp(self.cell_log_n_given_f[c])
        best = min(dist, key=lambda nid: (-dist[nid], nid))
        return dist, best

    def annotation_argmax(self):
        """``{formula group: argmax node id}`` over all formulae."""
        best = {}
        for c in range(self.cell_group.size):
            g = self.cell_group[c]
            key = (-self.cell_logp[c], self.node_ids[self.cell_node[c]])
            if g not in best or key < best[g]:
                best[g] = key
        return {g: k[1] for g, k in best.items()}

    # ------------------------------------------------------------ entropy
    def entropies(self):
        """Shannon entropies (nats) of the in-support latents and normalized versions.

        Latents are renormalized over the in-support cells. Conditional
        normalized entropies average H(x|y)/log|X_y| under the conditioning
        marginal; a support of one element has normalized entropy 0.
        """
        lse = _segment_lse(self.cell_logp, np.zeros(self.cell_logp.size, dtype=np.int64), 1)[0]
        lq = self.cell_logp - lse
        n_nodes, n_groups = self.valid.shape[0], len(self.formulas)
        lq_n = _segment_lse(lq, self.cell_node, n_nodes)
        lq_f = _segment_lse(lq, self.cell_group, n_groups)
        q = np.exp(lq)
        node_sizes = np.bincount(self.cell_node, minlength=n_nodes)
        group_sizes = np.bincount(self.cell_group, minlength=n_groups)

        h_nf = _xlogx_sum(lq)
        h_n = _xlogx_sum(lq_n)
        h_f = _xlogx_sum(lq_f)
        with np.errstate(invalid="ignore"):
            t_fn = np.where(q > 0, -q * (lq - lq_n[self.cell_node]), 0.0)
            t_nf = np.where(q > 0, -q * (lq - lq_f[self.cell_group]), 0.0)
        h_f_n = float(np.sum(t_fn))
        h_n_f = float(np.sum(t_nf))
        inv_n = np.array([0.0 if s <= 1 else 1.0 / math.log(s) for s in node_sizes])
        inv_f = np.array([0.0 if s <= 1 else 1.0 / math.log(s) for s in group_sizes])
        live_nodes = int(np.sum(np.isfinite(lq_n)))
        live_groups = int(np.sum(np.isfinite(lq_f)))
        return {
            "n,f": (h_nf, _normalize_entropy(h_nf, self.cell_logp.size)),
            "n": (h_n, _normalize_entropy(h_n, live_nodes)),
            "f": (h_f, _normalize_entropy(h_f, live_groups)),
            "f|n": (h_f_n, float(np.sum(t_fn * inv_n[self.cell_node]))),
            "n|f": (h_n_f, float(np.sum(t_nf * inv_f[self.cell_group]))),
        }

    def conditional_entropy_per_formula(self):
        """H(n|f) in nats for each formula group."""
        out = np.zeros(len(self.formulas))
        lp = self.cell_log_n_given_f
        p = np.exp(lp)
        np.add.at(out, self.cell_group, np.where(p > 0, -p * lp, 0.0))
        return out


def latent_from_logits(joint_logits, os_logit, valid, dag, j, mode="protonated"):
    """Masked softmax over all valid cells plus the OS cell."""
    joint_logits = np.asarray(joint_logits, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    if joint_logits.shape != (len(dag), 2 * j + 1) or valid.shape != joint_logits.shape:
        raise ValueError(f"logit table shape {joint_logits.shape} does not match "
                         f"{len(dag)} nodes and j={j}")
    x = np.where(valid, joint_logits, -np.inf)
    flat = np.append(x[valid], float(os_logit))
    finite = flat[np.isfinite(flat)]
    if finite.size == 0:
        raise ValueError("every cell is masked")
    m = finite.max()
    lse = math.log(float(np.sum(np.exp(flat - m)))) + m
    return LatentState(dag, j, x - lse, float(os_logit) - lse, valid, mode)


def mass_distribution(state, resolution="dirac", energies=(), mol_id=""):
    if resolution == "dirac":
        return state.spectrum(energies, mol_id)
    if resolution == "gaussian":
        return state.density()
    raise ValueError(f"unknown resolution {resolution!r}")


class GaussianMixture:
    """Mixture of Gaussians truncated at one standard deviation, each renormalized."""

    def __init__(self, means, weights, sigma_per_da=SIGMA_PER_DA):
        self.means = np.asarray(means, dtype=np.float64)
        self.weights = np.asarray(weights, dtype=np.float64)
        self.sigmas = sigma_per_da * self.means

    def component(self, k, m):
        m = np.asarray(m, dtype=np.float64)
        z = (m - self.means[k]) / self.sigmas[k]
        pdf = np.exp(-0.5 * z * z) / (math.sqrt(2 * math.pi) * self.sigmas[k] * _TRUNC_MASS)
        return np.where(np.abs(z) <= 1.0, pdf, 0.0)

    def __call__(self, m):
        m = np.asarray(m, dtype=np.float64)
        out = np.zeros_like(m)
        # components only matter near their centre
        lo = np.searchsorted(self.means + self.sigmas, m.min() if m.size else 0.0)
        hi = np.searchsorted(self.means - self.sigmas, m.max() if m.size else 0.0, side="right")
        for k in range(lo, hi):
            out += self.weights[k] * self.component(k, m)
        return out


def iso_aggregate(state, classes):
    """Aggregate node-level distributions over isomorphism classes.

    ``classes`` maps node id -> class id. Returns ``(class_ids, P(class),
    P(f|class), P(class|f))`` with the conditionals as (classes x formulae)
    arrays; rows of zero-probability classes are NaN.
    """
    class_ids = sorted(set(classes.values()))
    cindex = {c: k for k, c in enumerate(class_ids)}
    cell_class = np.array([cindex[classes[state.node_ids[r]]] for r in state.cell_node],
                          dtype=np.int64)
    n_c, n_g = len(class_ids), len(state.formulas)
    joint = np.zeros((n_c, n_g))
    np.add.at(joint, (cell_class, state.cell_group), np.exp(state.cell_logp))
    p_class = joint.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        f_given_c = joint / p_class[:, None]
        c_given_f = np.zeros((n_c, n_g))
        np.add.at(c_given_f, (cell_class, state.cell_group), np.exp(state.cell_log_n_given_f))
    f_given_c[p_class == 0] = np.nan
    return class_ids, p_class, f_given_c, c_given_f


def iso_entropies(state, classes):
    """H(class|f) per formula and the normalized expectation Ĥ(class|f)."""
    _, _, _, c_given_f = iso_aggregate(state, classes)
    lq_f = state.log_p_formula - np.log(np.sum(np.exp(state.log_p_formula)))
    qf = np.exp(lq_f)
    per_f = np.zeros(c_given_f.shape[1])
    norm = 0.0
    for g in range(c_given_f.shape[1]):
        p = c_given_f[:, g]
        p = p[p > 0]
        per_f[g] = -float(np.sum(p * np.log(p)))
        if p.size > 1:
            norm += qf[g] * per_f[g] / math.log(p.size)
    return per_f, norm


def annotated_peaks(state, classes=None, top=3, mol_id=""):
    """Per-peak records with formula, top fragment annotations and class annotations."""
    if classes is None:
        classes = {n.node_id: n.iso_class for n in state.dag}
    class_ids, _, _, c_given_f = iso_aggregate(state, classes)
    out = []
    pf = np.exp(state.log_p_formula)
    for g, f in enumerate(state.formulas):
        sel = np.nonzero(state.cell_group == g)[0]
        ann = {}
        for c in sel:
            nid = state.node_ids[state.cell_node[c]]
            ann[nid] = ann.get(nid, 0.0) + math.exp(state.cell_log_n_given_f[c])
        ranked = sorted(ann.items(), key=lambda kv: (-kv[1], kv[0]))[:top]
        iso = [(class_ids[k], float(c_given_f[k, g])) for k in range(len(class_ids))
               if c_given_f[k, g] > 0]
        iso.sort(key=lambda kv: (-kv[1], kv[0]))
        out.append({
            "id": mol_id,
            "mass": float(state.group_mass[g]),
            "intensity": float(pf[g]),
            "formula": str(f),
            "top_annotations": [{"node_id": int(nid), "mask_hex": hex(int(nid)), "prob": p}
                                for nid, p in ranked],
            "iso_annotations": [{"class_id": int(cid), "prob": p} for cid, p in iso[:top]],
        })
    return out
