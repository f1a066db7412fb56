"""Losses, IS/OS partitioning, spectrum merging, splits and the optimizer loop."""

import hashlib
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .gnn import Batch, Model, ModelConfig, Prepared, cell_log_probs, forward
from .molio import read_molecules, write_molecules
from .spectrum import Spectrum, read_spectra, write_spectra

log = logging.getLogger(__name__)

PPM_TOL = 1e-5
LOG_FLOOR = -745.0
ALPHA_KEYS = ("n", "f", "f|n", "n|f")


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class SpectrumRecord:
    id: str
    mol: object
    spectrum: Spectrum
    energies: tuple = ()
    split: str = "train"


# ------------------------------------------------------------ partitions

def _nearest_within(masses, support, tol=PPM_TOL):
    """Index of the nearest admissible support mass per peak (-1 if none)."""
    support = np.asarray(support, dtype=np.float64)
    masses = np.asarray(masses, dtype=np.float64)
    out = np.full(masses.size, -1, dtype=np.int64)
    if support.size == 0:
        return out
    order = np.argsort(support, kind="stable")
    s = support[order]
    pos = np.searchsorted(s, masses)
    for k, m in enumerate(masses):
        best, best_gap = -1, math.inf
        for c in (pos[k] - 1, pos[k]):
            if 0 <= c < s.size:
                gap = abs(s[c] - m)
                if gap <= tol * max(s[c], m) and gap < best_gap:
                    best, best_gap = c, gap
        if best >= 0:
            out[k] = order[best]
    return out


def in_support(masses, support, tol=PPM_TOL):
    return _nearest_within(masses, support, tol) >= 0


def os_partition(spectrum, support, tol=PPM_TOL):
    """Split peaks into in-support and out-of-support; returns (IS, OS, P(OS))."""
    flags = in_support(spectrum.masses, support, tol)
    is_spec = Spectrum(spectrum.masses[flags], spectrum.intensities[flags], spectrum.energies, spectrum.id)
    os_spec = Spectrum(spectrum.masses[~flags], spectrum.intensities[~flags], spectrum.energies, spectrum.id)
    return is_spec, os_spec, float(np.sum(spectrum.intensities[~flags]))


def match_peaks(spectrum, group_mass, tol=PPM_TOL):
    """Target mass per predicted formula group plus the OS remainder.

    Each observed peak goes to its nearest predicted mass within tolerance;
    several peaks on one mass add up.
    """
    idx = _nearest_within(spectrum.masses, group_mass, tol)
    target = np.zeros(len(group_mass))
    hit = idx >= 0
    np.add.at(target, idx[hit], spectrum.intensities[hit])
    return target, float(np.sum(spectrum.intensities[~hit]))


# -------------------------------------------------- losses on a LatentState

def nll_loss(state, spectrum):
    """Cross-entropy of the observed peaks against the predicted masses (IS only)."""
    target, _ = match_peaks(spectrum, state.group_mass)
    sel = target > 0
    return float(-np.sum(target[sel] * state.log_p_formula[sel]))


def loss_with_os(state, spectrum, return_flag=False):
    """IS cross-entropy plus the OS term; the OS log is floored to stay finite."""
    target, p_os = match_peaks(spectrum, state.group_mass)
    sel = target > 0
    loss = float(-np.sum(target[sel] * state.log_p_formula[sel]))
    flagged = False
    if p_os > 0:
        lp = state.log_p_os
        if lp < LOG_FLOOR:
            lp, flagged = LOG_FLOOR, True
        loss -= p_os * lp
    return (loss, flagged) if return_flag else loss


def reg_loss(state, loss, alphas):
    ent = state.entropies()
    return loss + sum(alphas.get(k, 0.0) * ent[k][1] for k in ALPHA_KEYS)


def target_entropy(spectrum):
    p = spectrum.intensities[spectrum.intensities > 0]
    return float(-np.sum(p * np.log(p)))


# ------------------------------------------------------ batched objective

def _entropy_terms(batch, log_cells):
    """Per-molecule normalized entropies (mols x 1 each) of the IS-renormalized latents."""
    seg = batch.seg_cell_mol
    lq = log_cells - T.gather(T.segment_logsumexp(log_cells, seg), batch.cell_mol)
    q = T.exp(lq)
    lq_n = T.segment_logsumexp(lq, batch.seg_cell_node)
    lq_f = T.segment_logsumexp(lq, batch.seg_cell_group)
    h_n = T.segment_sum(-(T.exp(lq_n) * lq_n), batch.seg_node_mol) * batch.inv_log_nodes
    h_f = T.segment_sum(-(T.exp(lq_f) * lq_f), batch.seg_group_mol) * batch.inv_log_groups
    t_fn = -(q * (lq - T.gather(lq_n, batch.cell_node)))
    t_nf = -(q * (lq - T.gather(lq_f, batch.cell_group)))
    h_fn = T.segment_sum(t_fn * batch.cell_inv_log_node, seg)
    h_nf = T.segment_sum(t_nf * batch.cell_inv_log_group, seg)
    return {"n": h_n, "f": h_f, "f|n": h_fn, "n|f": h_nf}


def batch_objective(model, batch, alphas=None):
    """Mean over molecules of the OS-aware cross-entropy plus entropy penalties."""
    if not batch.has_targets:
        raise ValueError("batch has no spectra attached")
    log_cells, log_os, _ = cell_log_probs(model, batch)
    log_group = T.segment_logsumexp(log_cells, batch.seg_cell_group)
    ce = -T.sum(log_group * batch.target_group) - T.sum(log_os * batch.target_os)
    total = ce
    alphas = {k: v for k, v in (alphas or {}).items() if v}
    if alphas:
        ent = _entropy_terms(batch, log_cells)
        for k, a in alphas.items():
            total = total + T.sum(ent[k]) * a
    return total * (1.0 / batch.n_mols)


def batch_spectra(model, batch):
    """Predicted Dirac spectra (intensity sums to 1 - P(OS)) and P(OS) per molecule."""
    log_cells, log_os, _ = cell_log_probs(model, batch)
    lg = T.segment_logsumexp(log_cells, batch.seg_cell_group).data[:, 0]
    out = []
    start = 0
    for m, p in enumerate(batch.items):
        g = len(p.formulas)
        out.append((Spectrum(p.group_mass, np.exp(lg[start:start + g]), p.energies, p.id),
                    float(np.exp(log_os.data[m, 0]))))
        start += g
    return out


def batch_losses(model, batch):
    """Per-molecule OS-aware cross-entropy without a tape."""
    log_cells, log_os, _ = cell_log_probs(model, batch)
    lg = T.segment_logsumexp(log_cells, batch.seg_cell_group).data[:, 0]
    terms = -lg * batch.target_group[:, 0]
    terms[batch.target_group[:, 0] == 0] = 0.0
    per = np.zeros(batch.n_mols)
    np.add.at(per, batch.group_mol, terms)
    per -= np.maximum(log_os.data[:, 0], LOG_FLOOR) * batch.target_os[:, 0]
    return per


# ------------------------------------------------------------ spectra ops

def merge_spectra(spectra):
    """Average spectra over their union of exact masses, renormalize, union energies."""
    spectra = list(spectra)
    if not spectra:
        raise ValueError("merge_spectra needs at least one spectrum")
    acc = {}
    for s in spectra:
        for m, p in zip(s.masses.tolist(), s.intensities.tolist()):
            acc[m] = acc.get(m, 0.0) + p
    masses = np.array(sorted(acc))
    inten = np.array([acc[m] for m in masses]) / len(spectra)
    energies = sorted({e for s in spectra for e in s.energies})
    return Spectrum(masses, inten, energies, spectra[0].id).normalized()


def split_of(mol_id, ratios=(0.6, 0.2, 0.2), seed=0):
    h = hashlib.blake2b(f"{seed}:{mol_id}".encode(), digest_size=8).digest()
    u = int.from_bytes(h, "little") / 2.0 ** 64
    acc = 0.0
    for name, r in zip(("train", "val", "test"), ratios):
        acc += r
        if u < acc:
            return name
    return "test" if ratios[2] > 0 else ("val" if ratios[1] > 0 else "train")


def split_dataset(records, ratios=(0.6, 0.2, 0.2), seed=0):
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"split ratios must be three non-negatives summing to 1, got {ratios}")
    for r in records:
        r.split = split_of(r.id, ratios, seed)
    return records


# ----------------------------------------------------------- dataset I/O

MOLECULES_FILE = "molecules.jsonl"
SPECTRA_FILE = "spectra.msp"
SPLITS_FILE = "splits.tsv"


def save_dataset(directory, records):
    os.makedirs(directory, exist_ok=True)
    write_molecules(os.path.join(directory, MOLECULES_FILE), [r.mol for r in records])
    write_spectra(os.path.join(directory, SPECTRA_FILE), [r.spectrum for r in records])
    with open(os.path.join(directory, SPLITS_FILE), "w") as fh:
        for r in records:
            fh.write(f"{r.id}\t{r.split}\n")


def load_dataset(directory):
    mols = {m.id: m for m in read_molecules(os.path.join(directory, MOLECULES_FILE))}
    spectra = read_spectra(os.path.join(directory, SPECTRA_FILE))
    splits = {}
    path = os.path.join(directory, SPLITS_FILE)
    if os.path.exists(path):
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    mid, split = line.rstrip("\n").split("\t")
                    splits[mid] = split
    records = []
    for s in spectra:
        if s.id not in mols:
            raise ValueError(f"spectrum {s.id!r} has no molecule record")
        records.append(SpectrumRecord(s.id, mols[s.id], s, s.energies, splits.get(s.id, "train")))
    return records


# ------------------------------------------------------------- training

@dataclass
class TrainSettings:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16
    patience: int = 10
    max_epochs: int = 100
    alpha_n: float = 0.0
    alpha_f: float = 0.0
    alpha_fn: float = 0.0
    alpha_nf: float = 0.0
    seed: int = 0
    eval_cosine: bool = True

    @property
    def alphas(self):
        return {"n": self.alpha_n, "f": self.alpha_f, "f|n": self.alpha_fn, "n|f": self.alpha_nf}


def read_config(path):
    """Parse a flat ``key=value`` file into (ModelConfig, TrainSettings)."""
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            k, v = line.split("=", 1)
            values[k.strip()] = v.strip()
    return config_from_values(values)


def config_from_values(values):
    model_keys = {f.name for f in fields(ModelConfig)}
    train_types = {f.name: f.type for f in fields(TrainSettings)}
    unknown = set(values) - model_keys - set(train_types)
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
    config = ModelConfig.from_dict({k: v for k, v in values.items() if k in model_keys})
    kw = {}
    for k, v in values.items():
        if k in train_types:
            kind = train_types[k]
            if kind in (bool, "bool"):
                kw[k] = str(v).lower() in ("1", "true", "yes", "on")
            elif kind in (int, "int"):
                kw[k] = int(v)
            else:
                kw[k] = float(v)
    if "seed" in values:
        kw["seed"] = int(values["seed"])
    return config, TrainSettings(**kw)


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class History:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_cos: list = field(default_factory=list)
    best_epoch: int = -1

    def as_dict(self):
        return asdict(self)


def prepare_records(records, config):
    return [Prepared(r.mol, config, r.energies, r.spectrum) for r in records]


def evaluate_prepared(model, prepared, batch_size=64, with_cosine=True):
    """Mean loss and mean cosine-Hungarian similarity on prepared records."""
    from .metrics import cos_hungarian
    losses, cosines = [], []
    for start in range(0, len(prepared), batch_size):
        batch = Batch(prepared[start:start + batch_size])
        losses.extend(batch_losses(model, batch).tolist())
        if with_cosine:
            for p, (spec, _) in zip(batch.items, batch_spectra(model, batch)):
                cosines.append(cos_hungarian(p.spectrum, spec))
    return float(np.mean(losses)), (float(np.mean(cosines)) if cosines else float("nan"))


def train_model(records, config, settings=None, model=None, prepared=None, log_every=1):
    """Adam on the batched objective with early stopping; returns (best model, history)."""
    settings = settings or TrainSettings()
    train_recs = [r for r in records if r.split == "train"]
    val_recs = [r for r in records if r.split == "val"]
    if not train_recs:
        raise ValueError("no training records")
    if prepared is None:
        prepared = {r.id: p for r, p in zip(records, prepare_records(records, config))}
    train_p = [prepared[r.id] for r in train_recs]
    val_p = [prepared[r.id] for r in val_recs]
    model = model or Model(config)
    params = model.param_list()
    opt = Adam(params, settings.lr, settings.beta1, settings.beta2, settings.eps)
    rng = np.random.default_rng(settings.seed)
    alphas = settings.alphas
    hist = History()
    best_state, best_val, waited = model.state(), math.inf, 0
    for epoch in range(settings.max_epochs):
        order = rng.permutation(len(train_p))
        running, count = 0.0, 0
        for start in range(0, len(order), settings.batch_size):
            batch = Batch([train_p[k] for k in order[start:start + settings.batch_size]])
            with T.Tape() as tape:
                loss = batch_objective(model, batch, alphas)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch {start // settings.batch_size}: "
                    f"ids {[p.id for p in batch.items][:5]}")
            grads = T.backward(tape, loss, params)
            if not all(np.all(np.isfinite(g)) for g in grads):
                raise TrainingDiverged(f"non-finite gradient at epoch {epoch}")
            opt.step(grads)
            running += value * batch.n_mols
            count += batch.n_mols
        hist.train_loss.append(running / count)
        if val_p:
            vl, vc = evaluate_prepared(model, val_p, with_cosine=settings.eval_cosine)
        else:
            vl, vc = hist.train_loss[-1], float("nan")
        hist.val_loss.append(vl)
        hist.val_cos.append(vc)
        if log_every and epoch % log_every == 0:
            log.info("epoch=%d train_loss=%.5f val_loss=%.5f val_cos=%.4f",
                     epoch, hist.train_loss[-1], vl, vc)
        if vl < best_val - 1e-12:
            best_val, best_state, waited = vl, model.state(), 0
            hist.best_epoch = epoch
        else:
            waited += 1
            if waited >= settings.patience:
                break
    model.load_state(best_state)
    return model, hist


__all__ = [
    "SpectrumRecord", "os_partition", "in_support", "match_peaks", "nll_loss", "loss_with_os",
    "reg_loss", "target_entropy", "batch_objective", "batch_spectra", "batch_losses",
    "merge_spectra", "split_of", "split_dataset", "save_dataset", "load_dataset",
    "TrainSettings", "read_config", "config_from_values", "Adam", "History", "train_model",
    "prepare_records", "evaluate_prepared", "TrainingDiverged", "forward",
]
