"""Two-stage graph network: molecule GNN over atoms, fragment GNN over DAG nodes.

A molecule is turned once into a :class:`Prepared` bundle of static index
arrays and constant features; any number of those are stacked into a
:class:`Batch` and run through :func:`forward` in one pass.
"""

import json
import math
import struct
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .fragdag import rec_frag
from .molio import (ATOM_FEATURE_DIM, BOND_FEATURE_DIM, HEAVY_ELEMENTS, atom_features,
                    bond_features, formula_mass, heavy_skeleton)
from .probdist import latent_from_logits, validity_mask

CHECKPOINT_MAGIC = b"FRAGSPEC-CKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    hidden_dim: int = 64
    L1: int = 3
    L2: int = 2
    d: int = 3
    j: int = 2
    fourier_T: int = 10
    use_frag_edges: bool = False
    use_collision_energy: bool = True
    mode: str = "protonated"
    seed: int = 0

    def __post_init__(self):
        if self.hidden_dim < 1 or self.L1 < 1 or self.L2 < 1:
            raise ValueError("hidden_dim, L1 and L2 must be >= 1")
        if self.j < 0 or self.d < 1 or self.fourier_T < 1:
            raise ValueError("need j >= 0, d >= 1, fourier_T >= 1")

    @property
    def width(self):
        return 2 * self.j + 1

    @classmethod
    def from_dict(cls, values):
        known = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, value in values.items():
            if key in known:
                kwargs[key] = _coerce(value, known[key])
        return cls(**kwargs)


def _coerce(value, kind):
    if not isinstance(value, str):
        return value
    if kind in (bool, "bool"):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if kind in (int, "int"):
        return int(value)
    if kind in (float, "float"):
        return float(value)
    return value


def fourier_embed(z, T=10):
    """``|sin(2*pi*z / 2**t)|`` for t = 1..T."""
    z = np.asarray(z, dtype=np.float64)
    periods = 2.0 ** np.arange(1, T + 1)
    return np.abs(np.sin(2 * np.pi * z[..., None] / periods))


def formula_embedding(heavy_counts, T=10):
    return fourier_embed(np.asarray(heavy_counts, dtype=np.float64), T).reshape(-1)


def collision_energy_embedding(energies, T=10):
    if len(energies) == 0:
        raise ValueError("collision energy embedding needs at least one energy")
    return fourier_embed(np.asarray(energies, dtype=np.float64), T).mean(axis=0)


# ------------------------------------------------------------------ params

def _glorot(rng, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def param_shapes(config):
    """Ordered parameter manifest ``[(name, shape)]`` for a config."""
    H, Tn = config.hidden_dim, config.fourier_T
    ce = Tn if config.use_collision_energy else 0
    formula_dim = len(HEAVY_ELEMENTS) * Tn
    shapes = [("mol.in.W", (ATOM_FEATURE_DIM, H)), ("mol.in.b", (1, H))]
    for l in range(config.L1):
        shapes += [(f"mol.{l}.bond.W", (BOND_FEATURE_DIM, H)), (f"mol.{l}.bond.b", (1, H)),
                   (f"mol.{l}.q0.W", (H, H)), (f"mol.{l}.q0.b", (1, H)),
                   (f"mol.{l}.q1.W", (H, H)), (f"mol.{l}.q1.b", (1, H))]
    shapes += [("frag.in.W", (H + formula_dim + config.d + 1, H)), ("frag.in.b", (1, H))]
    if config.use_frag_edges:
        shapes += [("frag.edge_in.W", (H + formula_dim, H)), ("frag.edge_in.b", (1, H))]
    for l in range(config.L2):
        if config.use_frag_edges:
            shapes += [(f"frag.{l}.edge.W", (H, H)), (f"frag.{l}.edge.b", (1, H))]
        shapes += [(f"frag.{l}.q0.W", (H, H)), (f"frag.{l}.q0.b", (1, H)),
                   (f"frag.{l}.q1.W", (H, H)), (f"frag.{l}.q1.b", (1, H))]
    shapes += [("head.0.W", (H + ce, H)), ("head.0.b", (1, H)),
               ("head.1.W", (H, config.width)), ("head.1.b", (1, config.width)),
               ("os.0.W", (H + ce, H)), ("os.0.b", (1, H)),
               ("os.1.W", (H, 1)), ("os.1.b", (1, 1))]
    return shapes


class Model:
    """Config plus named parameter tensors."""

    def __init__(self, config, params=None):
        self.config = config
        if params is None:
            rng = np.random.default_rng(config.seed)
            params = {}
            for name, shape in param_shapes(config):
                if name.endswith(".b"):
                    params[name] = np.zeros(shape)
                else:
                    params[name] = _glorot(rng, *shape)
        self.params = {name: T.param(np.array(params[name], dtype=np.float64), name)
                       for name, _ in param_shapes(config)}

    def __getitem__(self, name):
        return self.params[name]

    def param_list(self):
        return list(self.params.values())

    @property
    def num_parameters(self):
        return int(sum(p.data.size for p in self.params.values()))

    def state(self):
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state):
        for k, v in state.items():
            self.params[k].data[...] = v

    def copy(self):
        return Model(self.config, self.state())

    # ------------------------------------------------------------ inference
    def prepare(self, mol, energies=(), spectrum=None):
        return prepare(mol, self.config, energies, spectrum)

    def latent(self, prepared):
        """LatentState for a single prepared molecule."""
        out = forward(self, Batch([prepared]))
        logits = out["logits"].data
        return latent_from_logits(logits, out["os_logit"].data[0, 0], prepared.valid,
                                  prepared.dag, self.config.j, self.config.mode)

    def predict(self, mol, energies=()):
        prep = self.prepare(mol, energies)
        state = self.latent(prep)
        return state, state.spectrum(energies, mol.id)

    # ----------------------------------------------------------- checkpoint
    def save(self, path, extra=None):
        manifest = [{"name": n, "shape": list(s)} for n, s in param_shapes(self.config)]
        header = {
            "format": "fragspec-checkpoint",
            "version": CHECKPOINT_VERSION,
            "config": asdict(self.config),
            "seed": self.config.seed,
            "params": manifest,
        }
        if extra:
            header["extra"] = extra
        blob = json.dumps(header, sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC + b"\n")
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)
            for entry in manifest:
                fh.write(np.ascontiguousarray(self.params[entry["name"]].data, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            magic = fh.readline().rstrip(b"\n")
            if magic != CHECKPOINT_MAGIC:
                raise ValueError(f"{path}: not a checkpoint file")
            (size,) = struct.unpack("<Q", fh.read(8))
            header = json.loads(fh.read(size))
            if header.get("version") != CHECKPOINT_VERSION:
                raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
            config = ModelConfig(**header["config"])
            params = {}
            for entry in header["params"]:
                shape = tuple(entry["shape"])
                count = int(np.prod(shape))
                buf = fh.read(8 * count)
                if len(buf) != 8 * count:
                    raise ValueError(f"{path}: truncated parameter block {entry['name']}")
                params[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
            if fh.read(1):
                raise ValueError(f"{path}: trailing bytes after parameters")
        model = cls(config, params)
        model.header = header
        return model


# ---------------------------------------------------------------- features

class Prepared:
    """Static per-molecule arrays: molecule graph, DAG, cells and targets."""

    def __init__(self, mol, config, energies=(), spectrum=None, dag=None):
        self.mol = mol
        self.id = mol.id
        self.energies = tuple(int(e) for e in energies)
        skel = heavy_skeleton(mol)
        self.skeleton = skel
        self.dag = dag if dag is not None else rec_frag(skel, config.d)
        j, Tn = config.j, config.fourier_T

        self.atom_x = atom_features(skel)
        self.bond_x = bond_features(skel)
        ends = np.array([(i, k) for i, k, _ in skel.bonds], dtype=np.int64).reshape(-1, 2)
        nb = ends.shape[0]
        # each bond carries messages both ways
        self.msg_src = np.concatenate([ends[:, 0], ends[:, 1]])
        self.msg_dst = np.concatenate([ends[:, 1], ends[:, 0]])
        self.msg_bond = np.concatenate([np.arange(nb), np.arange(nb)])

        nodes = self.dag.node_list()
        self.n_nodes = len(nodes)
        pair_node, pair_atom = [], []
        for r, node in enumerate(nodes):
            for a in node.atoms():
                pair_node.append(r)
                pair_atom.append(a)
        self.pair_node = np.array(pair_node, dtype=np.int64)
        self.pair_atom = np.array(pair_atom, dtype=np.int64)
        depth = np.zeros((self.n_nodes, config.d + 1))
        for r, node in enumerate(nodes):
            for dep in node.depth_set:
                depth[r, dep - 1] = 1.0
        formula = np.stack([formula_embedding(n.formula.heavy_counts, Tn) for n in nodes])
        self.node_const = np.concatenate([formula, depth], axis=1)

        index = self.dag.index
        self.edge_parent = np.array([index[p] for p, _ in self.dag.edges], dtype=np.int64)
        self.edge_child = np.array([index[c] for _, c in self.dag.edges], dtype=np.int64)
        diff_edge, diff_atom, diff_formula = [], [], []
        for e, (p, c) in enumerate(self.dag.edges):
            lost = p & ~c
            for a in range(lost.bit_length()):
                if lost >> a & 1:
                    diff_edge.append(e)
                    diff_atom.append(a)
            df = self.dag.nodes[p].formula - self.dag.nodes[c].formula
            diff_formula.append(formula_embedding(df.heavy_counts, Tn))
        self.diff_edge = np.array(diff_edge, dtype=np.int64)
        self.diff_atom = np.array(diff_atom, dtype=np.int64)
        self.edge_const = (np.stack(diff_formula) if diff_formula
                           else np.zeros((0, len(HEAVY_ELEMENTS) * Tn)))

        self.ce = None
        if config.use_collision_energy:
            self.ce = collision_energy_embedding(self.energies, Tn)[None, :]

        self.valid = validity_mask(self.dag, j)
        rows, cols = np.nonzero(self.valid)
        self.cell_flat = rows * config.width + cols
        self.cell_node = rows
        cell_formula = [nodes[r].formula.with_hydrogens(nodes[r].h_attached + c - j)
                        for r, c in zip(rows, cols)]
        unique = sorted(set(cell_formula), key=lambda f: (formula_mass(f, config.mode), f.counts))
        findex = {f: g for g, f in enumerate(unique)}
        self.formulas = unique
        self.cell_group = np.array([findex[f] for f in cell_formula], dtype=np.int64)
        self.group_mass = np.array([formula_mass(f, config.mode) for f in unique])
        node_sizes = np.bincount(rows, minlength=self.n_nodes)
        group_sizes = np.bincount(self.cell_group, minlength=len(unique))
        self.cell_inv_log_node = np.array([0.0 if s <= 1 else 1 / math.log(s) for s in node_sizes])[rows]
        self.cell_inv_log_group = np.array(
            [0.0 if s <= 1 else 1 / math.log(s) for s in group_sizes])[self.cell_group]
        n_live = self.n_nodes
        self.inv_log_nodes = 0.0 if n_live <= 1 else 1 / math.log(n_live)
        self.inv_log_groups = 0.0 if len(unique) <= 1 else 1 / math.log(len(unique))

        self.spectrum = spectrum
        self.target_group = None
        self.target_os = 0.0
        if spectrum is not None:
            from .train import match_peaks
            groups, p_os = match_peaks(spectrum, self.group_mass)
            self.target_group = groups
            self.target_os = p_os

    @property
    def n_atoms(self):
        return self.atom_x.shape[0]

    @property
    def n_cells(self):
        return self.cell_flat.size


def prepare(mol, config, energies=(), spectrum=None):
    return Prepared(mol, config, energies, spectrum)


class Batch:
    """Disjoint union of prepared molecules with offset index arrays."""

    def __init__(self, items):
        self.items = list(items)
        a_off = n_off = g_off = b_off = e_off = 0
        cat = {k: [] for k in ("msg_src", "msg_dst", "msg_bond", "pair_node", "pair_atom",
                               "edge_parent", "edge_child", "diff_edge", "diff_atom",
                               "cell_flat", "cell_node", "cell_group", "node_mol", "cell_mol",
                               "group_mol", "target_group")}
        width = None
        for m, p in enumerate(self.items):
            width = p.valid.shape[1]
            cat["msg_src"].append(p.msg_src + a_off)
            cat["msg_dst"].append(p.msg_dst + a_off)
            cat["msg_bond"].append(p.msg_bond + b_off)
            cat["pair_node"].append(p.pair_node + n_off)
            cat["pair_atom"].append(p.pair_atom + a_off)
            cat["edge_parent"].append(p.edge_parent + n_off)
            cat["edge_child"].append(p.edge_child + n_off)
            cat["diff_edge"].append(p.diff_edge + e_off)
            cat["diff_atom"].append(p.diff_atom + a_off)
            cat["cell_flat"].append(p.cell_flat + n_off * width)
            cat["cell_node"].append(p.cell_node + n_off)
            cat["cell_group"].append(p.cell_group + g_off)
            cat["node_mol"].append(np.full(p.n_nodes, m))
            cat["cell_mol"].append(np.full(p.n_cells, m))
            cat["group_mol"].append(np.full(len(p.formulas), m))
            if p.target_group is not None:
                cat["target_group"].append(p.target_group)
            a_off += p.n_atoms
            n_off += p.n_nodes
            g_off += len(p.formulas)
            b_off += p.bond_x.shape[0]
            e_off += p.edge_parent.size
        for k, v in cat.items():
            setattr(self, k, np.concatenate(v) if v else np.zeros(0, dtype=np.int64))
        self.n_mols = len(self.items)
        self.n_atoms, self.n_nodes, self.n_groups = a_off, n_off, g_off
        self.n_bonds, self.n_edges = b_off, e_off
        self.width = width
        self.atom_x = np.concatenate([p.atom_x for p in self.items])
        self.bond_x = np.concatenate([p.bond_x for p in self.items])
        self.node_const = np.concatenate([p.node_const for p in self.items])
        self.edge_const = np.concatenate([p.edge_const for p in self.items])
        self.ce = None
        if self.items and self.items[0].ce is not None:
            self.ce = np.concatenate([p.ce for p in self.items])
        self.has_targets = all(p.target_group is not None for p in self.items)
        if self.has_targets:
            self.target_os = np.array([p.target_os for p in self.items])[:, None]
            self.target_group = self.target_group[:, None]
        self.cell_inv_log_node = np.concatenate([p.cell_inv_log_node for p in self.items])[:, None]
        self.cell_inv_log_group = np.concatenate([p.cell_inv_log_group for p in self.items])[:, None]
        self.inv_log_nodes = np.array([p.inv_log_nodes for p in self.items])[:, None]
        self.inv_log_groups = np.array([p.inv_log_groups for p in self.items])[:, None]

        self.seg_msg = T.Segments(self.msg_dst, self.n_atoms)
        self.seg_pair = T.Segments(self.pair_node, self.n_nodes)
        self.seg_diff = T.Segments(self.diff_edge, self.n_edges)
        self.seg_node_mol = T.Segments(self.node_mol, self.n_mols)
        self.seg_cell_mol = T.Segments(self.cell_mol, self.n_mols)
        self.seg_cell_node = T.Segments(self.cell_node, self.n_nodes)
        self.seg_cell_group = T.Segments(self.cell_group, self.n_groups)
        self.seg_group_mol = T.Segments(self.group_mol, self.n_mols)
        # OS cells appended after all formula cells
        self.seg_all = T.Segments(np.concatenate([self.cell_mol, np.arange(self.n_mols)]),
                                  self.n_mols)
        # messages along DAG edges in both directions
        self.dag_src = np.concatenate([self.edge_parent, self.edge_child])
        self.dag_dst = np.concatenate([self.edge_child, self.edge_parent])
        self.dag_edge = np.concatenate([np.arange(self.n_edges), np.arange(self.n_edges)])
        self.seg_dag = T.Segments(self.dag_dst, self.n_nodes)


# ----------------------------------------------------------------- forward

def _mlp2(model, prefix, x):
    h = T.relu(T.linear(x, model[prefix + "q0.W"], model[prefix + "q0.b"]))
    return T.linear(h, model[prefix + "q1.W"], model[prefix + "q1.b"])


def mol_gnn_forward(model, batch):
    """Atom embeddings after L1 GINE layers."""
    h = T.linear(batch.atom_x, model["mol.in.W"], model["mol.in.b"])
    for l in range(model.config.L1):
        hb = T.linear(batch.bond_x, model[f"mol.{l}.bond.W"], model[f"mol.{l}.bond.b"])
        if batch.msg_src.size:
            msg = T.relu(T.gather(h, batch.msg_src) + T.gather(hb, batch.msg_bond))
            h = h + T.segment_sum(msg, batch.seg_msg)
        h = _mlp2(model, f"mol.{l}.", h)
    return h


def frag_inputs(model, batch, atom_h):
    """Node inputs (and edge inputs for the +Edges variant) before projection."""
    pooled = T.segment_mean(T.gather(atom_h, batch.pair_atom), batch.seg_pair)
    node_x = T.concat([pooled, batch.node_const])
    edge_x = None
    if model.config.use_frag_edges:
        lost = T.segment_mean(T.gather(atom_h, batch.diff_atom), batch.seg_diff)
        edge_x = T.concat([lost, batch.edge_const])
    return node_x, edge_x


def frag_gnn_forward(model, batch, node_x, edge_x=None):
    cfg = model.config
    h = T.linear(node_x, model["frag.in.W"], model["frag.in.b"])
    he0 = None
    if cfg.use_frag_edges:
        he0 = T.linear(edge_x, model["frag.edge_in.W"], model["frag.edge_in.b"])
    for l in range(cfg.L2):
        if cfg.use_frag_edges and batch.n_edges:
            he = T.linear(he0, model[f"frag.{l}.edge.W"], model[f"frag.{l}.edge.b"])
            msg = T.relu(T.gather(h, batch.dag_src) + T.gather(he, batch.dag_edge))
            h = h + T.segment_sum(msg, batch.seg_dag)
        h = _mlp2(model, f"frag.{l}.", h)
    return h


def output_logits(model, batch, node_h):
    """Per-node logits (nodes x 2j+1) and one OS logit per molecule (mols x 1)."""
    pooled = T.segment_mean(node_h, batch.seg_node_mol)
    if model.config.use_collision_energy:
        head_in = T.concat([node_h, T.gather(batch.ce, batch.node_mol)])
        os_in = T.concat([pooled, batch.ce])
    else:
        head_in, os_in = node_h, pooled
    h = T.relu(T.linear(head_in, model["head.0.W"], model["head.0.b"]))
    logits = T.linear(h, model["head.1.W"], model["head.1.b"])
    ho = T.relu(T.linear(os_in, model["os.0.W"], model["os.0.b"]))
    os_logit = T.linear(ho, model["os.1.W"], model["os.1.b"])
    return logits, os_logit


def forward(model, batch):
    atom_h = mol_gnn_forward(model, batch)
    node_x, edge_x = frag_inputs(model, batch, atom_h)
    node_h = frag_gnn_forward(model, batch, node_x, edge_x)
    logits, os_logit = output_logits(model, batch, node_h)
    return {"atom_h": atom_h, "node_h": node_h, "logits": logits, "os_logit": os_logit}


def cell_log_probs(model, batch, out=None):
    """Log-probabilities of every valid cell and of each molecule's OS cell.

    One softmax per molecule over its valid (node, offset) cells plus the OS
    logit, so the in-support mass and P(OS) sum to one.
    """
    out = out or forward(model, batch)
    flat = T.reshape(out["logits"], (batch.n_nodes * batch.width, 1))
    cells = T.gather(flat, batch.cell_flat)
    both = T.segment_log_softmax(T.concat([cells, out["os_logit"]], axis=0), batch.seg_all)
    n = batch.cell_flat.size
    log_cells = T.gather(both, np.arange(n))
    log_os = T.gather(both, np.arange(n, n + batch.n_mols))
    return log_cells, log_os, cells
