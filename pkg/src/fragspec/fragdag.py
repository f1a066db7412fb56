"""Approximate heavy-atom fragmentation DAG by recursive bond removal."""

import hashlib
import json
from dataclasses import dataclass

from .molio import FORMULA_ELEMENTS, Formula, formula_mass

MAX_NODES = 200_000
ORACLE_MAX_ATOMS = 12


class FragmentationError(RuntimeError):
    pass


@dataclass(frozen=True)
class FragNode:
    mask: int
    formula: Formula  # heavy atoms only
    h_attached: int
    depth_set: frozenset
    iso_class: int = -1

    @property
    def node_id(self):
        return self.mask

    @property
    def num_heavy(self):
        return bin(self.mask).count("1")

    def atoms(self):
        return [k for k in range(self.mask.bit_length()) if self.mask >> k & 1]


class FragDag:
    """Immutable fragmentation DAG; nodes are kept sorted by node id."""

    def __init__(self, skeleton, nodes, edges, d):
        self.skeleton = skeleton
        self.nodes = dict(sorted(nodes.items()))
        self.edges = tuple(sorted(edges))
        self.d = d
        self.root_id = (1 << skeleton.num_atoms) - 1
        self.node_ids = tuple(self.nodes)
        self.index = {nid: k for k, nid in enumerate(self.node_ids)}

    def __len__(self):
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes.values())

    def node_list(self):
        return list(self.nodes.values())

    def topological_order(self):
        # children are strict subsets, so larger masks come first
        return sorted(self.node_ids, key=lambda m: (-bin(m).count("1"), m))

    def without_edges(self):
        return FragDag(self.skeleton, self.nodes, (), self.d)

    def dump(self, path_or_fh):
        """Write the JSONL debug dump: node records, then ``[parent, child]`` lines."""
        own = isinstance(path_or_fh, str)
        fh = open(path_or_fh, "w") if own else path_or_fh
        try:
            for node in self.nodes.values():
                fh.write(json.dumps({
                    "node_id": node.node_id,
                    "mask_hex": hex(node.mask),
                    "formula": str(node.formula),
                    "h": node.h_attached,
                    "depths": sorted(node.depth_set),
                    "iso_class": node.iso_class,
                }) + "\n")
            for parent, child in self.edges:
                fh.write(json.dumps([parent, child]) + "\n")
        finally:
            if own:
                fh.close()


class _Skeleton:
    """Bitmask view of a heavy-atom skeleton used by the enumerators."""

    def __init__(self, skeleton):
        self.n = skeleton.num_atoms
        self.bond_ends = [(i, j) for i, j, _ in skeleton.bonds]
        self.bond_masks = [(1 << i) | (1 << j) for i, j in self.bond_ends]
        self.adj = [[] for _ in range(self.n)]
        for b, (i, j) in enumerate(self.bond_ends):
            self.adj[i].append((j, 1 << b))
            self.adj[j].append((i, 1 << b))
        self.atom_adj = [0] * self.n
        for i, j in self.bond_ends:
            self.atom_adj[i] |= 1 << j
            self.atom_adj[j] |= 1 << i

    def component(self, start, edges):
        """Atom mask reachable from ``start`` over the bond bitset ``edges``."""
        seen = 1 << start
        stack = [start]
        while stack:
            u = stack.pop()
            for v, bit in self.adj[u]:
                if edges & bit and not seen >> v & 1:
                    seen |= 1 << v
                    stack.append(v)
        return seen

    def edges_within(self, mask, edges):
        out = 0
        e = edges
        while e:
            low = e & -e
            b = low.bit_length() - 1
            if self.bond_masks[b] & mask == self.bond_masks[b]:
                out |= low
            e ^= low
        return out

    def children(self, mask, edges):
        """States produced by removing each remaining bond once."""
        out = []
        e = edges
        while e:
            low = e & -e
            e ^= low
            b = low.bit_length() - 1
            rest = edges & ~low
            u, v = self.bond_ends[b]
            comp_u = self.component(u, rest)
            if comp_u >> v & 1:
                out.append((mask, rest))  # ring opened, same atom set
                continue
            comp_v = mask & ~comp_u
            out.append((comp_u, self.edges_within(comp_u, rest)))
            out.append((comp_v, self.edges_within(comp_v, rest)))
        return out


def _node_formula(skeleton, mask):
    counts = dict.fromkeys(FORMULA_ELEMENTS, 0)
    h = 0
    attached = skeleton.attached_h
    for k, a in enumerate(skeleton.atoms):
        if mask >> k & 1:
            counts[a.element] += 1
            h += attached[k]
    return Formula.from_dict(counts), h


def rec_frag(skeleton, d, max_nodes=MAX_NODES, with_iso=True):
    """Build the depth-``d`` fragmentation DAG of a heavy-atom skeleton.

    Expansion proceeds level by level starting at depth 1 (the root). Each
    ``(atom mask, remaining bonds)`` state is expanded once per level; breaking
    a ring bond keeps the atom set and consumes a level without adding an edge.
    """
    if d < 1:
        raise ValueError("depth must be >= 1")
    sk = _Skeleton(skeleton)
    root = (1 << sk.n) - 1
    all_edges = (1 << len(sk.bond_ends)) - 1
    depths = {root: {1}}
    edges = set()
    cache = {}
    frontier = {(root, all_edges)}
    for level in range(1, d + 1):
        nxt = set()
        for state in sorted(frontier):
            kids = cache.get(state)
            if kids is None:
                kids = cache[state] = sk.children(*state)
            mask = state[0]
            for child in kids:
                cmask = child[0]
                if cmask != mask:
                    edges.add((mask, cmask))
                    depths.setdefault(cmask, set()).add(level + 1)
                nxt.add(child)
            if len(depths) > max_nodes:
                raise FragmentationError(
                    f"fragmentation DAG exceeds {max_nodes} nodes at depth {level}")
        frontier = nxt
        if not frontier:
            break

    nodes = {}
    for mask, ds in depths.items():
        formula, h = _node_formula(skeleton, mask)
        nodes[mask] = FragNode(mask, formula, h, frozenset(ds))
    dag = FragDag(skeleton, nodes, edges, d)
    if with_iso:
        classes = iso_classes(dag, skeleton)
        dag = FragDag(skeleton, {m: _replace_iso(n, classes[m]) for m, n in nodes.items()},
                      edges, d)
    return dag


def _replace_iso(node, iso):
    return FragNode(node.mask, node.formula, node.h_attached, node.depth_set, iso)


def exhaustive_oracle(skeleton):
    """All atom masks inducing a connected subgraph, by brute force over masks."""
    n = skeleton.num_atoms
    if n > ORACLE_MAX_ATOMS:
        raise ValueError(f"exhaustive oracle limited to {ORACLE_MAX_ATOMS} heavy atoms, got {n}")
    sk = _Skeleton(skeleton)
    out = set()
    for mask in range(1, 1 << n):
        start = (mask & -mask).bit_length() - 1
        seen = 1 << start
        stack = [start]
        while stack:
            u = stack.pop()
            nb = sk.atom_adj[u] & mask & ~seen
            seen |= nb
            while nb:
                low = nb & -nb
                stack.append(low.bit_length() - 1)
                nb ^= low
        if seen == mask:
            out.add(mask)
    return out


def hydrogen_formulae(node, j):
    """``(offset, formula)`` pairs for offsets -j..j passing the validity mask."""
    if j < 0:
        raise ValueError("hydrogen tolerance must be >= 0")
    heavy = node.num_heavy
    out = []
    for i in range(-j, j + 1):
        h = node.h_attached + i
        if 0 <= h <= 2 * heavy + 2:
            out.append((i, node.formula.with_hydrogens(h)))
    return out


def offset_valid(node, i):
    h = node.h_attached + i
    return 0 <= h <= 2 * node.num_heavy + 2


def mass_set(dag, j, mode="neutral"):
    masses = set()
    for node in dag:
        for _, f in hydrogen_formulae(node, j):
            masses.add(formula_mass(f, mode))
    return sorted(masses)


def formula_set(dag, j):
    out = set()
    for node in dag:
        out.update(f for _, f in hydrogen_formulae(node, j))
    return out


def wl_digest(skeleton, mask, relabel=None):
    """Weisfeiler-Lehman digest of the subgraph induced by ``mask``.

    Atom labels start as element symbols and are refined with (bond type,
    neighbour label) multisets until the colour partition stops splitting.
    ``relabel`` maps refined labels to small ints and must be shared by all
    subgraphs whose digests are compared.
    """
    if relabel is None:
        relabel = {}
    atoms = [k for k in range(skeleton.num_atoms) if mask >> k & 1]
    labels = {k: skeleton.atoms[k].element for k in atoms}
    nbrs = {k: [(v, skeleton.bonds[b][2]) for v, b in skeleton.neighbors[k] if mask >> v & 1]
            for k in atoms}
    n_colors = len(set(labels.values()))
    for _ in range(len(atoms)):
        new = {}
        for k in atoms:
            key = (labels[k], tuple(sorted((kind, labels[v]) for v, kind in nbrs[k])))
            new[k] = relabel.setdefault(key, len(relabel))
        labels = new
        count = len(set(labels.values()))
        if count == n_colors:
            break
        n_colors = count
    return tuple(sorted(labels.values()))


def iso_classes(dag, skeleton=None):
    """Map node id -> class id (lowest node id among nodes with equal WL digest)."""
    skeleton = skeleton or dag.skeleton
    relabel = {}
    rep = {}
    out = {}
    for nid in sorted(dag.node_ids):
        # element multiset is part of the key so refinement counters stay comparable
        key = (dag.nodes[nid].formula.counts, wl_digest(skeleton, nid, relabel))
        out[nid] = rep.setdefault(key, nid)
    return out


def digest_hex(skeleton, mask):
    """Stable hex string for a subgraph digest (independent of other subgraphs)."""
    return hashlib.blake2b(repr(_canonical_wl(skeleton, mask)).encode(), digest_size=16).hexdigest()


def _canonical_wl(skeleton, mask):
    # string labels instead of shared counters so the result is self-contained
    atoms = [k for k in range(skeleton.num_atoms) if mask >> k & 1]
    labels = {k: skeleton.atoms[k].element for k in atoms}
    history = [tuple(sorted(labels.values()))]
    for _ in range(len(atoms)):
        new = {}
        for k in atoms:
            nb = sorted(skeleton.bonds[b][2] + labels[v] for v, b in skeleton.neighbors[k]
                        if mask >> v & 1)
            new[k] = hashlib.blake2b((labels[k] + "|" + ",".join(nb)).encode(),
                                     digest_size=8).hexdigest()
        labels = new
        history.append(tuple(sorted(labels.values())))
    return history
