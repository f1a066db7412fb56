"""Molecular graphs: parsing, validation, formulae, masses and featurization."""

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources

import numpy as np

PROTON_MASS = 1.007276466812

# Order used for formula vectors and Hill-like strings.
FORMULA_ELEMENTS = ("C", "H", "N", "O", "P", "S", "F", "Cl", "Br", "I", "Se", "Si")
HEAVY_ELEMENTS = tuple(el for el in FORMULA_ELEMENTS if el != "H")
# One-hot order of the molecule-GNN atom type block.
FEATURE_ELEMENTS = ("C", "O", "N", "P", "S", "F", "Cl", "Br", "I", "Se", "Si")

BOND_ORDERS = {"single": 1.0, "double": 2.0, "triple": 3.0, "aromatic": 1.5}
BOND_TYPES = ("single", "double", "triple", "aromatic")
HYBRIDIZATIONS = ("SP", "SP2", "SP3", "SP3D", "SP3D2")
CHIRALITIES = ("Unspecified", "CW", "CCW")

# Higher valences tried after the default one, e.g. sulfones and phosphates.
_EXTRA_VALENCES = {"P": (5,), "S": (4, 6), "Se": (4, 6)}
_CHARGE_RAISES_VALENCE = {"N", "O", "P", "S", "Se"}


class SmilesError(ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class ValidationError(ValueError):
    pass


@dataclass(frozen=True)
class Element:
    symbol: str
    monoisotopic_mass: float
    default_valence: int


class ElementTable:
    """Immutable symbol -> Element lookup."""

    def __init__(self, elements):
        self._elements = {e.symbol: e for e in elements}
        for e in self._elements.values():
            if not e.monoisotopic_mass > 0:
                raise ValueError(f"non-positive mass for {e.symbol}")

    def __getitem__(self, symbol):
        try:
            return self._elements[symbol]
        except KeyError:
            raise KeyError(f"unknown element {symbol!r}") from None

    def __contains__(self, symbol):
        return symbol in self._elements

    def __iter__(self):
        return iter(self._elements.values())

    def __len__(self):
        return len(self._elements)

    def mass(self, symbol):
        return self[symbol].monoisotopic_mass

    @classmethod
    def from_text(cls, text):
        elements = []
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            symbol, mass, valence = line.split("\t")
            elements.append(Element(symbol, float(mass), int(valence)))
        return cls(elements)

    @classmethod
    def from_file(cls, path):
        with open(path) as fh:
            return cls.from_text(fh.read())


def _load_default_table():
    text = resources.files("fragspec").joinpath("data/isotopes.tsv").read_text()
    return ElementTable.from_text(text)


DEFAULT_TABLE = _load_default_table()
_active_table = DEFAULT_TABLE


def element_table():
    return _active_table


def use_element_table(table):
    """Replace the process-wide mass/valence table (CLI ``--mass-table``)."""
    global _active_table
    if table is None:
        table = DEFAULT_TABLE
    if isinstance(table, str):
        table = ElementTable.from_file(table)
    missing = set(FORMULA_ELEMENTS) - {e.symbol for e in table}
    if missing:
        raise ValidationError(f"mass table lacks elements: {sorted(missing)}")
    _active_table = table
    return table


@dataclass(frozen=True, order=True)
class Formula:
    """Element counts in ``FORMULA_ELEMENTS`` order."""

    counts: tuple = (0,) * len(FORMULA_ELEMENTS)

    def __post_init__(self):
        if len(self.counts) != len(FORMULA_ELEMENTS):
            raise ValueError("formula vector has the wrong length")
        if any(c < 0 for c in self.counts):
            raise ValueError(f"negative element count in {self.counts}")

    @classmethod
    def from_dict(cls, counts):
        unknown = set(counts) - set(FORMULA_ELEMENTS)
        if unknown:
            raise KeyError(f"unknown element(s) {sorted(unknown)}")
        return cls(tuple(int(counts.get(el, 0)) for el in FORMULA_ELEMENTS))

    @classmethod
    def parse(cls, text):
        counts = {}
        i = 0
        while i < len(text):
            sym = text[i]
            i += 1
            if i < len(text) and text[i].islower():
                sym += text[i]
                i += 1
            start = i
            while i < len(text) and text[i].isdigit():
                i += 1
            counts[sym] = counts.get(sym, 0) + (int(text[start:i]) if i > start else 1)
        return cls.from_dict(counts)

    def as_dict(self):
        return {el: c for el, c in zip(FORMULA_ELEMENTS, self.counts) if c}

    def __getitem__(self, symbol):
        return self.counts[FORMULA_ELEMENTS.index(symbol)]

    def __add__(self, other):
        return Formula(tuple(a + b for a, b in zip(self.counts, other.counts)))

    def __sub__(self, other):
        return Formula(tuple(a - b for a, b in zip(self.counts, other.counts)))

    def with_hydrogens(self, n):
        counts = list(self.counts)
        counts[1] = n
        return Formula(tuple(counts))

    @property
    def heavy_counts(self):
        return tuple(c for el, c in zip(FORMULA_ELEMENTS, self.counts) if el != "H")

    def __len__(self):
        return sum(self.counts)

    def __str__(self):
        parts = []
        for el, c in zip(FORMULA_ELEMENTS, self.counts):
            if c:
                parts.append(el if c == 1 else f"{el}{c}")
        return "".join(parts)


def formula_mass(f, mode="neutral", table=None):
    """Monoisotopic mass of ``f``; ``mode='protonated'`` adds one proton."""
    table = table or _active_table
    if mode not in ("neutral", "protonated"):
        raise ValueError(f"unknown mass mode {mode!r}")
    mass = 0.0
    for el, c in zip(FORMULA_ELEMENTS, f.counts):
        if c:
            mass += c * table.mass(el)
    if mode == "protonated":
        mass += PROTON_MASS
    return mass


@dataclass(frozen=True)
class Atom:
    element: str
    charge: int = 0
    radicals: int = 0
    aromatic: bool = False
    implicit_h: int = 0


def _allowed_valences(element, charge, table=None):
    table = table or _active_table
    base = (table[element].default_valence,) + _EXTRA_VALENCES.get(element, ())
    if element in _CHARGE_RAISES_VALENCE:
        return tuple(v + charge for v in base)
    return tuple(v - abs(charge) for v in base)


@dataclass(frozen=True, eq=False)
class MolGraph:
    atoms: tuple
    bonds: tuple  # (i, j, bond type) with i < j
    id: str = ""
    smiles: str = None
    _meta: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "atoms", tuple(self.atoms))
        bonds = []
        for i, j, kind in self.bonds:
            if kind not in BOND_ORDERS:
                raise ValidationError(f"unknown bond type {kind!r}")
            i, j = (int(i), int(j)) if i < j else (int(j), int(i))
            bonds.append((i, j, kind))
        object.__setattr__(self, "bonds", tuple(bonds))
        self._validate()

    def _validate(self):
        n = len(self.atoms)
        seen = set()
        for i, j, _ in self.bonds:
            if i == j:
                raise ValidationError(f"self-loop on atom {i}")
            if not (0 <= i < n and 0 <= j < n):
                raise ValidationError(f"bond ({i}, {j}) out of range for {n} atoms")
            if (i, j) in seen:
                raise ValidationError(f"duplicate bond ({i}, {j})")
            seen.add((i, j))
        table = _active_table
        for k, a in enumerate(self.atoms):
            if a.element not in table:
                raise ValidationError(f"unsupported element {a.element!r}")
            if not -2 <= a.charge <= 2:
                raise ValidationError(f"formal charge {a.charge} out of range")
            if not 0 <= a.radicals <= 4:
                raise ValidationError(f"radical count {a.radicals} out of range")
            if a.implicit_h < 0:
                raise ValidationError(f"negative hydrogen count on atom {k}")
            if a.aromatic:
                continue
            used = self.bond_order_sum(k) + a.implicit_h + a.radicals
            if used > max(_allowed_valences(a.element, a.charge, table)) + 1e-9:
                raise ValidationError(
                    f"valence exceeded on atom {k} ({a.element}): {used:g}")

    @property
    def num_atoms(self):
        return len(self.atoms)

    @cached_property
    def neighbors(self):
        adj = [[] for _ in self.atoms]
        for b, (i, j, kind) in enumerate(self.bonds):
            adj[i].append((j, b))
            adj[j].append((i, b))
        return tuple(tuple(sorted(a)) for a in adj)

    def bond_order_sum(self, k):
        return sum(BOND_ORDERS[self.bonds[b][2]] for _, b in self.neighbors[k])

    def degree(self, k):
        return len(self.neighbors[k])

    @property
    def attached_h(self):
        """Hydrogens carried by each atom (set by heavy_skeleton)."""
        if self._meta and "attached_h" in self._meta:
            return self._meta["attached_h"]
        return tuple(a.implicit_h for a in self.atoms)

    def formula(self):
        counts = dict.fromkeys(FORMULA_ELEMENTS, 0)
        for a in self.atoms:
            counts[a.element] += 1
            counts["H"] += a.implicit_h
        return Formula.from_dict(counts)

    def is_connected(self):
        if not self.atoms:
            return False
        return len(_bfs(self.neighbors, 0)) == len(self.atoms)

    def permuted(self, order):
        """Relabel atoms so that new atom ``k`` is old atom ``order[k]``."""
        inv = {old: new for new, old in enumerate(order)}
        atoms = [self.atoms[old] for old in order]
        bonds = [(inv[i], inv[j], kind) for i, j, kind in self.bonds]
        meta = None
        if self._meta and "attached_h" in self._meta:
            meta = {"attached_h": tuple(self._meta["attached_h"][old] for old in order)}
        return MolGraph(atoms, bonds, id=self.id, _meta=meta)


def _bfs(neighbors, start):
    seen = {start}
    queue = [start]
    for u in queue:
        for v, _ in neighbors[u]:
            if v not in seen:
                seen.add(v)
                queue.append(v)
    return seen


# ---------------------------------------------------------------- SMILES

_TWO_LETTER = ("Cl", "Br", "Se", "Si")
_ONE_LETTER = ("C", "N", "O", "P", "S", "F", "I")
_AROMATIC = ("se", "c", "n", "o", "s", "p")
_BOND_SYMBOLS = {"-": "single", "=": "double", "#": "triple", ":": "aromatic"}


def parse_smiles(text, mol_id="", aromatic=False):
    """Parse a restricted SMILES string.

    Supports organic-subset atoms from the element table, bracket atoms with
    explicit hydrogen count and charge, bonds ``- = #``, branches and ring
    closure digits 1-9. Lowercase aromatic atoms (and ``:`` bonds) are only
    accepted with ``aromatic=True``.
    """
    atoms = []  # [element, charge, aromatic, explicit_h or None]
    bonds = {}
    stack = []
    prev = None
    pending = None
    pending_at = 0
    rings = {}
    i = 0
    n = len(text)

    def add_bond(a, b, kind, at):
        key = (min(a, b), max(a, b))
        if a == b or key in bonds:
            raise SmilesError("invalid or duplicate bond", at)
        if kind is None:
            kind = "aromatic" if atoms[a][2] and atoms[b][2] else "single"
        bonds[key] = kind

    while i < n:
        ch = text[i]
        start = i
        atom = None
        if ch == "[":
            close = text.find("]", i)
            if close < 0:
                raise SmilesError("unclosed bracket atom", i)
            atom = _parse_bracket(text[i + 1:close], i + 1, aromatic)
            i = close + 1
        elif text.startswith(_TWO_LETTER, i) and text[i:i + 2] in _TWO_LETTER:
            atom = [text[i:i + 2], 0, False, None]
            i += 2
        elif ch in _ONE_LETTER:
            atom = [ch, 0, False, None]
            i += 1
        elif aromatic and text[i:i + 2] == "se":
            atom = ["Se", 0, True, None]
            i += 2
        elif aromatic and ch in _AROMATIC:
            atom = [ch.upper(), 0, True, None]
            i += 1
        elif ch in "-=#" or (ch == ":" and aromatic):
            if pending is not None:
                raise SmilesError("consecutive bond symbols", i)
            pending, pending_at = _BOND_SYMBOLS[ch], i
            i += 1
            continue
        elif ch == "(":
            if prev is None:
                raise SmilesError("branch before any atom", i)
            stack.append(prev)
            i += 1
            continue
        elif ch == ")":
            if not stack:
                raise SmilesError("unmatched ')'", i)
            if pending is not None:
                raise SmilesError("dangling bond symbol", pending_at)
            prev = stack.pop()
            i += 1
            continue
        elif ch in "123456789":
            if prev is None:
                raise SmilesError("ring closure before any atom", i)
            if ch in rings:
                other, kind, _ = rings.pop(ch)
                if pending is not None and kind is not None and pending != kind:
                    raise SmilesError("conflicting ring-closure bond orders", i)
                add_bond(prev, other, pending or kind, i)
            else:
                rings[ch] = (prev, pending, i)
            pending = None
            i += 1
            continue
        else:
            raise SmilesError(f"unsupported token {ch!r}", i)

        atoms.append(atom)
        idx = len(atoms) - 1
        if prev is not None:
            add_bond(prev, idx, pending, start)
        elif pending is not None:
            raise SmilesError("bond symbol before first atom", pending_at)
        pending = None
        prev = idx

    if pending is not None:
        raise SmilesError("dangling bond symbol", pending_at)
    if stack:
        raise SmilesError("unmatched '('", n)
    if rings:
        _, _, at = min(rings.values(), key=lambda r: r[2])
        raise SmilesError("unmatched ring closure", at)
    if not atoms:
        raise SmilesError("empty SMILES", 0)

    bond_list = [(a, b, kind) for (a, b), kind in sorted(bonds.items())]
    order_sum = [0.0] * len(atoms)
    for a, b, kind in bond_list:
        order_sum[a] += BOND_ORDERS[kind]
        order_sum[b] += BOND_ORDERS[kind]
    final = []
    for k, (el, chg, arom, hcount) in enumerate(atoms):
        if hcount is None:
            hcount = _implicit_h(el, chg, arom, order_sum[k], k)
        final.append(Atom(el, chg, 0, arom, hcount))
    return MolGraph(final, bond_list, id=mol_id, smiles=text)


def _implicit_h(element, charge, aromatic, order_sum, k):
    valences = _allowed_valences(element, charge)
    if aromatic:
        return max(0, int(math.floor(valences[0] - order_sum + 1e-9)))
    for v in valences:
        if v >= order_sum - 1e-9:
            return int(round(v - order_sum))
    raise ValidationError(f"valence deficit on atom {k} ({element}): bond order sum {order_sum:g}")


def _parse_bracket(body, offset, aromatic):
    i = 0
    if body[:2] in _TWO_LETTER:
        el, arom = body[:2], False
        i = 2
    elif aromatic and body[:2] == "se":
        el, arom = "Se", True
        i = 2
    elif body[:1] in _ONE_LETTER or body[:1] == "H":
        el, arom = body[:1], False
        i = 1
    elif aromatic and body[:1] in _AROMATIC:
        el, arom = body[:1].upper(), True
        i = 1
    else:
        raise SmilesError("unsupported bracket atom", offset)
    hcount = 0
    if i < len(body) and body[i] == "H":
        i += 1
        hcount = 1
        if i < len(body) and body[i].isdigit():
            hcount = int(body[i])
            i += 1
    charge = 0
    if i < len(body) and body[i] in "+-":
        sign = 1 if body[i] == "+" else -1
        i += 1
        if i < len(body) and body[i] in "+-":
            if (1 if body[i] == "+" else -1) != sign:
                raise SmilesError("mixed charge signs", offset + i)
            charge = 2 * sign
            i += 1
        elif i < len(body) and body[i].isdigit():
            charge = sign * int(body[i])
            i += 1
        else:
            charge = sign
    if i != len(body):
        raise SmilesError(f"unsupported token {body[i]!r} in bracket atom", offset + i)
    return [el, charge, arom, hcount]


def to_smiles(g):
    """Serialize to the restricted SMILES dialect read by ``parse_smiles``.

    Radical counts cannot be written and are dropped.
    """
    n = g.num_atoms
    if n == 0:
        return ""
    order = []
    parent = [-1] * n
    seen = [False] * n
    ring_bonds = {}  # atom -> list of (bond index) opened/closed there
    tree_children = [[] for _ in range(n)]
    for root in range(n):
        if seen[root]:
            continue
        stack = [(root, -1)]
        while stack:
            u, via = stack.pop()
            if seen[u]:
                continue
            seen[u] = True
            order.append(u)
            if via >= 0:
                parent[u] = via
                tree_children[g.bonds[via][0] + g.bonds[via][1] - u].append((u, via))
            for v, b in reversed(g.neighbors[u]):
                if not seen[v]:
                    stack.append((v, b))
    tree = {parent[u] for u in range(n) if parent[u] >= 0}
    for b, (i, j, _) in enumerate(g.bonds):
        if b not in tree:
            ring_bonds.setdefault(i, []).append(b)
            ring_bonds.setdefault(j, []).append(b)

    digits = {}
    free = list("123456789")
    out = []

    def bond_symbol(b):
        i, j, kind = g.bonds[b]
        both_arom = g.atoms[i].aromatic and g.atoms[j].aromatic
        if kind == "aromatic":
            return "" if both_arom else ":"
        if kind == "single":
            return "-" if both_arom else ""
        return "=" if kind == "double" else "#"

    def atom_token(k):
        a = g.atoms[k]
        sym = a.element.lower() if a.aromatic else a.element
        plain_ok = a.element in _TWO_LETTER + _ONE_LETTER and a.charge == 0
        if plain_ok:
            try:
                default_h = _implicit_h(a.element, 0, a.aromatic, g.bond_order_sum(k), k)
            except ValidationError:
                default_h = None
            if default_h == a.implicit_h:
                return sym
        h = "" if a.implicit_h == 0 else ("H" if a.implicit_h == 1 else f"H{a.implicit_h}")
        chg = ""
        if a.charge:
            chg = ("+" if a.charge > 0 else "-") + (str(abs(a.charge)) if abs(a.charge) > 1 else "")
        return f"[{sym}{h}{chg}]"

    def emit(u):
        out.append(atom_token(u))
        for b in ring_bonds.get(u, ()):
            if b in digits:
                d = digits.pop(b)
                out.append(d)
                free.insert(0, d)
                free.sort()
            else:
                if not free:
                    raise ValueError("more than 9 open ring closures")
                d = free.pop(0)
                digits[b] = d
                out.append(bond_symbol(b) + d)
        kids = tree_children[u]
        for idx, (v, b) in enumerate(kids):
            last = idx == len(kids) - 1
            if not last:
                out.append("(")
            out.append(bond_symbol(b))
            emit(v)
            if not last:
                out.append(")")

    roots = [u for u in order if parent[u] < 0]
    if len(roots) > 1:
        raise ValueError("cannot serialize a disconnected molecule")
    emit(roots[0])
    return "".join(out)


# ----------------------------------------------------------- skeleton

def heavy_skeleton(g):
    """Induced subgraph on the non-hydrogen atoms.

    Hydrogens (implicit plus explicit H neighbours) are kept per atom as the
    ``attached_h`` metadata and folded into ``implicit_h``.
    """
    heavy = [k for k, a in enumerate(g.atoms) if a.element != "H"]
    if not heavy:
        raise ValidationError("molecule has no heavy atoms")
    index = {old: new for new, old in enumerate(heavy)}
    hcount = [g.atoms[k].implicit_h for k in heavy]
    for i, j, _ in g.bonds:
        if i in index and j not in index:
            hcount[index[i]] += 1 + g.atoms[j].implicit_h
        elif j in index and i not in index:
            hcount[index[j]] += 1 + g.atoms[i].implicit_h
    atoms = [Atom(g.atoms[k].element, g.atoms[k].charge, g.atoms[k].radicals,
                  g.atoms[k].aromatic, h) for k, h in zip(heavy, hcount)]
    bonds = [(index[i], index[j], kind) for i, j, kind in g.bonds
             if i in index and j in index]
    skel = MolGraph(atoms, bonds, id=g.id, smiles=g.smiles,
                    _meta={"attached_h": tuple(hcount)})
    if not skel.is_connected():
        raise ValidationError("heavy atoms form more than one connected component")
    return skel


# -------------------------------------------------------------- features

def ring_bonds(g):
    """Boolean per bond: True if the bond lies on a cycle."""
    flags = []
    for b, (i, j, _) in enumerate(g.bonds):
        seen = {i}
        queue = [i]
        found = False
        for u in queue:
            for v, bb in g.neighbors[u]:
                if bb == b or v in seen:
                    continue
                if v == j:
                    found = True
                    break
                seen.add(v)
                queue.append(v)
            if found:
                break
        flags.append(found)
    return flags


def ring_atoms(g):
    in_ring = [False] * g.num_atoms
    for (i, j, _), flag in zip(g.bonds, ring_bonds(g)):
        if flag:
            in_ring[i] = in_ring[j] = True
    return in_ring


def hybridization(g, k):
    kinds = [g.bonds[b][2] for _, b in g.neighbors[k]]
    if "triple" in kinds or kinds.count("double") >= 2:
        return "SP"
    if "double" in kinds or "aromatic" in kinds or g.atoms[k].aromatic:
        return "SP2"
    return "SP3"


ATOM_FEATURE_DIM = (len(FEATURE_ELEMENTS) + 11 + len(HYBRIDIZATIONS) + 5 + 5
                    + 2 + 2 + len(CHIRALITIES) + 1)
BOND_FEATURE_DIM = len(BOND_TYPES)


def _one_hot(index, size):
    v = [0.0] * size
    if 0 <= index < size:
        v[index] = 1.0
    return v


def atom_features(g, table=None):
    """Per-atom feature matrix (num_atoms x 45)."""
    table = table or _active_table
    rings = ring_atoms(g)
    rows = []
    for k, a in enumerate(g.atoms):
        row = []
        row += _one_hot(FEATURE_ELEMENTS.index(a.element) if a.element in FEATURE_ELEMENTS else -1,
                        len(FEATURE_ELEMENTS))
        row += _one_hot(min(g.degree(k), 10), 11)
        row += _one_hot(HYBRIDIZATIONS.index(hybridization(g, k)), len(HYBRIDIZATIONS))
        row += _one_hot(a.charge + 2, 5)
        row += _one_hot(a.radicals, 5)
        row += _one_hot(int(rings[k]), 2)
        row += _one_hot(int(a.aromatic), 2)
        row += _one_hot(0, len(CHIRALITIES))
        row.append(0.01 * table.mass(a.element))
        rows.append(row)
    return np.array(rows, dtype=np.float64).reshape(len(rows), ATOM_FEATURE_DIM)


def bond_features(g):
    rows = [_one_hot(BOND_TYPES.index(kind), BOND_FEATURE_DIM) for _, _, kind in g.bonds]
    return np.array(rows, dtype=np.float64).reshape(len(rows), BOND_FEATURE_DIM)


# ------------------------------------------------------------------ JSONL

def mol_to_json(g):
    rec = {"id": g.id}
    if g.smiles is not None:
        rec["smiles"] = g.smiles
    rec["atoms"] = [{"el": a.element, "chg": a.charge, "rad": a.radicals,
                     "arom": a.aromatic, "h": a.implicit_h} for a in g.atoms]
    rec["bonds"] = [[i, j, kind] for i, j, kind in g.bonds]
    return rec


def mol_from_json(rec):
    try:
        atoms = [Atom(a["el"], int(a.get("chg", 0)), int(a.get("rad", 0)),
                      bool(a.get("arom", False)), int(a["h"])) for a in rec["atoms"]]
        bonds = [(int(i), int(j), kind) for i, j, kind in rec["bonds"]]
        return MolGraph(atoms, bonds, id=str(rec["id"]), smiles=rec.get("smiles"))
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed molecule record: {exc}") from None


def read_molecules(path):
    mols = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from None
            mols.append(mol_from_json(rec))
    return mols


def write_molecules(path, mols):
    with open(path, "w") as fh:
        for g in mols:
            fh.write(json.dumps(mol_to_json(g)) + "\n")
