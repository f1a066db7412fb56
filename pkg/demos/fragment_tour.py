"""Walk through the fragmentation DAG of a small molecule.

Run: python demos/fragment_tour.py [SMILES] [depth]
"""
import sys

from fragspec.fragdag import mass_set, rec_frag
from fragspec.molio import heavy_skeleton, parse_smiles

smiles = sys.argv[1] if len(sys.argv) > 1 else "CNCO"
depth = int(sys.argv[2]) if len(sys.argv) > 2 else 3

mol = parse_smiles(smiles)
dag = rec_frag(heavy_skeleton(mol), depth)
print(f"{smiles}: {len(dag)} fragments, {len(dag.edges)} parent->child edges at depth {depth}")
for node in dag.node_list():
    print(f"  {node.node_id:#06x}  {str(node.formula.with_hydrogens(node.h_attached)):>10}  depths={sorted(node.depth_set)}")
masses = mass_set(dag, 2, "protonated")
print(f"{len(masses)} candidate [M+H]+ masses with hydrogen tolerance 2:")
print("  " + ", ".join(f"{m:.4f}" for m in masses))
