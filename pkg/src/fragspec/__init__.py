"""Tandem mass spectrum prediction over molecular fragmentation DAGs."""

from .fragdag import FragDag, exhaustive_oracle, rec_frag
from .gnn import Model, ModelConfig
from .molio import Formula, MolGraph, formula_mass, heavy_skeleton, parse_smiles, to_smiles
from .probdist import LatentState, latent_from_logits
from .spectrum import Spectrum, read_spectra, write_spectra

__version__ = "0.1.0"
