"""Train a small model on synthetic spectra and inspect one prediction.

A few hundred molecules and a handful of epochs keep this under a minute or
two on one core. Run: python demos/closed_loop.py
"""
import numpy as np

from fragspec.gnn import ModelConfig
from fragspec.metrics import cos_hungarian
from fragspec.synth import OracleParams, random_molecules, synth_generate
from fragspec.train import TrainSettings, split_dataset, train_model

mols = random_molecules(300, seed=1)
records = synth_generate(mols, OracleParams(os_fraction=0.05, seed=2), 3)
split_dataset(records, seed=0)
cfg = ModelConfig(hidden_dim=32)
model, hist = train_model(records, cfg, TrainSettings(lr=3e-3, max_epochs=8), log_every=0)
print("val loss per epoch:", " ".join(f"{x:.3f}" for x in hist.val_loss))

test = [r for r in records if r.split == "test"]
scores = []
for r in test:
    scores.append(cos_hungarian(r.spectrum, model.predict(r.mol, r.energies)[1]))
print(f"held-out cosine (Hungarian, 10 ppm): {np.mean(scores):.3f} over {len(test)} molecules")

rec = test[0]
state, pred = model.predict(rec.mol, rec.energies)
print(f"\n{rec.id}: predicted P(other signal) = {state.p_os:.3f}")
for m, p in sorted(zip(pred.masses, pred.intensities), key=lambda x: -x[1])[:5]:
    f = state.formulas[int(np.argmin(np.abs(state.group_mass - m)))]
    print(f"  {m:10.4f}  {p:.3f}  {f}")
