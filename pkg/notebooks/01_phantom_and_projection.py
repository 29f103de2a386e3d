"""Walk-through: spine phantom, beam-hardened projections and FDK.

Run with ``python notebooks/01_phantom_and_projection.py``.  Everything is
printed; nothing is written to disk.
"""

import numpy as np

from raymar.fdk import fdk_reconstruct
from raymar.projector import default_step, forward_project
from raymar.simulation import MaterialSpectrumModel, build_phantom, simulate_polychromatic, spine_phantom
from raymar.volume import ConeBeamGeometry

# A half-size spine phantom keeps this quick: 64^3 voxels of 1 mm
spec = spine_phantom((64, 64, 64), (1.0, 1.0, 1.0), scale=0.5)
model = MaterialSpectrumModel.default()
truth, labels = build_phantom(spec, model, 70.0)
for m in labels.materials:
    print(f"{m:>6}: {int(labels.mask(m).data.sum()):7d} voxels, mu(70 keV) = {model.mu_at(m, 70.0):.4f} /mm")

# Scanner scaled down to match the phantom
geom = ConeBeamGeometry(647.7, 1147.7, (96, 24), (170.0, 120.0), n_views=90)
print("sinogram shape (views, v, u):", geom.shape)

# Monochromatic line integrals of the 70 keV volume
mono = forward_project(truth, geom, default_step(truth))
print("largest line integral:", round(float(mono.data.max()), 3))

# Polychromatic data harden the beam: metal rays come out lower than monochromatic
poly = simulate_polychromatic(labels, model, geom)
metal_rays = forward_project(labels.indicator("metal"), geom).data > 0.5
print("mean -log ratio poly/mono on metal rays:",
      round(float(poly.data[metal_rays].mean() / mono.data[metal_rays].mean()), 3))

# Add quantum noise, then reconstruct
noisy = simulate_polychromatic(labels, model, geom, photons=1e5, seed=3)
recon = fdk_reconstruct(noisy, truth.with_data(np.zeros(truth.data.shape)))
soft = labels.mask("soft").data
print("soft tissue: truth %.4f, FDK mean %.4f, std %.4f"
      % (truth.data[soft].mean(), recon.data[soft].mean(), recon.data[soft].std()))

# Streaks show up as the spread of soft tissue values in the screw slice
k = int(np.argmax(labels.mask("metal").data.sum(axis=(1, 2))))
print(f"slice {k} (screws): soft tissue std {recon.data[k][soft[k]].std():.4f}")
