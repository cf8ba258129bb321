"""Dose-volume histogram indices for a ramp and a blob."""

import numpy as np

from flxqa.dvh import compute_dvh, dose_at_volume, dvh_indices, exact_dose_at_volume
from flxqa.phantom import PhantomSpec, make_phantom
from flxqa.volgrid import Grid3, Mask3

# 1400 voxels rising linearly to 70 Gy, one bin (0.05 Gy) per voxel step
ramp = make_phantom(PhantomSpec("ramp-x", dims=(1400, 2, 2), spacing=(0.5, 2, 2), amplitude=70.0)).ref
body = Mask3.like(ramp, np.ones(ramp.values.shape, bool), "BODY")
curve, idx = dvh_indices(ramp, body, levels=(35.0,))
print("ramp:", {k: round(v, 4) for k, v in idx.as_dict().items()})

# histogram D95 versus the sorted-voxel value
doses = ramp.values[body.values]
print(f"D95 histogram {dose_at_volume(curve, 95):.4f}  sorted {exact_dose_at_volume(doses, 95):.4f}")

# a blob restricted to its central slab
ph = make_phantom(PhantomSpec("gaussian-blob", dims=(48, 48, 24)))
for m in ph.masks:
    _, ix = dvh_indices(ph.ref, m, levels=(20.0, 50.0))
    print(f"{m.name:>5}: D95 {ix.d95:6.2f}  mean {ix.mean_dose:6.2f}  V50 {ix.v_levels[50.0]:6.2f}%")

# first rows of the cumulative curve as CSV
print(compute_dvh(Grid3(np.array([[[1.0, 2.0]]]), unit="Gy"),
                  Mask3(np.ones((1, 1, 2), bool), name="PAIR")).to_csv().splitlines()[:4])
