"""Round trips through the three file formats."""

import numpy as np

from flxqa.ingest import (
    parse_optimal_fluence,
    parse_rtdose,
    read_container,
    read_rtdose_meta,
    write_container,
    write_optimal_fluence,
    write_rtdose,
)
from flxqa.phantom import PhantomSpec, make_phantom
from flxqa.volgrid import FluenceMap

ph = make_phantom(PhantomSpec("gaussian-blob", dims=(32, 24, 16)))

dcm = write_rtdose(ph.ref)
meta, _ = read_rtdose_meta(dcm)
back = parse_rtdose(dcm)
err = np.abs(back.values - ph.ref.values).max()
print(f"RTDOSE {len(dcm)} bytes  scaling {meta.dose_grid_scaling}  max err {err:.2e}")

blob = write_container(ph.ref, "f64")
print("container f64 bit-exact:", np.array_equal(read_container(blob).values, ph.ref.values))
print(blob[: blob.index(b"\n\n")].decode("latin-1")[8:])

beam = next(iter(ph.fluences))
text = write_optimal_fluence(beam)
print("\n".join(text.splitlines()[:9]))
# values are printed with six significant digits, so the trip is lossy for
# arbitrary floats and exact for values already that short
back = parse_optimal_fluence(text)
print(f"fluence max err {np.abs(back.values - beam.values).max():.1e}")
short = FluenceMap(np.round(beam.values, 4), beam.beam_index, beam.gantry_angle, beam.spacing, beam.origin)
print("rounded map round trip:", parse_optimal_fluence(write_optimal_fluence(short)) == short)
