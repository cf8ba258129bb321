"""Phantom kinds and the outcomes they are built to produce."""

from flxqa.phantom import KINDS, PhantomSpec, expected_outcomes, make_phantom

for kind in KINDS:
    spec = PhantomSpec(kind, dims=(32, 32, 16))
    ph = make_phantom(spec)
    exp = expected_outcomes(spec)
    v = ph.ref.values
    rate = exp.get("gamma_pass_rate_pct")
    note = "oracle only" if exp.get("oracle_only") else f"gamma pass {rate:.2f}%"
    print(f"{kind:>14}: max {v.max():6.2f} Gy  masks {[m.name for m in ph.masks]}  {note}")
