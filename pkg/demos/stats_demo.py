"""Paired comparison of two cohorts and voxel-wise agreement metrics."""

import numpy as np

from flxqa.phantom import PhantomSpec, make_phantom
from flxqa.stats import cohort_summary, paired_t_test, voxel_metrics

# D95 from twenty plans under two planning methods
rng = np.random.default_rng(4)
clinical = rng.normal(60.0, 1.2, 20)
predicted = clinical + rng.normal(0.3, 0.5, 20)
t = paired_t_test(clinical, predicted)
print(f"t = {t.t_stat:.3f}  df = {t.df}  p = {t.p_value:.4g}  significant: {t.significant}")
print("clinical", cohort_summary(clinical).as_dict())
print("predicted", cohort_summary(predicted).as_dict())

# agreement between a plan and a 2% hotter copy
ph = make_phantom(PhantomSpec("scaled-pair", dims=(32, 32, 16), scale=1.02))
m = voxel_metrics(ph.ref, ph.eval, threshold_pct=10)
print({k: round(v, 4) for k, v in m.as_dict().items()})
