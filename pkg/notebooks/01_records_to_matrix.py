# ---
# jupyter:
#   jupytext:
#     formats: py:percent
#     text_representation:
#       extension: .py
#       format_name: percent
# ---

# %% [markdown]
# # From patient records to a standardized data matrix
#
# A synthetic cohort is turned into daily longitudinal curves, sampled at
# random dates and standardized. Each step below is one library call.

# %%
from datetime import timedelta

import numpy as np

from latentrisk.cohort import GeneratorConfig, generate_cohort
from latentrisk.curves import CurveParams, build_curveset, population_stats
from latentrisk.labeling import preset
from latentrisk.sampling import assemble_matrix, sample_times, standardize

cohort, truth = generate_cohort(GeneratorConfig(n_patients=200, m=30, k_true=4), seed=1)
print(len(cohort.records), "patients,", cohort.m, "variables")
print("kinds:", sorted({k.value for k in cohort.kinds()}))

# %% [markdown]
# ## One patient's curveset
#
# Condition codes become intensity curves (events per year), measurements are
# interpolated monotonically between observations and medications are on or
# off between visits. Missing measurements fall back to the cohort median.
# Stroke codes define the label, so they are left out of the curves.

# %%
stats = population_stats(cohort)
params = CurveParams(ignore_prefixes=tuple(sorted(preset("cryptogenic").stroke_codes)))
rec = cohort.records[0]
cs = build_curveset(rec, cohort.variables, stats, params, seed=0)
print(rec.patient_id, cs.matrix.shape, "days", rec.record_start, "to", rec.record_end)
for v, row in list(zip(cohort.variables, cs.matrix))[:6]:
    print(f"{v.id:>12s} {v.kind.value:<12s} min {row.min():8.3f} max {row.max():8.3f}")

# %% [markdown]
# The intensity rows integrate to the number of coded events.

# %%
for i, v in enumerate(cohort.variables):
    if v.kind.value == "Condition":
        n = sum(1 for _, c in rec.condition_events if c.code.startswith(v.id))
        print(v.id, n, round(cs.matrix[i].sum() / 365.25, 9))
        break

# %% [markdown]
# ## Random sampling dates
#
# Sample dates follow a Poisson process of one per year. In forced mode the
# final year of the window always holds exactly one sample.

# %%
rng = np.random.default_rng(0)
window = (rec.record_start, rec.record_end)
dates = sample_times(window, 1.0, True, rng)
print(len(dates), "dates; last year holds", sum(d > rec.record_end - timedelta(days=365) for d in dates))

# %% [markdown]
# ## Matrix assembly and scaling
#
# Columns are curveset snapshots; rows are rescaled by kind. Binary rows stay
# untouched, the rest end up with mean 0 and standard deviation 0.5.

# %%
pairs = []
for r in cohort.records[:50]:
    c = build_curveset(r, cohort.variables, stats, params, seed=0)
    pairs.append((c, sample_times((r.record_start, r.record_end), 1.0, False, rng) or [r.record_end]))
X = assemble_matrix(pairs)
Xs, scaling = standardize(X, cohort.kinds())
print(X.values.shape)
print(np.round(Xs.values.std(axis=1, ddof=1)[:8], 6))
print(scaling.tags[:8])
