# ---
# jupyter:
#   jupytext:
#     formats: py:percent
#     text_representation:
#       extension: .py
#       format_name: percent
# ---

# %% [markdown]
# # Latent sources, a risk model and its explanation
#
# Independent sources are unmixed from synthetic observations, a random
# forest is trained on source expressions and its predictions are broken down
# into per-source contributions.

# %%
import numpy as np

from latentrisk.attribution import ShapVector, brute_force_shap, describe_signature, rank_sources, tree_shap_matrix, waterfall
from latentrisk.cohort import GeneratorConfig, generate_cohort, mixed_observations
from latentrisk.forest import HyperParams, LabeledDataset, auroc, fit_forest
from latentrisk.ica import amari_index, fit_ica, match_components

cohort, truth = generate_cohort(GeneratorConfig(n_patients=0, m=30, k_true=5), seed=3)
X, S = mixed_observations(truth, 10_000, seed=4)
model, est = fit_ica(X, 5, seed=0)
perm, corr = match_components(est.values, S)
print("Amari index:", round(amari_index(model.mixing, truth.true_mixing), 4))
print("matched |corr|:", np.round(np.abs(corr), 4))

# %% [markdown]
# ## Signatures
#
# A signature is a column of the mixing matrix; its largest entries name the
# variables the source moves together.

# %%
names = [v.id for v in cohort.variables]
d = describe_signature(model.mixing, int(perm[0]), top_n=5, variable_names=names, expressions=est.values[perm[0]])
for e in d.entries:
    print(f"{e.variable:>12s} {e.weight:+.3f} {'#' * int(20 * abs(e.bar))}")

# %% [markdown]
# ## A risk model on source expressions
#
# The label depends on one source only, so that source should dominate the
# attributions.

# %%
rng = np.random.default_rng(0)
E = est.values.T
risk = E[:, perm[0]]
y = (rng.random(len(risk)) < 1 / (1 + np.exp(-(2 * risk - 1)))).astype(int)
train, test = np.arange(8000), np.arange(8000, 10_000)
forest = fit_forest(LabeledDataset(E[train], y[train], train), HyperParams(n_trees=50, max_depth=6, seed=1))
print("holdout AUROC:", round(auroc(forest.predict_proba(E[test]), y[test]), 3))

# %% [markdown]
# ## Exact contributions
#
# Tree attributions agree with exhaustive subset enumeration and add up to the
# prediction.

# %%
base, phi, pred = tree_shap_matrix(forest, E[test])
print("max local accuracy error:", np.abs(base + phi.sum(axis=1) - pred).max())
b = brute_force_shap(forest, E[test[0]])
print("max deviation from enumeration:", np.abs(b.contributions - phi[0]).max())
ranking = rank_sources(phi)
print("sources by mean |contribution|:", ranking.order(), "planted:", int(perm[0]))

# %%
wf = waterfall(ShapVector(base, phi[0], float(pred[0])), top_n=3)
for s in wf.steps:
    print(f"{s.label:<20s} {s.value:+.4f}  {s.start:.4f} -> {s.end:.4f}")
