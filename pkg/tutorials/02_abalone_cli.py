"""
The command-line pipeline on Abalone
====================================

Drives the ``viashap`` CLI end to end on the Abalone CSV shipped in
``tutorials/data``: train, explain, compare with the oracle, draw curves,
time the two explainers and sweep beta. Each call is equivalent to running
``viashap <command> ...`` in a shell.

Epochs are capped through a config file so the tour finishes in a few
minutes; drop ``max_epochs`` to train with the full defaults.
"""

import json
import os
import tempfile

from viashap.cli import run

here = os.path.dirname(os.path.abspath(__file__))
manifest = os.path.join(here, "abalone.json")
work = tempfile.mkdtemp(prefix="viashap-abalone-")
out = os.path.join(work, "run")

# %%
# Settings shared by every command; flags given on the command line win.
config = os.path.join(work, "quick.json")
with open(config, "w") as fh:
    json.dump({"max_epochs": 5, "oracle_max_samples": 50_000}, fh)
common = ["--data", manifest, "--config", config, "--out", out]

# %%
# ``train`` writes model.bin, epochs.tsv, metrics.json and the resolved config.
assert run(["train", *common]) == 0
print(open(os.path.join(out, "metrics.json")).read())

# %%
# Attributions for the first rows of the test split, one column per
# (feature, output) pair.
assert run(["explain", *common, "--rows", "5"]) == 0
print(open(os.path.join(out, "attributions.tsv")).read())

# %%
# Agreement with unbiased KernelSHAP on 20 test rows.
assert run(["eval-fidelity", *common, "--rows", "20"]) == 0
print(json.load(open(os.path.join(out, "metrics.json")))["fidelity"])

# %%
# Inclusion/exclusion curves and the timing benchmark.
assert run(["curves", *common]) == 0
print(open(os.path.join(out, "curves.tsv")).read())
assert run(["benchmark", *common, "--instances", "200"]) == 0
print(open(os.path.join(out, "timing.tsv")).read())

# %%
# A beta sweep retrains once per value and scores each model on 20 rows.
assert run(["ablate", *common, "--sweep", "beta", "--rows", "20", "--out", os.path.join(work, "beta")]) == 0
print(open(os.path.join(work, "beta", "ablation.tsv")).read())
print("artifacts in", work)
