# %% [markdown]
# # Desk-scale benchmark: baseline vs full BSL
#
# Synthetic spliced forgeries at 64x64, a small CNN, and a few thousand
# steps on CPU.  Expect a few minutes per run on one core.

# %%
import numpy as np

from bsl.datasets import ArrayDataset, Degradation, make_real_pool, synth_forgery
from bsl.evaluation import ablation_configs, restoration_histogram, robustness_sweep
from bsl.shuffle import ShuffleConfig
from bsl.training import OptimizerConfig, RunConfig, Trainer

pool = make_real_pool(1250, side=64, seed=0)
manifest = synth_forgery(pool, 1250, seed=1)
split = np.array([r.split for r in manifest.rows])
train = ArrayDataset(manifest.arrays[split == "train"], manifest.labels[split == "train"])
test = ArrayDataset(manifest.arrays[split == "test"], manifest.labels[split == "test"])
print(len(train), "train /", len(test), "test")

# %%
base = RunConfig(shuffle=ShuffleConfig(8, 16), backbone="small_cnn", input_side=64,
                 batch_size=32, max_steps=3000, optimizer=OptimizerConfig(lr=1e-3))
rows = dict(ablation_configs(base))
degradations = [Degradation("blur", 5), Degradation("resize", 24)]

results = {}
for name in ("baseline", "full"):
    trainer = Trainer(rows[name], train)
    trainer.train()
    results[name] = robustness_sweep(trainer.model, test, degradations)
    for r in results[name]:
        print(f"{name:9s} {r.tag:10s} acc={r.acc:.3f} auc={r.auc:.4f}")

# %%
hist = restoration_histogram(trainer.model, test.images, rows["full"].shuffle, seed=5)
print("restoration distance histogram:", hist.counts.tolist())
print(f"fraction within distance 1: {hist.within_one:.3f}")
