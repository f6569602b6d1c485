# %% [markdown]
# # Heads, grid alignment and the joint objective

# %%
import torch

from bsl.models import build_model, decode_coords
from bsl.objectives import LossWeights, compute_losses
from bsl.shuffle import ShuffleConfig, shuffle_batch
from bsl.datasets import make_real_pool

# %% [markdown]
# At full scale (224 px, 16/32 px tiles) the Xception middle flow is 14x14
# and the exit flow 7x7, so both heads are plain 1x1 projections.  When a tap
# is coarser than its grid, depth-to-space fills the gap.

# %%
model = build_model("xception", s_intra=16, s_inter=32, input_side=224)
print(model.tap_u, model.adv_head.align.mode, model.tap_v, model.rest_head.align.mode)

small = build_model("small_cnn", s_intra=8, s_inter=16, input_side=64, tap_u="stage4")
print("small_cnn stage4 -> 8x8 grid via", small.adv_head.align.mode, "r =", small.adv_head.align.r)

# %% [markdown]
# One forward/backward on a shuffled batch.

# %%
cfg = ShuffleConfig(8, 16)
images = make_real_pool(4, side=64, seed=1)
x, P, M = shuffle_batch(images, cfg, seed=0, indices=range(4))
net = build_model("small_cnn", 8, 16, 64)
out = net(torch.from_numpy(x).permute(0, 3, 1, 2))
bundle = compute_losses(out, torch.tensor([0, 1, 0, 1]), torch.from_numpy(P).float(),
                        torch.from_numpy(M), LossWeights(alpha=1.0, beta=1.0))
print(bundle.as_floats())
bundle.l_total.backward()
print("decoded positions of image 0:\n", decode_coords(out["coords"][0]).tolist())
