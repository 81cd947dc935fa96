"""
The denoising surrogate task
============================

Unlabeled images are corrupted with clipped Gaussian noise and the shared encoder
plus a small reconstruction head learn to undo it. The surrogate loss is a binary
cross-entropy against the clean image, so its floor is the pixel entropy, not zero.
"""

import numpy as np
import torch

from semifss.network import TINY_CONFIG, FewShotSegNet, images_to_tensor
from semifss.objectives import surrogate_loss
from semifss.surrogate import corrupt_image, make_unlabeled_batch

torch.set_num_threads(1)
rng = np.random.default_rng(0)
pool = [np.clip(rng.uniform(0.2, 0.8, size=(1, 1, 3)) + rng.normal(0, 0.05, size=(32, 32, 3)), 0, 1)
        for _ in range(20)]

# %%
# Corruption keeps shape and range, and never moves a pixel by more than 4 sigma.
noisy = corrupt_image(pool[0], sigma=0.1, seed=1)
print("max |noise|", np.abs(noisy - pool[0]).max().round(3), "std", (noisy - pool[0]).std().round(3))

# %%
# A few hundred steps on the surrogate alone.
model = FewShotSegNet(TINY_CONFIG, seed=0)
opt = torch.optim.Adam(model.parameters(), 1e-3)
for step in range(300):
    batch = make_unlabeled_batch(pool, u=8, sigma=0.1, seed=step)
    clean, corrupted = batch.arrays()
    clean_t = images_to_tensor(clean)
    loss = surrogate_loss(model.denoise_forward(images_to_tensor(corrupted)), clean_t)
    opt.zero_grad()
    loss.backward()
    opt.step()
    if step % 50 == 0 or step == 299:
        floor = float(surrogate_loss(clean_t.clamp(1e-7, 1 - 1e-7), clean_t))
        print(f"step {step:3d}  surrogate {loss.item():.4f}  (entropy floor {floor:.4f})")
