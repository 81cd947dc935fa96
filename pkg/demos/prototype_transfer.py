"""
Label transfer with a support prototype
=======================================

One 1-shot episode on the synthetic shapes corpus: pool the support features under
the support mask, compare every query location with that prototype, and decode a
query mask. Writes ``prototype_transfer.png`` (query | truth | similarity | prediction).
"""

import tempfile
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from semifss.dataset import generate_shapes_dataset
from semifss.episodes import downsample_mask, sample_episode
from semifss.evaluation import dsc, predict_episode
from semifss.network import TINY_CONFIG, FewShotSegNet, cosine_map, images_to_tensor, masked_average_pool

torch.set_num_threads(1)
root = Path(tempfile.mkdtemp())
ds = generate_shapes_dataset(n_classes=6, per_class=8, size=(32, 32), seed=0, out_root=root / "shapes")
print("classes:", ", ".join(ds.classes))

# %%
# An episode is one class, k support pairs and a query of the same class.
ep = sample_episode(ds, ds.classes, k=1, rng_seed=3)
print("class", ep.class_id, "support", ep.support_indices, "query", ep.query_index)

# %%
# Encoder features sit at a quarter of the input resolution, so the support mask is
# downsampled before pooling. The prototype is the mean feature under the mask.
model = FewShotSegNet(TINY_CONFIG, seed=0).eval()
with torch.no_grad():
    feats = model.encode(images_to_tensor([ep.support[0][0], ep.query_image]))
small = downsample_mask(ep.support[0][1], feats.shape[-2:])
proto = masked_average_pool(feats[0], small)
print("features", tuple(feats.shape), "prototype", tuple(proto.shape))

# %%
# Cosine similarity between the prototype and each query location. Even an
# untrained encoder responds to colour, which is what the decoder learns to use.
sim = cosine_map(feats[1:2], proto[None])[0, 0].numpy()
sim_up = np.kron(sim, np.ones((4, 4)))
pred = predict_episode(model, ep)
print("untrained DSC", round(dsc(pred, ep.query_mask), 3))

panel = np.concatenate([
    ep.query_image,
    np.repeat(ep.query_mask[..., None], 3, -1),
    np.repeat(((sim_up - sim_up.min()) / (np.ptp(sim_up) + 1e-8))[..., None], 3, -1),
    np.repeat(pred[..., None], 3, -1),
], axis=1)
Image.fromarray((panel * 255).astype(np.uint8)).resize((panel.shape[1] * 4, panel.shape[0] * 4),
                                                      Image.NEAREST).save("prototype_transfer.png")
print("wrote prototype_transfer.png")
