"""
One forward pass and a gradient check
=====================================

Runs the patched model on a small graph and compares reverse-mode gradients
with central differences for one weight matrix.
"""

import numpy as np

from cellgraph import autodiff as ad
from cellgraph import gnn
from cellgraph.featureio import SynthSpec, features_from_mask, generate_synthetic_tissue
from cellgraph.graphbuilder import AugmentParams, augment, split_patches

mask, grade = generate_synthetic_tissue(SynthSpec(width=256, height=256), seed=3, grade=1)
fs = features_from_mask(mask, 16, grade)
pg = split_patches(augment(fs, AugmentParams(d=8, M=40)), fs.image_dims)

# a small model: 16-dim embeddings, pooling 40 nodes -> 8 -> 2 -> 1 per patch
hp = gnn.HyperParams(e=16, pool_sizes=(8, 2, 1))
params = gnn.init_params(16, hp, seed=0, input_mean=fs.features.mean(axis=0), input_std=fs.features.std(axis=0))
print("untrained prediction:", gnn.predict(pg, params), "(the merge output bias:", params["merge.l2.b"].value, ")")

# the output layer starts at zero, so nothing upstream gets a gradient before
# the first update; small random output weights make the check informative
params["merge.l2.w"].value = np.random.default_rng(0).normal(scale=0.5, size=(3, 1))

# loss and gradients for this one sample
with ad.Tape() as tape:
    loss = ad.huber(ad.sub(gnn.forward(pg, params), ad.constant(float(grade))))
ad.backward(loss, tape, wrt=params.trainable())
print("loss", loss.item(), "| grad norm of b1.conv1:", np.linalg.norm(params["b1.conv1"].grad))

# finite differences on the first conv weight of block 2
name = "b2.conv1"
orig = params.tensors[name]


def f(x):
    params.tensors[name] = x
    try:
        return gnn.forward(pg, params)
    finally:
        params.tensors[name] = orig


print(f"max relative error for {name}:", ad.grad_check(f, ad.Tensor(orig.value.copy())))
