"""
Soft thresholding inside a residual block
=========================================

Each RSBU-CW block learns one threshold per channel and zeroes residual
activations whose magnitude falls below it.
"""

import numpy as np

from shrinksv import tensor as T
from shrinksv.shrinkage import (ModelConfig, RsbuCw, SpeakerNet, Trunk, TrunkConfig, channel_thresholds, rsbu_forward,
                                soft_threshold)
from shrinksv.tensor import Tensor

# the shrinkage function on a small grid
x = np.linspace(-2, 2, 9)
print("x          :", x)
print("shrink(0.5):", soft_threshold(Tensor(x[None]), Tensor(np.array([0.5]))).data[0])

# thresholds come from the block's own activations: a sigmoid fraction of mean |x|
rng = np.random.default_rng(1)
block = RsbuCw(8, 8, 1, rng).eval()
feats = Tensor(rng.standard_normal((2, 8, 20, 16)))
residual = block.bn2(block.conv2(T.relu(block.bn1(block.conv1(feats)))))
tau = channel_thresholds(residual, block.fc1, block.bn_fc, block.fc2).data
print("per-channel thresholds:", np.round(tau[0], 3))
print("fraction zeroed:", round(float(np.mean(soft_threshold(residual, Tensor(tau)).data == 0)), 3))
print("block output:", rsbu_forward(block, feats).shape)

# stage shapes for a 2 s crop (200 frames) in the two presets
for variant in ("Q", "H"):
    cfg = TrunkConfig.preset(variant)
    print(variant, "stages:", cfg.stage_shapes(200)[1:], "frame dim", cfg.frame_dim)

trace = []
with T.no_grad():
    Trunk(TrunkConfig.preset("H"), rng).eval()(Tensor(rng.standard_normal((1, 1, 200, 64))), trace)
print("traced H shapes:", trace[1:])

for variant in ("Q", "H"):
    for pooling in ("SAP", "ASP"):
        n = SpeakerNet(ModelConfig.preset(variant, pooling), rng).num_parameters()
        print(f"{variant}/{pooling}: {n / 1e6:.2f}M parameters")
