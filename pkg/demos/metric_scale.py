"""
From reconstruction units to metres
===================================

Training pairs come with camera poses in whatever units the reconstruction
used. A per-pair scale from depth maps turns the relative translation into
metres; rotations need no change. Images are then assigned a resolution
bucket near one megapixel.
"""

import numpy as np

from twnv.dataprep import DepthMap, PairRecord, assign_bucket, filter_pairs, metric_scale, relative_pose, rescale_motion
from twnv.geometry import CameraMotion, PoseTransform, to_transform
from twnv.instructions import render_numerical

rng = np.random.default_rng(3)

# reconstructed depths are off by an unknown factor (here 0.4) plus noise
metric = rng.uniform(0.5, 6.0, (48, 64))
recon = 0.4 * metric * rng.normal(1.0, 0.02, metric.shape)
recon[:4] = 0.0  # missing depth is masked out
s = metric_scale(DepthMap(recon), DepthMap(metric))
print(f"least-squares scale {s:.4f}  (true 2.5)")
print(f"median-ratio scale  {metric_scale(DepthMap(recon), DepthMap(metric), mode='median'):.4f}")

# the target camera sits 0.3 reconstruction units to the right, turned 20 degrees
source = PoseTransform.identity()
target = to_transform(CameraMotion(dx=0.3, yaw=20))
motion = relative_pose(source, target)
print("native units:", render_numerical(motion))
print("metres:      ", render_numerical(rescale_motion(motion, s)))

# pairs with too little overlap are dropped before any of this
kept, dropped = filter_pairs([PairRecord("a", "a0.png", "a1.png", match_count=9),
                              PairRecord("b", "b0.png", "b1.png", match_count=10)])
print("kept", [p.pair_id for p in kept], "dropped", [(p.pair_id, p.reason) for p in dropped])

for size in [(1024, 1024), (1920, 1080), (1080, 1920), (4000, 1000)]:
    print(size, "->", assign_bucket(*size))
