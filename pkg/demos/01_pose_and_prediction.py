"""Two sensors see the same room from slightly different poses.

Run: python3 demos/01_pose_and_prediction.py

Walks through the first half of the pipeline: estimate the relative pose
with ICP, forward-warp a's frame into b's view, and see which 8x8 blocks b
still has to send.
"""

import math

import numpy as np

from rprr import (Intrinsics, gen_synthetic_scene, icp_run_local, prediction_set, standard_scenes,
                  validation_set, warp_image)

K = Intrinsics.default(320, 240)
spec = standard_scenes(K)[2]            # a pan to the right
pair = gen_synthetic_scene(spec, seed=0)
print(f"scene {spec.name}: {K.width}x{K.height}, true motion {math.degrees(pair.ground_truth.angle()):.2f} deg")

res = icp_run_local(pair.Z_a, pair.Z_b, K, seed=0)
E = pair.ground_truth.inverse() @ res.transform
print(f"ICP: {res.iterations} iterations, converged={res.converged}")
print(f"  rotation error {math.degrees(E.angle()):.4f} deg, "
      f"translation error {1000 * np.linalg.norm(res.transform.translation - pair.ground_truth.translation):.2f} mm")

W = warp_image(pair.Z_a, pair.C_a, res.transform, K)
B_p = prediction_set(W)
B_v = validation_set(pair.Z_b, res.transform.inverse(), K)
U = B_p | B_v
total = B_p.mask.size
print(f"blocks a cannot predict (B_p): {len(B_p)} of {total}")
print(f"blocks b sees outside a's view (B_v): {len(B_v)}")
print(f"b sends {len(U)} blocks ({100 * len(U) / total:.1f}% of its frame)")

# where the payload sits: one character per block row
for row in U.mask[::2]:
    print("".join("#" if v else "." for v in row))
