"""A complete session: a, b and the station talk over socket pairs.

Run: python3 demos/02_session_over_sockets.py

Compares the bytes on the wire with sending both frames whole, and shows
what the crack and ghost filters did at the station.
"""

from rprr import (Intrinsics, SessionConfig, gen_synthetic_scene, psnr, run_independent, run_session,
                  standard_scenes)
from rprr.metrics import EnergyModel, energy_estimate

K = Intrinsics.default(640, 480)
pair = gen_synthetic_scene(standard_scenes(K)[0], seed=0)
frames = (pair.Z_a, pair.C_a), (pair.Z_b, pair.C_b)

Z, C, M, rec = run_session("socket", *frames, K, SessionConfig(quality=50))
base = run_independent(*frames, K, quality=50, transport="socket")

print("rprr session")
print(f"  ICP messages    {rec.icp_messages:8d} bytes over {rec.iterations} iterations")
print(f"  block bitmap    {rec.block_coords:8d}")
print(f"  a's container   {rec.container_a:8d}")
print(f"  b's container   {rec.container_b:8d}  ({rec.payload_blocks} blocks)")
print(f"  total           {rec.total:8d}")
print(f"independent       {base.total:8d}")
print(f"ratio             {rec.total / base.total:8.3f}")
print(f"PSNR of b's view  {psnr(pair.C_b, C):.2f} dB")
s = rec.filter_stats
print(f"station filters: {s.ghosts} ghosts replaced, {s.filled} cracks filled, {s.unfilled} left")
m = EnergyModel()
print(f"energy: rprr {1000 * energy_estimate(rec, m):.1f} mJ, "
      f"independent {1000 * energy_estimate(base, m):.1f} mJ (this machine's timings)")
