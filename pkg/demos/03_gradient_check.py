"""Verify every analytic gradient against finite differences.

Runs the same checks as `facevis gradcheck`: the projection Jacobian and
the two losses (smooth paths), the renderer backward under frozen-set
central differences, and a sampled-weight check of a tiny two-block
network trained end to end through the renderer.
"""

import time

from facevis.gradcheck import run_all

start = time.time()
reports = run_all(seed=0, trials=10)
for report in reports:
    print(report.line())
print("all categories %s in %.1fs"
      % ("passed" if all(r.passed for r in reports) else "FAILED",
         time.time() - start))
