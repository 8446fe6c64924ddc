"""
Noising a scene, step by step and in one jump
=============================================

Renders one shapes-dataset scene, pushes it through the forward chain, and
writes a strip of PPM frames so the loss of structure can be inspected.
Run: ``python demos/forward_process.py [out_dir]``
"""
import sys
from pathlib import Path

import numpy as np

from kldiff.core import q_sample_closed, q_sample_step
from kldiff.dataio import SceneSpec, render_scene, write_image
from kldiff.schedules import make_schedule

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out") / "forward"
out.mkdir(parents=True, exist_ok=True)

# a 100-step linear schedule, the default for every experiment in this repo
sched = make_schedule("linear", 100)
print("beta_1 = %.2e, beta_T = %.3f, alpha_bar_T = %.2e"
      % (sched.beta(1), sched.beta(100), sched.alpha_bar(100)))

x0 = render_scene(SceneSpec("triangle", "yellow", "top-right"))[None]

# walk the chain one step at a time, saving a frame every 20 steps
rng = np.random.default_rng(0)
x = x0
for t in range(1, 101):
    x = q_sample_step(x, t, sched, rng.standard_normal(x.shape))
    if t % 20 == 0:
        write_image(out / f"step_{t:03d}.ppm", x[0])

# the closed form gives the same distribution without the walk
n = 20_000
many = np.repeat(x0, n, axis=0)
walked = many
for t in range(1, 41):
    walked = q_sample_step(walked, t, sched, rng.standard_normal(walked.shape))
jumped = q_sample_closed(many, 40, sched, rng.standard_normal(many.shape))
print("t=40 pixel (0,0,0): walked mean %.4f var %.4f | jumped mean %.4f var %.4f | "
      "theory mean %.4f var %.4f"
      % (walked[:, 0, 0, 0].mean(), walked[:, 0, 0, 0].var(),
         jumped[:, 0, 0, 0].mean(), jumped[:, 0, 0, 0].var(),
         np.sqrt(sched.alpha_bar(40)) * x0[0, 0, 0, 0], 1 - sched.alpha_bar(40)))
print(f"frames written to {out}")
