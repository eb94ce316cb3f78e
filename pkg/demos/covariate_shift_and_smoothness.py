"""
Gradient shift versus landscape smoothness
==========================================

For each layer, compare its gradient before and after the earlier layers
take their step.  Then walk along the gradient and record how fast the
gradient changes.
"""

import numpy as np

from bnlandscape import TrainConfig, build_dln, train
from bnlandscape.instrumentation import IcsHook, ProbeHook

for norm in ["none", "bn"]:
    net, data = build_dln(seed=1, norm=norm)
    ics, probe = IcsHook(every=100), ProbeHook(every=100)
    train(net, data, TrainConfig(lr=1e-5, steps=1000, hook_every=100), [ics, probe])
    cos = [r.cos_angle for r in ics.records if r.cos_angle is not None]
    l2 = [r.l2_diff for r in ics.records]
    beta = [r.effective_beta for r in probe.reports]
    print(f"{norm:4s} mean cos(G, G') {np.mean(cos):.4f}   mean |G - G'| {np.mean(l2):.3g}   "
          f"median effective beta {np.median(beta):.3g}")

# the plain network barely shifts its gradients; the bn network shifts them a
# lot and its gradient changes fastest along the step, near 2 / lr
