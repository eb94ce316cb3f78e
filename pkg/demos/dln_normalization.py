"""
Deep linear networks with and without normalization
===================================================

A 25-layer linear network fits x -> Ax.  The same initial weights are
trained plain, with batch normalization and with l_p normalization.
Short runs at a larger step than the default; the full 10,000-step
comparison is the ``compare`` subcommand.
"""

from bnlandscape import TrainConfig, build_dln, train

STEPS = 1500

for norm in ["none", "bn", "lp1", "lp2", "lpinf"]:
    net, data = build_dln(seed=0, norm=norm)
    trace = train(net, data, TrainConfig(lr=1e-5, steps=STEPS))
    losses = trace.losses
    print(f"{norm:6s} loss {losses[0]:8.3f} -> {losses[-1]:8.3f}  "
          f"(step {STEPS // 3}: {losses[STEPS // 3]:.3f})")

# adjusted descent updates one layer at a time, recomputing the gradient
net, data = build_dln(seed=0)
plain = train(net, data, TrainConfig(lr=1e-5, steps=300))
adjusted = train(net, data, TrainConfig(lr=1e-5, steps=300, mode="adjusted"))
print("after 300 steps: standard", round(plain.losses[-1], 3),
      "adjusted", round(adjusted.losses[-1], 3),
      f"({adjusted.grad_evals} vs {plain.grad_evals} gradient evaluations)")
