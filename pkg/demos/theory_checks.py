"""
Checking the normalization bounds on random instances
=====================================================

A plain layer and a normalized layer are coupled so both feed the same
activations to the same convex loss.  Each check reports both sides of an
identity or inequality.
"""

from bnlandscape import theory

pair = theory.build_coupled_pair(m=8, d=3, kind="quadratic", seed=0)

for rep in [theory.check_lipschitz(pair),
            theory.check_smoothness(pair),
            theory.check_minimax_lipschitz(pair, 2.5),
            theory.check_minimax_smoothness_homogeneity(pair),
            theory.check_rescaling_observation(pair.W, pair.X, pair.downstream)]:
    print(f"{rep.name:32s} lhs {rep.lhs:11.4g}  rhs {rep.rhs:11.4g}  "
          f"residual {rep.residual}  slack {rep.slack}  ok {rep.passed}")

# per-unit gradient norms shrink under normalization
rep = theory.check_lipschitz(pair)
for j, (a, b) in enumerate(zip(rep.details["lhs_units"], rep.details["rhs_units"])):
    print(f"unit {j}: |grad with BN|^2 = {a:.4f}  <=  {b:.4f}")

# starting point closer to a rescaled optimum
print(theory.check_init_lemma([2.0, 1.0], [1.0, 0.0]).to_dict())
