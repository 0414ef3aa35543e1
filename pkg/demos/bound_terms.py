"""How the complexity terms of the meta-learning bound scale with the number
of training tasks T and query points per task m."""

from simpa.bound import BoundConfig, assemble_bound, compute_R0, compute_Ri, split_confidence

for T in (2, 10, 100, 1000):
    cfg = BoundConfig(delta=0.1, tau=2.0, T=T)
    d0, di = split_confidence(cfg)
    print(f"T={T:5d}  R0(kl=0)={compute_R0(0.0, cfg):.4f}  R0(kl=10)={compute_R0(10.0, cfg):.4f}  "
          f"delta0={d0:.4f}  delta_i={di[0]:.2e}")

cfg = BoundConfig(0.1, 2.0, 2)
for m in (5, 15, 100, 1000):
    print(f"m={m:5d}  Ri(kl=0)={compute_Ri(0.0, m, cfg):.4f}  Ri(kl=5)={compute_Ri(5.0, m, cfg):.4f}")

rep = assemble_bound([0.2, 0.3], [], [1.0, 0.5], 2.0, cfg, 15)
print(rep.to_json())
