"""Writing guidance as a small program instead of code.

Energies can be written in a tiny expression language. This demo parses a
program, shows the diagnostics for a broken one, runs the repair loop
against recorded model responses, and checks the program's gradient
against finite differences.
"""
import numpy as np

from contactdiff import envs as E
from contactdiff import guidescript as GS

SOURCE = """
align (pre): mean_t(norm2(obs[t, 0] - obs[t, 4]))
goal (post) @ 2: mean_t(norm2(obs[t, 3] - interp(obs[0, 3], goal[0], t / H)))
"""

# a first answer with an index error, then a corrected one
RESPONSES = [
    "align: mean_t(norm2(obs[t, 0] - obs[t, 9]))",
    "```" + SOURCE + "```",
]


def main():
    spec = E.get_env("door1d")
    prog = GS.check(GS.parse(SOURCE), spec.obs_dim, spec.act_dim, 1)
    print("parsed program:")
    print(GS.to_source(prog))

    try:
        GS.check(GS.parse(RESPONSES[0]), spec.obs_dim, spec.act_dim, 1)
    except GS.GuideScriptError as exc:
        print("diagnostic for the first answer:", exc.describe())

    bundle = GS.render_prompt("door1d", "open the door to 30 degrees")
    res = GS.generate_guidance(bundle, GS.FixtureClient(RESPONSES), max_rounds=3, goal=[0.52])
    print(f"repair loop accepted a program after {res.rounds} rounds")

    ctx = GS.EvalContext.for_env(spec, [0.52])
    traj = GS.client.probe_trajectory(spec, 16, seed=0)
    g = GS.eval_grad(prog, traj, ctx)
    eps, k = 1e-6, (5, spec.act_dim + 3)
    hi, lo = traj.copy(), traj.copy()
    hi[k] += eps
    lo[k] -= eps
    fd = (GS.evaluate(prog, hi, ctx) - GS.evaluate(prog, lo, ctx)) / (2 * eps)
    print(f"energy {GS.evaluate(prog, traj, ctx):.4f}; d/d hinge[5] analytic {g[k]:.6f} "
          f"finite difference {fd:.6f}")
    print("term values:", {n: round(v, 4) for n, v in GS.term_values(prog, traj, ctx).items()})


if __name__ == "__main__":
    main()
