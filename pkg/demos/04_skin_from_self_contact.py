"""Locate a skin patch on the forearm using only self-touch.

The arm kinematics are taken as known.  The left fingertip touches taxels on
the right forearm patch; the solver estimates where the patch is mounted.
"""

from selfcal.estimator import lm_solve, pose_error
from selfcal.simlab import ScenarioSpec, synthesize

spec = ScenarioSpec(
    mask=["patch/R_skin/*"],                      # only the patch mount is free
    counts={"sc": 100},
    sigmas={"sc": 5e-4},
    contact_pairs=[["L_tip", "R_skin"]],
    perturbation={"length": 0.01, "angle": 0.05},  # 1 cm / 0.05 rad mounting error
    seed=0,
)
nominal, true, dataset, _ = synthesize(spec)
print("free slots:", [s.key for s in nominal.free_slots])


def mount(model):
    return model.patch("R_skin").mount.pose


dt, dr = pose_error(mount(nominal), mount(true))
print(f"before: patch off by {dt * 1e3:.1f} mm and {dr:.3f} rad")

result = lm_solve(nominal, dataset)
dt, dr = pose_error(mount(result.model_opt), mount(true))
print(f"after {result.iterations} iterations: {dt * 1e3:.2f} mm and {dr:.4f} rad")

# How many distinct taxels were touched?
print("taxels touched:", len({m.taxel for m in dataset.measurements}), "of",
      len(nominal.patch("R_skin").taxel_ids))
