"""Forward kinematics on the desk rig and on a hand-built planar arm."""

import math

import numpy as np

from selfcal.kinecore import ROOT, DHLink, RobotModel, fk, parameter_difference, perturb
from selfcal.sensemodel import project
from selfcal.simlab import desk_rig

# A two-link planar arm: each link is Rz(q) Tz(d) Tx(a) Rx(alpha).
arm = RobotModel((DHLink("j1", ROOT, a=1.0), DHLink("j2", "j1", a=1.0)))
print("straight arm tip:", fk(arm, None, [0.0, 0.0], "j2").translation)
print("elbow at 90 deg: ", fk(arm, None, [0.0, math.pi / 2], "j2").translation.round(12))

# The desk rig: two 6-DoF arms on a torso, a head camera, skin patches,
# a table plane and an external tracker.
rig = desk_rig()
print("\nframes:", [f.name for f in rig.frames])
print("free slots:", len(rig.free_slots), "e.g.", rig.slot_keys[:4])

q = np.zeros(rig.n_joints)
print("left hand at zero joints:", fk(rig, None, q, "L6").translation.round(4))

# Where does the head camera see the left fingertip marker?  Try random
# joint configurations until the marker lands inside the image.
cam = rig.camera("head")
rng = np.random.default_rng(1)
for attempt in range(1, 1000):
    q = rng.uniform(rig.joint_limits[:, 0], rig.joint_limits[:, 1])
    tip = fk(rig, None, q, "L6").apply(np.array(rig.marker("L_tip").position))
    head = fk(rig, None, q, cam.mount.parent) @ cam.mount.pose
    p_cam = head.inverse().apply(tip)
    if p_cam[2] > 0.05 and cam.contains(project(cam, p_cam)):
        print(f"left tip seen at pixel {project(cam, p_cam).round(1)} (attempt {attempt})")
        break

# Perturbing the free slots is how the simulator makes a "true" robot.
true = perturb(rig, {"length": 0.005, "angle": 0.02}, seed=0)
d = parameter_difference(true, rig, rig.free_slots)
unit = np.array([s.unit for s in rig.free_slots])
print("\nlargest length change %.4f m, angle change %.4f rad" %
      (np.abs(d[unit == "length"]).max(), np.abs(d[unit == "angle"]).max()))
