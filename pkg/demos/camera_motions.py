"""
Camera motions and instruction text
===================================

A motion moves the camera from its current pose. Here we build a few, chain
them, undo them, and turn them into the one-line instructions that the
view synthesizer reads.
"""

import numpy as np

from twnv.geometry import CameraMotion, GimbalLock, compose, from_transform, invert, to_transform
from twnv.instructions import (
    discrete_to_motion,
    parse_discrete,
    parse_instruction,
    parse_numerical,
    render_discrete,
    render_numerical,
)

# step up one metre and tilt down to look at the table top
look_down = CameraMotion(dy=1.0, pitch=-15)
print(render_numerical(look_down))

# turn right, then walk forward: the step follows the new heading
turn = CameraMotion(yaw=90)
walk = CameraMotion(dz=2.0)
both = compose(turn, walk)
print("turn then walk ->", np.round(both.translation, 6), both.yaw)

# a motion composed with its inverse leaves the camera where it started
print("undo ->", render_numerical(compose(both, invert(both))))

# the matrix form is a plain rigid transform
print(to_transform(look_down).matrix().round(3))

# at pitch +-90 yaw and roll collapse onto one axis; the error carries a usable answer
try:
    from_transform(to_transform(CameraMotion(yaw=30, pitch=90, roll=10)))
except GimbalLock as err:
    print("gimbal lock, folded to", err.motion)

# parsing accepts planner prose as long as every field is present
prose = "Sure! dx = 0, dy = 1.0, dz = 0, yaw = 0, pitch = -15, roll = 0 should reveal the mug."
print(parse_numerical(prose, strict=False) == look_down)

# the coarse vocabulary maps named directives onto the same motions
step = parse_discrete("I would move forward to see past the chair.")
print(render_discrete(step), "->", render_numerical(discrete_to_motion(step)))
print(parse_instruction("pan left a little", "discrete"))
