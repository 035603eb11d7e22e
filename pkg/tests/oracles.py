"""Reference implementations shared by the test modules."""

import math


def resimulate(scene, traj):
    """Step-by-step re-simulation of the pick-and-place success predicate.

    Walks the plan once, tracking whether the gripper is holding the target.
    Written from the rule text, not from the library oracle.
    """
    eps, close = 0.03, 0.5
    target = scene.objects[scene.target]
    holding = False
    for t in range(traj.shape[1]):
        x, y, g = traj[0, t], traj[1, t], traj[7, t]
        if not holding:
            if g >= close:
                if math.hypot(x - target.x, y - target.y) > eps:
                    return 0
                holding = True
        elif g < close:
            goal = scene.goal
            return int(goal.x0 <= x <= goal.x1 and goal.y0 <= y <= goal.y1)
    return 0
