"""Crowd through the V-neck, with and without keypoint guidance.

A small training budget (a few minutes on one core) is enough to see the
qualitative difference: both runs reach the target from the source they were
trained on, but the guided run has seen its paths pulled through the gap by
the keypoints, so its learned drift routes walkers around the wedges. The
fraction of trajectories that ever enter an obstacle is printed for both.

    python demos/crowd_navigation.py
"""

import numpy as np

from fsbm.guidance import GuidanceContext
from fsbm.matching import TrainConfig, evaluate, run_fsbm
from fsbm.scenes import generate_keypoints, make_scene


def collision_rate(traj, scene):
    inside = sum(poly.depth(traj) > 0 for poly in scene.obstacles)
    return inside.any(0).mean()


def main():
    scene = make_scene("vneck")
    cfg = TrainConfig(epochs=6, pairs=512, inner_steps=200, patience_tol=0.0, seed=0)
    keypoints = generate_keypoints(scene, 20, 0.01, np.random.default_rng(1))
    for alpha in (0.0, 0.5):
        guidance = GuidanceContext(keypoints, alpha) if alpha > 0 else None
        state = run_fsbm(scene, guidance, cfg,
                         log=lambda r: print(f"  epoch {r['epoch']:2d} {r['direction']:8s}"
                                             f" W2 {r['w2']:.3f}"))
        ev = evaluate(state, scene, 1024, np.random.default_rng(5))
        print(f"alpha = {alpha}: terminal W2 {ev['w2']:.3f}, "
              f"trajectories touching an obstacle {collision_rate(ev['trajectory'], scene):.1%}\n")


if __name__ == "__main__":
    main()
