"""Small builders shared by the test modules."""
import numpy as np

from mgstream.gsplat import Camera, GaussianSet


def random_gaussians(rng, n, spread=1.5, scale=(0.05, 0.4), opacity=(0.05, 1.0), sh_scale=1.5):
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return GaussianSet(
        positions=rng.uniform(-spread, spread, (n, 3)),
        quats=q,
        scales=rng.uniform(*scale, (n, 3)),
        opacities=rng.uniform(*opacity, n),
        sh=rng.normal(0.0, sh_scale, (n, 12)),
    )


def make_camera(size=64, f=70.0, eye=(0.4, -0.3, -7.0)):
    return Camera.look_at(eye, (0.0, 0.0, 0.0), (0.0, -1.0, 0.0), f, f, size, size)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def record(number: int, passed: bool, detail: str) -> bool:
    line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed
