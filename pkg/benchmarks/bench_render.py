"""Time forward and forward+backward rendering for every available compositing backend.

    python3 benchmarks/bench_render.py --counts 256 1024 5120 --res 32 64
"""

import argparse
import time

import numpy as np
import torch

from novelgs.gaussians import GaussianSet
from novelgs.geometry import make_camera
from novelgs.render import available_backends, render


def random_set(count: int, seed: int = 0) -> GaussianSet:
    rng = np.random.default_rng(seed)
    return GaussianSet.from_numpy(
        rng.uniform(-0.7, 0.7, (count, 3)), rng.uniform(0.005, 0.02, (count, 3)), rng.normal(size=(count, 4)),
        rng.uniform(0.05, 1.0, count), rng.uniform(0, 1, (count, 3)),
    )


def timed(fn, repeats: int) -> float:
    fn()  # warm-up
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--counts", type=int, nargs="+", default=[256, 1024, 5120])
    parser.add_argument("--res", type=int, nargs="+", default=[32, 64])
    parser.add_argument("--repeats", type=int, default=3)
    args = parser.parse_args()

    backends = available_backends()
    print(f"backends: {', '.join(backends)}")
    print(f"{'gaussians':>9} {'res':>4} {'backend':>7} {'forward ms':>11} {'fwd+bwd ms':>11}")
    for count in args.counts:
        g = random_set(count)
        for res in args.res:
            cam = make_camera([1.8, -1.2, 0.9], (res, res), res * 1.4)
            for backend in backends:
                def forward():
                    with torch.no_grad():
                        render(g, cam, backend=backend)

                def forward_backward():
                    leaves = [t.clone().requires_grad_(True) for t in g.fields()]
                    image, alpha = render(GaussianSet(*leaves), cam, backend=backend)
                    (image.sum() + alpha.sum()).backward()

                f = timed(forward, args.repeats) * 1e3
                fb = timed(forward_backward, args.repeats) * 1e3
                print(f"{count:>9} {res:>4} {backend:>7} {f:>11.1f} {fb:>11.1f}")


if __name__ == "__main__":
    main()
