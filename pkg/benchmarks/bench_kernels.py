"""Compare the compiled kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import importlib
import timeit

import numpy as np


def cases(rng):
    x = rng.normal(size=(32 * 8 * 17, 17))
    mask = rng.random(x.shape) > 0.2
    ln = rng.normal(size=(32 * 17, 64))
    xhat, inv = importlib.import_module("mae._kernels_py").layer_norm_forward(ln, 1e-5)
    g = rng.normal(size=ln.shape)
    probs = rng.dirichlet(np.ones(8), size=4096)
    u = rng.random(4096)
    return {
        "masked_softmax": lambda k: k.masked_softmax(x, mask),
        "softmax_backward": lambda k: k.softmax_backward(k.masked_softmax(x, None), x),
        "layer_norm_forward": lambda k: k.layer_norm_forward(ln, 1e-5),
        "layer_norm_backward": lambda k: k.layer_norm_backward(xhat, inv, g),
        "sample_categorical": lambda k: k.sample_categorical(probs, u),
    }


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--repeat", type=int, default=50)
    args = p.parse_args()
    backends = {"python": importlib.import_module("mae._kernels_py")}
    try:
        backends["cython"] = importlib.import_module("mae._kernels")
    except ImportError:
        print("compiled extension not built; timing the fallback only")
    print(f"{'kernel':<22}" + "".join(f"{name:>12}" for name in backends) + f"{'speedup':>10}")
    for name, fn in cases(np.random.default_rng(0)).items():
        times = {b: min(timeit.repeat(lambda: fn(k), number=1, repeat=args.repeat)) for b, k in backends.items()}
        row = f"{name:<22}" + "".join(f"{1e3 * t:>10.3f}ms" for t in times.values())
        if "cython" in times:
            row += f"{times['python'] / times['cython']:>9.2f}x"
        print(row)


if __name__ == "__main__":
    main()
