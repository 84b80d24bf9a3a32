"""Compare the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 20]

Times im2col, col2im, softmax_ce, and a full forward+backward of the
reference network on a 16-image batch.
"""

import argparse
import timeit

import numpy as np

from gtaseg.numkernel import _fallback

try:
    from gtaseg.numkernel import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def _cases(rng):
    x = rng.random((16, 32, 32, 16), dtype=np.float32)
    cols = rng.random((16 * 32 * 32, 9 * 16), dtype=np.float32)
    logits = rng.normal(size=(16, 4, 32, 32)).astype(np.float32)
    labels = rng.integers(-1, 4, size=(16, 32, 32)).astype(np.int64)
    weights = np.where(labels >= 0, rng.random(labels.shape), 0.0)
    return {
        "im2col": lambda m: m.im2col(x, 3),
        "col2im": lambda m: m.col2im(cols, 16, 32, 32, 16, 3),
        "softmax_ce": lambda m: m.softmax_ce(logits, labels, weights),
    }


def _train_step(rng):
    from gtaseg import pseudolabel, segmodel
    from gtaseg.numkernel import GradTape

    params = segmodel.init_model(segmodel.SegNetConfig(classes=4), 0)
    x = rng.random((16, 3, 32, 32), dtype=np.float32)
    y = rng.integers(0, 4, size=(16, 32, 32))

    def step():
        tape = GradTape()
        w = tape.watch_store(params)
        tape.backward(pseudolabel.supervised_loss(segmodel.forward(params, x, tape, w), y))

    return step


def _swap_backend(module):
    from gtaseg.numkernel import _backend

    _backend.im2col, _backend.col2im, _backend.softmax_ce = module.im2col, module.col2im, module.softmax_ce


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    backends = [("numpy", _fallback)] + ([("cython", _ckernels)] if _ckernels else [])
    if _ckernels is None:
        print("compiled extension not built; timing the numpy fallback only")

    print(f"{'kernel':<14}" + "".join(f"{n + ' ms':>12}" for n, _ in backends) + f"{'speedup':>10}")
    for name, fn in _cases(rng).items():
        times = [1e3 * min(timeit.repeat(lambda: fn(m), number=1, repeat=args.repeat)) for _, m in backends]
        speed = f"{times[0] / times[-1]:>9.1f}x" if len(times) > 1 else ""
        print(f"{name:<14}" + "".join(f"{t:>12.3f}" for t in times) + speed)

    step = _train_step(rng)
    times = []
    for _, m in backends:
        _swap_backend(m)
        times.append(1e3 * min(timeit.repeat(step, number=1, repeat=max(3, args.repeat // 4))))
    speed = f"{times[0] / times[-1]:>9.1f}x" if len(times) > 1 else ""
    print(f"{'fwd+bwd x16':<14}" + "".join(f"{t:>12.3f}" for t in times) + speed)


if __name__ == "__main__":
    main()
