"""Compare the numba and pure-numpy kernel backends.

The backend is fixed at import time via ``QT1MAP_BACKEND``, so each
(backend, kernel) measurement runs in a fresh subprocess. The first
numba call includes JIT compilation; a warmup run is timed out
separately so the table reports steady-state throughput.

Usage: python benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import json
import os
import subprocess
import sys
import time

KERNELS = ("mp2rage_batch", "sir_fit_batch", "conv_forward", "conv_backward")
BACKENDS = ("numba", "numpy")


def _bench_mp2rage_batch():
    import numpy as np

    from qt1map.mp2rage import AcquisitionParams, simulate_gre_signals_batch

    params = AcquisitionParams(
        mp2rage_tr=8.25, tr=0.006, ti=(1.010, 3.683, 6.355),
        n_pulses=225, flip_angles=(4.0, 4.0, 4.0), inv_eff=0.84,
    )
    rng = np.random.default_rng(0)
    t1 = rng.uniform(0.3, 5.0, 200_000)
    b1 = rng.uniform(0.5, 1.5, 200_000)

    def run():
        simulate_gre_signals_batch(params, t1, b1)

    return run


def _bench_sir_fit_batch():
    import numpy as np

    from qt1map._kernels.sir_kernels import sir_fit_batch
    from qt1map.sir import DEFAULT_TI, SirAcquisition, SirModelParams, sir_signal

    acq = SirAcquisition(ti=DEFAULT_TI, td=2.5, sm=0.83)
    rng = np.random.default_rng(1)
    curves = []
    for _ in range(500):
        p = SirModelParams(r1f=rng.uniform(0.4, 1.1), psr=rng.uniform(0.08, 0.22),
                           kmf=rng.uniform(6.0, 25.0), sf=rng.uniform(-1.0, -0.7),
                           m_inf=1.0)
        curves.append(sir_signal(p, acq) + rng.normal(0.0, 0.002, len(acq.ti)))
    Y = np.asarray(curves)
    sm = np.full(len(curves), acq.sm)
    ti = np.asarray(acq.ti)
    p0 = SirModelParams(0.7, 0.1, 12.0, -0.9, 1.0).as_free_vector()
    lb = np.array([0.3, 0.05, 5.0, -1.0, 1e-6])
    ub = np.array([1.2, 0.25, 30.0, 1.0, 1e6])

    def run():
        sir_fit_batch(Y, sm, ti, acq.td, p0, lb, ub, 500)

    return run


def _conv_case():
    import numpy as np

    rng = np.random.default_rng(2)
    x = rng.normal(size=(256, 16, 5, 5))
    w = rng.normal(size=(16, 16, 3, 3))
    b = rng.normal(size=16)
    gy = rng.normal(size=(256, 16, 5, 5))
    return x, w, b, gy


def _bench_conv_forward():
    from qt1map._kernels.conv_kernels import conv3x3

    x, w, b, _ = _conv_case()

    def run():
        conv3x3(x, w, b)

    return run


def _bench_conv_backward():
    from qt1map._kernels.conv_kernels import conv3x3, conv3x3_backward

    x, w, b, gy = _conv_case()
    conv3x3(x, w, b)

    def run():
        conv3x3_backward(x, w, gy)

    return run


def worker(kernel: str, repeat: int) -> None:
    run = globals()[f"_bench_{kernel}"]()
    t0 = time.perf_counter()
    run()  # warmup (includes numba compilation)
    warmup = time.perf_counter() - t0
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        run()
        times.append(time.perf_counter() - t0)
    print(json.dumps({"warmup_s": warmup, "best_s": min(times)}))


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--worker", choices=KERNELS, help=argparse.SUPPRESS)
    args = ap.parse_args()

    if args.worker:
        worker(args.worker, args.repeat)
        return 0

    results = {}
    for kernel in KERNELS:
        for backend in BACKENDS:
            env = dict(os.environ, QT1MAP_BACKEND=backend)
            proc = subprocess.run(
                [sys.executable, os.path.abspath(__file__),
                 "--worker", kernel, "--repeat", str(args.repeat)],
                env=env, capture_output=True, text=True,
            )
            if proc.returncode != 0:
                print(proc.stderr, file=sys.stderr)
                return 1
            results[(kernel, backend)] = json.loads(proc.stdout)

    print(f"{'kernel':<16} {'backend':<8} {'warmup [s]':>11} {'best [s]':>10} "
          f"{'vs numpy':>9}")
    for kernel in KERNELS:
        base = results[(kernel, "numpy")]["best_s"]
        for backend in BACKENDS:
            r = results[(kernel, backend)]
            print(f"{kernel:<16} {backend:<8} {r['warmup_s']:>11.3f} "
                  f"{r['best_s']:>10.4f} {base / r['best_s']:>8.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
