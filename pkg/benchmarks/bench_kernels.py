"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 2000] [--end-to-end]

Shapes follow a desk run: 150-step trajectories, minibatches of 30, up to 10 actions.
"""
import argparse
import os
import subprocess
import sys
import time
import timeit

import numpy as np

from fauno import _kernels as K


def _cases(rng):
    n, a = 30, 10
    mask = rng.random((n, a)) < 0.7
    mask[:, 0] = True
    logits = rng.normal(size=(n, a))
    logp = K.NUMPY.masked_log_softmax(logits, mask)
    actions = np.zeros(n, dtype=np.int64)
    traj = 150
    return {
        "gae (150 steps)": ("gae", (rng.normal(size=traj), rng.normal(size=traj), np.zeros(traj), 0.0, 0.9, 0.95)),
        "masked_log_softmax (30x10)": ("masked_log_softmax", (logits, mask)),
        "ppo_head (30x10)": ("ppo_head", (logp, mask, actions, logp[:, 0] + 0.1, rng.normal(size=n), 0.5, 0.5)),
        "dueling_combine (30x10)": ("dueling_combine", (rng.normal(size=n), logits, mask)),
        "dueling_backward (30x10)": ("dueling_backward", (logits, mask)),
    }


_RUN = ("from fauno.harness import ExperimentConfig, run_experiment; "
        "run_experiment(ExperimentConfig.from_dict({'episodes': 4, 'seeds': [0]}), 0)")


def end_to_end():
    """Wall time of a short desk training run in a fresh process per backend."""
    for flag in ("1", ""):
        env = dict(os.environ, FAUNO_DISABLE_NUMBA=flag)
        t0 = time.perf_counter()
        subprocess.run([sys.executable, "-c", _RUN], env=env, check=True)
        label = "numpy" if flag else "numba"
        print(f"desk run, 4 episodes x 150 ticks, {label:5s}: {time.perf_counter() - t0:6.2f} s")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=2000)
    ap.add_argument("--end-to-end", action="store_true", help="also time a short training run per backend")
    args = ap.parse_args(argv)
    if not K.HAVE_NUMBA:
        print("numba is not installed; nothing to compare")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':30s} {'numpy us':>10s} {'numba us':>10s} {'speedup':>8s}")
    for label, (name, call_args) in _cases(rng).items():
        fn_np, fn_nb = getattr(K.NUMPY, name), getattr(K.NUMBA, name)
        fn_nb(*call_args)  # compile outside the timed region
        t_np = min(timeit.repeat(lambda: fn_np(*call_args), number=args.repeat, repeat=3)) / args.repeat * 1e6
        t_nb = min(timeit.repeat(lambda: fn_nb(*call_args), number=args.repeat, repeat=3)) / args.repeat * 1e6
        print(f"{label:30s} {t_np:10.2f} {t_nb:10.2f} {t_np / t_nb:7.1f}x")
    if args.end_to_end:
        end_to_end()


if __name__ == "__main__":
    main()
