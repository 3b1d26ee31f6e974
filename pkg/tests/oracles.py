"""Straight-line reference implementations, written independently of the package.

Shared by the unit suites and the acceptance module.
"""
import math
from fractions import Fraction

import numpy as np


def latency_oracle(bits, bandwidth, tps, power=40.0, gain=0.0, noise=20.0):
    snr_db = power + gain - noise
    capacity = bandwidth * math.log(1.0 + 10.0 ** (snr_db / 10.0)) / math.log(2.0)
    ticks = bits / capacity * tps
    return max(1, math.ceil(ticks))


def delay_oracle(q_n, cap_n, work, q_j=None, cap_j=None, comm=0.0, wait=1.0, w_comm=3.0, w_exc=0.5):
    if cap_j is None:
        return wait * q_n / cap_n
    t_wait = q_n / cap_n + q_j / cap_j
    t_exc = work / cap_j - work / cap_n
    return wait * t_wait + w_comm * comm + w_exc * t_exc


def overload_oracle(q, service, q_max, eps=1e-6):
    q_next = min(max(0.0, q - service) + 1.0, q_max)
    return -math.log(max(eps, (q_max - q_next) / q_max)) / 3.0


def gae_bruteforce(r, v, v_last, gamma, lam, dones):
    n = len(r)
    nxt = list(v[1:]) + [v_last]
    delta = [r[t] + gamma * nxt[t] * (1 - dones[t]) - v[t] for t in range(n)]
    adv = np.zeros(n)
    for t in range(n):
        s, w = 0.0, 1.0
        for l in range(t, n):
            s += w * delta[l]
            if dones[l]:
                break
            w *= gamma * lam
        adv[t] = s
    return adv


def dueling_oracle(v, adv, mask):
    out = []
    for vi, ai, mi in zip(v, adv, mask):
        allowed = [a for a, m in zip(ai, mi) if m]
        mean = sum(allowed) / len(allowed)
        out.append([vi + a - mean if m else -np.inf for a, m in zip(ai, mi)])
    return np.array(out)


def coefficient_oracle(steps: dict) -> dict:
    """Exact step-proportional weights as fractions."""
    total = sum(steps.values())
    return {a: Fraction(s, total) for a, s in steps.items()}


def aggregate_oracle(weights, deltas: dict, steps: dict, server_lr):
    """w + lr * sum_i (s_i / sum s) * delta_i, accumulated one agent at a time in id order."""
    coeffs = coefficient_oracle(steps)
    out = [np.array(w, dtype=float, copy=True) for w in weights]
    for a in sorted(deltas):
        for w, d in zip(out, deltas[a]):
            w += server_lr * float(coeffs[a]) * np.asarray(d)
    return out
