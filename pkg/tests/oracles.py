"""Independent reference implementations: plain loops, no shared code with the package."""

from __future__ import annotations

import math

import numpy as np


def cosine(u, v) -> float:
    return float(np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v)))


def nt_xent_brute(h, i: int, j: int, tau: float) -> float:
    num = math.exp(cosine(h[i], h[j]) / tau)
    den = sum(math.exp(cosine(h[i], h[k]) / tau) for k in range(len(h)) if k != i)
    return -math.log(num / den)


def batch_loss_brute(h, tau: float) -> float:
    """Mean over k of l(2k, 2k+1) + l(2k+1, 2k), divided by 2B."""
    n = len(h)
    total = 0.0
    for k in range(n // 2):
        total += nt_xent_brute(h, 2 * k, 2 * k + 1, tau) + nt_xent_brute(h, 2 * k + 1, 2 * k, tau)
    return total / n


def kl_monte_carlo(mu, sigma, n: int, rng: np.random.Generator) -> float:
    """E_q[log q(z) - log p(z)] for diagonal q = N(mu, sigma^2), p = N(0, I)."""
    mu, sigma = np.asarray(mu, float), np.asarray(sigma, float)
    z = mu + sigma * rng.standard_normal((n, len(mu)))
    log_q = -0.5 * (((z - mu) / sigma) ** 2) - np.log(sigma) - 0.5 * math.log(2 * math.pi)
    log_p = -0.5 * z**2 - 0.5 * math.log(2 * math.pi)
    return float(np.mean(np.sum(log_q - log_p, axis=1)))
