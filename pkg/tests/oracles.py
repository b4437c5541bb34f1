"""Independent reference computations used by the tests.

Written directly from the formulas with exact rational arithmetic or plain
loops; nothing here imports the package under test.
"""
import math
from collections import Counter
from fractions import Fraction


def frac_start_point(N, T, t):
    n_s = min(max(Fraction(N) - t, 0), Fraction(N))
    t_s = min(max(Fraction(t) - N, 0), Fraction(T))
    return n_s, t_s


def frac_token_timestep(N, T, anchor, n, t):
    """Exact clipped point-slope value as a Fraction."""
    n_e, t_e = (Fraction(a) for a in anchor)
    n_s, t_s = frac_start_point(N, T, Fraction(t))
    val = (t_e - t_s) / (n_e - n_s) * (n - n_s) + t_s
    return min(max(val, Fraction(0)), Fraction(T))


def round_half_up(x: Fraction) -> int:
    return math.floor(x + Fraction(1, 2))


def sqrt_alpha_bar(T, t, offset=1e-4, floor=1e-5):
    return min(max(1.0 - math.sqrt(t / T + offset), floor), 1.0)


def one_step_posterior(alpha_bar, t):
    """Classical DDPM posterior for q(z_{t-1} | z_t, z_0) from the alpha table."""
    alpha_t = alpha_bar[t] / alpha_bar[t - 1]
    beta_t = 1.0 - alpha_t
    coef_zt = math.sqrt(alpha_t) * (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t])
    coef_z0 = math.sqrt(alpha_bar[t - 1]) * beta_t / (1.0 - alpha_bar[t])
    var = beta_t * (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t])
    return coef_zt, coef_z0, var


def brute_ngrams(seq, n):
    out = []
    for i in range(len(seq)):
        if i + n <= len(seq):
            out.append(tuple(seq[i:i + n]))
    return out


def brute_bleu(hyp, refs, max_n=4):
    """Add-one smoothed BLEU by explicit enumeration of n-grams."""
    if len(hyp) == 0:
        return 0.0
    logs = 0.0
    for n in range(1, max_n + 1):
        h = brute_ngrams(hyp, n)
        matched = 0
        for g in set(h):
            cap = max(brute_ngrams(r, n).count(g) for r in refs)
            matched += min(h.count(g), cap)
        logs += math.log((matched + 1) / (len(h) + 1))
    best = None
    for r in refs:
        key = (abs(len(r) - len(hyp)), len(r))
        if best is None or key < best:
            best = key
    r_len = best[1]
    bp = 1.0 if len(hyp) > r_len else math.exp(1 - r_len / len(hyp))
    return 100.0 * bp * math.exp(logs / max_n)


def counter_ngrams(seq, n):
    return Counter(brute_ngrams(seq, n))
