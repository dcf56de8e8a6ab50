"""Independent high-precision reference computations shared by the tests."""

import mpmath as mp

mp.mp.dps = 40


def kl_value_derivative(v, q, c, tau, forward=True, h="1e-15"):
    """Central difference of the Bernoulli KL in V, evaluated in 40-digit arithmetic."""
    v, q, c, tau, h = (mp.mpf(x) for x in (v, q, c, tau, h))
    pq = mp.exp((q - c) / tau)

    def kl(vv):
        pv = mp.exp((vv - c) / tau)
        p, r = (pq, pv) if forward else (pv, pq)
        return p * mp.log(p / r) + (1 - p) * mp.log((1 - p) / (1 - r))

    return float((kl(v + h) - kl(v - h)) / (2 * h))


def surrogate(delta, tau):
    delta, tau = mp.mpf(delta), mp.mpf(tau)
    return float(tau * mp.expm1(delta / tau))


def finite_difference_check(f, flat, analytic, coords, step=1e-5):
    """Worst relative error between ``analytic`` and central differences of ``f`` at ``coords``.

    ``f`` maps the flat parameter vector to a scalar; ``flat`` is perturbed in place
    and restored.
    """
    worst = 0.0
    for i in coords:
        old = flat[i]
        flat[i] = old + step
        up = f()
        flat[i] = old - step
        down = f()
        flat[i] = old
        numeric = (up - down) / (2 * step)
        scale = max(abs(numeric), abs(analytic[i]), 1e-8)
        worst = max(worst, abs(numeric - analytic[i]) / scale)
    return worst
