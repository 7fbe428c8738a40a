"""Pure numpy versions of the compiled path loops; same signatures as ``_kernels``."""

import numpy as np


def _secant(base, step, slope, amp):
    half = 0.5 * step
    return slope + amp * np.cos(base + half) * np.sinc(half / np.pi)


def v_chain(x, noise, k0, theta_bar, sqrt_gamma, alpha, ratio, next_gamma, a, slope, amp,
            sigma):
    for s in range(noise.shape[0]):
        k = k0 + s
        g = next_gamma[k]
        c = np.clip(x, -a, a) * sqrt_gamma[k]
        coef = alpha[k] - sigma * ratio[k] * _secant(theta_bar[k], c, slope, amp)
        x += coef * x * g + np.sqrt(g) * noise[s]


def uv_chain(u, v, gap_sup, gap_stopped, exited, noise, k0, theta_bar, sqrt_gamma, alpha, ratio,
             next_gamma, beta, a, slope, amp, sigma):
    for s in range(noise.shape[0]):
        k = k0 + s
        g = next_gamma[k]
        rg = np.sqrt(g)
        cu = alpha[k] - sigma * ratio[k] * _secant(theta_bar[k], u * sqrt_gamma[k], slope, amp)
        cv = alpha[k] - sigma * ratio[k] * _secant(theta_bar[k], np.clip(v, -a, a) * sqrt_gamma[k],
                                                   slope, amp)
        u += cu * u * g + rg * noise[s] + beta[k]
        v += cv * v * g + rg * noise[s]
        d = np.abs(u - v)
        np.maximum(gap_sup, d, out=gap_sup)
        live = exited == 0
        gap_stopped[live] = np.maximum(gap_stopped[live], d[live])
        exited[live & (np.abs(v) >= a)] = 1


def em_cutoff(x, normals, cell, dt, theta_bar, sqrt_gamma, alpha, ratio, a, slope, amp, sigma,
              bound):
    blown = 0
    for j in range(normals.shape[0]):
        k = cell[j]
        live = np.abs(x) <= bound
        coef = alpha[k] - sigma * ratio[k] * _secant(theta_bar[k], np.clip(x, -a, a) * sqrt_gamma[k],
                                                     slope, amp)
        step = x + coef * x * dt[j] + sigma * np.sqrt(dt[j]) * normals[j]
        x[live] = step[live]
        blown += int(np.count_nonzero(live & (np.abs(x) > bound)))
    return blown


def em_linear(x, normals, lin, dt, sigma):
    for j in range(normals.shape[0]):
        x *= 1.0 + lin[j] * dt[j]
        x += sigma * np.sqrt(dt[j]) * normals[j]
