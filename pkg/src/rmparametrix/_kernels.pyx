# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled path loops for drifts m(theta) = slope*theta + amp*sin(theta)."""

from libc.math cimport cos, sin, sqrt, fabs


cdef inline double secant(double base, double step, double slope, double amp) nogil:
    cdef double half = 0.5 * step
    cdef double sc
    if fabs(half) < 1e-4:
        sc = 1.0 - half * half / 6.0
    else:
        sc = sin(half) / half
    return slope + amp * cos(base + half) * sc


cdef inline double clamp(double x, double a) nogil:
    if x > a:
        return a
    if x < -a:
        return -a
    return x


def v_chain(double[::1] x, const double[:, ::1] noise, Py_ssize_t k0,
            const double[::1] theta_bar, const double[::1] sqrt_gamma,
            const double[::1] alpha, const double[::1] ratio,
            const double[::1] next_gamma, double a, double slope, double amp,
            double sigma):
    """Advance V over noise.shape[0] steps starting at grid index k0 (noise holds xi)."""
    cdef Py_ssize_t steps = noise.shape[0], n = x.shape[0]
    cdef Py_ssize_t s, i, k
    cdef double v, c, coef, g, rg, tb, sg, al, ra
    with nogil:
        for s in range(steps):
            k = k0 + s
            tb = theta_bar[k]
            sg = sqrt_gamma[k]
            al = alpha[k]
            ra = sigma * ratio[k]
            g = next_gamma[k]
            rg = sqrt(g)
            for i in range(n):
                v = x[i]
                c = clamp(v, a) * sg
                coef = al - ra * secant(tb, c, slope, amp)
                x[i] = v + coef * v * g + rg * noise[s, i]


def uv_chain(double[::1] u, double[::1] v, double[::1] gap_sup, double[::1] gap_stopped,
             unsigned char[::1] exited,
             const double[:, ::1] noise, Py_ssize_t k0,
             const double[::1] theta_bar, const double[::1] sqrt_gamma,
             const double[::1] alpha, const double[::1] ratio,
             const double[::1] next_gamma, const double[::1] beta, double a,
             double slope, double amp, double sigma):
    """Shared-noise U (no cut-off, plus beta) and V.

    Tracks sup|U-V| over all steps, the same sup restricted to steps up to the
    first index with |V| >= a, and whether that index was reached.
    """
    cdef Py_ssize_t steps = noise.shape[0], n = u.shape[0]
    cdef Py_ssize_t s, i, k
    cdef double uu, vv, cu, cv, g, rg, tb, sg, al, ra, b, d
    with nogil:
        for s in range(steps):
            k = k0 + s
            tb = theta_bar[k]
            sg = sqrt_gamma[k]
            al = alpha[k]
            ra = sigma * ratio[k]
            g = next_gamma[k]
            rg = sqrt(g)
            b = beta[k]
            for i in range(n):
                uu = u[i]
                vv = v[i]
                cu = al - ra * secant(tb, uu * sg, slope, amp)
                cv = al - ra * secant(tb, clamp(vv, a) * sg, slope, amp)
                uu = uu + cu * uu * g + rg * noise[s, i] + b
                vv = vv + cv * vv * g + rg * noise[s, i]
                u[i] = uu
                v[i] = vv
                d = fabs(uu - vv)
                if d > gap_sup[i]:
                    gap_sup[i] = d
                if exited[i] == 0:
                    if d > gap_stopped[i]:
                        gap_stopped[i] = d
                    if fabs(vv) >= a:
                        exited[i] = 1


def em_cutoff(double[::1] x, const double[:, ::1] normals, const long[::1] cell,
              const double[::1] dt, const double[::1] theta_bar,
              const double[::1] sqrt_gamma, const double[::1] alpha,
              const double[::1] ratio, double a, double slope, double amp,
              double sigma, double bound):
    """Euler-Maruyama for dX = F_N(t, X) X dt + sigma dW. Returns the number of paths past `bound`."""
    cdef Py_ssize_t steps = normals.shape[0], n = x.shape[0]
    cdef Py_ssize_t j, i, k
    cdef Py_ssize_t blown = 0
    cdef double v, coef, h, sh, tb, sg, al, ra
    with nogil:
        for j in range(steps):
            k = cell[j]
            tb = theta_bar[k]
            sg = sqrt_gamma[k]
            al = alpha[k]
            ra = sigma * ratio[k]
            h = dt[j]
            sh = sigma * sqrt(h)
            for i in range(n):
                v = x[i]
                if fabs(v) > bound:
                    continue
                coef = al - ra * secant(tb, clamp(v, a) * sg, slope, amp)
                v = v + coef * v * h + sh * normals[j, i]
                if fabs(v) > bound:
                    blown += 1
                x[i] = v
    return blown


def em_linear(double[::1] x, const double[:, ::1] normals, const double[::1] lin,
              const double[::1] dt, double sigma):
    """Euler-Maruyama for dX = lin(t) X dt + sigma dW."""
    cdef Py_ssize_t steps = normals.shape[0], n = x.shape[0]
    cdef Py_ssize_t j, i
    cdef double h, sh, c
    with nogil:
        for j in range(steps):
            h = dt[j]
            c = 1.0 + lin[j] * h
            sh = sigma * sqrt(h)
            for i in range(n):
                x[i] = c * x[i] + sh * normals[j, i]
