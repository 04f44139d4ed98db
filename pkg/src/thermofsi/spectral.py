"""Fourier differentiation on uniform periodic grids.

Operators are returned as dense real matrices so they can act on complex
arrays as well (needed for complex-step Hessians).
"""
import numpy as np


def wavenumbers(n):
    return np.fft.fftfreq(n, d=1.0 / n)


def diff_symbol(n, order):
    """Symbol (ik)^order with the Nyquist mode removed for odd orders."""
    k = wavenumbers(n)
    sym = (1j * k) ** order
    if order % 2 == 1 and n % 2 == 0:
        sym[n // 2] = 0.0
    return sym


def diff_matrix(n, order):
    """Dense real matrix of the order-th periodic derivative on [0, 2pi)."""
    if order == 0:
        return np.eye(n)
    sym = diff_symbol(n, order)
    eye = np.eye(n)
    mat = np.fft.ifft(sym[:, None] * np.fft.fft(eye, axis=0), axis=0)
    return np.ascontiguousarray(mat.real)


class PeriodicGrid:
    """Uniform tensor grid on the m-torus with spectral derivative matrices.

    Nodes are ordered with the first parameter varying slowest.
    """

    def __init__(self, n, m=1):
        if m not in (1, 2):
            raise ValueError("surface dimension must be 1 or 2")
        self.n = int(n)
        self.m = m
        self.h = 2.0 * np.pi / self.n
        x = self.h * np.arange(self.n)
        if m == 1:
            self.params = x[:, None]
        else:
            x1, x2 = np.meshgrid(x, x, indexing="ij")
            self.params = np.stack([x1.ravel(), x2.ravel()], axis=1)
        self.size = self.params.shape[0]
        self.weight = self.h ** m
        self._cache = {}

    def _d1(self, order):
        key = ("1d", order)
        if key not in self._cache:
            self._cache[key] = diff_matrix(self.n, order)
        return self._cache[key]

    def partial(self, alpha):
        """Matrix of the mixed partial derivative with multi-index alpha."""
        alpha = tuple(alpha)
        if len(alpha) != self.m:
            raise ValueError("multi-index length must equal m")
        key = ("p", alpha)
        if key not in self._cache:
            if self.m == 1:
                mat = self._d1(alpha[0])
            else:
                mat = np.kron(self._d1(alpha[0]), self._d1(alpha[1]))
            self._cache[key] = mat
        return self._cache[key]

    def first(self, i):
        alpha = [0] * self.m
        alpha[i] += 1
        return self.partial(alpha)

    def second(self, i, j):
        alpha = [0] * self.m
        alpha[i] += 1
        alpha[j] += 1
        return self.partial(alpha)

    def smoothing_matrix(self, order):
        """Symmetric PSD matrix S with x.S.x = sum over |alpha|=order of
        multinomial(alpha) * |d^alpha x|^2 (the full tensor norm)."""
        key = ("s", order)
        if key not in self._cache:
            mat = self.apply_smoothing(np.eye(self.size), order)
            self._cache[key] = 0.5 * (mat + mat.T)
        return self._cache[key]

    def smoothing_symbol(self, order):
        key = ("sym", order)
        if key not in self._cache:
            k = wavenumbers(self.n)
            if order % 2 == 1 and self.n % 2 == 0:
                k1 = k.copy()
                k1[self.n // 2] = 0.0
            else:
                k1 = k
            if self.m == 1:
                sym = np.abs(k1) ** (2 * order)
            else:
                # sum over alpha of multinomial * kx^(2 a1) ky^(2 a2), with the
                # Nyquist row/column dropped wherever the derivative is odd
                from math import comb
                sym = np.zeros((self.n, self.n))
                for a1 in range(order + 1):
                    a2 = order - a1
                    kx = k.copy() if a1 % 2 == 0 else k1
                    ky = k.copy() if a2 % 2 == 0 else k1
                    sym += comb(order, a1) * np.outer(kx ** (2 * a1), ky ** (2 * a2))
            self._cache[key] = sym
        return self._cache[key]

    def apply_smoothing(self, x, order):
        """Apply the symmetric smoothing operator through the FFT.

        Works on real or complex input (real and imaginary parts are
        processed separately) with an optional leading batch axis."""
        x = np.asarray(x)
        if np.iscomplexobj(x):
            return self.apply_smoothing(x.real, order) + 1j * self.apply_smoothing(x.imag, order)
        sym = self.smoothing_symbol(order)
        shape = x.shape
        grid_shape = (self.n,) * self.m
        y = x.reshape(shape[:-1] + grid_shape)
        axes = tuple(range(-self.m, 0))
        out = np.fft.ifftn(sym * np.fft.fftn(y, axes=axes), axes=axes).real
        return out.reshape(shape)

    def derivative_fft(self, x, order, axis=0):
        """Order-th derivative along one parameter through the FFT."""
        x = np.asarray(x)
        if np.iscomplexobj(x):
            return self.derivative_fft(x.real, order, axis) + 1j * self.derivative_fft(x.imag, order, axis)
        shape = x.shape
        y = x.reshape(shape[:-1] + (self.n,) * self.m)
        sym = diff_symbol(self.n, order)
        ax = -self.m + axis
        bshape = [1] * self.m
        bshape[axis] = self.n
        out = np.fft.ifft(sym.reshape(bshape) * np.fft.fft(y, axis=ax), axis=ax).real
        return out.reshape(shape)

    def integrate(self, values):
        return self.weight * np.sum(values, axis=0)


def trig_interpolate(values, t):
    """Evaluate the trigonometric interpolant of periodic 1D samples at t."""
    values = np.asarray(values, dtype=float)
    n = values.size
    coef = np.fft.fft(values) / n
    k = wavenumbers(n)
    t = np.atleast_1d(np.asarray(t, dtype=float))
    phase = np.exp(1j * np.outer(t, k))
    if n % 2 == 0:
        # split the Nyquist mode symmetrically so the result is real
        nyq = n // 2
        phase[:, nyq] = np.cos(nyq * t)
    return (phase @ coef).real
