"""2D Fourier transforms with gradients, plus a naive-DFT verification oracle.

Conventions: the forward transform is unnormalized, X(u,v) = sum_h sum_w
x(h,w) exp(-j*2*pi*(u*h/H + v*w/W)); the inverse carries the 1/(H*W) factor.
The fast path is a row-column radix-2 transform, so spatial dims must be
powers of two. Real input spectra are stored Hermitian-reduced along the last
axis (width W//2 + 1) together with the width needed to invert them.

Phase is the four-quadrant angle in (-pi, pi], defined as 0 at zero amplitude.
The phase gradient is masked to zero for bins with amplitude below
``PHASE_GRAD_EPS``: the 1/amplitude factor in d(phase)/d(re, im) is singular
there.
"""
from __future__ import annotations

import cmath
from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, accumulate_grad, make_op

__all__ = [
    "ComplexSpectrum",
    "rfft2",
    "irfft2",
    "amplitude_phase",
    "from_amplitude_phase",
    "dft2_naive",
    "spectrum_to_complex",
    "PHASE_GRAD_EPS",
]

PHASE_GRAD_EPS = 1e-6

_REV_CACHE: dict[int, np.ndarray] = {}
_TW_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def _bit_reversal(n: int) -> np.ndarray:
    perm = _REV_CACHE.get(n)
    if perm is None:
        bits = n.bit_length() - 1
        idx = np.arange(n)
        perm = np.zeros(n, dtype=np.intp)
        for _ in range(bits):
            perm = (perm << 1) | (idx & 1)
            idx >>= 1
        _REV_CACHE[n] = perm
    return perm


def _twiddle(m: int, sign: int, dtype: np.dtype) -> np.ndarray:
    key = (m, sign, dtype.char)
    tw = _TW_CACHE.get(key)
    if tw is None:
        tw = np.exp(sign * 2j * np.pi * np.arange(m // 2) / m).astype(dtype)
        _TW_CACHE[key] = tw
    return tw


def _fft1_last(a: np.ndarray, inverse: bool) -> np.ndarray:
    """Unnormalized radix-2 transform over the last axis (length power of two)."""
    n = a.shape[-1]
    if n == 1:
        return a.copy()
    sign = 1 if inverse else -1
    x = np.ascontiguousarray(a[..., _bit_reversal(n)])
    rows = x.size // n
    tbuf = np.empty((rows, n // 2), dtype=x.dtype)  # reused twiddled-half scratch
    m = 2
    while m <= n:
        half = m // 2
        tw = _twiddle(m, sign, x.dtype)
        xv = x.reshape(rows, n // m, m)
        t = tbuf.reshape(rows, n // m, half)
        np.multiply(xv[..., half:], tw, out=t)
        # order matters: the subtraction reads the untouched low half first
        np.subtract(xv[..., :half], t, out=xv[..., half:])
        xv[..., :half] += t
        m *= 2
    return x


def _fft_cols(a: np.ndarray, inverse: bool) -> np.ndarray:
    """Unnormalized transform over the second-to-last axis."""
    out = _fft1_last(np.ascontiguousarray(a.swapaxes(-1, -2)), inverse)
    return np.ascontiguousarray(out.swapaxes(-1, -2))


def _fft2(a: np.ndarray, inverse: bool) -> np.ndarray:
    """Unnormalized 2-D transform over the last two axes."""
    return _fft_cols(_fft1_last(a, inverse), inverse)


def _complex_dtype(real_dtype: np.dtype) -> np.dtype:
    return np.dtype(np.complex64) if real_dtype == np.float32 else np.dtype(np.complex128)


def _check_pow2_hw(h: int, w: int, op: str) -> None:
    if not (_is_pow2(h) and _is_pow2(w)):
        raise ShapeError(f"{op}: spatial dims ({h}, {w}) must be powers of two")


@dataclass
class ComplexSpectrum:
    """Paired real/imaginary buffers of a frequency-domain feature map."""

    re: Tensor
    im: Tensor
    origin_width: int

    def __post_init__(self):
        if self.re.data.shape != self.im.data.shape:
            raise ShapeError(
                f"spectrum re/im shapes differ: {self.re.data.shape} vs {self.im.data.shape}"
            )
        wf = self.re.data.shape[-1]
        if wf not in (self.origin_width, self.origin_width // 2 + 1):
            raise ShapeError(
                f"spectrum width {wf} inconsistent with origin width {self.origin_width}"
            )

    @property
    def shape(self) -> tuple[int, ...]:
        return self.re.data.shape

    @property
    def reduced(self) -> bool:
        return self.re.data.shape[-1] == self.origin_width // 2 + 1


def spectrum_to_complex(spec: ComplexSpectrum) -> np.ndarray:
    return spec.re.data.astype(np.float64) + 1j * spec.im.data.astype(np.float64)


def _take_leading(t: Tensor, i: int, op: str) -> Tensor:
    out_data = t.data[i]

    def backward(g):
        buf = np.zeros_like(t.data)
        buf[i] = g
        accumulate_grad(t, buf)

    return make_op(out_data, (t,), backward, op)


def rfft2(x: Tensor) -> ComplexSpectrum:
    """Hermitian-reduced 2-D transform of a real NCHW map, per (batch, channel)."""
    if x.data.ndim != 4:
        raise ShapeError(f"rfft2: input must be 4-D, got {x.data.shape}")
    h, w = x.data.shape[-2:]
    _check_pow2_hw(h, w, "rfft2")
    wf = w // 2 + 1
    cdt = _complex_dtype(x.data.dtype)
    # row transform over the full width, then columns only on the kept half
    rows = _fft1_last(x.data.astype(cdt), inverse=False)
    red = _fft_cols(np.ascontiguousarray(rows[..., :wf]), inverse=False)
    stacked_data = np.stack([red.real, red.imag]).astype(x.data.dtype)

    def backward(g):
        # Adjoint of (slice o DFT) on a real input: pad the complex gradient
        # back to full width and take the real part of the unnormalized
        # inverse transform (columns first while still reduced).
        gc = g[0].astype(cdt) + 1j * g[1].astype(cdt)
        gcols = _fft_cols(gc, inverse=True)
        gfull = np.zeros(x.data.shape, dtype=cdt)
        gfull[..., :wf] = gcols
        gx = _fft1_last(gfull, inverse=True).real
        accumulate_grad(x, gx.astype(x.data.dtype, copy=False))

    stacked = make_op(stacked_data, (x,), backward, "rfft2")
    return ComplexSpectrum(
        re=_take_leading(stacked, 0, "rfft2.re"),
        im=_take_leading(stacked, 1, "rfft2.im"),
        origin_width=w,
    )


def irfft2(spec: ComplexSpectrum) -> Tensor:
    """Real inverse of rfft2 (1/(H*W)-normalized)."""
    if not spec.reduced:
        raise ShapeError("irfft2: expected a Hermitian-reduced spectrum")
    re, im = spec.re, spec.im
    h = re.data.shape[-2]
    w = spec.origin_width
    _check_pow2_hw(h, w, "irfft2")
    wf = w // 2 + 1
    cdt = _complex_dtype(re.data.dtype)
    z = re.data.astype(cdt) + 1j * im.data.astype(cdt)
    # Inverse over rows (H) first while the width is still reduced; after that
    # pass, Hermitian completion is a plain conjugate mirror along W.
    tmp = _fft_cols(z, inverse=True)
    full = np.zeros(z.shape[:-1] + (w,), dtype=cdt)
    full[..., :wf] = tmp
    if w > wf:
        iv = np.arange(w - wf, 0, -1)
        full[..., wf:] = np.conj(tmp[..., iv])
    out_data = (_fft1_last(full, inverse=True).real / (h * w)).astype(re.data.dtype)

    # Interior columns appear twice in the full spectrum (once conjugated), so
    # their adjoint weight is 2; the self-mirrored columns v=0 and v=W/2 get 1.
    weights = np.full(wf, 2.0)
    weights[0] = 1.0
    if w > 1:
        weights[w // 2] = 1.0

    def backward(g):
        rows = _fft1_last(g.astype(cdt), inverse=False)
        f = _fft_cols(np.ascontiguousarray(rows[..., :wf]), inverse=False)
        f *= weights / (h * w)
        accumulate_grad(re, f.real.astype(re.data.dtype, copy=False))
        accumulate_grad(im, f.imag.astype(im.data.dtype, copy=False))

    return make_op(out_data, (re, im), backward, "irfft2")


def amplitude_phase(spec: ComplexSpectrum) -> tuple[Tensor, Tensor]:
    """Polar decomposition: amplitude sqrt(re^2+im^2) and phase atan2(im, re)."""
    re, im = spec.re, spec.im
    amp_data = np.hypot(re.data, im.data)
    pha_data = np.arctan2(im.data, re.data)

    nz = amp_data > 0

    def backward_amp(g):
        gre = np.zeros_like(re.data)
        gim = np.zeros_like(im.data)
        np.divide(g * re.data, amp_data, out=gre, where=nz)
        np.divide(g * im.data, amp_data, out=gim, where=nz)
        accumulate_grad(re, gre)
        accumulate_grad(im, gim)

    grad_ok = amp_data >= PHASE_GRAD_EPS

    def backward_pha(g):
        inv2 = np.zeros_like(amp_data)
        np.divide(1.0, amp_data * amp_data, out=inv2, where=grad_ok)
        accumulate_grad(re, -g * im.data * inv2)
        accumulate_grad(im, g * re.data * inv2)

    amp = make_op(amp_data, (re, im), backward_amp, "amplitude")
    pha = make_op(pha_data, (re, im), backward_pha, "phase")
    return amp, pha


def from_amplitude_phase(amp: Tensor, pha: Tensor, origin_width: int) -> ComplexSpectrum:
    """Rebuild re = amp*cos(pha), im = amp*sin(pha)."""
    if amp.data.shape != pha.data.shape:
        raise ShapeError(f"from_amplitude_phase: shapes {amp.data.shape} vs {pha.data.shape}")
    c = np.cos(pha.data)
    s = np.sin(pha.data)
    re_data = amp.data * c
    im_data = amp.data * s

    def backward_re(g):
        accumulate_grad(amp, g * c)
        accumulate_grad(pha, -g * im_data)

    def backward_im(g):
        accumulate_grad(amp, g * s)
        accumulate_grad(pha, g * re_data)

    re = make_op(re_data, (amp, pha), backward_re, "polar_re")
    im = make_op(im_data, (amp, pha), backward_im, "polar_im")
    return ComplexSpectrum(re=re, im=im, origin_width=origin_width)


def dft2_naive(x) -> ComplexSpectrum:
    """Full-width DFT of one 2-D slice by the direct quadruple loop (oracle only)."""
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if arr.ndim != 2:
        raise ShapeError(f"dft2_naive: expected a 2-D slice, got {arr.shape}")
    h, w = arr.shape
    tu = [[cmath.exp(-2j * cmath.pi * (u * hh % h) / h) for hh in range(h)] for u in range(h)]
    tv = [[cmath.exp(-2j * cmath.pi * (v * ww % w) / w) for ww in range(w)] for v in range(w)]
    rows = [[float(arr[hh, ww]) for ww in range(w)] for hh in range(h)]
    out = np.empty((h, w), dtype=np.complex128)
    for u in range(h):
        tu_u = tu[u]
        for v in range(w):
            tv_v = tv[v]
            acc = 0j
            for hh in range(h):
                row = rows[hh]
                e_u = tu_u[hh]
                for ww in range(w):
                    acc += row[ww] * e_u * tv_v[ww]
            out[u, v] = acc
    return ComplexSpectrum(
        re=Tensor(out.real.copy()), im=Tensor(out.imag.copy()), origin_width=w
    )
