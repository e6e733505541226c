"""Self-contained verification suites: oracles, invariants, gradient checks.

Each suite returns a :class:`SuiteResult` with the worst observed error and
its tolerance. ``run_all`` drives them for the CLI. ``inject_fault`` names a
suite whose computation gets deliberately perturbed — a test hook proving the
harness detects violations; never set it in production runs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import blocks as B
from . import metrics as M
from . import network as N
from . import tensor as T
from .blocks import ParamRegistry
from .fourier import (
    amplitude_phase,
    dft2_naive,
    from_amplitude_phase,
    irfft2,
    rfft2,
    spectrum_to_complex,
)
from .gradcheck import check_gradients
from .tensor import Tensor

__all__ = ["SuiteResult", "run_all", "SUITES", "fft_oracle_suite", "gradient_suite",
           "metric_identity_suite", "block_invariant_suite"]

FFT_SIZES = (4, 8, 16, 32)
FFT_TOL = 1e-9


@dataclass
class SuiteResult:
    name: str
    passed: bool
    max_err: float
    tol: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        msg = f"[{status}] {self.name}: max_err={self.max_err:.3e} tol={self.tol:.0e}"
        return msg + (f" ({self.detail})" if self.detail else "")


def fft_oracle_suite(inject_fault: bool = False, cases_per_size: int = 7) -> SuiteResult:
    """rfft2 against the naive quadruple-loop DFT, round-trips, Parseval, polar."""
    rng = np.random.default_rng(20240501)
    worst = 0.0
    n_cases = 0
    for h in FFT_SIZES:
        for w in FFT_SIZES:
            for _ in range(cases_per_size):
                x = rng.standard_normal((h, w))
                spec = rfft2(Tensor(x[None, None]))
                got = spectrum_to_complex(spec)[0, 0]
                if inject_fault and n_cases == 0:
                    got = got + 1e-6
                ref = spectrum_to_complex(dft2_naive(x))[..., : w // 2 + 1]
                worst = max(worst, float(np.abs(got - ref).max()))

                back = irfft2(spec).data[0, 0]
                worst = max(worst, float(np.abs(back - x).max()))

                full = spectrum_to_complex(dft2_naive(x))
                parseval = abs((x * x).sum() - (np.abs(full) ** 2).sum() / (h * w))
                worst = max(worst, float(parseval))

                amp, pha = amplitude_phase(spec)
                spec2 = from_amplitude_phase(amp, pha, w)
                worst = max(worst, float(np.abs(spec2.re.data - spec.re.data).max()))
                worst = max(worst, float(np.abs(spec2.im.data - spec.im.data).max()))
                n_cases += 1
    return SuiteResult("fft_oracle", worst < FFT_TOL, worst, FFT_TOL, f"{n_cases} cases")


def _weighted_sum(out: Tensor, rng: np.random.Generator) -> Tensor:
    wts = Tensor(rng.standard_normal(out.data.shape))
    return T.sum_all(T.mul(out, wts))


def _grad_check_block(builder, rng) -> float:
    """builder -> (loss_fn, tensors); returns max rel error."""
    loss_fn, tensors = builder(rng)
    return check_gradients(loss_fn, tensors, rng, n_coords=4)


def _spatial_block_case(rng):
    reg = ParamRegistry(np.float64)
    p = B.init_spatial_block(reg, rng, "blk", 2, 3)
    x = Tensor(rng.standard_normal((1, 2, 4, 4)), requires_grad=True)
    wts = rng.standard_normal((1, 3, 4, 4))

    def loss_fn():
        out = B.spatial_encoder_block(x, p, train=True)
        return T.sum_all(T.mul(out, Tensor(wts)))

    return loss_fn, [x, *reg.params.values()]


def _frequency_block_case(rng):
    reg = ParamRegistry(np.float64)
    p = B.init_frequency_block(reg, rng, "blk", 2, 3)
    x = Tensor(rng.standard_normal((1, 2, 4, 4)), requires_grad=True)
    wts = rng.standard_normal((1, 3, 4, 4))

    def loss_fn():
        out = B.frequency_encoder_block(x, p, train=True)
        return T.sum_all(T.mul(out, Tensor(wts)))

    return loss_fn, [x, *reg.params.values()]


def _cross_attention_case(rng):
    reg = ParamRegistry(np.float64)
    p = B.init_cross_attention(reg, rng, "blk", 2, 4)
    fs = Tensor(rng.standard_normal((1, 2, 4, 4)), requires_grad=True)
    ff = Tensor(rng.standard_normal((1, 2, 4, 4)), requires_grad=True)
    wts = rng.standard_normal((1, 2, 4, 4))

    def loss_fn():
        out = B.cross_attention_fuse(fs, ff, p, bins=(1, 2), train=True)
        return T.sum_all(T.mul(out, Tensor(wts)))

    return loss_fn, [fs, ff, *reg.params.values()]


def _tci_case(rng):
    reg = ParamRegistry(np.float64)
    p = B.init_tci(reg, rng, "blk", 3, 4)
    # random (not zero-init) upsample so its gradient path is exercised
    p.up_w.data = rng.standard_normal(p.up_w.data.shape)
    x = Tensor(rng.standard_normal((1, 3, 8, 8)), requires_grad=True)
    wts = rng.standard_normal((1, 3, 8, 8))

    def loss_fn():
        out = B.tci_forward(x, p, train=True)
        return T.sum_all(T.mul(out, Tensor(wts)))

    return loss_fn, [x, *reg.params.values()]


def _fourier_chain_case(rng):
    x = Tensor(rng.standard_normal((1, 1, 8, 8)), requires_grad=True)
    gain = Tensor(1.0 + 0.1 * rng.standard_normal((1, 1, 8, 5)))
    wts = rng.standard_normal((1, 1, 8, 8))

    def loss_fn():
        spec = rfft2(x)
        amp, pha = amplitude_phase(spec)
        out = irfft2(from_amplitude_phase(T.mul(amp, gain), pha, 8))
        return T.sum_all(T.mul(out, Tensor(wts)))

    return loss_fn, [x]


BLOCK_CASES = {
    "spatial_block": _spatial_block_case,
    "frequency_block": _frequency_block_case,
    "cross_attention": _cross_attention_case,
    "tci": _tci_case,
    "fourier_chain": _fourier_chain_case,
}

BLOCK_GRAD_TOL = 1e-5
NET_GRAD_TOL = 1e-4


def toy_network_case(rng, n_coords_total: int = 200):
    cfg = N.SpiroNetConfig(input_size=8, stages=2, base_channels=4, precision="f64")
    params = N.build(cfg, rng_seed=7)
    x = Tensor(rng.standard_normal((2, 1, 8, 8)), requires_grad=True)
    gt = (rng.random((2, 1, 8, 8)) > 0.5).astype(np.float64)

    def loss_fn():
        return N.loss_bce(N.forward(params, x, train=True), gt)

    tensors = [x, *params.parameters()]
    per_tensor = max(1, math.ceil(n_coords_total / len(tensors)))
    return loss_fn, tensors, per_tensor


def gradient_suite(inject_fault: bool = False) -> SuiteResult:
    rng = np.random.default_rng(20240502)
    worst_block = 0.0
    details = []
    for name, case in BLOCK_CASES.items():
        err = _grad_check_block(case, rng)
        if inject_fault and name == "spatial_block":
            err += 1.0
        worst_block = max(worst_block, err)
        details.append(f"{name}={err:.2e}")
    loss_fn, tensors, per_tensor = toy_network_case(rng)
    net_err = check_gradients(loss_fn, tensors, rng, n_coords=per_tensor)
    details.append(f"toy_net={net_err:.2e}")
    passed = worst_block < BLOCK_GRAD_TOL and net_err < NET_GRAD_TOL
    return SuiteResult(
        "gradients", passed, max(worst_block, net_err), NET_GRAD_TOL, "; ".join(details)
    )


def metric_identity_suite(inject_fault: bool = False, n_cases: int = 1000) -> SuiteResult:
    rng = np.random.default_rng(20240503)
    worst = 0.0
    for _ in range(n_cases):
        c = M.ConfusionCounts(*(int(v) for v in rng.integers(0, 500, size=4)))
        f1v = M.f1(c)
        iouv = M.iou(c)
        if inject_fault:
            f1v += 1e-6
        worst = max(worst, abs(f1v - 2 * iouv / (1 + iouv)))
    hand = [
        (M.ConfusionCounts(4, 0, 12, 0), {"sen": 1.0, "f1": 1.0, "iou": 1.0, "mcc": 1.0}),
        (
            M.ConfusionCounts(1, 1, 1, 1),
            {"sen": 0.5, "f1": 0.5, "iou": 1.0 / 3.0, "mcc": 0.0},
        ),
        (M.ConfusionCounts(0, 3, 0, 3), {"sen": 0.0, "f1": 0.0, "iou": 0.0, "mcc": -1.0}),
    ]
    for c, want in hand:
        got = M.all_metrics(c)
        for k, v in want.items():
            worst = max(worst, abs(got[k] - v))
    return SuiteResult("metric_identities", worst < 1e-12, worst, 1e-12, f"{n_cases} tables")


def _zero_freq_block(cin: int) -> B.FrequencyBlockParams:
    """Frequency block with zeroed filters and an identity channel conv."""
    reg = ParamRegistry(np.float64)
    rng = np.random.default_rng(0)
    p = B.init_frequency_block(reg, rng, "z", cin, cin)
    for stack in (p.amp1, p.pha1):
        stack.conv.w.data[...] = 0.0
        stack.conv.b.data[...] = 0.0
    for conv in (p.amp2, p.pha2):
        conv.w.data[...] = 0.0
        conv.b.data[...] = 0.0
    p.chan.w.data[...] = 0.0
    for i in range(cin):
        p.chan.w.data[i, i, 0, 0] = 1.0
    p.chan.b.data[...] = 0.0
    return p


def block_invariant_suite(inject_fault: bool = False) -> SuiteResult:
    rng = np.random.default_rng(20240504)
    worst = 0.0
    details = []

    # Degenerate frequency block: zero filters + identity channel conv == 2x input.
    x = Tensor(rng.standard_normal((2, 3, 8, 8)))
    out = B.frequency_encoder_block(x, _zero_freq_block(3), train=False)
    err = float(np.abs(out.data - 2 * x.data).max())
    if inject_fault:
        err += 1.0
    worst = max(worst, err)
    details.append(f"freq_2x={err:.2e}")

    # Attention rows are stochastic.
    reg = ParamRegistry(np.float64)
    pca = B.init_cross_attention(reg, rng, "ca", 3, 4)
    fs = Tensor(rng.standard_normal((2, 3, 8, 8)))
    ff = Tensor(rng.standard_normal((2, 3, 8, 8)))
    scores = T.softmax_rows(
        Tensor(rng.standard_normal((2, 64, 5)))
    )
    err = float(np.abs(scores.data.sum(axis=-1) - 1.0).max())
    worst = max(worst, err)
    if scores.data.min() <= 0:
        worst = max(worst, 1.0)
    _ = B.cross_attention_fuse(fs, ff, pca, bins=(1, 2), train=False)
    details.append(f"attn_rows={err:.2e}")

    # Adjacency symmetry/diagonal and Laplacian spectrum on a dense-eigen oracle.
    for c in (2, 4, 8, 16):
        e = Tensor(np.abs(rng.standard_normal((1, c, 6))))
        adj = B.cosine_adjacency(e)
        asym = float(np.abs(adj.data - adj.data.swapaxes(-1, -2)).max())
        diag = float(np.abs(np.diagonal(adj.data, axis1=1, axis2=2) - 1.0).max())
        lap = B.improved_laplacian(adj)
        lsym = float(np.abs(lap.data - lap.data.swapaxes(-1, -2)).max())
        norm_adj = np.eye(c) - lap.data[0]
        eig = np.linalg.eigvalsh(norm_adj)
        eig_excess = float(max(0.0, eig.max() - 1.0, -1.0 - eig.min()))
        worst = max(worst, asym, diag, lsym, eig_excess)
    details.append(f"graph_c16(eig_excess)={eig_excess:.2e}")

    # TCI residual identity at theta=0 with zero-init upsample.
    reg2 = ParamRegistry(np.float64)
    ptci = B.init_tci(reg2, rng, "tci", 4, 4)
    ptci.theta.data[...] = 0.0
    xin = Tensor(rng.standard_normal((1, 4, 8, 8)))
    out = B.tci_forward(xin, ptci, train=False)
    err = float(np.abs(out.data - xin.data).max())
    worst = max(worst, err)
    details.append(f"tci_identity={err:.2e}")

    # Single-channel graph term vanishes.
    reg3 = ParamRegistry(np.float64)
    p1 = B.init_tci(reg3, rng, "tci1", 1, 4)
    x1 = Tensor(rng.standard_normal((1, 1, 8, 8)))
    lap1 = B.improved_laplacian(
        B.channel_cosine_adjacency(T.reshape(T.maxpool2d(x1, 4, 4), (1, 1, 4)), p1.embed_w, p1.embed_b)
    )
    worst = max(worst, float(np.abs(lap1.data).max()))

    tol = 1e-9
    return SuiteResult("block_invariants", worst < tol, worst, tol, "; ".join(details))


SUITES = {
    "fft_oracle": fft_oracle_suite,
    "gradients": gradient_suite,
    "metric_identities": metric_identity_suite,
    "block_invariants": block_invariant_suite,
}


def run_all(inject_fault: str | None = None) -> list[SuiteResult]:
    results = []
    for name, suite in SUITES.items():
        try:
            results.append(suite(inject_fault=(inject_fault == name)))
        except Exception as exc:  # a crash is a failure, not an abort
            results.append(SuiteResult(name, False, math.inf, 0.0, f"exception: {exc}"))
    return results
