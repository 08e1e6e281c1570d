import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from diffma.ssm import (
    DiscretizedSSM,
    SSMParams,
    build_kernel,
    discretize_zoh,
    kernel_scan,
    recurrent_scan,
    s4d_real_A,
    selective_params,
)

from fd import RTOL, autograd_grads, central_fd, relative_error

f64 = torch.float64


def naive_scan(a, b, c, x):
    """Brute-force double loop over channels and time: a, b, c [L, D, N], x [L, D]."""
    L, D, N = a.shape
    y = np.zeros((L, D))
    for d in range(D):
        h = np.zeros(N)
        for t in range(L):
            h = a[t, d] * h + b[t, d] * x[t, d]
            y[t, d] = float(np.dot(c[t, d], h))
    return y


def lti(a, b, c, L):
    """Time-invariant discretized SSM from per-channel [D, N] arrays."""
    rep = lambda v: torch.as_tensor(v, dtype=f64).unsqueeze(0).expand(L, *np.shape(v)).contiguous()
    return DiscretizedSSM(rep(a), rep(b), rep(c))


# --- discretize_zoh -------------------------------------------------------


def _params(A, B, delta):
    t = lambda v: torch.tensor(v, dtype=f64)
    return SSMParams(A=t([[A]]), B=t([[B]]), C=t([[1.0]]), delta=t([[delta]]))


def test_zoh_halving():
    d = discretize_zoh(_params(-1.0, 1.0, math.log(2)))
    assert d.A_bar.item() == pytest.approx(0.5, abs=1e-15)
    assert d.B_bar.item() == pytest.approx(0.6931471805599453, abs=1e-15)


def test_zoh_zero_delta():
    d = discretize_zoh(_params(-3.7, 2.5, 0.0))
    assert d.A_bar.item() == 1.0
    assert d.B_bar.item() == 0.0


def test_zoh_zero_A():
    d = discretize_zoh(_params(0.0, 1.0, 0.3))
    assert d.A_bar.item() == 1.0
    assert d.B_bar.item() == pytest.approx(0.3)


def test_zoh_C_unchanged_and_shapes():
    L, D, N = 5, 3, 4
    A = s4d_real_A(D, N, f64)
    B = torch.randn(L, N, dtype=f64)
    C = torch.randn(L, N, dtype=f64)
    d = discretize_zoh(SSMParams(A, B, C, torch.rand(L, D, dtype=f64)))
    assert d.A_bar.shape == d.B_bar.shape == d.C_bar.shape == (L, D, N)
    assert torch.equal(d.C_bar[:, 1], C)


def test_zoh_stable_range():
    A = s4d_real_A(8, 16, f64)
    d = discretize_zoh(SSMParams(A, torch.ones(10, 16, dtype=f64), torch.ones(10, 16, dtype=f64),
                                 torch.rand(10, 8, dtype=f64) * 5 + 1e-3))
    assert (d.A_bar > 0).all() and (d.A_bar <= 1).all()


@pytest.mark.parametrize("field", ["A", "B", "C", "delta"])
def test_zoh_rejects_non_finite(field):
    kw = dict(A=torch.tensor([[-1.0]]), B=torch.tensor([[1.0]]), C=torch.tensor([[1.0]]), delta=torch.tensor([[0.1]]))
    kw[field] = torch.tensor([[float("nan")]])
    with pytest.raises(ValueError, match=field):
        discretize_zoh(SSMParams(**kw))


# --- selective_params ------------------------------------------------------


def test_selective_softplus_zero():
    L, D, N = 4, 3, 2
    x = torch.randn(L, D, dtype=f64)
    p = selective_params(x, s4d_real_A(D, N, f64), torch.randn(N, D, dtype=f64), torch.randn(N, D, dtype=f64),
                         torch.zeros(D, D, dtype=f64), torch.zeros(D, dtype=f64))
    assert torch.allclose(p.delta, torch.full((L, D), math.log(2), dtype=f64), atol=1e-15)


def test_selective_softplus_asymptote():
    D = 3
    x = torch.randn(2, D, dtype=f64)
    p = selective_params(x, s4d_real_A(D, 2, f64), torch.zeros(2, D, dtype=f64), torch.zeros(2, D, dtype=f64),
                         torch.zeros(D, D, dtype=f64), torch.full((D,), 20.0, dtype=f64))
    assert (p.delta - 20.0).abs().max() < 1e-6
    # softplus(20) - 20 = log1p(e^-20) < 1e-8
    assert math.log1p(math.exp(-20)) < 1e-8


def test_selective_zero_input():
    L, D, N = 6, 4, 3
    x = torch.zeros(L, D)
    p = selective_params(x, s4d_real_A(D, N), torch.zeros(N, D), torch.zeros(N, D),
                         (torch.zeros(2, D), torch.zeros(D, 2)), torch.zeros(D))
    assert torch.equal(p.B, torch.zeros(L, N)) and torch.equal(p.C, torch.zeros(L, N))


def test_selective_low_rank_delta_matches_full():
    L, D, N, R = 5, 6, 3, 2
    x = torch.randn(L, D, dtype=f64)
    down, up = torch.randn(R, D, dtype=f64), torch.randn(D, R, dtype=f64)
    args = (s4d_real_A(D, N, f64), torch.randn(N, D, dtype=f64), torch.randn(N, D, dtype=f64))
    bias = torch.randn(D, dtype=f64)
    a = selective_params(x, *args, (down, up), bias)
    b = selective_params(x, *args, up @ down, bias)
    assert torch.allclose(a.delta, b.delta, atol=1e-12)


def test_selective_shape_mismatch():
    with pytest.raises(ValueError):
        selective_params(torch.randn(4, 5), s4d_real_A(5, 2), torch.randn(2, 3), torch.randn(2, 5),
                         torch.randn(5, 5), torch.zeros(5))


@settings(max_examples=50, deadline=None)
@given(st.floats(-1e6, 1e6), st.floats(-1e3, 1e3))
def test_selective_delta_positive(xval, bias):
    D = 2
    x = torch.full((3, D), xval, dtype=f64)
    p = selective_params(x, s4d_real_A(D, 2, f64), torch.ones(2, D, dtype=f64), torch.ones(2, D, dtype=f64),
                         torch.eye(D, dtype=f64) * 0.5, torch.full((D,), bias, dtype=f64))
    assert (p.delta > 0).all()


# --- recurrent_scan --------------------------------------------------------


def test_recurrent_memoryless():
    L, D, N = 7, 2, 3
    b, c = torch.rand(D, N, dtype=f64), torch.rand(D, N, dtype=f64)
    d = lti(torch.zeros(D, N), b, c, L)
    x = torch.randn(L, D, dtype=f64)
    expected = x * (b * c).sum(-1)
    assert torch.allclose(recurrent_scan(d, x), expected, atol=1e-14)


def test_recurrent_prefix_sum():
    L = 10
    d = lti(np.ones((1, 1)), np.ones((1, 1)), np.ones((1, 1)), L)
    x = torch.arange(1, L + 1, dtype=f64).reshape(L, 1)
    assert torch.equal(recurrent_scan(d, x), torch.cumsum(x, 0))


def test_recurrent_matches_naive_oracle():
    rng = np.random.default_rng(0)
    L, D, N = 16, 3, 4
    a = rng.uniform(-0.99, 0.99, (L, D, N))
    b = rng.standard_normal((L, D, N))
    c = rng.standard_normal((L, D, N))
    x = rng.standard_normal((L, D))
    d = DiscretizedSSM(*(torch.from_numpy(v) for v in (a, b, c)))
    y = recurrent_scan(d, torch.from_numpy(x)).numpy()
    assert np.abs(y - naive_scan(a, b, c, x)).max() < 1e-10


def test_recurrent_float32_storage_uses_wide_accumulator():
    rng = np.random.default_rng(1)
    L, D, N = 64, 2, 4
    a = rng.uniform(0.9, 0.999, (L, D, N))
    b, c, x = rng.standard_normal((L, D, N)), rng.standard_normal((L, D, N)), rng.standard_normal((L, D))
    d = DiscretizedSSM(*(torch.from_numpy(v) for v in (a, b, c)))
    y32 = recurrent_scan(d, torch.from_numpy(x).float())
    assert y32.dtype == torch.float32
    assert np.abs(y32.double().numpy() - naive_scan(a, b, c, x)).max() < 1e-4


def test_recurrent_initial_state_and_batch():
    L, D, N = 5, 2, 3
    d = lti(torch.full((D, N), 0.5), torch.ones(D, N), torch.ones(D, N), L)
    x = torch.zeros(2, L, D, dtype=f64)
    h0 = torch.ones(D, N, dtype=f64)
    y, h = recurrent_scan(d, x, h0=h0, return_state=True)
    assert torch.allclose(y[0, :, 0], torch.tensor([1.5, 0.75, 0.375, 0.1875, 0.09375], dtype=f64))
    assert h.shape == (2, D, N)


def test_recurrent_shape_check():
    d = lti(torch.zeros(2, 3), torch.ones(2, 3), torch.ones(2, 3), 4)
    with pytest.raises(ValueError):
        recurrent_scan(d, torch.zeros(5, 2))


def test_stability_long_sequence():
    torch.manual_seed(0)
    L, D, N = 4096, 4, 8
    A = s4d_real_A(D, N, f64)
    delta = torch.rand(L, D, dtype=f64) * 0.5 + 0.01
    B = torch.randn(L, N, dtype=f64)
    d = discretize_zoh(SSMParams(A, B, torch.ones(L, N, dtype=f64), delta))
    x = torch.rand(L, D, dtype=f64) * 2 - 1
    _, h = recurrent_scan(d, x, return_state=True)
    bound = N * d.B_bar.abs().max() / (1 - d.A_bar.max())
    # track every state, not only the last
    a, bx = d.A_bar, d.B_bar * x.unsqueeze(-1)
    hmax, h = 0.0, torch.zeros(D, N, dtype=f64)
    for t in range(L):
        h = a[t] * h + bx[t]
        hmax = max(hmax, h.abs().max().item())
    assert np.isfinite(hmax) and hmax <= bound


# --- kernel path -----------------------------------------------------------


def test_kernel_example():
    d = lti(np.full((1, 1), 0.5), np.ones((1, 1)), np.ones((1, 1)), 3)
    k = build_kernel(d)
    assert torch.allclose(k.K[:, 0], torch.tensor([1.0, 0.5, 0.25], dtype=f64), atol=1e-15)
    y = kernel_scan(k, torch.tensor([[1.0], [0.0], [0.0]], dtype=f64))
    assert torch.allclose(y[:, 0], torch.tensor([1.0, 0.5, 0.25], dtype=f64), atol=1e-14)


def test_kernel_memoryless():
    b, c = torch.rand(2, 3, dtype=f64), torch.rand(2, 3, dtype=f64)
    k = build_kernel(lti(torch.zeros(2, 3), b, c, 6))
    assert torch.allclose(k.K[0], (b * c).sum(-1))
    assert (k.K[1:] == 0).all()
    x = torch.randn(6, 2, dtype=f64)
    assert torch.allclose(kernel_scan(k, x), x * (b * c).sum(-1), atol=1e-14)


def test_kernel_entries_are_powers():
    rng = np.random.default_rng(3)
    a, b, c = rng.uniform(0, 1, (2, 3)), rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
    k = build_kernel(lti(a, b, c, 5)).K.numpy()
    for i in range(5):
        assert np.allclose(k[i], (c * a**i * b).sum(-1), atol=1e-14)


def test_kernel_rejects_time_varying():
    d = DiscretizedSSM(torch.rand(4, 2, 3), torch.rand(4, 2, 3), torch.rand(4, 2, 3))
    with pytest.raises(ValueError, match="time-invariant"):
        build_kernel(d)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 8), st.integers(1, 64), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_recurrent_equals_kernel(N, L, D, seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(1e-3, 0.999, (D, N))
    b, c = rng.standard_normal((D, N)), rng.standard_normal((D, N))
    x = torch.from_numpy(rng.standard_normal((L, D)))
    d = lti(a, b, c, L)
    assert (recurrent_scan(d, x) - kernel_scan(build_kernel(d), x)).abs().max() < 1e-10
    # standard precision
    d32 = DiscretizedSSM(d.A_bar.float(), d.B_bar.float(), d.C_bar.float())
    y32 = recurrent_scan(d32, x.float())
    k32 = kernel_scan(build_kernel(d32), x.float())
    assert (y32 - k32).abs().max() < 1e-5 * max(1.0, y32.abs().max().item())


# --- gradients -------------------------------------------------------------


def _selective_setup(seed, L=6, D=3, N=2):
    g = torch.Generator().manual_seed(seed)
    r = lambda *s: torch.randn(*s, generator=g, dtype=f64)
    x = r(L, D).requires_grad_()
    w_B = (0.5 * r(N, D)).requires_grad_()
    w_C = (0.5 * r(N, D)).requires_grad_()
    w_delta = 0.3 * r(D, D)
    bias = (0.3 * r(D)).requires_grad_()
    A = s4d_real_A(D, N, f64)
    probe = r(L, D)

    def f():
        p = selective_params(x, A, w_B, w_C, w_delta, bias)
        return (recurrent_scan(discretize_zoh(p), x) * probe).sum()

    return f, [x, w_B, w_C, bias]


@pytest.mark.parametrize("seed", range(5))
def test_scan_gradients_match_finite_differences(seed):
    f, tensors = _selective_setup(seed)
    grads = autograd_grads(f, tensors)
    for t, g in zip(tensors, grads):
        assert relative_error(g, central_fd(f, t)) < RTOL
