import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from scalenc.autodiff import Tensor

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def t64(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, dtype=np.float64)


def naive_conv(x, w, stride=1, dil=(1, 1)):
    """Direct loop convolution with zero same-padding; output side ceil(in / stride)."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ch, cw = kh // 2, kw // 2
    ho, wo = -(-h // stride), -(-wd // stride)
    out = np.zeros((n, o, ho, wo))
    for b in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ic in range(c):
                        for di in range(kh):
                            for dj in range(kw):
                                r = i * stride + (di - ch) * dil[0]
                                q = j * stride + (dj - cw) * dil[1]
                                if 0 <= r < h and 0 <= q < wd:
                                    acc += x[b, ic, r, q] * w[oc, ic, di, dj]
                    out[b, oc, i, j] = acc
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
