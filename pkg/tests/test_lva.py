import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from lidarfuse.errors import ContractError
from lidarfuse.lva import VIEWS, LvaParams, fuse_views, view_adapt
from lidarfuse.tensor import Tensor, grad_check, grad_check_params
from lidarfuse.viewxform import ViewBundle


def random_lva(rng, c, bias_scale=0.3):
    p = LvaParams.init(rng, c)
    for t in p.named().values():
        t.data[...] += rng.normal(0, bias_scale, t.shape)
    return p


def run_oracle(p, fv, fr, fp):
    adapters = {v: (p.adapter_weight[v].data, p.adapter_bias[v].data) for v in VIEWS}
    return oracles.lva(fv, fr, fp, p.gate.data, p.global1_weight.data, p.global1_bias.data,
                       p.global2_weight.data, p.global2_bias.data, adapters)


@given(st.integers(1, 16), st.integers(1, 8), st.integers(0, 10_000))
def test_matches_loop_oracle(m, c, seed):
    rng = np.random.default_rng(seed)
    p = random_lva(rng, c)
    fv, fr, fp = (rng.normal(size=(m, c)) for _ in range(3))
    got = fuse_views(ViewBundle(Tensor(fv), Tensor(fr), Tensor(fp)), p)
    for g, ref in zip(got, run_oracle(p, fv, fr, fp)):
        np.testing.assert_allclose(g.data, ref, atol=1e-12, rtol=0)


def test_zero_adapters_are_bit_exact_identity(rng):
    p = random_lva(rng, 4)
    for v in VIEWS:
        p.adapter_weight[v].data[...] = 0.0
        p.adapter_bias[v].data[...] = 0.0
    feats = [rng.normal(size=(9, 4)) for _ in range(3)]
    out = fuse_views(ViewBundle(*(Tensor(f) for f in feats)), p)
    for o, f in zip(out, feats):
        assert np.array_equal(o.data, f)


def test_gradients(rng):
    p = random_lva(rng, 3)
    fv, fr, fp = (rng.normal(size=(5, 3)) for _ in range(3))

    def loss():
        a, b, c = fuse_views(ViewBundle(Tensor(fv), Tensor(fr), Tensor(fp)), p)
        return (a * b + c * c).sum()

    assert grad_check_params(loss, p.named(), 1e-6) < 1e-5
    f = lambda t: sum((o**2).sum() for o in fuse_views(ViewBundle(t, Tensor(fr), Tensor(fp)), p))
    assert grad_check(f, fv) < 1e-5


def test_errors(rng):
    p = LvaParams.zeros(2)
    with pytest.raises(ContractError):
        view_adapt(Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 2))), "image", p)
    with pytest.raises(ContractError):
        fuse_views(ViewBundle(*(Tensor(np.zeros((2, 3))) for _ in range(3))), p)
    with pytest.raises(ContractError):
        LvaParams(p.gate, p.global1_weight, p.global1_bias, p.global2_weight, p.global2_bias,
                  {"voxel": p.adapter_weight["voxel"]}, p.adapter_bias)
