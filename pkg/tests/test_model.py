from __future__ import annotations

import numpy as np
import pytest

from gdn import autograd as ag
from gdn.autograd import Tensor
from gdn.dsp import dwt_db6
from gdn.errors import DataError
from gdn.model import (
    GeneratorConfig, GeneratorOutput, GeneratorParams, decoder_forward, decoder_node, encoder_forward,
    generator_forward, loss, parameter_count, reconstruct_time,
)


def make(cfg, seed=0, dtype=np.float64):
    return GeneratorParams.init(cfg, np.random.default_rng(seed), dtype)


def warm_up(params, rng, batch=4):
    """One training-mode pass so batch-norm running statistics exist."""
    cfg = params.cfg
    x = rng.standard_normal((batch, cfg.k, cfg.length))
    generator_forward(x, x, params, training=True)


def test_default_encoder_lengths():
    cfg = GeneratorConfig()
    assert cfg.encoder_lengths() == [1255, 628, 314, 157, 79, 40, 20]
    assert cfg.flat_features == 320


def test_parameter_count_regression():
    cfg = GeneratorConfig()
    assert parameter_count(cfg) == 2_598_960
    assert make(cfg).n_parameters() == 2_598_960


@pytest.mark.parametrize("k,length", [(5, 1255), (10, 1255), (15, 1255), (20, 1255), (10, 1285)])
def test_shape_pipeline(rng, k, length):
    cfg = GeneratorConfig(k=k, length=length)
    p = make(cfg)
    x = rng.standard_normal((2, k, length))
    out = generator_forward(x, x, p, training=True)
    assert out.g_ca.shape == out.g_cd.shape == (2, length)
    single = generator_forward(x[0], x[1], p, training=False)
    assert single.g_ca.shape == (length,)
    assert parameter_count(cfg) == p.n_parameters()


def test_encoder_output_width(rng):
    cfg = GeneratorConfig()
    p = make(cfg)
    h = encoder_forward(rng.standard_normal((2, 10, 1255)), p, "ca", training=True)
    assert h.shape == (2, 300)


def test_encoder_rejects_wrong_shape(rng):
    p = make(GeneratorConfig(k=2, length=30, hidden=8))
    with pytest.raises(DataError):
        encoder_forward(rng.standard_normal((2, 3, 30)), p, "ca", training=True)
    with pytest.raises(DataError):
        decoder_forward(Tensor(np.zeros(7)), p, "ca")


def test_zero_input_gives_zero_hidden(tiny_cfg):
    p = make(tiny_cfg)
    h = encoder_forward(np.zeros((3, tiny_cfg.k, tiny_cfg.length)), p, "cd", training=True)
    np.testing.assert_array_equal(h.data, 0)


def test_zero_decoder_weights_give_zero(tiny_cfg, rng):
    p = make(tiny_cfg)
    for name, t in p.tensors.items():
        if name.startswith("dec_"):
            t.data[...] = 0
    out = decoder_forward(Tensor(rng.standard_normal(tiny_cfg.hidden)), p, "ca")
    np.testing.assert_array_equal(out.data, 0)


def test_decoder_node_with_identity_linears(rng):
    cfg = GeneratorConfig(k=2, length=30, hidden=8, dec_nodes=2)
    p = make(cfg)
    pre = "dec_ca.0."
    for n in ("lin1", "lin2"):
        p[pre + n + ".w"].data[...] = np.eye(8)
        p[pre + n + ".b"].data[...] = 0
    s = rng.standard_normal(8)
    out = decoder_node(Tensor(s), p, pre).data
    nrm = ag.layernorm(Tensor(s), cfg.ln_eps).data
    np.testing.assert_allclose(out, np.where(nrm > 0, 2 * nrm, 1.01 * nrm), atol=1e-14)


def test_fusion_ignores_cd_when_its_weight_is_zero(tiny_cfg, rng):
    p = make(tiny_cfg)
    warm_up(p, rng)
    p["omega1"].data[...] = 1.0
    p["omega2"].data[...] = 0.0
    a = rng.standard_normal((tiny_cfg.k, tiny_cfg.length))
    d = rng.standard_normal((tiny_cfg.k, tiny_cfg.length))
    base = generator_forward(a, d, p)
    moved = generator_forward(a, d + 5 * rng.standard_normal(d.shape), p)
    np.testing.assert_array_equal(base.g_ca.data, moved.g_ca.data)
    np.testing.assert_array_equal(base.g_cd.data, moved.g_cd.data)
    p["omega1"].data[...] = 0.0
    p["omega2"].data[...] = 0.7
    base = generator_forward(a, d, p)
    moved = generator_forward(a + 1.0, d, p)
    np.testing.assert_array_equal(base.g_ca.data, moved.g_ca.data)


def test_eval_forward_is_pure(tiny_cfg, rng):
    p = make(tiny_cfg)
    warm_up(p, rng)
    stats = {n: (s.running_mean.copy(), s.running_var.copy()) for n, s in p.bn.items()}
    x = rng.standard_normal((3, tiny_cfg.k, tiny_cfg.length))
    a = generator_forward(x, x, p)
    b = generator_forward(x, x, p)
    assert a.g_ca.data.tobytes() == b.g_ca.data.tobytes()
    for n, s in p.bn.items():
        np.testing.assert_array_equal(s.running_mean, stats[n][0])
        np.testing.assert_array_equal(s.running_var, stats[n][1])


def test_batch_matches_single_in_eval(tiny_cfg, rng):
    p = make(tiny_cfg)
    warm_up(p, rng)
    x = rng.standard_normal((3, tiny_cfg.k, tiny_cfg.length))
    batch = generator_forward(x, x, p).g_ca.data
    for i in range(3):
        np.testing.assert_allclose(generator_forward(x[i], x[i], p).g_ca.data, batch[i], atol=1e-12)


def test_reconstruct_from_true_coefficients(rng):
    x = rng.standard_normal(2500)
    ca, cd = dwt_db6(x)
    out = GeneratorOutput(Tensor(ca), Tensor(cd))
    assert np.max(np.abs(reconstruct_time(out, 2500) - x)) < 1e-8
    zero = GeneratorOutput(Tensor(np.zeros(1255)), Tensor(np.zeros(1255)))
    assert np.all(reconstruct_time(zero, 2500) == 0)
    rand = GeneratorOutput(Tensor(rng.standard_normal(1255)), Tensor(rng.standard_normal(1255)))
    y = reconstruct_time(rand, 2500)
    assert y.shape == (2500,) and np.all(np.isfinite(y))


def test_loss_values(rng):
    o_a, o_d = rng.standard_normal(30), rng.standard_normal(30)
    assert loss(GeneratorOutput(Tensor(o_a), Tensor(o_d)), o_a, o_d).item() == 0
    assert loss(GeneratorOutput(Tensor(o_a + 1), Tensor(o_d + 1)), o_a, o_d).item() == pytest.approx(2.0)


def test_copy_is_independent(tiny_cfg):
    p = make(tiny_cfg)
    q = p.copy()
    q["omega1"].data[...] = 3.0
    assert p["omega1"].item() == 0.5


def test_init_is_seeded(tiny_cfg):
    a, b, c = make(tiny_cfg, 1), make(tiny_cfg, 1), make(tiny_cfg, 2)
    assert all(np.array_equal(a[n].data, b[n].data) for n in a.tensors)
    assert not np.array_equal(a["proj_ca.w"].data, c["proj_ca.w"].data)
    assert a["omega1"].item() == a["omega2"].item() == 0.5


@pytest.mark.parametrize("seed", range(3))
def test_full_generator_gradcheck(tiny_cfg, seed):
    rng = np.random.default_rng(seed)
    p = make(tiny_cfg, seed)
    xa = rng.standard_normal((3, tiny_cfg.k, tiny_cfg.length))
    xd = rng.standard_normal((3, tiny_cfg.k, tiny_cfg.length))
    oa, od = rng.standard_normal((2, 3, tiny_cfg.length))
    rep = ag.gradcheck(lambda: loss(generator_forward(xa, xd, p, True), oa, od), p.tensors, max_entries=6, rng=rng)
    assert max(rep.values()) < 1e-3, {k: v for k, v in rep.items() if v >= 1e-3}
