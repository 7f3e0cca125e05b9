import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dynorm import autodiff as ad
from dynorm import normalization as nz
from dynorm import tensor as T
from dynorm.layers import ConfigError, Scope
from oracles import block_diag_dense, channel_mean_var_loop, dnb_np, dnc_np, normalize_np, relu, se_np

EPS = 1e-5


def const(x):
    return ad.Tape(record=False).const(x)


def scope_for(params=None, buffers=None):
    return Scope(params or {}, buffers or {}, ad.Tape(record=False))


def rand_x(seed, shape=(8, 4, 3, 3)):
    rng = T.make_rng(seed)
    return T.normal(shape, rng, 0.0, 2.0) + T.normal((1, shape[1], 1, 1), rng)


# batch statistics and BN ------------------------------------------------------

def test_batch_stats():
    x = np.broadcast_to(np.array([1.0, -2.0])[None, :, None, None], (3, 2, 2, 2)).copy()
    m, v = nz.batch_stats(const(x))
    np.testing.assert_array_equal(m.value, [1.0, -2.0])
    np.testing.assert_array_equal(v.value, [0.0, 0.0])
    m, v = nz.batch_stats(const(np.array([1.0, 3.0]).reshape(2, 1, 1, 1)))
    assert m.value[0] == 2.0 and v.value[0] == 1.0
    x = rand_x(0)
    m, v = nz.batch_stats(const(x))
    lm, lv = channel_mean_var_loop(x)
    assert np.abs(m.value - lm).max() < 1e-12 and np.abs(v.value - lv).max() < 1e-12


def bn(x, gamma, beta, mode="train", buffers=None):
    params, bufs = nz.init_bn("bn", x.shape[1])
    params["bn/gamma"], params["bn/beta"] = np.asarray(gamma, float), np.asarray(beta, float)
    scope = scope_for(params, buffers if buffers is not None else bufs)
    return nz.bn_forward(scope, "bn", scope.const(x), mode).value, scope.buffers


def test_bn_hand_example():
    out, _ = bn(np.array([1.0, 3.0]).reshape(2, 1, 1, 1), [1.0], [0.0])
    expected = 1 / np.sqrt(1 + EPS)
    np.testing.assert_allclose(out.ravel(), [-expected, expected], rtol=0, atol=1e-15)
    assert abs(out.ravel()[1] - 0.999995) < 1e-6


def test_bn_affine():
    x = rand_x(1)
    m, v = x.mean(axis=(0, 2, 3)), x.var(axis=(0, 2, 3))
    x = (x - m[None, :, None, None]) / np.sqrt(v[None, :, None, None])
    out, _ = bn(x, [2.0] * 4, [5.0] * 4)
    xt = x / np.sqrt(1 + EPS)
    assert np.abs(out - (2 * xt + 5)).max() < 1e-12


def test_bn_running_update_uses_unbiased_variance():
    x = rand_x(2)
    _, bufs = bn(x, np.ones(4), np.zeros(4))
    n = 8 * 3 * 3
    lm, lv = channel_mean_var_loop(x)
    np.testing.assert_allclose(bufs["bn/running_mean"], 0.1 * lm, rtol=1e-12)
    np.testing.assert_allclose(bufs["bn/running_var"], 0.9 + 0.1 * lv * n / (n - 1), rtol=1e-12)


def test_bn_eval_independent_of_batch_composition():
    x = rand_x(3)
    bufs = {"bn/running_mean": T.normal((4,), T.make_rng(4)), "bn/running_var": T.uniform((4,), T.make_rng(5), 0.5, 2)}
    g, b = T.normal((4,), T.make_rng(6)), T.normal((4,), T.make_rng(7))
    full, after = bn(x, g, b, "eval", dict(bufs))
    assert all(after[k].tobytes() == bufs[k].tobytes() for k in bufs)
    perm = T.make_rng(8).permutation(8)
    permuted, _ = bn(x[perm], g, b, "eval", dict(bufs))
    for i, p in enumerate(perm):
        assert permuted[i].tobytes() == full[p].tobytes()
    bigger, _ = bn(np.concatenate([x, rand_x(9)]), g, b, "eval", dict(bufs))
    assert bigger[:8].tobytes() == full.tobytes()


def test_normalize_contract():
    for seed in range(10):
        x = rand_x(seed)
        xt, _, _ = nz.normalize(scope_for(buffers=nz.init_running("l", 4)), "l", const(x), "train")
        m, v = nz.batch_stats(xt)
        var = x.var(axis=(0, 2, 3))
        assert np.abs(m.value).max() < 1e-10
        assert np.abs(v.value - var / (var + EPS)).max() < 1e-10


# SE -----------------------------------------------------------------------------

def se_params(c, r, rng, zero=False):
    p = nz.init_se("l", c, r, rng)
    if zero:
        p = {k: np.zeros_like(v) for k, v in p.items()}
    return p


def test_se_zero_params_halves_input():
    x = rand_x(10)
    s = scope_for(se_params(4, 2, T.make_rng(0), zero=True))
    np.testing.assert_array_equal(nz.se_forward(s, "l", s.const(x)).value, x * 0.5)


def test_se_saturated_bias_passes_input():
    x = rand_x(11)
    p = se_params(4, 2, T.make_rng(0), zero=True)
    p["l/se.fc2.bias"] = np.full(4, 20.0)
    s = scope_for(p)
    assert np.abs(nz.se_forward(s, "l", s.const(x)).value - x).max() < 1e-7 * np.abs(x).max()


def test_se_matches_formula():
    x = rand_x(12)
    p = se_params(4, 2, T.make_rng(1))
    for k in ("l/se.fc1.bias", "l/se.fc2.bias"):
        p[k] = T.normal(p[k].shape, T.make_rng(2))
    s = scope_for(p)
    expected = se_np(x, p["l/se.fc1.weight"], p["l/se.fc1.bias"], p["l/se.fc2.weight"], p["l/se.fc2.bias"])
    assert np.abs(nz.se_forward(s, "l", s.const(x)).value - expected).max() < 1e-12


def _se_bn(x, p, mode="train"):
    params, bufs = nz.init_bn("l", x.shape[1])
    params.update(p)
    s = scope_for(params, bufs)
    return nz.se_bn_forward(s, "l", s.const(x), mode).value


def test_se_bn_with_unit_attention_is_bn():
    x = rand_x(13)
    p = se_params(4, 2, T.make_rng(0), zero=True)
    p["l/se.fc2.bias"] = np.full(4, 1e3)  # sigmoid saturates to exactly 1.0
    ref, _ = bn(x, np.ones(4), np.zeros(4))
    assert _se_bn(x, p).tobytes() == ref.tobytes()


def test_se_bn_constant_attention_cancels():
    x = rand_x(14)
    p = se_params(4, 2, T.make_rng(0), zero=True)
    p["l/se.fc2.bias"] = np.array([0.3, -1.0, 2.0, 0.0])
    ref, _ = bn(x, np.ones(4), np.zeros(4))
    # the cancellation is exact up to how eps scales with the attention
    assert np.abs(_se_bn(x, p) - ref).max() < 1e-4
    xs = x * 1e3
    ref, _ = bn(xs, np.ones(4), np.zeros(4))
    assert np.abs(_se_bn(xs, p) - ref).max() < 1e-9


def test_se_bn_per_sample_attention_differs():
    x = rand_x(15)
    p = se_params(4, 1, T.make_rng(3))
    ref, _ = bn(x, np.ones(4), np.zeros(4))
    assert np.abs(_se_bn(x, p) - ref).max() > 1e-3


# SC-Module ----------------------------------------------------------------------

def test_sc_config_groups_and_counts():
    assert nz.SCModuleConfig(8, 4, 1).groups == 2
    assert nz.SCModuleConfig(8, 4, 2).groups == 1
    assert nz.SCModuleConfig(8, 4, "oup").groups == 1
    assert nz.SCModuleConfig(16, 4, 8).group_width == 4
    # C*C/r + min(g', C/r)*2C + 2C, by hand for C=8, r=4
    assert nz.SCModuleConfig(8, 4, 1).param_count() == 16 + 16 + 16
    assert nz.SCModuleConfig(8, 4, 2).param_count() == 16 + 32 + 16
    assert nz.SCModuleConfig(8, 4, "oup").param_count() == 16 + 32 + 16
    for bad in [(8, 3, 1), (8, 0, 1), (12, 4, 2), (8, 4, 0), (8, 4, "x")]:
        with pytest.raises(ConfigError):
            nz.SCModuleConfig(*bad)


def sc_state(cfg, seed, identity=False):
    params, bufs = nz.init_dn("l", cfg, "dnb", T.make_rng(seed))
    if not identity:
        rng = T.make_rng((seed, 1))
        params = {k: v + T.normal(v.shape, rng, 0.0, 0.5) for k, v in params.items()}
    return params, bufs


def test_sc_identity_init():
    cfg = nz.SCModuleConfig(8, 4, 1)
    params, _ = sc_state(cfg, 0, identity=True)
    s = scope_for(params)
    a, l = nz.sc_module_forward(s, "l", s.const(T.normal((5, 8), T.make_rng(1))), cfg)
    np.testing.assert_array_equal(a.value, np.ones((5, 8)))
    np.testing.assert_array_equal(l.value, np.zeros((5, 8)))


@pytest.mark.parametrize("g", [1, 2, "oup"])
def test_sc_matches_dense_assembly(g):
    cfg = nz.SCModuleConfig(8, 2, g)
    params, _ = sc_state(cfg, 3)
    feats = T.normal((6, 8), T.make_rng(4))
    s = scope_for(params)
    a, l = nz.sc_module_forward(s, "l", s.const(feats), cfg)
    h = relu(feats @ params["l/fc1.weight"].T)
    out = h @ block_diag_dense(params["l/fc2.weight"], cfg.groups).T + params["l/fc2.bias"]
    assert np.abs(np.concatenate([a.value, l.value], axis=1) - out).max() < 1e-12
    if g == "oup":
        assert np.abs(out - (h @ params["l/fc2.weight"].T + params["l/fc2.bias"])).max() < 1e-12


# DN-B / DN-C ----------------------------------------------------------------------

def dn(x, params, bufs, cfg, variant, mode):
    s = scope_for(params, bufs)
    return nz.dn_forward(s, "l", s.const(x), cfg, variant, mode).value, s.buffers


@pytest.mark.parametrize("variant", nz.DN_VARIANTS)
def test_identity_reduces_to_bn(variant):
    cfg = nz.SCModuleConfig(4, 2, 1)
    x = rand_x(20)
    params, bufs = nz.init_dn("l", cfg, variant, T.make_rng(0))
    out, after = dn(x, params, dict(bufs), cfg, variant, "train")
    ref, ref_bufs = bn(x, np.ones(4), np.zeros(4))
    assert out.tobytes() == ref.tobytes()
    out, _ = dn(x, params, after, cfg, variant, "eval")
    ref, _ = bn(x, np.ones(4), np.zeros(4), "eval", {"bn/" + k[2:]: v for k, v in after.items()})
    assert out.tobytes() == ref.tobytes()


def test_dnb_matches_formula():
    cfg = nz.SCModuleConfig(4, 2, 1)
    x = rand_x(21)
    params, bufs = sc_state(cfg, 5)
    out, _ = dn(x, params, dict(bufs), cfg, "dnb", "train")
    ref = dnb_np(x, params["l/fc1.weight"], params["l/fc2.weight"], params["l/fc2.bias"], cfg.groups)
    assert np.abs(out - ref).max() < 1e-12
    rm, rv = T.normal((4,), T.make_rng(1)), T.uniform((4,), T.make_rng(2), 0.5, 2.0)
    out, _ = dn(x, params, {"l/running_mean": rm, "l/running_var": rv}, cfg, "dnb", "eval")
    ref = dnb_np(x, params["l/fc1.weight"], params["l/fc2.weight"], params["l/fc2.bias"], cfg.groups, rm, rv)
    assert np.abs(out - ref).max() < 1e-12


@pytest.mark.parametrize("variant", ["dnc-a", "dnc-b"])
@pytest.mark.parametrize("g", [1, "oup"])
def test_dnc_matches_formula(variant, g):
    cfg = nz.SCModuleConfig(4, 2, g)
    x = rand_x(22)
    params, bufs = nz.init_dn("l", cfg, variant, T.make_rng(0))
    rng = T.make_rng(1)
    params = {k: v + T.normal(v.shape, rng, 0.0, 0.5) for k, v in params.items()}
    out, _ = dn(x, params, dict(bufs), cfg, variant, "train")
    ref = dnc_np(x, {k[2:]: v for k, v in params.items()}, variant, cfg.groups)
    assert np.abs(out - ref).max() < 1e-12


@pytest.mark.parametrize("variant", ["dnc-a", "dnc-b"])
def test_dnc_constant_input_is_finite(variant):
    cfg = nz.SCModuleConfig(4, 2, 1)
    x = np.broadcast_to(np.arange(4.0)[None, :, None, None], (3, 4, 2, 2)).copy()
    params, bufs = nz.init_dn("l", cfg, variant, T.make_rng(0))
    out, _ = dn(x, params, dict(bufs), cfg, variant, "train")
    assert np.isfinite(out).all()
    np.testing.assert_array_equal(out, np.zeros_like(x))


def test_dnb_eval_per_sample_independent():
    cfg = nz.SCModuleConfig(4, 2, 1)
    params, _ = sc_state(cfg, 7)
    bufs = {"l/running_mean": T.normal((4,), T.make_rng(1)), "l/running_var": T.uniform((4,), T.make_rng(2), 0.5, 2)}
    x = rand_x(23)
    full, _ = dn(x, params, dict(bufs), cfg, "dnb", "eval")
    for i in range(8):
        single, _ = dn(x[i:i + 1], params, dict(bufs), cfg, "dnb", "eval")
        assert single.tobytes() == full[i:i + 1].tobytes()
    mixed, _ = dn(np.concatenate([x[3:4], rand_x(24)]), params, dict(bufs), cfg, "dnb", "eval")
    assert mixed[0].tobytes() == full[3].tobytes()


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_dnb_train_permutation_equivariance(seed):
    cfg = nz.SCModuleConfig(4, 2, 1)
    params, bufs = sc_state(cfg, seed % 1000)
    x = rand_x(seed)
    perm = T.make_rng(seed).permutation(8)
    out, _ = dn(x, params, dict(bufs), cfg, "dnb", "train")
    pout, _ = dn(x[perm], params, dict(bufs), cfg, "dnb", "train")
    assert np.abs(pout - out[perm]).max() < 1e-12


def test_dnb_gradcheck_all_groups():
    cfg = nz.SCModuleConfig(4, 2, 1)
    params, bufs = sc_state(cfg, 9)
    x = rand_x(25, (4, 4, 2, 2))
    proj = T.normal(x.shape, T.make_rng(26))

    def f(nodes):
        s = Scope({k: v for k, v in nodes.items() if k != "x"}, dict(bufs), nodes["x"].tape)
        return ad.reduce("sum", nz.dnb_forward(s, "l", nodes["x"], cfg, "train") * s.const(proj))
    errs = ad.grad_check_all(f, {"x": x, **params}, h=1e-4)
    assert set(errs) == {"x", "l/fc1.weight", "l/fc2.weight", "l/fc2.bias"}
    assert max(errs.values()) < 1e-4


def test_param_counts_match_init():
    for c in (8, 16, 64):
        for g in (1, 2, "oup"):
            cfg = nz.SCModuleConfig(c, 4, g)
            for variant in nz.DN_VARIANTS:
                params, _ = nz.init_dn("l", cfg, variant, T.make_rng(0))
                assert sum(v.size for v in params.values()) == nz.dn_param_count(cfg, variant)


def test_mode_is_validated():
    with pytest.raises(ValueError):
        bn(rand_x(0), np.ones(4), np.zeros(4), mode="training")
