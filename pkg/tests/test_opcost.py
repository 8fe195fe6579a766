import math

import pytest
from hypothesis import given, strategies as st

from lightplan import opcost
from lightplan.config import ModelSpec, Policy, WorkloadSpec, parse_config

from conftest import FIXTURES

TOY = ModelSpec(l=2, h1=8, h2=16, n_q=4, n_kv=2, n_e=4, k=2, dt_w=2, dt_kv=2)


def test_attention_counts():
    p = opcost.attn_decode_profile(TOY, 1, 10)
    assert (p.flops, p.bytes_cpu) == (320, 160)
    assert p.intensity("cpu") == 2.0
    p2 = opcost.attn_decode_profile(TOY, 2, 10)
    assert (p2.flops, p2.bytes_cpu) == (640, 320)
    assert p2.intensity("cpu") == 2.0


def test_ffn_counts():
    p = opcost.moe_ffn_profile(TOY, 1, 0.0)
    assert p.flops == 1536
    assert p.bytes_link == 3072
    assert p.intensity("link") == 0.5
    assert opcost.moe_ffn_profile(TOY, 4, 0.0).intensity("link") == 2.0
    resident = opcost.moe_ffn_profile(TOY, 4, 1.0)
    assert resident.bytes_link == 0
    assert resident.intensity("link") == math.inf


def test_projection_counts():
    pre, post = opcost.proj_profiles(TOY, 1)
    assert pre.flops == 256
    assert post.flops == 128
    with pytest.raises(ValueError):
        opcost.proj_profiles(TOY, 0)


def test_transfer_sizes():
    assert opcost.layer_weight_bytes(TOY) == 3520
    cpu_attn = Policy(N=8, mu=4, A_g=False, F_g=True)
    sizes = opcost.transfer_sizes(TOY, cpu_attn, 10)
    assert sizes.d3 == 3520
    assert sizes.d2 == 64
    assert sizes.d1 == 4 * 16 * 2
    assert sizes.d4 == 0
    gpu_attn = Policy(N=8, mu=4, A_g=True, F_g=True, r_w=1.0, r_c=0.25)
    sizes = opcost.transfer_sizes(TOY, gpu_attn, 10)
    assert (sizes.d1, sizes.d2, sizes.d3) == (0, 0, 0)
    assert sizes.d4 == 0.75 * 640


def test_cpu_ffn_streams_only_dense_weights():
    p = Policy(N=4, mu=4, A_g=False, F_g=False, r_w=0.0)
    assert opcost.transfer_sizes(TOY, p, 10).d3 == 3520 - 4 * 384 * 2


def test_memory_totals():
    wl = WorkloadSpec(s=10, n=4)
    t = opcost.memory_totals(TOY, wl, 8)
    assert t.w_total == 7040
    assert t.kv_total == 8 * 14 * 2 * 2 * 2 * 2 * 2 == 3584
    assert opcost.memory_totals(TOY, wl, 0).kv_total == 0


def test_large_moe_expert_bytes():
    _, model, wl, _ = parse_config(str(FIXTURES / "mixtral8x22b.cfg"))
    expert = opcost.memory_totals(model, wl, 1).expert_total
    assert expert == 56 * 8 * 3 * 6144 * 16384 * 2 == 270_582_939_648
    assert expert > 256 * 10**9


def test_profile_arithmetic():
    a = opcost.OpProfile(1, 2, 3, 4)
    assert a + a == a.scaled(2) == opcost.OpProfile(2, 4, 6, 8)


models = st.builds(
    lambda n_kv, g, d, h2, n_e, k, dt: ModelSpec(l=1, h1=n_kv * g * d, h2=h2, n_q=n_kv * g, n_kv=n_kv,
                                                 n_e=n_e, k=min(k, n_e), dt_w=dt, dt_kv=dt),
    st.integers(1, 8), st.integers(1, 8), st.integers(1, 256), st.integers(1, 20000),
    st.integers(1, 64), st.integers(1, 8), st.sampled_from([1, 2, 4]))


@given(models, st.integers(1, 512), st.integers(1, 16), st.integers(1, 8192))
def test_profiles_scale_linearly(model, mu, c, ctx):
    for make in (lambda m: opcost.attn_decode_profile(model, m, ctx),
                 lambda m: opcost.proj_profiles(model, m)[0],
                 lambda m: opcost.proj_profiles(model, m)[1]):
        assert make(c * mu).flops == c * make(mu).flops
    assert opcost.moe_ffn_profile(model, c * mu).flops == c * opcost.moe_ffn_profile(model, mu).flops


@given(models, st.integers(1, 512), st.integers(1, 8192))
def test_attention_intensity_is_batch_invariant(model, mu, ctx):
    a = opcost.attn_decode_profile(model, mu, ctx)
    b = opcost.attn_decode_profile(model, 2 * mu, ctx)
    assert a.intensity("cpu") == b.intensity("cpu")


@given(models, st.integers(1, 1024), st.floats(0, 0.99))
def test_ffn_link_intensity_grows_with_batch(model, mu, r_w):
    lo = opcost.moe_ffn_profile(model, mu, r_w).intensity("link")
    hi = opcost.moe_ffn_profile(model, mu + 1, r_w).intensity("link")
    assert hi > lo
