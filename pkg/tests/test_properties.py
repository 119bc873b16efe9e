"""Property-based checks of the numeric and parsing invariants (1000 cases each)."""
import httpx
import numpy as np
import pytest
from hypothesis import HealthCheck, assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from splitflow.editing import (EditConfig, EditSchedule, aggregation_weights, check_vfa_inequality, flowedit_run,
                               splitflow_run)
from splitflow.fields import Condition, ConstantShiftField
from splitflow.latent import (channel_inner, channel_norm, cosine_similarity_map, noise_interpolate, project_onto)
from splitflow.metrics import energy_distance, mse, psnr, ssim
from splitflow.prompts import (LlmEndpointConfig, PromptPair, decompose_attributes, decompose_llm,
                               decompose_rule_based, format_numbered_list, parse_numbered_list)

MANY = settings(max_examples=1000, deadline=None, suppress_health_check=[HealthCheck.too_slow])
finite = st.floats(-100, 100, allow_nan=False, allow_infinity=False, width=64)
shapes = st.tuples(st.integers(1, 4), st.integers(1, 3), st.integers(1, 3))


@st.composite
def latent_pair(draw, n=2, shape=shapes):
    s = draw(shape)
    return [draw(arrays(np.float64, s, elements=finite)) for _ in range(n)]


@st.composite
def gaussian_latents(draw, n=2, shape=shapes):
    """Random normal latents seeded by hypothesis; avoids the sub-normal corner cases of raw float draws."""
    s = draw(shape)
    rng = np.random.default_rng(draw(st.integers(0, 2 ** 32 - 1)))
    scale = draw(st.sampled_from([1e-3, 1.0, 1e3]))
    return [scale * rng.standard_normal(s) for _ in range(n)]


# --- latent geometry ------------------------------------------------------------

@MANY
@given(latent_pair())
def test_projection_idempotent_and_contractive(xs):
    x, ref = xs
    p = project_onto(x, ref)
    scale = 1.0 + np.abs(x).max()
    np.testing.assert_allclose(project_onto(p, ref), p, atol=1e-12 * scale)
    assert np.all(channel_norm(p) <= channel_norm(x) + 1e-12 * scale)


@MANY
@given(latent_pair())
def test_projection_residual_orthogonal(xs):
    x, ref = xs
    p = project_onto(x, ref)
    ok = channel_norm(ref) > 1e-6
    resid = channel_inner(x - p, ref)
    bound = 1e-9 * (1.0 + channel_norm(x)) * (1.0 + channel_norm(ref))
    assert np.all(np.abs(resid[ok]) <= bound[ok])


@MANY
@given(latent_pair())
def test_channel_inner_symmetric(xs):
    a, b = xs
    assert np.array_equal(channel_inner(a, b), channel_inner(b, a))


@MANY
@given(latent_pair())
def test_cosine_bounded(xs):
    a, b = xs
    c = cosine_similarity_map(a, b)
    assert np.all((c >= -1.0) & (c <= 1.0))
    self_c = cosine_similarity_map(a, a)
    nonzero = channel_norm(a) > 1e-6
    np.testing.assert_allclose(self_c[nonzero], 1.0, atol=1e-12)


@MANY
@given(latent_pair(n=1), st.floats(0.0, 1.0))
def test_interpolating_a_latent_with_itself(xs, sigma):
    (x,) = xs
    np.testing.assert_allclose(noise_interpolate(x, x, sigma), x, rtol=1e-14, atol=1e-300)


@MANY
@given(latent_pair(), st.floats(0.0, 1.0))
def test_interpolation_endpoints_and_linearity(xs, sigma):
    x0, eps = xs
    assert np.array_equal(noise_interpolate(x0, eps, 0.0), x0)
    assert np.array_equal(noise_interpolate(x0, eps, 1.0), eps)
    mid = noise_interpolate(x0, eps, sigma)
    np.testing.assert_allclose(mid - x0, sigma * (eps - x0), atol=1e-12 * (1 + np.abs(xs).max()))


# --- consensus weights -----------------------------------------------------------

@MANY
@given(st.integers(1, 5).flatmap(lambda n: gaussian_latents(n=n)))
def test_weights_are_a_distribution(gs):
    w = aggregation_weights(gs)
    assert w.shape == (len(gs), *gs[0].shape[1:])
    assert np.all((w >= 0.0) & (w <= 1.0))
    np.testing.assert_allclose(w.sum(axis=0), 1.0, atol=1e-12)


@MANY
@given(st.integers(1, 5).flatmap(lambda n: gaussian_latents(n=n)))
def test_self_similarity_does_not_change_weights(gs):
    np.testing.assert_allclose(aggregation_weights(gs, include_self=True), aggregation_weights(gs), atol=1e-12)


@MANY
@given(st.integers(1, 5).flatmap(lambda n: gaussian_latents(n=n)), st.permutations(range(5)))
def test_weights_permute_with_inputs(gs, perm):
    perm = [p for p in perm if p < len(gs)]
    w = aggregation_weights(gs)
    np.testing.assert_allclose(aggregation_weights([gs[p] for p in perm]), w[perm], atol=1e-12)


@st.composite
def unit_vectors(draw):
    k = draw(st.integers(1, 8))
    d = draw(st.sampled_from([2, 3, 16, 128]))
    rng = np.random.default_rng(draw(st.integers(0, 2 ** 32 - 1)))
    g = rng.standard_normal((k, d))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


@MANY
@given(unit_vectors())
def test_consensus_weighting_never_loses_alignment(g):
    m = check_vfa_inequality(g)
    assert m.margin >= -1e-9
    assert m.gibbs >= -1e-9 and m.jensen >= -1e-9


# --- metrics ---------------------------------------------------------------------

@MANY
@given(latent_pair())
def test_mse_symmetric_nonnegative(xs):
    a, b = xs
    assert mse(a, b) == mse(b, a) >= 0.0


@MANY
@given(st.integers(1, 20), st.integers(1, 20), st.integers(1, 4), st.integers(0, 2 ** 32 - 1))
def test_energy_distance_symmetric_nonnegative(na, nb, d, seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((na, d))
    b = rng.standard_normal((nb, d)) + rng.uniform(-2, 2)
    ed = energy_distance(a, b)
    assert ed >= -1e-9
    assert ed == pytest.approx(energy_distance(b, a), abs=1e-12)


@MANY
@given(gaussian_latents(n=2), st.floats(1e-3, 1.0), st.floats(1.01, 10.0))
def test_psnr_decreases_with_error(xs, t, factor):
    a, d = xs
    assume(np.any(d != 0))
    assert psnr(a, a + t * d, peak=2.0) > psnr(a, a + factor * t * d, peak=2.0)


ssim_shapes = st.tuples(st.integers(1, 2), st.integers(7, 9), st.integers(7, 9))


@MANY
@given(gaussian_latents(n=2, shape=ssim_shapes))
def test_ssim_bounds(xs):
    a, b = xs
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    assert -1.0 - 1e-12 <= ssim(a, b) <= 1.0 + 1e-12
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)


# --- prompt parsing --------------------------------------------------------------

item_text = st.text(st.characters(whitelist_categories=("L", "N"), whitelist_characters=" ,'-"),
                    min_size=1, max_size=40).map(lambda s: " ".join(s.split())).filter(bool)


@MANY
@given(st.lists(item_text, min_size=1, max_size=12))
def test_numbered_list_round_trip(items):
    assert parse_numbered_list(format_numbered_list(items)) == items


@MANY
@given(st.lists(item_text, min_size=1, max_size=6), st.text(st.characters(blacklist_characters="0123456789\r\n\x1c\x1d\x1e\x85  \x0b\x0c"), max_size=30))
def test_numbered_list_ignores_prose(items, prose):
    text = f"{prose}\n{format_numbered_list(items)}\n{prose}"
    assert parse_numbered_list(text) == items


@st.composite
def attribute_task(draw):
    sizes = draw(st.lists(st.integers(1, 4), min_size=1, max_size=6))
    layout, start = [], 0
    for s in sizes:
        layout.append((start, start + s))
        start += s
    src_vals = [draw(st.integers(0, s - 1)) for s in sizes]
    tgt_vals = [draw(st.integers(0, s - 1)) for s in sizes]
    assume(src_vals != tgt_vals)

    def emb(vals):
        e = np.zeros(start)
        for (a, _), v in zip(layout, vals):
            e[a + v] = 1.0
        return Condition(e)

    return layout, emb(src_vals), emb(tgt_vals), draw(st.one_of(st.none(), st.integers(1, 6)))


@MANY
@given(attribute_task())
def test_attribute_decomposition(task):
    layout, src, tgt, n_max = task
    changed = [(a, b) for a, b in layout if not np.array_equal(src.embedding[a:b], tgt.embedding[a:b])]
    res = decompose_attributes(src, tgt, layout, n_max)
    expect = len(changed) if n_max is None else min(len(changed), n_max)
    assert len(res) == expect and res.provenance == "attribute"
    swapped = []
    for sub in res.sub_prompts:
        own = [(a, b) for a, b in layout if not np.array_equal(sub.embedding[a:b], src.embedding[a:b])]
        assert own
        for a, b in own:
            assert np.array_equal(sub.embedding[a:b], tgt.embedding[a:b])
        swapped += own
    assert sorted(swapped) == sorted(changed)


@MANY
@given(st.lists(item_text, min_size=1, max_size=10), st.integers(1, 6))
def test_llm_reply_is_capped_in_order(items, n_max):
    reply = format_numbered_list(items)

    def handler(request):
        return httpx.Response(200, json={"choices": [{"message": {"content": reply}}]})

    with httpx.Client(transport=httpx.MockTransport(handler)) as client:
        res = decompose_llm(PromptPair("a", "b"), "psi1", LlmEndpointConfig("http://stub.invalid/v1"), n_max, client)
    assert res.sub_prompts == items[:n_max]


@MANY
@given(item_text, st.one_of(st.none(), st.integers(1, 5)))
def test_rule_splitter_contract(target, n_max):
    res = decompose_rule_based(PromptPair("source", target), n_max)
    assert 1 <= len(res) <= (n_max or len(res))
    assert all(p.strip() for p in res.sub_prompts)
    assert res.sub_prompts == decompose_rule_based(PromptPair("source", target), n_max).sub_prompts


# --- editing determinism and closed forms -------------------------------------------

@st.composite
def shift_task(draw):
    d = draw(st.integers(2, 4))
    shape = draw(st.tuples(st.integers(1, 3), st.integers(1, 2), st.integers(1, 2)))
    rng = np.random.default_rng(draw(st.integers(0, 2 ** 32 - 1)))
    fld = ConstantShiftField.from_shifts([rng.standard_normal(shape) for _ in range(d)], rng.standard_normal(shape))
    return fld, rng.standard_normal(shape), np.eye(d), draw(st.integers(0, 10 ** 6))


@MANY
@given(shift_task(), st.floats(0.0, 15.0), st.floats(0.0, 15.0))
def test_baseline_closed_form_for_constant_field(task, s_src, s_tgt):
    fld, x0, eye, seed = task
    sched = EditSchedule(10, 7, 3)
    cs, ct = Condition(eye[0]), Condition(eye[1])
    out = flowedit_run(fld, x0, cs, ct, sched, EditConfig(s_src, s_tgt, seed=seed))
    null = Condition.null(fld.cond_dim)

    def guided(c, w):
        vn = fld.velocity(x0, 0.5, null)
        return vn + w * (fld.velocity(x0, 0.5, c) - vn)

    expect = x0 + sched.sigma_start * (guided(cs, s_src) - guided(ct, s_tgt))
    np.testing.assert_allclose(out, expect, atol=1e-10 * (1 + np.abs(expect).max()))


@MANY
@given(shift_task(), st.sampled_from(["avg", "ltp", "vfa", "ltp+vfa"]))
def test_split_runs_deterministic(task, aggregation):
    fld, x0, eye, seed = task
    sched = EditSchedule(10, 7, 3)
    cfg = EditConfig(seed=seed)
    subs = [Condition(eye[k]) for k in range(1, len(eye))][:3]
    a, ra = splitflow_run(fld, x0, Condition(eye[0]), subs, Condition(eye[-1]), sched, cfg, aggregation)
    b, rb = splitflow_run(fld, x0, Condition(eye[0]), subs, Condition(eye[-1]), sched, cfg, aggregation)
    assert np.array_equal(a, b)
    assert ra.delta_evals == rb.delta_evals == sched.expected_delta_evals(len(subs))
