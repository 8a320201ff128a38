"""REBAR network: partial convolutions, RevIN, attention and the distance."""

import numpy as np
import pytest
import torch

from core.contrastive import label_candidates
from core.data import Subsequence
from core.masking import Mask, apply_mask, extended_mask_at, make_transient_mask
from core.rebar_net import (
    DilatedConvStack,
    argmin_index,
    build_rebar_model,
    dilated_conv_stack,
    masked_mse,
    partial_conv1d,
    rebar_distance,
    rebar_distances,
    rebar_forward,
    reconstruct_from_weights,
    revin_denormalize,
    revin_normalize,
    revin_stats,
)
from utils.config import RebarConfig
from utils.errors import ConfigError, InputValidationError, SizeError


def _subsequence(values, start=0) -> Subsequence:
    return Subsequence(values=np.asarray(values, dtype=np.float32), source_series_id="s", start_index=start)


def _random_subsequence(rng, length=16, channels=1) -> Subsequence:
    return _subsequence(rng.normal(size=(length, channels)))


def test_partial_conv_rescales_by_valid_taps():
    x = torch.tensor([[[2.0, 4.0, 6.0]]])
    missing = torch.tensor([[False, True, False]])
    out, out_missing = partial_conv1d(x, missing, torch.ones(1, 1, 3))
    assert out[0, 0, 1].item() == pytest.approx(12.0)
    assert not out_missing.any()


def test_partial_conv_with_no_valid_taps_outputs_zero_and_stays_missing():
    x = torch.tensor([[[5.0, 5.0, 5.0, 5.0, 5.0]]])
    missing = torch.tensor([[False, True, True, True, False]])
    out, out_missing = partial_conv1d(x, missing, torch.ones(1, 1, 1), torch.ones(1))
    assert out[0, 0, 2].item() == 0.0
    assert out_missing.tolist() == [[False, True, True, True, False]]
    assert out[0, 0, 0].item() == pytest.approx(6.0)


def test_revin_uses_unmasked_statistics_and_falls_back_when_all_masked():
    query = torch.tensor([[[1.0], [100.0], [3.0]]])
    stats = revin_stats(query, torch.tensor([[False, True, False]]), 1e-5)
    assert stats.mean.item() == pytest.approx(2.0)
    assert stats.std.item() == pytest.approx(1.0)
    empty = revin_stats(query, torch.tensor([[True, True, True]]), 1e-5)
    assert empty.mean.item() == 0.0 and empty.std.item() == 1.0
    assert bool(empty.fallback.all())
    constant = revin_stats(torch.full((1, 4, 1), 3.0), torch.zeros(1, 4, dtype=torch.bool), 1e-5)
    assert constant.std.item() == pytest.approx(1e-5)


def test_revin_normalize_shares_query_statistics():
    rng = np.random.default_rng(0)
    query = _random_subsequence(rng)
    key = _random_subsequence(rng)
    masked = apply_mask(query, extended_mask_at(16, 4, 2))
    q_norm, k_norm, stats = revin_normalize(masked, key, 1e-5)
    visible = ~masked.mask.flags
    assert q_norm[visible].mean() == pytest.approx(0.0, abs=1e-6)
    expected = (key.values[:, 0] - stats.mean.item()) / stats.std.item()
    np.testing.assert_allclose(k_norm[:, 0], expected, rtol=1e-5, atol=1e-5)


def test_revin_denormalize_inverts_normalize():
    rng = np.random.default_rng(9)
    for _ in range(20):
        query = _random_subsequence(rng, channels=3)
        key = _subsequence(rng.normal(loc=5.0, scale=30.0, size=(16, 3)))
        masked = apply_mask(query, make_transient_mask(16, 6, rng))
        q_norm, k_norm, stats = revin_normalize(masked, key, 1e-5)
        np.testing.assert_allclose(revin_denormalize(k_norm, stats), key.values, atol=1e-5)
        np.testing.assert_allclose(revin_denormalize(q_norm, stats), masked.values, atol=1e-5)


def test_attention_rows_are_probability_vectors(tiny_rebar_config):
    rng = np.random.default_rng(1)
    model = build_rebar_model(tiny_rebar_config)
    pairs = 1000
    query = torch.as_tensor(rng.normal(size=(pairs, 16, 1)), dtype=torch.float32)
    key = torch.as_tensor(rng.normal(scale=3.0, size=(pairs, 16, 1)), dtype=torch.float32)
    missing = torch.as_tensor(np.stack([make_transient_mask(16, 8, rng).flags for _ in range(pairs)]))
    with torch.no_grad():
        attention = model(query, missing, key).attention
    assert attention.shape == (pairs, 2, 16, 16)
    assert torch.all(attention >= 0)
    torch.testing.assert_close(attention.sum(dim=-1), torch.ones(pairs, 2, 16), atol=1e-5, rtol=0)

    single = apply_mask(_random_subsequence(rng), make_transient_mask(16, 8, rng))
    assert rebar_forward(single, _random_subsequence(rng), model).attention.shape == (1, 2, 16, 16)


def test_zero_query_path_gives_uniform_attention(tiny_rebar_config):
    rng = np.random.default_rng(2)
    model = build_rebar_model(tiny_rebar_config)
    with torch.no_grad():
        model.query_proj.weight.zero_()
        model.query_proj.bias.zero_()
    query = apply_mask(_random_subsequence(rng), extended_mask_at(16, 4, 0))
    output = rebar_forward(query, _random_subsequence(rng), model)
    torch.testing.assert_close(output.attention, torch.full_like(output.attention, 1 / 16))


def test_retrieval_path_reproduces_forward_output(tiny_rebar_config):
    rng = np.random.default_rng(3)
    for seed in range(100):
        config = tiny_rebar_config.model_copy(update={"init_seed": seed, "num_layers": 1 + seed % 2})
        model = build_rebar_model(config).double()
        length = int(rng.integers(12, 25))
        key = _random_subsequence(rng, length=length)
        if seed % 2:
            mask = make_transient_mask(length, length // 2, rng)
        else:
            mask = extended_mask_at(length, 5, int(rng.integers(0, length - 5)))
        query = apply_mask(_random_subsequence(rng, length=length), mask)
        output = rebar_forward(query, key, model)
        replayed = reconstruct_from_weights(output.attention, key, model, output.stats)
        torch.testing.assert_close(replayed, output.reconstruction, atol=1e-6, rtol=0)


def test_permuting_candidates_permutes_distances(tiny_rebar_config):
    model = build_rebar_model(tiny_rebar_config).double()
    rng = np.random.default_rng(10)
    anchor = _random_subsequence(rng)
    candidates = [_subsequence(rng.normal(size=(16, 1)), start=100 + i) for i in range(5)]
    mask = make_transient_mask(16, 8, rng)
    order = [3, 0, 4, 1, 2]
    permuted = [candidates[i] for i in order]
    distances = rebar_distances(anchor, candidates, mask, model)
    np.testing.assert_allclose(rebar_distances(anchor, permuted, mask, model), distances[order], rtol=1e-9, atol=1e-12)
    original = label_candidates(anchor, candidates, model, mask)
    reordered = label_candidates(anchor, permuted, model, mask)
    assert permuted[reordered.positive_index].start_index == candidates[original.positive_index].start_index


def test_reconstruct_from_weights_rejects_invalid_rows(tiny_rebar_config):
    model = build_rebar_model(tiny_rebar_config)
    key = _random_subsequence(np.random.default_rng(4))
    stats = revin_stats(torch.zeros(1, 16, 1), torch.zeros(1, 16, dtype=torch.bool), 1e-5)
    bad = torch.full((1, 2, 16, 16), 0.5)
    with pytest.raises(InputValidationError):
        reconstruct_from_weights(bad, key, model, stats)
    with pytest.raises(SizeError):
        reconstruct_from_weights(torch.full((1, 3, 16, 16), 1 / 16), key, model, stats)


def test_masked_values_never_influence_the_output(tiny_rebar_config):
    rng = np.random.default_rng(5)
    model = build_rebar_model(tiny_rebar_config)
    key = _random_subsequence(rng)
    mask = extended_mask_at(16, 5, 3)
    base = rng.normal(size=(16, 1))
    other = base.copy()
    other[mask.flags] = rng.normal(scale=100.0, size=(5, 1))
    with torch.no_grad():
        first = model(torch.as_tensor(base[None], dtype=torch.float32),
                      torch.as_tensor(mask.flags[None]),
                      torch.as_tensor(key.values[None]))
        second = model(torch.as_tensor(other[None], dtype=torch.float32),
                       torch.as_tensor(mask.flags[None]),
                       torch.as_tensor(key.values[None]))
    torch.testing.assert_close(first.reconstruction, second.reconstruction, atol=0, rtol=0)
    torch.testing.assert_close(first.attention, second.attention, atol=0, rtol=0)


def test_linear_ablation_stacks_are_pointwise():
    config = RebarConfig(in_channels=1, embed_channels=8, bottleneck_channels=4, num_heads=2, linear_qkv=True)
    model = build_rebar_model(config)
    assert config.receptive_field == 1
    assert len(model.query_net.blocks) == 0
    rng = np.random.default_rng(6)
    x = rng.normal(size=(12, 1))
    bumped = x.copy()
    bumped[7, 0] += 5.0
    missing = np.zeros(12, dtype=bool)
    before = dilated_conv_stack(model.query_net, x, missing)
    after = dilated_conv_stack(model.query_net, bumped, missing)
    changed = np.flatnonzero(np.abs(after - before).max(axis=1) > 0)
    assert changed.tolist() == [7]


def test_stack_output_shape():
    config = RebarConfig(in_channels=3, embed_channels=8, bottleneck_channels=4, base_kernel=5, num_layers=3, num_heads=2)
    stack = DilatedConvStack(3, config, 3)
    with torch.no_grad():
        for param in stack.parameters():
            param.normal_()
    out = dilated_conv_stack(stack, np.ones((20, 3)), np.zeros(20, dtype=bool))
    assert out.shape == (20, 8)


def test_gradients_match_finite_differences():
    config = RebarConfig(
        in_channels=1, embed_channels=8, bottleneck_channels=4, base_kernel=3,
        num_layers=1, num_heads=2, init_seed=11,
    )
    model = build_rebar_model(config).double()
    generator = torch.Generator().manual_seed(0)
    query = torch.randn(2, 8, 1, generator=generator, dtype=torch.float64)
    key = torch.randn(2, 8, 1, generator=generator, dtype=torch.float64)
    missing = torch.zeros(2, 8, dtype=torch.bool)
    missing[0, 2:5] = True
    missing[1, 5:8] = True

    def loss() -> torch.Tensor:
        output = model(query, missing, key)
        return masked_mse(output.reconstruction, query, missing).mean()

    model.zero_grad()
    loss().backward()
    h = 1e-5
    for name, param in model.named_parameters():
        analytic = param.grad.detach().clone().reshape(-1)
        numeric = torch.zeros_like(analytic)
        flat = param.data.view(-1)
        with torch.no_grad():
            for index in range(flat.numel()):
                original = flat[index].item()
                flat[index] = original + h
                plus = loss().item()
                flat[index] = original - h
                minus = loss().item()
                flat[index] = original
                numeric[index] = (plus - minus) / (2 * h)
        scale = max(float(analytic.norm() + numeric.norm()), 1e-6)
        assert float((analytic - numeric).norm()) / scale < 1e-4, name


def test_distance_requires_a_masked_position(tiny_rebar_config):
    model = build_rebar_model(tiny_rebar_config)
    rng = np.random.default_rng(7)
    anchor, cand = _random_subsequence(rng), _random_subsequence(rng)
    with pytest.raises(InputValidationError):
        rebar_distance(anchor, cand, Mask(flags=np.zeros(16, dtype=bool), kind="transient"), model)
    with pytest.raises(SizeError):
        rebar_distances(anchor, [_random_subsequence(rng, length=12)], extended_mask_at(16, 3, 0), model)


def test_batched_distances_match_single_calls(tiny_rebar_config):
    model = build_rebar_model(tiny_rebar_config)
    rng = np.random.default_rng(8)
    anchor = _random_subsequence(rng)
    candidates = [_random_subsequence(rng) for _ in range(5)]
    mask = make_transient_mask(16, 8, rng)
    batched = rebar_distances(anchor, candidates, mask, model)
    single = [rebar_distance(anchor, c, mask, model) for c in candidates]
    np.testing.assert_allclose(batched, single, rtol=1e-4, atol=1e-6)
    assert np.all(batched >= 0)


def test_argmin_breaks_ties_by_lowest_index():
    assert argmin_index([3.0, 1.0, 1.0, 2.0]) == 1
    assert argmin_index([0.0, 0.0]) == 0


def test_model_needs_channel_count():
    with pytest.raises(ConfigError):
        build_rebar_model(RebarConfig())
    with pytest.raises(SizeError):
        build_rebar_model(RebarConfig(in_channels=2), in_channels=3)
