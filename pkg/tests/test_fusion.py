from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rgbtfuse import autodiff as ad
from rgbtfuse import nn
from rgbtfuse.autodiff import ContractError, DimensionError, Tensor
from rgbtfuse.fusion import (
    AblationFlags,
    fixture_entries,
    fuse,
    fusion_from_fixture,
    init_fusion,
    read_fixture,
    write_fixture,
)

from conftest import assert_grad_close, central_diff
import oracles

FIXTURE = Path(__file__).parent / "fixtures" / "fusion_n1_d2.txt"


def random_inputs(rng, n=4, d=8, L=3, dp=None):
    dp = dp or d
    mask = np.ones(L, dtype=bool)
    mask[-1] = False
    return Tensor(rng.normal(size=(n, d))), Tensor(rng.normal(size=(n, d))), Tensor(rng.normal(size=(L, dp))), mask


def nonzero_residual(params, rng):
    params.mlp_r.fc2.weight.data = rng.normal(0, 0.3, params.mlp_r.fc2.weight.shape)
    params.mlp_r.fc2.bias.data = rng.normal(0, 0.3, params.mlp_r.fc2.bias.shape)
    return params


def test_fixture_matches_line_by_line_oracle():
    entries = read_fixture(FIXTURE)
    params = fusion_from_fixture(entries)
    R, T, P = (entries[f"input/{k}"] for k in ("R", "T", "P"))
    mask = entries["input/mask"].astype(bool)
    out = fuse(Tensor(R), Tensor(T), Tensor(P), mask, params)
    lists = {k: v.tolist() for k, v in entries.items()}
    want, alpha = oracles.fuse(R.tolist(), T.tolist(), P.tolist(), mask.tolist(), lists)
    assert np.abs(out.fused.data - np.array(want)).max() < 1e-10
    assert np.abs(out.gates.data[:, 0] - np.array(alpha)).max() < 1e-10
    # the fixture exercises a real residual, not the identity
    assert np.abs(out.fused.data - R).max() > 1e-3


@pytest.mark.parametrize("seed", range(5))
def test_random_params_match_oracle(seed):
    rng = np.random.default_rng(seed)
    params = nonzero_residual(init_fusion(rng, 4, 3, heads=2), rng)
    R, T, P, mask = random_inputs(rng, n=3, d=4, L=4, dp=3)
    out = fuse(R, T, P, mask, params)
    lists = {k: np.asarray(v).tolist() for k, v in fixture_entries(params).items()}
    want, _ = oracles.fuse(R.data.tolist(), T.data.tolist(), P.data.tolist(), mask.tolist(), lists)
    assert np.abs(out.fused.data - np.array(want)).max() < 1e-10


def test_fixture_file_round_trip(tmp_path):
    params = init_fusion(np.random.default_rng(0), 4, 4, heads=2)
    write_fixture(tmp_path / "f.txt", fixture_entries(params))
    back = fixture_entries(fusion_from_fixture(read_fixture(tmp_path / "f.txt")))
    for k, v in fixture_entries(params).items():
        assert np.array_equal(back[k], v)


def test_fixture_reader_checks_counts(tmp_path):
    (tmp_path / "bad.txt").write_text("w 2 2 : 1 2 3\n")
    with pytest.raises(ValueError, match="declares"):
        read_fixture(tmp_path / "bad.txt")


@given(st.integers(0, 10_000))
def test_zero_residual_is_identity(seed):
    rng = np.random.default_rng(seed)
    params = init_fusion(rng, 8, 8, heads=2)
    R, T, P, mask = random_inputs(rng)
    assert np.array_equal(fuse(R, T, P, mask, params).fused.data, R.data)


@given(st.integers(0, 10_000))
def test_gate_override_zero_is_identity(seed):
    rng = np.random.default_rng(seed)
    params = nonzero_residual(init_fusion(rng, 8, 8, heads=2), rng)
    R, T, P, mask = random_inputs(rng)
    assert np.array_equal(fuse(R, T, P, mask, params, AblationFlags(gate_override=0.0)).fused.data, R.data)


def test_direct_fusion_adds_full_residual(rng):
    params = nonzero_residual(init_fusion(rng, 8, 8, heads=2), rng)
    R, T, P, mask = random_inputs(rng)
    out = fuse(R, T, P, mask, params, AblationFlags(gated=False, keep_intermediates=True))
    assert np.array_equal(out.fused.data, R.data + out.intermediates["delta"].data)


@pytest.mark.parametrize("flag", ["text_attn", "rgb_attn"])
def test_disabled_path_contributes_zero(rng, flag):
    params = nonzero_residual(init_fusion(rng, 8, 8, heads=2), rng)
    R, T, P, mask = random_inputs(rng)
    out = fuse(R, T, P, mask, params, AblationFlags(**{flag: False}, keep_intermediates=True))
    key = "t_txt" if flag == "text_attn" else "t_rgb"
    assert not out.intermediates[key].data.any()


def test_prompt_changes_output(rng):
    params = nonzero_residual(init_fusion(rng, 8, 8, heads=2), rng)
    R, T, P, mask = random_inputs(rng)
    a = fuse(R, T, P, mask, params).fused.data
    b = fuse(R, T, Tensor(P.data + rng.normal(size=P.shape)), mask, params).fused.data
    assert np.abs(a - b).max() > 1e-8
    # with the text path off the prompt has no influence at all
    off = AblationFlags(text_attn=False)
    c = fuse(R, T, P, mask, params, off).fused.data
    e = fuse(R, T, Tensor(P.data + 1.0), mask, params, off).fused.data
    assert np.array_equal(c, e)


@given(st.integers(0, 10_000))
def test_masked_prompt_rows_are_ignored(seed):
    rng = np.random.default_rng(seed)
    params = nonzero_residual(init_fusion(rng, 8, 8, heads=2), rng)
    R, T, P, mask = random_inputs(rng, L=5)
    base = fuse(R, T, P, mask, params)
    P2 = P.data.copy()
    P2[~mask] = rng.normal(size=P2[~mask].shape) * 50
    again = fuse(R, T, Tensor(P2), mask, params)
    assert np.array_equal(base.fused.data, again.fused.data)
    assert np.array_equal(base.gates.data, again.gates.data)


@given(st.integers(0, 10_000), st.floats(0.1, 30))
def test_gates_strictly_inside_unit_interval(seed, scale):
    rng = np.random.default_rng(seed)
    params = init_fusion(rng, 8, 8, heads=2)
    R, T, P, mask = random_inputs(rng)
    g = fuse(Tensor(R.data * scale), T, P, mask, params).gates.data
    assert g.shape == (4, 1)
    assert g.min() > 0 and g.max() < 1


def test_toy_shapes(rng):
    params = init_fusion(rng, 64, 64)
    R, T, P, mask = random_inputs(rng, n=16, d=64, L=5)
    out = fuse(R, T, P, mask, params)
    assert out.fused.shape == (16, 64) and out.gates.shape == (16, 1)


def test_errors(rng):
    params = init_fusion(rng, 8, 8, heads=2)
    R, T, P, mask = random_inputs(rng)
    with pytest.raises(DimensionError):
        fuse(R, Tensor(np.ones((3, 8))), P, mask, params)
    with pytest.raises(DimensionError):
        fuse(R, T, Tensor(np.ones((3, 5))), mask, params)
    with pytest.raises(DimensionError):
        fuse(R, T, P, mask[:2], params)
    with pytest.raises(ContractError):
        fuse(R, T, P, np.zeros(3, dtype=bool), params)


def test_every_fusion_leaf_has_correct_gradient(rng):
    params = nonzero_residual(init_fusion(rng, 4, 4, heads=2), rng)
    R, T, P, mask = random_inputs(rng, n=3, d=4, L=3)
    w = Tensor(rng.normal(size=(3, 4)))
    named = list(nn.named_parameters(params))

    def loss():
        out = fuse(R, T, P, mask, params)
        return ad.sum(out.fused * w) + ad.sum(out.gates)

    for _, t in named:
        t.requires_grad = True
    ad.backward(loss())
    grads = {n: t.grad for n, t in named}
    for _, t in named:
        t.requires_grad, t.grad = False, None
    for name, t in named:
        assert_grad_close(grads[name], central_diff(lambda: loss().item(), t.data))
