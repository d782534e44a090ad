import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ctkd.autodiff import Tensor, backward, no_grad, tsum
from ctkd.errors import ConfigError, IncompatibilityError, ShapeError
from ctkd.models import WrnSpec, analytic_param_count, build_wrn, param_count, transfer_lower_weights


def wrn_count_oracle(depth, widen, k):
    # written out from the architecture description, sharing no code with the model
    n = (depth - 4) // 6
    w = [16, 16 * widen, 32 * widen, 64 * widen]
    total = 3 * 3 * 3 * 16
    for g in range(3):
        cin, cout = w[g], w[g + 1]
        for b in range(n):
            ci = cin if b == 0 else cout
            total += 2 * ci + 9 * ci * cout + 2 * cout + 9 * cout * cout
            total += ci * cout if ci != cout else 0
    return total + 2 * w[3] + w[3] * k + k


@pytest.mark.parametrize("depth", [5, 12, 8, 4, 0])
def test_bad_depth_names_constraint(depth):
    with pytest.raises(ConfigError, match="6n"):
        WrnSpec(depth, 1)


def test_parse_round_trip():
    spec = WrnSpec.parse("WRN-40-2", 100)
    assert (spec.depth, spec.widen, spec.num_classes, spec.blocks_per_group) == (40, 2, 100, 6)
    assert spec.name == "WRN-40-2"
    assert spec.widths == (32, 64, 128)
    with pytest.raises(ConfigError):
        WrnSpec.parse("resnet")


@pytest.mark.parametrize("arch", ["10-1", "16-1", "40-1", "16-2", "40-2", "22-4"])
@pytest.mark.parametrize("k", [10, 100])
def test_param_count_matches_independent_oracle(arch, k):
    d, m = map(int, arch.split("-"))
    spec = WrnSpec(d, m, k)
    assert analytic_param_count(spec) == wrn_count_oracle(d, m, k)
    if d <= 16:
        assert param_count(build_wrn(spec, 0)) == wrn_count_oracle(d, m, k)


@pytest.mark.parametrize("arch,published", [("40-1", 0.56), ("16-2", 0.69)])
def test_param_count_rounds_to_published(arch, published):
    assert round(analytic_param_count(WrnSpec.parse(arch)) / 1e6, 2) == published


@given(st.sampled_from([10, 16, 22]), st.integers(1, 3), st.integers(1, 50), st.integers(1, 50))
def test_class_count_only_changes_classifier(depth, widen, k1, k2):
    a = analytic_param_count(WrnSpec(depth, widen, k1))
    b = analytic_param_count(WrnSpec(depth, widen, k2))
    assert b - a == 64 * widen * (k2 - k1) + (k2 - k1)


def test_build_is_seed_deterministic():
    a, b = build_wrn(WrnSpec(10, 1), 7), build_wrn(WrnSpec(10, 1), 7)
    assert a.fingerprint() == b.fingerprint()
    assert all(a.params[n].data.tobytes() == b.params[n].data.tobytes() for n in a.params)
    assert build_wrn(WrnSpec(10, 1), 8).fingerprint() != a.fingerprint()


def test_init_conventions():
    m = build_wrn(WrnSpec(16, 2), 0)
    for name, t in m.params.items():
        if name.endswith(".gamma"):
            assert (t.data == 1).all()
        elif name.endswith((".beta", ".bias")):
            assert not t.data.any()
    w = m.params["g1.b1.conv1.weight"].data
    assert w.std() == pytest.approx(np.sqrt(2.0 / (64 * 9)), rel=0.05)


def test_forward_shapes_wrn16_1():
    model = build_wrn(WrnSpec(16, 1), 0)
    with no_grad():
        logits, taps = model.forward(Tensor(np.random.default_rng(0).normal(size=(4, 3, 32, 32))), train=False)
    assert logits.shape == (4, 10)
    assert [t.shape for t in taps] == [(4, 16, 32, 32), (4, 32, 16, 16), (4, 64, 8, 8)]


@pytest.mark.parametrize("arch", ["10-1", "16-2", "22-1"])
def test_tap_spatial_sizes_independent_of_depth(arch):
    model = build_wrn(WrnSpec.parse(arch), 0)
    with no_grad():
        _, taps = model.forward(Tensor(np.zeros((2, 3, 32, 32))), train=True)
    assert [t.shape[2:] for t in taps] == [(32, 32), (16, 16), (8, 8)]
    assert [t.shape[1] for t in taps] == list(model.spec.widths)


def test_zero_input_eval_is_finite():
    model = build_wrn(WrnSpec(10, 1), 0)
    with no_grad():
        logits, _ = model.forward(Tensor(np.zeros((2, 3, 32, 32))), train=False)
    assert np.isfinite(logits.data).all()


def test_eval_forward_is_bit_deterministic():
    model = build_wrn(WrnSpec(10, 1), 3)
    x = Tensor(np.random.default_rng(1).normal(size=(3, 3, 32, 32)))
    with no_grad():
        a = model.forward(x, train=False)[0].data.tobytes()
        b = model.forward(x, train=False)[0].data.tobytes()
    assert a == b


@pytest.mark.parametrize("shape", [(2, 1, 32, 32), (2, 3, 28, 28), (3, 32, 32)])
def test_wrong_input_is_shape_error(shape):
    with pytest.raises(ShapeError):
        build_wrn(WrnSpec(10, 1), 0).forward(Tensor(np.zeros(shape)), train=False)


def test_train_forward_updates_running_stats_eval_does_not():
    model = build_wrn(WrnSpec(10, 1), 0)
    before = model.fingerprint()
    x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 32, 32)))
    with no_grad():
        model.forward(x, train=False)
    assert model.fingerprint() == before
    with no_grad():
        model.forward(x, train=True)
    assert model.fingerprint() != before


def test_every_parameter_receives_gradient():
    model = build_wrn(WrnSpec(10, 1), 0)
    logits, _ = model.forward(Tensor(np.random.default_rng(0).normal(size=(2, 3, 32, 32))), train=True)
    backward(tsum(logits * logits))
    assert all(t.grad is not None and t.grad.shape == t.shape for t in model.parameters())


def test_copy_is_independent():
    model = build_wrn(WrnSpec(10, 1), 0)
    twin = model.copy()
    twin.params["fc.bias"].data += 1
    assert not model.params["fc.bias"].data.any()


# -- weight transfer -----------------------------------------------------------

def test_transfer_zero_groups_is_identity():
    s, e = build_wrn(WrnSpec(16, 1), 1), build_wrn(WrnSpec(40, 1), 2)
    assert transfer_lower_weights(s, e, 0).fingerprint() == s.fingerprint()


def test_transfer_one_group_copies_first_blocks():
    s, e = build_wrn(WrnSpec(16, 1), 1), build_wrn(WrnSpec(40, 1), 2)
    out = transfer_lower_weights(s, e, 1)
    for b in range(2):
        for part in ("conv1", "conv2"):
            name = f"g0.b{b}.{part}.weight"
            assert out.params[name].data.tobytes() == e.params[name].data.tobytes()
    assert out.params["g1.b0.conv1.weight"].data.tobytes() == s.params["g1.b0.conv1.weight"].data.tobytes()
    assert out.params["fc.weight"].data.tobytes() == s.params["fc.weight"].data.tobytes()


def test_transfer_all_groups_taps_still_differ():
    s, e = build_wrn(WrnSpec(16, 1), 1), build_wrn(WrnSpec(40, 1), 2)
    out = transfer_lower_weights(s, e, 3)
    x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 32, 32)))
    with no_grad():
        _, ts = out.forward(x, train=False)
        _, te = e.forward(x, train=False)
    assert all(not np.allclose(a.data, b.data) for a, b in zip(ts, te))


def test_transfer_widen_mismatch():
    with pytest.raises(IncompatibilityError):
        transfer_lower_weights(build_wrn(WrnSpec(10, 1), 0), build_wrn(WrnSpec(16, 2), 0), 1)


def test_transfer_deeper_student_rejected():
    with pytest.raises(IncompatibilityError):
        transfer_lower_weights(build_wrn(WrnSpec(16, 1), 0), build_wrn(WrnSpec(10, 1), 0), 1)


@pytest.mark.parametrize("groups", [-1, 4])
def test_transfer_group_range(groups):
    with pytest.raises(ConfigError):
        transfer_lower_weights(build_wrn(WrnSpec(10, 1), 0), build_wrn(WrnSpec(16, 1), 0), groups)
