import math

import numpy as np
import pytest

from cmpnet import model as M
from cmpnet.errors import BuildError, FormatError, ShapeError
from cmpnet.ops import softmax_cross_entropy
from cmpnet.tensor import Rng

from oracles import central_diff, max_rel_error


def example_spec():
    layers = (
        M.conv(16), M.elu(), M.maxpool(),
        M.conv(64), M.elu(), M.maxpool(),
        M.cmp(4, 4),
        *M.classifier_head(64, 8),
    )
    return M.ModelSpec(layers, 8, "cmp", (3, 32, 32))


def test_example_spec_shapes():
    infos = M.analyze(example_spec())
    shapes = [info.out_shape for info in infos]
    # hand propagation: pad-1 3x3 convs keep size, pools halve, cmp 64 -> 16
    assert shapes == [
        (16, 32, 32), (16, 32, 32), (16, 16, 16),
        (64, 16, 16), (64, 16, 16), (64, 8, 8),
        (16, 8, 8),
        (64,), (64,), (64,), (64,), (8,),
    ]
    state = M.build_model(example_spec(), Rng(0))
    logits, _ = M.forward(state, Rng(1).normal((2, 3, 32, 32)), "eval")
    assert logits.shape == (2, 8)


def test_build_deterministic():
    a = M.build_model(example_spec(), Rng(3))
    b = M.build_model(example_spec(), Rng(3))
    assert list(a.params) == list(b.params)
    for name in a.params:
        assert a.params[name].value.tobytes() == b.params[name].value.tobytes()
    c = M.build_model(example_spec(), Rng(4))
    assert not np.array_equal(a.params["0.conv.weight"].value, c.params["0.conv.weight"].value)


def test_init_scheme():
    state = M.build_model(example_spec(), Rng(0))
    w = state.params["3.conv.weight"].value
    bound = math.sqrt(1 / (16 * 9))
    assert np.all(np.abs(w) < bound)
    assert np.all(state.params["3.conv.bias"].value == 0)
    assert state.params["3.conv.weight"].group == "conv"
    assert state.params["7.dense.weight"].group == "fc"
    assert state.params["8.bn.gamma"].group == "fc"


def test_bad_cmp_config_names_layer():
    spec = M.ModelSpec((M.conv(64), M.cmp(2, 33), *M.classifier_head(8, 4)), 4, "cmp", (3, 8, 8))
    with pytest.raises(BuildError) as info:
        M.build_model(spec, Rng(0))
    msg = str(info.value)
    assert "1.cmp" in msg and "k=-959" in msg


@pytest.mark.parametrize(
    "layers, variant, fragment",
    [
        ((M.conv(4), *M.classifier_head(4, 3)), "cmp", "exactly one cmp"),
        ((M.conv(4), M.cmp(2, 2), M.cmp(2, 2), *M.classifier_head(4, 3)), "cmp", "exactly one cmp"),
        ((M.cmp(2, 2), M.conv(4), *M.classifier_head(4, 3)), "cmp", "between"),
        ((M.conv(4), M.cmp(2, 2), *M.classifier_head(4, 3)), "baseline_wogap", "must not contain a cmp"),
        ((M.conv(4), *M.classifier_head(4, 3)), "baseline_gap", "needs a gap"),
        ((M.conv(4), M.gap(), *M.classifier_head(4, 3)), "baseline_wogap", "must not contain a gap"),
        ((M.conv(4), *M.classifier_head(4, 5)), "baseline_wogap", "last layer"),
        ((M.conv(4), M.elu()), "baseline_wogap", "no dense"),
        ((M.dense(4), M.conv(4), M.dense(3)), "baseline_wogap", "1.conv"),
    ],
)
def test_variant_validation(layers, variant, fragment):
    spec = M.ModelSpec(layers, 3, variant, (3, 8, 8))
    with pytest.raises(BuildError, match=fragment):
        M.analyze(spec)


def test_forward_shape_error_has_layer():
    state = M.build_model(example_spec(), Rng(0))
    with pytest.raises(ShapeError):
        M.forward(state, np.zeros((1, 3, 16, 16)))


def tiny_spec(variant="cmp"):
    neck = {"cmp": [M.cmp(2, 2)], "baseline_wogap": [], "baseline_gap": [M.gap()]}[variant]
    layers = (M.conv(4), M.bn(), M.elu(), M.maxpool(), *neck, M.dense(5), M.bn(), M.dropout(0.5), M.elu(), M.dense(3))
    return M.ModelSpec(layers, 3, variant, (2, 4, 4))


@pytest.mark.parametrize("variant", ["cmp", "baseline_gap", "baseline_wogap"])
def test_end_to_end_finite_differences(variant):
    state = M.build_model(tiny_spec(variant), Rng(21))
    rng = Rng(22)
    x = rng.normal((4, 2, 4, 4))
    labels = np.array([0, 1, 2, 1])
    rng_state = state.rng.get_state()

    def loss():
        state.rng.set_state(rng_state)  # identical dropout masks on every call
        logits, _ = M.forward(state, x, "train")
        return softmax_cross_entropy(logits, labels)[0]

    state.rng.set_state(rng_state)
    logits, caches = M.forward(state, x, "train")
    _, grad = softmax_cross_entropy(logits, labels)
    dx = M.backward(state, caches, grad)
    assert dx.shape == x.shape
    # biases feeding batch norm have an exactly-zero gradient; entries below
    # 1e-6 in magnitude are compared on an absolute scale
    for name, p in state.params.items():
        num = central_diff(lambda _: loss(), p.value)
        assert max_rel_error(p.grad, num, floor=1e-6) < 1e-4, name
    num_x = central_diff(lambda _: loss(), x)
    assert max_rel_error(dx, num_x, floor=1e-6) < 1e-4


def test_eval_forward_deterministic_and_dropout_free():
    state = M.build_model(example_spec(), Rng(0))
    x = Rng(5).normal((3, 3, 32, 32))
    before = state.rng.get_state()
    a, _ = M.forward(state, x, "eval")
    b, _ = M.forward(state, x, "eval")
    assert a.tobytes() == b.tobytes()
    assert state.rng.get_state() == before


def test_cmp_with_replicated_channels_matches_baseline():
    """Max over r identical copies is the identity, so logits equal the smaller baseline's."""
    head = M.classifier_head(6, 4)
    base = M.build_model(M.ModelSpec((*head,), 4, "baseline_wogap", (3, 2, 2)), Rng(1))
    comp = M.build_model(M.ModelSpec((M.cmp(4, 4), *head), 4, "cmp", (12, 2, 2)), Rng(1))
    for name, p in base.params.items():
        index, rest = name.split(".", 1)
        comp.params[f"{int(index) + 1}.{rest}"].value[...] = p.value
    x = Rng(2).normal((5, 3, 2, 2))
    expected, _ = M.forward(base, x, "eval")
    got, _ = M.forward(comp, np.repeat(x, 4, axis=1), "eval")
    assert got.tobytes() == expected.tobytes()


def test_same_seed_gives_same_backbone_across_variants():
    a = M.build_model(M.toycar_spec("cmp"), Rng(9))
    b = M.build_model(M.toycar_spec("baseline_wogap"), Rng(9))
    for name in a.params:
        if a.params[name].group == "conv":
            assert a.params[name].value.tobytes() == b.params[name].value.tobytes()


# --- parameter accounting ---------------------------------------------------


def test_count_small_cases():
    spec = M.ModelSpec((M.dense(5),), 5, "baseline_wogap", (10,))
    report = M.count_parameters(spec)
    assert report.total == 55 and report.fc1_in_features == 10
    assert M.count_parameters(example_spec()).per_layer["6.cmp"] == 0


@pytest.mark.parametrize("spec_fn", [
    example_spec,
    lambda: M.toycar_spec("cmp"),
    lambda: M.toycar_spec("baseline_gap"),
    lambda: M.toycar_spec("baseline_wogap"),
    lambda: M.head_spec("vgg16-head", "cmp", 4, 4),
    lambda: tiny_spec("cmp"),
])
def test_count_matches_built_state(spec_fn):
    spec = spec_fn()
    report = M.count_parameters(spec)
    state = M.build_model(spec, Rng(0))
    assert report.total == state.parameter_count() == sum(p.value.size for p in state.params.values())


@pytest.mark.parametrize("preset", sorted(M.HEAD_PRESETS))
@pytest.mark.parametrize("r", [2, 4, 8, 16, 32])
def test_fc1_scaling_law(preset, r):
    C, size = M.HEAD_PRESETS[preset]
    base = M.count_parameters(M.head_spec(preset, "baseline_wogap"))
    comp = M.count_parameters(M.head_spec(preset, "cmp", r, max(2, C // math.ceil(C / r))))
    assert comp.fc1_in_features == size * size * math.ceil(C / r)
    assert comp.fc1_weights * C == base.fc1_weights * math.ceil(C / r)


def test_densenet_head_numbers():
    base = M.count_parameters(M.head_spec("densenet161-head", "baseline_wogap"))
    comp = M.count_parameters(M.head_spec("densenet161-head", "cmp", 16, 16))
    assert base.fc1_params == 27_697_408
    assert comp.fc1_params == 1_731_328
    assert base.fc1_in_features / comp.fc1_in_features == 16.0


@pytest.mark.parametrize("preset", sorted(M.HEAD_PRESETS))
def test_wogap_vs_gap_features(preset):
    C, size = M.HEAD_PRESETS[preset]
    assert M.count_parameters(M.head_spec(preset, "baseline_gap")).fc1_in_features == C
    assert M.count_parameters(M.head_spec(preset, "baseline_wogap")).fc1_in_features == size * size * C


# --- model files ------------------------------------------------------------


def trained_ish_state():
    state = M.build_model(tiny_spec(), Rng(0))
    M.forward(state, Rng(1).normal((4, 2, 4, 4)), "train")  # move the running stats
    return state


def test_save_load_round_trip(tmp_path):
    state = trained_ish_state()
    path = tmp_path / "m.cmpm"
    M.save_model(state, path)
    loaded = M.load_model(path)
    assert loaded.spec == state.spec
    for name, value in state.named_tensors().items():
        assert loaded.named_tensors()[name].tobytes() == value.tobytes()
    x = Rng(2).normal((3, 2, 4, 4))
    assert M.forward(loaded, x)[0].tobytes() == M.forward(state, x)[0].tobytes()


def test_model_file_header(tmp_path):
    state = trained_ish_state()
    path = tmp_path / "m.cmpm"
    M.save_model(state, path)
    raw = path.read_bytes()
    header, _, blobs = raw.partition(b"\n\n")
    lines = [l for l in header.decode().splitlines() if not l.startswith("#")]
    assert lines[0] == "0.conv.weight 4x2x3x3 0"
    name, shape, offset = lines[1].split()
    assert (name, shape, int(offset)) == ("0.conv.bias", "4", 12 + 16 + 8 * 72)
    assert blobs[:4] == b"CMPT"


def test_truncated_file(tmp_path):
    path = tmp_path / "m.cmpm"
    M.save_model(trained_ish_state(), path)
    raw = path.read_bytes()
    for cut in (len(raw) - 3, len(raw) // 2, 20):
        bad = tmp_path / f"cut{cut}.cmpm"
        bad.write_bytes(raw[:cut])
        with pytest.raises(FormatError):
            M.load_model(bad)
    garbage = tmp_path / "garbage.cmpm"
    garbage.write_bytes(b"\xff\xfe\x00junk")
    with pytest.raises(FormatError):
        M.load_model(garbage)
    with pytest.raises(FormatError):
        M.load_model(tmp_path / "missing.cmpm")


def test_load_into_mismatched_spec(tmp_path):
    path = tmp_path / "m.cmpm"
    M.save_model(trained_ish_state(), path)
    other = M.ModelSpec(
        (M.conv(4), M.bn(), M.elu(), M.maxpool(), M.cmp(2, 2), M.dense(7), M.bn(), M.dropout(0.5), M.elu(), M.dense(3)),
        3, "cmp", (2, 4, 4),
    )
    with pytest.raises(FormatError, match="5.dense.weight"):
        M.load_model(path, other)
