import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lungbench import models as Mo
from lungbench import tensor as T
from lungbench.models import ModelSpec
from lungbench.tensor import Tensor
from lungbench.train import cross_entropy

# toy sizes used for finite-difference checks
TOY = {
    "BasicCnn": dict(input_side=8, widths=(2, 2, 3, 3)),
    "ResNetStyle": dict(input_side=8, width=3, blocks=2),
    "ViT": dict(input_side=8, patch_size=4, embed_dim=8, num_heads=2, mlp_dim=16, num_layers=2),
}


def toy_model(kind, seed=0, classes=5):
    if kind == "ProposedEnsemble":
        members = (ModelSpec("ResNetStyle", seed=seed, num_classes=classes, **TOY["ResNetStyle"]),
                   ModelSpec("ViT", seed=seed + 1, num_classes=classes, **TOY["ViT"]))
        return Mo.build_model(ModelSpec("ProposedEnsemble", num_classes=classes, members=members))
    return Mo.build_model(ModelSpec(kind, seed=seed, num_classes=classes, **TOY[kind]))


def softmax_np(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def layer_norm_np(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def standardize_np(x, eps=1e-5):
    return (x - x.mean()) / np.sqrt(x.var() + eps)


def conv_np(x, w, b, pad):
    c_out, c_in, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    h = xp.shape[1] - k + 1
    out = np.zeros((c_out, h, h))
    for o in range(c_out):
        for i in range(h):
            for j in range(h):
                out[o, i, j] = np.sum(xp[:, i : i + k, j : j + k] * w[o]) + b[o]
    return out


def tensor(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# ------------------------------------------------------------------- shapes


@pytest.mark.parametrize("kind", ["BasicCnn", "ResNetStyle", "ViT", "ProposedEnsemble"])
@pytest.mark.parametrize("n", [1, 3, 8])
def test_forward_shape_contract(kind, n):
    model = toy_model(kind)
    x = np.random.default_rng(n).uniform(0, 1, (n, 1, 8, 8))
    assert model(Tensor(x)).shape == (n, 5)


def test_default_specs_forward_at_desk_size():
    x = Tensor(np.random.default_rng(0).uniform(0, 1, (2, 1, 32, 32)))
    for kind in ("BasicCnn", "ResNetStyle", "ViT"):
        assert Mo.build_model(ModelSpec(kind)).forward(x).shape == (2, 5)


def test_forward_rejects_wrong_input_shape():
    model = toy_model("BasicCnn")
    with pytest.raises(ValueError, match=r"\[N, 1, 8, 8\]"):
        model(Tensor(np.zeros((2, 1, 9, 9))))


@pytest.mark.parametrize(
    "spec, needle",
    [
        (ModelSpec("Mlp"), "unknown model kind"),
        (ModelSpec("BasicCnn", num_classes=1), "num_classes"),
        (ModelSpec("BasicCnn", input_side=0), "input_side"),
        (ModelSpec("ViT", input_side=30, patch_size=8), "divisible"),
        (ModelSpec("ViT", embed_dim=10, num_heads=3), "divisible"),
    ],
)
def test_spec_validation(spec, needle):
    with pytest.raises(ValueError, match=needle):
        Mo.build_model(spec)


def test_input_standardization():
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 1, (3, 1, 6, 6))
    out = Mo.standardize_images(Tensor(x)).data
    assert np.allclose(out.mean(axis=(1, 2, 3)), 0, atol=1e-12)
    assert np.allclose(out.var(axis=(1, 2, 3)), 1, atol=1e-3)
    # brightness and contrast changes of the whole image cancel out
    relit = Mo.standardize_images(Tensor(0.5 * x + 0.2)).data
    assert np.allclose(relit, out, atol=1e-3)
    assert np.all(Mo.standardize_images(Tensor(np.full((1, 1, 4, 4), 0.7))).data == 0)


def test_spec_dict_round_trip():
    spec = toy_model("ProposedEnsemble").spec
    assert ModelSpec.from_dict(spec.to_dict()) == spec


# ------------------------------------------------------------------ BasicCnn


def test_basic_cnn_zero_head_gives_uniform_softmax():
    model = toy_model("BasicCnn")
    model.params["dense.weight"].data[...] = 0
    model.params["dense.bias"].data[...] = 0
    logits = model(Tensor(np.random.default_rng(0).uniform(0, 1, (3, 1, 8, 8))))
    assert np.all(logits.data == 0)
    assert np.allclose(T.softmax(logits, axis=-1).data, 0.2, atol=1e-15)


def test_basic_cnn_parameter_count_closed_form():
    spec = ModelSpec("BasicCnn", input_side=32, widths=(4, 4, 8, 8))
    model = Mo.build_model(spec)
    convs = (1 * 4 * 9 + 4) + (4 * 4 * 9 + 4) + (4 * 8 * 9 + 8) + (8 * 8 * 9 + 8)
    head = 8 * 8 * 8 * 5 + 5
    assert model.num_parameters() == convs + head == 3633
    names = [n for n, _ in model.named_parameters()]
    assert len(names) == len(set(names)) == 10


def test_basic_cnn_matches_layer_oracle():
    model = toy_model("BasicCnn", seed=3)
    p = {k: v.data for k, v in model.params.items()}
    x = np.random.default_rng(3).uniform(0, 1, (1, 8, 8))
    h = standardize_np(x)
    for i in range(1, 5):
        h = np.maximum(conv_np(h, p[f"conv{i}.weight"], p[f"conv{i}.bias"], 1), 0)
        if i in (2, 4):
            c, s, _ = h.shape
            h = h.reshape(c, s // 2, 2, s // 2, 2).max(axis=(2, 4))
    expected = h.reshape(-1) @ p["dense.weight"] + p["dense.bias"]
    assert np.allclose(model(Tensor(x[None])).data[0], expected, atol=1e-12)


def test_initialization_follows_glorot_and_zero_bias():
    model = Mo.build_model(ModelSpec("BasicCnn"))
    w = model.params["conv2.weight"].data
    a = math.sqrt(6 / (4 * 9 + 4 * 9))
    assert np.abs(w).max() <= a
    assert np.all(model.params["conv2.bias"].data == 0)
    same = Mo.build_model(ModelSpec("BasicCnn"))
    assert all(np.array_equal(p.data, q.data) for p, q in zip(model.parameters(), same.parameters()))


# ------------------------------------------------------------ residual block


def block_params(rng, c, zero_second=False):
    w1, w2 = rng.normal(0, 0.5, (c, c, 3, 3)), rng.normal(0, 0.5, (c, c, 3, 3))
    b1, b2 = rng.normal(0, 0.1, c), rng.normal(0, 0.1, c)
    if zero_second:
        w2, b2 = np.zeros_like(w2), np.zeros_like(b2)
    return tuple(tensor(a) for a in (w1, b1, w2, b2))


def test_residual_block_zero_branch_is_relu():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 5, 5))
    out = Mo.residual_block(tensor(x), block_params(rng, 2, zero_second=True))
    assert np.array_equal(out.data, np.maximum(x, 0))
    xp = np.abs(x)
    assert np.array_equal(Mo.residual_block(tensor(xp), block_params(rng, 2, True)).data, xp)


def test_residual_block_zero_input_zero_bias():
    rng = np.random.default_rng(1)
    w1, _, w2, _ = block_params(rng, 3)
    zeros = tensor(np.zeros(3))
    out = Mo.residual_block(tensor(np.zeros((3, 4, 4))), (w1, zeros, w2, zeros))
    assert np.all(out.data == 0)


def test_residual_block_matches_oracle():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 4, 4))
    params = block_params(rng, 2)
    w1, b1, w2, b2 = (p.data for p in params)
    expected = np.maximum(conv_np(np.maximum(conv_np(x, w1, b1, 1), 0), w2, b2, 1) + x, 0)
    assert np.allclose(Mo.residual_block(tensor(x), params).data, expected, atol=1e-12)


def test_residual_block_channel_mismatch():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError, match="3 channels"):
        Mo.residual_block(tensor(np.zeros((3, 4, 4))), block_params(rng, 2))


# --------------------------------------------------------------- ResNetStyle


def test_resnet_zero_branches_collapse_to_stem_pool_dense():
    model = toy_model("ResNetStyle", seed=4)
    for name, p in model.params.items():
        if ".conv2." in name:
            p.data[...] = 0
    p = {k: v.data for k, v in model.params.items()}
    x = np.random.default_rng(4).uniform(0, 1, (1, 8, 8))
    stem = np.maximum(conv_np(standardize_np(x), p["stem.weight"], p["stem.bias"], 1)[:, ::2, ::2], 0)
    expected = stem.mean(axis=(1, 2)) @ p["dense.weight"] + p["dense.bias"]
    assert np.allclose(model(Tensor(x[None])).data[0], expected, atol=1e-12)


def test_resnet_stem_gradient_nonzero_and_matches_fd():
    model = toy_model("ResNetStyle", seed=5)
    rng = np.random.default_rng(5)
    x = Tensor(rng.uniform(0, 1, (4, 1, 8, 8)))
    labels = np.array([0, 1, 2, 3])
    stem = model.params["stem.weight"]
    loss = cross_entropy(model(x), labels)
    loss.backward()
    assert np.abs(stem.grad).max() > 1e-6
    # spot-check one entry by central differences
    idx = np.unravel_index(np.argmax(np.abs(stem.grad)), stem.shape)
    eps = 1e-6
    orig = stem.data[idx]
    with T.no_grad():
        stem.data[idx] = orig + eps
        up = cross_entropy(model(x), labels).item()
        stem.data[idx] = orig - eps
        down = cross_entropy(model(x), labels).item()
    stem.data[idx] = orig
    assert abs((up - down) / (2 * eps) - stem.grad[idx]) < 1e-6


# ----------------------------------------------------------------------- ViT


def test_patchify_paper_resolution():
    out = Mo.patchify(np.zeros((1, 256, 256)), 16)
    assert out.shape == (256, 256)


def test_patchify_unit_patches_and_single_patch():
    x = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    assert Mo.patchify(x, 1).data.tolist() == [[1.0], [2.0], [3.0], [4.0]]
    assert Mo.patchify(x, 2).data.tolist() == [[1.0, 2.0, 3.0, 4.0]]


def test_patchify_row_major_patch_order():
    x = np.arange(16.0).reshape(1, 4, 4)
    out = Mo.patchify(x, 2).data
    assert out[0].tolist() == [0, 1, 4, 5] and out[1].tolist() == [2, 3, 6, 7]
    assert out[2].tolist() == [8, 9, 12, 13]


@settings(max_examples=60, deadline=None)
@given(st.sampled_from([1, 2, 4, 8, 16]), st.integers(1, 4), st.integers(0, 2**16))
def test_patchify_round_trip(p, g, seed):
    side = p * g
    x = np.random.default_rng(seed).uniform(size=(1, side, side))
    assert np.array_equal(Mo.unpatchify(Mo.patchify(x, p), p, side), x)


def test_patchify_batched_keeps_batch():
    x = np.random.default_rng(0).uniform(size=(3, 1, 8, 8))
    out = Mo.patchify(Tensor(x), 4)
    assert out.shape == (3, 4, 16)
    assert np.array_equal(out.data[1], Mo.patchify(x[1], 4).data)


def test_patchify_indivisible():
    with pytest.raises(ValueError, match="divisible"):
        Mo.patchify(np.zeros((1, 10, 10)), 4)


def test_patch_embed_cases():
    rng = np.random.default_rng(0)
    patches = tensor(rng.normal(size=(4, 9)))
    pos = tensor(rng.normal(size=(4, 6)))
    out = Mo.patch_embed_and_position(patches, tensor(np.zeros((9, 6))), pos)
    assert np.array_equal(out.data, pos.data)
    ident = Mo.patch_embed_and_position(patches, tensor(np.eye(9)), tensor(np.zeros((4, 9))))
    assert np.array_equal(ident.data, patches.data)
    proj = tensor(rng.normal(size=(9, 6)))
    got = Mo.patch_embed_and_position(patches, proj, pos)
    assert np.allclose(got.data, patches.data @ proj.data + pos.data, atol=1e-12)
    with pytest.raises(ValueError, match="position table has 3 rows"):
        Mo.patch_embed_and_position(patches, proj, tensor(np.zeros((3, 6))))


def attn_params(rng, d, m, scale=0.5):
    p = {
        "ln1.gamma": 1 + 0.1 * rng.normal(size=d), "ln1.beta": 0.1 * rng.normal(size=d),
        "ln2.gamma": 1 + 0.1 * rng.normal(size=d), "ln2.beta": 0.1 * rng.normal(size=d),
        "ffn.w1": scale * rng.normal(size=(d, m)), "ffn.b1": 0.1 * rng.normal(size=m),
        "ffn.w2": scale * rng.normal(size=(m, d)), "ffn.b2": 0.1 * rng.normal(size=d),
    }
    for n in ("wq", "wk", "wv", "wo"):
        p["attn." + n] = scale * rng.normal(size=(d, d))
    return {k: tensor(v) for k, v in p.items()}


def attention_loop(x, p, heads):
    """Explicit-loop pre-norm block: returns (output, weights[heads][T][T])."""
    t, d = x.shape
    dh = d // heads
    h = layer_norm_np(x, p["ln1.gamma"], p["ln1.beta"])
    q, k, v = (h @ p["attn." + n] for n in ("wq", "wk", "wv"))
    ctx = np.zeros((t, d))
    weights = np.zeros((heads, t, t))
    for hd in range(heads):
        sl = slice(hd * dh, (hd + 1) * dh)
        for i in range(t):
            scores = [sum(q[i, sl][a] * k[j, sl][a] for a in range(dh)) / math.sqrt(dh) for j in range(t)]
            m = max(scores)
            e = [math.exp(s - m) for s in scores]
            w = [ei / sum(e) for ei in e]
            weights[hd, i] = w
            for j in range(t):
                ctx[i, sl] += w[j] * v[j, sl]
    x = x + ctx @ p["attn.wo"]
    h = layer_norm_np(x, p["ln2.gamma"], p["ln2.beta"])
    h = np.maximum(h @ p["ffn.w1"] + p["ffn.b1"], 0)
    return x + h @ p["ffn.w2"] + p["ffn.b2"], weights


@pytest.mark.parametrize("heads", [1, 2])
def test_attention_matches_loop_oracle(heads):
    rng = np.random.default_rng(heads)
    x = rng.normal(size=(3, 4))
    params = attn_params(rng, 4, 6)
    maps = []
    got = Mo.attention_block(tensor(x), params, heads, maps)
    expected, weights = attention_loop(x, {k: v.data for k, v in params.items()}, heads)
    assert np.allclose(got.data, expected, atol=1e-12)
    assert np.allclose(maps[0][0], weights, atol=1e-12)


def test_attention_single_token_and_identical_tokens():
    rng = np.random.default_rng(0)
    params = attn_params(rng, 4, 6)
    maps = []
    Mo.attention_block(tensor(rng.normal(size=(1, 4))), params, 2, maps)
    assert np.all(maps[0] == 1.0)
    maps = []
    Mo.attention_block(tensor(np.tile(rng.normal(size=4), (5, 1))), params, 2, maps)
    assert np.allclose(maps[0], 0.2, atol=1e-15)


def test_attention_head_divisibility():
    with pytest.raises(ValueError, match="divisible"):
        Mo.attention_block(tensor(np.zeros((2, 6))), attn_params(np.random.default_rng(0), 6, 4), 4)


def test_vit_attention_rows_normalized():
    model = Mo.build_model(ModelSpec("ViT", input_side=32, patch_size=8))
    model(Tensor(np.random.default_rng(0).uniform(size=(2, 1, 32, 32))))
    assert len(model.attention_maps) == 2
    for w in model.attention_maps:
        assert w.shape == (2, 2, 16, 16)
        assert np.all(w >= 0) and np.allclose(w.sum(-1), 1, atol=1e-9)


# --------------------------------------------------------------- ensemble


class Fixed(Mo.Model):
    def __init__(self, logits, classes):
        super().__init__(ModelSpec("BasicCnn", num_classes=classes, input_side=4), {})
        self.logits = np.asarray(logits, dtype=np.float64)

    def forward(self, x):
        return Tensor(np.tile(self.logits, (x.shape[0], 1)))


def ensemble(a, b):
    k = len(a)
    return Mo.build_proposed(ModelSpec("ProposedEnsemble", num_classes=k), Fixed(a, k), Fixed(b, k))


def ensemble_probs(model):
    return np.exp(model(Tensor(np.zeros((1, 1, 4, 4)))).data[0])


def test_ensemble_identical_members():
    z = np.array([0.3, -1.0, 2.0])
    assert np.allclose(ensemble_probs(ensemble(z, z)), softmax_np(z), atol=1e-15)


def test_ensemble_one_hot_members():
    big = 800.0
    p = ensemble_probs(ensemble([big, 0, 0, 0, 0], [0, big, 0, 0, 0]))
    assert np.allclose(p, [0.5, 0.5, 0, 0, 0], atol=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31))
def test_ensemble_random_matches_average_and_argmax(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(0, 3, 5), rng.normal(0, 3, 5)
    avg = 0.5 * (softmax_np(a) + softmax_np(b))
    p = ensemble_probs(ensemble(a, b))
    assert np.allclose(p, avg, atol=1e-12)
    assert np.argmax(p) == np.argmax(avg)


def test_ensemble_class_mismatch():
    with pytest.raises(ValueError, match="class-count mismatch"):
        Mo.build_proposed(ModelSpec("ProposedEnsemble", num_classes=5), Fixed([0] * 5, 5), Fixed([0] * 4, 4))


def test_ensemble_parameters_are_prefixed_views():
    model = toy_model("ProposedEnsemble")
    names = [n for n, _ in model.named_parameters()]
    assert names[0].startswith("resnet.") and names[-1].startswith("vit.")
    assert model.params["resnet.stem.weight"] is model.members[0].params["stem.weight"]


# -------------------------------------------------------------- file format


@pytest.mark.parametrize("kind", ["BasicCnn", "ResNetStyle", "ViT", "ProposedEnsemble"])
def test_save_load_bitwise(tmp_path, kind):
    model = toy_model(kind, seed=11)
    for p in model.parameters():
        p.data[...] = np.random.default_rng(p.data.size).normal(size=p.shape) / 3
    Mo.save_model(model, tmp_path / "m.lbm")
    back = Mo.load_model(tmp_path / "m.lbm")
    assert back.spec == model.spec
    assert [n for n, _ in back.named_parameters()] == [n for n, _ in model.named_parameters()]
    for (_, p), (_, q) in zip(model.named_parameters(), back.named_parameters()):
        assert p.data.tobytes() == q.data.tobytes()
    x = Tensor(np.random.default_rng(0).uniform(size=(2, 1, 8, 8)))
    assert model(x).data.tobytes() == back(x).data.tobytes()


def test_file_layout_bytes(tmp_path):
    Mo.write_params({"ab": np.array([[1.5, -2.0]])}, tmp_path / "f.lbm")
    raw = (tmp_path / "f.lbm").read_bytes()
    expected = (
        b"LBM1" + (1).to_bytes(4, "little") + (2).to_bytes(4, "little") + b"ab"
        + (2).to_bytes(4, "little") + (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
        + np.array([1.5, -2.0], dtype="<f8").tobytes()
    )
    assert raw == expected


def test_load_errors(tmp_path):
    model = toy_model("BasicCnn")
    path = tmp_path / "m.lbm"
    Mo.save_model(model, path)
    good = path.read_bytes()

    path.write_bytes(b"")
    with pytest.raises(Mo.TruncatedFileError):
        Mo.load_model(path)
    path.write_bytes(good[:-3])
    with pytest.raises(Mo.TruncatedFileError):
        Mo.load_model(path)
    path.write_bytes(b"LBM2" + good[4:])
    with pytest.raises(Mo.VersionError):
        Mo.load_model(path)

    Mo.write_params({**{n: p.data for n, p in model.named_parameters()}, "extra.bias": np.zeros(2)}, path)
    with pytest.raises(Mo.UnknownParameterError, match="extra.bias"):
        Mo.load_model(path)
    Mo.write_params({n: p.data for n, p in model.named_parameters() if n != "dense.bias"}, path)
    with pytest.raises(Mo.MissingParameterError, match="dense.bias"):
        Mo.load_model(path)
    Mo.write_params({n: (p.data if n != "dense.bias" else np.zeros(3)) for n, p in model.named_parameters()}, path)
    with pytest.raises(Mo.ModelFormatError, match="shape"):
        Mo.load_model(path)


# ----------------------------------------------------------- gradient checks


def param_owners(model):
    """(dict, name) pairs for every trainable tensor; ensembles own nothing themselves."""
    if isinstance(model, Mo.ProposedEnsemble):
        return [pair for m in model.members for pair in param_owners(m)]
    return [(model.params, name) for name in model.params]


def model_loss_check(kind, seed, side=8):
    model = toy_model(kind, seed=seed)
    rng = np.random.default_rng(1000 + seed)
    # move zero-initialised biases off the ReLU kink
    for owner, name in param_owners(model):
        owner[name].data = owner[name].data + rng.normal(0, 0.05, owner[name].data.shape)
    x = Tensor(rng.uniform(0, 1, (2, 1, side, side)))
    labels = rng.integers(0, 5, size=2)
    worst = 0.0
    for owner, name in param_owners(model):
        original = owner[name]

        def loss(t):
            owner[name] = t
            try:
                return cross_entropy(model(x), labels)
            finally:
                owner[name] = original

        worst = max(worst, T.grad_check(loss, original))
    return worst


@pytest.mark.parametrize("kind, seeds", [("BasicCnn", 3), ("ResNetStyle", 3), ("ViT", 3), ("ProposedEnsemble", 1)])
def test_model_grad_check(kind, seeds):
    # the 20-seed sweep lives in the acceptance suite
    errs = [model_loss_check(kind, s) for s in range(seeds)]
    assert max(errs) < 1e-4, errs
