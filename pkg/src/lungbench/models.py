"""The four network families and the model file format."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor

KINDS = ("BasicCnn", "ResNetStyle", "ViT", "ProposedEnsemble")
MAGIC = b"LBM1"
LN_EPS = 1e-5
INPUT_EPS = 1e-5


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_side: int = 32
    num_classes: int = 5
    seed: int = 0
    # BasicCnn
    widths: tuple = (4, 4, 8, 8)
    # ResNetStyle
    width: int = 8
    blocks: int = 3
    stem_stride: int = 2
    # ViT
    patch_size: int = 8
    embed_dim: int = 32
    num_heads: int = 2
    mlp_dim: int = 64
    num_layers: int = 2
    # ProposedEnsemble
    members: tuple = field(default=())

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if not isinstance(self.input_side, int) or self.input_side <= 0:
            raise ValueError(f"input_side must be a positive int, got {self.input_side!r}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.kind == "BasicCnn":
            if len(self.widths) != 4 or min(self.widths) < 1:
                raise ValueError(f"BasicCnn needs four positive widths, got {self.widths}")
            if self.input_side < 4:
                raise ValueError("BasicCnn needs input_side >= 4 (two 2x2 pools)")
        if self.kind == "ViT":
            if self.input_side % self.patch_size:
                raise ValueError(
                    f"input_side {self.input_side} not divisible by patch_size {self.patch_size}"
                )
            if self.embed_dim % self.num_heads:
                raise ValueError(
                    f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
                )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["members"] = [m.to_dict() for m in self.members]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        d["widths"] = tuple(d.get("widths", (4, 4, 8, 8)))
        d["members"] = tuple(cls.from_dict(m) for m in d.get("members", ()))
        return cls(**d)


class Model:
    """Named parameters plus a forward pass ``[N, 1, H, W] -> [N, num_classes]``."""

    def __init__(self, spec: ModelSpec, params: dict):
        self.spec = spec
        self.params = params

    def __call__(self, x) -> Tensor:
        return self.forward(x)

    def forward(self, x) -> Tensor:
        raise NotImplementedError

    def parameters(self) -> list:
        return list(self.params.values())

    def named_parameters(self) -> list:
        return list(self.params.items())

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def state_dict(self) -> dict:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, state: dict) -> None:
        for name, value in state.items():
            if name not in self.params:
                raise UnknownParameterError(f"unknown parameter {name!r}")
            if self.params[name].shape != value.shape:
                raise ModelFormatError(
                    f"parameter {name!r}: shape {value.shape} != expected {self.params[name].shape}"
                )
            self.params[name].data[...] = value
        missing = set(self.params) - set(state)
        if missing:
            raise MissingParameterError(f"missing parameters: {sorted(missing)}")

    def _input(self, x) -> Tensor:
        """Validate a ``[N, 1, side, side]`` batch and standardize each image.

        Every image is shifted to zero mean and scaled to unit variance, so the
        first layer sees O(1) contrast whatever the brightness of the scan.
        """
        x = x if isinstance(x, Tensor) else Tensor(x)
        side = self.spec.input_side
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2] != side or x.shape[3] != side:
            raise ValueError(f"expected batch [N, 1, {side}, {side}], got {x.shape}")
        return standardize_images(x)


def standardize_images(x: Tensor) -> Tensor:
    """Per-image zero mean and unit variance over all pixels of ``[N, 1, H, W]``."""
    n = x.shape[0]
    size = x.data[0].size
    flat = T.reshape(x, (n, size))
    ones, zeros = Tensor(np.ones(size)), Tensor(np.zeros(size))
    return T.reshape(T.layer_norm(flat, ones, zeros, INPUT_EPS), x.shape)


def _glorot(rng, shape, fan_in, fan_out) -> Tensor:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-a, a, size=shape), requires_grad=True)


def _conv_param(rng, c_out, c_in, k=3) -> tuple:
    w = _glorot(rng, (c_out, c_in, k, k), c_in * k * k, c_out * k * k)
    return w, Tensor(np.zeros(c_out), requires_grad=True)


def _dense_param(rng, d_in, d_out) -> tuple:
    return _glorot(rng, (d_in, d_out), d_in, d_out), Tensor(np.zeros(d_out), requires_grad=True)


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = T.matmul(x, weight)
    return out if bias is None else T.add(out, bias)


# ------------------------------------------------------------------ BasicCnn


class BasicCnn(Model):
    """conv-relu x2, pool, conv-relu x2, pool, flatten, dense."""

    def forward(self, x) -> Tensor:
        h = self._input(x)
        p = self.params
        for i in range(1, 5):
            h = T.relu(T.conv2d(h, p[f"conv{i}.weight"], p[f"conv{i}.bias"], 1, 1))
            if i in (2, 4):
                h = T.max_pool2d(h, 2, 2)
        h = T.reshape(h, (h.shape[0], -1))
        return dense(h, p["dense.weight"], p["dense.bias"])


def basic_cnn_features(spec: ModelSpec) -> int:
    side = spec.input_side // 2 // 2
    return spec.widths[3] * side * side


def build_basic_cnn(spec: ModelSpec) -> BasicCnn:
    spec.validate()
    if spec.kind != "BasicCnn":
        raise ValueError(f"build_basic_cnn needs kind BasicCnn, got {spec.kind}")
    rng = np.random.default_rng(spec.seed)
    params = {}
    c_in = 1
    for i, c_out in enumerate(spec.widths, start=1):
        params[f"conv{i}.weight"], params[f"conv{i}.bias"] = _conv_param(rng, c_out, c_in)
        c_in = c_out
    params["dense.weight"], params["dense.bias"] = _dense_param(
        rng, basic_cnn_features(spec), spec.num_classes
    )
    return BasicCnn(spec, params)


# --------------------------------------------------------------- ResNetStyle


def residual_block(x: Tensor, params) -> Tensor:
    """``relu(conv2(relu(conv1(x))) + x)`` with 3x3 same-padding convolutions.

    ``params`` is ``(w1, b1, w2, b2)``.
    """
    w1, b1, w2, b2 = params
    channels = x.shape[-3]
    for w in (w1, w2):
        if w.shape[0] != channels or w.shape[1] != channels:
            raise ValueError(
                f"residual_block: input has {channels} channels but kernels are {w.shape}"
            )
    pad = w1.shape[-1] // 2
    h = T.relu(T.conv2d(x, w1, b1, 1, pad))
    h = T.conv2d(h, w2, b2, 1, w2.shape[-1] // 2)
    return T.relu(T.add(h, x))


class ResNetStyle(Model):
    """Strided stem conv, residual blocks, global average pool, dense."""

    def forward(self, x) -> Tensor:
        h = self._input(x)
        p = self.params
        h = T.relu(T.conv2d(h, p["stem.weight"], p["stem.bias"], self.spec.stem_stride, 1))
        for i in range(self.spec.blocks):
            h = residual_block(h, self.block_params(i))
        h = T.mean(h, axis=(2, 3))
        return dense(h, p["dense.weight"], p["dense.bias"])

    def block_params(self, i: int) -> tuple:
        p = self.params
        return tuple(p[f"block{i}.{n}"] for n in ("conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias"))


def build_resnet_style(spec: ModelSpec) -> ResNetStyle:
    spec.validate()
    if spec.kind != "ResNetStyle":
        raise ValueError(f"build_resnet_style needs kind ResNetStyle, got {spec.kind}")
    rng = np.random.default_rng(spec.seed)
    params = {}
    params["stem.weight"], params["stem.bias"] = _conv_param(rng, spec.width, 1)
    for i in range(spec.blocks):
        for j in (1, 2):
            w, b = _conv_param(rng, spec.width, spec.width)
            params[f"block{i}.conv{j}.weight"] = w
            params[f"block{i}.conv{j}.bias"] = b
    params["dense.weight"], params["dense.bias"] = _dense_param(rng, spec.width, spec.num_classes)
    return ResNetStyle(spec, params)


# ----------------------------------------------------------------------- ViT


def _patch_grid(x: Tensor, patch_size: int) -> tuple:
    h, w = x.shape[-2:]
    if h % patch_size or w % patch_size:
        raise ValueError(f"image {h}x{w} not divisible by patch size {patch_size}")
    return h // patch_size, w // patch_size


def patchify(image, patch_size: int) -> Tensor:
    """``[1, H, W]`` to ``[num_patches, patch_size**2]``; batched ``[N, 1, H, W]`` keeps N.

    Patches are taken in row-major order, pixels within a patch row-major too.
    """
    x = image if isinstance(image, Tensor) else Tensor(image)
    gh, gw = _patch_grid(x, patch_size)
    p = patch_size
    batched = x.ndim == 4
    n = x.shape[0] if batched else 1
    h = T.reshape(x, (n, gh, p, gw, p))
    h = T.transpose(h, (0, 1, 3, 2, 4))
    h = T.reshape(h, (n, gh * gw, p * p))
    return h if batched else T.reshape(h, (gh * gw, p * p))


def unpatchify(patches, patch_size: int, side: int) -> np.ndarray:
    """Inverse of :func:`patchify` for a single square image."""
    data = patches.data if isinstance(patches, Tensor) else np.asarray(patches)
    g = side // patch_size
    p = patch_size
    return data.reshape(g, g, p, p).transpose(0, 2, 1, 3).reshape(1, side, side)


def patch_embed_and_position(patches: Tensor, projection: Tensor, positions: Tensor) -> Tensor:
    if positions.shape[0] != patches.shape[-2]:
        raise ValueError(
            f"position table has {positions.shape[0]} rows but there are {patches.shape[-2]} patches"
        )
    return T.add(T.matmul(patches, projection), positions)


def attention_block(x: Tensor, params: dict, num_heads: int, weights_out: list | None = None) -> Tensor:
    """Pre-norm transformer block on ``[T, D]`` or ``[N, T, D]``.

    ``params`` keys: ln1.gamma, ln1.beta, attn.wq, attn.wk, attn.wv, attn.wo,
    ln2.gamma, ln2.beta, ffn.w1, ffn.b1, ffn.w2, ffn.b2.  If ``weights_out`` is
    given, the attention weights ``[N, heads, T, T]`` are appended to it.
    """
    d = x.shape[-1]
    if d % num_heads:
        raise ValueError(f"embed dim {d} not divisible by {num_heads} heads")
    single = x.ndim == 2
    if single:
        x = T.reshape(x, (1,) + x.shape)
    n, t, _ = x.shape
    dh = d // num_heads

    def heads(h):
        return T.transpose(T.reshape(h, (n, t, num_heads, dh)), (0, 2, 1, 3))

    h = T.layer_norm(x, params["ln1.gamma"], params["ln1.beta"], LN_EPS)
    q = heads(T.matmul(h, params["attn.wq"]))
    k = heads(T.matmul(h, params["attn.wk"]))
    v = heads(T.matmul(h, params["attn.wv"]))
    scores = T.mul_scalar(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    attn = T.softmax(scores, axis=-1)
    if weights_out is not None:
        weights_out.append(attn.data)
    ctx = T.reshape(T.transpose(T.matmul(attn, v), (0, 2, 1, 3)), (n, t, d))
    x = T.add(x, T.matmul(ctx, params["attn.wo"]))

    h = T.layer_norm(x, params["ln2.gamma"], params["ln2.beta"], LN_EPS)
    h = T.relu(dense(h, params["ffn.w1"], params["ffn.b1"]))
    x = T.add(x, dense(h, params["ffn.w2"], params["ffn.b2"]))
    return T.reshape(x, x.shape[1:]) if single else x


class ViT(Model):
    """Patch embedding, learned positions, transformer blocks, token mean-pool, dense."""

    attention_maps: list

    def forward(self, x) -> Tensor:
        x = self._input(x)
        s = self.spec
        p = self.params
        h = patch_embed_and_position(patchify(x, s.patch_size), p["embed.projection"], p["embed.positions"])
        self.attention_maps = []
        for i in range(s.num_layers):
            prefix = f"layer{i}."
            block = {k[len(prefix):]: v for k, v in p.items() if k.startswith(prefix)}
            h = attention_block(h, block, s.num_heads, self.attention_maps)
        h = T.mean(h, axis=1)
        return dense(h, p["head.weight"], p["head.bias"])


def build_vit(spec: ModelSpec) -> ViT:
    spec.validate()
    if spec.kind != "ViT":
        raise ValueError(f"build_vit needs kind ViT, got {spec.kind}")
    rng = np.random.default_rng(spec.seed)
    d, m = spec.embed_dim, spec.mlp_dim
    patch_dim = spec.patch_size ** 2
    num_patches = (spec.input_side // spec.patch_size) ** 2
    params = {
        "embed.projection": _glorot(rng, (patch_dim, d), patch_dim, d),
        "embed.positions": Tensor(np.zeros((num_patches, d)), requires_grad=True),
    }
    for i in range(spec.num_layers):
        pre = f"layer{i}."
        params[pre + "ln1.gamma"] = Tensor(np.ones(d), requires_grad=True)
        params[pre + "ln1.beta"] = Tensor(np.zeros(d), requires_grad=True)
        for name in ("wq", "wk", "wv", "wo"):
            params[pre + "attn." + name] = _glorot(rng, (d, d), d, d)
        params[pre + "ln2.gamma"] = Tensor(np.ones(d), requires_grad=True)
        params[pre + "ln2.beta"] = Tensor(np.zeros(d), requires_grad=True)
        params[pre + "ffn.w1"], params[pre + "ffn.b1"] = _dense_param(rng, d, m)
        params[pre + "ffn.w2"], params[pre + "ffn.b2"] = _dense_param(rng, m, d)
    params["head.weight"], params["head.bias"] = _dense_param(rng, d, spec.num_classes)
    return ViT(spec, params)


# ---------------------------------------------------------- ProposedEnsemble


class ProposedEnsemble(Model):
    """Log of the mean of the members' softmax probabilities."""

    def __init__(self, spec: ModelSpec, members: list):
        self.members = members
        params = {}
        for prefix, member in zip(("resnet", "vit"), members):
            for name, p in member.params.items():
                params[f"{prefix}.{name}"] = p
        super().__init__(spec, params)

    def forward(self, x) -> Tensor:
        probs = [T.softmax(m.forward(x), axis=-1) for m in self.members]
        return T.log(T.mul_scalar(T.add(probs[0], probs[1]), 0.5))


def build_proposed(spec: ModelSpec, resnet: Model, vit: Model) -> ProposedEnsemble:
    if spec.kind != "ProposedEnsemble":
        raise ValueError(f"build_proposed needs kind ProposedEnsemble, got {spec.kind}")
    classes = {spec.num_classes, resnet.spec.num_classes, vit.spec.num_classes}
    if len(classes) != 1:
        raise ValueError(
            f"class-count mismatch: ensemble {spec.num_classes}, resnet "
            f"{resnet.spec.num_classes}, vit {vit.spec.num_classes}"
        )
    spec = replace(spec, input_side=resnet.spec.input_side, members=(resnet.spec, vit.spec))
    return ProposedEnsemble(spec, [resnet, vit])


_BUILDERS = {
    "BasicCnn": build_basic_cnn,
    "ResNetStyle": build_resnet_style,
    "ViT": build_vit,
}


def build_model(spec: ModelSpec) -> Model:
    if spec.kind == "ProposedEnsemble":
        resnet_spec, vit_spec = spec.members
        return build_proposed(spec, build_model(resnet_spec), build_model(vit_spec))
    spec.validate()
    return _BUILDERS[spec.kind](spec)


# ---------------------------------------------------------------- file format


class ModelFormatError(ValueError):
    pass


class VersionError(ModelFormatError):
    pass


class TruncatedFileError(ModelFormatError):
    pass


class UnknownParameterError(ModelFormatError):
    pass


class MissingParameterError(ModelFormatError):
    pass


def write_params(params, path) -> None:
    """Write ``(name, array)`` pairs in the LBM1 binary layout."""
    items = list(params.items() if isinstance(params, dict) else params)
    chunks = [MAGIC, struct.pack("<I", len(items))]
    for name, value in items:
        arr = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_params(path) -> dict:
    """Parse an LBM1 file into ``{name: float64 array}`` in file order."""
    buf = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise TruncatedFileError(f"{path}: truncated at byte {pos} (wanted {n} more)")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    magic = take(4)
    if magic != MAGIC:
        raise VersionError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    (count,) = struct.unpack("<I", take(4))
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64)
        out[name] = values.reshape(dims)
    if pos != len(buf):
        raise ModelFormatError(f"{path}: {len(buf) - pos} trailing bytes")
    return out


def spec_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_model(model: Model, path) -> None:
    """Write parameters to ``path`` and the architecture to ``<path>.json``."""
    write_params(model.params, path)
    spec_path(path).write_text(json.dumps(model.spec.to_dict(), indent=2, sort_keys=True) + "\n")


def load_model(path, spec: ModelSpec | None = None) -> Model:
    params = read_params(path)
    if spec is None:
        sidecar = spec_path(path)
        if not sidecar.exists():
            raise ModelFormatError(f"no architecture given and {sidecar} is missing")
        spec = ModelSpec.from_dict(json.loads(sidecar.read_text()))
    model = build_model(spec)
    model.load_state_dict(params)
    return model
