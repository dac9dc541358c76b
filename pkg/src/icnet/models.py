"""Small network builders and the conv -> IC layer replacement policy."""

import contextlib
import copy
import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from icnet import autograd as ag
from icnet.ic_conv import CostReport, ICConvParams, cost_report, ic_conv, init_ic_conv
from icnet.tensor_core import ConvGeometry, ShapeError, resolve_dtype

POLICIES = ("all_3x3", "all", "first_1x1_in_block", "none")


@dataclass
class LayerSpec:
    kind: str
    params: dict = field(default_factory=dict)


@dataclass
class ModelSpec:
    name: str
    input_shape: tuple
    num_classes: int
    layers: list

    def to_dict(self):
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": [{"kind": l.kind, **l.params} for l in self.layers],
        }


def _he_normal(rng, shape, fan_in, dtype):
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), shape).astype(dtype)


class Layer:
    kind = "layer"

    def parameters(self):
        return {}

    def buffers(self):
        return {}

    def forward(self, x, training):
        raise NotImplementedError

    def output_shape(self, shape):
        return shape

    def describe(self):
        return {"kind": self.kind}


class Conv(Layer):
    kind = "conv"

    def __init__(self, geom, rng, dtype, role=None):
        self.geom = geom
        self.role = role
        k = geom.kernel_size
        self.weight = ag.Variable(
            _he_normal(rng, (k, k, geom.in_channels, geom.out_channels), k * k * geom.in_channels, dtype),
            requires_grad=True,
        )

    def parameters(self):
        return {"weight": self.weight}

    def forward(self, x, training):
        return ag.conv2d(x, self.weight, self.geom)

    def output_shape(self, shape):
        h, w, c = shape
        if c != self.geom.in_channels:
            raise ShapeError(f"conv expects {self.geom.in_channels} channels, got {c}")
        oh, ow = self.geom.output_hw(h, w)
        return (oh, ow, self.geom.out_channels)

    def describe(self):
        return {"kind": self.kind, **self.geom.to_dict()}


class ICConv(Conv):
    kind = "ic_conv"

    def __init__(self, params, role=None):
        self.geom = params.geom
        self.role = role
        self.weight = ag.Variable(params.W, requires_grad=True)
        self.wp = ag.Variable(params.Wp, requires_grad=True)
        self.alpha = ag.Variable(np.asarray(params.alpha, dtype=params.W.dtype), requires_grad=params.alpha_trainable)
        self.b1 = None if params.b1 is None else ag.Variable(params.b1, requires_grad=True)
        self.b2 = None if params.b2 is None else ag.Variable(params.b2, requires_grad=True)

    def parameters(self):
        out = {"weight": self.weight, "wp": self.wp, "alpha": self.alpha}
        if self.b1 is not None:
            out["b1"] = self.b1
            out["b2"] = self.b2
        return out

    def forward(self, x, training):
        return ic_conv(x, self.weight, self.wp, self.alpha, self.geom, self.b1, self.b2)

    def describe(self):
        d = super().describe()
        d["biases"] = self.b1 is not None
        d["alpha_trainable"] = bool(self.alpha.requires_grad)
        return d


class BatchNorm(Layer):
    kind = "batchnorm"

    def __init__(self, channels, dtype, momentum=0.1):
        self.channels = channels
        self.gamma = ag.Variable(np.ones(channels, dtype), requires_grad=True)
        self.beta = ag.Variable(np.zeros(channels, dtype), requires_grad=True)
        self.state = ag.BatchNormState(np.zeros(channels, dtype), np.ones(channels, dtype), momentum)

    def parameters(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.state.mean, "running_var": self.state.var}

    def load_buffer(self, name, value):
        if name == "running_mean":
            self.state.mean = value
        else:
            self.state.var = value

    def forward(self, x, training):
        return ag.batch_norm(x, self.gamma, self.beta, self.state, training)

    def describe(self):
        return {"kind": self.kind, "channels": self.channels}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, training):
        return ag.relu(x)


class MaxPool(Layer):
    kind = "maxpool"

    def __init__(self, size=2):
        self.size = size

    def forward(self, x, training):
        return ag.max_pool2d(x, self.size)

    def output_shape(self, shape):
        h, w, c = shape
        return ((h - self.size) // self.size + 1, (w - self.size) // self.size + 1, c)

    def describe(self):
        return {"kind": self.kind, "size": self.size}


class AvgPool(Layer):
    """Global average pool to one value per channel."""

    kind = "avgpool"

    def forward(self, x, training):
        return ag.global_avg_pool(x)

    def output_shape(self, shape):
        return (shape[-1],)


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, training):
        return ag.flatten(x)

    def output_shape(self, shape):
        return (int(np.prod(shape)),)


class Dense(Layer):
    kind = "dense"

    def __init__(self, fan_in, units, rng, dtype):
        self.fan_in, self.units = fan_in, units
        bound = 1.0 / math.sqrt(fan_in)
        self.weight = ag.Variable(rng.uniform(-bound, bound, (fan_in, units)).astype(dtype), requires_grad=True)
        self.bias = ag.Variable(np.zeros(units, dtype), requires_grad=True)

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x, training):
        return ag.bias_add(ag.matmul(x, self.weight), self.bias)

    def output_shape(self, shape):
        if shape != (self.fan_in,):
            raise ShapeError(f"dense expects ({self.fan_in},), got {shape}")
        return (self.units,)

    def describe(self):
        return {"kind": self.kind, "in": self.fan_in, "units": self.units}


class ResidualBlock(Layer):
    """Two 3x3 convs with batch norm and an identity (or 1x1 projection) shortcut."""

    kind = "residual"

    def __init__(self, cin, cout, stride, rng, dtype):
        self.cin, self.cout, self.stride = cin, cout, stride
        self.conv1 = Conv(ConvGeometry(3, stride, 1, cin, cout), rng, dtype, role="main")
        self.bn1 = BatchNorm(cout, dtype)
        self.conv2 = Conv(ConvGeometry(3, 1, 1, cout, cout), rng, dtype, role="main")
        self.bn2 = BatchNorm(cout, dtype)
        self.shortcut = None
        self.bn_sc = None
        if stride != 1 or cin != cout:
            self.shortcut = Conv(ConvGeometry(1, stride, 0, cin, cout), rng, dtype, role="shortcut")
            self.bn_sc = BatchNorm(cout, dtype)

    def children(self):
        out = {"conv1": self.conv1, "bn1": self.bn1, "conv2": self.conv2, "bn2": self.bn2}
        if self.shortcut is not None:
            out["shortcut"] = self.shortcut
            out["bn_sc"] = self.bn_sc
        return out

    def forward(self, x, training):
        h = ag.relu(self.bn1.forward(self.conv1.forward(x, training), training))
        h = self.bn2.forward(self.conv2.forward(h, training), training)
        sc = x if self.shortcut is None else self.bn_sc.forward(self.shortcut.forward(x, training), training)
        return ag.relu(ag.add(h, sc))

    def output_shape(self, shape):
        out = self.conv2.output_shape(self.conv1.output_shape(shape))
        sc = shape if self.shortcut is None else self.shortcut.output_shape(shape)
        if sc != out:
            raise ShapeError(f"shortcut shape {sc} does not match block output {out}")
        return out

    def describe(self):
        return {"kind": self.kind, **{k: v.describe() for k, v in self.children().items()}}


def _iter_named(layers):
    for i, layer in enumerate(layers):
        if isinstance(layer, ResidualBlock):
            for cname, child in layer.children().items():
                yield f"{i}.{cname}", child, layer, cname
        else:
            yield str(i), layer, None, None


class Model:
    def __init__(self, spec, layers, dtype, seed):
        self.spec = spec
        self.layers = layers
        self.dtype = np.dtype(dtype)
        self.seed = seed

    def forward(self, x, training=False):
        if not isinstance(x, ag.Variable):
            x = ag.Variable(np.asarray(x, dtype=self.dtype))
        for layer in self.layers:
            x = layer.forward(x, training)
        return x

    __call__ = forward

    def logits(self, x, batch_size=256):
        """Evaluation-mode logits as a numpy array."""
        outs = []
        with ag.no_grad():
            for i in range(0, len(x), batch_size):
                outs.append(self.forward(x[i:i + batch_size], training=False).value)
        return np.concatenate(outs)

    def named_layers(self):
        for name, layer, _, _ in _iter_named(self.layers):
            yield name, layer

    def named_parameters(self):
        out = {}
        for name, layer in self.named_layers():
            for pname, v in layer.parameters().items():
                out[f"{name}.{pname}"] = v
        return out

    def trainable_parameters(self):
        return {k: v for k, v in self.named_parameters().items() if v.requires_grad}

    def named_buffers(self):
        out = {}
        for name, layer in self.named_layers():
            for bname, v in layer.buffers().items():
                out[f"{name}.{bname}"] = v
        return out

    def state_dict(self):
        state = {k: v.value for k, v in self.named_parameters().items()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state):
        params = self.named_parameters()
        layers = dict(self.named_layers())
        expected = set(params) | set(self.named_buffers())
        missing = expected - set(state)
        if missing:
            raise KeyError(f"state is missing {sorted(missing)}")
        for key, value in state.items():
            if key in params:
                if params[key].shape != np.shape(value):
                    raise ShapeError(f"{key}: shape {np.shape(value)} != {params[key].shape}")
                params[key].value = np.array(value, dtype=self.dtype)
            elif key in expected:
                lname, bname = key.rsplit(".", 1)
                layers[lname].load_buffer(bname, np.array(value, dtype=self.dtype))

    def ic_layers(self):
        return [(n, l) for n, l in self.named_layers() if isinstance(l, ICConv)]

    def mean_alpha(self):
        ics = self.ic_layers()
        return float(np.mean([l.alpha.item() for _, l in ics])) if ics else 0.0

    def set_alpha(self, value):
        for _, layer in self.ic_layers():
            layer.alpha.value = np.asarray(value, dtype=self.dtype)

    @contextlib.contextmanager
    def frozen_stats(self):
        """Run training-mode forwards without moving the batch-norm running statistics."""
        saved = {k: v.copy() for k, v in self.named_buffers().items()}
        try:
            yield self
        finally:
            layers = dict(self.named_layers())
            for key, value in saved.items():
                lname, bname = key.rsplit(".", 1)
                layers[lname].load_buffer(bname, value)

    def describe(self):
        return {
            "spec": self.spec.to_dict(),
            "dtype": self.dtype.name,
            "layers": [layer.describe() for layer in self.layers],
        }

    def spec_hash(self):
        blob = json.dumps(self.describe(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def shape_audit(self, batch=2):
        """Compare declared output shapes with an actual forward pass, layer by layer."""
        shape = tuple(self.spec.input_shape)
        x = ag.Variable(np.zeros((batch,) + shape, dtype=self.dtype))
        with ag.no_grad():
            for i, layer in enumerate(self.layers):
                shape = layer.output_shape(shape)
                x = layer.forward(x, training=False)
                if x.shape[1:] != shape:
                    raise ShapeError(f"layer {i} ({layer.kind}) produced {x.shape[1:]}, expected {shape}")
        return shape


def tiny_cnn_spec(num_classes=10):
    return ModelSpec(
        "tiny-cnn",
        (28, 28, 1),
        num_classes,
        [
            LayerSpec("conv", {"k": 3, "out": 16, "stride": 1, "padding": 1}),
            LayerSpec("batchnorm"),
            LayerSpec("relu"),
            LayerSpec("maxpool", {"size": 2}),
            LayerSpec("conv", {"k": 3, "out": 32, "stride": 1, "padding": 1}),
            LayerSpec("batchnorm"),
            LayerSpec("relu"),
            LayerSpec("maxpool", {"size": 2}),
            LayerSpec("flatten"),
            LayerSpec("dense", {"units": num_classes}),
        ],
    )


def tiny_resnet_spec(num_classes=10, widths=(16, 32, 64)):
    layers = [
        LayerSpec("conv", {"k": 3, "out": widths[0], "stride": 1, "padding": 1}),
        LayerSpec("batchnorm"),
        LayerSpec("relu"),
    ]
    for i, wdt in enumerate(widths):
        layers.append(LayerSpec("residual", {"out": wdt, "stride": 1 if i == 0 else 2}))
    layers += [LayerSpec("avgpool"), LayerSpec("dense", {"units": num_classes})]
    return ModelSpec("tiny-resnet", (32, 32, 3), num_classes, layers)


REGISTRY = {"tiny-cnn": tiny_cnn_spec, "tiny-resnet": tiny_resnet_spec}


def get_spec(name, num_classes=10):
    try:
        return REGISTRY[name](num_classes)
    except KeyError:
        raise ValueError(f"unknown model spec {name!r}; choose from {sorted(REGISTRY)}") from None


def build(spec, seed=0, dtype=None):
    """Instantiate ``spec`` with parameters drawn deterministically from ``seed``."""
    if isinstance(spec, str):
        spec = get_spec(spec)
    dt = resolve_dtype(dtype)
    shape = tuple(spec.input_shape)
    layers = []
    for i, ls in enumerate(spec.layers):
        rng = np.random.default_rng([seed, i])
        p = ls.params
        try:
            if ls.kind == "conv":
                geom = ConvGeometry(p["k"], p.get("stride", 1), p.get("padding", 0), shape[-1], p["out"])
                layer = Conv(geom, rng, dt)
            elif ls.kind == "batchnorm":
                layer = BatchNorm(shape[-1], dt)
            elif ls.kind == "relu":
                layer = ReLU()
            elif ls.kind == "maxpool":
                layer = MaxPool(p.get("size", 2))
            elif ls.kind == "avgpool":
                layer = AvgPool()
            elif ls.kind == "flatten":
                layer = Flatten()
            elif ls.kind == "dense":
                if len(shape) != 1:
                    raise ShapeError(f"dense needs a flat input, got {shape}")
                layer = Dense(shape[0], p["units"], rng, dt)
            elif ls.kind == "residual":
                layer = ResidualBlock(shape[-1], p["out"], p.get("stride", 1), rng, dt)
            else:
                raise ValueError(f"unknown layer kind {ls.kind!r}")
            shape = layer.output_shape(shape)
        except ShapeError as exc:
            raise ShapeError(f"layer {i} ({ls.kind}): {exc}") from exc
        layers.append(layer)
    if shape != (spec.num_classes,):
        raise ShapeError(f"model output shape {shape} does not match {spec.num_classes} classes")
    return Model(spec, layers, dt, seed)


def _selected(policy, name, layer, block_name):
    k = layer.geom.kernel_size
    if policy == "all":
        return True
    if policy == "all_3x3":
        return k == 3
    if policy == "first_1x1_in_block":
        return block_name == "conv1" and k == 1
    return False


def replace_with_ic(model, policy, mode="from_pretrained", seed=0, alpha_mode="trainable", biases=False):
    """Return a copy of ``model`` whose selected convs are IC layers.

    Every other parameter and buffer is copied by value. Layers that are already
    IC layers count as selected, so applying a policy twice changes nothing.
    """
    if policy not in POLICIES:
        raise ValueError(f"unknown replacement policy {policy!r}")
    new = copy.deepcopy(model)
    if policy == "none":
        return new
    targets = [
        (i, name, layer, parent, cname)
        for i, (name, layer, parent, cname) in enumerate(_iter_named(new.layers))
        if isinstance(layer, Conv) and _selected(policy, name, layer, cname)
    ]
    if not targets:
        raise ValueError(f"policy {policy!r} selects no convolution in {model.spec.name}")
    for i, name, layer, parent, cname in targets:
        if isinstance(layer, ICConv):
            continue
        params = init_ic_conv(
            layer.geom,
            mode,
            pretrained=layer.weight.value if mode == "from_pretrained" else None,
            alpha_mode=alpha_mode,
            rng=np.random.default_rng([seed, 7919, i]),
            biases=biases,
            dtype=new.dtype,
        )
        ic = ICConv(params, role=layer.role)
        if parent is None:
            new.layers[int(name)] = ic
        else:
            setattr(parent, cname, ic)
    return new


def spec_from_dict(d):
    layers = [LayerSpec(l["kind"], {k: v for k, v in l.items() if k != "kind"}) for l in d["layers"]]
    return ModelSpec(d["name"], tuple(d["input_shape"]), d["num_classes"], layers)


def from_description(desc, seed=0):
    """Rebuild the architecture recorded by ``Model.describe``; parameters are placeholders."""
    model = build(spec_from_dict(desc["spec"]), seed=seed, dtype=desc["dtype"])
    flat = []
    for layer_desc in desc["layers"]:
        if layer_desc["kind"] == "residual":
            flat.extend(v for k, v in layer_desc.items() if k != "kind")
        else:
            flat.append(layer_desc)
    named = list(_iter_named(model.layers))
    if len(flat) != len(named):
        raise ValueError("description does not match the recorded spec")
    for (name, layer, parent, cname), d in zip(named, flat):
        if d["kind"] != "ic_conv":
            continue
        g = layer.geom
        k, cin, cout = g.kernel_size, g.in_channels, g.out_channels
        zeros = np.zeros(cout, model.dtype) if d.get("biases") else None
        params = ICConvParams(
            np.zeros((k, k, cin, cout), model.dtype),
            np.zeros((cin, cout), model.dtype),
            0.0,
            g,
            zeros,
            None if zeros is None else zeros.copy(),
            d.get("alpha_trainable", False),
        )
        ic = ICConv(params, role=layer.role)
        if parent is None:
            model.layers[int(name)] = ic
        else:
            setattr(parent, cname, ic)
    return model


@dataclass
class ModelCost:
    layers: list
    total: CostReport

    def replaced_base_params(self):
        return sum(r.base_params for _, kind, r in self.layers if kind == "ic_conv")

    def to_dict(self):
        return {
            "layers": [{"name": n, "kind": k, **r.to_dict()} for n, k, r in self.layers],
            "total": self.total.to_dict(),
        }


def count_model(model):
    """Per-conv-layer cost reports (IC layers carry their overhead) and their sum."""
    shape = tuple(model.spec.input_shape)
    rows = []

    def visit(name, layer, shape):
        out = layer.output_shape(shape)
        rows.append((name, layer.kind, cost_report(layer.geom, out[0], out[1], ic=isinstance(layer, ICConv))))
        return out

    for i, layer in enumerate(model.layers):
        if isinstance(layer, ResidualBlock):
            h = visit(f"{i}.conv1", layer.conv1, shape)
            visit(f"{i}.conv2", layer.conv2, h)
            if layer.shortcut is not None:
                visit(f"{i}.shortcut", layer.shortcut, shape)
            shape = layer.output_shape(shape)
        elif isinstance(layer, Conv):
            shape = visit(str(i), layer, shape)
        else:
            shape = layer.output_shape(shape)
    total = CostReport(0, 0, 0, 0)
    for _, _, r in rows:
        total = total + r
    return ModelCost(rows, total)
