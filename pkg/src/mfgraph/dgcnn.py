"""Deep graph convolutional network with SortPooling, in plain numpy.

Forward path for one graph with n nodes:

    P      = D~^-1 (A + I)                     (row-stochastic propagation)
    Z^t+1  = tanh(P Z^t W^t),   Z^0 = X
    Zcat   = [Z^1 | ... | Z^h]                 (n x sum(c_t))
    Zsp    = first k rows of Zcat sorted by the last channel, descending
    E      = tanh(w . Zsp)                     (learned weighted row sum)
    probs  = softmax(MLP(E))                   (tanh hidden layers + dropout)

Everything runs in float64. Gradients are exact and analytic; SortPooling
is treated as a fixed row selection for the current forward pass.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import CompatibilityError, SchemaError
from .graph import ATTR_WIDTH

PROB_FLOOR = 1e-12
CHECKPOINT_MAGIC = b"MFGRAPH-CHECKPOINT"
CHECKPOINT_VERSION = 1


@dataclass
class DgcnnConfig:
    conv_channels: tuple = (48, 48, 48)
    pooling_rate: float = 0.75
    k: int | None = None  # explicit k overrides pooling_rate
    mlp_hidden: tuple = (1024, 1024)
    dropout: float = 0.5
    n_classes: int = 2
    input_width: int = ATTR_WIDTH
    activation: str = "tanh"
    aggregation_activation: str = "tanh"

    def __post_init__(self):
        self.conv_channels = tuple(int(c) for c in self.conv_channels)
        self.mlp_hidden = tuple(int(h) for h in self.mlp_hidden)
        if not self.conv_channels or min(self.conv_channels) < 1:
            raise ValueError("need at least one conv layer with >= 1 channel")
        if min(self.mlp_hidden, default=1) < 1:
            raise ValueError("hidden layer sizes must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.k is None and not 0.0 < self.pooling_rate <= 1.0:
            raise ValueError("pooling rate must lie in (0, 1]")
        if self.k is not None and self.k < 1:
            raise ValueError("k must be >= 1")
        for act in (self.activation, self.aggregation_activation):
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")

    @property
    def embedding_width(self):
        return sum(self.conv_channels)

    def to_dict(self):
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        d["mlp_hidden"] = list(self.mlp_hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


# activation -> (f, f' expressed through the output y = f(x))
ACTIVATIONS = {
    "tanh": (np.tanh, lambda y: 1.0 - y * y),
    "identity": (lambda x: x, lambda y: np.ones_like(y)),
}


@dataclass
class ModelParams:
    conv: list  # W^t, c_t x c_{t+1}
    agg: np.ndarray  # length k
    mlp_w: list
    mlp_b: list

    def named(self):
        """(name, array) pairs in a fixed order; arrays are shared, not copied."""
        out = [(f"conv.{i}", w) for i, w in enumerate(self.conv)]
        out.append(("agg", self.agg))
        for i, (w, b) in enumerate(zip(self.mlp_w, self.mlp_b)):
            out.append((f"mlp.{i}.w", w))
            out.append((f"mlp.{i}.b", b))
        return out

    def arrays(self):
        return [a for _, a in self.named()]

    def copy(self):
        return ModelParams([w.copy() for w in self.conv], self.agg.copy(),
                           [w.copy() for w in self.mlp_w], [b.copy() for b in self.mlp_b])

    def zeros_like(self):
        return ModelParams([np.zeros_like(w) for w in self.conv], np.zeros_like(self.agg),
                           [np.zeros_like(w) for w in self.mlp_w], [np.zeros_like(b) for b in self.mlp_b])

    @property
    def k(self):
        return len(self.agg)


def _glorot(rng, fan_in, fan_out, shape):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_mlp(sizes, rng, init="glorot"):
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        if init == "zeros":
            weights.append(np.zeros((fan_in, fan_out)))
        else:
            weights.append(_glorot(rng, fan_in, fan_out, (fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return weights, biases


def init_params(cfg: DgcnnConfig, k: int, rng: np.random.Generator, init: str = "glorot") -> ModelParams:
    widths = (cfg.input_width,) + cfg.conv_channels
    if init == "zeros":
        conv = [np.zeros((a, b)) for a, b in zip(widths[:-1], widths[1:])]
        agg = np.zeros(k)
    else:
        conv = [_glorot(rng, a, b, (a, b)) for a, b in zip(widths[:-1], widths[1:])]
        agg = _glorot(rng, k, 1, (k,))
    mlp_w, mlp_b = init_mlp((cfg.embedding_width,) + cfg.mlp_hidden + (cfg.n_classes,), rng, init)
    return ModelParams(conv, agg, mlp_w, mlp_b)


# --------------------------------------------------------------------------
# graph layers
# --------------------------------------------------------------------------

def propagation_matrix(n: int, edges) -> np.ndarray:
    """D~^-1 (A + I) for an undirected edge list."""
    a = np.eye(n)
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if len(edges):
        a[edges[:, 0], edges[:, 1]] = 1.0
        a[edges[:, 1], edges[:, 0]] = 1.0
    return a / a.sum(axis=1, keepdims=True)


def propagate(x, p, w, act: str = "tanh"):
    """act(P X W). ``p`` is a propagation matrix or an edge list."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1] != w.shape[0]:
        raise ValueError(f"shape mismatch: X has {x.shape[1]} columns, W has {w.shape[0]} rows")
    if not (isinstance(p, np.ndarray) and p.ndim == 2 and p.shape == (len(x), len(x)) and p.dtype.kind == "f"):
        p = propagation_matrix(len(x), p)
    return ACTIVATIONS[act][0](p @ (x @ w))


def forward_conv_stack(x, edges, params: ModelParams, cfg: DgcnnConfig, return_layers=False):
    p = propagation_matrix(len(x), edges)
    layers = [np.asarray(x, dtype=np.float64)]
    for w in params.conv:
        layers.append(propagate(layers[-1], p, w, cfg.activation))
    zcat = np.hstack(layers[1:])
    if return_layers:
        return zcat, layers, p
    return zcat


def sort_order(zcat) -> np.ndarray:
    """Row order: last column descending, ties by earlier columns right to
    left (also descending), then original index ascending."""
    n, f = zcat.shape
    keys = [np.arange(n)] + [-zcat[:, j] for j in range(f)]
    return np.lexsort(keys)


def sort_pool(zcat, k: int, return_order=False):
    """Keep the k top-ranked rows; zero rows pad graphs with n < k."""
    if k < 1:
        raise ValueError("k must be >= 1")
    order = sort_order(zcat)[:k]
    out = np.zeros((k, zcat.shape[1]))
    out[: len(order)] = zcat[order]
    if return_order:
        return out, order
    return out


def aggregate(zsp, w, act: str = "tanh"):
    """act(w . Zsp): one learned weight per retained row."""
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    if len(w) != zsp.shape[0]:
        raise ValueError(f"shape mismatch: {len(w)} weights for {zsp.shape[0]} rows")
    return ACTIVATIONS[act][0](w @ zsp)


@dataclass
class GraphTrace:
    p: np.ndarray
    layers: list
    order: np.ndarray
    zsp: np.ndarray
    embedding: np.ndarray


def embed_graph(graph, params: ModelParams, cfg: DgcnnConfig, trace=False):
    """Graph embedding E_G, optionally with the intermediates for backward."""
    if graph.x.shape[1] != params.conv[0].shape[0]:
        raise CompatibilityError(
            f"graph attribute width {graph.x.shape[1]} does not match model input {params.conv[0].shape[0]}"
        )
    zcat, layers, p = forward_conv_stack(graph.x, graph.edges, params, cfg, return_layers=True)
    zsp, order = sort_pool(zcat, params.k, return_order=True)
    emb = aggregate(zsp, params.agg, cfg.aggregation_activation)
    if trace:
        return emb, GraphTrace(p, layers, order, zsp, emb)
    return emb


def embed_backward(tr: GraphTrace, d_emb, params: ModelParams, cfg: DgcnnConfig, grads: ModelParams):
    """Accumulate conv and aggregation gradients for one graph into ``grads``."""
    d_pre = d_emb * ACTIVATIONS[cfg.aggregation_activation][1](tr.embedding)
    grads.agg += tr.zsp @ d_pre
    n = tr.p.shape[0]
    d_zcat = np.zeros((n, sum(w.shape[1] for w in params.conv)))
    d_zcat[tr.order] = np.outer(params.agg[: len(tr.order)], d_pre)
    dact = ACTIVATIONS[cfg.activation][1]
    bounds = np.cumsum([0] + [w.shape[1] for w in params.conv])
    carried = None
    for t in range(len(params.conv) - 1, -1, -1):
        dz = d_zcat[:, bounds[t]:bounds[t + 1]]
        if carried is not None:
            dz = dz + carried
        ds = dz * dact(tr.layers[t + 1])
        pts = tr.p.T @ ds
        grads.conv[t] += tr.layers[t].T @ pts
        if t > 0:
            carried = pts @ params.conv[t].T


# --------------------------------------------------------------------------
# classifier head
# --------------------------------------------------------------------------

def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def dropout_masks(rng, batch, hidden, rate):
    if rate <= 0:
        return None
    keep = 1.0 - rate
    return [(rng.random((batch, h)) < keep) / keep for h in hidden]


@dataclass
class MlpTrace:
    inputs: list = field(default_factory=list)  # input to each affine layer
    hidden: list = field(default_factory=list)  # tanh outputs before dropout
    masks: list | None = None
    probs: np.ndarray | None = None


def mlp_forward(emb, weights, biases, dropout_mask=None, mode="infer", trace=False):
    """Class probabilities for a batch (B x F) or a single embedding.

    Hidden layers are affine -> tanh -> dropout; dropout applies only when
    ``mode == "train"`` and a mask list is given (inverted scaling is baked
    into the masks). The last layer is affine -> softmax.
    """
    single = np.ndim(emb) == 1
    h = np.atleast_2d(np.asarray(emb, dtype=np.float64))
    tr = MlpTrace(masks=dropout_mask if mode == "train" else None)
    for i, (w, b) in enumerate(zip(weights[:-1], biases[:-1])):
        tr.inputs.append(h)
        a = np.tanh(h @ w + b)
        tr.hidden.append(a)
        h = a * tr.masks[i] if tr.masks is not None else a
    tr.inputs.append(h)
    probs = softmax(h @ weights[-1] + biases[-1])
    tr.probs = probs
    out = probs[0] if single else probs
    return (out, tr) if trace else out


def mlp_backward(tr: MlpTrace, d_logits, weights, grad_w, grad_b):
    """Backprop logits gradient through the head; returns d(embedding)."""
    d = d_logits
    for i in range(len(weights) - 1, -1, -1):
        grad_w[i] += tr.inputs[i].T @ d
        grad_b[i] += d.sum(axis=0)
        d = d @ weights[i].T
        if i > 0:
            if tr.masks is not None:
                d = d * tr.masks[i - 1]
            d = d * (1.0 - tr.hidden[i - 1] ** 2)
    return d


def loss(probs, label) -> float:
    return float(-np.log(max(float(probs[label]), PROB_FLOOR)))


def batch_loss(probs, labels) -> float:
    picked = np.maximum(probs[np.arange(len(labels)), labels], PROB_FLOOR)
    return float(-np.mean(np.log(picked)))


def loss_logit_grad(probs, labels):
    """d(mean cross-entropy)/d(logits), zero where the floor clamp is active."""
    labels = np.asarray(labels)
    d = probs.copy()
    d[np.arange(len(labels)), labels] -= 1.0
    clamped = probs[np.arange(len(labels)), labels] < PROB_FLOOR
    d[clamped] = 0.0
    return d / len(labels)


# --------------------------------------------------------------------------
# whole model
# --------------------------------------------------------------------------

def forward(graphs, params: ModelParams, cfg: DgcnnConfig, dropout_mask=None, mode="infer", trace=False):
    embs, traces = [], []
    for g in graphs:
        e, tr = embed_graph(g, params, cfg, trace=True)
        embs.append(e)
        traces.append(tr)
    emb = np.vstack(embs)
    probs, mtr = mlp_forward(emb, params.mlp_w, params.mlp_b, dropout_mask, mode, trace=True)
    if trace:
        return probs, (traces, mtr)
    return probs


def predict_proba(graphs, params: ModelParams, cfg: DgcnnConfig, batch_size=256) -> np.ndarray:
    graphs = list(graphs)
    if not graphs:
        return np.zeros((0, cfg.n_classes))
    return np.vstack([forward(graphs[i:i + batch_size], params, cfg)
                      for i in range(0, len(graphs), batch_size)])


def loss_and_grads(graphs, labels, params: ModelParams, cfg: DgcnnConfig, dropout_mask=None):
    """Mean cross-entropy over the batch and its exact gradient."""
    labels = np.asarray(labels, dtype=np.int64)
    mode = "train" if dropout_mask is not None else "infer"
    probs, (traces, mtr) = forward(graphs, params, cfg, dropout_mask, mode, trace=True)
    grads = params.zeros_like()
    d_emb = mlp_backward(mtr, loss_logit_grad(probs, labels), params.mlp_w, grads.mlp_w, grads.mlp_b)
    for i, tr in enumerate(traces):
        embed_backward(tr, d_emb[i], params, cfg, grads)
    return batch_loss(probs, labels), grads


def backward(graph, label, params: ModelParams, cfg: DgcnnConfig, dropout_mask=None) -> ModelParams:
    """Gradients of the single-graph loss with respect to every parameter."""
    return loss_and_grads([graph], [label], params, cfg, dropout_mask)[1]


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list | None = None
    v: list | None = None


def adam_step(params: list, grads: list, state: AdamState) -> None:
    """Bias-corrected Adam update applied in place to each array in ``params``."""
    if state.m is None:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def save_checkpoint(path, cfg: DgcnnConfig, params: ModelParams, meta=None) -> None:
    """Magic line, JSON header line, then the raw little-endian float64 tensors."""
    named = params.named()
    header = {
        "version": CHECKPOINT_VERSION,
        "config": cfg.to_dict(),
        "k": params.k,
        "n_conv": len(params.conv),
        "n_mlp": len(params.mlp_w),
        "tensors": [[name, list(a.shape)] for name, a in named],
        "meta": meta or {},
    }
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + b" %d\n" % CHECKPOINT_VERSION)
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8") + b"\n")
        for _, a in named:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns (config, params, meta)."""
    with open(path, "rb") as fh:
        magic = fh.readline().rstrip(b"\n").split(b" ")
        if magic[0] != CHECKPOINT_MAGIC:
            raise SchemaError(f"{path}: not a model checkpoint")
        if int(magic[1]) != CHECKPOINT_VERSION:
            raise CompatibilityError(f"{path}: checkpoint version {magic[1].decode()} unsupported")
        header = json.loads(fh.readline())
        arrays = []
        for name, shape in header["tensors"]:
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(8 * count)
            if len(buf) != 8 * count:
                raise SchemaError(f"{path}: truncated tensor {name}")
            arrays.append(np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape))
    cfg = DgcnnConfig.from_dict(header["config"])
    n_conv, n_mlp = header["n_conv"], header["n_mlp"]
    conv = arrays[:n_conv]
    agg = arrays[n_conv]
    rest = arrays[n_conv + 1:]
    params = ModelParams(conv, agg, rest[0::2][:n_mlp], rest[1::2][:n_mlp])
    return cfg, params, header.get("meta", {})
