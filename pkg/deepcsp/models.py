"""
Shallow DeepCSP and Shallow GCN models.

Both share a multi-scale temporal block (three parallel convolution branches
with kernels of half, a third and a quarter of the sampling rate), the
DeepCSP log-variance head and a two-layer classifier. The GCN variant runs
the temporal branches per electrode and appends a GraphSage layer over the
frozen electrode graph.
"""
import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from deepcsp_config import env_int, get_config_value

from .csp import SpatialFilterBank, csp_features
from .numcore import NonFiniteError, Node, ShapeError, Tape, check_finite, softmax

logger = logging.getLogger(__name__)

VARIANTS = ("shallow-deepcsp", "shallow-gcn", "csp")
FEATURE_GROUP = "feature_extractor"
CLASSIFIER_GROUP = "classifier"

DEFAULT_FILTERS = int(get_config_value("model.n_filters", env_int("DEEPCSP_FILTERS", 8)))
DEFAULT_HIDDEN = int(get_config_value("model.hidden", env_int("DEEPCSP_HIDDEN", 16)))
DEFAULT_GCN_FILTERS = int(get_config_value("model.gcn_filters", env_int("DEEPCSP_GCN_FILTERS", 1)))
DEFAULT_GRAPH_FEATURES = int(get_config_value("model.graph_features", env_int("DEEPCSP_GRAPH_FEATURES", 2)))

CHECKPOINT_MAGIC = b"DCSP"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


# -----------------------------
# Configuration / parameters
# -----------------------------

def kernel_sizes(fs: float) -> Tuple[int, int, int]:
    sizes = (int(fs // 2), int(fs // 3), int(fs // 4))
    if min(sizes) < 1:
        raise ShapeError(f"sampling rate {fs} Hz is too low for the temporal kernels")
    return sizes


@dataclass
class ModelConfig:
    variant: str
    n_channels: int
    fs: float
    n_filters: int = DEFAULT_FILTERS
    hidden: int = DEFAULT_HIDDEN
    gcn_filters: int = DEFAULT_GCN_FILTERS
    graph_features: int = DEFAULT_GRAPH_FEATURES
    n_components: int = 4
    seed: int = 42
    param_dtype: str = "float32"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown model variant {self.variant!r}; expected one of {', '.join(VARIANTS)}")
        if self.n_channels < 2:
            raise ShapeError("model needs at least two channels")
        if min(self.n_filters, self.hidden, self.gcn_filters, self.graph_features, self.n_components) < 1:
            raise ValueError("filter counts, hidden width and n_components must be positive")
        if self.param_dtype not in ("float32", "float64"):
            raise ValueError(f"param_dtype must be float32 or float64, got {self.param_dtype!r}")
        if self.variant != "csp":
            kernel_sizes(self.fs)
        if 2 * self.n_components > self.latent_channels:
            raise ShapeError(
                f"2 x n_components ({2 * self.n_components}) exceeds {self.latent_channels} latent channels"
            )

    @property
    def kernels(self) -> Tuple[int, int, int]:
        return kernel_sizes(self.fs)

    @property
    def latent_channels(self) -> int:
        if self.variant == "shallow-deepcsp":
            return 3 * self.n_filters
        if self.variant == "shallow-gcn":
            return self.n_channels * (3 * self.gcn_filters + self.graph_features)
        return self.n_channels

    def shapes(self) -> List[Tuple[str, Tuple[int, ...]]]:
        """Parameter names and shapes in declaration order."""
        out: List[Tuple[str, Tuple[int, ...]]] = []
        if self.variant == "shallow-deepcsp":
            out += [(f"temporal.k{i}", (self.n_filters, self.n_channels, k)) for i, k in enumerate(self.kernels)]
        elif self.variant == "shallow-gcn":
            out += [(f"temporal.k{i}", (self.n_channels, self.gcn_filters, k)) for i, k in enumerate(self.kernels)]
            out += [
                ("graph.w_self", (self.graph_features, 3 * self.gcn_filters)),
                ("graph.w_neigh", (self.graph_features, 3 * self.gcn_filters)),
            ]
        out += [
            ("classifier.w1", (self.hidden, 2 * self.n_components)),
            ("classifier.b1", (self.hidden,)),
            ("classifier.w2", (2, self.hidden)),
            ("classifier.b2", (2,)),
        ]
        return out


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: Dict[str, np.ndarray]
    adjacency: Optional[np.ndarray] = None

    def names(self, group: Optional[str] = None) -> List[str]:
        return [name for name in self.tensors if group is None or param_group(name) == group]

    def copy(self) -> "ModelParams":
        adjacency = None if self.adjacency is None else self.adjacency.copy()
        return ModelParams(self.config, {name: value.copy() for name, value in self.tensors.items()}, adjacency)

    def checksum(self) -> str:
        digest = hashlib.sha1()
        for name, value in self.tensors.items():
            digest.update(name.encode("utf-8"))
            digest.update(np.ascontiguousarray(value).tobytes())
        return digest.hexdigest()


def param_group(name: str) -> str:
    return CLASSIFIER_GROUP if name.startswith("classifier.") else FEATURE_GROUP


def _fans(name: str, shape: Tuple[int, ...], config: ModelConfig) -> Tuple[int, int]:
    if name.startswith("temporal."):
        if config.variant == "shallow-gcn":
            return shape[2], shape[1] * shape[2]
        return shape[1] * shape[2], shape[0] * shape[2]
    return shape[1], shape[0]


def init_params(config: ModelConfig, adjacency=None) -> ModelParams:
    """Glorot-uniform weights from ``config.seed``; biases start at zero."""
    rng = np.random.default_rng(config.seed)
    dtype = np.dtype(config.param_dtype)
    tensors: Dict[str, np.ndarray] = {}
    for name, shape in config.shapes():
        if len(shape) == 1:
            tensors[name] = np.zeros(shape, dtype=dtype)
            continue
        fan_in, fan_out = _fans(name, shape, config)
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        tensors[name] = rng.uniform(-limit, limit, size=shape).astype(dtype)

    if config.variant == "shallow-gcn":
        if adjacency is None:
            raise ShapeError("the GCN variant needs an electrode adjacency")
        adjacency = np.asarray(adjacency, dtype=np.float64)
        if adjacency.shape != (config.n_channels, config.n_channels):
            raise ShapeError(f"adjacency {adjacency.shape} does not match {config.n_channels} channels")

    params = ModelParams(config, tensors, adjacency if config.variant == "shallow-gcn" else None)
    logger.info("model variant=%s parameters=%s latent_channels=%s kernels=%s",
                config.variant, parameter_count(params), config.latent_channels, config.kernels)
    return params


def parameter_count(params: ModelParams) -> int:
    return int(sum(value.size for value in params.tensors.values()))


def tape_parameters(tape: Tape, params: ModelParams, names: Optional[Sequence[str]] = None) -> Dict[str, Node]:
    """Registers parameters as tape leaves; names left out become constants."""
    wanted = set(params.tensors if names is None else names)
    return {
        name: tape.parameter(name, value) if name in wanted else tape.constant(value)
        for name, value in params.tensors.items()
    }


# -----------------------------
# Layers
# -----------------------------

def _as_batch(tape: Tape, x) -> Tuple[Node, bool]:
    node = x if isinstance(x, Node) else tape.constant(x)
    if node.value.ndim == 2:
        return tape.reshape(node, (1,) + node.shape), True
    if node.value.ndim != 3:
        raise ShapeError(f"expected D x T or N x D x T input, got {node.shape}")
    return node, False


def temporal_block(tape: Tape, x, kernels: Sequence[Node], depthwise: bool = False) -> Node:
    """
    Three parallel same-length convolutions, each followed by ReLU, concatenated.

    Dense mode maps (N, D, T) to (N, 3F, T); depthwise mode keeps electrodes
    apart and maps (N, D, T) to (N, D, 3G, T). A 2-D input drops the batch axis.
    """
    x, single = _as_batch(tape, x)
    if depthwise:
        branches = [tape.relu(tape.depthwise_conv1d(x, kernel)) for kernel in kernels]
        out = tape.concat(branches, axis=2)
    else:
        branches = [tape.relu(tape.conv1d(x, kernel)) for kernel in kernels]
        out = tape.concat(branches, axis=1)
    if single:
        return tape.reshape(out, out.shape[1:])
    return out


def graphsage_layer(tape: Tape, h, adjacency, w_self: Node, w_neigh: Node, activation: bool = True) -> Node:
    """
    h'_v = ReLU(W_self h_v + W_neigh Σ_u A[v, u] h_u), applied at every time step.

    ``h`` is (N, D, F_in, T) or a single (D, F_in) feature matrix; ``adjacency``
    is a row-normalized D x D constant.
    """
    h = h if isinstance(h, Node) else tape.constant(h)
    single = h.value.ndim == 2
    if single:
        h = tape.reshape(h, (1,) + h.shape + (1,))
    if h.value.ndim != 4:
        raise ShapeError(f"graphsage_layer expects (N, D, F, T) features, got {h.shape}")
    adjacency = np.asarray(adjacency, dtype=np.float64)
    if adjacency.shape != (h.shape[1], h.shape[1]):
        raise ShapeError(f"adjacency {adjacency.shape} does not match {h.shape[1]} nodes")

    neighbours = tape.contract("vu,nuft->nvft", adjacency, h)
    out = tape.add(
        tape.contract("gf,nvft->nvgt", w_self, h),
        tape.contract("gf,nvft->nvgt", w_neigh, neighbours),
    )
    if activation:
        out = tape.relu(out)
    if single:
        return tape.reshape(out, out.shape[1:3])
    return out


def latent_node(tape: Tape, trials, nodes: Dict[str, Node], params: ModelParams) -> Node:
    """Feature-extractor output for an (N, D, T) stack: (N, F_latent, T)."""
    config = params.config
    x, _ = _as_batch(tape, trials)
    if x.shape[1] != config.n_channels:
        raise ShapeError(f"model expects {config.n_channels} channels, got {x.shape[1]}")
    if config.variant == "csp":
        return x

    kernels = [nodes[f"temporal.k{i}"] for i in range(3)]
    if config.variant == "shallow-deepcsp":
        return temporal_block(tape, x, kernels)

    temporal = temporal_block(tape, x, kernels, depthwise=True)
    n_trials, n_channels, n_features, n_samples = temporal.shape
    graph = graphsage_layer(tape, temporal, params.adjacency, nodes["graph.w_self"], nodes["graph.w_neigh"])
    return tape.concat(
        [
            tape.reshape(temporal, (n_trials, n_channels * n_features, n_samples)),
            tape.reshape(graph, (n_trials, n_channels * config.graph_features, n_samples)),
        ],
        axis=1,
    )


def classifier_logits(tape: Tape, features, nodes: Dict[str, Node]) -> Node:
    features = features if isinstance(features, Node) else tape.constant(features)
    hidden = tape.relu(tape.add(tape.contract("nf,hf->nh", features, nodes["classifier.w1"]), nodes["classifier.b1"]))
    return tape.add(tape.contract("nh,kh->nk", hidden, nodes["classifier.w2"]), nodes["classifier.b2"])


def classifier(features, params: ModelParams) -> np.ndarray:
    """Class probabilities for one 2n feature vector or an (N, 2n) batch."""
    features = np.asarray(features, dtype=np.float64)
    check_finite(features, "classifier features")
    single = features.ndim == 1
    batch = features[None] if single else features
    tape = Tape()
    logits = classifier_logits(tape, batch, tape_parameters(tape, params, names=()))
    probs = softmax(logits.value)
    return probs[0] if single else probs


def deepcsp_head(latents, bank: SpatialFilterBank) -> np.ndarray:
    latents = np.asarray(latents, dtype=np.float64)
    if latents.shape[-2] != bank.n_channels:
        raise ShapeError(
            f"filter bank was fitted on {bank.n_channels} latent channels, latents have {latents.shape[-2]}"
        )
    return csp_features(bank.filters, latents)


# -----------------------------
# Inference
# -----------------------------

def extract_latents(params: ModelParams, trials, chunk: int = 64) -> np.ndarray:
    trials = np.asarray(trials, dtype=np.float64)
    single = trials.ndim == 2
    stack = trials[None] if single else trials
    parts: List[np.ndarray] = []
    for start in range(0, stack.shape[0], chunk):
        tape = Tape()
        parts.append(latent_node(tape, stack[start:start + chunk], tape_parameters(tape, params, names=()), params).value)
    latents = np.concatenate(parts, axis=0) if parts else np.zeros((0, params.config.latent_channels, stack.shape[-1]))
    if not np.all(np.isfinite(latents)):
        raise NonFiniteError("feature extractor produced non-finite latents")
    return latents[0] if single else latents


def predict_proba(params: ModelParams, bank: SpatialFilterBank, trials) -> np.ndarray:
    return classifier(deepcsp_head(extract_latents(params, trials), bank), params)


def electrode_filters(params: ModelParams, bank: SpatialFilterBank) -> np.ndarray:
    """
    Folds latent-space filters back onto electrodes (D x 2n) for topographic maps.

    Dense temporal kernels contribute their tap sums per electrode; in the GCN
    variant every latent row belongs to one electrode and is summed into it.
    """
    config = params.config
    if bank.n_channels != config.latent_channels:
        raise ShapeError(f"bank has {bank.n_channels} rows, model has {config.latent_channels} latent channels")
    if config.variant == "csp":
        return bank.filters.copy()
    if config.variant == "shallow-deepcsp":
        mixing = np.concatenate(
            [params.tensors[f"temporal.k{i}"].astype(np.float64).sum(axis=-1) for i in range(3)], axis=0
        )
        return mixing.T @ bank.filters
    per_electrode = 3 * config.gcn_filters
    owners = np.concatenate([
        np.repeat(np.arange(config.n_channels), per_electrode),
        np.repeat(np.arange(config.n_channels), config.graph_features),
    ])
    out = np.zeros((config.n_channels, bank.filters.shape[1]))
    np.add.at(out, owners, bank.filters)
    return out


# -----------------------------
# Checkpoints
# -----------------------------

def encode_checkpoint(params: ModelParams) -> bytes:
    doc: Dict[str, object] = {"config": asdict(params.config)}
    if params.adjacency is not None:
        doc["adjacency"] = params.adjacency.tolist()
    blob = json.dumps(doc, sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(blob)), blob]
    # tensors are written at param_dtype, little-endian
    stored = np.dtype(params.config.param_dtype).newbyteorder("<")
    for name, _ in params.config.shapes():
        parts.append(np.ascontiguousarray(params.tensors[name], dtype=stored).tobytes())
    return b"".join(parts)


def decode_checkpoint(payload: bytes, source: str = "<bytes>") -> ModelParams:
    if len(payload) < 12 or payload[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{source}: not a DCSP checkpoint")
    version, length = struct.unpack_from("<II", payload, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{source}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    offset = 12 + length
    if len(payload) < offset:
        raise CheckpointError(f"{source}: truncated config blob")
    try:
        doc = json.loads(payload[12:offset].decode("utf-8"))
        config = ModelConfig(**doc["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{source}: bad config blob: {exc}")

    dtype = np.dtype(config.param_dtype)
    stored = dtype.newbyteorder("<")
    tensors: Dict[str, np.ndarray] = {}
    for name, shape in config.shapes():
        count = int(np.prod(shape))
        size = count * stored.itemsize
        if len(payload) < offset + size:
            raise CheckpointError(f"{source}: truncated tensor {name}")
        tensors[name] = np.frombuffer(payload, dtype=stored, count=count, offset=offset).reshape(shape).astype(dtype)
        offset += size
    if offset != len(payload):
        raise CheckpointError(f"{source}: {len(payload) - offset} trailing bytes")

    adjacency = doc.get("adjacency")
    return ModelParams(config, tensors, None if adjacency is None else np.asarray(adjacency, dtype=np.float64))


def save_checkpoint(path: str, params: ModelParams):
    with open(path, "wb") as handle:
        handle.write(encode_checkpoint(params))


def load_checkpoint(path: str) -> ModelParams:
    with open(path, "rb") as handle:
        return decode_checkpoint(handle.read(), source=path)
