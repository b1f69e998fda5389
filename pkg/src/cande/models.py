"""Trainable models: plain and FiLM-conditioned autoencoders, context discriminator.

Training uses minibatch Adam with early stopping on a validation metric;
the returned model carries the parameters from the best validation epoch.
"""
from __future__ import annotations

import io
import json
import logging
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError, DivergenceError, ShapeError
from .film import FiLMGenerator, FiLMPair, init_film
from .nn import (AdamState, DenseLayer, GradientTape, Network, adam_step, init_dense, mse_loss,
                 softmax_xent_loss)

log = logging.getLogger(__name__)

DEFAULT_HIDDEN = (128, 64, 32)
EMBEDDING_SIZES = (32, 64, 128, 256)


@dataclass
class TrainConfig:
    batch_size: int = 128
    max_epochs: int = 50
    learning_rate: float = 1e-3
    patience: int = 10
    seed: int = 0
    repeats: int = 1

    def __post_init__(self):
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs and patience must be positive")


class Autoencoder:
    """Untied encoder/decoder stack, optionally FiLM-conditioned on context.

    ``network.layers[:n_encoder]`` is the encoder f and the rest is the
    decoder g. A CANDE model conditions every layer except the final
    reconstruction layer and stores one conditioning vector per context in
    ``encodings`` so that scoring never depends on the query itself.
    """

    def __init__(self, network: Network, n_encoder: int, encodings: dict[int, np.ndarray] | None = None,
                 encoding_kind: str | None = None, meta: dict | None = None):
        if network.input_dim != network.output_dim:
            raise ShapeError("autoencoder output width must equal its input width")
        if (network.film is None) != (encodings is None):
            raise ValueError("a conditioned autoencoder needs an encoding table and vice versa")
        if encodings is not None:
            for cid, vec in encodings.items():
                if vec.shape != (network.film.context_dim,):
                    raise ShapeError(f"encoding for context {cid} has shape {vec.shape}")
        self.network = network
        self.n_encoder = n_encoder
        self.encodings = encodings
        self.encoding_kind = encoding_kind
        self.meta = dict(meta or {})

    @property
    def kind(self) -> str:
        return "plain" if self.network.film is None else "cande"

    @property
    def input_dim(self) -> int:
        return self.network.input_dim

    @property
    def code_dim(self) -> int:
        return self.network.layers[self.n_encoder - 1].out_dim

    def conditioning(self, contexts) -> np.ndarray | None:
        """Stack the stored conditioning vectors for a sequence of context ids."""
        if self.encodings is None:
            return None
        contexts = np.atleast_1d(np.asarray(contexts))
        missing = sorted(set(contexts.tolist()) - set(self.encodings))
        if missing:
            raise KeyError(f"no conditioning vector stored for context(s) {missing}")
        ids = sorted(self.encodings)
        table = np.stack([self.encodings[c] for c in ids])
        index = np.searchsorted(ids, contexts)
        return table[index]

    def _resolve_h(self, n: int, contexts=None, h=None):
        if self.kind == "plain":
            if contexts is not None or h is not None:
                raise ValueError("plain autoencoder takes no context")
            return None
        if h is not None and contexts is not None:
            raise ValueError("pass either contexts or h, not both")
        if h is None:
            if contexts is None:
                raise ValueError("CANDE autoencoder needs a context id or conditioning vector")
            contexts = np.asarray(contexts)
            h = self.conditioning(contexts if contexts.ndim else np.full(n, contexts))
        return h

    def reconstruct(self, x: np.ndarray, contexts=None, h=None) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        single = x.ndim == 1
        xb = x[None, :] if single else x
        out = self.network.forward(xb, self._resolve_h(len(xb), contexts, h))
        return out[0] if single else out

    def encode(self, x: np.ndarray, contexts=None, h=None) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=self.dtype))
        return self.network.forward(x, self._resolve_h(len(x), contexts, h), upto=self.n_encoder)

    @property
    def dtype(self):
        return self.network.layers[0].weight.dtype

    def copy(self) -> "Autoencoder":
        enc = None if self.encodings is None else {k: v.copy() for k, v in self.encodings.items()}
        return Autoencoder(self.network.copy(), self.n_encoder, enc, self.encoding_kind, self.meta)


class Discriminator:
    """Context classifier ``d -> hidden... -> p -> K`` with ReLU hidden layers and linear logits."""

    def __init__(self, network: Network, meta: dict | None = None):
        if network.film is not None:
            raise ValueError("discriminator is never conditioned")
        if network.layers[-1].activation != "linear":
            raise ValueError("discriminator's final layer must produce linear logits")
        self.network = network
        self.meta = dict(meta or {})

    kind = "discriminator"

    @property
    def num_contexts(self) -> int:
        return self.network.output_dim

    @property
    def embedding_dim(self) -> int:
        return self.network.layers[-2].out_dim

    @property
    def dtype(self):
        return self.network.layers[0].weight.dtype

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self.network.forward(np.atleast_2d(np.asarray(x, dtype=self.dtype)))

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.logits(x).argmax(axis=1)

    def penultimate(self, x: np.ndarray) -> np.ndarray:
        """Post-ReLU activations of the layer feeding the logits."""
        x = np.atleast_2d(np.asarray(x, dtype=self.dtype))
        return self.network.forward(x, upto=len(self.network.layers) - 1)

    def copy(self) -> "Discriminator":
        return Discriminator(self.network.copy(), self.meta)


def build_autoencoder(input_dim: int, hidden=DEFAULT_HIDDEN, output_activation: str = "sigmoid",
                      encodings: dict[int, np.ndarray] | None = None, encoding_kind: str | None = None,
                      seed: int = 0, dtype=np.float32) -> Autoencoder:
    """Mirrored autoencoder ``d -> hidden -> ... -> code -> ... -> d``.

    With ``encodings`` given, every layer but the last is FiLM-conditioned on a
    context vector of the encodings' length.
    """
    rng = np.random.default_rng(seed)
    widths = [input_dim, *hidden, *reversed(hidden[:-1]), input_dim]
    layers = []
    for i, (a, b) in enumerate(zip(widths, widths[1:])):
        act = output_activation if i == len(widths) - 2 else "relu"
        layers.append(init_dense(rng, a, b, act, dtype))
    film = None
    if encodings is not None:
        if not encodings:
            raise ValueError("empty encoding table")
        dims = {v.shape for v in encodings.values()}
        if len(dims) != 1:
            raise ShapeError(f"encodings have inconsistent shapes {dims}")
        (p,), = dims
        film = init_film(rng, p, {k: layers[k].out_dim for k in range(len(layers) - 1)}, dtype)
        encodings = {int(k): np.asarray(v, dtype=dtype) for k, v in encodings.items()}
    return Autoencoder(Network(layers, film), len(hidden), encodings, encoding_kind)


def build_discriminator(input_dim: int, num_contexts: int, embedding_dim: int = 128,
                        hidden=(256,), seed: int = 0, dtype=np.float32) -> Discriminator:
    if num_contexts < 2:
        raise ValueError("a context discriminator needs at least two contexts")
    rng = np.random.default_rng(seed)
    widths = [input_dim, *hidden, embedding_dim]
    layers = [init_dense(rng, a, b, "relu", dtype) for a, b in zip(widths, widths[1:])]
    layers.append(init_dense(rng, embedding_dim, num_contexts, "linear", dtype))
    return Discriminator(Network(layers))


# -- training ----------------------------------------------------------------


@dataclass
class TrainResult:
    model: Autoencoder | Discriminator
    best_epoch: int
    best_metric: float
    train_loss: list[float] = field(default_factory=list)
    val_metric: list[float] = field(default_factory=list)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def reconstruction_mse(model: Autoencoder, x: np.ndarray, contexts=None, batch_size: int = 2048) -> float:
    """Mean squared error over every entry of ``x``."""
    total = 0.0
    for start in range(0, len(x), batch_size):
        xb = x[start:start + batch_size]
        cb = None if contexts is None else contexts[start:start + batch_size]
        diff = model.reconstruct(xb, cb).astype(np.float64) - xb
        total += float(np.square(diff).sum())
    return total / x.size


def accuracy(model: Discriminator, x: np.ndarray, contexts: np.ndarray, batch_size: int = 4096) -> float:
    hits = 0
    for start in range(0, len(x), batch_size):
        hits += int((model.predict(x[start:start + batch_size]) == contexts[start:start + batch_size]).sum())
    return hits / len(x)


def _fit(model, loss_fn, metric_fn, better, n: int, cfg: TrainConfig, what: str) -> TrainResult:
    net = model.network
    rng = np.random.default_rng(cfg.seed)
    state = AdamState.fresh(net.params(), lr=cfg.learning_rate)
    tape = GradientTape()
    best = model.copy()
    best_metric = metric_fn(model)
    best_epoch = 0
    train_curve, val_curve = [], [best_metric]
    for epoch in range(1, cfg.max_epochs + 1):
        running = 0.0
        for idx in _batches(n, cfg.batch_size, rng):
            out, target = loss_fn(idx, tape)
            loss, grad = target(out)
            if not np.isfinite(loss):
                raise DivergenceError(f"{what}: loss became {loss} at epoch {epoch}")
            grads = net.backward(tape, grad.astype(out.dtype, copy=False))
            params, state = adam_step(net.params(), grads, state)
            net.set_params(params)
            running += loss * len(idx)
        train_curve.append(running / n)
        # an overflowing Adam moment freezes updates at zero without touching the loss
        arrays = [*net.params().values(), *state.m.values(), *state.v.values()]
        if not all(np.isfinite(a).all() for a in arrays):
            raise DivergenceError(f"{what}: parameters or optimiser moments overflowed at epoch {epoch}")
        metric = metric_fn(model)
        if not np.isfinite(metric):
            raise DivergenceError(f"{what}: validation metric became {metric} at epoch {epoch}")
        val_curve.append(metric)
        log.debug("%s epoch %d train %.6f val %.6f", what, epoch, train_curve[-1], metric)
        if better(metric, best_metric):
            best, best_metric, best_epoch = model.copy(), metric, epoch
        elif epoch - best_epoch >= cfg.patience:
            break
    best.meta.update(best_epoch=best_epoch, best_metric=best_metric, seed=cfg.seed)
    return TrainResult(best, best_epoch, best_metric, train_curve, val_curve)


def train_autoencoder(model: Autoencoder, train_x: np.ndarray, val_x: np.ndarray, cfg: TrainConfig,
                      train_contexts: np.ndarray | None = None,
                      val_contexts: np.ndarray | None = None) -> TrainResult:
    """Minimise reconstruction MSE; keep the epoch with the lowest validation MSE.

    Epoch 0 (the untrained model) takes part in the selection, and ties go to
    the earliest epoch. Context arrays are required for CANDE models.
    """
    if len(train_x) == 0 or len(val_x) == 0:
        raise ValueError("training and validation sets must be non-empty")
    if model.kind == "cande" and (train_contexts is None or val_contexts is None):
        raise ValueError("CANDE training needs context ids for train and validation data")
    model = model.copy()
    train_x = np.asarray(train_x, dtype=model.dtype)
    val_x = np.asarray(val_x, dtype=model.dtype)
    h_all = model.conditioning(train_contexts) if model.kind == "cande" else None

    def loss_fn(idx, tape):
        xb = train_x[idx]
        out = model.network.forward(xb, None if h_all is None else h_all[idx], tape=tape)
        return out, lambda o: mse_loss(xb, o)

    return _fit(model, loss_fn, lambda m: reconstruction_mse(m, val_x, val_contexts),
                lambda a, b: a < b, len(train_x), cfg, "autoencoder")


def train_discriminator(model: Discriminator, train_x: np.ndarray, train_contexts: np.ndarray,
                        val_x: np.ndarray, val_contexts: np.ndarray, cfg: TrainConfig) -> TrainResult:
    """Softmax cross-entropy on context ids; keep the best validation-accuracy epoch."""
    train_contexts = np.asarray(train_contexts)
    if len(np.unique(train_contexts)) < 2:
        raise ValueError("discriminator training needs at least two contexts")
    if train_contexts.max() >= model.num_contexts:
        raise ValueError(f"context id {train_contexts.max()} exceeds discriminator outputs")
    model = model.copy()
    train_x = np.asarray(train_x, dtype=model.dtype)
    val_x = np.asarray(val_x, dtype=model.dtype)
    val_contexts = np.asarray(val_contexts)

    def loss_fn(idx, tape):
        out = model.network.forward(train_x[idx], tape=tape)
        return out, lambda o: softmax_xent_loss(o, train_contexts[idx])

    return _fit(model, loss_fn, lambda m: accuracy(m, val_x, val_contexts),
                lambda a, b: a > b, len(train_x), cfg, "discriminator")


# -- checkpoints -------------------------------------------------------------

MANIFEST = "manifest.json"
WEIGHTS = "weights.bin"
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def _manifest(model) -> tuple[dict, list[np.ndarray]]:
    net = model.network
    params = net.params()
    arrays = list(params.values())
    order = [{"name": k, "shape": list(v.shape)} for k, v in params.items()]
    manifest = {
        "format": "cande-checkpoint",
        "version": 1,
        "kind": model.kind,
        "dtype": "float32",
        "layers": [{"in": l.in_dim, "out": l.out_dim, "activation": l.activation} for l in net.layers],
        "film": None if net.film is None else {"context_dim": net.film.context_dim, "layers": net.film.layers},
    }
    if isinstance(model, Autoencoder):
        manifest["n_encoder"] = model.n_encoder
        if model.encodings is not None:
            manifest["encoding_kind"] = model.encoding_kind
            for cid in sorted(model.encodings):
                order.append({"name": f"context.{cid}", "shape": [net.film.context_dim]})
                arrays.append(model.encodings[cid])
    manifest["parameters"] = order
    manifest["meta"] = model.meta
    return manifest, arrays


def checkpoint_parts(model) -> tuple[bytes, bytes]:
    """Return (manifest JSON bytes, little-endian float32 weight blob)."""
    manifest, arrays = _manifest(model)
    blob = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrays)
    text = json.dumps(manifest, indent=2, sort_keys=True, default=_json_default) + "\n"
    return text.encode("utf-8"), blob


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def model_from_parts(manifest_bytes: bytes, blob: bytes):
    try:
        manifest = json.loads(manifest_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt manifest: {exc}") from exc
    try:
        return _from_manifest(manifest, blob)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"inconsistent checkpoint: {exc}") from exc


def _from_manifest(manifest: dict, blob: bytes):
    if manifest.get("format") != "cande-checkpoint":
        raise CheckpointError("manifest is not a cande checkpoint")
    entries = manifest["parameters"]
    expected = sum(int(np.prod(e["shape"], dtype=np.int64)) for e in entries) * 4
    if len(blob) != expected:
        raise CheckpointError(f"weights blob has {len(blob)} bytes, manifest describes {expected}")
    flat = np.frombuffer(blob, dtype="<f4")
    values, offset = {}, 0
    for e in entries:
        size = int(np.prod(e["shape"], dtype=np.int64))
        values[e["name"]] = flat[offset:offset + size].reshape(e["shape"]).astype(np.float32)
        offset += size

    layers = []
    for i, spec in enumerate(manifest["layers"]):
        w = values.pop(f"layers.{i}.weight")
        b = values.pop(f"layers.{i}.bias")
        if w.shape != (spec["in"], spec["out"]):
            raise CheckpointError(f"layer {i}: weight shape {w.shape} disagrees with manifest")
        layers.append(DenseLayer(w, b, spec["activation"]))
    film = None
    if manifest.get("film"):
        pairs = {}
        for k in manifest["film"]["layers"]:
            pairs[k] = FiLMPair(values.pop(f"film.{k}.gamma_weight"), values.pop(f"film.{k}.gamma_bias"),
                                values.pop(f"film.{k}.beta_weight"), values.pop(f"film.{k}.beta_bias"))
        film = FiLMGenerator(manifest["film"]["context_dim"], pairs)
    try:
        net = Network(layers, film)
    except ShapeError as exc:
        raise CheckpointError(str(exc)) from exc
    meta = manifest.get("meta", {})
    if manifest["kind"] == "discriminator":
        model = Discriminator(net, meta)
    else:
        encodings = {int(name.split(".")[1]): values.pop(name) for name in list(values)
                     if name.startswith("context.")} or None
        model = Autoencoder(net, manifest["n_encoder"], encodings, manifest.get("encoding_kind"), meta)
    if values:
        raise CheckpointError(f"unused parameters in checkpoint: {sorted(values)}")
    return model


def save_checkpoint(model) -> bytes:
    """Serialise to a single zip archive holding ``manifest.json`` and ``weights.bin``."""
    manifest, blob = checkpoint_parts(model)
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
        for name, data in ((MANIFEST, manifest), (WEIGHTS, blob)):
            zf.writestr(zipfile.ZipInfo(name, date_time=_ZIP_DATE), data)
    return buf.getvalue()


def load_checkpoint(data: bytes):
    try:
        with zipfile.ZipFile(io.BytesIO(data)) as zf:
            manifest = zf.read(MANIFEST)
            blob = zf.read(WEIGHTS)
    except (zipfile.BadZipFile, KeyError, EOFError, zipfile.LargeZipFile) as exc:
        raise CheckpointError(f"corrupt checkpoint archive: {exc}") from exc
    return model_from_parts(manifest, blob)


def write_checkpoint(model, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest, blob = checkpoint_parts(model)
    (directory / MANIFEST).write_bytes(manifest)
    (directory / WEIGHTS).write_bytes(blob)
    return directory


def read_checkpoint(directory: str | Path):
    directory = Path(directory)
    try:
        manifest = (directory / MANIFEST).read_bytes()
        blob = (directory / WEIGHTS).read_bytes()
    except FileNotFoundError as exc:
        raise CheckpointError(f"missing checkpoint file: {exc.filename}") from exc
    return model_from_parts(manifest, blob)


def train_config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
