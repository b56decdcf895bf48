"""Projection heads and the tri-modal contrastive training loop.

Each modality owns a two-layer MLP head whose output passes through batch
normalization and row-wise L2 normalization; the training objective sums
the InfoNCE loss over all six ordered modality pairs at a fixed
temperature.  Gradients are derived by hand in reverse mode, including the
paths through the batch statistics and the normalization, and are verified
against central finite differences in the test suite.  Training uses AdamW
with decoupled weight decay (excluded for biases and batch-norm
parameters) under a linear-warmup / cosine-annealing schedule.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, BatchNormDegeneracyError, ConfigError, FormatError

MODALITY_ORDER = ("HE", "MIF", "TXT")
PAIR_DIRECTIONS = tuple(
    (a, b) for a in MODALITY_ORDER for b in MODALITY_ORDER if a != b
)

OUTPUT_DIM_DEFAULT = 512
HIDDEN_DIM_DEFAULT = 1024
TEMPERATURE_DEFAULT = 0.07
BATCH_SIZE_DEFAULT = 128
LR_PROJECTION_DEFAULT = 1e-4
WARMUP_STEPS_DEFAULT = 5000
EPOCHS_DEFAULT = 25
WEIGHT_DECAY_DEFAULT = 0.01
BN_MOMENTUM = 0.1
BN_EPS = 1e-5

CHECKPOINT_MAGIC = b"HKCK"
CHECKPOINT_VERSION = 1

PARAM_NAMES = ("w1", "b1", "w2", "b2", "gamma", "beta")
DECAYED_PARAMS = ("w1", "w2")


@dataclass
class AlignConfig:
    temperature: float = TEMPERATURE_DEFAULT
    batch_size: int = BATCH_SIZE_DEFAULT
    lr_projection: float = LR_PROJECTION_DEFAULT
    warmup_steps: int = WARMUP_STEPS_DEFAULT
    total_steps: int | None = None  # derived from epochs when unset
    epochs: int = EPOCHS_DEFAULT
    weight_decay: float = WEIGHT_DECAY_DEFAULT
    hidden_dim: int = HIDDEN_DIM_DEFAULT
    output_dim: int = OUTPUT_DIM_DEFAULT
    seed: int = 0

    def __post_init__(self):
        if self.temperature <= 0.0:
            raise ArgumentError("temperature must be positive")
        if self.batch_size < 2:
            raise ArgumentError("contrastive batches need at least 2 items")
        if self.warmup_steps < 0 or self.epochs < 1:
            raise ArgumentError("schedule constants must be positive")


class ProjectionHead:
    """Two-layer MLP with batch norm, emitting unit-norm rows.

    params holds the trainable tensors; running_mean/var are state updated
    in training mode with momentum 0.1 and used verbatim in eval mode.
    """

    def __init__(self, d_in, d_hidden=HIDDEN_DIM_DEFAULT, d_out=OUTPUT_DIM_DEFAULT,
                 rng=None):
        rng = rng or np.random.default_rng(0)
        self.d_in, self.d_hidden, self.d_out = d_in, d_hidden, d_out
        bound1 = 1.0 / np.sqrt(d_in)
        bound2 = 1.0 / np.sqrt(d_hidden)
        self.params = {
            "w1": rng.uniform(-bound1, bound1, size=(d_in, d_hidden)),
            "b1": np.zeros(d_hidden),
            "w2": rng.uniform(-bound2, bound2, size=(d_hidden, d_out)),
            "b2": np.zeros(d_out),
            "gamma": np.ones(d_out),
            "beta": np.zeros(d_out),
        }
        self.running_mean = np.zeros(d_out)
        self.running_var = np.ones(d_out)
        self.momentum = BN_MOMENTUM
        self.eps = BN_EPS

    def forward(self, h, training, update_running=False):
        """Project a batch; returns (unit-row output, cache for backward)."""
        h = np.asarray(h, dtype=np.float64)
        if h.ndim != 2 or h.shape[1] != self.d_in:
            raise ArgumentError(f"input must be (B, {self.d_in})")
        if training and h.shape[0] < 2:
            raise BatchNormDegeneracyError(
                "training-mode batch statistics need at least 2 rows")
        p = self.params
        a = h @ p["w1"] + p["b1"]
        r = np.maximum(a, 0.0)
        y = r @ p["w2"] + p["b2"]
        if training:
            mu = y.mean(axis=0)
            var = y.var(axis=0)
            if update_running:
                self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * mu
                self.running_var = (1 - self.momentum) * self.running_var + self.momentum * var
        else:
            mu, var = self.running_mean, self.running_var
        std = np.sqrt(var + self.eps)
        xhat = (y - mu) / std
        z = p["gamma"] * xhat + p["beta"]
        norms = np.linalg.norm(z, axis=1, keepdims=True)
        norms = np.maximum(norms, 1e-300)
        zt = z / norms
        cache = {"h": h, "a": a, "r": r, "std": std, "xhat": xhat,
                 "z": z, "norms": norms, "zt": zt, "training": training}
        return zt, cache

    def backward(self, d_zt, cache):
        """Gradients of the loss w.r.t. every trainable tensor.

        Differentiates through the row normalization and, in training mode,
        through the batch mean and variance.
        """
        p = self.params
        zt, norms = cache["zt"], cache["norms"]
        dz = (d_zt - np.sum(d_zt * zt, axis=1, keepdims=True) * zt) / norms
        xhat = cache["xhat"]
        d_gamma = np.sum(dz * xhat, axis=0)
        d_beta = np.sum(dz, axis=0)
        dxhat = dz * p["gamma"]
        if cache["training"]:
            b = dz.shape[0]
            dy = (dxhat - dxhat.mean(axis=0)
                  - xhat * np.mean(dxhat * xhat, axis=0)) / cache["std"]
            del b
        else:
            dy = dxhat / cache["std"]
        dr = dy @ p["w2"].T
        d_w2 = cache["r"].T @ dy
        d_b2 = np.sum(dy, axis=0)
        da = dr * (cache["a"] > 0.0)
        d_w1 = cache["h"].T @ da
        d_b1 = np.sum(da, axis=0)
        return {"w1": d_w1, "b1": d_b1, "w2": d_w2, "b2": d_b2,
                "gamma": d_gamma, "beta": d_beta}

    def state_tensors(self):
        out = dict(self.params)
        out["running_mean"] = self.running_mean
        out["running_var"] = self.running_var
        return out

    def load_state_tensors(self, tensors):
        for name in PARAM_NAMES:
            self.params[name] = np.array(tensors[name], dtype=np.float64)
        self.running_mean = np.array(tensors["running_mean"], dtype=np.float64)
        self.running_var = np.array(tensors["running_var"], dtype=np.float64)


def project(head, h, training=False):
    """Forward pass only; rows of the result have unit L2 norm."""
    zt, _ = head.forward(h, training=training, update_running=training)
    return zt


def info_nce(za, zb, temperature):
    """InfoNCE loss for one ordered modality pair (value only)."""
    loss, _, _ = info_nce_with_grads(za, zb, temperature)
    return loss


def info_nce_with_grads(za, zb, temperature):
    """Loss plus gradients w.r.t. both unit-row embedding matrices."""
    if temperature <= 0.0:
        raise ArgumentError("temperature must be positive")
    za = np.asarray(za, dtype=np.float64)
    zb = np.asarray(zb, dtype=np.float64)
    if za.shape != zb.shape:
        raise ArgumentError("batch shapes must match")
    b = za.shape[0]
    s = za @ zb.T / temperature
    s_max = s.max(axis=1, keepdims=True)
    log_z = s_max[:, 0] + np.log(np.exp(s - s_max).sum(axis=1))
    loss = float(np.mean(log_z - np.diag(s)))
    p = np.exp(s - log_z[:, None])
    ds = (p - np.eye(b)) / b
    dza = ds @ zb / temperature
    dzb = ds.T @ za / temperature
    return loss, dza, dzb


def total_loss(z_he, z_mif, z_txt, temperature):
    """Sum of the six directional InfoNCE terms."""
    z = {"HE": z_he, "MIF": z_mif, "TXT": z_txt}
    return sum(info_nce(z[a], z[b], temperature) for a, b in PAIR_DIRECTIONS)


def total_loss_with_grads(projected, temperature):
    """Loss and accumulated gradients per modality embedding matrix."""
    grads = {m: np.zeros_like(projected[m]) for m in MODALITY_ORDER}
    loss = 0.0
    for a, b in PAIR_DIRECTIONS:
        term, dza, dzb = info_nce_with_grads(projected[a], projected[b], temperature)
        loss += term
        grads[a] += dza
        grads[b] += dzb
    return loss, grads


def loss_and_param_grads(features, heads, temperature, training=True,
                         update_running=False):
    """End-to-end loss and per-head parameter gradients for one batch."""
    projected, caches = {}, {}
    for m in MODALITY_ORDER:
        projected[m], caches[m] = heads[m].forward(
            features[m], training=training, update_running=update_running)
    loss, z_grads = total_loss_with_grads(projected, temperature)
    param_grads = {m: heads[m].backward(z_grads[m], caches[m]) for m in MODALITY_ORDER}
    return loss, param_grads


def lr_at(step, peak_lr, warmup_steps, total_steps):
    """Linear warmup to the peak, then cosine annealing to zero."""
    if step < 0:
        raise ArgumentError("step must be non-negative")
    if total_steps <= warmup_steps:
        raise ArgumentError("total_steps must exceed warmup_steps")
    if step <= warmup_steps:
        return peak_lr * step / warmup_steps if warmup_steps else peak_lr
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    progress = min(progress, 1.0)
    return peak_lr * 0.5 * (1.0 + np.cos(np.pi * progress))


class AdamW:
    """Decoupled-weight-decay Adam over named parameter dicts.

    decay_filter decides per parameter name whether weight decay applies;
    the default decays only the MLP weight matrices, never biases or
    batch-norm scale/shift.
    """

    def __init__(self, heads, weight_decay, beta1=0.9, beta2=0.999, eps=1e-8,
                 decay_filter=None):
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.decay_filter = decay_filter or (lambda name: name in DECAYED_PARAMS)
        self.step_count = 0
        self.m = {mod: {k: np.zeros_like(v) for k, v in heads[mod].params.items()}
                  for mod in heads}
        self.v = {mod: {k: np.zeros_like(v) for k, v in heads[mod].params.items()}
                  for mod in heads}

    def step(self, heads, grads, lr):
        self.step_count += 1
        t = self.step_count
        for mod, head in heads.items():
            for name, param in head.params.items():
                g = grads[mod][name]
                m = self.m[mod][name] = self.beta1 * self.m[mod][name] + (1 - self.beta1) * g
                v = self.v[mod][name] = self.beta2 * self.v[mod][name] + (1 - self.beta2) * g**2
                m_hat = m / (1 - self.beta1**t)
                v_hat = v / (1 - self.beta2**t)
                update = m_hat / (np.sqrt(v_hat) + self.eps)
                if self.decay_filter(name):
                    update = update + self.weight_decay * param
                param -= lr * update


@dataclass
class TrainResult:
    heads: dict
    loss_trace: list  # (step, loss, lr) tuples
    config: AlignConfig


def init_heads(dims, config, d_out=None):
    """Seeded heads for each modality; dims maps modality -> input width."""
    d_out = d_out or config.output_dim
    heads = {}
    for i, m in enumerate(MODALITY_ORDER):
        rng = np.random.Generator(np.random.Philox(key=np.uint64(config.seed * 31 + i)))
        heads[m] = ProjectionHead(dims[m], config.hidden_dim, d_out, rng=rng)
    return heads


def train(features, config, heads=None):
    """Train projection heads on paired tri-modal feature matrices.

    features maps modality -> (N, d_m) array; row i is the same patch in
    every modality.  Shuffling, initialization and the optimizer are all
    seeded, and the last incomplete batch of each epoch is dropped, so two
    runs with the same seed produce identical checkpoints.
    """
    mats = {m: np.asarray(features[m], dtype=np.float64) for m in MODALITY_ORDER}
    n = mats["HE"].shape[0]
    if any(mats[m].shape[0] != n for m in MODALITY_ORDER):
        raise ArgumentError("modalities must be paired row-for-row")
    if n < config.batch_size:
        raise ConfigError(
            f"dataset has {n} paired items, fewer than batch size {config.batch_size}; "
            "use a smaller batch size")
    steps_per_epoch = n // config.batch_size
    total_steps = config.total_steps or config.epochs * steps_per_epoch
    if total_steps <= config.warmup_steps:
        raise ConfigError("schedule needs total_steps > warmup_steps")

    if heads is None:
        heads = init_heads({m: mats[m].shape[1] for m in MODALITY_ORDER}, config)
    optimizer = AdamW(heads, config.weight_decay)
    shuffle_rng = np.random.Generator(np.random.Philox(key=np.uint64(config.seed)))

    loss_trace = []
    step = 0
    while step < total_steps:
        order = shuffle_rng.permutation(n)
        for b in range(steps_per_epoch):
            if step >= total_steps:
                break
            batch = order[b * config.batch_size:(b + 1) * config.batch_size]
            feats = {m: mats[m][batch] for m in MODALITY_ORDER}
            loss, grads = loss_and_param_grads(
                feats, heads, config.temperature, training=True, update_running=True)
            step += 1
            lr = lr_at(step, config.lr_projection, config.warmup_steps, total_steps)
            optimizer.step(heads, grads, lr)
            loss_trace.append((step, loss, lr))
    return TrainResult(heads, loss_trace, config)


# ---------------------------------------------------------------------------
# Checkpoint container and loss-trace CSV
# ---------------------------------------------------------------------------

def save_checkpoint(heads, path, config=None):
    """Named-tensor container: header, JSON table of contents, f64 payload."""
    names, shapes, payloads = [], [], []
    for m in MODALITY_ORDER:
        for name, tensor in heads[m].state_tensors().items():
            names.append(f"{m}.{name}")
            shapes.append(list(np.shape(tensor)))
            payloads.append(np.ascontiguousarray(tensor, dtype="<f8").tobytes())
    meta = {
        "tensors": [{"name": n, "shape": s} for n, s in zip(names, shapes)],
        "config": None if config is None else {
            "temperature": config.temperature,
            "hidden_dim": config.hidden_dim,
            "output_dim": config.output_dim,
            "seed": config.seed,
        },
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for payload in payloads:
            fh.write(payload)


def load_checkpoint(path, dims=None):
    """Rebuild heads from a checkpoint; dims override is rarely needed."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic")
    version, blob_len = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    meta = json.loads(data[12:12 + blob_len].decode("utf-8"))
    offset = 12 + blob_len
    tensors = {}
    for entry in meta["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        raw = np.frombuffer(data, dtype="<f8", count=count, offset=offset)
        tensors[entry["name"]] = raw.reshape(entry["shape"])
        offset += 8 * count
    heads = {}
    for m in MODALITY_ORDER:
        w1 = tensors[f"{m}.w1"]
        head = ProjectionHead(w1.shape[0], w1.shape[1], tensors[f"{m}.w2"].shape[1])
        head.load_state_tensors({k.split(".", 1)[1]: v for k, v in tensors.items()
                                 if k.startswith(m + ".")})
        heads[m] = head
    return heads


def write_loss_trace(loss_trace, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "lr"])
        for step, loss, lr in loss_trace:
            writer.writerow([step, f"{loss:.10g}", f"{lr:.10g}"])
