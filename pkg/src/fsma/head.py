"""Trainable integration head over frozen block-token stacks.

Pipeline per image: a shared two-block MLP projects every block's [CLS]
token (``proj_in``), a second shared two-block MLP scores each projected
token per channel (``weight_net``), the scores are softmax-normalized over
the block axis into per-image convex channel weights, the projected tokens
are integrated by the weighted sum, and a final two-block MLP (``proj_out``)
produces the embedding fed to an affine classifier during base training.

Each two-block MLP is Linear -> Dropout -> ReLU, twice, with hidden width
d1. Because the block MLPs are shared across rows, parameter count is
independent of the backbone depth, so the same head config transfers across
encoders of different block counts.

All math is float64 numpy with hand-written backward passes (verified
against central finite differences by :func:`gradient_check`); the blockwise
softmax/integration inner loops go through :mod:`fsma.kernels`. Training is
plain mini-batch Adam on cross-entropy, deterministic given the config seed.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import NumericError, StorageError, ValidationError

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class HeadConfig:
    """Dimensions and training hyperparameters of the head."""

    n_blocks: int
    d0: int
    d1: int | None = None
    d2: int | None = None
    n_classes: int | None = None
    dropout_rate: float = 0.5
    learning_rate: float = 1e-3
    batch_size: int = 128
    epochs: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.n_blocks < 1 or self.d0 < 1:
            raise ValidationError("n_blocks and d0 must be >= 1")
        if self.d1 is None:
            self.d1 = self.d0
        if self.d2 is None:
            self.d2 = self.d0
        if self.d1 < 1 or self.d2 < 1:
            raise ValidationError("d1 and d2 must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValidationError("dropout_rate must be in [0, 1)")
        if self.learning_rate < 0:
            raise ValidationError("learning_rate must be >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValidationError("batch_size must be >= 1 and epochs >= 0")


@dataclass
class MlpParams:
    """Two blocks of Linear -> Dropout -> ReLU with shared application."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @staticmethod
    def init(din: int, hidden: int, dout: int, rng: np.random.Generator) -> "MlpParams":
        # small positive bias keeps ReLU preactivations off the exact kink
        # for zero inputs (dead rows of the previous ReLU stage)
        return MlpParams(
            w1=rng.normal(0.0, np.sqrt(2.0 / din), (din, hidden)),
            b1=np.full(hidden, 0.01),
            w2=rng.normal(0.0, np.sqrt(2.0 / hidden), (hidden, dout)),
            b2=np.full(dout, 0.01),
        )

    @staticmethod
    def identity(d: int) -> "MlpParams":
        """Acts as the identity on nonnegative inputs (ReLU passes through)."""
        return MlpParams(np.eye(d), np.zeros(d), np.eye(d), np.zeros(d))

    @staticmethod
    def zeros(din: int, hidden: int, dout: int) -> "MlpParams":
        return MlpParams(
            np.zeros((din, hidden)), np.zeros(hidden), np.zeros((hidden, dout)), np.zeros(dout)
        )


@dataclass
class HeadParams:
    proj_in: MlpParams
    weight_net: MlpParams
    proj_out: MlpParams
    classifier_w: np.ndarray
    classifier_b: np.ndarray

    def arrays(self) -> list[tuple[str, np.ndarray]]:
        """Stable (name, array) listing of every parameter tensor."""
        out = []
        for group_name in ("proj_in", "weight_net", "proj_out"):
            mlp = getattr(self, group_name)
            for leaf in ("w1", "b1", "w2", "b2"):
                out.append((f"{group_name}.{leaf}", getattr(mlp, leaf)))
        out.append(("classifier.w", self.classifier_w))
        out.append(("classifier.b", self.classifier_b))
        return out

    def copy(self) -> "HeadParams":
        return HeadParams(
            proj_in=MlpParams(*(a.copy() for a in (self.proj_in.w1, self.proj_in.b1, self.proj_in.w2, self.proj_in.b2))),
            weight_net=MlpParams(*(a.copy() for a in (self.weight_net.w1, self.weight_net.b1, self.weight_net.w2, self.weight_net.b2))),
            proj_out=MlpParams(*(a.copy() for a in (self.proj_out.w1, self.proj_out.b1, self.proj_out.w2, self.proj_out.b2))),
            classifier_w=self.classifier_w.copy(),
            classifier_b=self.classifier_b.copy(),
        )


def init_params(config: HeadConfig) -> HeadParams:
    """He-initialized parameters, deterministic in config.seed."""
    if config.n_classes is None or config.n_classes < 1:
        raise ValidationError("config.n_classes must be set before init")
    rng = np.random.default_rng(config.seed)
    d0, d1, d2 = config.d0, config.d1, config.d2
    return HeadParams(
        proj_in=MlpParams.init(d0, d1, d1, rng),
        weight_net=MlpParams.init(d1, d1, d1, rng),
        proj_out=MlpParams.init(d1, d1, d2, rng),
        classifier_w=rng.normal(0.0, np.sqrt(1.0 / d2), (d2, config.n_classes)),
        classifier_b=np.zeros(config.n_classes),
    )


def params_digest(params: HeadParams) -> str:
    """sha256 over every parameter tensor; bit-identical params, same digest."""
    h = hashlib.sha256()
    for name, arr in params.arrays():
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

def _mlp_forward(x, mlp: MlpParams, dropout_rate=0.0, rng=None):
    """Forward one two-block MLP on (rows, din); returns (out, cache)."""
    a1 = x @ mlp.w1 + mlp.b1
    if rng is not None and dropout_rate > 0.0:
        m1 = (rng.random(a1.shape) >= dropout_rate) / (1.0 - dropout_rate)
    else:
        m1 = None
    z1 = a1 if m1 is None else a1 * m1
    h1 = np.maximum(z1, 0.0)
    a2 = h1 @ mlp.w2 + mlp.b2
    if rng is not None and dropout_rate > 0.0:
        m2 = (rng.random(a2.shape) >= dropout_rate) / (1.0 - dropout_rate)
    else:
        m2 = None
    z2 = a2 if m2 is None else a2 * m2
    out = np.maximum(z2, 0.0)
    return out, (x, z1, h1, z2, m1, m2)


def _mlp_backward(dout, cache, mlp: MlpParams):
    """Backward for :func:`_mlp_forward`; returns (dx, grads dict)."""
    x, z1, h1, z2, m1, m2 = cache
    dz2 = dout * (z2 > 0.0)
    da2 = dz2 if m2 is None else dz2 * m2
    dw2 = h1.T @ da2
    db2 = da2.sum(axis=0)
    dh1 = da2 @ mlp.w2.T
    dz1 = dh1 * (z1 > 0.0)
    da1 = dz1 if m1 is None else dz1 * m1
    dw1 = x.T @ da1
    db1 = da1.sum(axis=0)
    dx = da1 @ mlp.w1.T
    return dx, {"w1": dw1, "b1": db1, "w2": dw2, "b2": db2}


def _forward_batch(stacks, params: HeadParams, dropout_rate=0.0, rng=None):
    """Full head on (B, n, d0) stacks; returns outputs and backward caches."""
    b, n, d0 = stacks.shape
    x2 = np.ascontiguousarray(stacks.reshape(b * n, d0))
    p2, c_in = _mlp_forward(x2, params.proj_in, dropout_rate, rng)
    r2, c_net = _mlp_forward(p2, params.weight_net, dropout_rate, rng)
    d1 = p2.shape[1]
    projected = np.ascontiguousarray(p2.reshape(b, n, d1))
    raw = np.ascontiguousarray(r2.reshape(b, n, d1))
    scaled = kernels.scale_weights(raw)
    integrated = kernels.integrate(projected, scaled)
    embeddings, c_out = _mlp_forward(integrated, params.proj_out, dropout_rate, rng)
    logits = embeddings @ params.classifier_w + params.classifier_b
    caches = (c_in, c_net, c_out, projected, scaled, b, n)
    return embeddings, logits, scaled, caches


def _backward_batch(dlogits, embeddings, params: HeadParams, caches):
    """Gradients of the scalar loss wrt every parameter tensor."""
    c_in, c_net, c_out, projected, scaled, b, n = caches
    grads: dict[str, np.ndarray] = {}
    grads["classifier.w"] = embeddings.T @ dlogits
    grads["classifier.b"] = dlogits.sum(axis=0)
    d_emb = dlogits @ params.classifier_w.T
    d_int, g_out = _mlp_backward(d_emb, c_out, params.proj_out)
    d_proj_direct, d_scaled = kernels.integrate_backward(projected, scaled, d_int)
    d_raw = kernels.scale_weights_backward(scaled, d_scaled)
    d1 = projected.shape[2]
    d_p2, g_net = _mlp_backward(d_raw.reshape(b * n, d1), c_net, params.weight_net)
    d_p2 = d_p2 + d_proj_direct.reshape(b * n, d1)
    _, g_in = _mlp_backward(d_p2, c_in, params.proj_in)
    for group_name, g in (("proj_in", g_in), ("weight_net", g_net), ("proj_out", g_out)):
        for leaf, arr in g.items():
            grads[f"{group_name}.{leaf}"] = arr
    return grads


def _softmax_cross_entropy(logits, labels):
    """Mean CE loss and dloss/dlogits for integer labels."""
    b = logits.shape[0]
    m = logits.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True))
    loss = float((lse[:, 0] - logits[np.arange(b), labels]).mean())
    probs = np.exp(logits - lse)
    probs[np.arange(b), labels] -= 1.0
    return loss, probs / b


# ---------------------------------------------------------------------------
# public per-image operations
# ---------------------------------------------------------------------------

def _check_stack(stack, params: HeadParams):
    if stack.ndim != 2 or stack.shape[1] != params.proj_in.w1.shape[0]:
        raise ValidationError(
            f"stack must be (n, {params.proj_in.w1.shape[0]}), got {stack.shape}"
        )


def project_tokens(stack: np.ndarray, params: HeadParams) -> np.ndarray:
    """Apply the shared input projector to every block token (eval mode)."""
    _check_stack(stack, params)
    out, _ = _mlp_forward(stack, params.proj_in)
    return out


def raw_block_weights(projected: np.ndarray, params: HeadParams) -> np.ndarray:
    """Per-image raw channel weights for each projected token (eval mode)."""
    if projected.ndim != 2 or projected.shape[1] != params.weight_net.w1.shape[0]:
        raise ValidationError(
            f"projected must be (n, {params.weight_net.w1.shape[0]}), got {projected.shape}"
        )
    out, _ = _mlp_forward(projected, params.weight_net)
    if not np.isfinite(out).all():
        raise NumericError("non-finite raw block weights")
    return out


def scale_weights(raw: np.ndarray) -> np.ndarray:
    """Softmax each channel column over the block axis.

    Every column of the result is strictly positive and sums to 1: a
    per-channel probability distribution over blocks.
    """
    if raw.ndim != 2:
        raise ValidationError(f"raw weights must be 2-d (n, d1), got {raw.shape}")
    if not np.isfinite(raw).all():
        raise NumericError("non-finite raw weights")
    return kernels.scale_weights(np.ascontiguousarray(raw[None]))[0]


def integrate_tokens(projected: np.ndarray, scaled: np.ndarray) -> np.ndarray:
    """Channel-wise weighted sum of projected tokens over blocks."""
    if projected.shape != scaled.shape or projected.ndim != 2:
        raise ValidationError(
            f"shape mismatch: projected {projected.shape} vs scaled {scaled.shape}"
        )
    return kernels.integrate(
        np.ascontiguousarray(projected[None]), np.ascontiguousarray(scaled[None])
    )[0]


def forward(stack: np.ndarray, params: HeadParams, mode: str = "eval", rng=None,
            dropout_rate: float = 0.0):
    """Embedding and class logits for one stack.

    Eval mode is a pure deterministic function of (stack, params); train mode
    applies inverted dropout using ``rng``.
    """
    if mode not in ("train", "eval"):
        raise ValidationError(f"mode must be 'train' or 'eval', got {mode!r}")
    _check_stack(stack, params)
    if mode == "train" and dropout_rate > 0.0 and rng is None:
        raise ValidationError("train-mode forward with dropout needs an rng")
    use_rng = rng if mode == "train" else None
    rate = dropout_rate if mode == "train" else 0.0
    emb, logits, _, _ = _forward_batch(stack[None], params, rate, use_rng)
    return emb[0], logits[0]


def embed_batch(stacks: np.ndarray, params: HeadParams) -> np.ndarray:
    """Eval-mode embeddings for (B, n, d0) stacks."""
    emb, _, _, _ = _forward_batch(stacks, params)
    return emb


def block_weights(stacks: np.ndarray, params: HeadParams) -> np.ndarray:
    """Eval-mode softmax-scaled block weights, (B, n, d1), for analysis."""
    if stacks.ndim == 2:
        stacks = stacks[None]
    _, _, scaled, _ = _forward_batch(stacks, params)
    return scaled


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    params: HeadParams
    classes: list[str]
    log: list[dict] = field(default_factory=list)
    total_steps: int = 0


class _Adam:
    def __init__(self, params: HeadParams, lr: float):
        self.lr = lr
        self.t = 0
        self.m = {name: np.zeros_like(a) for name, a in params.arrays()}
        self.v = {name: np.zeros_like(a) for name, a in params.arrays()}

    def step(self, params: HeadParams, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - ADAM_BETA1 ** self.t
        bc2 = 1.0 - ADAM_BETA2 ** self.t
        for name, arr in params.arrays():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * g * g
            arr -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)


def train_base(dataset, config: HeadConfig, class_order: list[str] | None = None) -> TrainResult:
    """Train the head with cross-entropy on (stack, label) pairs.

    ``dataset`` is any iterable of (tokens (n, d0), class_label). Runs
    ``config.epochs`` passes of shuffled mini-batch Adam; reproducible given
    config.seed. The log records per-epoch mean loss, accuracy and wall time.
    """
    pairs = list(dataset)
    if not pairs:
        raise ValidationError("training dataset is empty")
    stacks = np.stack([np.asarray(t, dtype=np.float64) for t, _ in pairs])
    labels = [lab for _, lab in pairs]
    if class_order is None:
        class_order = list(dict.fromkeys(labels))
    index = {lab: i for i, lab in enumerate(class_order)}
    unknown = sorted(set(labels) - set(index))
    if unknown:
        raise ValidationError(f"labels not in class order: {unknown}")
    y = np.array([index[lab] for lab in labels], dtype=np.int64)

    if config.n_classes is None:
        config.n_classes = len(class_order)
    elif config.n_classes != len(class_order):
        raise ValidationError(
            f"config.n_classes={config.n_classes} but {len(class_order)} classes given"
        )
    if stacks.shape[2] != config.d0:
        raise ValidationError(f"stack dim {stacks.shape[2]} != config.d0 {config.d0}")

    params = init_params(config)
    optimizer = _Adam(params, config.learning_rate)
    rng = np.random.default_rng([config.seed, 0x7261696E])  # training stream
    n = stacks.shape[0]
    log = []
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        perm = rng.permutation(n)
        loss_sum = 0.0
        correct = 0
        for start in range(0, n, config.batch_size):
            batch_idx = perm[start : start + config.batch_size]
            xb = stacks[batch_idx]
            yb = y[batch_idx]
            emb, logits, _, caches = _forward_batch(xb, params, config.dropout_rate, rng)
            loss, dlogits = _softmax_cross_entropy(logits, yb)
            if not np.isfinite(loss):
                raise NumericError(
                    f"non-finite loss at epoch {epoch}, batch {start // config.batch_size}"
                )
            grads = _backward_batch(dlogits, emb, params, caches)
            optimizer.step(params, grads)
            loss_sum += loss * len(batch_idx)
            correct += int((logits.argmax(axis=1) == yb).sum())
        log.append(
            {
                "epoch": epoch,
                "loss": loss_sum / n,
                "accuracy": correct / n,
                "seconds": time.perf_counter() - t0,
            }
        )
    return TrainResult(params=params, classes=class_order, log=log, total_steps=optimizer.t)


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------

def loss_on_stack(stack: np.ndarray, label: int, params: HeadParams) -> float:
    """Eval-mode cross-entropy of one stack; the scalar gradient_check probes."""
    _, logits, _, _ = _forward_batch(stack[None], params)
    loss, _ = _softmax_cross_entropy(logits, np.array([label]))
    return loss


def analytic_gradients(stack: np.ndarray, label: int, params: HeadParams) -> dict[str, np.ndarray]:
    """Backprop gradients of :func:`loss_on_stack` wrt every parameter."""
    emb, logits, _, caches = _forward_batch(stack[None], params)
    _, dlogits = _softmax_cross_entropy(logits, np.array([label]))
    return _backward_batch(dlogits, emb, params, caches)


def gradient_check(
    params: HeadParams, stack: np.ndarray, label: int, epsilon: float = 1e-5
) -> float:
    """Max relative error between backprop and central finite differences.

    Dropout is off (eval mode). Relative error per element is
    |ga - gn| / max(|ga|, |gn|, 1e-3); the floor keeps near-zero gradients in
    the absolute-error regime where finite-difference roundoff lives.
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise ValidationError("epsilon must be in [1e-6, 1e-3]")
    analytic = analytic_gradients(stack, label, params)
    worst = 0.0
    for name, arr in params.arrays():
        ga = analytic[name]
        flat = arr.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = loss_on_stack(stack, label, params)
            flat[i] = orig - epsilon
            down = loss_on_stack(stack, label, params)
            flat[i] = orig
            gn = (up - down) / (2.0 * epsilon)
            g = ga.ravel()[i]
            err = abs(g - gn) / max(abs(g), abs(gn), 1e-3)
            if err > worst:
                worst = err
    return worst


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(
    directory: str | Path,
    params: HeadParams,
    config: HeadConfig,
    classes: list[str],
    extra: dict | None = None,
) -> None:
    """Write parameters as raw .bin arrays plus a manifest.json sidecar."""
    d = Path(directory)
    try:
        d.mkdir(parents=True, exist_ok=True)
        arrays = {}
        for name, arr in params.arrays():
            fname = f"{name}.bin"
            data = np.ascontiguousarray(arr)
            (d / fname).write_bytes(data.tobytes())
            arrays[name] = {
                "file": fname,
                "shape": list(data.shape),
                "dtype": data.dtype.name,
            }
        meta = {
            "schema": "fsma-head-checkpoint-v1",
            "config": asdict(config),
            "classes": classes,
            "arrays": arrays,
            "params_digest": params_digest(params),
        }
        if extra:
            meta["extra"] = extra
        (d / "manifest.json").write_text(json.dumps(meta, indent=2) + "\n")
    except OSError as exc:
        raise StorageError(f"cannot write checkpoint to {directory}: {exc}")


def load_checkpoint(directory: str | Path) -> tuple[HeadParams, HeadConfig, list[str]]:
    d = Path(directory)
    try:
        meta = json.loads((d / "manifest.json").read_text())
    except OSError as exc:
        raise StorageError(f"cannot read checkpoint at {directory}: {exc}")
    except json.JSONDecodeError as exc:
        raise StorageError(f"corrupt checkpoint manifest at {directory}: {exc}")
    config = HeadConfig(**meta["config"])

    def _load(name):
        info = meta["arrays"][name]
        raw = (d / info["file"]).read_bytes()
        return np.frombuffer(raw, dtype=np.dtype(info["dtype"])).reshape(info["shape"]).copy()

    def _mlp(prefix):
        return MlpParams(*(_load(f"{prefix}.{leaf}") for leaf in ("w1", "b1", "w2", "b2")))

    params = HeadParams(
        proj_in=_mlp("proj_in"),
        weight_net=_mlp("weight_net"),
        proj_out=_mlp("proj_out"),
        classifier_w=_load("classifier.w"),
        classifier_b=_load("classifier.b"),
    )
    if params_digest(params) != meta["params_digest"]:
        raise StorageError(f"checkpoint at {directory} failed its digest check")
    return params, config, list(meta["classes"])
