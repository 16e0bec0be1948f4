"""Multimodal evidential classifier on tabular features.

One small MLP encoder per modality feeds an evidential head that emits four
constrained NIG parameters per class channel.  Per-modality predictive
Student's t distributions are fused channel-wise by the minimum-v rule;
the predicted class is the argmax of the fused locations.

Training minimizes the total evidential objective with Adam, entirely in
numpy with hand-written backpropagation.  Everything is deterministic given
the seed: weight initialization, batch shuffling, and summation order.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from .distributions import NIGParams, StudentT
from .fusion import FusedStudentT, fuse_stack
from .losses import softmax, total_loss_and_grads_arrays

CHECKPOINT_FORMAT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss becomes non-finite."""


@dataclass(frozen=True)
class EncoderSpec:
    input_dim: int
    hidden_dims: tuple[int, ...] = (64,)
    # tanh keeps encoder features bounded, so off-distribution inputs push
    # the evidence heads toward wider predictive distributions instead of
    # scaling all parameters up together
    activation: str = "tanh"

    def __post_init__(self):
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if len(self.hidden_dims) < 1 or any(h < 1 for h in self.hidden_dims):
            raise ValueError("need at least one positive hidden dim")
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    max_epochs: int = 100
    batch_size: int = 16
    lam: float = 0.5
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    freeze_encoders: bool = False
    keep_best: bool = False  # restore weights from the best-validation epoch

    def __post_init__(self):
        if not (self.learning_rate > 0):
            raise ValueError("learning_rate must be > 0")
        if not (0.0 <= self.lam <= 1.0):
            raise ValueError("lam must be in [0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class EvidentialOutput:
    """Everything the forward pass produces for one sample."""

    nig: list[list[NIGParams]]  # [modality][class]
    st: list[list[StudentT]]  # [modality][class]
    fused: list[FusedStudentT]  # [class]
    predicted_class: int
    confidences: np.ndarray  # softmax over fused locations
    aleatoric: np.ndarray  # (M, K)
    epistemic: np.ndarray  # (M, K)
    fused_uncertainty: float  # variance of the predicted class channel


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


_DELTA_FLOOR = 1e-6
_ALPHA_FLOOR = 1e-4
_BETA_FLOOR = 1e-6


def head_constrain(raw: Sequence[float]) -> NIGParams:
    """Map four unconstrained head outputs to a valid NIG parameter set."""
    raw = np.asarray(raw, dtype=float)
    if raw.shape != (4,) or not np.all(np.isfinite(raw)):
        raise ValueError("raw must be four finite values")
    return NIGParams(
        gamma=float(raw[0]),
        delta=float(softplus(raw[1]) + _DELTA_FLOOR),
        alpha=float(1.0 + softplus(raw[2]) + _ALPHA_FLOOR),
        beta=float(softplus(raw[3]) + _BETA_FLOOR),
    )


def _constrain_arrays(raw: np.ndarray):
    """raw (..., K, 4) -> (gamma, delta, alpha, beta), each (..., K)."""
    gamma = raw[..., 0]
    delta = softplus(raw[..., 1]) + _DELTA_FLOOR
    alpha = 1.0 + softplus(raw[..., 2]) + _ALPHA_FLOOR
    beta = softplus(raw[..., 3]) + _BETA_FLOOR
    return gamma, delta, alpha, beta


def _constrain_backward(raw: np.ndarray, g_params: np.ndarray) -> np.ndarray:
    """Chain (..., K, 4) parameter adjoints back to the raw head outputs."""
    g_raw = np.empty_like(g_params)
    g_raw[..., 0] = g_params[..., 0]
    g_raw[..., 1] = g_params[..., 1] * _sigmoid(raw[..., 1])
    g_raw[..., 2] = g_params[..., 2] * _sigmoid(raw[..., 2])
    g_raw[..., 3] = g_params[..., 3] * _sigmoid(raw[..., 3])
    return g_raw


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class _MLP:
    """Dense layers with a shared activation; identity on the last layer."""

    def __init__(self, spec: EncoderSpec, rng: np.random.Generator):
        self.spec = spec
        dims = [spec.input_dim] + list(spec.hidden_dims)
        self.weights = [_glorot(rng, a, b) for a, b in zip(dims[:-1], dims[1:])]
        self.biases = [np.zeros(b) for b in dims[1:]]

    @property
    def output_dim(self) -> int:
        return self.spec.hidden_dims[-1]

    def forward(self, x: np.ndarray):
        acts = [x]
        pre = []
        for w, b in zip(self.weights, self.biases):
            z = acts[-1] @ w + b
            pre.append(z)
            if self.spec.activation == "relu":
                acts.append(np.maximum(z, 0.0))
            else:
                acts.append(np.tanh(z))
        return acts[-1], (acts, pre)

    def backward(self, cache, g_out: np.ndarray):
        acts, pre = cache
        grads_w, grads_b = [], []
        g = g_out
        for i in range(len(self.weights) - 1, -1, -1):
            if self.spec.activation == "relu":
                g = g * (pre[i] > 0.0)
            else:
                g = g * (1.0 - np.tanh(pre[i]) ** 2)
            grads_w.append(acts[i].T @ g)
            grads_b.append(g.sum(axis=0))
            g = g @ self.weights[i].T
        return grads_w[::-1], grads_b[::-1]

    def params(self):
        return self.weights + self.biases


class _Head:
    """Linear map from encoder features to 4*K raw evidential values."""

    def __init__(self, in_dim: int, n_classes: int, rng: np.random.Generator):
        self.n_classes = n_classes
        self.weight = _glorot(rng, in_dim, 4 * n_classes)
        self.bias = np.zeros(4 * n_classes)

    def forward(self, h: np.ndarray) -> np.ndarray:
        raw = h @ self.weight + self.bias
        return raw.reshape(h.shape[0], self.n_classes, 4)

    def backward(self, h: np.ndarray, g_raw: np.ndarray):
        g_flat = g_raw.reshape(h.shape[0], 4 * self.n_classes)
        return h.T @ g_flat, g_flat.sum(axis=0), g_flat @ self.weight.T

    def params(self):
        return [self.weight, self.bias]


class MultimodalClassifier:
    """Per-modality encoders + evidential heads with min-v fusion."""

    def __init__(self, encoder_specs: Sequence[EncoderSpec], n_classes: int, seed: int = 0):
        if n_classes < 2:
            raise ValueError("need at least two classes")
        if len(encoder_specs) < 1:
            raise ValueError("need at least one modality")
        self.encoder_specs = list(encoder_specs)
        self.n_classes = n_classes
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.encoders = [_MLP(spec, rng) for spec in encoder_specs]
        self.heads = [
            _Head(enc.output_dim, n_classes, rng) for enc in self.encoders
        ]

    @property
    def n_modalities(self) -> int:
        return len(self.encoders)

    # ---- forward -----------------------------------------------------

    def forward_batch(self, features: Sequence[np.ndarray]):
        """Batch forward; returns constrained parameter arrays and caches.

        `features` is one (B, d_m) array per modality.  The returned dict
        holds gamma/delta/alpha/beta with shape (M, B, K), the raw head
        outputs, encoder caches, and the fused trace.
        """
        if len(features) != self.n_modalities:
            raise ValueError(
                f"expected {self.n_modalities} feature blocks, got {len(features)}"
            )
        hs, caches, raws = [], [], []
        for enc, head, x in zip(self.encoders, self.heads, features):
            x = np.asarray(x, dtype=float)
            if x.ndim != 2 or x.shape[1] != enc.spec.input_dim:
                raise ValueError(
                    f"feature block has shape {x.shape}, expected (B, {enc.spec.input_dim})"
                )
            h, cache = enc.forward(x)
            hs.append(h)
            caches.append(cache)
            raws.append(head.forward(h))
        raw = np.stack(raws)  # (M, B, K, 4)
        gamma, delta, alpha, beta = _constrain_arrays(raw)
        u, sigma, v = gamma, beta * (1.0 + delta) / (delta * alpha), 2.0 * alpha
        trace = fuse_stack(u, sigma, v)
        return {
            "raw": raw,
            "gamma": gamma,
            "delta": delta,
            "alpha": alpha,
            "beta": beta,
            "st": (u, sigma, v),
            "trace": trace,
            "hidden": hs,
            "caches": caches,
        }

    def forward(self, sample: Sequence[np.ndarray]) -> EvidentialOutput:
        """Full evidential readout for a single sample."""
        batch = [np.asarray(x, dtype=float).reshape(1, -1) for x in sample]
        out = self.forward_batch(batch)
        gamma, delta, alpha, beta = (
            out["gamma"][:, 0],
            out["delta"][:, 0],
            out["alpha"][:, 0],
            out["beta"][:, 0],
        )
        u, sigma, v = (a[:, 0] for a in out["st"])
        trace = out["trace"]
        nig = [
            [
                NIGParams(gamma[m, k], delta[m, k], alpha[m, k], beta[m, k])
                for k in range(self.n_classes)
            ]
            for m in range(self.n_modalities)
        ]
        st = [
            [StudentT(u[m, k], sigma[m, k], v[m, k]) for k in range(self.n_classes)]
            for m in range(self.n_modalities)
        ]
        fused = [
            FusedStudentT(
                StudentT(
                    trace.u[0, k], trace.sigma[0, k], trace.v[0, k]
                ),
                int(trace.source[0, k]),
            )
            for k in range(self.n_classes)
        ]
        conf = softmax(trace.u[0])
        pred = int(np.argmax(trace.u[0]))
        fused_var = trace.sigma[0, pred] * trace.v[0, pred] / (trace.v[0, pred] - 2.0)
        return EvidentialOutput(
            nig=nig,
            st=st,
            fused=fused,
            predicted_class=pred,
            confidences=conf,
            aleatoric=beta / (alpha - 1.0),
            epistemic=beta / (delta * (alpha - 1.0)),
            fused_uncertainty=float(fused_var),
        )

    # ---- persistence ---------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "n_classes": self.n_classes,
            "seed": self.seed,
            "encoder_specs": [
                {
                    "input_dim": s.input_dim,
                    "hidden_dims": list(s.hidden_dims),
                    "activation": s.activation,
                }
                for s in self.encoder_specs
            ],
            "encoders": [
                {
                    "weights": [w.tolist() for w in enc.weights],
                    "biases": [b.tolist() for b in enc.biases],
                }
                for enc in self.encoders
            ],
            "heads": [
                {"weight": head.weight.tolist(), "bias": head.bias.tolist()}
                for head in self.heads
            ],
        }

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.state_dict(), f)

    @classmethod
    def from_state_dict(cls, state: dict) -> "MultimodalClassifier":
        if state.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(
                f"unsupported checkpoint format: {state.get('format_version')!r}"
            )
        specs = [
            EncoderSpec(s["input_dim"], tuple(s["hidden_dims"]), s["activation"])
            for s in state["encoder_specs"]
        ]
        model = cls(specs, state["n_classes"], seed=state["seed"])
        for enc, es in zip(model.encoders, state["encoders"]):
            enc.weights = [np.array(w, dtype=float) for w in es["weights"]]
            enc.biases = [np.array(b, dtype=float) for b in es["biases"]]
        for head, hs in zip(model.heads, state["heads"]):
            head.weight = np.array(hs["weight"], dtype=float)
            head.bias = np.array(hs["bias"], dtype=float)
        return model

    @classmethod
    def load(cls, path) -> "MultimodalClassifier":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_state_dict(json.load(f))


def predict(model: MultimodalClassifier, sample: Sequence[np.ndarray]):
    """Class decision plus confidence and uncertainty readouts.

    Returns (class, confidences, per-modality uncertainties, fused
    uncertainty); the per-modality entry holds the aleatoric and epistemic
    arrays shaped (M, K).
    """
    out = model.forward(sample)
    return (
        out.predicted_class,
        out.confidences,
        {"aleatoric": out.aleatoric, "epistemic": out.epistemic},
        out.fused_uncertainty,
    )


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainRecord:
    """Per-run training log returned by `train`."""

    config: TrainConfig
    epoch_losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    best_epoch: int | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["config"] = asdict(self.config)
        return d


def config_hash(payload: dict) -> str:
    canon = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def _batch_loss_and_param_grads(model, features, y_onehot, lam):
    out = model.forward_batch(features)
    parts, grads = total_loss_and_grads_arrays(
        out["gamma"], out["delta"], out["alpha"], out["beta"], y_onehot, lam
    )
    b = y_onehot.shape[0]
    g_raw = _constrain_backward(out["raw"], grads) / b
    grad_list = []
    for m, (enc, head) in enumerate(zip(model.encoders, model.heads)):
        g_w, g_b, g_h = head.backward(out["hidden"][m], g_raw[m])
        enc_gw, enc_gb = enc.backward(out["caches"][m], g_h)
        grad_list.append((enc_gw, enc_gb, g_w, g_b))
    return float(parts["total"].mean()), grad_list


class _Adam:
    def __init__(self, params: list[np.ndarray], cfg: TrainConfig):
        self.cfg = cfg
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]):
        c = self.cfg
        self.t += 1
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            mhat = m / (1.0 - c.beta1**self.t)
            vhat = v / (1.0 - c.beta2**self.t)
            p -= c.learning_rate * mhat / (np.sqrt(vhat) + c.eps)


def _dataset_loss(model, dataset, lam: float) -> float:
    out = model.forward_batch(dataset.features)
    y = np.eye(model.n_classes)[dataset.labels]
    parts, _ = total_loss_and_grads_arrays(
        out["gamma"], out["delta"], out["alpha"], out["beta"], y, lam
    )
    return float(parts["total"].mean())


def train(model: MultimodalClassifier, dataset, config: TrainConfig, val_dataset=None):
    """Mini-batch Adam training of the total evidential objective.

    `dataset` needs `.features` (list of (N, d_m) arrays) and `.labels`
    (ints in [0, K)).  Returns (model, TrainRecord); the model is trained in
    place.  Deterministic given the seed.
    """
    n = len(dataset.labels)
    if n == 0:
        raise ValueError("dataset is empty")
    labels = np.asarray(dataset.labels)
    if labels.min() < 0 or labels.max() >= model.n_classes:
        raise ValueError("labels out of range")
    eye = np.eye(model.n_classes)

    trainable = []
    for enc in model.encoders:
        if not config.freeze_encoders:
            trainable.extend(enc.weights)
            trainable.extend(enc.biases)
    for head in model.heads:
        trainable.append(head.weight)
        trainable.append(head.bias)
    opt = _Adam(trainable, config)

    rng = np.random.default_rng(config.seed)
    record = TrainRecord(config=config)
    best_val = np.inf
    best_state = None

    for epoch in range(config.max_epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            feats = [x[idx] for x in dataset.features]
            y = eye[labels[idx]]
            loss, grad_list = _batch_loss_and_param_grads(
                model, feats, y, config.lam
            )
            if not np.isfinite(loss):
                norms = [float(np.linalg.norm(p)) for p in trainable]
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {start // config.batch_size}; "
                    f"parameter norms {norms}"
                )
            flat = []
            for m, (enc_gw, enc_gb, hw, hb) in enumerate(grad_list):
                if not config.freeze_encoders:
                    flat.extend(enc_gw)
                    flat.extend(enc_gb)
            # parameter order must match `trainable`: encoders first, then heads
            for _, (_, _, hw, hb) in enumerate(grad_list):
                flat.append(hw)
                flat.append(hb)
            opt.step(trainable, flat)
            epoch_loss += loss * len(idx)
        record.epoch_losses.append(epoch_loss / n)

        if val_dataset is not None:
            val_loss = _dataset_loss(model, val_dataset, config.lam)
            record.val_losses.append(val_loss)
            if config.keep_best and val_loss < best_val:
                best_val = val_loss
                best_state = model.state_dict()
                record.best_epoch = epoch

    if config.keep_best and best_state is not None:
        restored = MultimodalClassifier.from_state_dict(best_state)
        model.encoders = restored.encoders
        model.heads = restored.heads
    return model, record
