"""Exact backpropagation through time, losses, dropout, optimizers, training.

Dropout wiring (training mode only; evaluation is a plain forward pass):

* standard input / variational input multiply the cell input x_t (fresh
  Bernoulli mask per timestep vs one mask per sequence);
* standard hidden / variational recurrent multiply the previous hidden state
  as seen by the recurrent weights (fresh per timestep vs per sequence);
* variational output multiplies the hidden state on the readout path;
* projection dropout multiplies the projection head's input (the intermediate
  activation when the head has one, otherwise the readout vector);
* zoneout stochastically keeps the previous hidden/cell state per unit, with
  the keep probability applying to the NEW state.

All multiplicative masks use inverted scaling (divide by keep probability at
train time), so inference needs no rescaling.  Keep probability 1 is an exact
identity for every kind.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .cells import GATES, Batch, Model, forward_batch, make_batch, parameter_dict, predict_proba
from .errors import ConfigError, DataError, TrainingDivergedError
from .linalg import sigmoid
from .metrics import au_roc, au_prc
from .rng import make_rng

#: Gradient sets mirror parameter_dict(): one array per parameter tensor,
#: matching shapes; masked-out grouped-cell entries are exactly zero.
GradientSet = dict


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def loss(logits, label, head_kind: str) -> float:
    """Cross-entropy of one example, numerically stabilized.

    head_kind 'sigmoid': scalar logit, binary label.  'softmax': class logits,
    integer label.  'multi_sigmoid': per-class logits, 0/1 vector label
    (mean over classes).
    """
    z = np.atleast_1d(np.asarray(logits, dtype=np.float64))
    if head_kind == "sigmoid":
        y = float(label)
        if y not in (0.0, 1.0):
            raise DataError(f"binary label must be 0 or 1, got {label!r}")
        zz = z[0]
        return float(max(zz, 0.0) - zz * y + np.log1p(np.exp(-abs(zz))))
    if head_kind == "softmax":
        y = int(label)
        if not 0 <= y < len(z):
            raise DataError(f"class label {label!r} outside [0, {len(z)})")
        m = z.max()
        return float(m + np.log(np.exp(z - m).sum()) - z[y])
    if head_kind == "multi_sigmoid":
        y = np.asarray(label, dtype=np.float64)
        if y.shape != z.shape or not np.isin(y, (0.0, 1.0)).all():
            raise DataError("multilabel target must be a 0/1 vector matching the logits")
        per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
        return float(per.mean())
    raise ConfigError(f"unknown head kind {head_kind!r}")


def batch_loss_and_grad(logits: np.ndarray, labels: np.ndarray, head_kind: str):
    """Mean loss over the batch and its gradient w.r.t. the logits."""
    B = logits.shape[0]
    if head_kind == "sigmoid":
        z = logits[:, 0]
        y = labels.astype(np.float64)
        per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
        dz = (sigmoid(z) - y) / B
        return float(per.mean()), dz[:, None]
    if head_kind == "softmax":
        y = labels.astype(np.int64)
        m = logits.max(axis=1, keepdims=True)
        e = np.exp(logits - m)
        p = e / e.sum(axis=1, keepdims=True)
        rows = np.arange(B)
        per = m[:, 0] + np.log(e.sum(axis=1)) - logits[rows, y]
        d = p.copy()
        d[rows, y] -= 1.0
        return float(per.mean()), d / B
    if head_kind == "multi_sigmoid":
        y = labels.astype(np.float64)
        per = np.maximum(logits, 0.0) - logits * y + np.log1p(np.exp(-np.abs(logits)))
        K = logits.shape[1]
        d = (sigmoid(logits) - y) / (B * K)
        return float(per.mean(axis=1).mean()), d
    raise ConfigError(f"unknown head kind {head_kind!r}")


# ---------------------------------------------------------------------------
# Dropout
# ---------------------------------------------------------------------------

DROPOUT_KINDS = (
    "standard-input", "standard-hidden", "projection",
    "variational-input", "variational-output", "variational-recurrent", "zoneout",
)


def apply_dropout(kind: str, keep_prob: float, rng: np.random.Generator, *tensors):
    """Apply one dropout kind to tensors shaped (T, ...) or (...).

    Standard kinds draw a fresh Bernoulli mask per timestep; variational kinds
    draw one mask per sequence and reuse it at every timestep; zoneout blends
    (previous, new) state pairs per unit.  keep_prob 1 returns the inputs
    unchanged; keep_prob 0 is rejected.
    """
    if kind not in DROPOUT_KINDS:
        raise ConfigError(f"unknown dropout kind {kind!r}")
    if not 0.0 < keep_prob <= 1.0:
        raise ConfigError(f"keep probability must be in (0, 1], got {keep_prob}")
    if kind == "zoneout":
        if len(tensors) != 2:
            raise ConfigError("zoneout expects (previous, new) state tensors")
        prev, new = (np.asarray(t, dtype=np.float64) for t in tensors)
        if keep_prob == 1.0:
            return new
        d = (rng.random(new.shape) >= keep_prob).astype(np.float64)  # 1 keeps OLD state
        return d * prev + (1.0 - d) * new
    if keep_prob == 1.0:
        return tensors[0] if len(tensors) == 1 else tensors
    out = []
    for tensor in tensors:
        arr = np.asarray(tensor, dtype=np.float64)
        if kind.startswith("variational") and arr.ndim >= 2:
            mask = (rng.random(arr.shape[1:]) < keep_prob) / keep_prob
            out.append(arr * mask[None])
        else:
            mask = (rng.random(arr.shape) < keep_prob) / keep_prob
            out.append(arr * mask)
    return out[0] if len(out) == 1 else tuple(out)


@dataclass
class DropoutMasks:
    """Pre-sampled masks for one forward/backward pass.

    Multiplicative masks are already divided by their keep probability;
    zone_h/zone_c hold the raw keep-OLD indicators.  Any field may be None
    (that kind disabled).
    """

    input_t: np.ndarray | None = None  # (T, B, X)
    var_input: np.ndarray | None = None  # (B, X)
    hidden_t: np.ndarray | None = None  # (T, B, H)
    var_recurrent: np.ndarray | None = None  # (B, H)
    var_output: np.ndarray | None = None  # (B, H)
    projection: np.ndarray | None = None  # (B, m or H)
    zone_h: np.ndarray | None = None  # (T, B, H)
    zone_c: np.ndarray | None = None  # (T, B, H)


def sample_dropout_masks(cfg: "TrainConfig", T: int, B: int, X: int, H: int,
                         proj_in: int, rng: np.random.Generator) -> DropoutMasks | None:
    """Draw every enabled mask for a (T, B) minibatch; None when all keep
    probabilities are 1 (pure forward)."""

    def mul(shape, pk):
        return (rng.random(shape) < pk) / pk

    dm = DropoutMasks()
    any_mask = False
    if cfg.input_pk < 1.0:
        dm.input_t = mul((T, B, X), cfg.input_pk)
        any_mask = True
    if cfg.var_input_pk < 1.0:
        dm.var_input = mul((B, X), cfg.var_input_pk)
        any_mask = True
    if cfg.hidden_pk < 1.0:
        dm.hidden_t = mul((T, B, H), cfg.hidden_pk)
        any_mask = True
    if cfg.var_recurrent_pk < 1.0:
        dm.var_recurrent = mul((B, H), cfg.var_recurrent_pk)
        any_mask = True
    if cfg.var_output_pk < 1.0:
        dm.var_output = mul((B, H), cfg.var_output_pk)
        any_mask = True
    if cfg.projection_pk < 1.0:
        dm.projection = mul((B, proj_in), cfg.projection_pk)
        any_mask = True
    if cfg.zoneout_pk < 1.0:
        dm.zone_h = (rng.random((T, B, H)) >= cfg.zoneout_pk).astype(np.float64)
        dm.zone_c = (rng.random((T, B, H)) >= cfg.zoneout_pk).astype(np.float64)
        any_mask = True
    return dm if any_mask else None


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def backward(model: Model, cache: dict, dlogits: np.ndarray):
    """Exact gradients of the cached forward pass w.r.t. every parameter.

    Returns (GradientSet, dx) where dx (T, B, X) is the gradient w.r.t. the
    raw model inputs (used for attribution and embedding training).  Masked
    grouped-cell entries receive exactly zero.
    """
    dm = cache["dropout"]
    head = model.head
    lengths = cache["lengths"]
    Tmax, B, H = cache["h_rec"].shape
    grads: GradientSet = {}

    dlogits = np.asarray(dlogits, dtype=np.float64)
    if dlogits.ndim == 1:
        dlogits = dlogits[None, :]
    if head.hidden_w is not None:
        a1d = cache["hidden_dropped"]
        grads["head.out_w"] = dlogits.T @ a1d
        grads["head.out_b"] = dlogits.sum(axis=0)
        da1 = dlogits @ head.out_w
        if dm is not None and dm.projection is not None:
            da1 = da1 * dm.projection
        dz1 = da1 * (1.0 - cache["hidden_act"] ** 2)
        grads["head.hidden_w"] = dz1.T @ cache["r1"]
        grads["head.hidden_b"] = dz1.sum(axis=0)
        dr1 = dz1 @ head.hidden_w
    else:
        rd = cache["readout_dropped"]
        grads["head.out_w"] = dlogits.T @ rd
        grads["head.out_b"] = dlogits.sum(axis=0)
        dr1 = dlogits @ head.out_w
        if dm is not None and dm.projection is not None:
            dr1 = dr1 * dm.projection
    if dm is not None and dm.var_output is not None:
        dr1 = dr1 * dm.var_output
    # dr1 is the gradient w.r.t. each row's hidden state at its true last step.

    dW = {gate: np.zeros_like(model.cell.W[gate]) for gate in GATES}
    dU = {gate: np.zeros_like(model.cell.U[gate]) for gate in GATES}
    db = {gate: np.zeros_like(model.cell.b[gate]) for gate in GATES}
    dx = np.zeros_like(cache["x"])

    f, i_, o, g = cache["f"], cache["i"], cache["o"], cache["g"]
    c_all, tanh_c_raw = cache["c_all"], cache["tanh_c_raw"]
    WmT, UmT = cache["WmT"], cache["UmT"]

    dh = np.zeros((B, H))
    dc = np.zeros((B, H))
    last_step = lengths - 1
    for t in range(Tmax - 1, -1, -1):
        inject = last_step == t
        if inject.any():
            dh = dh.copy()
            dh[inject] += dr1[inject]
        if dm is not None and dm.zone_h is not None:
            zh, zc = dm.zone_h[t], dm.zone_c[t]
            dh_raw = (1.0 - zh) * dh
            dh_prev = zh * dh
            dc_in = (1.0 - zc) * dc
            dc_prev = zc * dc
        else:
            dh_raw = dh
            dh_prev = np.zeros((B, H))
            dc_in = dc
            dc_prev = np.zeros((B, H))
        do = dh_raw * tanh_c_raw[t]
        dc_raw = dc_in + dh_raw * o[t] * (1.0 - tanh_c_raw[t] ** 2)
        df = dc_raw * c_all[t]
        di = dc_raw * g[t]
        dg = dc_raw * i_[t]
        dc_prev = dc_prev + dc_raw * f[t]
        da = {
            "f": df * f[t] * (1.0 - f[t]),
            "i": di * i_[t] * (1.0 - i_[t]),
            "o": do * o[t] * (1.0 - o[t]),
            "c": dg * (1.0 - g[t] ** 2),
        }
        x_in_t, h_rec_t = cache["x_in"][t], cache["h_rec"][t]
        dh_rec = np.zeros((B, H))
        dx_in = np.zeros((B, dx.shape[2]))
        for gate in GATES:
            dW[gate] += da[gate].T @ x_in_t
            dU[gate] += da[gate].T @ h_rec_t
            db[gate] += da[gate].sum(axis=0)
            dh_rec += da[gate] @ UmT[gate].T
            dx_in += da[gate] @ WmT[gate].T
        if dm is not None and dm.hidden_t is not None:
            dh_rec = dh_rec * dm.hidden_t[t]
        if dm is not None and dm.var_recurrent is not None:
            dh_rec = dh_rec * dm.var_recurrent
        if dm is not None and dm.input_t is not None:
            dx_in = dx_in * dm.input_t[t]
        if dm is not None and dm.var_input is not None:
            dx_in = dx_in * dm.var_input
        dx[t] = dx_in
        dh = dh_prev + dh_rec
        dc = dc_prev

    M_w, M_u = model.masks()
    for gate in GATES:
        if M_w is not None:
            dW[gate] *= M_w
            dU[gate] *= M_u
        grads[f"cell.W.{gate}"] = dW[gate]
        grads[f"cell.U.{gate}"] = dU[gate]
        grads[f"cell.b.{gate}"] = db[gate]

    if model.embedding is not None:
        table = model.embedding
        dtab = np.zeros_like(table.tables)
        D = table.dim
        for t in range(Tmax):
            for j in range(table.p):
                seg = dx[t, :, :D] if table.mode == "sum" else dx[t, :, j * D : (j + 1) * D]
                np.add.at(dtab[j], cache["buckets"][t, :, j], seg)
        dtab[:, table.sentinel, :] = 0.0  # sentinel row stays frozen
        grads["embedding"] = dtab

    return grads, dx


# ---------------------------------------------------------------------------
# Gradient utilities and optimizers
# ---------------------------------------------------------------------------

def clip_by_global_norm(grads: GradientSet, clip_norm: float) -> GradientSet:
    """Scale all tensors by clip_norm/||g||_2 when the global norm exceeds it."""
    if clip_norm <= 0:
        raise ConfigError(f"clip norm must be positive, got {clip_norm}")
    total = 0.0
    for arr in grads.values():
        total += float(np.sum(arr * arr))
    norm = np.sqrt(total)
    if norm <= clip_norm or norm == 0.0:
        return grads
    scale = clip_norm / norm
    return {k: v * scale for k, v in grads.items()}


def global_norm(grads: GradientSet) -> float:
    return float(np.sqrt(sum(np.sum(a * a) for a in grads.values())))


class AdagradState:
    def __init__(self, params: dict):
        self.accum = {k: np.zeros_like(v) for k, v in params.items()}


def adagrad_step(params: dict, grads: GradientSet, state: AdagradState,
                 lr: float, eps: float = 1e-8) -> None:
    """In-place AdaGrad update: accumulate squared gradients, scale steps."""
    for k, p in params.items():
        gk = grads[k]
        state.accum[k] += gk * gk
        p -= lr * gk / (np.sqrt(state.accum[k]) + eps)


class AdamState:
    def __init__(self, params: dict):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0


def adam_step(params: dict, grads: GradientSet, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place Adam update with bias-corrected moments."""
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for k, p in params.items():
        gk = grads[k]
        state.m[k] = beta1 * state.m[k] + (1.0 - beta1) * gk
        state.v[k] = beta2 * state.v[k] + (1.0 - beta2) * gk * gk
        p -= lr * (state.m[k] / bc1) / (np.sqrt(state.v[k] / bc2) + eps)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    clip_norm: float = 10.0
    optimizer: str = "adagrad"  # 'adagrad' | 'adam'
    input_pk: float = 1.0
    hidden_pk: float = 1.0
    projection_pk: float = 1.0
    var_input_pk: float = 1.0
    var_output_pk: float = 1.0
    var_recurrent_pk: float = 1.0
    zoneout_pk: float = 1.0
    epochs: int = 10
    batch_size: int = 128
    seed: int = 0

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.clip_norm <= 0:
            raise ConfigError(f"clip_norm must be > 0, got {self.clip_norm}")
        if self.optimizer not in ("adagrad", "adam"):
            raise ConfigError(f"optimizer must be adagrad or adam, got {self.optimizer!r}")
        for name in ("input_pk", "hidden_pk", "projection_pk", "var_input_pk",
                     "var_output_pk", "var_recurrent_pk", "zoneout_pk"):
            val = getattr(self, name)
            if not 0.0 < val <= 1.0:
                raise ConfigError(f"{name} must be in (0, 1], got {val}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")


def _proj_in_size(model: Model) -> int:
    return model.head.hidden_size if model.head.hidden_w is not None else model.hidden_size


def predict_scores(model: Model, sequences, batch_size: int = 256) -> np.ndarray:
    """Evaluation-mode probabilities, (n,) binary or (n, K) otherwise."""
    outs = []
    for start in range(0, len(sequences), batch_size):
        chunk = sequences[start : start + batch_size]
        logits, _ = forward_batch(model, make_batch(model, chunk))
        proba = predict_proba(logits, model.head.activation)
        outs.append(proba)
    scores = np.concatenate(outs, axis=0)
    if model.head.activation == "sigmoid" and scores.shape[1] == 1:
        return scores[:, 0]
    return scores


def evaluate_ranking(model: Model, sequences, batch_size: int = 256):
    """(AU-ROC, AU-PRC) on a labelled split; multi-output heads are
    macro-averaged over the classes with both labels present."""
    scores = predict_scores(model, sequences, batch_size)
    labels = np.asarray([seq.label for seq in sequences], dtype=np.float64)
    if scores.ndim == 1:
        return au_roc(scores, labels), au_prc(scores, labels)
    rocs, prcs = [], []
    K = scores.shape[1]
    if labels.ndim == 1:  # single true class index per sequence
        onehot = np.zeros_like(scores)
        onehot[np.arange(len(labels)), labels.astype(int)] = 1.0
        labels = onehot
    for k in range(K):
        yk = labels[:, k]
        if yk.min() == yk.max():
            continue
        rocs.append(au_roc(scores[:, k], yk))
        prcs.append(au_prc(scores[:, k], yk))
    if not rocs:
        raise DataError("no class has both labels present")
    return float(np.mean(rocs)), float(np.mean(prcs))


def train_batch(model: Model, batch: Batch, cfg: TrainConfig, rng, opt_state):
    """One optimizer step on a padded batch; returns mean loss."""
    dm = sample_dropout_masks(cfg, batch.max_T, batch.size, model.input_size,
                              model.hidden_size, _proj_in_size(model), rng)
    logits, cache = forward_batch(model, batch, dropout=dm)
    value, dlogits = batch_loss_and_grad(logits, batch.labels, model.head.activation)
    if not np.isfinite(value):
        raise TrainingDivergedError(f"non-finite training loss {value}")
    grads, _ = backward(model, cache, dlogits)
    grads = clip_by_global_norm(grads, cfg.clip_norm)
    params = parameter_dict(model)
    if cfg.optimizer == "adagrad":
        adagrad_step(params, grads, opt_state, cfg.learning_rate)
    else:
        adam_step(params, grads, opt_state, cfg.learning_rate)
    if model.embedding is not None:
        model.embedding.tables[:, model.embedding.sentinel, :] = 0.0
    model.trained = True
    return value


def train(model: Model, train_set, valid_set, cfg: TrainConfig, on_improvement=None, log=None):
    """Seeded epoch loop with validation-based model selection.

    Shuffles sequences each epoch, evaluates validation AU-ROC after every
    epoch and retains the parameters with the best value.  Deterministic given
    the config seed; zero epochs returns the initial model unchanged.
    Non-finite loss aborts with TrainingDivergedError.
    """
    cfg.validate()
    if not train_set or not valid_set:
        raise DataError("training and validation splits must be non-empty")
    params = parameter_dict(model)
    opt_state = AdagradState(params) if cfg.optimizer == "adagrad" else AdamState(params)
    shuffle_rng = make_rng(cfg.seed, "shuffle")
    dropout_rng = make_rng(cfg.seed, "dropout")
    best = model.copy()
    best_score = -np.inf
    history = []
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        perm = shuffle_rng.permutation(len(train_set))
        losses = []
        for start in range(0, len(perm), cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            batch = make_batch(model, [train_set[i] for i in idx])
            losses.append(train_batch(model, batch, cfg, dropout_rng, opt_state))
        roc, prc = evaluate_ranking(model, valid_set)
        entry = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "valid_auroc": roc,
            "valid_auprc": prc,
            "wall_time_s": time.perf_counter() - t0,
        }
        history.append(entry)
        if log is not None:
            log(entry)
        if roc > best_score:
            best_score = roc
            best = model.copy()
            best.trained = True
            if on_improvement is not None:
                on_improvement(best, epoch, entry)
    return best, history
