"""Feature-grouped LSTM cell, dense LSTM baseline, embedding input layer,
projection head, and parameter accounting.

The grouped cell is an ordinary LSTM whose input-to-hidden and
hidden-to-hidden weight matrices are elementwise-multiplied by fixed binary
masks admitting only connections within a feature group (row and column share
a residue mod p).  Each of the k*p hidden units therefore sees exactly one
feature group, and the whole cell is equivalent to running p independent
k-unit LSTMs while still executing as single large matrix products.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .containers import load_container, save_container
from .errors import DataError, DimensionError, EmptySequenceError
from .linalg import build_group_mask, sigmoid, tanh
from .preprocess import BucketSpec, GroupedSequence, StandardizationStats, assemble_feature_groups

GATES = ("f", "i", "o", "c")

MODEL_FORMAT = "fglstm-model"
MODEL_VERSION = 1


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MaskSpec:
    """Group geometry: p feature groups, c components per group, k hidden
    units per group.  Hidden size is k*p and input size c*p, so divisibility
    by p holds by construction."""

    p: int
    k: int
    c: int

    def __post_init__(self):
        if self.p < 1 or self.k < 1 or self.c < 1:
            raise ValueError(f"MaskSpec dimensions must be >= 1, got {self}")

    @property
    def H(self) -> int:
        return self.k * self.p

    @property
    def X(self) -> int:
        return self.c * self.p

    def input_mask(self) -> np.ndarray:
        return build_group_mask(self.p, self.H, self.X)

    def recurrent_mask(self) -> np.ndarray:
        return build_group_mask(self.p, self.H, self.H)

    def group_rows(self, g: int) -> np.ndarray:
        """Hidden indices belonging to group g, in increasing order."""
        return np.arange(g, self.H, self.p)

    def group_cols(self, g: int) -> np.ndarray:
        """Input indices belonging to group g, in increasing order."""
        return np.arange(g, self.X, self.p)


def effective_kernel_size(H: int, X: int, p: int | None = None):
    """Total entries of the eight gate matrices, dense and mask-permitted.

    Dense total is 4*(H*X + H*H); with p groups the masks admit exactly 1/p of
    the entries.  Returns (dense_total, masked_nonzero) with masked_nonzero
    None when p is not given.
    """
    if H < 1 or X < 1:
        raise DimensionError(f"sizes must be positive, got H={H}, X={X}")
    dense = 4 * (H * X + H * H)
    if p is None:
        return dense, None
    if H % p or X % p:
        raise DimensionError(f"H={H} and X={X} must be divisible by p={p}")
    return dense, dense // p


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

@dataclass
class CellParams:
    """Gate weights W (H,X), recurrent weights U (H,H), biases b (H,), keyed
    by gate name f/i/o/c.  For grouped cells the entries outside the mask
    support are kept at exactly zero."""

    W: dict
    U: dict
    b: dict

    @property
    def hidden_size(self) -> int:
        return self.W["f"].shape[0]

    @property
    def input_size(self) -> int:
        return self.W["f"].shape[1]

    def copy(self) -> "CellParams":
        return CellParams(
            W={g: self.W[g].copy() for g in GATES},
            U={g: self.U[g].copy() for g in GATES},
            b={g: self.b[g].copy() for g in GATES},
        )


@dataclass
class ProjectionHead:
    """Dense readout of the final hidden state: optional tanh intermediate
    layer, then a linear output layer.  The output nonlinearity (sigmoid,
    softmax, or independent per-class sigmoid) is applied by the loss and
    prediction helpers."""

    out_w: np.ndarray  # (n_out, m or H)
    out_b: np.ndarray  # (n_out,)
    hidden_w: np.ndarray | None = None  # (m, H)
    hidden_b: np.ndarray | None = None  # (m,)
    activation: str = "sigmoid"  # 'sigmoid' | 'softmax' | 'multi_sigmoid'

    @property
    def n_out(self) -> int:
        return self.out_w.shape[0]

    @property
    def hidden_size(self) -> int:
        return 0 if self.hidden_w is None else self.hidden_w.shape[0]

    def copy(self) -> "ProjectionHead":
        return ProjectionHead(
            out_w=self.out_w.copy(),
            out_b=self.out_b.copy(),
            hidden_w=None if self.hidden_w is None else self.hidden_w.copy(),
            hidden_b=None if self.hidden_b is None else self.hidden_b.copy(),
            activation=self.activation,
        )


@dataclass
class EmbeddingTable:
    """Per-feature bucket embeddings, trained jointly with the model.

    ``tables`` has shape (p, n_buckets + 1, dim); the last row of each feature
    is the missing-value sentinel and stays frozen at zero.  ``mode`` selects
    whether per-feature embeddings are summed into one dim-vector or
    concatenated; an observed-feature indicator block can be appended.
    """

    tables: np.ndarray
    mode: str = "sum"  # 'sum' | 'concat'
    with_indicator: bool = True

    @property
    def p(self) -> int:
        return self.tables.shape[0]

    @property
    def n_buckets(self) -> int:
        return self.tables.shape[1] - 1

    @property
    def dim(self) -> int:
        return self.tables.shape[2]

    @property
    def sentinel(self) -> int:
        return self.n_buckets

    @property
    def output_size(self) -> int:
        base = self.dim if self.mode == "sum" else self.dim * self.p
        return base + (self.p if self.with_indicator else 0)

    def copy(self) -> "EmbeddingTable":
        return EmbeddingTable(tables=self.tables.copy(), mode=self.mode, with_indicator=self.with_indicator)


def embed_input(table: EmbeddingTable, buckets: np.ndarray, v: np.ndarray | None = None) -> np.ndarray:
    """Dense input vector(s) for one timestep from bucket indices.

    ``buckets`` is (p,) or (B, p); sentinel indices contribute zero rows.  The
    indicator block is appended when the table was configured with one.
    """
    buckets = np.asarray(buckets)
    squeeze = buckets.ndim == 1
    idx = buckets[None, :] if squeeze else buckets
    if idx.shape[1] != table.p:
        raise DimensionError(f"expected {table.p} features, got {idx.shape[1]}")
    if (idx < 0).any() or (idx > table.sentinel).any():
        raise DataError(f"bucket index out of range [0, {table.sentinel}]")
    feats = np.arange(table.p)
    gathered = table.tables[feats[None, :], idx]  # (B, p, dim)
    if table.mode == "sum":
        out = gathered.sum(axis=1)
    else:
        out = gathered.reshape(idx.shape[0], table.p * table.dim)
    if table.with_indicator:
        if v is None:
            raise DataError("indicator block requested but no indicators given")
        vv = np.asarray(v, dtype=np.float64)
        vv = vv[None, :] if vv.ndim == 1 else vv
        out = np.concatenate([out, vv], axis=1)
    return out[0] if squeeze else out


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

def init_grouped_cell(rng: np.random.Generator, spec: MaskSpec) -> CellParams:
    """Masked entries uniform in +-1/sqrt(c*k) (the per-group fan scale),
    zeros outside the mask support; forget bias 1, other biases 0."""
    bound = 1.0 / np.sqrt(spec.c * spec.k)
    M_w, M_u = spec.input_mask(), spec.recurrent_mask()
    W, U, b = {}, {}, {}
    for gate in GATES:
        W[gate] = rng.uniform(-bound, bound, size=(spec.H, spec.X)) * M_w
        U[gate] = rng.uniform(-bound, bound, size=(spec.H, spec.H)) * M_u
        b[gate] = np.full(spec.H, 1.0) if gate == "f" else np.zeros(spec.H)
    return CellParams(W=W, U=U, b=b)


def init_dense_cell(rng: np.random.Generator, H: int, X: int) -> CellParams:
    """Glorot-uniform dense cell; forget bias 1, other biases 0."""
    W, U, b = {}, {}, {}
    lw = np.sqrt(6.0 / (H + X))
    lu = np.sqrt(6.0 / (2 * H))
    for gate in GATES:
        W[gate] = rng.uniform(-lw, lw, size=(H, X))
        U[gate] = rng.uniform(-lu, lu, size=(H, H))
        b[gate] = np.full(H, 1.0) if gate == "f" else np.zeros(H)
    return CellParams(W=W, U=U, b=b)


def init_head(rng: np.random.Generator, in_size: int, n_out: int, hidden: int = 0,
              activation: str = "sigmoid") -> ProjectionHead:
    if hidden > 0:
        lh = np.sqrt(6.0 / (in_size + hidden))
        lo = np.sqrt(6.0 / (hidden + n_out))
        return ProjectionHead(
            hidden_w=rng.uniform(-lh, lh, size=(hidden, in_size)),
            hidden_b=np.zeros(hidden),
            out_w=rng.uniform(-lo, lo, size=(n_out, hidden)),
            out_b=np.zeros(n_out),
            activation=activation,
        )
    lo = np.sqrt(6.0 / (in_size + n_out))
    return ProjectionHead(
        out_w=rng.uniform(-lo, lo, size=(n_out, in_size)),
        out_b=np.zeros(n_out),
        activation=activation,
    )


def init_embedding(rng: np.random.Generator, p: int, n_buckets: int, dim: int,
                   mode: str = "sum", with_indicator: bool = True) -> EmbeddingTable:
    bound = 1.0 / np.sqrt(dim)
    tables = rng.uniform(-bound, bound, size=(p, n_buckets + 1, dim))
    tables[:, n_buckets, :] = 0.0  # sentinel stays zero
    return EmbeddingTable(tables=tables, mode=mode, with_indicator=with_indicator)


# ---------------------------------------------------------------------------
# Single cell steps
# ---------------------------------------------------------------------------

def _gate_preacts(params: CellParams, x, h_prev, M_w=None, M_u=None):
    acts = {}
    for gate in GATES:
        W = params.W[gate] if M_w is None else params.W[gate] * M_w
        U = params.U[gate] if M_u is None else params.U[gate] * M_u
        acts[gate] = W @ x + U @ h_prev + params.b[gate]
    return acts


def lstm_step(params: CellParams, x_t, h_prev, c_prev):
    """One standard LSTM step on vectors; returns (h_t, c_t)."""
    x_t, h_prev, c_prev = (np.asarray(a, dtype=np.float64) for a in (x_t, h_prev, c_prev))
    H, X = params.hidden_size, params.input_size
    if x_t.shape != (X,) or h_prev.shape != (H,) or c_prev.shape != (H,):
        raise DimensionError(f"step shapes disagree with cell of size ({H}, {X})")
    a = _gate_preacts(params, x_t, h_prev)
    f, i, o = sigmoid(a["f"]), sigmoid(a["i"]), sigmoid(a["o"])
    g = tanh(a["c"])
    c_t = f * c_prev + i * g
    h_t = o * tanh(c_t)
    return h_t, c_t


def fg_lstm_step(params: CellParams, spec: MaskSpec, x_t, h_prev, c_prev):
    """One grouped-LSTM step: masked affine maps, otherwise standard gates."""
    x_t, h_prev, c_prev = (np.asarray(a, dtype=np.float64) for a in (x_t, h_prev, c_prev))
    if x_t.shape != (spec.X,) or h_prev.shape != (spec.H,) or c_prev.shape != (spec.H,):
        raise DimensionError(f"step shapes disagree with spec {spec}")
    if params.hidden_size != spec.H or params.input_size != spec.X:
        raise DimensionError("parameter shapes disagree with spec")
    a = _gate_preacts(params, x_t, h_prev, spec.input_mask(), spec.recurrent_mask())
    f, i, o = sigmoid(a["f"]), sigmoid(a["i"]), sigmoid(a["o"])
    g = tanh(a["c"])
    c_t = f * c_prev + i * g
    h_t = o * tanh(c_t)
    return h_t, c_t


# ---------------------------------------------------------------------------
# Group split / merge
# ---------------------------------------------------------------------------

def split_into_group_cells(params: CellParams, spec: MaskSpec) -> list[CellParams]:
    """The p independent small cells the masked cell is equivalent to.

    Group g collects the hidden rows and input columns with residue g mod p;
    running the small cells on de-interleaved inputs and re-interleaving their
    hidden states reproduces the masked step exactly.
    """
    if params.hidden_size != spec.H or params.input_size != spec.X:
        raise DimensionError("parameter shapes disagree with spec")
    cells = []
    for g in range(spec.p):
        rows, cols = spec.group_rows(g), spec.group_cols(g)
        cells.append(
            CellParams(
                W={gate: params.W[gate][np.ix_(rows, cols)].copy() for gate in GATES},
                U={gate: params.U[gate][np.ix_(rows, rows)].copy() for gate in GATES},
                b={gate: params.b[gate][rows].copy() for gate in GATES},
            )
        )
    return cells


def merge_group_cells(cells: list[CellParams], spec: MaskSpec) -> CellParams:
    """Inverse of split_into_group_cells; off-support entries become zero."""
    if len(cells) != spec.p:
        raise DimensionError(f"expected {spec.p} group cells, got {len(cells)}")
    W = {gate: np.zeros((spec.H, spec.X)) for gate in GATES}
    U = {gate: np.zeros((spec.H, spec.H)) for gate in GATES}
    b = {gate: np.zeros(spec.H) for gate in GATES}
    for g, cell in enumerate(cells):
        rows, cols = spec.group_rows(g), spec.group_cols(g)
        for gate in GATES:
            W[gate][np.ix_(rows, cols)] = cell.W[gate]
            U[gate][np.ix_(rows, rows)] = cell.U[gate]
            b[gate][rows] = cell.b[gate]
    return CellParams(W=W, U=U, b=b)


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

@dataclass
class Model:
    """A sequence classifier: input encoding, one recurrent layer, projection.

    kind 'fg-lstm' uses the grouped masked cell on (values, indicators[,
    deltas]) blocks; 'lstm' is the dense baseline on the same blocks;
    'percentile' replaces values with summed bucket embeddings.
    """

    kind: str  # 'fg-lstm' | 'lstm' | 'percentile'
    p: int
    cell: CellParams
    head: ProjectionHead
    spec: MaskSpec | None = None
    embedding: EmbeddingTable | None = None
    use_time_deltas: bool = False
    use_indicators: bool = True
    imputation: str = "interpolation"  # 'interpolation' | 'median' | 'none'
    stats: StandardizationStats | None = None
    buckets: BucketSpec | None = None
    trained: bool = False
    _mask_cache: tuple | None = field(default=None, repr=False, compare=False)

    @property
    def hidden_size(self) -> int:
        return self.cell.hidden_size

    @property
    def input_size(self) -> int:
        return self.cell.input_size

    def masks(self):
        """(input mask, recurrent mask) for grouped models, else (None, None)."""
        if self.spec is None:
            return None, None
        if self._mask_cache is None:
            object.__setattr__(self, "_mask_cache", (self.spec.input_mask(), self.spec.recurrent_mask()))
        return self._mask_cache

    def copy(self) -> "Model":
        return replace(
            self,
            cell=self.cell.copy(),
            head=self.head.copy(),
            embedding=None if self.embedding is None else self.embedding.copy(),
            _mask_cache=None,
        )

    def sequence_input(self, seq: GroupedSequence) -> np.ndarray:
        """(T, X) input matrix for group-input models."""
        if self.kind == "percentile":
            raise DataError("percentile models encode inputs inside the forward pass")
        return assemble_feature_groups(seq, self.use_time_deltas, self.use_indicators)


def parameter_dict(model: Model) -> dict:
    """Flat name -> array view of every trainable tensor."""
    out = {}
    for gate in GATES:
        out[f"cell.W.{gate}"] = model.cell.W[gate]
        out[f"cell.U.{gate}"] = model.cell.U[gate]
        out[f"cell.b.{gate}"] = model.cell.b[gate]
    if model.head.hidden_w is not None:
        out["head.hidden_w"] = model.head.hidden_w
        out["head.hidden_b"] = model.head.hidden_b
    out["head.out_w"] = model.head.out_w
    out["head.out_b"] = model.head.out_b
    if model.embedding is not None:
        out["embedding"] = model.embedding.tables
    return out


# ---------------------------------------------------------------------------
# Batched forward
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    """Padded minibatch; ``lengths`` holds each row's true number of steps and
    the readout always uses them, so padding never pollutes results."""

    lengths: np.ndarray  # (B,)
    labels: np.ndarray | None  # (B,) or (B, K)
    x: np.ndarray | None = None  # (T, B, X) group-input models
    buckets: np.ndarray | None = None  # (T, B, p) percentile models
    v: np.ndarray | None = None  # (T, B, p)

    @property
    def size(self) -> int:
        return len(self.lengths)

    @property
    def max_T(self) -> int:
        return self.x.shape[0] if self.x is not None else self.buckets.shape[0]


def make_batch(model: Model, sequences: list[GroupedSequence]) -> Batch:
    if not sequences:
        raise EmptySequenceError("cannot build an empty batch")
    B = len(sequences)
    lengths = np.array([seq.T for seq in sequences], dtype=np.int64)
    Tmax = int(lengths.max())
    labels = None
    if all(seq.label is not None for seq in sequences):
        labels = np.asarray([seq.label for seq in sequences], dtype=np.float64)
    if model.kind == "percentile":
        if any(seq.buckets is None for seq in sequences):
            raise DataError("percentile model needs bucketized sequences")
        sentinel = model.embedding.sentinel
        buckets = np.full((Tmax, B, model.p), sentinel, dtype=np.int64)
        v = np.zeros((Tmax, B, model.p))
        for b, seq in enumerate(sequences):
            buckets[: seq.T, b] = seq.buckets
            v[: seq.T, b] = seq.v
        return Batch(lengths=lengths, labels=labels, buckets=buckets, v=v)
    x = np.zeros((Tmax, B, model.input_size))
    for b, seq in enumerate(sequences):
        x[: seq.T, b] = model.sequence_input(seq)
    return Batch(lengths=lengths, labels=labels, x=x)


def _embed_timestep(table: EmbeddingTable, buckets_t: np.ndarray, v_t: np.ndarray) -> np.ndarray:
    feats = np.arange(table.p)
    gathered = table.tables[feats[None, :], buckets_t]  # (B, p, dim)
    if table.mode == "sum":
        out = gathered.sum(axis=1)
    else:
        out = gathered.reshape(buckets_t.shape[0], table.p * table.dim)
    if table.with_indicator:
        out = np.concatenate([out, v_t], axis=1)
    return out


def forward_batch(model: Model, batch: Batch, dropout=None):
    """Run the recurrence over a padded batch; returns (logits, cache).

    ``dropout`` is a DropoutMasks bundle sampled by the training loop (None in
    evaluation).  The cache retains every per-step activation needed for exact
    backpropagation through time.
    """
    B, Tmax = batch.size, batch.max_T
    H = model.hidden_size
    M_w, M_u = model.masks()
    WmT = {g: (model.cell.W[g] if M_w is None else model.cell.W[g] * M_w).T.copy() for g in GATES}
    UmT = {g: (model.cell.U[g] if M_u is None else model.cell.U[g] * M_u).T.copy() for g in GATES}

    if model.kind == "percentile":
        x = np.empty((Tmax, B, model.input_size))
        for t in range(Tmax):
            x[t] = _embed_timestep(model.embedding, batch.buckets[t], batch.v[t])
    else:
        x = batch.x
    if x.shape[2] != model.input_size:
        raise DimensionError(f"input width {x.shape[2]} does not match model input size {model.input_size}")

    dm = dropout
    x_in = np.empty_like(x)
    h_rec = np.empty((Tmax, B, H))
    f = np.empty((Tmax, B, H))
    i_ = np.empty((Tmax, B, H))
    o = np.empty((Tmax, B, H))
    g = np.empty((Tmax, B, H))
    c_raw = np.empty((Tmax, B, H))
    tanh_c_raw = np.empty((Tmax, B, H))
    h_all = np.zeros((Tmax + 1, B, H))
    c_all = np.zeros((Tmax + 1, B, H))

    for t in range(Tmax):
        xt = x[t]
        if dm is not None and dm.input_t is not None:
            xt = xt * dm.input_t[t]
        if dm is not None and dm.var_input is not None:
            xt = xt * dm.var_input
        x_in[t] = xt
        hr = h_all[t]
        if dm is not None and dm.hidden_t is not None:
            hr = hr * dm.hidden_t[t]
        if dm is not None and dm.var_recurrent is not None:
            hr = hr * dm.var_recurrent
        h_rec[t] = hr
        a_f = xt @ WmT["f"] + hr @ UmT["f"] + model.cell.b["f"]
        a_i = xt @ WmT["i"] + hr @ UmT["i"] + model.cell.b["i"]
        a_o = xt @ WmT["o"] + hr @ UmT["o"] + model.cell.b["o"]
        a_g = xt @ WmT["c"] + hr @ UmT["c"] + model.cell.b["c"]
        f[t] = sigmoid(a_f)
        i_[t] = sigmoid(a_i)
        o[t] = sigmoid(a_o)
        g[t] = tanh(a_g)
        c_raw[t] = f[t] * c_all[t] + i_[t] * g[t]
        tanh_c_raw[t] = tanh(c_raw[t])
        h_raw = o[t] * tanh_c_raw[t]
        if dm is not None and dm.zone_h is not None:
            h_all[t + 1] = dm.zone_h[t] * h_all[t] + (1.0 - dm.zone_h[t]) * h_raw
            c_all[t + 1] = dm.zone_c[t] * c_all[t] + (1.0 - dm.zone_c[t]) * c_raw[t]
        else:
            h_all[t + 1] = h_raw
            c_all[t + 1] = c_raw[t]

    rows = np.arange(B)
    readout = h_all[batch.lengths, rows]  # (B, H), each row at its true T
    r1 = readout
    if dm is not None and dm.var_output is not None:
        r1 = r1 * dm.var_output

    head = model.head
    cache = {
        "x": x, "x_in": x_in, "h_rec": h_rec, "f": f, "i": i_, "o": o, "g": g,
        "c_raw": c_raw, "tanh_c_raw": tanh_c_raw, "h_all": h_all, "c_all": c_all,
        "WmT": WmT, "UmT": UmT, "lengths": batch.lengths, "dropout": dm,
        "readout": readout, "r1": r1, "buckets": batch.buckets,
    }
    if head.hidden_w is not None:
        z1 = r1 @ head.hidden_w.T + head.hidden_b
        a1 = tanh(z1)
        a1d = a1
        if dm is not None and dm.projection is not None:
            a1d = a1d * dm.projection
        logits = a1d @ head.out_w.T + head.out_b
        cache.update({"hidden_act": a1, "hidden_dropped": a1d})
    else:
        rd = r1
        if dm is not None and dm.projection is not None:
            rd = rd * dm.projection
        logits = rd @ head.out_w.T + head.out_b
        cache.update({"readout_dropped": rd})
    cache["logits"] = logits
    return logits, cache


def forward_sequence(model: Model, seq: GroupedSequence, dropout=None):
    """Single-sequence forward: zero initial state, recurrence over all steps,
    projection of the final hidden state only.  Returns (logits (n_out,),
    cache suitable for exact backpropagation)."""
    if seq.T < 1:
        raise EmptySequenceError(f"{seq.entity_id}: empty sequence")
    batch = make_batch(model, [seq])
    logits, cache = forward_batch(model, batch, dropout=dropout)
    return logits[0], cache


def predict_proba(logits: np.ndarray, activation: str) -> np.ndarray:
    """Map logits to probabilities per the head's output activation."""
    z = np.asarray(logits, dtype=np.float64)
    if activation == "sigmoid":
        return sigmoid(z)
    if activation == "multi_sigmoid":
        return sigmoid(z)
    if activation == "softmax":
        zz = z - z.max(axis=-1, keepdims=True)
        e = np.exp(zz)
        return e / e.sum(axis=-1, keepdims=True)
    raise ValueError(f"unknown activation {activation!r}")


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def save_model(path, model: Model, extra_meta: dict | None = None) -> None:
    meta = {
        "kind": model.kind,
        "p": model.p,
        "spec": None if model.spec is None else {"p": model.spec.p, "k": model.spec.k, "c": model.spec.c},
        "input_size": model.input_size,
        "hidden_size": model.hidden_size,
        "head": {
            "n_out": model.head.n_out,
            "hidden": model.head.hidden_size,
            "activation": model.head.activation,
        },
        "embedding": None if model.embedding is None else {
            "n_buckets": model.embedding.n_buckets,
            "dim": model.embedding.dim,
            "mode": model.embedding.mode,
            "with_indicator": model.embedding.with_indicator,
        },
        "use_time_deltas": model.use_time_deltas,
        "use_indicators": model.use_indicators,
        "imputation": model.imputation,
        "trained": model.trained,
        "clip_limit": None if model.stats is None else model.stats.clip_limit,
        "n_buckets": None if model.buckets is None else model.buckets.n_buckets,
    }
    if extra_meta:
        meta.update(extra_meta)
    arrays = {}
    for gate in GATES:
        arrays[f"cell.W.{gate}"] = model.cell.W[gate]
        arrays[f"cell.U.{gate}"] = model.cell.U[gate]
        arrays[f"cell.b.{gate}"] = model.cell.b[gate]
    arrays["head.out_w"] = model.head.out_w
    arrays["head.out_b"] = model.head.out_b
    if model.head.hidden_w is not None:
        arrays["head.hidden_w"] = model.head.hidden_w
        arrays["head.hidden_b"] = model.head.hidden_b
    if model.embedding is not None:
        arrays["embedding"] = model.embedding.tables
    if model.stats is not None:
        arrays["stats.median"] = model.stats.median
        arrays["stats.std"] = model.stats.std
    if model.buckets is not None:
        arrays["bucket_boundaries"] = model.buckets.boundaries
    save_container(path, MODEL_FORMAT, MODEL_VERSION, meta, arrays)


def load_model(path) -> Model:
    meta, arrays = load_container(path, MODEL_FORMAT, MODEL_VERSION)
    cell = CellParams(
        W={g: arrays[f"cell.W.{g}"] for g in GATES},
        U={g: arrays[f"cell.U.{g}"] for g in GATES},
        b={g: arrays[f"cell.b.{g}"] for g in GATES},
    )
    head = ProjectionHead(
        out_w=arrays["head.out_w"],
        out_b=arrays["head.out_b"],
        hidden_w=arrays.get("head.hidden_w"),
        hidden_b=arrays.get("head.hidden_b"),
        activation=meta["head"]["activation"],
    )
    spec = None
    if meta["spec"] is not None:
        spec = MaskSpec(p=meta["spec"]["p"], k=meta["spec"]["k"], c=meta["spec"]["c"])
    embedding = None
    if meta["embedding"] is not None:
        embedding = EmbeddingTable(
            tables=arrays["embedding"],
            mode=meta["embedding"]["mode"],
            with_indicator=meta["embedding"]["with_indicator"],
        )
    stats = None
    if "stats.median" in arrays:
        stats = StandardizationStats(
            median=arrays["stats.median"], std=arrays["stats.std"],
            clip_limit=float(meta["clip_limit"]),
        )
    buckets = None
    if "bucket_boundaries" in arrays:
        buckets = BucketSpec(boundaries=arrays["bucket_boundaries"], n_buckets=int(meta["n_buckets"]))
    return Model(
        kind=meta["kind"],
        p=meta["p"],
        cell=cell,
        head=head,
        spec=spec,
        embedding=embedding,
        use_time_deltas=meta["use_time_deltas"],
        use_indicators=meta["use_indicators"],
        imputation=meta["imputation"],
        stats=stats,
        buckets=buckets,
        trained=meta["trained"],
    )
