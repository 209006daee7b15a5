"""Multi-task click/follow/like model trained incrementally on a labelled stream.

Pure numpy with hand-written backprop. Two architectures share the embedding
layer and the per-task towers:

* ``shared-bottom``: one ReLU MLP (64, 32) feeds all towers;
* ``mmoe``: three ReLU experts (64, 32) mixed by a softmax gate per task.

Towers are ReLU (32, 32, 16) followed by a sigmoid unit.
"""

from __future__ import annotations

import csv
import io
import json
import zipfile
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .events import LIVE_SIDE, SIDE_COLUMNS, TASK_NAMES, USER_SIDE, SessionTable

EPS = 1e-7
CHECKPOINT_FORMAT = "sliver-checkpoint/1"
ARCHITECTURES = ("shared-bottom", "mmoe")


class EncodingError(KeyError):
    pass


def _default_vocab():
    return {"live_type": 16, "gender": 4, "age_bucket": 16, "city": 256, "anchor_gender": 4, "anchor_type": 16}


@dataclass
class FeatureEncoding:
    """Embedding layout: ``[live | user | anchor]`` blocks, fixed for a run.

    ID features are hashed into ``hash_size`` buckets; side features use their
    declared vocabulary. Index 0 of every table is the out-of-vocabulary row.
    The click-anchor history is mean-pooled over the anchor-ID table.
    """

    hash_size: int = 2**16
    side_vocab: dict = field(default_factory=_default_vocab)
    include_user_id: bool = False
    id_dim: int = 32
    side_dim: int = 8

    def __post_init__(self):
        unknown = set(self.side_vocab) - set(SIDE_COLUMNS)
        if unknown:
            raise EncodingError(f"unknown feature field(s): {', '.join(sorted(unknown))}")
        missing = set(SIDE_COLUMNS) - set(self.side_vocab)
        if missing:
            raise EncodingError(f"no vocabulary for field(s): {', '.join(sorted(missing))}")

    @property
    def layout(self) -> list[tuple[str, str]]:
        """``(field, kind)`` in vector order; kind is ``id``, ``side`` or ``history``."""
        user = ([("user_id", "id")] if self.include_user_id else [])
        user += [(c, "side") for c in USER_SIDE] + [("history", "history")]
        return ([("live_id", "id"), ("live_type", "side")] + user
                + [("anchor_id", "id"), ("anchor_gender", "side"), ("anchor_type", "side")])

    @property
    def width(self) -> int:
        return sum(self.side_dim if k == "side" else self.id_dim for _, k in self.layout)

    def tables(self) -> dict[str, tuple[int, int]]:
        ids = ["live_id", "anchor_id"] + (["user_id"] if self.include_user_id else [])
        shapes = {f"emb/{f}": (self.hash_size + 1, self.id_dim) for f in ids}
        shapes.update({f"emb/{c}": (self.side_vocab[c] + 1, self.side_dim) for c in SIDE_COLUMNS})
        return shapes

    def hash_ids(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        return np.where(ids >= 0, ids % self.hash_size + 1, 0)

    def side_index(self, name: str, values) -> np.ndarray:
        v = np.asarray(values, dtype=np.int64)
        return np.where((v >= 0) & (v < self.side_vocab[name]), v + 1, 0)

    def indices(self, table: SessionTable, rows) -> dict[str, np.ndarray]:
        rows = np.asarray(rows, dtype=np.int64)
        out = {"live_id": self.hash_ids(table.live_id[rows]), "anchor_id": self.hash_ids(table.anchor_id[rows])}
        if self.include_user_id:
            out["user_id"] = self.hash_ids(table.user_id[rows])
        for c in SIDE_COLUMNS:
            out[c] = self.side_index(c, table.side[c][rows])
        hist = table.history[rows]
        out["history"] = np.where(hist >= 0, self.hash_ids(hist), -1)
        return out

    def to_dict(self) -> dict:
        return asdict(self)


def xavier_uniform(rng, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _mlp_forward(params, prefix, n_layers, x, last_linear=False):
    acts = [x]
    h = x
    for i in range(n_layers):
        z = h @ params[f"{prefix}/{i}/W"] + params[f"{prefix}/{i}/b"]
        h = z if (last_linear and i == n_layers - 1) else np.maximum(z, 0.0)
        acts.append(h)
    return h, acts


def _mlp_backward(params, grads, prefix, n_layers, acts, dh, last_linear=False):
    for i in reversed(range(n_layers)):
        if not (last_linear and i == n_layers - 1):
            dh = dh * (acts[i + 1] > 0)
        grads[f"{prefix}/{i}/W"] += acts[i].T @ dh
        grads[f"{prefix}/{i}/b"] += dh.sum(axis=0)
        dh = dh @ params[f"{prefix}/{i}/W"].T
    return dh


class MultiTaskModel:
    def __init__(self, arch: str = "shared-bottom", encoding: FeatureEncoding | None = None, seed: int = 0,
                 bottom=(64, 32), n_experts: int = 3, tower=(32, 32, 16)):
        if arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {arch!r}")
        self.arch = arch
        self.encoding = encoding or FeatureEncoding()
        self.bottom = tuple(bottom)
        self.n_experts = int(n_experts)
        self.tower = tuple(tower)
        self.seed = seed
        self.params = {k: np.zeros(s) for k, s in self.shapes().items()}
        self.init(seed)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = dict(self.encoding.tables())

        def mlp(prefix, dims):
            for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
                shapes[f"{prefix}/{i}/W"] = (a, b)
                shapes[f"{prefix}/{i}/b"] = (b,)

        d = self.encoding.width
        if self.arch == "shared-bottom":
            mlp("bottom", (d, *self.bottom))
        else:
            for j in range(self.n_experts):
                mlp(f"expert/{j}", (d, *self.bottom))
            for t in TASK_NAMES:
                shapes[f"gate/{t}/W"] = (d, self.n_experts)
                shapes[f"gate/{t}/b"] = (self.n_experts,)
        for t in TASK_NAMES:
            mlp(f"tower/{t}", (self.bottom[-1], *self.tower, 1))
        return shapes

    def init(self, seed: int) -> None:
        rng = np.random.default_rng(seed)
        for name in sorted(self.params):
            p = self.params[name]
            p[...] = xavier_uniform(rng, *p.shape) if p.ndim == 2 else 0.0

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "MultiTaskModel":
        other = object.__new__(MultiTaskModel)
        other.__dict__.update(self.__dict__)
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other

    # -- forward / backward ------------------------------------------------

    def embed(self, idx: dict[str, np.ndarray]) -> np.ndarray:
        enc, p = self.encoding, self.params
        blocks = []
        for f, kind in enc.layout:
            if kind == "history":
                h = idx["history"]
                mask = h >= 0
                cnt = mask.sum(axis=1, keepdims=True)
                rows = p["emb/anchor_id"][np.where(mask, h, 0)] * mask[..., None]
                blocks.append(rows.sum(axis=1) / np.maximum(cnt, 1))
            else:
                blocks.append(p[f"emb/{f}"][idx[f]])
        return np.concatenate(blocks, axis=1)

    def _embed_backward(self, idx, dx, grads):
        enc = self.encoding
        col = 0
        for f, kind in enc.layout:
            w = enc.side_dim if kind == "side" else enc.id_dim
            g = dx[:, col:col + w]
            col += w
            if kind == "history":
                h = idx["history"]
                mask = h >= 0
                cnt = np.maximum(mask.sum(axis=1, keepdims=True), 1)
                share = np.broadcast_to((g / cnt)[:, None, :], (*h.shape, w))
                kernels.scatter_add_rows(grads["emb/anchor_id"], h[mask], share[mask])
            else:
                kernels.scatter_add_rows(grads[f"emb/{f}"], idx[f], g)

    def dense_forward(self, x: np.ndarray):
        p = self.params
        cache = {"x": x}
        if x.ndim != 2 or x.shape[1] != self.encoding.width:
            raise ValueError(f"input width {x.shape[-1]} does not match encoding width {self.encoding.width}")
        nb = len(self.bottom)
        if self.arch == "shared-bottom":
            h, cache["bottom"] = _mlp_forward(p, "bottom", nb, x)
            task_in = {t: h for t in TASK_NAMES}
        else:
            experts = []
            for j in range(self.n_experts):
                e, cache[f"expert/{j}"] = _mlp_forward(p, f"expert/{j}", nb, x)
                experts.append(e)
            E = np.stack(experts, axis=1)  # (B, n_experts, d)
            cache["E"] = E
            task_in = {}
            for t in TASK_NAMES:
                z = x @ p[f"gate/{t}/W"] + p[f"gate/{t}/b"]
                z = z - z.max(axis=1, keepdims=True)
                g = np.exp(z)
                g /= g.sum(axis=1, keepdims=True)
                cache[f"gate/{t}"] = g
                task_in[t] = np.einsum("be,bed->bd", g, E)
        logits = np.empty((x.shape[0], 3))
        nt = len(self.tower) + 1
        for b, t in enumerate(TASK_NAMES):
            out, cache[f"tower/{t}"] = _mlp_forward(p, f"tower/{t}", nt, task_in[t], last_linear=True)
            logits[:, b] = out[:, 0]
        return logits, cache

    def dense_backward(self, cache, dlogits: np.ndarray, grads: dict) -> np.ndarray:
        p = self.params
        nt = len(self.tower) + 1
        nb = len(self.bottom)
        d_in = {}
        for b, t in enumerate(TASK_NAMES):
            d_in[t] = _mlp_backward(p, grads, f"tower/{t}", nt, cache[f"tower/{t}"], dlogits[:, b:b + 1],
                                    last_linear=True)
        x = cache["x"]
        if self.arch == "shared-bottom":
            dh = sum(d_in.values())
            return _mlp_backward(p, grads, "bottom", nb, cache["bottom"], dh)
        E = cache["E"]
        dE = np.zeros_like(E)
        dx = np.zeros_like(x)
        for t in TASK_NAMES:
            g = cache[f"gate/{t}"]
            dE += g[:, :, None] * d_in[t][:, None, :]
            dg = np.einsum("bd,bed->be", d_in[t], E)
            dz = g * (dg - (g * dg).sum(axis=1, keepdims=True))
            grads[f"gate/{t}/W"] += x.T @ dz
            grads[f"gate/{t}/b"] += dz.sum(axis=0)
            dx += dz @ p[f"gate/{t}/W"].T
        for j in range(self.n_experts):
            dx += _mlp_backward(p, grads, f"expert/{j}", nb, cache[f"expert/{j}"], dE[:, j, :])
        return dx

    def predict_indices(self, idx) -> np.ndarray:
        logits, _ = self.dense_forward(self.embed(idx))
        return _sigmoid(logits)

    def predict(self, table: SessionTable, rows, chunk: int = 8192) -> np.ndarray:
        rows = np.asarray(rows, dtype=np.int64)
        out = np.empty((rows.size, 3))
        for s in range(0, rows.size, chunk):
            r = rows[s:s + chunk]
            out[s:s + chunk] = self.predict_indices(self.encoding.indices(table, r))
        return out


def forward(model: MultiTaskModel, x: np.ndarray) -> np.ndarray:
    """Per-task probabilities for already-embedded input rows ``x``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    logits, _ = model.dense_forward(x)
    return _sigmoid(logits)


def encode(sample, model: MultiTaskModel) -> np.ndarray:
    """Input vector ``[x_live, x_user, x_anchor]`` of one labelled sample (or bare session)."""
    table = SessionTable.from_sessions([getattr(sample, "session", sample)])
    return model.embed(model.encoding.indices(table, [0]))[0]


# ---------------------------------------------------------------------------
# loss and optimisation


@dataclass
class Batch:
    idx: dict
    labels: np.ndarray  # (B, 3) int8; -1 absent

    def __len__(self):
        return int(self.labels.shape[0])


def make_batch(stream, rows, encoding: FeatureEncoding) -> Batch:
    rows = np.asarray(rows, dtype=np.int64)
    return Batch(encoding.indices(stream.sessions, stream.session_idx[rows]), stream.labels[rows])


def _task_losses(p, labels, weights):
    pc = np.clip(p, EPS, 1.0 - EPS)
    per_task = np.zeros(3)
    dz = np.zeros_like(p)
    for b in range(3):
        m = labels[:, b] >= 0
        n_b = int(m.sum())
        if n_b == 0:
            continue
        y = (labels[m, b] == 1).astype(float)
        q = pc[m, b]
        per_task[b] = -np.mean(y * np.log(q) + (1.0 - y) * np.log(1.0 - q))
        unclipped = (p[m, b] > EPS) & (p[m, b] < 1.0 - EPS)
        dz[m, b] = weights[b] * (p[m, b] - y) * unclipped / n_b
    return float(np.dot(weights, per_task)), per_task, dz


def loss(model: MultiTaskModel, batch: Batch, weights=(1.0, 1.0, 1.0)):
    """``(L, [L_click, L_follow, L_like])``; absent labels drop out per task."""
    w = np.asarray(weights, dtype=float)
    p = model.predict_indices(batch.idx)
    total, per_task, _ = _task_losses(p, batch.labels, w)
    return total, per_task


def loss_and_grads(model: MultiTaskModel, batch: Batch, weights=(1.0, 1.0, 1.0)):
    w = np.asarray(weights, dtype=float)
    x = model.embed(batch.idx)
    logits, cache = model.dense_forward(x)
    total, per_task, dz = _task_losses(_sigmoid(logits), batch.labels, w)
    grads = {k: np.zeros_like(v) for k, v in model.params.items()}
    dx = model.dense_backward(cache, dz, grads)
    model._embed_backward(batch.idx, dx, grads)
    return total, per_task, grads


class Adam:
    def __init__(self, lr: float = 0.001, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for {k} at step {self.t + 1}")
        self.t += 1
        for k in sorted(params):
            if k not in self.m:
                self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])
            kernels.adam_update(params[k], grads[k], self.m[k], self.v[k], self.lr, self.beta1, self.beta2,
                                self.eps, self.t)


def train_step(model: MultiTaskModel, optimizer: Adam, batch: Batch, weights=(1.0, 1.0, 1.0)):
    total, per_task, grads = loss_and_grads(model, batch, weights)
    optimizer.step(model.params, grads)
    return total, per_task


TRACE_FIELDS = ("step", "frontier_ms", "n", "loss", "loss_click", "loss_follow", "loss_like")


class StreamingTrainer:
    """Consumes a μ-sorted sample stream front to back in consecutive batches.

    ``advance(until)`` trains on every not-yet-seen sample with ``emit_ts <
    until`` (a trailing partial batch included) and never looks further ahead.
    """

    def __init__(self, model: MultiTaskModel, stream, batch_size: int = 512, optimizer: Adam | None = None,
                 weights=(1.0, 1.0, 1.0)):
        if not stream.is_sorted():
            raise ValueError("sample stream is not sorted by emission time")
        if batch_size <= 0:
            raise ValueError("batch_size must be positive")
        self.model = model
        self.stream = stream
        self.batch_size = int(batch_size)
        self.optimizer = optimizer or Adam()
        self.weights = weights
        self.cursor = 0
        self.frontier = None  # largest emit_ts consumed so far
        self.trace: list[dict] = []

    def advance(self, until: int | None = None) -> int:
        end = len(self.stream) if until is None else int(np.searchsorted(self.stream.emit_ts, until, "left"))
        start = self.cursor
        while self.cursor < end:
            rows = np.arange(self.cursor, min(self.cursor + self.batch_size, end))
            batch = make_batch(self.stream, rows, self.model.encoding)
            total, per_task = train_step(self.model, self.optimizer, batch, self.weights)
            self.cursor = int(rows[-1]) + 1
            self.frontier = int(self.stream.emit_ts[rows[-1]])
            self.trace.append({"step": self.optimizer.t, "frontier_ms": self.frontier, "n": int(rows.size),
                               "loss": total, **{f"loss_{t}": float(v) for t, v in zip(TASK_NAMES, per_task)}})
        return self.cursor - start


def streaming_fit(model: MultiTaskModel, stream, batch_size: int = 512, optimizer: Adam | None = None,
                  weights=(1.0, 1.0, 1.0)):
    """Train on the whole stream in μ order; returns ``(model, trace)``."""
    trainer = StreamingTrainer(model, stream, batch_size, optimizer, weights)
    trainer.advance()
    return model, trainer.trace


def write_trace(trace: list[dict], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, TRACE_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in trace:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def fusion_score(preds, alpha=(1.0, 1.0, 1.0)):
    """Ranking score ``sum_b alpha_b * p_b`` (works row-wise on ``(n, 3)``)."""
    return np.asarray(preds, dtype=float) @ np.asarray(alpha, dtype=float)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: MultiTaskModel, path: str) -> None:
    """Zip of ``header.json`` plus one ``.npy`` per parameter; byte-stable."""
    header = {"format": CHECKPOINT_FORMAT, "arch": model.arch, "encoding": model.encoding.to_dict(),
              "bottom": list(model.bottom), "n_experts": model.n_experts, "tower": list(model.tower),
              "seed": model.seed, "shapes": {k: list(v.shape) for k, v in sorted(model.params.items())}}
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        def put(name, data):
            info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, data)

        put("header.json", json.dumps(header, sort_keys=True, indent=1))
        for k in sorted(model.params):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, model.params[k], allow_pickle=False)
            put(k.replace("/", ".") + ".npy", buf.getvalue())


def load_checkpoint(path: str) -> MultiTaskModel:
    with zipfile.ZipFile(path) as zf:
        header = json.loads(zf.read("header.json"))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: unsupported checkpoint format {header.get('format')!r}")
        model = MultiTaskModel(header["arch"], FeatureEncoding(**header["encoding"]), header["seed"],
                               header["bottom"], header["n_experts"], header["tower"])
        for k, shape in header["shapes"].items():
            arr = np.lib.format.read_array(io.BytesIO(zf.read(k.replace("/", ".") + ".npy")))
            if list(arr.shape) != shape or model.params[k].shape != arr.shape:
                raise ValueError(f"{path}: shape mismatch for {k}")
            model.params[k] = arr
    return model
