"""Small diffusion transformer with hookable self-attention.

Images are 8x8 grayscale, split into 2x2 patches (16 image tokens). The
class label (or the null class) enters through an embedding added to the
time embedding; in joint mode a few learned pseudo-text tokens per class
are appended to the sequence and attended jointly with the image tokens.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import tensor_kernel as tk
from .diffusion import FLOW, VP, NoiseSchedule, forward_corrupt

log = logging.getLogger(__name__)

IMG = 8
PATCH = 2
GRID = IMG // PATCH
N_IMG_TOKENS = GRID * GRID
ROW_TOL = 1e-9


class HookContractError(RuntimeError):
    """A hook returned something that cannot stand in for attention."""


class TrainingError(FloatingPointError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    mode: str = "eps"  # "eps" (vp schedule) or "velocity" (flow schedule)
    d_model: int = 32
    n_layers: int = 4
    n_heads: int = 2
    n_classes: int = 2
    joint: bool = False
    n_txt: int = 4
    t_features: int = 16
    mlp_ratio: int = 2
    T: int = 50  # schedule steps the model is trained on

    def __post_init__(self):
        if self.mode not in ("eps", "velocity"):
            raise ValueError(f"mode must be 'eps' or 'velocity', got {self.mode!r}")
        if self.n_layers < 4:
            raise ValueError("toy denoiser needs at least 4 layers")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")

    @property
    def null_class(self) -> int:
        return self.n_classes

    @property
    def n_tokens(self) -> int:
        return N_IMG_TOKENS + (self.n_txt if self.joint else 0)

    def schedule(self, steps: int | None = None) -> NoiseSchedule:
        return NoiseSchedule(VP if self.mode == "eps" else FLOW, steps or self.T)


@dataclass
class ToyModelParams:
    config: ModelConfig
    weights: dict[str, np.ndarray]
    seed: int = 0

    def copy(self) -> "ToyModelParams":
        return ToyModelParams(self.config, {k: v.copy() for k, v in self.weights.items()}, self.seed)

    def save(self, directory: str | Path, extra: dict | None = None) -> Path:
        """JSON manifest plus one CSV blob per weight."""
        d = Path(directory)
        (d / "weights").mkdir(parents=True, exist_ok=True)
        shapes = {}
        for name in sorted(self.weights):
            tk.save_csv(self.weights[name], d / "weights" / f"{name}.csv")
            shapes[name] = list(self.weights[name].shape)
        manifest = {"config": asdict(self.config), "seed": self.seed, "shapes": shapes}
        if extra:
            manifest.update(extra)
        (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return d

    @classmethod
    def load(cls, directory: str | Path) -> "ToyModelParams":
        d = Path(directory)
        manifest = json.loads((d / "manifest.json").read_text())
        config = ModelConfig(**manifest["config"])
        weights = {}
        for name, shape in manifest["shapes"].items():
            w = tk.load_csv(d / "weights" / f"{name}.csv")
            if list(w.shape) != shape:
                raise ValueError(f"checkpoint weight {name} has shape {w.shape}, manifest says {shape}")
            weights[name] = w
        return cls(config, weights, manifest.get("seed", 0))


def init_params(config: ModelConfig, seed: int = 0) -> ToyModelParams:
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0x1D])))
    d, f = config.d_model, config.mlp_ratio * config.d_model
    p_in = PATCH * PATCH

    def normal(*shape, std=None):
        std = std if std is not None else 1.0 / math.sqrt(shape[0])
        return rng.normal(0.0, std, size=shape)

    w: dict[str, np.ndarray] = {
        "patch_w": normal(p_in, d),
        "patch_b": np.zeros(d),
        "pos": normal(N_IMG_TOKENS, d, std=0.1),
        "time_w1": normal(config.t_features, d),
        "time_b1": np.zeros(d),
        "time_w2": normal(d, d),
        "class_emb": normal(config.n_classes + 1, d, std=0.5),
        "out_w": normal(d, p_in, std=0.02),
        "out_b": np.zeros(p_in),
    }
    if config.joint:
        w["txt_emb"] = normal(config.n_classes + 1, config.n_txt * d, std=0.5)
    for layer in range(config.n_layers):
        w[f"l{layer}.cond"] = normal(d, d, std=0.1 / math.sqrt(d))
        for name in ("wq", "wk", "wv"):
            w[f"l{layer}.{name}"] = normal(d, d)
        w[f"l{layer}.wo"] = normal(d, d, std=0.5 / math.sqrt(d))
        w[f"l{layer}.fc1"] = normal(d, f)
        w[f"l{layer}.fc1_b"] = np.zeros(f)
        w[f"l{layer}.fc2"] = normal(f, d, std=0.5 / math.sqrt(f))
        w[f"l{layer}.fc2_b"] = np.zeros(d)
    return ToyModelParams(config, w, seed)


# ---------------------------------------------------------------- hook bus

AttentionHook = Callable[[int, np.ndarray], "np.ndarray | None"]


class AttentionHookBus:
    """Per-layer interceptors for post-softmax attention and for queries.

    An attention hook receives ``(layer, A)`` with ``A`` shaped
    ``(batch, heads, queries, keys)`` and returns a replacement of the same
    shape, or ``None`` to leave ``A`` untouched. Query hooks work the same
    way on ``(batch, heads, tokens, head_dim)`` query tensors.
    """

    def __init__(self):
        self._attn: dict[int, list[AttentionHook]] = {}
        self._query: dict[int, list[AttentionHook]] = {}

    def register(self, layer: int, hook: AttentionHook) -> "AttentionHookBus":
        self._attn.setdefault(layer, []).append(hook)
        return self

    def register_query(self, layer: int, hook: AttentionHook) -> "AttentionHookBus":
        self._query.setdefault(layer, []).append(hook)
        return self

    def __bool__(self) -> bool:
        return bool(self._attn or self._query)

    def queries(self, layer: int, q: np.ndarray) -> np.ndarray:
        for hook in self._query.get(layer, ()):
            new = hook(layer, q)
            if new is None:
                continue
            if new.shape != q.shape:
                raise HookContractError(f"layer {layer}: query hook returned {new.shape}, expected {q.shape}")
            q = new
        return q

    def attention(self, layer: int, a: np.ndarray) -> np.ndarray:
        for hook in self._attn.get(layer, ()):
            new = hook(layer, a)
            if new is None or new is a:
                continue
            if new.shape != a.shape:
                raise HookContractError(f"layer {layer}: attention hook returned {new.shape}, expected {a.shape}")
            if np.any(new < 0) or np.max(np.abs(new.sum(axis=-1) - 1.0)) > ROW_TOL:
                raise HookContractError(f"layer {layer}: replacement attention rows are not stochastic")
            a = new
        return a


# ---------------------------------------------------------------- forward

def patchify(x: np.ndarray) -> np.ndarray:
    b = x.shape[0]
    return (x.reshape(b, GRID, PATCH, GRID, PATCH)
             .transpose(0, 1, 3, 2, 4)
             .reshape(b, N_IMG_TOKENS, PATCH * PATCH))


def unpatchify(tokens: np.ndarray) -> np.ndarray:
    b = tokens.shape[0]
    return (tokens.reshape(b, GRID, GRID, PATCH, PATCH)
                  .transpose(0, 1, 3, 2, 4)
                  .reshape(b, IMG, IMG))


def time_features(t: np.ndarray, n: int) -> np.ndarray:
    """Sinusoidal features of a time value in [0, 1]."""
    freqs = np.exp(np.linspace(0.0, math.log(100.0), n // 2))
    ang = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :] * math.pi
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _labels(c, batch: int, config: ModelConfig) -> np.ndarray:
    if c is None:
        return np.full(batch, config.null_class, dtype=np.int64)
    labels = np.broadcast_to(np.asarray(c, dtype=np.int64), (batch,)).copy()
    if np.any(labels < 0) or np.any(labels > config.null_class):
        raise ValueError(f"class labels must lie in [0, {config.null_class}]")
    return labels


def forward(
    params: ToyModelParams,
    x_t: np.ndarray,
    t,
    c=None,
    hooks: AttentionHookBus | None = None,
    *,
    skip_layers: Iterable[int] = (),
    cond_transform: Callable[[np.ndarray], np.ndarray] | None = None,
    _tensors: dict[str, tk.Tensor] | None = None,
) -> np.ndarray | tk.Tensor:
    """Predict eps (or velocity) for ``x_t`` of shape ``(B, 8, 8)``.

    ``t`` is the model time in [0, 1] (scalar or per sample), ``c`` the
    class labels (``None`` or ``config.null_class`` for unconditional).
    ``skip_layers`` drops whole blocks (residual passthrough).
    ``cond_transform`` maps the conditioning embeddings before use, which is
    how condition annealing is injected.
    """
    cfg = params.config
    x_t = np.asarray(x_t, dtype=np.float64)
    if x_t.ndim != 3 or x_t.shape[1:] != (IMG, IMG):
        raise ValueError(f"expected (B, {IMG}, {IMG}) input, got {x_t.shape}")
    B = x_t.shape[0]
    W = _tensors if _tensors is not None else {k: tk.Tensor(v) for k, v in params.weights.items()}
    t_vec = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
    labels = _labels(c, B, cfg)
    d, H = cfg.d_model, cfg.n_heads
    dh = d // H

    temb = tk.gelu(tk.add(tk.matmul(time_features(t_vec, cfg.t_features), W["time_w1"]), W["time_b1"]))
    temb = tk.matmul(temb, W["time_w2"])
    cemb = tk.take_rows(W["class_emb"], labels)
    if cond_transform is not None:
        cemb = tk.Tensor(cond_transform(cemb.data))
    cond = tk.add(temb, cemb)                                   # (B, d)
    cond3 = tk.reshape(cond, (B, 1, d))

    h = tk.add(tk.add(tk.matmul(patchify(x_t), W["patch_w"]), W["patch_b"]), W["pos"])
    h = tk.add(h, cond3)
    if cfg.joint:
        txt = tk.take_rows(W["txt_emb"], labels)
        if cond_transform is not None:
            txt = tk.Tensor(cond_transform(txt.data))
        h = tk.concat([h, tk.reshape(txt, (B, cfg.n_txt, d))], axis=1)
    N = h.shape[1]
    skip = set(skip_layers)

    for layer in range(cfg.n_layers):
        if layer in skip:
            continue
        p = f"l{layer}."
        h = tk.add(h, tk.reshape(tk.matmul(cond, W[p + "cond"]), (B, 1, d)))
        hn = tk.layer_norm(h)

        def heads(z):
            return tk.transpose(tk.reshape(z, (B, N, H, dh)), (0, 2, 1, 3))

        q = heads(tk.matmul(hn, W[p + "wq"]))
        k = heads(tk.matmul(hn, W[p + "wk"]))
        v = heads(tk.matmul(hn, W[p + "wv"]))
        if hooks:
            q_new = hooks.queries(layer, q.data)
            if q_new is not q.data:
                q = tk.Tensor(q_new)
        scores = tk.scale(tk.matmul(q, tk.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        a = tk.softmax_rows(scores)
        if hooks:
            a_new = hooks.attention(layer, a.data)
            if a_new is not a.data:
                a = tk.Tensor(a_new)
        o = tk.reshape(tk.transpose(tk.matmul(a, v), (0, 2, 1, 3)), (B, N, d))
        h = tk.add(h, tk.matmul(o, W[p + "wo"]))
        m = tk.gelu(tk.add(tk.matmul(tk.layer_norm(h), W[p + "fc1"]), W[p + "fc1_b"]))
        h = tk.add(h, tk.add(tk.matmul(m, W[p + "fc2"]), W[p + "fc2_b"]))

    if cfg.joint:
        h = tk.slice_axis(h, 0, N_IMG_TOKENS, axis=1)
    out = tk.add(tk.matmul(tk.layer_norm(h), W["out_w"]), W["out_b"])
    if _tensors is not None:
        return out
    return unpatchify(out.data)


# ---------------------------------------------------------------- data

def toy_shapes(n: int, seed: int = 0, classes: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Jittered 8x8 shapes in [-1, 1]: class 0 filled square, class 1 plus sign."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0xDA7A])))
    labels = rng.integers(0, 2, size=n) if classes is None else np.asarray(classes, dtype=np.int64)
    imgs = np.zeros((len(labels), IMG, IMG))
    for i, lab in enumerate(labels):
        inten = rng.uniform(0.6, 1.0)
        if lab == 0:
            size = int(rng.integers(3, 5))
            r, col = rng.integers(0, IMG - size + 1, size=2)
            imgs[i, r:r + size, col:col + size] = inten
        else:
            r, col = rng.integers(1, IMG - 1, size=2)
            imgs[i, r, max(col - 1, 0):col + 2] = inten
            imgs[i, max(r - 1, 0):r + 2, col] = inten
    return imgs * 2.0 - 1.0, labels


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    params: ToyModelParams
    losses: list[tuple[int, float]] = field(default_factory=list)


def _batch_loss(params, tensors, x0, labels, rng, schedule):
    cfg = params.config
    B = x0.shape[0]
    noise = rng.standard_normal(x0.shape)
    drop = rng.random(B) < 0.1
    labels = np.where(drop, cfg.null_class, labels)
    if cfg.mode == "eps":
        t = rng.integers(1, schedule.T + 1, size=B)
        x_t = forward_corrupt(x0, t, noise, schedule)
        target = noise
        t_model = t / schedule.T
    else:
        t_model = rng.random(B)
        x_t = forward_corrupt(x0, t_model, noise, schedule)
        target = noise - x0
    out = forward(params, x_t, t_model, labels, _tensors=tensors)
    return tk.mean_square(tk.sub(out, patchify(target)))


def train(
    dataset: tuple[np.ndarray, np.ndarray],
    config: ModelConfig | None = None,
    steps: int = 2000,
    seed: int = 0,
    *,
    batch_size: int = 64,
    lr: float = 2e-3,
    log_every: int = 250,
    init: ToyModelParams | None = None,
) -> TrainResult:
    """Train on ``(images, labels)`` with MSE on eps (vp) or velocity (flow).

    Labels are dropped to the null class with probability 0.1 so the model
    supports classifier-free guidance. The returned loss curve holds the
    held-out loss at step 0, every ``log_every`` steps and at the end.
    """
    params = init.copy() if init is not None else init_params(config or ModelConfig(), seed)
    cfg = params.config
    schedule = cfg.schedule()
    images, labels = dataset
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0x7A1])))
    eval_rng_seed = [seed, 0xE7A1]
    held_x, held_y = toy_shapes(256, seed=seed + 7919)

    def held_out_loss(p):
        r = np.random.Generator(np.random.Philox(np.random.SeedSequence(eval_rng_seed)))
        tensors = {k: tk.Tensor(v) for k, v in p.weights.items()}
        return float(_batch_loss(p, tensors, held_x, held_y, r, schedule).data)

    result = TrainResult(params, [(0, held_out_loss(params))])
    state = tk.AdamState()
    names = sorted(params.weights)
    weights = params.weights
    for step in range(1, steps + 1):
        idx = rng.integers(0, len(images), size=batch_size)
        tensors = {k: tk.Tensor(weights[k], requires_grad=True) for k in names}
        with tk.GradTape() as tape:
            loss = _batch_loss(params, tensors, images[idx], labels[idx], rng, schedule)
        if not np.isfinite(loss.data):
            raise TrainingError(f"non-finite loss at step {step}")
        grads = dict(zip(names, tape.gradient(loss, [tensors[k] for k in names])))
        weights, state = tk.adam_step(weights, grads, state, lr)
        params = ToyModelParams(cfg, weights, params.seed)
        if step % log_every == 0 or step == steps:
            result.losses.append((step, held_out_loss(params)))
            log.debug("step %d held-out loss %.5f", step, result.losses[-1][1])
    result.params = params
    return result
