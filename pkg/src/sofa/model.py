"""A small pre-norm decoder-only transformer over interleaved sequences.

Parameters live in a plain ``dict[str, Tensor]`` so that forward, loss and
gradients stay pure functions of ``(inputs, params)``. Gradients come from
``torch.autograd`` on exactly this forward computation.
"""

from __future__ import annotations

import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import pqa
from .attn import AttentionConfig, apply_position_encoding, attend
from .layout import SequenceLayout
from .mask import schedule_masks

log = logging.getLogger(__name__)

torch.use_deterministic_algorithms(True)


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 64
    vocab_size: int = pqa.VOCAB_SIZE
    d_mlp: int = 256
    rope_enabled_for_images: bool = True
    semantics: str = "renormalized"

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def attention(self, **overrides) -> AttentionConfig:
        kw = dict(d_head=self.d_head, n_heads=self.n_heads, semantics=self.semantics,
                  rope_enabled_for_images=self.rope_enabled_for_images)
        kw.update(overrides)
        return AttentionConfig(**kw)


@dataclass
class ModelParams:
    config: ModelConfig
    weights: dict[str, torch.Tensor]

    def to(self, dtype: torch.dtype) -> "ModelParams":
        return ModelParams(self.config, {k: v.detach().to(dtype) for k, v in self.weights.items()})

    @property
    def dtype(self) -> torch.dtype:
        return next(iter(self.weights.values())).dtype

    def shapes(self) -> dict[str, tuple[int, ...]]:
        cfg = self.config
        d, v, m = cfg.d_model, cfg.vocab_size, cfg.d_mlp
        out = {"embed": (v, d), "ln_f": (d,), "head": (d, v)}
        for i in range(cfg.n_layers):
            p = f"layers.{i}."
            out.update({p + "ln1": (d,), p + "wq": (d, d), p + "wk": (d, d), p + "wv": (d, d),
                        p + "wo": (d, d), p + "ln2": (d,), p + "w1": (d, m), p + "b1": (m,),
                        p + "w2": (m, d), p + "b2": (d,)})
        return out

    def check(self) -> None:
        shapes = self.shapes()
        if set(shapes) != set(self.weights):
            raise ValueError("parameter names do not match config")
        for k, s in shapes.items():
            if tuple(self.weights[k].shape) != s:
                raise ValueError(f"{k}: shape {tuple(self.weights[k].shape)} != {s}")
            if not torch.isfinite(self.weights[k]).all():
                raise ValueError(f"{k}: non-finite entries")


def init_params(config: ModelConfig, seed: int = 0, dtype: torch.dtype = torch.float32) -> ModelParams:
    g = torch.Generator().manual_seed(seed)
    d = config.d_model
    params = ModelParams(config, {})
    resid_scale = 1.0 / math.sqrt(2 * config.n_layers)
    for name, shape in params.shapes().items():
        short = name.rsplit(".", 1)[-1]
        if short in ("ln1", "ln2", "ln_f"):
            w = torch.ones(shape, dtype=torch.float64)
        elif short in ("b1", "b2"):
            w = torch.zeros(shape, dtype=torch.float64)
        else:
            w = torch.randn(shape, generator=g, dtype=torch.float64) / math.sqrt(shape[0])
            if short in ("wo", "w2"):
                w = w * resid_scale
            if short == "embed":
                w = w * math.sqrt(shape[0] / d)
        params.weights[name] = w.to(dtype)
    return params


def _rmsnorm(x: torch.Tensor, gain: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    return x * torch.rsqrt((x * x).mean(dim=-1, keepdim=True) + eps) * gain


def forward(tokens, layout: SequenceLayout, masks: Sequence, params: ModelParams,
            config: ModelConfig | None = None, weights: dict | None = None):
    """Logits ``(B, L, vocab)`` and per-layer attention weights ``(B, H, L, L)``.

    ``tokens`` is ``(L,)`` or ``(B, L)``; a 1-D input gives 1-D batch outputs
    squeezed back to ``(L, vocab)`` / ``(H, L, L)``.
    """
    cfg = config or params.config
    W = params.weights if weights is None else weights
    tok = torch.as_tensor(tokens, dtype=torch.long)
    squeeze = tok.ndim == 1
    if squeeze:
        tok = tok[None]
    B, L = tok.shape
    if L != layout.L:
        raise ValueError(f"{L} tokens for a layout of length {layout.L}")
    if len(masks) != cfg.n_layers:
        raise ValueError(f"{len(masks)} masks for {cfg.n_layers} layers")
    dtype = W["embed"].dtype
    acfg = cfg.attention()
    H, dh = cfg.n_heads, cfg.d_head
    image_rows = [layout.is_image(t) for t in range(L)]
    x = W["embed"][tok]
    attn_weights = []
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        h = _rmsnorm(x, W[p + "ln1"])
        q = (h @ W[p + "wq"]).view(B, L, H, dh).transpose(1, 2)
        k = (h @ W[p + "wk"]).view(B, L, H, dh).transpose(1, 2)
        v = (h @ W[p + "wv"]).view(B, L, H, dh).transpose(1, 2)
        q = apply_position_encoding(q, layout.positions, acfg, image_rows)
        k = apply_position_encoding(k, layout.positions, acfg, image_rows)
        m = torch.as_tensor(np.asarray(masks[i]), dtype=dtype)
        o, w = attend(q, k, v, m, acfg)
        attn_weights.append(w)
        x = x + o.transpose(1, 2).reshape(B, L, H * dh) @ W[p + "wo"]
        h = _rmsnorm(x, W[p + "ln2"])
        x = x + torch.nn.functional.gelu(h @ W[p + "w1"] + W[p + "b1"]) @ W[p + "w2"] + W[p + "b2"]
    logits = _rmsnorm(x, W["ln_f"]) @ W["head"]
    if squeeze:
        return logits[0], [w[0] for w in attn_weights]
    return logits, attn_weights


# loss -------------------------------------------------------------------------

@dataclass
class Batch:
    """Prompts ``(B, L)`` with one supervised target per image slot ``(B, N)``."""

    tokens: np.ndarray
    targets: np.ndarray
    layout: SequenceLayout

    @classmethod
    def from_instances(cls, instances) -> "Batch":
        return cls(*pqa.batch_arrays(instances))

    def __len__(self) -> int:
        return len(self.tokens)

    def take(self, idx) -> "Batch":
        return Batch(self.tokens[idx], self.targets[idx], self.layout)


def slot_logits(logits: torch.Tensor, layout: SequenceLayout) -> torch.Tensor:
    return logits[..., pqa.answer_slots(layout), :]


def batch_loss(batch: Batch, params: ModelParams, masks, weights=None) -> torch.Tensor:
    logits, _ = forward(batch.tokens, batch.layout, masks, params, weights=weights)
    sl = logits[..., pqa.target_positions(batch.layout), :]
    tgt = torch.as_tensor(batch.targets)
    return torch.nn.functional.cross_entropy(sl.reshape(-1, sl.shape[-1]), tgt.reshape(-1))


def loss_and_grad(batch: Batch, params: ModelParams, masks=None):
    """Mean cross-entropy over answer slots and its gradient for every weight."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    if masks is None:
        masks = schedule_masks(batch.layout, 0.0, params.config.n_layers, "none")
    names = list(params.weights)
    leaves = {k: params.weights[k].detach().clone().requires_grad_(True) for k in names}
    loss = batch_loss(batch, params, masks, weights=leaves)
    grads = torch.autograd.grad(loss, [leaves[k] for k in names])
    return loss.item(), dict(zip(names, grads))


# training ---------------------------------------------------------------------

class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    lr: float = 0.1
    steps: int = 2000
    batch_size: int = 32
    momentum: float = 0.9
    grad_clip: float | None = 1.0
    precision: str = "float32"
    sigma: float = 0.0
    schedule: str = "none"
    holdout: int = 256
    log_every: int = 100

    def __post_init__(self) -> None:
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"unknown precision {self.precision!r}")

    @property
    def dtype(self) -> torch.dtype:
        return torch.float32 if self.precision == "float32" else torch.float64


@dataclass
class TrainLog:
    steps: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    heldout_loss: list[float] = field(default_factory=list)

    def to_csv(self) -> str:
        rows = ["step,train_loss,heldout_loss"]
        rows += [f"{s},{a!r},{b!r}" for s, a, b in zip(self.steps, self.train_loss, self.heldout_loss)]
        return "\n".join(rows) + "\n"


def train(dataset: Batch, params_init: ModelParams, config: TrainConfig) -> tuple[ModelParams, TrainLog]:
    """Minibatch SGD with a fixed sampling seed; returns new params and a loss log."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    params = params_init.to(config.dtype)
    holdout = min(config.holdout, len(dataset) // 5)
    if holdout > 0:
        train_set, held = dataset.take(slice(0, len(dataset) - holdout)), dataset.take(slice(len(dataset) - holdout, None))
    else:
        train_set, held = dataset, dataset
    masks = schedule_masks(dataset.layout, config.sigma, params.config.n_layers, config.schedule)
    rng = np.random.default_rng(config.seed)
    W = {k: v.clone() for k, v in params.weights.items()}
    velocity = {k: torch.zeros_like(v) for k, v in W.items()}
    tlog = TrainLog()

    def heldout_loss() -> float:
        with torch.no_grad():
            return batch_loss(held, params, masks, weights=W).item()

    tlog.steps.append(0)
    tlog.train_loss.append(float("nan"))
    tlog.heldout_loss.append(heldout_loss())
    for step in range(1, config.steps + 1):
        idx = rng.integers(len(train_set), size=min(config.batch_size, len(train_set)))
        loss, grads = loss_and_grad(train_set.take(idx), ModelParams(params.config, W), masks)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"loss became {loss} at step {step}")
        if config.grad_clip is not None:
            norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            scale = min(1.0, config.grad_clip / (norm + 1e-12))
        else:
            scale = 1.0
        with torch.no_grad():
            for k in W:
                g = grads[k] * scale
                if config.momentum:
                    velocity[k].mul_(config.momentum).add_(g)
                    g = velocity[k]
                W[k] = W[k] - config.lr * g
        if step % config.log_every == 0 or step == config.steps:
            hl = heldout_loss()
            if not math.isfinite(hl):
                raise TrainingDiverged(f"held-out loss became {hl} at step {step}")
            tlog.steps.append(step)
            tlog.train_loss.append(loss)
            tlog.heldout_loss.append(hl)
            log.info("step %d train %.4f heldout %.4f", step, loss, hl)
    return ModelParams(params.config, W), tlog


# inference --------------------------------------------------------------------

def predict(instances_or_batch, params: ModelParams, sigma: float = 0.0, mode: str = "every_2",
            batch_size: int = 512, return_logits: bool = False):
    """Per-image answers (``B, N`` ints) read at the answer slots."""
    batch = instances_or_batch if isinstance(instances_or_batch, Batch) else Batch.from_instances(instances_or_batch)
    masks = schedule_masks(batch.layout, sigma, params.config.n_layers, mode)
    preds, all_logits = [], []
    with torch.no_grad():
        for s in range(0, len(batch), batch_size):
            logits, _ = forward(batch.tokens[s:s + batch_size], batch.layout, masks, params)
            sl = slot_logits(logits, batch.layout)
            vals = sl[..., pqa.VALUE_BASE:pqa.VALUE_BASE + pqa.N_VALUES]
            preds.append(vals.argmax(dim=-1).numpy())
            if return_logits:
                all_logits.append(sl)
    out = np.concatenate(preds)
    if return_logits:
        return out, torch.cat(all_logits)
    return out


@dataclass
class Generation:
    tokens: list[int]
    truncated: bool

    @property
    def text(self) -> str:
        return pqa.detokenize(self.tokens)


def generate(prompt_tokens, layout: SequenceLayout, sigma: float, params: ModelParams,
             mode: str = "every_2", max_new_tokens: int = 128) -> Generation:
    """Greedy answer list for one prompt.

    Each image's answer is the argmax over value tokens at its answer slot,
    computed under the soft schedule; the answers are emitted as
    ``[a0, a1, ...] END``. Output longer than ``max_new_tokens`` is cut and
    flagged as truncated.
    """
    if len(prompt_tokens) != layout.L:
        raise ValueError("prompt does not match layout")
    batch = Batch(np.asarray([prompt_tokens], dtype=np.int64), np.zeros((1, layout.n_images + 1), dtype=np.int64), layout)
    answers = predict(batch, params, sigma, mode)[0]
    toks = pqa.answer_tokens(answers)
    if len(toks) > max_new_tokens:
        return Generation(toks[:max_new_tokens], True)
    return Generation(toks, False)


# checkpoints ------------------------------------------------------------------

CKPT_MAGIC = b"SOFACKPT"
CKPT_VERSION = 1


def save_checkpoint(path, params: ModelParams, extra: dict | None = None) -> None:
    """Write a single-file checkpoint.

    Layout: 8-byte magic ``SOFACKPT``, uint32 LE version, uint32 LE header
    length ``n``, ``n`` bytes of UTF-8 JSON header (config, tensor names,
    shapes and byte offsets), then every tensor as row-major little-endian
    float32, in header order.
    """
    path = Path(path)
    names = list(params.shapes())
    tensors, index, offset = [], [], 0
    for k in names:
        a = params.weights[k].detach().to(torch.float32).numpy().astype("<f4", copy=False)
        tensors.append(np.ascontiguousarray(a).tobytes())
        index.append({"name": k, "shape": list(a.shape), "offset": offset})
        offset += len(tensors[-1])
    header = {"config": asdict(params.config), "tensors": index, "dtype": "float32-le"}
    if extra:
        header["extra"] = extra
    hbytes = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(hbytes)))
    buf.write(hbytes)
    for t in tensors:
        buf.write(t)
    path.write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + hlen])
    base = 16 + hlen
    weights = {}
    for t in header["tensors"]:
        n = int(np.prod(t["shape"])) if t["shape"] else 1
        a = np.frombuffer(raw, dtype="<f4", count=n, offset=base + t["offset"]).reshape(t["shape"])
        weights[t["name"]] = torch.from_numpy(a.astype(np.float32))
    params = ModelParams(ModelConfig(**header["config"]), weights)
    params.check()
    return params, header.get("extra", {})
