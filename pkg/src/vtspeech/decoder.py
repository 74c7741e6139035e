"""Unified decoder-only transformer over interleaved multimodal slots.

Every slot embeds to the model width via its modality encoder; causal
self-attention uses rotary phases driven by each slot's position index, so
the time-aligned scheme can give simultaneous video/speech frames the same
phase. All F speech channels are predicted independently and in parallel by
one wide linear head; cross-entropy is computed on speech targets only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensorcore as tc
from .errors import ConfigError, EmptyLossError, ShapeError
from .modality_encoders import (
    ModalityEncoders,
    embed_speaker,
    embed_speech,
    embed_text,
    embed_video,
    norm_matched_init,
)
from .seqlayout import SequencePlan

MASK_VALUE = -1e30  # additive attention mask; absorbs scores, exp() underflows to 0


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    n_mels: int = 80
    speech_classes: int = 17  # 16 levels + EOS
    k_video: int = 32
    k_text: int = 4
    d_speech: int = 24
    rope_base: float = 10000.0
    dropout: float = 0.0
    aggregation: str = "sum"
    video_grid: tuple[int, int] = (4, 4)

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by {self.n_heads} heads")
        if self.head_dim % 2 != 0:
            raise ConfigError(f"head dim {self.head_dim} must be even for rotary pairs")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class BlockParams:
    ln1_g: tc.Tensor
    ln1_b: tc.Tensor
    wq: tc.Tensor
    wk: tc.Tensor
    wv: tc.Tensor
    wo: tc.Tensor
    bo: tc.Tensor
    ln2_g: tc.Tensor
    ln2_b: tc.Tensor
    w1: tc.Tensor
    b1: tc.Tensor
    w2: tc.Tensor
    b2: tc.Tensor


@dataclass
class TransformerState:
    cfg: ModelConfig
    enc: ModalityEncoders
    blocks: list[BlockParams]
    final_g: tc.Tensor
    final_b: tc.Tensor
    head_w: tc.Tensor  # d_model x (F * classes)
    head_b: tc.Tensor
    opt: tc.AdamWState | None = None
    step: int = 0

    def named_params(self) -> dict[str, tc.Tensor]:
        out = dict(self.enc.named_params())
        for i, blk in enumerate(self.blocks):
            for name in (
                "ln1_g", "ln1_b", "wq", "wk", "wv", "wo", "bo",
                "ln2_g", "ln2_b", "w1", "b1", "w2", "b2",
            ):
                out[f"block{i}.{name}"] = getattr(blk, name)
        out["final.g"] = self.final_g
        out["final.b"] = self.final_b
        out["head.w"] = self.head_w
        out["head.b"] = self.head_b
        return out

    def params(self) -> list[tc.Tensor]:
        return list(self.named_params().values())


def init_state(cfg: ModelConfig, seed: int, dtype=np.float32) -> TransformerState:
    rng = np.random.default_rng(np.random.SeedSequence([0xD0DE, seed]))
    enc = norm_matched_init(
        width=cfg.d_model,
        k_video=cfg.k_video,
        k_text=cfg.k_text,
        n_mels=cfg.n_mels,
        d_speech=cfg.d_speech,
        grid_hw=cfg.video_grid,
        aggregation=cfg.aggregation,
        rng=rng,
        dtype=dtype,
    )
    d = cfg.d_model
    scl = 1.0 / math.sqrt(d)

    def w(rows, cols, s):
        return tc.Tensor(rng.standard_normal((rows, cols)) * s, requires_grad=True, dtype=dtype)

    def zeros(n):
        return tc.Tensor(np.zeros(n), requires_grad=True, dtype=dtype)

    def ones(n):
        return tc.Tensor(np.ones(n), requires_grad=True, dtype=dtype)

    blocks = []
    out_scl = scl / math.sqrt(2.0 * cfg.n_layers)  # residual-branch damping
    for _ in range(cfg.n_layers):
        blocks.append(
            BlockParams(
                ln1_g=ones(d), ln1_b=zeros(d),
                wq=w(d, d, scl), wk=w(d, d, scl), wv=w(d, d, scl),
                wo=w(d, d, out_scl), bo=zeros(d),
                ln2_g=ones(d), ln2_b=zeros(d),
                w1=w(d, 4 * d, scl), b1=zeros(4 * d),
                w2=w(4 * d, d, out_scl / 2.0), b2=zeros(d),
            )
        )
    return TransformerState(
        cfg=cfg,
        enc=enc,
        blocks=blocks,
        final_g=ones(d),
        final_b=zeros(d),
        head_w=w(d, cfg.n_mels * cfg.speech_classes, scl),
        head_b=zeros(cfg.n_mels * cfg.speech_classes),
    )


# --- rotary positions ---------------------------------------------------------

def rope_rotate(vec: np.ndarray, position: int, rope_base: float = 10000.0) -> np.ndarray:
    """Rotate consecutive pairs of a head-dim vector by position-dependent
    angles at frequencies rope_base**(-2i/dim)."""
    vec = np.asarray(vec, dtype=np.float64)
    dim = vec.shape[-1]
    if dim % 2 != 0:
        raise ConfigError(f"rotary dimension must be even, got {dim}")
    freqs = rope_base ** (-np.arange(0, dim, 2) / dim)
    angle = position * freqs
    cos, sin = np.cos(angle), np.sin(angle)
    even, odd = vec[..., 0::2], vec[..., 1::2]
    out = np.empty_like(vec)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def _rope_tables(positions: np.ndarray, head_dim: int, base: float, dtype):
    freqs = base ** (-np.arange(0, head_dim, 2) / head_dim)
    angle = positions[:, None].astype(np.float64) * freqs[None, :]
    cos = np.cos(angle)[:, :, None].astype(dtype)  # (T, dim/2, 1)
    sin = np.sin(angle)[:, :, None].astype(dtype)
    return tc.Tensor(cos), tc.Tensor(sin)


def _rope_apply(x: tc.Tensor, cos: tc.Tensor, sin: tc.Tensor) -> tc.Tensor:
    """x: (H, T, dim); cos/sin: (T, dim/2, 1) broadcast over heads."""
    h, t, dim = x.shape
    pairs = tc.reshape(x, (h, t, dim // 2, 2))
    even = tc.narrow(pairs, 3, 0, 1)
    odd = tc.narrow(pairs, 3, 1, 1)
    r_even = tc.sub(tc.mul(even, cos), tc.mul(odd, sin))
    r_odd = tc.add(tc.mul(even, sin), tc.mul(odd, cos))
    return tc.reshape(tc.concat([r_even, r_odd], axis=3), (h, t, dim))


# --- slot embedding -----------------------------------------------------------

_STREAMS = ("video", "text", "speech")


def embed_all_slots(plan: SequencePlan, enc: ModalityEncoders) -> tc.Tensor:
    """(T, d_model) slot rows in plan order.

    Masked payload slots are routed to their stream's learned mask vector."""
    if plan.speaker is None:
        raise ShapeError("plan carries no speaker vector")
    width = enc.text.table.shape[1]

    def row(vec):
        return tc.reshape(vec, (1, width))

    pieces = [row(embed_speaker(plan.speaker.values, enc.speaker))]
    offsets = {"speaker": 0}
    cursor = 1
    for stream in _STREAMS:
        offsets[f"mask.{stream}"] = cursor
        pieces.append(row(enc.masks.for_stream(stream)))
        cursor += 1
        offsets[f"bos.{stream}"] = cursor
        pieces.append(row(enc.specials.bos[stream]))
        cursor += 1
        offsets[f"eos.{stream}"] = cursor
        pieces.append(row(enc.specials.eos[stream]))
        cursor += 1
    if plan.text is not None:
        offsets["text"] = cursor
        pieces.append(embed_text(plan.text.ids, enc.text))
        cursor += len(plan.text)
    if plan.video is not None:
        offsets["video"] = cursor
        pieces.append(embed_video(plan.video.tokens, enc.video))
        cursor += plan.video.n_frames
    if plan.speech is not None and plan.speech.n_frames > 0:
        offsets["speech"] = cursor
        pieces.append(embed_speech(plan.speech.indices, enc.speech))
        cursor += plan.speech.n_frames
    stacked = tc.concat(pieces, axis=0)

    order = np.zeros(len(plan.slots), dtype=np.int64)
    text_seen = 0
    for i, slot in enumerate(plan.slots):
        if slot.kind == "speaker":
            order[i] = offsets["speaker"]
        elif slot.kind in ("bos", "eos"):
            order[i] = offsets[f"{slot.kind}.{slot.stream}"]
        elif slot.kind == "text":
            # text payload is the token id; rows follow block order
            row = offsets["text"] + text_seen
            text_seen += 1
            order[i] = offsets["mask.text"] if slot.masked else row
        elif slot.masked:
            order[i] = offsets[f"mask.{slot.stream}"]
        else:
            # video/speech payload is the frame index, valid for slot subsets
            order[i] = offsets[slot.stream] + slot.payload
    return tc.index_rows(stacked, order)


# --- transformer trunk --------------------------------------------------------

def _causal_bias(n: int, dtype) -> tc.Tensor:
    bias = np.where(np.tril(np.ones((n, n), dtype=bool)), 0.0, MASK_VALUE)
    return tc.Tensor(bias.astype(dtype))


def _split_heads(x: tc.Tensor, n_heads: int) -> tc.Tensor:
    t, d = x.shape
    return tc.transpose(tc.reshape(x, (t, n_heads, d // n_heads)), (1, 0, 2))


def trunk_hidden(
    rows: tc.Tensor,
    positions: np.ndarray,
    state: TransformerState,
    *,
    dropout_rng: np.random.Generator | None = None,
) -> tc.Tensor:
    """Pre-norm transformer stack over embedded slot rows."""
    cfg = state.cfg
    t = rows.shape[0]
    dtype = rows.dtype
    cos, sin = _rope_tables(np.asarray(positions), cfg.head_dim, cfg.rope_base, dtype)
    bias = _causal_bias(t, dtype)
    inv_sqrt = 1.0 / math.sqrt(cfg.head_dim)

    def maybe_drop(x: tc.Tensor) -> tc.Tensor:
        if cfg.dropout > 0.0 and dropout_rng is not None:
            keep = dropout_rng.random(x.shape) >= cfg.dropout
            return tc.mul(x, tc.Tensor(keep.astype(x.dtype) / (1.0 - cfg.dropout)))
        return x

    x = rows
    for blk in state.blocks:
        h = tc.layer_norm(x, blk.ln1_g, blk.ln1_b)
        q = _rope_apply(_split_heads(tc.matmul(h, blk.wq), cfg.n_heads), cos, sin)
        k = _rope_apply(_split_heads(tc.matmul(h, blk.wk), cfg.n_heads), cos, sin)
        v = _split_heads(tc.matmul(h, blk.wv), cfg.n_heads)
        scores = tc.add(tc.scale(tc.matmul(q, tc.transpose(k, (0, 2, 1))), inv_sqrt), bias)
        ctx = tc.matmul(tc.softmax(scores, axis=-1), v)  # (H, T, dh)
        ctx = tc.reshape(tc.transpose(ctx, (1, 0, 2)), (t, cfg.d_model))
        x = tc.add(x, maybe_drop(tc.add(tc.matmul(ctx, blk.wo), blk.bo)))
        h2 = tc.layer_norm(x, blk.ln2_g, blk.ln2_b)
        mlp = tc.matmul(tc.gelu(tc.add(tc.matmul(h2, blk.w1), blk.b1)), blk.w2)
        x = tc.add(x, maybe_drop(tc.add(mlp, blk.b2)))
    return tc.layer_norm(x, state.final_g, state.final_b)


@dataclass
class SpeechLogits:
    values: tc.Tensor  # (n_targets, F, classes)
    slot_indices: list[int]


def forward(
    plan: SequencePlan,
    state: TransformerState,
    cfg: ModelConfig | None = None,
    *,
    dropout_rng: np.random.Generator | None = None,
) -> SpeechLogits:
    """Logits at every loss-target slot: (n, F, classes)."""
    cfg = cfg or state.cfg
    rows = embed_all_slots(plan, state.enc)
    positions = np.array([s.position_index for s in plan.slots])
    hidden = trunk_hidden(rows, positions, state, dropout_rng=dropout_rng)
    target_idx = [i for i, s in enumerate(plan.slots) if s.is_loss_target]
    if not target_idx:
        raise EmptyLossError("plan has no loss-target slots")
    picked = tc.index_rows(hidden, np.array(target_idx))
    flat = tc.add(tc.matmul(picked, state.head_w), state.head_b)
    values = tc.reshape(flat, (len(target_idx), cfg.n_mels, cfg.speech_classes))
    return SpeechLogits(values=values, slot_indices=target_idx)


def speech_ce_loss(logits: SpeechLogits, plan: SequencePlan) -> tc.Tensor:
    """Mean negative log-softmax at the target class over slots x channels."""
    targets = [
        plan.slots[i].target_frame
        for i in logits.slot_indices
        if plan.slots[i].target_frame is not None
    ]
    if len(targets) != len(logits.slot_indices):
        raise EmptyLossError("some loss-target slots carry no target frame")
    if not targets:
        raise EmptyLossError("no active loss targets")
    target_arr = np.stack(targets)[:, :, None]  # (n, F, 1)
    logp = tc.log_softmax(logits.values, axis=-1)
    picked = tc.gather(logp, 2, target_arr)
    return tc.scale(tc.mean_(picked), -1.0)


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 4e-4
    warmup_steps: int = 5000
    total_steps: int = 3_000_000
    clip: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.0


def train_step(
    plans: list[SequencePlan],
    state: TransformerState,
    opt_cfg: OptimizerConfig,
    step: int,
    *,
    dropout_rng: np.random.Generator | None = None,
) -> dict:
    """Forward, speech-only CE, backward, clip, AdamW. Deterministic given
    identical plans and state; ``step`` drives the learning-rate schedule."""
    sums = []
    count = 0
    for plan in plans:
        logits = forward(plan, state, dropout_rng=dropout_rng)
        n = len(logits.slot_indices) * state.cfg.n_mels
        sums.append(tc.scale(speech_ce_loss(logits, plan), float(n)))
        count += n
    total = sums[0]
    for part in sums[1:]:
        total = tc.add(total, part)
    loss = tc.scale(total, 1.0 / count)

    params = state.params()
    grads = tc.backward(loss, params)
    grad_norm = tc.global_norm(grads)
    grads = tc.clip_grad_norm(grads, opt_cfg.clip)
    lr = tc.lr_schedule(step, opt_cfg.lr, opt_cfg.warmup_steps, opt_cfg.total_steps)
    if state.opt is None:
        state.opt = tc.AdamWState.init(
            params,
            beta1=opt_cfg.beta1,
            beta2=opt_cfg.beta2,
            weight_decay=opt_cfg.weight_decay,
        )
    tc.adamw_step(params, grads, state.opt, lr)
    state.step = step
    return {"step": step, "loss": loss.item(), "grad_norm": grad_norm, "lr": lr}


def channel_accuracy(plans: list[SequencePlan], state: TransformerState) -> float:
    """Teacher-forced next-frame accuracy over every target slot and channel."""
    hits = 0
    total = 0
    with tc.no_grad():
        for plan in plans:
            logits = forward(plan, state)
            pred = np.argmax(logits.values.data, axis=-1)
            want = np.stack([plan.slots[i].target_frame for i in logits.slot_indices])
            hits += int(np.sum(pred == want))
            total += want.size
    return hits / max(total, 1)
