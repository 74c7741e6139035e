"""Per-modality embedders mapping discrete values to decoder-width vectors.

Video frames carry an H' x W' grid of codes; the grid is embedded per cell
and collapsed with one of five aggregations (attention/sum/mean/max/stack).
Speech frames embed each of the F channels into a small space, stack, and
project. Embedders are initialized so every modality's output lands on a
common norm sphere, calibrated on random probe inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .errors import ConfigError, CorruptGridError, CorruptSequenceError, ShapeError
from .tokenizers import SPEAKER_DIM

AGGREGATIONS = ("attention", "sum", "mean", "max", "stack")
N_SPEECH_LEVELS = 16
MODALITY_STREAMS = ("video", "text", "speech")


@dataclass
class VideoEmbedder:
    table: tc.Tensor  # k_codes x width
    aggregation: str
    grid_hw: tuple[int, int]
    query: tc.Tensor | None = None
    key: tc.Tensor | None = None
    value: tc.Tensor | None = None
    stack_proj: tc.Tensor | None = None  # (H'*W'*width) x width

    def __post_init__(self):
        if self.aggregation not in AGGREGATIONS:
            raise ConfigError(f"unknown aggregation {self.aggregation!r}")
        needs_qkv = self.aggregation == "attention"
        if needs_qkv != (self.query is not None):
            raise ConfigError("attention aggregation requires query/key/value maps")
        if (self.aggregation == "stack") != (self.stack_proj is not None):
            raise ConfigError("stack aggregation requires the stack projection")


@dataclass
class SpeechEmbedder:
    table: tc.Tensor  # 16 x channel_width
    proj: tc.Tensor  # (F * channel_width) x width


@dataclass
class TextEmbedder:
    table: tc.Tensor  # vocab x width


@dataclass
class SpeakerProjector:
    weight: tc.Tensor  # SPEAKER_DIM x width


@dataclass
class MaskEmbeddings:
    video: tc.Tensor
    text: tc.Tensor
    speech: tc.Tensor

    def for_stream(self, stream: str) -> tc.Tensor:
        return getattr(self, stream)


@dataclass
class SpecialEmbeddings:
    """Learned begin/end sentinel vectors, one pair per modality."""

    bos: dict[str, tc.Tensor]
    eos: dict[str, tc.Tensor]


@dataclass
class ModalityEncoders:
    video: VideoEmbedder
    text: TextEmbedder
    speech: SpeechEmbedder
    speaker: SpeakerProjector
    masks: MaskEmbeddings
    specials: SpecialEmbeddings

    def named_params(self) -> dict[str, tc.Tensor]:
        out = {
            "enc.video.table": self.video.table,
            "enc.text.table": self.text.table,
            "enc.speech.table": self.speech.table,
            "enc.speech.proj": self.speech.proj,
            "enc.speaker.weight": self.speaker.weight,
            "enc.mask.video": self.masks.video,
            "enc.mask.text": self.masks.text,
            "enc.mask.speech": self.masks.speech,
        }
        if self.video.query is not None:
            out["enc.video.query"] = self.video.query
            out["enc.video.key"] = self.video.key
            out["enc.video.value"] = self.video.value
        if self.video.stack_proj is not None:
            out["enc.video.stack_proj"] = self.video.stack_proj
        for stream in MODALITY_STREAMS:
            out[f"enc.bos.{stream}"] = self.specials.bos[stream]
            out[f"enc.eos.{stream}"] = self.specials.eos[stream]
        return out


def embed_video(frames: np.ndarray, emb: VideoEmbedder) -> tc.Tensor:
    """Embed T frames of H' x W' tokens into (T, width)."""
    frames = np.asarray(frames, dtype=np.int64)
    if frames.ndim != 3:
        raise ShapeError(f"expected T x H x W tokens, got shape {frames.shape}")
    if frames.shape[1:] != emb.grid_hw:
        raise ShapeError(f"grid {frames.shape[1:]} != embedder grid {emb.grid_hw}")
    k = emb.table.shape[0]
    if frames.size and (frames.min() < 0 or frames.max() >= k):
        raise CorruptGridError(f"video token outside [0, {k - 1}]")
    t = frames.shape[0]
    cells = frames.shape[1] * frames.shape[2]
    width = emb.table.shape[1]
    e = tc.embedding_lookup(emb.table, frames.reshape(t, cells))  # (T, C, D)

    if emb.aggregation == "sum":
        return tc.sum_(e, axis=1)
    if emb.aggregation == "mean":
        return tc.mean_(e, axis=1)
    if emb.aggregation == "max":
        return tc.max_(e, axis=1)
    if emb.aggregation == "stack":
        return tc.matmul(tc.reshape(e, (t, cells * width)), emb.stack_proj)

    # attention: query from the (1,1) cell; the query cell is also a key
    e11 = tc.narrow(e, 1, 0, 1)  # (T, 1, D)
    q = tc.matmul(tc.reshape(e11, (t, width)), emb.query)  # (T, D)
    keys = tc.matmul(e, emb.key)  # (T, C, D)
    values = tc.matmul(e, emb.value)  # (T, C, D)
    logits = tc.matmul(tc.reshape(q, (t, 1, width)), tc.transpose(keys, (0, 2, 1)))
    attn = tc.softmax(tc.reshape(logits, (t, cells)), axis=-1)
    mixed = tc.matmul(tc.reshape(attn, (t, 1, cells)), values)  # (T, 1, D)
    return tc.scale(tc.reshape(mixed, (t, width)), 1.0 / math.sqrt(width))


def embed_video_frame(frame: np.ndarray, emb: VideoEmbedder) -> tc.Tensor:
    """Single-frame convenience wrapper: (H', W') tokens -> (width,) vector."""
    out = embed_video(np.asarray(frame)[None, :, :], emb)
    return tc.reshape(out, (out.shape[1],))


def embed_speech(frames: np.ndarray, emb: SpeechEmbedder) -> tc.Tensor:
    """Embed T frames of F level indices into (T, width).

    Channel order is fixed low-to-high mel index before projection."""
    frames = np.asarray(frames, dtype=np.int64)
    if frames.ndim != 2:
        raise ShapeError(f"expected T x F indices, got shape {frames.shape}")
    if frames.size and (frames.min() < 0 or frames.max() >= N_SPEECH_LEVELS):
        raise CorruptSequenceError(f"speech index outside [0, {N_SPEECH_LEVELS - 1}]")
    t, f = frames.shape
    d_chan = emb.table.shape[1]
    if emb.proj.shape[0] != f * d_chan:
        raise ShapeError(
            f"projection expects {emb.proj.shape[0]} inputs, frame gives {f * d_chan}"
        )
    e = tc.embedding_lookup(emb.table, frames)  # (T, F, d)
    return tc.matmul(tc.reshape(e, (t, f * d_chan)), emb.proj)


def embed_speech_frame(frame: np.ndarray, emb: SpeechEmbedder) -> tc.Tensor:
    out = embed_speech(np.asarray(frame)[None, :], emb)
    return tc.reshape(out, (out.shape[1],))


def embed_text(ids: np.ndarray, emb: TextEmbedder) -> tc.Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= emb.table.shape[0]):
        raise ShapeError(f"text id outside vocab of {emb.table.shape[0]}")
    return tc.embedding_lookup(emb.table, ids)


def embed_speaker(values: np.ndarray, emb: SpeakerProjector) -> tc.Tensor:
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if values.shape[0] != emb.weight.shape[0]:
        raise ShapeError(f"speaker vector dim {values.shape[0]} != {emb.weight.shape[0]}")
    out = tc.matmul(tc.Tensor(values[None, :], dtype=emb.weight.dtype), emb.weight)
    return tc.reshape(out, (emb.weight.shape[1],))


def _unit_vector(rng, width, dtype):
    v = rng.standard_normal(width)
    return tc.Tensor(v / np.linalg.norm(v), requires_grad=True, dtype=dtype)


N_INIT_PROBES = 256


def norm_matched_init(
    *,
    width: int,
    k_video: int,
    k_text: int,
    n_mels: int,
    d_speech: int = 24,
    grid_hw: tuple[int, int] = (4, 4),
    aggregation: str = "sum",
    rng: np.random.Generator,
    dtype=np.float32,
    target_norm: float = 1.0,
) -> ModalityEncoders:
    """Build all embedders, then rescale each modality's terminal map so the
    mean output norm over random probe inputs hits ``target_norm``."""

    def table(rows, cols, scl):
        return tc.Tensor(rng.standard_normal((rows, cols)) * scl, requires_grad=True, dtype=dtype)

    inv_sqrt_width = 1.0 / math.sqrt(width)
    cells = grid_hw[0] * grid_hw[1]

    video = VideoEmbedder(
        table=table(k_video, width, inv_sqrt_width),
        aggregation=aggregation,
        grid_hw=grid_hw,
        query=table(width, width, inv_sqrt_width) if aggregation == "attention" else None,
        key=table(width, width, inv_sqrt_width) if aggregation == "attention" else None,
        value=table(width, width, inv_sqrt_width) if aggregation == "attention" else None,
        stack_proj=(
            table(cells * width, width, 1.0 / math.sqrt(cells * width))
            if aggregation == "stack"
            else None
        ),
    )
    text = TextEmbedder(table=table(k_text, width, inv_sqrt_width))
    speech = SpeechEmbedder(
        table=table(N_SPEECH_LEVELS, d_speech, inv_sqrt_width),
        proj=table(n_mels * d_speech, width, 1.0 / math.sqrt(n_mels * d_speech)),
    )
    speaker = SpeakerProjector(weight=table(SPEAKER_DIM, width, 1.0 / math.sqrt(SPEAKER_DIM)))
    masks = MaskEmbeddings(
        video=_unit_vector(rng, width, dtype),
        text=_unit_vector(rng, width, dtype),
        speech=_unit_vector(rng, width, dtype),
    )
    specials = SpecialEmbeddings(
        bos={s: _unit_vector(rng, width, dtype) for s in MODALITY_STREAMS},
        eos={s: _unit_vector(rng, width, dtype) for s in MODALITY_STREAMS},
    )
    enc = ModalityEncoders(
        video=video, text=text, speech=speech, speaker=speaker, masks=masks,
        specials=specials,
    )

    # calibration probes
    with tc.no_grad():
        vid_probe = rng.integers(0, k_video, size=(N_INIT_PROBES, *grid_hw))
        txt_probe = rng.integers(0, k_text, size=N_INIT_PROBES)
        sp_probe = rng.integers(0, N_SPEECH_LEVELS, size=(N_INIT_PROBES, n_mels))
        spk_probe = rng.standard_normal((N_INIT_PROBES, SPEAKER_DIM))
        spk_probe /= np.linalg.norm(spk_probe, axis=1, keepdims=True)

        def mean_norm(mat: np.ndarray) -> float:
            return float(np.mean(np.linalg.norm(mat, axis=1)))

        terminal = {
            "attention": video.value,
            "stack": video.stack_proj,
        }.get(aggregation, video.table)
        terminal.data *= target_norm / mean_norm(embed_video(vid_probe, video).data)
        text.table.data *= target_norm / mean_norm(embed_text(txt_probe, text).data)
        speech.proj.data *= target_norm / mean_norm(embed_speech(sp_probe, speech).data)
        spk_out = np.stack([embed_speaker(v, speaker).data for v in spk_probe])
        speaker.weight.data *= target_norm / mean_norm(spk_out)
    return enc
