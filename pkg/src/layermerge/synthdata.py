"""Synthetic two-task corpus: frame tokens (transcription-like) plus an
utterance-level emotion class, with a tunable conflict between the tasks.

Feature layout (input_dim >= 8; last four dims reserved):
  - token dims 0..D-5: each non-blank token is a one-hot template here,
    local and high-frequency (changes frame to frame)
  - emotion dims D-4..D-2: a per-class cube-vertex offset, global and
    constant across the utterance
  - envelope dim D-1: a slow sinusoid with class-dependent phase

The ``conflict`` knob moves the emotion offset out of its private dims
and into the token dims: at 0 the tasks live in orthogonal subspaces, at
1 the emotion evidence sits entirely on top of the token evidence, so a
model cannot serve one task without disturbing the other.

``domain_shift`` produces the out-of-domain variant: token template
amplitude moves onto a neighboring dim and all emotion components
(offset, leak, envelope) are attenuated by max(0, 1 - shift). At shift 0
the generator is bit-identical to the in-domain one; at shift >= 1 the
corpus carries no emotion signal at all.

Soft labels are exact one-hot distributions; label smoothing is a
training-time transform, not a corpus property.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import Tensor
from .checkpoint import CheckpointError, CorruptionError, FormatError
from .rng import Rng

SPLITS = ("train", "valid", "test")

TOKEN_SCALE = 1.0
EMO_SCALE = 1.0
ENVELOPE_SCALE = 0.5
SHIFT_DISPLACEMENT = 0.4
SIGNATURE_PROB = 0.55


def collapse_tokens(tokens) -> list[int]:
    """Collapse consecutive repeats, then drop blanks (token 0)."""
    out: list[int] = []
    prev = -1
    for t in tokens:
        t = int(t)
        if t != prev and t != 0:
            out.append(t)
        prev = t
    return out


@dataclass(frozen=True)
class SynthConfig:
    num_train: int = 96
    num_valid: int = 48
    num_test: int = 160
    frames_min: int = 16
    frames_max: int = 32
    input_dim: int = 16
    vocab_size: int = 12
    num_classes: int = 8
    conflict: float = 0.0
    domain_shift: float = 0.0
    noise_std: float = 0.12
    seed: int = 0
    class_prior: tuple[float, ...] | None = None

    def __post_init__(self):
        if not 0.0 <= self.conflict <= 1.0:
            raise ValueError("conflict must be in [0, 1]")
        if self.domain_shift < 0:
            raise ValueError("domain_shift must be >= 0")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.input_dim < 8:
            raise ValueError("input_dim must be >= 8 (4 reserved dims)")
        if self.vocab_size - 1 > self.input_dim - 4:
            raise ValueError(
                f"{self.vocab_size - 1} token templates cannot be one-hot in "
                f"{self.input_dim - 4} token dims")
        if not 2 <= self.num_classes <= 8:
            raise ValueError("num_classes must be in 2..8 (cube vertices)")
        if not 4 <= self.frames_min <= self.frames_max:
            raise ValueError("need 4 <= frames_min <= frames_max")
        if min(self.num_train, self.num_valid, self.num_test) < 1:
            raise ValueError("every split needs at least one utterance")
        if self.class_prior is not None:
            p = np.asarray(self.class_prior, dtype=np.float64)
            if p.shape != (self.num_classes,) or np.any(p < 0):
                raise ValueError("class_prior must be num_classes nonnegative "
                                 "values")
            if abs(p.sum() - 1.0) > 1e-9:
                raise ValueError("class_prior must sum to 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["class_prior"] is not None:
            d["class_prior"] = list(d["class_prior"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        if d.get("class_prior") is not None:
            d["class_prior"] = tuple(d["class_prior"])
        return cls(**d)


@dataclass
class Utterance:
    features: Tensor
    frame_tokens: list[int]
    emotion: int
    soft_label: np.ndarray = field(repr=False)

    def __post_init__(self):
        if len(self.frame_tokens) != self.features.shape[0]:
            raise ValueError("frame_tokens length must equal frames")
        s = float(np.sum(self.soft_label))
        if abs(s - 1.0) > 1e-9:
            raise ValueError("soft_label must sum to 1")

    @property
    def frames(self) -> int:
        return self.features.shape[0]

    @property
    def transcript(self) -> list[int]:
        return collapse_tokens(self.frame_tokens)


def _class_vertices(num_classes: int) -> np.ndarray:
    """First num_classes vertices of the {-1,+1}^3 cube."""
    verts = np.array([[(c >> b & 1) * 2.0 - 1.0 for b in range(3)]
                      for c in range(num_classes)])
    return verts


def _allocate_classes(n: int, prior: np.ndarray, rng: Rng) -> list[int]:
    """Largest-remainder allocation of n utterances to classes, shuffled.
    Deterministic and as close to the prior as integer counts allow."""
    ideal = prior * n
    counts = np.floor(ideal).astype(np.int64)
    remainder = ideal - counts
    short = n - int(counts.sum())
    order = sorted(range(len(prior)), key=lambda c: (-remainder[c], c))
    for c in order[:short]:
        counts[c] += 1
    labels = [c for c in range(len(prior)) for _ in range(counts[c])]
    perm = rng.permutation(n)
    return [labels[i] for i in perm]


def _token_sequence(frames: int, emotion: int, cfg: SynthConfig, rng: Rng
                    ) -> list[int]:
    """Blank-separated token segments; token choice is class-conditional
    (the class's signature token is drawn more often)."""
    vocab = cfg.vocab_size
    signature = 1 + emotion % (vocab - 1)
    tokens: list[int] = []
    while len(tokens) < frames:
        gap = 1 + int(rng.integers(3))
        tokens.extend([0] * min(gap, frames - len(tokens)))
        if len(tokens) >= frames:
            break
        if rng.uniform() < SIGNATURE_PROB:
            tok = signature
        else:
            tok = 1 + int(rng.integers(vocab - 1))
        seg = 4 + int(rng.integers(4))
        tokens.extend([tok] * min(seg, frames - len(tokens)))
    return tokens[:frames]


def _render(frames: int, tokens: list[int], emotion: int, cfg: SynthConfig,
            rng: Rng) -> np.ndarray:
    dim = cfg.input_dim
    token_dims = dim - 4
    atten = max(0.0, 1.0 - cfg.domain_shift)
    verts = _class_vertices(cfg.num_classes)
    x = np.zeros((frames, dim))
    move = min(1.0, SHIFT_DISPLACEMENT * cfg.domain_shift)
    for f, t in enumerate(tokens):
        if t > 0:
            x[f, t - 1] += TOKEN_SCALE * (1.0 - move)
            if move > 0:
                x[f, t % token_dims] += TOKEN_SCALE * move
    # global emotion offset: the same 3-dim cube code, split between its
    # private dims and the first three token dims. Moving it over does not
    # add information, it only entangles the tasks.
    x[:, dim - 4:dim - 1] += EMO_SCALE * (1.0 - cfg.conflict) * atten * verts[emotion]
    x[:, 0:3] += EMO_SCALE * cfg.conflict * atten * verts[emotion]
    phase = 2.0 * np.pi * emotion / cfg.num_classes
    t_axis = np.arange(1, frames + 1) / frames
    x[:, dim - 1] += ENVELOPE_SCALE * atten * np.sin(2.0 * np.pi * t_axis + phase)
    if cfg.noise_std > 0:
        x += cfg.noise_std * rng.normal((frames, dim))
    return x


def generate_corpus(cfg: SynthConfig) -> dict[str, list[Utterance]]:
    """Pure function of the config; splits are disjoint derived streams."""
    prior = (np.asarray(cfg.class_prior, dtype=np.float64)
             if cfg.class_prior is not None
             else np.full(cfg.num_classes, 1.0 / cfg.num_classes))
    sizes = {"train": cfg.num_train, "valid": cfg.num_valid,
             "test": cfg.num_test}
    root = Rng(cfg.seed).derive("corpus")
    corpus: dict[str, list[Utterance]] = {}
    for split in SPLITS:
        split_rng = root.derive(split)
        classes = _allocate_classes(sizes[split], prior,
                                    split_rng.derive("classes"))
        utts = []
        for i in range(sizes[split]):
            u_rng = split_rng.derive(i)
            frames = cfg.frames_min + int(
                u_rng.integers(cfg.frames_max - cfg.frames_min + 1))
            emotion = classes[i]
            tokens = _token_sequence(frames, emotion, cfg, u_rng.derive("tok"))
            feats = _render(frames, tokens, emotion, cfg, u_rng.derive("feat"))
            soft = np.zeros(cfg.num_classes)
            soft[emotion] = 1.0
            utts.append(Utterance(Tensor(feats), tokens, emotion, soft))
        corpus[split] = utts
    return corpus


def corpus_stats(utterances: list[Utterance]) -> dict:
    """Per-class counts, token frequencies, frames histogram."""
    if not utterances:
        raise ValueError("empty utterance list")
    num_classes = utterances[0].soft_label.size
    class_counts = [0] * num_classes
    token_freq: dict[int, int] = {}
    frames_hist: dict[int, int] = {}
    for u in utterances:
        class_counts[u.emotion] += 1
        for t in u.frame_tokens:
            token_freq[t] = token_freq.get(t, 0) + 1
        frames_hist[u.frames] = frames_hist.get(u.frames, 0) + 1
    return {
        "total": len(utterances),
        "class_counts": class_counts,
        "token_freq": {str(k): v for k, v in sorted(token_freq.items())},
        "frames_hist": {str(k): v for k, v in sorted(frames_hist.items())},
    }


def least_squares_scores(utterances: list[Utterance]) -> dict[str, float]:
    """Linear-probe diagnostic: closed-form least squares fit for frame
    tokens and for pooled emotion, reporting attainable accuracies. Used
    to verify the conflict knob actually trades the tasks off."""
    frames = np.concatenate([u.features.data for u in utterances])
    frame_labels = np.concatenate(
        [np.asarray(u.frame_tokens) for u in utterances])
    pooled = np.stack([u.features.data.mean(axis=0) for u in utterances])
    emotions = np.asarray([u.emotion for u in utterances])

    def probe(x: np.ndarray, labels: np.ndarray, num: int) -> float:
        xb = np.concatenate([x, np.ones((x.shape[0], 1))], axis=1)
        y = np.zeros((x.shape[0], num))
        y[np.arange(x.shape[0]), labels] = 1.0
        w, *_ = np.linalg.lstsq(xb, y, rcond=None)
        return float(np.mean(np.argmax(xb @ w, axis=1) == labels))

    vocab = int(frame_labels.max()) + 1
    num_classes = utterances[0].soft_label.size
    token_acc = probe(frames, frame_labels, vocab)
    emotion_acc = probe(pooled, emotions, num_classes)
    return {"token_accuracy": token_acc, "emotion_accuracy": emotion_acc,
            "joint": (token_acc + emotion_acc) / 2.0}


# ---------------------------------------------------------------------------
# serialization (same container discipline as checkpoints)

def save_corpus(corpus: dict[str, list[Utterance]], cfg: SynthConfig,
                path: str) -> None:
    for suffix in (".manifest.json", ".bin"):
        if path.endswith(suffix):
            path = path[:-len(suffix)]
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    for split in SPLITS:
        for i, u in enumerate(corpus[split]):
            raw = np.ascontiguousarray(u.features.data, dtype="<f8").tobytes()
            entries.append({
                "split": split, "index": i, "frames": u.frames,
                "emotion": int(u.emotion),
                "tokens": [int(t) for t in u.frame_tokens],
                "soft_label": [float(v) for v in u.soft_label],
                "offset": offset, "nbytes": len(raw),
            })
            chunks.append(raw)
            offset += len(raw)
    blob = b"".join(chunks)
    manifest = {
        "format_version": 1,
        "kind": "corpus",
        "dtype": "f64",
        "config": cfg.to_dict(),
        "utterances": entries,
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
    }
    with open(path + ".manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    with open(path + ".bin", "wb") as f:
        f.write(blob)


def load_corpus(path: str) -> tuple[dict[str, list[Utterance]], SynthConfig]:
    for suffix in (".manifest.json", ".bin"):
        if path.endswith(suffix):
            path = path[:-len(suffix)]
    try:
        with open(path + ".manifest.json") as f:
            manifest = json.load(f)
    except OSError as e:
        raise CheckpointError(f"cannot read corpus manifest at {path!r}: {e}") from e
    except json.JSONDecodeError as e:
        raise FormatError(f"corpus manifest at {path!r} is not valid JSON: {e}") from e
    if manifest.get("kind") != "corpus":
        raise FormatError(f"{path!r} is not a corpus file")
    cfg = SynthConfig.from_dict(manifest["config"])
    with open(path + ".bin", "rb") as f:
        blob = f.read()
    if hashlib.sha256(blob).hexdigest() != manifest["blob_sha256"]:
        raise CorruptionError(f"corpus blob at {path!r} does not match its "
                              f"manifest hash")
    corpus: dict[str, list[Utterance]] = {s: [] for s in SPLITS}
    for ent in manifest["utterances"]:
        frames = int(ent["frames"])
        count = frames * cfg.input_dim
        arr = np.frombuffer(blob, dtype="<f8", count=count,
                            offset=int(ent["offset"]))
        corpus[ent["split"]].append(Utterance(
            Tensor(arr.reshape(frames, cfg.input_dim)),
            [int(t) for t in ent["tokens"]],
            int(ent["emotion"]),
            np.asarray(ent["soft_label"])))
    return corpus, cfg
