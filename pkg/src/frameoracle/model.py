"""Frame selector: modality projectors, a fusion Transformer, and two heads.

The rank head scores every candidate frame; the K head predicts a categorical
distribution over how many frames to keep. Parameters are split into four
groups so the curriculum can freeze them independently.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
from torch import nn

from .core import CandidateSet, KDistribution, PromptEncoding, ScoreVector, TrainExample

GROUPS = ("projectors", "encoder", "rank_head", "k_head")
CHECKPOINT_FORMAT = 1


@dataclass(frozen=True)
class SelectorConfig:
    d_model: int = 256
    n_layers: int = 4
    n_heads: int = 8
    d_v: int = 64
    d_t: int = 64
    k_max: int = 16
    dropout: float = 0.1
    max_frames: int = 64
    max_tokens: int = 64
    ff_mult: int = 4
    use_frame_positions: bool = True
    decode: str = "argmax"  # or "expectation"

    def __post_init__(self) -> None:
        for name in ("d_model", "n_layers", "n_heads", "d_v", "d_t", "k_max", "max_frames", "max_tokens", "ff_mult"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.decode not in ("argmax", "expectation"):
            raise ValueError(f"unknown decode rule {self.decode!r}")

    @classmethod
    def for_variant(cls, variant: str, **overrides) -> "SelectorConfig":
        """Defaults for the 16- and 64-candidate selectors (the latter caps K at 16)."""
        if variant == "frames16":
            base = dict(k_max=16, max_frames=16)
        elif variant == "frames64":
            base = dict(k_max=16, max_frames=64)
        else:
            raise ValueError(f"unknown variant {variant!r}")
        base.update(overrides)
        return cls(**base)


class Projectors(nn.Module):
    def __init__(self, cfg: SelectorConfig):
        super().__init__()
        self.visual = nn.Linear(cfg.d_v, cfg.d_model)
        self.text = nn.Linear(cfg.d_t, cfg.d_model)
        self.frame_pos = nn.Embedding(cfg.max_frames, cfg.d_model)
        self.text_pos = nn.Embedding(cfg.max_tokens, cfg.d_model)
        self.modality = nn.Embedding(2, cfg.d_model)
        nn.init.normal_(self.frame_pos.weight, std=0.02)
        nn.init.normal_(self.text_pos.weight, std=0.02)
        nn.init.normal_(self.modality.weight, std=0.02)


class FrameOracle(nn.Module):
    """Selection policy over a candidate set conditioned on a prompt."""

    def __init__(self, config: SelectorConfig):
        super().__init__()
        self.config = config
        cfg = config
        self.projectors = Projectors(cfg)
        layer = nn.TransformerEncoderLayer(
            cfg.d_model,
            cfg.n_heads,
            dim_feedforward=cfg.ff_mult * cfg.d_model,
            dropout=cfg.dropout,
            activation="gelu",
            batch_first=True,
            norm_first=True,
        )
        self.encoder = nn.TransformerEncoder(layer, cfg.n_layers, enable_nested_tensor=False)
        self.rank_head = nn.Sequential(nn.LayerNorm(cfg.d_model), nn.Linear(cfg.d_model, cfg.d_model), nn.GELU(), nn.Linear(cfg.d_model, 1))
        self.k_head = nn.Sequential(nn.LayerNorm(cfg.d_model), nn.Linear(cfg.d_model, cfg.d_model), nn.GELU(), nn.Linear(cfg.d_model, cfg.k_max))
        self.group_flags = {g: True for g in GROUPS}

    def group(self, name: str) -> nn.Module:
        if name not in GROUPS:
            raise KeyError(f"unknown parameter group {name!r}")
        return getattr(self, name)

    def group_parameters(self, name: str) -> list[nn.Parameter]:
        return list(self.group(name).parameters())

    def encode(self, frame_emb, token_emb, frame_mask=None, token_mask=None):
        """Run projectors and the fusion encoder; returns hidden states at frame positions."""
        cfg = self.config
        b, n, dv = frame_emb.shape
        _, t, dt = token_emb.shape
        if dv != cfg.d_v or dt != cfg.d_t:
            raise ValueError(f"embedding widths ({dv}, {dt}) do not match config ({cfg.d_v}, {cfg.d_t})")
        if n > cfg.max_frames or t > cfg.max_tokens:
            raise ValueError(f"sequence too long: N={n} (max {cfg.max_frames}), T={t} (max {cfg.max_tokens})")
        p = self.projectors
        dev = frame_emb.device
        f = p.visual(frame_emb) + p.modality.weight[0]
        if cfg.use_frame_positions:
            f = f + p.frame_pos(torch.arange(n, device=dev))
        x = p.text(token_emb) + p.modality.weight[1] + p.text_pos(torch.arange(t, device=dev))
        h = torch.cat([f, x], dim=1)
        pad = None
        if frame_mask is not None or token_mask is not None:
            fm = frame_mask if frame_mask is not None else torch.ones(b, n, dtype=torch.bool, device=dev)
            tm = token_mask if token_mask is not None else torch.ones(b, t, dtype=torch.bool, device=dev)
            pad = ~torch.cat([fm, tm], dim=1)
        h = self.encoder(h, src_key_padding_mask=pad)
        return h[:, :n]

    def pool(self, frame_hidden, frame_mask=None):
        if frame_mask is None:
            return frame_hidden.mean(dim=1)
        w = frame_mask.to(frame_hidden.dtype).unsqueeze(-1)
        return (frame_hidden * w).sum(dim=1) / w.sum(dim=1).clamp_min(1.0)

    def forward(self, frame_emb, token_emb, frame_mask=None, token_mask=None):
        """Returns ``(scores [B, N], k_logits [B, k_max])``.

        Logits for k larger than the number of valid frames are set to -inf.
        """
        hidden = self.encode(frame_emb, token_emb, frame_mask, token_mask)
        scores = self.rank_head(hidden).squeeze(-1)
        # the K head's hidden layer runs per frame; its output layer reads the frame-mean
        k_logits = self.k_head[3](self.pool(self.k_head[:3](hidden), frame_mask))
        n_valid = (
            torch.full((hidden.shape[0],), hidden.shape[1], device=hidden.device)
            if frame_mask is None
            else frame_mask.sum(dim=1)
        )
        ks = torch.arange(1, self.config.k_max + 1, device=hidden.device)
        k_logits = k_logits.masked_fill(ks.unsqueeze(0) > n_valid.unsqueeze(1), float("-inf"))
        if frame_mask is not None:
            scores = scores.masked_fill(~frame_mask, float("-inf"))
        return scores, k_logits


SelectorParams = FrameOracle


def init_params(config: SelectorConfig, seed: int) -> FrameOracle:
    """Build a selector with deterministic weights for ``seed``; every group trainable."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = FrameOracle(config)
    return model


def set_trainable(params: FrameOracle, group_flags: Mapping[str, bool]) -> FrameOracle:
    unknown = set(group_flags) - set(GROUPS)
    if unknown:
        raise KeyError(f"unknown parameter group(s): {sorted(unknown)}")
    for name, flag in group_flags.items():
        for p in params.group_parameters(name):
            p.requires_grad_(bool(flag))
            if not flag:
                p.grad = None
        params.group_flags[name] = bool(flag)
    return params


def _as_batch(params: FrameOracle, frames: CandidateSet, prompt: PromptEncoding):
    dtype = next(params.parameters()).dtype
    f = torch.as_tensor(np.array(frames.frame_embeddings), dtype=dtype).unsqueeze(0)
    t = torch.as_tensor(np.array(prompt.token_embeddings), dtype=dtype).unsqueeze(0)
    return f, t


def forward(params: FrameOracle, frames: CandidateSet, prompt: PromptEncoding) -> tuple[ScoreVector, KDistribution]:
    """Single-example inference returning plain value objects."""
    f, t = _as_batch(params, frames, prompt)
    was_training = params.training
    params.eval()
    try:
        with torch.no_grad():
            scores, k_logits = params(f, t)
    finally:
        params.train(was_training)
    if not torch.isfinite(scores).all():
        raise FloatingPointError("selector produced non-finite scores")
    probs = torch.softmax(k_logits[0].double(), dim=-1)
    probs = probs / probs.sum()
    return ScoreVector(tuple(scores[0].tolist())), KDistribution(tuple(probs.tolist()))


def collate(examples: Sequence[TrainExample], dtype=torch.float32):
    """Stack candidate sets and prompts, padding with masks when sizes differ."""
    ns = [ex.frames.n for ex in examples]
    ts = [ex.prompt.token_count for ex in examples]
    n, t = max(ns), max(ts)
    dv = examples[0].frames.dim
    dt = examples[0].prompt.token_embeddings.shape[1]
    f = torch.zeros(len(examples), n, dv, dtype=dtype)
    x = torch.zeros(len(examples), t, dt, dtype=dtype)
    fm = torch.zeros(len(examples), n, dtype=torch.bool)
    tm = torch.zeros(len(examples), t, dtype=torch.bool)
    for b, ex in enumerate(examples):
        f[b, : ns[b]] = torch.tensor(np.asarray(ex.frames.frame_embeddings))
        x[b, : ts[b]] = torch.tensor(np.asarray(ex.prompt.token_embeddings))
        fm[b, : ns[b]] = True
        tm[b, : ts[b]] = True
    uniform_n = len(set(ns)) == 1
    uniform_t = len(set(ts)) == 1
    return f, x, (None if uniform_n else fm), (None if uniform_t else tm)


def predict_batched(params: FrameOracle, examples: Sequence[TrainExample], batch_size: int = 64):
    """Eval-mode scores and K probabilities for many examples.

    Returns ``(scores, probs)`` as lists of numpy arrays, unpadded per example.
    """
    was_training = params.training
    params.eval()
    scores_out, probs_out = [], []
    try:
        with torch.no_grad():
            for start in range(0, len(examples), batch_size):
                chunk = examples[start : start + batch_size]
                f, x, fm, tm = collate(chunk, dtype=next(params.parameters()).dtype)
                scores, k_logits = params(f, x, fm, tm)
                probs = torch.softmax(k_logits.double(), dim=-1)
                for b, ex in enumerate(chunk):
                    scores_out.append(scores[b, : ex.frames.n].double().numpy())
                    probs_out.append(probs[b].numpy())
    finally:
        params.train(was_training)
    return scores_out, probs_out


def save_checkpoint(params: FrameOracle, path, extra: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format_version": CHECKPOINT_FORMAT,
            "config": asdict(params.config),
            "group_flags": dict(params.group_flags),
            "state_dict": params.state_dict(),
            "extra": extra or {},
        },
        path,
    )


def load_checkpoint(path) -> tuple[FrameOracle, dict]:
    blob = torch.load(Path(path), map_location="cpu", weights_only=False)
    if blob.get("format_version") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {blob.get('format_version')!r}")
    model = FrameOracle(SelectorConfig(**blob["config"]))
    model.load_state_dict(blob["state_dict"])
    set_trainable(model, blob["group_flags"])
    return model, blob.get("extra", {})
