"""Run configuration, the optimization loop and whole-model gradient checks."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import numerics as F
from .baselines import DualEncoder, build_model
from .data import Batch, ImageRecord, LabeledPair, PaddedImageBatch, batch_from_pairs, make_batches
from .model import ConfigError, Matcher, ModelConfig
from .tokenizer import Vocabulary

log = logging.getLogger(__name__)

MODEL_FIELDS = tuple(f.name for f in fields(ModelConfig) if f.name not in ("vocab_size", "seed"))
PATH_FIELDS = ("vocab", "features", "train", "pool", "checkpoint", "init_checkpoint")


@dataclass
class RunConfig:
    kind: str = "cross"
    # model shape
    d_model: int = 32
    n_heads: int = 4
    d_ff: int = 64
    L_lang: int = 2
    L_obj: int = 2
    L_cross: int = 2
    max_len: int = 16
    N_obj: int = 4
    d_feat: int = 8
    d_emb: int = 8
    dropout: float = 0.0
    # optimization
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    steps: int = 500
    schedule: str = "constant"
    warmup_frac: float = 0.1
    seed: int | None = None
    freeze_encoders: bool = False
    # files
    vocab: str | None = None
    features: str | None = None
    train: str | None = None
    eval: list[str] = field(default_factory=list)
    pool: str | None = None
    checkpoint: str | None = None
    init_checkpoint: str | None = None

    def validate(self, for_training: bool = False) -> None:
        if self.kind not in ("cross", "early", "dual"):
            raise ConfigError(f"kind must be cross, early or dual, got {self.kind!r}")
        if not isinstance(self.steps, int) or self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps!r}")
        if self.schedule not in ("constant", "linear"):
            raise ConfigError(f"schedule must be constant or linear, got {self.schedule!r}")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ConfigError("warmup_frac must be in [0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.kind == "dual" and self.batch_size < 2:
            raise ConfigError("the dual encoder needs batch_size >= 2 for its contrastive loss")
        if for_training and self.seed is None:
            raise ConfigError("a seed is required for training")
        if self.checkpoint is not None:
            out = Path(self.checkpoint).resolve()
            inputs = [getattr(self, k) for k in PATH_FIELDS if k != "checkpoint"] + list(self.eval)
            for p in inputs:
                if p is not None and Path(p).resolve() == out:
                    raise ConfigError(f"checkpoint output {self.checkpoint!r} would overwrite an input file")

    def model_config(self, vocab_size: int) -> ModelConfig:
        kw = {k: getattr(self, k) for k in MODEL_FIELDS}
        return ModelConfig(vocab_size=vocab_size, seed=self.seed or 0, **kw)

    def header(self) -> dict:
        """Config subset stored in checkpoints."""
        keep = ("kind",) + MODEL_FIELDS + (
            "lr", "beta1", "beta2", "eps", "batch_size", "steps", "schedule", "warmup_frac", "seed", "freeze_encoders",
        )
        return {k: getattr(self, k) for k in keep}

    @classmethod
    def from_dict(cls, obj: Mapping) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**obj)

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: malformed JSON ({exc.msg})") from None

    def to_dict(self) -> dict:
        return asdict(self)


def loss_and_backward(model: Matcher, batch: Batch) -> float:
    """Forward the training objective for ``batch`` and accumulate gradients."""
    if isinstance(model, DualEncoder):
        loss = model.contrastive_forward(batch)
        model.contrastive_backward()
        return loss
    p = model.forward(batch)
    loss = F.bce_loss(p, batch.labels)
    model.backward(F.bce_backward(p, batch.labels))
    return loss


def loss_only(model: Matcher, batch: Batch) -> float:
    if isinstance(model, DualEncoder):
        return model.contrastive_forward(batch)
    return F.bce_loss(model.forward(batch), batch.labels)


def trainable_parameters(model: Matcher, freeze_encoders: bool) -> list[F.Parameter]:
    return model.head_parameters() if freeze_encoders else model.parameters()


def learning_rate(cfg: RunConfig, step: int) -> float:
    """Learning rate for 1-based ``step``; "linear" warms up then decays to zero."""
    if cfg.schedule == "constant":
        return cfg.lr
    warm = max(1, int(cfg.warmup_frac * cfg.steps))
    if step <= warm:
        return cfg.lr * step / warm
    return cfg.lr * max(0.0, (cfg.steps - step + 1) / (cfg.steps - warm + 1))


def _epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def train(
    model: Matcher,
    pairs: Sequence[LabeledPair],
    features: Mapping[str, ImageRecord],
    vocab: Vocabulary,
    cfg: RunConfig,
    on_step: Callable[[int, float], None] | None = None,
) -> list[float]:
    """Run ``cfg.steps`` Adam steps and return the per-step mini-batch losses.

    The dual encoder trains contrastively on the positive pairs only; batches
    of one pair are skipped since they carry no negatives.
    """
    cfg.validate(for_training=True)
    if isinstance(model, DualEncoder):
        pairs = [p for p in pairs if p.label == 1]
        if len(pairs) < 2:
            raise ValueError("contrastive training needs at least 2 positive pairs")
    if not pairs:
        raise ValueError("no training pairs")
    c = model.config
    params = trainable_parameters(model, cfg.freeze_encoders)
    state = F.AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    losses: list[float] = []
    epoch = 0
    queue: list[list[LabeledPair]] = []
    while len(losses) < cfg.steps:
        if not queue:
            queue = make_batches(pairs, features, cfg.batch_size, _epoch_seed(cfg.seed, epoch))
            if isinstance(model, DualEncoder):
                queue = [b for b in queue if len(b) >= 2]
            epoch += 1
            continue
        chunk = queue.pop(0)
        batch = batch_from_pairs(chunk, features, vocab, c.max_len, c.N_obj)
        model.zero_grad()
        state.lr = learning_rate(cfg, len(losses) + 1)
        loss = loss_and_backward(model, batch)
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at step {len(losses) + 1}")
        F.adam_step(params, state)
        losses.append(loss)
        if on_step is not None:
            on_step(len(losses), loss)
    return losses


# ---------------------------------------------------------------------------
# gradient checks

TINY_CONFIG = dict(
    vocab_size=20, d_model=8, n_heads=2, d_ff=12, L_lang=1, L_obj=1, L_cross=1,
    max_len=6, N_obj=3, d_feat=5, d_emb=4,
)


def random_batch(config: ModelConfig, batch_size: int, rng: np.random.Generator, labels: bool = True) -> Batch:
    """Random token ids, masks and object sets of varying lengths."""
    L, N = config.max_len, config.N_obj
    ids = np.zeros((batch_size, L), dtype=np.int64)
    tmask = np.zeros((batch_size, L))
    boxes = np.zeros((batch_size, N, 4))
    feats = np.zeros((batch_size, N, config.d_feat))
    omask = np.zeros((batch_size, N))
    for b in range(batch_size):
        n_tok = int(rng.integers(2, L + 1))
        ids[b, :n_tok] = rng.integers(1, config.vocab_size, size=n_tok)
        tmask[b, :n_tok] = 1.0
        n_obj = int(rng.integers(1, N + 1))
        xy = rng.uniform(0.0, 0.5, size=(n_obj, 2))
        wh = rng.uniform(0.1, 0.5, size=(n_obj, 2))
        boxes[b, :n_obj] = np.concatenate([xy, xy + wh], axis=1)
        feats[b, :n_obj] = rng.normal(size=(n_obj, config.d_feat))
        omask[b, :n_obj] = 1.0
    y = np.array([b % 2 for b in range(batch_size)], dtype=float) if labels else None
    return Batch(ids, tmask, PaddedImageBatch(boxes, feats, omask), y)


def randomize_parameters(model: Matcher, rng: np.random.Generator, std: float = 0.5) -> None:
    """Replace every parameter with N(0, std) draws so that all paths carry signal."""
    for name, p in model.param_dict().items():
        p.value[...] = rng.normal(0.0, std, size=p.shape)
    if isinstance(model, DualEncoder):
        model.logit_scale.value[...] = 1.0


def model_gradcheck(
    model: Matcher,
    batch: Batch,
    max_per_param: int | None = None,
    seed: int = 0,
) -> tuple[float, str]:
    """Max relative finite-difference error of the training loss over all parameters.

    Returns ``(error, name of the worst parameter)``.
    """
    model.zero_grad()
    loss_and_backward(model, batch)
    params = model.param_dict()
    analytic = {n: p.grad.copy() for n, p in params.items()}
    rng = np.random.default_rng(seed)
    worst, worst_name = 0.0, ""
    fn = lambda: loss_only(model, batch)  # noqa: E731
    for name, p in params.items():
        err = F.grad_check(fn, [p.value], [analytic[name]], max_per_input=max_per_param, rng=rng)
        if err > worst:
            worst, worst_name = float(err), name
    return worst, worst_name


def gradcheck_kind(kind: str, config: ModelConfig | None = None, batch_size: int = 3, seed: int = 0, max_per_param: int | None = None) -> tuple[float, str]:
    config = config or ModelConfig(seed=seed, **TINY_CONFIG)
    rng = np.random.default_rng(seed)
    model = build_model(kind, config)
    randomize_parameters(model, rng)
    batch = random_batch(config, batch_size, rng)
    return model_gradcheck(model, batch, max_per_param=max_per_param, seed=seed)
