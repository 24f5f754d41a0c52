"""The joint network: classification and translation branches over shared features.

``joint=False`` gives the translation-only baseline (EDNet): the
classification term is dropped from the loss and the TCN is never updated.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from .data import Corpus, Vocabulary, build_vocab, encode_command, extract_action, mean_feature, pad_features
from .numerics import Adam, Parameter, Tensor, add, backward, mean, mul, no_grad
from .recurrent import RnnState, uniform_state
from .tcn import DESK_FILTERS, TcnParams, classify, cls_loss, init_tcn, tcn_forward
from .translator import (
    FEEDING_MODES,
    TranslatorParams,
    assemble_command,
    cut_at_eoc,
    decode_train,
    encode_steps,
    greedy_indices,
    init_translator,
    trans_loss,
)

log = logging.getLogger(__name__)

# independent random streams derived from the master seed
STREAM_ENCODER = 1
STREAM_DECODER = 2
STREAM_PROJECTION = 3
STREAM_TCN = 4
STREAM_SHUFFLE = 5
STREAM_INITIAL_STATE = 6


def stream(seed: int, which: int) -> np.random.Generator:
    return np.random.default_rng([seed, which])


class TrainingError(ValueError):
    pass


@dataclass
class ModelConfig:
    n: int = 30
    hidden: int = 64
    cell: str = "lstm"
    feature_dim: int = 0
    classes: int = 0
    joint: bool = True
    epochs: int = 300
    batch_size: int = 16
    lr: float = 1e-4
    seed: int = 0
    inference_feeding: str = "zeros"
    cls_loss_kind: str = "sigmoid"
    cls_weight: float = 1.0
    tcn_filters: tuple[int, int, int] = DESK_FILTERS
    fc_width: int = 256
    initial_state: str = "zero"

    def __post_init__(self):
        self.tcn_filters = tuple(int(f) for f in self.tcn_filters)
        self.validate()

    def validate(self) -> None:
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.hidden < 1:
            raise ValueError("hidden must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.cell not in ("lstm", "gru"):
            raise ValueError(f"cell must be lstm or gru, got {self.cell!r}")
        if self.inference_feeding not in FEEDING_MODES:
            raise ValueError(f"inference_feeding must be one of {FEEDING_MODES}")
        if self.cls_loss_kind not in ("sigmoid", "softmax"):
            raise ValueError("cls_loss_kind must be sigmoid or softmax")
        if self.initial_state not in ("zero", "uniform"):
            raise ValueError("initial_state must be zero or uniform")
        if len(self.tcn_filters) != 3:
            raise ValueError("tcn_filters needs three filter counts")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tcn_filters"] = list(self.tcn_filters)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)


@dataclass
class LossTerms:
    total: Tensor
    cls: Tensor
    trans: Tensor


@dataclass
class Batch:
    """Padded features (B, n, d), word indices and mask (B, n), class labels (B,)."""

    features: np.ndarray
    words: np.ndarray
    mask: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, idx) -> "Batch":
        return Batch(self.features[idx], self.words[idx], self.mask[idx], self.labels[idx])


@dataclass
class Prediction:
    command: str
    action: str
    truncated: bool
    action_from_command: str
    action_from_classifier: str


class V2CNet:
    def __init__(self, config: ModelConfig, vocab: Vocabulary, classes: Sequence[str],
                 mean_frame: np.ndarray):
        if config.classes != len(classes):
            raise ValueError(f"config.classes={config.classes} but {len(classes)} class names given")
        mean_frame = np.asarray(mean_frame, dtype=np.float64).reshape(-1)
        if mean_frame.size != config.feature_dim:
            raise ValueError(f"mean frame has {mean_frame.size} dims, feature_dim={config.feature_dim}")
        self.config = config
        self.vocab = vocab
        self.classes = list(classes)
        self.mean_frame = mean_frame
        seed = config.seed
        self.tcn: TcnParams = init_tcn(config.n, config.feature_dim, config.classes,
                                       stream(seed, STREAM_TCN), config.tcn_filters,
                                       config.fc_width, prefix="tcn.")
        self.translator: TranslatorParams = init_translator(
            config.feature_dim, config.hidden, len(vocab), config.cell,
            stream(seed, STREAM_ENCODER), stream(seed, STREAM_DECODER),
            stream(seed, STREAM_PROJECTION), prefix="translator.")
        self.initial: tuple[RnnState, RnnState] | tuple[None, None] = (None, None)
        if config.initial_state == "uniform":
            rng = stream(seed, STREAM_INITIAL_STATE)
            self.initial = (uniform_state(self.translator.encoder, rng),
                            uniform_state(self.translator.decoder, rng))

    def parameters(self) -> dict[str, Parameter]:
        out = {f"tcn.{k}": v for k, v in self.tcn.named().items()}
        out.update({f"translator.{k}": v for k, v in self.translator.named().items()})
        return out

    def trainable(self) -> dict[str, Parameter]:
        if self.config.joint:
            return self.parameters()
        return {f"translator.{k}": v for k, v in self.translator.named().items()}

    # -- training -----------------------------------------------------------

    def forward_loss(self, batch: Batch) -> LossTerms:
        """``L = mean_b(w * L_cls + L_trans)`` with ``w = config.cls_weight`` (1 by default)."""
        if len(batch) == 0:
            raise ValueError("forward_loss: empty batch")
        X = Tensor(batch.features)
        h_e = encode_steps(X, self.translator, self.initial[0])
        logits = decode_train(h_e, batch.words, self.translator, self.vocab.empty_index,
                              self.initial[1])
        l_trans = trans_loss(logits, batch.words, batch.mask)
        if self.config.joint:
            l_cls = cls_loss(tcn_forward(X, self.tcn), batch.labels, self.config.cls_loss_kind)
            per_clip = add(mul(l_cls, self.config.cls_weight), l_trans)
            cls_mean = mean(l_cls)
        else:
            per_clip = l_trans
            cls_mean = Tensor(0.0, op="const")
        return LossTerms(mean(per_clip), cls_mean, mean(l_trans))

    # -- inference ----------------------------------------------------------

    def prepare(self, frames: np.ndarray) -> np.ndarray:
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[1] != self.config.feature_dim:
            raise ValueError(f"features have shape {frames.shape}, model expects (T, {self.config.feature_dim})")
        return pad_features(frames, self.config.n, self.mean_frame)

    def infer_batch(self, clips: Sequence[np.ndarray]) -> list[Prediction]:
        X = np.stack([self.prepare(f) for f in clips])
        with no_grad():
            h_e = encode_steps(Tensor(X), self.translator, self.initial[0])
            words = greedy_indices(h_e, self.translator, self.vocab.empty_index,
                                   self.config.inference_feeding, self.initial[1])
            cls_idx = np.atleast_1d(classify(tcn_forward(Tensor(X), self.tcn)))
        out = []
        for row, c in zip(words, cls_idx):
            command, truncated = assemble_command(cut_at_eoc(row, self.vocab)[0])
            from_cmd = extract_action(command)
            from_cls = self.classes[int(c)]
            action = from_cls if self.config.joint else from_cmd
            out.append(Prediction(command, action, truncated, from_cmd, from_cls))
        return out

    def infer(self, frames: np.ndarray) -> Prediction:
        return self.infer_batch([frames])[0]


# ---------------------------------------------------------------------------
# datasets and the training loop


def make_batch(corpus: Corpus, vocab: Vocabulary, classes: Sequence[str], n: int,
               mean_frame: np.ndarray) -> Batch:
    class_index = {c: i for i, c in enumerate(classes)}
    X = np.stack([pad_features(f, n, mean_frame) for f in corpus.features])
    seqs = [encode_command(r.command, vocab, n) for r in corpus.records]
    labels = np.array([class_index.get(r.action, -1) for r in corpus.records], dtype=np.int64)
    return Batch(X, np.stack([s.indices for s in seqs]), np.stack([s.mask for s in seqs]), labels)


@dataclass
class EpochLoss:
    epoch: int
    total: float
    cls: float
    trans: float


@dataclass
class Checkpoint:
    model: V2CNet
    optimizer: Adam
    epoch: int
    rng_state: dict


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[EpochLoss] = field(default_factory=list)


def new_model(corpus: Corpus, config: ModelConfig) -> V2CNet:
    """Vocabulary, class list and mean frame come from ``corpus`` (the training set)."""
    if len(corpus) == 0:
        raise TrainingError("training set is empty")
    vocab = build_vocab(r.command for r in corpus.records)
    classes = sorted({r.action for r in corpus.records})
    mean_frame = corpus.mean_frame if corpus.mean_frame is not None else mean_feature(corpus.features)
    config.feature_dim = corpus.feature_dim
    config.classes = len(classes)
    return V2CNet(config, vocab, classes, mean_frame)


def train(corpus: Corpus, config: ModelConfig, resume: Checkpoint | None = None,
          on_epoch: Callable[[EpochLoss], None] | None = None) -> TrainResult:
    """Mini-batch Adam on the joint loss for ``config.epochs`` epochs in total.

    With ``resume`` the model, optimizer moments, epoch counter and shuffle
    stream are restored and training continues from the saved epoch.
    """
    if len(corpus) == 0:
        raise TrainingError("training set is empty")
    if resume is None:
        model = new_model(corpus, config)
        optimizer = Adam(model.trainable(), lr=config.lr)
        shuffler = stream(config.seed, STREAM_SHUFFLE)
        start = 0
    else:
        model, optimizer, start = resume.model, resume.optimizer, resume.epoch
        model.config.epochs = config.epochs
        config = model.config
        shuffler = np.random.default_rng()
        shuffler.bit_generator.state = resume.rng_state
    if corpus.feature_dim != config.feature_dim:
        raise TrainingError(f"features have {corpus.feature_dim} dims, model expects {config.feature_dim}")
    data = make_batch(corpus, model.vocab, model.classes, config.n, model.mean_frame)
    N = len(data)
    history = []
    for epoch in range(start, config.epochs):
        order = shuffler.permutation(N)
        sums = np.zeros(3)
        for lo in range(0, N, config.batch_size):
            batch = data.take(order[lo:lo + config.batch_size])
            optimizer.zero_grad()
            terms = model.forward_loss(batch)
            backward(terms.total)
            optimizer.step()
            sums += len(batch) * np.array([terms.total.item(), terms.cls.item(), terms.trans.item()])
        total, c, t = sums / N
        if not np.isfinite(total):
            raise TrainingError(f"loss became non-finite at epoch {epoch + 1}")
        rec = EpochLoss(epoch + 1, float(total), float(c), float(t))
        history.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        log.debug("epoch %d loss %.6f (cls %.6f, trans %.6f)", rec.epoch, rec.total, rec.cls, rec.trans)
    ckpt = Checkpoint(model, optimizer, max(start, config.epochs), shuffler.bit_generator.state)
    return TrainResult(ckpt, history)
