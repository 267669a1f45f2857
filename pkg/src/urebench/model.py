"""Residual classifiers: deterministic ResNet blocks and their stochastic
(Euler-Maruyama discretised neural SDE) counterpart."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ResidualNetConfig:
    n_classes: int
    n_blocks: int = 4
    channels: int = 16
    stochastic: bool = False
    sde_sigma: float = 0.1
    dt: float = 1.0
    mc_samples: int = 8
    train_noise: bool = True
    image_h: int = 64
    image_w: int = 64
    init_seed: int = 0

    def __post_init__(self):
        if self.n_classes < 1:
            raise ValueError("n_classes must be >= 1")
        if self.n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")
        if self.channels < 1:
            raise ValueError("channels must be >= 1")
        if self.sde_sigma < 0:
            raise ValueError("sde_sigma must be >= 0")
        if not self.dt > 0:
            raise ValueError("dt must be > 0")
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Block:
    conv1_w: Parameter
    conv1_b: Parameter
    conv2_w: Parameter
    conv2_b: Parameter

    def params(self):
        return [self.conv1_w, self.conv1_b, self.conv2_w, self.conv2_b]


def _he(rng, shape, fan_in):
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


@dataclass
class ResidualNet:
    config: ResidualNetConfig
    stem_w: Parameter = field(init=False)
    stem_b: Parameter = field(init=False)
    blocks: list = field(init=False)
    head_w: Parameter = field(init=False)
    head_b: Parameter = field(init=False)

    def __post_init__(self):
        cfg = self.config
        rng = np.random.default_rng(cfg.init_seed)
        c = cfg.channels
        self.stem_w = Parameter(_he(rng, (c, 1, 3, 3), 9), "stem.w")
        self.stem_b = Parameter(np.zeros(c), "stem.b")
        self.blocks = []
        for i in range(cfg.n_blocks):
            # second conv starts at zero: every block is initially the identity map
            self.blocks.append(Block(
                Parameter(_he(rng, (c, c, 3, 3), 9 * c), f"block{i}.conv1.w"),
                Parameter(np.zeros(c), f"block{i}.conv1.b"),
                Parameter(np.zeros((c, c, 3, 3)), f"block{i}.conv2.w"),
                Parameter(np.zeros(c), f"block{i}.conv2.b"),
            ))
        self.head_w = Parameter(rng.normal(0.0, 1e-3, size=(c, cfg.n_classes)), "head.w")
        self.head_b = Parameter(np.zeros(cfg.n_classes), "head.b")

    def parameters(self) -> list[Parameter]:
        out = [self.stem_w, self.stem_b]
        for b in self.blocks:
            out.extend(b.params())
        return out + [self.head_w, self.head_b]

    def state_dict(self) -> dict:
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state_dict(self, state: dict) -> None:
        for p in self.parameters():
            if p.name not in state:
                raise KeyError(f"missing parameter {p.name!r}")
            arr = np.asarray(state[p.name], dtype=ad.DTYPE)
            if arr.shape != p.data.shape:
                raise ValueError(f"{p.name}: shape {arr.shape} != {p.data.shape}")
            p.tensor.data = arr.copy()

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    @property
    def noise_active(self) -> bool:
        return self.config.stochastic and self.config.sde_sigma > 0


def residual_map(x: Tensor, block: Block) -> Tensor:
    h = ad.relu(ad.conv2d(x, block.conv1_w.tensor, block.conv1_b.tensor))
    return ad.conv2d(h, block.conv2_w.tensor, block.conv2_b.tensor)


def block_forward(x: Tensor, block: Block, config: ResidualNetConfig, rng=None, shared_noise: bool = False) -> Tensor:
    """One residual step ``x + dt R(x)``, plus ``sigma sqrt(dt) xi`` when ``rng`` is given.

    With ``shared_noise`` a single noise draw is broadcast over the batch.
    """
    if x.data.ndim != 4 or x.shape[1] != block.conv1_w.data.shape[1]:
        raise ValueError(f"block expects [N,{block.conv1_w.data.shape[1]},H,W], got {x.shape}")
    out = ad.add(x, ad.mul(residual_map(x, block), config.dt))
    if rng is not None and config.stochastic and config.sde_sigma > 0:
        shape = (1,) + x.shape[1:] if shared_noise else x.shape
        xi = rng.standard_normal(shape, dtype=ad.DTYPE)
        out = ad.add(out, config.sde_sigma * math.sqrt(config.dt) * xi)
    return out


def _as_batch(net: ResidualNet, x) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=ad.DTYPE))
    if t.data.ndim == 3:
        t = ad.reshape(t, (1,) + t.shape)
    cfg = net.config
    if t.data.ndim != 4 or t.shape[1:] != (1, cfg.image_h, cfg.image_w):
        raise ValueError(f"expected images of shape [N,1,{cfg.image_h},{cfg.image_w}], got {t.shape}")
    return t


def forward_pass(net: ResidualNet, x, rng=None, shared_noise: bool = False, capture: list | None = None) -> Tensor:
    """Single pass; block noise is drawn from ``rng`` when given and the net is stochastic.

    ``capture`` receives the stem output followed by every block output.
    """
    t = _as_batch(net, x)
    h = ad.relu(ad.conv2d(t, net.stem_w.tensor, net.stem_b.tensor))
    if capture is not None:
        capture.append(h)
    for block in net.blocks:
        h = block_forward(h, block, net.config, rng, shared_noise)
        if capture is not None:
            capture.append(h)
    return ad.dense(ad.global_avg_pool(h), net.head_w.tensor, net.head_b.tensor)


def pass_rng(seed: int, index: int) -> np.random.Generator:
    """Noise source for Monte-Carlo pass ``index`` under ``seed``."""
    return np.random.default_rng([seed, index])


def forward(net: ResidualNet, x, mode: str = "eval", seed: int = 0, shared_noise: bool = False) -> Tensor:
    """Logits for a batch.

    train: one pass with block noise if ``train_noise`` is set.
    eval: stochastic nets average ``mc_samples`` noisy passes, pass k drawing
    noise from ``pass_rng(seed, k)``; deterministic nets run one clean pass.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    cfg = net.config
    if not net.noise_active:
        return forward_pass(net, x)
    if mode == "train":
        rng = pass_rng(seed, 0) if cfg.train_noise else None
        return forward_pass(net, x, rng, shared_noise)
    total = None
    for k in range(cfg.mc_samples):
        logits = forward_pass(net, x, pass_rng(seed, k), shared_noise)
        total = logits if total is None else ad.add(total, logits)
    return ad.mul(total, 1.0 / cfg.mc_samples) if cfg.mc_samples > 1 else total


def eval_logits(net: ResidualNet, images: np.ndarray, seed: int = 0, batch_size: int = 64) -> np.ndarray:
    """Eval-mode logits, batched; batch ``i`` uses noise seed ``(seed, i)``."""
    images = np.asarray(images, dtype=ad.DTYPE)
    if images.ndim == 3:
        images = images[:, None]
    out = []
    for i, start in enumerate(range(0, len(images), batch_size)):
        out.append(forward(net, images[start:start + batch_size], "eval", seed=_mix(seed, i)).data)
    return np.concatenate(out, axis=0)


def _mix(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def predict(net: ResidualNet, images, seed: int = 0, batch_size: int = 64):
    """Labels and softmax scores; ties resolve to the lower class index."""
    logits = eval_logits(net, images, seed, batch_size)
    return np.argmax(logits, axis=1), ad.softmax(logits.astype(np.float64))


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    accuracy: float


def train(net: ResidualNet, images, labels, epochs: int, batch_size: int = 32, lr: float = 1e-3,
          seed: int = 0, progress=None) -> list[EpochRecord]:
    """Shuffled mini-batch Adam on softmax cross-entropy.

    Entry 0 of the log is the loss/accuracy of the untrained net on the whole
    training set; entries 1..epochs are means over that epoch's mini-batches.
    """
    images = np.asarray(images, dtype=ad.DTYPE)
    labels = np.asarray(labels, dtype=np.int64)
    if images.ndim == 3:
        images = images[:, None]
    if len(images) == 0:
        raise ValueError("training set is empty")
    if len(images) != len(labels):
        raise ValueError(f"{len(images)} images but {len(labels)} labels")
    if labels.min() < 0 or labels.max() >= net.config.n_classes:
        raise ValueError(f"labels must lie in [0, {net.config.n_classes})")

    rng = np.random.default_rng(seed)
    params = net.parameters()
    history = [_initial_record(net, images, labels, batch_size, seed)]
    step = 0
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(images))
        losses, correct = [], 0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            logits = forward(net, images[idx], "train", seed=_mix(seed, step))
            loss = ad.softmax_cross_entropy(logits, labels[idx])
            ad.backward(loss)
            ad.adam_step(params, lr)
            losses.append(loss.item() * len(idx))
            correct += int((np.argmax(logits.data, axis=1) == labels[idx]).sum())
            step += 1
        rec = EpochRecord(epoch, float(sum(losses) / len(images)), correct / len(images))
        history.append(rec)
        log.info("epoch %d loss %.4f acc %.4f", rec.epoch, rec.loss, rec.accuracy)
        if progress is not None:
            progress(rec)
    return history


def _initial_record(net, images, labels, batch_size, seed) -> EpochRecord:
    total, correct = 0.0, 0
    for start in range(0, len(images), batch_size):
        sl = slice(start, start + batch_size)
        logits = forward(net, images[sl], "train", seed=_mix(seed, 1_000_000_000 + start))
        total += ad.softmax_cross_entropy(logits, labels[sl]).item() * len(labels[sl])
        correct += int((np.argmax(logits.data, axis=1) == labels[sl]).sum())
    return EpochRecord(0, total / len(images), correct / len(images))


def write_training_log(history, path) -> None:
    lines = ["epoch,loss,accuracy"]
    lines += [f"{r.epoch},{r.loss:.6f},{r.accuracy:.6f}" for r in history]
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def save(net: ResidualNet, path, config_digest: str) -> None:
    ad.save_checkpoint(path, net.state_dict(), config_digest)


def load(path, config: ResidualNetConfig) -> tuple[ResidualNet, str]:
    digest, state = ad.load_checkpoint(path)
    net = ResidualNet(config)
    net.load_state_dict(state)
    return net, digest
