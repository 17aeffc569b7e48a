"""EM training of the clean-label and transition networks, plus baselines.

ANTN treats the clean label of every pixel as latent. The E-step forms
posteriors from the current networks; the M-step takes posterior-weighted
gradient steps. The transition network of source ``s`` is trained with the
single-source posterior, the clean network with the joint one.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import numerics as nx
from .errors import ConfigError
from .metrics import clean_noisy_ratio, cross_entropy_curve
from .segnets import (
    CleanNet,
    CleanReadout,
    MiniUNetSpec,
    TransitionNet,
    TransitionReadout,
    transition_head_bias,
)

log = logging.getLogger(__name__)

METRIC_COLUMNS = (
    "epoch",
    "phase",
    "L1",
    "L2",
    "L3",
    "ce_clean",
    "ce_noisy1",
    "ce_noisy2",
    "R1",
    "R2",
    "lr",
)


@dataclass
class TrainConfig:
    num_classes: int = 4
    base_filters: int = 16
    epochs_init_clean: int = 100
    epochs_transition: int = 200
    epochs_alternate: int = 200
    alternate_interval: int = 10
    epochs_direct: int = 200
    epochs_ntn: int = 150
    lr_main: float = 1e-4
    lr_final: float = 1e-5
    lr_drop_epoch: int = 450
    batch_size: int = 1
    seed: int = 0
    readout_mode: str = "row-softmax"
    optimizer: str = "sgd"
    transition_diag_logit: float = 0.0
    transition_lr_scale: float = 1.0
    ntn_weight_decay: float = 1e-3
    ntn_diag_logit: float = 6.0
    log_every: int = 1

    def __post_init__(self):
        for f in ("epochs_init_clean", "epochs_transition", "epochs_alternate", "epochs_direct", "epochs_ntn"):
            if getattr(self, f) < 0:
                raise ConfigError(f"{f} must be >= 0")
        if self.lr_main <= 0 or self.lr_final <= 0 or self.transition_lr_scale <= 0:
            raise ConfigError("learning rates must be > 0")
        if self.alternate_interval < 1:
            raise ConfigError("alternate_interval must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.log_every < 1:
            raise ConfigError("log_every must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.readout_mode not in ("row-softmax", "uniform-remainder"):
            raise ConfigError(f"unknown readout mode {self.readout_mode!r}")

    @property
    def net_spec(self) -> MiniUNetSpec:
        return MiniUNetSpec(base_filters=self.base_filters, num_classes=self.num_classes)

    def lr_at(self, epoch: int) -> float:
        return self.lr_main if epoch < self.lr_drop_epoch else self.lr_final


@dataclass
class Dataset:
    """Training images with one or two noisy label sets and optional clean references."""

    images: List[np.ndarray]
    noisy1: List[np.ndarray]
    noisy2: Optional[List[np.ndarray]] = None
    clean: Optional[List[np.ndarray]] = None

    def __post_init__(self):
        n = len(self.images)
        for name in ("noisy1", "noisy2", "clean"):
            v = getattr(self, name)
            if v is not None and len(v) != n:
                raise ConfigError(f"{name} has {len(v)} maps for {n} images")

    def __len__(self) -> int:
        return len(self.images)


class NtnTransitionLayer:
    """Global C x C transition matrix, row-softmax over a logit table."""

    def __init__(self, num_classes: int, diag_logit: float = 6.0):
        self.num_classes = num_classes
        self.params = nx.ParamStore()
        self.params.add("Q.logits", diag_logit * np.eye(num_classes))

    @property
    def matrix(self) -> np.ndarray:
        return nx.softmax_over_axis(self.params["Q.logits"], self.num_classes)

    def compose(self, p: np.ndarray) -> np.ndarray:
        """``q(k) = sum_y Q[y, k] p(y)`` per pixel."""
        return p @ self.matrix

    def decay(self, weight_decay: float) -> None:
        """Add the gradient of ``(wd/2) * ||logits||^2``."""
        self.params.accumulate("Q.logits", weight_decay * self.params["Q.logits"])


@dataclass
class ModelCheckpoint:
    """Trained networks of one run.

    ``nets`` maps role to network: ``clean`` always; ``trans1``/``trans2``
    for ANTN; ``ntn`` (an :class:`NtnTransitionLayer`) for NTN.
    """

    method: str
    spec: MiniUNetSpec
    nets: Dict[str, object]
    readout_mode: str = "row-softmax"

    @property
    def clean(self) -> CleanNet:
        return self.nets["clean"]


# -- E-step ------------------------------------------------------------------


@dataclass
class EStepStats:
    fallbacks: int = 0


def _normalise(joint: np.ndarray, prior: np.ndarray, stats: Optional[EStepStats]) -> np.ndarray:
    den = joint.sum(axis=-1, keepdims=True)
    bad = ~(den > 0)
    if np.any(bad):
        if stats is not None:
            stats.fallbacks += int(np.count_nonzero(bad))
        joint = np.where(bad, prior, joint)
        den = np.where(bad, prior.sum(axis=-1, keepdims=True), den)
    return joint / den


def e_step_single(clean: np.ndarray, column: np.ndarray, stats: Optional[EStepStats] = None) -> np.ndarray:
    """Posterior ``Pr(y | observed noisy label, X)`` from one source.

    ``column[..., y]`` is ``Pr(observed | y, X)``. Pixels whose products all
    underflow fall back to the clean prior and are counted in ``stats``.
    """
    return _normalise(column * clean, clean, stats)


def e_step_joint(
    clean: np.ndarray, col1: np.ndarray, col2: np.ndarray, stats: Optional[EStepStats] = None
) -> np.ndarray:
    """Posterior given both observed noisy labels."""
    return _normalise(col1 * col2 * clean, clean, stats)


def marginal_log_likelihood(
    clean: np.ndarray, col1: np.ndarray, col2: Optional[np.ndarray] = None, which: str = "L3"
) -> float:
    """Per-pixel mean log marginal likelihood ``L1``, ``L2`` or ``L3``.

    For ``L1``/``L2`` pass the column of that source as ``col1``.
    """
    if which in ("L1", "L2"):
        m = (col1 * clean).sum(axis=-1)
    elif which == "L3":
        if col2 is None:
            raise ConfigError("L3 needs both sources")
        m = (col1 * col2 * clean).sum(axis=-1)
    else:
        raise ConfigError(f"unknown likelihood {which!r}")
    return float(np.mean(np.log(np.maximum(m, nx.LOG_CLAMP))))


# -- M-step ------------------------------------------------------------------


def _as_batch(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    return image[None] if image.ndim == 3 else image


def _as_label_batch(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    return labels[None] if labels.ndim == 2 else labels


def _step(store: nx.ParamStore, lr: float, optimizer) -> None:
    if optimizer is None:
        nx.sgd_step(store, lr)
    else:
        optimizer.step(lr)


def m_step_transition(net, image, noisy, posterior, lr: float, optimizer=None) -> float:
    """One gradient step on ``-(1/N) sum post * log Pr(observed | y, X)``.

    ``posterior`` is treated as a constant. Returns the loss before the step.
    """
    x = _as_batch(image)
    noisy = _as_label_batch(noisy)
    posterior = np.asarray(posterior).reshape(noisy.shape + (net.num_classes,))
    net.params.zero_grad()
    loss, g = net.column_nll(net.forward(x), noisy, posterior)
    net.backward(g)
    _step(net.params, lr, optimizer)
    return float(loss)


def m_step_clean(net, image, posterior, lr: float, optimizer=None) -> float:
    """One gradient step on the posterior-weighted cross entropy of the clean net."""
    x = _as_batch(image)
    net.params.zero_grad()
    p = net.probabilities(net.forward(x))
    loss, g = nx.weighted_cross_entropy(p, np.asarray(posterior).reshape(p.shape))
    net.backward(g)
    _step(net.params, lr, optimizer)
    return float(loss)


def transition_loss(net, image, noisy, posterior) -> float:
    return float(net.column_nll(net.forward(_as_batch(image)), _as_label_batch(noisy), posterior)[0])


def clean_loss(net, image, posterior) -> float:
    p = net.probabilities(net.forward(_as_batch(image)))
    return float(nx.weighted_cross_entropy(p, np.asarray(posterior).reshape(p.shape))[0])


# -- bare logit tables (toy EM) ------------------------------------------------


class LogitTable:
    """Image-independent logits broadcast over a 1 x H x W grid."""

    def __init__(self, values: np.ndarray, shape=(1, 1)):
        self.params = nx.ParamStore()
        self.params.add("table", np.asarray(values, dtype=np.float64))
        self.shape = shape

    def forward(self, x: np.ndarray) -> np.ndarray:
        return np.broadcast_to(self.params["table"], (1,) + tuple(self.shape) + self.params["table"].shape).copy()

    def backward(self, g: np.ndarray) -> None:
        self.params.accumulate("table", g.reshape(-1, g.shape[-1]).sum(axis=0))


class CleanTable(CleanReadout, LogitTable):
    def __init__(self, num_classes: int, values=None):
        super().__init__(np.zeros(num_classes) if values is None else values)
        self.num_classes = num_classes


class TransitionTable(TransitionReadout, LogitTable):
    def __init__(self, num_classes: int, readout_mode: str = "row-softmax", values=None):
        if values is None:
            values = transition_head_bias(readout_mode, num_classes)
        super().__init__(values)
        self.num_classes = num_classes
        self.readout_mode = readout_mode


def toy_em(
    num_classes: int,
    observed: Sequence[int],
    lr: float = 0.1,
    cycles: int = 200,
    readout_mode: str = "row-softmax",
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """EM on a single pixel whose three "networks" are bare logit tables.

    Each cycle takes one E/M step per transition table against its observed
    label, then one joint-posterior step on the clean table. Returns L3
    before the first cycle and after each one.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    c = num_classes
    clean = CleanTable(c, rng.normal(size=c))
    width = c * c if readout_mode == "row-softmax" else c
    trans = [TransitionTable(c, readout_mode, rng.normal(size=width)) for _ in range(2)]
    obs = [np.full((1, 1, 1), int(o)) for o in observed]
    x = np.zeros((1, 1, 1, 1))

    def columns():
        return [t.column(t.forward(x), o) for t, o in zip(trans, obs)]

    def l3():
        return marginal_log_likelihood(clean.probabilities(clean.forward(x)), *columns())

    history = [l3()]
    for _ in range(cycles):
        prior = clean.probabilities(clean.forward(x))
        for t, o in zip(trans, obs):
            m_step_transition(t, x, o, e_step_single(prior, t.column(t.forward(x), o)), lr)
        prior = clean.probabilities(clean.forward(x))
        m_step_clean(clean, x, e_step_joint(prior, *columns()), lr)
        history.append(l3())
    return np.array(history)


# -- training loops --------------------------------------------------------------


def _batches(n: int, size: int, rng: np.random.Generator) -> List[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + size] for i in range(0, n, size)]


def _stack(items: Sequence[np.ndarray], idx) -> np.ndarray:
    return np.stack([items[i] for i in idx])


def _init_rng(seed: int, role: int) -> np.random.Generator:
    return np.random.default_rng([seed, role])


def new_clean_net(cfg: TrainConfig) -> CleanNet:
    return CleanNet(cfg.net_spec, _init_rng(cfg.seed, 3))


def new_transition_net(cfg: TrainConfig, source: int) -> TransitionNet:
    return TransitionNet(
        cfg.net_spec, cfg.readout_mode, _init_rng(cfg.seed, source), diag_logit=cfg.transition_diag_logit
    )


def _label_sets(dataset: Dataset) -> List[List[np.ndarray]]:
    return [s for s in (dataset.noisy1, dataset.noisy2) if s is not None]


def _direct_epochs(
    net: CleanNet,
    opt,
    images: Sequence[np.ndarray],
    label_sets: Sequence[Sequence[np.ndarray]],
    cfg: TrainConfig,
    epochs: int,
    rng: np.random.Generator,
    epoch0: int = 0,
    on_epoch=None,
) -> None:
    # mixture training duplicates each image once per label set
    pairs = [(i, s) for s in range(len(label_sets)) for i in range(len(images))]
    for e in range(epochs):
        lr = cfg.lr_at(epoch0 + e)
        for idx in _batches(len(pairs), cfg.batch_size, rng):
            x = np.stack([images[pairs[j][0]] for j in idx])
            y = np.stack([label_sets[pairs[j][1]][pairs[j][0]] for j in idx])
            m_step_clean(net, x, nx.one_hot(y, cfg.num_classes), lr, opt)
        if on_epoch is not None:
            on_epoch(epoch0 + e, lr, net)


def train_unet_direct(
    images: Sequence[np.ndarray],
    label_sets: Sequence[Sequence[np.ndarray]],
    cfg: TrainConfig,
    epochs: Optional[int] = None,
    on_epoch=None,
) -> ModelCheckpoint:
    """Cross-entropy training of a clean net on noisy labels taken as truth.

    With several label sets this is the mixture baseline: each image appears
    once with each set in every epoch. ``on_epoch(epoch, lr, net)`` runs
    after every epoch.
    """
    if not label_sets:
        raise ConfigError("need at least one label set")
    net = new_clean_net(cfg)
    if epochs is None:
        epochs = cfg.epochs_direct if len(label_sets) == 1 else cfg.epochs_init_clean
    opt = nx.make_optimizer(cfg.optimizer, net.params)
    _direct_epochs(net, opt, images, label_sets, cfg, epochs, _init_rng(cfg.seed, 10), on_epoch=on_epoch)
    return ModelCheckpoint("unet", cfg.net_spec, {"clean": net})


def train_ntn(
    images: Sequence[np.ndarray],
    labels: Sequence[np.ndarray],
    cfg: TrainConfig,
    base: Optional[CleanNet] = None,
    on_epoch=None,
) -> ModelCheckpoint:
    """NTN baseline: direct training, then a global transition layer on top.

    Stage two minimises the cross entropy of ``q = p Q`` against the noisy
    labels jointly in the clean net and ``Q``, with L2 decay on Q's logits
    pulling it away from its near-identity start. ``base`` skips stage one.
    """
    if base is None:
        net = train_unet_direct(images, [labels], cfg, on_epoch=on_epoch).clean
    else:
        net = copy_net(base)
    layer = NtnTransitionLayer(cfg.num_classes, cfg.ntn_diag_logit)
    opt_net = nx.make_optimizer(cfg.optimizer, net.params)
    opt_q = nx.make_optimizer(cfg.optimizer, layer.params)
    rng = _init_rng(cfg.seed, 11)
    epoch0 = cfg.epochs_direct
    for e in range(cfg.epochs_ntn):
        lr = cfg.lr_at(epoch0 + e)
        for idx in _batches(len(images), cfg.batch_size, rng):
            ntn_step(net, layer, _stack(images, idx), _stack(labels, idx), lr, cfg.ntn_weight_decay, opt_net, opt_q)
        if on_epoch is not None:
            on_epoch(epoch0 + e, lr, net)
    return ModelCheckpoint("ntn", cfg.net_spec, {"clean": net, "ntn": layer})


def ntn_loss_grad(p: np.ndarray, q_matrix: np.ndarray, labels: np.ndarray):
    """Loss ``-(1/N) sum log q(obs)`` with gradients for the clean logits and Q."""
    c = q_matrix.shape[0]
    n = labels.size
    q = p @ q_matrix
    q_obs = np.maximum(np.take_along_axis(q, labels[..., None], axis=-1)[..., 0], nx.LOG_CLAMP)
    loss = -float(np.mean(np.log(q_obs)))
    cols = q_matrix[:, labels].transpose(*range(1, labels.ndim + 1), 0)  # Q[y, obs] per pixel
    g_p = -cols / q_obs[..., None] / n
    g_logits = nx.softmax_backward(p, g_p, c)
    oh = nx.one_hot(labels, c)
    g_q = -(p / q_obs[..., None]).reshape(-1, c).T @ oh.reshape(-1, c) / n
    g_qlogits = nx.softmax_backward(q_matrix, g_q, c)
    return loss, g_logits, g_qlogits


def ntn_step(net, layer: NtnTransitionLayer, x, labels, lr, weight_decay, opt_net=None, opt_q=None) -> float:
    net.params.zero_grad()
    layer.params.zero_grad()
    p = net.probabilities(net.forward(x))
    loss, g_logits, g_q = ntn_loss_grad(p, layer.matrix, labels)
    net.backward(g_logits)
    layer.params.accumulate("Q.logits", g_q)
    layer.decay(weight_decay)
    _step(net.params, lr, opt_net)
    _step(layer.params, lr, opt_q)
    return loss


def copy_net(net):
    other = object.__new__(type(net))
    other.__dict__.update(net.__dict__)
    other.params = net.params.copy()
    other._cache = {}
    return other


@dataclass
class TrainResult:
    checkpoint: ModelCheckpoint
    log: List[dict] = field(default_factory=list)
    phase_a: Optional[CleanNet] = None
    estep: EStepStats = field(default_factory=EStepStats)


def _predict_all(net, images, chunk: int = 8) -> List[np.ndarray]:
    out = []
    for i in range(0, len(images), chunk):
        out.extend(net.forward(np.stack(images[i : i + chunk])))
    return out


def epoch_metrics(clean_net, trans, dataset: Dataset, stats: Optional[EStepStats] = None) -> dict:
    """Training-set likelihoods, cross entropies and clean/noisy ratios."""
    probs = [clean_net.probabilities(l) for l in _predict_all(clean_net, dataset.images)]
    logits1 = _predict_all(trans[0], dataset.images)
    logits2 = _predict_all(trans[1], dataset.images)
    col1 = [trans[0].column(l[None], y)[0] for l, y in zip(logits1, dataset.noisy1)]
    col2 = [trans[1].column(l[None], y)[0] for l, y in zip(logits2, dataset.noisy2)]
    P, C1, C2 = np.stack(probs), np.stack(col1), np.stack(col2)
    post = e_step_joint(P, C1, C2, stats)
    row = {
        "L1": marginal_log_likelihood(P, C1, which="L1"),
        "L2": marginal_log_likelihood(P, C2, which="L2"),
        "L3": marginal_log_likelihood(P, C1, C2, which="L3"),
        "ce_clean": cross_entropy_curve(P, np.stack(dataset.clean)) if dataset.clean is not None else float("nan"),
        "ce_noisy1": cross_entropy_curve(P, np.stack(dataset.noisy1)),
        "ce_noisy2": cross_entropy_curve(P, np.stack(dataset.noisy2)),
        "R1": clean_noisy_ratio(post, np.stack(dataset.noisy1)),
        "R2": clean_noisy_ratio(post, np.stack(dataset.noisy2)),
    }
    return row


def _transition_em_step(net, opt, x, noisy, prior, lr, stats) -> float:
    """E-step with the current transition net, then its M-step, sharing one forward pass."""
    net.params.zero_grad()
    logits = net.forward(x)
    post = e_step_single(prior, net.column(logits, noisy), stats)
    loss, g = net.column_nll(logits, noisy, post)
    net.backward(g)
    _step(net.params, lr, opt)
    return float(loss)


def _clean_em_step(net, opt, trans, x, noisy1, noisy2, lr, stats) -> float:
    col1 = trans[0].column(trans[0].forward(x), noisy1)
    col2 = trans[1].column(trans[1].forward(x), noisy2)
    net.params.zero_grad()
    p = net.probabilities(net.forward(x))
    post = e_step_joint(p, col1, col2, stats)
    loss, g = nx.weighted_cross_entropy(p, post)
    net.backward(g)
    _step(net.params, lr, opt)
    return float(loss)


def train_antn(
    dataset: Dataset,
    cfg: TrainConfig,
    init_clean: Optional[CleanNet] = None,
    on_epoch=None,
) -> TrainResult:
    """Three-phase ANTN training.

    A: clean net on the mixture of both label sets (skipped when
    ``init_clean`` is given, which must come from the same phase-A run).
    B: clean net frozen; each transition net takes EM steps against its
    source. C: alternate blocks of ``alternate_interval`` epochs, first
    updating both transition nets, then the clean net with the joint
    posterior. The learning rate follows ``cfg.lr_at`` on the global epoch;
    transition nets use it times ``cfg.transition_lr_scale``.
    """
    if dataset.noisy2 is None:
        raise ConfigError("ANTN needs two noisy label sets")
    c = cfg.num_classes
    for labels in (dataset.noisy1, dataset.noisy2):
        for y in labels:
            if y.min() < 0 or y.max() >= c:
                raise ConfigError(f"noisy labels outside 0..{c - 1}")
    stats = EStepStats()
    result = TrainResult(None, [], None, stats)
    trans = [new_transition_net(cfg, 1), new_transition_net(cfg, 2)]
    opt_t = [nx.make_optimizer(cfg.optimizer, t.params) for t in trans]

    def record(epoch: int, phase: str, lr: float, net) -> None:
        if (epoch + 1) % cfg.log_every and epoch + 1 != total:
            return
        row = {"epoch": epoch + 1, "phase": phase}
        row.update(epoch_metrics(net, trans, dataset))
        row["lr"] = lr
        result.log.append(row)
        log.info("epoch %d %s L3=%.4f ce_clean=%.4f", epoch + 1, phase, row["L3"], row["ce_clean"])
        if on_epoch is not None:
            on_epoch(row)

    total = cfg.epochs_init_clean + cfg.epochs_transition + cfg.epochs_alternate
    if init_clean is None:
        clean = new_clean_net(cfg)
        opt_c = nx.make_optimizer(cfg.optimizer, clean.params)
        _direct_epochs(
            clean,
            opt_c,
            dataset.images,
            [dataset.noisy1, dataset.noisy2],
            cfg,
            cfg.epochs_init_clean,
            _init_rng(cfg.seed, 10),
            on_epoch=lambda e, lr, net: record(e, "A", lr, net),
        )
    else:
        clean = copy_net(init_clean)
        opt_c = nx.make_optimizer(cfg.optimizer, clean.params)
    result.phase_a = copy_net(clean)

    noisy = [dataset.noisy1, dataset.noisy2]
    rng = _init_rng(cfg.seed, 20)
    epoch = cfg.epochs_init_clean
    for _ in range(cfg.epochs_transition):
        lr = cfg.lr_at(epoch)
        lr_t = lr * cfg.transition_lr_scale
        for idx in _batches(len(dataset), cfg.batch_size, rng):
            x = _stack(dataset.images, idx)
            prior = clean.probabilities(clean.forward(x))
            for s in range(2):
                _transition_em_step(trans[s], opt_t[s], x, _stack(noisy[s], idx), prior, lr_t, stats)
        record(epoch, "B", lr, clean)
        epoch += 1

    for e in range(cfg.epochs_alternate):
        lr = cfg.lr_at(epoch)
        lr_t = lr * cfg.transition_lr_scale
        update_clean = (e // cfg.alternate_interval) % 2 == 1
        for idx in _batches(len(dataset), cfg.batch_size, rng):
            x = _stack(dataset.images, idx)
            y1, y2 = _stack(noisy[0], idx), _stack(noisy[1], idx)
            if update_clean:
                _clean_em_step(clean, opt_c, trans, x, y1, y2, lr, stats)
            else:
                prior = clean.probabilities(clean.forward(x))
                _transition_em_step(trans[0], opt_t[0], x, y1, prior, lr_t, stats)
                _transition_em_step(trans[1], opt_t[1], x, y2, prior, lr_t, stats)
        record(epoch, "C", lr, clean)
        epoch += 1

    result.checkpoint = ModelCheckpoint(
        "antn", cfg.net_spec, {"clean": clean, "trans1": trans[0], "trans2": trans[1]}, cfg.readout_mode
    )
    return result


def config_fields(cls) -> List[str]:
    return [f.name for f in fields(cls)]
