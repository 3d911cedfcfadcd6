"""Performance-based architecture search.

One round: order the candidate ops of every edge by their architecture
weights and take the half with the smallest values (in 1-bit mode the whole
set, since there is no warm-up ordering to trust); repeat T times sampling one
unused op per edge without replacement, train the sampled architecture for an
epoch on shared supernet weights and credit its held-out accuracy to every
sampled op; fold the per-round accuracies into selection likelihoods (softmax
of mean accuracy for the sampled half, a max/mean midpoint estimate for the
rest, both blended into a half-decayed running score); in 1-bit mode add the
exploration bonus delta*sqrt(2 ln N / n) so rarely-tried ops survive; drop the
lowest-scoring op from every edge and briefly re-train the reduced supernet.
The loop ends when each edge holds one op, and the genotype is derived.
"""

import math
from dataclasses import dataclass, replace

import numpy as np

from .data import batch_stream, split_pool
from .errors import ConfigError, SearchError
from .ops import PRIMITIVES
from .supernet import Network, NetworkConfig, derive_genotype
from .training import OptimConfig, Optimizer, evaluate, joint_epoch, train_epoch
from .util import JsonlWriter, make_rng, now_ms

MODES = ("full_precision", "bnn", "one_bit")
_PRECISION = {"full_precision": "full", "bnn": "bnn", "one_bit": "one_bit"}


@dataclass(frozen=True)
class SearchConfig:
    seed: int
    mode: str = "bnn"
    op_set: tuple = PRIMITIVES
    cells: int = 6
    init_channels: int = 16
    classes: int = 10
    in_channels: int = 3
    divisor: int = 2
    bin_mode: str = "xnor"
    theta: float = 1e-4
    warmup_epochs: int = 5
    freeze_epochs: int = 3
    repeats: int = 3
    inter_epochs: int = 1
    delta: float = 2.0
    batch_size: int = 128
    round_batch_size: int = 400
    lr: float = 0.025
    alpha_lr: float = 0.01
    alpha_optimizer: str = "sgd"
    momentum: float = 0.9
    weight_decay: float = 5e-4
    clip_norm: float = 5.0
    loss: str = "mse"
    perf_val_size: int = 5000
    inter_update_one_bit: bool = True
    fp_pointwise: bool = False
    binarize_preprocess: bool = False
    augment: bool = False
    eval_batch_size: int = 256

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if len(self.op_set) < 2:
            raise ConfigError("the op set needs at least 2 candidates")
        if len(set(self.op_set)) != len(self.op_set):
            raise ConfigError("duplicate ops in the op set")
        for op in self.op_set:
            if op not in PRIMITIVES:
                raise ConfigError(f"unknown op {op!r}")
        if self.warmup_epochs < self.freeze_epochs:
            raise ConfigError("warmup epoch count must cover the freeze phase")

    @property
    def precision(self):
        return _PRECISION[self.mode]

    @property
    def k0(self):
        return len(self.op_set)

    def network_config(self):
        return NetworkConfig(
            classes=self.classes, in_channels=self.in_channels,
            init_channels=self.init_channels, cells=self.cells, op_set=tuple(self.op_set),
            precision=self.precision, bin_mode=self.bin_mode, theta=self.theta,
            divisor=self.divisor, fp_pointwise=self.fp_pointwise,
            binarize_preprocess=self.binarize_preprocess, seed=self.seed,
        )


def round_iterations(k, one_bit):
    """Sampled evaluations per repeat at candidate count k."""
    return k if one_bit else -(-k // 2)


def planned_evaluations(k0, repeats, one_bit):
    """Total sampled-architecture evaluations over the whole search."""
    return sum(repeats * round_iterations(k, one_bit) for k in range(k0, 1, -1))


def planned_epochs(config):
    one_bit = config.mode == "one_bit"
    total = 0 if one_bit else config.warmup_epochs
    total += planned_evaluations(config.k0, config.repeats, one_bit)
    if not one_bit or config.inter_update_one_bit:
        total += config.inter_epochs * (config.k0 - 1)
    return total


class SelectionState:
    """Per-edge per-op bookkeeping: scores s, trial counts n, the global
    evaluation count N, and the current round's accuracy lists."""

    def __init__(self, edge_ops, delta=2.0, repeats=3):
        self.delta = delta
        self.repeats = repeats
        self.names = {key: list(ops) for key, ops in edge_ops.items()}
        self.s = {key: np.zeros(len(ops)) for key, ops in edge_ops.items()}
        self.n = {key: np.zeros(len(ops), dtype=np.int64) for key, ops in edge_ops.items()}
        self.total = 0  # N: sampled-architecture evaluations so far
        self._round_y = {}
        self._q = {}

    def keys(self):
        return list(self.names)

    def select_smaller(self, key, alpha_values, one_bit):
        """Indices of the ceil(K/2) ops with smallest alpha (all ops in 1-bit
        mode); ties keep op-list order."""
        k = len(self.names[key])
        if k < 2:
            raise SearchError(f"edge {key} has {k} ops; nothing to select")
        if one_bit:
            return list(range(k))
        order = np.argsort(np.asarray(alpha_values), kind="stable")
        return sorted(int(i) for i in order[: -(-k // 2)])

    def begin_round(self, key, smaller_idx):
        k = len(self.names[key])
        q = np.zeros(k, dtype=np.int64)
        q[list(smaller_idx)] = 1
        self._q[key] = q
        self._round_y[key] = [[] for _ in range(k)]

    def record(self, key, op_idx, accuracy):
        if not 0.0 <= accuracy <= 1.0:
            raise SearchError(f"accuracy {accuracy} outside [0, 1]")
        self._round_y[key][op_idx].append(float(accuracy))
        self.n[key][op_idx] += 1

    def s_smaller(self, key):
        """Softmax over the mean round accuracies of the sampled half."""
        members = np.flatnonzero(self._q[key])
        ybar = []
        for i in members:
            ys = self._round_y[key][i]
            if len(ys) != self.repeats:
                raise SearchError(
                    f"op {self.names[key][i]} on {key} has {len(ys)} accuracies, "
                    f"expected {self.repeats}"
                )
            ybar.append(sum(ys) / len(ys))
        ybar = np.asarray(ybar, dtype=np.float64)
        e = np.exp(ybar - ybar.max())
        return members, e / e.sum()

    @staticmethod
    def s_larger(s_small):
        """Midpoint of the max and the mean of the sampled half's likelihoods."""
        return 0.5 * (float(s_small.max()) + float(s_small.sum()) / s_small.size)

    def update_round(self, key):
        """Half-decay blend of the previous score with this round's estimate."""
        members, s_small = self.s_smaller(key)
        q = self._q[key]
        s_fill = self.s_larger(s_small) if not q.all() else 0.0
        new = 0.5 * self.s[key]
        new[members] += s_small
        new[q == 0] += s_fill
        self.s[key] = new
        return new.copy()

    def apply_ucb(self, key):
        """Exploration bonus delta*sqrt(2 ln N / n); unsampled ops get an
        infinite bonus and cannot be pruned this round."""
        if self.total < 1:
            raise SearchError("UCB update before any evaluation")
        n = self.n[key]
        bonus = np.full(n.shape, np.inf)
        tried = n > 0
        bonus[tried] = self.delta * np.sqrt(2.0 * math.log(self.total) / n[tried])
        self.s[key] = self.s[key] + bonus
        return bonus

    def prune_choice(self, key):
        """Lowest selection likelihood; ties resolve to the lowest index."""
        if len(self.names[key]) < 2:
            raise SearchError(f"edge {key} cannot be pruned below one op")
        return int(np.argmin(self.s[key]))

    def drop(self, key, op_idx):
        self.names[key].pop(op_idx)
        self.s[key] = np.delete(self.s[key], op_idx)
        self.n[key] = np.delete(self.n[key], op_idx)


def _key_str(key):
    return f"{key[0]}/{key[1]}"


class SearchEngine:
    """Drives the pruning loop against an environment.

    The environment supplies: ``edge_ops()`` (key -> op names),
    ``alpha_values(key)``, ``warmup()``, ``evaluate_arch(arch)`` (train the
    sampled architecture and return its held-out accuracy),
    ``inter_round(round_no)``, ``prune(key, op_name)`` and ``finish()``.
    """

    def __init__(self, env, config, report=None):
        self.env = env
        self.config = config
        self.report = report if report is not None else JsonlWriter()
        self.state = SelectionState(env.edge_ops(), delta=config.delta, repeats=config.repeats)
        self.rng = make_rng(config.seed, 20)

    def run(self):
        config = self.config
        one_bit = config.mode == "one_bit"
        self.env.warmup()
        keys = self.state.keys()
        counts = {len(self.state.names[key]) for key in keys}
        if len(counts) != 1:
            raise SearchError(f"edges disagree on candidate count: {counts}")
        k = counts.pop()
        round_no = 0
        while k > 1:
            round_no += 1
            t_round = now_ms()
            smaller = {}
            for key in keys:
                idx = self.state.select_smaller(key, self.env.alpha_values(key), one_bit)
                self.state.begin_round(key, idx)
                smaller[key] = idx
            iters = round_iterations(k, one_bit)
            for repeat in range(1, config.repeats + 1):
                working = {key: list(smaller[key]) for key in keys}
                for step in range(1, iters + 1):
                    arch_idx = {}
                    for key in keys:
                        pool = working[key]
                        arch_idx[key] = pool.pop(int(self.rng.integers(len(pool))))
                    arch = {key: self.state.names[key][i] for key, i in arch_idx.items()}
                    t_eval = now_ms()
                    accuracy = self.env.evaluate_arch(arch)
                    self.state.total += 1
                    for key, i in arch_idx.items():
                        self.state.record(key, i, accuracy)
                    self.report.write({
                        "type": "eval", "round": round_no, "repeat": repeat, "step": step,
                        "accuracy": accuracy, "N": self.state.total,
                        "ops": {_key_str(key): arch[key] for key in keys},
                        "wall_ms": now_ms() - t_eval,
                    })
            s_table = {}
            for key in keys:
                s_after = self.state.update_round(key)
                s_table[_key_str(key)] = dict(zip(self.state.names[key], map(float, s_after)))
            ucb_table = None
            if one_bit:
                ucb_table = {}
                for key in keys:
                    bonus = self.state.apply_ucb(key)
                    ucb_table[_key_str(key)] = dict(zip(self.state.names[key], map(float, bonus)))
                    s_table[_key_str(key)] = dict(
                        zip(self.state.names[key], map(float, self.state.s[key]))
                    )
            pruned = {}
            for key in keys:
                idx = self.state.prune_choice(key)
                name = self.state.names[key][idx]
                self.env.prune(key, name)
                self.state.drop(key, idx)
                pruned[_key_str(key)] = name
            k -= 1
            record = {
                "type": "round", "round": round_no, "k_after": k,
                "s": s_table, "pruned": pruned,
                "n": {_key_str(key): dict(zip(self.state.names[key], map(int, self.state.n[key])))
                      for key in keys},
                "remaining": {_key_str(key): list(self.state.names[key]) for key in keys},
                "N": self.state.total,
                "wall_ms": now_ms() - t_round,
            }
            if ucb_table is not None:
                record["ucb"] = ucb_table
            self.report.write(record)
            self.env.inter_round(round_no)
        return self.env.finish()


class NetworkEnvironment:
    """Real environment: a supernet trained on dataset splits."""

    def __init__(self, network, splits, config, progress=None):
        self.network = network
        self.splits = splits
        self.config = config
        self.progress = progress if progress is not None else JsonlWriter()
        self.optimizer = Optimizer(OptimConfig(
            lr=config.lr, momentum=config.momentum, weight_decay=config.weight_decay,
            clip_norm=config.clip_norm, alpha_lr=config.alpha_lr,
            alpha_optimizer=config.alpha_optimizer,
            total_epochs=planned_epochs(config),
        ))
        self.epoch = 0
        self._shuffle_rng = make_rng(config.seed, 21)
        self._augment_rng = make_rng(config.seed, 22) if config.augment else None
        self._perf_images, self._perf_labels = splits.data("perf_val")

    def edge_ops(self):
        return {key: self.network.edge_kinds(key) for key in self.network.edge_keys()}

    def alpha_values(self, key):
        return self.network.alpha_of(key).values

    def _batches(self, indices, batch_size):
        return batch_stream(
            self.splits.images, self.splits.labels, self.config.classes, batch_size,
            indices=indices, rng=self._shuffle_rng, augment_rng=self._augment_rng,
        )

    def _log(self, phase, lr, loss, acc, t0, **extra):
        self.progress.write({
            "phase": phase, "epoch": self.epoch, "lr": lr,
            "loss": loss, "acc": acc, "wall_ms": now_ms() - t0, **extra,
        })

    def warmup(self):
        config = self.config
        if config.mode == "one_bit":
            self.progress.write({"phase": "warmup", "epoch": self.epoch, "lr": 0.0,
                                 "loss": None, "acc": None, "wall_ms": 0.0,
                                 "note": "skipped in 1-bit mode"})
            return
        for ep in range(1, config.warmup_epochs + 1):
            t0 = now_ms()
            lr = self.optimizer.lr()
            joint = ep > config.freeze_epochs
            if joint:
                loss = joint_epoch(
                    self.network, self._batches(self.splits.grad_train, config.batch_size),
                    list(self._batches(self.splits.arch_val, config.batch_size)),
                    self.optimizer, lr=lr, loss_kind=config.loss,
                )
            else:
                loss = train_epoch(
                    self.network, self._batches(self.splits.grad_train, config.batch_size),
                    self.optimizer, lr=lr, arch=None, loss_kind=config.loss,
                )
            self.epoch += 1
            self.optimizer.epoch = self.epoch
            self._log("warmup", lr, loss, None, t0, joint=joint)

    def evaluate_arch(self, arch):
        config = self.config
        t0 = now_ms()
        lr = self.optimizer.lr()
        loss = train_epoch(
            self.network, self._batches(self.splits.grad_train, config.round_batch_size),
            self.optimizer, lr=lr, arch=arch, loss_kind=config.loss,
        )
        self.epoch += 1
        self.optimizer.epoch = self.epoch
        acc = evaluate(self.network, self._perf_images, self._perf_labels,
                       batch_size=config.eval_batch_size, arch=arch)
        self._log("sampled", lr, loss, acc, t0)
        return acc

    def inter_round(self, round_no):
        config = self.config
        if config.mode == "one_bit" and not config.inter_update_one_bit:
            return
        for _ in range(config.inter_epochs):
            t0 = now_ms()
            lr = self.optimizer.lr()
            loss = joint_epoch(
                self.network, self._batches(self.splits.grad_train, config.round_batch_size),
                list(self._batches(self.splits.arch_val, config.round_batch_size)),
                self.optimizer, lr=lr, loss_kind=config.loss,
            )
            self.epoch += 1
            self.optimizer.epoch = self.epoch
            self._log("inter_round", lr, loss, None, t0)

    def prune(self, key, op_name):
        self.network.prune(key, op_name)

    def finish(self):
        return derive_genotype(self.network)


def run_search(config, images, labels, report=None, progress=None):
    """End-to-end search on one training pool; returns (genotype, network)."""
    splits = split_pool(images, labels, config.seed, config.perf_val_size)
    network = Network(config.network_config())
    env = NetworkEnvironment(network, splits, config, progress=progress)
    engine = SearchEngine(env, config, report=report)
    genotype = engine.run()
    return genotype, network


def derived_config(config, genotype, cells=None, init_channels=None):
    """Network config for training a derived architecture from this search."""
    del genotype
    return replace(
        config,
        cells=config.cells if cells is None else cells,
        init_channels=config.init_channels if init_channels is None else init_channels,
    ).network_config()
