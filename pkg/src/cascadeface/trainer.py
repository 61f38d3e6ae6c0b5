"""Per-task mini-batch training with hard example selection, mining, and the
bridged end-to-end fine-tuning stage."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .cascade import DEFAULT_THRESHOLDS, run_cascade
from .errors import (
    ConfigError, DimensionError, DivergenceError, NumericError, SamplingError, StateError,
)
from .geometry import BoundingBox, crop_boxes, overlap_matrix, square
from .losses import DEFAULT_WEIGHTS, LossWeights, TaskLabels, multi_task_loss
from .model import CascadeModel
from .nn import Network, avgpool2
from .sampler import (
    Label, Proposal, SampleSet, augment_fill, generate_proposals, label_from_iou,
    ohem_select,
)

log = logging.getLogger(__name__)

NET_SIZES = {"net12": 12, "net24": 24, "net48": 48}
STAGE_ALIASES = {"12net": "net12", "24net": "net24", "48net": "net48", "e2e": "e2e",
                 "net12": "net12", "net24": "net24", "net48": "net48"}
TASK_KINDS = {
    "cls": (Label.NEGATIVE, Label.POSITIVE),
    "reg": (Label.POSITIVE, Label.PART),
    "pts": (Label.LANDMARK,),
}


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 64
    keep_fraction: float = 0.7
    ohem: bool = True
    epochs: int = 4
    iterations: Optional[int] = None
    seed: int = 0
    stage: str = "net12"
    large_batch: bool = False
    large_batch_size: int = 256
    task_ratio: tuple = (2, 1, 1)
    neg_pos_ratio: int = 3
    loss_weights: dict = field(default_factory=lambda: dict(DEFAULT_WEIGHTS))
    e2e_iterations: int = 300
    e2e_learning_rate: float = 0.001
    e2e_all_heads: bool = False
    grad_clip: Optional[float] = 30.0

    def __post_init__(self):
        self.stage = STAGE_ALIASES.get(self.stage, self.stage)
        if self.stage not in ("net12", "net24", "net48", "e2e"):
            raise ConfigError(f"unknown stage {self.stage!r}")
        if not 0 < self.keep_fraction <= 1:
            raise ConfigError("keep_fraction must be in (0, 1]")
        for name in ("learning_rate", "batch_size", "large_batch_size", "epochs"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigError("grad_clip must be positive or None")
        if self.iterations is not None and self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        self.task_ratio = tuple(int(t) for t in self.task_ratio)
        weights = dict(DEFAULT_WEIGHTS)
        for k, v in (self.loss_weights or {}).items():
            weights[k] = v if isinstance(v, LossWeights) else LossWeights(**v)
        self.loss_weights = weights

    def weights(self, net_id: str) -> LossWeights:
        return self.loss_weights.get(net_id, LossWeights())

    def with_(self, **kw) -> "TrainConfig":
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(kw)
        return TrainConfig(**d)


def _coerce(value: str):
    low = value.strip().lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", "null", ""):
        return None
    for conv in (int, float):
        try:
            return conv(value)
        except ValueError:
            pass
    value = value.strip()
    if value[:1] in "[(" and value[-1:] in "])":
        value = value[1:-1]
    if "," in value:
        return tuple(_coerce(v) for v in value.split(","))
    return value


def parse_config(text: str, base: Optional[TrainConfig] = None) -> TrainConfig:
    """Read ``key = value`` lines (or a JSON object) into a config.

    Loss weights are given as ``alpha``/``beta``/``gamma`` (applied to every
    net) or ``net48.gamma = 1`` for a single net.
    """
    base = base or TrainConfig()
    stripped = text.strip()
    if stripped.startswith("{"):
        items = json.loads(stripped)
    else:
        items = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value")
            key, value = line.split("=", 1)
            items[key.strip()] = _coerce(value)
    known = {f.name for f in fields(TrainConfig)}
    updates = {}
    weights = {k: asdict(v) for k, v in base.loss_weights.items()}
    for key, value in items.items():
        if key in ("alpha", "beta", "gamma"):
            for w in weights.values():
                w[key] = float(value)
        elif "." in key and key.split(".", 1)[1] in ("alpha", "beta", "gamma"):
            net, term = key.split(".", 1)
            net = STAGE_ALIASES.get(net, net)
            weights.setdefault(net, asdict(LossWeights()))[term] = float(value)
        elif key == "loss_weights" and isinstance(value, dict):
            for net, w in value.items():
                weights.setdefault(STAGE_ALIASES.get(net, net), {}).update(w)
        elif key in known:
            updates[key] = value
        else:
            raise ConfigError(f"unknown config key {key!r}")
    updates["loss_weights"] = weights
    return base.with_(**updates)


def load_config(path, base: Optional[TrainConfig] = None) -> TrainConfig:
    return parse_config(Path(path).read_text(), base)


# -- mini-batches -----------------------------------------------------------

def eligible(pool: SampleSet, task: str) -> np.ndarray:
    return np.flatnonzero(np.isin(pool.kind, TASK_KINDS[task]))


def _draw(rng, index: np.ndarray, n: int) -> np.ndarray:
    if n <= 0:
        return index[:0]
    return rng.choice(index, size=n, replace=len(index) < n)


def make_task_minibatch(pool: SampleSet, task: str, size: int, rng, neg_pos_ratio: int = 3):
    """``size`` samples eligible for ``task``, all masked to that task only.

    Classification batches mix negatives and positives ``neg_pos_ratio``:1
    when both exist. Returns ``(samples, labels)``.
    """
    if task not in TASK_KINDS:
        raise ConfigError(f"unknown task {task!r}")
    rng = np.random.default_rng(rng)
    idx = eligible(pool, task)
    if not len(idx):
        raise SamplingError(f"no samples eligible for task {task}")
    if task == "cls":
        neg = idx[pool.kind[idx] == Label.NEGATIVE]
        pos = idx[pool.kind[idx] == Label.POSITIVE]
        if len(neg) and len(pos):
            n_pos = max(1, int(round(size / (neg_pos_ratio + 1))))
            chosen = np.concatenate([_draw(rng, neg, size - n_pos), _draw(rng, pos, n_pos)])
        else:
            chosen = _draw(rng, idx, size)
    else:
        chosen = _draw(rng, idx, size)
    batch = pool.subset(chosen)
    return batch, batch.labels((task,))


def make_mixed_batch(pool: SampleSet, size: int, rng):
    """Large-batch mode: uniform draw over the pool, every available label enabled."""
    if not len(pool):
        raise SamplingError("empty pool")
    rng = np.random.default_rng(rng)
    chosen = _draw(rng, np.arange(len(pool)), size)
    batch = pool.subset(chosen)
    return batch, batch.labels()


def task_schedule(ratio: Sequence[int]) -> list:
    return [t for t, n in zip(("cls", "reg", "pts"), ratio) for _ in range(n)]


# -- training loop ------------------------------------------------------------

@dataclass
class TraceRow:
    iteration: int
    task: str
    hard_loss: float
    kept_count: int
    batch_loss: float


@dataclass
class TrainResult:
    net: Optional[Network]
    trace: list
    val_history: list = field(default_factory=list)
    seconds: float = 0.0
    model: Optional[CascadeModel] = None
    metrics: dict = field(default_factory=dict)

    @property
    def seconds_per_1000(self) -> float:
        return 1000.0 * self.seconds / max(1, len(self.trace))


def write_trace(path, trace: Sequence[TraceRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "task", "hard_loss", "kept_count", "batch_loss"])
        for r in trace:
            w.writerow([r.iteration, r.task, repr(r.hard_loss), r.kept_count, repr(r.batch_loss)])


def evaluate_patches(net: Network, data: SampleSet, weights: LossWeights,
                     batch: int = 512) -> dict:
    """Mean per-sample loss (all available labels) and face/non-face accuracy."""
    losses, correct, counted = [], 0, 0
    for s in range(0, len(data), batch):
        part = data.subset(slice(s, s + batch))
        heads = net.predict(part.patches)
        res = multi_task_loss(heads, part.labels(), weights)
        losses.append(res.per_sample)
        m = part.cls >= 0
        correct += int(np.sum((heads["cls"][m, 1] >= 0.5) == (part.cls[m] == 1)))
        counted += int(m.sum())
    per = np.concatenate(losses) if losses else np.zeros(0)
    return {"loss": float(per.mean()) if per.size else float("nan"),
            "accuracy": correct / counted if counted else float("nan")}


def clip_gradients(nets: Sequence[Network], max_norm: Optional[float]) -> float:
    """Scale all gradients of ``nets`` jointly so their global norm is <= ``max_norm``."""
    grads = [g for net in nets if net.grads is not None for g in net.grads.values()]
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


def _iterations(config: TrainConfig, pool_size: int) -> int:
    if config.iterations is not None:
        return int(config.iterations)
    batch = config.large_batch_size if config.large_batch else config.batch_size
    return config.epochs * max(1, math.ceil(pool_size / batch))


def _loop(step: Callable, pool: SampleSet, config: TrainConfig, iterations: int, rng,
          val_fn: Optional[Callable] = None, eval_every: int = 0):
    schedule = task_schedule(config.task_ratio)
    available = [t for t in schedule if len(eligible(pool, t))]
    if not available:
        raise SamplingError("training pool has no usable samples")
    trace, history = [], []
    if val_fn and eval_every:
        history.append((0, *val_fn()))
    for it in range(iterations):
        if config.large_batch:
            task = "all"
            batch, labels = make_mixed_batch(pool, config.large_batch_size, rng)
        else:
            task = available[it % len(available)]
            batch, labels = make_task_minibatch(pool, task, config.batch_size, rng,
                                                config.neg_pos_ratio)
        try:
            hard, kept, mean = step(batch, labels)
        except NumericError as exc:
            raise DivergenceError(f"diverged at iteration {it + 1}: {exc}", trace) from exc
        row = TraceRow(it + 1, task, hard, kept, mean)
        trace.append(row)
        if not (math.isfinite(hard) and math.isfinite(mean)):
            raise DivergenceError(f"non-finite loss at iteration {it + 1}", trace)
        if val_fn and eval_every and (it + 1) % eval_every == 0:
            history.append((it + 1, *val_fn()))
    return trace, history


def _select(res_fn, config):
    """Run the loss twice: once for per-sample values, once with the hard mask."""
    res = res_fn(None)
    keep = ohem_select(res.per_sample, config.keep_fraction) if config.ohem else None
    if keep is not None:
        res = res_fn(keep)
    kept = int(keep.sum()) if keep is not None else len(res.per_sample)
    return res, kept


def train_stage(net_id: str, data: SampleSet, config: TrainConfig,
                net: Optional[Network] = None, val: Optional[SampleSet] = None,
                eval_every: int = 0) -> TrainResult:
    """Train one net on a labeled pool; returns the net and the loss trace."""
    net_id = STAGE_ALIASES.get(net_id, net_id)
    if net_id not in NET_SIZES:
        raise ConfigError(f"cannot train {net_id} as a single stage")
    if data.size != NET_SIZES[net_id]:
        raise DimensionError(f"{net_id} needs {NET_SIZES[net_id]}px patches, got {data.size}")
    rng = np.random.default_rng(config.seed)
    net = net if net is not None else Network.build(net_id, rng=rng)
    weights = config.weights(net_id)

    def step(batch, labels):
        heads = net.forward(batch.patches)
        res, kept = _select(lambda keep: multi_task_loss(heads, labels, weights, keep), config)
        mean = float(res.per_sample.mean())
        if math.isfinite(res.total):
            net.backward(res.grads)
            clip_gradients([net], config.grad_clip)
            net.step(config.learning_rate)
        return res.total / kept, kept, mean

    val_fn = None
    if val is not None:
        def val_fn():
            m = evaluate_patches(net, val, weights)
            return m["loss"], m["accuracy"]

    start = time.perf_counter()
    trace, history = _loop(step, data, config, _iterations(config, len(data)), rng,
                           val_fn, eval_every)
    elapsed = time.perf_counter() - start
    return TrainResult(net, trace, history, elapsed)


# -- datasets -----------------------------------------------------------------

def proposals_for_scenes(scenes, size: int, counts, seed: int = 0) -> list:
    out = []
    for i, scene in enumerate(scenes):
        out.extend(generate_proposals(scene.image, scene.faces, counts, seed * 7919 + i, size))
    return out


def build_patch_dataset(scenes, size: int, per_class: int, seed: int = 0,
                        counts=(12, 6, 6, 4)) -> SampleSet:
    """Exactly ``per_class`` patches of each of the four classes (if the scenes allow)."""
    props = proposals_for_scenes(scenes, size, counts, seed)
    by_label = {label: [p for p in props if p.label == label] for label in Label}
    chosen = []
    for label in Label:
        items = by_label[label]
        if len(items) < per_class:
            raise SamplingError(
                f"only {len(items)} {label.name} proposals for {per_class} requested")
        chosen.extend(items[:per_class])
    return SampleSet.from_proposals(chosen, size)


def mine_proposals(model: CascadeModel, scenes, net_id: str,
                   thresholds=DEFAULT_THRESHOLDS, max_per_image: int = 64) -> list:
    """Label the surviving candidates of the earlier stages and crop them for ``net_id``.

    Candidates matching no face are the earlier stages' false positives.
    """
    net_id = STAGE_ALIASES.get(net_id, net_id)
    upto = {"net24": "net12", "net48": "net24"}[net_id]
    size = NET_SIZES[net_id]
    out = []
    for scene in scenes:
        run = run_cascade(model.nets, scene.image, thresholds, upto=upto)
        cand = run.stages[-1]
        if not len(cand):
            continue
        windows = square(cand.boxes)[:max_per_image]
        patches, valid = crop_boxes(scene.image, windows, size)
        gts = [f.box for f in scene.faces]
        gt_arr = np.array([g.as_array() for g in gts]) if gts else np.zeros((0, 4))
        ov = overlap_matrix(windows, gt_arr) if gts else np.zeros((len(windows), 0))
        for k in np.flatnonzero(valid):
            w = windows[k]
            if w[2] <= 0:
                continue
            if gts:
                best = int(ov[k].argmax())
                label = label_from_iou(ov[k, best])
                matched = gts[best] if label != Label.NEGATIVE else None
            else:
                label, matched = Label.NEGATIVE, None
            out.append(Proposal(BoundingBox.from_array(w), label, matched, None, patches[k],
                                scene.image))
    return out


def build_stage_dataset(scenes, net_id: str, model: Optional[CascadeModel] = None,
                        counts=(12, 6, 6, 4), seed: int = 0,
                        min_mined: Optional[int] = None) -> SampleSet:
    """Random proposals for every scene, plus mined candidates when earlier stages exist.

    When mining yields fewer than ``min_mined`` candidates (default: two per
    scene) the mined set is topped up with jittered and flipped copies.
    """
    net_id = STAGE_ALIASES.get(net_id, net_id)
    props = proposals_for_scenes(scenes, NET_SIZES[net_id], counts, seed)
    if model is not None and net_id in ("net24", "net48"):
        needed = {"net24": ("net12",), "net48": ("net12", "net24")}[net_id]
        if all(n in model.nets for n in needed):
            mined = mine_proposals(model, scenes, net_id)
            target = 2 * len(scenes) if min_mined is None else min_mined
            if mined and len(mined) < target:
                mined = augment_fill(mined, target, seed)
            log.info("mined %d candidates for %s", len(mined), net_id)
            props.extend(mined)
    return SampleSet.from_proposals(props, NET_SIZES[net_id])


@dataclass
class PipelineResult:
    model: CascadeModel
    stages: dict  # net id -> TrainResult
    datasets: dict  # net id -> SampleSet
    seconds: dict


def train_cascade(scenes, iterations: dict, config: Optional[TrainConfig] = None,
                  model: Optional[CascadeModel] = None, counts=(12, 6, 6, 4)) -> PipelineResult:
    """Train 12net, mine, 24net, mine, 48net, then fine-tune end to end.

    ``iterations`` maps ``net12``/``net24``/``net48``/``e2e`` to iteration
    counts; a missing or zero ``e2e`` entry skips fine-tuning.
    """
    config = config or TrainConfig()
    model = model.copy() if model is not None else CascadeModel()
    stages, datasets, seconds = {}, {}, {}
    for net_id in ("net12", "net24", "net48"):
        start = time.perf_counter()
        data = build_stage_dataset(scenes, net_id, model, counts, config.seed)
        cfg = config.with_(stage=net_id, iterations=iterations.get(net_id))
        result = train_stage(net_id, data, cfg)
        model.nets[net_id] = result.net
        model.loss_weights[net_id] = cfg.weights(net_id)
        model.trained.add(net_id)
        stages[net_id], datasets[net_id] = result, data
        seconds[net_id] = time.perf_counter() - start
        log.info("%s: %d samples, %.1f s", net_id, len(data), seconds[net_id])
    if iterations.get("e2e"):
        start = time.perf_counter()
        cfg = config.with_(stage="e2e", e2e_iterations=iterations["e2e"])
        stages["e2e"] = alternating_end_to_end(model, datasets["net48"], cfg)
        model = stages["e2e"].model
        seconds["e2e"] = time.perf_counter() - start
    return PipelineResult(model, stages, datasets, seconds)


# -- bridge and end-to-end -----------------------------------------------------

@dataclass(frozen=True)
class BridgeSpec:
    source_net: str
    source_layer: str
    dest_net: str
    dest_layer: str
    axis: str = "channel"


BRIDGES = (
    BridgeSpec("net12", "prelu3", "net24", "fc"),
    BridgeSpec("net24", "prelu4", "net48", "fc"),
)


def bridge_forward(low_features: np.ndarray, high: Network, high_input: np.ndarray,
                   train: bool = True) -> dict:
    """Forward the higher net with the lower net's trunk features concatenated
    onto its first dense layer input."""
    low_features = np.asarray(low_features)
    if low_features.ndim != 2 or low_features.shape[1] != high.spec.bridge_width:
        raise DimensionError(
            f"bridge expects width {high.spec.bridge_width}, got {low_features.shape}")
    return high.forward(high_input, bridge=low_features, train=train)


def build_bridged(model: CascadeModel) -> CascadeModel:
    """Copy of ``model`` whose 24/48 nets take zero-weighted bridge inputs."""
    out = model.copy()
    for b in BRIDGES:
        width = out.nets[b.source_net].spec.feature_width
        if out.nets[b.dest_net].spec.bridge_width != width:
            out.nets[b.dest_net] = out.nets[b.dest_net].with_bridge(width)
    out.meta = dict(out.meta, bridged=True)
    return out


class EndToEndCascade:
    """12 -> 24 -> 48 chain over one 48x48 crop, with gradients through both bridges."""

    def __init__(self, model: CascadeModel):
        self.net12 = model.nets["net12"]
        self.net24 = model.nets["net24"]
        self.net48 = model.nets["net48"]

    def forward(self, x48: np.ndarray, train: bool = True):
        x24 = avgpool2(x48)
        x12 = avgpool2(x24)
        h12 = self.net12.forward(x12, train=train)
        h24 = bridge_forward(h12["features"], self.net24, x24, train)
        h48 = bridge_forward(h24["features"], self.net48, x48, train)
        return h12, h24, h48

    def backward(self, g48: dict, g24: Optional[dict] = None, g12: Optional[dict] = None):
        d24 = self.net48.backward(g48)
        d12 = self.net24.backward(g24 or {}, feature_grad=d24)
        self.net12.backward(g12 or {}, feature_grad=d12)

    @property
    def nets(self) -> tuple:
        return (self.net12, self.net24, self.net48)

    def step(self, lr: float):
        for net in self.nets:
            if net.grads is None:
                net.zero_grad()
            net.step(lr)


def alternating_end_to_end(model: CascadeModel, data: SampleSet, config: TrainConfig,
                           val_fn: Optional[Callable] = None) -> TrainResult:
    """Copy pre-trained nets into the bridged structure and fine-tune jointly.

    ``data`` holds 48x48 samples. By default only the 48net loss is used and
    it is back-propagated through both bridges into all three nets.
    ``val_fn(model) -> dict`` is evaluated before and after fine-tuning.
    """
    missing = [n for n in ("net12", "net24", "net48") if n not in model.trained]
    if missing:
        raise StateError(f"end-to-end training needs pre-trained nets; missing {missing}")
    if data.size != 48:
        raise DimensionError("end-to-end fine-tuning takes 48x48 samples")
    e2e = build_bridged(model)
    chain = EndToEndCascade(e2e)
    rng = np.random.default_rng(config.seed)
    w48, w24, w12 = (config.weights(n) for n in ("net48", "net24", "net12"))
    metrics = {"before": val_fn(e2e) if val_fn else None}

    def step(batch, labels):
        h12, h24, h48 = chain.forward(batch.patches)
        res, kept = _select(lambda keep: multi_task_loss(h48, labels, w48, keep), config)
        mean = float(res.per_sample.mean())
        g24 = g12 = None
        if config.e2e_all_heads:
            keep = ohem_select(res.per_sample, config.keep_fraction) if config.ohem else None
            g24 = multi_task_loss(h24, labels, w24, keep).grads
            g12 = multi_task_loss(h12, labels, w12, keep).grads
        if math.isfinite(res.total):
            chain.backward(res.grads, g24, g12)
            clip_gradients(chain.nets, config.grad_clip)
            chain.step(config.e2e_learning_rate)
        return res.total / kept, kept, mean

    start = time.perf_counter()
    trace, _ = _loop(step, data, config, int(config.e2e_iterations), rng)
    elapsed = time.perf_counter() - start
    e2e.meta["e2e_iterations"] = int(config.e2e_iterations)
    metrics["after"] = val_fn(e2e) if val_fn else None
    return TrainResult(None, trace, [], elapsed, model=e2e, metrics=metrics)
