"""Risk-model training: fresh window sampling per epoch, BCE objective, and
decoupled-weight-decay adaptive-moment updates with separate hyperparameter
groups for the aggregator and the (optionally fine-tuned) extractor.

Feature grids — one row per 30 s chunk — are the unit of data flow. A grid
comes from the extractor or from one of the fixed baseline families, is
cheap to keep in memory (float32, 2880 x dim per patient), and can be cached
on disk keyed by the producing configuration.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import torch

from .aggregator import (AggregatorConfig, _AggregatorBase, _construct,
                         bce_loss, build_aggregator)
from .baselines import feature_dim, morph_features, random_features, stft_features
from .cohort import PatientRecord
from .errors import ConfigError, DataError, NumericError
from .evaluation import EvalReport, auroc, build_report
from .extractor import (ExtractorConfig, PatchTransformer, chunks_to_patches,
                        state_dict_arrays, weights_digest)
from .segmentation import (CHUNK_SAMPLES, CHUNKS_PER_HOUR, VARIANT_1H,
                           VARIANT_FH, chunk_array, eval_chunk_bounds,
                           sample_chunk_window)

EXTRACTOR_MODES = ("frozen", "finetune")
FEATURE_FAMILIES = ("extractor", "random", "morph", "stft")
CLASS_WEIGHTINGS = ("none", "inverse-prevalence")


@dataclass
class TrainConfig:
    variant: str = VARIANT_1H
    extractor_mode: str = "frozen"
    feature_family: str = "extractor"
    epochs: int = 100
    batch_size: int = 64
    lr_aggregator: float = 2e-4
    wd_aggregator: float = 1e-3
    lr_extractor: float = 1e-5
    wd_extractor: float = 0.02
    seed: int = 0
    patience: int = 0               # epochs without val improvement; 0 = off
    class_weighting: str = "none"
    windows_per_patient: int = 1
    val_hours: tuple = (24, 12, 1)  # hours scored for the validation metric

    def validate(self):
        if self.variant not in (VARIANT_1H, VARIANT_FH):
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.extractor_mode not in EXTRACTOR_MODES:
            raise ConfigError(f"unknown extractor_mode {self.extractor_mode!r}")
        if self.feature_family not in FEATURE_FAMILIES:
            raise ConfigError(f"unknown feature_family {self.feature_family!r}")
        if self.class_weighting not in CLASS_WEIGHTINGS:
            raise ConfigError(f"unknown class_weighting {self.class_weighting!r}")
        if self.variant == VARIANT_FH and self.extractor_mode == "finetune":
            raise ConfigError(
                "FH with a fine-tuned extractor is rejected: full-history "
                "windows make every step backpropagate through up to 2880 "
                "chunk encodings; use extractor_mode='frozen' for FH, or "
                "fine-tune under the 1H variant")
        if self.extractor_mode == "finetune":
            if self.feature_family != "extractor":
                raise ConfigError("only extractor features can be fine-tuned")
            if not self.lr_extractor < self.lr_aggregator:
                raise ConfigError("fine-tuning expects lr_extractor < lr_aggregator")
        if self.epochs < 1 or self.batch_size < 1 or self.windows_per_patient < 1:
            raise ConfigError("epochs, batch_size, windows_per_patient must be >= 1")
        for lr in (self.lr_aggregator, self.lr_extractor):
            if lr <= 0:
                raise ConfigError("learning rates must be positive")
        if min(self.val_hours) < 1 or max(self.val_hours) > 24:
            raise ConfigError("val_hours must lie in [1, 24]")


# ---------------------------------------------------------------------------
# Feature sources and grids
# ---------------------------------------------------------------------------

@dataclass
class FeatureSource:
    """Anything that turns a record into a (n_chunks, dim) feature grid."""
    family: str = "extractor"
    extractor: Optional[PatchTransformer] = None
    seed: int = 0                   # keys the random family only

    def __post_init__(self):
        if self.family not in FEATURE_FAMILIES:
            raise ConfigError(f"unknown feature family {self.family!r}")
        if self.family == "extractor" and self.extractor is None:
            raise ConfigError("extractor family needs an extractor model")

    @property
    def dim(self) -> int:
        if self.family == "extractor":
            return self.extractor.config.d_model
        return feature_dim(self.family)

    def key(self) -> str:
        """Cache key: changes whenever the produced grids could change."""
        if self.family == "extractor":
            return (f"extractor:{json.dumps(asdict(self.extractor.config))}:"
                    f"{weights_digest(self.extractor)}")
        if self.family == "random":
            return f"random:dim={feature_dim('random')}:seed={self.seed}"
        return f"{self.family}:dim={feature_dim(self.family)}"

    def grid(self, record: PatientRecord) -> np.ndarray:
        chunks = chunk_array(record.samples)
        if self.family == "extractor":
            from .extractor import embed_chunks
            return embed_chunks(self.extractor, chunks)
        rows = np.empty((len(chunks), self.dim), dtype=np.float32)
        for i, chunk in enumerate(chunks):
            if self.family == "random":
                fv = random_features(chunk, self.seed, record.id, i * CHUNK_SAMPLES)
            elif self.family == "morph":
                fv = morph_features(chunk)
            else:
                fv = stft_features(chunk)
            rows[i] = fv.values
        return rows


class GridCache:
    """Bit-exact on-disk grid cache, keyed by source key + patient id."""

    def __init__(self, root):
        self.root = Path(root)

    def _path(self, source_key: str, patient_id: str) -> Path:
        digest = hashlib.blake2b(f"{source_key}|{patient_id}".encode(),
                                 digest_size=16).hexdigest()
        return self.root / digest[:2] / f"{digest}.npz"

    def get(self, source_key: str, patient_id: str) -> Optional[np.ndarray]:
        path = self._path(source_key, patient_id)
        if not path.exists():
            return None
        with np.load(path) as data:
            if bytes(data["key"]).decode() != f"{source_key}|{patient_id}":
                return None
            return data["grid"]

    def put(self, source_key: str, patient_id: str, grid: np.ndarray):
        path = self._path(source_key, patient_id)
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savez(path, grid=np.asarray(grid, dtype=np.float32),
                 key=np.bytes_(f"{source_key}|{patient_id}"))


@dataclass
class GridItem:
    patient_id: str
    label: int
    grid: np.ndarray                # (n_chunks, dim) float32


def build_grid_dataset(records: Iterable[PatientRecord], source: FeatureSource,
                       cache: Optional[GridCache] = None) -> list[GridItem]:
    """Feature grids for a cohort, one record resident at a time.

    Accepts a generator so raw signals can be dropped as soon as each grid
    is computed; with a cache, previously computed grids are reused.
    """
    key = source.key()
    items = []
    for record in records:
        grid = cache.get(key, record.id) if cache is not None else None
        if grid is None:
            grid = source.grid(record)
            if cache is not None:
                cache.put(key, record.id, grid)
        items.append(GridItem(record.id, record.label, grid))
    return items


# ---------------------------------------------------------------------------
# Patient-disjoint stratified split
# ---------------------------------------------------------------------------

@dataclass
class Split:
    train: list
    val: list
    test: list

    def ids(self) -> dict[str, list[str]]:
        def _ids(items):
            return [getattr(x, "patient_id", None) or x.id for x in items]
        return {"train": _ids(self.train), "val": _ids(self.val),
                "test": _ids(self.test)}


def split_cohort(items: Sequence, seed: int,
                 ratios: tuple[float, float, float] = (0.70, 0.15, 0.15)) -> Split:
    """Stratified-by-label patient split; every patient in exactly one part."""
    if abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) <= 0:
        raise ConfigError(f"split ratios must be positive and sum to 1, got {ratios}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5911]))
    parts: dict[str, list] = {"train": [], "val": [], "test": []}
    for label in (1, 0):
        group = [x for x in items if x.label == label]
        if len(group) < 3:
            raise DataError(f"need >= 3 patients of label {label} to split "
                            f"into three parts, got {len(group)}")
        order = rng.permutation(len(group))
        n = len(group)
        n_val = max(1, round(ratios[1] * n))
        n_test = max(1, round(ratios[2] * n))
        if n - n_val - n_test < 1:
            raise DataError(f"label {label}: split {ratios} leaves no training patients")
        for rank, idx in enumerate(order):
            if rank < n_val:
                parts["val"].append(group[idx])
            elif rank < n_val + n_test:
                parts["test"].append(group[idx])
            else:
                parts["train"].append(group[idx])
    split = Split(parts["train"], parts["val"], parts["test"])
    ids = split.ids()
    seen: set[str] = set()
    for part_ids in ids.values():
        overlap = seen.intersection(part_ids)
        if overlap:
            raise DataError(f"patient leakage across splits: {sorted(overlap)}")
        seen.update(part_ids)
    return split


# ---------------------------------------------------------------------------
# Optimizer: decoupled weight decay + bias-corrected adaptive moments
# ---------------------------------------------------------------------------

@dataclass
class MomentState:
    m: torch.Tensor
    v: torch.Tensor


def optimizer_step(param: torch.Tensor, grad: torch.Tensor, state: MomentState,
                   step: int, lr: float, weight_decay: float = 0.0,
                   betas: tuple[float, float] = (0.9, 0.999),
                   eps: float = 1e-8) -> tuple[torch.Tensor, MomentState]:
    """One update of a single tensor. Pure: returns (new param, new state).

    new = param - lr*weight_decay*param - lr * m_hat / (sqrt(v_hat) + eps)
    with bias-corrected first/second moments m_hat, v_hat.
    """
    if not torch.isfinite(grad).all():
        raise NumericError("non-finite gradient in optimizer step")
    if param.shape != grad.shape or param.shape != state.m.shape:
        raise DataError("parameter/gradient/moment shapes disagree")
    b1, b2 = betas
    m = b1 * state.m + (1 - b1) * grad
    v = b2 * state.v + (1 - b2) * grad * grad
    m_hat = m / (1 - b1 ** step)
    v_hat = v / (1 - b2 ** step)
    new_param = param - lr * weight_decay * param - lr * m_hat / (torch.sqrt(v_hat) + eps)
    return new_param, MomentState(m, v)


class GroupedOptimizer:
    """In-place driver applying optimizer_step with per-group lr/decay."""

    def __init__(self, groups: list[dict]):
        self.groups = []
        self.step_count = 0
        for g in groups:
            params = [p for p in g["params"] if p.requires_grad]
            states = [MomentState(torch.zeros_like(p), torch.zeros_like(p))
                      for p in params]
            self.groups.append({"params": params, "states": states,
                                "lr": g["lr"], "weight_decay": g.get("weight_decay", 0.0)})

    def zero_grad(self):
        for g in self.groups:
            for p in g["params"]:
                p.grad = None

    @torch.no_grad()
    def step(self):
        self.step_count += 1
        for g in self.groups:
            for i, p in enumerate(g["params"]):
                if p.grad is None:
                    continue
                new_p, g["states"][i] = optimizer_step(
                    p, p.grad, g["states"][i], self.step_count,
                    g["lr"], g["weight_decay"])
                p.copy_(new_p)


# ---------------------------------------------------------------------------
# Model bundle
# ---------------------------------------------------------------------------

BUNDLE_VERSION = 1


@dataclass
class ModelBundle:
    aggregator: _AggregatorBase
    source: FeatureSource
    train_config: TrainConfig
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0


def init_bundle(train_config: TrainConfig, source: FeatureSource,
                aggregator_kind: str = "blstm_att", param_budget: int = 30_000,
                n_layers: int = 1, hidden_dim: Optional[int] = None) -> ModelBundle:
    train_config.validate()
    agg_config = AggregatorConfig(kind=aggregator_kind, input_dim=source.dim,
                                  hidden_dim=hidden_dim, n_layers=n_layers,
                                  param_budget=param_budget)
    aggregator = build_aggregator(agg_config, seed=train_config.seed)
    return ModelBundle(aggregator, source, train_config)


def save_bundle(bundle: ModelBundle, path) -> None:
    arrays = {f"agg/{k}": v for k, v in state_dict_arrays(bundle.aggregator).items()}
    source_meta = {"family": bundle.source.family, "seed": bundle.source.seed}
    if bundle.source.family == "extractor":
        arrays.update({f"ext/{k}": v for k, v
                       in state_dict_arrays(bundle.source.extractor).items()})
        source_meta["extractor_config"] = asdict(bundle.source.extractor.config)
    np.savez(path,
             format_version=np.int64(BUNDLE_VERSION),
             agg_config_json=np.bytes_(json.dumps(asdict(bundle.aggregator.config))),
             train_config_json=np.bytes_(json.dumps(asdict(bundle.train_config))),
             source_json=np.bytes_(json.dumps(source_meta)),
             history_json=np.bytes_(json.dumps(bundle.history)),
             best_epoch=np.int64(bundle.best_epoch),
             **arrays)


def load_bundle(path) -> ModelBundle:
    with np.load(path) as data:
        version = int(data["format_version"])
        if version != BUNDLE_VERSION:
            raise DataError(f"unsupported bundle version {version}")
        agg_config = AggregatorConfig(**json.loads(bytes(data["agg_config_json"]).decode()))
        raw_tc = json.loads(bytes(data["train_config_json"]).decode())
        raw_tc["val_hours"] = tuple(raw_tc["val_hours"])
        train_config = TrainConfig(**raw_tc)
        source_meta = json.loads(bytes(data["source_json"]).decode())
        history = json.loads(bytes(data["history_json"]).decode())
        best_epoch = int(data["best_epoch"])
        agg_state = {k[len("agg/"):]: torch.as_tensor(data[k])
                     for k in data.files if k.startswith("agg/")}
        ext_state = {k[len("ext/"):]: torch.as_tensor(data[k])
                     for k in data.files if k.startswith("ext/")}
    aggregator = _construct(agg_config, agg_config.hidden_dim)
    aggregator.load_state_dict(agg_state)
    aggregator.eval()
    extractor = None
    if source_meta["family"] == "extractor":
        extractor = PatchTransformer(ExtractorConfig(**source_meta["extractor_config"]))
        extractor.load_state_dict(ext_state)
        extractor.eval()
    source = FeatureSource(source_meta["family"], extractor, source_meta["seed"])
    return ModelBundle(aggregator, source, train_config, history, best_epoch)


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------

def _pad_grid_batch(seqs: list[np.ndarray]) -> tuple[torch.Tensor, Optional[torch.Tensor]]:
    """Stack variable-length grids: zero-padded (B, Lmax, D) + lengths, or
    (B, L, D) with lengths None when all equal."""
    lengths = [len(s) for s in seqs]
    if min(lengths) == max(lengths):
        return torch.as_tensor(np.stack(seqs), dtype=torch.float32), None
    L = max(lengths)
    out = np.zeros((len(seqs), L, seqs[0].shape[1]), dtype=np.float32)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return torch.as_tensor(out), torch.as_tensor(lengths, dtype=torch.long)


def _epoch_draws(items: Sequence, config: TrainConfig,
                 rng: np.random.Generator) -> list[tuple[int, int, int]]:
    """(item index, start_chunk, end_chunk) draws: fresh windows, shuffled,
    then stably bucketed by length so padded batches stay tight."""
    draws = []
    for i, item in enumerate(items):
        n_chunks = len(item.grid) if isinstance(item, GridItem) \
            else len(item.samples) // CHUNK_SAMPLES
        for _ in range(config.windows_per_patient):
            start, end = sample_chunk_window(n_chunks, config.variant, rng)
            draws.append((i, start, end))
    order = rng.permutation(len(draws))
    draws = [draws[j] for j in order]
    draws.sort(key=lambda d: d[2] - d[1])   # stable: shuffle survives ties
    return draws


def _class_weights(items: Sequence, config: TrainConfig) -> Optional[dict[int, float]]:
    if config.class_weighting == "none":
        return None
    n = len(items)
    n_pos = sum(1 for x in items if x.label == 1)
    n_neg = n - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("inverse-prevalence weighting needs both classes")
    return {1: n / (2.0 * n_pos), 0: n / (2.0 * n_neg)}


# ---------------------------------------------------------------------------
# Scoring on grids (training-time validation and the hourly protocol)
# ---------------------------------------------------------------------------

@torch.no_grad()
def score_grid_windows(aggregator: _AggregatorBase, grids: list[np.ndarray],
                       batch_size: int = 256) -> np.ndarray:
    """Risk probabilities for a list of (L_i, D) grids."""
    aggregator.eval()
    probs = np.empty(len(grids), dtype=np.float64)
    for i in range(0, len(grids), batch_size):
        seq, lengths = _pad_grid_batch(grids[i:i + batch_size])
        logits = aggregator(seq, lengths=lengths)
        probs[i:i + seq.shape[0]] = torch.sigmoid(logits).double().numpy()
    return probs


def grid_hour_scores(aggregator: _AggregatorBase, items: Sequence[GridItem],
                     variant: str, hours: Optional[Sequence[int]] = None) -> dict[int, np.ndarray]:
    """Hourly-alarm scores on precomputed grids: hour -> per-item probabilities."""
    wanted = set(hours) if hours is not None else None
    scores = {}
    for hour, start, end in eval_chunk_bounds(variant):
        if wanted is not None and hour not in wanted:
            continue
        windows = [item.grid[start:end] for item in items]
        scores[hour] = score_grid_windows(aggregator, windows)
    return scores


def hourly_grid_eval(aggregator: _AggregatorBase, items: Sequence[GridItem],
                     variant: str) -> EvalReport:
    """The 24-hour alarm protocol evaluated on precomputed grids."""
    if not items:
        raise DataError("empty evaluation set")
    labels = np.array([item.label for item in items])
    return build_report(grid_hour_scores(aggregator, items, variant), labels)


def make_record_scorer(aggregator: _AggregatorBase, source: FeatureSource,
                       cache: Optional[GridCache] = None) -> Callable:
    """Adapter for evaluation.hourly_eval: scores records via their grids."""
    grids: dict[str, np.ndarray] = {}

    def scorer(records, windows):
        for r in records:
            if r.id not in grids:
                item = build_grid_dataset([r], source, cache)[0]
                grids[r.id] = item.grid
        seqs = [grids[w.patient_id][w.chunk_slice] for w in windows]
        return score_grid_windows(aggregator, seqs)

    return scorer


def _val_metric(aggregator: _AggregatorBase, items: Sequence[GridItem],
                config: TrainConfig) -> float:
    labels = np.array([item.label for item in items])
    scores = grid_hour_scores(aggregator, items, config.variant, config.val_hours)
    return float(np.mean([auroc(scores[h], labels) for h in sorted(scores)]))


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------

def _finite_or_raise(loss: torch.Tensor):
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite training loss {loss.item()!r}")


def _train_epochs(bundle: ModelBundle, split: Split, config: TrainConfig,
                  forward_batch: Callable, log: Optional[Callable]) -> ModelBundle:
    """Shared epoch driver: sampling, batching, optimization, validation,
    best-checkpoint retention, optional early stop."""
    aggregator = bundle.aggregator
    groups = [{"params": list(aggregator.parameters()),
               "lr": config.lr_aggregator, "weight_decay": config.wd_aggregator}]
    if config.extractor_mode == "finetune":
        groups.append({"params": list(bundle.source.extractor.parameters()),
                       "lr": config.lr_extractor, "weight_decay": config.wd_extractor})
    opt = GroupedOptimizer(groups)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x7261]))
    weights = _class_weights(split.train, config)

    best_val = -np.inf
    best_loss = np.inf
    best_state = None
    best_epoch = 0
    history = []
    since_best = 0
    for epoch in range(1, config.epochs + 1):
        aggregator.train()
        if config.extractor_mode == "finetune":
            bundle.source.extractor.train()
        draws = _epoch_draws(split.train, config, rng)
        total_loss = 0.0
        n_seen = 0
        for b in range(0, len(draws), config.batch_size):
            batch = draws[b:b + config.batch_size]
            labels = torch.as_tensor([split.train[i].label for i, _, _ in batch],
                                     dtype=torch.float32)
            logits = forward_batch(batch)
            p = torch.sigmoid(logits)
            w = None
            if weights is not None:
                w = torch.as_tensor([weights[split.train[i].label] for i, _, _ in batch])
            loss = bce_loss(p, labels, weight=w)
            _finite_or_raise(loss)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total_loss += loss.item() * len(batch)
            n_seen += len(batch)
        train_loss = total_loss / n_seen
        val_auroc = _validate(bundle, split, config)
        history.append({"epoch": epoch, "train_loss": train_loss,
                        "val_auroc": val_auroc})
        if log is not None:
            log(f"epoch={epoch} train_loss={train_loss:.6f} val_auroc={val_auroc:.6f}")
        improved = val_auroc > best_val
        # ties broken by train loss: once the val metric saturates, keep the
        # best-fitted weights instead of the first epoch that reached the peak
        if improved or (val_auroc == best_val and train_loss < best_loss):
            best_val = val_auroc
            best_loss = train_loss
            best_epoch = epoch
            best_state = {"agg": copy.deepcopy(aggregator.state_dict())}
            if config.extractor_mode == "finetune":
                best_state["ext"] = copy.deepcopy(bundle.source.extractor.state_dict())
        if improved:
            since_best = 0
        else:
            since_best += 1
            if config.patience and since_best >= config.patience:
                break
    if best_state is not None:
        aggregator.load_state_dict(best_state["agg"])
        if config.extractor_mode == "finetune":
            bundle.source.extractor.load_state_dict(best_state["ext"])
    aggregator.eval()
    if bundle.source.extractor is not None:
        bundle.source.extractor.eval()
    bundle.history = history
    bundle.best_epoch = best_epoch
    bundle.train_config = config
    return bundle


def _validate(bundle: ModelBundle, split: Split, config: TrainConfig) -> float:
    items = split.val
    if items and isinstance(items[0], PatientRecord):
        if config.extractor_mode == "finetune":
            # features move with the extractor: re-embed val windows each epoch
            return _finetune_val(bundle, items, config)
        items = build_grid_dataset(iter(items), bundle.source)
        split.val = items           # frozen features: convert once, reuse
    return _val_metric(bundle.aggregator, items, config)


def _finetune_val(bundle: ModelBundle, records: Sequence[PatientRecord],
                  config: TrainConfig) -> float:
    """Validation AUROC with the current (moving) extractor, embedding only
    the windows that are scored."""
    from .extractor import embed_window
    labels = np.array([r.label for r in records])
    bounds = {hour: (s, e) for hour, s, e in eval_chunk_bounds(config.variant)}
    aurocs = []
    for hour in sorted(config.val_hours):
        s, e = bounds[hour]
        grids = [embed_window(bundle.source.extractor,
                              r.samples[s * CHUNK_SAMPLES:e * CHUNK_SAMPLES])
                 for r in records]
        aurocs.append(auroc(score_grid_windows(bundle.aggregator, grids), labels))
    return float(np.mean(aurocs))


def train(cohort, bundle: ModelBundle, config: Optional[TrainConfig] = None, *,
          split: Optional[Split] = None, cache: Optional[GridCache] = None,
          log: Optional[Callable] = None) -> ModelBundle:
    """Train the bundle's aggregator (and, in finetune mode, its extractor).

    cohort: PatientRecords or precomputed GridItems; ignored when a prebuilt
    split is passed. Frozen mode converts records to grids up front (one
    record resident at a time); finetune mode keeps raw records and encodes
    each sampled window on the fly.
    """
    config = config if config is not None else bundle.train_config
    config.validate()
    if split is None:
        if cohort is None:
            raise DataError("need a cohort or a prebuilt split")
        split = split_cohort(list(cohort), config.seed)
    if not split.train or not split.val:
        raise DataError("empty training or validation split")

    frozen_digest = None
    if bundle.source.family == "extractor" and config.extractor_mode == "frozen":
        frozen_digest = weights_digest(bundle.source.extractor)

    if config.extractor_mode == "finetune":
        if not isinstance(split.train[0], PatientRecord):
            raise DataError("finetune mode needs raw patient records")
        out = _train_epochs(bundle, split, config,
                            _finetune_forward(bundle, split, config), log)
    else:
        if isinstance(split.train[0], PatientRecord):
            split = Split(build_grid_dataset(iter(split.train), bundle.source, cache),
                          split.val, split.test)
        out = _train_epochs(bundle, split, config,
                            _frozen_forward(bundle, split), log)

    if frozen_digest is not None and weights_digest(bundle.source.extractor) != frozen_digest:
        raise NumericError("frozen extractor was mutated during training")
    return out


def _frozen_forward(bundle: ModelBundle, split: Split) -> Callable:
    def forward(batch):
        seqs = [split.train[i].grid[s:e] for i, s, e in batch]
        seq, lengths = _pad_grid_batch(seqs)
        return bundle.aggregator(seq, lengths=lengths)
    return forward


def _finetune_forward(bundle: ModelBundle, split: Split, config: TrainConfig) -> Callable:
    extractor = bundle.source.extractor
    d = extractor.config.d_model

    def forward(batch):
        # all 1H windows: equal length, no padding
        windows = np.stack([
            split.train[i].samples[s * CHUNK_SAMPLES:e * CHUNK_SAMPLES]
            for i, s, e in batch]).reshape(-1, CHUNK_SAMPLES)
        patches = chunks_to_patches(windows)
        hidden, _ = extractor(patches)
        emb = hidden[:, -1, :].reshape(len(batch), CHUNKS_PER_HOUR, d)
        return bundle.aggregator(emb)
    return forward


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_param: str
    per_param: dict[str, float]
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def grad_check(module: torch.nn.Module, loss_fn: Callable[[], torch.Tensor],
               tolerance: float = 1e-4, h: float = 1e-5,
               max_entries_per_param: int = 16, seed: int = 0,
               grad_transform: Optional[Callable] = None) -> GradCheckReport:
    """Central finite differences vs. autograd over every parameter tensor.

    Per entry: |a - n| / (|a| + |n| + floor), where the floor is 1e-4 times
    the tensor's largest analytic gradient (at least 1e-4). The floor keeps
    near-zero entries from amplifying finite-difference roundoff while
    multiplicative errors on significant entries still register. The module
    should be in float64 (module.double()) for the tolerances to be
    meaningful. grad_transform, if given, maps the analytic-gradient dict
    before comparison (used to prove the harness catches wrong gradients).
    """
    params = [(name, p) for name, p in module.named_parameters() if p.requires_grad]
    module.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = {name: (p.grad.detach().clone() if p.grad is not None
                       else torch.zeros_like(p))
                for name, p in params}
    if grad_transform is not None:
        analytic = grad_transform(analytic)
    rng = np.random.default_rng(seed)
    per_param = {}
    worst = ("", 0.0)
    with torch.no_grad():
        for name, p in params:
            flat = p.view(-1)
            k = min(max_entries_per_param, flat.numel())
            idx = rng.choice(flat.numel(), size=k, replace=False)
            floor = 1e-4 * max(1.0, float(analytic[name].abs().max()))
            worst_here = 0.0
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + h
                f_plus = float(loss_fn())
                flat[i] = orig - h
                f_minus = float(loss_fn())
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2 * h)
                a = float(analytic[name].view(-1)[i])
                rel = abs(a - numeric) / (abs(a) + abs(numeric) + floor)
                worst_here = max(worst_here, rel)
            per_param[name] = worst_here
            if worst_here > worst[1]:
                worst = (name, worst_here)
    module.zero_grad()
    return GradCheckReport(max_rel_err=worst[1], worst_param=worst[0],
                           per_param=per_param, tolerance=tolerance)
