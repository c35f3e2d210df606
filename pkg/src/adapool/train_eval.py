"""Training loop, k-fold cross-validation and loss reports.

Protocol: a fixed holdout is carved out of the dataset, the rest is split
into ``folds`` parts.  Each fold trains one model per pooling method on the
other parts, keeps the checkpoint with the lowest validation loss and scores
it on the holdout.  All methods trained on a fold start from the same
encoder weights; the init seed changes between folds.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .datagen import Dataset
from .encoder import POOL_METHODS, EncoderConfig, ModelState, forward, predict, save_checkpoint
from .tasks import LabelSet, baseline_losses

log = logging.getLogger(__name__)

REPORT_FIELDS = ["method", "k", "snr", "mean_loss", "std", "baseline_centroid", "baseline_target", "seconds"]


class TrainConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 750
    lr: float = 5e-4
    folds: int = 5
    holdout_fraction: float = 0.1
    seed: int = 0
    k_list: tuple = (1,)
    methods: tuple = POOL_METHODS
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    eval_batch_size: int = 1024

    def __post_init__(self):
        object.__setattr__(self, "k_list", tuple(int(k) for k in self.k_list))
        object.__setattr__(self, "methods", tuple(self.methods))
        if self.folds < 2:
            raise TrainConfigError("folds must be >= 2")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise TrainConfigError("batch sizes must be >= 1")
        if not self.lr >= 0:
            raise TrainConfigError("lr must be >= 0")
        if self.epochs < 0:
            raise TrainConfigError("epochs must be >= 0")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise TrainConfigError("holdout_fraction must lie in (0, 1)")
        bad = [m for m in self.methods if m not in POOL_METHODS]
        if bad or not self.methods:
            raise TrainConfigError(f"unknown pooling methods {bad}")
        if not self.k_list or min(self.k_list) < 1:
            raise TrainConfigError("k_list must hold positive neighbour counts")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["k_list"] = list(self.k_list)
        d["methods"] = list(self.methods)
        d["encoder"] = self.encoder.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "encoder" in d and not isinstance(d["encoder"], EncoderConfig):
            d["encoder"] = EncoderConfig.from_dict(d["encoder"])
        return cls(**d)


def derive_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1, np.uint32)[0])


def fold_init_seed(cfg: TrainConfig, fold: int) -> int:
    return derive_seed(cfg.seed, 2, fold)


def split_indices(count: int, cfg: TrainConfig) -> tuple[np.ndarray, list[np.ndarray]]:
    """Sorted holdout indices and the fold partition of the remaining pool."""
    perm = np.random.default_rng([cfg.seed, 4]).permutation(count)
    n_hold = int(round(cfg.holdout_fraction * count))
    pool = perm[n_hold:]
    if n_hold < 1 or len(pool) < cfg.folds:
        raise TrainConfigError(f"{count} samples cannot supply a holdout and {cfg.folds} folds")
    return np.sort(perm[:n_hold]), [np.sort(f) for f in np.array_split(pool, cfg.folds)]


def prediction_loss(pred: np.ndarray, y: np.ndarray) -> float:
    """Mean over samples of the element-mean squared distance to the signal centroid."""
    pred = np.asarray(pred, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if pred.shape != y.shape:
        raise ValueError(f"prediction {pred.shape} vs target {y.shape}")
    return float(((pred - y) ** 2).mean())


def evaluate(state: ModelState, x: np.ndarray, target_index: np.ndarray, y: np.ndarray,
             batch_size: int = 1024) -> float:
    return prediction_loss(predict(x, state, target_index, batch_size), y)


@dataclass
class FoldResult:
    state: ModelState
    best_epoch: int
    best_val: float
    val_history: list  # entry 0 is the untrained model
    train_history: list

    @property
    def best_so_far(self) -> list:
        return list(np.minimum.accumulate(self.val_history))


def train_fold(x: np.ndarray, labels: LabelSet, train_idx, val_idx, enc_cfg: EncoderConfig,
               cfg: TrainConfig, rng: np.random.Generator | None = None) -> FoldResult:
    """Train one model; return the checkpoint with the lowest validation loss.

    ``x`` is the full ``(S, N, d)`` float64 array, indexed by the split arrays.
    """
    train_idx = np.asarray(train_idx)
    val_idx = np.asarray(val_idx)
    if np.intersect1d(train_idx, val_idx).size:
        raise TrainConfigError("train and validation splits overlap")
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    state = ModelState.init(enc_cfg)
    opt = T.Adam(state.parameters(), lr=cfg.lr)
    tgt, y = labels.target_index, labels.y

    def val_loss():
        return evaluate(state, x[val_idx], tgt[val_idx], y[val_idx], cfg.eval_batch_size)

    best, best_epoch = val_loss(), 0
    best_snap = state.snapshot()
    val_hist, train_hist = [best], []
    for epoch in range(1, cfg.epochs + 1):
        order = train_idx[rng.permutation(len(train_idx))]
        total = 0.0
        for lo in range(0, len(order), cfg.batch_size):
            b = order[lo:lo + cfg.batch_size]
            opt.zero_grad()
            loss = T.mse(forward(x[b], state, tgt[b], training=True, rng=rng), y[b])
            loss.backward()
            opt.step()
            total += loss.item() * len(b)
        train_hist.append(total / len(order))
        v = val_loss()
        val_hist.append(v)
        if v < best:
            best, best_epoch, best_snap = v, epoch, state.snapshot()
        log.info("epoch %d train %.5f val %.5f", epoch, train_hist[-1], v)
    state.load_snapshot(best_snap)
    return FoldResult(state, best_epoch, best, val_hist, train_hist)


@dataclass
class EvalReport:
    rows: list  # dicts keyed by REPORT_FIELDS
    folds: list  # per (method, k, fold) detail
    config: dict
    config_hash: str

    def to_json(self, timing: bool = True) -> str:
        rows = self.rows
        folds = self.folds
        if not timing:
            rows = [{k: v for k, v in r.items() if k != "seconds"} for r in rows]
            folds = [{k: v for k, v in f.items() if k != "seconds"} for f in folds]
        doc = {"config_hash": self.config_hash, "config": self.config, "rows": rows, "folds": folds}
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=REPORT_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
        return buf.getvalue()

    def write(self, out_dir, stem: str = "report") -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        c, j = out / f"{stem}.csv", out / f"{stem}.json"
        c.write_text(self.to_csv())
        j.write_text(self.to_json())
        return c, j

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        doc = json.loads(text)
        return cls(doc["rows"], doc["folds"], doc["config"], doc["config_hash"])

    def loss(self, method: str, k: int) -> float:
        for r in self.rows:
            if r["method"] == method and r["k"] == k:
                return r["mean_loss"]
        raise KeyError((method, k))


def config_hash(ds: Dataset, cfg: TrainConfig, labels: dict | None = None) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(cfg.to_dict(), sort_keys=True).encode())
    h.update(json.dumps(ds.header(), sort_keys=True).encode())
    h.update(np.ascontiguousarray(ds.data).tobytes())
    for k in sorted(labels or {}):
        lab = labels[k]
        h.update(lab.kind.encode())
        h.update(lab.target_index.tobytes())
        h.update(lab.y.tobytes())
    return h.hexdigest()


def cross_validate(ds: Dataset, labels: dict, cfg: TrainConfig, ckpt_dir=None) -> EvalReport:
    """Run the full protocol.  ``labels`` maps each k in ``cfg.k_list`` to its LabelSet."""
    missing = [k for k in cfg.k_list if k not in labels]
    if missing:
        raise TrainConfigError(f"no labels for k={missing}")
    enc = replace(cfg.encoder, dim_input=ds.d)
    holdout, folds = split_indices(ds.count, cfg)
    x = ds.data.astype(np.float64)
    rows, fold_rows = [], []
    for k in cfg.k_list:
        lab = labels[k]
        base_c, base_t = baseline_losses(ds, lab, holdout)
        for method in cfg.methods:
            t0 = time.perf_counter()
            losses = []
            for j in range(cfg.folds):
                t1 = time.perf_counter()
                train_idx = np.concatenate([f for i, f in enumerate(folds) if i != j])
                mcfg = replace(enc, pool_method=method, seed=fold_init_seed(cfg, j))
                rng = np.random.default_rng([cfg.seed, 3, j])
                res = train_fold(x, lab, train_idx, folds[j], mcfg, cfg, rng)
                hold = evaluate(res.state, x[holdout], lab.target_index[holdout], lab.y[holdout],
                                cfg.eval_batch_size)
                losses.append(hold)
                if ckpt_dir is not None:
                    Path(ckpt_dir).mkdir(parents=True, exist_ok=True)
                    save_checkpoint(Path(ckpt_dir) / f"{method}_k{k}_fold{j}.ckpt", res.state,
                                    {"k": k, "fold": j, "best_epoch": res.best_epoch})
                fold_rows.append({"method": method, "k": k, "fold": j, "holdout_loss": hold,
                                  "best_epoch": res.best_epoch, "best_val": res.best_val,
                                  "val_history": res.val_history, "seconds": time.perf_counter() - t1})
                log.info("%s k=%d fold %d holdout %.5f (best epoch %d)", method, k, j, hold, res.best_epoch)
            rows.append({"method": method, "k": k, "snr": k / ds.N, "mean_loss": float(np.mean(losses)),
                         "std": float(np.std(losses)), "baseline_centroid": base_c,
                         "baseline_target": base_t, "seconds": time.perf_counter() - t0})
    return EvalReport(rows, fold_rows, cfg.to_dict(), config_hash(ds, cfg, labels))
